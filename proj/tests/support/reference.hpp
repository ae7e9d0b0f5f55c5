#pragma once

// Straight-line reference implementations used as test oracles. They share no
// code with the library ops: plain loops over std::vector, dense masks, and
// both branches evaluated for every token.

#include <cmath>
#include <cstddef>
#include <vector>

#include "flexidepth/model.hpp"

namespace ref {

struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  double& operator()(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

inline Mat from(const flexidepth::Tensor& t) {
  Mat m(t.rows(), t.cols());
  const auto d = t.data();
  m.v.assign(d.begin(), d.end());
  return m;
}

inline std::vector<double> vec(const flexidepth::Tensor& t) { return {t.data().begin(), t.data().end()}; }

// x[T x in] times w[out x in]^T.
inline Mat linear(const Mat& x, const Mat& w) {
  Mat y(x.rows, w.rows);
  for (std::size_t t = 0; t < x.rows; ++t)
    for (std::size_t o = 0; o < w.rows; ++o) {
      double s = 0.0;
      for (std::size_t i = 0; i < x.cols; ++i) s += x(t, i) * w(o, i);
      y(t, o) = s;
    }
  return y;
}

inline Mat add(const Mat& a, const Mat& b) {
  Mat y = a;
  for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] += b.v[i];
  return y;
}

inline Mat rmsnorm(const Mat& x, const std::vector<double>& scale, double eps) {
  Mat y(x.rows, x.cols);
  for (std::size_t t = 0; t < x.rows; ++t) {
    double ms = 0.0;
    for (std::size_t i = 0; i < x.cols; ++i) ms += x(t, i) * x(t, i);
    ms /= static_cast<double>(x.cols);
    const double r = 1.0 / std::sqrt(ms + eps);
    for (std::size_t i = 0; i < x.cols; ++i) y(t, i) = x(t, i) * r * scale[i];
  }
  return y;
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline Mat gated_ffn(const Mat& x, const Mat& wg, const Mat& wu, const Mat& wd) {
  Mat g = linear(x, wg), u = linear(x, wu);
  Mat h(g.rows, g.cols);
  for (std::size_t i = 0; i < h.v.size(); ++i) h.v[i] = g.v[i] * sigmoid(g.v[i]) * u.v[i];
  return linear(h, wd);
}

inline Mat rope(const Mat& x, std::size_t first_position, std::size_t n_heads, double base) {
  const std::size_t hd = x.cols / n_heads;
  Mat y = x;
  for (std::size_t t = 0; t < x.rows; ++t) {
    const double pos = static_cast<double>(first_position + t);
    for (std::size_t h = 0; h < n_heads; ++h)
      for (std::size_t i = 0; i < hd / 2; ++i) {
        const double theta = pos / std::pow(base, 2.0 * static_cast<double>(i) / static_cast<double>(hd));
        const std::size_t c = h * hd + 2 * i;
        y(t, c) = x(t, c) * std::cos(theta) - x(t, c + 1) * std::sin(theta);
        y(t, c + 1) = x(t, c) * std::sin(theta) + x(t, c + 1) * std::cos(theta);
      }
  }
  return y;
}

// Dense attention for all T rows; mask[i][j] says whether row i sees key j.
// Rows with no visible keys come back as zeros. `probs`, when given, receives
// [n_heads][T][T].
inline Mat masked_attention(const Mat& q, const Mat& k, const Mat& v, const std::vector<std::vector<char>>& mask,
                            std::size_t n_heads, std::vector<std::vector<std::vector<double>>>* probs = nullptr) {
  const std::size_t T = q.rows, hd = q.cols / n_heads;
  Mat out(T, q.cols);
  if (probs) probs->assign(n_heads, std::vector<std::vector<double>>(T, std::vector<double>(T, 0.0)));
  for (std::size_t h = 0; h < n_heads; ++h)
    for (std::size_t i = 0; i < T; ++i) {
      std::vector<double> s(T, 0.0);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < T; ++j) {
        if (!mask[i][j]) continue;
        double dot = 0.0;
        for (std::size_t c = 0; c < hd; ++c) dot += q(i, h * hd + c) * k(j, h * hd + c);
        s[j] = dot / std::sqrt(static_cast<double>(hd));
        mx = std::max(mx, s[j]);
      }
      if (mx == -INFINITY) continue;
      double z = 0.0;
      for (std::size_t j = 0; j < T; ++j) {
        s[j] = mask[i][j] ? std::exp(s[j] - mx) : 0.0;
        z += s[j];
      }
      for (std::size_t j = 0; j < T; ++j) {
        const double p = s[j] / z;
        if (probs) (*probs)[h][i][j] = p;
        for (std::size_t c = 0; c < hd; ++c) out(i, h * hd + c) += p * v(j, h * hd + c);
      }
    }
  return out;
}

struct Block {
  std::vector<double> attn_norm, ffn_norm;
  Mat wq, wk, wv, wo, wg, wu, wd;
};

inline Block block(const flexidepth::FrozenBlockParams& p) {
  return {vec(p.attn_norm), vec(p.ffn_norm), from(p.wq), from(p.wk), from(p.wv), from(p.wo),
          from(p.w_gate),   from(p.w_up),    from(p.w_down)};
}

// Attention sublayer over a whole sequence starting at position 0. Row j is a
// visible key for row i iff j <= i and keep_kv[j].
inline Mat attention_sublayer(const Mat& xn, const Block& b, const std::vector<char>& keep_kv,
                              const flexidepth::BlockConfig& cfg,
                              std::vector<std::vector<std::vector<double>>>* probs = nullptr) {
  Mat q = linear(xn, b.wq), k = linear(xn, b.wk), v = linear(xn, b.wv);
  if (cfg.position_encoding == flexidepth::PositionEncoding::rope) {
    q = rope(q, 0, cfg.n_heads, cfg.rope_base);
    k = rope(k, 0, cfg.n_heads, cfg.rope_base);
  }
  const std::size_t T = xn.rows;
  std::vector<std::vector<char>> mask(T, std::vector<char>(T, 0));
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j <= i; ++j) mask[i][j] = (keep_kv[j] || j == i) ? 1 : 0;
  return linear(masked_attention(q, k, v, mask, cfg.n_heads, probs), b.wo);
}

inline Mat block_forward(const Mat& x, const Block& b, const flexidepth::BlockConfig& cfg) {
  const Mat h = add(x, attention_sublayer(rmsnorm(x, b.attn_norm, cfg.norm_eps), b, std::vector<char>(x.rows, 1), cfg));
  return add(h, gated_ffn(rmsnorm(h, b.ffn_norm, cfg.norm_eps), b.wg, b.wu, b.wd));
}

inline std::vector<double> router_gates(const Mat& x, const flexidepth::RouterParams& r, bool linear_router) {
  const Mat xn = rmsnorm(x, vec(r.pre_norm), flexidepth::kRouterNormEps);
  const double bias = r.head_bias.defined() ? r.head_bias.data()[0] : 0.0;
  Mat z;
  if (linear_router) {
    z = linear(xn, from(r.w_head));
  } else {
    Mat a = linear(xn, from(r.w_down));
    for (auto& e : a.v) e = std::tanh(e);
    z = linear(linear(rmsnorm(a, vec(r.inner_norm), flexidepth::kRouterNormEps), from(r.w_up)), from(r.w_head));
  }
  std::vector<double> g(x.rows);
  for (std::size_t t = 0; t < x.rows; ++t) g[t] = sigmoid(z(t, 0) + bias);
  return g;
}

struct LayerOut {
  Mat out;
  std::vector<double> gates;
  std::vector<char> full;
  std::vector<std::vector<std::vector<double>>> probs;
};

// FlexiDepth layer over a whole sequence: both branches for every token, then
// a per-token selection. `forced_skip` may be empty.
inline LayerOut flexi_layer(const Mat& x, const flexidepth::FlexiLayer& layer, const flexidepth::BlockConfig& cfg,
                            double tau, const std::vector<char>& forced_skip = {},
                            const double* gate_override = nullptr) {
  const std::size_t T = x.rows, d = x.cols;
  const Block b = block(layer.frozen);
  LayerOut r;
  r.gates = gate_override ? std::vector<double>(T, *gate_override) : router_gates(x, layer.router, layer.flags.linear_router);
  r.full.resize(T);
  for (std::size_t t = 0; t < T; ++t) r.full[t] = r.gates[t] > tau && !(forced_skip.size() && forced_skip[t]);

  const std::vector<char> keep = layer.flags.no_kv_cache ? r.full : std::vector<char>(T, 1);
  const Mat xn = rmsnorm(x, b.attn_norm, cfg.norm_eps);
  const Mat h = add(x, attention_sublayer(xn, b, keep, cfg, &r.probs));
  const Mat ffn = gated_ffn(rmsnorm(h, b.ffn_norm, cfg.norm_eps), b.wg, b.wu, b.wd);
  const Mat adapted = gated_ffn(rmsnorm(x, b.ffn_norm, cfg.norm_eps), from(layer.adapter.w_gate),
                                from(layer.adapter.w_up), from(layer.adapter.w_down));
  r.out = Mat(T, d);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < d; ++c) {
      if (r.full[t]) {
        r.out(t, c) = r.gates[t] * ffn(t, c) + h(t, c);
      } else if (layer.flags.no_adapter) {
        r.out(t, c) = x(t, c);
      } else {
        r.out(t, c) = (1.0 - r.gates[t]) * adapted(t, c) + x(t, c);
      }
    }
  return r;
}

struct ModelOut {
  Mat logits;
  std::vector<std::vector<double>> gates;  // [token][flexi layer]
  std::vector<std::vector<char>> full;
};

inline ModelOut model_forward(const flexidepth::Model& m, const std::vector<int>& tokens,
                              const double* gate_override = nullptr) {
  const auto& c = m.config;
  const auto cfg = c.block_config();
  const std::size_t T = tokens.size();
  const Mat emb = from(m.embedding);
  Mat x(T, c.d_model);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < c.d_model; ++i) x(t, i) = emb(static_cast<std::size_t>(tokens[t]), i);
  ModelOut out;
  out.gates.assign(T, {});
  out.full.assign(T, {});
  std::vector<char> latched(T, 0);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    if (c.mode == flexidepth::Mode::vanilla || l < c.flexi_start) {
      x = block_forward(x, block(m.blocks[l]), cfg);
      continue;
    }
    const auto layer = m.flexi_layer(l - c.flexi_start);
    const bool exit_mode = c.mode == flexidepth::Mode::flexiexit;
    LayerOut lo = flexi_layer(x, layer, cfg, c.tau, exit_mode ? latched : std::vector<char>{}, gate_override);
    for (std::size_t t = 0; t < T; ++t) {
      out.gates[t].push_back(lo.gates[t]);
      out.full[t].push_back(lo.full[t]);
      if (exit_mode && !lo.full[t]) latched[t] = 1;
    }
    x = lo.out;
  }
  out.logits = linear(rmsnorm(x, vec(m.final_norm), c.norm_eps), emb);
  return out;
}

// Brute-force gate penalty: mean over tokens of the squared per-token gate sum.
inline double skip_loss(const std::vector<std::vector<double>>& G) {
  double acc = 0.0;
  for (const auto& row : G) {
    double s = 0.0;
    for (double g : row) s += g;
    acc += s * s;
  }
  return acc * (1.0 / static_cast<double>(G.size()));
}

}  // namespace ref
