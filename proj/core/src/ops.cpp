#include "flexidepth/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "flexidepth/errors.hpp"

namespace flexidepth {

namespace {

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using Strided = Eigen::OuterStride<>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Strided>;
using MutStridedMap = Eigen::Map<RowMat, 0, Strided>;

// Wraps freshly computed values into a tensor and, when any input tracks
// gradients, attaches the backward closure.
Tensor finish(Shape shape, std::vector<double> data, std::vector<ImplPtr> inputs,
              std::function<void(TensorImpl&)> backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  const bool tracked =
      std::any_of(inputs.begin(), inputs.end(), [](const ImplPtr& p) { return p->requires_grad; });
  if (tracked) {
    out.impl()->requires_grad = true;
    auto node = std::make_shared<detail::Node>();
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    out.impl()->node = std::move(node);
  }
  return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw InvalidArgument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
  }
}

void require_matrix(const Tensor& x, const char* op) {
  if (x.rank() != 2) {
    throw InvalidArgument(std::string(op) + ": expected a matrix, got " + shape_string(x.shape()));
  }
}

ConstMap as_matrix(const TensorImpl& t, std::size_t rows, std::size_t cols) {
  return ConstMap(t.data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MutMap grad_matrix(TensorImpl& t, std::size_t rows, std::size_t cols) {
  return MutMap(t.grad_buffer().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  auto xi = x.impl();
  std::vector<double> out(xi->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xi->data[i]);
  return finish(x.shape(), std::move(out), {xi}, [xi, deriv](TensorImpl& o) {
    if (!xi->requires_grad) return;
    auto& g = xi->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * deriv(xi->data[i], o.data[i]);
  });
}

double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto ai = a.impl(), bi = b.impl();
  std::vector<double> out(ai->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ai->data[i] + bi->data[i];
  return finish(a.shape(), std::move(out), {ai, bi}, [ai, bi](TensorImpl& o) {
    for (auto* p : {ai.get(), bi.get()}) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto ai = a.impl(), bi = b.impl();
  std::vector<double> out(ai->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ai->data[i] * bi->data[i];
  return finish(a.shape(), std::move(out), {ai, bi}, [ai, bi](TensorImpl& o) {
    if (ai->requires_grad) {
      auto& g = ai->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      auto& g = bi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * ai->data[i];
    }
  });
}

Tensor add_scalar(const Tensor& x, const Tensor& b) {
  if (b.numel() != 1) throw InvalidArgument("add_scalar: bias must have one element");
  auto xi = x.impl(), bi = b.impl();
  std::vector<double> out(xi->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xi->data[i] + bi->data[0];
  return finish(x.shape(), std::move(out), {xi, bi}, [xi, bi](TensorImpl& o) {
    if (xi->requires_grad) {
      auto& g = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (bi->requires_grad) {
      double acc = 0.0;
      for (double v : o.grad) acc += v;
      bi->grad_buffer()[0] += acc;
    }
  });
}

Tensor scale(const Tensor& x, double factor) { return affine(x, factor, 0.0); }

Tensor affine(const Tensor& x, double factor, double offset) {
  return unary(
      x, [=](double v) { return offset + factor * v; }, [=](double, double) { return factor; });
}

Tensor square(const Tensor& x) {
  return unary(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor sum(const Tensor& x) {
  auto xi = x.impl();
  double total = 0.0;
  for (double v : xi->data) total += v;
  return finish({1}, {total}, {xi}, [xi](TensorImpl& o) {
    if (!xi->requires_grad) return;
    auto& g = xi->grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw InvalidArgument("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor row_sum(const Tensor& x) {
  require_matrix(x, "row_sum");
  auto xi = x.impl();
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += xi->data[r * cols + c];
    out[r] = acc;
  }
  return finish({rows}, std::move(out), {xi}, [xi, rows, cols](TensorImpl& o) {
    if (!xi->requires_grad) return;
    auto& g = xi->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += o.grad[r];
  });
}

Tensor linear(const Tensor& x, const Tensor& w) {
  require_matrix(x, "linear");
  require_matrix(w, "linear");
  const std::size_t T = x.rows(), in = x.cols(), out = w.rows();
  if (w.cols() != in) {
    throw InvalidArgument("linear: input width " + std::to_string(in) + " vs weight " +
                          shape_string(w.shape()));
  }
  auto xi = x.impl(), wi = w.impl();
  std::vector<double> y(T * out);
  MutMap(y.data(), T, out).noalias() = as_matrix(*xi, T, in) * as_matrix(*wi, out, in).transpose();
  return finish({T, out}, std::move(y), {xi, wi}, [xi, wi, T, in, out](TensorImpl& o) {
    ConstMap dy(o.grad.data(), T, out);
    if (xi->requires_grad) grad_matrix(*xi, T, in).noalias() += dy * as_matrix(*wi, out, in);
    if (wi->requires_grad) grad_matrix(*wi, out, in).noalias() += dy.transpose() * as_matrix(*xi, T, in);
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw InvalidArgument("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  auto ai = a.impl(), bi = b.impl();
  std::vector<double> y(m * n);
  MutMap(y.data(), m, n).noalias() = as_matrix(*ai, m, k) * as_matrix(*bi, k, n);
  return finish({m, n}, std::move(y), {ai, bi}, [ai, bi, m, k, n](TensorImpl& o) {
    ConstMap dy(o.grad.data(), m, n);
    if (ai->requires_grad) grad_matrix(*ai, m, k).noalias() += dy * as_matrix(*bi, k, n).transpose();
    if (bi->requires_grad) grad_matrix(*bi, k, n).noalias() += as_matrix(*ai, m, k).transpose() * dy;
  });
}

Tensor gather_rows(const Tensor& x, std::span<const Index> rows) {
  require_matrix(x, "gather_rows");
  const std::size_t n = x.rows(), d = x.cols();
  for (auto r : rows) {
    if (r >= n) throw InvalidArgument("gather_rows: row " + std::to_string(r) + " out of range");
  }
  auto xi = x.impl();
  IndexList idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(xi->data.begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  return finish({idx.size(), d}, std::move(out), {xi}, [xi, idx, d](TensorImpl& o) {
    if (!xi->requires_grad) return;
    auto& g = xi->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) g[idx[i] * d + c] += o.grad[i * d + c];
  });
}

Tensor concat_rows(const Tensor& top, const Tensor& bottom) {
  require_matrix(top, "concat_rows");
  require_matrix(bottom, "concat_rows");
  if (top.cols() != bottom.cols()) throw InvalidArgument("concat_rows: column mismatch");
  auto ti = top.impl(), bi = bottom.impl();
  const std::size_t d = top.cols(), nt = top.rows(), nb = bottom.rows();
  std::vector<double> out;
  out.reserve((nt + nb) * d);
  out.insert(out.end(), ti->data.begin(), ti->data.end());
  out.insert(out.end(), bi->data.begin(), bi->data.end());
  return finish({nt + nb, d}, std::move(out), {ti, bi}, [ti, bi, nt, d](TensorImpl& o) {
    if (ti->requires_grad) {
      auto& g = ti->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (bi->requires_grad) {
      auto& g = bi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[nt * d + i];
    }
  });
}

Tensor scatter_rows(std::size_t n_rows, const std::vector<std::pair<Tensor, IndexList>>& parts) {
  std::size_t d = 0;
  bool have_width = false;
  std::vector<char> written(n_rows, 0);
  for (const auto& [part, idx] : parts) {
    require_matrix(part, "scatter_rows");
    if (part.rows() != idx.size()) throw InvalidArgument("scatter_rows: index count does not match rows");
    if (idx.empty()) continue;
    if (have_width && part.cols() != d) throw InvalidArgument("scatter_rows: column mismatch");
    d = part.cols();
    have_width = true;
    for (auto r : idx) {
      if (r >= n_rows || written[r]) throw InvalidArgument("scatter_rows: row written twice or out of range");
      written[r] = 1;
    }
  }
  if (std::find(written.begin(), written.end(), 0) != written.end()) {
    throw InvalidArgument("scatter_rows: unwritten output row");
  }
  std::vector<double> out(n_rows * d);
  std::vector<ImplPtr> inputs;
  std::vector<IndexList> maps;
  for (const auto& [part, idx] : parts) {
    if (idx.empty()) continue;
    const auto& src = part.impl()->data;
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(i * d), d,
                  out.begin() + static_cast<std::ptrdiff_t>(idx[i] * d));
    inputs.push_back(part.impl());
    maps.push_back(idx);
  }
  auto captured = inputs;
  return finish({n_rows, d}, std::move(out), std::move(inputs), [captured, maps, d](TensorImpl& o) {
    for (std::size_t k = 0; k < captured.size(); ++k) {
      if (!captured[k]->requires_grad) continue;
      auto& g = captured[k]->grad_buffer();
      for (std::size_t i = 0; i < maps[k].size(); ++i)
        for (std::size_t c = 0; c < d; ++c) g[i * d + c] += o.grad[maps[k][i] * d + c];
    }
  });
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  require_matrix(x, "scale_rows");
  const std::size_t T = x.rows(), d = x.cols();
  if (s.numel() != T) throw InvalidArgument("scale_rows: need one scale per row");
  auto xi = x.impl(), si = s.impl();
  std::vector<double> out(T * d);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < d; ++c) out[t * d + c] = si->data[t] * xi->data[t * d + c];
  return finish({T, d}, std::move(out), {xi, si}, [xi, si, T, d](TensorImpl& o) {
    if (xi->requires_grad) {
      auto& g = xi->grad_buffer();
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < d; ++c) g[t * d + c] += o.grad[t * d + c] * si->data[t];
    }
    if (si->requires_grad) {
      auto& g = si->grad_buffer();
      for (std::size_t t = 0; t < T; ++t) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) acc += o.grad[t * d + c] * xi->data[t * d + c];
        g[t] += acc;
      }
    }
  });
}

Tensor stack_columns(const std::vector<Tensor>& columns) {
  if (columns.empty()) throw InvalidArgument("stack_columns: no columns");
  const std::size_t T = columns.front().numel(), K = columns.size();
  std::vector<ImplPtr> inputs;
  std::vector<double> out(T * K);
  for (std::size_t k = 0; k < K; ++k) {
    if (columns[k].numel() != T) throw InvalidArgument("stack_columns: column length mismatch");
    const auto& src = columns[k].impl()->data;
    for (std::size_t t = 0; t < T; ++t) out[t * K + k] = src[t];
    inputs.push_back(columns[k].impl());
  }
  auto captured = inputs;
  return finish({T, K}, std::move(out), std::move(inputs), [captured, T, K](TensorImpl& o) {
    for (std::size_t k = 0; k < K; ++k) {
      if (!captured[k]->requires_grad) continue;
      auto& g = captured[k]->grad_buffer();
      for (std::size_t t = 0; t < T; ++t) g[t] += o.grad[t * K + k];
    }
  });
}

Tensor rmsnorm(const Tensor& x, const Tensor& scale_vec, double eps) {
  require_matrix(x, "rmsnorm");
  if (eps < 0) throw InvalidArgument("rmsnorm: eps must be non-negative");
  const std::size_t T = x.rows(), d = x.cols();
  if (scale_vec.numel() != d) {
    throw InvalidArgument("rmsnorm: scale has " + std::to_string(scale_vec.numel()) + " entries, rows have " +
                          std::to_string(d));
  }
  auto xi = x.impl(), si = scale_vec.impl();
  std::vector<double> inv_rms(T);
  std::vector<double> out(T * d);
  for (std::size_t t = 0; t < T; ++t) {
    const double* row = xi->data.data() + t * d;
    double ss = 0.0;
    for (std::size_t c = 0; c < d; ++c) ss += row[c] * row[c];
    const double r = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    inv_rms[t] = r;
    for (std::size_t c = 0; c < d; ++c) out[t * d + c] = row[c] * r * si->data[c];
  }
  return finish({T, d}, std::move(out), {xi, si}, [xi, si, inv_rms, T, d](TensorImpl& o) {
    std::vector<double> xhat(d);
    for (std::size_t t = 0; t < T; ++t) {
      const double r = inv_rms[t];
      const double* row = xi->data.data() + t * d;
      const double* dy = o.grad.data() + t * d;
      for (std::size_t c = 0; c < d; ++c) xhat[c] = row[c] * r;
      if (si->requires_grad) {
        auto& gs = si->grad_buffer();
        for (std::size_t c = 0; c < d; ++c) gs[c] += dy[c] * xhat[c];
      }
      if (xi->requires_grad) {
        double proj = 0.0;
        for (std::size_t c = 0; c < d; ++c) proj += dy[c] * si->data[c] * xhat[c];
        proj /= static_cast<double>(d);
        auto& gx = xi->grad_buffer();
        for (std::size_t c = 0; c < d; ++c) gx[t * d + c] += r * (dy[c] * si->data[c] - xhat[c] * proj);
      }
    }
  });
}

Tensor swiglu(const Tensor& gate, const Tensor& up) {
  require_same_shape(gate, up, "swiglu");
  auto gi = gate.impl(), ui = up.impl();
  const std::size_t n = gi->data.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = gi->data[i];
    out[i] = a * sigmoid_scalar(a) * ui->data[i];
  }
  return finish(gate.shape(), std::move(out), {gi, ui}, [gi, ui, n](TensorImpl& o) {
    for (std::size_t i = 0; i < n; ++i) {
      const double a = gi->data[i];
      const double s = sigmoid_scalar(a);
      if (gi->requires_grad) gi->grad_buffer()[i] += o.grad[i] * ui->data[i] * (s + a * s * (1.0 - s));
      if (ui->requires_grad) ui->grad_buffer()[i] += o.grad[i] * a * s;
    }
  });
}

Tensor gated_ffn(const Tensor& x, const Tensor& w_gate, const Tensor& w_up, const Tensor& w_down) {
  if (w_gate.shape() != w_up.shape()) throw InvalidArgument("gated_ffn: gate/up shape mismatch");
  if (w_down.rank() != 2 || w_down.cols() != w_gate.rows() || w_down.rows() != w_gate.cols()) {
    throw InvalidArgument("gated_ffn: down projection " + shape_string(w_down.shape()) +
                          " does not match gate " + shape_string(w_gate.shape()));
  }
  return linear(swiglu(linear(x, w_gate), linear(x, w_up)), w_down);
}

Tensor rope(const Tensor& x, std::span<const Index> positions, std::size_t n_heads, double base) {
  require_matrix(x, "rope");
  const std::size_t T = x.rows(), d = x.cols();
  if (n_heads == 0 || d % n_heads != 0) throw InvalidArgument("rope: width not divisible by heads");
  const std::size_t hd = d / n_heads;
  if (hd % 2 != 0) throw InvalidArgument("rope: head width must be even");
  if (positions.size() != T) throw InvalidArgument("rope: need one position per row");
  // cos/sin table per (row, pair); shared by forward and backward.
  const std::size_t pairs = hd / 2;
  std::vector<double> cosv(T * pairs), sinv(T * pairs);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < pairs; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      const double angle = static_cast<double>(positions[t]) * freq;
      cosv[t * pairs + i] = std::cos(angle);
      sinv[t * pairs + i] = std::sin(angle);
    }
  }
  auto xi = x.impl();
  std::vector<double> out(T * d);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t h = 0; h < n_heads; ++h)
      for (std::size_t i = 0; i < pairs; ++i) {
        const std::size_t c = t * d + h * hd + 2 * i;
        const double a = xi->data[c], b = xi->data[c + 1];
        const double cs = cosv[t * pairs + i], sn = sinv[t * pairs + i];
        out[c] = a * cs - b * sn;
        out[c + 1] = a * sn + b * cs;
      }
  return finish({T, d}, std::move(out), {xi},
                [xi, cosv = std::move(cosv), sinv = std::move(sinv), T, d, n_heads, hd, pairs](TensorImpl& o) {
                  if (!xi->requires_grad) return;
                  auto& g = xi->grad_buffer();
                  for (std::size_t t = 0; t < T; ++t)
                    for (std::size_t h = 0; h < n_heads; ++h)
                      for (std::size_t i = 0; i < pairs; ++i) {
                        const std::size_t c = t * d + h * hd + 2 * i;
                        const double da = o.grad[c], db = o.grad[c + 1];
                        const double cs = cosv[t * pairs + i], sn = sinv[t * pairs + i];
                        g[c] += da * cs + db * sn;
                        g[c + 1] += -da * sn + db * cs;
                      }
                });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const Index> query_positions,
                 std::span<const Index> key_positions, std::size_t n_heads, AttentionWeights* weights) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require_matrix(v, "attention");
  const std::size_t Tq = q.rows(), Tk = k.rows(), d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != Tk) throw InvalidArgument("attention: q/k/v shape mismatch");
  if (query_positions.size() != Tq || key_positions.size() != Tk) {
    throw InvalidArgument("attention: position list length mismatch");
  }
  if (n_heads == 0 || d % n_heads != 0) throw InvalidArgument("attention: width not divisible by heads");
  const std::size_t hd = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  auto qi = q.impl(), ki = k.impl(), vi = v.impl();
  // Additive mask: 0 where visible, -inf elsewhere.
  RowMat mask(Tq, Tk);
  for (std::size_t r = 0; r < Tq; ++r) {
    bool any = false;
    for (std::size_t c = 0; c < Tk; ++c) {
      const bool visible = key_positions[c] <= query_positions[r];
      mask(r, c) = visible ? 0.0 : -std::numeric_limits<double>::infinity();
      any = any || visible;
    }
    if (!any) throw StateError("attention: query at position " + std::to_string(query_positions[r]) +
                               " has no visible keys");
  }

  std::vector<RowMat> probs(n_heads);
  std::vector<double> out(Tq * d, 0.0);
  const auto sd = static_cast<Eigen::Index>(d);
  for (std::size_t h = 0; h < n_heads; ++h) {
    ConstStridedMap Q(qi->data.data() + h * hd, Tq, hd, Strided(sd));
    ConstStridedMap K(ki->data.data() + h * hd, Tk, hd, Strided(sd));
    ConstStridedMap V(vi->data.data() + h * hd, Tk, hd, Strided(sd));
    RowMat s = (Q * K.transpose()) * inv_sqrt + mask;
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      const double mx = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - mx).exp();
      s.row(r) /= s.row(r).sum();
    }
    MutStridedMap(out.data() + h * hd, Tq, hd, Strided(sd)).noalias() = s * V;
    probs[h] = std::move(s);
  }

  if (weights) {
    std::size_t n_pos = 0;
    for (auto p : key_positions) n_pos = std::max(n_pos, p + 1);
    for (auto p : query_positions) n_pos = std::max(n_pos, p + 1);
    weights->n_positions = n_pos;
    weights->weights.assign(n_heads * Tq * n_pos, 0.0);
    for (std::size_t h = 0; h < n_heads; ++h)
      for (std::size_t r = 0; r < Tq; ++r)
        for (std::size_t c = 0; c < Tk; ++c)
          weights->weights[(h * Tq + r) * n_pos + key_positions[c]] += probs[h](r, c);
  }

  return finish({Tq, d}, std::move(out), {qi, ki, vi},
                [qi, ki, vi, probs = std::move(probs), Tq, Tk, hd, n_heads, inv_sqrt, sd](TensorImpl& o) {
                  for (std::size_t h = 0; h < n_heads; ++h) {
                    const RowMat& P = probs[h];
                    ConstStridedMap dO(o.grad.data() + h * hd, Tq, hd, Strided(sd));
                    ConstStridedMap Q(qi->data.data() + h * hd, Tq, hd, Strided(sd));
                    ConstStridedMap K(ki->data.data() + h * hd, Tk, hd, Strided(sd));
                    ConstStridedMap V(vi->data.data() + h * hd, Tk, hd, Strided(sd));
                    if (vi->requires_grad) {
                      MutStridedMap(vi->grad_buffer().data() + h * hd, Tk, hd, Strided(sd)).noalias() +=
                          P.transpose() * dO;
                    }
                    if (!qi->requires_grad && !ki->requires_grad) continue;
                    RowMat dP = dO * V.transpose();
                    Eigen::VectorXd rowdot = (P.array() * dP.array()).rowwise().sum();
                    RowMat dS = (P.array() * (dP.colwise() - rowdot).array()).matrix() * inv_sqrt;
                    if (qi->requires_grad) {
                      MutStridedMap(qi->grad_buffer().data() + h * hd, Tq, hd, Strided(sd)).noalias() += dS * K;
                    }
                    if (ki->requires_grad) {
                      MutStridedMap(ki->grad_buffer().data() + h * hd, Tk, hd, Strided(sd)).noalias() +=
                          dS.transpose() * Q;
                    }
                  }
                });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_matrix(table, "embedding");
  IndexList rows;
  rows.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= table.rows()) {
      throw InvalidArgument("embedding: token id " + std::to_string(id) + " out of range");
    }
    rows.push_back(static_cast<Index>(id));
  }
  return gather_rows(table, rows);
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_matrix(logits, "cross_entropy");
  const std::size_t T = logits.rows(), V = logits.cols();
  if (targets.size() != T) throw InvalidArgument("cross_entropy: need one target per row");
  if (T == 0) throw InvalidArgument("cross_entropy: no rows");
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= V) {
      throw InvalidArgument("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(V) +
                            ")");
    }
  }
  auto li = logits.impl();
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<double> softmax(T * V);
  double total = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    const double* row = li->data.data() + t * V;
    const double mx = *std::max_element(row, row + V);
    double z = 0.0;
    for (std::size_t c = 0; c < V; ++c) {
      softmax[t * V + c] = std::exp(row[c] - mx);
      z += softmax[t * V + c];
    }
    for (std::size_t c = 0; c < V; ++c) softmax[t * V + c] /= z;
    total += (std::log(z) + mx) - row[tgt[t]];
  }
  const double n = static_cast<double>(T);
  return finish({1}, {total / n}, {li}, [li, tgt, softmax = std::move(softmax), T, V, n](TensorImpl& o) {
    if (!li->requires_grad) return;
    auto& g = li->grad_buffer();
    const double seed = o.grad[0] / n;
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t c = 0; c < V; ++c) g[t * V + c] += seed * softmax[t * V + c];
      g[t * V + static_cast<std::size_t>(tgt[t])] -= seed;
    }
  });
}

}  // namespace flexidepth
