#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "flexidepth/tensor.hpp"

namespace flexidepth {

using Index = std::size_t;
using IndexList = std::vector<Index>;

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
// x + b with b a one-element tensor broadcast over x.
Tensor add_scalar(const Tensor& x, const Tensor& b);
// a + factor * x, elementwise; used for 1 - g.
Tensor affine(const Tensor& x, double factor, double offset);
Tensor square(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// ---- reductions --------------------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// [T x C] -> [T], summing each row left to right.
Tensor row_sum(const Tensor& x);

// ---- linear algebra ----------------------------------------------------------

// x[T x in] * w[out x in]^T -> [T x out]. Weights use the (out, in) layout.
Tensor linear(const Tensor& x, const Tensor& w);
Tensor matmul(const Tensor& a, const Tensor& b);

// ---- row plumbing ------------------------------------------------------------

Tensor gather_rows(const Tensor& x, std::span<const Index> rows);
Tensor concat_rows(const Tensor& top, const Tensor& bottom);
// Builds a [n_rows x cols] tensor where part k supplies the rows listed in
// parts[k].second, in order. Every output row must be written exactly once.
Tensor scatter_rows(std::size_t n_rows, const std::vector<std::pair<Tensor, IndexList>>& parts);
// x[T x d] with row t multiplied by s[t]; s has T elements.
Tensor scale_rows(const Tensor& x, const Tensor& s);
// Columns c[k] (each T elements) side by side -> [T x K].
Tensor stack_columns(const std::vector<Tensor>& columns);

// ---- transformer building blocks --------------------------------------------

// Row-wise x / sqrt(mean(x^2) + eps) * scale.
Tensor rmsnorm(const Tensor& x, const Tensor& scale, double eps);
// silu(gate) * up, elementwise.
Tensor swiglu(const Tensor& gate, const Tensor& up);
// down(silu(gate x) * up x); shared by the frozen FFN and the adapter.
Tensor gated_ffn(const Tensor& x, const Tensor& w_gate, const Tensor& w_up, const Tensor& w_down);

// Rotary embedding on interleaved pairs within each head; row r sits at
// absolute position positions[r].
Tensor rope(const Tensor& x, std::span<const Index> positions, std::size_t n_heads, double base);

// Optional dense record of attention weights, [n_queries x n_positions], where
// column j is absolute position j. Absent keys keep weight 0.
struct AttentionWeights {
  std::size_t n_positions = 0;
  std::vector<double> weights;
};

// Multi-head scaled dot-product attention. Query r may see key c iff
// key_positions[c] <= query_positions[r]. Keys absent from `k` (skipped tokens
// under the no-KV ablation) are simply not visible.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const Index> query_positions, std::span<const Index> key_positions,
                 std::size_t n_heads, AttentionWeights* weights = nullptr);

// Rows of `table` selected by ids.
Tensor embedding(const Tensor& table, std::span<const int> ids);

// Mean negative log-softmax of the target entries of logits[T x V].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

}  // namespace flexidepth
