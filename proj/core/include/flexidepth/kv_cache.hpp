#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "flexidepth/ops.hpp"
#include "flexidepth/tensor.hpp"

namespace flexidepth {

// Append-only key/value rows for one layer. Keys are stored after the
// positional rotation. `next_position` counts every token the layer has seen,
// whether or not it contributed rows.
class LayerKV {
 public:
  explicit LayerKV(std::size_t width = 0) : width_(width) {}

  std::size_t width() const noexcept { return width_; }
  std::size_t rows() const noexcept { return positions_.size(); }
  std::size_t next_position() const noexcept { return next_position_; }
  const IndexList& positions() const noexcept { return positions_; }

  // Constant [rows x width] views of the cached rows.
  Tensor keys() const;
  Tensor values() const;

  // Records `n_tokens` processed tokens, of which those in `rows` (positions
  // relative to the call) supply the given key/value rows.
  void append(std::size_t n_tokens, std::span<const Index> rows, std::span<const double> keys,
              std::span<const double> values);

 private:
  std::size_t width_;
  std::vector<double> keys_;
  std::vector<double> values_;
  IndexList positions_;
  std::size_t next_position_ = 0;
};

class KVCache {
 public:
  KVCache() = default;
  KVCache(std::size_t n_layers, std::size_t width);

  std::size_t n_layers() const noexcept { return layers_.size(); }
  // Throws StateError on an index past the cached layers.
  LayerKV& layer(std::size_t index);
  const LayerKV& layer(std::size_t index) const;
  // Tokens seen by every layer; throws StateError if the layers disagree.
  std::size_t tokens_processed() const;
  void clear();

 private:
  std::vector<LayerKV> layers_;
};

}  // namespace flexidepth
