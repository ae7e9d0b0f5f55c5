#include "flexidepth/kv_cache.hpp"

#include <string>

#include "flexidepth/errors.hpp"

namespace flexidepth {

Tensor LayerKV::keys() const { return Tensor({rows(), width_}, keys_); }

Tensor LayerKV::values() const { return Tensor({rows(), width_}, values_); }

void LayerKV::append(std::size_t n_tokens, std::span<const Index> rows, std::span<const double> keys,
                     std::span<const double> values) {
  if (keys.size() != rows.size() * width_ || values.size() != rows.size() * width_) {
    throw StateError("kv cache: appended rows do not match the cache width");
  }
  for (auto r : rows) {
    if (r >= n_tokens) throw StateError("kv cache: row index beyond the processed tokens");
    positions_.push_back(next_position_ + r);
  }
  keys_.insert(keys_.end(), keys.begin(), keys.end());
  values_.insert(values_.end(), values.begin(), values.end());
  next_position_ += n_tokens;
}

KVCache::KVCache(std::size_t n_layers, std::size_t width) : layers_(n_layers, LayerKV(width)) {}

LayerKV& KVCache::layer(std::size_t index) {
  if (index >= layers_.size()) {
    throw StateError("kv cache: layer " + std::to_string(index) + " but cache holds " +
                     std::to_string(layers_.size()));
  }
  return layers_[index];
}

const LayerKV& KVCache::layer(std::size_t index) const {
  return const_cast<KVCache*>(this)->layer(index);
}

std::size_t KVCache::tokens_processed() const {
  if (layers_.empty()) return 0;
  const std::size_t n = layers_.front().next_position();
  for (const auto& l : layers_) {
    if (l.next_position() != n) throw StateError("kv cache: layers out of sync");
  }
  return n;
}

void KVCache::clear() {
  for (auto& l : layers_) l = LayerKV(l.width());
}

}  // namespace flexidepth
