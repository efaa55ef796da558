#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ipf/error.hpp"

namespace ipf::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major array.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T{0}) : shape(std::move(s)), data(numel(shape), fill) {}
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel(shape)) {
      throw ShapeError("tensor data size " + std::to_string(data.size()) + " != shape " +
                       shape_str(shape));
    }
  }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  bool operator==(const Tensor&) const = default;
};

// Named parameter arrays. Names are unique and shapes are fixed once added.
template <typename T>
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor<T> value, bool trainable = true) {
    if (index_.contains(name)) throw UsageError("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(value), trainable});
    return entries_.size() - 1;
  }

  std::optional<std::size_t> find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  std::size_t index(std::string_view name) const {
    if (auto i = find(name)) return *i;
    throw UsageError("unknown parameter: " + std::string(name));
  }

  std::size_t size() const noexcept { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_[i].name; }
  bool trainable(std::size_t i) const { return entries_[i].trainable; }
  void set_trainable(std::size_t i, bool t) { entries_[i].trainable = t; }
  const Tensor<T>& value(std::size_t i) const { return entries_[i].value; }
  const Tensor<T>& value(std::string_view name) const { return entries_[index(name)].value; }
  std::span<T> data(std::size_t i) { return entries_[i].value.data; }
  std::span<T> data(std::string_view name) { return data(index(name)); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>(), e.trainable);
    return out;
  }

  bool operator==(const ParamStore& o) const {
    if (entries_.size() != o.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name != o.entries_[i].name || !(entries_[i].value == o.entries_[i].value) ||
          entries_[i].trainable != o.entries_[i].trainable) {
        return false;
      }
    }
    return true;
  }

 private:
  struct Entry {
    std::string name;
    Tensor<T> value;
    bool trainable = true;
  };
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Per-parameter gradient arrays aligned with a ParamStore.
template <typename T>
using Gradients = std::vector<Tensor<T>>;

}  // namespace ipf::nn
