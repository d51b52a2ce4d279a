#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

#include "lpdnet/common.hpp"

namespace lpdnet {

// Dense row-major tensor of 64-bit reals. Rank is 1 or 2 in practice.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::initializer_list<std::size_t> s) : shape(s) { data.assign(numel(), 0.0); }
  explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) { data.assign(numel(), 0.0); }

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  double scalar() const {
    if (numel() != 1) throw DataError("Tensor::scalar: not a scalar");
    return data[0];
  }

  static Tensor zeros(std::size_t r, std::size_t c) { return Tensor({r, c}); }
  static Tensor row(const std::vector<double>& v) {
    Tensor t({1, v.size()});
    t.data = v;
    return t;
  }
  static Tensor from_rows(std::size_t r, std::size_t c, const std::vector<double>& flat) {
    if (flat.size() != r * c) throw DataError("Tensor::from_rows: size mismatch");
    Tensor t({r, c});
    t.data = flat;
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

}  // namespace lpdnet
