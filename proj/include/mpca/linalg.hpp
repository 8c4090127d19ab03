#pragma once

// Dense row-major matrix of exact rationals, sized once and indexed in bounds.

#include <cstdint>
#include <span>
#include <vector>

#include "mpca/errors.hpp"
#include "mpca/rational.hpp"

namespace mpca {

class Mat {
 public:
  Mat() = default;
  Mat(size_t rows, size_t cols) : rows_(rows), cols_(cols), data_(rows * cols) {}

  size_t rows() const { return rows_; }
  size_t cols() const { return cols_; }

  Rat& at(size_t r, size_t c) { return data_[r * cols_ + c]; }
  const Rat& at(size_t r, size_t c) const { return data_[r * cols_ + c]; }

  std::span<Rat> row(size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const Rat> row(size_t r) const { return {data_.data() + r * cols_, cols_}; }

  bool operator==(const Mat& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
  }

 private:
  size_t rows_ = 0, cols_ = 0;
  std::vector<Rat> data_;
};

inline Rat dot(std::span<const Rat> a, std::span<const Rat> b) {
  if (a.size() != b.size()) throw ConfigError("dot: length mismatch");
  Rat acc;
  for (size_t i = 0; i < a.size(); ++i) {
    if (!a[i].is_zero() && !b[i].is_zero()) acc += a[i] * b[i];
  }
  return acc;
}

}  // namespace mpca
