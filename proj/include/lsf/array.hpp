#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace lsf {

/// Dense row-major 2D array.
template <typename T>
class Array2D {
 public:
  Array2D() = default;
  Array2D(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  bool same_shape(const Array2D& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const Array2D&, const Array2D&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

/// Dense 3D array indexed (z, y, x), x fastest.
template <typename T>
class Array3D {
 public:
  Array3D() = default;
  Array3D(std::size_t depth, std::size_t rows, std::size_t cols, T fill = T{})
      : depth_(depth), rows_(rows), cols_(cols), data_(depth * rows * cols, fill) {}

  std::size_t depth() const noexcept { return depth_; }
  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t extent(int axis) const noexcept {
    return axis == 0 ? depth_ : axis == 1 ? rows_ : cols_;
  }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t z, std::size_t y, std::size_t x) {
    return data_[(z * rows_ + y) * cols_ + x];
  }
  const T& operator()(std::size_t z, std::size_t y, std::size_t x) const {
    return data_[(z * rows_ + y) * cols_ + x];
  }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  friend bool operator==(const Array3D&, const Array3D&) = default;

 private:
  std::size_t depth_ = 0;
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

}  // namespace lsf
