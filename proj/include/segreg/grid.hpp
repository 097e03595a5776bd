#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace segreg {

/// Raised whenever a documented precondition is violated (shape mismatch,
/// non-finite field, empty input set, ...). The CLI maps it to a nonzero exit.
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void require(bool condition, const std::string& what) {
  if (!condition) throw ContractViolation(what);
}

/// Planar multi-channel 2D grid. Element (row, col, ch) lives at
/// data[(ch * rows + row) * cols + col].
template <typename T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  Grid(int rows, int cols, int channels = 1, T fill = T{})
      : rows_(rows), cols_(cols), channels_(channels),
        data_(static_cast<std::size_t>(rows) * cols * channels, fill) {
    require(rows >= 0 && cols >= 0 && channels >= 1, "Grid: invalid shape");
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  int channels() const { return channels_; }
  std::size_t plane_size() const { return static_cast<std::size_t>(rows_) * cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int r, int c, int ch = 0) {
    return data_[(static_cast<std::size_t>(ch) * rows_ + r) * cols_ + c];
  }
  const T& operator()(int r, int c, int ch = 0) const {
    return data_[(static_cast<std::size_t>(ch) * rows_ + r) * cols_ + c];
  }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::span<T> plane(int ch) { return std::span<T>(data_).subspan(ch * plane_size(), plane_size()); }
  std::span<const T> plane(int ch) const {
    return std::span<const T>(data_).subspan(ch * plane_size(), plane_size());
  }

  bool same_shape(const Grid& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && channels_ == o.channels_;
  }
  bool same_extent(const Grid& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Grid<U> cast() const {
    Grid<U> out(rows_, cols_, channels_);
    std::transform(data_.begin(), data_.end(), out.values().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool operator==(const Grid& o) const = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  int channels_ = 1;
  std::vector<T> data_;
};

/// Single-channel scalar field in [0,1]: gray images and soft masks alike.
using Image = Grid<float>;
/// Two-channel displacement field; channel 0 = row offset, channel 1 = col offset.
using Field = Grid<float>;

template <typename T>
Grid<T> make_field(int rows, int cols, T dr = T{}, T dc = T{}) {
  Grid<T> f(rows, cols, 2);
  std::fill(f.plane(0).begin(), f.plane(0).end(), dr);
  std::fill(f.plane(1).begin(), f.plane(1).end(), dc);
  return f;
}

template <typename T>
void require_image(const Grid<T>& g, const char* who) {
  require(g.channels() == 1 && !g.empty(), std::string(who) + ": expected a non-empty single-channel image");
}

template <typename T>
void require_field(const Grid<T>& g, const char* who) {
  require(g.channels() == 2 && !g.empty(), std::string(who) + ": expected a non-empty two-channel field");
}

}  // namespace segreg
