#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace coscale {

// Dense row-major matrix. Rows are tokens, columns are features or vocab.
template <typename T>
class BasicMatrix {
 public:
  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<T>& data() noexcept { return data_; }
  const std::vector<T>& data() const noexcept { return data_; }

  friend bool operator==(const BasicMatrix&, const BasicMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<float>;
using MatrixD = BasicMatrix<double>;

// Square side x side x channels feature grid, channel-fastest layout.
class FeatureMap {
 public:
  FeatureMap() = default;
  FeatureMap(int side, int channels)
      : side_(side),
        channels_(channels),
        data_(static_cast<std::size_t>(side) * side * channels, 0.0) {}

  int side() const noexcept { return side_; }
  int channels() const noexcept { return channels_; }
  std::size_t cells() const noexcept {
    return static_cast<std::size_t>(side_) * side_;
  }

  double& at(int y, int x, int c) { return data_[index(y, x, c)]; }
  double at(int y, int x, int c) const { return data_[index(y, x, c)]; }

  std::span<double> cell(int y, int x) {
    return {data_.data() + index(y, x, 0), static_cast<std::size_t>(channels_)};
  }
  std::span<const double> cell(int y, int x) const {
    return {data_.data() + index(y, x, 0), static_cast<std::size_t>(channels_)};
  }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  double l2_norm() const;

  FeatureMap& operator+=(const FeatureMap& other);
  FeatureMap& operator-=(const FeatureMap& other);

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * side_ + x) * channels_ + c;
  }

  int side_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

// side x side grid of codebook indices, row-major.
struct TokenMap {
  int side = 0;
  std::vector<std::int32_t> tokens;

  TokenMap() = default;
  explicit TokenMap(int s, std::int32_t fill = 0)
      : side(s), tokens(static_cast<std::size_t>(s) * s, fill) {}

  std::int32_t& at(int y, int x) { return tokens[y * side + x]; }
  std::int32_t at(int y, int x) const { return tokens[y * side + x]; }

  friend bool operator==(const TokenMap&, const TokenMap&) = default;
};

// RGB image with channels in [0, 1].
struct Image {
  int side = 0;
  std::vector<float> rgb;

  Image() = default;
  explicit Image(int s) : side(s), rgb(static_cast<std::size_t>(s) * s * 3, 0.f) {}

  float& at(int y, int x, int c) { return rgb[(y * side + x) * 3 + c]; }
  float at(int y, int x, int c) const { return rgb[(y * side + x) * 3 + c]; }

  friend bool operator==(const Image&, const Image&) = default;
};

}  // namespace coscale
