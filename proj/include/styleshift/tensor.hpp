#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace styleshift {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

/// Dense row-major (C order) tensor. Images are (N, C, H, W); matrices are (rows, cols).
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(Array::Constant(shape_size(shape_), fill)) {}
  Tensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw std::invalid_argument("tensor data size does not match shape " + shape_string(shape_));
  }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }
  static Tensor scalar(Scalar v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar item() const {
    if (size() != 1) throw std::logic_error("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  // 4-D accessors
  Scalar& at(Index n, Index c, Index h, Index w) { return data_[offset(n, c, h, w)]; }
  Scalar at(Index n, Index c, Index h, Index w) const { return data_[offset(n, c, h, w)]; }
  // 2-D accessors
  Scalar& at(Index r, Index c) { return data_[r * shape_[1] + c]; }
  Scalar at(Index r, Index c) const { return data_[r * shape_[1] + c]; }

  /// View of a 2-D tensor as a row-major matrix.
  Eigen::Map<RowMatrix> matrix() {
    require_rank(2);
    return {data_.data(), shape_[0], shape_[1]};
  }
  Eigen::Map<const RowMatrix> matrix() const {
    require_rank(2);
    return {data_.data(), shape_[0], shape_[1]};
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw std::invalid_argument("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  /// Contiguous slice [begin, end) along the leading dimension.
  Tensor slice(Index begin, Index end) const {
    if (rank() == 0 || begin < 0 || end > shape_[0] || begin > end)
      throw std::out_of_range("slice out of range");
    const Index stride = shape_[0] == 0 ? 0 : size() / shape_[0];
    Shape s = shape_;
    s[0] = end - begin;
    return Tensor(std::move(s), data_.segment(begin * stride, (end - begin) * stride));
  }

  bool all_finite() const { return data_.isFinite().all(); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && (a.data_ == b.data_).all();
  }

 private:
  Index offset(Index n, Index c, Index h, Index w) const {
    return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }
  void require_rank(int r) const {
    if (rank() != r)
      throw std::invalid_argument("expected rank " + std::to_string(r) + " tensor, got " + shape_string(shape_));
  }

  Shape shape_;
  Array data_;
};

/// Concatenate along the leading dimension.
template <typename Scalar>
Tensor<Scalar> concat_rows(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
  Shape s = parts.front().shape();
  Index total = 0;
  for (const auto& p : parts) {
    Shape ps = p.shape();
    ps[0] = s[0];
    if (ps != s) throw std::invalid_argument("concat shape mismatch");
    total += p.dim(0);
  }
  s[0] = total;
  Tensor<Scalar> out(s);
  Index pos = 0;
  for (const auto& p : parts) {
    out.array().segment(pos, p.size()) = p.array();
    pos += p.size();
  }
  return out;
}

}  // namespace styleshift
