#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace egmt {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Raised when a computation produces NaN/Inf or receives non-finite data.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape);

// Dense row-major tensor. Rank-N data lives in one contiguous Eigen vector; the
// matrix() views fold the trailing extents so a C×H×W map reads as C×(H·W).
template <typename Scalar>
class Tensor {
 public:
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_extents();
    data_ = Vector<Scalar>::Zero(shape_size(shape_));
  }

  Tensor(Shape shape, Vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (shape_size(shape_) != data_.size()) {
      throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor constant(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static Tensor from_matrix(const RowMatrix<Scalar>& m) {
    return Tensor({m.rows(), m.cols()}, Eigen::Map<const Vector<Scalar>>(m.data(), m.size()));
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return data_.size(); }
  bool empty() const { return shape_.empty(); }

  Vector<Scalar>& data() { return data_; }
  const Vector<Scalar>& data() const { return data_; }
  Scalar* ptr() { return data_.data(); }
  const Scalar* ptr() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar& at(Index c, Index y, Index x) { return data_[(c * shape_[1] + y) * shape_[2] + x]; }
  Scalar at(Index c, Index y, Index x) const { return data_[(c * shape_[1] + y) * shape_[2] + x]; }

  // First extent as rows, all remaining extents folded into columns.
  MatrixMap matrix() { return MatrixMap(data_.data(), rows(), cols()); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(data_.data(), rows(), cols()); }
  MatrixMap matrix(Index r, Index c) {
    check_fold(r, c);
    return MatrixMap(data_.data(), r, c);
  }
  ConstMatrixMap matrix(Index r, Index c) const {
    check_fold(r, c);
    return ConstMatrixMap(data_.data(), r, c);
  }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  template <typename To>
  Tensor<To> cast() const {
    return Tensor<To>(shape_, data_.template cast<To>());
  }

  bool all_finite() const { return data_.allFinite(); }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  Index rows() const { return shape_.empty() ? 1 : shape_[0]; }
  Index cols() const { return shape_.empty() ? 1 : data_.size() / std::max<Index>(shape_[0], 1); }

  void check_extents() const {
    for (Index e : shape_) {
      if (e <= 0) throw std::invalid_argument("tensor extents must be positive: " + shape_string(shape_));
    }
  }
  void check_fold(Index r, Index c) const {
    if (r * c != data_.size()) throw std::invalid_argument("matrix fold does not match tensor size");
  }

  Shape shape_;
  Vector<Scalar> data_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

// EGT1 binary format: "EGT1", u64 rank, u64 extents, float32 data, all little-endian.
void write_egt1(std::ostream& out, const Tensor<float>& t);
Tensor<float> read_egt1(std::istream& in);
void save_egt1(const std::string& path, const Tensor<float>& t);
Tensor<float> load_egt1(const std::string& path);

}  // namespace egmt
