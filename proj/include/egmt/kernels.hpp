#pragma once

#include "egmt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace egmt {

enum class Padding { Reflect, Zero };

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: operands must be rank 2");
  if (a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: inner extents differ " + shape_string(a.shape()) + " x " +
                                shape_string(b.shape()));
  }
  RowMatrix<Scalar> c = a.matrix() * b.matrix();
  return Tensor<Scalar>::from_matrix(c);
}

// Row-wise softmax with the row maximum subtracted first.
template <typename Derived>
void softmax_rows_inplace(Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  if (m.cols() == 0) throw std::invalid_argument("softmax_rows: empty row");
  for (Index r = 0; r < m.rows(); ++r) {
    const Scalar mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp().matrix();
    m.row(r) /= m.row(r).sum();
  }
}

template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& x) {
  if (x.rank() != 2) throw std::invalid_argument("softmax_rows: input must be rank 2");
  if (!x.all_finite()) throw std::invalid_argument("softmax_rows: non-finite input");
  Tensor<Scalar> y = x;
  auto m = y.matrix();
  softmax_rows_inplace(m);
  return y;
}

// Per-row normalisation to zero mean / unit variance followed by gain and bias.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain, const Tensor<Scalar>& bias,
                          Scalar eps) {
  const Index rows = x.dim(0);
  const Index d = x.size() / rows;
  if (gain.size() != d || bias.size() != d) throw std::invalid_argument("layer_norm: affine length mismatch");
  Tensor<Scalar> y(x.shape());
  auto in = x.matrix(rows, d);
  auto out = y.matrix(rows, d);
  for (Index r = 0; r < rows; ++r) {
    const Scalar mean = in.row(r).mean();
    const Scalar var = (in.row(r).array() - mean).square().mean();
    const Scalar inv = Scalar(1) / std::sqrt(var + eps);
    out.row(r) = ((in.row(r).array() - mean) * inv * gain.data().transpose().array() +
                  bias.data().transpose().array())
                     .matrix();
  }
  return y;
}

struct ConvGeometry {
  Index in_channels = 0, height = 0, width = 0;
  Index out_channels = 0, kernel = 0, stride = 1, pad = 0;
  Index out_height = 0, out_width = 0;
  Padding padding = Padding::Reflect;

  Index patch_rows() const { return in_channels * kernel * kernel; }
  Index out_pixels() const { return out_height * out_width; }

  // Flat input index feeding im2col row `row` at output pixel `pixel`, or -1 for zero padding.
  Index source(Index row, Index pixel) const {
    const Index kx = row % kernel;
    const Index ky = (row / kernel) % kernel;
    const Index c = row / (kernel * kernel);
    const Index oy = pixel / out_width;
    const Index ox = pixel % out_width;
    Index y = oy * stride + ky - pad;
    Index x = ox * stride + kx - pad;
    if (y < 0 || y >= height || x < 0 || x >= width) {
      if (padding == Padding::Zero) return -1;
      y = reflect(y, height);
      x = reflect(x, width);
    }
    return (c * height + y) * width + x;
  }

  static Index reflect(Index i, Index n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
  }
};

inline ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, Index stride, Padding padding) {
  if (input.size() != 3) throw std::invalid_argument("conv2d: input must be C x H x W");
  if (kernel.size() != 4) throw std::invalid_argument("conv2d: kernel must be Cout x Cin x k x k");
  if (kernel[1] != input[0]) throw std::invalid_argument("conv2d: input channel mismatch");
  if (kernel[2] != kernel[3] || kernel[2] % 2 == 0) throw std::invalid_argument("conv2d: kernel must be square and odd");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  ConvGeometry g;
  g.in_channels = input[0];
  g.height = input[1];
  g.width = input[2];
  g.out_channels = kernel[0];
  g.kernel = kernel[2];
  g.stride = stride;
  g.pad = g.kernel / 2;
  g.padding = padding;
  if (g.kernel > g.height + 2 * g.pad || g.kernel > g.width + 2 * g.pad) {
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  }
  if (padding == Padding::Reflect && (g.pad >= g.height || g.pad >= g.width)) {
    throw std::invalid_argument("conv2d: reflect padding wider than input");
  }
  g.out_height = (g.height + 2 * g.pad - g.kernel) / stride + 1;
  g.out_width = (g.width + 2 * g.pad - g.kernel) / stride + 1;
  return g;
}

namespace detail {

inline constexpr Index kConvChunk = 4096;

template <typename Scalar>
void im2col(const Scalar* x, const ConvGeometry& g, Index begin, Index count, RowMatrix<Scalar>& cols) {
  cols.resize(g.patch_rows(), count);
  for (Index r = 0; r < g.patch_rows(); ++r) {
    for (Index j = 0; j < count; ++j) {
      const Index src = g.source(r, begin + j);
      cols(r, j) = src < 0 ? Scalar(0) : x[src];
    }
  }
}

template <typename Scalar>
void col2im_add(const RowMatrix<Scalar>& cols, const ConvGeometry& g, Index begin, Scalar* dx) {
  for (Index r = 0; r < g.patch_rows(); ++r) {
    for (Index j = 0; j < cols.cols(); ++j) {
      const Index src = g.source(r, begin + j);
      if (src >= 0) dx[src] += cols(r, j);
    }
  }
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel, Index stride = 1,
                      Padding padding = Padding::Reflect, const Tensor<Scalar>* bias = nullptr) {
  const ConvGeometry g = conv_geometry(x.shape(), kernel.shape(), stride, padding);
  Tensor<Scalar> y({g.out_channels, g.out_height, g.out_width});
  auto w = kernel.matrix(g.out_channels, g.patch_rows());
  auto out = y.matrix(g.out_channels, g.out_pixels());
  RowMatrix<Scalar> cols;
  for (Index begin = 0; begin < g.out_pixels(); begin += detail::kConvChunk) {
    const Index count = std::min(detail::kConvChunk, g.out_pixels() - begin);
    detail::im2col(x.ptr(), g, begin, count, cols);
    out.middleCols(begin, count).noalias() = w * cols;
  }
  if (bias) {
    if (bias->size() != g.out_channels) throw std::invalid_argument("conv2d: bias length mismatch");
    out.colwise() += bias->data();
  }
  return y;
}

// Adjoint of conv2d: accumulates into dx / dkernel / dbias when non-null.
template <typename Scalar>
void conv2d_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel, const ConvGeometry& g,
                     const Tensor<Scalar>& dy, Tensor<Scalar>* dx, Tensor<Scalar>* dkernel, Tensor<Scalar>* dbias) {
  auto w = kernel.matrix(g.out_channels, g.patch_rows());
  auto grad_out = dy.matrix(g.out_channels, g.out_pixels());
  RowMatrix<Scalar> cols;
  RowMatrix<Scalar> dcols;
  for (Index begin = 0; begin < g.out_pixels(); begin += detail::kConvChunk) {
    const Index count = std::min(detail::kConvChunk, g.out_pixels() - begin);
    auto dy_chunk = grad_out.middleCols(begin, count);
    if (dkernel) {
      detail::im2col(x.ptr(), g, begin, count, cols);
      dkernel->matrix(g.out_channels, g.patch_rows()).noalias() += dy_chunk * cols.transpose();
    }
    if (dx) {
      dcols.noalias() = w.transpose() * dy_chunk;
      detail::col2im_add(dcols, g, begin, dx->ptr());
    }
  }
  if (dbias) dbias->data() += grad_out.rowwise().sum();
}

}  // namespace egmt
