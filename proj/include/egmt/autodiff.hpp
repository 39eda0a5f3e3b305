#pragma once

// Reverse-mode differentiation over Tensor values. Each op computes its forward
// value eagerly and, when any input requires a gradient, records an adjoint
// closure. Tape::backward replays the closures in reverse creation order.

#include "egmt/kernels.hpp"
#include "egmt/tensor.hpp"

#include <deque>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace egmt {

template <typename Scalar>
class Tape;

template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, Index id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Index id() const { return id_; }
  Tape<Scalar>& tape() const { return *tape_; }
  const Tensor<Scalar>& value() const { return tape_->value(*this); }
  const Tensor<Scalar>& grad() const { return tape_->grad(*this); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape_->requires_grad(*this); }

 private:
  Tape<Scalar>* tape_ = nullptr;
  Index id_ = -1;
};

template <typename Scalar>
using AttentionProbe =
    std::function<void(const std::string& site, const Eigen::Ref<const RowMatrix<Scalar>>& weights)>;

template <typename Scalar>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<Scalar>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> leaf(Tensor<Scalar> value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, {}});
    return Var<Scalar>(this, static_cast<Index>(nodes_.size()) - 1);
  }
  Var<Scalar> constant(Tensor<Scalar> value) { return leaf(std::move(value), false); }

  // Adds an op output. The adjoint is kept only if some input needs a gradient.
  Var<Scalar> record(Tensor<Scalar> value, std::initializer_list<Var<Scalar>> inputs, Backward backward) {
    if (!value.all_finite()) throw NumericError("non-finite value produced on tape");
    bool needs = false;
    for (const auto& in : inputs) needs = needs || requires_grad(in);
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : Backward{}});
    return Var<Scalar>(this, static_cast<Index>(nodes_.size()) - 1);
  }

  const Tensor<Scalar>& value(const Var<Scalar>& v) const { return node(v).value; }
  bool requires_grad(const Var<Scalar>& v) const { return node(v).requires_grad; }

  const Tensor<Scalar>& grad(const Var<Scalar>& v) {
    Node& n = node(v);
    if (n.grad.empty()) n.grad = Tensor<Scalar>(n.value.shape());
    return n.grad;
  }

  // Gradient accumulator for an input; callers check requires_grad first.
  Tensor<Scalar>& grad_ref(const Var<Scalar>& v) {
    Node& n = node(v);
    if (n.grad.empty()) n.grad = Tensor<Scalar>(n.value.shape());
    return n.grad;
  }

  void backward(const Var<Scalar>& root) {
    if (value(root).size() != 1) throw std::invalid_argument("backward: root must be a scalar");
    grad_ref(root)[0] = Scalar(1);
    for (Index i = root.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && !n.grad.empty()) n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Node& node(const Var<Scalar>& v) {
    if (v.valid() && &v.tape() != this) throw std::logic_error("variable belongs to another tape");
    return nodes_.at(static_cast<std::size_t>(v.id()));
  }
  const Node& node(const Var<Scalar>& v) const {
    if (v.valid() && &v.tape() != this) throw std::logic_error("variable belongs to another tape");
    return nodes_.at(static_cast<std::size_t>(v.id()));
  }

  std::deque<Node> nodes_;
};

namespace ad {

namespace detail {
inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}
}  // namespace detail

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<Scalar> y(a.shape(), a.value().data() + b.value().data());
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (t.requires_grad(a)) t.grad_ref(a).data() += g.data();
    if (t.requires_grad(b)) t.grad_ref(b).data() += g.data();
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<Scalar> y(a.shape(), a.value().data() - b.value().data());
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (t.requires_grad(a)) t.grad_ref(a).data() += g.data();
    if (t.requires_grad(b)) t.grad_ref(b).data() -= g.data();
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<Scalar> y(a.shape(), a.value().data().cwiseProduct(b.value().data()));
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (t.requires_grad(a)) t.grad_ref(a).data() += g.data().cwiseProduct(t.value(b).data());
    if (t.requires_grad(b)) t.grad_ref(b).data() += g.data().cwiseProduct(t.value(a).data());
  });
}

template <typename Scalar>
Var<Scalar> div(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "div");
  Tensor<Scalar> y(a.shape(), a.value().data().cwiseQuotient(b.value().data()));
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto& bv = t.value(b).data();
    if (t.requires_grad(a)) t.grad_ref(a).data() += g.data().cwiseQuotient(bv);
    if (t.requires_grad(b)) {
      t.grad_ref(b).data().array() -= g.data().array() * t.value(a).data().array() / bv.array().square();
    }
  });
}

// Element-wise maximum; ties send the gradient to `a`.
template <typename Scalar>
Var<Scalar> maximum(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "maximum");
  Tensor<Scalar> y(a.shape(), a.value().data().cwiseMax(b.value().data()));
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto& av = t.value(a).data();
    const auto& bv = t.value(b).data();
    const bool ga = t.requires_grad(a), gb = t.requires_grad(b);
    for (Index i = 0; i < av.size(); ++i) {
      if (av[i] >= bv[i]) {
        if (ga) t.grad_ref(a)[i] += g[i];
      } else if (gb) {
        t.grad_ref(b)[i] += g[i];
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  Tensor<Scalar> y(a.shape(), a.value().data() * s);
  return a.tape().record(std::move(y), {a}, [a, s](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.grad_ref(a).data() += g.data() * s;
  });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar s) {
  Tensor<Scalar> y(a.shape(), (a.value().data().array() + s).matrix());
  return a.tape().record(std::move(y), {a}, [a](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.grad_ref(a).data() += g.data();
  });
}

template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& a) {
  Tensor<Scalar> y(a.shape(), a.value().data().array().square().matrix());
  return a.tape().record(std::move(y), {a}, [a](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.grad_ref(a).data().array() += Scalar(2) * g.data().array() * t.value(a).data().array();
  });
}

template <typename Scalar>
Var<Scalar> abs(const Var<Scalar>& a) {
  Tensor<Scalar> y(a.shape(), a.value().data().cwiseAbs());
  return a.tape().record(std::move(y), {a}, [a](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto& x = t.value(a).data();
    auto& ga = t.grad_ref(a).data();
    for (Index i = 0; i < x.size(); ++i) ga[i] += x[i] > 0 ? g[i] : (x[i] < 0 ? -g[i] : Scalar(0));
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Tensor<Scalar> y({1});
  y[0] = a.value().data().sum();
  return a.tape().record(std::move(y), {a}, [a](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.grad_ref(a).data().array() += g[0];
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  const Scalar n = static_cast<Scalar>(a.value().size());
  Tensor<Scalar> y({1});
  y[0] = a.value().data().sum() / n;
  return a.tape().record(std::move(y), {a}, [a, n](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.grad_ref(a).data().array() += g[0] / n;
  });
}

template <typename Scalar>
Var<Scalar> leaky_relu(const Var<Scalar>& a, Scalar slope) {
  Tensor<Scalar> y(a.shape(), a.value().data().unaryExpr([slope](Scalar v) { return v > 0 ? v : slope * v; }));
  return a.tape().record(std::move(y), {a}, [a, slope](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto& x = t.value(a).data();
    auto& ga = t.grad_ref(a).data();
    for (Index i = 0; i < x.size(); ++i) ga[i] += x[i] > 0 ? g[i] : slope * g[i];
  });
}

// tanh approximation of GELU.
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& a) {
  constexpr Scalar kC = Scalar(0.7978845608028654);
  constexpr Scalar kA = Scalar(0.044715);
  Tensor<Scalar> y(a.shape(), a.value().data().unaryExpr([](Scalar x) {
    return Scalar(0.5) * x * (Scalar(1) + std::tanh(kC * (x + kA * x * x * x)));
  }));
  return a.tape().record(std::move(y), {a}, [a](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto& x = t.value(a).data();
    auto& ga = t.grad_ref(a).data();
    for (Index i = 0; i < x.size(); ++i) {
      const Scalar v = x[i];
      const Scalar th = std::tanh(kC * (v + kA * v * v * v));
      const Scalar d = Scalar(0.5) * (Scalar(1) + th) +
                       Scalar(0.5) * v * (Scalar(1) - th * th) * kC * (Scalar(1) + Scalar(3) * kA * v * v);
      ga[i] += g[i] * d;
    }
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& a) {
  Tensor<Scalar> y(a.shape(), a.value().data().unaryExpr([](Scalar x) { return Scalar(1) / (Scalar(1) + std::exp(-x)); }));
  const Index out_id = a.tape().size();
  return a.tape().record(std::move(y), {a}, [a, out_id](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto& s = t.value(Var<Scalar>(&t, out_id)).data();
    t.grad_ref(a).data().array() += g.data().array() * s.array() * (Scalar(1) - s.array());
  });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Shape shape) {
  Tensor<Scalar> y = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(y), {a}, [a](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.grad_ref(a).data() += g.data();
  });
}

// out[i] = in[index[i]]; the adjoint scatters back with accumulation.
template <typename Scalar>
Var<Scalar> gather(const Var<Scalar>& a, std::shared_ptr<const std::vector<Index>> index, Shape shape) {
  if (shape_size(shape) != static_cast<Index>(index->size())) throw std::invalid_argument("gather: index/shape mismatch");
  Tensor<Scalar> y(std::move(shape));
  const auto& x = a.value().data();
  for (std::size_t i = 0; i < index->size(); ++i) y[static_cast<Index>(i)] = x[(*index)[i]];
  return a.tape().record(std::move(y), {a}, [a, index](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto& ga = t.grad_ref(a).data();
    for (std::size_t i = 0; i < index->size(); ++i) ga[(*index)[i]] += g[static_cast<Index>(i)];
  });
}

// Concatenation along the first axis.
template <typename Scalar>
Var<Scalar> concat0(const Var<Scalar>& a, const Var<Scalar>& b) {
  Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != sb.size() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1)) {
    throw std::invalid_argument("concat: trailing extents differ");
  }
  Shape out = sa;
  out[0] += sb[0];
  Vector<Scalar> data(a.value().size() + b.value().size());
  data << a.value().data(), b.value().data();
  const Index na = a.value().size();
  return a.tape().record(Tensor<Scalar>(out, std::move(data)), {a, b},
                         [a, b, na](Tape<Scalar>& t, const Tensor<Scalar>& g) {
                           if (t.requires_grad(a)) t.grad_ref(a).data() += g.data().head(na);
                           if (t.requires_grad(b)) t.grad_ref(b).data() += g.data().tail(g.size() - na);
                         });
}

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  Tensor<Scalar> y = egmt::matmul(a.value(), b.value());
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (t.requires_grad(a)) t.grad_ref(a).matrix().noalias() += g.matrix() * t.value(b).matrix().transpose();
    if (t.requires_grad(b)) t.grad_ref(b).matrix().noalias() += t.value(a).matrix().transpose() * g.matrix();
  });
}

// x[N×Din] · w[Din×Dout] + bias[Dout] (bias optional).
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>* bias = nullptr) {
  const Index n = x.shape()[0];
  const Index din = x.value().size() / n;
  if (w.shape().size() != 2 || w.shape()[0] != din) throw std::invalid_argument("linear: weight shape mismatch");
  const Index dout = w.shape()[1];
  RowMatrix<Scalar> ym = x.value().matrix(n, din) * w.value().matrix();
  if (bias) {
    if (bias->value().size() != dout) throw std::invalid_argument("linear: bias length mismatch");
    ym.rowwise() += bias->value().data().transpose();
  }
  Tensor<Scalar> y({n, dout}, Eigen::Map<const Vector<Scalar>>(ym.data(), ym.size()));
  Var<Scalar> b = bias ? *bias : Var<Scalar>();
  auto fn = [x, w, b, n, din](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto gm = g.matrix();
    if (t.requires_grad(x)) t.grad_ref(x).matrix(n, din).noalias() += gm * t.value(w).matrix().transpose();
    if (t.requires_grad(w)) t.grad_ref(w).matrix().noalias() += t.value(x).matrix(n, din).transpose() * gm;
    if (b.valid() && t.requires_grad(b)) t.grad_ref(b).data() += gm.colwise().sum().transpose();
  };
  if (bias) return x.tape().record(std::move(y), {x, w, *bias}, fn);
  return x.tape().record(std::move(y), {x, w}, fn);
}

template <typename Scalar>
Var<Scalar> softmax_rows(const Var<Scalar>& a) {
  Tensor<Scalar> y = egmt::softmax_rows(a.value());
  const Index out_id = a.tape().size();
  return a.tape().record(std::move(y), {a}, [a, out_id](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto s = t.value(Var<Scalar>(&t, out_id)).matrix();
    auto gm = g.matrix();
    RowMatrix<Scalar> dot = (gm.cwiseProduct(s)).rowwise().sum();
    RowMatrix<Scalar> gs = s.cwiseProduct(gm - dot.replicate(1, gm.cols()));
    t.grad_ref(a).matrix() += gs;
  });
}

// Rows are the first extent; gain/bias span the folded remainder.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gain, const Var<Scalar>& bias, Scalar eps) {
  Tensor<Scalar> y = egmt::layer_norm(x.value(), gain.value(), bias.value(), eps);
  return x.tape().record(std::move(y), {x, gain, bias}, [x, gain, bias, eps](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const Tensor<Scalar>& xv = t.value(x);
    const Index rows = xv.dim(0);
    const Index d = xv.size() / rows;
    auto in = xv.matrix(rows, d);
    auto gm = g.matrix(rows, d);
    const auto gainv = t.value(gain).data().transpose().array();
    const bool need_x = t.requires_grad(x), need_gain = t.requires_grad(gain), need_bias = t.requires_grad(bias);
    for (Index r = 0; r < rows; ++r) {
      const Scalar mu = in.row(r).mean();
      const Scalar var = (in.row(r).array() - mu).square().mean();
      const Scalar inv = Scalar(1) / std::sqrt(var + eps);
      Eigen::Array<Scalar, 1, Eigen::Dynamic> xhat = (in.row(r).array() - mu) * inv;
      Eigen::Array<Scalar, 1, Eigen::Dynamic> gy = gm.row(r).array();
      if (need_gain) t.grad_ref(gain).data().transpose().array() += gy * xhat;
      if (need_bias) t.grad_ref(bias).data().transpose().array() += gy;
      if (need_x) {
        Eigen::Array<Scalar, 1, Eigen::Dynamic> gx = gy * gainv;
        const Scalar m1 = gx.mean();
        const Scalar m2 = (gx * xhat).mean();
        t.grad_ref(x).matrix(rows, d).row(r).array() += inv * (gx - m1 - xhat * m2);
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& kernel, const Var<Scalar>* bias, Index stride,
                   Padding padding) {
  const ConvGeometry geom = conv_geometry(x.shape(), kernel.shape(), stride, padding);
  Tensor<Scalar> y = egmt::conv2d(x.value(), kernel.value(), stride, padding, bias ? &bias->value() : nullptr);
  Var<Scalar> b = bias ? *bias : Var<Scalar>();
  auto fn = [x, kernel, b, geom](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    Tensor<Scalar>* dx = t.requires_grad(x) ? &t.grad_ref(x) : nullptr;
    Tensor<Scalar>* dk = t.requires_grad(kernel) ? &t.grad_ref(kernel) : nullptr;
    Tensor<Scalar>* db = (b.valid() && t.requires_grad(b)) ? &t.grad_ref(b) : nullptr;
    conv2d_backward(t.value(x), t.value(kernel), geom, g, dx, dk, db);
  };
  if (bias) return x.tape().record(std::move(y), {x, kernel, *bias}, fn);
  return x.tape().record(std::move(y), {x, kernel}, fn);
}

// Per-channel scaling of a C×H×W map by a length-C vector.
template <typename Scalar>
Var<Scalar> mul_channels(const Var<Scalar>& x, const Var<Scalar>& m) {
  const Index c = x.shape()[0];
  if (m.value().size() != c) throw std::invalid_argument("mul_channels: length mismatch");
  Tensor<Scalar> y = x.value();
  y.matrix().array().colwise() *= m.value().data().array();
  return x.tape().record(std::move(y), {x, m}, [x, m](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (t.requires_grad(x)) t.grad_ref(x).matrix().array() += g.matrix().array().colwise() * t.value(m).data().array();
    if (t.requires_grad(m)) t.grad_ref(m).data() += g.matrix().cwiseProduct(t.value(x).matrix()).rowwise().sum();
  });
}

// Global max over all positions of each channel of a C×H×W map -> [C].
// Ties resolve to the lowest flat index.
template <typename Scalar>
Var<Scalar> max_pool_global(const Var<Scalar>& x) {
  const Index c = x.shape()[0];
  auto xm = x.value().matrix();
  Tensor<Scalar> y({c});
  auto arg = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(c));
  for (Index i = 0; i < c; ++i) {
    Index j = 0;
    y[i] = xm.row(i).maxCoeff(&j);
    (*arg)[static_cast<std::size_t>(i)] = j;
  }
  return x.tape().record(std::move(y), {x}, [x, arg](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto gx = t.grad_ref(x).matrix();
    for (Index i = 0; i < gx.rows(); ++i) gx(i, (*arg)[static_cast<std::size_t>(i)]) += g[i];
  });
}

// Mean over the rows of an R×D matrix -> [D].
template <typename Scalar>
Var<Scalar> mean_rows(const Var<Scalar>& x) {
  auto xm = x.value().matrix();
  const Index r = xm.rows();
  Tensor<Scalar> y({xm.cols()}, xm.colwise().mean().transpose());
  return x.tape().record(std::move(y), {x}, [x, r](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.grad_ref(x).matrix().rowwise() += g.data().transpose() / static_cast<Scalar>(r);
  });
}

// Batched multi-head scaled dot-product attention.
//   q: (B·Tq) × (H·d), k: (B·Tk) × (H·d), v: (B·Tk) × (H·dv)  ->  (B·Tq) × (H·dv)
// Batch b and head h attend independently; weights are softmax(q kᵀ · scale) per row.
template <typename Scalar>
Var<Scalar> attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v, Index batches, Index heads,
                      Scalar scale, const std::string& site = {}, const AttentionProbe<Scalar>* probe = nullptr) {
  const Index rq = q.shape()[0], rk = k.shape()[0];
  const Index width = q.value().size() / rq;
  const Index vwidth = v.value().size() / v.shape()[0];
  if (rq % batches || rk % batches || v.shape()[0] != rk) throw std::invalid_argument("attention: batch layout mismatch");
  if (k.value().size() / rk != width) throw std::invalid_argument("attention: query/key width mismatch");
  if (width % heads || vwidth % heads) throw std::invalid_argument("attention: width not divisible by heads");
  const Index tq = rq / batches, tk = rk / batches, d = width / heads, dv = vwidth / heads;

  const bool store = q.requires_grad() || k.requires_grad() || v.requires_grad();
  auto weights = std::make_shared<std::vector<RowMatrix<Scalar>>>();
  if (store) weights->reserve(static_cast<std::size_t>(batches * heads));

  auto qm = q.value().matrix(rq, width);
  auto km = k.value().matrix(rk, width);
  auto vm = v.value().matrix(rk, vwidth);
  Tensor<Scalar> y({rq, vwidth});
  auto ym = y.matrix();
  // Without a gradient the weights are not kept, so long query sets are processed in row chunks.
  const Index chunk = store ? tq : std::max<Index>(1, std::min<Index>(tq, (Index{1} << 22) / std::max<Index>(tk, 1)));
  RowMatrix<Scalar> a;
  for (Index b = 0; b < batches; ++b) {
    for (Index h = 0; h < heads; ++h) {
      auto kb = km.block(b * tk, h * d, tk, d);
      auto vb = vm.block(b * tk, h * dv, tk, dv);
      for (Index r0 = 0; r0 < tq; r0 += chunk) {
        const Index rows = std::min(chunk, tq - r0);
        a.noalias() = qm.block(b * tq + r0, h * d, rows, d) * kb.transpose();
        a *= scale;
        softmax_rows_inplace(a);
        if (probe && *probe) (*probe)(site, a);
        ym.block(b * tq + r0, h * dv, rows, dv).noalias() = a * vb;
        if (store) weights->push_back(a);
      }
    }
  }
  return q.tape().record(std::move(y), {q, k, v},
                         [q, k, v, weights, batches, heads, tq, tk, d, dv, scale](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const Index rq = batches * tq, rk = batches * tk, width = heads * d, vwidth = heads * dv;
    auto qm = t.value(q).matrix(rq, width);
    auto km = t.value(k).matrix(rk, width);
    auto vm = t.value(v).matrix(rk, vwidth);
    auto gm = g.matrix(rq, vwidth);
    const bool gq = t.requires_grad(q), gk = t.requires_grad(k), gv = t.requires_grad(v);
    RowMatrix<Scalar> da, ds;
    for (Index b = 0; b < batches; ++b) {
      for (Index h = 0; h < heads; ++h) {
        const RowMatrix<Scalar>& a = (*weights)[static_cast<std::size_t>(b * heads + h)];
        auto go = gm.block(b * tq, h * dv, tq, dv);
        if (gv) t.grad_ref(v).matrix(rk, vwidth).block(b * tk, h * dv, tk, dv).noalias() += a.transpose() * go;
        if (!gq && !gk) continue;
        da.noalias() = go * vm.block(b * tk, h * dv, tk, dv).transpose();
        Vector<Scalar> dot = a.cwiseProduct(da).rowwise().sum();
        ds = a.cwiseProduct(da - dot.replicate(1, tk)) * scale;
        if (gq) t.grad_ref(q).matrix(rq, width).block(b * tq, h * d, tq, d).noalias() += ds * km.block(b * tk, h * d, tk, d);
        if (gk) t.grad_ref(k).matrix(rk, width).block(b * tk, h * d, tk, d).noalias() += ds.transpose() * qm.block(b * tq, h * d, tq, d);
      }
    }
  });
}

}  // namespace ad
}  // namespace egmt
