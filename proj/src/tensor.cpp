#include "airl/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace airl {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

thread_local bool t_grad_enabled = true;
thread_local KinkMonitor* t_kink_monitor = nullptr;

using DataPtr = std::shared_ptr<TensorData>;

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (!t_grad_enabled) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

void record(std::string_view op, std::vector<DataPtr> inputs, std::vector<DataPtr> outputs,
            std::function<void()> fn) {
  for (auto& o : outputs) o->requires_grad = true;
  GradTape::active().record({op, std::move(inputs), std::move(outputs), std::move(fn)});
}

void check_finite(const Tensor& t, std::string_view op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite result");
    }
  }
}

void require(bool cond, std::string_view op, const std::string& what) {
  if (!cond) throw DimensionError(std::string(op) + ": " + what);
}

void require_rank2(const Tensor& t, std::string_view op) {
  require(t.rank() == 2, op, "expected rank-2 tensor, got " + shape_str(t.shape()));
}

Tensor alloc(Shape shape) { return Tensor::zeros(std::move(shape)); }

// Strides of `in` laid over `out` with zero stride on broadcast dimensions.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = in.size(); i-- > 0;) {
    if (in[i] != 1) strides[offset + i] = stride;
    stride *= in[i];
  }
  return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                           shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <typename Fn>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, Fn&& fn) {
  const std::size_t n = shape_size(out);
  if (a == out && b == out) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  const auto sa = broadcast_strides(a, out);
  const auto sb = broadcast_strides(b, out);
  const std::size_t rank = out.size();
  const std::size_t inner = out.back();
  const std::size_t ja = sa.back();
  const std::size_t jb = sb.back();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t i = 0; i < n; i += inner) {
    for (std::size_t k = 0; k < inner; ++k) fn(i + k, ia + k * ja, ib + k * jb);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

enum class BinaryKind { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, std::string_view op) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), op);
  Tensor out = alloc(out_shape);
  auto* o = out.mutable_data().data();
  const double* av = a.data().data();
  const double* bv = b.data().data();
  switch (kind) {
    case BinaryKind::kAdd:
      for_each_broadcast(out_shape, a.shape(), b.shape(),
                         [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = av[ia] + bv[ib]; });
      break;
    case BinaryKind::kSub:
      for_each_broadcast(out_shape, a.shape(), b.shape(),
                         [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = av[ia] - bv[ib]; });
      break;
    case BinaryKind::kMul:
      for_each_broadcast(out_shape, a.shape(), b.shape(),
                         [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = av[ia] * bv[ib]; });
      break;
  }
  check_finite(out, op);
  if (needs_grad({&a, &b})) {
    DataPtr ai = a.impl();
    DataPtr bi = b.impl();
    DataPtr oi = out.impl();
    record(op, {ai, bi}, {oi}, [ai, bi, oi, kind, out_shape] {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      double* ga = ai->requires_grad ? ai->grad_buffer() : nullptr;
      double* gb = bi->requires_grad ? bi->grad_buffer() : nullptr;
      const double* av = ai->value.data();
      const double* bv = bi->value.data();
      for_each_broadcast(out_shape, ai->shape, bi->shape,
                         [&](std::size_t i, std::size_t ia, std::size_t ib) {
                           switch (kind) {
                             case BinaryKind::kAdd:
                               if (ga) ga[ia] += g[i];
                               if (gb) gb[ib] += g[i];
                               break;
                             case BinaryKind::kSub:
                               if (ga) ga[ia] += g[i];
                               if (gb) gb[ib] -= g[i];
                               break;
                             case BinaryKind::kMul:
                               if (ga) ga[ia] += g[i] * bv[ib];
                               if (gb) gb[ib] += g[i] * av[ia];
                               break;
                           }
                         });
    });
  }
  return out;
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, std::string_view op, Fwd fwd, Deriv deriv) {
  Tensor out = alloc(x.shape());
  auto o = out.mutable_data();
  auto xv = x.data();
  for (std::size_t i = 0; i < xv.size(); ++i) o[i] = fwd(xv[i]);
  check_finite(out, op);
  if (needs_grad({&x})) {
    DataPtr xi = x.impl();
    DataPtr oi = out.impl();
    record(op, {xi}, {oi}, [xi, oi, deriv] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      double* gx = xi->grad_buffer();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) {
        gx[i] += oi->grad[i] * deriv(xi->value[i], oi->value[i]);
      }
    });
  }
  return out;
}

void note_kinks(const Tensor& x) {
  if (t_kink_monitor == nullptr) return;
  t_kink_monitor->observe(x.data());
}

// Splits a shape around `axis` into (outer, extent, inner) for strided loops.
struct AxisView {
  std::size_t outer;
  std::size_t extent;
  std::size_t inner;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

}  // namespace

// ---- Tensor -----------------------------------------------------------------

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor wrap(std::shared_ptr<TensorData> impl) { return Tensor(std::move(impl)); }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor: zero-sized dimension in " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorData>();
  impl->value.assign(shape_size(shape), v);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError("tensor: " + std::to_string(values.size()) +
                         " values do not fill shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorData>();
  impl->shape = std::move(shape);
  impl->value.assign(values.begin(), values.end());
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({1}, {v}, requires_grad); }

std::size_t Tensor::rows() const { return rank() == 1 ? 1 : impl_->shape[0]; }
std::size_t Tensor::cols() const { return impl_->shape.back(); }

double Tensor::item() const {
  if (size() != 1) throw UsageError("item: tensor has " + std::to_string(size()) + " elements");
  return impl_->value[0];
}

Tensor Tensor::detach() const {
  Tensor out = zeros(shape(), false);
  out.impl_->value = impl_->value;
  return out;
}

// ---- tape -------------------------------------------------------------------

void GradTape::record(Node node) { nodes_.push_back(std::move(node)); }

GradTape& GradTape::active() {
  thread_local GradTape tape;
  return tape;
}

void GradTape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw UsageError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  std::size_t end = nodes_.size();
  while (end > 0) {
    const auto& outs = nodes_[end - 1].outputs;
    if (std::find(outs.begin(), outs.end(), loss.impl()) != outs.end()) break;
    --end;
  }
  if (end == 0) {
    nodes_.clear();
    throw UsageError("backward: loss is not on the gradient tape");
  }
  loss.impl()->grad_buffer()[0] += 1.0;
  for (std::size_t i = end; i-- > 0;) nodes_[i].backward();
  // Leaves the loss does not depend on still receive an explicit zero gradient.
  for (std::size_t i = 0; i < end; ++i) {
    for (auto& in : nodes_[i].inputs) {
      if (in->requires_grad) in->grad_buffer();
    }
  }
  // Intermediate gradients are released with the tape; only leaves keep theirs.
  for (auto& node : nodes_) {
    for (auto& o : node.outputs) {
      if (o != loss.impl()) o->grad.clear();
    }
  }
  loss.impl()->grad.clear();
  nodes_.clear();
}

void backward(const Tensor& loss) { GradTape::active().backward(loss); }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

KinkMonitor::KinkMonitor() : previous_(t_kink_monitor) { t_kink_monitor = this; }
KinkMonitor::~KinkMonitor() { t_kink_monitor = previous_; }

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  constexpr std::string_view op = "matmul";
  require_rank2(a, op);
  require_rank2(b, op);
  require(a.dim(1) == b.dim(0), op,
          "inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const auto n = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto m = static_cast<Eigen::Index>(b.dim(1));
  Tensor out = alloc({a.dim(0), b.dim(1)});
  MatMap(out.mutable_data().data(), n, m).noalias() =
      ConstMatMap(a.data().data(), n, k) * ConstMatMap(b.data().data(), k, m);
  check_finite(out, op);
  if (needs_grad({&a, &b})) {
    DataPtr ai = a.impl();
    DataPtr bi = b.impl();
    DataPtr oi = out.impl();
    record(op, {ai, bi}, {oi}, [ai, bi, oi, n, k, m] {
      if (oi->grad.empty()) return;
      ConstMatMap g(oi->grad.data(), n, m);
      if (ai->requires_grad) {
        MatMap(ai->grad_buffer(), n, k).noalias() += g * ConstMatMap(bi->value.data(), k, m).transpose();
      }
      if (bi->requires_grad) {
        MatMap(bi->grad_buffer(), k, m).noalias() += ConstMatMap(ai->value.data(), n, k).transpose() * g;
      }
    });
  }
  return out;
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  constexpr std::string_view op = "affine";
  require_rank2(x, op);
  require_rank2(w, op);
  require(x.dim(1) == w.dim(0), op,
          "input width " + std::to_string(x.dim(1)) + " does not match weight " + shape_str(w.shape()));
  require(b.size() == w.dim(1), op, "bias " + shape_str(b.shape()) + " does not match weight " + shape_str(w.shape()));
  const auto n = static_cast<Eigen::Index>(x.dim(0));
  const auto k = static_cast<Eigen::Index>(x.dim(1));
  const auto m = static_cast<Eigen::Index>(w.dim(1));
  Tensor out = alloc({x.dim(0), w.dim(1)});
  MatMap o(out.mutable_data().data(), n, m);
  o.noalias() = ConstMatMap(x.data().data(), n, k) * ConstMatMap(w.data().data(), k, m);
  o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data().data(), m);
  check_finite(out, op);
  if (needs_grad({&x, &w, &b})) {
    DataPtr xi = x.impl();
    DataPtr wi = w.impl();
    DataPtr bi = b.impl();
    DataPtr oi = out.impl();
    record(op, {xi, wi, bi}, {oi}, [xi, wi, bi, oi, n, k, m] {
      if (oi->grad.empty()) return;
      ConstMatMap g(oi->grad.data(), n, m);
      if (xi->requires_grad) {
        MatMap(xi->grad_buffer(), n, k).noalias() += g * ConstMatMap(wi->value.data(), k, m).transpose();
      }
      if (wi->requires_grad) {
        MatMap(wi->grad_buffer(), k, m).noalias() += ConstMatMap(xi->value.data(), n, k).transpose() * g;
      }
      if (bi->requires_grad) {
        Eigen::Map<Eigen::RowVectorXd>(bi->grad_buffer(), m) += g.colwise().sum();
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  constexpr std::string_view op = "transpose";
  require_rank2(x, op);
  const auto r = static_cast<Eigen::Index>(x.dim(0));
  const auto c = static_cast<Eigen::Index>(x.dim(1));
  Tensor out = alloc({x.dim(1), x.dim(0)});
  MatMap(out.mutable_data().data(), c, r) = ConstMatMap(x.data().data(), r, c).transpose();
  if (needs_grad({&x})) {
    DataPtr xi = x.impl();
    DataPtr oi = out.impl();
    record(op, {xi}, {oi}, [xi, oi, r, c] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      MatMap(xi->grad_buffer(), r, c) += ConstMatMap(oi->grad.data(), c, r).transpose();
    });
  }
  return out;
}

// ---- activations ------------------------------------------------------------

Tensor relu(const Tensor& x) {
  note_kinks(x);
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  note_kinks(x);
  return unary(
      x, "leaky_relu", [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double in, double) { return in > 0.0 ? 1.0 : slope; });
}

namespace {
double stable_sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}
}  // namespace

Tensor sigmoid(const Tensor& x) {
  return unary(x, "sigmoid", stable_sigmoid, [](double, double out) { return out * (1.0 - out); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, "tanh", [](double v) { return std::tanh(v); }, [](double, double out) { return 1.0 - out * out; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double out) { return out; });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  constexpr std::string_view op = "log_softmax";
  require(axis < x.rank(), op, "axis out of range for " + shape_str(x.shape()));
  const AxisView v = axis_view(x.shape(), axis);
  Tensor out = alloc(x.shape());
  auto o = out.mutable_data();
  auto xv = x.data();
  for (std::size_t a = 0; a < v.outer; ++a) {
    for (std::size_t c = 0; c < v.inner; ++c) {
      const std::size_t base = a * v.extent * v.inner + c;
      double mx = xv[base];
      for (std::size_t e = 1; e < v.extent; ++e) mx = std::max(mx, xv[base + e * v.inner]);
      double s = 0.0;
      for (std::size_t e = 0; e < v.extent; ++e) s += std::exp(xv[base + e * v.inner] - mx);
      const double lse = mx + std::log(s);
      for (std::size_t e = 0; e < v.extent; ++e) o[base + e * v.inner] = xv[base + e * v.inner] - lse;
    }
  }
  check_finite(out, op);
  if (needs_grad({&x})) {
    DataPtr xi = x.impl();
    DataPtr oi = out.impl();
    record(op, {xi}, {oi}, [xi, oi, v] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      double* gx = xi->grad_buffer();
      const double* g = oi->grad.data();
      const double* ov = oi->value.data();
      for (std::size_t a = 0; a < v.outer; ++a) {
        for (std::size_t c = 0; c < v.inner; ++c) {
          const std::size_t base = a * v.extent * v.inner + c;
          double gs = 0.0;
          for (std::size_t e = 0; e < v.extent; ++e) gs += g[base + e * v.inner];
          for (std::size_t e = 0; e < v.extent; ++e) {
            const std::size_t i = base + e * v.inner;
            gx[i] += g[i] - std::exp(ov[i]) * gs;
          }
        }
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) { return exp(log_softmax(x, axis)); }

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kMul, "mul"); }

Tensor scale(const Tensor& x, double s) {
  return unary(
      x, "scale", [s](double v) { return s * v; }, [s](double, double) { return s; });
}

// ---- reductions -------------------------------------------------------------

namespace {
Tensor reduce_all(const Tensor& x, double factor, std::string_view op) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s * factor);
  check_finite(out, op);
  if (needs_grad({&x})) {
    DataPtr xi = x.impl();
    DataPtr oi = out.impl();
    record(op, {xi}, {oi}, [xi, oi, factor] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      const double g = oi->grad[0] * factor;
      double* gx = xi->grad_buffer();
      for (std::size_t i = 0; i < xi->value.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor reduce_axis(const Tensor& x, std::size_t axis, bool mean, std::string_view op) {
  require(axis < x.rank(), op, "axis out of range for " + shape_str(x.shape()));
  const AxisView v = axis_view(x.shape(), axis);
  const double factor = mean ? 1.0 / static_cast<double>(v.extent) : 1.0;
  Shape out_shape = x.shape();
  out_shape[axis] = 1;
  Tensor out = alloc(out_shape);
  auto o = out.mutable_data();
  auto xv = x.data();
  for (std::size_t a = 0; a < v.outer; ++a) {
    for (std::size_t e = 0; e < v.extent; ++e) {
      for (std::size_t c = 0; c < v.inner; ++c) {
        o[a * v.inner + c] += xv[(a * v.extent + e) * v.inner + c];
      }
    }
  }
  for (auto& val : o) val *= factor;
  check_finite(out, op);
  if (needs_grad({&x})) {
    DataPtr xi = x.impl();
    DataPtr oi = out.impl();
    record(op, {xi}, {oi}, [xi, oi, v, factor] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      double* gx = xi->grad_buffer();
      for (std::size_t a = 0; a < v.outer; ++a) {
        for (std::size_t e = 0; e < v.extent; ++e) {
          for (std::size_t c = 0; c < v.inner; ++c) {
            gx[(a * v.extent + e) * v.inner + c] += oi->grad[a * v.inner + c] * factor;
          }
        }
      }
    });
  }
  return out;
}
}  // namespace

Tensor reduce_sum(const Tensor& x) { return reduce_all(x, 1.0, "reduce_sum"); }
Tensor reduce_mean(const Tensor& x) {
  return reduce_all(x, 1.0 / static_cast<double>(x.size()), "reduce_mean");
}
Tensor reduce_sum(const Tensor& x, std::size_t axis) { return reduce_axis(x, axis, false, "reduce_sum"); }
Tensor reduce_mean(const Tensor& x, std::size_t axis) { return reduce_axis(x, axis, true, "reduce_mean"); }

Tensor frobenius_norm_squared(const Tensor& x) {
  constexpr std::string_view op = "frobenius_norm_squared";
  double s = 0.0;
  for (double v : x.data()) s += v * v;
  Tensor out = Tensor::scalar(s);
  check_finite(out, op);
  if (needs_grad({&x})) {
    DataPtr xi = x.impl();
    DataPtr oi = out.impl();
    record(op, {xi}, {oi}, [xi, oi] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      const double g = 2.0 * oi->grad[0];
      double* gx = xi->grad_buffer();
      for (std::size_t i = 0; i < xi->value.size(); ++i) gx[i] += g * xi->value[i];
    });
  }
  return out;
}

// ---- normalization ----------------------------------------------------------

Tensor batchnorm_1d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormBuffers& buffers,
                    bool training) {
  constexpr std::string_view op = "batchnorm_1d";
  require_rank2(x, op);
  const std::size_t n = x.dim(0);
  const std::size_t d = x.dim(1);
  require(gamma.size() == d && beta.size() == d, op, "affine parameters do not match feature count");
  require(buffers.running_mean.size() == d && buffers.running_var.size() == d, op,
          "running statistics do not match feature count");
  if (training && n < 2) throw DimensionError("batchnorm_1d: training mode needs batch size >= 2");

  std::vector<double> mean(d, 0.0);
  std::vector<double> inv_std(d, 0.0);
  auto xv = x.data();
  if (training) {
    std::vector<double> var(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) mean[j] += xv[i * d + j];
    for (auto& m : mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        const double c = xv[i * d + j] - mean[j];
        var[j] += c * c;
      }
    }
    for (std::size_t j = 0; j < d; ++j) {
      const double biased = var[j] / static_cast<double>(n);
      const double unbiased = var[j] / static_cast<double>(n - 1);
      inv_std[j] = 1.0 / std::sqrt(biased + buffers.eps);
      buffers.running_mean[j] = (1.0 - buffers.momentum) * buffers.running_mean[j] + buffers.momentum * mean[j];
      buffers.running_var[j] = (1.0 - buffers.momentum) * buffers.running_var[j] + buffers.momentum * unbiased;
    }
  } else {
    for (std::size_t j = 0; j < d; ++j) {
      mean[j] = buffers.running_mean[j];
      inv_std[j] = 1.0 / std::sqrt(buffers.running_var[j] + buffers.eps);
    }
  }

  Tensor xhat = alloc({n, d});
  Tensor out = alloc({n, d});
  auto xh = xhat.mutable_data();
  auto o = out.mutable_data();
  auto gv = gamma.data();
  auto bv = beta.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      xh[i * d + j] = (xv[i * d + j] - mean[j]) * inv_std[j];
      o[i * d + j] = gv[j] * xh[i * d + j] + bv[j];
    }
  }
  check_finite(out, op);
  if (needs_grad({&x, &gamma, &beta})) {
    DataPtr xi = x.impl();
    DataPtr gi = gamma.impl();
    DataPtr bi = beta.impl();
    DataPtr oi = out.impl();
    DataPtr xhi = xhat.impl();
    record(op, {xi, gi, bi}, {oi}, [xi, gi, bi, oi, xhi, inv_std, n, d, training] {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      const double* xh = xhi->value.data();
      if (bi->requires_grad) {
        double* gb = bi->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
      }
      if (gi->requires_grad) {
        double* gg = gi->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xh[i * d + j];
      }
      if (!xi->requires_grad) return;
      double* gx = xi->grad_buffer();
      const double* gamma_v = gi->value.data();
      if (!training) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[i * d + j] * gamma_v[j] * inv_std[j];
        return;
      }
      const double nn = static_cast<double>(n);
      for (std::size_t j = 0; j < d; ++j) {
        double sum_g = 0.0;
        double sum_gx = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          sum_g += g[i * d + j];
          sum_gx += g[i * d + j] * xh[i * d + j];
        }
        const double k = gamma_v[j] * inv_std[j] / nn;
        for (std::size_t i = 0; i < n; ++i) {
          gx[i * d + j] += k * (nn * g[i * d + j] - sum_g - xh[i * d + j] * sum_gx);
        }
      }
    });
  }
  return out;
}

// ---- recurrent --------------------------------------------------------------

LstmOutput lstm_cell(const Tensor& x, const Tensor& h, const Tensor& c, const Tensor& w_ih, const Tensor& w_hh,
                     const Tensor& bias) {
  constexpr std::string_view op = "lstm_cell";
  require_rank2(x, op);
  require_rank2(h, op);
  require_rank2(c, op);
  require_rank2(w_ih, op);
  require_rank2(w_hh, op);
  const std::size_t n = x.dim(0);
  const std::size_t in = x.dim(1);
  const std::size_t hid = h.dim(1);
  require(h.dim(0) == n && c.shape() == h.shape(), op, "state shapes do not match batch");
  require(w_ih.dim(0) == in && w_ih.dim(1) == 4 * hid, op, "w_ih must be in x 4H");
  require(w_hh.dim(0) == hid && w_hh.dim(1) == 4 * hid, op, "w_hh must be H x 4H");
  require(bias.size() == 4 * hid, op, "bias must have 4H entries");

  const auto en = static_cast<Eigen::Index>(n);
  const auto ein = static_cast<Eigen::Index>(in);
  const auto eh = static_cast<Eigen::Index>(hid);
  // Activated gates i, f, g, o laid out as n x 4H.
  auto gates = std::make_shared<Buffer>(n * 4 * hid);
  MatMap gm(gates->data(), en, 4 * eh);
  gm.noalias() = ConstMatMap(x.data().data(), en, ein) * ConstMatMap(w_ih.data().data(), ein, 4 * eh);
  gm.noalias() += ConstMatMap(h.data().data(), en, eh) * ConstMatMap(w_hh.data().data(), eh, 4 * eh);
  gm.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), 4 * eh);

  Tensor h_out = alloc({n, hid});
  Tensor c_out = alloc({n, hid});
  auto tanh_c = std::make_shared<Buffer>(n * hid);
  auto ho = h_out.mutable_data();
  auto co = c_out.mutable_data();
  auto cv = c.data();
  for (std::size_t r = 0; r < n; ++r) {
    double* gr = gates->data() + r * 4 * hid;
    for (std::size_t j = 0; j < hid; ++j) {
      gr[j] = stable_sigmoid(gr[j]);
      gr[hid + j] = stable_sigmoid(gr[hid + j]);
      gr[2 * hid + j] = std::tanh(gr[2 * hid + j]);
      gr[3 * hid + j] = stable_sigmoid(gr[3 * hid + j]);
      const double cn = gr[hid + j] * cv[r * hid + j] + gr[j] * gr[2 * hid + j];
      co[r * hid + j] = cn;
      (*tanh_c)[r * hid + j] = std::tanh(cn);
      ho[r * hid + j] = gr[3 * hid + j] * (*tanh_c)[r * hid + j];
    }
  }
  check_finite(h_out, op);
  check_finite(c_out, op);
  if (needs_grad({&x, &h, &c, &w_ih, &w_hh, &bias})) {
    DataPtr xi = x.impl();
    DataPtr hi = h.impl();
    DataPtr ci = c.impl();
    DataPtr wii = w_ih.impl();
    DataPtr whi = w_hh.impl();
    DataPtr bi = bias.impl();
    DataPtr hoi = h_out.impl();
    DataPtr coi = c_out.impl();
    record(op, {xi, hi, ci, wii, whi, bi}, {hoi, coi},
           [=] {
             if (hoi->grad.empty() && coi->grad.empty()) return;
             Buffer dpre(n * 4 * hid, 0.0);
             const double* gv = gates->data();
             for (std::size_t r = 0; r < n; ++r) {
               for (std::size_t j = 0; j < hid; ++j) {
                 const std::size_t k = r * hid + j;
                 const double ig = gv[r * 4 * hid + j];
                 const double fg = gv[r * 4 * hid + hid + j];
                 const double gg = gv[r * 4 * hid + 2 * hid + j];
                 const double og = gv[r * 4 * hid + 3 * hid + j];
                 const double dh = hoi->grad.empty() ? 0.0 : hoi->grad[k];
                 const double tc = (*tanh_c)[k];
                 double dc = coi->grad.empty() ? 0.0 : coi->grad[k];
                 dc += dh * og * (1.0 - tc * tc);
                 if (ci->requires_grad) ci->grad_buffer()[k] += dc * fg;
                 dpre[r * 4 * hid + j] = dc * gg * ig * (1.0 - ig);
                 dpre[r * 4 * hid + hid + j] = dc * ci->value[k] * fg * (1.0 - fg);
                 dpre[r * 4 * hid + 2 * hid + j] = dc * ig * (1.0 - gg * gg);
                 dpre[r * 4 * hid + 3 * hid + j] = dh * tc * og * (1.0 - og);
               }
             }
             ConstMatMap dp(dpre.data(), en, 4 * eh);
             if (xi->requires_grad)
               MatMap(xi->grad_buffer(), en, ein).noalias() += dp * ConstMatMap(wii->value.data(), ein, 4 * eh).transpose();
             if (hi->requires_grad)
               MatMap(hi->grad_buffer(), en, eh).noalias() += dp * ConstMatMap(whi->value.data(), eh, 4 * eh).transpose();
             if (wii->requires_grad)
               MatMap(wii->grad_buffer(), ein, 4 * eh).noalias() += ConstMatMap(xi->value.data(), en, ein).transpose() * dp;
             if (whi->requires_grad)
               MatMap(whi->grad_buffer(), eh, 4 * eh).noalias() += ConstMatMap(hi->value.data(), en, eh).transpose() * dp;
             if (bi->requires_grad)
               Eigen::Map<Eigen::RowVectorXd>(bi->grad_buffer(), 4 * eh) += dp.colwise().sum();
           });
  }
  return {h_out, c_out};
}

// ---- shape ops --------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  constexpr std::string_view op = "concat";
  require(!parts.empty(), op, "no inputs");
  const Shape& first = parts.front().shape();
  require(axis < first.size(), op, "axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    require(p.rank() == first.size(), op, "rank mismatch");
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (i != axis) require(p.dim(i) == first[i], op, "shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(first));
    }
    out_shape[axis] += p.dim(axis);
  }
  const AxisView ov = axis_view(out_shape, axis);
  Tensor out = alloc(out_shape);
  auto o = out.mutable_data();
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const AxisView pv = axis_view(p.shape(), axis);
    auto pvals = p.data();
    for (std::size_t a = 0; a < pv.outer; ++a) {
      std::copy_n(pvals.begin() + static_cast<std::ptrdiff_t>(a * pv.extent * pv.inner), pv.extent * pv.inner,
                  o.begin() + static_cast<std::ptrdiff_t>((a * ov.extent + offset) * ov.inner));
    }
    offset += p.dim(axis);
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (any && grad_enabled()) {
    std::vector<DataPtr> ins;
    for (const auto& p : parts) ins.push_back(p.impl());
    DataPtr oi = out.impl();
    record(op, ins, {oi}, [ins, oi, offsets, ov, axis] {
      if (oi->grad.empty()) return;
      for (std::size_t k = 0; k < ins.size(); ++k) {
        if (!ins[k]->requires_grad) continue;
        const AxisView pv = axis_view(ins[k]->shape, axis);
        double* gp = ins[k]->grad_buffer();
        for (std::size_t a = 0; a < pv.outer; ++a) {
          const double* src = oi->grad.data() + (a * ov.extent + offsets[k]) * ov.inner;
          double* dst = gp + a * pv.extent * pv.inner;
          for (std::size_t i = 0; i < pv.extent * pv.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  constexpr std::string_view op = "slice";
  require(axis < x.rank(), op, "axis out of range for " + shape_str(x.shape()));
  require(begin < end && end <= x.dim(axis), op,
          "range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " + shape_str(x.shape()));
  const AxisView xv = axis_view(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t chunk = (end - begin) * xv.inner;
  Tensor out = alloc(out_shape);
  auto o = out.mutable_data();
  auto vals = x.data();
  for (std::size_t a = 0; a < xv.outer; ++a) {
    std::copy_n(vals.begin() + static_cast<std::ptrdiff_t>((a * xv.extent + begin) * xv.inner), chunk,
                o.begin() + static_cast<std::ptrdiff_t>(a * chunk));
  }
  if (needs_grad({&x})) {
    DataPtr xi = x.impl();
    DataPtr oi = out.impl();
    record(op, {xi}, {oi}, [xi, oi, xv, begin, chunk] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      double* gx = xi->grad_buffer();
      for (std::size_t a = 0; a < xv.outer; ++a) {
        double* dst = gx + (a * xv.extent + begin) * xv.inner;
        const double* src = oi->grad.data() + a * chunk;
        for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  constexpr std::string_view op = "reshape";
  require(shape_size(shape) == x.size(), op,
          "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  Tensor out = Tensor::from(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  if (needs_grad({&x})) {
    DataPtr xi = x.impl();
    DataPtr oi = out.impl();
    record(op, {xi}, {oi}, [xi, oi] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      double* gx = xi->grad_buffer();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) gx[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows) {
  constexpr std::string_view op = "select_rows";
  require_rank2(x, op);
  require(!rows.empty(), op, "empty row selection");
  const std::size_t d = x.dim(1);
  for (auto r : rows) require(r < x.dim(0), op, "row index " + std::to_string(r) + " out of range");
  Tensor out = alloc({rows.size(), d});
  auto o = out.mutable_data();
  auto vals = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(vals.begin() + static_cast<std::ptrdiff_t>(rows[i] * d), d,
                o.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  if (needs_grad({&x})) {
    DataPtr xi = x.impl();
    DataPtr oi = out.impl();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    record(op, {xi}, {oi}, [xi, oi, idx, d] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      double* gx = xi->grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gx[idx[i] * d + j] += oi->grad[i * d + j];
    });
  }
  return out;
}

}  // namespace airl
