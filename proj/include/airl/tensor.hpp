#pragma once
//
// Dense float64 tensors with a reverse-mode gradient tape.
//
// Every differentiable op computes its value eagerly and, when any input
// requires a gradient, appends a node to the calling thread's GradTape.
// GradTape::backward walks the nodes in reverse append order exactly once.
//

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace airl {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// 64-byte aligned storage. Vectorized kernels peel unaligned heads, which
// changes the summation order, so a fixed alignment keeps results bit-exact
// from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

struct TensorData {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until a gradient reaches this tensor
  bool requires_grad = false;

  double* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad.data();
  }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t size() const { return impl_->value.size(); }
  // rows/cols treat a rank-1 tensor as a single row
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return impl_->value; }
  std::span<double> mutable_data() { return impl_->value; }
  double item() const;
  double operator[](std::size_t i) const { return impl_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return impl_->value[r * cols() + c]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  // Value copy with no tape history.
  Tensor detach() const;

  const std::shared_ptr<TensorData>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorData> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorData> impl_;
  friend class GradTape;
  friend Tensor wrap(std::shared_ptr<TensorData>);
};

Tensor wrap(std::shared_ptr<TensorData> impl);

class GradTape {
 public:
  struct Node {
    std::string_view op;
    std::vector<std::shared_ptr<TensorData>> inputs;
    std::vector<std::shared_ptr<TensorData>> outputs;
    std::function<void()> backward;
  };

  void record(Node node);
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  // Populates d(loss)/d(leaf) for every requires_grad leaf reachable from
  // the loss, then clears the tape.
  void backward(const Tensor& loss);
  void clear() { nodes_.clear(); }

  // The tape owned by the calling thread.
  static GradTape& active();

 private:
  std::vector<Node> nodes_;
};

void backward(const Tensor& loss);

// Disables recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Collects the inputs of piecewise-linear ops (relu, leaky_relu) while
// alive so a gradient checker can tell when a perturbation crossed a kink.
class KinkMonitor {
 public:
  KinkMonitor();
  ~KinkMonitor();
  KinkMonitor(const KinkMonitor&) = delete;
  KinkMonitor& operator=(const KinkMonitor&) = delete;
  const std::vector<double>& values() const { return values_; }
  void observe(std::span<const double> v) { values_.insert(values_.end(), v.begin(), v.end()); }

 private:
  std::vector<double> values_;
  KinkMonitor* previous_;
};

// ---- differentiable ops -----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// x: n x in, w: in x out, b: out -> x w + b
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor transpose(const Tensor& x);

Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope = 0.01);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);

Tensor log_softmax(const Tensor& x, std::size_t axis);
Tensor softmax(const Tensor& x, std::size_t axis);

// Elementwise with right-aligned broadcasting of size-1 dimensions.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);

Tensor reduce_sum(const Tensor& x);
Tensor reduce_mean(const Tensor& x);
// Keeps the reduced axis with extent 1.
Tensor reduce_sum(const Tensor& x, std::size_t axis);
Tensor reduce_mean(const Tensor& x, std::size_t axis);
Tensor frobenius_norm_squared(const Tensor& x);

struct BatchNormBuffers {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormBuffers(std::size_t features = 0)
      : running_mean(features, 0.0), running_var(features, 1.0) {}
};

// x: n x d. Training mode normalizes by batch statistics (biased variance)
// and updates the running buffers with the unbiased variance.
Tensor batchnorm_1d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    BatchNormBuffers& buffers, bool training);

struct LstmOutput {
  Tensor h;
  Tensor c;
};

// Gate order i, f, g, o. x: n x in, h, c: n x H, w_ih: in x 4H,
// w_hh: H x 4H, bias: 4H.
LstmOutput lstm_cell(const Tensor& x, const Tensor& h, const Tensor& c, const Tensor& w_ih,
                     const Tensor& w_hh, const Tensor& bias);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);
// Gathers rows of a rank-2 tensor.
Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows);

}  // namespace airl
