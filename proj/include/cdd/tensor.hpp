#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace cdd {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty means "no gradient"
  bool requires_grad = false;  // trainable leaf
  bool tracked = false;        // gradient flows through this node
  bool leaf = true;
};

}  // namespace detail

// Dense double-precision tensor with shared-handle semantics: copies alias
// the same storage, as parameters are referenced both by the model and by
// the tape. Use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }

  std::span<double> data() { return node_->value; }
  std::span<const double> data() const { return node_->value; }
  double item() const;
  double at(std::size_t i) const { return node_->value.at(i); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool tracked() const { return node_->tracked; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void clear_grad() { node_->grad.clear(); }

  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend class Tape;

  std::shared_ptr<detail::Node> node_;
};

// Define-by-run record of executed operations. A tape constructed with
// recording disabled evaluates forward values only.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return entries_.size(); }

  // Creates an op output. It is tracked when recording and any input is.
  Tensor make_output(Shape shape, std::vector<double> values,
                     std::initializer_list<const Tensor*> inputs);
  Tensor make_output(Shape shape, std::vector<double> values,
                     const std::vector<Tensor>& inputs);

  // Registers the backward closure for a tracked output. The closure reads
  // out.grad and accumulates into its inputs via accumulate().
  void record(const Tensor& out, std::function<void()> backward);

  // Reverse sweep from a scalar loss. Leaves keep their gradients
  // (accumulating across calls); intermediate buffers are released.
  void backward(const Tensor& loss);

  // Gradient buffer of a tracked tensor, allocated on first use.
  static std::vector<double>& grad_buffer(const Tensor& t);

 private:
  struct Entry {
    std::shared_ptr<detail::Node> output;
    std::function<void()> backward;
  };

  bool recording_;
  std::vector<Entry> entries_;
};

// Forward operations. Every op validates shapes and records its backward
// closure on the tape when gradients are needed. Broadcasting is limited to
// a bias vector added across the leading (row) dimension.
namespace ops {

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
// x [n, k] times w [d, k] transposed -> [n, d].
Tensor linear(Tape& tape, const Tensor& x, const Tensor& w);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double c);
Tensor sum(Tape& tape, const Tensor& a);
Tensor mean(Tape& tape, const Tensor& a);
Tensor gelu(Tape& tape, const Tensor& a);
Tensor softmax_rows(Tape& tape, const Tensor& a);
Tensor log_softmax_rows(Tape& tape, const Tensor& a);
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain,
                  const Tensor& bias, double eps = 1e-5);
Tensor embedding(Tape& tape, const Tensor& table, std::span<const int> index);
// out[i] = a[i, index[i]].
Tensor gather(Tape& tape, const Tensor& a, std::span<const int> index);
Tensor concat_rows(Tape& tape, const std::vector<Tensor>& parts);
// Mean softmax cross-entropy of logits [n, c] against class targets.
Tensor cross_entropy(Tape& tape, const Tensor& logits,
                     std::span<const int> targets);
// Per-row KL(p_i || q_i) -> [n]; q clamped at 1e-12, 0 log 0 := 0.
Tensor kl_rows(Tape& tape, const Tensor& p, const Tensor& q);
// Multi-head scaled dot-product attention for `batch` independent
// sequences: q [batch*lq, d], k and v [batch*lk, d].
Tensor attention(Tape& tape, const Tensor& q, const Tensor& k,
                 const Tensor& v, std::size_t batch, std::size_t heads);
// out[i] = x[i] (1 x m) times mats[i] (m x s); mats is constant row-major.
Tensor mix_rows(Tape& tape, const Tensor& x,
                std::shared_ptr<const std::vector<double>> mats,
                std::size_t out_cols);
// Divide each row by its sum.
Tensor normalize_rows(Tape& tape, const Tensor& x);
// Sum consecutive groups of `group` entries of a vector: [n] -> [n/group].
Tensor segment_sum(Tape& tape, const Tensor& v, std::size_t group);
// Scalar sum_i w[i] * v[i] with constant weights.
Tensor weighted_sum(Tape& tape, const Tensor& v, std::span<const double> w);

}  // namespace ops

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
  std::size_t checked = 0;
  std::vector<double> rel_errors;  // one per scalar, parameter order
  std::vector<double> tape_grads;
  std::vector<double> fd_grads;
  bool passed = false;
};

// Compares tape gradients of f with central differences
// (f(p + step) - f(p - step)) / (2 step) for every scalar in params.
// The relative error uses max(|tape|, |fd|, abs_floor) as denominator.
FiniteDiffReport finite_diff_check(const std::function<Tensor(Tape&)>& f,
                                   const std::vector<Tensor>& params,
                                   double step, double tol,
                                   double abs_floor = 1e-6);

}  // namespace cdd
