#include "cdd/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "cdd/errors.hpp"

namespace cdd {

namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMatrix>;
using CMapM = Eigen::Map<const RowMatrix>;

constexpr double kProbFloor = 1e-12;

CMapM cmap(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return CMapM(v.data(), static_cast<Eigen::Index>(r),
               static_cast<Eigen::Index>(c));
}

MapM map(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MapM(v.data(), static_cast<Eigen::Index>(r),
              static_cast<Eigen::Index>(c));
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a,
                                 const Shape& b) {
  throw ConfigError(std::string(op) + ": shape mismatch " + shape_string(a) +
                    " vs " + shape_string(b));
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ConfigError(std::string(op) + ": expected rank " +
                      std::to_string(rank) + ", got " +
                      shape_string(t.shape()));
  }
}

void require_finite(const char* op, std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(op) + ": non-finite input");
    }
  }
}

// Shorthand for closures: node pointer and gradient access.
using NodePtr = std::shared_ptr<detail::Node>;

std::vector<double>& gbuf(const NodePtr& n) {
  if (n->grad.empty()) n->grad.assign(n->value.size(), 0.0);
  return n->grad;
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  auto node = std::make_shared<detail::Node>();
  node->value.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw ConfigError("Tensor::from: shape " + shape_string(shape) +
                      " does not hold " + std::to_string(values.size()) +
                      " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

double Tensor::item() const {
  if (numel() != 1) {
    throw UsageError("item() on tensor of shape " + shape_string(shape()));
  }
  return node_->value[0];
}

void Tensor::set_requires_grad(bool on) {
  if (!node_->leaf) throw UsageError("requires_grad can only be set on leaves");
  node_->requires_grad = on;
  node_->tracked = on;
  if (!on) node_->grad.clear();
}

Tensor Tensor::clone() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  node->requires_grad = node_->requires_grad;
  node->tracked = node_->requires_grad;
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// Tape

Tensor Tape::make_output(Shape shape, std::vector<double> values,
                         std::initializer_list<const Tensor*> inputs) {
  Tensor out = Tensor::from(std::move(shape), std::move(values));
  out.node_->leaf = false;
  if (recording_) {
    for (const Tensor* in : inputs) {
      if (in->tracked()) {
        out.node_->tracked = true;
        break;
      }
    }
  }
  return out;
}

Tensor Tape::make_output(Shape shape, std::vector<double> values,
                         const std::vector<Tensor>& inputs) {
  Tensor out = Tensor::from(std::move(shape), std::move(values));
  out.node_->leaf = false;
  if (recording_) {
    for (const Tensor& in : inputs) {
      if (in.tracked()) {
        out.node_->tracked = true;
        break;
      }
    }
  }
  return out;
}

void Tape::record(const Tensor& out, std::function<void()> backward) {
  if (!out.tracked()) return;
  entries_.push_back({out.node(), std::move(backward)});
}

std::vector<double>& Tape::grad_buffer(const Tensor& t) {
  return gbuf(t.node());
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward: loss must be a scalar, got " +
                     (loss.defined() ? shape_string(loss.shape())
                                     : std::string("undefined")));
  }
  if (!loss.tracked()) return;
  if (entries_.empty() && !loss.node()->leaf) {
    throw UsageError("backward: tape is empty");
  }
  gbuf(loss.node())[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward();
  }
  for (auto& e : entries_) e.output->grad.clear();
  entries_.clear();
}

// ---------------------------------------------------------------------------
// Operations

namespace ops {

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) shape_mismatch("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  map(out, m, n).noalias() =
      cmap(a.node()->value, m, k) * cmap(b.node()->value, k, n);
  Tensor y = tape.make_output({m, n}, std::move(out), {&a, &b});
  NodePtr pa = a.node(), pb = b.node(), py = y.node();
  tape.record(y, [pa, pb, py, m, k, n] {
    auto dy = cmap(py->grad, m, n);
    if (pa->tracked) {
      map(gbuf(pa), m, k).noalias() += dy * cmap(pb->value, k, n).transpose();
    }
    if (pb->tracked) {
      map(gbuf(pb), k, n).noalias() += cmap(pa->value, m, k).transpose() * dy;
    }
  });
  return y;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w) {
  require_rank("linear", x, 2);
  require_rank("linear", w, 2);
  if (x.dim(1) != w.dim(1)) shape_mismatch("linear", x.shape(), w.shape());
  const std::size_t n = x.dim(0), k = x.dim(1), d = w.dim(0);
  std::vector<double> out(n * d);
  map(out, n, d).noalias() =
      cmap(x.node()->value, n, k) * cmap(w.node()->value, d, k).transpose();
  Tensor y = tape.make_output({n, d}, std::move(out), {&x, &w});
  NodePtr px = x.node(), pw = w.node(), py = y.node();
  tape.record(y, [px, pw, py, n, k, d] {
    auto dy = cmap(py->grad, n, d);
    if (px->tracked) {
      map(gbuf(px), n, k).noalias() += dy * cmap(pw->value, d, k);
    }
    if (pw->tracked) {
      map(gbuf(pw), d, k).noalias() += dy.transpose() * cmap(px->value, n, k);
    }
  });
  return y;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_mismatch("add", a.shape(), b.shape());
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  Tensor y = tape.make_output(a.shape(), std::move(out), {&a, &b});
  NodePtr pa = a.node(), pb = b.node(), py = y.node();
  tape.record(y, [pa, pb, py] {
    for (const NodePtr& p : {pa, pb}) {
      if (!p->tracked) continue;
      auto& g = gbuf(p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += py->grad[i];
    }
  });
  return y;
}

Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  require_rank("add_bias", x, 2);
  require_rank("add_bias", bias, 1);
  if (x.dim(1) != bias.dim(0)) {
    shape_mismatch("add_bias", x.shape(), bias.shape());
  }
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      out[i * d + j] = x.at(i * d + j) + bias.at(j);
  Tensor y = tape.make_output(x.shape(), std::move(out), {&x, &bias});
  NodePtr px = x.node(), pb = bias.node(), py = y.node();
  tape.record(y, [px, pb, py, n, d] {
    if (px->tracked) {
      auto& g = gbuf(px);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += py->grad[i];
    }
    if (pb->tracked) {
      auto& g = gbuf(pb);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) g[j] += py->grad[i * d + j];
    }
  });
  return y;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_mismatch("mul", a.shape(), b.shape());
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  Tensor y = tape.make_output(a.shape(), std::move(out), {&a, &b});
  NodePtr pa = a.node(), pb = b.node(), py = y.node();
  tape.record(y, [pa, pb, py] {
    if (pa->tracked) {
      auto& g = gbuf(pa);
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += py->grad[i] * pb->value[i];
    }
    if (pb->tracked) {
      auto& g = gbuf(pb);
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += py->grad[i] * pa->value[i];
    }
  });
  return y;
}

Tensor scale(Tape& tape, const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.at(i);
  Tensor y = tape.make_output(a.shape(), std::move(out), {&a});
  NodePtr pa = a.node(), py = y.node();
  tape.record(y, [pa, py, c] {
    auto& g = gbuf(pa);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * py->grad[i];
  });
  return y;
}

Tensor sum(Tape& tape, const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor y = tape.make_output({}, {s}, {&a});
  NodePtr pa = a.node(), py = y.node();
  tape.record(y, [pa, py] {
    auto& g = gbuf(pa);
    for (double& v : g) v += py->grad[0];
  });
  return y;
}

Tensor mean(Tape& tape, const Tensor& a) {
  if (a.numel() == 0) throw UsageError("mean of empty tensor");
  return scale(tape, sum(tape, a), 1.0 / static_cast<double>(a.numel()));
}

Tensor gelu(Tape& tape, const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.at(i);
    out[i] = 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x)));
  }
  Tensor y = tape.make_output(a.shape(), std::move(out), {&a});
  NodePtr pa = a.node(), py = y.node();
  tape.record(y, [pa, py] {
    auto& g = gbuf(pa);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = pa->value[i];
      const double th = std::tanh(c * (x + k * x * x * x));
      const double d = 0.5 * (1.0 + th) +
                       0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * k * x * x);
      g[i] += py->grad[i] * d;
    }
  });
  return y;
}

Tensor softmax_rows(Tape& tape, const Tensor& a) {
  require_rank("softmax_rows", a, 2);
  require_finite("softmax_rows", a.data());
  const std::size_t n = a.dim(0), c = a.dim(1);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = a.data().data() + i * c;
    double* y = out.data() + i * c;
    const double mx = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[j] /= z;
  }
  Tensor y = tape.make_output(a.shape(), std::move(out), {&a});
  NodePtr pa = a.node(), py = y.node();
  tape.record(y, [pa, py, n, c] {
    auto& g = gbuf(pa);
    for (std::size_t i = 0; i < n; ++i) {
      const double* yv = py->value.data() + i * c;
      const double* dy = py->grad.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += dy[j] * yv[j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += yv[j] * (dy[j] - dot);
    }
  });
  return y;
}

Tensor log_softmax_rows(Tape& tape, const Tensor& a) {
  require_rank("log_softmax_rows", a, 2);
  require_finite("log_softmax_rows", a.data());
  const std::size_t n = a.dim(0), c = a.dim(1);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = a.data().data() + i * c;
    const double mx = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[j] - lse;
  }
  Tensor y = tape.make_output(a.shape(), std::move(out), {&a});
  NodePtr pa = a.node(), py = y.node();
  tape.record(y, [pa, py, n, c] {
    auto& g = gbuf(pa);
    for (std::size_t i = 0; i < n; ++i) {
      const double* dy = py->grad.data() + i * c;
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += dy[j];
      for (std::size_t j = 0; j < c; ++j)
        g[i * c + j] += dy[j] - std::exp(py->value[i * c + j]) * s;
    }
  });
  return y;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain,
                  const Tensor& bias, double eps) {
  require_rank("layer_norm", x, 2);
  require_rank("layer_norm", gain, 1);
  require_rank("layer_norm", bias, 1);
  if (gain.dim(0) != x.dim(1)) shape_mismatch("layer_norm", x.shape(), gain.shape());
  if (bias.dim(0) != x.dim(1)) shape_mismatch("layer_norm", x.shape(), bias.shape());
  require_finite("layer_norm", x.data());
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> out(x.numel());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xv = x.data().data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xv[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xv[j] - mu) * (xv[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xv[j] - mu) * is;
      (*xhat)[i * d + j] = h;
      out[i * d + j] = h * gain.at(j) + bias.at(j);
    }
  }
  Tensor y = tape.make_output(x.shape(), std::move(out), {&x, &gain, &bias});
  NodePtr px = x.node(), pg = gain.node(), pb = bias.node(), py = y.node();
  tape.record(y, [px, pg, pb, py, xhat, inv_std, n, d] {
    const auto& dy = py->grad;
    if (pg->tracked) {
      auto& g = gbuf(pg);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
          g[j] += dy[i * d + j] * (*xhat)[i * d + j];
    }
    if (pb->tracked) {
      auto& g = gbuf(pb);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) g[j] += dy[i * d + j];
    }
    if (px->tracked) {
      auto& g = gbuf(px);
      const double inv_d = 1.0 / static_cast<double>(d);
      for (std::size_t i = 0; i < n; ++i) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = dy[i * d + j] * pg->value[j];
          m1 += dh;
          m2 += dh * (*xhat)[i * d + j];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = dy[i * d + j] * pg->value[j];
          g[i * d + j] +=
              (*inv_std)[i] * (dh - m1 - (*xhat)[i * d + j] * m2);
        }
      }
    }
  });
  return y;
}

Tensor embedding(Tape& tape, const Tensor& table, std::span<const int> index) {
  require_rank("embedding", table, 2);
  const std::size_t v = table.dim(0), d = table.dim(1), n = index.size();
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= v) {
      throw UsageError("embedding: index " + std::to_string(index[i]) +
                       " out of range for table of " + std::to_string(v) +
                       " rows");
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(index[i]) * d,
                d, out.data() + i * d);
  }
  Tensor y = tape.make_output({n, d}, std::move(out), {&table});
  NodePtr pt = table.node(), py = y.node();
  std::vector<int> idx(index.begin(), index.end());
  tape.record(y, [pt, py, idx = std::move(idx), d] {
    auto& g = gbuf(pt);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < d; ++j)
        g[static_cast<std::size_t>(idx[i]) * d + j] += py->grad[i * d + j];
  });
  return y;
}

Tensor gather(Tape& tape, const Tensor& a, std::span<const int> index) {
  require_rank("gather", a, 2);
  const std::size_t n = a.dim(0), c = a.dim(1);
  if (index.size() != n) {
    shape_mismatch("gather", a.shape(), Shape{index.size()});
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= c) {
      throw UsageError("gather: index out of range");
    }
    out[i] = a.at(i * c + static_cast<std::size_t>(index[i]));
  }
  Tensor y = tape.make_output({n}, std::move(out), {&a});
  NodePtr pa = a.node(), py = y.node();
  std::vector<int> idx(index.begin(), index.end());
  tape.record(y, [pa, py, idx = std::move(idx), c] {
    auto& g = gbuf(pa);
    for (std::size_t i = 0; i < idx.size(); ++i)
      g[i * c + static_cast<std::size_t>(idx[i])] += py->grad[i];
  });
  return y;
}

Tensor concat_rows(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  for (const Tensor& p : parts) {
    if (p.rank() == 0) throw ConfigError("concat_rows: scalar input");
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (t != tail) shape_mismatch("concat_rows", parts[0].shape(), p.shape());
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(rows * shape_numel(tail));
  for (const Tensor& p : parts)
    out.insert(out.end(), p.data().begin(), p.data().end());
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  Tensor y = tape.make_output(std::move(shape), std::move(out), parts);
  std::vector<NodePtr> nodes;
  for (const Tensor& p : parts) nodes.push_back(p.node());
  NodePtr py = y.node();
  tape.record(y, [nodes, py] {
    std::size_t off = 0;
    for (const NodePtr& p : nodes) {
      if (p->tracked) {
        auto& g = gbuf(p);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += py->grad[off + i];
      }
      off += p->value.size();
    }
  });
  return y;
}

Tensor cross_entropy(Tape& tape, const Tensor& logits,
                     std::span<const int> targets) {
  Tensor logp = log_softmax_rows(tape, logits);
  return scale(tape, sum(tape, gather(tape, logp, targets)),
               -1.0 / static_cast<double>(logits.dim(0)));
}

Tensor kl_rows(Tape& tape, const Tensor& p, const Tensor& q) {
  require_rank("kl_rows", p, 2);
  if (p.shape() != q.shape()) shape_mismatch("kl_rows", p.shape(), q.shape());
  require_finite("kl_rows", p.data());
  require_finite("kl_rows", q.data());
  const std::size_t n = p.dim(0), c = p.dim(1);
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n * c; ++i) {
    const double pv = p.at(i), qv = q.at(i);
    if (pv < 0.0 || qv < 0.0) throw UsageError("kl_rows: negative probability");
    if (pv > 0.0) {
      out[i / c] += pv * (std::log(pv) - std::log(std::max(qv, kProbFloor)));
    }
  }
  Tensor y = tape.make_output({n}, std::move(out), {&p, &q});
  NodePtr pp = p.node(), pq = q.node(), py = y.node();
  tape.record(y, [pp, pq, py, n, c] {
    if (pq->tracked) {
      auto& g = gbuf(pq);
      for (std::size_t i = 0; i < n * c; ++i) {
        const double pv = pp->value[i], qv = pq->value[i];
        if (pv > 0.0 && qv > kProbFloor) g[i] -= py->grad[i / c] * pv / qv;
      }
    }
    if (pp->tracked) {
      auto& g = gbuf(pp);
      for (std::size_t i = 0; i < n * c; ++i) {
        const double pv = pp->value[i];
        if (pv <= 0.0) continue;
        const double qv = std::max(pq->value[i], kProbFloor);
        g[i] += py->grad[i / c] * (std::log(pv) - std::log(qv) + 1.0);
      }
    }
  });
  return y;
}

Tensor attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                 std::size_t batch, std::size_t heads) {
  require_rank("attention", q, 2);
  require_rank("attention", k, 2);
  require_rank("attention", v, 2);
  if (k.shape() != v.shape()) shape_mismatch("attention", k.shape(), v.shape());
  if (q.dim(1) != k.dim(1)) shape_mismatch("attention", q.shape(), k.shape());
  if (batch == 0 || heads == 0 || q.dim(0) % batch || k.dim(0) % batch ||
      q.dim(1) % heads) {
    throw ConfigError("attention: rows " + shape_string(q.shape()) + " / " +
                      shape_string(k.shape()) + " not divisible by batch " +
                      std::to_string(batch) + " and heads " +
                      std::to_string(heads));
  }
  const std::size_t lq = q.dim(0) / batch, lk = k.dim(0) / batch;
  const std::size_t d = q.dim(1), dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  // Attention weights cached per (batch, head): lq x lk each.
  auto probs = std::make_shared<std::vector<double>>(batch * heads * lq * lk);
  std::vector<double> out(q.numel(), 0.0);
  const double* qv = q.data().data();
  const double* kv = k.data().data();
  const double* vv = v.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* P = probs->data() + (b * heads + h) * lq * lk;
      for (std::size_t i = 0; i < lq; ++i) {
        const double* qi = qv + (b * lq + i) * d + h * dh;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < lk; ++j) {
          const double* kj = kv + (b * lk + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
          P[i * lk + j] = s * inv;
          mx = std::max(mx, P[i * lk + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < lk; ++j)
          z += (P[i * lk + j] = std::exp(P[i * lk + j] - mx));
        for (std::size_t j = 0; j < lk; ++j) P[i * lk + j] /= z;
        double* oi = out.data() + (b * lq + i) * d + h * dh;
        for (std::size_t j = 0; j < lk; ++j) {
          const double* vj = vv + (b * lk + j) * d + h * dh;
          for (std::size_t e = 0; e < dh; ++e) oi[e] += P[i * lk + j] * vj[e];
        }
      }
    }
  }
  Tensor y = tape.make_output(q.shape(), std::move(out), {&q, &k, &v});
  NodePtr pq = q.node(), pk = k.node(), pv = v.node(), py = y.node();
  tape.record(y, [=] {
    std::vector<double> dp(lk);
    auto* gq = pq->tracked ? &gbuf(pq) : nullptr;
    auto* gk = pk->tracked ? &gbuf(pk) : nullptr;
    auto* gv = pv->tracked ? &gbuf(pv) : nullptr;
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const double* P = probs->data() + (b * heads + h) * lq * lk;
        for (std::size_t i = 0; i < lq; ++i) {
          const double* dyi = py->grad.data() + (b * lq + i) * d + h * dh;
          double dot = 0.0;
          for (std::size_t j = 0; j < lk; ++j) {
            const double* vj = pv->value.data() + (b * lk + j) * d + h * dh;
            double s = 0.0;
            for (std::size_t e = 0; e < dh; ++e) s += dyi[e] * vj[e];
            dp[j] = s;
            dot += s * P[i * lk + j];
            if (gv) {
              double* gvj = gv->data() + (b * lk + j) * d + h * dh;
              for (std::size_t e = 0; e < dh; ++e)
                gvj[e] += P[i * lk + j] * dyi[e];
            }
          }
          const double* qi = pq->value.data() + (b * lq + i) * d + h * dh;
          for (std::size_t j = 0; j < lk; ++j) {
            const double ds = P[i * lk + j] * (dp[j] - dot) * inv;
            const double* kj = pk->value.data() + (b * lk + j) * d + h * dh;
            if (gq) {
              double* gqi = gq->data() + (b * lq + i) * d + h * dh;
              for (std::size_t e = 0; e < dh; ++e) gqi[e] += ds * kj[e];
            }
            if (gk) {
              double* gkj = gk->data() + (b * lk + j) * d + h * dh;
              for (std::size_t e = 0; e < dh; ++e) gkj[e] += ds * qi[e];
            }
          }
        }
      }
    }
  });
  return y;
}

Tensor mix_rows(Tape& tape, const Tensor& x,
                std::shared_ptr<const std::vector<double>> mats,
                std::size_t out_cols) {
  require_rank("mix_rows", x, 2);
  const std::size_t n = x.dim(0), m = x.dim(1), s = out_cols;
  if (!mats || mats->size() != n * m * s) {
    throw ConfigError("mix_rows: constant block does not match " +
                      shape_string(x.shape()) + " x " + std::to_string(s));
  }
  std::vector<double> out(n * s, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* M = mats->data() + i * m * s;
    for (std::size_t a = 0; a < m; ++a) {
      const double w = x.at(i * m + a);
      if (w == 0.0) continue;
      for (std::size_t c = 0; c < s; ++c) out[i * s + c] += w * M[a * s + c];
    }
  }
  Tensor y = tape.make_output({n, s}, std::move(out), {&x});
  NodePtr px = x.node(), py = y.node();
  tape.record(y, [px, py, mats, n, m, s] {
    auto& g = gbuf(px);
    for (std::size_t i = 0; i < n; ++i) {
      const double* M = mats->data() + i * m * s;
      for (std::size_t a = 0; a < m; ++a) {
        double acc = 0.0;
        for (std::size_t c = 0; c < s; ++c) acc += py->grad[i * s + c] * M[a * s + c];
        g[i * m + a] += acc;
      }
    }
  });
  return y;
}

Tensor normalize_rows(Tape& tape, const Tensor& x) {
  require_rank("normalize_rows", x, 2);
  const std::size_t n = x.dim(0), c = x.dim(1);
  std::vector<double> out(x.numel());
  auto sums = std::make_shared<std::vector<double>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += x.at(i * c + j);
    if (!(s > 0.0) || !std::isfinite(s)) {
      throw NumericError("normalize_rows: row " + std::to_string(i) +
                         " has non-positive mass");
    }
    (*sums)[i] = s;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.at(i * c + j) / s;
  }
  Tensor y = tape.make_output(x.shape(), std::move(out), {&x});
  NodePtr px = x.node(), py = y.node();
  tape.record(y, [px, py, sums, n, c] {
    auto& g = gbuf(px);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j)
        dot += py->grad[i * c + j] * py->value[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        g[i * c + j] += (py->grad[i * c + j] - dot) / (*sums)[i];
    }
  });
  return y;
}

Tensor segment_sum(Tape& tape, const Tensor& v, std::size_t group) {
  require_rank("segment_sum", v, 1);
  if (group == 0 || v.dim(0) % group) {
    throw ConfigError("segment_sum: length " + std::to_string(v.dim(0)) +
                      " not divisible by group " + std::to_string(group));
  }
  const std::size_t n = v.dim(0) / group;
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < v.dim(0); ++i) out[i / group] += v.at(i);
  Tensor y = tape.make_output({n}, std::move(out), {&v});
  NodePtr pv = v.node(), py = y.node();
  tape.record(y, [pv, py, group] {
    auto& g = gbuf(pv);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += py->grad[i / group];
  });
  return y;
}

Tensor weighted_sum(Tape& tape, const Tensor& v, std::span<const double> w) {
  require_rank("weighted_sum", v, 1);
  if (w.size() != v.dim(0)) {
    shape_mismatch("weighted_sum", v.shape(), Shape{w.size()});
  }
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * v.at(i);
  Tensor y = tape.make_output({}, {s}, {&v});
  NodePtr pv = v.node(), py = y.node();
  std::vector<double> weights(w.begin(), w.end());
  tape.record(y, [pv, py, weights = std::move(weights)] {
    auto& g = gbuf(pv);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += weights[i] * py->grad[0];
  });
  return y;
}

}  // namespace ops

// ---------------------------------------------------------------------------

FiniteDiffReport finite_diff_check(const std::function<Tensor(Tape&)>& f,
                                   const std::vector<Tensor>& params,
                                   double step, double tol, double abs_floor) {
  if (!(step > 0.0)) throw UsageError("finite_diff_check: step must be > 0");
  auto eval = [&f] {
    Tape tape(false);
    return f(tape).item();
  };
  const double first = eval();
  const double second = eval();
  if (first != second && !(std::isnan(first) && std::isnan(second))) {
    throw UsageError("finite_diff_check: f is not deterministic");
  }

  for (const Tensor& p : params) p.node()->grad.clear();
  {
    Tape tape(true);
    Tensor loss = f(tape);
    tape.backward(loss);
  }

  FiniteDiffReport report;
  double total = 0.0;
  for (const Tensor& p : params) {
    auto& values = p.node()->value;
    const auto& g = p.node()->grad;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + step;
      const double fp = eval();
      values[i] = orig - step;
      const double fm = eval();
      values[i] = orig;
      const double fd = (fp - fm) / (2.0 * step);
      const double tg = g.empty() ? 0.0 : g[i];
      const double denom = std::max({std::abs(tg), std::abs(fd), abs_floor});
      const double rel = std::abs(tg - fd) / denom;
      report.rel_errors.push_back(rel);
      report.tape_grads.push_back(tg);
      report.fd_grads.push_back(fd);
      report.max_rel_error = std::max(report.max_rel_error, rel);
      total += rel;
    }
  }
  report.checked = report.rel_errors.size();
  report.mean_rel_error =
      report.checked ? total / static_cast<double>(report.checked) : 0.0;
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace cdd
