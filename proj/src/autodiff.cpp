#include "qcnn/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "qcnn/quaternion.hpp"

namespace qcnn::ad {

std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

namespace {

void check_shape(const Shape& s) {
  for (int d : s)
    if (d <= 0) throw std::invalid_argument("autodiff: shape dimensions must be positive");
}

[[noreturn]] void shape_mismatch(const char* op) {
  throw std::invalid_argument(std::string("autodiff: shape mismatch in ") + op);
}

void require_quaternion_shape(const Var& v, const char* op) {
  if (v.shape().empty() || v.shape().back() != 4) shape_mismatch(op);
}

}  // namespace

const Shape& Var::shape() const { return tape_->shape_of(id_); }
std::int64_t Var::size() const { return numel(shape()); }
std::span<const double> Var::value() const { return tape_->value_of(id_); }
std::span<const double> Var::grad() const { return tape_->grad_of(id_); }

double Var::scalar() const {
  if (size() != 1) throw std::invalid_argument("autodiff: scalar() on non-scalar variable");
  return value()[0];
}

Var Tape::leaf(Shape shape, std::span<const double> value, bool requires_grad) {
  check_shape(shape);
  if (numel(shape) != static_cast<std::int64_t>(value.size())) shape_mismatch("leaf");
  Node n;
  n.shape = std::move(shape);
  n.value.assign(value.begin(), value.end());
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Shape shape, std::vector<double> value, std::vector<int> inputs, BackwardFn backward) {
  check_shape(shape);
  if (numel(shape) != static_cast<std::int64_t>(value.size())) shape_mismatch("record");
  bool rg = false;
  for (int id : inputs) {
    if (id < 0 || id >= static_cast<int>(nodes_.size()))
      throw std::invalid_argument("autodiff: record() input refers to a later or missing node");
    rg = rg || nodes_[id].requires_grad;
  }
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  n.backward = std::move(backward);
  n.requires_grad = rg;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::backward(const Var& loss) {
  if (loss.size() != 1) throw std::invalid_argument("autodiff: backward() requires a scalar loss");
  const int root = loss.id();

  // Nodes feeding the loss, found by a reverse sweep over recording order.
  std::vector<char> reach(nodes_.size(), 0);
  reach[root] = 1;
  for (int id = root; id >= 0; --id) {
    if (!reach[id]) continue;
    for (int in : nodes_[id].inputs) reach[in] = 1;
  }
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    auto& n = nodes_[id];
    if (reach[id] && n.requires_grad)
      n.grad.assign(n.value.size(), 0.0);
    else
      n.grad.clear();
  }
  if (!nodes_[root].requires_grad) return;  // loss independent of any leaf
  nodes_[root].grad[0] = 1.0;
  for (int id = root; id >= 0; --id) {
    auto& n = nodes_[id];
    if (reach[id] && n.requires_grad && n.backward) n.backward(*this, id);
  }
}

std::span<const double> Tape::value_of(int id) const { return nodes_[id].value; }
std::span<double> Tape::grad_of(int id) { return nodes_[id].grad; }
const Shape& Tape::shape_of(int id) const { return nodes_[id].shape; }
bool Tape::requires_grad(int id) const { return nodes_[id].requires_grad; }

// -- elementwise binary ops ---------------------------------------------------

namespace {

enum class Bc { None, A, B };  // which operand broadcasts (is scalar)

struct BinaryPlan {
  Shape shape;
  Bc bc;
};

BinaryPlan plan_binary(const Var& a, const Var& b, const char* op) {
  if (a.shape() == b.shape()) return {a.shape(), Bc::None};
  if (b.size() == 1) return {a.shape(), Bc::B};
  if (a.size() == 1) return {b.shape(), Bc::A};
  shape_mismatch(op);
}

// dfa/dfb: partial derivatives as functions of (xa, xb).
template <typename F, typename Dfa, typename Dfb>
Var binary_op(Var a, Var b, const char* name, F f, Dfa dfa, Dfb dfb) {
  Tape& t = a.tape();
  const BinaryPlan plan = plan_binary(a, b, name);
  auto va = a.value(), vb = b.value();
  const std::int64_t n = numel(plan.shape);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i)
    out[i] = f(va[plan.bc == Bc::A ? 0 : i], vb[plan.bc == Bc::B ? 0 : i]);
  const int ia = a.id(), ib = b.id();
  const Bc bc = plan.bc;
  return t.record(plan.shape, std::move(out), {ia, ib}, [=](Tape& tp, int self) {
    auto g = tp.grad_of(self);
    auto vA = tp.value_of(ia);
    auto vB = tp.value_of(ib);
    auto gA = tp.grad_of(ia);
    auto gB = tp.grad_of(ib);
    const std::int64_t m = static_cast<std::int64_t>(g.size());
    for (std::int64_t i = 0; i < m; ++i) {
      const double xa = vA[bc == Bc::A ? 0 : i];
      const double xb = vB[bc == Bc::B ? 0 : i];
      if (!gA.empty()) gA[bc == Bc::A ? 0 : i] += g[i] * dfa(xa, xb);
      if (!gB.empty()) gB[bc == Bc::B ? 0 : i] += g[i] * dfb(xa, xb);
    }
  });
}

template <typename F, typename Df>
Var unary_op(Var a, F f, Df df) {
  Tape& t = a.tape();
  auto va = a.value();
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < va.size(); ++i) out[i] = f(va[i]);
  const int ia = a.id();
  return t.record(a.shape(), std::move(out), {ia}, [=](Tape& tp, int self) {
    auto g = tp.grad_of(self);
    auto vA = tp.value_of(ia);
    auto gA = tp.grad_of(ia);
    if (gA.empty()) return;
    for (std::size_t i = 0; i < g.size(); ++i) gA[i] += g[i] * df(vA[i]);
  });
}

}  // namespace

Var add(Var a, Var b) {
  return binary_op(a, b, "add", [](double x, double y) { return x + y; },
                   [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary_op(a, b, "sub", [](double x, double y) { return x - y; },
                   [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary_op(a, b, "mul", [](double x, double y) { return x * y; },
                   [](double, double y) { return y; }, [](double x, double) { return x; });
}

Var div(Var a, Var b) {
  return binary_op(a, b, "div", [](double x, double y) { return x / y; },
                   [](double, double y) { return 1.0 / y; },
                   [](double x, double y) { return -x / (y * y); });
}

Var scale(Var a, double k) {
  return unary_op(a, [k](double x) { return k * x; }, [k](double) { return k; });
}

Var offset(Var a, double k) {
  return unary_op(a, [k](double x) { return x + k; }, [](double) { return 1.0; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var square(Var a) {
  return unary_op(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var sqrt_elem(Var a) {
  return unary_op(a, [](double x) { return std::sqrt(x); },
                  [](double x) { return x > 0.0 ? 0.5 / std::sqrt(x) : 0.0; });
}

Var relu(Var a) {
  return unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sum(Var a) {
  Tape& t = a.tape();
  auto va = a.value();
  double s = 0.0;
  for (double x : va) s += x;
  const int ia = a.id();
  return t.record({1}, {s}, {ia}, [=](Tape& tp, int self) {
    auto g = tp.grad_of(self);
    auto gA = tp.grad_of(ia);
    if (gA.empty()) return;
    for (double& x : gA) x += g[0];
  });
}

// -- quaternion primitives ----------------------------------------------------

namespace {

inline Quaternion load_q(std::span<const double> v, std::int64_t i) {
  return {v[4 * i], v[4 * i + 1], v[4 * i + 2], v[4 * i + 3]};
}

inline void add_q(std::span<double> g, std::int64_t i, const Quaternion& q) {
  g[4 * i] += q.w;
  g[4 * i + 1] += q.x;
  g[4 * i + 2] += q.y;
  g[4 * i + 3] += q.z;
}

}  // namespace

Var hamilton(Var p, Var q) {
  if (p.shape() != q.shape()) shape_mismatch("hamilton");
  require_quaternion_shape(p, "hamilton");
  Tape& t = p.tape();
  auto vp = p.value(), vq = q.value();
  const std::int64_t n = p.size() / 4;
  std::vector<double> out(vp.size());
  for (std::int64_t i = 0; i < n; ++i) {
    const Quaternion r = hamilton_product(load_q(vp, i), load_q(vq, i));
    out[4 * i] = r.w;
    out[4 * i + 1] = r.x;
    out[4 * i + 2] = r.y;
    out[4 * i + 3] = r.z;
  }
  const int ip = p.id(), iq = q.id();
  return t.record(p.shape(), std::move(out), {ip, iq}, [=](Tape& tp, int self) {
    auto g = tp.grad_of(self);
    auto vP = tp.value_of(ip);
    auto vQ = tp.value_of(iq);
    auto gP = tp.grad_of(ip);
    auto gQ = tp.grad_of(iq);
    for (std::int64_t i = 0; i < n; ++i) {
      const Quaternion gi = load_q(g, i);
      // <g, p q> = <g q*, p> = <p* g, q>
      if (!gP.empty()) add_q(gP, i, hamilton_product(gi, conjugate(load_q(vQ, i))));
      if (!gQ.empty()) add_q(gQ, i, hamilton_product(conjugate(load_q(vP, i)), gi));
    }
  });
}

Var qinverse(Var q) {
  require_quaternion_shape(q, "qinverse");
  Tape& t = q.tape();
  auto vq = q.value();
  const std::int64_t n = q.size() / 4;
  std::vector<double> out(vq.size());
  for (std::int64_t i = 0; i < n; ++i) {
    const Quaternion y = inverse(load_q(vq, i));  // throws on degenerate input
    out[4 * i] = y.w;
    out[4 * i + 1] = y.x;
    out[4 * i + 2] = y.y;
    out[4 * i + 3] = y.z;
  }
  const int iq = q.id();
  return t.record(q.shape(), std::move(out), {iq}, [=](Tape& tp, int self) {
    auto g = tp.grad_of(self);
    auto vY = tp.value_of(self);
    auto gQ = tp.grad_of(iq);
    if (gQ.empty()) return;
    for (std::int64_t i = 0; i < n; ++i) {
      // d(q^-1) = -q^-1 dq q^-1  =>  grad_q = -(y* g y*),  y = q^-1
      const Quaternion yc = conjugate(load_q(vY, i));
      const Quaternion gi = load_q(g, i);
      add_q(gQ, i, -1.0 * hamilton_product(hamilton_product(yc, gi), yc));
    }
  });
}

Var magnitude(Var q) {
  require_quaternion_shape(q, "magnitude");
  Tape& t = q.tape();
  auto vq = q.value();
  const std::int64_t n = q.size() / 4;
  Shape out_shape(q.shape().begin(), q.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out[i] = norm(load_q(vq, i));
  const int iq = q.id();
  return t.record(out_shape, std::move(out), {iq}, [=](Tape& tp, int self) {
    auto g = tp.grad_of(self);
    auto vQ = tp.value_of(iq);
    auto vM = tp.value_of(self);
    auto gQ = tp.grad_of(iq);
    if (gQ.empty()) return;
    for (std::int64_t i = 0; i < n; ++i) {
      const double m = vM[i];
      if (m < 1e-300) continue;  // subgradient 0 at the cone point
      const double s = g[i] / m;
      add_q(gQ, i, s * load_q(vQ, i));
    }
  });
}

Var real_part(Var q) {
  require_quaternion_shape(q, "real_part");
  Tape& t = q.tape();
  auto vq = q.value();
  const std::int64_t n = q.size() / 4;
  Shape out_shape(q.shape().begin(), q.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out[i] = vq[4 * i];
  const int iq = q.id();
  return t.record(out_shape, std::move(out), {iq}, [=](Tape& tp, int self) {
    auto g = tp.grad_of(self);
    auto gQ = tp.grad_of(iq);
    if (gQ.empty()) return;
    for (std::int64_t i = 0; i < n; ++i) gQ[4 * i] += g[i];
  });
}

Var reshape(Var a, Shape s) {
  if (numel(s) != a.size()) shape_mismatch("reshape");
  Tape& t = a.tape();
  auto va = a.value();
  const int ia = a.id();
  return t.record(std::move(s), std::vector<double>(va.begin(), va.end()), {ia},
                  [=](Tape& tp, int self) {
                    auto g = tp.grad_of(self);
                    auto gA = tp.grad_of(ia);
                    if (gA.empty()) return;
                    for (std::size_t i = 0; i < g.size(); ++i) gA[i] += g[i];
                  });
}

Var pick(Var a, std::int64_t index) {
  if (index < 0 || index >= a.size()) throw std::invalid_argument("pick: index out of range");
  Tape& t = a.tape();
  const int ia = a.id();
  return t.record({1}, {a.value()[index]}, {ia}, [=](Tape& tp, int self) {
    auto g = tp.grad_of(self);
    auto gA = tp.grad_of(ia);
    if (!gA.empty()) gA[index] += g[0];
  });
}

Var matvec(Var w, Var x) {
  if (w.shape().size() != 2 || x.shape().size() != 1 || w.shape()[1] != x.shape()[0])
    shape_mismatch("matvec");
  Tape& t = w.tape();
  const int m = w.shape()[0], n = w.shape()[1];
  auto vw = w.value();
  auto vx = x.value();
  std::vector<double> out(static_cast<std::size_t>(m), 0.0);
  for (int i = 0; i < m; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += vw[i * n + j] * vx[j];
    out[i] = s;
  }
  const int iw = w.id(), ix = x.id();
  return t.record({m}, std::move(out), {iw, ix}, [=](Tape& tp, int self) {
    auto g = tp.grad_of(self);
    auto vW = tp.value_of(iw);
    auto vX = tp.value_of(ix);
    auto gW = tp.grad_of(iw);
    auto gX = tp.grad_of(ix);
    for (int i = 0; i < m; ++i) {
      const double gi = g[i];
      if (!gW.empty())
        for (int j = 0; j < n; ++j) gW[i * n + j] += gi * vX[j];
      if (!gX.empty())
        for (int j = 0; j < n; ++j) gX[j] += gi * vW[i * n + j];
    }
  });
}

Var linear(Var x, Var w, Var bias) {
  if (x.shape().size() != 2 || w.shape().size() != 2 || bias.shape().size() != 1 ||
      x.shape()[1] != w.shape()[1] || bias.shape()[0] != w.shape()[0])
    shape_mismatch("linear");
  Tape& t = x.tape();
  const int B = x.shape()[0], n = x.shape()[1], m = w.shape()[0];
  auto vx = x.value();
  auto vw = w.value();
  auto vb = bias.value();
  std::vector<double> out(static_cast<std::size_t>(B) * m);
  for (int b = 0; b < B; ++b) {
    const double* xb = vx.data() + static_cast<std::size_t>(b) * n;
    for (int i = 0; i < m; ++i) {
      const double* wi = vw.data() + static_cast<std::size_t>(i) * n;
      double s = vb[i];
      for (int j = 0; j < n; ++j) s += wi[j] * xb[j];
      out[static_cast<std::size_t>(b) * m + i] = s;
    }
  }
  const int ix = x.id(), iw = w.id(), ib = bias.id();
  return t.record({B, m}, std::move(out), {ix, iw, ib}, [=](Tape& tp, int self) {
    auto g = tp.grad_of(self);
    auto vX = tp.value_of(ix);
    auto vW = tp.value_of(iw);
    auto gX = tp.grad_of(ix);
    auto gW = tp.grad_of(iw);
    auto gB = tp.grad_of(ib);
    for (int b = 0; b < B; ++b) {
      const double* xb = vX.data() + static_cast<std::size_t>(b) * n;
      const double* gb = g.data() + static_cast<std::size_t>(b) * m;
      for (int i = 0; i < m; ++i) {
        const double gi = gb[i];
        if (gi == 0.0) continue;
        if (!gB.empty()) gB[i] += gi;
        if (!gW.empty()) {
          double* gwi = gW.data() + static_cast<std::size_t>(i) * n;
          for (int j = 0; j < n; ++j) gwi[j] += gi * xb[j];
        }
        if (!gX.empty()) {
          const double* wi = vW.data() + static_cast<std::size_t>(i) * n;
          double* gxb = gX.data() + static_cast<std::size_t>(b) * n;
          for (int j = 0; j < n; ++j) gxb[j] += gi * wi[j];
        }
      }
    }
  });
}

Var log_softmax(Var x) {
  if (x.shape().size() != 2) shape_mismatch("log_softmax");
  Tape& t = x.tape();
  const int B = x.shape()[0], K = x.shape()[1];
  auto vx = x.value();
  std::vector<double> out(vx.size());
  for (int b = 0; b < B; ++b) {
    const double* row = vx.data() + static_cast<std::size_t>(b) * K;
    double mx = row[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double s = 0.0;
    for (int k = 0; k < K; ++k) s += std::exp(row[k] - mx);
    const double lse = mx + std::log(s);
    for (int k = 0; k < K; ++k) out[static_cast<std::size_t>(b) * K + k] = row[k] - lse;
  }
  const int ix = x.id();
  return t.record(x.shape(), std::move(out), {ix}, [=](Tape& tp, int self) {
    auto g = tp.grad_of(self);
    auto vO = tp.value_of(self);
    auto gX = tp.grad_of(ix);
    if (gX.empty()) return;
    for (int b = 0; b < B; ++b) {
      const std::size_t off = static_cast<std::size_t>(b) * K;
      double gsum = 0.0;
      for (int k = 0; k < K; ++k) gsum += g[off + k];
      for (int k = 0; k < K; ++k) gX[off + k] += g[off + k] - std::exp(vO[off + k]) * gsum;
    }
  });
}

Var nll_mean(Var log_probs, std::span<const int> labels) {
  if (log_probs.shape().size() != 2 ||
      log_probs.shape()[0] != static_cast<int>(labels.size()))
    shape_mismatch("nll_mean");
  Tape& t = log_probs.tape();
  const int B = log_probs.shape()[0], K = log_probs.shape()[1];
  for (int y : labels)
    if (y < 0 || y >= K) throw std::invalid_argument("nll_mean: label out of range");
  auto v = log_probs.value();
  double loss = 0.0;
  for (int b = 0; b < B; ++b) loss -= v[static_cast<std::size_t>(b) * K + labels[b]];
  loss /= B;
  const int il = log_probs.id();
  std::vector<int> ys(labels.begin(), labels.end());
  return t.record({1}, {loss}, {il}, [=, ys = std::move(ys)](Tape& tp, int self) {
    auto g = tp.grad_of(self);
    auto gL = tp.grad_of(il);
    if (gL.empty()) return;
    const double s = -g[0] / B;
    for (int b = 0; b < B; ++b) gL[static_cast<std::size_t>(b) * K + ys[b]] += s;
  });
}

double gradient_check(const std::function<Var(Tape&, Var)>& f, Shape shape,
                      std::span<const double> point, double h) {
  if (h <= 0.0) throw std::invalid_argument("gradient_check: h must be positive");
  std::vector<double> analytic;
  {
    Tape t;
    Var x = t.leaf(shape, point, true);
    Var loss = f(t, x);
    t.backward(loss);
    auto g = x.grad();
    analytic.assign(g.begin(), g.end());
  }
  std::vector<double> p(point.begin(), point.end());
  double max_rel = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double saved = p[i];
    p[i] = saved + h;
    double fp;
    {
      Tape t;
      fp = f(t, t.leaf(shape, p, false)).scalar();
    }
    p[i] = saved - h;
    double fm;
    {
      Tape t;
      fm = f(t, t.leaf(shape, p, false)).scalar();
    }
    p[i] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic.empty() ? 0.0 : analytic[i];
    const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
    max_rel = std::max(max_rel, std::fabs(a - numeric) / denom);
  }
  return max_rel;
}

}  // namespace qcnn::ad
