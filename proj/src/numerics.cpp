#include "cdsm/numerics.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "cdsm/error.hpp"
#include "json.hpp"

namespace cdsm {

// ---- ParamStore ------------------------------------------------------------

ParamStore::ParamStore(const ParamStore& other) : step_(other.step_) {
  params_.reserve(other.params_.size());
  for (const auto& p : other.params_) params_.push_back(std::make_unique<Parameter>(*p));
}

ParamStore& ParamStore::operator=(const ParamStore& other) {
  if (this != &other) {
    ParamStore copy(other);
    *this = std::move(copy);
  }
  return *this;
}

Parameter& ParamStore::add(const std::string& name, Tensor init) {
  if (contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->grad = Tensor::Zero(init.rows(), init.cols());
  p->m = Tensor::Zero(init.rows(), init.cols());
  p->v = Tensor::Zero(init.rows(), init.cols());
  p->value = std::move(init);
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter& ParamStore::add_uniform(const std::string& name, Eigen::Index rows, Eigen::Index cols, double scale,
                                   Rng& rng) {
  Tensor t(rows, cols);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = scale * (2.0 * uniform01(rng) - 1.0);
  return add(name, std::move(t));
}

Parameter& ParamStore::add_constant(const std::string& name, Eigen::Index rows, Eigen::Index cols, double value) {
  return add(name, Tensor::Constant(rows, cols, value));
}

Parameter& ParamStore::get(const std::string& name) {
  for (auto& p : params_) {
    if (p->name == name) return *p;
  }
  throw LookupError("no parameter named '" + name + "'");
}

const Parameter& ParamStore::get(const std::string& name) const {
  return const_cast<ParamStore*>(this)->get(name);
}

bool ParamStore::contains(const std::string& name) const {
  for (const auto& p : params_) {
    if (p->name == name) return true;
  }
  return false;
}

std::size_t ParamStore::num_values() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p->grad.setZero();
}

void adam_step(ParamStore& store, const AdamConfig& cfg) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store.at(i);
    if (!p.grad.allFinite()) throw NumericError("non-finite gradient for parameter '" + p.name + "'");
  }
  store.set_step(store.step() + 1);
  const double t = static_cast<double>(store.step());
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& p = store.at(i);
    p.m = cfg.beta1 * p.m + (1.0 - cfg.beta1) * p.grad;
    p.v = cfg.beta2 * p.v + (1.0 - cfg.beta2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= cfg.lr * (p.m.array() / c1) / ((p.v.array() / c2).sqrt() + cfg.eps);
  }
}

// ---- Tape ------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }

double Var::scalar() const {
  const auto& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw DimensionError("scalar", "value is not 1 x 1");
  return v(0, 0);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::param(Parameter& p) {
  Node n;
  n.ref = &p.value;
  n.param = &p;
  n.needs_grad = record_;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::push(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  return push(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::push(Tensor value, std::span<const Var> inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (const auto& in : inputs) {
      if (in.tape() != this) throw DimensionError("tape", "input recorded on a different tape");
      if (nodes_[in.id()].needs_grad) n.needs_grad = true;
    }
    if (n.needs_grad) n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

const Tensor& Tape::value(std::size_t id) const {
  const auto& n = nodes_[id];
  return n.ref ? *n.ref : n.value;
}

Tensor& Tape::grad_ref(std::size_t id) {
  auto& n = nodes_[id];
  if (n.param) return n.param->grad;
  if (n.grad.size() == 0) n.grad = Tensor::Zero(value(id).rows(), value(id).cols());
  return n.grad;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  if (!nodes_[id].needs_grad) return;
  grad_ref(id) += g;
}

void Tape::backward(Var out) {
  if (out.tape() != this) throw DimensionError("backward", "output recorded on a different tape");
  const auto& v = value(out.id());
  if (v.rows() != 1 || v.cols() != 1) throw DimensionError("backward", "output is not 1 x 1");
  if (!nodes_[out.id()].needs_grad) return;
  grad_ref(out.id())(0, 0) += 1.0;
  for (std::size_t i = out.id() + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.needs_grad || !n.backward || n.grad.size() == 0) continue;
    n.backward(*this, n.grad);
  }
}

void Tape::clear() { nodes_.clear(); }

// ---- ops -------------------------------------------------------------------

namespace {

std::string shape_str(const Tensor& t) { return std::to_string(t.rows()) + "x" + std::to_string(t.cols()); }

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

void require_row(const char* op, const Tensor& a) {
  if (a.rows() != 1) throw DimensionError(op, "expected a row vector, got " + shape_str(a));
}

Tape& tape_of(const char* op, Var a) {
  if (!a.tape()) throw DimensionError(op, "uninitialized variable");
  return *a.tape();
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = tape_of("add", a);
  require_same("add", a.value(), b.value());
  auto ia = a.id(), ib = b.id();
  return t.push(a.value() + b.value(), {a, b}, [ia, ib](Tape& tp, const Tensor& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of("sub", a);
  require_same("sub", a.value(), b.value());
  auto ia = a.id(), ib = b.id();
  return t.push(a.value() - b.value(), {a, b}, [ia, ib](Tape& tp, const Tensor& g) {
    tp.accumulate(ia, g);
    tp.accumulate_with(ib, [&](Tensor& d) { d -= g; });
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of("mul", a);
  require_same("mul", a.value(), b.value());
  auto ia = a.id(), ib = b.id();
  return t.push(a.value().cwiseProduct(b.value()), {a, b}, [ia, ib](Tape& tp, const Tensor& g) {
    tp.accumulate_with(ia, [&](Tensor& d) { d += g.cwiseProduct(tp.value(ib)); });
    tp.accumulate_with(ib, [&](Tensor& d) { d += g.cwiseProduct(tp.value(ia)); });
  });
}

Var scale(Var a, double c) {
  Tape& t = tape_of("scale", a);
  auto ia = a.id();
  return t.push(a.value() * c, {a}, [ia, c](Tape& tp, const Tensor& g) {
    tp.accumulate_with(ia, [&](Tensor& d) { d += c * g; });
  });
}

Var add_row(Var x, Var r) {
  Tape& t = tape_of("add_row", x);
  require_row("add_row", r.value());
  if (r.cols() != x.cols()) {
    throw DimensionError("add_row", "row " + shape_str(r.value()) + " vs matrix " + shape_str(x.value()));
  }
  Tensor out = x.value();
  out.rowwise() += r.value().row(0);
  auto ix = x.id(), ir = r.id();
  return t.push(std::move(out), {x, r}, [ix, ir](Tape& tp, const Tensor& g) {
    tp.accumulate(ix, g);
    tp.accumulate_with(ir, [&](Tensor& d) { d += g.colwise().sum(); });
  });
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of("matmul", a);
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul", "inner dimensions " + shape_str(a.value()) + " * " + shape_str(b.value()));
  }
  Tensor out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  auto ia = a.id(), ib = b.id();
  return t.push(std::move(out), {a, b}, [ia, ib](Tape& tp, const Tensor& g) {
    tp.accumulate_with(ia, [&](Tensor& d) { d.noalias() += g * tp.value(ib).transpose(); });
    tp.accumulate_with(ib, [&](Tensor& d) { d.noalias() += tp.value(ia).transpose() * g; });
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = tape_of("matmul_nt", a);
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt", "column counts " + shape_str(a.value()) + " vs " + shape_str(b.value()));
  }
  Tensor out(a.rows(), b.rows());
  out.noalias() = a.value() * b.value().transpose();
  auto ia = a.id(), ib = b.id();
  return t.push(std::move(out), {a, b}, [ia, ib](Tape& tp, const Tensor& g) {
    tp.accumulate_with(ia, [&](Tensor& d) { d.noalias() += g * tp.value(ib); });
    tp.accumulate_with(ib, [&](Tensor& d) { d.noalias() += g.transpose() * tp.value(ia); });
  });
}

Var affine(Var x, Var w, Var b) {
  Tape& t = tape_of("affine", x);
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw DimensionError("affine", "x " + shape_str(x.value()) + ", W " + shape_str(w.value()) + ", b " +
                                       shape_str(b.value()));
  }
  Tensor out(x.rows(), w.cols());
  out.noalias() = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  auto ix = x.id(), iw = w.id(), ib = b.id();
  return t.push(std::move(out), {x, w, b}, [ix, iw, ib](Tape& tp, const Tensor& g) {
    tp.accumulate_with(ix, [&](Tensor& d) { d.noalias() += g * tp.value(iw).transpose(); });
    tp.accumulate_with(iw, [&](Tensor& d) { d.noalias() += tp.value(ix).transpose() * g; });
    tp.accumulate_with(ib, [&](Tensor& d) { d += g.colwise().sum(); });
  });
}

namespace {

// n x (window*d) matrix whose row i holds x[i-k .. i+k] with zero padding.
Tensor unfold(const Tensor& x, int window) {
  const Eigen::Index n = x.rows(), d = x.cols();
  const int k = window / 2;
  Tensor u = Tensor::Zero(n, window * d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < window; ++j) {
      const Eigen::Index src = i - k + j;
      if (src < 0 || src >= n) continue;
      u.block(i, j * d, 1, d) = x.row(src);
    }
  }
  return u;
}

}  // namespace

Var conv1d_same(Var x, Var filters, Var bias, int window) {
  Tape& t = tape_of("conv1d_same", x);
  if (window < 1 || window % 2 == 0) throw DimensionError("conv1d_same", "window must be odd and positive");
  const Eigen::Index d = x.cols();
  if (filters.rows() != window * d || bias.rows() != 1 || bias.cols() != filters.cols()) {
    throw DimensionError("conv1d_same", "x " + shape_str(x.value()) + ", F " + shape_str(filters.value()) +
                                            ", b " + shape_str(bias.value()) + ", window " +
                                            std::to_string(window));
  }
  Tensor u = unfold(x.value(), window);
  Tensor out(x.rows(), filters.cols());
  out.noalias() = u * filters.value();
  out.rowwise() += bias.value().row(0);
  auto ix = x.id(), iF = filters.id(), ib = bias.id();
  return t.push(std::move(out), {x, filters, bias}, [ix, iF, ib, window](Tape& tp, const Tensor& g) {
    const Tensor& xv = tp.value(ix);
    tp.accumulate_with(iF, [&](Tensor& d) { d.noalias() += unfold(xv, window).transpose() * g; });
    tp.accumulate_with(ib, [&](Tensor& d) { d += g.colwise().sum(); });
    tp.accumulate_with(ix, [&](Tensor& dx) {
      Tensor du(g.rows(), tp.value(iF).rows());
      du.noalias() = g * tp.value(iF).transpose();
      const Eigen::Index n = xv.rows(), dd = xv.cols();
      const int k = window / 2;
      for (Eigen::Index i = 0; i < n; ++i) {
        for (int j = 0; j < window; ++j) {
          const Eigen::Index src = i - k + j;
          if (src < 0 || src >= n) continue;
          dx.row(src) += du.block(i, j * dd, 1, dd);
        }
      }
    });
  });
}

Var relu(Var x) {
  Tape& t = tape_of("relu", x);
  auto ix = x.id();
  return t.push(x.value().cwiseMax(0.0), {x}, [ix](Tape& tp, const Tensor& g) {
    tp.accumulate_with(ix, [&](Tensor& d) {
      d.array() += (tp.value(ix).array() > 0.0).select(g.array(), 0.0);
    });
  });
}

Var tanh(Var x) {
  Tape& t = tape_of("tanh", x);
  Tensor y = x.value().array().tanh().matrix();
  Tensor yc = y;
  auto ix = x.id();
  return t.push(std::move(y), {x}, [ix, yc = std::move(yc)](Tape& tp, const Tensor& g) {
    tp.accumulate_with(ix, [&](Tensor& d) { d.array() += g.array() * (1.0 - yc.array().square()); });
  });
}

Var sigmoid(Var x) {
  Tape& t = tape_of("sigmoid", x);
  Tensor y = x.value().unaryExpr([](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
  auto ix = x.id();
  Tensor yc = y;
  return t.push(std::move(y), {x}, [ix, yc = std::move(yc)](Tape& tp, const Tensor& g) {
    tp.accumulate_with(ix, [&](Tensor& d) { d.array() += g.array() * yc.array() * (1.0 - yc.array()); });
  });
}

namespace {

Tensor softmax_row_values(const Tensor& x) {
  Tensor y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

}  // namespace

Var softmax_rows(Var x) {
  Tape& t = tape_of("softmax_rows", x);
  if (x.cols() == 0) throw DimensionError("softmax_rows", "empty rows");
  Tensor y = softmax_row_values(x.value());
  Tensor yc = y;
  auto ix = x.id();
  return t.push(std::move(y), {x}, [ix, yc = std::move(yc)](Tape& tp, const Tensor& g) {
    tp.accumulate_with(ix, [&](Tensor& d) {
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        const double s = g.row(r).dot(yc.row(r));
        d.row(r).array() += yc.row(r).array() * (g.row(r).array() - s);
      }
    });
  });
}

Var softmax(Var x) {
  require_row("softmax", x.value());
  return softmax_rows(x);
}

Var log_softmax(Var x) {
  Tape& t = tape_of("log_softmax", x);
  require_row("log_softmax", x.value());
  if (x.cols() == 0) throw DimensionError("log_softmax", "empty row");
  const auto& xv = x.value();
  const double m = xv.maxCoeff();
  const double lse = m + std::log((xv.array() - m).exp().sum());
  Tensor y = (xv.array() - lse).matrix();
  Tensor p = y.array().exp().matrix();
  auto ix = x.id();
  return t.push(std::move(y), {x}, [ix, p = std::move(p)](Tape& tp, const Tensor& g) {
    tp.accumulate_with(ix, [&](Tensor& d) { d += g - p * g.sum(); });
  });
}

Var log_sigmoid(Var x) {
  Tape& t = tape_of("log_sigmoid", x);
  Tensor y = x.value().unaryExpr([](double v) { return std::min(v, 0.0) - std::log1p(std::exp(-std::abs(v))); });
  auto ix = x.id();
  return t.push(std::move(y), {x}, [ix](Tape& tp, const Tensor& g) {
    tp.accumulate_with(ix, [&](Tensor& d) {
      // d/dx log sigma(x) = sigma(-x)
      d.array() += g.array() * tp.value(ix).array().unaryExpr([](double v) {
        if (v >= 0) {
          const double e = std::exp(-v);
          return e / (1.0 + e);
        }
        return 1.0 / (1.0 + std::exp(v));
      });
    });
  });
}

double dot_values(const Tensor& a, const Tensor& b) {
  const double* pa = a.data();
  const double* pb = b.data();
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) s += pa[i] * pb[i];
  return s;
}

Var dot(Var a, Var b) {
  Tape& t = tape_of("dot", a);
  require_row("dot", a.value());
  require_same("dot", a.value(), b.value());
  Tensor out(1, 1);
  out(0, 0) = dot_values(a.value(), b.value());
  auto ia = a.id(), ib = b.id();
  return t.push(std::move(out), {a, b}, [ia, ib](Tape& tp, const Tensor& g) {
    const double s = g(0, 0);
    tp.accumulate_with(ia, [&](Tensor& d) { d += s * tp.value(ib); });
    tp.accumulate_with(ib, [&](Tensor& d) { d += s * tp.value(ia); });
  });
}

Var sum(Var x) {
  Tape& t = tape_of("sum", x);
  Tensor out(1, 1);
  out(0, 0) = x.value().sum();
  auto ix = x.id();
  return t.push(std::move(out), {x}, [ix](Tape& tp, const Tensor& g) {
    tp.accumulate_with(ix, [&](Tensor& d) { d.array() += g(0, 0); });
  });
}

Var mean_pool(Var rows) {
  Tape& t = tape_of("mean_pool", rows);
  if (rows.rows() == 0) throw DimensionError("mean_pool", "no rows");
  const double inv = 1.0 / static_cast<double>(rows.rows());
  Tensor out = rows.value().colwise().sum() * inv;
  auto ix = rows.id();
  return t.push(std::move(out), {rows}, [ix, inv](Tape& tp, const Tensor& g) {
    tp.accumulate_with(ix, [&](Tensor& d) { d.rowwise() += g.row(0) * inv; });
  });
}

Var max_pool_rows(Var rows) {
  Tape& t = tape_of("max_pool_rows", rows);
  const auto& x = rows.value();
  if (x.rows() == 0) throw DimensionError("max_pool_rows", "no rows");
  Tensor out = x.row(0);
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(x.cols()), 0);
  for (Eigen::Index r = 1; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (x(r, c) > out(0, c)) {
        out(0, c) = x(r, c);
        arg[static_cast<std::size_t>(c)] = r;
      }
    }
  }
  auto ix = rows.id();
  return t.push(std::move(out), {rows}, [ix, arg = std::move(arg)](Tape& tp, const Tensor& g) {
    tp.accumulate_with(ix, [&](Tensor& d) {
      for (std::size_t c = 0; c < arg.size(); ++c) d(arg[c], static_cast<Eigen::Index>(c)) += g(0, c);
    });
  });
}

Var max_pool_elementwise(std::span<const Var> vectors) {
  if (vectors.empty()) throw DimensionError("max_pool_elementwise", "no vectors");
  Tape& t = tape_of("max_pool_elementwise", vectors[0]);
  const auto& first = vectors[0].value();
  require_row("max_pool_elementwise", first);
  Tensor out = first;
  std::vector<std::size_t> arg(static_cast<std::size_t>(first.cols()), 0);
  for (std::size_t k = 1; k < vectors.size(); ++k) {
    const auto& v = vectors[k].value();
    require_same("max_pool_elementwise", first, v);
    for (Eigen::Index c = 0; c < v.cols(); ++c) {
      if (v(0, c) > out(0, c)) {
        out(0, c) = v(0, c);
        arg[static_cast<std::size_t>(c)] = k;
      }
    }
  }
  std::vector<std::size_t> ids;
  ids.reserve(vectors.size());
  for (const auto& v : vectors) ids.push_back(v.id());
  return t.push(std::move(out), vectors, [ids = std::move(ids), arg = std::move(arg)](Tape& tp, const Tensor& g) {
    for (std::size_t c = 0; c < arg.size(); ++c) {
      tp.accumulate_with(ids[arg[c]], [&](Tensor& d) { d(0, static_cast<Eigen::Index>(c)) += g(0, c); });
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat", "no inputs");
  Tape& t = tape_of("concat", parts[0]);
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat", "row counts differ");
    cols += p.cols();
  }
  Tensor out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> layout;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.block(0, off, rows, p.cols()) = p.value();
    layout.emplace_back(p.id(), off);
    off += p.cols();
  }
  return t.push(std::move(out), parts, [layout = std::move(layout)](Tape& tp, const Tensor& g) {
    for (const auto& [id, o] : layout) {
      tp.accumulate_with(id, [&](Tensor& d) { d += g.block(0, o, g.rows(), d.cols()); });
    }
  });
}

Var concat(Var a, Var b) {
  const Var parts[] = {a, b};
  return concat_cols(parts);
}

Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw DimensionError("stack_rows", "no rows");
  Tape& t = tape_of("stack_rows", rows[0]);
  const Eigen::Index d = rows[0].cols();
  Tensor out(static_cast<Eigen::Index>(rows.size()), d);
  std::vector<std::size_t> ids;
  ids.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& v = rows[i].value();
    if (v.rows() != 1 || v.cols() != d) throw DimensionError("stack_rows", "expected 1x" + std::to_string(d));
    out.row(static_cast<Eigen::Index>(i)) = v;
    ids.push_back(rows[i].id());
  }
  return t.push(std::move(out), rows, [ids = std::move(ids)](Tape& tp, const Tensor& g) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      tp.accumulate_with(ids[i], [&](Tensor& d) { d += g.row(static_cast<Eigen::Index>(i)); });
    }
  });
}

Var row(Var x, Eigen::Index i) {
  Tape& t = tape_of("row", x);
  if (i < 0 || i >= x.rows()) throw DimensionError("row", "index out of range");
  auto ix = x.id();
  return t.push(Tensor(x.value().row(i)), {x}, [ix, i](Tape& tp, const Tensor& g) {
    tp.accumulate_with(ix, [&](Tensor& d) { d.row(i) += g; });
  });
}

Var element(Var x, Eigen::Index r, Eigen::Index c) {
  Tape& t = tape_of("element", x);
  if (r < 0 || r >= x.rows() || c < 0 || c >= x.cols()) throw DimensionError("element", "index out of range");
  Tensor out(1, 1);
  out(0, 0) = x.value()(r, c);
  auto ix = x.id();
  return t.push(std::move(out), {x}, [ix, r, c](Tape& tp, const Tensor& g) {
    tp.accumulate_with(ix, [&](Tensor& d) { d(r, c) += g(0, 0); });
  });
}

Var slice_cols(Var x, Eigen::Index start, Eigen::Index count) {
  Tape& t = tape_of("slice_cols", x);
  if (start < 0 || count < 0 || start + count > x.cols()) throw DimensionError("slice_cols", "range out of bounds");
  auto ix = x.id();
  return t.push(Tensor(x.value().middleCols(start, count)), {x}, [ix, start, count](Tape& tp, const Tensor& g) {
    tp.accumulate_with(ix, [&](Tensor& d) { d.middleCols(start, count) += g; });
  });
}

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  Tape& t = tape_of("layer_norm_rows", x);
  const Eigen::Index n = x.rows(), d = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw DimensionError("layer_norm_rows", "gain/bias must be 1x" + std::to_string(d));
  }
  const auto& xv = x.value();
  Tensor xhat(n, d);
  std::vector<double> inv_sd(static_cast<std::size_t>(n));
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    const double s = 1.0 / std::sqrt(var + eps);
    inv_sd[static_cast<std::size_t>(r)] = s;
    xhat.row(r) = (xv.row(r).array() - mu) * s;
  }
  Tensor out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return t.push(std::move(out), {x, gamma, beta},
                [ix, ig, ib, xhat = std::move(xhat), inv_sd = std::move(inv_sd)](Tape& tp, const Tensor& g) {
                  tp.accumulate_with(ig, [&](Tensor& dg) { dg += g.cwiseProduct(xhat).colwise().sum(); });
                  tp.accumulate_with(ib, [&](Tensor& db) { db += g.colwise().sum(); });
                  tp.accumulate_with(ix, [&](Tensor& dx) {
                    const auto& gm = tp.value(ig);
                    for (Eigen::Index r = 0; r < g.rows(); ++r) {
                      Eigen::RowVectorXd dxh = g.row(r).cwiseProduct(gm.row(0));
                      const double m1 = dxh.mean();
                      const double m2 = dxh.cwiseProduct(xhat.row(r)).mean();
                      dx.row(r) += inv_sd[static_cast<std::size_t>(r)] *
                                   (dxh.array() - m1 - xhat.row(r).array() * m2).matrix();
                    }
                  });
                });
}

Var embedding(Var table, std::span<const std::uint32_t> ids) {
  Tape& t = tape_of("embedding", table);
  const auto& tv = table.value();
  Tensor out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tv.rows()) {
      throw LookupError("token id " + std::to_string(ids[i]) + " outside table of " + std::to_string(tv.rows()));
    }
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  std::vector<std::uint32_t> idv(ids.begin(), ids.end());
  auto it = table.id();
  return t.push(std::move(out), {table}, [it, idv = std::move(idv)](Tape& tp, const Tensor& g) {
    tp.accumulate_with(it, [&](Tensor& d) {
      for (std::size_t i = 0; i < idv.size(); ++i) d.row(idv[i]) += g.row(static_cast<Eigen::Index>(i));
    });
  });
}

// ---- grad check ------------------------------------------------------------

GradCheckResult grad_check(const ScalarFn& f, ParamStore& params, double eps, double floor) {
  if (!(eps > 0.0)) throw ConfigError("grad_check eps must be positive");
  params.zero_grad();
  {
    Tape tape(true);
    Var out = f(tape, params);
    if (!std::isfinite(out.scalar())) throw NumericError("grad_check: non-finite function value");
    tape.backward(out);
  }
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) analytic.push_back(params.at(i).grad);

  auto eval = [&] {
    Tape tape(false);
    const double v = f(tape, params).scalar();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
    return v;
  };

  GradCheckResult res;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params.at(i);
    for (Eigen::Index j = 0; j < p.value.size(); ++j) {
      double& x = p.value.data()[j];
      const double saved = x;
      x = saved + eps;
      const double fp = eval();
      x = saved - eps;
      const double fm = eval();
      x = saved;
      const double num = (fp - fm) / (2.0 * eps);
      const double ana = analytic[i].data()[j];
      if (!std::isfinite(ana)) throw NumericError("grad_check: non-finite analytic gradient");
      const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), floor});
      if (rel > res.max_rel_error || res.worst_param.empty()) {
        res.max_rel_error = rel;
        res.worst_param = p.name;
        res.worst_index = j;
        res.analytic = ana;
        res.numeric = num;
      }
    }
  }
  return res;
}

// ---- checkpoints -----------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'C', 'D', 'S', 'M', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw ParseError(path.string(), 0, "truncated checkpoint");
  return v;
}

void put_tensor(std::ostream& out, const std::string& name, const Tensor& t) {
  put<std::uint64_t>(out, name.size());
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(t.rows()));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(t.cols()));
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

std::string read_header(std::istream& in, const std::filesystem::path& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw ParseError(path.string(), 0, "not a checkpoint file");
  auto version = get<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw ParseError(path.string(), 0, "unsupported checkpoint version " + std::to_string(version));
  }
  auto len = get<std::uint64_t>(in, path);
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  if (!in) throw ParseError(path.string(), 0, "truncated checkpoint header");
  return header;
}

}  // namespace

void save_checkpoint(const ParamStore& store, const std::string& header_json, const std::filesystem::path& path) {
  auto header = nlohmann::json::parse(header_json.empty() ? "{}" : header_json);
  header["adam_step"] = store.step();
  header["num_params"] = store.size();
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kMagic, 8);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store.at(i);
    put_tensor(out, p.name, p.value);
    put_tensor(out, p.name + "#m", p.m);
    put_tensor(out, p.name + "#v", p.v);
  }
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return read_header(in, path);
}

std::string load_checkpoint(ParamStore& store, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string header = read_header(in, path);
  auto meta = nlohmann::json::parse(header);
  const auto n = meta.at("num_params").get<std::size_t>();
  std::vector<bool> seen(store.size(), false);
  for (std::size_t i = 0; i < 3 * n; ++i) {
    auto len = get<std::uint64_t>(in, path);
    std::string name(len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(len));
    auto rows = static_cast<Eigen::Index>(get<std::uint64_t>(in, path));
    auto cols = static_cast<Eigen::Index>(get<std::uint64_t>(in, path));
    Tensor t(rows, cols);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw ParseError(path.string(), 0, "truncated tensor '" + name + "'");
    std::string base = name;
    char slot = 'p';
    if (auto pos = name.rfind('#'); pos != std::string::npos) {
      base = name.substr(0, pos);
      slot = name[pos + 1];
    }
    auto& p = store.get(base);
    if (p.value.rows() != rows || p.value.cols() != cols) {
      throw DimensionError("load_checkpoint", "parameter '" + base + "' has shape " + shape_str(p.value) +
                                                  " but checkpoint holds " + std::to_string(rows) + "x" +
                                                  std::to_string(cols));
    }
    if (slot == 'm') {
      p.m = std::move(t);
    } else if (slot == 'v') {
      p.v = std::move(t);
    } else {
      p.value = std::move(t);
      for (std::size_t j = 0; j < store.size(); ++j) {
        if (&store.at(j) == &p) seen[j] = true;
      }
    }
  }
  for (std::size_t j = 0; j < store.size(); ++j) {
    if (!seen[j]) throw IntegrityError("checkpoint lacks parameter '" + store.at(j).name + "'");
  }
  store.set_step(meta.value("adam_step", std::uint64_t{0}));
  return header;
}

}  // namespace cdsm
