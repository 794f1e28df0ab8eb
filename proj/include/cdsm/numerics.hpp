#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cdsm/random.hpp"

namespace cdsm {

// Dense row-major matrix of doubles. Vectors are 1 x d rows; scalars are 1 x 1.
using Tensor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;  // same shape as value
  Tensor m;     // Adam first moment
  Tensor v;     // Adam second moment
};

// Named parameters plus Adam state. Addresses of parameters are stable.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore& other);
  ParamStore& operator=(const ParamStore& other);
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  // Throws ConfigError on a duplicate name.
  Parameter& add(const std::string& name, Tensor init);
  // Uniform(-scale, scale) initialization.
  Parameter& add_uniform(const std::string& name, Eigen::Index rows, Eigen::Index cols, double scale, Rng& rng);
  Parameter& add_constant(const std::string& name, Eigen::Index rows, Eigen::Index cols, double value);

  Parameter& get(const std::string& name);  // throws LookupError
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::size_t size() const noexcept { return params_.size(); }
  Parameter& at(std::size_t i) { return *params_[i]; }
  const Parameter& at(std::size_t i) const { return *params_[i]; }
  std::size_t num_values() const;

  void zero_grad();
  std::uint64_t step() const noexcept { return step_; }
  void set_step(std::uint64_t s) noexcept { step_ = s; }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::uint64_t step_ = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update from the gradients held in the store.
// Throws NumericError on a non-finite gradient, leaving every parameter untouched.
void adam_step(ParamStore& store, const AdamConfig& config);

class Tape;

// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  const Tensor& value() const;
  double scalar() const;  // value of a 1 x 1 var
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode recorder. With recording off, ops only compute values.
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor value);
  // Reads the parameter value in place; gradients accumulate into p.grad.
  Var param(Parameter& p);

  // Seeds d(out)/d(out) = 1 for a 1 x 1 `out` and propagates to every parameter.
  void backward(Var out);
  void clear();

  // Internal interface used by op implementations.
  using Backward = std::function<void(Tape&, const Tensor& grad)>;
  Var push(Tensor value, std::initializer_list<Var> inputs, Backward backward);
  Var push(Tensor value, std::span<const Var> inputs, Backward backward);
  const Tensor& value(std::size_t id) const;
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  // grad(id) += g, for nodes that need gradients.
  void accumulate(std::size_t id, const Tensor& g);
  template <typename Fn>
  void accumulate_with(std::size_t id, Fn&& fn) {
    if (!nodes_[id].needs_grad) return;
    fn(grad_ref(id));
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* ref = nullptr;  // parameter value when the node is a parameter
    Parameter* param = nullptr;
    Tensor grad;
    Backward backward;
    bool needs_grad = false;
  };
  Tensor& grad_ref(std::size_t id);

  bool record_;
  std::deque<Node> nodes_;
};

// ---- ops -------------------------------------------------------------------
// Every op raises DimensionError (naming the op) on incompatible shapes.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);                 // elementwise
Var scale(Var a, double c);
Var add_row(Var x, Var row);           // x (n x d) + row (1 x d) broadcast
Var matmul(Var a, Var b);              // a b
Var matmul_nt(Var a, Var b);           // a b^T
Var affine(Var x, Var w, Var b);       // x W + b, b broadcast over rows
Var conv1d_same(Var x, Var filters, Var bias, int window);  // filters: (window*d_in) x d_out
Var relu(Var x);
Var tanh(Var x);
Var sigmoid(Var x);
Var softmax(Var x);                    // over all entries of a 1 x n row
Var softmax_rows(Var x);               // independently per row
Var log_softmax(Var x);                // 1 x n row
Var log_sigmoid(Var x);                // elementwise, stable for large |x|
Var dot(Var a, Var b);                 // 1 x 1; left-to-right summation
Var sum(Var x);                        // 1 x 1
Var mean_pool(Var rows);               // n x d -> 1 x d
Var max_pool_rows(Var rows);           // n x d -> 1 x d, ties to the lowest row
Var max_pool_elementwise(std::span<const Var> vectors);  // k vectors 1 x d -> 1 x d
Var concat(Var a, Var b);              // 1 x p, 1 x q -> 1 x (p+q); general: column concat
Var stack_rows(std::span<const Var> rows);               // k vectors 1 x d -> k x d
Var row(Var x, Eigen::Index i);
Var element(Var x, Eigen::Index r, Eigen::Index c);
Var slice_cols(Var x, Eigen::Index start, Eigen::Index count);
Var concat_cols(std::span<const Var> parts);
Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);
Var embedding(Var table, std::span<const std::uint32_t> ids);  // ids must index rows of table

// Plain left-to-right dot product of two equally sized row vectors.
double dot_values(const Tensor& a, const Tensor& b);

// ---- gradient checking -----------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  Eigen::Index worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Scalar function of the parameters in a store, recorded on the given tape.
using ScalarFn = std::function<Var(Tape&, ParamStore&)>;

// Central differences per coordinate against the analytic gradient.
// rel = |a - n| / max(|a|, |n|, floor). Non-finite values raise NumericError.
GradCheckResult grad_check(const ScalarFn& f, ParamStore& params, double eps = 1e-5, double floor = 1e-6);

// ---- checkpoints -----------------------------------------------------------
//
// Binary layout, little-endian:
//   "CDSMCKPT" | u32 version (=1) | u64 header length | header JSON (UTF-8)
//   then per parameter: u64 name length | name | u64 rows | u64 cols | rows*cols f64
// Adam moments are stored as "<name>#m" and "<name>#v" entries; the header holds
// the optimizer step and caller metadata.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ParamStore& store, const std::string& header_json, const std::filesystem::path& path);
// Returns the header JSON text. Existing parameters are overwritten by name; a
// missing or mis-shaped parameter raises an error.
std::string load_checkpoint(ParamStore& store, const std::filesystem::path& path);
std::string read_checkpoint_header(const std::filesystem::path& path);

}  // namespace cdsm
