#pragma once

// Reverse-mode autodiff on float64 tensors, sized for desk-scale models.
// A Tape records every op applied to tracked tensors; backward() walks the
// record once in reverse creation order. Parameters live in a ParamStore,
// which hands out tracked leaves and collects gradients after backward.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace ccl::diff {

// ---------------------------------------------------------------------------
// Errors

// Inconsistent operand shapes or malformed tensor arguments.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values, zero-norm normalization inputs, NaN gradients.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tape misuse: backward without a graph, backward twice, cross-tape mixing.
struct GraphError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Tensor

using Shape = std::vector<int>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Value handle. Cheap to copy; the buffer is shared. `node >= 0` means the
// tensor is tracked on `tape` and participates in backward.
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  Tape* tape = nullptr;
  int node = -1;

  bool tracked() const { return node >= 0; }
  int64_t size() const { return numel(shape); }
  const std::vector<double>& values() const { return *data; }
  double scalar() const;
  // 2-D accessors; rows()/cols() treat a vector [n] as [1 x n].
  int rows() const;
  int cols() const;
  double at(int r, int c) const;
};

// Untracked constant tensor.
Tensor constant(Shape shape, std::vector<double> values);
Tensor constant_scalar(double v);

// ---------------------------------------------------------------------------
// Ops

enum class Op {
  kLeaf,
  kAdd,          // elementwise, equal shapes
  kAddRow,       // [m x n] + [n] row broadcast
  kSub,          // elementwise
  kMul,          // elementwise (Hadamard)
  kScale,        // scalar tensor [1] * tensor
  kMatmul,       // [m x k] @ [k x n]
  kTranspose,    // 2-D transpose
  kSigmoid,
  kTanh,
  kSoftmax,          // over the last axis, rowwise
  kL2Normalize,      // whole buffer treated as one vector
  kCosineSim,        // two equal-numel tensors -> scalar
  kCrossEntropy2,    // logits [2] (or [1 x 2]) + target in {0,1} -> scalar
  kEntropy,          // distribution p (whole buffer) -> scalar, natural log
  kSqL2Dist,         // two equal-numel tensors -> scalar
  kHinge,            // elementwise max(0, x)
  kSum,              // -> scalar
  kMean,             // -> scalar
  kSliceRows,        // rows [r0, r1) of a 2-D tensor
  kConcatRows,       // stack 2-D/1-D tensors along rows
};

const char* op_name(Op op);
// The dispatch surface used by tests and the bindings; attrs are op-specific
// (kScale: none, kCrossEntropy2: target label, kSliceRows: r0/r1).
Tensor forward_op(Tape& tape, Op op, const std::vector<Tensor>& inputs,
                  double attr = 0.0, int attr2 = 0);

// Convenience wrappers (same semantics as forward_op).
Tensor add(Tape& t, const Tensor& a, const Tensor& b);
Tensor add_row(Tape& t, const Tensor& m, const Tensor& row);
Tensor sub(Tape& t, const Tensor& a, const Tensor& b);
Tensor mul(Tape& t, const Tensor& a, const Tensor& b);
Tensor scale(Tape& t, const Tensor& s, const Tensor& x);
Tensor scale(Tape& t, double s, const Tensor& x);
Tensor matmul(Tape& t, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& t, const Tensor& a);
Tensor sigmoid(Tape& t, const Tensor& x);
Tensor tanh_op(Tape& t, const Tensor& x);
Tensor softmax(Tape& t, const Tensor& x);
Tensor l2_normalize(Tape& t, const Tensor& x);
Tensor cosine_sim(Tape& t, const Tensor& a, const Tensor& b);
Tensor cross_entropy_2class(Tape& t, const Tensor& logits, int target);
Tensor entropy(Tape& t, const Tensor& p);
Tensor sq_l2_dist(Tape& t, const Tensor& a, const Tensor& b);
Tensor hinge(Tape& t, const Tensor& x);
Tensor sum(Tape& t, const Tensor& x);
Tensor mean(Tape& t, const Tensor& x);
Tensor slice_rows(Tape& t, const Tensor& x, int r0, int r1);
Tensor concat_rows(Tape& t, const std::vector<Tensor>& xs);

// ---------------------------------------------------------------------------
// Tape

class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Tracked leaf. Gradients flow into it; read them via grad() after
  // backward. With grads disabled this returns an untracked constant.
  Tensor leaf(Shape shape, std::vector<double> values, std::string name = "");

  // Runs reverse-mode accumulation from a tracked scalar loss. May be called
  // once per recorded graph; record new ops (or reset()) before calling again.
  void backward(const Tensor& loss);

  // Gradient of the last backward() wrt a tracked tensor of this tape.
  std::vector<double> grad(const Tensor& t) const;

  void reset();
  size_t num_nodes() const { return nodes_.size(); }

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  // Adds the gradient of every named leaf into the matching map entry.
  // A parameter used through several leaves gets the sum, which is the
  // correct total derivative for repeated appearances.
  void add_leaf_grads(std::map<std::string, std::vector<double>>& grads) const;

 private:
  friend Tensor forward_op(Tape&, Op, const std::vector<Tensor>&, double, int);

  struct Node {
    Op op;
    std::vector<int> inputs;  // node ids; -1 for untracked operands
    std::vector<Shape> in_shapes;
    std::vector<std::shared_ptr<std::vector<double>>> in_data;
    Shape out_shape;
    std::shared_ptr<std::vector<double>> out_data;
    std::vector<double> grad;  // dLoss/dOut, allocated during backward
    double attr = 0.0;
    int attr2 = 0;
    std::string name;  // leaves only
  };

  int record(Node n);
  void accumulate(const Node& n);  // one backward step for node n

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
  bool backward_ran_ = false;
  size_t backward_watermark_ = 0;  // nodes recorded when backward last ran
};

// Scoped guard for inference-mode evaluation.
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape& t) : tape_(t), prev_(t.grad_enabled()) {
    tape_.set_grad_enabled(false);
  }
  ~NoGradGuard() { tape_.set_grad_enabled(prev_); }

 private:
  Tape& tape_;
  bool prev_;
};

// ---------------------------------------------------------------------------
// Parameters and optimizer

using GradMap = std::map<std::string, std::vector<double>>;

class ParamStore {
 public:
  void add(const std::string& name, Shape shape, std::vector<double> init);
  bool has(const std::string& name) const;
  const Shape& shape(const std::string& name) const;
  std::vector<double>& values(const std::string& name);
  const std::vector<double>& values(const std::string& name) const;
  std::vector<std::string> names() const;  // sorted
  size_t count() const { return params_.size(); }

  // Tracked leaf carrying the current value of `name`. Each call records a
  // fresh leaf; collect_grads sums over all of them.
  Tensor use(Tape& tape, const std::string& name);
  // Untracked view of the current value (frozen parameter).
  Tensor use_frozen(const std::string& name) const;

  // Copies tape gradients of every parameter into a name -> grad map
  // (zero-filled for parameters unused in this graph).
  GradMap collect_grads(const Tape& tape) const;

  // Adam step counter, shared across parameters.
  int64_t step() const { return step_; }
  void set_step(int64_t s) { step_ = s; }

  // Serialization: versioned named-parameter table (shapes + float64 values
  // + Adam state + step counter).
  std::vector<uint8_t> serialize() const;
  static ParamStore deserialize(const std::vector<uint8_t>& bytes);
  uint64_t content_hash() const;

 private:
  friend void optimizer_step(ParamStore&, const GradMap&, const struct OptimConfig&);
  struct Param {
    Shape shape;
    std::vector<double> value;
    std::vector<double> m, v;  // Adam moments
  };
  std::map<std::string, Param> params_;
  int64_t step_ = 0;
};

enum class LrSchedule { kConstant, kPiecewise, kCosine };

struct OptimConfig {
  double lr = 3e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  LrSchedule schedule = LrSchedule::kConstant;
  std::vector<int64_t> milestones;  // piecewise: lr *= factor at each
  double factor = 0.5;
  int64_t total_steps = 0;  // cosine horizon
  void validate() const;    // throws std::invalid_argument
};

// Learning rate in effect at `step` (0-based; milestones compare <= step).
double scheduled_lr(const OptimConfig& cfg, int64_t step);

// One Adam update over exactly the parameters named in `grads`. Parameters
// absent from the map keep their values AND their moment buffers (frozen).
void optimizer_step(ParamStore& store, const GradMap& grads, const OptimConfig& cfg);

// ---------------------------------------------------------------------------
// Gradient checking

// Builds a scalar loss from fresh leaves drawn from the store.
using LossFn = std::function<Tensor(Tape&, ParamStore&)>;

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int worst_index = -1;
  int64_t entries_checked = 0;
};

// Central finite differences at +-epsilon against the analytic gradient.
// Relative error per entry: |ga - gfd| / max(1e-8, |ga| + |gfd|).
// Throws GraphError if two same-parameter evaluations disagree bitwise
// (the loss must be deterministic for FD to mean anything).
GradCheckReport grad_check(const LossFn& fn, ParamStore& store, double epsilon = 1e-5);

}  // namespace ccl::diff
