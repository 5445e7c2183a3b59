#include "ccl/diff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <type_traits>

#include "ccl/rng.hpp"

namespace ccl::diff {

namespace {

bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

double l2_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

[[noreturn]] void shape_fail(Op op, const std::vector<Tensor>& inputs,
                             const std::string& why) {
  std::ostringstream os;
  os << op_name(op) << ": " << why << " (operands:";
  for (const auto& t : inputs) os << " " << shape_str(t.shape);
  os << ")";
  throw ShapeError(os.str());
}

}  // namespace

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += " x ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

double Tensor::scalar() const {
  if (size() != 1)
    throw ShapeError("scalar() on tensor of shape " + shape_str(shape));
  return (*data)[0];
}

int Tensor::rows() const {
  if (shape.size() == 2) return shape[0];
  if (shape.size() == 1) return 1;
  throw ShapeError("rows() needs a 1-D or 2-D tensor, got " + shape_str(shape));
}

int Tensor::cols() const {
  if (shape.size() == 2) return shape[1];
  if (shape.size() == 1) return shape[0];
  throw ShapeError("cols() needs a 1-D or 2-D tensor, got " + shape_str(shape));
}

double Tensor::at(int r, int c) const { return (*data)[static_cast<size_t>(r) * cols() + c]; }

Tensor constant(Shape shape, std::vector<double> values) {
  if (numel(shape) != static_cast<int64_t>(values.size()))
    throw ShapeError("constant: " + std::to_string(values.size()) +
                     " values for shape " + shape_str(shape));
  Tensor t;
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<double>>(std::move(values));
  return t;
}

Tensor constant_scalar(double v) { return constant({1}, {v}); }

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kAddRow: return "add_row";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kMatmul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kSigmoid: return "sigmoid";
    case Op::kTanh: return "tanh";
    case Op::kSoftmax: return "softmax";
    case Op::kL2Normalize: return "l2_normalize";
    case Op::kCosineSim: return "cosine_sim";
    case Op::kCrossEntropy2: return "cross_entropy_2class";
    case Op::kEntropy: return "entropy";
    case Op::kSqL2Dist: return "sq_l2_dist";
    case Op::kHinge: return "hinge";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kSliceRows: return "slice_rows";
    case Op::kConcatRows: return "concat_rows";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() = default;

Tensor Tape::leaf(Shape shape, std::vector<double> values, std::string name) {
  if (numel(shape) != static_cast<int64_t>(values.size()))
    throw ShapeError("leaf '" + name + "': " + std::to_string(values.size()) +
                     " values for shape " + shape_str(shape));
  if (!all_finite(values))
    throw NumericError("leaf '" + name + "' has non-finite values");
  if (!grad_enabled_) {
    Tensor t = constant(std::move(shape), std::move(values));
    return t;
  }
  Node n;
  n.op = Op::kLeaf;
  n.out_shape = shape;
  n.out_data = std::make_shared<std::vector<double>>(std::move(values));
  n.name = std::move(name);
  int id = record(std::move(n));
  Tensor t;
  t.shape = std::move(shape);
  t.data = nodes_[id].out_data;
  t.tape = this;
  t.node = id;
  return t;
}

int Tape::record(Node n) {
  // Recording past a completed backward starts a fresh graph segment; the old
  // gradients stay readable but a second backward over them is refused.
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::reset() {
  nodes_.clear();
  backward_ran_ = false;
  backward_watermark_ = 0;
}

void Tape::add_leaf_grads(std::map<std::string, std::vector<double>>& grads) const {
  if (!backward_ran_) throw GraphError("add_leaf_grads: backward has not run");
  for (const auto& n : nodes_) {
    if (n.op != Op::kLeaf || n.name.empty() || n.grad.empty()) continue;
    auto it = grads.find(n.name);
    if (it == grads.end()) continue;
    if (it->second.size() != n.grad.size())
      throw ShapeError("leaf '" + n.name + "' gradient size mismatch");
    for (size_t i = 0; i < n.grad.size(); ++i) it->second[i] += n.grad[i];
  }
}

void Tape::backward(const Tensor& loss) {
  if (!loss.tracked() || loss.tape != this)
    throw GraphError("backward: loss is not tracked on this tape");
  if (loss.size() != 1)
    throw GraphError("backward: loss must be scalar, got " + shape_str(loss.shape));
  if (backward_ran_ && nodes_.size() <= backward_watermark_)
    throw GraphError("backward called twice on the same recorded graph");
  if (!std::isfinite(loss.scalar()))
    throw NumericError("backward: loss is non-finite");

  for (auto& n : nodes_) n.grad.assign(numel(n.out_shape), 0.0);
  nodes_[loss.node].grad[0] = 1.0;
  for (int i = loss.node; i >= 0; --i) {
    bool any = false;
    for (double g : nodes_[i].grad)
      if (g != 0.0) { any = true; break; }
    if (any) accumulate(nodes_[i]);
  }
  backward_ran_ = true;
  backward_watermark_ = nodes_.size();
}

std::vector<double> Tape::grad(const Tensor& t) const {
  if (!t.tracked() || t.tape != this)
    throw GraphError("grad: tensor is not tracked on this tape");
  if (!backward_ran_) throw GraphError("grad: backward has not run");
  return nodes_[t.node].grad;
}

// ---------------------------------------------------------------------------
// Forward

Tensor forward_op(Tape& tape, Op op, const std::vector<Tensor>& inputs,
                  double attr, int attr2) {
  auto expect_inputs = [&](size_t k) {
    if (inputs.size() != k)
      shape_fail(op, inputs, "expected " + std::to_string(k) + " operands, got " +
                                 std::to_string(inputs.size()));
  };
  for (const auto& t : inputs) {
    if (!t.data) shape_fail(op, inputs, "operand has no buffer");
    if (t.tracked() && t.tape != &tape)
      throw GraphError(std::string(op_name(op)) + ": operand tracked on a different tape");
  }

  Shape out_shape;
  std::vector<double> out;

  switch (op) {
    case Op::kLeaf:
      throw GraphError("leaf is not dispatchable through forward_op");

    case Op::kAdd: {
      expect_inputs(2);
      if (inputs[0].shape != inputs[1].shape)
        shape_fail(op, inputs, "shape mismatch");
      out_shape = inputs[0].shape;
      const auto& a = *inputs[0].data;
      const auto& b = *inputs[1].data;
      out.resize(a.size());
      for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
      break;
    }

    case Op::kAddRow: {
      expect_inputs(2);
      int m = inputs[0].rows(), n = inputs[0].cols();
      if (inputs[1].size() != n)
        shape_fail(op, inputs, "row length must match matrix columns");
      out_shape = inputs[0].shape;
      const auto& a = *inputs[0].data;
      const auto& r = *inputs[1].data;
      out.resize(a.size());
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] + r[j];
      break;
    }

    case Op::kSub: {
      expect_inputs(2);
      if (inputs[0].shape != inputs[1].shape)
        shape_fail(op, inputs, "shape mismatch");
      out_shape = inputs[0].shape;
      const auto& a = *inputs[0].data;
      const auto& b = *inputs[1].data;
      out.resize(a.size());
      for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
      break;
    }

    case Op::kMul: {
      expect_inputs(2);
      if (inputs[0].shape != inputs[1].shape)
        shape_fail(op, inputs, "shape mismatch");
      out_shape = inputs[0].shape;
      const auto& a = *inputs[0].data;
      const auto& b = *inputs[1].data;
      out.resize(a.size());
      for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
      break;
    }

    case Op::kScale: {
      expect_inputs(2);
      if (inputs[0].size() != 1)
        shape_fail(op, inputs, "first operand must be scalar");
      out_shape = inputs[1].shape;
      double s = (*inputs[0].data)[0];
      const auto& x = *inputs[1].data;
      out.resize(x.size());
      for (size_t i = 0; i < x.size(); ++i) out[i] = s * x[i];
      break;
    }

    case Op::kMatmul: {
      expect_inputs(2);
      if (inputs[0].shape.size() != 2 || inputs[1].shape.size() != 2)
        shape_fail(op, inputs, "needs 2-D operands");
      int m = inputs[0].shape[0], k = inputs[0].shape[1];
      int k2 = inputs[1].shape[0], n = inputs[1].shape[1];
      if (k != k2) shape_fail(op, inputs, "inner dimensions differ");
      out_shape = {m, n};
      const auto& a = *inputs[0].data;
      const auto& b = *inputs[1].data;
      out.assign(static_cast<size_t>(m) * n, 0.0);
      // Fixed i-k-j loop order: summation order is part of the
      // reproducibility contract.
      for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
          double av = a[i * k + kk];
          if (av == 0.0) continue;
          for (int j = 0; j < n; ++j) out[i * n + j] += av * b[kk * n + j];
        }
      break;
    }

    case Op::kTranspose: {
      expect_inputs(1);
      if (inputs[0].shape.size() != 2) shape_fail(op, inputs, "needs a 2-D operand");
      int m = inputs[0].shape[0], n = inputs[0].shape[1];
      out_shape = {n, m};
      const auto& a = *inputs[0].data;
      out.resize(a.size());
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
      break;
    }

    case Op::kSigmoid: {
      expect_inputs(1);
      out_shape = inputs[0].shape;
      const auto& x = *inputs[0].data;
      out.resize(x.size());
      for (size_t i = 0; i < x.size(); ++i) {
        double v = x[i];
        out[i] = v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                        : std::exp(v) / (1.0 + std::exp(v));
      }
      break;
    }

    case Op::kTanh: {
      expect_inputs(1);
      out_shape = inputs[0].shape;
      const auto& x = *inputs[0].data;
      out.resize(x.size());
      for (size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
      break;
    }

    case Op::kSoftmax: {
      expect_inputs(1);
      out_shape = inputs[0].shape;
      int n = inputs[0].cols(), m = inputs[0].rows();
      if (n == 0) shape_fail(op, inputs, "empty rows");
      const auto& x = *inputs[0].data;
      out.resize(x.size());
      for (int i = 0; i < m; ++i) {
        double mx = x[i * n];
        for (int j = 1; j < n; ++j) mx = std::max(mx, x[i * n + j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
          out[i * n + j] = std::exp(x[i * n + j] - mx);
          z += out[i * n + j];
        }
        for (int j = 0; j < n; ++j) out[i * n + j] /= z;
      }
      break;
    }

    case Op::kL2Normalize: {
      expect_inputs(1);
      out_shape = inputs[0].shape;
      const auto& x = *inputs[0].data;
      double nrm = l2_norm(x);
      if (nrm < 1e-300)
        throw NumericError("l2_normalize: zero-norm input");
      out.resize(x.size());
      for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] / nrm;
      break;
    }

    case Op::kCosineSim: {
      expect_inputs(2);
      if (inputs[0].size() != inputs[1].size())
        shape_fail(op, inputs, "operand sizes differ");
      const auto& a = *inputs[0].data;
      const auto& b = *inputs[1].data;
      double na = l2_norm(a), nb = l2_norm(b);
      if (na < 1e-300 || nb < 1e-300)
        throw NumericError("cosine_sim: zero-norm operand");
      double dot = 0.0;
      for (size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
      out_shape = {1};
      out = {dot / (na * nb)};
      break;
    }

    case Op::kCrossEntropy2: {
      expect_inputs(1);
      if (inputs[0].size() != 2)
        shape_fail(op, inputs, "needs exactly two logits");
      int y = attr2;
      if (y != 0 && y != 1)
        throw ShapeError("cross_entropy_2class: target must be 0 or 1, got " +
                         std::to_string(y));
      const auto& l = *inputs[0].data;
      double mx = std::max(l[0], l[1]);
      double lse = mx + std::log(std::exp(l[0] - mx) + std::exp(l[1] - mx));
      out_shape = {1};
      out = {lse - l[y]};
      break;
    }

    case Op::kEntropy: {
      expect_inputs(1);
      const auto& p = *inputs[0].data;
      double h = 0.0;
      for (double v : p) {
        if (v < -1e-9)
          throw NumericError("entropy: negative probability " + std::to_string(v));
        if (v > 0.0) h -= v * std::log(v);
      }
      out_shape = {1};
      out = {h};
      break;
    }

    case Op::kSqL2Dist: {
      expect_inputs(2);
      if (inputs[0].size() != inputs[1].size())
        shape_fail(op, inputs, "operand sizes differ");
      const auto& a = *inputs[0].data;
      const auto& b = *inputs[1].data;
      double d = 0.0;
      for (size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
      out_shape = {1};
      out = {d};
      break;
    }

    case Op::kHinge: {
      expect_inputs(1);
      out_shape = inputs[0].shape;
      const auto& x = *inputs[0].data;
      out.resize(x.size());
      for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
      break;
    }

    case Op::kSum: {
      expect_inputs(1);
      const auto& x = *inputs[0].data;
      double s = 0.0;
      for (double v : x) s += v;
      out_shape = {1};
      out = {s};
      break;
    }

    case Op::kMean: {
      expect_inputs(1);
      const auto& x = *inputs[0].data;
      if (x.empty()) shape_fail(op, inputs, "mean of empty tensor");
      double s = 0.0;
      for (double v : x) s += v;
      out_shape = {1};
      out = {s / static_cast<double>(x.size())};
      break;
    }

    case Op::kSliceRows: {
      expect_inputs(1);
      if (inputs[0].shape.size() != 2) shape_fail(op, inputs, "needs a 2-D operand");
      int r0 = static_cast<int>(attr), r1 = attr2;
      int m = inputs[0].shape[0], n = inputs[0].shape[1];
      if (r0 < 0 || r1 > m || r0 >= r1)
        shape_fail(op, inputs, "row range [" + std::to_string(r0) + ", " +
                                   std::to_string(r1) + ") out of bounds");
      out_shape = {r1 - r0, n};
      const auto& x = *inputs[0].data;
      out.assign(x.begin() + static_cast<size_t>(r0) * n,
                 x.begin() + static_cast<size_t>(r1) * n);
      break;
    }

    case Op::kConcatRows: {
      if (inputs.empty()) shape_fail(op, inputs, "needs at least one operand");
      int n = inputs[0].cols();
      int m = 0;
      for (const auto& t : inputs) {
        if (t.shape.size() > 2) shape_fail(op, inputs, "operands must be 1-D or 2-D");
        if (t.cols() != n) shape_fail(op, inputs, "column counts differ");
        m += t.rows();
      }
      out_shape = {m, n};
      out.reserve(static_cast<size_t>(m) * n);
      for (const auto& t : inputs)
        out.insert(out.end(), t.data->begin(), t.data->end());
      break;
    }
  }

  if (!all_finite(out))
    throw NumericError(std::string(op_name(op)) + ": non-finite output");

  Tensor t;
  t.shape = out_shape;
  t.data = std::make_shared<std::vector<double>>(std::move(out));

  bool any_tracked = false;
  for (const auto& in : inputs)
    if (in.tracked()) { any_tracked = true; break; }
  if (!tape.grad_enabled() || !any_tracked) return t;  // constant fold

  Tape::Node n;
  n.op = op;
  for (const auto& in : inputs) {
    n.inputs.push_back(in.node);
    n.in_shapes.push_back(in.shape);
    n.in_data.push_back(in.data);
  }
  n.out_shape = t.shape;
  n.out_data = t.data;
  n.attr = attr;
  n.attr2 = attr2;
  int id = tape.record(std::move(n));
  t.tape = &tape;
  t.node = id;
  return t;
}

// ---------------------------------------------------------------------------
// Backward

void Tape::accumulate(const Node& n) {
  const auto& g = n.grad;
  auto gin = [&](size_t idx) -> std::vector<double>* {
    int id = n.inputs[idx];
    return id >= 0 ? &nodes_[id].grad : nullptr;
  };

  switch (n.op) {
    case Op::kLeaf:
      break;

    case Op::kAdd: {
      for (size_t s = 0; s < 2; ++s)
        if (auto* gi = gin(s))
          for (size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
      break;
    }

    case Op::kAddRow: {
      int m = n.in_shapes[0].size() == 2 ? n.in_shapes[0][0] : 1;
      int cols = static_cast<int>(n.in_data[1]->size());
      if (auto* gi = gin(0))
        for (size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
      if (auto* gi = gin(1))
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < cols; ++j) (*gi)[j] += g[i * cols + j];
      break;
    }

    case Op::kSub: {
      if (auto* gi = gin(0))
        for (size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
      if (auto* gi = gin(1))
        for (size_t i = 0; i < g.size(); ++i) (*gi)[i] -= g[i];
      break;
    }

    case Op::kMul: {
      const auto& a = *n.in_data[0];
      const auto& b = *n.in_data[1];
      if (auto* gi = gin(0))
        for (size_t i = 0; i < g.size(); ++i) (*gi)[i] += b[i] * g[i];
      if (auto* gi = gin(1))
        for (size_t i = 0; i < g.size(); ++i) (*gi)[i] += a[i] * g[i];
      break;
    }

    case Op::kScale: {
      double s = (*n.in_data[0])[0];
      const auto& x = *n.in_data[1];
      if (auto* gi = gin(0)) {
        double acc = 0.0;
        for (size_t i = 0; i < g.size(); ++i) acc += x[i] * g[i];
        (*gi)[0] += acc;
      }
      if (auto* gi = gin(1))
        for (size_t i = 0; i < g.size(); ++i) (*gi)[i] += s * g[i];
      break;
    }

    case Op::kMatmul: {
      int m = n.in_shapes[0][0], k = n.in_shapes[0][1], cols = n.in_shapes[1][1];
      const auto& a = *n.in_data[0];
      const auto& b = *n.in_data[1];
      if (auto* gi = gin(0)) {  // gA += g . B^T
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            double acc = 0.0;
            for (int j = 0; j < cols; ++j) acc += g[i * cols + j] * b[kk * cols + j];
            (*gi)[i * k + kk] += acc;
          }
      }
      if (auto* gi = gin(1)) {  // gB += A^T . g
        for (int kk = 0; kk < k; ++kk)
          for (int j = 0; j < cols; ++j) {
            double acc = 0.0;
            for (int i = 0; i < m; ++i) acc += a[i * k + kk] * g[i * cols + j];
            (*gi)[kk * cols + j] += acc;
          }
      }
      break;
    }

    case Op::kTranspose: {
      int m = n.in_shapes[0][0], cols = n.in_shapes[0][1];
      if (auto* gi = gin(0))
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < cols; ++j) (*gi)[i * cols + j] += g[j * m + i];
      break;
    }

    case Op::kSigmoid: {
      const auto& y = *n.out_data;
      if (auto* gi = gin(0))
        for (size_t i = 0; i < g.size(); ++i) (*gi)[i] += y[i] * (1.0 - y[i]) * g[i];
      break;
    }

    case Op::kTanh: {
      const auto& y = *n.out_data;
      if (auto* gi = gin(0))
        for (size_t i = 0; i < g.size(); ++i) (*gi)[i] += (1.0 - y[i] * y[i]) * g[i];
      break;
    }

    case Op::kSoftmax: {
      const auto& y = *n.out_data;
      int cols = n.in_shapes[0].size() == 2 ? n.in_shapes[0][1]
                                            : static_cast<int>(y.size());
      int m = static_cast<int>(y.size()) / cols;
      if (auto* gi = gin(0)) {
        for (int i = 0; i < m; ++i) {
          double dot = 0.0;
          for (int j = 0; j < cols; ++j) dot += g[i * cols + j] * y[i * cols + j];
          for (int j = 0; j < cols; ++j)
            (*gi)[i * cols + j] += y[i * cols + j] * (g[i * cols + j] - dot);
        }
      }
      break;
    }

    case Op::kL2Normalize: {
      const auto& x = *n.in_data[0];
      const auto& y = *n.out_data;
      double nrm = l2_norm(x);
      if (auto* gi = gin(0)) {
        double dot = 0.0;
        for (size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
        for (size_t i = 0; i < g.size(); ++i)
          (*gi)[i] += (g[i] - y[i] * dot) / nrm;
      }
      break;
    }

    case Op::kCosineSim: {
      const auto& a = *n.in_data[0];
      const auto& b = *n.in_data[1];
      double na = l2_norm(a), nb = l2_norm(b);
      double dot = 0.0;
      for (size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
      double c = dot / (na * nb);
      double gs = g[0];
      if (auto* gi = gin(0))
        for (size_t i = 0; i < a.size(); ++i)
          (*gi)[i] += gs * (b[i] / (na * nb) - c * a[i] / (na * na));
      if (auto* gi = gin(1))
        for (size_t i = 0; i < b.size(); ++i)
          (*gi)[i] += gs * (a[i] / (na * nb) - c * b[i] / (nb * nb));
      break;
    }

    case Op::kCrossEntropy2: {
      const auto& l = *n.in_data[0];
      int y = n.attr2;
      double mx = std::max(l[0], l[1]);
      double e0 = std::exp(l[0] - mx), e1 = std::exp(l[1] - mx);
      double z = e0 + e1;
      double p0 = e0 / z, p1 = e1 / z;
      if (auto* gi = gin(0)) {
        (*gi)[0] += g[0] * (p0 - (y == 0 ? 1.0 : 0.0));
        (*gi)[1] += g[0] * (p1 - (y == 1 ? 1.0 : 0.0));
      }
      break;
    }

    case Op::kEntropy: {
      const auto& p = *n.in_data[0];
      if (auto* gi = gin(0))
        for (size_t i = 0; i < p.size(); ++i)
          if (p[i] > 0.0) (*gi)[i] += g[0] * (-(std::log(p[i]) + 1.0));
      break;
    }

    case Op::kSqL2Dist: {
      const auto& a = *n.in_data[0];
      const auto& b = *n.in_data[1];
      if (auto* gi = gin(0))
        for (size_t i = 0; i < a.size(); ++i) (*gi)[i] += g[0] * 2.0 * (a[i] - b[i]);
      if (auto* gi = gin(1))
        for (size_t i = 0; i < a.size(); ++i) (*gi)[i] -= g[0] * 2.0 * (a[i] - b[i]);
      break;
    }

    case Op::kHinge: {
      const auto& x = *n.in_data[0];
      if (auto* gi = gin(0))
        for (size_t i = 0; i < x.size(); ++i)
          if (x[i] > 0.0) (*gi)[i] += g[i];
      break;
    }

    case Op::kSum: {
      if (auto* gi = gin(0))
        for (size_t i = 0; i < gi->size(); ++i) (*gi)[i] += g[0];
      break;
    }

    case Op::kMean: {
      if (auto* gi = gin(0)) {
        double s = g[0] / static_cast<double>(gi->size());
        for (size_t i = 0; i < gi->size(); ++i) (*gi)[i] += s;
      }
      break;
    }

    case Op::kSliceRows: {
      int r0 = static_cast<int>(n.attr);
      int cols = n.in_shapes[0][1];
      if (auto* gi = gin(0))
        for (size_t i = 0; i < g.size(); ++i)
          (*gi)[static_cast<size_t>(r0) * cols + i] += g[i];
      break;
    }

    case Op::kConcatRows: {
      size_t off = 0;
      for (size_t s = 0; s < n.inputs.size(); ++s) {
        size_t sz = n.in_data[s]->size();
        if (auto* gi = gin(s))
          for (size_t i = 0; i < sz; ++i) (*gi)[i] += g[off + i];
        off += sz;
      }
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// Wrappers

Tensor add(Tape& t, const Tensor& a, const Tensor& b) { return forward_op(t, Op::kAdd, {a, b}); }
Tensor add_row(Tape& t, const Tensor& m, const Tensor& row) { return forward_op(t, Op::kAddRow, {m, row}); }
Tensor sub(Tape& t, const Tensor& a, const Tensor& b) { return forward_op(t, Op::kSub, {a, b}); }
Tensor mul(Tape& t, const Tensor& a, const Tensor& b) { return forward_op(t, Op::kMul, {a, b}); }
Tensor scale(Tape& t, const Tensor& s, const Tensor& x) { return forward_op(t, Op::kScale, {s, x}); }
Tensor scale(Tape& t, double s, const Tensor& x) { return forward_op(t, Op::kScale, {constant_scalar(s), x}); }
Tensor matmul(Tape& t, const Tensor& a, const Tensor& b) { return forward_op(t, Op::kMatmul, {a, b}); }
Tensor transpose(Tape& t, const Tensor& a) { return forward_op(t, Op::kTranspose, {a}); }
Tensor sigmoid(Tape& t, const Tensor& x) { return forward_op(t, Op::kSigmoid, {x}); }
Tensor tanh_op(Tape& t, const Tensor& x) { return forward_op(t, Op::kTanh, {x}); }
Tensor softmax(Tape& t, const Tensor& x) { return forward_op(t, Op::kSoftmax, {x}); }
Tensor l2_normalize(Tape& t, const Tensor& x) { return forward_op(t, Op::kL2Normalize, {x}); }
Tensor cosine_sim(Tape& t, const Tensor& a, const Tensor& b) { return forward_op(t, Op::kCosineSim, {a, b}); }
Tensor cross_entropy_2class(Tape& t, const Tensor& logits, int target) {
  return forward_op(t, Op::kCrossEntropy2, {logits}, 0.0, target);
}
Tensor entropy(Tape& t, const Tensor& p) { return forward_op(t, Op::kEntropy, {p}); }
Tensor sq_l2_dist(Tape& t, const Tensor& a, const Tensor& b) { return forward_op(t, Op::kSqL2Dist, {a, b}); }
Tensor hinge(Tape& t, const Tensor& x) { return forward_op(t, Op::kHinge, {x}); }
Tensor sum(Tape& t, const Tensor& x) { return forward_op(t, Op::kSum, {x}); }
Tensor mean(Tape& t, const Tensor& x) { return forward_op(t, Op::kMean, {x}); }
Tensor slice_rows(Tape& t, const Tensor& x, int r0, int r1) {
  return forward_op(t, Op::kSliceRows, {x}, static_cast<double>(r0), r1);
}
Tensor concat_rows(Tape& t, const std::vector<Tensor>& xs) {
  return forward_op(t, Op::kConcatRows, xs);
}

// ---------------------------------------------------------------------------
// ParamStore

void ParamStore::add(const std::string& name, Shape shape, std::vector<double> init) {
  if (name.empty()) throw std::invalid_argument("parameter name must be non-empty");
  if (params_.count(name))
    throw std::invalid_argument("parameter '" + name + "' already exists");
  if (numel(shape) != static_cast<int64_t>(init.size()))
    throw ShapeError("parameter '" + name + "': " + std::to_string(init.size()) +
                     " values for shape " + shape_str(shape));
  if (!all_finite(init))
    throw NumericError("parameter '" + name + "' initialized with non-finite values");
  Param p;
  p.shape = std::move(shape);
  p.value = std::move(init);
  p.m.assign(p.value.size(), 0.0);
  p.v.assign(p.value.size(), 0.0);
  params_.emplace(name, std::move(p));
}

bool ParamStore::has(const std::string& name) const { return params_.count(name) > 0; }

const Shape& ParamStore::shape(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter '" + name + "'");
  return it->second.shape;
}

std::vector<double>& ParamStore::values(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter '" + name + "'");
  return it->second.value;
}

const std::vector<double>& ParamStore::values(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter '" + name + "'");
  return it->second.value;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [k, v] : params_) out.push_back(k);
  return out;
}

Tensor ParamStore::use(Tape& tape, const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter '" + name + "'");
  Param& p = it->second;
  if (!tape.grad_enabled()) return constant(p.shape, p.value);
  return tape.leaf(p.shape, p.value, name);
}

Tensor ParamStore::use_frozen(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter '" + name + "'");
  return constant(it->second.shape, it->second.value);
}

GradMap ParamStore::collect_grads(const Tape& tape) const {
  GradMap out;
  for (const auto& [name, p] : params_)
    out[name] = std::vector<double>(p.value.size(), 0.0);
  tape.add_leaf_grads(out);
  return out;
}

// ---------------------------------------------------------------------------
// Serialization: little-endian, versioned.
//   magic 'CCLP' | u32 version | i64 step | u64 count |
//   per param: u32 name_len | name | u32 ndim | i32 dims[] |
//              f64 value[] | f64 m[] | f64 v[]

namespace {

constexpr uint32_t kParamMagic = 0x504c4343;  // "CCLP"
constexpr uint32_t kParamVersion = 1;

template <typename T>
void put(std::vector<uint8_t>& buf, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  size_t off = buf.size();
  buf.resize(off + sizeof(T));
  std::memcpy(buf.data() + off, &v, sizeof(T));
}

template <typename T>
T take(const std::vector<uint8_t>& buf, size_t& off) {
  if (off + sizeof(T) > buf.size())
    throw std::runtime_error("parameter table truncated");
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

void put_doubles(std::vector<uint8_t>& buf, const std::vector<double>& v) {
  size_t off = buf.size();
  buf.resize(off + v.size() * sizeof(double));
  std::memcpy(buf.data() + off, v.data(), v.size() * sizeof(double));
}

std::vector<double> take_doubles(const std::vector<uint8_t>& buf, size_t& off, size_t n) {
  if (off + n * sizeof(double) > buf.size())
    throw std::runtime_error("parameter table truncated");
  std::vector<double> v(n);
  std::memcpy(v.data(), buf.data() + off, n * sizeof(double));
  off += n * sizeof(double);
  return v;
}

}  // namespace

std::vector<uint8_t> ParamStore::serialize() const {
  std::vector<uint8_t> buf;
  put(buf, kParamMagic);
  put(buf, kParamVersion);
  put(buf, step_);
  put(buf, static_cast<uint64_t>(params_.size()));
  for (const auto& [name, p] : params_) {  // std::map: sorted, stable order
    put(buf, static_cast<uint32_t>(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    put(buf, static_cast<uint32_t>(p.shape.size()));
    for (int d : p.shape) put(buf, static_cast<int32_t>(d));
    put_doubles(buf, p.value);
    put_doubles(buf, p.m);
    put_doubles(buf, p.v);
  }
  return buf;
}

ParamStore ParamStore::deserialize(const std::vector<uint8_t>& bytes) {
  size_t off = 0;
  if (take<uint32_t>(bytes, off) != kParamMagic)
    throw std::runtime_error("not a parameter table (bad magic)");
  uint32_t ver = take<uint32_t>(bytes, off);
  if (ver != kParamVersion)
    throw std::runtime_error("unsupported parameter table version " + std::to_string(ver));
  ParamStore store;
  store.step_ = take<int64_t>(bytes, off);
  uint64_t count = take<uint64_t>(bytes, off);
  for (uint64_t i = 0; i < count; ++i) {
    uint32_t len = take<uint32_t>(bytes, off);
    if (off + len > bytes.size()) throw std::runtime_error("parameter table truncated");
    std::string name(bytes.begin() + off, bytes.begin() + off + len);
    off += len;
    uint32_t ndim = take<uint32_t>(bytes, off);
    Shape shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) shape[d] = take<int32_t>(bytes, off);
    size_t n = static_cast<size_t>(numel(shape));
    Param p;
    p.shape = std::move(shape);
    p.value = take_doubles(bytes, off, n);
    p.m = take_doubles(bytes, off, n);
    p.v = take_doubles(bytes, off, n);
    store.params_.emplace(std::move(name), std::move(p));
  }
  if (off != bytes.size())
    throw std::runtime_error("trailing bytes after parameter table");
  return store;
}

uint64_t ParamStore::content_hash() const {
  auto bytes = serialize();
  return fnv1a(bytes.data(), bytes.size());
}

// ---------------------------------------------------------------------------
// Optimizer

void OptimConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr))
    throw std::invalid_argument("lr must be positive and finite");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw std::invalid_argument("Adam betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw std::invalid_argument("eps must be positive");
  if (schedule == LrSchedule::kPiecewise) {
    for (size_t i = 1; i < milestones.size(); ++i)
      if (milestones[i] <= milestones[i - 1])
        throw std::invalid_argument("milestones must be strictly increasing");
    if (!(factor > 0.0) || factor > 1.0)
      throw std::invalid_argument("factor must lie in (0, 1]");
  }
  if (schedule == LrSchedule::kCosine && total_steps <= 0)
    throw std::invalid_argument("cosine schedule needs total_steps > 0");
}

double scheduled_lr(const OptimConfig& cfg, int64_t step) {
  switch (cfg.schedule) {
    case LrSchedule::kConstant:
      return cfg.lr;
    case LrSchedule::kPiecewise: {
      double lr = cfg.lr;
      for (int64_t ms : cfg.milestones)
        if (ms <= step) lr *= cfg.factor;
      return lr;
    }
    case LrSchedule::kCosine: {
      int64_t s = std::min(step, cfg.total_steps);
      double frac = static_cast<double>(s) / static_cast<double>(cfg.total_steps);
      return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
    }
  }
  return cfg.lr;
}

void optimizer_step(ParamStore& store, const GradMap& grads, const OptimConfig& cfg) {
  cfg.validate();
  double lr = scheduled_lr(cfg, store.step_);
  double t = static_cast<double>(store.step_ + 1);
  double bc1 = 1.0 - std::pow(cfg.beta1, t);
  double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (const auto& [name, g] : grads) {
    auto it = store.params_.find(name);
    if (it == store.params_.end())
      throw std::out_of_range("gradient for unknown parameter '" + name + "'");
    ParamStore::Param& p = it->second;
    if (g.size() != p.value.size())
      throw ShapeError("gradient for '" + name + "' has wrong size");
    if (!all_finite(g))
      throw NumericError("non-finite gradient for parameter '" + name + "'");
    for (size_t i = 0; i < g.size(); ++i) {
      p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g[i];
      p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      double mhat = p.m[i] / bc1;
      double vhat = p.v[i] / bc2;
      p.value[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
  store.step_ += 1;
}

// ---------------------------------------------------------------------------
// Gradient check

GradCheckReport grad_check(const LossFn& fn, ParamStore& store, double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");

  auto eval = [&]() {
    Tape t;
    t.set_grad_enabled(false);
    Tensor loss = fn(t, store);
    return loss.scalar();
  };

  // FD needs a deterministic loss; two untouched evaluations must agree to
  // the last bit.
  double l1 = eval(), l2 = eval();
  if (std::memcmp(&l1, &l2, sizeof(double)) != 0)
    throw GraphError("grad_check: loss is not deterministic across evaluations");

  Tape tape;
  Tensor loss = fn(tape, store);
  tape.backward(loss);
  GradMap analytic = store.collect_grads(tape);

  GradCheckReport rep;
  for (const auto& name : store.names()) {
    auto& value = store.values(name);
    const auto& ga = analytic.at(name);
    for (size_t i = 0; i < value.size(); ++i) {
      double keep = value[i];
      value[i] = keep + epsilon;
      double fp = eval();
      value[i] = keep - epsilon;
      double fm = eval();
      value[i] = keep;
      double fd = (fp - fm) / (2.0 * epsilon);
      double rel = std::abs(ga[i] - fd) / std::max(1e-8, std::abs(ga[i]) + std::abs(fd));
      ++rep.entries_checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = name;
        rep.worst_index = static_cast<int>(i);
      }
    }
  }
  return rep;
}

}  // namespace ccl::diff
