#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "kerm/matrix.h"

namespace kerm {

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;
  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Records a computation for reverse-mode differentiation. Each op pushes its
// forward value plus a closure that maps the node's output gradient onto its
// inputs. Parameters are read from a ParamStore by name; after backward()
// their gradients are added into the store with accumulate_param_grads().
class Tape {
 public:
  using Backward = std::function<void(Tape& tape, const Matrix& out_value,
                                      const Matrix& out_grad)>;

  // With track_grad = false nothing is recorded for backward; used for
  // inference.
  explicit Tape(bool track_grad = true) : track_grad_(track_grad) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  // One leaf per name per tape; repeated calls return the same Var.
  Var param(const ParamStore& store, const std::string& name);

  // Internal: used by op implementations.
  Var push(Matrix value, std::vector<Var> inputs, Backward backward);
  bool requires_grad(Var v) const { return nodes_[idx(v)].requires_grad; }
  void add_grad(Var v, const Matrix& g);

  const Matrix& value(Var v) const { return nodes_[idx(v)].value; }
  // Gradient of the last backward() output w.r.t. v (zeros if unreached).
  Matrix grad(Var v) const;

  // `output` must be 1x1. Seeds d(output) = 1 and walks the tape backwards.
  void backward(Var output);
  void accumulate_param_grads(ParamStore& store) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;
  };
  std::size_t idx(Var v) const;

  bool track_grad_ = true;
  std::deque<Node> nodes_;
  std::map<std::string, int> params_;
};

namespace ad {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
// a + bias, bias (1 x cols) broadcast over rows.
Var add_row(Var a, Var bias);
// x W + b.
Var linear(Var x, Var w, Var b);
Var scale(Var a, double s);
Var hadamard(Var a, Var b);
Var activation(Var a, Activation act);
Var log(Var a);
Var transpose(Var a);
Var softmax_rows(Var a);
// Standard layer normalization over each row with learned gain and bias.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-12);
Var slice_cols(Var a, std::size_t start, std::size_t count);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var gather_rows(Var a, const std::vector<std::size_t>& rows);
// out has `rows` rows; row indices[i] += src.row(i). Accumulation follows
// the order of `indices`.
Var scatter_add_rows(Var src, const std::vector<std::size_t>& indices,
                     std::size_t rows);
// Softmax of a column vector within groups: entries sharing segments[i] are
// normalized together.
Var segment_softmax(Var column, const std::vector<std::size_t>& segments);
// Row i of a scaled by weights(i, 0).
Var scale_rows(Var a, Var weights);
Var mean_rows(Var a);
Var sum_all(Var a);
// -log softmax(scores)[0] for a column vector: listwise cross-entropy with
// the positive in row 0.
Var softmax_cross_entropy_first(Var scores);

}  // namespace ad

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-6;
  // Denominator floor for the relative error |a - n| / max(|a|, |n|, floor),
  // so entries with vanishing gradient are judged on absolute error.
  double abs_floor = 1e-6;
};

// Compares the tape gradient of every element of every parameter in `params`
// with a central finite difference of `f`. `f` must build its graph on the
// tape it is given and read parameters from `params`. Throws DeterminismError
// if two evaluations at the same point disagree.
GradCheckReport grad_check(const std::function<Var(Tape&)>& f,
                           ParamStore& params, const GradCheckOptions& opts);

}  // namespace kerm
