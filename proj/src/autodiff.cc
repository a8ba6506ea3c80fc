#include "kerm/autodiff.h"

#include <algorithm>
#include <cmath>

#include "kerm/errors.h"

namespace kerm {

const Matrix& Var::value() const {
  if (!tape_) throw InvariantError("use of an unbound Var");
  return tape_->value(*this);
}

std::size_t Tape::idx(Var v) const {
  if (v.tape_ != this || v.id_ < 0 || static_cast<std::size_t>(v.id_) >= nodes_.size())
    throw InvariantError("Var does not belong to this tape");
  return static_cast<std::size_t>(v.id_);
}

Var Tape::constant(Matrix value) {
  check_finite(value, "constant");
  nodes_.push_back(Node{std::move(value), {}, false, false, nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::param(const ParamStore& store, const std::string& name) {
  auto it = params_.find(name);
  if (it != params_.end()) return Var(this, it->second);
  nodes_.push_back(Node{store.value(name), {}, false, track_grad_, nullptr});
  const int id = static_cast<int>(nodes_.size() - 1);
  params_.emplace(name, id);
  return Var(this, id);
}

Var Tape::push(Matrix value, std::vector<Var> inputs, Backward backward) {
  bool needs = false;
  if (track_grad_) {
    for (Var in : inputs) needs = needs || nodes_[idx(in)].requires_grad;
  }
  nodes_.push_back(
      Node{std::move(value), {}, false, needs, needs ? std::move(backward) : nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::add_grad(Var v, const Matrix& g) {
  Node& n = nodes_[idx(v)];
  if (!n.requires_grad) return;
  if (!g.same_shape(n.value))
    throw ShapeError("gradient " + g.shape_string() + " for value " +
                     n.value.shape_string());
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
    return;
  }
  auto& dst = n.grad.data();
  const auto& src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[idx(v)];
  if (n.has_grad) return n.grad;
  return Matrix(n.value.rows(), n.value.cols());
}

void Tape::backward(Var output) {
  const std::size_t out = idx(output);
  if (nodes_[out].value.rows() != 1 || nodes_[out].value.cols() != 1)
    throw ShapeError("backward() needs a scalar output, got " +
                     nodes_[out].value.shape_string());
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Matrix();
  }
  if (!nodes_[out].requires_grad) return;
  nodes_[out].grad = Matrix(1, 1, 1.0);
  nodes_[out].has_grad = true;
  for (std::size_t i = out + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, n.value, n.grad);
  }
}

void Tape::accumulate_param_grads(ParamStore& store) const {
  for (const auto& [name, id] : params_) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_grad) continue;
    auto& dst = store.grad(name).data();
    const auto& src = n.grad.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
}

namespace ad {

namespace {

Tape& tape_of(Var a) {
  if (!a.tape()) throw InvariantError("op on an unbound Var");
  return *a.tape();
}

void same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw InvariantError("Vars from different tapes");
}

}  // namespace

Var matmul(Var a, Var b) {
  same_tape(a, b);
  Tape& t = tape_of(a);
  return t.push(kerm::matmul(a.value(), b.value()), {a, b},
                [a, b](Tape& t, const Matrix&, const Matrix& g) {
                  if (t.requires_grad(a)) t.add_grad(a, kerm::matmul(g, kerm::transpose(b.value())));
                  if (t.requires_grad(b)) t.add_grad(b, kerm::matmul(kerm::transpose(a.value()), g));
                });
}

Var add(Var a, Var b) {
  same_tape(a, b);
  if (!a.value().same_shape(b.value()))
    throw ShapeError("add: " + a.value().shape_string() + " + " +
                     b.value().shape_string());
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.value().data()[i];
  check_finite(out, "add");
  return tape_of(a).push(std::move(out), {a, b},
                         [a, b](Tape& t, const Matrix&, const Matrix& g) {
                           t.add_grad(a, g);
                           t.add_grad(b, g);
                         });
}

Var add_row(Var a, Var bias) {
  same_tape(a, bias);
  const Matrix& x = a.value();
  const Matrix& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != x.cols())
    throw ShapeError("add_row: " + x.shape_string() + " + " + bv.shape_string());
  Matrix out = x;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += bv(0, j);
  check_finite(out, "add_row");
  return tape_of(a).push(std::move(out), {a, bias},
                         [a, bias](Tape& t, const Matrix&, const Matrix& g) {
                           t.add_grad(a, g);
                           if (t.requires_grad(bias)) {
                             Matrix gb(1, g.cols());
                             for (std::size_t i = 0; i < g.rows(); ++i)
                               for (std::size_t j = 0; j < g.cols(); ++j) gb(0, j) += g(i, j);
                             t.add_grad(bias, gb);
                           }
                         });
}

Var linear(Var x, Var w, Var b) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols())
    throw ShapeError("linear: x" + x.value().shape_string() + " W" +
                     w.value().shape_string() + " b" + b.value().shape_string());
  return add_row(matmul(x, w), b);
}

Var scale(Var a, double s) {
  Matrix out = a.value();
  for (double& v : out.data()) v *= s;
  check_finite(out, "scale");
  return tape_of(a).push(std::move(out), {a},
                         [a, s](Tape& t, const Matrix&, const Matrix& g) {
                           Matrix ga = g;
                           for (double& v : ga.data()) v *= s;
                           t.add_grad(a, ga);
                         });
}

Var hadamard(Var a, Var b) {
  same_tape(a, b);
  if (!a.value().same_shape(b.value()))
    throw ShapeError("hadamard: " + a.value().shape_string() + " * " +
                     b.value().shape_string());
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= b.value().data()[i];
  check_finite(out, "hadamard");
  return tape_of(a).push(std::move(out), {a, b},
                         [a, b](Tape& t, const Matrix&, const Matrix& g) {
                           if (t.requires_grad(a)) {
                             Matrix ga = g;
                             for (std::size_t i = 0; i < ga.size(); ++i)
                               ga.data()[i] *= b.value().data()[i];
                             t.add_grad(a, ga);
                           }
                           if (t.requires_grad(b)) {
                             Matrix gb = g;
                             for (std::size_t i = 0; i < gb.size(); ++i)
                               gb.data()[i] *= a.value().data()[i];
                             t.add_grad(b, gb);
                           }
                         });
}

Var activation(Var a, Activation act) {
  Matrix out = a.value();
  for (double& v : out.data()) v = activate(act, v);
  check_finite(out, activation_name(act));
  return tape_of(a).push(std::move(out), {a},
                         [a, act](Tape& t, const Matrix&, const Matrix& g) {
                           Matrix ga = g;
                           const auto& x = a.value().data();
                           for (std::size_t i = 0; i < ga.size(); ++i)
                             ga.data()[i] *= activate_derivative(act, x[i]);
                           t.add_grad(a, ga);
                         });
}

Var log(Var a) {
  Matrix out = a.value();
  for (double& v : out.data()) v = std::log(v);
  check_finite(out, "log");
  return tape_of(a).push(std::move(out), {a},
                         [a](Tape& t, const Matrix&, const Matrix& g) {
                           Matrix ga = g;
                           const auto& x = a.value().data();
                           for (std::size_t i = 0; i < ga.size(); ++i) ga.data()[i] /= x[i];
                           t.add_grad(a, ga);
                         });
}

Var transpose(Var a) {
  return tape_of(a).push(kerm::transpose(a.value()), {a},
                         [a](Tape& t, const Matrix&, const Matrix& g) {
                           t.add_grad(a, kerm::transpose(g));
                         });
}

Var softmax_rows(Var a) {
  return tape_of(a).push(
      kerm::softmax_rows(a.value()), {a},
      [a](Tape& t, const Matrix& y, const Matrix& g) {
        Matrix ga(y.rows(), y.cols());
        for (std::size_t i = 0; i < y.rows(); ++i) {
          double inner = 0.0;
          for (std::size_t j = 0; j < y.cols(); ++j) inner += g(i, j) * y(i, j);
          for (std::size_t j = 0; j < y.cols(); ++j)
            ga(i, j) = y(i, j) * (g(i, j) - inner);
        }
        t.add_grad(a, ga);
      });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  same_tape(x, gain);
  same_tape(x, bias);
  const Matrix& xv = x.value();
  const std::size_t n = xv.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n)
    throw ShapeError("layer_norm: x" + xv.shape_string() + " gain" +
                     gain.value().shape_string() + " bias" +
                     bias.value().shape_string());
  Matrix xhat(xv.rows(), n);
  std::vector<double> inv_std(xv.rows());
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    double mean = 0.0;
    for (double v : xv.row(i)) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : xv.row(i)) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) xhat(i, j) = (xv(i, j) - mean) * inv_std[i];
  }
  Matrix out(xv.rows(), n);
  const Matrix& gv = gain.value();
  const Matrix& bv = bias.value();
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = gv(0, j) * xhat(i, j) + bv(0, j);
  check_finite(out, "layer_norm");
  return tape_of(x).push(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape& t, const Matrix&, const Matrix& g) {
        const std::size_t rows = g.rows();
        const std::size_t n = g.cols();
        const Matrix& gv = gain.value();
        if (t.requires_grad(gain) || t.requires_grad(bias)) {
          Matrix gg(1, n), gb(1, n);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              gg(0, j) += g(i, j) * xhat(i, j);
              gb(0, j) += g(i, j);
            }
          t.add_grad(gain, gg);
          t.add_grad(bias, gb);
        }
        if (t.requires_grad(x)) {
          Matrix gx(rows, n);
          for (std::size_t i = 0; i < rows; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g(i, j) * gv(0, j);
              mean_d += d;
              mean_dx += d * xhat(i, j);
            }
            mean_d /= static_cast<double>(n);
            mean_dx /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g(i, j) * gv(0, j);
              gx(i, j) = inv_std[i] * (d - mean_d - xhat(i, j) * mean_dx);
            }
          }
          t.add_grad(x, gx);
        }
      });
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
  const Matrix& av = a.value();
  if (start + count > av.cols())
    throw ShapeError("slice_cols [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") of " + av.shape_string());
  Matrix out(av.rows(), count);
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = av(i, start + j);
  return tape_of(a).push(std::move(out), {a},
                         [a, start](Tape& t, const Matrix&, const Matrix& g) {
                           Matrix ga(a.rows(), a.cols());
                           for (std::size_t i = 0; i < g.rows(); ++i)
                             for (std::size_t j = 0; j < g.cols(); ++j)
                               ga(i, start + j) = g(i, j);
                           t.add_grad(a, ga);
                         });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (Var p : parts) {
    same_tape(parts[0], p);
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::size_t off = 0;
  for (Var p : parts) {
    const Matrix& pv = p.value();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < pv.cols(); ++j) out(i, off + j) = pv(i, j);
    off += pv.cols();
  }
  return tape_of(parts[0]).push(std::move(out), parts,
                                [parts](Tape& t, const Matrix&, const Matrix& g) {
                                  std::size_t off = 0;
                                  for (Var p : parts) {
                                    const std::size_t c = p.cols();
                                    if (t.requires_grad(p)) {
                                      Matrix gp(g.rows(), c);
                                      for (std::size_t i = 0; i < g.rows(); ++i)
                                        for (std::size_t j = 0; j < c; ++j)
                                          gp(i, j) = g(i, off + j);
                                      t.add_grad(p, gp);
                                    }
                                    off += c;
                                  }
                                });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const std::size_t cols = parts[0].cols();
  std::vector<double> data;
  std::size_t rows = 0;
  for (Var p : parts) {
    same_tape(parts[0], p);
    if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
    const auto& pd = p.value().data();
    data.insert(data.end(), pd.begin(), pd.end());
    rows += p.rows();
  }
  return tape_of(parts[0]).push(Matrix(rows, cols, std::move(data)), parts,
                                [parts](Tape& t, const Matrix&, const Matrix& g) {
                                  std::size_t off = 0;
                                  for (Var p : parts) {
                                    const std::size_t r = p.rows();
                                    if (t.requires_grad(p)) {
                                      Matrix gp(r, g.cols());
                                      std::copy(g.data().begin() + static_cast<std::ptrdiff_t>(off * g.cols()),
                                                g.data().begin() + static_cast<std::ptrdiff_t>((off + r) * g.cols()),
                                                gp.data().begin());
                                      t.add_grad(p, gp);
                                    }
                                    off += r;
                                  }
                                });
}

Var gather_rows(Var a, const std::vector<std::size_t>& rows) {
  const Matrix& av = a.value();
  Matrix out(rows.size(), av.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= av.rows())
      throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " of " +
                       av.shape_string());
    std::copy(av.row(rows[i]).begin(), av.row(rows[i]).end(), out.row(i).begin());
  }
  return tape_of(a).push(std::move(out), {a},
                         [a, rows](Tape& t, const Matrix&, const Matrix& g) {
                           Matrix ga(a.rows(), a.cols());
                           for (std::size_t i = 0; i < rows.size(); ++i) {
                             auto dst = ga.row(rows[i]);
                             auto src = g.row(i);
                             for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
                           }
                           t.add_grad(a, ga);
                         });
}

Var scatter_add_rows(Var src, const std::vector<std::size_t>& indices,
                     std::size_t rows) {
  const Matrix& sv = src.value();
  if (indices.size() != sv.rows())
    throw ShapeError("scatter_add_rows: " + std::to_string(indices.size()) +
                     " indices for " + sv.shape_string());
  Matrix out(rows, sv.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows)
      throw ShapeError("scatter_add_rows: index " + std::to_string(indices[i]) +
                       " >= " + std::to_string(rows));
    auto dst = out.row(indices[i]);
    auto s = sv.row(i);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += s[j];
  }
  return tape_of(src).push(std::move(out), {src},
                           [src, indices](Tape& t, const Matrix&, const Matrix& g) {
                             Matrix gs(indices.size(), g.cols());
                             for (std::size_t i = 0; i < indices.size(); ++i)
                               std::copy(g.row(indices[i]).begin(), g.row(indices[i]).end(),
                                         gs.row(i).begin());
                             t.add_grad(src, gs);
                           });
}

Var segment_softmax(Var column, const std::vector<std::size_t>& segments) {
  const Matrix& x = column.value();
  if (x.cols() != 1 || segments.size() != x.rows())
    throw ShapeError("segment_softmax: " + x.shape_string() + " with " +
                     std::to_string(segments.size()) + " segment ids");
  std::size_t nseg = 0;
  for (std::size_t s : segments) nseg = std::max(nseg, s + 1);
  std::vector<double> mx(nseg, -INFINITY), sum(nseg, 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) mx[segments[i]] = std::max(mx[segments[i]], x(i, 0));
  Matrix out(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    out(i, 0) = std::exp(x(i, 0) - mx[segments[i]]);
    sum[segments[i]] += out(i, 0);
  }
  for (std::size_t i = 0; i < x.rows(); ++i) out(i, 0) /= sum[segments[i]];
  check_finite(out, "segment_softmax");
  return tape_of(column).push(
      std::move(out), {column},
      [column, segments, nseg](Tape& t, const Matrix& y, const Matrix& g) {
        std::vector<double> inner(nseg, 0.0);
        for (std::size_t i = 0; i < y.rows(); ++i) inner[segments[i]] += g(i, 0) * y(i, 0);
        Matrix gx(y.rows(), 1);
        for (std::size_t i = 0; i < y.rows(); ++i)
          gx(i, 0) = y(i, 0) * (g(i, 0) - inner[segments[i]]);
        t.add_grad(column, gx);
      });
}

Var scale_rows(Var a, Var weights) {
  same_tape(a, weights);
  const Matrix& av = a.value();
  const Matrix& wv = weights.value();
  if (wv.cols() != 1 || wv.rows() != av.rows())
    throw ShapeError("scale_rows: " + av.shape_string() + " by " + wv.shape_string());
  Matrix out = av;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (double& v : out.row(i)) v *= wv(i, 0);
  return tape_of(a).push(std::move(out), {a, weights},
                         [a, weights](Tape& t, const Matrix&, const Matrix& g) {
                           const Matrix& av = a.value();
                           const Matrix& wv = weights.value();
                           if (t.requires_grad(a)) {
                             Matrix ga = g;
                             for (std::size_t i = 0; i < ga.rows(); ++i)
                               for (double& v : ga.row(i)) v *= wv(i, 0);
                             t.add_grad(a, ga);
                           }
                           if (t.requires_grad(weights)) {
                             Matrix gw(wv.rows(), 1);
                             for (std::size_t i = 0; i < av.rows(); ++i)
                               gw(i, 0) = dot(g.row(i), av.row(i));
                             t.add_grad(weights, gw);
                           }
                         });
}

Var mean_rows(Var a) {
  const Matrix& av = a.value();
  if (av.rows() == 0) throw ShapeError("mean_rows of an empty matrix");
  Matrix out(1, av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < av.cols(); ++j) out(0, j) += av(i, j);
  const double inv = 1.0 / static_cast<double>(av.rows());
  for (double& v : out.data()) v *= inv;
  return tape_of(a).push(std::move(out), {a},
                         [a, inv](Tape& t, const Matrix&, const Matrix& g) {
                           Matrix ga(a.rows(), a.cols());
                           for (std::size_t i = 0; i < ga.rows(); ++i)
                             for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) = g(0, j) * inv;
                           t.add_grad(a, ga);
                         });
}

Var sum_all(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return tape_of(a).push(Matrix(1, 1, s), {a},
                         [a](Tape& t, const Matrix&, const Matrix& g) {
                           t.add_grad(a, Matrix(a.rows(), a.cols(), g(0, 0)));
                         });
}

Var softmax_cross_entropy_first(Var scores) {
  const Matrix& s = scores.value();
  if (s.cols() != 1 || s.rows() == 0)
    throw ShapeError("softmax_cross_entropy_first: " + s.shape_string());
  double mx = s(0, 0);
  for (std::size_t i = 0; i < s.rows(); ++i) mx = std::max(mx, s(i, 0));
  double z = 0.0;
  for (std::size_t i = 0; i < s.rows(); ++i) z += std::exp(s(i, 0) - mx);
  const double lse = mx + std::log(z);
  Matrix out(1, 1, lse - s(0, 0));
  check_finite(out, "softmax_cross_entropy_first");
  return tape_of(scores).push(std::move(out), {scores},
                              [scores, lse](Tape& t, const Matrix&, const Matrix& g) {
                                const Matrix& s = scores.value();
                                Matrix gs(s.rows(), 1);
                                for (std::size_t i = 0; i < s.rows(); ++i)
                                  gs(i, 0) = g(0, 0) * std::exp(s(i, 0) - lse);
                                gs(0, 0) -= g(0, 0);
                                t.add_grad(scores, gs);
                              });
}

}  // namespace ad

GradCheckReport grad_check(const std::function<Var(Tape&)>& f, ParamStore& params,
                           const GradCheckOptions& opts) {
  if (opts.eps <= 0.0) throw ConfigError("grad_check: eps must be positive");
  auto eval = [&f]() {
    Tape t(false);
    Var out = f(t);
    if (out.rows() != 1 || out.cols() != 1)
      throw ShapeError("grad_check: function output must be 1x1");
    return out.value()(0, 0);
  };
  const double base1 = eval();
  const double base2 = eval();
  if (base1 != base2)
    throw DeterminismError("grad_check: two evaluations at the same point differ (" +
                           std::to_string(base1) + " vs " + std::to_string(base2) + ")");

  params.zero_grad();
  {
    Tape t;
    Var out = f(t);
    t.backward(out);
    t.accumulate_param_grads(params);
  }

  GradCheckReport report;
  for (const std::string& name : params.names()) {
    auto& values = params.value(name).data();
    const auto& grads = params.grad(name).data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + opts.eps;
      const double up = eval();
      values[i] = saved - opts.eps;
      const double down = eval();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * opts.eps);
      const double analytic = grads[i];
      const double denom =
          std::max({std::abs(analytic), std::abs(numeric), opts.abs_floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.checked;
      if (rel > report.max_rel_error || report.worst_param.empty()) {
        if (rel >= report.max_rel_error) {
          report.max_rel_error = rel;
          report.worst_param = name;
          report.worst_index = i;
          report.worst_analytic = analytic;
          report.worst_numeric = numeric;
        }
      }
    }
  }
  report.passed = report.max_rel_error <= opts.tol;
  return report;
}

}  // namespace kerm
