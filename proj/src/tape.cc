#include "kermit/tape.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "kermit/errors.h"

namespace kermit {

void zero_grads(ParamSet& params) {
  for (auto& [_, p] : params) p.zero_grad();
}

NamedArrays param_values(const ParamSet& params) {
  NamedArrays out;
  for (const auto& [name, p] : params) out.emplace(name, p.value);
  return out;
}

const Matrix& Var::value() const { return tape_->value(*this); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::constant(Matrix m) {
  Node n;
  n.owned = std::move(m);
  return push(std::move(n));
}

Var Tape::input(Matrix m) {
  Node n;
  n.owned = std::move(m);
  n.requires_grad = grad_enabled_;
  return push(std::move(n));
}

Var Tape::view(const Matrix& m) {
  Node n;
  n.borrowed = &m;
  return push(std::move(n));
}

Var Tape::param(const ParamTensor& p) {
  Node n;
  n.borrowed = &p.value;
  n.requires_grad = grad_enabled_;
  n.param_name = &p.name;
  return push(std::move(n));
}

const Matrix& Tape::value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id())).value(); }

bool Tape::requires_grad(Var v) const {
  return nodes_.at(static_cast<std::size_t>(v.id())).requires_grad;
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(v.id()));
  if (n.has_grad) return n.grad;
  return Matrix(n.value().rows(), n.value().cols());
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(fn));
}

Var Tape::record(Matrix value, std::span<const Var> inputs, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  if (grad_enabled_) {
    for (const Var& in : inputs) {
      if (in.tape() != this) throw Error("tape: operand recorded on a different tape");
      if (nodes_[static_cast<std::size_t>(in.id())].requires_grad) n.requires_grad = true;
    }
    if (n.requires_grad) n.backward = std::move(fn);
  }
  return push(std::move(n));
}

Matrix& Tape::grad_slot(Var v) {
  Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (!n.has_grad) {
    n.grad = Matrix(n.value().rows(), n.value().cols());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::accumulate(Var v, const Matrix& g) {
  if (!nodes_[static_cast<std::size_t>(v.id())].requires_grad) return;
  add_inplace(grad_slot(v), g);
}

void Tape::backward(Var loss) {
  if (!grad_enabled_) throw Error("tape: backward on a gradient-disabled tape");
  const Matrix& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ShapeError("backward: loss must be 1x1, got " + lv.shape());
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Matrix();
  }
  grad_slot(loss)(0, 0) = 1.0;
  for (std::size_t i = static_cast<std::size_t>(loss.id()) + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, n.grad, n.value());
  }
}

void Tape::accumulate_param_grads(ParamSet& params) const {
  for (const auto& n : nodes_) {
    if (!n.param_name || !n.has_grad) continue;
    auto it = params.find(*n.param_name);
    if (it == params.end()) throw Error("tape: unknown parameter '" + *n.param_name + "'");
    add_inplace(it->second.gradient, n.grad);
  }
}

// ---------------------------------------------------------------------------

namespace {

Tape& same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw Error("tape: operands on different tapes");
  return *a.tape();
}

}  // namespace

double scalar(Var v) {
  const Matrix& m = v.value();
  if (m.rows() != 1 || m.cols() != 1) throw ShapeError("scalar: expected 1x1, got " + m.shape());
  return m(0, 0);
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  return t.record(matmul(a.value(), b.value()), {a, b},
                  [a, b](Tape& t, const Matrix& g, const Matrix&) {
                    if (t.requires_grad(a)) t.accumulate(a, matmul_nt(g, b.value()));
                    if (t.requires_grad(b)) t.accumulate(b, matmul_tn(a.value(), g));
                  });
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  Matrix out = a.value();
  add_inplace(out, b.value());
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var scale(Var a, double s) {
  Matrix out = a.value();
  for (double& v : out.values()) v *= s;
  return a.tape()->record(std::move(out), {a}, [a, s](Tape& t, const Matrix& g, const Matrix&) {
    Matrix ga = g;
    for (double& v : ga.values()) v *= s;
    t.accumulate(a, ga);
  });
}

Var relu(Var a) {
  Matrix out = a.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix& y) {
    Matrix ga(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] = y.data()[i] > 0.0 ? g.data()[i] : 0.0;
    t.accumulate(a, ga);
  });
}

Var log(Var a) {
  Matrix out = a.value();
  for (double& v : out.values()) v = std::log(v);
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    const Matrix& x = a.value();
    Matrix ga(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] = g.data()[i] / x.data()[i];
    t.accumulate(a, ga);
  });
}

Var softmax_rows(Var a) {
  return a.tape()->record(softmax_rows(a.value()), {a},
                          [a](Tape& t, const Matrix& g, const Matrix& y) {
                            Matrix ga(g.rows(), g.cols());
                            for (std::size_t i = 0; i < g.rows(); ++i) {
                              auto gy = g.row(i);
                              auto yy = y.row(i);
                              double dot = 0.0;
                              for (std::size_t j = 0; j < gy.size(); ++j) dot += gy[j] * yy[j];
                              auto out = ga.row(i);
                              for (std::size_t j = 0; j < gy.size(); ++j)
                                out[j] = yy[j] * (gy[j] - dot);
                            }
                            t.accumulate(a, ga);
                          });
}

Var log_softmax_rows(Var a) {
  return a.tape()->record(log_softmax_rows(a.value()), {a},
                          [a](Tape& t, const Matrix& g, const Matrix& y) {
                            Matrix ga(g.rows(), g.cols());
                            for (std::size_t i = 0; i < g.rows(); ++i) {
                              auto gy = g.row(i);
                              auto yy = y.row(i);
                              double total = 0.0;
                              for (double v : gy) total += v;
                              auto out = ga.row(i);
                              for (std::size_t j = 0; j < gy.size(); ++j)
                                out[j] = gy[j] - std::exp(yy[j]) * total;
                            }
                            t.accumulate(a, ga);
                          });
}

Var transpose(Var a) {
  return a.tape()->record(transpose(a.value()), {a},
                          [a](Tape& t, const Matrix& g, const Matrix&) {
                            t.accumulate(a, transpose(g));
                          });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  return a.tape()->record(slice_rows(a.value(), begin, end), {a},
                          [a, begin](Tape& t, const Matrix& g, const Matrix&) {
                            Matrix& ga = t.grad_slot(a);
                            const std::size_t c = g.cols();
                            for (std::size_t i = 0; i < g.size(); ++i)
                              ga.data()[begin * c + i] += g.data()[i];
                          });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  Tape& t = *parts.front().tape();
  std::vector<Matrix> values;
  values.reserve(parts.size());
  for (const Var& p : parts) {
    if (p.tape() != &t) throw Error("tape: operands on different tapes");
    values.push_back(p.value());
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(concat_rows(values), parts,
                  [inputs](Tape& t, const Matrix& g, const Matrix&) {
                    std::size_t offset = 0;
                    for (const Var& p : inputs) {
                      const std::size_t r = p.rows();
                      if (r > 0 && t.requires_grad(p)) {
                        Matrix& gp = t.grad_slot(p);
                        const double* src = g.data() + offset * g.cols();
                        for (std::size_t i = 0; i < gp.size(); ++i) gp.data()[i] += src[i];
                      }
                      offset += r;
                    }
                  });
}

Var embedding(Var table, std::span<const int> ids) {
  const Matrix& tv = table.value();
  Matrix out(ids.size(), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " outside table " +
                       tv.shape());
    }
    auto src = tv.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return table.tape()->record(std::move(out), {table},
                              [table, idv](Tape& t, const Matrix& g, const Matrix&) {
                                Matrix& gt = t.grad_slot(table);
                                for (std::size_t i = 0; i < idv.size(); ++i) {
                                  auto dst = gt.row(static_cast<std::size_t>(idv[i]));
                                  auto src = g.row(i);
                                  for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
                                }
                              });
}

Var layer_norm(Var x, Var gain_bias, double eps) {
  Tape& t = same_tape(x, gain_bias);
  const Matrix& xv = x.value();
  const Matrix& gb = gain_bias.value();
  if (gb.rows() != 2 || gb.cols() != xv.cols()) {
    throw ShapeError("layer_norm: gain/bias " + gb.shape() + " does not fit input " + xv.shape());
  }
  const std::size_t n = xv.rows(), d = xv.cols();
  Matrix normed(n, d);
  std::vector<double> inv_std(n);
  Matrix out(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = xv.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      normed(i, j) = (r[j] - mean) * inv_std[i];
      out(i, j) = normed(i, j) * gb(0, j) + gb(1, j);
    }
  }
  return t.record(std::move(out), {x, gain_bias},
                  [x, gain_bias, normed = std::move(normed), inv_std = std::move(inv_std)](
                      Tape& t, const Matrix& g, const Matrix&) {
                    const Matrix& gb = gain_bias.value();
                    const std::size_t n = g.rows(), d = g.cols();
                    if (t.requires_grad(gain_bias)) {
                      Matrix& ggb = t.grad_slot(gain_bias);
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < d; ++j) {
                          ggb(0, j) += g(i, j) * normed(i, j);
                          ggb(1, j) += g(i, j);
                        }
                    }
                    if (t.requires_grad(x)) {
                      Matrix& gx = t.grad_slot(x);
                      std::vector<double> dn(d);
                      for (std::size_t i = 0; i < n; ++i) {
                        double mean_dn = 0.0, mean_dn_n = 0.0;
                        for (std::size_t j = 0; j < d; ++j) {
                          dn[j] = g(i, j) * gb(0, j);
                          mean_dn += dn[j];
                          mean_dn_n += dn[j] * normed(i, j);
                        }
                        mean_dn /= static_cast<double>(d);
                        mean_dn_n /= static_cast<double>(d);
                        for (std::size_t j = 0; j < d; ++j)
                          gx(i, j) += inv_std[i] * (dn[j] - mean_dn - normed(i, j) * mean_dn_n);
                      }
                    }
                  });
}

Var sum_squares(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v * v;
  Matrix out(1, 1, s);
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    Matrix ga = a.value();
    for (double& v : ga.values()) v *= 2.0 * g(0, 0);
    t.accumulate(a, ga);
  });
}

Var cross_entropy(Var logprobs, std::span<const int> targets) {
  const Matrix& lp = logprobs.value();
  if (targets.size() != lp.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     lp.shape() + " log-probabilities");
  }
  if (lp.rows() == 0) throw ShapeError("cross_entropy: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= lp.cols()) {
      throw ShapeError("cross_entropy: row " + std::to_string(i) + " target index " +
                       std::to_string(targets[i]) + " out of range [0," +
                       std::to_string(lp.cols()) + ")");
    }
    total -= lp(i, static_cast<std::size_t>(targets[i]));
  }
  const double inv_n = 1.0 / static_cast<double>(lp.rows());
  std::vector<int> tv(targets.begin(), targets.end());
  return logprobs.tape()->record(Matrix(1, 1, total * inv_n), {logprobs},
                                 [logprobs, tv, inv_n](Tape& t, const Matrix& g, const Matrix&) {
                                   Matrix& gl = t.grad_slot(logprobs);
                                   for (std::size_t i = 0; i < tv.size(); ++i)
                                     gl(i, static_cast<std::size_t>(tv[i])) -= g(0, 0) * inv_n;
                                 });
}

Var soft_cross_entropy(Var logprobs, const Matrix& target) {
  const Matrix& lp = logprobs.value();
  if (target.rows() != lp.rows() || target.cols() != lp.cols()) {
    throw ShapeError("soft_cross_entropy: target " + target.shape() + " vs " + lp.shape());
  }
  if (lp.rows() == 0) throw ShapeError("soft_cross_entropy: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    if (target.data()[i] != 0.0) total -= target.data()[i] * lp.data()[i];
  }
  const double inv_n = 1.0 / static_cast<double>(lp.rows());
  return logprobs.tape()->record(Matrix(1, 1, total * inv_n), {logprobs},
                                 [logprobs, target, inv_n](Tape& t, const Matrix& g, const Matrix&) {
                                   Matrix& gl = t.grad_slot(logprobs);
                                   for (std::size_t i = 0; i < gl.size(); ++i)
                                     gl.data()[i] -= g(0, 0) * inv_n * target.data()[i];
                                 });
}

// ---------------------------------------------------------------------------

double grad_check(const LossFn& loss_fn, ParamSet& params, const GradCheckOptions& opts) {
  if (opts.epsilon < 1e-6 || opts.epsilon > 1e-4) {
    throw ConfigError("grad_check: epsilon must lie in [1e-6, 1e-4]");
  }
  auto eval = [&]() {
    Tape t(false);
    return scalar(loss_fn(t, params));
  };
  const double first = eval();
  const double second = eval();
  if (!(first == second)) {
    throw NumericError("grad_check: loss function is not deterministic (" +
                       format_double(first) + " vs " + format_double(second) + ")");
  }

  zero_grads(params);
  {
    Tape t(true);
    Var loss = loss_fn(t, params);
    t.backward(loss);
    t.accumulate_param_grads(params);
  }

  std::mt19937 rng(opts.seed);
  double worst = 0.0;
  for (auto& [name, p] : params) {
    std::vector<std::size_t> coords(p.value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords_per_param > 0 && coords.size() > opts.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_param);
    }
    for (std::size_t c : coords) {
      double& v = p.value.data()[c];
      const double saved = v;
      v = saved + opts.epsilon;
      const double plus = eval();
      v = saved - opts.epsilon;
      const double minus = eval();
      v = saved;
      const double fd = (plus - minus) / (2.0 * opts.epsilon);
      const double an = p.gradient.data()[c];
      const double rel = std::abs(fd - an) / std::max(1e-8, std::abs(fd) + std::abs(an));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace kermit
