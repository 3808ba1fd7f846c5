#include "kermit/ctc.h"

#include <cmath>
#include <limits>

#include "kermit/errors.h"

namespace kermit {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double lse2(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = a > b ? a : b;
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

std::vector<int> interleave_blanks(std::span<const int> labels) {
  std::vector<int> ext(2 * labels.size() + 1, kCtcBlank);
  for (std::size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = labels[i];
  return ext;
}

void check_labels(const Matrix& lp, std::span<const int> labels) {
  for (int l : labels) {
    if (l <= kCtcBlank || static_cast<std::size_t>(l) >= lp.cols()) {
      throw ShapeError("ctc: label " + std::to_string(l) + " outside [1," +
                       std::to_string(lp.cols()) + ")");
    }
  }
}

// alpha(t, s): log-prob of emitting frames 0..t and being in state s at t.
Matrix forward_table(const Matrix& lp, const std::vector<int>& ext) {
  const std::size_t T = lp.rows(), S = ext.size();
  Matrix alpha(T, S, kNegInf);
  alpha(0, 0) = lp(0, static_cast<std::size_t>(ext[0]));
  if (S > 1) alpha(0, 1) = lp(0, static_cast<std::size_t>(ext[1]));
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double a = alpha(t - 1, s);
      if (s >= 1) a = lse2(a, alpha(t - 1, s - 1));
      if (s >= 2 && ext[s] != kCtcBlank && ext[s] != ext[s - 2]) a = lse2(a, alpha(t - 1, s - 2));
      if (a != kNegInf) alpha(t, s) = a + lp(t, static_cast<std::size_t>(ext[s]));
    }
  }
  return alpha;
}

// beta(t, s): log-prob of emitting frames t+1..T-1 given state s at t.
Matrix backward_table(const Matrix& lp, const std::vector<int>& ext) {
  const std::size_t T = lp.rows(), S = ext.size();
  Matrix beta(T, S, kNegInf);
  beta(T - 1, S - 1) = 0.0;
  if (S > 1) beta(T - 1, S - 2) = 0.0;
  for (std::size_t t = T - 1; t-- > 0;) {
    for (std::size_t s = 0; s < S; ++s) {
      double b = beta(t + 1, s) + lp(t + 1, static_cast<std::size_t>(ext[s]));
      if (s + 1 < S)
        b = lse2(b, beta(t + 1, s + 1) + lp(t + 1, static_cast<std::size_t>(ext[s + 1])));
      if (s + 2 < S && ext[s + 2] != kCtcBlank && ext[s + 2] != ext[s])
        b = lse2(b, beta(t + 1, s + 2) + lp(t + 1, static_cast<std::size_t>(ext[s + 2])));
      beta(t, s) = b;
    }
  }
  return beta;
}

double total_from_alpha(const Matrix& alpha) {
  const std::size_t T = alpha.rows(), S = alpha.cols();
  double total = alpha(T - 1, S - 1);
  if (S > 1) total = lse2(total, alpha(T - 1, S - 2));
  return total;
}

}  // namespace

Var ctc_head(Var h_feat, Var projection) { return log_softmax_rows(matmul(h_feat, projection)); }

std::vector<int> collapse(std::span<const int> path) {
  std::vector<int> out;
  for (std::size_t t = 0; t < path.size(); ++t) {
    if (t > 0 && path[t] == path[t - 1]) continue;
    if (path[t] != kCtcBlank) out.push_back(path[t]);
  }
  return out;
}

std::size_t ctc_min_frames(std::span<const int> labels) {
  std::size_t n = labels.size();
  for (std::size_t i = 1; i < labels.size(); ++i)
    if (labels[i] == labels[i - 1]) ++n;
  return n;
}

bool ctc_feasible(std::size_t frames, std::span<const int> labels) {
  return frames >= 1 && ctc_min_frames(labels) <= frames;
}

double ctc_log_prob(const Matrix& log_probs, std::span<const int> labels) {
  check_labels(log_probs, labels);
  if (!ctc_feasible(log_probs.rows(), labels)) return kNegInf;
  return total_from_alpha(forward_table(log_probs, interleave_blanks(labels)));
}

Var ctc_log_prob(Var log_probs, std::span<const int> labels) {
  const Matrix& lp = log_probs.value();
  check_labels(lp, labels);
  Tape& tape = *log_probs.tape();
  if (!ctc_feasible(lp.rows(), labels)) {
    return tape.record(Matrix(1, 1, kNegInf), {log_probs}, [](Tape&, const Matrix&, const Matrix&) {});
  }
  std::vector<int> ext = interleave_blanks(labels);
  Matrix alpha = forward_table(lp, ext);
  const double total = total_from_alpha(alpha);
  return tape.record(
      Matrix(1, 1, total), {log_probs},
      [log_probs, ext = std::move(ext), alpha = std::move(alpha), total](Tape& t, const Matrix& g,
                                                                         const Matrix&) {
        const Matrix& lp = log_probs.value();
        const Matrix beta = backward_table(lp, ext);
        Matrix& gl = t.grad_slot(log_probs);
        const double go = g(0, 0);
        for (std::size_t tt = 0; tt < lp.rows(); ++tt) {
          for (std::size_t s = 0; s < ext.size(); ++s) {
            const double occ = alpha(tt, s) + beta(tt, s);
            if (occ == kNegInf) continue;
            gl(tt, static_cast<std::size_t>(ext[s])) += go * std::exp(occ - total);
          }
        }
      });
}

std::vector<int> ctc_best_path(const Matrix& log_probs) {
  std::vector<int> path(log_probs.rows());
  for (std::size_t t = 0; t < log_probs.rows(); ++t)
    path[t] = static_cast<int>(argmax(log_probs.row(t)));
  return path;
}

std::vector<int> ctc_greedy(const Matrix& log_probs) { return collapse(ctc_best_path(log_probs)); }

}  // namespace kermit
