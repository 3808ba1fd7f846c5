#pragma once

#include <span>
#include <vector>

#include "kermit/tape.h"

namespace kermit {

// CTC posteriors are T x C log-probability matrices. Column 0 is the blank
// symbol; columns 1..C-1 are output labels.
inline constexpr int kCtcBlank = 0;

// Linear projection to C classes followed by row log-softmax.
Var ctc_head(Var h_feat, Var projection);

// Merge consecutive repeats, then drop blanks.
std::vector<int> collapse(std::span<const int> path);

// Minimum number of frames that can emit `labels`: one per label plus one
// separating blank per adjacent repeat.
std::size_t ctc_min_frames(std::span<const int> labels);
bool ctc_feasible(std::size_t frames, std::span<const int> labels);

// log p(labels | posterior) by the forward recursion over the
// blank-interleaved label sequence. Infeasible targets give -infinity.
double ctc_log_prob(const Matrix& log_probs, std::span<const int> labels);

// Differentiable variant. For an infeasible target the node holds -infinity
// and passes no gradient.
Var ctc_log_prob(Var log_probs, std::span<const int> labels);

// Per-frame argmax path and its collapse.
std::vector<int> ctc_best_path(const Matrix& log_probs);
std::vector<int> ctc_greedy(const Matrix& log_probs);

}  // namespace kermit
