#pragma once

// Slow, direct reference implementations used only by the tests.

#include <cstddef>
#include <vector>

#include "kermit/matrix.h"
#include "kermit/model.h"

namespace kermit::oracle {

Matrix matmul_triple(const Matrix& a, const Matrix& b);

// exp(x) / sum exp(x) without any shift.
Matrix softmax_direct(const Matrix& m);

// Full multi-head attention, element by element, where query i may only see
// keys j with allowed[i][j]. Projections are d x d with heads as column
// groups, matching AttentionParams.
Matrix masked_attention(const Matrix& q, const Matrix& k, const Matrix& v, const Matrix& wq,
                        const Matrix& wk, const Matrix& wv, const Matrix& wo, std::size_t heads,
                        const std::vector<std::vector<bool>>& allowed);

// Key mask of block self-attention: query t sees keys in [(b-1)B, (b+1)B) ∩ [0, T)
// where b = t / B.
std::vector<std::vector<bool>> block_mask(std::size_t rows, std::size_t block_len);

// Sums path probabilities over every alignment whose collapse equals
// `labels`. Refuses T > 8 or more than 4 classes. Returns log probability.
double brute_force_ctc(const Matrix& log_probs, const std::vector<int>& labels);

// Every label sequence over classes 1..C-1 of length <= max_len.
std::vector<std::vector<int>> all_label_sequences(std::size_t classes, std::size_t max_len);

// Depth (1-based) of each reference position in the balanced binary tree,
// built by recursive halving: the root of span [lo, hi] is its middle, and
// an even span takes whichever middle lies nearer the sequence middle, the
// left one if equally near.
std::vector<std::size_t> bbt_depths(std::size_t n);

// Edit distance by the full quadratic table.
std::size_t edit_distance_table(const std::vector<int>& a, const std::vector<int>& b);

// Model whose layers add nothing (attention output and feed-forward
// projections are zero), so every stream equals its embedding.
// The CTC head reads coordinate 0 of the audio embedding, which is
// 100 * (sum of the raw features of the stacked group); positive input
// frames predict label class 1, negative ones blank.
Model scripted_model(ModelConfig cfg);

}  // namespace kermit::oracle
