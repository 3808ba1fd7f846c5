#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "kermit/tape.h"

namespace kermit {

// Multi-head attention weights bound to a tape. Per-head projections are the
// column groups [h*d/H, (h+1)*d/H) of the d x d matrices wq, wk and wv.
struct AttentionParams {
  Var wq, wk, wv, wo;
  std::size_t heads = 1;

  std::size_t width() const { return wq.rows(); }
};

// Binds `{prefix}wq`, `{prefix}wk`, `{prefix}wv`, `{prefix}wo` from `params`.
AttentionParams bind_attention(Tape& tape, const ParamSet& params, const std::string& prefix,
                               std::size_t heads);

// Scaled dot-product attention over already projected inputs, one softmax
// per head with scale 1/sqrt(d/H). Returns the concatenated head outputs
// (before W^O). Every call adds rows(q) * rows(k) to the score counter.
Var attention_core(Var q_proj, Var k_proj, Var v_proj, std::size_t heads);

// Concat(U_1..U_H) W^O over already projected inputs.
Var attend_projected(Var q_proj, Var k_proj, Var v_proj, const AttentionParams& p);

Var multi_head(Var q, Var k, Var v, const AttentionParams& p);
Var self_attention(Var q, const AttentionParams& p);

// Consecutive row ranges [begin, end) of at most `block_len` rows; the last
// block may be shorter.
struct BlockRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};
std::vector<BlockRange> block_ranges(std::size_t rows, std::size_t block_len);
std::vector<Var> block_partition(Var q, std::size_t block_len);

// Queries of block b attend to [Q_{b-1}; Q_b]. `q_prev` may be an invalid
// Var (or have zero rows) for the first block.
Var block_sa(Var q_block, Var q_prev, const AttentionParams& p);

// Queries of block b attend to [Q_{b-1}; Q_b; M].
Var ext_block_sa(Var q_block, Var q_prev, Var memory, const AttentionParams& p);

// Thread-local count of query-key score evaluations.
std::uint64_t attention_score_count();
void reset_attention_score_count();

}  // namespace kermit
