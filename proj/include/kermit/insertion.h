#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "kermit/encoder.h"
#include "kermit/model.h"
#include "kermit/tape.h"

namespace kermit {

// Partial hypothesis delimited by <s> and </s>. Slot l (0 <= l < size-1)
// is the gap right after tokens[l].
struct Hypothesis {
  std::vector<int> tokens{Vocabulary::kSos, Vocabulary::kEos};
  std::size_t step = 0;

  static Hypothesis from_body(std::span<const int> body, std::size_t step = 0);
  std::vector<int> body() const;
  std::size_t slot_count() const { return tokens.size() - 1; }
};

// One target per slot: an ordinary token id or Vocabulary::kEnd.
struct SlotTargets {
  std::vector<int> tokens;
};

// Balanced-binary-tree order over reference positions 1..n. The root is the
// centermost position; each side is split recursively. For an even-length
// span the two middle positions tie and the one nearer the middle of the
// whole sequence wins (the left one if still tied), which gives
// c5 -> c3 c5 c7 -> c2..c8 -> c1..c9 for n = 9.
std::size_t bbt_depth(std::size_t n);
// Level (1-based tree depth) of each position, indexed 0..n-1.
std::vector<std::size_t> bbt_levels(std::size_t n);

// Hypothesis holding the reference tokens of levels <= k, and for each slot
// the token of level k+1 inside its gap (or kEnd for an empty gap).
std::pair<Hypothesis, SlotTargets> bbt_partial(std::span<const int> reference, std::size_t level);

struct SlotPosteriors {
  Var token_log_probs;     // slots x (|V|+1), class 0 = <end>
  Var position_log_probs;  // 1 x slots
};

// Slot l is read from h_tok row l; the final sentinel row has no slot.
SlotPosteriors slot_posteriors(Var h_tok, Var token_head, Var position_head);

// Per-slot argmax as token ids (kEnd or ordinary tokens).
std::vector<int> slot_argmax_tokens(const Matrix& token_log_probs, const Vocabulary& vocab);

struct InsertionStep {
  Hypothesis hypothesis;
  bool finished = false;  // every slot predicted <end>
};

// Inserts every non-<end> slot token simultaneously; slot indices refer to
// the hypothesis before insertion.
InsertionStep parallel_greedy_insert(const Hypothesis& h, std::span<const int> slot_tokens);

// Token cross-entropy averaged over slots plus the cross-entropy of the
// position distribution against the uniform distribution over slots whose
// target is not <end> (omitted when every target is <end>).
Var insertion_loss(const SlotPosteriors& posteriors, const SlotTargets& targets,
                   const Vocabulary& vocab);

// Predicts one token per slot for the given hypothesis (one forward pass).
using SlotPredictor = std::function<std::vector<int>(const Hypothesis&)>;

struct DecodeResult {
  std::vector<int> tokens;        // without sentinels
  std::size_t iterations = 0;     // rounds that inserted tokens, at least 1
  std::size_t forward_passes = 0;
  std::vector<int> ctc_first;     // CTC greedy output of the first pass
  std::vector<int> ctc_final;     // CTC greedy output given the final hypothesis
};

// Starts from (<s>, </s>) and inserts until every slot predicts <end> or
// max_iters passes have run.
DecodeResult decode_insertion(const SlotPredictor& predictor, std::size_t max_iters);

// Same loop driven by the model's joint forward pass over a segment of raw
// frames (positions counted from the segment start). With
// `final_ctc_pass`, one extra pass is run when the budget ends the loop so
// that ctc_final reflects the final hypothesis.
DecodeResult decode_insertion(const Model& model, const FeatureSequence& segment,
                              std::size_t max_iters, bool final_ctc_pass = false);

// CTC greedy output mapped back to token ids.
std::vector<int> ctc_greedy_tokens(const Matrix& ctc_log_probs, const Vocabulary& vocab);

}  // namespace kermit
