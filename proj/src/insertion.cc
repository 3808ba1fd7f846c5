#include "kermit/insertion.h"

#include <algorithm>
#include <cmath>

#include "kermit/ctc.h"
#include "kermit/errors.h"

namespace kermit {

Hypothesis Hypothesis::from_body(std::span<const int> body, std::size_t step) {
  Hypothesis h;
  h.tokens.clear();
  h.tokens.push_back(Vocabulary::kSos);
  h.tokens.insert(h.tokens.end(), body.begin(), body.end());
  h.tokens.push_back(Vocabulary::kEos);
  h.step = step;
  return h;
}

std::vector<int> Hypothesis::body() const {
  if (tokens.size() < 2) return {};
  return std::vector<int>(tokens.begin() + 1, tokens.end() - 1);
}

std::size_t bbt_depth(std::size_t n) {
  std::size_t depth = 0;
  while ((std::size_t{1} << depth) < n + 1) ++depth;
  return depth;
}

namespace {

// 1-based span [lo, hi] of a sequence of length n.
std::size_t span_center(std::size_t lo, std::size_t hi, std::size_t n) {
  const std::size_t len = hi - lo + 1;
  if (len % 2 == 1) return lo + len / 2;
  const std::size_t left = lo + len / 2 - 1, right = left + 1;
  const double mid = (static_cast<double>(n) + 1.0) / 2.0;
  const double dl = std::abs(static_cast<double>(left) - mid);
  const double dr = std::abs(static_cast<double>(right) - mid);
  return dr < dl ? right : left;
}

void assign_levels(std::size_t lo, std::size_t hi, std::size_t level, std::size_t n,
                   std::vector<std::size_t>& out) {
  if (lo > hi) return;
  const std::size_t c = span_center(lo, hi, n);
  out[c - 1] = level;
  if (c > lo) assign_levels(lo, c - 1, level + 1, n, out);
  assign_levels(c + 1, hi, level + 1, n, out);
}

}  // namespace

std::vector<std::size_t> bbt_levels(std::size_t n) {
  std::vector<std::size_t> levels(n, 0);
  if (n > 0) assign_levels(1, n, 1, n, levels);
  return levels;
}

std::pair<Hypothesis, SlotTargets> bbt_partial(std::span<const int> reference, std::size_t level) {
  const std::size_t n = reference.size();
  const std::size_t depth = bbt_depth(n);
  if (level > depth) {
    throw ConfigError("bbt_partial: level " + std::to_string(level) + " outside [0," +
                      std::to_string(depth) + "] for " + std::to_string(n) + " tokens");
  }
  const auto levels = bbt_levels(n);
  std::vector<int> body;
  SlotTargets targets;
  int pending = Vocabulary::kEnd;
  for (std::size_t i = 0; i < n; ++i) {
    if (levels[i] <= level) {
      targets.tokens.push_back(pending);
      pending = Vocabulary::kEnd;
      body.push_back(reference[i]);
    } else if (levels[i] == level + 1) {
      pending = reference[i];
    }
  }
  targets.tokens.push_back(pending);
  return {Hypothesis::from_body(body, level), std::move(targets)};
}

SlotPosteriors slot_posteriors(Var h_tok, Var token_head, Var position_head) {
  if (h_tok.rows() < 2) {
    throw ShapeError("slot_posteriors: hypothesis needs both sentinels, got " +
                     std::to_string(h_tok.rows()) + " rows");
  }
  Var slots = slice_rows(h_tok, 0, h_tok.rows() - 1);
  return {log_softmax_rows(matmul(slots, token_head)),
          log_softmax_rows(transpose(matmul(slots, position_head)))};
}

std::vector<int> slot_argmax_tokens(const Matrix& token_log_probs, const Vocabulary& vocab) {
  std::vector<int> out(token_log_probs.rows());
  for (std::size_t l = 0; l < out.size(); ++l)
    out[l] = vocab.from_insertion_class(static_cast<int>(argmax(token_log_probs.row(l))));
  return out;
}

InsertionStep parallel_greedy_insert(const Hypothesis& h, std::span<const int> slot_tokens) {
  if (slot_tokens.size() != h.slot_count()) {
    throw ShapeError("parallel_greedy_insert: " + std::to_string(slot_tokens.size()) +
                     " predictions for " + std::to_string(h.slot_count()) + " slots");
  }
  InsertionStep out;
  out.finished = true;
  auto& dst = out.hypothesis.tokens;
  dst.clear();
  for (std::size_t l = 0; l < slot_tokens.size(); ++l) {
    dst.push_back(h.tokens[l]);
    const int t = slot_tokens[l];
    if (t == Vocabulary::kEnd) continue;
    if (t < Vocabulary::kFirstToken) {
      throw VocabularyError("parallel_greedy_insert: reserved id " + std::to_string(t) +
                            " cannot be inserted");
    }
    dst.push_back(t);
    out.finished = false;
  }
  dst.push_back(h.tokens.back());
  out.hypothesis.step = h.step + 1;
  return out;
}

Var insertion_loss(const SlotPosteriors& posteriors, const SlotTargets& targets,
                   const Vocabulary& vocab) {
  const std::size_t slots = posteriors.token_log_probs.rows();
  if (targets.tokens.size() != slots || posteriors.position_log_probs.cols() != slots) {
    throw ShapeError("insertion_loss: " + std::to_string(targets.tokens.size()) + " targets for " +
                     std::to_string(slots) + " slots");
  }
  const std::vector<int> classes = vocab.to_classes(targets.tokens);
  Var loss = cross_entropy(posteriors.token_log_probs, classes);
  const auto active = static_cast<std::size_t>(
      std::count_if(targets.tokens.begin(), targets.tokens.end(),
                    [](int t) { return t != Vocabulary::kEnd; }));
  if (active == 0) return loss;
  Matrix uniform(1, slots);
  for (std::size_t l = 0; l < slots; ++l)
    if (targets.tokens[l] != Vocabulary::kEnd) uniform(0, l) = 1.0 / static_cast<double>(active);
  return add(loss, soft_cross_entropy(posteriors.position_log_probs, uniform));
}

DecodeResult decode_insertion(const SlotPredictor& predictor, std::size_t max_iters) {
  if (max_iters == 0) throw ConfigError("decode_insertion: iteration budget must be at least 1");
  DecodeResult result;
  Hypothesis hyp;
  std::size_t rounds = 0;
  for (std::size_t pass = 0; pass < max_iters; ++pass) {
    const std::vector<int> slot_tokens = predictor(hyp);
    ++result.forward_passes;
    InsertionStep step = parallel_greedy_insert(hyp, slot_tokens);
    if (step.finished) break;
    hyp = std::move(step.hypothesis);
    ++rounds;
  }
  result.tokens = hyp.body();
  result.iterations = std::max<std::size_t>(rounds, 1);
  return result;
}

std::vector<int> ctc_greedy_tokens(const Matrix& ctc_log_probs, const Vocabulary& vocab) {
  std::vector<int> out;
  for (int cls : ctc_greedy(ctc_log_probs)) out.push_back(vocab.from_ctc_class(cls));
  return out;
}

DecodeResult decode_insertion(const Model& model, const FeatureSequence& segment,
                              std::size_t max_iters, bool final_ctc_pass) {
  Matrix x_emb;
  {
    Tape tape(false);
    x_emb = embed_audio(tape, model, segment).value();
  }
  std::vector<int> last_ctc;
  std::vector<int> last_ctc_hyp;
  bool first = true;
  DecodeResult first_info;
  auto run_pass = [&](const Hypothesis& hyp) {
    Tape tape(false);
    Var c_emb = embed_tokens(tape, model, hyp.tokens);
    EncoderOutput out = forward_joint(tape, model, tape.view(x_emb), c_emb);
    Var ctc = ctc_head(out.h_feat, tape.param(model.param("head.ctc")));
    last_ctc = ctc_greedy_tokens(ctc.value(), model.vocab());
    last_ctc_hyp = hyp.tokens;
    if (first) {
      first_info.ctc_first = last_ctc;
      first = false;
    }
    SlotPosteriors post = slot_posteriors(out.h_tok, tape.param(model.param("head.token")),
                                          tape.param(model.param("head.pos")));
    return slot_argmax_tokens(post.token_log_probs.value(), model.vocab());
  };
  DecodeResult result = decode_insertion(run_pass, max_iters);
  result.ctc_first = std::move(first_info.ctc_first);
  const Hypothesis final_hyp = Hypothesis::from_body(result.tokens);
  if (last_ctc_hyp != final_hyp.tokens && final_ctc_pass) {
    run_pass(final_hyp);
    ++result.forward_passes;
  }
  result.ctc_final = std::move(last_ctc);
  return result;
}

}  // namespace kermit
