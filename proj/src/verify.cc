#include "kermit/verify.h"

#include "kermit/attention.h"
#include "kermit/ctc.h"
#include "kermit/insertion.h"
#include "kermit/synth.h"
#include "kermit/train.h"

namespace kermit {

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = rng.normal();
  return m;
}

// Single operations on random inputs, each reduced to a scalar loss.
void check_components(std::uint64_t seed, const GradCheckOptions& opts,
                      std::vector<GradCheckEntry>& out) {
  Rng rng(seed + 1);
  ParamSet ps;
  auto param = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    ps.emplace(name, ParamTensor(name, random_matrix(rows, cols, rng)));
  };
  param("x", 6, 8);
  param("prev", 3, 8);
  param("mem", 2, 8);
  param("w", 8, 5);
  param("b", 6, 5);
  param("wq", 8, 8);
  param("wk", 8, 8);
  param("wv", 8, 8);
  param("wo", 8, 8);
  param("pos", 8, 1);
  const std::vector<int> targets{0, 3, 1, 4, 4, 2};
  auto attention = [](Tape& t, const ParamSet& p) {
    return AttentionParams{t.param(p.at("wq")), t.param(p.at("wk")), t.param(p.at("wv")),
                           t.param(p.at("wo")), 2};
  };
  auto run = [&](const std::string& name, LossFn fn) {
    out.push_back({name, grad_check(fn, ps, opts)});
  };
  run("linear + cross entropy", [&](Tape& t, const ParamSet& p) {
    Var logits = add(matmul(t.param(p.at("x")), t.param(p.at("w"))), t.param(p.at("b")));
    return cross_entropy(log_softmax_rows(logits), targets);
  });
  run("softmax", [&](Tape& t, const ParamSet& p) {
    return sum_squares(softmax_rows(matmul(t.param(p.at("x")), t.param(p.at("w")))));
  });
  run("multi-head attention + cross entropy", [&](Tape& t, const ParamSet& p) {
    Var x = t.param(p.at("x"));
    Var h = self_attention(x, attention(t, p));
    return cross_entropy(log_softmax_rows(matmul(h, t.param(p.at("w")))), targets);
  });
  run("block self-attention", [&](Tape& t, const ParamSet& p) {
    Var x = t.param(p.at("x"));
    return sum_squares(block_sa(slice_rows(x, 3, 6), slice_rows(x, 0, 3), attention(t, p)));
  });
  run("extended block self-attention", [&](Tape& t, const ParamSet& p) {
    Var x = t.param(p.at("x"));
    return sum_squares(ext_block_sa(slice_rows(x, 0, 4), t.param(p.at("prev")),
                                    t.param(p.at("mem")), attention(t, p)));
  });
  run("ctc loss", [&](Tape& t, const ParamSet& p) {
    Var lp = ctc_head(t.param(p.at("x")), t.param(p.at("w")));
    return scale(ctc_log_prob(lp, std::vector<int>{2, 2, 4}), -1.0);
  });
  run("insertion loss", [&](Tape& t, const ParamSet& p) {
    const SlotTargets slots{{Vocabulary::kFirstToken + 1, Vocabulary::kEnd,
                             Vocabulary::kFirstToken + 3, Vocabulary::kEnd,
                             Vocabulary::kFirstToken}};
    return insertion_loss(
        slot_posteriors(t.param(p.at("x")), t.param(p.at("w")), t.param(p.at("pos"))), slots,
        Vocabulary(4));
  });
}

}  // namespace

std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed, double epsilon) {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.d_model = 8;
  cfg.block_len = 2;
  cfg.subsample = 2;
  cfg.feat_dim = 3;
  cfg.vocab_size = 5;
  Model model = Model::initialize(cfg, seed);

  SynthTaskSpec spec;
  spec.vocab_size = cfg.vocab_size;
  spec.feat_dim = cfg.feat_dim;
  spec.frames_per_unit = cfg.subsample;
  spec.min_units = 1;
  spec.max_units = 2;
  spec.min_lead = spec.max_lead = 1;
  spec.min_trail = spec.max_trail = 1;
  spec.min_tokens = spec.max_tokens = 5;
  spec.seed = seed;
  const Utterance u = SynthTask(spec).generate(1, 0).front();

  GradCheckOptions opts;
  opts.epsilon = epsilon;
  opts.seed = seed;
  std::vector<GradCheckEntry> out;
  check_components(seed, opts, out);
  auto check = [&](const std::string& name, double lambda, std::size_t level) {
    LossFn fn = [&, lambda, level](Tape& tape, const ParamSet&) {
      return joint_loss(tape, model, u.features, u.tokens, level, lambda).total;
    };
    out.push_back({name, grad_check(fn, model.params(), opts)});
  };
  const std::size_t depth = bbt_depth(u.tokens.size());
  check("joint lambda=0.5 level=0", 0.5, 0);
  check("joint lambda=0.5 level=1", 0.5, 1);
  check("joint lambda=0.5 level=" + std::to_string(depth), 0.5, depth);
  check("ctc only lambda=1", 1.0, 1);
  check("insertion only lambda=0", 0.0, 2);
  return out;
}

}  // namespace kermit
