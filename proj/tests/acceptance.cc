// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
// The desk-scale experiment trains the default model from scratch, so this
// binary takes tens of minutes on a single core.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kermit/attention.h"
#include "kermit/ctc.h"
#include "kermit/insertion.h"
#include "kermit/metrics.h"
#include "kermit/streaming.h"
#include "kermit/synth.h"
#include "kermit/train.h"
#include "kermit/verify.h"
#include "oracles.h"
#include "test_util.h"

namespace {

using namespace kermit;
using kermit::testing::random_matrix;
using Clock = std::chrono::steady_clock;
namespace fs = std::filesystem;

int failures = 0;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void report(bool ok, const std::string& name, const std::string& detail) {
  if (!ok) ++failures;
  std::cout << (ok ? "PASS  " : "FAIL  ") << name << "  " << detail << std::endl;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

void ctc_grid() {
  const auto t0 = Clock::now();
  Rng rng(101);
  double worst = 0.0;
  std::size_t instances = 0;
  bool infeasible_ok = true;
  for (std::size_t T = 1; T <= 6; ++T) {
    const Matrix lp = log_softmax_rows(random_matrix(T, 3, rng, 2.0));
    for (const auto& y : oracle::all_label_sequences(3, 3)) {
      ++instances;
      const double got = ctc_log_prob(lp, y), want = oracle::brute_force_ctc(lp, y);
      if (std::isinf(want)) {
        infeasible_ok = infeasible_ok && std::isinf(got);
        continue;
      }
      worst = std::max(worst, std::abs(got - want));
    }
  }
  const double elapsed = seconds_since(t0);
  report(worst <= 1e-8 && infeasible_ok && elapsed < 10.0, "ctc oracle equivalence",
         std::to_string(instances) + " instances, max |diff| " + fmt(worst) + ", " + fmt(elapsed) + " s");
}

void gradient_suite() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  const auto entries = run_gradcheck_suite(1);
  for (const auto& e : entries) {
    if (e.max_rel_error >= worst) {
      worst = e.max_rel_error;
      worst_name = e.name;
    }
  }
  const double elapsed = seconds_since(t0);
  report(worst <= 1e-4 && elapsed < 60.0, "gradient suite",
         std::to_string(entries.size()) + " checks, max rel error " + fmt(worst) + " (" + worst_name +
             "), " + fmt(elapsed) + " s");
}

void block_mask_equivalence() {
  Rng rng(102);
  double worst = 0.0;
  for (int config = 0; config < 50; ++config) {
    const std::size_t B = std::size_t{2} << rng.uniform_int(0, 2);
    const std::size_t T = rng.uniform_int(1, 32), heads = rng.uniform_int(1, 2), d = 8;
    const Matrix x = random_matrix(T, d, rng);
    const Matrix wq = random_matrix(d, d, rng, 0.5), wk = random_matrix(d, d, rng, 0.5),
                 wv = random_matrix(d, d, rng, 0.5), wo = random_matrix(d, d, rng, 0.5);
    Tape t(false);
    const AttentionParams p{t.constant(wq), t.constant(wk), t.constant(wv), t.constant(wo), heads};
    const auto ranges = block_ranges(T, B);
    std::vector<Matrix> outs;
    for (std::size_t b = 0; b < ranges.size(); ++b) {
      const Var cur = t.constant(slice_rows(x, ranges[b].begin, ranges[b].end));
      const Var prev = b == 0 ? Var{} : t.constant(slice_rows(x, ranges[b - 1].begin, ranges[b - 1].end));
      outs.push_back(block_sa(cur, prev, p).value());
    }
    const Matrix want = oracle::masked_attention(x, x, x, wq, wk, wv, wo, heads, oracle::block_mask(T, B));
    worst = std::max(worst, max_abs_diff(concat_rows(outs), want));
  }
  report(worst <= 1e-12, "block attention mask equivalence", "50 configurations, max |diff| " + fmt(worst));
}

void bbt_reconstruction() {
  bool ok = true;
  std::string detail;
  for (std::size_t n = 1; n <= 33; ++n) {
    std::vector<int> ref(n);
    for (std::size_t i = 0; i < n; ++i) ref[i] = Vocabulary::kFirstToken + static_cast<int>(i);
    // a head that returns the true slot targets for every hypothesis on the tree
    const SlotPredictor perfect = [&ref](const Hypothesis& h) {
      for (std::size_t k = 0; k <= bbt_depth(ref.size()); ++k) {
        auto [hyp, targets] = bbt_partial(ref, k);
        if (hyp.tokens == h.tokens) return targets.tokens;
      }
      throw std::logic_error("hypothesis left the reference tree");
    };
    std::size_t expect = 0;
    while ((std::size_t{1} << expect) < n + 1) ++expect;
    const DecodeResult r = decode_insertion(perfect, 64);
    if (r.tokens != ref || r.iterations != expect) {
      ok = false;
      detail += " N=" + std::to_string(n);
    }
  }
  report(ok, "bbt reconstruction", ok ? "N = 1..33 rebuilt in ceil(log2(N+1)) iterations" : "failed at" + detail);
}

// Block b of the causal pass against the same pass with every later block perturbed.
void causal_pass_causality(const Model& model, Rng& rng, bool& ok) {
  const ModelConfig& cfg = model.config();
  const std::size_t blocks = 5;
  const Matrix x = random_matrix(blocks * cfg.block_len, cfg.d_model, rng);
  auto run = [&](const Matrix& input) {
    BlockCache cache = make_block_cache(model);
    std::vector<Matrix> outs;
    for (std::size_t b = 0; b < blocks; ++b)
      outs.push_back(forward_frames_causal(model, slice_rows(input, b * cfg.block_len, (b + 1) * cfg.block_len), cache));
    return outs;
  };
  const auto base = run(x);
  for (std::size_t b = 0; b + 1 < blocks; ++b) {
    Matrix y = x;
    for (std::size_t r = (b + 1) * cfg.block_len; r < y.rows(); ++r)
      for (std::size_t j = 0; j < y.cols(); ++j) y(r, j) += rng.normal();
    const auto changed = run(y);
    for (std::size_t c = 0; c <= b; ++c) ok = ok && changed[c] == base[c];
  }
}

void causality(const Model& model, const std::vector<StreamSample>& streams, const StreamOptions& opts) {
  Rng rng(103);
  bool ok = true;
  for (int trial = 0; trial < 5; ++trial) causal_pass_causality(model, rng, ok);
  std::size_t checked_events = 0;
  const std::size_t block_raw = model.config().block_len * model.config().subsample;
  for (std::size_t i = 0; i < 5 && i < streams.size(); ++i) {
    const Matrix& x = streams[i].features;
    const std::size_t cut = (x.rows() / 2 / block_raw) * block_raw;
    StreamDecoder prefix(model, opts);
    const auto before = prefix.push_frames(slice_rows(x, 0, cut));
    Matrix y = x;
    for (std::size_t r = cut; r < y.rows(); ++r)
      for (std::size_t j = 0; j < y.cols(); ++j) y(r, j) = 3.0 * rng.normal();
    const auto after = run_stream(model, y, opts);
    for (std::size_t e = 0; e < before.size(); ++e) {
      ok = ok && e < after.size() && before[e].same_result(after[e]);
      ++checked_events;
    }
  }
  report(ok, "causality", "causal pass over 5x4 perturbations; " + std::to_string(checked_events) +
                              " emitted events unchanged under perturbed future audio");
}

void streaming_equivalence(const Model& model, const std::vector<StreamSample>& streams,
                           const StreamOptions& opts) {
  bool ok = true;
  std::size_t events = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    const Matrix& x = streams[i].features;
    const auto whole = run_stream(model, x, opts);
    StreamDecoder dec(model, opts);
    std::vector<SegmentEvent> pieces;
    for (std::size_t t = 0; t < x.rows(); ++t)
      for (auto& e : dec.push_frames(slice_rows(x, t, t + 1))) pieces.push_back(std::move(e));
    for (auto& e : dec.finish()) pieces.push_back(std::move(e));
    ok = ok && pieces.size() == whole.size();
    for (std::size_t e = 0; ok && e < whole.size(); ++e) ok = whole[e].same_result(pieces[e]);
    events += whole.size();
  }
  report(ok, "streaming/offline equivalence", "20 streams, " + std::to_string(events) + " segments, bit-exact");
}

// Non-timing lines of a bench run, or an empty list if the output is malformed.
std::vector<std::string> bench_lines(const std::string& output, std::string& problem) {
  std::vector<std::string> kept;
  std::istringstream in(output);
  std::string line;
  std::map<std::string, bool> summary{{"utterances", false},         {"cer", false},
                                      {"cer_ctc", false},            {"mean_iterations", false},
                                      {"max_iterations", false},     {"mean_forward_passes", false},
                                      {"max_forward_passes", false}};
  std::map<std::string, bool> timing{{"threads", false}, {"wall_seconds", false}, {"audio_seconds", false}, {"rtf", false}};
  std::size_t utts = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::istringstream fields(line);
    for (std::string x; std::getline(fields, x, '\t');) f.push_back(x);
    if (f.empty()) continue;
    if (f[0] == "utt" && (f.size() == 5 || f.size() == 4)) {
      ++utts;
      kept.push_back(line);
    } else if (f[0] == "summary" && f.size() == 3 && summary.count(f[1])) {
      summary[f[1]] = true;
      kept.push_back(line);
    } else if (f[0] == "timing" && f.size() == 3 && timing.count(f[1])) {
      timing[f[1]] = true;
      if (f[1] == "rtf" && !(std::stod(f[2]) > 0.0)) problem = "non-positive rtf";
    } else {
      problem = "unexpected line '" + line + "'";
    }
  }
  for (const auto& [k, seen] : summary)
    if (!seen) problem = "missing summary " + k;
  for (const auto& [k, seen] : timing)
    if (!seen) problem = "missing timing " + k;
  if (utts == 0) problem = "no utterance lines";
  return kept;
}

std::string run_capture(const std::string& cmd, int& status) {
  std::string out;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) {
    status = -1;
    return out;
  }
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) out += buf;
  status = pclose(pipe);
  return out;
}

void bench_determinism(const std::string& checkpoint) {
  const std::string cmd = std::string(KERMIT_CLI_PATH) + " bench --model " + checkpoint + " --threads 2";
  int s1 = 0, s2 = 0;
  const std::string a = run_capture(cmd, s1), b = run_capture(cmd, s2);
  std::string p1, p2;
  const auto la = bench_lines(a, p1), lb = bench_lines(b, p2);
  const bool ok = s1 == 0 && s2 == 0 && p1.empty() && p2.empty() && la == lb;
  std::string detail = std::to_string(la.size()) + " result lines identical across two runs";
  if (!ok) detail = "status " + std::to_string(s1) + "/" + std::to_string(s2) + " " + p1 + " " + p2 +
                    (la == lb ? "" : " (runs differ)");
  report(ok, "bench format and determinism", detail);
  std::istringstream in(a);
  for (std::string line; std::getline(in, line);)
    if (line.rfind("summary", 0) == 0 || line.rfind("timing", 0) == 0) std::cout << "      " << line << '\n';
}

}  // namespace

int main() {
  std::cout.setf(std::ios::unitbuf);
  ctc_grid();
  gradient_suite();
  block_mask_equivalence();
  bbt_reconstruction();

  // Desk-scale experiment: default task and model, seeded.
  const SynthTaskSpec task_spec;
  const SynthTask task(task_spec);
  const std::vector<Utterance> train_set = task.generate(2000, 0);
  const std::vector<Utterance> test_set = task.generate(200, 1);
  const std::vector<StreamSample> streams = task.make_streams(test_set, 5, 1);
  const ModelConfig cfg;
  Model model = Model::initialize(cfg, 1);
  const TrainSpec spec;
  std::cout << "      training " << spec.epochs << " epochs on " << train_set.size() << " utterances ("
            << spec.optimizer << ", lr " << spec.learning_rate << ", batch " << spec.batch_size << ")" << std::endl;
  const auto t0 = Clock::now();
  const TrainReport tr = train(model, train_set, spec, [&](std::size_t epoch, const TrainReport& r) {
    if (epoch % 5 == 0 || epoch == 1)
      std::cout << "      epoch " << epoch << " loss " << fmt(r.epoch_loss.back()) << " ctc "
                << fmt(r.epoch_ctc.back()) << " insertion " << fmt(r.epoch_insertion.back()) << " ("
                << fmt(seconds_since(t0)) << " s)" << std::endl;
  });
  const double train_seconds = seconds_since(t0);

  EvalOptions eval;
  eval.stream.endpoint.tau = 8;
  eval.stream.max_iters = cfg.max_iters;
  const Metrics oracle_eval = evaluate_oracle(model, test_set, eval);
  const Metrics stream_eval = evaluate_streaming(model, streams, eval);
  std::cout << "      trained in " << fmt(train_seconds) << " s; " << tr.skipped_ctc
            << " infeasible ctc targets skipped" << std::endl;

  causality(model, streams, eval.stream);
  // 20 streams of 2 utterances each, from the test split
  streaming_equivalence(model, task.make_streams(test_set, 2, 2), eval.stream);

  report(oracle_eval.cer <= 0.05, "desk-scale (a) insertion cer <= 5%",
         "insertion cer " + fmt(100 * oracle_eval.cer) + "% on " + std::to_string(oracle_eval.utterances) +
             " test utterances after " + std::to_string(spec.epochs) + " epochs");
  report(oracle_eval.cer <= oracle_eval.cer_ctc + 0.02, "desk-scale (b) insertion <= ctc + 2 points",
         "insertion " + fmt(100 * oracle_eval.cer) + "% vs ctc greedy " + fmt(100 * oracle_eval.cer_ctc) + "%");
  report(stream_eval.boundary_recall >= 0.9, "desk-scale (c) boundary recall >= 90% at tau=8",
         std::to_string(stream_eval.boundaries_found) + "/" + std::to_string(stream_eval.utterances) +
             " boundaries within 2 blocks (" + fmt(100 * stream_eval.boundary_recall) + "%), streaming cer " +
             fmt(100 * stream_eval.cer) + "%");
  const bool iter_ok = oracle_eval.mean_iterations <= 5 && oracle_eval.mean_forward_passes <= 6 &&
                       stream_eval.mean_iterations <= 5 && stream_eval.mean_forward_passes <= 6;
  report(iter_ok, "desk-scale (d) iterations <= 5, forward passes <= 6",
         "oracle segments: " + fmt(oracle_eval.mean_iterations) + " iterations, " +
             fmt(oracle_eval.mean_forward_passes) + " passes; streaming: " + fmt(stream_eval.mean_iterations) +
             " iterations, " + fmt(stream_eval.mean_forward_passes) + " passes per segment");

  const fs::path dir = fs::temp_directory_path() / "kermit_acceptance";
  fs::create_directories(dir);
  const std::string checkpoint = (dir / "model.txt").string();
  model.save(checkpoint);
  bench_determinism(checkpoint);
  fs::remove_all(dir);

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
