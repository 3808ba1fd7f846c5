// Command-line front end: synthetic data, training, decoding, streaming,
// benchmarking and gradient checks.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "kermit/errors.h"
#include "kermit/insertion.h"
#include "kermit/metrics.h"
#include "kermit/model.h"
#include "kermit/streaming.h"
#include "kermit/synth.h"
#include "kermit/train.h"
#include "kermit/verify.h"

namespace {

using namespace kermit;

struct CommonFlags {
  std::string config_path;
  std::optional<std::int64_t> seed;
  std::optional<std::size_t> tau;
  std::optional<std::size_t> block_len;
  std::optional<std::size_t> iters;
  std::optional<double> lambda;
  std::optional<std::size_t> threads;
  std::optional<std::string> output;
};

void add_common(CLI::App& app, CommonFlags& f) {
  app.add_option("--config", f.config_path, "flat key=value configuration file");
  app.add_option("--seed", f.seed, "seed for data, initialization and training");
  app.add_option("--tau", f.tau, "blank-run endpoint threshold in encoder frames");
  app.add_option("--block-len", f.block_len, "block length B in encoder frames");
  app.add_option("--iters", f.iters, "decode iteration budget");
  app.add_option("--lambda", f.lambda, "weight of the CTC loss term");
  app.add_option("--threads", f.threads, "evaluation worker threads");
  app.add_option("--output", f.output, "segment output: insertion or ctc")
      ->check(CLI::IsMember({"insertion", "ctc"}));
}

// Config file first, then command-line overrides.
KeyValues resolve(const CommonFlags& f) {
  KeyValues kv = f.config_path.empty() ? KeyValues{} : KeyValues::load(f.config_path);
  if (f.seed) kv.set("seed", std::to_string(*f.seed));
  if (f.tau) kv.set("tau", std::to_string(*f.tau));
  if (f.block_len) kv.set("block_len", std::to_string(*f.block_len));
  if (f.iters) kv.set("max_iters", std::to_string(*f.iters));
  if (f.lambda) kv.set("lambda", format_double(*f.lambda));
  if (f.threads) kv.set("threads", std::to_string(*f.threads));
  if (f.output) kv.set("output", *f.output);
  return kv;
}

SynthTaskSpec synth_spec(const KeyValues& kv) {
  SynthTaskSpec s;
  const ModelConfig cfg = model_config_from(kv);
  s.vocab_size = cfg.vocab_size;
  s.feat_dim = cfg.feat_dim;
  s.frames_per_unit = cfg.subsample;
  return synth_spec_from(kv, s);
}

EvalOptions eval_options(const KeyValues& kv, const ModelConfig& cfg) {
  EvalOptions o;
  o.stream.endpoint.tau = kv.get_size("tau", o.stream.endpoint.tau);
  o.stream.endpoint.max_segment_frames =
      kv.get_size("max_segment_frames", o.stream.endpoint.max_segment_frames);
  o.stream.max_iters = kv.get_size("max_iters", cfg.max_iters);
  const std::string output = kv.get_string("output", "insertion");
  if (output == "insertion") {
    o.stream.output = OutputMode::kInsertion;
  } else if (output == "ctc") {
    o.stream.output = OutputMode::kCtc;
  } else {
    throw ConfigError("output must be 'insertion' or 'ctc', got '" + output + "'");
  }
  o.threads = kv.get_size("threads", o.threads);
  o.frame_shift_ms = kv.get_double("frame_shift_ms", o.frame_shift_ms);
  if (o.threads == 0) throw ConfigError("threads must be at least 1");
  if (o.stream.endpoint.tau == 0) throw ConfigError("tau must be at least 1");
  return o;
}

// Loads a checkpoint and applies block length / iteration overrides.
Model load_model(const std::string& path, const KeyValues& kv) {
  Model m = Model::load(path);
  ModelConfig cfg = m.config();
  cfg.block_len = kv.get_size("block_len", cfg.block_len);
  cfg.max_iters = kv.get_size("max_iters", cfg.max_iters);
  if (cfg.block_len == m.config().block_len && cfg.max_iters == m.config().max_iters) return m;
  return Model(cfg, m.params());
}

std::string join_ids(const std::vector<int>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? " " : "") + std::to_string(ids[i]);
  return s;
}

int cmd_synth(const KeyValues& kv, const std::string& out_dir, std::size_t count,
              std::uint64_t split, std::size_t per_stream) {
  const SynthTask task(synth_spec(kv));
  const std::vector<Utterance> data = task.generate(count, split);
  if (per_stream > 0) {
    const auto streams = task.make_streams(data, per_stream, split);
    write_stream_dataset(out_dir, streams);
    std::cout << "wrote " << streams.size() << " streams (" << data.size() << " utterances) to "
              << out_dir << '\n';
  } else {
    write_dataset(out_dir, data);
    std::cout << "wrote " << data.size() << " utterances to " << out_dir << '\n';
  }
  return 0;
}

int cmd_train(const KeyValues& kv, const std::string& data_dir, const std::string& out) {
  const ModelConfig cfg = model_config_from(kv);
  TrainSpec spec = train_spec_from(kv);
  spec.checkpoint_path = out;
  const std::vector<Utterance> data =
      data_dir.empty() ? SynthTask(synth_spec(kv)).generate(kv.get_size("train_count", 2000), 0)
                       : read_dataset(data_dir);
  const auto seed = static_cast<std::uint64_t>(kv.get_int("seed", 1));
  Model model = Model::initialize(cfg, seed);
  std::ofstream curve(out + ".loss.tsv");
  if (!curve) throw FormatError("cannot write '" + out + ".loss.tsv'");
  curve << "epoch\tloss\tctc\tinsertion\n";
  const TrainReport report = train(model, data, spec, [&](std::size_t epoch, const TrainReport& r) {
    const std::string line = std::to_string(epoch) + '\t' + format_double(r.epoch_loss.back()) +
                             '\t' + format_double(r.epoch_ctc.back()) + '\t' +
                             format_double(r.epoch_insertion.back());
    curve << line << '\n' << std::flush;
    std::cout << "epoch\t" << line << std::endl;
  });
  std::cout << "steps\t" << report.steps << "\nskipped_ctc\t" << report.skipped_ctc
            << "\ncheckpoint\t" << out << '\n';
  return 0;
}

int cmd_decode(const KeyValues& kv, const std::string& model_path, const std::string& data_dir,
               const std::vector<std::string>& files) {
  const Model model = load_model(model_path, kv);
  const EvalOptions opts = eval_options(kv, model.config());
  if (!data_dir.empty()) {
    const std::vector<Utterance> data = read_dataset(data_dir);
    const Metrics m = evaluate_oracle(model, data, opts);
    for (std::size_t i = 0; i < data.size(); ++i) {
      std::cout << i << '\t' << join_ids(m.hypotheses[i]) << '\t' << m.iteration_counts[i] << '\n';
    }
    std::cout << "cer\t" << format_double(m.cer) << "\ncer_ctc\t" << format_double(m.cer_ctc) << '\n';
    return 0;
  }
  if (files.empty()) throw ConfigError("decode: give --data DIR or feature files");
  for (const std::string& f : files) {
    const DecodeResult r = decode_insertion(model, read_features(f), opts.stream.max_iters);
    const std::vector<int>& hyp = opts.stream.output == OutputMode::kCtc ? r.ctc_first : r.tokens;
    std::cout << f << '\t' << join_ids(hyp) << '\t' << r.iterations << '\n';
  }
  return 0;
}

int cmd_stream(const KeyValues& kv, const std::string& model_path, const std::string& file) {
  const Model model = load_model(model_path, kv);
  const EvalOptions opts = eval_options(kv, model.config());
  StreamDecoder decoder(model, opts.stream);
  auto emit = [](const std::vector<SegmentEvent>& events) {
    for (const auto& e : events) std::cout << format_event(e) << '\n';
    std::cout << std::flush;
  };
  emit(decoder.push_frames(read_features(file)));
  emit(decoder.finish());
  return 0;
}

int cmd_bench(const KeyValues& kv, const std::string& model_path, const std::string& data_dir) {
  const Model model = load_model(model_path, kv);
  const EvalOptions opts = eval_options(kv, model.config());
  std::vector<Utterance> data;
  if (data_dir.empty()) {
    KeyValues synth_kv = kv;
    synth_kv.set("vocab_size", std::to_string(model.config().vocab_size));
    synth_kv.set("feat_dim", std::to_string(model.config().feat_dim));
    synth_kv.set("subsample", std::to_string(model.config().subsample));
    data = SynthTask(synth_spec(synth_kv)).generate(kv.get_size("test_count", 200), 1);
  } else {
    data = read_dataset(data_dir);
  }
  // Warm-up pass so the timed run does not pay for first-touch allocation.
  decode_insertion(model, data.front().features, opts.stream.max_iters);
  const Metrics m = measure_rtf(model, data, opts);
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::cout << "utt\t" << i << '\t' << m.iteration_counts[i] << '\t' << m.pass_counts[i] << '\t'
              << join_ids(m.hypotheses[i]) << '\n';
  }
  std::cout << "summary\tutterances\t" << m.utterances << '\n'
            << "summary\tcer\t" << format_double(m.cer) << '\n'
            << "summary\tcer_ctc\t" << format_double(m.cer_ctc) << '\n'
            << "summary\tmean_iterations\t" << format_double(m.mean_iterations) << '\n'
            << "summary\tmax_iterations\t" << m.max_iterations << '\n'
            << "summary\tmean_forward_passes\t" << format_double(m.mean_forward_passes) << '\n'
            << "summary\tmax_forward_passes\t" << m.max_forward_passes << '\n'
            << "timing\tthreads\t" << opts.threads << '\n'
            << "timing\twall_seconds\t" << format_double(m.wall_seconds) << '\n'
            << "timing\taudio_seconds\t" << format_double(m.audio_seconds) << '\n'
            << "timing\trtf\t" << format_double(m.rtf) << '\n';
  return 0;
}

int cmd_gradcheck(const KeyValues& kv) {
  const double tolerance = kv.get_double("gradcheck_tolerance", 1e-4);
  const auto entries =
      run_gradcheck_suite(static_cast<std::uint64_t>(kv.get_int("seed", 1)),
                          kv.get_double("gradcheck_epsilon", 1e-5));
  bool ok = true;
  for (const auto& e : entries) {
    const bool pass = e.max_rel_error <= tolerance;
    ok = ok && pass;
    std::cout << (pass ? "ok  " : "FAIL") << '\t' << e.name << '\t' << format_double(e.max_rel_error)
              << '\n';
  }
  if (!ok) throw NumericError("gradient check exceeded tolerance " + format_double(tolerance));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Insertion-based non-autoregressive recognizer with joint CTC and streaming"};
  app.require_subcommand(1);
  CommonFlags flags;

  std::string out_dir, data_dir, model_path, out_path, stream_file;
  std::vector<std::string> files;
  std::size_t count = 100, per_stream = 0;
  std::uint64_t split = 0;

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
  add_common(*synth, flags);
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--count", count, "number of utterances");
  synth->add_option("--split", split, "generator stream id (0 train, 1 test)");
  synth->add_option("--per-stream", per_stream, "join this many utterances per stream");

  auto* train_cmd = app.add_subcommand("train", "train a model");
  add_common(*train_cmd, flags);
  train_cmd->add_option("--data", data_dir, "dataset directory (default: synthesize)");
  train_cmd->add_option("--out", out_path, "checkpoint path")->required();

  auto* decode = app.add_subcommand("decode", "decode given segments");
  add_common(*decode, flags);
  decode->add_option("--model", model_path, "checkpoint path")->required();
  decode->add_option("--data", data_dir, "dataset directory");
  decode->add_option("files", files, "feature files");

  auto* stream = app.add_subcommand("stream", "segment and decode an unsegmented stream");
  add_common(*stream, flags);
  stream->add_option("--model", model_path, "checkpoint path")->required();
  stream->add_option("file", stream_file, "feature file")->required();

  auto* bench = app.add_subcommand("bench", "RTF and iteration report");
  add_common(*bench, flags);
  bench->add_option("--model", model_path, "checkpoint path")->required();
  bench->add_option("--data", data_dir, "dataset directory (default: synthesize)");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  add_common(*gradcheck, flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    const KeyValues kv = resolve(flags);
    if (*synth) return cmd_synth(kv, out_dir, count, split, per_stream);
    if (*train_cmd) return cmd_train(kv, data_dir, out_path);
    if (*decode) return cmd_decode(kv, model_path, data_dir, files);
    if (*stream) return cmd_stream(kv, model_path, stream_file);
    if (*bench) return cmd_bench(kv, model_path, data_dir);
    if (*gradcheck) return cmd_gradcheck(kv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
