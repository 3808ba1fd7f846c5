#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "kermit/config.h"
#include "kermit/encoder.h"

namespace kermit {

// Synthetic acoustic task. Every token has a fixed random template vector;
// speaking a token emits `units` copies of it (units drawn from
// [min_units, max_units]), each unit being `frames_per_unit` raw frames with
// independent Gaussian noise. Silence emits low-level noise. With
// frames_per_unit equal to the model's subsample factor, one unit is one
// encoder frame.
struct SynthTaskSpec {
  std::size_t vocab_size = 16;
  std::size_t feat_dim = 16;
  std::size_t min_units = 2;
  std::size_t max_units = 4;
  std::size_t frames_per_unit = 4;
  double noise_std = 0.3;
  double silence_std = 0.05;
  // Silence before and after each utterance, in units.
  std::size_t min_lead = 1;
  std::size_t max_lead = 8;
  std::size_t min_trail = 2;
  std::size_t max_trail = 8;
  // Silence between utterances when building streams, in units.
  std::size_t min_gap = 16;
  std::size_t max_gap = 24;
  std::size_t min_tokens = 1;
  std::size_t max_tokens = 12;
  std::uint64_t seed = 1;

  void validate() const;
};

struct Utterance {
  FeatureSequence features;   // raw frames
  std::vector<int> tokens;    // vocabulary ids
  // Speech span in raw frames, [begin, end).
  std::size_t speech_begin = 0;
  std::size_t speech_end = 0;
  // Raw frame where each token starts (tokens.size() + 1 entries; the last is speech_end).
  std::vector<std::size_t> token_starts;
};

// Several utterances joined by silence gaps.
struct StreamSample {
  FeatureSequence features;
  std::vector<std::vector<int>> references;
  // Raw-frame speech span of each utterance within the stream.
  std::vector<std::size_t> speech_begin;
  std::vector<std::size_t> speech_end;
};

class SynthTask {
 public:
  explicit SynthTask(SynthTaskSpec spec);

  const SynthTaskSpec& spec() const { return spec_; }
  const Matrix& templates() const { return templates_; }

  // Renders a token sequence; `rng` drives durations, padding and noise.
  Utterance render(const std::vector<int>& tokens, Rng& rng, std::size_t lead_units,
                   std::size_t trail_units) const;

  // `count` utterances from a generator seeded with spec.seed ^ stream_id.
  std::vector<Utterance> generate(std::size_t count, std::uint64_t stream_id) const;

  // Joins utterances into streams of `per_stream` utterances each, with
  // silence gaps drawn from [min_gap, max_gap] units.
  std::vector<StreamSample> make_streams(const std::vector<Utterance>& utterances,
                                         std::size_t per_stream, std::uint64_t stream_id) const;

 private:
  Matrix silence(std::size_t frames, Rng& rng) const;

  SynthTaskSpec spec_;
  Matrix templates_;  // vocab_size x feat_dim
};

SynthTaskSpec synth_spec_from(const KeyValues& kv, SynthTaskSpec base = {});

// One utterance per file: first line `T d`, then T lines of d values.
void write_features(const std::string& path, const FeatureSequence& x);
FeatureSequence read_features(const std::string& path);
// Space-separated token ids on one line.
void write_tokens(const std::string& path, const std::vector<int>& tokens);
std::vector<int> read_tokens(const std::string& path);

// A dataset directory holds NAME.feat and NAME.tok per utterance and a
// `manifest.tsv` with one line `NAME <tab> frames <tab> speech_begin <tab>
// speech_end` per utterance. Stream datasets hold NAME.feat per stream and
// `streams.tsv` with one line per utterance: `NAME <tab> speech_begin <tab>
// speech_end <tab> token ids`.
void write_dataset(const std::string& dir, const std::vector<Utterance>& data);
std::vector<Utterance> read_dataset(const std::string& dir);
void write_stream_dataset(const std::string& dir, const std::vector<StreamSample>& streams);
std::vector<StreamSample> read_stream_dataset(const std::string& dir);

}  // namespace kermit
