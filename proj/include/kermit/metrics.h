#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "kermit/model.h"
#include "kermit/streaming.h"
#include "kermit/synth.h"

namespace kermit {

// Levenshtein distance with unit costs.
std::size_t edit_distance(std::span<const int> a, std::span<const int> b);

// edit_distance / |ref|. An empty reference is an error.
double cer(std::span<const int> ref, std::span<const int> hyp);

// Corpus-level error: total edits over total reference length.
struct ErrorTally {
  std::size_t edits = 0;
  std::size_t ref_tokens = 0;

  void add(std::span<const int> ref, std::span<const int> hyp);
  double rate() const;
};

struct Metrics {
  double cer = 0.0;      // selected output (insertion unless asked for CTC)
  double cer_ctc = 0.0;  // CTC greedy output of the first pass (oracle mode)
  double rtf = 0.0;
  double wall_seconds = 0.0;
  double audio_seconds = 0.0;
  double mean_iterations = 0.0;
  double mean_forward_passes = 0.0;
  std::size_t max_iterations = 0;
  std::size_t max_forward_passes = 0;
  std::size_t utterances = 0;
  std::size_t segments = 0;
  // Streaming mode: true utterance ends matched by a detected segment end.
  std::size_t boundaries_found = 0;
  double boundary_recall = 0.0;
  // One hypothesis per reference utterance, in dataset order.
  std::vector<std::vector<int>> hypotheses;
  // Oracle mode: per-utterance iteration and forward-pass counts.
  std::vector<std::size_t> iteration_counts;
  std::vector<std::size_t> pass_counts;
};

struct EvalOptions {
  StreamOptions stream;            // endpointing, output mode and iteration budget
  std::size_t threads = 2;
  double frame_shift_ms = 10.0;    // per raw frame
  std::size_t boundary_tolerance_blocks = 2;
  bool final_ctc_pass = false;
};

// Calls fn(i) for i in [0, n) on a pool of `threads` workers. The first
// exception thrown by any call is rethrown after all workers stop.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

// Decodes each utterance on its own (ground-truth segmentation).
Metrics evaluate_oracle(const Model& model, const std::vector<Utterance>& data,
                        const EvalOptions& options = {});

// Runs each stream through the endpointer and decoder. Each segment goes to
// the utterance whose region contains its midpoint, regions being split
// halfway through the silence between utterances; transcripts of segments
// sharing an utterance are concatenated in order.
Metrics evaluate_streaming(const Model& model, const std::vector<StreamSample>& streams,
                           const EvalOptions& options = {});

// Oracle-segment decoding timed end to end: RTF is the total wall time over
// the total audio duration (raw frames times the frame shift, silence
// included).
Metrics measure_rtf(const Model& model, const std::vector<Utterance>& data,
                    const EvalOptions& options = {});

}  // namespace kermit
