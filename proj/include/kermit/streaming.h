#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "kermit/encoder.h"
#include "kermit/insertion.h"
#include "kermit/model.h"

namespace kermit {

struct EndpointConfig {
  std::size_t tau = 8;                   // blank-run threshold, encoder frames
  std::size_t max_segment_frames = 512;  // forced cut, encoder frames
};

enum class OutputMode { kInsertion, kCtc };

struct StreamOptions {
  EndpointConfig endpoint;
  OutputMode output = OutputMode::kInsertion;
  std::size_t max_iters = 5;
};

// Frames are in encoder (subsampled) units; segment r covers [start, end).
struct SegmentEvent {
  std::size_t index = 0;
  std::size_t start_frame = 0;
  std::size_t end_frame = 0;
  std::vector<int> transcript;
  std::size_t iterations = 0;
  std::size_t forward_passes = 0;
  double wall_ms = 0.0;
  bool forced = false;  // cut by the length cap or the end of the stream

  // Equality of everything except the wall time.
  bool same_result(const SegmentEvent& o) const;
};

// `r \t start \t end \t transcript \t iterations \t wall_ms`; the transcript
// is space-separated token ids.
std::string format_event(const SegmentEvent& e);

struct StreamState {
  BlockCache cache;
  std::size_t blank_run = 0;
  std::size_t segment_start = 0;    // encoder frame index
  std::size_t frames_done = 0;      // encoder frames processed so far
  bool segment_has_speech = false;  // a non-blank argmax was seen in this segment
  Matrix pending_raw;               // raw frames not yet forming a block
  Matrix segment_raw;               // raw frames of the open segment
  std::size_t next_index = 0;
  std::vector<SegmentEvent> emitted;
};

// Causal segmentation and per-segment decoding of one audio stream. Each
// full block of s*B raw frames goes through the frame-only causal pass and
// the CTC head; a run of at least tau blank argmaxes ending at a block
// boundary closes the segment, which is then decoded with the full
// two-stream pass. Each new segment restarts the causal cache and the
// positional index.
class StreamDecoder {
 public:
  StreamDecoder(const Model& model, StreamOptions options);

  // Buffers `frames` (any number of raw rows) and returns the events
  // completed by them, in order.
  std::vector<SegmentEvent> push_frames(const Matrix& frames);

  // Processes what is left (a trailing partial block) and closes the last
  // segment if it has any frames.
  std::vector<SegmentEvent> finish();

  const StreamState& state() const { return state_; }
  const StreamOptions& options() const { return options_; }

 private:
  void process_block(const Matrix& raw_block, std::vector<SegmentEvent>& events);
  SegmentEvent finalize_segment(bool forced);
  void start_segment();

  const Model& model_;
  StreamOptions options_;
  StreamState state_;
};

// Pushes the whole signal and flushes.
std::vector<SegmentEvent> run_stream(const Model& model, const FeatureSequence& audio,
                                     const StreamOptions& options);

}  // namespace kermit
