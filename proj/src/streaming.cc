#include "kermit/streaming.h"

#include <chrono>
#include <sstream>

#include "kermit/ctc.h"
#include "kermit/errors.h"

namespace kermit {

namespace {

void append_rows(Matrix& dst, const Matrix& src, std::size_t begin, std::size_t end) {
  if (begin == end) return;
  if (dst.rows() == 0) {
    dst = slice_rows(src, begin, end);
    return;
  }
  const Matrix parts[] = {dst, slice_rows(src, begin, end)};
  dst = concat_rows(parts);
}

}  // namespace

bool SegmentEvent::same_result(const SegmentEvent& o) const {
  return index == o.index && start_frame == o.start_frame && end_frame == o.end_frame &&
         transcript == o.transcript && iterations == o.iterations &&
         forward_passes == o.forward_passes && forced == o.forced;
}

std::string format_event(const SegmentEvent& e) {
  std::ostringstream out;
  out << e.index << '\t' << e.start_frame << '\t' << e.end_frame << '\t';
  for (std::size_t i = 0; i < e.transcript.size(); ++i) out << (i ? " " : "") << e.transcript[i];
  out << '\t' << e.iterations << '\t' << format_double(e.wall_ms);
  return out.str();
}

StreamDecoder::StreamDecoder(const Model& model, StreamOptions options)
    : model_(model), options_(options) {
  if (options_.endpoint.tau == 0) throw ConfigError("tau must be at least 1");
  if (options_.endpoint.max_segment_frames < model.config().block_len) {
    throw ConfigError("segment length cap must be at least one block");
  }
  if (options_.max_iters == 0) throw ConfigError("iteration budget must be at least 1");
  state_.cache = make_block_cache(model_);
}

void StreamDecoder::start_segment() {
  state_.segment_start = state_.frames_done;
  state_.blank_run = 0;
  state_.segment_has_speech = false;
  state_.segment_raw = Matrix();
  BlockCache fresh;
  fresh.memory = state_.cache.memory;
  fresh.prev.assign(model_.config().layers, Matrix());
  state_.cache = std::move(fresh);
}

std::vector<SegmentEvent> StreamDecoder::push_frames(const Matrix& frames) {
  const ModelConfig& cfg = model_.config();
  if (frames.rows() > 0 && frames.cols() != cfg.feat_dim) {
    throw ShapeError("push_frames: feature width " + std::to_string(frames.cols()) + ", expected " +
                     std::to_string(cfg.feat_dim));
  }
  std::vector<SegmentEvent> events;
  append_rows(state_.pending_raw, frames, 0, frames.rows());
  const std::size_t block_raw = cfg.subsample * cfg.block_len;
  std::size_t consumed = 0;
  while (state_.pending_raw.rows() - consumed >= block_raw) {
    process_block(slice_rows(state_.pending_raw, consumed, consumed + block_raw), events);
    consumed += block_raw;
  }
  if (consumed > 0) {
    state_.pending_raw = slice_rows(state_.pending_raw, consumed, state_.pending_raw.rows());
  }
  return events;
}

std::vector<SegmentEvent> StreamDecoder::finish() {
  const std::size_t s = model_.config().subsample;
  std::vector<SegmentEvent> events;
  const std::size_t usable = (state_.pending_raw.rows() / s) * s;
  if (usable > 0) process_block(slice_rows(state_.pending_raw, 0, usable), events);
  state_.pending_raw = Matrix();
  if (state_.frames_done > state_.segment_start) events.push_back(finalize_segment(true));
  return events;
}

void StreamDecoder::process_block(const Matrix& raw_block, std::vector<SegmentEvent>& events) {
  Matrix x_emb;
  {
    Tape tape(false);
    x_emb = embed_audio(tape, model_, raw_block, state_.frames_done - state_.segment_start).value();
  }
  const Matrix z = forward_frames_causal(model_, x_emb, state_.cache);
  const Matrix log_probs = log_softmax_rows(matmul(z, model_.param("head.ctc").value));
  append_rows(state_.segment_raw, raw_block, 0, raw_block.rows());
  for (std::size_t t = 0; t < log_probs.rows(); ++t) {
    if (static_cast<int>(argmax(log_probs.row(t))) == kCtcBlank) {
      ++state_.blank_run;
    } else {
      state_.blank_run = 0;
      state_.segment_has_speech = true;
    }
  }
  state_.frames_done += log_probs.rows();
  if (state_.segment_has_speech && state_.blank_run >= options_.endpoint.tau) {
    events.push_back(finalize_segment(false));
  } else if (state_.frames_done - state_.segment_start >= options_.endpoint.max_segment_frames) {
    events.push_back(finalize_segment(true));
  }
}

SegmentEvent StreamDecoder::finalize_segment(bool forced) {
  const auto t0 = std::chrono::steady_clock::now();
  SegmentEvent e;
  e.index = state_.next_index++;
  e.start_frame = state_.segment_start;
  e.end_frame = state_.frames_done;
  e.forced = forced;
  if (state_.segment_has_speech && state_.segment_raw.rows() >= model_.config().subsample) {
    const bool want_ctc = options_.output == OutputMode::kCtc;
    DecodeResult r = decode_insertion(model_, state_.segment_raw, options_.max_iters, want_ctc);
    e.transcript = want_ctc ? r.ctc_final : r.tokens;
    e.iterations = r.iterations;
    e.forward_passes = r.forward_passes;
  }
  e.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  state_.emitted.push_back(e);
  start_segment();
  return e;
}

std::vector<SegmentEvent> run_stream(const Model& model, const FeatureSequence& audio,
                                     const StreamOptions& options) {
  StreamDecoder dec(model, options);
  std::vector<SegmentEvent> events = dec.push_frames(audio);
  for (auto& e : dec.finish()) events.push_back(std::move(e));
  return events;
}

}  // namespace kermit
