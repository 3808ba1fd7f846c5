#include "kermit/metrics.h"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <mutex>
#include <thread>

#include "kermit/errors.h"
#include "kermit/insertion.h"

namespace kermit {

std::size_t edit_distance(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1] ? 1 : 0)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double cer(std::span<const int> ref, std::span<const int> hyp) {
  if (ref.empty()) throw ConfigError("cer: empty reference");
  return static_cast<double>(edit_distance(ref, hyp)) / static_cast<double>(ref.size());
}

void ErrorTally::add(std::span<const int> ref, std::span<const int> hyp) {
  edits += edit_distance(ref, hyp);
  ref_tokens += ref.size();
}

double ErrorTally::rate() const {
  if (ref_tokens == 0) throw ConfigError("cer: empty reference");
  return static_cast<double>(edits) / static_cast<double>(ref_tokens);
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads == 0) throw ConfigError("thread count must be at least 1");
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&]() {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  const std::size_t extra = std::min(threads, n) > 0 ? std::min(threads, n) - 1 : 0;
  std::vector<std::thread> pool;
  pool.reserve(extra);
  for (std::size_t t = 0; t < extra; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void finish_rtf(Metrics& m, std::size_t raw_frames, double frame_shift_ms) {
  if (!(frame_shift_ms > 0.0)) throw ConfigError("frame shift must be positive");
  m.audio_seconds = static_cast<double>(raw_frames) * frame_shift_ms / 1000.0;
  m.rtf = m.audio_seconds > 0.0 ? m.wall_seconds / m.audio_seconds : 0.0;
}

}  // namespace

Metrics evaluate_oracle(const Model& model, const std::vector<Utterance>& data,
                        const EvalOptions& options) {
  if (data.empty()) throw ConfigError("evaluate: empty dataset");
  std::vector<DecodeResult> results(data.size());
  const auto t0 = Clock::now();
  parallel_for(data.size(), options.threads, [&](std::size_t i) {
    results[i] = decode_insertion(model, data[i].features, options.stream.max_iters,
                                  options.final_ctc_pass);
  });
  Metrics m;
  m.wall_seconds = seconds_since(t0);
  ErrorTally ins, ctc;
  std::size_t raw_frames = 0, iterations = 0, passes = 0;
  const bool use_ctc = options.stream.output == OutputMode::kCtc;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const DecodeResult& r = results[i];
    const std::vector<int>& hyp = use_ctc ? r.ctc_first : r.tokens;
    ins.add(data[i].tokens, hyp);
    ctc.add(data[i].tokens, r.ctc_first);
    m.hypotheses.push_back(hyp);
    m.iteration_counts.push_back(r.iterations);
    m.pass_counts.push_back(r.forward_passes);
    raw_frames += data[i].features.rows();
    iterations += r.iterations;
    passes += r.forward_passes;
    m.max_iterations = std::max(m.max_iterations, r.iterations);
    m.max_forward_passes = std::max(m.max_forward_passes, r.forward_passes);
  }
  m.cer = ins.rate();
  m.cer_ctc = ctc.rate();
  m.utterances = m.segments = data.size();
  m.mean_iterations = static_cast<double>(iterations) / static_cast<double>(data.size());
  m.mean_forward_passes = static_cast<double>(passes) / static_cast<double>(data.size());
  finish_rtf(m, raw_frames, options.frame_shift_ms);
  return m;
}

Metrics evaluate_streaming(const Model& model, const std::vector<StreamSample>& streams,
                           const EvalOptions& options) {
  if (streams.empty()) throw ConfigError("evaluate: empty dataset");
  std::vector<std::vector<SegmentEvent>> events(streams.size());
  const auto t0 = Clock::now();
  parallel_for(streams.size(), options.threads, [&](std::size_t i) {
    events[i] = run_stream(model, streams[i].features, options.stream);
  });
  Metrics m;
  m.wall_seconds = seconds_since(t0);
  const std::size_t s = model.config().subsample;
  const std::size_t tolerance = options.boundary_tolerance_blocks * model.config().block_len;
  ErrorTally tally;
  std::size_t raw_frames = 0, iterations = 0, passes = 0, decoded = 0;
  for (std::size_t k = 0; k < streams.size(); ++k) {
    const StreamSample& st = streams[k];
    const std::size_t n = st.references.size();
    raw_frames += st.features.rows();
    // Region u ends (in raw frames) halfway between speech end u and speech begin u+1.
    std::vector<double> region_end(n);
    for (std::size_t u = 0; u < n; ++u) {
      region_end[u] = u + 1 < n ? 0.5 * static_cast<double>(st.speech_end[u] + st.speech_begin[u + 1])
                                : static_cast<double>(st.features.rows()) + 1.0;
    }
    std::vector<std::vector<int>> hyps(n);
    for (const SegmentEvent& e : events[k]) {
      const double mid = 0.5 * static_cast<double>((e.start_frame + e.end_frame) * s);
      const std::size_t u = static_cast<std::size_t>(
          std::lower_bound(region_end.begin(), region_end.end(), mid) - region_end.begin());
      hyps[std::min(u, n - 1)].insert(hyps[std::min(u, n - 1)].end(), e.transcript.begin(),
                                      e.transcript.end());
      ++m.segments;
      if (!e.transcript.empty() || e.forward_passes > 0) {
        iterations += e.iterations;
        passes += e.forward_passes;
        ++decoded;
        m.max_iterations = std::max(m.max_iterations, e.iterations);
        m.max_forward_passes = std::max(m.max_forward_passes, e.forward_passes);
      }
    }
    for (std::size_t u = 0; u < n; ++u) {
      tally.add(st.references[u], hyps[u]);
      m.hypotheses.push_back(hyps[u]);
      const std::size_t truth = st.speech_end[u] / s;
      const bool found = std::any_of(events[k].begin(), events[k].end(), [&](const SegmentEvent& e) {
        const std::size_t d = e.end_frame > truth ? e.end_frame - truth : truth - e.end_frame;
        return d <= tolerance;
      });
      if (found) ++m.boundaries_found;
    }
    m.utterances += n;
  }
  m.cer = tally.rate();
  m.boundary_recall = static_cast<double>(m.boundaries_found) / static_cast<double>(m.utterances);
  if (decoded > 0) {
    m.mean_iterations = static_cast<double>(iterations) / static_cast<double>(decoded);
    m.mean_forward_passes = static_cast<double>(passes) / static_cast<double>(decoded);
  }
  finish_rtf(m, raw_frames, options.frame_shift_ms);
  return m;
}

Metrics measure_rtf(const Model& model, const std::vector<Utterance>& data,
                    const EvalOptions& options) {
  return evaluate_oracle(model, data, options);
}

}  // namespace kermit
