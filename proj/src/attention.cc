#include "kermit/attention.h"

#include <algorithm>
#include <cmath>

#include "kermit/errors.h"

namespace kermit {

namespace {

thread_local std::uint64_t g_score_count = 0;

}  // namespace

std::uint64_t attention_score_count() { return g_score_count; }
void reset_attention_score_count() { g_score_count = 0; }

AttentionParams bind_attention(Tape& tape, const ParamSet& params, const std::string& prefix,
                               std::size_t heads) {
  auto get = [&](const char* n) -> const ParamTensor& {
    auto it = params.find(prefix + n);
    if (it == params.end()) throw ConfigError("missing attention parameter '" + prefix + n + "'");
    return it->second;
  };
  AttentionParams p{tape.param(get("wq")), tape.param(get("wk")), tape.param(get("wv")),
                    tape.param(get("wo")), heads};
  const std::size_t d = p.wq.rows();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  return p;
}

Var attention_core(Var q_proj, Var k_proj, Var v_proj, std::size_t heads) {
  const Matrix& q = q_proj.value();
  const Matrix& k = k_proj.value();
  const Matrix& v = v_proj.value();
  if (k.rows() != v.rows()) {
    throw ShapeError("attention: key rows " + k.shape() + " differ from value rows " + v.shape());
  }
  if (q.cols() != k.cols() || k.cols() != v.cols()) {
    throw ShapeError("attention: widths differ q " + q.shape() + " k " + k.shape() + " v " +
                     v.shape());
  }
  if (k.rows() == 0) throw ShapeError("attention: no keys");
  const std::size_t d = q.cols();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const std::size_t dk = d / heads;
  const std::size_t tq = q.rows(), tk = k.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  g_score_count += static_cast<std::uint64_t>(tq) * tk;

  Matrix out(tq, d);
  std::vector<Matrix> probs(heads, Matrix(tq, tk));
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dk;
    Matrix& p = probs[h];
    for (std::size_t i = 0; i < tq; ++i) {
      const double* qi = q.data() + i * d + c0;
      double* pi = p.data() + i * tk;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < tk; ++j) {
        const double* kj = k.data() + j * d + c0;
        double s = 0.0;
        for (std::size_t c = 0; c < dk; ++c) s += qi[c] * kj[c];
        pi[j] = s * scale;
        mx = std::max(mx, pi[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < tk; ++j) {
        pi[j] = std::exp(pi[j] - mx);
        sum += pi[j];
      }
      const double inv = 1.0 / sum;
      for (std::size_t j = 0; j < tk; ++j) pi[j] *= inv;
      double* oi = out.data() + i * d + c0;
      for (std::size_t j = 0; j < tk; ++j) {
        const double* vj = v.data() + j * d + c0;
        const double w = pi[j];
        for (std::size_t c = 0; c < dk; ++c) oi[c] += w * vj[c];
      }
    }
  }

  Tape& t = *q_proj.tape();
  return t.record(
      std::move(out), {q_proj, k_proj, v_proj},
      [q_proj, k_proj, v_proj, heads, scale, probs = std::move(probs)](Tape& t, const Matrix& g,
                                                                       const Matrix&) {
        const Matrix& q = q_proj.value();
        const Matrix& k = k_proj.value();
        const Matrix& v = v_proj.value();
        const std::size_t d = q.cols(), dk = d / heads, tq = q.rows(), tk = k.rows();
        Matrix dq(tq, d), dkm(tk, d), dv(tk, d);
        std::vector<double> dp(tk);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t c0 = h * dk;
          const Matrix& p = probs[h];
          for (std::size_t i = 0; i < tq; ++i) {
            const double* gi = g.data() + i * d + c0;
            const double* pi = p.data() + i * tk;
            double dot = 0.0;
            for (std::size_t j = 0; j < tk; ++j) {
              const double* vj = v.data() + j * d + c0;
              double s = 0.0;
              for (std::size_t c = 0; c < dk; ++c) s += gi[c] * vj[c];
              dp[j] = s;
              dot += s * pi[j];
              double* dvj = dv.data() + j * d + c0;
              for (std::size_t c = 0; c < dk; ++c) dvj[c] += pi[j] * gi[c];
            }
            const double* qi = q.data() + i * d + c0;
            double* dqi = dq.data() + i * d + c0;
            for (std::size_t j = 0; j < tk; ++j) {
              const double ds = pi[j] * (dp[j] - dot) * scale;
              if (ds == 0.0) continue;
              const double* kj = k.data() + j * d + c0;
              double* dkj = dkm.data() + j * d + c0;
              for (std::size_t c = 0; c < dk; ++c) {
                dqi[c] += ds * kj[c];
                dkj[c] += ds * qi[c];
              }
            }
          }
        }
        t.accumulate(q_proj, dq);
        t.accumulate(k_proj, dkm);
        t.accumulate(v_proj, dv);
      });
}

Var attend_projected(Var q_proj, Var k_proj, Var v_proj, const AttentionParams& p) {
  return matmul(attention_core(q_proj, k_proj, v_proj, p.heads), p.wo);
}

Var multi_head(Var q, Var k, Var v, const AttentionParams& p) {
  if (k.rows() != v.rows()) {
    throw ShapeError("multi_head: key rows " + k.value().shape() + " differ from value rows " +
                     v.value().shape());
  }
  return attend_projected(matmul(q, p.wq), matmul(k, p.wk), matmul(v, p.wv), p);
}

Var self_attention(Var q, const AttentionParams& p) { return multi_head(q, q, q, p); }

std::vector<BlockRange> block_ranges(std::size_t rows, std::size_t block_len) {
  if (block_len == 0) throw ConfigError("block length must be at least 1");
  std::vector<BlockRange> out;
  for (std::size_t b = 0; b < rows; b += block_len) out.push_back({b, std::min(rows, b + block_len)});
  return out;
}

std::vector<Var> block_partition(Var q, std::size_t block_len) {
  if (q.rows() == 0) throw ShapeError("block_partition: empty input");
  std::vector<Var> out;
  for (const auto& r : block_ranges(q.rows(), block_len)) out.push_back(slice_rows(q, r.begin, r.end));
  return out;
}

namespace {

Var keys_of(std::initializer_list<Var> parts) {
  std::vector<Var> present;
  for (const Var& v : parts)
    if (v.valid() && v.rows() > 0) present.push_back(v);
  if (present.size() == 1) return present.front();
  return concat_rows(present);
}

}  // namespace

Var block_sa(Var q_block, Var q_prev, const AttentionParams& p) {
  Var kv = keys_of({q_prev, q_block});
  return multi_head(q_block, kv, kv, p);
}

Var ext_block_sa(Var q_block, Var q_prev, Var memory, const AttentionParams& p) {
  if (memory.valid() && memory.rows() > 0 && memory.cols() != q_block.cols()) {
    throw ShapeError("ext_block_sa: memory " + memory.value().shape() +
                     " does not match block width " + std::to_string(q_block.cols()));
  }
  Var kv = keys_of({q_prev, q_block, memory});
  return multi_head(q_block, kv, kv, p);
}

}  // namespace kermit
