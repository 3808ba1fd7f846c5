#include "kermit/encoder.h"

#include <cmath>

#include "kermit/errors.h"

namespace kermit {

Matrix sinusoidal_encoding(std::size_t rows, std::size_t width, std::size_t first_position) {
  Matrix pe(rows, width);
  for (std::size_t i = 0; i < width; i += 2) {
    const double freq =
        std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(width));
    for (std::size_t r = 0; r < rows; ++r) {
      const double angle = static_cast<double>(first_position + r) * freq;
      pe(r, i) = std::sin(angle);
      if (i + 1 < width) pe(r, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

Matrix stack_frames(const FeatureSequence& x, std::size_t s) {
  if (s == 0) throw ConfigError("subsample factor must be at least 1");
  const std::size_t out_rows = x.rows() / s, d = x.cols();
  Matrix out(out_rows, s * d);
  for (std::size_t r = 0; r < out_rows; ++r)
    std::copy(x.data() + r * s * d, x.data() + (r + 1) * s * d, out.row(r).begin());
  return out;
}

Var embed_audio(Tape& tape, const Model& model, const FeatureSequence& x,
                std::size_t first_position) {
  const ModelConfig& cfg = model.config();
  if (x.cols() != cfg.feat_dim) {
    throw ShapeError("embed_audio: feature width " + std::to_string(x.cols()) + ", expected " +
                     std::to_string(cfg.feat_dim));
  }
  if (x.rows() < cfg.subsample) {
    throw ShapeError("embed_audio: empty input (" + std::to_string(x.rows()) +
                     " frames, subsample factor " + std::to_string(cfg.subsample) + ")");
  }
  Matrix stacked = stack_frames(x, cfg.subsample);
  const std::size_t rows = stacked.rows();
  Var proj = matmul(tape.constant(std::move(stacked)), tape.param(model.param("embed.audio")));
  return add(proj, tape.constant(sinusoidal_encoding(rows, cfg.d_model, first_position)));
}

Var embed_tokens(Tape& tape, const Model& model, std::span<const int> ids) {
  for (int id : ids) {
    if (!model.vocab().is_embeddable(id)) {
      throw VocabularyError("embed_tokens: id " + std::to_string(id) + " is not a token or sentinel");
    }
  }
  Var rows = embedding(tape.param(model.param("embed.token")), ids);
  return add(rows, tape.constant(sinusoidal_encoding(ids.size(), model.config().d_model,
                                                     kTokenPositionOffset)));
}

namespace {

struct LayerWeights {
  AttentionParams att;
  Var ffn1, ffn2, norm1, norm2;
};

LayerWeights bind_layer(Tape& tape, const Model& model, std::size_t j) {
  const std::string p = Model::layer_prefix(j);
  return {bind_attention(tape, model.params(), p, model.config().heads),
          tape.param(model.param(p + "ffn1")), tape.param(model.param(p + "ffn2")),
          tape.param(model.param(p + "norm1")), tape.param(model.param(p + "norm2"))};
}

Var feed_forward_residual(Var x, const LayerWeights& w) {
  Var h = relu(matmul(layer_norm(x, w.norm2), w.ffn1));
  return add(x, matmul(h, w.ffn2));
}

struct Projected {
  Var q, k, v;
};

Projected project(Var normed, const AttentionParams& a) {
  return {matmul(normed, a.wq), matmul(normed, a.wk), matmul(normed, a.wv)};
}

Var cat(std::initializer_list<Var> parts) {
  std::vector<Var> present;
  for (const Var& v : parts)
    if (v.valid() && v.rows() > 0) present.push_back(v);
  return present.size() == 1 ? present.front() : concat_rows(present);
}

// First line: every block attends to [previous block; block; memory keys].
Var frame_attention(const Projected& z, const Projected& mem, std::size_t block_len,
                    const AttentionParams& att) {
  std::vector<Var> outs;
  const auto ranges = block_ranges(z.q.rows(), block_len);
  for (std::size_t b = 0; b < ranges.size(); ++b) {
    const auto& r = ranges[b];
    Var q = slice_rows(z.q, r.begin, r.end);
    Var k_cur = slice_rows(z.k, r.begin, r.end);
    Var v_cur = slice_rows(z.v, r.begin, r.end);
    Var k_prev, v_prev;
    if (b > 0) {
      k_prev = slice_rows(z.k, ranges[b - 1].begin, ranges[b - 1].end);
      v_prev = slice_rows(z.v, ranges[b - 1].begin, ranges[b - 1].end);
    }
    outs.push_back(attend_projected(q, cat({k_prev, k_cur, mem.k}), cat({v_prev, v_cur, mem.v}), att));
  }
  return outs.size() == 1 ? outs.front() : concat_rows(outs);
}

void check_width(Var a, Var b, const char* what) {
  if (a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": stream widths differ (" + a.value().shape() + " vs " +
                     b.value().shape() + ")");
  }
}

}  // namespace

EncoderOutput forward_joint(Tape& tape, const Model& model, Var x_emb, Var c_emb) {
  check_width(x_emb, c_emb, "forward_joint");
  if (x_emb.rows() == 0) throw ShapeError("forward_joint: no frames");
  if (c_emb.rows() == 0) throw ShapeError("forward_joint: empty token stream");
  const ModelConfig& cfg = model.config();
  Var z = x_emb, y = c_emb;
  for (std::size_t j = 1; j <= cfg.layers; ++j) {
    const LayerWeights w = bind_layer(tape, model, j);
    const Projected pz = project(layer_norm(z, w.norm1), w.att);
    const Projected py = project(layer_norm(y, w.norm1), w.att);
    Var z_att = frame_attention(pz, py, cfg.block_len, w.att);
    Var y_att = attend_projected(py.q, concat_rows(std::vector<Var>{pz.k, py.k}),
                                 concat_rows(std::vector<Var>{pz.v, py.v}), w.att);
    z = feed_forward_residual(add(z, z_att), w);
    y = feed_forward_residual(add(y, y_att), w);
  }
  return {z, y};
}

Var forward_frames_static_memory(Tape& tape, const Model& model, Var x_emb, Var memory) {
  check_width(x_emb, memory, "forward_frames_static_memory");
  const ModelConfig& cfg = model.config();
  Var z = x_emb;
  for (std::size_t j = 1; j <= cfg.layers; ++j) {
    const LayerWeights w = bind_layer(tape, model, j);
    const Projected pz = project(layer_norm(z, w.norm1), w.att);
    const Projected pm = project(layer_norm(memory, w.norm1), w.att);
    z = feed_forward_residual(add(z, frame_attention(pz, pm, cfg.block_len, w.att)), w);
  }
  return z;
}

BlockCache make_block_cache(const Model& model) {
  Tape tape(false);
  const int sos[] = {Vocabulary::kSos};
  BlockCache cache;
  cache.memory = embed_tokens(tape, model, sos).value();
  cache.prev.assign(model.config().layers, Matrix());
  return cache;
}

Matrix forward_frames_causal(const Model& model, const Matrix& x_emb_block, BlockCache& cache) {
  const ModelConfig& cfg = model.config();
  if (cache.layers() != cfg.layers) {
    throw ShapeError("forward_frames_causal: cache has " + std::to_string(cache.layers()) +
                     " layers, model has " + std::to_string(cfg.layers));
  }
  if (x_emb_block.cols() != cfg.d_model) {
    throw ShapeError("forward_frames_causal: block width " + std::to_string(x_emb_block.cols()) +
                     ", expected " + std::to_string(cfg.d_model));
  }
  if (x_emb_block.rows() == 0 || x_emb_block.rows() > cfg.block_len) {
    throw ShapeError("forward_frames_causal: block has " + std::to_string(x_emb_block.rows()) +
                     " rows, block length " + std::to_string(cfg.block_len));
  }
  Tape tape(false);
  Var memory = tape.view(cache.memory);
  Var z = tape.view(x_emb_block);
  std::vector<Matrix> inputs;
  inputs.reserve(cfg.layers);
  for (std::size_t j = 1; j <= cfg.layers; ++j) {
    const LayerWeights w = bind_layer(tape, model, j);
    inputs.push_back(z.value());
    const Matrix& prev_in = cache.prev[j - 1];
    const Projected cur = project(layer_norm(z, w.norm1), w.att);
    Projected prev;
    if (prev_in.rows() > 0) prev = project(layer_norm(tape.view(prev_in), w.norm1), w.att);
    const Projected pm = project(layer_norm(memory, w.norm1), w.att);
    Var att = attend_projected(cur.q, cat({prev.k, cur.k, pm.k}), cat({prev.v, cur.v, pm.v}), w.att);
    z = feed_forward_residual(add(z, att), w);
  }
  Matrix out = z.value();
  cache.prev = std::move(inputs);
  ++cache.block_index;
  return out;
}

}  // namespace kermit
