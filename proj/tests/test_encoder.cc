#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "kermit/encoder.h"
#include "kermit/errors.h"
#include "oracles.h"
#include "test_util.h"

using namespace kermit;
using kermit::testing::random_matrix;

namespace {

ModelConfig tiny_config(std::size_t layers = 2) {
  ModelConfig cfg;
  cfg.layers = layers;
  cfg.heads = 2;
  cfg.d_model = 8;
  cfg.block_len = 2;
  cfg.subsample = 2;
  cfg.feat_dim = 3;
  cfg.vocab_size = 5;
  return cfg;
}

// Random norms so that the oracle exercises gain and bias.
Model tiny_model(std::size_t layers, std::uint64_t seed) {
  Model m = Model::initialize(tiny_config(layers), seed);
  Rng rng(seed + 100);
  for (auto& [name, p] : m.params())
    if (name.find("norm") != std::string::npos)
      for (double& v : p.value.values()) v += 0.3 * rng.normal();
  return m;
}

Matrix layer_norm_oracle(const Matrix& x, const Matrix& gain_bias) {
  Matrix out(x.rows(), x.cols());
  const double d = static_cast<double>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) mean += x(i, j) / d;
    for (std::size_t j = 0; j < x.cols(); ++j) var += (x(i, j) - mean) * (x(i, j) - mean) / d;
    for (std::size_t j = 0; j < x.cols(); ++j)
      out(i, j) = (x(i, j) - mean) / std::sqrt(var + 1e-5) * gain_bias(0, j) + gain_bias(1, j);
  }
  return out;
}

Matrix plus(const Matrix& a, const Matrix& b) {
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

Matrix stack(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() + b.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j);
  for (std::size_t i = 0; i < b.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) out(a.rows() + i, j) = b(i, j);
  return out;
}

Matrix ffn_residual_oracle(const Matrix& x, const Model& m, const std::string& p) {
  Matrix h = oracle::matmul_triple(layer_norm_oracle(x, m.param(p + "norm2").value), m.param(p + "ffn1").value);
  for (double& v : h.values()) v = std::max(v, 0.0);
  return plus(x, oracle::matmul_triple(h, m.param(p + "ffn2").value));
}

// One joint layer written out element by element: frames see their own and
// the previous block plus every token; tokens see everything.
std::pair<Matrix, Matrix> joint_layer_oracle(const Model& m, const Matrix& z, const Matrix& y) {
  const std::string p = "layer1.";
  const Matrix& norm1 = m.param(p + "norm1").value;
  const Matrix all = stack(layer_norm_oracle(z, norm1), layer_norm_oracle(y, norm1));
  const std::size_t keys = all.rows(), frames = z.rows();
  auto mask = oracle::block_mask(frames, m.config().block_len);
  std::vector<std::vector<bool>> allowed(keys, std::vector<bool>(keys, true));
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t j = 0; j < frames; ++j) allowed[t][j] = mask[t][j];
  const Matrix att = oracle::masked_attention(
      all, all, all, m.param(p + "wq").value, m.param(p + "wk").value, m.param(p + "wv").value,
      m.param(p + "wo").value, m.config().heads, allowed);
  const Matrix res = plus(stack(z, y), att);
  const Matrix out = ffn_residual_oracle(res, m, p);
  return {slice_rows(out, 0, frames), slice_rows(out, frames, keys)};
}

Matrix embedded_sos(const Model& m) {
  Tape t;
  const int sos[] = {Vocabulary::kSos};
  return embed_tokens(t, m, sos).value();
}

Matrix static_memory_pass(const Model& m, const Matrix& x_emb) {
  Tape t;
  return forward_frames_static_memory(t, m, t.constant(x_emb), t.constant(embedded_sos(m))).value();
}

Matrix causal_pass(const Model& m, const Matrix& x_emb) {
  BlockCache cache = make_block_cache(m);
  std::vector<Matrix> outs;
  for (const auto& r : block_ranges(x_emb.rows(), m.config().block_len))
    outs.push_back(forward_frames_causal(m, slice_rows(x_emb, r.begin, r.end), cache));
  return concat_rows(outs);
}

}  // namespace

TEST_CASE("embed_audio: lengths and dropped frames") {
  ModelConfig cfg = tiny_config();
  cfg.subsample = 4;
  const Model m = Model::initialize(cfg, 1);
  Rng rng(61);
  const Matrix x = random_matrix(10, 3, rng);
  Tape t;
  CHECK(embed_audio(t, m, slice_rows(x, 0, 8)).rows() == 2);
  CHECK(embed_audio(t, m, x).rows() == 2);
  CHECK(embed_audio(t, m, x).value() == embed_audio(t, m, slice_rows(x, 0, 8)).value());
  CHECK(stack_frames(x, 4).rows() == 2);
  CHECK(stack_frames(x, 4)(1, 3 * 3 + 2) == x(7, 2));
  CHECK_THROWS_AS(embed_audio(t, m, slice_rows(x, 0, 3)), ShapeError);
  CHECK_THROWS_AS(embed_audio(t, m, Matrix(8, 2)), ShapeError);
}

TEST_CASE("embed_audio: identity projection returns input plus positions") {
  ModelConfig cfg = tiny_config();
  cfg.subsample = 1;
  cfg.feat_dim = cfg.d_model;
  Model m = Model::initialize(cfg, 1);
  m.params().at("embed.audio").value = Matrix::identity(cfg.d_model);
  Rng rng(62);
  const Matrix x = random_matrix(5, cfg.d_model, rng);
  Tape t;
  const Matrix got = embed_audio(t, m, x, 7).value();
  const Matrix pe = sinusoidal_encoding(5, cfg.d_model, 7);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < cfg.d_model; ++j) CHECK(std::abs(got(i, j) - pe(i, j) - x(i, j)) <= 1e-15);
}

TEST_CASE("sinusoidal encoding values") {
  const Matrix pe = sinusoidal_encoding(3, 6, 4);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t i = 0; i < 6; i += 2) {
      const double angle = static_cast<double>(4 + r) / std::pow(10000.0, static_cast<double>(i) / 6.0);
      CHECK(std::abs(pe(r, i) - std::sin(angle)) <= 1e-12);
      CHECK(std::abs(pe(r, i + 1) - std::cos(angle)) <= 1e-12);
    }
  CHECK(slice_rows(sinusoidal_encoding(5, 6, 0), 4, 5) == sinusoidal_encoding(1, 6, 4));
}

TEST_CASE("embed_tokens: lookup plus token positions") {
  const Model m = Model::initialize(tiny_config(), 2);
  Tape t;
  const int sos[] = {Vocabulary::kSos};
  CHECK(embed_tokens(t, m, sos).rows() == 1);

  const std::vector<int> ids{Vocabulary::kSos, 5, 5, 8, Vocabulary::kEos};
  const Matrix got = embed_tokens(t, m, ids).value();
  CHECK(slice_rows(got, 1, 2) != slice_rows(got, 2, 3));
  const Matrix& table = m.param("embed.token").value;
  const Matrix pe = sinusoidal_encoding(ids.size(), 8, kTokenPositionOffset);
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(std::abs(got(i, j) - table(static_cast<std::size_t>(ids[i]), j) - pe(i, j)) <= 1e-12);

  for (int bad : {Vocabulary::kBlank, Vocabulary::kEnd, Vocabulary::kFirstToken + 5, -1}) {
    const int one[] = {bad};
    CHECK_THROWS_AS(embed_tokens(t, m, one), VocabularyError);
  }
}

TEST_CASE("forward_joint: shapes and width errors") {
  const Model m = Model::initialize(tiny_config(), 3);
  Rng rng(63);
  Tape t;
  EncoderOutput out = forward_joint(t, m, t.constant(random_matrix(6, 8, rng)), t.constant(random_matrix(3, 8, rng)));
  CHECK(out.h_feat.rows() == 6);
  CHECK(out.h_feat.cols() == 8);
  CHECK(out.h_tok.rows() == 3);
  CHECK(out.h_tok.cols() == 8);
  CHECK_THROWS_AS(forward_joint(t, m, t.constant(Matrix(6, 8)), t.constant(Matrix(3, 7))), ShapeError);
  CHECK_THROWS_AS(forward_joint(t, m, t.constant(Matrix(6, 8)), t.constant(Matrix(0, 8))), ShapeError);
}

TEST_CASE("forward_joint: one layer matches the element-wise composition") {
  const Model m = tiny_model(1, 4);
  Rng rng(64);
  SUBCASE("single block with the <s> memory") {
    const Matrix x = random_matrix(2, 8, rng), y = embedded_sos(m);
    Tape t;
    EncoderOutput out = forward_joint(t, m, t.constant(x), t.constant(y));
    auto [z_want, y_want] = joint_layer_oracle(m, x, y);
    CHECK(max_abs_diff(out.h_feat.value(), z_want) <= 1e-12);
    CHECK(max_abs_diff(out.h_tok.value(), y_want) <= 1e-12);
  }
  SUBCASE("several blocks, a partial tail and three tokens") {
    const Matrix x = random_matrix(7, 8, rng), y = random_matrix(3, 8, rng);
    Tape t;
    EncoderOutput out = forward_joint(t, m, t.constant(x), t.constant(y));
    auto [z_want, y_want] = joint_layer_oracle(m, x, y);
    CHECK(max_abs_diff(out.h_feat.value(), z_want) <= 1e-12);
    CHECK(max_abs_diff(out.h_tok.value(), y_want) <= 1e-12);
  }
}

TEST_CASE("forward_joint: frame and token streams share weights") {
  Model m = tiny_model(2, 5);
  Rng rng(65);
  const Matrix x = random_matrix(4, 8, rng), y = random_matrix(3, 8, rng);
  auto h_tok = [&]() {
    Tape t;
    return forward_joint(t, m, t.constant(x), t.constant(y)).h_tok.value();
  };
  const Matrix before = h_tok();
  m.params().at("layer1.wo").value.fill(0.0);
  CHECK(h_tok() != before);
}

TEST_CASE("causal pass equals the offline static-memory pass, bit for bit") {
  const Model m = tiny_model(3, 6);
  Rng rng(66);
  for (std::size_t frames : {1, 2, 3, 8, 11}) {
    const Matrix x = random_matrix(frames, 8, rng);
    CHECK(causal_pass(m, x) == static_memory_pass(m, x));
  }
  BlockCache cache = make_block_cache(m);
  CHECK(cache.layers() == 3);
  for (const auto& p : cache.prev) CHECK(p.rows() == 0);
  const Matrix first = random_matrix(2, 8, rng);
  CHECK(forward_frames_causal(m, first, cache) == static_memory_pass(m, first));
  CHECK(cache.block_index == 1);
  for (const auto& p : cache.prev) CHECK(p.rows() == 2);
}

TEST_CASE("causal pass: a changed future block never changes earlier outputs") {
  const Model m = tiny_model(2, 7);
  Rng rng(67);
  const Matrix x = random_matrix(10, 8, rng);
  const Matrix base = causal_pass(m, x);
  for (std::size_t b = 1; b < 5; ++b) {
    Matrix y = x;
    for (std::size_t t = 2 * b; t < 10; ++t)
      for (std::size_t j = 0; j < 8; ++j) y(t, j) += 5.0 * rng.normal();
    const Matrix changed = causal_pass(m, y);
    CHECK(slice_rows(changed, 0, 2 * b) == slice_rows(base, 0, 2 * b));
    CHECK(slice_rows(changed, 2 * b, 10) != slice_rows(base, 2 * b, 10));
  }
}

TEST_CASE("causal pass: receptive field spans at most J*B + B frames back") {
  const std::size_t layers = 2, B = 2, reach = layers * B + B;
  const Model m = tiny_model(layers, 8);
  Rng rng(68);
  const Matrix x = random_matrix(16, 8, rng);
  const Matrix base = causal_pass(m, x);
  bool inside_matters = false;
  for (std::size_t u = 0; u < 16; ++u) {
    Matrix y = x;
    for (std::size_t j = 0; j < 8; ++j) y(u, j) += 3.0;
    const Matrix changed = causal_pass(m, y);
    for (std::size_t t = u; t < 16; ++t) {
      if (t - u > reach) CHECK(slice_rows(changed, t, t + 1) == slice_rows(base, t, t + 1));
      else if (slice_rows(changed, t, t + 1) != slice_rows(base, t, t + 1)) inside_matters = true;
    }
  }
  CHECK(inside_matters);
}

TEST_CASE("forward_frames_causal: errors") {
  const Model m = tiny_model(2, 9);
  BlockCache cache = make_block_cache(m);
  CHECK_THROWS_AS(forward_frames_causal(m, Matrix(2, 7), cache), ShapeError);
  CHECK_THROWS_AS(forward_frames_causal(m, Matrix(3, 8), cache), ShapeError);
  BlockCache wrong = cache;
  wrong.prev.pop_back();
  CHECK_THROWS_AS(forward_frames_causal(m, Matrix(2, 8), wrong), ShapeError);
}

TEST_CASE("gradients reach the shared weights through each stream") {
  const Model m = tiny_model(2, 10);
  Rng rng(69);
  const Matrix x = random_matrix(5, 8, rng), y = random_matrix(3, 8, rng);
  for (bool frames : {true, false}) {
    Model local = m;
    zero_grads(local.params());
    Tape t;
    EncoderOutput out = forward_joint(t, local, t.constant(x), t.constant(y));
    t.backward(sum_squares(frames ? out.h_feat : out.h_tok));
    t.accumulate_param_grads(local.params());
    for (const char* name : {"layer1.wq", "layer1.wk", "layer1.wv", "layer1.wo", "layer2.ffn1"}) {
      double norm = 0.0;
      for (double g : local.params().at(name).gradient.values()) norm += g * g;
      INFO(name << (frames ? " via h_feat" : " via h_tok"));
      CHECK(norm > 0.0);
    }
  }
}

TEST_CASE("forward_joint gradient passes grad_check") {
  Model m = tiny_model(2, 11);
  Rng rng(70);
  const Matrix x = random_matrix(10, 3, rng);
  const std::vector<int> ids{Vocabulary::kSos, 6, 4, Vocabulary::kEos};
  const double err = grad_check(
      [&](Tape& t, const ParamSet&) {
        Var xe = embed_audio(t, m, x);
        EncoderOutput out = forward_joint(t, m, xe, embed_tokens(t, m, ids));
        return add(sum_squares(out.h_feat), sum_squares(out.h_tok));
      },
      m.params());
  CHECK(err <= 1e-4);
}

TEST_CASE("model: initialization, names and checkpoint round trip") {
  const ModelConfig cfg = tiny_config();
  const Model a = Model::initialize(cfg, 12), b = Model::initialize(cfg, 12), c = Model::initialize(cfg, 13);
  CHECK(param_values(a.params()) == param_values(b.params()));
  CHECK(param_values(a.params()) != param_values(c.params()));
  std::vector<std::string> names;
  for (const auto& [name, _] : a.params()) names.push_back(name);
  CHECK(names.size() == expected_param_names(cfg).size());
  for (const auto& [name, p] : a.params()) {
    if (name.find("norm") != std::string::npos) {
      for (std::size_t j = 0; j < p.value.cols(); ++j) {
        CHECK(p.value(0, j) == 1.0);
        CHECK(p.value(1, j) == 0.0);
      }
      continue;
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols()));
    for (double v : p.value.values()) CHECK(std::abs(v) <= bound);
  }
  CHECK(a.param("embed.audio").value.rows() == cfg.subsample * cfg.feat_dim);
  CHECK(a.param("embed.token").value.rows() == cfg.vocab_size + 4);
  CHECK(a.param("head.token").value.cols() == cfg.vocab_size + 1);
  CHECK(a.param("layer2.ffn1").value.cols() == 4 * cfg.d_model);

  const auto dir = std::filesystem::temp_directory_path() / "kermit_test_encoder";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "model.txt").string();
  a.save(path);
  const Model loaded = Model::load(path);
  CHECK(param_values(loaded.params()) == param_values(a.params()));
  CHECK(loaded.config().block_len == cfg.block_len);
  CHECK(loaded.config().vocab_size == cfg.vocab_size);

  ParamSet missing = a.params();
  missing.erase("head.pos");
  CHECK_THROWS_AS(Model(cfg, missing), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("model config validation") {
  ModelConfig cfg = tiny_config();
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.max_iters = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  KeyValues kv;
  kv.set("layers", "3");
  kv.set("block_len", "4");
  const ModelConfig read = model_config_from(kv, tiny_config());
  CHECK(read.layers == 3);
  CHECK(read.block_len == 4);
  CHECK(read.d_model == 8);
  kv.set("heads", "5");
  CHECK_THROWS_AS(model_config_from(kv, tiny_config()), ConfigError);
}
