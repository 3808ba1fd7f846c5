#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "kermit/config.h"
#include "kermit/tape.h"

namespace kermit {

struct ModelConfig {
  std::size_t layers = 4;      // J
  std::size_t heads = 4;       // H
  std::size_t d_model = 64;
  std::size_t block_len = 8;   // B, in subsampled frames
  std::size_t subsample = 4;   // s, raw frames stacked per encoder frame
  std::size_t feat_dim = 16;   // d
  std::size_t vocab_size = 16; // |V|, excluding reserved symbols
  std::size_t max_iters = 5;   // K

  // Throws ConfigError on an inconsistent configuration.
  void validate() const;
};

// Token ids. Reserved symbols take 0..3, ordinary tokens 4..4+|V|-1.
//
// Both output heads have |V|+1 classes: class 0 is blank (CTC head) or the
// slot terminator (insertion head), class 1+i is ordinary token i.
class Vocabulary {
 public:
  static constexpr int kBlank = 0;
  static constexpr int kSos = 1;
  static constexpr int kEos = 2;
  static constexpr int kEnd = 3;
  static constexpr int kFirstToken = 4;

  explicit Vocabulary(std::size_t size) : size_(size) {}

  std::size_t size() const { return size_; }
  std::size_t id_count() const { return size_ + kFirstToken; }
  std::size_t class_count() const { return size_ + 1; }

  bool is_token(int id) const {
    return id >= kFirstToken && id < kFirstToken + static_cast<int>(size_);
  }
  // Ids accepted by the token embedding: ordinary tokens plus both sentinels.
  bool is_embeddable(int id) const { return is_token(id) || id == kSos || id == kEos; }

  // Token id -> head class (blank and slot terminator both map to 0).
  int to_class(int id) const;
  int from_ctc_class(int cls) const;
  int from_insertion_class(int cls) const;

  std::vector<int> to_classes(const std::vector<int>& ids) const;

 private:
  std::size_t size_;
};

// Parameter arrays, all named as in the checkpoint:
//   embed.audio (s*d x d_model), embed.token (|V|+4 x d_model),
//   layer{j}.{wq,wk,wv,wo} (d_model x d_model), layer{j}.ffn1 (d_model x 4 d_model),
//   layer{j}.ffn2 (4 d_model x d_model), layer{j}.{norm1,norm2} (2 x d_model),
//   head.ctc, head.token (d_model x |V|+1), head.pos (d_model x 1).
class Model {
 public:
  Model(ModelConfig cfg, ParamSet params);

  // Glorot-uniform weights from a seeded generator; norms start at gain 1, bias 0.
  static Model initialize(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }
  const ParamTensor& param(const std::string& name) const;

  static std::string layer_prefix(std::size_t j) { return "layer" + std::to_string(j) + "."; }

  // Writes the named-array checkpoint to `path` and the configuration to
  // `path + ".config"` as key=value lines.
  void save(const std::string& path) const;
  static Model load(const std::string& path);

 private:
  ModelConfig cfg_;
  Vocabulary vocab_;
  ParamSet params_;
};

std::vector<std::string> expected_param_names(const ModelConfig& cfg);

// Reads the model keys (layers, heads, d_model, block_len, subsample,
// feat_dim, vocab_size, max_iters) over `base`.
ModelConfig model_config_from(const KeyValues& kv, ModelConfig base = {});

}  // namespace kermit
