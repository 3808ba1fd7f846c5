#include "kermit/model.h"

#include <cmath>
#include <fstream>

#include "kermit/config.h"
#include "kermit/errors.h"

namespace kermit {

void ModelConfig::validate() const {
  if (layers == 0) throw ConfigError("layers must be at least 1");
  if (heads == 0 || d_model == 0 || d_model % heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " must be a positive multiple of heads " +
                      std::to_string(heads));
  }
  if (block_len == 0) throw ConfigError("block length must be at least 1");
  if (subsample == 0) throw ConfigError("subsample factor must be at least 1");
  if (feat_dim == 0) throw ConfigError("feature dimension must be at least 1");
  if (vocab_size == 0) throw ConfigError("vocabulary must contain at least one token");
  if (max_iters == 0) throw ConfigError("max decode iterations must be at least 1");
}

int Vocabulary::to_class(int id) const {
  if (id == kBlank || id == kEnd) return 0;
  if (!is_token(id)) throw VocabularyError("token id " + std::to_string(id) + " has no output class");
  return id - kFirstToken + 1;
}

int Vocabulary::from_ctc_class(int cls) const {
  if (cls < 0 || static_cast<std::size_t>(cls) > size_) {
    throw VocabularyError("class " + std::to_string(cls) + " out of range");
  }
  return cls == 0 ? kBlank : cls - 1 + kFirstToken;
}

int Vocabulary::from_insertion_class(int cls) const {
  if (cls < 0 || static_cast<std::size_t>(cls) > size_) {
    throw VocabularyError("class " + std::to_string(cls) + " out of range");
  }
  return cls == 0 ? kEnd : cls - 1 + kFirstToken;
}

std::vector<int> Vocabulary::to_classes(const std::vector<int>& ids) const {
  std::vector<int> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(to_class(id));
  return out;
}

namespace {

struct ParamShape {
  std::string name;
  std::size_t rows, cols;
};

std::vector<ParamShape> param_shapes(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model, ids = cfg.vocab_size + Vocabulary::kFirstToken;
  std::vector<ParamShape> shapes = {
      {"embed.audio", cfg.subsample * cfg.feat_dim, d},
      {"embed.token", ids, d},
      {"head.ctc", d, cfg.vocab_size + 1},
      {"head.token", d, cfg.vocab_size + 1},
      {"head.pos", d, 1},
  };
  for (std::size_t j = 1; j <= cfg.layers; ++j) {
    const std::string p = Model::layer_prefix(j);
    for (const char* w : {"wq", "wk", "wv", "wo"}) shapes.push_back({p + w, d, d});
    shapes.push_back({p + "ffn1", d, 4 * d});
    shapes.push_back({p + "ffn2", 4 * d, d});
    shapes.push_back({p + "norm1", 2, d});
    shapes.push_back({p + "norm2", 2, d});
  }
  return shapes;
}

bool is_norm(const std::string& name) {
  return name.size() > 5 && name.compare(name.size() - 5, 4, "norm") == 0;
}

}  // namespace

std::vector<std::string> expected_param_names(const ModelConfig& cfg) {
  std::vector<std::string> names;
  for (const auto& s : param_shapes(cfg)) names.push_back(s.name);
  return names;
}

Model::Model(ModelConfig cfg, ParamSet params)
    : cfg_(cfg), vocab_(cfg.vocab_size), params_(std::move(params)) {
  cfg_.validate();
  for (const auto& s : param_shapes(cfg_)) {
    auto it = params_.find(s.name);
    if (it == params_.end()) throw FormatError("model: missing parameter '" + s.name + "'");
    const Matrix& v = it->second.value;
    if (v.rows() != s.rows || v.cols() != s.cols) {
      throw ShapeError("model: parameter '" + s.name + "' has shape " + v.shape() + ", expected " +
                       std::to_string(s.rows) + "x" + std::to_string(s.cols));
    }
    if (!all_finite(v)) throw NumericError("model: parameter '" + s.name + "' is not finite");
  }
  if (params_.size() != param_shapes(cfg_).size()) {
    throw FormatError("model: unexpected extra parameters");
  }
}

Model Model::initialize(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParamSet params;
  for (const auto& s : param_shapes(cfg)) {
    Matrix m(s.rows, s.cols);
    if (is_norm(s.name)) {
      for (std::size_t j = 0; j < s.cols; ++j) m(0, j) = 1.0;
    } else {
      const double bound = std::sqrt(6.0 / static_cast<double>(s.rows + s.cols));
      for (double& v : m.values()) v = rng.uniform(-bound, bound);
    }
    params.emplace(s.name, ParamTensor(s.name, std::move(m)));
  }
  return Model(cfg, std::move(params));
}

const ParamTensor& Model::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("model: no parameter '" + name + "'");
  return it->second;
}

void Model::save(const std::string& path) const {
  save_named_arrays(path, param_values(params_));
  KeyValues kv;
  kv.set("layers", std::to_string(cfg_.layers));
  kv.set("heads", std::to_string(cfg_.heads));
  kv.set("d_model", std::to_string(cfg_.d_model));
  kv.set("block_len", std::to_string(cfg_.block_len));
  kv.set("subsample", std::to_string(cfg_.subsample));
  kv.set("feat_dim", std::to_string(cfg_.feat_dim));
  kv.set("vocab_size", std::to_string(cfg_.vocab_size));
  kv.set("max_iters", std::to_string(cfg_.max_iters));
  std::ofstream out(path + ".config");
  if (!out) throw FormatError("cannot write '" + path + ".config'");
  kv.write(out);
}

ModelConfig model_config_from(const KeyValues& kv, ModelConfig cfg) {
  cfg.layers = kv.get_size("layers", cfg.layers);
  cfg.heads = kv.get_size("heads", cfg.heads);
  cfg.d_model = kv.get_size("d_model", cfg.d_model);
  cfg.block_len = kv.get_size("block_len", cfg.block_len);
  cfg.subsample = kv.get_size("subsample", cfg.subsample);
  cfg.feat_dim = kv.get_size("feat_dim", cfg.feat_dim);
  cfg.vocab_size = kv.get_size("vocab_size", cfg.vocab_size);
  cfg.max_iters = kv.get_size("max_iters", cfg.max_iters);
  cfg.validate();
  return cfg;
}

Model Model::load(const std::string& path) {
  const ModelConfig cfg = model_config_from(KeyValues::load(path + ".config"));
  ParamSet params;
  for (auto& [name, m] : load_named_arrays(path)) params.emplace(name, ParamTensor(name, std::move(m)));
  return Model(cfg, std::move(params));
}

}  // namespace kermit
