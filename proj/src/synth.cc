#include "kermit/synth.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "kermit/errors.h"
#include "kermit/model.h"

namespace kermit {

void SynthTaskSpec::validate() const {
  if (vocab_size < 2) throw ConfigError("synthetic task needs at least 2 tokens");
  if (feat_dim == 0) throw ConfigError("feature dimension must be at least 1");
  if (min_units == 0 || min_units > max_units) throw ConfigError("bad units-per-token range");
  if (frames_per_unit == 0) throw ConfigError("frames per unit must be at least 1");
  if (min_lead > max_lead || min_trail > max_trail || min_gap > max_gap) {
    throw ConfigError("bad silence range");
  }
  if (min_tokens == 0 || min_tokens > max_tokens) throw ConfigError("bad utterance length range");
  if (noise_std < 0.0 || silence_std < 0.0) throw ConfigError("noise must be non-negative");
}

SynthTask::SynthTask(SynthTaskSpec spec) : spec_(spec) {
  spec_.validate();
  Rng rng(spec_.seed * 0x9e3779b97f4a7c15ULL + 17);
  templates_ = Matrix(spec_.vocab_size, spec_.feat_dim);
  for (std::size_t v = 0; v < spec_.vocab_size; ++v) {
    bool distinct = false;
    while (!distinct) {
      for (double& x : templates_.row(v)) x = rng.normal();
      distinct = true;
      for (std::size_t u = 0; u < v && distinct; ++u) {
        double dist = 0.0;
        for (std::size_t j = 0; j < spec_.feat_dim; ++j) {
          const double diff = templates_(u, j) - templates_(v, j);
          dist += diff * diff;
        }
        distinct = dist > 1e-6;
      }
    }
  }
}

Matrix SynthTask::silence(std::size_t frames, Rng& rng) const {
  Matrix m(frames, spec_.feat_dim);
  for (double& v : m.values()) v = spec_.silence_std * rng.normal();
  return m;
}

Utterance SynthTask::render(const std::vector<int>& tokens, Rng& rng, std::size_t lead_units,
                            std::size_t trail_units) const {
  const std::size_t fpu = spec_.frames_per_unit;
  std::vector<std::size_t> units(tokens.size());
  std::size_t total_units = lead_units + trail_units;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < Vocabulary::kFirstToken ||
        tokens[i] >= Vocabulary::kFirstToken + static_cast<int>(spec_.vocab_size)) {
      throw VocabularyError("synth: token id " + std::to_string(tokens[i]) + " not in vocabulary");
    }
    units[i] = rng.uniform_int(spec_.min_units, spec_.max_units);
    total_units += units[i];
  }
  Utterance u;
  u.tokens = tokens;
  u.features = Matrix(total_units * fpu, spec_.feat_dim);
  std::size_t row = 0;
  auto put_silence = [&](std::size_t n) {
    const Matrix s = silence(n, rng);
    std::copy(s.data(), s.data() + s.size(), u.features.row(row).begin());
    row += n;
  };
  put_silence(lead_units * fpu);
  u.speech_begin = row;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    u.token_starts.push_back(row);
    const auto tmpl = templates_.row(static_cast<std::size_t>(tokens[i] - Vocabulary::kFirstToken));
    for (std::size_t f = 0; f < units[i] * fpu; ++f, ++row) {
      auto dst = u.features.row(row);
      for (std::size_t j = 0; j < spec_.feat_dim; ++j) dst[j] = tmpl[j] + spec_.noise_std * rng.normal();
    }
  }
  u.speech_end = row;
  u.token_starts.push_back(row);
  if (trail_units > 0) put_silence(trail_units * fpu);
  return u;
}

std::vector<Utterance> SynthTask::generate(std::size_t count, std::uint64_t stream_id) const {
  Rng rng(spec_.seed ^ (stream_id * 0xd1b54a32d192ed03ULL + 1));
  std::vector<Utterance> out;
  out.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    const std::size_t len = rng.uniform_int(spec_.min_tokens, spec_.max_tokens);
    std::vector<int> tokens;
    // Adjacent repeats are excluded: consecutive identical templates carry
    // no boundary and could not be told apart from one long token.
    while (tokens.size() < len) {
      const int t = Vocabulary::kFirstToken + static_cast<int>(rng.uniform_int(0, spec_.vocab_size - 1));
      if (!tokens.empty() && tokens.back() == t) continue;
      tokens.push_back(t);
    }
    const std::size_t lead = rng.uniform_int(spec_.min_lead, spec_.max_lead);
    const std::size_t trail = rng.uniform_int(spec_.min_trail, spec_.max_trail);
    out.push_back(render(tokens, rng, lead, trail));
  }
  return out;
}

std::vector<StreamSample> SynthTask::make_streams(const std::vector<Utterance>& utterances,
                                                  std::size_t per_stream,
                                                  std::uint64_t stream_id) const {
  if (per_stream == 0) throw ConfigError("make_streams: per_stream must be at least 1");
  Rng rng(spec_.seed ^ (stream_id * 0x8cb92ba72f3d8dd7ULL + 3));
  const std::size_t fpu = spec_.frames_per_unit;
  std::vector<StreamSample> streams;
  for (std::size_t first = 0; first < utterances.size(); first += per_stream) {
    const std::size_t last = std::min(utterances.size(), first + per_stream);
    std::vector<Matrix> parts;
    StreamSample s;
    std::size_t row = 0;
    auto add_gap = [&]() {
      const std::size_t n = rng.uniform_int(spec_.min_gap, spec_.max_gap) * fpu;
      parts.push_back(silence(n, rng));
      row += n;
    };
    add_gap();
    for (std::size_t i = first; i < last; ++i) {
      const Utterance& u = utterances[i];
      const Matrix speech = slice_rows(u.features, u.speech_begin, u.speech_end);
      s.references.push_back(u.tokens);
      s.speech_begin.push_back(row);
      s.speech_end.push_back(row + speech.rows());
      row += speech.rows();
      parts.push_back(speech);
      add_gap();
    }
    s.features = concat_rows(parts);
    streams.push_back(std::move(s));
  }
  return streams;
}

SynthTaskSpec synth_spec_from(const KeyValues& kv, SynthTaskSpec s) {
  s.vocab_size = kv.get_size("vocab_size", s.vocab_size);
  s.feat_dim = kv.get_size("feat_dim", s.feat_dim);
  s.min_units = kv.get_size("min_units", s.min_units);
  s.max_units = kv.get_size("max_units", s.max_units);
  s.frames_per_unit = kv.get_size("frames_per_unit", s.frames_per_unit);
  s.noise_std = kv.get_double("noise_std", s.noise_std);
  s.silence_std = kv.get_double("silence_std", s.silence_std);
  s.min_lead = kv.get_size("min_lead", s.min_lead);
  s.max_lead = kv.get_size("max_lead", s.max_lead);
  s.min_trail = kv.get_size("min_trail", s.min_trail);
  s.max_trail = kv.get_size("max_trail", s.max_trail);
  s.min_gap = kv.get_size("min_gap", s.min_gap);
  s.max_gap = kv.get_size("max_gap", s.max_gap);
  s.min_tokens = kv.get_size("min_tokens", s.min_tokens);
  s.max_tokens = kv.get_size("max_tokens", s.max_tokens);
  s.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<std::int64_t>(s.seed)));
  s.validate();
  return s;
}

void write_features(const std::string& path, const FeatureSequence& x) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out << x.rows() << ' ' << x.cols() << '\n';
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) out << (j ? " " : "") << format_double(x(i, j));
    out << '\n';
  }
}

FeatureSequence read_features(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path + "'");
  long long t = -1, d = -1;
  if (!(in >> t >> d) || t < 0 || d <= 0) throw FormatError("'" + path + "': bad header");
  Matrix x(static_cast<std::size_t>(t), static_cast<std::size_t>(d));
  for (double& v : x.values()) {
    if (!(in >> v)) throw FormatError("'" + path + "': truncated feature data");
  }
  return x;
}

void write_tokens(const std::string& path, const std::vector<int>& tokens) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  for (std::size_t i = 0; i < tokens.size(); ++i) out << (i ? " " : "") << tokens[i];
  out << '\n';
}

std::vector<int> read_tokens(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::vector<int> out;
  int v;
  while (in >> v) out.push_back(v);
  if (!in.eof()) throw FormatError("'" + path + "': bad token id");
  return out;
}

namespace {

std::string item_name(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%05zu", prefix, i);
  return buf;
}

std::filesystem::path ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FormatError("cannot create directory '" + dir + "': " + ec.message());
  return dir;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t begin = 0;
  for (;;) {
    const std::size_t tab = line.find('\t', begin);
    out.push_back(line.substr(begin, tab - begin));
    if (tab == std::string::npos) return out;
    begin = tab + 1;
  }
}

std::size_t parse_count(const std::string& text, const std::string& where) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != text.size()) throw FormatError(where + ": bad number '" + text + "'");
  return static_cast<std::size_t>(v);
}

std::vector<int> parse_ids(const std::string& text, const std::string& where) {
  std::istringstream in(text);
  std::vector<int> out;
  int v;
  while (in >> v) out.push_back(v);
  if (!in.eof()) throw FormatError(where + ": bad token id");
  return out;
}

}  // namespace

void write_dataset(const std::string& dir, const std::vector<Utterance>& data) {
  const auto root = ensure_dir(dir);
  std::ofstream manifest(root / "manifest.tsv");
  if (!manifest) throw FormatError("cannot write manifest in '" + dir + "'");
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::string name = item_name("utt", i);
    write_features((root / (name + ".feat")).string(), data[i].features);
    write_tokens((root / (name + ".tok")).string(), data[i].tokens);
    manifest << name << '\t' << data[i].features.rows() << '\t' << data[i].speech_begin << '\t'
             << data[i].speech_end << '\n';
  }
}

std::vector<Utterance> read_dataset(const std::string& dir) {
  const std::filesystem::path root = dir;
  const std::string manifest_path = (root / "manifest.tsv").string();
  std::ifstream manifest(manifest_path);
  if (!manifest) throw FormatError("cannot open '" + manifest_path + "'");
  std::vector<Utterance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = manifest_path + ":" + std::to_string(line_no);
    const auto f = split_tabs(line);
    if (f.size() != 4) throw FormatError(where + ": expected 4 fields");
    Utterance u;
    u.features = read_features((root / (f[0] + ".feat")).string());
    u.tokens = read_tokens((root / (f[0] + ".tok")).string());
    if (parse_count(f[1], where) != u.features.rows()) {
      throw FormatError(where + ": frame count differs from the feature file");
    }
    u.speech_begin = parse_count(f[2], where);
    u.speech_end = parse_count(f[3], where);
    out.push_back(std::move(u));
  }
  return out;
}

void write_stream_dataset(const std::string& dir, const std::vector<StreamSample>& streams) {
  const auto root = ensure_dir(dir);
  std::ofstream manifest(root / "streams.tsv");
  if (!manifest) throw FormatError("cannot write manifest in '" + dir + "'");
  for (std::size_t i = 0; i < streams.size(); ++i) {
    const std::string name = item_name("stream", i);
    const StreamSample& s = streams[i];
    write_features((root / (name + ".feat")).string(), s.features);
    for (std::size_t u = 0; u < s.references.size(); ++u) {
      manifest << name << '\t' << s.speech_begin[u] << '\t' << s.speech_end[u] << '\t';
      for (std::size_t k = 0; k < s.references[u].size(); ++k) {
        manifest << (k ? " " : "") << s.references[u][k];
      }
      manifest << '\n';
    }
  }
}

std::vector<StreamSample> read_stream_dataset(const std::string& dir) {
  const std::filesystem::path root = dir;
  const std::string manifest_path = (root / "streams.tsv").string();
  std::ifstream manifest(manifest_path);
  if (!manifest) throw FormatError("cannot open '" + manifest_path + "'");
  std::vector<StreamSample> out;
  std::string line, current;
  std::size_t line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = manifest_path + ":" + std::to_string(line_no);
    const auto f = split_tabs(line);
    if (f.size() != 4) throw FormatError(where + ": expected 4 fields");
    if (out.empty() || f[0] != current) {
      current = f[0];
      out.emplace_back();
      out.back().features = read_features((root / (current + ".feat")).string());
    }
    StreamSample& s = out.back();
    s.speech_begin.push_back(parse_count(f[1], where));
    s.speech_end.push_back(parse_count(f[2], where));
    s.references.push_back(parse_ids(f[3], where));
  }
  return out;
}

}  // namespace kermit
