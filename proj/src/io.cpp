#include "lapr/io.hpp"

#include <fmt/format.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace lapr::io {

using nlohmann::json;

namespace {

constexpr char kEmbeddingMagic[4] = {'L', 'A', 'P', 'R'};
constexpr char kCheckpointMagic[4] = {'L', 'A', 'P', 'C'};
constexpr char kCacheMagic[4] = {'L', 'A', 'P', 'M'};
constexpr std::uint32_t kVersion = 1;

// Little-endian byte sink.
class ByteWriter {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  void save(const fs::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(buf_.data(), std::streamsize(buf_.size()));
    if (!out) throw IoError("failed writing " + path.string());
  }

 private:
  std::vector<char> buf_;
};

std::vector<char> slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Little-endian byte source with bounds checks; overruns are truncation errors.
class ByteReader {
 public:
  ByteReader(std::vector<char> data, std::string name) : data_(std::move(data)), name_(std::move(name)) {}

  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw IoError(name_ + ": truncated file");
  }
  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(u8()) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  void magic(const char (&expected)[4]) {
    char got[4];
    bytes(got, 4);
    if (std::memcmp(got, expected, 4) != 0) throw IoError(name_ + ": bad magic bytes");
  }
  void version() {
    const std::uint32_t v = u32();
    if (v != kVersion) throw IoError(fmt::format("{}: unsupported version {}", name_, v));
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  void expect_end() const {
    if (pos_ != data_.size()) throw IoError(name_ + ": trailing bytes after payload");
  }
  const std::string& name() const { return name_; }

 private:
  std::vector<char> data_;
  std::string name_;
  std::size_t pos_ = 0;
};

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFu) throw InvalidArgument(fmt::format("{} {} does not fit the file format", what, v));
  return static_cast<std::uint32_t>(v);
}

template <typename Derived>
void write_block(ByteWriter& w, const Eigen::MatrixBase<Derived>& block) {
  for (Eigen::Index r = 0; r < block.rows(); ++r)
    for (Eigen::Index c = 0; c < block.cols(); ++c) w.f64(block(r, c));
}

template <typename Derived>
void read_block(ByteReader& r, Eigen::MatrixBase<Derived>& block) {
  for (Eigen::Index i = 0; i < block.rows(); ++i)
    for (Eigen::Index c = 0; c < block.cols(); ++c) {
      const double v = r.f64();
      if (!std::isfinite(v)) throw IoError(r.name() + ": non-finite parameter");
      block(i, c) = v;
    }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  return j.at(key).get<T>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* section) {
  if (!j.is_object()) throw InvalidArgument(fmt::format("config: '{}' must be an object", section));
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw InvalidArgument(fmt::format("config: unknown key '{}' in '{}'", key, section));
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

// ---------------------------------------------------------------------------

void write_embeddings(const fs::path& path, EmbeddingKind kind, std::span<const Vector> rows, std::size_t dim) {
  ByteWriter w;
  w.bytes(kEmbeddingMagic, 4);
  w.u32(kVersion);
  w.u32(checked_u32(rows.size(), "record count"));
  w.u32(checked_u32(dim, "dim"));
  w.u8(static_cast<std::uint8_t>(kind));
  for (int i = 0; i < 3; ++i) w.u8(0);
  for (const auto& row : rows) {
    if (std::size_t(row.size()) != dim) throw InvalidArgument("write_embeddings: row dim mismatch");
    for (Eigen::Index i = 0; i < row.size(); ++i) {
      const float v = static_cast<float>(row(i));
      if (!std::isfinite(v)) throw InvalidArgument("write_embeddings: non-finite value");
      w.f32(v);
    }
  }
  w.save(path);
}

EmbeddingFile read_embeddings(const fs::path& path) {
  ByteReader r(slurp(path), path.string());
  r.magic(kEmbeddingMagic);
  r.version();
  const std::uint32_t count = r.u32();
  const std::uint32_t dim = r.u32();
  const std::uint8_t kind = r.u8();
  if (kind > 2) throw IoError(fmt::format("{}: unknown embedding kind {}", path.string(), kind));
  std::uint8_t reserved[3];
  r.bytes(reserved, 3);
  const std::uint64_t expected = std::uint64_t(count) * dim * 4;
  if (r.remaining() < expected) throw IoError(path.string() + ": truncated file");
  if (r.remaining() > expected) throw IoError(path.string() + ": trailing bytes after payload");
  if (dim == 0 && count > 0) throw IoError(path.string() + ": zero dim with nonzero record count");

  EmbeddingFile file;
  file.kind = static_cast<EmbeddingKind>(kind);
  file.dim = dim;
  file.rows.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Vector v(dim);
    for (std::uint32_t c = 0; c < dim; ++c) {
      const float x = r.f32();
      if (!std::isfinite(x)) throw IoError(fmt::format("{}: non-finite value in record {}", path.string(), i));
      v(c) = static_cast<double>(x);
    }
    file.rows.push_back(std::move(v));
  }
  return file;
}

// ---------------------------------------------------------------------------

json to_json(const ModelConfig& c) {
  return {{"experts", c.experts},         {"input_dim", c.input_dim},           {"hidden", c.hidden},
          {"output_dim", c.output_dim},   {"temperature", c.temperature},       {"uniform_router", c.uniform_router},
          {"use_label", c.use_label}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.experts = j.at("experts").get<int>();
  c.input_dim = j.at("input_dim").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.output_dim = j.at("output_dim").get<int>();
  c.temperature = j.at("temperature").get<double>();
  c.uniform_router = j.at("uniform_router").get<bool>();
  c.use_label = j.at("use_label").get<bool>();
  c.validate();
  return c;
}

void write_checkpoint(const fs::path& path, const Model& model) {
  const std::string config = to_json(model.config).dump();
  ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kVersion);
  w.u32(checked_u32(config.size(), "config length"));
  w.bytes(config.data(), config.size());
  w.u64(parameter_count(model));
  for_each_block(model, [&](const auto& block) { write_block(w, block); });
  w.save(path);
}

Model read_checkpoint(const fs::path& path) {
  ByteReader r(slurp(path), path.string());
  r.magic(kCheckpointMagic);
  r.version();
  const std::uint32_t length = r.u32();
  r.need(length);
  std::string text(length, '\0');
  r.bytes(text.data(), length);
  ModelConfig config;
  try {
    config = model_config_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": bad embedded config: " + e.what());
  } catch (const InvalidArgument& e) {
    throw IoError(path.string() + ": bad embedded config: " + e.what());
  }
  Model model = zero_model<double>(config);
  const std::uint64_t count = r.u64();
  if (count != parameter_count(model))
    throw IoError(fmt::format("{}: {} parameters stored, {} expected", path.string(), count, parameter_count(model)));
  r.need(count * 8);
  for_each_block(model, [&](auto& block) { read_block(r, block); });
  r.expect_end();
  return model;
}

// ---------------------------------------------------------------------------

void write_cache(const fs::path& path, const ModeCache& cache) {
  ByteWriter w;
  w.bytes(kCacheMagic, 4);
  w.u32(kVersion);
  w.u64(cache.fingerprint);
  w.u32(checked_u32(cache.prompts, "prompt count"));
  w.u32(checked_u32(cache.experts, "expert count"));
  w.u32(checked_u32(cache.dim, "dim"));
  w.u32(0);
  for (Eigen::Index col = 0; col < cache.modes.cols(); ++col)
    for (Eigen::Index i = 0; i < cache.modes.rows(); ++i) w.f64(cache.modes(i, col));
  w.save(path);
}

ModeCache read_cache(const fs::path& path) {
  ByteReader r(slurp(path), path.string());
  r.magic(kCacheMagic);
  r.version();
  ModeCache cache;
  cache.fingerprint = r.u64();
  cache.prompts = r.u32();
  cache.experts = r.u32();
  cache.dim = r.u32();
  r.u32();
  const std::uint64_t values = std::uint64_t(cache.prompts) * cache.experts * cache.dim;
  if (r.remaining() < values * 8) throw IoError(path.string() + ": truncated file");
  cache.modes.resize(Eigen::Index(cache.dim), Eigen::Index(cache.prompts * cache.experts));
  for (Eigen::Index col = 0; col < cache.modes.cols(); ++col)
    for (Eigen::Index i = 0; i < cache.modes.rows(); ++i) {
      const double v = r.f64();
      if (!std::isfinite(v)) throw IoError(path.string() + ": non-finite cache entry");
      cache.modes(i, col) = v;
    }
  r.expect_end();
  return cache;
}

// ---------------------------------------------------------------------------

void write_scores(const fs::path& path, const ScoreTable& scores) {
  std::string out = "query_id,prompt_id,perf_score,label_score\n";
  for (std::size_t q = 0; q < scores.queries(); ++q)
    for (const auto& e : scores.row(q)) out += fmt::format("{},{},{:.17g},{:.17g}\n", q, e.prompt_id, e.perf, e.label);
  write_text(path, out);
}

ScoreTable read_scores(const fs::path& path) {
  const std::vector<char> raw = slurp(path);
  std::istringstream in(std::string(raw.begin(), raw.end()));
  std::string line;
  if (!std::getline(in, line) || line != "query_id,prompt_id,perf_score,label_score")
    throw IoError(path.string() + ": missing or unexpected score table header");
  std::vector<std::vector<ScoreEntry>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string q, p, perf, label, extra;
    if (!std::getline(fields, q, ',') || !std::getline(fields, p, ',') || !std::getline(fields, perf, ',') ||
        !std::getline(fields, label, ',') || std::getline(fields, extra, ','))
      throw IoError(fmt::format("{}:{}: expected 4 fields", path.string(), line_no));
    try {
      std::size_t used = 0;
      const std::size_t qid = std::stoull(q, &used);
      const std::size_t pid = std::stoull(p);
      const double perf_v = std::stod(perf);
      const double label_v = std::stod(label);
      if (!std::isfinite(perf_v) || !std::isfinite(label_v)) throw std::invalid_argument("non-finite");
      if (qid >= rows.size()) rows.resize(qid + 1);
      rows[qid].push_back({pid, perf_v, label_v});
    } catch (const std::logic_error&) {
      throw IoError(fmt::format("{}:{}: malformed score row", path.string(), line_no));
    }
  }
  ScoreTable table(rows.size());
  for (std::size_t q = 0; q < rows.size(); ++q) table.set_row(q, std::move(rows[q]));
  return table;
}

// ---------------------------------------------------------------------------

json to_json(const SynthConfig& c) {
  return {{"modes", c.modes},
          {"categories", c.categories},
          {"dim", c.dim},
          {"prompts", c.prompts},
          {"queries", c.queries},
          {"image_noise", c.image_noise},
          {"label_noise", c.label_noise},
          {"mixing", c.mixing},
          {"perf_alpha", c.perf_alpha},
          {"perf_beta", c.perf_beta},
          {"perf_noise", c.perf_noise},
          {"seed", c.seed}};
}

SynthConfig synth_config_from_json(const json& j) {
  reject_unknown(j,
                 {"modes", "categories", "dim", "prompts", "queries", "image_noise", "label_noise", "mixing",
                  "perf_alpha", "perf_beta", "perf_noise", "seed"},
                 "synth");
  SynthConfig c;
  c.modes = get_or(j, "modes", c.modes);
  c.categories = get_or(j, "categories", c.categories);
  c.dim = get_or(j, "dim", c.dim);
  c.prompts = get_or(j, "prompts", c.prompts);
  c.queries = get_or(j, "queries", c.queries);
  c.image_noise = get_or(j, "image_noise", c.image_noise);
  c.label_noise = get_or(j, "label_noise", c.label_noise);
  c.mixing = get_or(j, "mixing", c.mixing);
  c.perf_alpha = get_or(j, "perf_alpha", c.perf_alpha);
  c.perf_beta = get_or(j, "perf_beta", c.perf_beta);
  c.perf_noise = get_or(j, "perf_noise", c.perf_noise);
  c.seed = get_or(j, "seed", c.seed);
  c.validate();
  return c;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig rc;
  try {
    reject_unknown(j, {"model", "train", "synth"}, "root");
    if (j.contains("model")) {
      const json& m = j.at("model");
      reject_unknown(m, {"experts", "hidden", "output_dim", "temperature"}, "model");
      rc.train.experts = get_or(m, "experts", rc.train.experts);
      rc.train.hidden = get_or(m, "hidden", rc.train.hidden);
      rc.train.output_dim = get_or(m, "output_dim", rc.train.output_dim);
      rc.train.temperature = get_or(m, "temperature", rc.train.temperature);
    }
    if (j.contains("train")) {
      const json& t = j.at("train");
      reject_unknown(t,
                     {"lr", "batch_size", "epochs", "pool_size", "mine_count", "momentum", "seed", "ablation"},
                     "train");
      rc.train.lr = get_or(t, "lr", rc.train.lr);
      rc.train.batch_size = get_or(t, "batch_size", rc.train.batch_size);
      rc.train.epochs = get_or(t, "epochs", rc.train.epochs);
      rc.train.pool_size = get_or(t, "pool_size", rc.train.pool_size);
      rc.train.mine_count = get_or(t, "mine_count", rc.train.mine_count);
      rc.train.momentum = get_or(t, "momentum", rc.train.momentum);
      rc.train.seed = get_or(t, "seed", rc.train.seed);
      if (t.contains("ablation")) {
        const json& a = t.at("ablation");
        reject_unknown(a, {"no_router", "no_label", "single_stage", "drop_pg", "drop_lg", "drop_lb"}, "ablation");
        auto& ab = rc.train.ablation;
        ab.no_router = get_or(a, "no_router", ab.no_router);
        ab.no_label = get_or(a, "no_label", ab.no_label);
        ab.single_stage = get_or(a, "single_stage", ab.single_stage);
        ab.drop_pg = get_or(a, "drop_pg", ab.drop_pg);
        ab.drop_lg = get_or(a, "drop_lg", ab.drop_lg);
        ab.drop_lb = get_or(a, "drop_lb", ab.drop_lb);
      }
    }
    if (j.contains("synth")) rc.synth = synth_config_from_json(j.at("synth"));
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
  rc.train.validate();
  return rc;
}

RunConfig load_run_config(const fs::path& path) {
  const std::vector<char> raw = slurp(path);
  json j;
  try {
    j = json::parse(raw.begin(), raw.end());
  } catch (const json::exception& e) {
    throw InvalidArgument(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

// ---------------------------------------------------------------------------

SynthDataset DataBundle::as_dataset() const {
  if (!has_hidden_modes()) throw InvalidArgument("dataset has no hidden-mode sidecars");
  SynthDataset d;
  d.prompts = prompts;
  d.queries = queries;
  d.prompt_modes = prompt_modes;
  d.query_modes = query_modes;
  return d;
}

void write_dataset(const fs::path& dir, const SynthDataset& data, const SynthConfig& config,
                   const ScoreTable& scores) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const auto dim = std::size_t(config.dim);

  std::vector<Vector> images, labels, queries, query_labels;
  for (const auto& p : data.prompts) {
    images.push_back(p.image);
    labels.push_back(p.label);
  }
  for (const auto& q : data.queries) {
    queries.push_back(q.embedding);
    query_labels.push_back(q.label.value_or(Vector::Zero(Eigen::Index(dim))));
  }
  write_embeddings(dir / DataFiles::kPromptImages, EmbeddingKind::kImage, images, dim);
  write_embeddings(dir / DataFiles::kPromptLabels, EmbeddingKind::kLabel, labels, dim);
  write_embeddings(dir / DataFiles::kQueries, EmbeddingKind::kQuery, queries, dim);
  write_embeddings(dir / DataFiles::kQueryLabels, EmbeddingKind::kLabel, query_labels, dim);

  std::string meta, eval;
  for (std::size_t i = 0; i < data.prompts.size(); ++i) {
    meta += json{{"id", data.prompts[i].id}, {"category", data.prompts[i].category}}.dump() + "\n";
    eval += json{{"id", data.prompts[i].id}, {"category", data.prompts[i].category},
                 {"hidden_mode", data.prompt_modes[i]}}.dump() + "\n";
  }
  write_text(dir / DataFiles::kPromptMeta, meta);
  write_text(dir / DataFiles::kPromptEval, eval);
  meta.clear();
  eval.clear();
  for (std::size_t i = 0; i < data.queries.size(); ++i) {
    meta += json{{"id", data.queries[i].id}, {"category", data.queries[i].category}}.dump() + "\n";
    eval += json{{"id", data.queries[i].id}, {"category", data.queries[i].category},
                 {"hidden_mode", data.query_modes[i]}}.dump() + "\n";
  }
  write_text(dir / DataFiles::kQueryMeta, meta);
  write_text(dir / DataFiles::kQueryEval, eval);
  write_scores(dir / DataFiles::kScores, scores);
  write_text(dir / DataFiles::kSynthConfig, to_json(config).dump(2) + "\n");
}

namespace {

struct SidecarRow {
  std::size_t id;
  int category;
  int hidden_mode;
};

std::vector<SidecarRow> read_sidecar(const fs::path& path, bool with_modes) {
  const std::vector<char> raw = slurp(path);
  std::istringstream in(std::string(raw.begin(), raw.end()));
  std::vector<SidecarRow> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      SidecarRow r{j.at("id").get<std::size_t>(), j.value("category", 0), with_modes ? j.at("hidden_mode").get<int>() : -1};
      if (r.id != rows.size()) throw IoError(fmt::format("{}:{}: ids must be dense and ascending", path.string(), line_no));
      rows.push_back(r);
    } catch (const json::exception& e) {
      throw IoError(fmt::format("{}:{}: {}", path.string(), line_no, e.what()));
    }
  }
  return rows;
}

}  // namespace

DataBundle load_data_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("data directory not found: " + dir.string());
  DataBundle b;
  const EmbeddingFile images = read_embeddings(dir / DataFiles::kPromptImages);
  const EmbeddingFile labels = read_embeddings(dir / DataFiles::kPromptLabels);
  const EmbeddingFile queries = read_embeddings(dir / DataFiles::kQueries);
  if (images.rows.size() != labels.rows.size()) throw IoError("prompt image/label files differ in record count");
  if (images.dim != labels.dim || (images.dim != queries.dim && !queries.rows.empty() && !images.rows.empty()))
    throw IoError("embedding files differ in dim");

  for (std::size_t i = 0; i < images.rows.size(); ++i)
    b.prompts.push_back({i, images.rows[i], labels.rows[i], 0, {}});
  for (std::size_t i = 0; i < queries.rows.size(); ++i) b.queries.push_back({i, queries.rows[i], std::nullopt, 0});

  if (fs::exists(dir / DataFiles::kQueryLabels)) {
    const EmbeddingFile ql = read_embeddings(dir / DataFiles::kQueryLabels);
    if (ql.rows.size() != b.queries.size()) throw IoError("query label file differs in record count");
    for (std::size_t i = 0; i < ql.rows.size(); ++i) b.queries[i].label = ql.rows[i];
  }
  normalize_records(b.prompts);
  normalize_records(b.queries);

  const bool eval = fs::exists(dir / DataFiles::kPromptEval) && fs::exists(dir / DataFiles::kQueryEval);
  const fs::path prompt_meta = eval ? dir / DataFiles::kPromptEval : dir / DataFiles::kPromptMeta;
  const fs::path query_meta = eval ? dir / DataFiles::kQueryEval : dir / DataFiles::kQueryMeta;
  if (fs::exists(prompt_meta)) {
    const auto rows = read_sidecar(prompt_meta, eval);
    if (rows.size() != b.prompts.size()) throw IoError(prompt_meta.string() + ": record count mismatch");
    for (const auto& r : rows) {
      b.prompts[r.id].category = r.category;
      if (eval) b.prompt_modes.push_back(r.hidden_mode);
    }
  }
  if (fs::exists(query_meta)) {
    const auto rows = read_sidecar(query_meta, eval);
    if (rows.size() != b.queries.size()) throw IoError(query_meta.string() + ": record count mismatch");
    for (const auto& r : rows) {
      b.queries[r.id].category = r.category;
      if (eval) b.query_modes.push_back(r.hidden_mode);
    }
  }
  if (fs::exists(dir / DataFiles::kScores)) b.scores = read_scores(dir / DataFiles::kScores);
  if (fs::exists(dir / DataFiles::kSynthConfig)) {
    const std::vector<char> raw = slurp(dir / DataFiles::kSynthConfig);
    try {
      b.synth = synth_config_from_json(json::parse(raw.begin(), raw.end()));
    } catch (const json::exception& e) {
      throw IoError((dir / DataFiles::kSynthConfig).string() + ": " + e.what());
    }
  }
  return b;
}

std::vector<Vector> read_queries(const fs::path& path) {
  EmbeddingFile f = read_embeddings(path);
  for (auto& row : f.rows) row = l2_normalize(row);
  return std::move(f.rows);
}

}  // namespace lapr::io
