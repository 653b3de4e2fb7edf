#include "scoregrade/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>

#include "scoregrade/error.hpp"
#include "scoregrade/metrics.hpp"
#include "scoregrade/random.hpp"

namespace scoregrade {

namespace fs = std::filesystem;

fs::path DatasetManifest::resolve(const PieceEntry& piece) const {
  const fs::path p(piece.path);
  return p.is_absolute() ? p : base_dir / p;
}

std::vector<std::size_t> DatasetManifest::labels() const {
  std::vector<std::size_t> out;
  out.reserve(pieces.size());
  for (const auto& p : pieces) out.push_back(p.label);
  return out;
}

void validate_manifest(const DatasetManifest& m) {
  if (m.num_classes < 1) throw ValidationError("manifest " + m.name + ": num_classes must be >= 1");
  std::set<std::string> seen;
  for (const auto& p : m.pieces) {
    if (p.piece_id.empty()) throw ValidationError("manifest " + m.name + ": empty piece_id");
    if (!seen.insert(p.piece_id).second) {
      throw ValidationError("manifest " + m.name + ": duplicate piece_id " + p.piece_id);
    }
    if (p.label >= m.num_classes) {
      throw ValidationError("manifest " + m.name + ": piece " + p.piece_id + " has label " +
                            std::to_string(p.label) + " outside [0, " + std::to_string(m.num_classes) + ")");
    }
  }
}

DatasetManifest manifest_from_json(const nlohmann::json& j, fs::path base_dir) {
  DatasetManifest m;
  m.base_dir = std::move(base_dir);
  try {
    m.name = j.at("name").get<std::string>();
    const auto k = j.at("num_classes").get<std::int64_t>();
    if (k < 1) throw ValidationError("manifest " + m.name + ": num_classes must be >= 1");
    m.num_classes = static_cast<std::size_t>(k);
    for (const auto& e : j.at("pieces")) {
      PieceEntry p;
      p.piece_id = e.at("piece_id").get<std::string>();
      p.path = e.at("path").get<std::string>();
      const auto label = e.at("label").get<std::int64_t>();
      if (label < 0) throw ValidationError("manifest " + m.name + ": negative label for " + p.piece_id);
      p.label = static_cast<std::size_t>(label);
      if (e.contains("composer") && !e.at("composer").is_null()) p.composer = e.at("composer").get<std::string>();
      m.pieces.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("manifest schema violation: ") + e.what());
  }
  validate_manifest(m);
  return m;
}

nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json pieces = nlohmann::json::array();
  for (const auto& p : m.pieces) {
    nlohmann::json e = {{"piece_id", p.piece_id}, {"path", p.path}, {"label", p.label}};
    if (p.composer) e["composer"] = *p.composer;
    pieces.push_back(std::move(e));
  }
  return {{"name", m.name}, {"num_classes", m.num_classes}, {"pieces", std::move(pieces)}};
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  return manifest_from_json(j, path.parent_path());
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << manifest_to_json(m).dump(2) << '\n';
  if (!out) throw IoError("failed writing manifest " + path.string());
}

std::vector<BootlegScore> load_scores(const DatasetManifest& m) {
  std::vector<BootlegScore> out;
  out.reserve(m.pieces.size());
  for (const auto& p : m.pieces) {
    auto score = read_bsc(m.resolve(p));
    score.piece_id = p.piece_id;
    out.push_back(std::move(score));
  }
  return out;
}

std::vector<BootlegScore> load_corpus(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("corpus directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".bsc") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<BootlegScore> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(read_bsc(f));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpora

void SynthParams::validate() const {
  if (n_pieces == 0) throw ValidationError("synth: n_pieces must be positive");
  if (num_classes < 2) throw ValidationError("synth: num_classes must be >= 2");
  if (w_min < 1 || w_max < w_min) throw ValidationError("synth: need 1 <= w_min <= w_max");
  if (density_gain < 0 || range_gain < 0 || polyphony_gain < 0) throw ValidationError("synth: gains must be >= 0");
  if (!(label_noise >= 0.0 && label_noise < 0.5)) throw ValidationError("synth: label_noise must be in [0, 0.5)");
}

namespace {

constexpr int kTopPosition = static_cast<int>(kStaffPositions) - 1;

int clamp_position(int p) { return std::clamp(p, 0, kTopPosition); }

BootlegScore synth_score(std::string piece_id, double z, const SynthParams& p, Rng& rng) {
  const double extra_note = std::min(0.9, 0.3 * p.density_gain * z);
  const int spread = 2 + static_cast<int>(8.0 * p.range_gain * z + 0.5);
  const int step = 1 + static_cast<int>(3.0 * p.range_gain * z + 0.5);
  const double second_cluster = std::min(0.9, 0.6 * p.polyphony_gain * z);

  BootlegScore score;
  score.piece_id = std::move(piece_id);
  const auto w = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(p.w_min),
                                                      static_cast<std::int64_t>(p.w_max)));
  int center = static_cast<int>(rng.between(20, 41));
  score.columns.resize(w);
  for (auto& col : score.columns) {
    center = std::clamp(center + static_cast<int>(rng.between(-step, step)), 12, 49);
    int notes = 1;
    for (int t = 0; t < 8; ++t) notes += rng.bernoulli(extra_note) ? 1 : 0;
    for (int n = 0; n < notes; ++n) col.set(clamp_position(center + static_cast<int>(rng.between(-spread, spread))));
    if (rng.bernoulli(second_cluster)) {
      const int gap = static_cast<int>(rng.between(14, 20));
      const int other = center >= 31 ? center - gap - spread : center + gap + spread;
      col.set(clamp_position(other));
      if (rng.bernoulli(extra_note)) col.set(clamp_position(other + static_cast<int>(rng.between(-2, 2))));
    }
  }
  return score;
}

}  // namespace

std::vector<SynthPiece> synth_pieces(const SynthParams& params) {
  params.validate();
  Rng rng(params.seed);
  const std::size_t k = params.num_classes;
  std::vector<SynthPiece> out;
  out.reserve(params.n_pieces);
  for (std::size_t i = 0; i < params.n_pieces; ++i) {
    const std::size_t c = i % k;
    const double z = static_cast<double>(c) / static_cast<double>(k - 1);
    char id[32];
    std::snprintf(id, sizeof(id), "_%05zu", i);
    SynthPiece piece;
    piece.score = synth_score(params.name + id, z, params, rng);
    piece.latent_class = c;
    piece.label = c;
    if (params.label_noise > 0.0 && rng.bernoulli(params.label_noise)) {
      const bool up = c == 0 || (c + 1 < k && rng.bernoulli(0.5));
      piece.label = up ? c + 1 : c - 1;
    }
    out.push_back(std::move(piece));
  }
  return out;
}

DatasetManifest synth_generate(const SynthParams& params, const fs::path& out_dir) {
  auto pieces = synth_pieces(params);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  DatasetManifest m;
  m.name = params.name;
  m.num_classes = params.num_classes;
  m.base_dir = out_dir;
  for (auto& p : pieces) {
    const std::string file = p.score.piece_id + ".bsc";
    write_bsc(p.score, out_dir / file);
    m.pieces.push_back({p.score.piece_id, file, p.label, std::nullopt});
  }
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

PieceFeatures piece_features(const BootlegScore& score) {
  PieceFeatures f;
  if (score.width() == 0) return f;
  double notes = 0, span = 0, poly = 0;
  for (const auto& col : score.columns) {
    int lo = -1, hi = -1, prev = -1;
    bool split = false;
    for (int i = 0; i <= kTopPosition; ++i) {
      if (!col[static_cast<std::size_t>(i)]) continue;
      notes += 1;
      if (lo < 0) lo = i;
      if (prev >= 0 && i - prev >= 10) split = true;
      hi = prev = i;
    }
    if (lo >= 0) span += hi - lo;
    if (split) poly += 1;
  }
  const auto w = static_cast<double>(score.width());
  f.density = notes / w;
  f.span = span / w;
  f.polyphony = poly / w;
  return f;
}

DatasetReport validate_dataset(const DatasetManifest& m) {
  DatasetReport r;
  r.name = m.name;
  r.pieces = m.pieces.size();
  r.num_classes = m.num_classes;
  r.class_counts.assign(m.num_classes, 0);
  std::vector<std::size_t> labels;
  for (const auto& p : m.pieces) {
    if (p.label < m.num_classes) {
      ++r.class_counts[p.label];
      labels.push_back(p.label);
    }
    try {
      const auto score = read_bsc(m.resolve(p));
      r.noteheads += score.noteheads();
      r.total_columns += score.width();
    } catch (const Error&) {
      r.broken_files.push_back(p.path);
    }
  }
  if (!labels.empty()) r.air = air(labels, m.num_classes);
  return r;
}

nlohmann::json report_to_json(const DatasetReport& r) {
  return {{"name", r.name},
          {"pieces", r.pieces},
          {"num_classes", r.num_classes},
          {"class_counts", r.class_counts},
          {"air", r.air},
          {"noteheads", r.noteheads},
          {"total_columns", r.total_columns},
          {"broken_files", r.broken_files}};
}

}  // namespace scoregrade
