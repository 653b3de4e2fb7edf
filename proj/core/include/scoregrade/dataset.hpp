#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scoregrade/bootleg.hpp"

namespace scoregrade {

struct PieceEntry {
  std::string piece_id;
  std::string path;  // relative to the manifest's directory unless absolute
  std::size_t label = 0;
  std::optional<std::string> composer;

  friend bool operator==(const PieceEntry&, const PieceEntry&) = default;
};

/// A labeled collection with one ordinal scale of num_classes levels.
struct DatasetManifest {
  std::string name;
  std::size_t num_classes = 0;
  std::vector<PieceEntry> pieces;
  std::filesystem::path base_dir;

  [[nodiscard]] std::filesystem::path resolve(const PieceEntry& piece) const;
  [[nodiscard]] std::vector<std::size_t> labels() const;
};

/// Schema and content checks: unique ids, labels below num_classes, K >= 1.
void validate_manifest(const DatasetManifest& manifest);

DatasetManifest manifest_from_json(const nlohmann::json& j, std::filesystem::path base_dir = {});
nlohmann::json manifest_to_json(const DatasetManifest& manifest);

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Reads every piece; the first unreadable file throws.
std::vector<BootlegScore> load_scores(const DatasetManifest& manifest);

/// Every .bsc under `dir`, recursively, in path order.
std::vector<BootlegScore> load_corpus(const std::filesystem::path& dir);

struct SynthParams {
  std::string name = "synth";
  std::size_t n_pieces = 100;
  std::size_t num_classes = 3;
  std::uint64_t seed = 0;
  std::size_t w_min = 24;
  std::size_t w_max = 96;
  double density_gain = 1.0;
  double range_gain = 1.0;
  double polyphony_gain = 1.0;
  double label_noise = 0.0;

  void validate() const;
};

struct SynthPiece {
  BootlegScore score;
  std::size_t latent_class = 0;
  std::size_t label = 0;  // latent class after label noise
};

/// In-memory generator. Classes are assigned round-robin so counts differ by
/// at most one; difficulty z = c / (K-1) raises notes per column, pitch
/// spread and the chance of a second simultaneous cluster.
std::vector<SynthPiece> synth_pieces(const SynthParams& params);

/// Writes one .bsc per piece plus manifest.json into `out_dir`.
DatasetManifest synth_generate(const SynthParams& params, const std::filesystem::path& out_dir);

/// Hand-crafted summary of a score used to check generator separability.
struct PieceFeatures {
  double density = 0.0;    // noteheads per column
  double span = 0.0;       // mean (highest - lowest) set position per column
  double polyphony = 0.0;  // share of columns holding two clusters
};

PieceFeatures piece_features(const BootlegScore& score);

struct DatasetReport {
  std::string name;
  std::size_t pieces = 0;
  std::size_t num_classes = 0;
  std::vector<std::size_t> class_counts;
  double air = 0.0;
  std::size_t noteheads = 0;
  std::size_t total_columns = 0;
  std::vector<std::string> broken_files;
};

/// Reads every piece and aggregates; unreadable files are listed, not thrown.
DatasetReport validate_dataset(const DatasetManifest& manifest);

nlohmann::json report_to_json(const DatasetReport& report);

}  // namespace scoregrade
