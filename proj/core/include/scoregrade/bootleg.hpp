#pragma once

#include <array>
#include <bitset>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace scoregrade {

inline constexpr std::size_t kStaffPositions = 62;
inline constexpr std::size_t kBytesPerColumn = 8;
inline constexpr std::size_t kByteVocabulary = 256;

/// One notehead event: bit i set means a notehead at staff position i
/// (position 0 is the lowest).
using BootlegColumn = std::bitset<kStaffPositions>;
using ColumnBytes = std::array<std::uint8_t, kBytesPerColumn>;

/// Binary w x 62 matrix of notehead positions.
struct BootlegScore {
  std::string piece_id;
  std::vector<BootlegColumn> columns;

  [[nodiscard]] std::size_t width() const noexcept { return columns.size(); }
  [[nodiscard]] std::size_t noteheads() const noexcept;

  /// Builds a score from rows of 0/1 values; any other value is rejected.
  static BootlegScore from_cells(std::string piece_id,
                                 const std::vector<std::vector<int>>& columns);

  friend bool operator==(const BootlegScore&, const BootlegScore&) = default;
};

/// Byte-group tokens of a score, eight per column.
struct ByteTokenSequence {
  std::vector<std::uint8_t> tokens;
  std::size_t source_w = 0;
};

/// Byte g holds staff positions 8g..8g+7 with the lowest position in the least
/// significant bit; positions 62 and 63 are zero padding.
ColumnBytes column_to_bytes(const BootlegColumn& column);

/// Same as above for an unvalidated 0/1 vector (throws ValidationError).
ColumnBytes column_to_bytes(std::span<const int> cells);

/// Inverse of column_to_bytes. Throws CorruptTokenError on a nonzero pad bit.
BootlegColumn bytes_to_column(std::span<const std::uint8_t> bytes);

ByteTokenSequence tokenize_emb(const BootlegScore& score);
BootlegScore detokenize_emb(const ByteTokenSequence& tokens, std::string piece_id = {});

// .bsc on-disk format (little-endian):
//   "BSCR" | u8 version=1 | u16 id_len | id bytes | u32 w | w * 8 payload bytes
inline constexpr std::uint8_t kBscVersion = 1;

std::vector<std::uint8_t> encode_bsc(const BootlegScore& score);
BootlegScore decode_bsc(std::span<const std::uint8_t> bytes);

void write_bsc(const BootlegScore& score, const std::filesystem::path& path);
BootlegScore read_bsc(const std::filesystem::path& path);

struct CorpusStats {
  std::size_t pieces = 0;
  std::size_t noteheads = 0;
  std::size_t total_columns = 0;
  double mean_w = 0.0;
  std::size_t max_w = 0;
  /// Width bucket lower bound -> piece count, buckets of `bucket_width` columns.
  std::map<std::size_t, std::size_t> length_histogram;
  std::size_t bucket_width = 64;
};

CorpusStats corpus_stats(std::span<const BootlegScore> scores, std::size_t bucket_width = 64);

}  // namespace scoregrade
