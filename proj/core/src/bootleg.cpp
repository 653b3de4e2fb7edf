#include "scoregrade/bootleg.hpp"

#include <fstream>
#include <iterator>

#include "scoregrade/error.hpp"

namespace scoregrade {

namespace {

constexpr std::array<std::uint8_t, 4> kBscMagic{'B', 'S', 'C', 'R'};
// Byte 7 covers positions 56..63; only its low six bits are real positions.
constexpr std::uint8_t kPadMask = 0xC0;

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw ParseError(ParseError::Code::kTruncated, std::string("bsc: truncated ") + what);
    }
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  std::uint64_t uint(std::size_t width, const char* what) {
    auto raw = take(width, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(raw[i]) << (8 * i);
    return v;
  }

  [[nodiscard]] std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void put_uint(std::vector<std::uint8_t>& out, std::uint64_t v, std::size_t width) {
  for (std::size_t i = 0; i < width; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

}  // namespace

std::size_t BootlegScore::noteheads() const noexcept {
  std::size_t total = 0;
  for (const auto& c : columns) total += c.count();
  return total;
}

BootlegScore BootlegScore::from_cells(std::string piece_id,
                                      const std::vector<std::vector<int>>& columns) {
  BootlegScore score;
  score.piece_id = std::move(piece_id);
  score.columns.reserve(columns.size());
  for (const auto& cells : columns) {
    if (cells.size() != kStaffPositions) {
      throw ValidationError("bootleg column must have 62 cells, got " + std::to_string(cells.size()));
    }
    BootlegColumn col;
    for (std::size_t i = 0; i < kStaffPositions; ++i) {
      if (cells[i] != 0 && cells[i] != 1) {
        throw ValidationError("bootleg cell " + std::to_string(i) + " is not binary");
      }
      col[i] = cells[i] == 1;
    }
    score.columns.push_back(col);
  }
  return score;
}

ColumnBytes column_to_bytes(const BootlegColumn& column) {
  ColumnBytes out{};
  for (std::size_t i = 0; i < kStaffPositions; ++i) {
    if (column[i]) out[i / 8] = static_cast<std::uint8_t>(out[i / 8] | (1u << (i % 8)));
  }
  return out;
}

ColumnBytes column_to_bytes(std::span<const int> cells) {
  if (cells.size() != kStaffPositions) {
    throw ValidationError("bootleg column must have 62 cells, got " + std::to_string(cells.size()));
  }
  BootlegColumn col;
  for (std::size_t i = 0; i < kStaffPositions; ++i) {
    if (cells[i] != 0 && cells[i] != 1) {
      throw ValidationError("bootleg cell " + std::to_string(i) + " is not binary");
    }
    col[i] = cells[i] == 1;
  }
  return column_to_bytes(col);
}

BootlegColumn bytes_to_column(std::span<const std::uint8_t> bytes) {
  if (bytes.size() != kBytesPerColumn) {
    throw ValidationError("a column is encoded by exactly 8 bytes, got " + std::to_string(bytes.size()));
  }
  if (bytes[7] & kPadMask) {
    throw CorruptTokenError("byte token " + std::to_string(bytes[7]) +
                            " in group 7 sets a pad bit (positions 62/63)");
  }
  BootlegColumn col;
  for (std::size_t i = 0; i < kStaffPositions; ++i) col[i] = (bytes[i / 8] >> (i % 8)) & 1u;
  return col;
}

ByteTokenSequence tokenize_emb(const BootlegScore& score) {
  ByteTokenSequence seq;
  seq.source_w = score.width();
  seq.tokens.reserve(score.width() * kBytesPerColumn);
  for (const auto& col : score.columns) {
    const auto bytes = column_to_bytes(col);
    seq.tokens.insert(seq.tokens.end(), bytes.begin(), bytes.end());
  }
  return seq;
}

BootlegScore detokenize_emb(const ByteTokenSequence& tokens, std::string piece_id) {
  if (tokens.tokens.size() != tokens.source_w * kBytesPerColumn) {
    throw ValidationError("token count " + std::to_string(tokens.tokens.size()) +
                          " is not 8 x source width " + std::to_string(tokens.source_w));
  }
  BootlegScore score;
  score.piece_id = std::move(piece_id);
  score.columns.reserve(tokens.source_w);
  const std::span<const std::uint8_t> all(tokens.tokens);
  for (std::size_t c = 0; c < tokens.source_w; ++c) {
    score.columns.push_back(bytes_to_column(all.subspan(c * kBytesPerColumn, kBytesPerColumn)));
  }
  return score;
}

std::vector<std::uint8_t> encode_bsc(const BootlegScore& score) {
  if (score.piece_id.size() > 0xFFFF) throw ValidationError("piece_id longer than 65535 bytes");
  if (score.width() > 0xFFFFFFFFull) throw ValidationError("score too wide for the bsc format");
  std::vector<std::uint8_t> out(kBscMagic.begin(), kBscMagic.end());
  out.push_back(kBscVersion);
  put_uint(out, score.piece_id.size(), 2);
  out.insert(out.end(), score.piece_id.begin(), score.piece_id.end());
  put_uint(out, score.width(), 4);
  out.reserve(out.size() + score.width() * kBytesPerColumn);
  for (const auto& col : score.columns) {
    const auto bytes = column_to_bytes(col);
    out.insert(out.end(), bytes.begin(), bytes.end());
  }
  return out;
}

BootlegScore decode_bsc(std::span<const std::uint8_t> bytes) {
  ByteReader reader(bytes);
  if (reader.remaining() < kBscMagic.size()) {
    throw ParseError(ParseError::Code::kTruncated, "bsc: shorter than the magic");
  }
  auto magic = reader.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kBscMagic.begin())) {
    throw ParseError(ParseError::Code::kBadMagic, "bsc: bad magic");
  }
  const auto version = reader.uint(1, "version");
  if (version != kBscVersion) {
    throw ParseError(ParseError::Code::kBadVersion, "bsc: unsupported version " + std::to_string(version));
  }
  const auto id_len = reader.uint(2, "piece_id length");
  auto id = reader.take(id_len, "piece_id");
  BootlegScore score;
  score.piece_id.assign(id.begin(), id.end());
  const auto w = reader.uint(4, "width");
  if (reader.remaining() / kBytesPerColumn < w) {
    throw ParseError(ParseError::Code::kTruncated, "bsc: payload shorter than 8 x w bytes");
  }
  score.columns.reserve(w);
  for (std::uint64_t c = 0; c < w; ++c) {
    auto group = reader.take(kBytesPerColumn, "payload");
    if (group[7] & kPadMask) {
      throw ParseError(ParseError::Code::kPadBits,
                       "bsc: column " + std::to_string(c) + " has nonzero pad bits");
    }
    score.columns.push_back(bytes_to_column(group));
  }
  if (reader.remaining() != 0) {
    throw ParseError(ParseError::Code::kTrailingBytes, "bsc: trailing bytes after payload");
  }
  return score;
}

void write_bsc(const BootlegScore& score, const std::filesystem::path& path) {
  const auto bytes = encode_bsc(score);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

BootlegScore read_bsc(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_bsc(bytes);
}

CorpusStats corpus_stats(std::span<const BootlegScore> scores, std::size_t bucket_width) {
  CorpusStats stats;
  stats.bucket_width = bucket_width == 0 ? 1 : bucket_width;
  for (const auto& s : scores) {
    ++stats.pieces;
    stats.noteheads += s.noteheads();
    stats.total_columns += s.width();
    stats.max_w = std::max(stats.max_w, s.width());
    ++stats.length_histogram[(s.width() / stats.bucket_width) * stats.bucket_width];
  }
  if (stats.pieces) stats.mean_w = static_cast<double>(stats.total_columns) / static_cast<double>(stats.pieces);
  return stats;
}

}  // namespace scoregrade
