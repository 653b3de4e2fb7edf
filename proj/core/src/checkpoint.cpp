#include "scoregrade/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "scoregrade/error.hpp"

namespace scoregrade {

namespace {

constexpr char kMagic[4] = {'S', 'G', 'C', 'K'};

std::uint32_t float_bits(float f) { return std::bit_cast<std::uint32_t>(f); }

void append_le32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t read_le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

}  // namespace

nlohmann::json config_to_json(const GptConfig& c) {
  return {
      {"d_model", c.d_model},
      {"n_layers", c.n_layers},
      {"n_heads", c.n_heads},
      {"context_len", c.context_len},
      {"encoder", std::string(to_string(c.encoder))},
      {"cnn_kernel", c.cnn_kernel},
      {"dropout", c.dropout},
      {"max_finetune_len", c.max_finetune_len},
      {"long_input_policy", std::string(to_string(c.long_input_policy))},
  };
}

GptConfig config_from_json(const nlohmann::json& j) {
  GptConfig c;
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.context_len = j.at("context_len").get<std::size_t>();
  c.encoder = parse_encoder_kind(j.at("encoder").get<std::string>());
  c.cnn_kernel = j.at("cnn_kernel").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.max_finetune_len = j.at("max_finetune_len").get<std::size_t>();
  c.long_input_policy = parse_long_input_policy(j.at("long_input_policy").get<std::string>());
  return c;
}

template <typename T>
void save_checkpoint(const GptModel<T>& model, const std::filesystem::path& path) {
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["config"] = config_to_json(model.config());
  header["head_specs"] = nlohmann::json::array();
  for (const auto& h : model.head_specs()) {
    header["head_specs"].push_back({{"dataset_id", h.dataset_id}, {"num_classes", h.num_classes}});
  }
  std::string blob;
  header["parameters"] = nlohmann::json::array();
  for (const auto& p : model.parameters()) {
    header["parameters"].push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", blob.size()}});
    for (T v : p.tensor.data()) append_le32(blob, float_bits(static_cast<float>(v)));
  }
  header["blob_bytes"] = blob.size();
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  append_le32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out += blob;
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw IoError("cannot open " + path.string() + " for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw IoError("failed writing " + path.string());
}

template <typename T>
GptModel<T> load_checkpoint(const std::filesystem::path& path, std::optional<EncoderKind> expected_encoder) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8) throw ParseError(ParseError::Code::kTruncated, "checkpoint: file too short");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw ParseError(ParseError::Code::kBadMagic, "checkpoint: bad magic");
  }
  const auto header_len = read_le32(reinterpret_cast<const unsigned char*>(bytes.data() + 4));
  if (bytes.size() - 8 < header_len) throw ParseError(ParseError::Code::kTruncated, "checkpoint: truncated header");

  nlohmann::json header;
  GptConfig config;
  std::vector<HeadSpec> heads;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
    const int version = header.at("format_version").get<int>();
    if (version != kCheckpointVersion) {
      throw CheckpointError(CheckpointError::Code::kVersionMismatch,
                            "checkpoint: format_version " + std::to_string(version) + ", expected " +
                                std::to_string(kCheckpointVersion));
    }
    config = config_from_json(header.at("config"));
    for (const auto& h : header.at("head_specs")) {
      heads.push_back({h.at("dataset_id").get<std::string>(), h.at("num_classes").get<std::size_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(ParseError::Code::kMalformedHeader, std::string("checkpoint: malformed header: ") + e.what());
  }
  if (expected_encoder && *expected_encoder != config.encoder) {
    throw CheckpointError(CheckpointError::Code::kEncoderMismatch,
                          "checkpoint holds a " + std::string(to_string(config.encoder)) +
                              " encoder, request needs " + std::string(to_string(*expected_encoder)));
  }

  const std::size_t blob_start = 8 + header_len;
  const std::size_t blob_size = bytes.size() - blob_start;
  std::map<std::string, std::pair<Shape, std::size_t>> directory;
  try {
    if (header.at("blob_bytes").get<std::size_t>() != blob_size) {
      throw ParseError(ParseError::Code::kTruncated, "checkpoint: blob size differs from header");
    }
    for (const auto& p : header.at("parameters")) {
      directory[p.at("name").get<std::string>()] = {p.at("shape").get<Shape>(), p.at("offset").get<std::size_t>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(ParseError::Code::kMalformedHeader, std::string("checkpoint: malformed header: ") + e.what());
  }

  GptModel<T> model(config, heads, 0);
  if (directory.size() != model.parameters().size()) {
    for (const auto& [name, entry] : directory) {
      if (!model.has_parameter(name)) {
        throw ParseError(ParseError::Code::kMalformedHeader, "checkpoint: unexpected parameter " + name);
      }
    }
  }
  for (const auto& p : model.parameters()) {
    auto it = directory.find(p.name);
    if (it == directory.end()) {
      throw CheckpointError(CheckpointError::Code::kMissingParameter, "checkpoint: missing parameter " + p.name);
    }
    const auto& [shape, offset] = it->second;
    if (shape != p.tensor.shape()) {
      throw CheckpointError(CheckpointError::Code::kShapeMismatch,
                            "checkpoint: " + p.name + " has shape " + shape_string(shape) + ", model expects " +
                                shape_string(p.tensor.shape()));
    }
    const std::size_t n = p.tensor.numel();
    if (offset > blob_size || blob_size - offset < 4 * n) {
      throw ParseError(ParseError::Code::kTruncated, "checkpoint: blob too short for " + p.name);
    }
    auto dst = Tensor<T>(p.tensor).mutable_data();
    const auto* src = reinterpret_cast<const unsigned char*>(bytes.data() + blob_start + offset);
    for (std::size_t i = 0; i < n; ++i) {
      dst[i] = static_cast<T>(std::bit_cast<float>(read_le32(src + 4 * i)));
    }
  }
  return model;
}

template void save_checkpoint(const GptModel<float>&, const std::filesystem::path&);
template void save_checkpoint(const GptModel<double>&, const std::filesystem::path&);
template GptModel<float> load_checkpoint(const std::filesystem::path&, std::optional<EncoderKind>);
template GptModel<double> load_checkpoint(const std::filesystem::path&, std::optional<EncoderKind>);

}  // namespace scoregrade
