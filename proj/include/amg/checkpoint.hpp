#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "amg/errors.hpp"
#include "amg/vit.hpp"

namespace amg {

inline std::uint64_t fnv1a64(const unsigned char* p, std::size_t n) {
  std::uint64_t h = 14695981039346656037ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(reinterpret_cast<const unsigned char*>(s.data()), s.size());
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline std::uint64_t file_content_hash(const std::string& path) {
  return fnv1a64(read_file_bytes(path));
}

inline std::string hash_hex(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

namespace detail {

inline void append_f64_le(std::string& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<char>(bits & 0xff));
    bits >>= 8;
  }
}

inline double read_f64_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
  return std::bit_cast<double>(bits);
}

inline nlohmann::json spec_to_json(const ModelSpec& s) {
  nlohmann::json j;
  j["image_size"] = s.image_size;
  j["patch_size"] = s.patch_size;
  j["channels"] = s.channels;
  j["embed_dim"] = s.embed_dim;
  j["layers"] = s.layers;
  j["heads_per_layer"] = s.heads_per_layer;
  j["head_dim"] = s.head_dim;
  j["mlp_ratio"] = s.mlp_ratio;
  j["num_classes"] = s.num_classes;
  j["retained_kv_indices"] = s.retained_kv_indices;
  return j;
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  try {
    s.image_size = j.at("image_size").get<int>();
    s.patch_size = j.at("patch_size").get<int>();
    s.channels = j.at("channels").get<int>();
    s.embed_dim = j.at("embed_dim").get<int>();
    s.layers = j.at("layers").get<int>();
    s.heads_per_layer = j.at("heads_per_layer").get<std::vector<int>>();
    s.head_dim = j.at("head_dim").get<int>();
    s.mlp_ratio = j.at("mlp_ratio").get<double>();
    s.num_classes = j.at("num_classes").get<int>();
    s.retained_kv_indices = j.at("retained_kv_indices").get<std::vector<std::vector<int>>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed spec in checkpoint header: ") + e.what());
  }
  return s;
}

}  // namespace detail

// amg-ckpt-1: a JSON text header (format tag, spec, original head ids, tensor
// manifest with shapes and byte offsets), a single NUL, then the tensors as
// little-endian f64 in manifest order. Same model state always serializes to
// identical bytes.
inline std::string serialize_checkpoint(VitModel& model) {
  nlohmann::json header;
  header["format"] = "amg-ckpt-1";
  header["spec"] = detail::spec_to_json(model.spec);
  nlohmann::json head_ids = nlohmann::json::array();
  for (const auto& l : model.layers) head_ids.push_back(l.head_ids);
  header["head_ids"] = head_ids;

  std::string blob;
  nlohmann::json manifest = nlohmann::json::array();
  for (auto& [name, t] : model.named_parameters()) {
    nlohmann::json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["offset"] = blob.size();
    manifest.push_back(entry);
    for (double v : t.data()) detail::append_f64_le(blob, v);
  }
  header["manifest"] = manifest;

  std::string out = header.dump();
  out.push_back('\0');
  out += blob;
  return out;
}

inline void save_checkpoint(VitModel& model, const std::string& path) {
  const std::string bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path);
}

inline VitModel deserialize_checkpoint(const std::string& bytes) {
  const std::size_t sep = bytes.find('\0');
  if (sep == std::string::npos) throw IoError("checkpoint missing header separator");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, sep));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (!header.contains("format") || header["format"] != "amg-ckpt-1") {
    throw IoError("unsupported checkpoint format (want amg-ckpt-1)");
  }
  ModelSpec spec = detail::spec_from_json(header.at("spec"));
  spec.validate();
  VitModel model = VitModel::allocate(spec);

  if (header.contains("head_ids")) {
    const auto ids = header["head_ids"].get<std::vector<std::vector<int>>>();
    if (static_cast<int>(ids.size()) != spec.layers) {
      throw IoError("head_ids entry count does not match layer count");
    }
    for (int l = 0; l < spec.layers; ++l) {
      if (static_cast<int>(ids[static_cast<std::size_t>(l)].size()) != spec.heads(l)) {
        throw IoError("head_ids length mismatch at layer " + std::to_string(l));
      }
      model.layers[static_cast<std::size_t>(l)].head_ids = ids[static_cast<std::size_t>(l)];
    }
  }

  auto params = model.named_parameters();
  const auto& manifest = header.at("manifest");
  if (manifest.size() != params.size()) {
    throw IoError("manifest lists " + std::to_string(manifest.size()) + " tensors, model needs " +
                  std::to_string(params.size()));
  }
  const unsigned char* blob = reinterpret_cast<const unsigned char*>(bytes.data()) + sep + 1;
  const std::size_t blob_size = bytes.size() - sep - 1;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = manifest[i];
    auto& [name, tensor] = params[i];
    if (entry.at("name").get<std::string>() != name) {
      throw IoError("manifest entry " + std::to_string(i) + " is '" +
                    entry.at("name").get<std::string>() + "', expected '" + name + "'");
    }
    const Shape shape = entry.at("shape").get<Shape>();
    if (shape != tensor.shape()) {
      throw IoError("tensor '" + name + "' has shape " + shape_str(shape) + " in manifest, spec needs " +
                    shape_str(tensor.shape()));
    }
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    const std::size_t need = tensor.numel() * 8;
    if (offset + need > blob_size) {
      throw IoError("tensor '" + name + "' extends past end of checkpoint data");
    }
    for (std::size_t j = 0; j < tensor.numel(); ++j) {
      tensor.data()[j] = detail::read_f64_le(blob + offset + j * 8);
    }
  }
  return model;
}

inline VitModel load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(read_file_bytes(path));
}

}  // namespace amg
