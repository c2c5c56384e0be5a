#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "amg/checkpoint.hpp"
#include "amg/errors.hpp"
#include "amg/rng.hpp"
#include "amg/tensor.hpp"

namespace amg {

struct Batch {
  Tensor images;  // [B, C, S, S]
  std::vector<int> labels;
};

struct DatasetConfig {
  int image_size = 16;
  int channels = 1;
  int num_classes = 4;
  int train_size = 64;
  int val_size = 32;
  // Side length of the square cells that carry either class signal or
  // per-sample distractor content.
  int cell_size = 4;
  double noise = 0.25;
  std::uint64_t seed = 1;
};

// Each class owns a few fixed home cells, and the label is the one class
// whose stamp sits at ALL of its homes: rival classes show up with one home
// missing, and free cells carry stray stamps at foreign positions. Content
// pooling, single-position checks and position-blind matching all stay
// ambiguous; only joining a stamp with its full home set settles the label.
// Every sample is a pure function of (seed, split, index), so the train and
// val streams are disjoint and any slice regenerates bit for bit.
class SyntheticDataset {
 public:
  explicit SyntheticDataset(const DatasetConfig& config) : config_(config) {
    if (config.num_classes < 1 || config.image_size < 1 || config.channels < 1) {
      throw ConfigError("synthetic dataset needs positive classes, image size and channels");
    }
    if (config.train_size < 1 || config.val_size < 0) {
      throw ConfigError("synthetic dataset needs a nonempty train split");
    }
    if (config.cell_size < 1 || config.image_size % config.cell_size != 0) {
      throw ConfigError("image size " + std::to_string(config.image_size) +
                        " not divisible into cells of " + std::to_string(config.cell_size));
    }
    const int grid = config.image_size / config.cell_size;
    const int cells = grid * grid;

    std::vector<int> order(static_cast<std::size_t>(cells));
    for (int i = 0; i < cells; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng cell_rng(mix_seed(config.seed, 0xce11, 0));
    for (int i = cells - 1; i > 0; --i) {
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(cell_rng.uniform_int(0, i))]);
    }
    const int per_class = std::max(1, cells / (2 * config.num_classes));

    std::vector<int> home_of_cell(static_cast<std::size_t>(cells), -1);
    for (int c = 0; c < config.num_classes; ++c) {
      std::vector<int> homes;
      for (int k = 0; k < per_class; ++k) {
        const int cell = order[static_cast<std::size_t>((c * per_class + k) % cells)];
        if (home_of_cell[static_cast<std::size_t>(cell)] < 0) {
          home_of_cell[static_cast<std::size_t>(cell)] = c;
          homes.push_back(cell);
        }
      }
      home_cells_.push_back(std::move(homes));
    }
    for (int cell = 0; cell < cells; ++cell) {
      if (home_of_cell[static_cast<std::size_t>(cell)] < 0) free_cells_.push_back(cell);
    }
    cells_ = cells;

    const std::size_t stamp_len = static_cast<std::size_t>(config.channels) * config.cell_size *
                                  config.cell_size;
    for (int c = 0; c < config.num_classes; ++c) {
      Rng rng(mix_seed(config.seed, 0xc1a5, static_cast<std::uint64_t>(c)));
      std::vector<double> stamp(stamp_len);
      for (auto& v : stamp) v = kSignalScale * rng.normal();
      stamps_.push_back(std::move(stamp));
    }
  }

  const DatasetConfig& config() const { return config_; }
  int train_size() const { return config_.train_size; }
  int val_size() const { return config_.val_size; }

  int label_of(int index) const { return index % config_.num_classes; }

  // split: 0 = train, 1 = val
  void write_sample(int split, int index, double* out) const {
    const int label = label_of(index);
    Rng rng(mix_seed(config_.seed, split == 0 ? 0x7a11 : 0x7a22,
                     static_cast<std::uint64_t>(index)));

    // Stamp owner per cell for this sample: the label keeps all of its homes,
    // every rival class keeps all but one, and a few free cells carry stray
    // stamps.
    std::vector<int> owner(static_cast<std::size_t>(cells_), -1);
    for (int c = 0; c < config_.num_classes; ++c) {
      const auto& homes = home_cells_[static_cast<std::size_t>(c)];
      int skip = -1;
      if (c != label) {
        skip = homes.size() > 1 ? rng.uniform_int(0, static_cast<int>(homes.size()) - 1)
                                : static_cast<int>(homes.size()) - 1;
      }
      for (std::size_t k = 0; k < homes.size(); ++k) {
        if (static_cast<int>(k) == skip) continue;
        owner[static_cast<std::size_t>(homes[k])] = c;
      }
    }
    if (!free_cells_.empty()) {
      std::vector<int> pool = free_cells_;
      const int decoys =
          std::min(static_cast<int>(pool.size()), std::max(1, static_cast<int>(pool.size()) / 4));
      for (int k = 0; k < decoys; ++k) {
        const int pick = rng.uniform_int(0, static_cast<int>(pool.size()) - 1);
        const int cls = rng.uniform_int(0, config_.num_classes - 1);
        owner[static_cast<std::size_t>(pool[static_cast<std::size_t>(pick)])] = cls;
        pool.erase(pool.begin() + pick);
      }
    }

    const std::size_t pixels = static_cast<std::size_t>(config_.channels) * config_.image_size *
                               config_.image_size;
    for (std::size_t i = 0; i < pixels; ++i) {
      const double distractor = rng.normal();
      const double jitter = rng.normal();
      const int cls = owner[cell_of(i)];
      const double base =
          cls >= 0 ? stamps_[static_cast<std::size_t>(cls)][stamp_offset(i)] : kDistractorScale * distractor;
      out[i] = base + config_.noise * jitter;
    }
  }

  Batch make_batch(int split, const std::vector<int>& indices) const {
    if (indices.empty()) throw ContractError("a batch needs at least one sample");
    const int limit = split == 0 ? config_.train_size : config_.val_size;
    Batch b;
    b.images = Tensor::zeros({static_cast<int>(indices.size()), config_.channels,
                              config_.image_size, config_.image_size});
    const std::size_t pixels = static_cast<std::size_t>(config_.channels) * config_.image_size *
                               config_.image_size;
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const int idx = indices[i];
      if (idx < 0 || idx >= limit) {
        throw ContractError("sample index " + std::to_string(idx) + " outside split of " +
                            std::to_string(limit));
      }
      write_sample(split, idx, b.images.data().data() + i * pixels);
      b.labels.push_back(label_of(idx));
    }
    return b;
  }

  // Consecutive fixed-order batches covering a whole split.
  std::vector<Batch> batches(int split, int batch_size) const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    const int limit = split == 0 ? config_.train_size : config_.val_size;
    std::vector<Batch> out;
    for (int start = 0; start < limit; start += batch_size) {
      std::vector<int> idx;
      for (int i = start; i < std::min(limit, start + batch_size); ++i) idx.push_back(i);
      out.push_back(make_batch(split, idx));
    }
    return out;
  }

  std::vector<Batch> train_batches(int batch_size) const { return batches(0, batch_size); }
  std::vector<Batch> val_batches(int batch_size) const { return batches(1, batch_size); }

 private:
  static constexpr double kSignalScale = 3.0;
  static constexpr double kDistractorScale = 1.0;

  // Flat pixel offset to flat cell id, channels folded onto the same grid.
  std::size_t cell_of(std::size_t pixel) const {
    const int S = config_.image_size;
    const int cell = config_.cell_size;
    const std::size_t plane = pixel % static_cast<std::size_t>(S * S);
    const int row = static_cast<int>(plane) / S;
    const int col = static_cast<int>(plane) % S;
    return static_cast<std::size_t>((row / cell) * (S / cell) + col / cell);
  }

  // Position within the stamp for a flat pixel offset.
  std::size_t stamp_offset(std::size_t pixel) const {
    const int S = config_.image_size;
    const int cell = config_.cell_size;
    const std::size_t channel = pixel / static_cast<std::size_t>(S * S);
    const std::size_t plane = pixel % static_cast<std::size_t>(S * S);
    const int row = static_cast<int>(plane) / S;
    const int col = static_cast<int>(plane) % S;
    return (channel * static_cast<std::size_t>(cell) + static_cast<std::size_t>(row % cell)) *
               static_cast<std::size_t>(cell) +
           static_cast<std::size_t>(col % cell);
  }

  DatasetConfig config_;
  std::vector<std::vector<double>> stamps_;
  std::vector<std::vector<int>> home_cells_;
  std::vector<int> free_cells_;
  int cells_ = 0;
};

// amg-data-1: JSON header (geometry plus all labels) then the image tensors
// as little-endian f64, sample-major.
inline void save_dataset(const std::string& path, const std::vector<Batch>& batches) {
  if (batches.empty()) throw ContractError("refusing to write an empty dataset");
  const Shape& s = batches.front().images.shape();
  nlohmann::json header;
  header["format"] = "amg-data-1";
  header["channels"] = s[1];
  header["image_size"] = s[2];
  std::vector<int> labels;
  std::size_t count = 0;
  for (const auto& b : batches) {
    if (b.images.rank() != 4 || b.images.dim(1) != s[1] || b.images.dim(2) != s[2] ||
        b.images.dim(3) != s[3]) {
      throw ContractError("dataset batches disagree on image geometry");
    }
    if (static_cast<int>(b.labels.size()) != b.images.dim(0)) {
      throw ContractError("batch label count does not match batch size");
    }
    labels.insert(labels.end(), b.labels.begin(), b.labels.end());
    count += static_cast<std::size_t>(b.images.dim(0));
  }
  header["count"] = count;
  header["labels"] = labels;

  std::string out = header.dump();
  out.push_back('\0');
  for (const auto& b : batches) {
    for (double v : b.images.data()) detail::append_f64_le(out, v);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write to " + path);
}

inline std::vector<Batch> load_dataset(const std::string& path, int batch_size) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  const std::string bytes = read_file_bytes(path);
  const std::size_t sep = bytes.find('\0');
  if (sep == std::string::npos) throw IoError("dataset file missing header separator: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, sep));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("dataset header is not valid JSON: ") + e.what());
  }
  if (!header.contains("format") || header["format"] != "amg-data-1") {
    throw IoError("unsupported dataset format in " + path + " (want amg-data-1)");
  }
  const int channels = header.at("channels").get<int>();
  const int image_size = header.at("image_size").get<int>();
  const auto labels = header.at("labels").get<std::vector<int>>();
  const std::size_t count = header.at("count").get<std::size_t>();
  if (labels.size() != count) throw IoError("dataset label count disagrees with header count");
  const std::size_t pixels =
      static_cast<std::size_t>(channels) * image_size * image_size;
  if (bytes.size() - sep - 1 < count * pixels * 8) {
    throw IoError("dataset file truncated: " + path);
  }
  const unsigned char* blob = reinterpret_cast<const unsigned char*>(bytes.data()) + sep + 1;
  std::vector<Batch> out;
  std::size_t cursor = 0;
  while (cursor < count) {
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(batch_size), count - cursor);
    Batch b;
    b.images = Tensor::zeros({static_cast<int>(take), channels, image_size, image_size});
    for (std::size_t i = 0; i < take * pixels; ++i) {
      b.images.data()[i] = detail::read_f64_le(blob + (cursor * pixels + i) * 8);
    }
    for (std::size_t i = 0; i < take; ++i) b.labels.push_back(labels[cursor + i]);
    out.push_back(std::move(b));
    cursor += take;
  }
  return out;
}

}  // namespace amg
