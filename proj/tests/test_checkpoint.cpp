#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>

#include "amg/checkpoint.hpp"
#include "amg/vit.hpp"
#include "support/testutil.hpp"

using amg::ModelSpec;
using amg::Tensor;
using amg::VitModel;
using testutil::SplitMix64;

namespace {

ModelSpec tiny_spec() { return ModelSpec::uniform(8, 4, 8, 2, 2, 4, 3); }

std::filesystem::path temp_path(const char* name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("fnv1a64 matches published test vectors", "[checkpoint]") {
  REQUIRE(amg::fnv1a64(std::string{}) == 0xcbf29ce484222325ULL);
  REQUIRE(amg::fnv1a64(std::string{"a"}) == 0xaf63dc4c8601ec8cULL);
  REQUIRE(amg::fnv1a64(std::string{"foobar"}) == 0x85944171f73967e8ULL);
  REQUIRE(amg::hash_hex(0xcbf29ce484222325ULL) == "cbf29ce484222325");
}

TEST_CASE("checkpoint round-trips bitwise", "[checkpoint]") {
  SplitMix64 rng(41);
  VitModel m = VitModel::init(tiny_spec(), 5);
  const auto path = temp_path("amg_ckpt_roundtrip.bin");
  amg::save_checkpoint(m, path.string());
  VitModel loaded = amg::load_checkpoint(path.string());

  auto pa = m.named_parameters();
  auto pb = loaded.named_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(pa[i].first == pb[i].first);
    REQUIRE(pa[i].second.shape() == pb[i].second.shape());
    REQUIRE(std::memcmp(pa[i].second.data().data(), pb[i].second.data().data(),
                        pa[i].second.numel() * sizeof(double)) == 0);
  }

  Tensor images = amg::Tensor::zeros({2, 1, 8, 8});
  testutil::fill_uniform(images, rng, -1.0, 1.0);
  Tensor la = m.forward(images);
  Tensor lb = loaded.forward(images);
  REQUIRE(std::memcmp(la.data().data(), lb.data().data(), la.numel() * sizeof(double)) == 0);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint preserves pruning state", "[checkpoint]") {
  VitModel m = VitModel::init(ModelSpec::uniform(16, 4, 32, 4, 4, 8, 4), 8);
  amg::remove_heads(m, 1, {0, 2});
  amg::apply_kv_index(m, 2, {0, 3, 5, 9});
  const auto path = temp_path("amg_ckpt_pruned.bin");
  amg::save_checkpoint(m, path.string());
  VitModel loaded = amg::load_checkpoint(path.string());
  REQUIRE(loaded.spec.heads_per_layer == std::vector<int>{4, 2, 4, 4});
  REQUIRE(loaded.layers[1].head_ids == std::vector<int>{1, 3});
  REQUIRE(loaded.spec.retained_kv_indices[2] == std::vector<int>{0, 3, 5, 9});
  REQUIRE(loaded.layers[1].wq.shape() == amg::Shape{32, 16});
  REQUIRE(loaded.layers[1].wo.shape() == amg::Shape{16, 32});
  std::filesystem::remove(path);
}

TEST_CASE("serialization is deterministic and content-sensitive", "[checkpoint]") {
  VitModel a = VitModel::init(tiny_spec(), 5);
  VitModel b = VitModel::init(tiny_spec(), 5);
  REQUIRE(amg::serialize_checkpoint(a) == amg::serialize_checkpoint(b));
  b.head_b.data()[0] = 1.0;
  REQUIRE(amg::serialize_checkpoint(a) != amg::serialize_checkpoint(b));
}

TEST_CASE("checkpoint loader rejects damage", "[checkpoint]") {
  VitModel m = VitModel::init(tiny_spec(), 5);
  const std::string bytes = amg::serialize_checkpoint(m);

  SECTION("missing file names the path") {
    try {
      amg::load_checkpoint("/nonexistent/amg.ckpt");
      FAIL("expected IoError");
    } catch (const amg::IoError& e) {
      REQUIRE(std::string(e.what()).find("/nonexistent/amg.ckpt") != std::string::npos);
    }
  }
  SECTION("truncated data") {
    REQUIRE_THROWS_AS(amg::deserialize_checkpoint(bytes.substr(0, bytes.size() - 8)), amg::IoError);
  }
  SECTION("no header separator") {
    std::string all_text(100, 'x');
    REQUIRE_THROWS_AS(amg::deserialize_checkpoint(all_text), amg::IoError);
  }
  SECTION("header not JSON") {
    std::string broken = bytes;
    broken[0] = '!';
    REQUIRE_THROWS_AS(amg::deserialize_checkpoint(broken), amg::IoError);
  }
  SECTION("unknown format tag") {
    std::string tag = bytes;
    const auto pos = tag.find("amg-ckpt-1");
    tag.replace(pos, 10, "amg-ckpt-9");
    REQUIRE_THROWS_AS(amg::deserialize_checkpoint(tag), amg::IoError);
  }
}
