#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "cogs/checkpoint.hpp"
#include "cogs/error.hpp"

using namespace cogs;

namespace {

nn::ParamStore sample_store() {
  nn::ParamStore s;
  s.insert("a", {2, 3}, {1, 2, 3, 4, 5, 6.5});
  s.insert("b.bias", {4}, {-1, 0.25, 0, 1e-3});
  return s;
}

}  // namespace

TEST(Checkpoint, RoundTripPreservesNamesShapesValues) {
  nlohmann::json meta{{"kind", "test"}, {"n", 3}};
  const ckpt::Archive a = ckpt::deserialize(ckpt::serialize(sample_store(), meta));
  EXPECT_EQ(a.metadata, meta);
  ASSERT_EQ(a.tensors.items().size(), 2u);
  EXPECT_EQ(a.tensors.get("a").shape(), (ag::Shape{2, 3}));
  EXPECT_EQ(a.tensors.get("a").values()[5], 6.5);
  EXPECT_EQ(a.tensors.get("b.bias").values()[3], double(float(1e-3)));
}

TEST(Checkpoint, TruncationIsDetected) {
  const std::vector<uint8_t> full = ckpt::serialize(sample_store(), {});
  for (size_t cut : {size_t(0), size_t(5), size_t(20), full.size() - 1}) {
    std::vector<uint8_t> part(full.begin(), full.begin() + long(cut));
    try {
      ckpt::deserialize(part);
      ADD_FAILURE() << "accepted truncated archive of " << cut << " bytes";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kFormat);
    }
  }
}

TEST(Checkpoint, HeaderShapeMustMatchByteCount) {
  std::vector<uint8_t> bytes = ckpt::serialize(sample_store(), {});
  uint64_t n = 0;
  std::memcpy(&n, bytes.data(), 8);
  std::string header(bytes.begin() + 8, bytes.begin() + 8 + long(n));
  auto j = nlohmann::json::parse(header);
  j["tensors"][0]["shape"] = {3, 3};
  const std::string text = j.dump();
  std::vector<uint8_t> out(8);
  const uint64_t m = text.size();
  std::memcpy(out.data(), &m, 8);
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), bytes.begin() + 8 + long(n), bytes.end());
  EXPECT_THROW(ckpt::deserialize(out), Error);
}

TEST(Checkpoint, AssignChecksShapes) {
  nn::ParamStore dst;
  dst.insert("a", {3, 2}, std::vector<double>(6));
  EXPECT_THROW(ckpt::assign(dst, sample_store(), "model"), Error);
  nn::ParamStore missing;
  missing.insert("c", {1}, {0});
  EXPECT_THROW(ckpt::assign(missing, sample_store(), "model"), Error);
}

TEST(Checkpoint, FileRoundTripAndMissingFile) {
  const auto path = std::filesystem::temp_directory_path() / "cogs_ckpt_test" / "x.ckpt";
  ckpt::save(path, sample_store(), {{"k", 1}});
  EXPECT_EQ(ckpt::load(path).tensors.get("a").values(), sample_store().get("a").values());
  try {
    ckpt::load(path.parent_path() / "absent.ckpt");
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIo);
  }
  std::filesystem::remove_all(path.parent_path());
}

TEST(Checkpoint, DigestIsStable) {
  EXPECT_EQ(ckpt::hex64(ckpt::fnv1a("", 0)), "cbf29ce484222325");
  EXPECT_EQ(ckpt::digest("a"), "af63dc4c8601ec8c");
}
