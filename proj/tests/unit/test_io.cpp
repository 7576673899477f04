#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "test_util.hpp"
#include "zap/io.hpp"

using namespace zap;

namespace {

std::vector<std::uint8_t> from_hex(const char* hex) {
  std::vector<std::uint8_t> out;
  for (const char* p = hex; *p;) {
    if (*p == ' ') {
      ++p;
      continue;
    }
    out.push_back(static_cast<std::uint8_t>(std::stoul(std::string(p, 2), nullptr, 16)));
    p += 2;
  }
  return out;
}

std::size_t format_error_offset(std::span<const std::uint8_t> bytes, bool weights) {
  try {
    if (weights) {
      WeightContainer::deserialize(bytes);
    } else {
      TinyImageSet::deserialize(bytes);
    }
  } catch (const FormatError& e) {
    return e.offset();
  }
  FAIL("no FormatError");
  return 0;
}

TinyImageSet tiny_set() {
  TinyImageSet s;
  s.channels = 1;
  s.height = 2;
  s.width = 2;
  s.classes = 3;
  s.images = {0, 255, 127, 128, 10, 20, 30, 40};
  s.labels = {2, 0};
  return s;
}

}  // namespace

TEST_CASE("weight container byte layout") {
  WeightContainer c;
  c.add("w", Tensor({2}, std::vector<float>{1.0f, -2.0f}));
  const auto bytes = c.serialize();
  // "ZAPW", version 1, 1 entry, name length 1, 'w', dtype 0, rank 1, extent 2, 1.0f, -2.0f
  const auto expected = from_hex(
      "5a415057 01000000 01000000 01000000 77 00000000 01000000 02000000 0000803f 000000c0");
  CHECK(bytes == expected);
  const WeightContainer back = WeightContainer::deserialize(expected);
  REQUIRE(back.size() == 1u);
  CHECK(*back.find("w") == *c.find("w"));
}

TEST_CASE("weight container round trip") {
  std::mt19937 rng(3);
  WeightContainer c;
  c.add("a", zap::test::random_tensor({3, 3, 2, 4}, rng));
  c.add("b.scalar", Tensor::scalar(0.25f));
  c.add("c", zap::test::random_tensor({5, 1, 2}, rng));
  const WeightContainer back = WeightContainer::deserialize(c.serialize());
  REQUIRE(back.size() == 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.entries()[i].name == c.entries()[i].name);
    CHECK(zap::test::bit_equal(back.entries()[i].tensor, c.entries()[i].tensor));
  }

  const auto path = std::filesystem::temp_directory_path() / "zap_test_io.zapw";
  c.save(path.string());
  CHECK(WeightContainer::load(path.string()).entries().size() == 3u);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(WeightContainer::load(path.string()), std::runtime_error);

  CHECK_THROWS_AS(c.add("a", Tensor::scalar(1.0f)), std::invalid_argument);
  c.set("a", Tensor::scalar(1.0f));
  CHECK(c.find("a")->size() == 1u);
}

TEST_CASE("corrupt weight containers report the offending offset") {
  WeightContainer c;
  c.add("w", Tensor({2}, std::vector<float>{1.0f, -2.0f}));
  auto bytes = c.serialize();

  auto bad = bytes;
  bad[0] = 'X';
  CHECK(format_error_offset(bad, true) == 0u);

  bad = bytes;
  bad[4] = 9;
  CHECK(format_error_offset(bad, true) == 4u);

  // Cut inside the payload: the reader fails where the payload starts.
  bad.assign(bytes.begin(), bytes.end() - 3);
  CHECK(format_error_offset(bad, true) == 29u);

  bad = bytes;
  bad[21] = 0;  // rank 0
  CHECK(format_error_offset(bad, true) == 21u);

  bad = bytes;
  bad.push_back(0);
  CHECK(format_error_offset(bad, true) == bytes.size());

  // Duplicate names: two copies of the same entry.
  auto dup = bytes;
  dup[8] = 2;
  dup.insert(dup.end(), bytes.begin() + 12, bytes.end());
  CHECK(format_error_offset(dup, true) == bytes.size());
}

TEST_CASE("image set round trip and batches") {
  const TinyImageSet s = tiny_set();
  const TinyImageSet back = TinyImageSet::deserialize(s.serialize());
  CHECK(back.images == s.images);
  CHECK(back.labels == s.labels);
  CHECK(back.classes == 3u);

  const Tensor b = s.batch(0, 2);
  CHECK(b.shape() == Shape{2, 1, 2, 2});
  CHECK(b[0] == -1.0f);
  CHECK(b[1] == 1.0f);
  CHECK(b[2] == doctest::Approx(127.0 / 127.5 - 1.0));

  const std::size_t idx[] = {1};
  CHECK(s.gather(idx) == s.batch(1, 1));
  CHECK(s.slice(1, 1).labels == std::vector<std::uint8_t>{0});
  CHECK_THROWS_AS(s.batch(1, 2), std::out_of_range);
  const std::size_t far[] = {2};
  CHECK_THROWS_AS(s.gather(far), std::out_of_range);
}

TEST_CASE("invalid image sets") {
  TinyImageSet s = tiny_set();
  s.labels[0] = 3;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  CHECK_THROWS_AS(s.serialize(), std::invalid_argument);

  auto bytes = tiny_set().serialize();
  bytes[bytes.size() - 1] = 7;
  CHECK(format_error_offset(bytes, false) == bytes.size() - 1);

  bytes = tiny_set().serialize();
  bytes[2] = 0;
  CHECK(format_error_offset(bytes, false) == 0u);
  bytes = tiny_set().serialize();
  bytes[12] = 0;  // zero channels
  CHECK(format_error_offset(bytes, false) == 8u);

  bytes = tiny_set().serialize();
  std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + 30);
  CHECK(format_error_offset(cut, false) == 28u);

  CHECK_THROWS_AS(TinyImageSet{}.validate(), std::invalid_argument);
}
