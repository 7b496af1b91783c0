#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "detox/error.hpp"
#include "detox/tensor.hpp"
#include "detox/util.hpp"
#include "support.hpp"

namespace detox {
namespace {

TEST(Rng, SameSeedSameSequence) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(a.next_u64(), b.next_u64());
    EXPECT_EQ(a.normal(), b.normal());
  }
}

TEST(Rng, UniformAndIndexStayInRange) {
  Rng r(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(r.index(7), 7u);
  }
}

TEST(Rng, NormalMomentsRoughlyStandard) {
  Rng r(3);
  double sum = 0, sq = 0;
  const int n = 50000;
  for (int i = 0; i < n; ++i) {
    const double v = r.normal();
    sum += v;
    sq += v * v;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.03);
  EXPECT_NEAR(sq / n, 1.0, 0.03);
}

TEST(DeriveSeed, DeterministicAndTagSensitive) {
  EXPECT_EQ(derive_seed(5, "a"), derive_seed(5, "a"));
  EXPECT_NE(derive_seed(5, "a"), derive_seed(5, "b"));
  EXPECT_NE(derive_seed(5, "a"), derive_seed(6, "a"));
}

TEST(Permutation, IsAPermutation) {
  auto p = permutation(100, 9);
  std::vector<std::size_t> sorted = p;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> expected(100);
  std::iota(expected.begin(), expected.end(), 0);
  EXPECT_EQ(sorted, expected);
  EXPECT_EQ(p, permutation(100, 9));
  EXPECT_NE(p, permutation(100, 10));
}

TEST(Sha256, KnownDigest) {
  EXPECT_EQ(sha256_hex(std::string_view("abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  const std::vector<std::uint8_t> ab = {'a', 'b'}, c = {'c'};
  Hasher h;
  h.update(std::span<const std::uint8_t>(ab)).update(std::span<const std::uint8_t>(c));
  EXPECT_EQ(h.hex(), sha256_hex(std::string_view("abc")));
}

TEST(Hasher, TextUpdatesAreLengthPrefixed) {
  Hasher x, y;
  x.update(std::string_view("a")).update(std::string_view("bc"));
  y.update(std::string_view("ab")).update(std::string_view("c"));
  EXPECT_NE(x.hex(), y.hex());
}

TEST(Base64, RoundTripAndKnownValue) {
  const std::string s = "hello";
  const std::vector<std::uint8_t> bytes(s.begin(), s.end());
  EXPECT_EQ(base64_encode(bytes), "aGVsbG8=");
  for (std::size_t n = 0; n < 20; ++n) {
    std::vector<std::uint8_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<std::uint8_t>(37 * i + 11);
    EXPECT_EQ(base64_decode(base64_encode(v)), v);
  }
}

TEST(FormatDouble, RoundTripsExactly) {
  Rng r(11);
  for (int i = 0; i < 1000; ++i) {
    const double v = (r.uniform() - 0.5) * std::pow(10.0, r.uniform(-20, 20));
    EXPECT_EQ(std::stod(format_double(v)), v);
  }
  EXPECT_EQ(format_double(0.5), "0.5");
  EXPECT_EQ(std::stod(format_double(0.1 + 0.2)), 0.1 + 0.2);
}

TEST(DoubleBytes, RoundTrip) {
  const std::vector<double> v = {0.0, -1.5, 3.25, std::numeric_limits<double>::denorm_min()};
  EXPECT_EQ(bytes_to_doubles(doubles_to_bytes(v)), v);
}

TEST(FileIo, TextAndBytesRoundTrip) {
  testing::TempDir dir;
  write_text_file(dir / "a/b.txt", "line\n");
  EXPECT_EQ(read_text_file(dir / "a/b.txt"), "line\n");
  const std::vector<std::uint8_t> bytes = {0, 1, 255};
  write_file_bytes(dir / "c.bin", bytes);
  EXPECT_EQ(read_file_bytes(dir / "c.bin"), bytes);
}

TEST(FileIo, MissingFileRaises) {
  try {
    read_text_file("/nonexistent/detox/file");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingFile);
  }
}

TEST(Tensor, ShapeAndSlices) {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.stride0(), 3u);
  EXPECT_EQ(t.slice(1)[0], 4.0);
  t.reshape({3, 2});
  EXPECT_EQ(t.dim(0), 3u);
  EXPECT_TRUE(t.all_finite());
  t[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
  EXPECT_EQ(shape_string({3, 32, 32}), "(3, 32, 32)");
}

}  // namespace
}  // namespace detox
