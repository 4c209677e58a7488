#include <gtest/gtest.h>

#include <atomic>
#include <set>

#include "tokmerge/common.hpp"

using namespace tokmerge;

TEST(Cosine, ZeroVectorIsZero) {
  const std::vector<double> a{0, 0, 0}, b{1, 2, 3};
  EXPECT_EQ(cosine(a, b), 0.0);
  EXPECT_EQ(cosine(b, a), 0.0);
}

TEST(Cosine, ParallelVectorsGiveExactlyOne) {
  const std::vector<double> a{1, 1, 0}, b{2, 2, 0}, c{1, 0, 0};
  EXPECT_EQ(cosine(a, a), 1.0);
  EXPECT_EQ(cosine(a, b), 1.0);
  EXPECT_EQ(cosine(c, c), cosine(a, a));
}

TEST(Cosine, HugeValuesStayFinite) {
  const std::vector<double> a{1e200, 0}, b{1e200, 1e200};
  EXPECT_NEAR(cosine(a, b), 1.0 / std::sqrt(2.0), 1e-15);
}

TEST(RelativeError, Frobenius) {
  Matrix a(1, 2), b(1, 2);
  b(0, 0) = 3;
  b(0, 1) = 4;
  a(0, 0) = 3;
  EXPECT_DOUBLE_EQ(relative_error(a, b), 4.0 / 5.0);
  EXPECT_EQ(relative_error(b, b), 0.0);
  EXPECT_THROW(relative_error(Matrix(2, 2), b), ConfigError);
}

TEST(FloorTolerant, AbsorbsRepresentationError) {
  EXPECT_EQ(floor_tolerant(1024 * (1 - 0.9)), 102);
  EXPECT_EQ(floor_tolerant(1000 * (1 - 0.9)), 100);
  EXPECT_EQ(floor_tolerant(16 * (1 - 0.97)), 0);
  EXPECT_EQ(ceil_tolerant(0.2 * 10), 2);
}

TEST(DeriveSeed, DistinctStreams) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 32; ++a)
    for (std::uint64_t b = 0; b < 32; ++b) seen.insert(derive_seed(7, a, b));
  EXPECT_EQ(seen.size(), 32u * 32u);
  EXPECT_EQ(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
  EXPECT_NE(derive_seed(1, 2, 3), derive_seed(2, 2, 3));
}

TEST(ParallelFor, VisitsEveryIndexOnce) {
  for (unsigned threads : {1u, 2u, 8u, 64u}) {
    std::vector<std::atomic<int>> hits(101);
    parallel_for(hits.size(), threads, [&](std::size_t i) { ++hits[i]; });
    for (auto& h : hits) EXPECT_EQ(h.load(), 1);
  }
}

TEST(ParallelFor, RethrowsWorkerError) {
  EXPECT_THROW(parallel_for(50, 4,
                            [](std::size_t i) {
                              if (i == 17) throw NumericError("boom");
                            }),
               NumericError);
}

TEST(Checksum, DependsOnBitsAndOrder) {
  const std::vector<double> a{1.0, 2.0}, b{2.0, 1.0}, z{0.0}, nz{-0.0};
  EXPECT_NE(checksum(a), checksum(b));
  EXPECT_NE(checksum(z), checksum(nz));
  EXPECT_EQ(checksum(a), checksum(std::vector<double>{1.0, 2.0}));
}

TEST(CheckFinite, Throws) {
  Matrix m(2, 2);
  EXPECT_NO_THROW(check_finite(m, "m"));
  m(1, 1) = NAN;
  EXPECT_THROW(check_finite(m, "m"), NumericError);
}

TEST(GatherRows, Order) {
  Matrix m(3, 1);
  m(0, 0) = 10;
  m(1, 0) = 11;
  m(2, 0) = 12;
  const std::vector<std::size_t> idx{2, 0, 2};
  const Matrix g = gather_rows(m, idx);
  EXPECT_EQ(g(0, 0), 12);
  EXPECT_EQ(g(1, 0), 10);
  EXPECT_EQ(g(2, 0), 12);
}
