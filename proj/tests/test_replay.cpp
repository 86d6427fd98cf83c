#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "meow/replay.hpp"

using namespace meow;

namespace {

// Transitions tagged by a counter so ring order is visible.
void push_tagged(ReplayBuffer& buf, double tag) {
  buf.push({tag, tag}, {tag}, tag, {tag + 0.5, tag + 0.5}, false);
}

}  // namespace

TEST_CASE("ring overwrites the oldest entry first") {
  ReplayBuffer buf(4, 2, 1);
  for (int i = 1; i <= 5; ++i) push_tagged(buf, i);

  CHECK(buf.size() == 4);
  CHECK(buf.at(0).s[0] == 2.0);  // 1 evicted
  CHECK(buf.at(3).s[0] == 5.0);
  CHECK(buf.at(3).s_next[0] == 5.5);

  // Wrap several more times; the newest four survive in order.
  for (int i = 6; i <= 13; ++i) push_tagged(buf, i);
  for (int i = 0; i < 4; ++i) {
    CHECK(buf.at(i).s[0] == 10.0 + i);
    CHECK(buf.at(i).r == 10.0 + i);
  }
}

TEST_CASE("logical order before the ring fills") {
  ReplayBuffer buf(8, 1, 1);
  buf.push({1}, {10}, 0.5, {2}, false);
  buf.push({3}, {20}, -0.5, {4}, true);
  CHECK(buf.size() == 2);
  CHECK(buf.at(0).a[0] == 10.0);
  CHECK(buf.at(1).a[0] == 20.0);
  CHECK(buf.at(1).done);
  CHECK_FALSE(buf.at(0).done);
  CHECK_THROWS_AS((void)buf.at(2), Error);
}

TEST_CASE("sampling a single-item buffer returns that item") {
  ReplayBuffer buf(16, 1, 1);
  buf.push({7}, {8}, 9, {10}, false);
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    std::vector<size_t> idx = buf.sample_indices(1, rng);
    REQUIRE(idx.size() == 1);
    CHECK(idx[0] == 0);
  }
}

TEST_CASE("sampling is uniform over the contents") {
  ReplayBuffer buf(10, 2, 1);
  for (int i = 0; i < 10; ++i) push_tagged(buf, i);

  const int kDraws = 100000;
  Rng rng(42);
  std::vector<int> counts(10, 0);
  std::vector<size_t> idx = buf.sample_indices(kDraws, rng);
  for (size_t i : idx) {
    REQUIRE(i < 10);
    ++counts[i];
  }

  // Chi-square against the uniform law: 9 degrees of freedom, the p > 0.01
  // acceptance region is stat < 21.666.
  double expected = kDraws / 10.0;
  double stat = 0.0;
  for (int c : counts) stat += (c - expected) * (c - expected) / expected;
  CHECK(stat < 21.666);
}

TEST_CASE("sampling rejects an empty buffer and bad counts") {
  ReplayBuffer buf(4, 2, 2);
  Rng rng(3);
  CHECK_THROWS_AS((void)buf.sample_indices(1, rng), Error);
  buf.push({0, 0}, {0, 0}, 0, {0, 0}, false);
  CHECK_THROWS_AS((void)buf.sample_indices(0, rng), Error);
  CHECK(buf.sample_indices(3, rng).size() == 3);
}

TEST_CASE("push validates shapes and finiteness") {
  ReplayBuffer buf(4, 2, 1);
  double inf = std::numeric_limits<double>::infinity();
  double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(buf.push({1}, {0}, 0, {1, 1}, false), ShapeError);
  CHECK_THROWS_AS(buf.push({1, 1}, {0, 0}, 0, {1, 1}, false), ShapeError);
  CHECK_THROWS_AS(buf.push({1, 1}, {0}, 0, {1}, false), ShapeError);
  CHECK_THROWS_AS(buf.push({1, nan}, {0}, 0, {1, 1}, false), NumericError);
  CHECK_THROWS_AS(buf.push({1, 1}, {inf}, 0, {1, 1}, false), NumericError);
  CHECK_THROWS_AS(buf.push({1, 1}, {0}, nan, {1, 1}, false), NumericError);
  CHECK_THROWS_AS(buf.push({1, 1}, {0}, 0, {-inf, 1}, false), NumericError);
  CHECK(buf.size() == 0);  // nothing partial got stored
  buf.push({1, 1}, {0}, 0, {1, 1}, false);
  CHECK(buf.size() == 1);
}

TEST_CASE("constructor validates its arguments") {
  CHECK_THROWS_AS(ReplayBuffer(0, 2, 2), Error);
  CHECK_THROWS_AS(ReplayBuffer(4, 0, 2), Error);
  CHECK_THROWS_AS(ReplayBuffer(4, 2, -1), Error);
}
