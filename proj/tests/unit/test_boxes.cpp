#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "../oracles.hpp"
#include "tridet/boxes.hpp"

using namespace tridet;

namespace {

BBox random_box(std::mt19937_64& rng, double lo = 0.0, double hi = 64.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  double a = u(rng), b = u(rng), c = u(rng), d = u(rng);
  if (a == b) b += 1.0;
  if (c == d) d += 1.0;
  return {std::min(a, b), std::min(c, d), std::max(a, b), std::max(c, d)};
}

// Integer grids make exact IoU ties and repeated scores common.
std::vector<Detection> random_case(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count(0, 10), coord(0, 12), cls(1, 3), score(1, 5);
  std::vector<Detection> dets(count(rng));
  for (auto& d : dets) {
    int x = coord(rng), y = coord(rng);
    d.bbox = {double(x), double(y), double(x + 2 + coord(rng) / 2), double(y + 2 + coord(rng) / 2)};
    d.class_id = cls(rng);
    d.score = score(rng) / 5.0;
  }
  return dets;
}

}  // namespace

TEST_CASE("iou examples") {
  BBox b{1, 2, 7, 9};
  CHECK(iou(b, b) == 1.0);
  CHECK(iou({0, 0, 10, 10}, {20, 20, 30, 30}) == 0.0);
  CHECK(iou({0, 0, 10, 10}, {5, 0, 15, 10}) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK_THROWS_AS(iou({0, 0, 0, 5}, b), InvalidBox);
  CHECK_THROWS_AS(iou({0, 0, NAN, 5}, b), InvalidBox);
}

TEST_CASE("iou is symmetric, bounded and matches the oracle") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 1000; ++i) {
    BBox a = random_box(rng), b = random_box(rng);
    const double v = iou(a, b);
    CHECK(v == iou(b, a));
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(v == doctest::Approx(oracle::iou(a, b)).epsilon(1e-15));
    if (!(a == b)) CHECK(v < 1.0);
  }
}

TEST_CASE("nms examples") {
  std::vector<Detection> two{{{0, 0, 10, 10}, 1, 0.9}, {{0, 0, 10, 8}, 1, 0.8}};
  auto kept = nms_per_class(two, 0.3);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == 0.9);

  std::vector<Detection> cross{{{0, 0, 10, 10}, 1, 0.9}, {{0, 0, 10, 10}, 2, 0.8}};
  CHECK(nms_per_class(cross, 0.3).size() == 2);
  CHECK(nms_per_class(std::vector<Detection>{}, 0.3).empty());
}

TEST_CASE("nms keeps boxes at exactly the threshold") {
  // IoU of these two is exactly 0.5.
  std::vector<Detection> dets{{{0, 0, 3, 1}, 1, 0.9}, {{1, 0, 3, 1}, 1, 0.8}};
  REQUIRE(iou(dets[0].bbox, dets[1].bbox) == 2.0 / 3.0);
  CHECK(nms_per_class(dets, 2.0 / 3.0).size() == 2);
  CHECK(nms_per_class(dets, 0.6).size() == 1);
}

TEST_CASE("nms matches the brute-force reference on 1000 cases") {
  std::mt19937_64 rng(2024);
  for (int t = 0; t < 1000; ++t) {
    auto dets = random_case(rng);
    for (double th : {0.1, 0.3, 0.5, 0.7}) {
      CHECK(nms_per_class(dets, th) == oracle::nms(dets, th));
    }
  }
}

TEST_CASE("nms output does not depend on input order for distinct scores") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 200; ++t) {
    auto dets = random_case(rng);
    for (auto& d : dets) d.score = u(rng);
    auto ref = nms_per_class(dets, 0.4);
    std::shuffle(dets.begin(), dets.end(), rng);
    CHECK(nms_per_class(dets, 0.4) == ref);
  }
}

TEST_CASE("nms_indices orders ties by index") {
  std::vector<BBox> boxes{{0, 0, 1, 1}, {5, 5, 6, 6}, {9, 9, 10, 10}};
  std::vector<double> scores{0.5, 0.7, 0.5};
  CHECK(nms_indices(boxes, scores, 0.5) == std::vector<std::size_t>{1, 0, 2});
  CHECK_THROWS(nms_indices(boxes, std::vector<double>{0.1}, 0.5));
}

TEST_CASE("delta examples") {
  BBox b{3, 4, 9, 15};
  auto z = encode_deltas(b, b);
  CHECK(z.dx == 0.0);
  CHECK(z.dy == 0.0);
  CHECK(z.dw == 0.0);
  CHECK(z.dh == 0.0);
  CHECK(decode_deltas(b, {}) == b);

  auto d = encode_deltas({0, 0, 10, 10}, {0, 0, 20, 10});
  CHECK(d.dx == doctest::Approx(0.5));
  CHECK(d.dy == 0.0);
  CHECK(d.dw == doctest::Approx(std::log(2.0)));
  CHECK(d.dh == 0.0);

  BBox w = decode_deltas({0, 0, 10, 10}, {0, 0, std::log(2.0), 0});
  CHECK(w.x1 == doctest::Approx(-5.0));
  CHECK(w.y1 == doctest::Approx(0.0));
  CHECK(w.x2 == doctest::Approx(15.0));
  CHECK(w.y2 == doctest::Approx(10.0));
}

TEST_CASE("encode and decode are inverse") {
  std::mt19937_64 rng(77);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    BBox a = random_box(rng, 0, 40), b = random_box(rng, 0, 40);
    // keep the size ratio under the clamp
    if (b.width() > 15 * a.width() || b.height() > 15 * a.height()) continue;
    BBox r = decode_deltas(a, encode_deltas(a, b));
    worst = std::max({worst, std::fabs(r.x1 - b.x1), std::fabs(r.y1 - b.y1),
                      std::fabs(r.x2 - b.x2), std::fabs(r.y2 - b.y2)});
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("decode clamps extreme size deltas") {
  BBox r = decode_deltas({0, 0, 1, 1}, {0, 0, 100, 100});
  CHECK(std::isfinite(r.x2));
  CHECK(r.width() == doctest::Approx(16.0));
}

TEST_CASE("clip keeps boxes inside the image") {
  BBox c = clip_box({-5, -3, 70, 30}, 64, 64);
  CHECK(c == BBox{0, 0, 64, 30});
}
