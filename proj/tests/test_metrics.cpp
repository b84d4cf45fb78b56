#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "tttseg/metrics.hpp"

using namespace tttseg;

namespace {

LabelMask mask_of(Shape shape, std::vector<double> vals, std::size_t classes) {
  return LabelMask{Tensor(std::move(shape), std::move(vals)), classes};
}

LabelMask random_mask(Rng& rng, std::size_t h, std::size_t w, std::size_t classes) {
  Tensor t({h, w});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(rng.uniform_int(classes));
  return LabelMask{t, classes};
}

// Random blobby mask: a few rectangles of random classes over background.
LabelMask blob_mask(Rng& rng, std::size_t h, std::size_t w, std::size_t classes) {
  Tensor t({h, w});
  const std::size_t blobs = 1 + rng.uniform_int(4);
  for (std::size_t b = 0; b < blobs; ++b) {
    const std::size_t cls = 1 + rng.uniform_int(classes - 1);
    const std::size_t r0 = rng.uniform_int(h), c0 = rng.uniform_int(w);
    const std::size_t rh = 1 + rng.uniform_int(h / 2), cw = 1 + rng.uniform_int(w / 2);
    for (std::size_t r = r0; r < std::min(h, r0 + rh); ++r) {
      for (std::size_t c = c0; c < std::min(w, c0 + cw); ++c) t[r * w + c] = static_cast<double>(cls);
    }
  }
  return LabelMask{t, classes};
}

}  // namespace

TEST_CASE("dsc basics") {
  LabelMask a = mask_of({2, 2}, {1, 1, 0, 0}, 2);
  LabelMask b = mask_of({2, 2}, {1, 1, 0, 0}, 2);
  CHECK(dsc(a, b, 1) == 1.0);

  LabelMask c = mask_of({2, 2}, {0, 0, 1, 1}, 2);
  CHECK(dsc(a, c, 1) == 0.0);

  // 4x4, P = 2x2 block, G = same block shifted one column: |P and G| = 2
  // -> 2*2 / (4+4) = 0.5
  LabelMask p = mask_of({4, 4}, {0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0}, 2);
  LabelMask g = mask_of({4, 4}, {0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0}, 2);
  CHECK(dsc(p, g, 1) == doctest::Approx(0.5));

  // Empty conventions.
  LabelMask empty = mask_of({2, 2}, {0, 0, 0, 0}, 2);
  CHECK(dsc(empty, empty, 1) == 1.0);
  CHECK(dsc(empty, a, 1) == 0.0);

  CHECK_THROWS_AS(dsc(a, mask_of({2, 3}, {0, 0, 0, 0, 0, 0}, 2), 1), ShapeError);
}

TEST_CASE("nsd hand cases") {
  LabelMask a = mask_of({3, 3}, {0, 0, 0, 0, 1, 0, 0, 0, 0}, 2);
  CHECK(nsd(a, a, 1, 0.0) == 1.0);
  CHECK(nsd(a, a, 1, 2.5) == 1.0);

  // One-pixel shift: all boundary distances <= 1.
  LabelMask p = mask_of({4, 4}, {0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0}, 2);
  LabelMask g = mask_of({4, 4}, {0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0}, 2);
  CHECK(nsd(p, g, 1, 1.0) == 1.0);
  const double at_zero = nsd(p, g, 1, 0.0);
  CHECK(at_zero == doctest::Approx(oracles::naive_nsd(p.labels, g.labels, 1, 0.0)));
  CHECK(at_zero < 1.0);

  LabelMask empty = mask_of({4, 4}, std::vector<double>(16, 0.0), 2);
  CHECK(nsd(empty, empty, 1, 1.0) == 1.0);
  CHECK(nsd(empty, p, 1, 1.0) == 0.0);
  CHECK_THROWS_AS(nsd(p, g, 1, -1.0), ValueError);
}

TEST_CASE("instance_f1 hand cases") {
  // One instance, perfectly predicted.
  LabelMask one = mask_of({3, 3}, {0, 0, 0, 0, 1, 0, 0, 0, 0}, 2);
  CHECK(instance_f1(one, one, 0.5) == 1.0);

  // Two gt instances, one predicted and matching: TP=1, FN=1, FP=0 -> 2/3.
  LabelMask gt2 = mask_of({3, 5}, {1, 0, 0, 0, 1, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0}, 2);
  LabelMask pr1 = mask_of({3, 5}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0}, 2);
  CHECK(instance_f1(pr1, gt2, 0.5) == doctest::Approx(2.0 / 3.0));

  // Empty pred, nonempty gt.
  LabelMask empty = mask_of({3, 5}, std::vector<double>(15, 0.0), 2);
  CHECK(instance_f1(empty, gt2, 0.5) == 0.0);
  CHECK(instance_f1(empty, empty, 0.5) == 1.0);
}

TEST_CASE("metrics symmetry") {
  Rng rng(51);
  for (int trial = 0; trial < 25; ++trial) {
    LabelMask a = blob_mask(rng, 9, 9, 3);
    LabelMask b = blob_mask(rng, 9, 9, 3);
    for (int cls = 1; cls < 3; ++cls) {
      CHECK(dsc(a, b, cls) == dsc(b, a, cls));
      CHECK(nsd(a, b, cls, 1.0) == nsd(b, a, cls, 1.0));
    }
  }
}

TEST_CASE("nsd is monotone in tau") {
  Rng rng(52);
  for (int trial = 0; trial < 10; ++trial) {
    LabelMask a = blob_mask(rng, 10, 10, 2);
    LabelMask b = blob_mask(rng, 10, 10, 2);
    double prev = -1.0;
    for (double tau : {0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0}) {
      const double v = nsd(a, b, 1, tau);
      CHECK(v >= prev);
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      prev = v;
    }
  }
}

TEST_CASE("metrics equal brute-force oracles on random small masks") {
  Rng rng(53);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t h = 2 + rng.uniform_int(14);
    const std::size_t w = 2 + rng.uniform_int(14);
    const std::size_t classes = 2 + rng.uniform_int(3);
    const bool blobby = trial % 2 == 0;
    LabelMask p = blobby ? blob_mask(rng, h, w, classes) : random_mask(rng, h, w, classes);
    LabelMask g = blobby ? blob_mask(rng, h, w, classes) : random_mask(rng, h, w, classes);
    const double tau = rng.uniform() * 3.0;
    for (std::size_t cls = 1; cls < classes; ++cls) {
      CHECK(dsc(p, g, static_cast<int>(cls)) == oracles::naive_dsc(p.labels, g.labels, static_cast<int>(cls)));
      CHECK(nsd(p, g, static_cast<int>(cls), tau) ==
            oracles::naive_nsd(p.labels, g.labels, static_cast<int>(cls), tau));
    }
    // Binary interiors for instance F1.
    auto binarize = [](const LabelMask& m) {
      Tensor b(m.labels.shape());
      for (std::size_t i = 0; i < b.size(); ++i) b[i] = static_cast<int>(m.labels[i]) == 1 ? 1.0 : 0.0;
      return LabelMask{b, 2};
    };
    LabelMask pb = binarize(p), gb = binarize(g);
    CHECK(instance_f1(pb, gb, 0.5) == oracles::naive_instance_f1(pb.labels, gb.labels, 0.5));
  }
}

TEST_CASE("label mask validation") {
  LabelMask bad{Tensor({2, 2}, {0, 1, 2, 0}), 2};
  CHECK_THROWS_AS(bad.validate(), ValueError);
  LabelMask frac{Tensor({2, 2}, {0, 0.5, 1, 0}), 2};
  CHECK_THROWS_AS(frac.validate(), ValueError);
}

TEST_CASE("metrics report aggregation and serialization") {
  Rng rng(54);
  MetricsAccumulator acc(3, 1.0, false);
  for (int i = 0; i < 4; ++i) {
    LabelMask p = blob_mask(rng, 8, 8, 3);
    acc.add(p, p);  // perfect predictions
  }
  MetricsReport r = acc.finalize();
  CHECK(r.num_samples == 4);
  CHECK(r.mean_dsc_per_class == 1.0);
  CHECK(r.mean_dsc_per_case == 1.0);
  CHECK(r.mean_nsd_per_class == 1.0);
  CHECK(r.per_class.size() == 2);
  const std::string j = r.to_json();
  CHECK(j.find("\"tau\"") != std::string::npos);
  CHECK(j.find("per_case") != std::string::npos);

  // All reported values stay in [0, 1] for random pairs.
  MetricsAccumulator acc2(3, 1.5, true);
  for (int i = 0; i < 6; ++i) acc2.add(blob_mask(rng, 8, 8, 3), blob_mask(rng, 8, 8, 3));
  MetricsReport r2 = acc2.finalize();
  for (const auto& c : r2.per_class) {
    CHECK(c.mean_dsc >= 0.0);
    CHECK(c.mean_dsc <= 1.0);
    CHECK(c.mean_nsd >= 0.0);
    CHECK(c.mean_nsd <= 1.0);
  }
  CHECK(*r2.mean_instance_f1 >= 0.0);
  CHECK(*r2.mean_instance_f1 <= 1.0);
  CHECK(r2.both_empty_pairs + r2.one_empty_pairs > 0);
}
