#pragma once

// Randomised inputs shared by unit tests and the acceptance binary.

#include <vector>

#include "tbattr/tbattr.hpp"

namespace fixtures {

struct ApCase {
  std::vector<std::vector<tbattr::Detection>> detections;
  std::vector<std::vector<tbattr::BoundingBox>> gts;
};

inline tbattr::BoundingBox random_box(tbattr::Rng& rng, double extent = 20.0) {
  const double x = rng.uniform(0, extent), y = rng.uniform(0, extent);
  return {x, y, x + rng.uniform(2, 8), y + rng.uniform(2, 8)};
}

// At most five gt boxes and five detections in total; detections are often jittered gts.
// Scores are drawn from a coarse grid so ties occur.
inline ApCase random_ap_case(tbattr::Rng& rng) {
  ApCase c;
  const std::size_t images = 1 + rng.index(3);
  c.detections.resize(images);
  c.gts.resize(images);
  const std::size_t n_gt = rng.index(6), n_det = rng.index(6);
  for (std::size_t g = 0; g < n_gt; ++g) c.gts[rng.index(images)].push_back(random_box(rng));
  for (std::size_t d = 0; d < n_det; ++d) {
    const std::size_t img = rng.index(images);
    tbattr::BoundingBox b = random_box(rng);
    if (!c.gts[img].empty() && rng.bernoulli(0.7)) {
      b = c.gts[img][rng.index(c.gts[img].size())];
      const double jx = rng.uniform(-1.5, 1.5), jy = rng.uniform(-1.5, 1.5);
      b = {b.x_min + jx, b.y_min + jy, b.x_max + jx, b.y_max + jy};
    }
    c.detections[img].push_back({b, static_cast<double>(1 + rng.index(10)) / 10.0});
  }
  return c;
}

}  // namespace fixtures
