#pragma once

#include <vector>

#include "pulmoreg/core.hpp"

namespace pulmoreg {

/// Sparse keypoint match: fixed-frame source x_i and its target in the original moving frame.
struct Correspondence {
  Vec3 source{};
  Vec3 target{};
  /// Selected displacement in the pre-aligned frame (mm).
  Vec3 displacement{};
  /// Averaged marginal energy of the selected label.
  double energy = 0.0;
};

using CorrespondenceSet = std::vector<Correspondence>;

}  // namespace pulmoreg
