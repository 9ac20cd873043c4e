#ifndef SAE_GRID_HPP
#define SAE_GRID_HPP

#include <array>
#include <cstdint>
#include <sstream>
#include <string>

#include "sae/error.hpp"

namespace sae {

// Geometry of a volumetric grid. Axis order is (D, H, W) everywhere; the
// fastest-varying index is W. Spacing entries pair with shape entries.
struct GridMeta {
  std::array<int, 3> shape{0, 0, 0};             // (D, H, W)
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per voxel
  std::string space_tag;                         // name of the normalization space

  std::int64_t voxels() const {
    return std::int64_t(shape[0]) * shape[1] * shape[2];
  }

  bool same_grid(const GridMeta& o) const {
    return shape == o.shape && spacing == o.spacing;
  }

  void validate() const {
    for (int i = 0; i < 3; ++i) {
      require(shape[i] >= 1, ErrorCode::ArgumentError,
              "GridMeta: shape entries must be >= 1");
      require(spacing[i] > 0.0, ErrorCode::ArgumentError,
              "GridMeta: spacings must be > 0");
    }
  }

  std::string describe() const {
    std::ostringstream os;
    os << shape[0] << "x" << shape[1] << "x" << shape[2] << " @ ("
       << spacing[0] << ", " << spacing[1] << ", " << spacing[2] << ") mm";
    return os.str();
  }
};

inline GridMeta make_grid(int d, int h, int w, double sd = 1.0, double sh = 1.0,
                          double sw = 1.0, std::string tag = {}) {
  GridMeta g;
  g.shape = {d, h, w};
  g.spacing = {sd, sh, sw};
  g.space_tag = std::move(tag);
  g.validate();
  return g;
}

inline void require_same_grid(const GridMeta& a, const GridMeta& b,
                              const std::string& what) {
  require(a.same_grid(b), ErrorCode::GridMismatch,
          what + ": grid mismatch (" + a.describe() + " vs " + b.describe() + ")");
}

}  // namespace sae

#endif  // SAE_GRID_HPP
