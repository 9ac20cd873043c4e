#ifndef SAE_VOLUME_HPP
#define SAE_VOLUME_HPP

#include <cmath>
#include <cstdint>
#include <vector>

#include "sae/error.hpp"
#include "sae/grid.hpp"

namespace sae {

inline std::int64_t voxel_index(const GridMeta& g, int z, int y, int x) {
  return (std::int64_t(z) * g.shape[1] + y) * g.shape[2] + x;
}

// Integer label per voxel; values live in [0, num_labels).
struct LabelVolume {
  GridMeta meta;
  std::vector<std::int32_t> labels;  // (D, H, W), W fastest
  int num_labels = 0;

  std::int32_t at(int z, int y, int x) const {
    return labels[voxel_index(meta, z, y, x)];
  }
  std::int32_t& at(int z, int y, int x) {
    return labels[voxel_index(meta, z, y, x)];
  }

  void validate() const {
    meta.validate();
    require(num_labels >= 1, ErrorCode::ArgumentError,
            "LabelVolume: num_labels must be >= 1");
    require(std::int64_t(labels.size()) == meta.voxels(),
            ErrorCode::ArgumentError, "LabelVolume: payload size != voxel count");
    for (std::int32_t v : labels)
      require(v >= 0 && v < num_labels, ErrorCode::ArgumentError,
              "LabelVolume: label out of [0, num_labels)");
  }
};

// Scalar image on the same grid; all values finite.
struct IntensityVolume {
  GridMeta meta;
  std::vector<float> values;  // (D, H, W)

  float at(int z, int y, int x) const {
    return values[voxel_index(meta, z, y, x)];
  }
  float& at(int z, int y, int x) {
    return values[voxel_index(meta, z, y, x)];
  }

  void validate() const {
    meta.validate();
    require(std::int64_t(values.size()) == meta.voxels(),
            ErrorCode::ArgumentError,
            "IntensityVolume: payload size != voxel count");
    for (float v : values)
      require(std::isfinite(v), ErrorCode::ArgumentError,
              "IntensityVolume: non-finite value");
  }
};

// Per-voxel categorical field, channel-major (L, D, H, W). Shared
// representation for encoder posteriors, atlas priors and relaxed samples.
struct OneHotField {
  GridMeta meta;
  int num_labels = 0;
  std::vector<float> probs;  // (L, D, H, W)

  float at(int l, int z, int y, int x) const {
    return probs[std::int64_t(l) * meta.voxels() + voxel_index(meta, z, y, x)];
  }
  float& at(int l, int z, int y, int x) {
    return probs[std::int64_t(l) * meta.voxels() + voxel_index(meta, z, y, x)];
  }

  void validate(double sum_tol = 1e-6) const {
    meta.validate();
    require(num_labels >= 1, ErrorCode::ArgumentError,
            "OneHotField: num_labels must be >= 1");
    const std::int64_t v = meta.voxels();
    require(std::int64_t(probs.size()) == v * num_labels,
            ErrorCode::ArgumentError, "OneHotField: payload size mismatch");
    for (std::int64_t j = 0; j < v; ++j) {
      double s = 0.0;
      for (int l = 0; l < num_labels; ++l) {
        const float p = probs[std::int64_t(l) * v + j];
        require(p >= 0.0f && p <= 1.0f + 1e-6f, ErrorCode::ArgumentError,
                "OneHotField: entry outside [0, 1]");
        s += p;
      }
      require(std::fabs(s - 1.0) <= sum_tol, ErrorCode::ArgumentError,
              "OneHotField: per-voxel channel sum != 1");
    }
  }
};

// The encoder posterior q has the same layout as any other categorical field.
using PosteriorField = OneHotField;

inline OneHotField one_hot(const LabelVolume& seg) {
  const std::int64_t v = seg.meta.voxels();
  OneHotField f;
  f.meta = seg.meta;
  f.num_labels = seg.num_labels;
  f.probs.assign(std::size_t(v) * seg.num_labels, 0.0f);
  for (std::int64_t j = 0; j < v; ++j)
    f.probs[std::int64_t(seg.labels[j]) * v + j] = 1.0f;
  return f;
}

// Per-voxel argmax over channels; ties resolve to the lowest label index.
inline LabelVolume argmax_labels(const OneHotField& field) {
  const std::int64_t v = field.meta.voxels();
  LabelVolume seg;
  seg.meta = field.meta;
  seg.num_labels = field.num_labels;
  seg.labels.assign(std::size_t(v), 0);
  for (std::int64_t j = 0; j < v; ++j) {
    int best = 0;
    float best_p = field.probs[j];
    for (int l = 1; l < field.num_labels; ++l) {
      const float p = field.probs[std::int64_t(l) * v + j];
      if (p > best_p) {
        best_p = p;
        best = l;
      }
    }
    seg.labels[j] = best;
  }
  return seg;
}

// Min-max normalization to [0, 1]; constant volumes map to 0.
inline IntensityVolume normalize_unit_range(const IntensityVolume& x) {
  IntensityVolume out = x;
  float lo = x.values.empty() ? 0.0f : x.values[0];
  float hi = lo;
  for (float v : x.values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const float range = hi - lo;
  if (range > 0.0f)
    for (float& v : out.values) v = (v - lo) / range;
  else
    for (float& v : out.values) v = 0.0f;
  return out;
}

}  // namespace sae

#endif  // SAE_VOLUME_HPP
