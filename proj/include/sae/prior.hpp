#ifndef SAE_PRIOR_HPP
#define SAE_PRIOR_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sae/error.hpp"
#include "sae/io.hpp"
#include "sae/volume.hpp"

namespace sae::prior {

constexpr double kDefaultFloor = 1e-7;       // probability floor epsilon_p
constexpr double kDefaultBlurSigmaMm = 3.0;  // isotropic Gaussian std, mm
constexpr double kDefaultCountSmoothing = 1.0;

// Per-voxel categorical prior p_j over L labels.
struct ProbabilisticAtlas {
  GridMeta meta;
  int num_labels = 0;
  std::vector<float> probs;  // (L, D, H, W)
  double floor_eps = kDefaultFloor;

  float at(int l, int z, int y, int x) const {
    return probs[std::int64_t(l) * meta.voxels() + voxel_index(meta, z, y, x)];
  }

  OneHotField as_field() const {
    return OneHotField{meta, num_labels, probs};
  }
};

// 26-neighborhood: the 3x3x3 cube around a voxel, minus its center.
inline const std::array<std::array<int, 3>, 26>& neighborhood26() {
  static const auto offs = [] {
    std::array<std::array<int, 3>, 26> o{};
    int n = 0;
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dz == 0 && dy == 0 && dx == 0) continue;
          o[n++] = {dz, dy, dx};
        }
    return o;
  }();
  return offs;
}

// Unary field V_j = log p_j plus the LxL pairwise matrix V(l_neighbor, l_center).
// The matrix is stored row-major with row = neighbor label l1, column = center
// label l2, matching the CSV layout.
struct MRFPotentials {
  GridMeta meta;
  int num_labels = 0;
  std::vector<float> unary;      // (L, D, H, W), log atlas probabilities
  std::vector<double> pairwise;  // (L, L)
  double smoothing_count = kDefaultCountSmoothing;

  double pair(int l_neighbor, int l_center) const {
    return pairwise[std::size_t(l_neighbor) * num_labels + l_center];
  }

  bool pairwise_is_zero() const {
    for (double v : pairwise)
      if (v != 0.0) return false;
    return true;
  }
};

namespace detail {

// Floors every entry and renormalizes per voxel. The working epsilon is
// inflated so entries still clear `eps` after the renormalization divide.
inline void floor_and_renormalize(std::vector<float>& probs, int L,
                                  std::int64_t voxels, double eps) {
  const double eps_work = eps * (1.0 + L * eps) * (1.0 + 1e-6);
  for (std::int64_t j = 0; j < voxels; ++j) {
    double s = 0.0;
    for (int l = 0; l < L; ++l) {
      float& p = probs[std::int64_t(l) * voxels + j];
      double v = double(p);
      if (!(v > eps_work)) v = eps_work;
      p = float(v);
      s += v;
    }
    const double inv = 1.0 / s;
    for (int l = 0; l < L; ++l) probs[std::int64_t(l) * voxels + j] *= float(inv);
  }
}

// 1-D Gaussian kernel, truncated at radius ceil(3*sigma) and renormalized.
inline std::vector<double> gaussian_kernel(double sigma_vox) {
  if (sigma_vox <= 0.0) return {1.0};
  const int radius = int(std::ceil(3.0 * sigma_vox));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int t = -radius; t <= radius; ++t) {
    const double v = std::exp(-0.5 * double(t) * t / (sigma_vox * sigma_vox));
    k[t + radius] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

// Separable zero-padded convolution along one axis of a (D, H, W) channel.
inline void blur_axis(std::vector<double>& chan, const GridMeta& g, int axis,
                      const std::vector<double>& kernel) {
  if (kernel.size() == 1) return;
  const int radius = int(kernel.size() / 2);
  const int D = g.shape[0], H = g.shape[1], W = g.shape[2];
  std::vector<double> out(chan.size(), 0.0);
  const int n[3] = {D, H, W};
  const std::int64_t stride[3] = {std::int64_t(H) * W, W, 1};
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const int c[3] = {z, y, x};
        const std::int64_t base = voxel_index(g, z, y, x);
        double acc = 0.0;
        for (int t = -radius; t <= radius; ++t) {
          const int s = c[axis] + t;
          if (s < 0 || s >= n[axis]) continue;  // zero padding
          acc += kernel[t + radius] * chan[base + std::int64_t(t) * stride[axis]];
        }
        out[base] = acc;
      }
  chan.swap(out);
}

}  // namespace detail

// Blur a single one-hot encoded segmentation into a spatial prior.
// sigma is given in mm and converted per axis through the voxel spacing.
inline ProbabilisticAtlas build_spatial_prior_from_single(
    const LabelVolume& seg, double blur_sigma_mm = kDefaultBlurSigmaMm,
    double floor_eps = kDefaultFloor) {
  require(blur_sigma_mm >= 0.0, ErrorCode::ArgumentError,
          "blur_sigma_mm must be >= 0");
  seg.validate();
  const std::int64_t v = seg.meta.voxels();
  const int L = seg.num_labels;

  ProbabilisticAtlas atlas;
  atlas.meta = seg.meta;
  atlas.num_labels = L;
  atlas.floor_eps = floor_eps;
  atlas.probs.assign(std::size_t(v) * L, 0.0f);

  for (int l = 0; l < L; ++l) {
    std::vector<double> chan(std::size_t(v), 0.0);
    for (std::int64_t j = 0; j < v; ++j)
      if (seg.labels[j] == l) chan[j] = 1.0;
    for (int axis = 0; axis < 3; ++axis) {
      const auto kernel =
          detail::gaussian_kernel(blur_sigma_mm / seg.meta.spacing[axis]);
      detail::blur_axis(chan, seg.meta, axis, kernel);
    }
    for (std::int64_t j = 0; j < v; ++j)
      atlas.probs[std::int64_t(l) * v + j] = float(chan[j]);
  }

  // Zero padding leaks mass at the borders; renormalize per voxel first.
  for (std::int64_t j = 0; j < v; ++j) {
    double s = 0.0;
    for (int l = 0; l < L; ++l) s += atlas.probs[std::int64_t(l) * v + j];
    if (s > 0.0)
      for (int l = 0; l < L; ++l) atlas.probs[std::int64_t(l) * v + j] /= float(s);
  }
  detail::floor_and_renormalize(atlas.probs, L, v, floor_eps);
  return atlas;
}

// Label-frequency prior over a population of co-registered segmentations.
inline ProbabilisticAtlas build_spatial_prior_from_many(
    const std::vector<LabelVolume>& segs, double floor_eps = kDefaultFloor) {
  require(!segs.empty(), ErrorCode::ArgumentError,
          "need at least one segmentation");
  const GridMeta& meta = segs.front().meta;
  const int L = segs.front().num_labels;
  for (const auto& s : segs) {
    require_same_grid(meta, s.meta, "build_spatial_prior_from_many");
    require(s.num_labels == L, ErrorCode::ArgumentError,
            "segmentations disagree on num_labels");
  }
  const std::int64_t v = meta.voxels();
  ProbabilisticAtlas atlas;
  atlas.meta = meta;
  atlas.num_labels = L;
  atlas.floor_eps = floor_eps;
  atlas.probs.assign(std::size_t(v) * L, 0.0f);
  const float inc = 1.0f / float(segs.size());
  for (const auto& s : segs)
    for (std::int64_t j = 0; j < v; ++j)
      atlas.probs[std::int64_t(s.labels[j]) * v + j] += inc;
  detail::floor_and_renormalize(atlas.probs, L, v, floor_eps);
  return atlas;
}

struct PairCounts {
  std::vector<std::int64_t> pairs;   // (L, L), [neighbor l1][center l2]
  std::vector<std::int64_t> labels;  // (L), center label counts
};

// Ordered co-occurrence counts over clipped 26-neighborhoods:
// pairs[l1][l2] = #{ (j, k) : k in N_j, labels[j] = l2, labels[k] = l1 }.
inline PairCounts count_neighbor_pairs(const LabelVolume& seg) {
  const int L = seg.num_labels;
  const int D = seg.meta.shape[0], H = seg.meta.shape[1], W = seg.meta.shape[2];
  PairCounts c;
  c.pairs.assign(std::size_t(L) * L, 0);
  c.labels.assign(std::size_t(L), 0);
  const auto& offs = neighborhood26();
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const int center = seg.at(z, y, x);
        ++c.labels[center];
        for (const auto& o : offs) {
          const int zz = z + o[0], yy = y + o[1], xx = x + o[2];
          if (zz < 0 || zz >= D || yy < 0 || yy >= H || xx < 0 || xx >= W)
            continue;
          ++c.pairs[std::size_t(seg.at(zz, yy, xx)) * L + center];
        }
      }
  return c;
}

// V(l1, l2) = log((C(l1, l2) + alpha) / (count(l2) + alpha * L)).
inline std::vector<double> estimate_pairwise_potentials(
    const LabelVolume& seg, double alpha = kDefaultCountSmoothing) {
  require(alpha > 0.0, ErrorCode::ArgumentError,
          "count smoothing alpha must be > 0");
  seg.validate();
  const int L = seg.num_labels;
  const auto c = count_neighbor_pairs(seg);
  std::vector<double> pot(std::size_t(L) * L);
  for (int l1 = 0; l1 < L; ++l1)
    for (int l2 = 0; l2 < L; ++l2)
      pot[std::size_t(l1) * L + l2] =
          std::log((double(c.pairs[std::size_t(l1) * L + l2]) + alpha) /
                   (double(c.labels[l2]) + alpha * L));
  return pot;
}

inline MRFPotentials build_mrf_prior(const ProbabilisticAtlas& atlas,
                                     const std::vector<double>& pairwise,
                                     double smoothing_count = kDefaultCountSmoothing) {
  const int L = atlas.num_labels;
  require(pairwise.size() == std::size_t(L) * L, ErrorCode::ArgumentError,
          "pairwise matrix must be L x L");
  MRFPotentials pot;
  pot.meta = atlas.meta;
  pot.num_labels = L;
  pot.smoothing_count = smoothing_count;
  pot.pairwise = pairwise;
  for (double v : pot.pairwise)
    require(std::isfinite(v), ErrorCode::ArgumentError,
            "pairwise potentials must be finite");
  pot.unary.resize(atlas.probs.size());
  for (std::size_t i = 0; i < atlas.probs.size(); ++i)
    pot.unary[i] = std::log(atlas.probs[i]);
  return pot;
}

// Result of atlas ingestion; `warned` is set when any voxel's channel sum was
// off by more than the 0.1 tolerance before renormalization.
struct IngestResult {
  ProbabilisticAtlas atlas;
  bool warned = false;
  std::int64_t off_voxels = 0;
};

inline IngestResult normalize_ingested_atlas(const GridMeta& meta, int channels,
                                             std::vector<float> data,
                                             double floor_eps = kDefaultFloor) {
  const std::int64_t v = meta.voxels();
  const int L = channels;
  IngestResult res;
  for (std::int64_t j = 0; j < v; ++j) {
    double s = 0.0;
    for (int l = 0; l < L; ++l) {
      float& p = data[std::int64_t(l) * v + j];
      if (p < 0.0f) p = 0.0f;
      s += p;
    }
    if (s <= 0.0) {
      // Degenerate voxel: fall back to a uniform distribution.
      for (int l = 0; l < L; ++l) data[std::int64_t(l) * v + j] = 1.0f / float(L);
      continue;
    }
    if (std::fabs(s - 1.0) > 0.1) ++res.off_voxels;
    for (int l = 0; l < L; ++l) data[std::int64_t(l) * v + j] /= float(s);
  }
  res.warned = res.off_voxels > 0;
  detail::floor_and_renormalize(data, L, v, floor_eps);
  res.atlas.meta = meta;
  res.atlas.num_labels = L;
  res.atlas.probs = std::move(data);
  res.atlas.floor_eps = floor_eps;
  return res;
}

inline IngestResult ingest_atlas(const std::string& path,
                                 double floor_eps = kDefaultFloor) {
  auto mc = io::load_multichannel(path);
  require(mc.channels >= 2, ErrorCode::IoHeaderMismatch,
          "atlas must have at least two channels: " + path);
  return normalize_ingested_atlas(mc.meta, mc.channels, std::move(mc.data),
                                  floor_eps);
}

inline void save_atlas(const ProbabilisticAtlas& atlas, const std::string& path) {
  io::save_multichannel(atlas.meta, atlas.num_labels, atlas.probs, path);
}

inline ProbabilisticAtlas load_atlas(const std::string& path,
                                     double floor_eps = kDefaultFloor) {
  return ingest_atlas(path, floor_eps).atlas;
}

// Pairwise matrices persist as CSV: one header line naming alpha, then L rows
// of L columns with row = l1 (neighbor) and column = l2 (center).
inline void save_pairwise_csv(const std::vector<double>& pot, int L,
                              double alpha, const std::string& path) {
  require(pot.size() == std::size_t(L) * L, ErrorCode::ArgumentError,
          "pairwise matrix must be L x L");
  std::ofstream out(path);
  require(out.good(), ErrorCode::IoUnreadable, "cannot open for write: " + path);
  out << "# pairwise potentials, alpha=" << alpha << ", labels=" << L << "\n";
  out.precision(17);
  for (int l1 = 0; l1 < L; ++l1) {
    for (int l2 = 0; l2 < L; ++l2)
      out << pot[std::size_t(l1) * L + l2] << (l2 + 1 < L ? "," : "\n");
  }
  require(out.good(), ErrorCode::IoUnreadable, "write failed: " + path);
}

struct PairwiseCsv {
  std::vector<double> pot;
  int num_labels = 0;
  double alpha = 0.0;
};

inline PairwiseCsv load_pairwise_csv(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::IoUnreadable, "cannot open file: " + path);
  std::string line;
  require(bool(std::getline(in, line)) && !line.empty() && line[0] == '#',
          ErrorCode::IoHeaderMismatch, "pairwise CSV missing header: " + path);
  PairwiseCsv out;
  const auto apos = line.find("alpha=");
  if (apos != std::string::npos) out.alpha = std::atof(line.c_str() + apos + 6);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::atof(cell.c_str()));
    rows.push_back(std::move(row));
  }
  const int L = int(rows.size());
  require(L >= 1, ErrorCode::IoHeaderMismatch, "pairwise CSV has no rows: " + path);
  out.num_labels = L;
  out.pot.resize(std::size_t(L) * L);
  for (int l1 = 0; l1 < L; ++l1) {
    require(int(rows[l1].size()) == L, ErrorCode::IoHeaderMismatch,
            "pairwise CSV is not square: " + path);
    for (int l2 = 0; l2 < L; ++l2) out.pot[std::size_t(l1) * L + l2] = rows[l1][l2];
  }
  return out;
}

}  // namespace sae::prior

#endif  // SAE_PRIOR_HPP
