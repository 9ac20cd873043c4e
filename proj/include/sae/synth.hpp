#ifndef SAE_SYNTH_HPP
#define SAE_SYNTH_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "sae/error.hpp"
#include "sae/nn.hpp"
#include "sae/prior.hpp"
#include "sae/rng.hpp"
#include "sae/volume.hpp"

namespace sae::synth {

// Synthetic phantom: nested deformed ellipsoids with per-subject jitter and a
// per-label Gaussian intensity model. Stands in for clinical scans at desk
// scale, with ground-truth labels for free.
struct PhantomSpec {
  std::array<int, 3> shape{32, 32, 32};
  int num_labels = 4;
  std::uint64_t geometry_seed = 0;
  std::vector<double> intensity_means;  // mu_l in [0, 1], one per label
  double noise_std = 0.05;              // sigma_img
  double jitter = 0.08;                 // smooth warp magnitude, normalized-radius units
  std::string preset = "easy";          // "easy" | "overlapping"
  // Unordered label pairs allowed to touch (26-connectivity). Empty = any.
  std::vector<std::pair<int, int>> allowed_contacts;

  void validate() const {
    require(num_labels >= 2, ErrorCode::ArgumentError,
            "phantom: num_labels must be >= 2");
    require(int(intensity_means.size()) == num_labels, ErrorCode::ArgumentError,
            "phantom: need one intensity mean per label");
    for (double m : intensity_means)
      require(m >= 0.0 && m <= 1.0, ErrorCode::ArgumentError,
              "phantom: intensity means must lie in [0, 1]");
    require(noise_std >= 0.0 && jitter >= 0.0, ErrorCode::ArgumentError,
            "phantom: noise/jitter must be non-negative");
    if (preset == "easy") {
      // Easy preset: class means pairwise separated by at least 2 sigma_img.
      for (std::size_t a = 0; a < intensity_means.size(); ++a)
        for (std::size_t b = a + 1; b < intensity_means.size(); ++b)
          require(std::fabs(intensity_means[a] - intensity_means[b]) >=
                      2.0 * noise_std,
                  ErrorCode::ArgumentError,
                  "easy preset requires means separated by >= 2*noise_std");
    }
  }
};

inline PhantomSpec easy_preset(int num_labels = 4,
                               std::array<int, 3> shape = {32, 32, 32}) {
  PhantomSpec s;
  s.shape = shape;
  s.num_labels = num_labels;
  s.preset = "easy";
  s.noise_std = 0.05;
  s.jitter = 0.08;
  s.intensity_means.resize(num_labels);
  for (int l = 0; l < num_labels; ++l)
    s.intensity_means[l] =
        num_labels == 1 ? 0.5 : 0.05 + 0.9 * double(l) / double(num_labels - 1);
  for (int l = 0; l + 1 < num_labels; ++l) s.allowed_contacts.push_back({l, l + 1});
  return s;
}

// Harder variant: closer class means and more noise, so intensity alone is
// ambiguous and the label topology carries real signal.
inline PhantomSpec overlapping_preset(int num_labels = 4,
                                      std::array<int, 3> shape = {32, 32, 32}) {
  PhantomSpec s = easy_preset(num_labels, shape);
  s.preset = "overlapping";
  s.noise_std = 0.13;
  s.jitter = 0.10;
  s.intensity_means.resize(num_labels);
  for (int l = 0; l < num_labels; ++l)
    s.intensity_means[l] =
        num_labels == 1 ? 0.5 : 0.25 + 0.5 * double(l) / double(num_labels - 1);
  return s;
}

namespace detail {

// Smooth scalar field: a coarse grid of iid normals, trilinearly upsampled.
class SmoothField {
 public:
  SmoothField(int grid, Rng& rng) : g_(grid), vals_(std::size_t(grid) * grid * grid) {
    for (auto& v : vals_) v = rng.normal();
  }

  double at(double uz, double uy, double ux) const {
    const auto sample = [&](double u, int& i0, double& f) {
      const double p = u * double(g_ - 1);
      i0 = std::clamp(int(std::floor(p)), 0, g_ - 2);
      f = p - double(i0);
    };
    int iz, iy, ix;
    double fz, fy, fx;
    sample(uz, iz, fz);
    sample(uy, iy, fy);
    sample(ux, ix, fx);
    double acc = 0.0;
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b)
        for (int c = 0; c < 2; ++c) {
          const double w = (a ? fz : 1.0 - fz) * (b ? fy : 1.0 - fy) *
                           (c ? fx : 1.0 - fx);
          acc += w * vals_[(std::size_t(iz + a) * g_ + (iy + b)) * g_ + (ix + c)];
        }
    return acc;
  }

 private:
  int g_;
  std::vector<double> vals_;
};

inline std::vector<double> radius_thresholds(int num_labels) {
  const int n = num_labels - 1;
  std::vector<double> r(n);
  if (n == 1) {
    r[0] = 0.55;
  } else {
    for (int t = 0; t < n; ++t)
      r[t] = 0.8 - double(t) * (0.8 - 0.3) / double(n - 1);
  }
  return r;
}

}  // namespace detail

// Unordered label-contact pairs under face (6-) connectivity. Diagonal
// neighbors can skip a thin band at coarse resolutions without breaking the
// nesting, so the adjacency constraint is a face-adjacency statement.
inline std::set<std::pair<int, int>> label_contacts(const LabelVolume& seg) {
  static constexpr std::array<std::array<int, 3>, 6> faces{
      {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};
  std::set<std::pair<int, int>> contacts;
  const int D = seg.meta.shape[0], H = seg.meta.shape[1], W = seg.meta.shape[2];
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const int a = seg.at(z, y, x);
        for (const auto& f : faces) {
          const int zz = z + f[0], yy = y + f[1], xx = x + f[2];
          if (zz < 0 || zz >= D || yy < 0 || yy >= H || xx < 0 || xx >= W)
            continue;
          const int b = seg.at(zz, yy, xx);
          if (a != b) contacts.insert({std::min(a, b), std::max(a, b)});
        }
      }
  return contacts;
}

inline std::pair<IntensityVolume, LabelVolume> generate_phantom(
    const PhantomSpec& spec, Rng& rng) {
  spec.validate();
  const GridMeta meta = make_grid(spec.shape[0], spec.shape[1], spec.shape[2]);
  const int D = meta.shape[0], H = meta.shape[1], W = meta.shape[2];
  const auto thresholds = detail::radius_thresholds(spec.num_labels);

  // One shared smooth perturbation per subject keeps the regions nested, so
  // only consecutive labels touch.
  detail::SmoothField warp(4, rng);
  const double anis[3] = {1.0, 0.92, 0.85};

  LabelVolume seg;
  seg.meta = meta;
  seg.num_labels = spec.num_labels;
  seg.labels.resize(std::size_t(meta.voxels()));
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double uz = (z + 0.5) / double(D);
        const double uy = (y + 0.5) / double(H);
        const double ux = (x + 0.5) / double(W);
        const double cz = (2.0 * uz - 1.0) / anis[0];
        const double cy = (2.0 * uy - 1.0) / anis[1];
        const double cx = (2.0 * ux - 1.0) / anis[2];
        double rho = std::sqrt(cz * cz + cy * cy + cx * cx);
        rho += spec.jitter * warp.at(uz, uy, ux);
        int label = 0;
        for (double r : thresholds)
          if (rho < r) ++label;
        seg.at(z, y, x) = label;
      }

  if (!spec.allowed_contacts.empty()) {
    std::set<std::pair<int, int>> allowed;
    for (auto pr : spec.allowed_contacts)
      allowed.insert({std::min(pr.first, pr.second), std::max(pr.first, pr.second)});
    for (const auto& c : label_contacts(seg))
      require(allowed.count(c) > 0, ErrorCode::NumericError,
              "phantom geometry violated the adjacency constraints");
  }

  IntensityVolume img;
  img.meta = meta;
  img.values.resize(seg.labels.size());
  for (std::size_t j = 0; j < seg.labels.size(); ++j) {
    double v = spec.intensity_means[std::size_t(seg.labels[j])];
    if (spec.noise_std > 0.0) v += spec.noise_std * rng.normal();
    img.values[j] = float(std::clamp(v, 0.0, 1.0));
  }
  return {std::move(img), std::move(seg)};
}

struct PhantomSubject {
  std::string id;
  IntensityVolume image;
  LabelVolume labels;
  std::uint64_t seed = 0;
};

inline std::vector<PhantomSubject> generate_population(const PhantomSpec& spec,
                                                       int count,
                                                       std::uint64_t base_seed) {
  std::vector<PhantomSubject> out;
  out.reserve(std::size_t(count));
  for (int i = 0; i < count; ++i) {
    PhantomSubject s;
    s.seed = Rng::derive(Rng::derive(base_seed, spec.geometry_seed), std::uint64_t(i));
    Rng rng(s.seed);
    auto [img, seg] = generate_phantom(spec, rng);
    s.image = std::move(img);
    s.labels = std::move(seg);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "subj%03d", i);
    s.id = buf;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Brute-force oracles. These deliberately share no code with the objective
// module; they re-derive every quantity with plain nested loops and refuse
// instances large enough to hide an accidental slow path.
// ---------------------------------------------------------------------------

constexpr std::int64_t kOracleMaxVoxels = 512;  // 8^3

inline double oracle_kl_spatial(const OneHotField& q,
                                const prior::ProbabilisticAtlas& atlas) {
  require(q.meta.voxels() <= kOracleMaxVoxels, ErrorCode::ArgumentError,
          "oracle_kl_spatial: instance too large");
  require(q.num_labels == atlas.num_labels &&
              q.meta.shape == atlas.meta.shape,
          ErrorCode::ArgumentError, "oracle_kl_spatial: shape mismatch");
  const int D = q.meta.shape[0], H = q.meta.shape[1], W = q.meta.shape[2];
  double total = 0.0;
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int l = 0; l < q.num_labels; ++l) {
          const double qv = q.at(l, z, y, x);
          if (qv <= 0.0) continue;
          total += qv * (std::log(qv) - std::log(double(atlas.at(l, z, y, x))));
        }
  return total;
}

inline double oracle_mrf_loss(const OneHotField& q,
                              const prior::MRFPotentials& pot) {
  require(q.meta.voxels() <= kOracleMaxVoxels, ErrorCode::ArgumentError,
          "oracle_mrf_loss: instance too large");
  require(q.num_labels == pot.num_labels && q.meta.shape == pot.meta.shape,
          ErrorCode::ArgumentError, "oracle_mrf_loss: shape mismatch");
  const int D = q.meta.shape[0], H = q.meta.shape[1], W = q.meta.shape[2];
  const int L = q.num_labels;
  double total = 0.0;
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int lc = 0; lc < L; ++lc) {
          const double qc = q.at(lc, z, y, x);
          if (qc == 0.0) continue;
          for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                if (dz == 0 && dy == 0 && dx == 0) continue;
                const int zz = z + dz, yy = y + dy, xx = x + dx;
                if (zz < 0 || zz >= D || yy < 0 || yy >= H || xx < 0 || xx >= W)
                  continue;
                for (int ln = 0; ln < L; ++ln)
                  total -= qc * double(q.at(ln, zz, yy, xx)) *
                           pot.pair(ln, lc);
              }
        }
  return total;
}

struct ElboEstimate {
  double value = 0.0;    // expected per-subject loss (KL + V/2 log s2 + E[quad])
  double stderr = 0.0;   // 0 for exhaustive enumeration
  bool exhaustive = false;
  long samples = 0;
};

// Expected Eq.-5 loss under q, with the reconstruction expectation taken over
// hard one-hot segmentations: exhaustively over all L^V assignments when
// M == 0, otherwise by direct categorical Monte-Carlo with M samples.
template <class T>
inline ElboEstimate oracle_elbo_term(const nn::Tensor<T>& x, const OneHotField& q,
                                     const prior::ProbabilisticAtlas& atlas,
                                     nn::DecoderCNN<T>& decoder, double sigma2,
                                     Rng& rng, long M) {
  const std::int64_t v = q.meta.voxels();
  require(v <= 64 && q.num_labels <= 3, ErrorCode::ArgumentError,
          "oracle_elbo_term: instance too large");
  require(sigma2 > 0.0, ErrorCode::ArgumentError, "sigma2 must be positive");
  const int L = q.num_labels;
  const int D = q.meta.shape[0], H = q.meta.shape[1], W = q.meta.shape[2];

  const double kl = oracle_kl_spatial(q, atlas);
  const double log_sigma = 0.5 * double(v) * std::log(sigma2);

  const auto quad_of = [&](const std::vector<int>& s) {
    nn::Tensor<T> onehot(L, D, H, W);
    for (std::int64_t j = 0; j < v; ++j)
      onehot.v[std::size_t(s[std::size_t(j)]) * std::size_t(v) + std::size_t(j)] = T(1);
    const auto xh = decoder.forward(onehot);
    double sse = 0.0;
    for (std::int64_t j = 0; j < v; ++j) {
      const double r = double(x.v[std::size_t(j)]) - double(xh.v[std::size_t(j)]);
      sse += r * r;
    }
    return sse / (2.0 * sigma2);
  };

  ElboEstimate out;
  if (M <= 0) {
    double configs = 1.0;
    for (std::int64_t j = 0; j < v && configs <= 65536.0; ++j) configs *= L;
    require(configs <= 65536.0, ErrorCode::ArgumentError,
            "oracle_elbo_term: too many configurations to enumerate; pass M > 0");
    // Exhaustive expectation over all label assignments.
    std::vector<int> s(std::size_t(v), 0);
    double expect = 0.0;
    while (true) {
      double wgt = 1.0;
      for (std::int64_t j = 0; j < v; ++j)
        wgt *= double(q.probs[std::size_t(s[std::size_t(j)]) * std::size_t(v) +
                              std::size_t(j)]);
      if (wgt > 0.0) expect += wgt * quad_of(s);
      std::int64_t j = 0;
      for (; j < v; ++j) {
        if (++s[std::size_t(j)] < L) break;
        s[std::size_t(j)] = 0;
      }
      if (j == v) break;
    }
    out.value = kl + log_sigma + expect;
    out.exhaustive = true;
    return out;
  }

  // Monte-Carlo over per-voxel categorical draws.
  double sum = 0.0, sum2 = 0.0;
  std::vector<int> s(static_cast<std::size_t>(v));
  for (long m = 0; m < M; ++m) {
    for (std::int64_t j = 0; j < v; ++j) {
      const double u = rng.uniform();
      double acc = 0.0;
      int pick = L - 1;
      for (int l = 0; l < L; ++l) {
        acc += double(q.probs[std::size_t(l) * std::size_t(v) + std::size_t(j)]);
        if (u < acc) {
          pick = l;
          break;
        }
      }
      s[std::size_t(j)] = pick;
    }
    const double qd = quad_of(s);
    sum += qd;
    sum2 += qd * qd;
  }
  const double mean = sum / double(M);
  const double var = std::max(0.0, sum2 / double(M) - mean * mean);
  out.value = kl + log_sigma + mean;
  out.stderr = std::sqrt(var / double(M));
  out.samples = M;
  return out;
}

}  // namespace sae::synth

#endif  // SAE_SYNTH_HPP
