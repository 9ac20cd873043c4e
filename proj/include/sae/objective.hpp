#ifndef SAE_OBJECTIVE_HPP
#define SAE_OBJECTIVE_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "sae/error.hpp"
#include "sae/nn.hpp"
#include "sae/prior.hpp"
#include "sae/volume.hpp"

namespace sae::objective {

// ---------------------------------------------------------------------------
// sigma^2 schedule: reconstruction weight is zero for the first
// `warmup_subjects` subjects, afterwards sigma^2 is the windowed mean MSE
// rounded to a power of 10.
// ---------------------------------------------------------------------------

struct SigmaState {
  int warmup_subjects = 16;
  int window_size = 16;
  std::vector<double> mse_window;  // most recent last
  int subjects_seen = 0;
  double current_sigma2 = std::numeric_limits<double>::infinity();

  bool in_warmup() const { return subjects_seen < warmup_subjects; }
  double sigma2() const { return current_sigma2; }
};

// Pushes one per-subject MSE (mean squared residual per voxel) and refreshes
// sigma^2. Ties in log10 round to the larger variance, with a 1e-9 tolerance
// so representable powers of 10 land on the intended side.
inline SigmaState update_sigma(SigmaState state, double subject_mse) {
  require(subject_mse >= 0.0, ErrorCode::ArgumentError,
          "subject MSE must be non-negative");
  state.mse_window.push_back(subject_mse);
  if (int(state.mse_window.size()) > state.window_size)
    state.mse_window.erase(state.mse_window.begin());
  ++state.subjects_seen;
  if (state.in_warmup()) return state;

  double mean = 0.0;
  for (double m : state.mse_window) mean += m;
  mean /= double(state.mse_window.size());
  if (mean <= 0.0) {
    state.current_sigma2 = 1e-12;
    return state;
  }
  const double exponent = std::floor(std::log10(mean) + 0.5 + 1e-9);
  state.current_sigma2 = std::pow(10.0, exponent);
  return state;
}

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

struct LossBreakdown {
  double kl_spatial = 0.0;
  double mrf_term = 0.0;
  double recon_quadratic = 0.0;
  double log_sigma_term = 0.0;
  double total = 0.0;
  double sigma2 = std::numeric_limits<double>::infinity();
  bool warmup = true;

  bool finite() const {
    return std::isfinite(kl_spatial) && std::isfinite(mrf_term) &&
           std::isfinite(recon_quadratic) && std::isfinite(log_sigma_term) &&
           std::isfinite(total);
  }
};

namespace detail {

struct FieldDims {
  int L = 0, D = 0, H = 0, W = 0;
  std::int64_t v = 0;
};

inline FieldDims dims_of(const OneHotField& f) {
  return {f.num_labels, f.meta.shape[0], f.meta.shape[1], f.meta.shape[2],
          f.meta.voxels()};
}

template <class T>
inline FieldDims dims_of(const nn::Tensor<T>& t) {
  return {t.c, t.d, t.h, t.w, t.spatial()};
}

inline void check_against_atlas(const FieldDims& d,
                                const prior::ProbabilisticAtlas& atlas,
                                const char* what) {
  require(d.L == atlas.num_labels, ErrorCode::ArgumentError,
          std::string(what) + ": label count mismatch");
  require(d.D == atlas.meta.shape[0] && d.H == atlas.meta.shape[1] &&
              d.W == atlas.meta.shape[2],
          ErrorCode::GridMismatch, std::string(what) + ": grid mismatch");
}

// Sum over j of [cross-entropy H(q_j, p_j) minus entropy H(q_j)], i.e. the
// exact KL between the factorized posterior and the spatial prior. 0*log(0)
// is treated as 0.
template <class TQ, class TP>
inline double kl_spatial_raw(const TQ* q, const TP* p, std::int64_t v, int L) {
  double acc = 0.0;
  for (int l = 0; l < L; ++l) {
    const TQ* ql = q + std::int64_t(l) * v;
    const TP* pl = p + std::int64_t(l) * v;
    double lacc = 0.0;
    for (std::int64_t j = 0; j < v; ++j) {
      const double qv = double(ql[j]);
      if (qv <= 0.0) continue;
      lacc += qv * (std::log(qv) - std::log(double(pl[j])));
    }
    acc += lacc;
  }
  return acc;
}

// d(kl_spatial)/dq, scaled; the caller folds this through the softmax.
template <class TQ, class TP>
inline void kl_spatial_grad_raw(const TQ* q, const TP* p, std::int64_t v, int L,
                                TQ* dq, double scale) {
  for (int l = 0; l < L; ++l) {
    const TQ* ql = q + std::int64_t(l) * v;
    const TP* pl = p + std::int64_t(l) * v;
    TQ* dl = dq + std::int64_t(l) * v;
    for (std::int64_t j = 0; j < v; ++j) {
      const double qv = std::max(double(ql[j]), 1e-30);
      dl[j] += TQ(scale * (std::log(qv) - std::log(double(pl[j])) + 1.0));
    }
  }
}

// Clipped 26-neighborhood channel sums: S[l][j] = sum_{k in N_j} q[l][k].
template <class TQ>
inline std::vector<double> neighbor_sums(const TQ* q, const FieldDims& dm) {
  std::vector<double> S(std::size_t(dm.L) * dm.v, 0.0);
  const auto& offs = prior::neighborhood26();
  for (int l = 0; l < dm.L; ++l) {
    const TQ* ql = q + std::int64_t(l) * dm.v;
    double* Sl = S.data() + std::int64_t(l) * dm.v;
#pragma omp parallel for schedule(static)
    for (int z = 0; z < dm.D; ++z)
      for (int y = 0; y < dm.H; ++y)
        for (int x = 0; x < dm.W; ++x) {
          double s = 0.0;
          for (const auto& o : offs) {
            const int zz = z + o[0], yy = y + o[1], xx = x + o[2];
            if (zz < 0 || zz >= dm.D || yy < 0 || yy >= dm.H || xx < 0 ||
                xx >= dm.W)
              continue;
            s += double(ql[(std::int64_t(zz) * dm.H + yy) * dm.W + xx]);
          }
          Sl[(std::int64_t(z) * dm.H + y) * dm.W + x] = s;
        }
  }
  return S;
}

// Eq-style expected pairwise energy with a leading minus:
//   -sum_j sum_a q_j(a) sum_{k in N_j} sum_b q_k(b) V(b, a)
// where a is the center label and b the neighbor label.
template <class TQ>
inline double mrf_loss_raw(const TQ* q, const prior::MRFPotentials& pot,
                           const FieldDims& dm) {
  const auto S = neighbor_sums(q, dm);
  double acc = 0.0;
  for (int a = 0; a < dm.L; ++a) {
    const TQ* qa = q + std::int64_t(a) * dm.v;
    for (int b = 0; b < dm.L; ++b) {
      const double vba = pot.pair(b, a);
      if (vba == 0.0) continue;
      const double* Sb = S.data() + std::int64_t(b) * dm.v;
      double dot = 0.0;
      for (std::int64_t j = 0; j < dm.v; ++j) dot += double(qa[j]) * Sb[j];
      acc += vba * dot;
    }
  }
  return -acc;
}

// q_j(a) appears once as a center and once as a neighbor of every k in N_j:
//   d(mrf)/dq_j(a) = -sum_b S[b][j] * (V(b, a) + V(a, b)).
template <class TQ>
inline void mrf_loss_grad_raw(const TQ* q, const prior::MRFPotentials& pot,
                              const FieldDims& dm, TQ* dq, double scale) {
  const auto S = neighbor_sums(q, dm);
  for (int a = 0; a < dm.L; ++a) {
    TQ* da = dq + std::int64_t(a) * dm.v;
    for (int b = 0; b < dm.L; ++b) {
      const double w = pot.pair(b, a) + pot.pair(a, b);
      if (w == 0.0) continue;
      const double* Sb = S.data() + std::int64_t(b) * dm.v;
      for (std::int64_t j = 0; j < dm.v; ++j)
        da[j] -= TQ(scale * w * Sb[j]);
    }
  }
}

}  // namespace detail

inline double kl_spatial(const PosteriorField& q,
                         const prior::ProbabilisticAtlas& atlas) {
  const auto dm = detail::dims_of(q);
  detail::check_against_atlas(dm, atlas, "kl_spatial");
  return detail::kl_spatial_raw(q.probs.data(), atlas.probs.data(), dm.v, dm.L);
}

template <class T>
inline double kl_spatial(const nn::Tensor<T>& q,
                         const prior::ProbabilisticAtlas& atlas) {
  const auto dm = detail::dims_of(q);
  detail::check_against_atlas(dm, atlas, "kl_spatial");
  return detail::kl_spatial_raw(q.v.data(), atlas.probs.data(), dm.v, dm.L);
}

inline double mrf_loss(const PosteriorField& q, const prior::MRFPotentials& pot) {
  const auto dm = detail::dims_of(q);
  require(dm.L == pot.num_labels, ErrorCode::ArgumentError,
          "mrf_loss: label count mismatch");
  require(dm.D == pot.meta.shape[0] && dm.H == pot.meta.shape[1] &&
              dm.W == pot.meta.shape[2],
          ErrorCode::GridMismatch, "mrf_loss: grid mismatch");
  return detail::mrf_loss_raw(q.probs.data(), pot, dm);
}

template <class T>
inline double mrf_loss(const nn::Tensor<T>& q, const prior::MRFPotentials& pot) {
  const auto dm = detail::dims_of(q);
  require(dm.L == pot.num_labels, ErrorCode::ArgumentError,
          "mrf_loss: label count mismatch");
  require(dm.D == pot.meta.shape[0] && dm.H == pot.meta.shape[1] &&
              dm.W == pot.meta.shape[2],
          ErrorCode::GridMismatch, "mrf_loss: grid mismatch");
  return detail::mrf_loss_raw(q.v.data(), pot, dm);
}

// KL under the MRF prior, up to the intractable log-partition constant which
// does not depend on the parameters.
template <class Q>
inline double kl_mrf(const Q& q, const prior::ProbabilisticAtlas& atlas,
                     const prior::MRFPotentials& pot) {
  return kl_spatial(q, atlas) + mrf_loss(q, pot);
}

struct ReconTerms {
  double log_sigma_term = 0.0;
  double recon_quadratic = 0.0;
};

template <class TX>
inline ReconTerms reconstruction_terms_raw(const TX* x, const TX* x_hat,
                                           std::int64_t v, double sigma2) {
  require(sigma2 > 0.0, ErrorCode::ArgumentError, "sigma^2 must be positive");
  double sse = 0.0;
  for (std::int64_t j = 0; j < v; ++j) {
    const double r = double(x[j]) - double(x_hat[j]);
    sse += r * r;
  }
  return {0.5 * double(v) * std::log(sigma2), sse / (2.0 * sigma2)};
}

inline ReconTerms reconstruction_terms(const IntensityVolume& x,
                                       const IntensityVolume& x_hat,
                                       double sigma2) {
  require_same_grid(x.meta, x_hat.meta, "reconstruction_terms");
  return reconstruction_terms_raw(x.values.data(), x_hat.values.data(),
                                  x.meta.voxels(), sigma2);
}

template <class T>
inline ReconTerms reconstruction_terms(const nn::Tensor<T>& x,
                                       const nn::Tensor<T>& x_hat, double sigma2) {
  require(x.same_shape(x_hat), ErrorCode::GridMismatch,
          "reconstruction_terms: shape mismatch");
  return reconstruction_terms_raw(x.v.data(), x_hat.v.data(),
                                  std::int64_t(x.size()), sigma2);
}

template <class TX>
inline double subject_mse_raw(const TX* x, const TX* x_hat, std::int64_t v) {
  double sse = 0.0;
  for (std::int64_t j = 0; j < v; ++j) {
    const double r = double(x[j]) - double(x_hat[j]);
    sse += r * r;
  }
  return sse / double(v);
}

// Full Eq.-5-style loss for one subject. The reconstruction terms are zeroed
// while the sigma schedule is still warming up.
template <class Q, class X>
inline LossBreakdown total_loss(const X& x, const Q& q, const X& x_hat,
                                const prior::ProbabilisticAtlas& atlas,
                                const prior::MRFPotentials* pot,
                                const SigmaState& state) {
  LossBreakdown out;
  out.kl_spatial = kl_spatial(q, atlas);
  out.mrf_term = pot != nullptr ? mrf_loss(q, *pot) : 0.0;
  out.warmup = state.in_warmup();
  if (!out.warmup) {
    out.sigma2 = state.sigma2();
    const auto rt = reconstruction_terms(x, x_hat, out.sigma2);
    out.log_sigma_term = rt.log_sigma_term;
    out.recon_quadratic = rt.recon_quadratic;
  }
  out.total =
      out.kl_spatial + out.mrf_term + out.log_sigma_term + out.recon_quadratic;
  return out;
}

// Analytic gradient of (kl_spatial + optional mrf term) with respect to the
// posterior probabilities; accumulated into dq.
template <class T>
inline void prior_terms_grad(const nn::Tensor<T>& q,
                             const prior::ProbabilisticAtlas& atlas,
                             const prior::MRFPotentials* pot, nn::Tensor<T>& dq) {
  const auto dm = detail::dims_of(q);
  detail::check_against_atlas(dm, atlas, "prior_terms_grad");
  require(dq.same_shape(q), ErrorCode::ArgumentError, "dq shape mismatch");
  detail::kl_spatial_grad_raw(q.v.data(), atlas.probs.data(), dm.v, dm.L,
                              dq.v.data(), 1.0);
  if (pot != nullptr)
    detail::mrf_loss_grad_raw(q.v.data(), *pot, dm, dq.v.data(), 1.0);
}

}  // namespace sae::objective

#endif  // SAE_OBJECTIVE_HPP
