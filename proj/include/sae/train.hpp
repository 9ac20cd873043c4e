#ifndef SAE_TRAIN_HPP
#define SAE_TRAIN_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sae/error.hpp"
#include "sae/model.hpp"
#include "sae/nn.hpp"
#include "sae/objective.hpp"
#include "sae/prior.hpp"
#include "sae/rng.hpp"
#include "sae/volume.hpp"

namespace sae::train {

struct Subject {
  std::string id;
  IntensityVolume image;
};

struct LabeledSubject {
  std::string id;
  IntensityVolume image;
  LabelVolume labels;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;   // first-moment decay
  double beta2 = 0.999; // second-moment decay
  int batch_size = 1;
  int epochs = 20;
  long max_steps = 0;  // 0 = bounded by epochs only
  int checkpoint_every = 0;  // steps between checkpoints; 0 = final only
  std::uint64_t seed = 0;
  std::string prior = "spatial";  // "spatial" | "mrf"
  int warmup_subjects = 16;
  // Start the logit head at the prior's log marginal label frequencies.
  // Keeps the early KL gradient from driving the shared conv weights into a
  // saturated constant-output state before spatial structure emerges.
  bool init_head_bias_from_prior = true;

  void validate() const {
    require(learning_rate > 0.0, ErrorCode::ConfigError,
            "learning_rate must be > 0");
    require(batch_size >= 1, ErrorCode::ConfigError, "batch_size must be >= 1");
    require(epochs >= 1 || max_steps > 0, ErrorCode::ConfigError,
            "need epochs >= 1 or max_steps > 0");
    require(prior == "spatial" || prior == "mrf", ErrorCode::ConfigError,
            "prior must be 'spatial' or 'mrf'");
    require(warmup_subjects >= 0, ErrorCode::ConfigError,
            "warmup_subjects must be >= 0");
  }
};

struct SupervisedConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double validation_fraction = 0.2;
  int patience = 5;   // early-stop patience, in validation evaluations
  int max_epochs = 100;
  std::uint64_t seed = 0;

  void validate() const {
    require(learning_rate > 0.0, ErrorCode::ConfigError,
            "learning_rate must be > 0");
    require(validation_fraction > 0.0 && validation_fraction < 1.0,
            ErrorCode::ConfigError, "validation_fraction must be in (0, 1)");
    require(patience >= 1 && max_epochs >= 1, ErrorCode::ConfigError,
            "patience and max_epochs must be >= 1");
  }
};

struct LossRow {
  long step = 0;
  std::string subject;
  objective::LossBreakdown loss;
};

inline void write_training_log(const std::vector<LossRow>& rows,
                               const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), ErrorCode::IoUnreadable, "cannot write: " + path);
  out << "step,subject_id,kl_spatial,mrf_term,log_sigma_term,recon_quadratic,"
         "total,sigma2\n";
  out.precision(17);
  for (const auto& r : rows) {
    out << r.step << "," << r.subject << "," << r.loss.kl_spatial << ","
        << r.loss.mrf_term << "," << r.loss.log_sigma_term << ","
        << r.loss.recon_quadratic << "," << r.loss.total << "," << r.loss.sigma2
        << "\n";
  }
}

namespace detail {

inline std::string breakdown_dump(const objective::LossBreakdown& b) {
  std::ostringstream os;
  os.precision(17);
  os << "{\"kl_spatial\":" << b.kl_spatial << ",\"mrf_term\":" << b.mrf_term
     << ",\"log_sigma_term\":" << b.log_sigma_term
     << ",\"recon_quadratic\":" << b.recon_quadratic << ",\"total\":" << b.total
     << ",\"sigma2\":" << b.sigma2 << "}";
  return os.str();
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t(0));
  for (std::size_t i = n; i > 1; --i)
    std::swap(idx[i - 1], idx[std::size_t(rng.uniform_int(int(i)))]);
  return idx;
}

}  // namespace detail

struct SaeTrainResult {
  model::SaeModel<float> model;
  objective::SigmaState sigma;
  std::vector<LossRow> log;
  long steps = 0;
};

// Unsupervised SAE training: per step, encoder forward, straight-through
// Gumbel sample, decoder forward on the hard sample, full loss, backward,
// Adam update. sigma^2 bookkeeping advances once per subject.
inline SaeTrainResult train_sae(
    const std::vector<Subject>& subjects, const prior::ProbabilisticAtlas& atlas,
    const prior::MRFPotentials* pot, const model::EncoderConfig& enc_cfg,
    const model::DecoderConfig& dec_cfg, model::GumbelConfig gum_cfg,
    const TrainConfig& cfg, const std::string& out_dir = {},
    std::optional<model::LoadedCheckpoint> resume = std::nullopt) {
  cfg.validate();
  require(!subjects.empty(), ErrorCode::MissingInput, "no training subjects");
  for (const auto& s : subjects)
    require_same_grid(s.image.meta, atlas.meta, "train_sae");
  if (cfg.prior == "mrf")
    require(pot != nullptr, ErrorCode::ConfigError,
            "mrf prior selected but no potentials supplied");
  const prior::MRFPotentials* active_pot = cfg.prior == "mrf" ? pot : nullptr;

  SaeTrainResult res;
  long start_step = 0;
  if (resume.has_value()) {
    res.model = std::move(resume->model);
    res.sigma = resume->info.sigma;
    start_step = resume->info.step;
  } else {
    res.model = model::SaeModel<float>(enc_cfg, dec_cfg, gum_cfg, atlas.meta,
                                       Rng::derive(cfg.seed, 0));
    res.sigma.warmup_subjects = cfg.warmup_subjects;
    res.sigma.window_size = std::max(1, cfg.warmup_subjects);
    if (cfg.init_head_bias_from_prior) {
      const std::int64_t v = atlas.meta.voxels();
      std::vector<float> bias(static_cast<std::size_t>(enc_cfg.num_labels));
      for (int l = 0; l < enc_cfg.num_labels; ++l) {
        double s = 0.0;
        for (std::int64_t j = 0; j < v; ++j)
          s += atlas.probs[std::size_t(l) * std::size_t(v) + std::size_t(j)];
        bias[std::size_t(l)] = float(std::log(std::max(s / double(v), 1e-12)));
      }
      res.model.encoder().set_head_bias(bias);
    }
  }
  gum_cfg.rng_seed = Rng::derive(cfg.seed, 2);
  Rng gumbel_rng(gum_cfg.rng_seed);

  nn::Adam<float> adam_enc(res.model.encoder().params(), cfg.learning_rate,
                           cfg.beta1, cfg.beta2);
  nn::Adam<float> adam_dec(res.model.decoder().params(), cfg.learning_rate,
                           cfg.beta1, cfg.beta2);

  // Subject tensors are cached once; volumes are small at desk scale.
  std::vector<nn::Tensor<float>> xs;
  xs.reserve(subjects.size());
  for (const auto& s : subjects) xs.push_back(res.model.to_tensor(s.image));

  const long total_steps_cap =
      cfg.max_steps > 0 ? cfg.max_steps
                        : long(cfg.epochs) * long(subjects.size());
  long step = start_step;
  bool done = false;

  std::ofstream log_stream;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    log_stream.open(out_dir + "/training_log.csv", std::ios::trunc);
    log_stream << "step,subject_id,kl_spatial,mrf_term,log_sigma_term,"
                  "recon_quadratic,total,sigma2\n";
    log_stream.precision(17);
  }

  // Subject order streams continue across resumes.
  const long epoch_base = start_step / long(subjects.size());
  for (int epoch = 0; !done; ++epoch) {
    if (cfg.max_steps == 0 && epoch >= cfg.epochs) break;
    Rng order_rng(Rng::derive(Rng::derive(cfg.seed, 1),
                              std::uint64_t(epoch_base + epoch)));
    const auto order = detail::shuffled_indices(subjects.size(), order_rng);

    for (std::size_t bi = 0; bi < order.size(); bi += std::size_t(cfg.batch_size)) {
      const std::size_t bend =
          std::min(order.size(), bi + std::size_t(cfg.batch_size));
      adam_enc.zero_grad();
      adam_dec.zero_grad();
      bool any_recon = false;

      for (std::size_t k = bi; k < bend; ++k) {
        const std::size_t si = order[k];
        const auto& x = xs[si];

        auto logits = res.model.encoder_forward(x);
        auto q = nn::softmax_channels(logits);
        auto sample = model::gumbel_softmax_sample(logits, gum_cfg, gumbel_rng);
        auto x_hat = res.model.decoder_forward(sample.hard);

        const auto breakdown =
            objective::total_loss(x, q, x_hat, atlas, active_pot, res.sigma);
        if (!breakdown.finite())
          fail(ErrorCode::NumericError,
               "NaN/Inf loss at step " + std::to_string(step + 1) +
                   "; breakdown: " + detail::breakdown_dump(breakdown));

        // KL (+ MRF) gradient through the posterior softmax.
        nn::Tensor<float> dq(q.c, q.d, q.h, q.w);
        objective::prior_terms_grad(q, atlas, active_pot, dq);
        auto dz = nn::softmax_backward_channels(q, dq);

        if (!res.sigma.in_warmup()) {
          any_recon = true;
          const double inv_s2 = 1.0 / res.sigma.sigma2();
          nn::Tensor<float> dxh(1, x.d, x.h, x.w);
          for (std::size_t i = 0; i < dxh.v.size(); ++i)
            dxh.v[i] = float((double(x_hat.v[i]) - double(x.v[i])) * inv_s2);
          auto d_sample = res.model.decoder().backward(dxh);
          // Straight-through: the hard sample's gradient is applied to the
          // soft relaxation.
          auto dz_recon = model::gumbel_softmax_backward(sample, d_sample, gum_cfg);
          for (std::size_t i = 0; i < dz.v.size(); ++i) dz.v[i] += dz_recon.v[i];
        }
        res.model.encoder().backward(dz);

        const double mse =
            objective::subject_mse_raw(x.v.data(), x_hat.v.data(),
                                       std::int64_t(x.size()));
        res.sigma = objective::update_sigma(res.sigma, mse);
        ++step;
        res.log.push_back({step, subjects[si].id, breakdown});
        if (log_stream.is_open()) {
          const auto& b = breakdown;
          log_stream << step << "," << subjects[si].id << "," << b.kl_spatial
                     << "," << b.mrf_term << "," << b.log_sigma_term << ","
                     << b.recon_quadratic << "," << b.total << "," << b.sigma2
                     << "\n";
        }
        if (step >= total_steps_cap + start_step) break;
      }

      adam_enc.step();
      if (any_recon) adam_dec.step();

      if (!out_dir.empty() && cfg.checkpoint_every > 0 &&
          step % cfg.checkpoint_every == 0)
        model::save_checkpoint(out_dir + "/checkpoint_step" +
                                   std::to_string(step) + ".ckpt",
                               res.model, res.sigma, step, cfg.seed);
      if (step >= total_steps_cap + start_step) {
        done = true;
        break;
      }
    }
    if (cfg.max_steps == 0 && epoch + 1 >= cfg.epochs) done = true;
  }

  res.steps = step;
  if (!out_dir.empty()) {
    model::save_checkpoint(out_dir + "/model.ckpt", res.model, res.sigma, step,
                           cfg.seed);
    log_stream.close();
  }
  return res;
}

// ---------------------------------------------------------------------------
// Generalized soft Dice (supervised upper bound)
// ---------------------------------------------------------------------------

namespace detail {

// Label weights 1/(volume^2) with a small clamp so empty labels stay finite.
inline std::vector<double> dice_label_weights(const LabelVolume& target,
                                              std::int64_t v, int L) {
  std::vector<double> cnt(std::size_t(L), 0.0);
  for (std::int64_t j = 0; j < v; ++j) cnt[std::size_t(target.labels[j])] += 1.0;
  std::vector<double> w(static_cast<std::size_t>(L));
  for (int l = 0; l < L; ++l) w[std::size_t(l)] = 1.0 / (cnt[std::size_t(l)] * cnt[std::size_t(l)] + 1e-8);
  return w;
}

template <class TQ>
inline double soft_dice_raw(const TQ* q, const LabelVolume& target,
                            std::int64_t v, int L, TQ* dq_out) {
  const auto w = dice_label_weights(target, v, L);
  std::vector<double> tcnt(std::size_t(L), 0.0);
  for (std::int64_t j = 0; j < v; ++j) tcnt[std::size_t(target.labels[j])] += 1.0;

  // loss = -2 * sum_l w_l sum_j q*t / sum_l w_l sum_j (q + t)
  double num = 0.0, den = 0.0;
  for (int l = 0; l < L; ++l) {
    const TQ* ql = q + std::int64_t(l) * v;
    double qs = 0.0, is = 0.0;
    for (std::int64_t j = 0; j < v; ++j) {
      qs += double(ql[j]);
      if (target.labels[j] == l) is += double(ql[j]);
    }
    num += w[std::size_t(l)] * is;
    den += w[std::size_t(l)] * (qs + tcnt[std::size_t(l)]);
  }
  const double loss = -2.0 * num / den;

  if (dq_out != nullptr) {
    // d(-2N/D)/dq_jl = -2*w_l*t_jl/D + 2*N*w_l/D^2
    for (int l = 0; l < L; ++l) {
      TQ* dl = dq_out + std::int64_t(l) * v;
      const double a = -2.0 * w[std::size_t(l)] / den;
      const double b = 2.0 * num * w[std::size_t(l)] / (den * den);
      for (std::int64_t j = 0; j < v; ++j)
        dl[j] += TQ((target.labels[j] == l ? a : 0.0) + b);
    }
  }
  return loss;
}

}  // namespace detail

inline double soft_dice_loss(const PosteriorField& q, const LabelVolume& target) {
  require_same_grid(q.meta, target.meta, "soft_dice_loss");
  require(q.num_labels == target.num_labels, ErrorCode::ArgumentError,
          "soft_dice_loss: label count mismatch");
  return detail::soft_dice_raw<float>(q.probs.data(), target, q.meta.voxels(),
                                      q.num_labels, nullptr);
}

template <class T>
inline double soft_dice_loss(const nn::Tensor<T>& q, const LabelVolume& target,
                             nn::Tensor<T>* dq = nullptr) {
  require(q.d == target.meta.shape[0] && q.h == target.meta.shape[1] &&
              q.w == target.meta.shape[2],
          ErrorCode::GridMismatch, "soft_dice_loss: grid mismatch");
  require(q.c == target.num_labels, ErrorCode::ArgumentError,
          "soft_dice_loss: label count mismatch");
  return detail::soft_dice_raw<T>(q.v.data(), target, q.spatial(), q.c,
                                  dq != nullptr ? dq->v.data() : nullptr);
}

struct SupervisedResult {
  model::SaeModel<float> model;
  std::vector<double> train_losses;       // per step
  std::vector<double> validation_losses;  // per epoch
  int stopped_epoch = 0;
  long steps = 0;
};

// Supervised upper bound: the same encoder trained with negative generalized
// soft Dice and validation-based early stopping.
inline SupervisedResult train_supervised(
    const std::vector<LabeledSubject>& subjects,
    const model::EncoderConfig& enc_cfg, const SupervisedConfig& cfg,
    const std::string& out_dir = {}) {
  cfg.validate();
  require(subjects.size() >= 2, ErrorCode::MissingInput,
          "supervised training needs at least 2 subjects");
  const GridMeta grid = subjects.front().image.meta;
  for (const auto& s : subjects) {
    require_same_grid(s.image.meta, grid, "train_supervised");
    require_same_grid(s.labels.meta, grid, "train_supervised");
  }
  const int n_val = std::max(
      1, int(std::lround(cfg.validation_fraction * double(subjects.size()))));
  require(n_val < int(subjects.size()), ErrorCode::MissingInput,
          "validation split leaves no training subjects");

  Rng split_rng(Rng::derive(cfg.seed, 11));
  auto order = detail::shuffled_indices(subjects.size(), split_rng);
  std::vector<std::size_t> val_idx(order.begin(), order.begin() + n_val);
  std::vector<std::size_t> train_idx(order.begin() + n_val, order.end());

  SupervisedResult res;
  res.model = model::SaeModel<float>(enc_cfg, model::DecoderConfig{},
                                     model::GumbelConfig{}, grid,
                                     Rng::derive(cfg.seed, 0));
  nn::Adam<float> adam(res.model.encoder().params(), cfg.learning_rate,
                       cfg.beta1, cfg.beta2);

  std::vector<nn::Tensor<float>> xs;
  for (const auto& s : subjects) xs.push_back(res.model.to_tensor(s.image));

  const auto eval_validation = [&]() {
    double acc = 0.0;
    for (std::size_t vi : val_idx) {
      auto q = nn::softmax_channels(res.model.encoder_forward(xs[vi]));
      acc += soft_dice_loss(q, subjects[vi].labels);
    }
    return acc / double(val_idx.size());
  };

  double best_val = std::numeric_limits<double>::infinity();
  std::vector<std::vector<float>> best_params;
  int flat_evals = 0;
  long step = 0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    Rng order_rng(Rng::derive(Rng::derive(cfg.seed, 13), std::uint64_t(epoch)));
    auto ep_order = train_idx;
    for (std::size_t i = ep_order.size(); i > 1; --i)
      std::swap(ep_order[i - 1], ep_order[std::size_t(order_rng.uniform_int(int(i)))]);

    for (std::size_t si : ep_order) {
      adam.zero_grad();
      auto logits = res.model.encoder_forward(xs[si]);
      auto q = nn::softmax_channels(logits);
      nn::Tensor<float> dq(q.c, q.d, q.h, q.w);
      const double loss = soft_dice_loss(q, subjects[si].labels, &dq);
      if (!std::isfinite(loss))
        fail(ErrorCode::NumericError, "NaN/Inf supervised loss");
      auto dz = nn::softmax_backward_channels(q, dq);
      res.model.encoder().backward(dz);
      adam.step();
      res.train_losses.push_back(loss);
      ++step;
    }

    const double val = eval_validation();
    res.validation_losses.push_back(val);
    res.stopped_epoch = epoch + 1;
    if (val < best_val - 1e-9) {
      best_val = val;
      flat_evals = 0;
      best_params.clear();
      for (auto p : res.model.encoder().params()) best_params.push_back(*p.w);
    } else {
      ++flat_evals;
      if (flat_evals >= cfg.patience) break;
    }
  }
  res.steps = step;

  if (!best_params.empty()) {
    auto params = res.model.encoder().params();
    for (std::size_t i = 0; i < params.size(); ++i) *params[i].w = best_params[i];
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    model::save_checkpoint(out_dir + "/model.ckpt", res.model,
                           objective::SigmaState{}, res.steps, cfg.seed,
                           "supervised");
  }
  return res;
}

}  // namespace sae::train

#endif  // SAE_TRAIN_HPP
