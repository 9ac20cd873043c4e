#ifndef SAE_MODEL_HPP
#define SAE_MODEL_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sae/error.hpp"
#include "sae/nn.hpp"
#include "sae/objective.hpp"
#include "sae/rng.hpp"
#include "sae/volume.hpp"

namespace sae::model {

struct EncoderConfig {
  int num_labels = 0;
  int base_channels = 16;
  int depth = 3;  // number of 2x down/up stages

  void validate() const {
    require(num_labels >= 2, ErrorCode::ConfigError,
            "encoder: num_labels must be >= 2");
    require(base_channels >= 1, ErrorCode::ConfigError,
            "encoder: base_channels must be >= 1");
    require(depth >= 1, ErrorCode::ConfigError, "encoder: depth must be >= 1");
  }
};

struct DecoderConfig {
  int hidden_channels = 16;
  int num_layers = 3;  // output activation is always a sigmoid

  void validate() const {
    require(num_layers >= 1, ErrorCode::ConfigError,
            "decoder: num_layers must be >= 1");
    require(hidden_channels >= 1, ErrorCode::ConfigError,
            "decoder: hidden_channels must be >= 1");
  }
};

struct GumbelConfig {
  double temperature = 2.0 / 3.0;
  bool straight_through = true;
  std::uint64_t rng_seed = 0;

  void validate() const {
    require(temperature > 0.0, ErrorCode::ConfigError,
            "gumbel: temperature must be > 0");
  }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"num_labels", c.num_labels},
       {"base_channels", c.base_channels},
       {"depth", c.depth}};
}
inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.num_labels = j.at("num_labels").get<int>();
  c.base_channels = j.value("base_channels", 16);
  c.depth = j.value("depth", 3);
}
inline void to_json(nlohmann::json& j, const DecoderConfig& c) {
  j = {{"hidden_channels", c.hidden_channels}, {"num_layers", c.num_layers}};
}
inline void from_json(const nlohmann::json& j, DecoderConfig& c) {
  c.hidden_channels = j.value("hidden_channels", 16);
  c.num_layers = j.value("num_layers", 3);
}
inline void to_json(nlohmann::json& j, const GumbelConfig& c) {
  j = {{"temperature", c.temperature},
       {"straight_through", c.straight_through},
       {"rng_seed", c.rng_seed}};
}
inline void from_json(const nlohmann::json& j, GumbelConfig& c) {
  c.temperature = j.value("temperature", 2.0 / 3.0);
  c.straight_through = j.value("straight_through", true);
  c.rng_seed = j.value("rng_seed", std::uint64_t(0));
}

// ---------------------------------------------------------------------------
// Straight-through Gumbel-softmax sampling
// ---------------------------------------------------------------------------

template <class T>
struct GumbelSample {
  nn::Tensor<T> soft;  // softmax((logits + g) / tau)
  nn::Tensor<T> hard;  // exact one-hot of the per-voxel argmax of soft
};

template <class T>
inline GumbelSample<T> gumbel_softmax_sample(const nn::Tensor<T>& logits,
                                             const GumbelConfig& cfg, Rng& rng) {
  cfg.validate();
  nn::Tensor<T> pert = logits;
  const T inv_tau = T(1.0 / cfg.temperature);
  for (auto& v : pert.v) v = (v + T(rng.gumbel())) * inv_tau;
  GumbelSample<T> out;
  out.soft = nn::softmax_channels(pert);
  out.hard = nn::Tensor<T>(logits.c, logits.d, logits.h, logits.w);
  const std::int64_t n = logits.spatial();
  for (std::int64_t j = 0; j < n; ++j) {
    int best = 0;
    T best_p = out.soft.v[std::size_t(j)];
    for (int l = 1; l < logits.c; ++l) {
      const T p = out.soft.v[std::size_t(l) * n + j];
      if (p > best_p) {
        best_p = p;
        best = l;
      }
    }
    out.hard.v[std::size_t(best) * n + j] = T(1);
  }
  return out;
}

// Straight-through backward: the gradient seen by the logits is exactly the
// gradient of the soft sample, evaluated with dL/d(soft) := dL/d(hard).
template <class T>
inline nn::Tensor<T> gumbel_softmax_backward(const GumbelSample<T>& s,
                                             const nn::Tensor<T>& d_out,
                                             const GumbelConfig& cfg) {
  nn::Tensor<T> dz = nn::softmax_backward_channels(s.soft, d_out);
  const T inv_tau = T(1.0 / cfg.temperature);
  for (auto& v : dz.v) v *= inv_tau;
  return dz;
}

// ---------------------------------------------------------------------------
// Model bundle: encoder + decoder sharing one reference grid
// ---------------------------------------------------------------------------

template <class T>
class SaeModel {
 public:
  SaeModel() = default;

  SaeModel(EncoderConfig enc_cfg, DecoderConfig dec_cfg, GumbelConfig gum_cfg,
           GridMeta grid, std::uint64_t init_seed)
      : enc_cfg_(enc_cfg), dec_cfg_(dec_cfg), gum_cfg_(gum_cfg), grid_(grid) {
    enc_cfg_.validate();
    dec_cfg_.validate();
    gum_cfg_.validate();
    grid_.validate();
    for (int s = 0; s < 3; ++s)
      require(grid_.shape[s] % (1 << enc_cfg_.depth) == 0, ErrorCode::ConfigError,
              "grid sides must be divisible by 2^depth");
    Rng rng(init_seed);
    encoder_ = nn::UNet3D<T>(1, enc_cfg_.num_labels, enc_cfg_.base_channels,
                             enc_cfg_.depth, rng);
    decoder_ = nn::DecoderCNN<T>(enc_cfg_.num_labels, dec_cfg_.hidden_channels,
                                 dec_cfg_.num_layers, rng);
  }

  nn::Tensor<T> to_tensor(const IntensityVolume& x) const {
    require_same_grid(x.meta, grid_, "SaeModel");
    nn::Tensor<T> t(1, grid_.shape[0], grid_.shape[1], grid_.shape[2]);
    for (std::size_t i = 0; i < x.values.size(); ++i) t.v[i] = T(x.values[i]);
    return t;
  }

  nn::Tensor<T> encoder_forward(const nn::Tensor<T>& x) {
    return encoder_.forward(x);
  }
  nn::Tensor<T> encoder_forward(const IntensityVolume& x) {
    return encoder_.forward(to_tensor(x));
  }

  nn::Tensor<T> decoder_forward(const nn::Tensor<T>& sample) {
    require(sample.c == enc_cfg_.num_labels, ErrorCode::ArgumentError,
            "decoder input channels must equal num_labels");
    return decoder_.forward(sample);
  }

  PosteriorField posterior(const IntensityVolume& x) {
    const auto q = nn::softmax_channels(encoder_forward(x));
    PosteriorField f;
    f.meta = grid_;
    f.num_labels = enc_cfg_.num_labels;
    f.probs.resize(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) f.probs[i] = float(q.v[i]);
    return f;
  }

  // Single encoder pass + per-voxel argmax; no sampling at inference.
  LabelVolume segment(const IntensityVolume& x) {
    return argmax_labels(posterior(x));
  }

  IntensityVolume reconstruction_to_volume(const nn::Tensor<T>& x_hat) const {
    IntensityVolume out;
    out.meta = grid_;
    out.values.resize(x_hat.size());
    for (std::size_t i = 0; i < x_hat.size(); ++i)
      out.values[i] = float(x_hat.v[i]);
    return out;
  }

  nn::UNet3D<T>& encoder() { return encoder_; }
  nn::DecoderCNN<T>& decoder() { return decoder_; }
  const EncoderConfig& encoder_config() const { return enc_cfg_; }
  const DecoderConfig& decoder_config() const { return dec_cfg_; }
  const GumbelConfig& gumbel_config() const { return gum_cfg_; }
  GumbelConfig& gumbel_config() { return gum_cfg_; }
  const GridMeta& grid() const { return grid_; }

 private:
  EncoderConfig enc_cfg_;
  DecoderConfig dec_cfg_;
  GumbelConfig gum_cfg_;
  GridMeta grid_;
  nn::UNet3D<T> encoder_;
  nn::DecoderCNN<T> decoder_;
};

// ---------------------------------------------------------------------------
// Checkpoints: binary f32 parameter blob + JSON sidecar. Loading restores
// bit-identical inference behavior for float models.
// ---------------------------------------------------------------------------

struct CheckpointInfo {
  EncoderConfig encoder;
  DecoderConfig decoder;
  GumbelConfig gumbel;
  GridMeta grid;
  objective::SigmaState sigma;
  long step = 0;
  std::uint64_t rng_seed = 0;
  std::string mode = "sae";  // "sae" or "supervised"
};

namespace detail {

constexpr char kCkptMagic[8] = {'S', 'A', 'E', 'C', 'K', 'P', 'T', '1'};

inline void write_params_blob(const std::string& path,
                              const std::vector<nn::ParamView<float>>& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorCode::IoUnreadable, "cannot write checkpoint: " + path);
  out.write(kCkptMagic, 8);
  const std::uint32_t n = std::uint32_t(params.size());
  out.write(reinterpret_cast<const char*>(&n), 4);
  for (const auto& p : params) {
    const std::uint64_t len = p.w->size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(reinterpret_cast<const char*>(p.w->data()),
              std::streamsize(len * sizeof(float)));
  }
  require(out.good(), ErrorCode::IoUnreadable, "checkpoint write failed: " + path);
}

inline void read_params_blob(const std::string& path,
                             const std::vector<nn::ParamView<float>>& params) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::IoUnreadable, "cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  require(in.good() && std::memcmp(magic, kCkptMagic, 8) == 0,
          ErrorCode::IoUnknownFormat, "not a checkpoint file: " + path);
  std::uint32_t n = 0;
  in.read(reinterpret_cast<char*>(&n), 4);
  require(in.good() && n == params.size(), ErrorCode::IoHeaderMismatch,
          "checkpoint parameter count mismatch: " + path);
  for (const auto& p : params) {
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 8);
    require(in.good() && len == p.w->size(), ErrorCode::IoHeaderMismatch,
            "checkpoint tensor size mismatch: " + path);
    in.read(reinterpret_cast<char*>(p.w->data()),
            std::streamsize(len * sizeof(float)));
    require(in.good(), ErrorCode::IoCorruptPayload,
            "truncated checkpoint payload: " + path);
  }
}

inline nlohmann::json sigma_to_json(const objective::SigmaState& s) {
  return {{"warmup_subjects", s.warmup_subjects},
          {"window_size", s.window_size},
          {"mse_window", s.mse_window},
          {"subjects_seen", s.subjects_seen},
          {"sigma2", s.in_warmup() ? nlohmann::json() : nlohmann::json(s.current_sigma2)}};
}

inline objective::SigmaState sigma_from_json(const nlohmann::json& j) {
  objective::SigmaState s;
  s.warmup_subjects = j.value("warmup_subjects", 16);
  s.window_size = j.value("window_size", 16);
  s.mse_window = j.value("mse_window", std::vector<double>{});
  s.subjects_seen = j.value("subjects_seen", 0);
  if (j.contains("sigma2") && !j.at("sigma2").is_null())
    s.current_sigma2 = j.at("sigma2").get<double>();
  return s;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, SaeModel<float>& model,
                            const objective::SigmaState& sigma, long step,
                            std::uint64_t rng_seed,
                            const std::string& mode = "sae") {
  std::vector<nn::ParamView<float>> params = model.encoder().params();
  if (mode == "sae") {
    auto dp = model.decoder().params();
    params.insert(params.end(), dp.begin(), dp.end());
  }
  detail::write_params_blob(path, params);

  nlohmann::json j;
  j["format_version"] = 1;
  j["mode"] = mode;
  j["encoder"] = model.encoder_config();
  j["decoder"] = model.decoder_config();
  j["gumbel"] = model.gumbel_config();
  j["grid"] = {{"shape", model.grid().shape},
               {"spacing", model.grid().spacing},
               {"space", model.grid().space_tag}};
  j["sigma"] = detail::sigma_to_json(sigma);
  j["step"] = step;
  j["rng_seed"] = rng_seed;
  std::ofstream side(path + ".json", std::ios::trunc);
  require(side.good(), ErrorCode::IoUnreadable,
          "cannot write checkpoint sidecar: " + path + ".json");
  side << j.dump(2) << "\n";
}

struct LoadedCheckpoint {
  SaeModel<float> model;
  CheckpointInfo info;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream side(path + ".json");
  require(side.good(), ErrorCode::MissingInput,
          "checkpoint sidecar not found: " + path + ".json");
  nlohmann::json j;
  try {
    side >> j;
  } catch (const nlohmann::json::exception&) {
    fail(ErrorCode::IoUnknownFormat, "checkpoint sidecar is not valid JSON");
  }

  LoadedCheckpoint out;
  try {
    out.info.encoder = j.at("encoder").get<EncoderConfig>();
    out.info.decoder = j.at("decoder").get<DecoderConfig>();
    out.info.gumbel = j.at("gumbel").get<GumbelConfig>();
    const auto& g = j.at("grid");
    out.info.grid.shape = g.at("shape").get<std::array<int, 3>>();
    out.info.grid.spacing = g.at("spacing").get<std::array<double, 3>>();
    out.info.grid.space_tag = g.value("space", std::string());
    out.info.sigma = detail::sigma_from_json(j.value("sigma", nlohmann::json::object()));
    out.info.step = j.value("step", 0L);
    out.info.rng_seed = j.value("rng_seed", std::uint64_t(0));
    out.info.mode = j.value("mode", std::string("sae"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::IoHeaderMismatch,
         std::string("checkpoint sidecar field error: ") + e.what());
  }

  out.model = SaeModel<float>(out.info.encoder, out.info.decoder,
                              out.info.gumbel, out.info.grid, /*init_seed=*/0);
  std::vector<nn::ParamView<float>> params = out.model.encoder().params();
  if (out.info.mode == "sae") {
    auto dp = out.model.decoder().params();
    params.insert(params.end(), dp.begin(), dp.end());
  }
  detail::read_params_blob(path, params);
  return out;
}

}  // namespace sae::model

#endif  // SAE_MODEL_HPP
