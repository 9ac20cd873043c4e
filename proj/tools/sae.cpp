// sae: command-line front-end for phantom synthesis, prior construction,
// training, segmentation and evaluation. File formats and config schemas are
// documented in docs/file_formats.md.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sae/eval.hpp"
#include "sae/io.hpp"
#include "sae/model.hpp"
#include "sae/prior.hpp"
#include "sae/synth.hpp"
#include "sae/train.hpp"
#include "sae/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

extern char** environ;

namespace {

constexpr const char* kVersion = "0.1.0";

int exit_code_for(sae::ErrorCode c) {
  switch (c) {
    case sae::ErrorCode::ConfigError: return 2;
    case sae::ErrorCode::MissingInput: return 3;
    case sae::ErrorCode::GridMismatch: return 4;
    case sae::ErrorCode::ArgumentError: return 5;
    case sae::ErrorCode::IoUnreadable: return 6;
    case sae::ErrorCode::IoUnknownFormat: return 7;
    case sae::ErrorCode::IoHeaderMismatch: return 8;
    case sae::ErrorCode::IoCorruptPayload: return 9;
    case sae::ErrorCode::NumericError: return 10;
    case sae::ErrorCode::Unsupported: return 11;
    default: return 1;
  }
}

// ---------------------------------------------------------------------------
// Config handling
// ---------------------------------------------------------------------------

json load_config(const std::string& path) {
  std::ifstream in(path);
  sae::require(in.good(), sae::ErrorCode::MissingInput,
               "config file not found: " + path);
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    sae::fail(sae::ErrorCode::ConfigError,
              std::string("config is not valid JSON: ") + e.what());
  }
}

// Environment overrides: SAE_TRAIN__LEARNING_RATE=2e-4 sets
// config["train"]["learning_rate"]; '__' separates nesting levels.
void apply_env_overrides(json& cfg) {

  for (char** e = environ; *e != nullptr; ++e) {
    std::string kv(*e);
    if (kv.rfind("SAE_", 0) != 0) continue;
    const auto eq = kv.find('=');
    if (eq == std::string::npos) continue;
    std::string key = kv.substr(4, eq - 4);
    const std::string val = kv.substr(eq + 1);
    for (auto& c : key) c = char(std::tolower(c));
    std::vector<std::string> path;
    std::size_t pos = 0;
    while (true) {
      const auto sep = key.find("__", pos);
      if (sep == std::string::npos) {
        path.push_back(key.substr(pos));
        break;
      }
      path.push_back(key.substr(pos, sep - pos));
      pos = sep + 2;
    }
    json* node = &cfg;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) node = &(*node)[path[i]];
    json parsed;
    try {
      parsed = json::parse(val);
    } catch (const json::exception&) {
      parsed = val;  // plain string
    }
    (*node)[path.back()] = parsed;
  }
}

enum class FieldKind { Number, Integer, String, Boolean, Array, Object, Any };

struct FieldSpec {
  const char* name;
  FieldKind kind;
  bool required = false;
};

void check_schema(const json& j, const std::vector<FieldSpec>& fields,
                  const std::string& where) {
  sae::require(j.is_object(), sae::ErrorCode::ConfigError,
               where + ": expected a JSON object");
  for (const auto& [key, val] : j.items()) {
    const FieldSpec* spec = nullptr;
    for (const auto& f : fields)
      if (key == f.name) {
        spec = &f;
        break;
      }
    sae::require(spec != nullptr, sae::ErrorCode::ConfigError,
                 where + ": unknown config field '" + key + "'");
    bool ok = true;
    switch (spec->kind) {
      case FieldKind::Number: ok = val.is_number(); break;
      case FieldKind::Integer: ok = val.is_number_integer(); break;
      case FieldKind::String: ok = val.is_string(); break;
      case FieldKind::Boolean: ok = val.is_boolean(); break;
      case FieldKind::Array: ok = val.is_array(); break;
      case FieldKind::Object: ok = val.is_object(); break;
      case FieldKind::Any: ok = true; break;
    }
    sae::require(ok, sae::ErrorCode::ConfigError,
                 where + ": field '" + key + "' has the wrong type");
  }
  for (const auto& f : fields)
    sae::require(!f.required || j.contains(f.name), sae::ErrorCode::ConfigError,
                 where + ": missing required field '" + std::string(f.name) + "'");
}

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string device = "auto";
  std::string prior_flag;
};

void check_device(const std::string& device) {
  sae::require(device == "auto" || device == "cpu" || device == "accelerator",
               sae::ErrorCode::ConfigError,
               "--device must be auto, cpu or accelerator");
  sae::require(device != "accelerator", sae::ErrorCode::Unsupported,
               "accelerator execution is not available in this build");
}

void write_run_info(const CommonArgs& args, const std::string& command,
                    const json& cfg) {
  fs::create_directories(args.out_dir);
  json info;
  info["command"] = command;
  info["version"] = kVersion;
  info["seed"] = args.seed;
  info["config"] = cfg;
  std::ofstream out(args.out_dir + "/run_info.json", std::ios::trunc);
  out << info.dump(2) << "\n";
}

void write_manifest(const std::string& out_dir, const json& manifest) {
  std::ofstream out(out_dir + "/manifest.json", std::ios::trunc);
  out << manifest.dump(2) << "\n";
}

std::string volume_ext(const std::string& format) {
  sae::require(format == "raw" || format == "nifti", sae::ErrorCode::ConfigError,
               "format must be 'raw' or 'nifti'");
  return format == "raw" ? ".json" : ".nii.gz";
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

sae::synth::PhantomSpec spec_from_config(const json& cfg) {
  using sae::synth::PhantomSpec;
  const std::string preset = cfg.value("preset", std::string("easy"));
  std::array<int, 3> shape{32, 32, 32};
  if (cfg.contains("shape"))
    for (int i = 0; i < 3; ++i) shape[std::size_t(i)] = cfg["shape"][std::size_t(i)].get<int>();
  const int L = cfg.value("num_labels", 4);
  PhantomSpec spec;
  if (preset == "easy")
    spec = sae::synth::easy_preset(L, shape);
  else if (preset == "overlapping")
    spec = sae::synth::overlapping_preset(L, shape);
  else
    sae::fail(sae::ErrorCode::ConfigError,
              "preset must be 'easy' or 'overlapping'");
  if (cfg.contains("noise_std")) spec.noise_std = cfg["noise_std"].get<double>();
  if (cfg.contains("jitter")) spec.jitter = cfg["jitter"].get<double>();
  if (cfg.contains("intensity_means"))
    spec.intensity_means = cfg["intensity_means"].get<std::vector<double>>();
  spec.geometry_seed = cfg.value("geometry_seed", std::uint64_t(0));
  spec.validate();
  return spec;
}

json spec_to_json(const sae::synth::PhantomSpec& s) {
  return {{"shape", s.shape},          {"num_labels", s.num_labels},
          {"geometry_seed", s.geometry_seed}, {"intensity_means", s.intensity_means},
          {"noise_std", s.noise_std},  {"jitter", s.jitter},
          {"preset", s.preset}};
}

int cmd_synth(const CommonArgs& args) {
  json cfg = load_config(args.config_path);
  apply_env_overrides(cfg);
  check_schema(cfg,
               {{"shape", FieldKind::Array},
                {"num_labels", FieldKind::Integer},
                {"preset", FieldKind::String},
                {"subjects_train", FieldKind::Integer},
                {"subjects_test", FieldKind::Integer},
                {"noise_std", FieldKind::Number},
                {"jitter", FieldKind::Number},
                {"intensity_means", FieldKind::Array},
                {"geometry_seed", FieldKind::Integer},
                {"format", FieldKind::String}},
               "synth config");
  const auto spec = spec_from_config(cfg);
  const int n_train = cfg.value("subjects_train", 30);
  const int n_test = cfg.value("subjects_test", 8);
  const std::string ext = volume_ext(cfg.value("format", std::string("raw")));
  write_run_info(args, "synth", cfg);

  json manifest;
  manifest["kind"] = "phantom_dataset";
  manifest["spec"] = spec_to_json(spec);
  manifest["num_labels"] = spec.num_labels;
  for (const std::string part : {"train", "test"}) {
    const int n = part == "train" ? n_train : n_test;
    const std::uint64_t part_seed =
        sae::Rng::derive(args.seed, part == "train" ? 1 : 2);
    const auto subjects = sae::synth::generate_population(spec, n, part_seed);
    fs::create_directories(args.out_dir + "/" + part);
    json list = json::array();
    for (const auto& s : subjects) {
      const std::string img = part + "/" + s.id + "_img" + ext;
      const std::string seg = part + "/" + s.id + "_seg" + ext;
      sae::io::save_volume(s.image, args.out_dir + "/" + img);
      sae::io::save_volume(s.labels, args.out_dir + "/" + seg);
      list.push_back({{"id", s.id}, {"image", img}, {"labels", seg}, {"seed", s.seed}});
    }
    manifest[part] = list;
  }
  write_manifest(args.out_dir, manifest);
  std::cout << "wrote phantom dataset (" << n_train << " train / " << n_test
            << " test) to " << args.out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// build-prior
// ---------------------------------------------------------------------------

int cmd_build_prior(const CommonArgs& args) {
  json cfg = load_config(args.config_path);
  apply_env_overrides(cfg);
  check_schema(cfg,
               {{"mode", FieldKind::String, true},
                {"inputs", FieldKind::Array},
                {"input", FieldKind::String},
                {"blur_sigma_mm", FieldKind::Number},
                {"floor", FieldKind::Number},
                {"mrf", FieldKind::Boolean},
                {"alpha", FieldKind::Number},
                {"format", FieldKind::String}},
               "build-prior config");
  const std::string mode = cfg["mode"].get<std::string>();
  const double floor_eps = cfg.value("floor", sae::prior::kDefaultFloor);
  const bool with_mrf = cfg.value("mrf", false);
  const double alpha = cfg.value("alpha", sae::prior::kDefaultCountSmoothing);
  const std::string ext = volume_ext(cfg.value("format", std::string("raw")));
  write_run_info(args, "build-prior", cfg);

  std::vector<std::string> inputs;
  if (cfg.contains("inputs"))
    inputs = cfg["inputs"].get<std::vector<std::string>>();
  else if (cfg.contains("input"))
    inputs.push_back(cfg["input"].get<std::string>());
  sae::require(!inputs.empty(), sae::ErrorCode::ConfigError,
               "build-prior: no inputs given");
  for (const auto& p : inputs)
    sae::require(fs::exists(sae::io::detail::raw_header_path(p)) || fs::exists(p),
                 sae::ErrorCode::MissingInput, "input not found: " + p);

  sae::prior::ProbabilisticAtlas atlas;
  std::optional<sae::LabelVolume> mrf_source;
  if (mode == "blur_single") {
    sae::require(inputs.size() == 1, sae::ErrorCode::ConfigError,
                 "blur_single takes exactly one input");
    auto seg = sae::io::load_labels(inputs[0]);
    atlas = sae::prior::build_spatial_prior_from_single(
        seg, cfg.value("blur_sigma_mm", sae::prior::kDefaultBlurSigmaMm),
        floor_eps);
    mrf_source = std::move(seg);
  } else if (mode == "frequency") {
    std::vector<sae::LabelVolume> segs;
    for (const auto& p : inputs) segs.push_back(sae::io::load_labels(p));
    atlas = sae::prior::build_spatial_prior_from_many(segs, floor_eps);
    mrf_source = std::move(segs.front());
  } else if (mode == "ingest") {
    sae::require(inputs.size() == 1, sae::ErrorCode::ConfigError,
                 "ingest takes exactly one input");
    auto res = sae::prior::ingest_atlas(inputs[0], floor_eps);
    if (res.warned)
      std::cerr << "warning: " << res.off_voxels
                << " voxels had channel sums off by more than 0.1 before "
                   "renormalization\n";
    atlas = std::move(res.atlas);
    sae::require(!with_mrf, sae::ErrorCode::ConfigError,
                 "mrf potentials need a segmentation input; use blur_single "
                 "or frequency mode");
  } else {
    sae::fail(sae::ErrorCode::ConfigError,
              "mode must be blur_single, frequency or ingest");
  }

  const std::string atlas_path = args.out_dir + "/atlas" + ext;
  sae::prior::save_atlas(atlas, atlas_path);
  json manifest;
  manifest["kind"] = "prior";
  manifest["atlas"] = "atlas" + ext;
  manifest["num_labels"] = atlas.num_labels;
  manifest["floor"] = atlas.floor_eps;
  if (with_mrf) {
    const auto pw = sae::prior::estimate_pairwise_potentials(*mrf_source, alpha);
    sae::prior::save_pairwise_csv(pw, atlas.num_labels, alpha,
                                  args.out_dir + "/pairwise.csv");
    manifest["pairwise"] = "pairwise.csv";
    manifest["alpha"] = alpha;
  }
  write_manifest(args.out_dir, manifest);
  std::cout << "wrote prior to " << args.out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct DatasetPart {
  std::vector<sae::train::LabeledSubject> subjects;
  int num_labels = 0;
};

DatasetPart load_dataset_part(const std::string& manifest_path,
                              const std::string& part, bool need_labels) {
  std::ifstream in(manifest_path);
  sae::require(in.good(), sae::ErrorCode::MissingInput,
               "dataset manifest not found: " + manifest_path);
  json m;
  try {
    in >> m;
  } catch (const json::exception&) {
    sae::fail(sae::ErrorCode::IoUnknownFormat,
              "dataset manifest is not valid JSON: " + manifest_path);
  }
  sae::require(m.contains(part), sae::ErrorCode::ConfigError,
               "dataset manifest has no '" + part + "' section");
  const fs::path base = fs::path(manifest_path).parent_path();
  DatasetPart out;
  out.num_labels = m.value("num_labels", 0);
  bool normalized_any = false;
  for (const auto& e : m[part]) {
    sae::train::LabeledSubject s;
    s.id = e.at("id").get<std::string>();
    s.image = sae::io::load_intensity((base / e.at("image").get<std::string>()).string());
    // The sigmoid reconstruction head expects intensities in [0, 1].
    float lo = s.image.values.empty() ? 0.0f : s.image.values[0], hi = lo;
    for (float v : s.image.values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (lo < 0.0f || hi > 1.0f) {
      s.image = sae::normalize_unit_range(s.image);
      normalized_any = true;
    }
    if (need_labels || e.contains("labels"))
      s.labels = sae::io::load_labels((base / e.at("labels").get<std::string>()).string());
    out.subjects.push_back(std::move(s));
  }
  if (normalized_any)
    std::cerr << "note: min-max normalized out-of-range intensities to [0, 1]\n";
  sae::require(!out.subjects.empty(), sae::ErrorCode::MissingInput,
               "dataset part '" + part + "' is empty");
  return out;
}

sae::train::TrainConfig train_config_from_json(const json& t) {
  check_schema(t,
               {{"learning_rate", FieldKind::Number},
                {"beta1", FieldKind::Number},
                {"beta2", FieldKind::Number},
                {"batch_size", FieldKind::Integer},
                {"epochs", FieldKind::Integer},
                {"max_steps", FieldKind::Integer},
                {"checkpoint_every", FieldKind::Integer},
                {"seed", FieldKind::Integer},
                {"prior", FieldKind::String},
                {"warmup_subjects", FieldKind::Integer},
                {"init_head_bias_from_prior", FieldKind::Boolean}},
               "train config");
  sae::train::TrainConfig c;
  c.learning_rate = t.value("learning_rate", c.learning_rate);
  c.beta1 = t.value("beta1", c.beta1);
  c.beta2 = t.value("beta2", c.beta2);
  c.batch_size = t.value("batch_size", c.batch_size);
  c.epochs = t.value("epochs", c.epochs);
  c.max_steps = t.value("max_steps", 0L);
  c.checkpoint_every = t.value("checkpoint_every", c.checkpoint_every);
  c.seed = t.value("seed", c.seed);
  c.prior = t.value("prior", c.prior);
  c.warmup_subjects = t.value("warmup_subjects", c.warmup_subjects);
  c.init_head_bias_from_prior =
      t.value("init_head_bias_from_prior", c.init_head_bias_from_prior);
  return c;
}

int cmd_train(const CommonArgs& args, const std::string& resume_path) {
  json cfg = load_config(args.config_path);
  apply_env_overrides(cfg);
  check_schema(cfg,
               {{"mode", FieldKind::String},
                {"dataset", FieldKind::String, true},
                {"atlas", FieldKind::String},
                {"pairwise", FieldKind::String},
                {"encoder", FieldKind::Object},
                {"decoder", FieldKind::Object},
                {"gumbel", FieldKind::Object},
                {"train", FieldKind::Object},
                {"supervised", FieldKind::Object}},
               "train config");
  const std::string mode = cfg.value("mode", std::string("sae"));
  write_run_info(args, "train", cfg);

  const auto data = load_dataset_part(cfg["dataset"].get<std::string>(), "train",
                                      mode == "supervised");
  sae::model::EncoderConfig enc_cfg;
  enc_cfg.num_labels = data.num_labels;
  if (cfg.contains("encoder")) {
    check_schema(cfg["encoder"],
                 {{"num_labels", FieldKind::Integer},
                  {"base_channels", FieldKind::Integer},
                  {"depth", FieldKind::Integer}},
                 "encoder config");
    enc_cfg = cfg["encoder"].get<sae::model::EncoderConfig>();
  }

  if (mode == "supervised") {
    sae::train::SupervisedConfig sc;
    if (cfg.contains("supervised")) {
      const auto& s = cfg["supervised"];
      check_schema(s,
                   {{"learning_rate", FieldKind::Number},
                    {"beta1", FieldKind::Number},
                    {"beta2", FieldKind::Number},
                    {"validation_fraction", FieldKind::Number},
                    {"patience", FieldKind::Integer},
                    {"max_epochs", FieldKind::Integer},
                    {"seed", FieldKind::Integer}},
                   "supervised config");
      sc.learning_rate = s.value("learning_rate", sc.learning_rate);
      sc.beta1 = s.value("beta1", sc.beta1);
      sc.beta2 = s.value("beta2", sc.beta2);
      sc.validation_fraction = s.value("validation_fraction", sc.validation_fraction);
      sc.patience = s.value("patience", sc.patience);
      sc.max_epochs = s.value("max_epochs", sc.max_epochs);
      sc.seed = s.value("seed", sc.seed);
    }
    if (args.seed_set) sc.seed = args.seed;
    auto res = sae::train::train_supervised(data.subjects, enc_cfg, sc, args.out_dir);
    json manifest;
    manifest["kind"] = "checkpoint";
    manifest["mode"] = "supervised";
    manifest["checkpoint"] = "model.ckpt";
    manifest["stopped_epoch"] = res.stopped_epoch;
    manifest["steps"] = res.steps;
    write_manifest(args.out_dir, manifest);
    std::cout << "supervised training stopped after epoch " << res.stopped_epoch
              << " (" << res.steps << " steps)\n";
    return 0;
  }

  sae::require(mode == "sae", sae::ErrorCode::ConfigError,
               "mode must be 'sae' or 'supervised'");
  sae::require(cfg.contains("atlas"), sae::ErrorCode::ConfigError,
               "train config: missing required field 'atlas'");
  auto atlas = sae::prior::load_atlas(cfg["atlas"].get<std::string>());

  sae::train::TrainConfig tc;
  if (cfg.contains("train")) tc = train_config_from_json(cfg["train"]);
  if (args.seed_set) tc.seed = args.seed;
  if (!args.prior_flag.empty()) tc.prior = args.prior_flag;

  std::optional<sae::prior::MRFPotentials> pot;
  if (cfg.contains("pairwise")) {
    const auto pw = sae::prior::load_pairwise_csv(cfg["pairwise"].get<std::string>());
    sae::require(pw.num_labels == atlas.num_labels, sae::ErrorCode::ConfigError,
                 "pairwise matrix label count does not match the atlas");
    pot = sae::prior::build_mrf_prior(atlas, pw.pot, pw.alpha);
  }
  sae::require(tc.prior != "mrf" || pot.has_value(), sae::ErrorCode::ConfigError,
               "prior 'mrf' requires a 'pairwise' CSV in the config");

  sae::model::DecoderConfig dec_cfg;
  if (cfg.contains("decoder")) {
    check_schema(cfg["decoder"],
                 {{"hidden_channels", FieldKind::Integer},
                  {"num_layers", FieldKind::Integer}},
                 "decoder config");
    dec_cfg = cfg["decoder"].get<sae::model::DecoderConfig>();
  }
  sae::model::GumbelConfig gum_cfg;
  if (cfg.contains("gumbel")) {
    check_schema(cfg["gumbel"],
                 {{"temperature", FieldKind::Number},
                  {"straight_through", FieldKind::Boolean},
                  {"rng_seed", FieldKind::Integer}},
                 "gumbel config");
    gum_cfg = cfg["gumbel"].get<sae::model::GumbelConfig>();
  }

  std::optional<sae::model::LoadedCheckpoint> resume;
  if (!resume_path.empty()) resume = sae::model::load_checkpoint(resume_path);

  std::vector<sae::train::Subject> subjects;
  for (const auto& s : data.subjects) subjects.push_back({s.id, s.image});
  auto res = sae::train::train_sae(subjects, atlas,
                                   pot.has_value() ? &*pot : nullptr, enc_cfg,
                                   dec_cfg, gum_cfg, tc, args.out_dir,
                                   std::move(resume));
  json manifest;
  manifest["kind"] = "checkpoint";
  manifest["mode"] = "sae";
  manifest["checkpoint"] = "model.ckpt";
  manifest["training_log"] = "training_log.csv";
  manifest["steps"] = res.steps;
  write_manifest(args.out_dir, manifest);
  std::cout << "trained " << res.steps << " steps; final loss "
            << res.log.back().loss.total << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// segment
// ---------------------------------------------------------------------------

int cmd_segment(const CommonArgs& args) {
  json cfg = load_config(args.config_path);
  apply_env_overrides(cfg);
  check_schema(cfg,
               {{"checkpoint", FieldKind::String},
                {"atlas_baseline", FieldKind::String},
                {"inputs", FieldKind::Array},
                {"dataset", FieldKind::String},
                {"dataset_part", FieldKind::String},
                {"format", FieldKind::String}},
               "segment config");
  const std::string ext = volume_ext(cfg.value("format", std::string("raw")));
  sae::require(cfg.contains("checkpoint") != cfg.contains("atlas_baseline"),
               sae::ErrorCode::ConfigError,
               "segment: give exactly one of 'checkpoint' or 'atlas_baseline'");
  write_run_info(args, "segment", cfg);

  std::vector<std::pair<std::string, sae::IntensityVolume>> inputs;
  if (cfg.contains("inputs")) {
    for (const auto& p : cfg["inputs"]) {
      const std::string path = p.get<std::string>();
      inputs.push_back({fs::path(path).stem().string(),
                        sae::io::load_intensity(path)});
    }
  } else if (cfg.contains("dataset")) {
    const auto part = cfg.value("dataset_part", std::string("test"));
    const auto data = load_dataset_part(cfg["dataset"].get<std::string>(), part,
                                        /*need_labels=*/false);
    for (const auto& s : data.subjects) inputs.push_back({s.id, s.image});
  }
  sae::require(!inputs.empty(), sae::ErrorCode::MissingInput,
               "segment: no inputs given");

  json manifest;
  manifest["kind"] = "segmentations";
  json list = json::array();

  if (cfg.contains("checkpoint")) {
    auto ckpt = sae::model::load_checkpoint(cfg["checkpoint"].get<std::string>());
    for (auto& [id, img] : inputs) {
      const auto seg = ckpt.model.segment(img);
      const std::string rel = "seg_" + id + ext;
      sae::io::save_volume(seg, args.out_dir + "/" + rel);
      list.push_back({{"id", id}, {"labels", rel}});
    }
    manifest["source"] = "checkpoint";
  } else {
    const auto atlas = sae::prior::load_atlas(cfg["atlas_baseline"].get<std::string>());
    const auto seg = sae::eval::naive_baseline(atlas);
    for (auto& [id, img] : inputs) {
      sae::require_same_grid(img.meta, atlas.meta, "segment baseline");
      const std::string rel = "seg_" + id + ext;
      sae::io::save_volume(seg, args.out_dir + "/" + rel);
      list.push_back({{"id", id}, {"labels", rel}});
    }
    manifest["source"] = "atlas_baseline";
  }
  manifest["segmentations"] = list;
  write_manifest(args.out_dir, manifest);
  std::cout << "segmented " << inputs.size() << " volumes into " << args.out_dir
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate / compare
// ---------------------------------------------------------------------------

sae::eval::LabeledSet load_segmentation_set(const std::string& manifest_path,
                                            const std::string& part) {
  std::ifstream in(manifest_path);
  sae::require(in.good(), sae::ErrorCode::MissingInput,
               "manifest not found: " + manifest_path);
  json m;
  in >> m;
  const fs::path base = fs::path(manifest_path).parent_path();
  sae::eval::LabeledSet out;
  if (m.contains("segmentations")) {
    for (const auto& e : m["segmentations"])
      out.push_back({e.at("id").get<std::string>(),
                     sae::io::load_labels((base / e.at("labels").get<std::string>()).string())});
  } else if (m.contains(part)) {
    for (const auto& e : m[part])
      out.push_back({e.at("id").get<std::string>(),
                     sae::io::load_labels((base / e.at("labels").get<std::string>()).string())});
  } else {
    sae::fail(sae::ErrorCode::ConfigError,
              "manifest has neither 'segmentations' nor '" + part + "': " +
                  manifest_path);
  }
  return out;
}

int cmd_evaluate(const CommonArgs& args) {
  json cfg = load_config(args.config_path);
  apply_env_overrides(cfg);
  check_schema(cfg,
               {{"predictions", FieldKind::String, true},
                {"truth", FieldKind::String, true},
                {"truth_part", FieldKind::String},
                {"method", FieldKind::String},
                {"labels", FieldKind::Array}},
               "evaluate config");
  write_run_info(args, "evaluate", cfg);
  const auto preds = load_segmentation_set(cfg["predictions"].get<std::string>(),
                                           "test");
  const auto truth = load_segmentation_set(cfg["truth"].get<std::string>(),
                                           cfg.value("truth_part", std::string("test")));
  std::vector<int> labels;
  if (cfg.contains("labels")) labels = cfg["labels"].get<std::vector<int>>();
  const auto rep = sae::eval::evaluate(preds, truth, labels,
                                       cfg.value("method", std::string("method")));
  sae::eval::write_subject_csv(rep, args.out_dir + "/per_subject.csv");
  sae::eval::write_summary_csv({rep}, args.out_dir + "/summary.csv");
  json manifest;
  manifest["kind"] = "evaluation";
  manifest["per_subject"] = "per_subject.csv";
  manifest["summary"] = "summary.csv";
  manifest["global_dice"] = rep.global_dice.mean;
  manifest["global_hd95"] = rep.global_hd.mean;
  write_manifest(args.out_dir, manifest);
  std::cout << "mean Dice " << rep.global_dice.mean << ", mean HD95 "
            << rep.global_hd.mean << " mm over " << rep.subjects.size()
            << " subjects\n";
  return 0;
}

sae::eval::RegionReport report_from_subject_csv(const std::string& path,
                                                const std::string& method) {
  const auto rows = sae::eval::read_subject_csv(path);
  sae::require(!rows.empty(), sae::ErrorCode::ConfigError, "empty report: " + path);
  sae::eval::RegionReport rep;
  rep.method = method;
  std::map<std::string, std::vector<double>> by_subject;
  for (const auto& r : rows) by_subject[r.subject].push_back(r.dice);
  for (const auto& [id, ds] : by_subject) {
    rep.subjects.push_back(id);
    double s = 0.0;
    for (double d : ds) s += d;
    rep.subject_global_dice.push_back(s / double(ds.size()));
  }
  return rep;
}

int cmd_compare(const CommonArgs& args) {
  json cfg = load_config(args.config_path);
  apply_env_overrides(cfg);
  check_schema(cfg,
               {{"a", FieldKind::String, true},
                {"b", FieldKind::String, true},
                {"method_a", FieldKind::String},
                {"method_b", FieldKind::String}},
               "compare config");
  write_run_info(args, "compare", cfg);
  const auto ra = report_from_subject_csv(cfg["a"].get<std::string>(),
                                          cfg.value("method_a", std::string("a")));
  const auto rb = report_from_subject_csv(cfg["b"].get<std::string>(),
                                          cfg.value("method_b", std::string("b")));
  const auto cmp = sae::eval::compare(ra, rb);
  const json out = sae::eval::compare_to_json(cmp);
  std::ofstream f(args.out_dir + "/compare.json", std::ios::trunc);
  f << out.dump(2) << "\n";
  std::cout << out.dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// repro: the full synthetic pipeline with pinned seeds
// ---------------------------------------------------------------------------

int run_sub(const std::string& argv0, const std::vector<std::string>& argv);

int cmd_repro(const CommonArgs& args, const std::string& argv0, int epochs,
              int subjects_train) {
  fs::create_directories(args.out_dir);
  const std::string d = args.out_dir;
  const auto wcfg = [&](const std::string& name, const json& j) {
    std::ofstream f(d + "/" + name, std::ios::trunc);
    f << j.dump(2) << "\n";
    return d + "/" + name;
  };

  // 1. phantoms (+ one extra train subject used as the unpaired prior source)
  const auto synth_cfg = wcfg("synth.json", {{"preset", "easy"},
                                             {"shape", {32, 32, 32}},
                                             {"num_labels", 4},
                                             {"jitter", 0.14},
                                             {"subjects_train", subjects_train + 1},
                                             {"subjects_test", 8},
                                             {"geometry_seed", 7}});
  int rc = run_sub(argv0, {"synth", "--config", synth_cfg, "--out", d + "/data",
                           "--seed", std::to_string(args.seed)});
  if (rc != 0) return rc;

  // Prior source: the extra subject's segmentation (unpaired; its image is
  // never used for training).
  json data_manifest;
  {
    std::ifstream f(d + "/data/manifest.json");
    f >> data_manifest;
  }
  const std::string prior_seg =
      d + "/data/" +
      data_manifest["train"].back().at("labels").get<std::string>();
  json trimmed = data_manifest;
  trimmed["train"].erase(trimmed["train"].size() - 1);
  {
    std::ofstream f(d + "/data/manifest.json", std::ios::trunc);
    f << trimmed.dump(2) << "\n";
  }

  const auto prior_cfg = wcfg("prior.json", {{"mode", "blur_single"},
                                             {"input", prior_seg},
                                             {"blur_sigma_mm", 1.5},
                                             {"floor", 1e-2},
                                             {"mrf", true}});
  rc = run_sub(argv0, {"build-prior", "--config", prior_cfg, "--out", d + "/prior"});
  if (rc != 0) return rc;

  // 2. SAE with spatial and MRF priors
  const json train_common = {{"dataset", d + "/data/manifest.json"},
                             {"atlas", d + "/prior/atlas.json"},
                             {"encoder", {{"num_labels", 4}, {"base_channels", 8}, {"depth", 2}}},
                             {"decoder", {{"hidden_channels", 8}, {"num_layers", 3}}},
                             {"train",
                              {{"learning_rate", 4e-4},
                               {"epochs", epochs},
                               {"warmup_subjects", 150},
                               {"seed", args.seed}}}};
  json t1 = train_common;
  rc = run_sub(argv0, {"train", "--config", wcfg("train_spatial.json", t1),
                       "--out", d + "/sae_spatial"});
  if (rc != 0) return rc;
  json t2 = train_common;
  t2["pairwise"] = d + "/prior/pairwise.csv";
  t2["train"]["prior"] = "mrf";
  rc = run_sub(argv0, {"train", "--config", wcfg("train_mrf.json", t2), "--out",
                       d + "/sae_mrf"});
  if (rc != 0) return rc;

  // 3. segment the test set with both models and the naive baseline
  for (const std::string v : {"sae_spatial", "sae_mrf"}) {
    rc = run_sub(argv0,
                 {"segment", "--config",
                  wcfg("segment_" + v + ".json",
                       {{"checkpoint", d + "/" + v + "/model.ckpt"},
                        {"dataset", d + "/data/manifest.json"}}),
                  "--out", d + "/pred_" + v});
    if (rc != 0) return rc;
  }
  rc = run_sub(argv0, {"segment", "--config",
                       wcfg("segment_baseline.json",
                            {{"atlas_baseline", d + "/prior/atlas.json"},
                             {"dataset", d + "/data/manifest.json"}}),
                       "--out", d + "/pred_baseline"});
  if (rc != 0) return rc;

  // 4. evaluate all three + paired comparison
  for (const std::string v : {"sae_spatial", "sae_mrf", "baseline"}) {
    rc = run_sub(argv0, {"evaluate", "--config",
                         wcfg("eval_" + v + ".json",
                              {{"predictions", d + "/pred_" + v + "/manifest.json"},
                               {"truth", d + "/data/manifest.json"},
                               {"method", v}}),
                         "--out", d + "/eval_" + v});
    if (rc != 0) return rc;
  }
  rc = run_sub(argv0, {"compare", "--config",
                       wcfg("compare.json",
                            {{"a", d + "/eval_sae_mrf/per_subject.csv"},
                             {"b", d + "/eval_sae_spatial/per_subject.csv"},
                             {"method_a", "sae_mrf"},
                             {"method_b", "sae_spatial"}}),
                       "--out", d + "/compare"});
  if (rc != 0) return rc;

  json summary;
  for (const std::string v : {"sae_spatial", "sae_mrf", "baseline"}) {
    std::ifstream f(d + "/eval_" + v + "/manifest.json");
    json m;
    f >> m;
    summary[v] = {{"global_dice", m["global_dice"]},
                  {"global_hd95", m["global_hd95"]}};
  }
  {
    std::ifstream f(d + "/compare/compare.json");
    json c;
    f >> c;
    summary["mrf_vs_spatial"] = c;
  }
  std::ofstream f(d + "/summary.json", std::ios::trunc);
  f << summary.dump(2) << "\n";
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct SubcommandArgs {
  CommonArgs common;
  std::string resume;
  int repro_epochs = 20;
  int repro_subjects = 30;
};

int dispatch(const std::string& name, const SubcommandArgs& a,
             const std::string& argv0) {
  check_device(a.common.device);
  if (name == "synth") return cmd_synth(a.common);
  if (name == "build-prior") return cmd_build_prior(a.common);
  if (name == "train") return cmd_train(a.common, a.resume);
  if (name == "segment") return cmd_segment(a.common);
  if (name == "evaluate") return cmd_evaluate(a.common);
  if (name == "compare") return cmd_compare(a.common);
  if (name == "repro")
    return cmd_repro(a.common, argv0, a.repro_epochs, a.repro_subjects);
  return 1;
}

std::string g_argv0;

int run_sub(const std::string& argv0, const std::vector<std::string>& argv) {
  std::string cmd = "'" + argv0 + "'";
  for (const auto& a : argv) cmd += " '" + a + "'";
  std::cout << "+ " << cmd << "\n";
  const int rc = std::system(cmd.c_str());
  return rc == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  g_argv0 = argv[0];
  CLI::App app{"Segmentation auto-encoder toolkit"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  std::map<std::string, SubcommandArgs> args;
  const std::vector<std::string> names = {"synth",    "build-prior", "train",
                                          "segment",  "evaluate",    "compare",
                                          "repro"};
  const std::map<std::string, std::string> desc = {
      {"synth", "generate a synthetic phantom dataset"},
      {"build-prior", "build a spatial or MRF prior from segmentations"},
      {"train", "train an SAE or supervised segmentation model"},
      {"segment", "segment volumes with a trained checkpoint"},
      {"evaluate", "compute Dice/HD95 reports"},
      {"compare", "paired t-test between two methods"},
      {"repro", "run the full synthetic pipeline with pinned seeds"}};

  for (const auto& name : names) {
    auto* sub = app.add_subcommand(name, desc.at(name));
    auto& a = args[name];
    if (name != "repro")
      sub->add_option("--config", a.common.config_path, "JSON config file")
          ->required(name != "repro");
    sub->add_option("--out", a.common.out_dir, "output directory")->required();
    sub->add_option_function<std::uint64_t>(
        "--seed",
        [&a](const std::uint64_t& s) {
          a.common.seed = s;
          a.common.seed_set = true;
        },
        "base RNG seed");
    sub->add_option("--device", a.common.device, "auto|cpu|accelerator");
    if (name == "train") {
      sub->add_option("--resume", a.resume, "checkpoint to resume from");
      sub->add_option("--prior", a.common.prior_flag,
                      "prior selection override (spatial|mrf)");
    }
    if (name == "repro") {
      sub->add_option("--epochs", a.repro_epochs, "training epochs");
      sub->add_option("--subjects", a.repro_subjects, "training subjects");
    }
  }

  CLI11_PARSE(app, argc, argv);

  for (const auto& name : names) {
    if (!app.get_subcommand(name)->parsed()) continue;
    try {
      return dispatch(name, args[name], g_argv0);
    } catch (const sae::SaeError& e) {
      nlohmann::json err = {{"error",
                             {{"kind", sae::error_kind(e.code())},
                              {"code", exit_code_for(e.code())},
                              {"message", e.what()}}}};
      std::cerr << err.dump() << "\n";
      return exit_code_for(e.code());
    } catch (const std::exception& e) {
      nlohmann::json err = {{"error", {{"kind", "error"}, {"code", 1}, {"message", e.what()}}}};
      std::cerr << err.dump() << "\n";
      return 1;
    }
  }
  return 1;
}
