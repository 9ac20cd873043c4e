#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "sae/synth.hpp"
#include "sae/train.hpp"
#include "test_helpers.hpp"

using namespace sae;

namespace {

// Small 8^3 setup that exercises the full loop quickly.
struct TinyProblem {
  prior::ProbabilisticAtlas atlas;
  prior::MRFPotentials pot;
  std::vector<train::Subject> subjects;
  std::vector<train::LabeledSubject> labeled;
  model::EncoderConfig enc{3, 2, 1};
  model::DecoderConfig dec{4, 2};
  model::GumbelConfig gum;

  explicit TinyProblem(int n_subjects = 20, std::uint64_t seed = 5) {
    auto spec = synth::easy_preset(3, {8, 8, 8});
    spec.jitter = 0.1;
    const auto pop = synth::generate_population(spec, n_subjects, seed);
    const auto prior_pop = synth::generate_population(spec, 1, seed + 1);
    atlas = prior::build_spatial_prior_from_single(prior_pop[0].labels, 1.0);
    pot = prior::build_mrf_prior(
        atlas, prior::estimate_pairwise_potentials(prior_pop[0].labels, 1.0));
    for (const auto& p : pop) {
      subjects.push_back({p.id, p.image});
      labeled.push_back({p.id, p.image, p.labels});
    }
  }
};

}  // namespace

TEST_CASE("reconstruction terms are exactly zero for the first 16 subjects") {
  TinyProblem prob(20);
  train::TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.epochs = 1;
  cfg.seed = 3;
  const auto res = train::train_sae(prob.subjects, prob.atlas, nullptr, prob.enc,
                                    prob.dec, prob.gum, cfg);
  REQUIRE(res.log.size() == 20);
  for (int i = 0; i < 16; ++i) {
    REQUIRE(res.log[std::size_t(i)].loss.recon_quadratic == 0.0);
    REQUIRE(res.log[std::size_t(i)].loss.log_sigma_term == 0.0);
    REQUIRE(std::isinf(res.log[std::size_t(i)].loss.sigma2));
  }
  // The transition happens exactly at subject 17.
  REQUIRE(std::isfinite(res.log[16].loss.sigma2));
  REQUIRE(res.log[16].loss.recon_quadratic > 0.0);
}

TEST_CASE("training is reproducible for identical seeds") {
  TinyProblem prob(12);
  train::TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.epochs = 1;
  cfg.seed = 17;
  const auto r1 = train::train_sae(prob.subjects, prob.atlas, nullptr, prob.enc,
                                   prob.dec, prob.gum, cfg);
  const auto r2 = train::train_sae(prob.subjects, prob.atlas, nullptr, prob.enc,
                                   prob.dec, prob.gum, cfg);
  REQUIRE(r1.log.size() >= 10);
  for (std::size_t i = 0; i < 10; ++i) {
    REQUIRE(r1.log[i].subject == r2.log[i].subject);
    REQUIRE(r1.log[i].loss.total == r2.log[i].loss.total);
    REQUIRE(r1.log[i].loss.kl_spatial == r2.log[i].loss.kl_spatial);
  }

  train::TrainConfig other = cfg;
  other.seed = 18;
  const auto r3 = train::train_sae(prob.subjects, prob.atlas, nullptr, prob.enc,
                                   prob.dec, prob.gum, other);
  bool any_diff = false;
  for (std::size_t i = 0; i < 10; ++i)
    any_diff = any_diff || r3.log[i].loss.total != r1.log[i].loss.total;
  CHECK(any_diff);
}

TEST_CASE("logged losses are finite at every step of a reference run") {
  TinyProblem prob(20);
  train::TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.epochs = 3;
  cfg.seed = 29;
  cfg.prior = "mrf";
  const auto res = train::train_sae(prob.subjects, prob.atlas, &prob.pot,
                                    prob.enc, prob.dec, prob.gum, cfg);
  for (const auto& row : res.log) REQUIRE(row.loss.finite());
}

TEST_CASE("grid mismatches between subjects and atlas are rejected") {
  TinyProblem prob(4);
  auto bad = prob.subjects;
  Rng rng(1);
  bad[2].image = test::random_intensity(make_grid(16, 16, 16), rng);
  train::TrainConfig cfg;
  try {
    train::train_sae(bad, prob.atlas, nullptr, prob.enc, prob.dec, prob.gum, cfg);
    FAIL("expected grid mismatch");
  } catch (const SaeError& e) {
    CHECK(e.code() == ErrorCode::GridMismatch);
  }
}

TEST_CASE("mrf prior selection requires potentials") {
  TinyProblem prob(4);
  train::TrainConfig cfg;
  cfg.prior = "mrf";
  CHECK_THROWS_AS(train::train_sae(prob.subjects, prob.atlas, nullptr, prob.enc,
                                   prob.dec, prob.gum, cfg),
                  SaeError);
}

TEST_CASE("training log CSV has the documented schema") {
  namespace fs = std::filesystem;
  TinyProblem prob(6);
  train::TrainConfig cfg;
  cfg.epochs = 1;
  cfg.seed = 31;
  const auto dir = (fs::temp_directory_path() / "sae_train_log_test").string();
  fs::remove_all(dir);
  train::train_sae(prob.subjects, prob.atlas, nullptr, prob.enc, prob.dec,
                   prob.gum, cfg, dir);
  std::ifstream in(dir + "/training_log.csv");
  REQUIRE(in.good());
  std::string header;
  std::getline(in, header);
  CHECK(header ==
        "step,subject_id,kl_spatial,mrf_term,log_sigma_term,recon_quadratic,"
        "total,sigma2");
  int rows = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 6);
  REQUIRE(fs::exists(dir + "/model.ckpt"));
  REQUIRE(fs::exists(dir + "/model.ckpt.json"));
  fs::remove_all(dir);
}

TEST_CASE("soft dice loss: perfect prediction scores -1") {
  Rng rng(2);
  const auto seg = test::random_labels(make_grid(3, 3, 3), 3, rng);
  const auto q = one_hot(seg);
  CHECK(train::soft_dice_loss(q, seg) == Catch::Approx(-1.0).epsilon(1e-9));
}

TEST_CASE("soft dice loss: uniform posterior on a balanced 2-voxel volume") {
  LabelVolume seg;
  seg.meta = make_grid(1, 1, 2);
  seg.num_labels = 2;
  seg.labels = {0, 1};
  OneHotField q;
  q.meta = seg.meta;
  q.num_labels = 2;
  q.probs = {0.5f, 0.5f, 0.5f, 0.5f};
  // per label: w = 1, intersection 0.5, sums q 1 + t 1 -> -2*(1)/(4) = -0.5
  CHECK(train::soft_dice_loss(q, seg) == Catch::Approx(-0.5).epsilon(1e-9));
}

TEST_CASE("soft dice loss stays finite with empty labels") {
  LabelVolume seg;
  seg.meta = make_grid(1, 1, 2);
  seg.num_labels = 3;  // label 2 never appears
  seg.labels = {0, 1};
  OneHotField q;
  q.meta = seg.meta;
  q.num_labels = 3;
  q.probs = {0.4f, 0.2f, 0.3f, 0.3f, 0.3f, 0.5f};
  const double loss = train::soft_dice_loss(q, seg);
  CHECK(std::isfinite(loss));
}

TEST_CASE("soft dice gradient matches finite differences") {
  Rng rng(3);
  const auto g = make_grid(2, 2, 2);
  const auto seg = test::random_labels(g, 3, rng);
  nn::Tensor<double> q(3, 2, 2, 2);
  for (auto& v : q.v) v = rng.uniform(0.05, 1.0);
  nn::Tensor<double> dq(3, 2, 2, 2);
  train::soft_dice_loss(q, seg, &dq);
  const double h = 1e-6;
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t i = std::size_t(rng.uniform_int(int(q.v.size())));
    auto qp = q;
    qp.v[i] += h;
    auto qm = q;
    qm.v[i] -= h;
    const double fd =
        (train::soft_dice_loss(qp, seg) - train::soft_dice_loss(qm, seg)) /
        (2.0 * h);
    REQUIRE(dq.v[i] == Catch::Approx(fd).epsilon(1e-4).margin(1e-10));
  }
}

TEST_CASE("supervised training reduces the loss on the easy preset") {
  TinyProblem prob(12, 77);
  train::SupervisedConfig cfg;
  cfg.learning_rate = 3e-3;
  cfg.max_epochs = 20;
  cfg.patience = 20;
  cfg.seed = 7;
  const auto res = train::train_supervised(prob.labeled, prob.enc, cfg);
  REQUIRE(res.steps <= 200);
  REQUIRE(res.train_losses.size() >= 20);
  const double first = res.train_losses[0];
  double best = first;
  for (double l : res.train_losses) best = std::min(best, l);
  CHECK(best < first - 0.05);
}

TEST_CASE("early stopping triggers on a loss plateau") {
  TinyProblem prob(8);
  train::SupervisedConfig cfg;
  cfg.learning_rate = 1e-30;  // constructed plateau: updates are negligible
  cfg.patience = 3;
  cfg.max_epochs = 50;
  cfg.seed = 9;
  const auto res = train::train_supervised(prob.labeled, prob.enc, cfg);
  // First eval sets the best; the next `patience` evals are flat.
  CHECK(res.stopped_epoch == 1 + cfg.patience);
}

TEST_CASE("validation split size is enforced") {
  TinyProblem prob(2);
  train::SupervisedConfig cfg;
  cfg.validation_fraction = 0.9;
  CHECK_THROWS_AS(train::train_supervised(prob.labeled, prob.enc, cfg), SaeError);
}

TEST_CASE("non-finite loss aborts with a diagnostic breakdown") {
  objective::LossBreakdown bad;
  bad.kl_spatial = std::numeric_limits<double>::quiet_NaN();
  bad.total = std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(bad.finite());
  // The trainer's guard path produces a NumericError carrying the dump.
  try {
    fail(ErrorCode::NumericError,
         "NaN/Inf loss at step 1; breakdown: " +
             train::detail::breakdown_dump(bad));
  } catch (const SaeError& e) {
    CHECK(e.code() == ErrorCode::NumericError);
    CHECK(std::string(e.what()).find("kl_spatial") != std::string::npos);
  }
}

TEST_CASE("checkpoint resume continues from the stored step counter") {
  namespace fs = std::filesystem;
  TinyProblem prob(6);
  train::TrainConfig cfg;
  cfg.epochs = 1;
  cfg.seed = 41;
  const auto dir = (fs::temp_directory_path() / "sae_resume_test").string();
  fs::remove_all(dir);
  const auto r1 = train::train_sae(prob.subjects, prob.atlas, nullptr, prob.enc,
                                   prob.dec, prob.gum, cfg, dir);
  REQUIRE(r1.steps == 6);
  auto ckpt = model::load_checkpoint(dir + "/model.ckpt");
  REQUIRE(ckpt.info.step == 6);
  const auto r2 = train::train_sae(prob.subjects, prob.atlas, nullptr, prob.enc,
                                   prob.dec, prob.gum, cfg, "", std::move(ckpt));
  CHECK(r2.steps == 12);
  CHECK(r2.log.front().step == 7);
  fs::remove_all(dir);
}
