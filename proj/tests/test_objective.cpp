#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "sae/model.hpp"
#include "sae/objective.hpp"
#include "sae/synth.hpp"
#include "test_helpers.hpp"

using namespace sae;

namespace {

prior::ProbabilisticAtlas atlas_from_field(const OneHotField& f) {
  prior::ProbabilisticAtlas a;
  a.meta = f.meta;
  a.num_labels = f.num_labels;
  a.probs = f.probs;
  return a;
}

// Independent per-voxel KL summation, written against the categorical KL
// definition rather than the cross-entropy/entropy split.
double kl_oracle(const OneHotField& q, const prior::ProbabilisticAtlas& p) {
  double total = 0.0;
  const std::int64_t v = q.meta.voxels();
  for (std::int64_t j = 0; j < v; ++j)
    for (int l = 0; l < q.num_labels; ++l) {
      const double qv = q.probs[std::size_t(l) * v + j];
      const double pv = p.probs[std::size_t(l) * v + j];
      if (qv > 0.0) total += qv * std::log(qv / pv);
    }
  return total;
}

}  // namespace

TEST_CASE("kl_spatial is zero when the posterior equals the prior") {
  Rng rng(1);
  const auto f = test::random_categorical_field(make_grid(3, 3, 3), 4, rng);
  const auto atlas = atlas_from_field(f);
  CHECK(objective::kl_spatial(f, atlas) == 0.0);
}

TEST_CASE("kl_spatial hand case: deterministic posterior vs uniform prior") {
  OneHotField q;
  q.meta = make_grid(1, 1, 1);
  q.num_labels = 2;
  q.probs = {1.0f, 0.0f};  // exercises the 0*log(0) = 0 convention
  prior::ProbabilisticAtlas p;
  p.meta = q.meta;
  p.num_labels = 2;
  p.probs = {0.5f, 0.5f};
  CHECK(objective::kl_spatial(q, p) == Catch::Approx(std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("kl_spatial matches the per-voxel oracle on random instances") {
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const int side = 2 + rng.uniform_int(7);  // up to 8
    const int L = 2 + rng.uniform_int(4);     // up to 5
    const auto g = make_grid(side, side, side);
    const auto q = test::random_categorical_field(g, L, rng);
    const auto atlas = test::random_atlas(g, L, rng);
    const double prod = objective::kl_spatial(q, atlas);
    const double orac = kl_oracle(q, atlas);
    REQUIRE(prod == Catch::Approx(orac).epsilon(1e-6));
    REQUIRE(prod >= -1e-9);
  }
}

TEST_CASE("mrf_loss with zero pairwise potentials is exactly zero") {
  Rng rng(3);
  const auto g = make_grid(3, 3, 3);
  const auto q = test::random_categorical_field(g, 3, rng);
  const auto atlas = test::random_atlas(g, 3, rng);
  const auto pot = prior::build_mrf_prior(atlas, std::vector<double>(9, 0.0));
  CHECK(objective::mrf_loss(q, pot) == 0.0);
}

TEST_CASE("mrf_loss hand case on a 2-voxel chain") {
  // q1 = (1,0), q2 = (0,1), V = [[0, a], [b, 0]] -> loss = -(a + b).
  const auto g = make_grid(1, 1, 2);
  OneHotField q;
  q.meta = g;
  q.num_labels = 2;
  q.probs = {1.0f, 0.0f, 0.0f, 1.0f};  // channel-major: q(0)=(1,0), q(1)=(0,1)
  prior::ProbabilisticAtlas atlas;
  atlas.meta = g;
  atlas.num_labels = 2;
  atlas.probs = {0.5f, 0.5f, 0.5f, 0.5f};
  const double a = 0.7, b = -0.4;
  const auto pot = prior::build_mrf_prior(atlas, {0.0, a, b, 0.0});
  CHECK(objective::mrf_loss(q, pot) == Catch::Approx(-(a + b)).epsilon(1e-12));
}

TEST_CASE("mrf_loss matches the quadruple-loop oracle on random instances") {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const int side = 2 + rng.uniform_int(3);  // up to 4
    const int L = 2 + rng.uniform_int(3);     // up to 4
    const auto g = make_grid(side, side, side);
    const auto q = test::random_categorical_field(g, L, rng);
    const auto atlas = test::random_atlas(g, L, rng);
    std::vector<double> pw(std::size_t(L) * L);
    for (auto& v : pw) v = rng.uniform(-2, 2);
    const auto pot = prior::build_mrf_prior(atlas, pw);
    const double prod = objective::mrf_loss(q, pot);
    const double orac = synth::oracle_mrf_loss(q, pot);
    REQUIRE(prod == Catch::Approx(orac).epsilon(1e-6).margin(1e-9));
  }
}

TEST_CASE("kl_mrf composes the two terms and drops only a constant") {
  Rng rng(5);
  const auto g = make_grid(3, 3, 3);
  const int L = 3;
  const auto q = test::random_categorical_field(g, L, rng);
  const auto atlas = test::random_atlas(g, L, rng);
  std::vector<double> pw(std::size_t(L) * L);
  for (auto& v : pw) v = rng.uniform(-1, 1);

  const auto zero_pot = prior::build_mrf_prior(atlas, std::vector<double>(9, 0.0));
  CHECK(objective::kl_mrf(q, atlas, zero_pot) == objective::kl_spatial(q, atlas));

  const auto pot1 = prior::build_mrf_prior(atlas, pw);
  std::vector<double> pw2 = pw;
  for (auto& v : pw2) v *= 2.0;
  const auto pot2 = prior::build_mrf_prior(atlas, pw2);
  const double kl = objective::kl_spatial(q, atlas);
  const double d1 = objective::kl_mrf(q, atlas, pot1) - kl;
  const double d2 = objective::kl_mrf(q, atlas, pot2) - kl;
  CHECK(d2 == Catch::Approx(2.0 * d1).epsilon(1e-9));  // linear in V

  const double orac =
      synth::oracle_kl_spatial(q, atlas) + synth::oracle_mrf_loss(q, pot1);
  CHECK(objective::kl_mrf(q, atlas, pot1) == Catch::Approx(orac).epsilon(1e-6));
}

TEST_CASE("reconstruction terms: hand-evaluated cases") {
  IntensityVolume x, xh;
  x.meta = xh.meta = make_grid(1, 1, 2);

  x.values = {1.0f, 0.0f};
  xh.values = {1.0f, 0.0f};
  auto rt = objective::reconstruction_terms(x, xh, 1.0);
  CHECK(rt.log_sigma_term == 0.0);
  CHECK(rt.recon_quadratic == 0.0);

  xh.values = {0.0f, 0.0f};
  rt = objective::reconstruction_terms(x, xh, 1.0);
  CHECK(rt.log_sigma_term == 0.0);
  CHECK(rt.recon_quadratic == Catch::Approx(0.5).epsilon(1e-12));

  rt = objective::reconstruction_terms(x, xh, 100.0);
  CHECK(rt.log_sigma_term == Catch::Approx(2.0 * std::log(10.0)).epsilon(1e-12));
  CHECK(rt.recon_quadratic == Catch::Approx(0.005).epsilon(1e-12));

  CHECK_THROWS_AS(objective::reconstruction_terms(x, xh, 0.0), SaeError);
}

TEST_CASE("sigma schedule: warmup, rounding and tie-breaking") {
  objective::SigmaState s;

  // Reconstruction weight is zero for the first 16 subjects.
  for (int i = 0; i < 10; ++i) s = objective::update_sigma(s, 0.5);
  CHECK(s.in_warmup());
  CHECK(std::isinf(s.sigma2()));

  // 16 subjects at MSE 0.004 -> sigma^2 = 10^-2.
  objective::SigmaState t;
  for (int i = 0; i < 16; ++i) t = objective::update_sigma(t, 0.004);
  CHECK_FALSE(t.in_warmup());
  CHECK(t.sigma2() == Catch::Approx(1e-2).epsilon(1e-12));

  // Mean exactly 10^-2.5 rounds to the larger variance, 10^-2.
  objective::SigmaState u;
  const double tie = std::pow(10.0, -2.5);
  for (int i = 0; i < 16; ++i) u = objective::update_sigma(u, tie);
  CHECK(u.sigma2() == Catch::Approx(1e-2).epsilon(1e-12));

  // All-zero window clamps to 10^-12.
  objective::SigmaState z;
  for (int i = 0; i < 16; ++i) z = objective::update_sigma(z, 0.0);
  CHECK(z.sigma2() == Catch::Approx(1e-12).epsilon(1e-12));

  CHECK_THROWS_AS(objective::update_sigma(z, -1.0), SaeError);
}

TEST_CASE("sigma schedule is stable under a constant MSE") {
  objective::SigmaState s;
  for (int i = 0; i < 16; ++i) s = objective::update_sigma(s, 0.03);
  const double first = s.sigma2();
  CHECK(first == Catch::Approx(std::pow(10.0, std::round(std::log10(0.03)))));
  for (int i = 0; i < 50; ++i) {
    s = objective::update_sigma(s, 0.03);
    REQUIRE(s.sigma2() == first);
  }
  REQUIRE(s.mse_window.size() == 16);  // ring buffer keeps the last 16
}

TEST_CASE("total_loss assembles its components") {
  Rng rng(6);
  const auto g = make_grid(2, 2, 2);
  const int L = 3;
  const auto q = test::random_categorical_field(g, L, rng);
  const auto atlas = test::random_atlas(g, L, rng);
  std::vector<double> pw(std::size_t(L) * L);
  for (auto& v : pw) v = rng.uniform(-1, 1);
  const auto pot = prior::build_mrf_prior(atlas, pw);
  const auto x = test::random_intensity(g, rng);
  const auto xh = test::random_intensity(g, rng);

  // Warmup: only the prior terms contribute.
  objective::SigmaState warm;
  const auto b1 = objective::total_loss(x, q, xh, atlas, nullptr, warm);
  CHECK(b1.total == b1.kl_spatial);
  CHECK(b1.log_sigma_term == 0.0);
  CHECK(b1.recon_quadratic == 0.0);

  // Post-warmup with x == x_hat: total = kl (+ mrf) + (V/2) log sigma^2.
  objective::SigmaState post;
  for (int i = 0; i < 16; ++i) post = objective::update_sigma(post, 0.004);
  const auto b2 = objective::total_loss(x, q, x, atlas, &pot, post);
  CHECK(b2.recon_quadratic == 0.0);
  CHECK(b2.total == Catch::Approx(objective::kl_spatial(q, atlas) +
                                  objective::mrf_loss(q, pot) +
                                  0.5 * 8.0 * std::log(1e-2))
                        .epsilon(1e-12));

  // Random instance: total equals the independently computed components.
  const auto b3 = objective::total_loss(x, q, xh, atlas, &pot, post);
  const auto rt = objective::reconstruction_terms(x, xh, post.sigma2());
  CHECK(b3.total == Catch::Approx(synth::oracle_kl_spatial(q, atlas) +
                                  synth::oracle_mrf_loss(q, pot) +
                                  rt.log_sigma_term + rt.recon_quadratic)
                        .epsilon(1e-6));
}

TEST_CASE("total_loss gradients match central finite differences") {
  // Differentiable configuration: fixed Gumbel noise, decoder consuming the
  // soft sample. The straight-through estimator computes exactly this
  // gradient (see the model test for the ST identity).
  Rng rng(7);
  const auto g = make_grid(4, 4, 4);
  const int L = 3;
  const std::int64_t v = g.voxels();

  const auto atlas = test::random_atlas(g, L, rng);
  std::vector<double> pw(std::size_t(L) * L);
  for (auto& w : pw) w = rng.uniform(-0.5, 0.5);
  const auto pot = prior::build_mrf_prior(atlas, pw);

  nn::Tensor<double> x(1, 4, 4, 4);
  for (auto& t : x.v) t = rng.uniform();
  nn::Tensor<double> logits(L, 4, 4, 4);
  for (auto& t : logits.v) t = rng.uniform(-1, 1);
  nn::Tensor<double> gnoise(L, 4, 4, 4);
  for (auto& t : gnoise.v) t = rng.gumbel();

  nn::DecoderCNN<double> dec(L, 4, 2, rng);
  const double sigma2 = 0.01;
  objective::SigmaState state;
  for (int i = 0; i < 16; ++i) state = objective::update_sigma(state, 0.01);
  REQUIRE(state.sigma2() == sigma2);
  const model::GumbelConfig gc;

  const auto loss_of = [&](const nn::Tensor<double>& z) {
    const auto q = nn::softmax_channels(z);
    nn::Tensor<double> pert = z;
    for (std::size_t i = 0; i < pert.v.size(); ++i)
      pert.v[i] = (pert.v[i] + gnoise.v[i]) / gc.temperature;
    const auto soft = nn::softmax_channels(pert);
    const auto xh = dec.forward(soft);
    return objective::total_loss(x, q, xh, atlas, &pot, state).total;
  };

  // Analytic gradient w.r.t. the logits.
  const auto q = nn::softmax_channels(logits);
  nn::Tensor<double> pert = logits;
  for (std::size_t i = 0; i < pert.v.size(); ++i)
    pert.v[i] = (pert.v[i] + gnoise.v[i]) / gc.temperature;
  const auto soft = nn::softmax_channels(pert);
  const auto xh = dec.forward(soft);

  nn::Tensor<double> dq(L, 4, 4, 4);
  objective::prior_terms_grad(q, atlas, &pot, dq);
  auto dz = nn::softmax_backward_channels(q, dq);
  nn::Tensor<double> dxh(1, 4, 4, 4);
  for (std::size_t i = 0; i < dxh.v.size(); ++i)
    dxh.v[i] = (xh.v[i] - x.v[i]) / sigma2;
  dec.zero_grad();
  const auto dsoft = dec.backward(dxh);
  auto dz_recon = nn::softmax_backward_channels(soft, dsoft);
  for (std::size_t i = 0; i < dz.v.size(); ++i)
    dz.v[i] += dz_recon.v[i] / gc.temperature;

  const double h = 1e-3;
  Rng pick(8);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t i = std::size_t(pick.uniform_int(int(logits.v.size())));
    auto zp = logits;
    zp.v[i] += h;
    auto zm = logits;
    zm.v[i] -= h;
    const double fd = (loss_of(zp) - loss_of(zm)) / (2.0 * h);
    REQUIRE(dz.v[i] == Catch::Approx(fd).epsilon(1e-3).margin(1e-6));
  }

  // Decoder parameter gradients: dec.backward above accumulated them against
  // the same quadratic term.
  auto params = dec.params();
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t pi = std::size_t(pick.uniform_int(int(params.size())));
    if (params[pi].w->empty()) continue;
    const std::size_t i = std::size_t(pick.uniform_int(int(params[pi].w->size())));
    const double orig = (*params[pi].w)[i];
    (*params[pi].w)[i] = orig + h;
    const double lp = loss_of(logits);
    (*params[pi].w)[i] = orig - h;
    const double lm = loss_of(logits);
    (*params[pi].w)[i] = orig;
    const double fd = (lp - lm) / (2.0 * h);
    REQUIRE((*params[pi].g)[i] == Catch::Approx(fd).epsilon(1e-3).margin(1e-6));
  }

  // Sanity: what the gradient was taken of is the logged total.
  REQUIRE(std::isfinite(loss_of(logits)));
  (void)v;
}
