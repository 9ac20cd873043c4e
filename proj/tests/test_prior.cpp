#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "sae/prior.hpp"
#include "test_helpers.hpp"

using namespace sae;

namespace {

void check_voxel_sums(const prior::ProbabilisticAtlas& a) {
  const std::int64_t v = a.meta.voxels();
  for (std::int64_t j = 0; j < v; ++j) {
    double s = 0.0;
    for (int l = 0; l < a.num_labels; ++l) s += a.probs[std::size_t(l) * v + j];
    REQUIRE(std::fabs(s - 1.0) <= 1e-6);
    for (int l = 0; l < a.num_labels; ++l)
      REQUIRE(a.probs[std::size_t(l) * v + j] >= float(a.floor_eps));
  }
}

// Direct-summation Gaussian convolution with zero padding: the independent
// oracle for the separable production path.
std::vector<double> blur_oracle(const std::vector<double>& chan, const GridMeta& g,
                                double sigma_vox) {
  const int radius = int(std::ceil(3.0 * sigma_vox));
  std::vector<double> k1(std::size_t(2 * radius + 1));
  double s = 0.0;
  for (int t = -radius; t <= radius; ++t) {
    k1[std::size_t(t + radius)] = std::exp(-0.5 * t * t / (sigma_vox * sigma_vox));
    s += k1[std::size_t(t + radius)];
  }
  for (auto& x : k1) x /= s;
  const int D = g.shape[0], H = g.shape[1], W = g.shape[2];
  std::vector<double> out(chan.size(), 0.0);
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int dz = -radius; dz <= radius; ++dz)
          for (int dy = -radius; dy <= radius; ++dy)
            for (int dx = -radius; dx <= radius; ++dx) {
              const int zz = z + dz, yy = y + dy, xx = x + dx;
              if (zz < 0 || zz >= D || yy < 0 || yy >= H || xx < 0 || xx >= W)
                continue;
              acc += k1[std::size_t(dz + radius)] * k1[std::size_t(dy + radius)] *
                     k1[std::size_t(dx + radius)] *
                     chan[std::size_t(voxel_index(g, zz, yy, xx))];
            }
        out[std::size_t(voxel_index(g, z, y, x))] = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("paper default blur is 3 mm isotropic") {
  CHECK(prior::kDefaultBlurSigmaMm == 3.0);
}

TEST_CASE("zero blur yields the floored one-hot") {
  Rng rng(1);
  const auto seg = test::random_labels(make_grid(4, 4, 4), 3, rng);
  const auto atlas = prior::build_spatial_prior_from_single(seg, 0.0);
  check_voxel_sums(atlas);
  const std::int64_t v = atlas.meta.voxels();
  for (std::int64_t j = 0; j < v; ++j)
    for (int l = 0; l < 3; ++l) {
      const float p = atlas.probs[std::size_t(l) * v + j];
      if (seg.labels[std::size_t(j)] == l)
        REQUIRE(p == Catch::Approx(1.0).margin(3e-7));
      else
        REQUIRE(p <= 2e-7f);
    }
}

TEST_CASE("blurred prior matches the direct-summation oracle") {
  LabelVolume seg;
  seg.meta = make_grid(1, 1, 5);
  seg.num_labels = 2;
  seg.labels = {0, 0, 1, 1, 1};
  const double sigma = 1.0;  // voxels (1 mm spacing)
  const auto atlas = prior::build_spatial_prior_from_single(seg, sigma, 1e-12);

  // Oracle: blur each one-hot channel by direct summation, renormalize.
  const auto f = one_hot(seg);
  std::vector<std::vector<double>> chans;
  for (int l = 0; l < 2; ++l) {
    std::vector<double> c(5);
    for (int j = 0; j < 5; ++j) c[std::size_t(j)] = f.probs[std::size_t(l) * 5 + j];
    chans.push_back(blur_oracle(c, seg.meta, sigma));
  }
  for (int j = 0; j < 5; ++j) {
    const double s = chans[0][std::size_t(j)] + chans[1][std::size_t(j)];
    for (int l = 0; l < 2; ++l)
      REQUIRE(double(atlas.probs[std::size_t(l) * 5 + j]) ==
              Catch::Approx(chans[std::size_t(l)][std::size_t(j)] / s).epsilon(1e-6));
  }
}

TEST_CASE("blur converts sigma from mm to voxels through the spacing") {
  LabelVolume seg;
  seg.meta = make_grid(1, 1, 9, 1.0, 1.0, 2.0);  // 2 mm along W
  seg.num_labels = 2;
  seg.labels = {0, 0, 0, 0, 1, 0, 0, 0, 0};
  const auto atlas = prior::build_spatial_prior_from_single(seg, 2.0, 1e-12);
  // sigma along W is 1 voxel; compare against the 1-voxel oracle.
  const auto f = one_hot(seg);
  std::vector<double> c(9);
  for (int j = 0; j < 9; ++j) c[std::size_t(j)] = f.probs[std::size_t(9 + j)];
  const auto blurred = blur_oracle(c, make_grid(1, 1, 9), 1.0);
  // Channel ratio removes the per-voxel renormalization.
  const std::int64_t v = 9;
  const double prod = atlas.probs[std::size_t(v) + 4] / atlas.probs[std::size_t(v) + 3];
  const double orac = blurred[4] / blurred[3];
  CHECK(prod == Catch::Approx(orac).epsilon(1e-5));
}

TEST_CASE("negative blur sigma is rejected") {
  Rng rng(2);
  const auto seg = test::random_labels(make_grid(2, 2, 2), 2, rng);
  CHECK_THROWS_AS(prior::build_spatial_prior_from_single(seg, -1.0), SaeError);
}

TEST_CASE("frequency prior: single segmentation equals floored one-hot") {
  Rng rng(3);
  const auto seg = test::random_labels(make_grid(3, 3, 3), 4, rng);
  const auto a1 = prior::build_spatial_prior_from_many({seg});
  const auto a2 = prior::build_spatial_prior_from_single(seg, 0.0);
  REQUIRE(a1.probs.size() == a2.probs.size());
  for (std::size_t i = 0; i < a1.probs.size(); ++i)
    REQUIRE(a1.probs[i] == Catch::Approx(a2.probs[i]).margin(1e-7));
}

TEST_CASE("frequency prior splits disagreeing voxels evenly") {
  LabelVolume a, b;
  a.meta = b.meta = make_grid(1, 1, 3);
  a.num_labels = b.num_labels = 2;
  a.labels = {0, 0, 1};
  b.labels = {0, 1, 1};
  const auto atlas = prior::build_spatial_prior_from_many({a, b});
  CHECK(atlas.probs[0] == Catch::Approx(1.0).margin(1e-6));
  CHECK(atlas.probs[1] == Catch::Approx(0.5).margin(1e-6));
  CHECK(atlas.probs[4] == Catch::Approx(0.5).margin(1e-6));
  CHECK(atlas.probs[5] == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("frequency prior matches direct counting on random populations") {
  Rng rng(4);
  const auto g = make_grid(4, 4, 4);
  const int L = 3;
  std::vector<LabelVolume> segs;
  for (int i = 0; i < 10; ++i) segs.push_back(test::random_labels(g, L, rng));
  const auto atlas = prior::build_spatial_prior_from_many(segs, 1e-12);
  check_voxel_sums(atlas);
  for (std::int64_t j = 0; j < g.voxels(); ++j)
    for (int l = 0; l < L; ++l) {
      int count = 0;
      for (const auto& s : segs) count += s.labels[std::size_t(j)] == l;
      REQUIRE(double(atlas.probs[std::size_t(l) * g.voxels() + j]) ==
              Catch::Approx(count / 10.0).margin(1e-6));
    }
}

TEST_CASE("pairwise counts on the 3-voxel line match the hand enumeration") {
  LabelVolume seg;
  seg.meta = make_grid(1, 1, 3);
  seg.num_labels = 2;
  seg.labels = {0, 0, 1};
  const auto c = prior::count_neighbor_pairs(seg);
  CHECK(c.pairs[0] == 2);  // C(0,0)
  CHECK(c.pairs[1] == 1);  // C(0,1)
  CHECK(c.pairs[2] == 1);  // C(1,0)
  CHECK(c.pairs[3] == 0);  // C(1,1)
  CHECK(c.labels[0] == 2);
  CHECK(c.labels[1] == 1);

  // Small alpha approaches the raw count ratios; unseen pairs stay finite.
  const double alpha = 1e-9;
  const auto pot = prior::estimate_pairwise_potentials(seg, alpha);
  CHECK(pot[0] == Catch::Approx(0.0).margin(1e-8));            // log(2/2)
  CHECK(pot[1] == Catch::Approx(0.0).margin(1e-8));            // log(1/1)
  CHECK(pot[2] == Catch::Approx(std::log(0.5)).margin(1e-8));  // log(1/2)
  CHECK(pot[3] < -15.0);
  CHECK(std::isfinite(pot[3]));
}

TEST_CASE("alpha must be positive") {
  LabelVolume seg;
  seg.meta = make_grid(1, 1, 3);
  seg.num_labels = 2;
  seg.labels = {0, 0, 1};
  CHECK_THROWS_AS(prior::estimate_pairwise_potentials(seg, 0.0), SaeError);
}

TEST_CASE("uniform volume pairwise potential equals log mean neighborhood size") {
  LabelVolume seg;
  seg.meta = make_grid(5, 5, 5);
  seg.num_labels = 1;
  seg.labels.assign(125, 0);
  const auto c = prior::count_neighbor_pairs(seg);
  // Oracle: count clipped neighborhood sizes directly.
  std::int64_t total = 0;
  for (int z = 0; z < 5; ++z)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x)
        for (int dz = -1; dz <= 1; ++dz)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              if (dz == 0 && dy == 0 && dx == 0) continue;
              const int zz = z + dz, yy = y + dy, xx = x + dx;
              if (zz >= 0 && zz < 5 && yy >= 0 && yy < 5 && xx >= 0 && xx < 5)
                ++total;
            }
  REQUIRE(c.pairs[0] == total);
  const double alpha = 1e-9;
  const auto pot = prior::estimate_pairwise_potentials(seg, alpha);
  CHECK(pot[0] == Catch::Approx(std::log(double(total) / 125.0)).margin(1e-6));
  CHECK(std::log(double(total) / 125.0) < std::log(26.0));  // borders clip
}

TEST_CASE("pairwise estimation matches the counting oracle on random volumes") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const int L = 2 + rng.uniform_int(3);
    const auto seg = test::random_labels(make_grid(5, 5, 5), L, rng);
    const double alpha = rng.uniform(0.1, 2.0);
    const auto pot = prior::estimate_pairwise_potentials(seg, alpha);

    // Independent quadruple-loop count.
    std::vector<std::int64_t> C(std::size_t(L) * L, 0), n(std::size_t(L), 0);
    for (int z = 0; z < 5; ++z)
      for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) {
          const int lc = seg.at(z, y, x);
          ++n[std::size_t(lc)];
          for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                if (dz == 0 && dy == 0 && dx == 0) continue;
                const int zz = z + dz, yy = y + dy, xx = x + dx;
                if (zz < 0 || zz >= 5 || yy < 0 || yy >= 5 || xx < 0 || xx >= 5)
                  continue;
                ++C[std::size_t(seg.at(zz, yy, xx)) * L + lc];
              }
        }
    for (int l1 = 0; l1 < L; ++l1)
      for (int l2 = 0; l2 < L; ++l2)
        REQUIRE(pot[std::size_t(l1) * L + l2] ==
                Catch::Approx(std::log((double(C[std::size_t(l1) * L + l2]) + alpha) /
                                       (double(n[std::size_t(l2)]) + alpha * L)))
                    .epsilon(1e-12));
  }
}

TEST_CASE("MRF prior stores log probabilities as unary potentials") {
  const auto g = make_grid(2, 2, 2);
  prior::ProbabilisticAtlas atlas;
  atlas.meta = g;
  atlas.num_labels = 4;
  atlas.probs.assign(std::size_t(g.voxels()) * 4, 0.25f);
  const auto pot = prior::build_mrf_prior(atlas, std::vector<double>(16, 0.0));
  for (float u : pot.unary) REQUIRE(u == Catch::Approx(std::log(0.25)).margin(1e-6));
  CHECK(pot.pairwise_is_zero());

  // Floored atlases keep the unary field finite.
  Rng rng(6);
  auto seg = test::random_labels(g, 3, rng);
  const auto floored = prior::build_spatial_prior_from_single(seg, 0.0);
  const auto pot2 = prior::build_mrf_prior(floored, std::vector<double>(9, 0.0));
  for (float u : pot2.unary) REQUIRE(std::isfinite(u));
}

TEST_CASE("build_mrf_prior rejects a mis-sized pairwise matrix") {
  prior::ProbabilisticAtlas atlas;
  atlas.meta = make_grid(1, 1, 1);
  atlas.num_labels = 3;
  atlas.probs = {0.3f, 0.3f, 0.4f};
  CHECK_THROWS_AS(prior::build_mrf_prior(atlas, std::vector<double>(4, 0.0)),
                  SaeError);
}

TEST_CASE("atlas ingestion handles clean, degenerate and off-scale voxels") {
  const auto g = make_grid(1, 1, 3);
  // voxel 0 sums to 1, voxel 1 sums to 0, voxel 2 sums to 0.95
  std::vector<float> data = {0.6f, 0.0f, 0.75f,   // channel 0
                             0.4f, 0.0f, 0.20f};  // channel 1
  auto res = prior::normalize_ingested_atlas(g, 2, data);
  CHECK_FALSE(res.warned);  // 0.95 is inside the 0.1 tolerance
  CHECK(res.atlas.probs[0] == Catch::Approx(0.6).margin(1e-6));
  CHECK(res.atlas.probs[1] == Catch::Approx(0.5).margin(1e-6));  // uniform fallback
  CHECK(res.atlas.probs[2] == Catch::Approx(0.75 / 0.95).margin(1e-6));
  check_voxel_sums(res.atlas);

  std::vector<float> off = {0.5f, 0.1f, 0.3f, 0.1f, 0.1f, 0.3f};
  auto res2 = prior::normalize_ingested_atlas(g, 2, off);
  CHECK(res2.warned);  // 0.6 and 0.2 sums are beyond the threshold
  check_voxel_sums(res2.atlas);
}

TEST_CASE("pairwise CSV round trip") {
  Rng rng(7);
  const int L = 3;
  std::vector<double> pot(9);
  for (auto& v : pot) v = rng.uniform(-2, 2);
  const std::string path =
      (std::filesystem::temp_directory_path() / "sae_pairwise_test.csv").string();
  prior::save_pairwise_csv(pot, L, 1.5, path);
  const auto back = prior::load_pairwise_csv(path);
  CHECK(back.num_labels == L);
  CHECK(back.alpha == Catch::Approx(1.5));
  for (int i = 0; i < 9; ++i)
    REQUIRE(back.pot[std::size_t(i)] == Catch::Approx(pot[std::size_t(i)]).epsilon(1e-15));
  std::filesystem::remove(path);
}

TEST_CASE("every builder produces unit voxel sums") {
  Rng rng(8);
  const auto g = make_grid(4, 4, 4);
  const auto seg = test::random_labels(g, 4, rng);
  check_voxel_sums(prior::build_spatial_prior_from_single(seg, 2.0));
  check_voxel_sums(prior::build_spatial_prior_from_many({seg, test::random_labels(g, 4, rng)}));
  const auto f = test::random_categorical_field(g, 4, rng);
  check_voxel_sums(prior::normalize_ingested_atlas(g, 4, f.probs).atlas);
}
