#include <gtest/gtest.h>

#include <map>
#include <sstream>

#include "grad_check.hpp"

using namespace gsocc;
using namespace gsocc::testing;

namespace {

constexpr Model kModels[] = {Model::Probabilistic, Model::Additive};

VoxelGrid box_grid() {
  const auto spec = cube_spec(8, 4.0, 4);
  VoxelGrid g(spec);
  for (std::int64_t x = 2; x < 5; ++x)
    for (std::int64_t y = 2; y < 6; ++y)
      for (std::int64_t z = 0; z < 3; ++z) g.set({x, y, z}, z == 0 ? 1 : (x < 4 ? 2 : 3));
  return g;
}

std::vector<SamplePoint> all_voxels(const VoxelGrid& g) {
  std::vector<std::size_t> idx(g.size());
  std::iota(idx.begin(), idx.end(), 0);
  return samples_from_voxels(g, idx);
}

}  // namespace

TEST(Reparameterization, SoftplusInverse) {
  for (double a : {1e-8, 1e-3, 0.5, 1.0, 7.0, 40.0, 1e3}) EXPECT_NEAR(softplus(softplus_inverse(a)), a, 1e-12 * std::max(1.0, a));
  EXPECT_NEAR(sigmoid(0.0), 0.5, 1e-15);
}

TEST(ParamVector, EncodeDecodeRoundTrip) {
  Engine e(1);
  for (int t = 0; t < 50; ++t) {
    const auto gs = rand_set(e, 12, 5, 10.0, 0.01, 8.0);
    const auto back = decode(encode(gs));
    ASSERT_EQ(back.size(), gs.size());
    for (std::size_t i = 0; i < gs.size(); ++i) {
      EXPECT_LE((back[i].mean() - gs[i].mean()).cwiseAbs().maxCoeff(), 1e-9);
      EXPECT_LE((back[i].scale() - gs[i].scale()).cwiseAbs().maxCoeff(), 1e-9);
      EXPECT_LE((back[i].rotation() - gs[i].rotation()).cwiseAbs().maxCoeff(), 1e-9);
      EXPECT_NEAR(back[i].opacity(), gs[i].opacity(), 1e-9);
      for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(back[i].semantics()[k], gs[i].semantics()[k]);
    }
  }
}

TEST(ParamVector, Layout) {
  const GaussianSet gs({GaussianPrimitive(Vec3(1, 2, 3), Vec3(1, 2, 4), identity_quat(), 1.0, {7, 8})}, 2);
  const auto p = encode(gs);
  ASSERT_EQ(p.stride(), 13u);
  const auto v = p.gaussian(0);
  EXPECT_EQ(v[0], 1.0);
  EXPECT_DOUBLE_EQ(v[4], std::log(2.0));
  EXPECT_EQ(v[6], 1.0);
  EXPECT_DOUBLE_EQ(softplus(v[10]), 1.0);
  EXPECT_EQ(v[12], 8.0);
}

TEST(FitGrad, SingleGaussian) {
  Engine e(3);
  for (Model m : kModels) {
    for (int t = 0; t < 10; ++t) {
      const auto params = random_params(e, 1, 3, m);
      const auto samples = random_samples(e, 12, 3);
      const auto r = check_gradient(params, samples, m);
      EXPECT_EQ(r.failed, 0u) << model_name(m) << ": " << r.first_failure;
    }
  }
}

TEST(FitGrad, EightRandomGaussians) {
  Engine e(5);
  for (Model m : kModels) {
    for (int t = 0; t < 5; ++t) {
      const auto params = random_params(e, 8, 4, m);
      const auto samples = random_samples(e, 24, 4);
      const auto r = check_gradient(params, samples, m);
      EXPECT_EQ(r.failed, 0u) << model_name(m) << ": " << r.first_failure;
    }
  }
}

TEST(FitGrad, AtTheMeanGeometryIsStationary) {
  Engine e(7);
  for (Model m : kModels) {
    const auto params = random_params(e, 1, 3, m);
    const auto g = decode(params);
    // Occupied labels only: at x = m the empty-class probability is 0 and its log is singular.
    const std::vector<SamplePoint> samples{{g[0].mean(), 2}};
    const auto r = check_gradient(params, samples, m);
    EXPECT_EQ(r.failed, 0u) << model_name(m) << ": " << r.first_failure;
    const auto grad = fit_grad(params, samples, m, smooth_options());
    if (m == Model::Probabilistic) {
      // A single Gaussian's posterior is 1 everywhere, so nothing moves the mean.
      for (int k = 0; k < 3; ++k) EXPECT_EQ(grad[ParamVector::kMean + k], 0.0);
    } else {
      for (int k = 0; k < 3; ++k) EXPECT_NEAR(grad[ParamVector::kMean + k], 0.0, 1e-12);
    }
  }
}

TEST(FitGrad, MatchesWithCutoffAwayFromItsEdge) {
  // Tight Gaussians far apart: every sample is well inside or far outside the cutoff.
  Engine e(9);
  const auto params = random_params(e, 4, 2, Model::Probabilistic);
  const auto samples = random_samples(e, 16, 2);
  EvalOptions o;
  const auto a = fit_grad(params, samples, Model::Probabilistic, o);
  const auto b = fit_grad(params, samples, Model::Probabilistic, smooth_options());
  for (std::size_t j = 0; j < a.size(); ++j) EXPECT_NEAR(a[j], b[j], 1e-4 * std::max(1.0, std::abs(b[j])));
}

TEST(FitLoss, PerfectFitIsSmall) {
  const auto gt = box_grid();
  const Vec3 vs = gt.spec().voxel_size();
  std::vector<GaussianPrimitive> prims;
  for (std::size_t f : gt.occupied()) {
    prims.emplace_back(voxel_center(gt.spec(), gt.spec().unflat(f)), 0.25 * vs, identity_quat(), 1.0,
                       onehot(3, gt[f] - 1, 10.0));
  }
  const ParamVector params = encode(GaussianSet(prims, 3));
  const double loss = fit_loss(params, all_voxels(gt), Model::Probabilistic);
  EXPECT_LT(loss, 0.1);
  EXPECT_GE(loss, 0.0);
}

TEST(FitLoss, UniformPredictionGivesLogClasses) {
  for (std::size_t c : {1u, 3u, 17u}) {
    const double target = static_cast<double>(c) / static_cast<double>(c + 1);
    const double d = std::sqrt(-2.0 * std::log(target));
    const GaussianSet gs({isotropic(Vec3::Zero(), 1.0, std::vector<double>(c, 0.0))}, c);
    std::vector<SamplePoint> samples;
    for (Label y = 0; y <= c; ++y) samples.push_back({Vec3(d, 0, 0), y});
    const auto out = compose_occupancy(Vec3(d, 0, 0), gs);
    for (double v : out) EXPECT_NEAR(v, 1.0 / static_cast<double>(c + 1), 1e-12);
    EXPECT_NEAR(fit_loss(encode(gs), samples, Model::Probabilistic), std::log(static_cast<double>(c + 1)), 1e-6);
  }
}

TEST(FitLoss, AgreesWithFieldEvaluation) {
  Engine e(11);
  const auto gs = rand_set(e, 10, 4);
  const auto samples = random_samples(e, 50, 4);
  double want = 0.0;
  for (const auto& s : samples) want -= std::log(compose_occupancy(s.x, gs)[s.label] + kCrossEntropyEps);
  EXPECT_NEAR(fit_loss(encode(gs), samples, Model::Probabilistic), want / 50.0, 1e-10);

  const auto add = rand_set(e, 10, 5);
  double want_add = 0.0;
  for (const auto& s : samples) {
    const auto o = legacy_additive(s.x, add);
    want_add -= std::log(softmax(o)[s.label]);
  }
  EXPECT_NEAR(fit_loss(encode(add), samples, Model::Additive), want_add / 50.0, 1e-10);
}

TEST(FitLoss, SmallStepDescends) {
  const auto scene = synth_scene(0, "mini-street", mini_street_spec());
  for (Model m : kModels) {
    int decreased = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Engine e(seed);
      FitConfig cfg;
      cfg.num_gaussians = 32;
      cfg.batch_size = 256;
      cfg.seed = seed;
      cfg.model = m;
      std::vector<std::size_t> occ, emp;
      for (std::size_t f = 0; f < scene.grid.size(); ++f) (scene.grid[f] ? occ : emp).push_back(f);
      const auto samples = samples_from_voxels(scene.grid, draw_batch(occ, emp, cfg, 1));
      // Random init: jitter every parameter of the grid-based init.
      ParamVector params = encode(init_from_grid(scene.grid, cfg));
      for (auto& v : params.values()) v += uni(e, -0.3, 0.3);
      std::vector<double> grad;
      const double before = fit_loss_and_grad(params, samples, m, EvalOptions{}, grad);
      double norm = 0.0;
      for (double g : grad) norm += g * g;
      const double step = 1e-3 / std::max(1.0, std::sqrt(norm));
      auto v = params.values();
      for (std::size_t j = 0; j < v.size(); ++j) v[j] -= step * grad[j];
      decreased += fit_loss(params, samples, m) < before;
    }
    EXPECT_GE(decreased, 95) << model_name(m);
  }
}

TEST(InitFromGrid, SingleVoxel) {
  const auto spec = cube_spec(4, 2.0, 3);
  VoxelGrid gt(spec);
  gt.set({1, 2, 3}, 2);
  FitConfig cfg;
  cfg.num_gaussians = 1;
  const auto gs = init_from_grid(gt, cfg);
  ASSERT_EQ(gs.size(), 1u);
  EXPECT_EQ(gs[0].mean(), voxel_center(spec, 1, 2, 3));
  EXPECT_EQ(gs[0].scale(), spec.voxel_size());
  EXPECT_EQ(gs[0].opacity(), 1.0);
  EXPECT_EQ(std::vector<double>(gs[0].semantics().begin(), gs[0].semantics().end()), onehot(2, 1, 5.0));
}

TEST(InitFromGrid, HistogramMatchesSelectedCenters) {
  const auto scene = synth_scene(0, "mini-street", mini_street_spec());
  FitConfig cfg;
  for (Model m : kModels) {
    cfg.model = m;
    const auto gs = init_from_grid(scene.grid, cfg);
    ASSERT_EQ(gs.size(), 256u);
    std::map<Label, int> from_logits, from_grid;
    for (const auto& g : gs.primitives()) {
      const auto c = g.semantics();
      const auto k = static_cast<Label>(std::max_element(c.begin(), c.end()) - c.begin());
      ++from_logits[m == Model::Additive ? k : static_cast<Label>(k + 1)];
      ++from_grid[scene.grid.label_at(g.mean())];
    }
    EXPECT_EQ(from_logits, from_grid);
    EXPECT_EQ(from_grid.count(0), 0u);
    EXPECT_EQ(perc_correct(gs, scene.grid), 100.0);
  }
}

TEST(InitFromGrid, RepeatsWhenTooFewVoxels) {
  const auto spec = cube_spec(4, 2.0, 2);
  VoxelGrid gt(spec);
  gt.set({0, 0, 0}, 1);
  gt.set({3, 3, 3}, 1);
  FitConfig cfg;
  cfg.num_gaussians = 10;
  const auto gs = init_from_grid(gt, cfg);
  EXPECT_EQ(gs.size(), 10u);
  EXPECT_EQ(perc_correct(gs, gt), 100.0);
  EXPECT_THROW(init_from_grid(VoxelGrid(spec), cfg), InvalidParameter);
}

TEST(Fit, ImprovesAndIsReproducible) {
  const auto scene = synth_scene(1, "mini-street", mini_street_spec());
  FitConfig cfg;
  cfg.num_gaussians = 48;
  // The additive model dips over its first ~100 steps before it climbs.
  cfg.iterations = 300;
  cfg.batch_size = 512;
  cfg.eval_every = 150;
  for (Model m : kModels) {
    cfg.model = m;
    const auto a = fit(scene.grid, cfg);
    ASSERT_EQ(a.loss.size(), 300u);
    ASSERT_EQ(a.metrics.size(), 3u);
    EXPECT_GT(a.metrics.back().iou, a.metrics.front().iou) << model_name(m);
    EXPECT_GT(a.metrics.back().miou, a.metrics.front().miou) << model_name(m);
    for (double l : a.loss) EXPECT_TRUE(std::isfinite(l));
    for (const auto& g : a.gaussians.primitives()) EXPECT_NEAR(g.rotation().norm(), 1.0, 1e-3);

    set_thread_cap(1);
    const auto b = fit(scene.grid, cfg);
    set_thread_cap(0);
    EXPECT_EQ(a.loss, b.loss);
    std::stringstream sa, sb;
    write_gaussians(sa, a.gaussians);
    write_gaussians(sb, b.gaussians);
    EXPECT_EQ(sa.str(), sb.str());
  }
}

TEST(Fit, TraceCsvLayout) {
  const auto scene = synth_scene(0, "single-box", mini_street_spec());
  FitConfig cfg;
  cfg.num_gaussians = 8;
  cfg.iterations = 5;
  cfg.batch_size = 64;
  cfg.eval_every = 2;
  const auto r = fit(scene.grid, cfg);
  std::stringstream ss;
  write_trace_csv(ss, r);
  std::vector<std::string> lines;
  for (std::string l; std::getline(ss, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 7u);
  EXPECT_EQ(lines[0], "iteration,loss,iou,miou");
  EXPECT_EQ(lines[1].rfind("0,,", 0), 0u);
  EXPECT_EQ(std::count(lines[2].begin(), lines[2].end(), ','), 3);
  EXPECT_EQ(lines[2].substr(lines[2].size() - 2), ",,");
  EXPECT_NE(lines[3].substr(lines[3].size() - 2), ",,");
  EXPECT_NE(lines[6].substr(lines[6].size() - 2), ",,");
}

TEST(FitConfig, ParsesKeyValueFiles) {
  std::stringstream ss("# smoke\nnum_gaussians = 16\niterations=50 # short\n\nmodel=additive\nbatched_fps=true\n");
  const auto cfg = read_fit_config(ss);
  EXPECT_EQ(cfg.num_gaussians, 16u);
  EXPECT_EQ(cfg.iterations, 50u);
  EXPECT_EQ(cfg.model, Model::Additive);
  EXPECT_TRUE(cfg.batched_fps);
  std::stringstream unknown("learning_rate=1\n");
  EXPECT_THROW(read_fit_config(unknown), FormatError);
  std::stringstream bad("iterations=ten\n");
  EXPECT_THROW(read_fit_config(bad), FormatError);
  FitConfig c;
  c.occupied_ratio = 1.0;
  EXPECT_THROW(c.validate(), InvalidParameter);
}
