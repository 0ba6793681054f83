#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "gradcheck.hpp"
#include "irrm/train.hpp"

using namespace irrm;
namespace fs = std::filesystem;

namespace {

template <class T>
Tensor<T> random_tensor(Shape s, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng = make_rng(seed, {5});
  return uniform_tensor<T>(s, lo, hi, rng);
}

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.irbs_per_rdm = 2;
  cfg.hidden = 8;
  return cfg;
}

TrainConfig tiny_train() {
  TrainConfig cfg;
  cfg.batch = 2;
  cfg.patch = 16;
  cfg.seed = 11;
  cfg.total_steps = 6;
  cfg.checkpoint_every = 3;
  return cfg;
}

std::vector<Tensor<float>> tiny_dataset() {
  return {random_tensor<float>(Shape{1, 3, 24, 20}, 1), random_tensor<float>(Shape{1, 3, 20, 24}, 2)};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "irrm_test_train" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Losses, BackIsMeanAbsoluteError) {
  auto x = random_tensor<double>(Shape{2, 3, 4, 4}, 3);
  EXPECT_EQ(loss_back(x, x).item(), 0.0);
  EXPECT_NEAR(loss_back(add_scalar(x, 0.5), x).item(), 0.5, 1e-12);
  auto y = random_tensor<double>(Shape{2, 3, 4, 4}, 4);
  double ref = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) ref += std::abs(x.data()[i] - y.data()[i]);
  EXPECT_NEAR(loss_back(x, y).item(), ref / static_cast<double>(x.numel()), 1e-12);
  EXPECT_THROW(loss_back(x, random_tensor<double>(Shape{2, 3, 4, 2}, 4)), ShapeError);
}

TEST(Losses, ForwIsMeanSquaredError) {
  auto x = random_tensor<double>(Shape{1, 3, 5, 5}, 5);
  EXPECT_EQ(loss_forw(x, x).item(), 0.0);
  EXPECT_NEAR(loss_forw(add_scalar(x, 2.0), x).item(), 4.0, 1e-12);
  auto y = random_tensor<double>(Shape{1, 3, 5, 5}, 6);
  double ref = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) ref += (x.data()[i] - y.data()[i]) * (x.data()[i] - y.data()[i]);
  EXPECT_NEAR(loss_forw(x, y).item(), ref / static_cast<double>(x.numel()), 1e-12);
}

TEST(Losses, LatentIsMeanSquareOverAllLevels) {
  LatentPyramid<double> zeros{{Tensor<double>::zeros(Shape{1, 9, 4, 4}), Tensor<double>::zeros(Shape{1, 9, 2, 2})}};
  EXPECT_EQ(loss_latent(zeros).item(), 0.0);
  LatentPyramid<double> ones{{Tensor<double>::ones(Shape{1, 9, 4, 4}), Tensor<double>::ones(Shape{1, 9, 2, 2})}};
  EXPECT_DOUBLE_EQ(loss_latent(ones).item(), 1.0);
  // Levels of different sizes: weighted by element count, not averaged per level.
  LatentPyramid<double> mixed{{Tensor<double>::ones(Shape{1, 9, 4, 4}), Tensor<double>::zeros(Shape{1, 9, 2, 2})}};
  EXPECT_DOUBLE_EQ(loss_latent(mixed).item(), 144.0 / 180.0);
  ModelConfig cfg;
  cfg.channels = 1;
  auto z = sample_latents<double>(cfg, 1, 2 * 183, 2 * 183, 1.0, 3);
  ASSERT_GE(z.numel(), 100000u);
  EXPECT_NEAR(loss_latent(z).item(), 1.0, 0.05);
}

TEST(Losses, LatentOnlyObjectiveAtInitIsResidualEnergy) {
  IrrmModel<double> m(tiny_model());
  TrainConfig cfg;
  cfg.lambda1 = 0;
  cfg.lambda2 = 0;
  cfg.lambda3 = 1;
  Tensor<double> flat(Shape{1, 3, 8, 8}, 0.4);
  auto zs = sample_latents<double>(m.config(), 1, 8, 8, 1.0, 0);
  EXPECT_EQ(total_loss(m, flat, avg_pool2(flat), zs, cfg).total.item(), 0.0);
  auto x = random_tensor<double>(Shape{1, 3, 8, 8}, 7);
  const double expected = squared_norm(haar_forward(x).high) / static_cast<double>(9 * 4 * 4);
  EXPECT_NEAR(total_loss(m, x, avg_pool2(x), zs, cfg).total.item(), expected, 1e-12);
}

TEST(Losses, ForwardOnlyObjectiveAgainstOwnOutputIsZero) {
  IrrmModel<double> m(tiny_model(), InitSpec{InitMode::Random, 1, 0.5});
  TrainConfig cfg;
  cfg.lambda1 = 0;
  cfg.lambda2 = 1;
  cfg.lambda3 = 0;
  auto x = random_tensor<double>(Shape{2, 3, 8, 8}, 8);
  auto zs = sample_latents<double>(m.config(), 2, 8, 8, 1.0, 0);
  const Tensor<double> own = m.forward(x).y.detach();
  EXPECT_EQ(total_loss(m, x, own, zs, cfg).total.item(), 0.0);
}

TEST(Losses, TotalIsWeightedSumOfTerms) {
  IrrmModel<double> m(tiny_model(), InitSpec{InitMode::Random, 2, 0.5});
  TrainConfig cfg;
  cfg.lambda1 = 3;
  cfg.lambda2 = 5;
  cfg.lambda3 = 0.25;
  auto x = random_tensor<double>(Shape{2, 3, 8, 8}, 9);
  auto y_gt = bicubic_resize(x, Ratio{1, 2});
  auto zs = sample_latents<double>(m.config(), 2, 8, 8, 1.0, 4);
  auto t = total_loss(m, x, y_gt, zs, cfg);
  // Terms recomputed independently of total_loss.
  auto fwd = m.forward(x);
  const double back = loss_back(m.inverse(fwd.y, zs), x).item();
  const double forw = loss_forw(fwd.y, y_gt).item();
  const double lat = loss_latent(fwd.z).item();
  EXPECT_NEAR(t.back.item(), back, 1e-12);
  EXPECT_NEAR(t.total.item(), 3 * back + 5 * forw + 0.25 * lat, 1e-6);
}

TEST(Losses, TotalLossGradientMatchesFiniteDifferences) {
  IrrmModel<double> m(tiny_model(), InitSpec{InitMode::Random, 3, 0.5});
  const TrainConfig cfg;
  auto x = random_tensor<double>(Shape{1, 3, 4, 4}, 10);
  auto y_gt = avg_pool2(x);
  auto zs = sample_latents<double>(m.config(), 1, 4, 4, 1.0, 5);
  auto params = m.parameters();
  std::vector<Tensor<double>> in;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < params.size(); i += 5) {
    in.push_back(params[i].tensor);
    names.push_back(params[i].name);
  }
  auto reports =
      irrm::testing::check_gradients(in, names, [&] { return total_loss(m, x, y_gt, zs, cfg).total; });
  for (const auto& r : reports) EXPECT_LE(r.rel_error, 1e-3) << r.name;
}

TEST(Adam, FirstStepMovesByLearningRate) {
  for (double g : {1.0, -3.0, 1e-3}) {
    Tensor<double> p = Tensor<double>::scalar(0.5);
    p.set_requires_grad();
    backward(mul_scalar(p, g));
    std::vector<Tensor<double>> params{p};
    AdamState<double> st;
    adam_step(params, st, 2e-4);
    EXPECT_NEAR(p.item() - 0.5, g > 0 ? -2e-4 : 2e-4, 2e-4 * 1e-4);
  }
}

TEST(Adam, ZeroGradientsLeaveParametersUnchanged) {
  auto p = random_tensor<double>(Shape{1, 2, 3, 3}, 11);
  const std::vector<double> before(p.data().begin(), p.data().end());
  p.set_requires_grad();
  backward(mul_scalar(sum(p), 0.0));
  std::vector<Tensor<double>> params{p};
  AdamState<double> st;
  for (int i = 0; i < 3; ++i) adam_step(params, st, 1e-2);
  EXPECT_TRUE(std::equal(before.begin(), before.end(), p.data().begin()));
}

TEST(Adam, MatchesReferenceLoopOverHundredSteps) {
  // Minimize sum(c * p^2) with per-element curvature; reference loop written
  // out directly from the update rule.
  const std::size_t n = 7;
  auto curv = random_tensor<double>(Shape{1, 1, 1, n}, 12, 0.1, 3.0);
  auto p = random_tensor<double>(Shape{1, 1, 1, n}, 13, -1.0, 1.0);
  std::vector<double> ref(p.data().begin(), p.data().end()), m(n, 0.0), v(n, 0.0);
  p.set_requires_grad();
  std::vector<Tensor<double>> params{p};
  AdamState<double> st;
  const double lr = 1e-2, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int t = 1; t <= 100; ++t) {
    p.zero_grad();
    backward(sum(mul(curv, square(p))));
    adam_step(params, st, lr);
    for (std::size_t i = 0; i < n; ++i) {
      const double g = 2.0 * curv.data()[i] * ref[i];
      m[i] = b1 * m[i] + (1 - b1) * g;
      v[i] = b2 * v[i] + (1 - b2) * g * g;
      const double mh = m[i] / (1 - std::pow(b1, t)), vh = v[i] / (1 - std::pow(b2, t));
      ref[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
  for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(p.data()[i], ref[i], 1e-10);
}

TEST(Adam, NonFiniteGradientAbortsWithDiagnostic) {
  auto p = random_tensor<double>(Shape{1, 1, 1, 3}, 14);
  p.set_requires_grad();
  backward(sum(p));
  p.mutable_grad()[1] = std::numeric_limits<double>::quiet_NaN();
  std::vector<Tensor<double>> params{p};
  AdamState<double> st;
  const std::vector<double> before(p.data().begin(), p.data().end());
  EXPECT_THROW(adam_step(params, st, 1e-3), NumericError);
  EXPECT_TRUE(std::equal(before.begin(), before.end(), p.data().begin()));
  EXPECT_EQ(st.step, 0u);
}

TEST(Adam, ClipRescalesToMaxNorm) {
  Tensor<double> p(Shape{1, 1, 1, 2}, std::vector<double>{0, 0});
  p.set_requires_grad();
  backward(sum(mul(p, Tensor<double>(Shape{1, 1, 1, 2}, std::vector<double>{3, 4}))));
  std::vector<Tensor<double>> params{p};
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 1.0), 5.0);
  EXPECT_NEAR(p.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(p.grad()[1], 0.8, 1e-15);
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 0.0), 1.0);  // disabled
}

TEST(Schedule, HalvesEveryInterval) {
  TrainConfig cfg;
  EXPECT_DOUBLE_EQ(lr_at(0, cfg), 2e-4);
  EXPECT_DOUBLE_EQ(lr_at(9999, cfg), 2e-4);
  EXPECT_DOUBLE_EQ(lr_at(10000, cfg), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at(25000, cfg), 5e-5);
  for (std::size_t s = 0; s < 100000; s += 777) EXPECT_LE(lr_at(s + 777, cfg), lr_at(s, cfg));
}

TEST(Config, Validation) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate(4));
  cfg.patch = 66;
  EXPECT_THROW(cfg.validate(4), ShapeError);
  cfg = TrainConfig{};
  cfg.lambda2 = -1;
  EXPECT_THROW(cfg.validate(2), ShapeError);
  cfg = TrainConfig{};
  cfg.lr0 = 0;
  EXPECT_THROW(cfg.validate(2), ShapeError);
}

TEST(Augmentation, SymmetricPatchIsInvariant) {
  // Values depend only on the distance to the centre: fixed by all 8 symmetries.
  const std::size_t n = 6;
  std::vector<double> src(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double di = static_cast<double>(i) - 2.5, dj = static_cast<double>(j) - 2.5;
      src[i * n + j] = di * di + dj * dj;
    }
  for (int code = 0; code < 8; ++code) {
    std::vector<double> out(n * n);
    dihedral_crop(src.data(), n, 0, 0, n, code, out.data());
    EXPECT_EQ(out, src) << "code " << code;
  }
}

TEST(Augmentation, EightDistinctSymmetries) {
  const std::size_t n = 3;
  std::vector<int> src(n * n);
  std::iota(src.begin(), src.end(), 0);
  std::set<std::vector<int>> seen;
  for (int code = 0; code < 8; ++code) {
    std::vector<int> out(n * n);
    dihedral_crop(src.data(), n, 0, 0, n, code, out.data());
    seen.insert(out);
  }
  EXPECT_EQ(seen.size(), 8u);
}

TEST(Sampling, AugmentationsEquiprobable) {
  // A 2x2 image with distinct values: the batch reveals which symmetry was used.
  Tensor<float> img(Shape{1, 1, 2, 2}, std::vector<float>{0, 1, 2, 3});
  TrainConfig cfg;
  cfg.batch = 1;
  cfg.patch = 2;
  std::map<std::vector<float>, int> counts;
  const int draws = 8000;
  for (int k = 0; k < draws; ++k) {
    Rng rng = make_rng(1, {static_cast<std::uint64_t>(k)});
    auto x = sample_batch<float>({img}, cfg, 2, rng).x;
    counts[std::vector<float>(x.data().begin(), x.data().end())]++;
  }
  ASSERT_EQ(counts.size(), 8u);
  for (const auto& [k, c] : counts) EXPECT_NEAR(c, draws / 8, 120);  // ~4.5 sigma
}

TEST(Sampling, DisabledAugmentationIsReproducibleAndTargetsAreBicubic) {
  TrainConfig cfg = tiny_train();
  cfg.augment_flip = cfg.augment_rotate = false;
  auto data = tiny_dataset();
  Rng r1 = make_rng(5), r2 = make_rng(5);
  auto a = sample_batch(data, cfg, 2, r1), b = sample_batch(data, cfg, 2, r2);
  EXPECT_EQ(max_abs_diff(a.x, b.x), 0.0);
  EXPECT_EQ(a.x.shape(), (Shape{2, 3, 16, 16}));
  EXPECT_EQ(max_abs_diff(a.y_gt, bicubic_resize(a.x, Ratio{1, 2})), 0.0);
}

TEST(Sampling, EveryCropOriginOccurs) {
  const std::size_t h = 12, w = 14, patch = 4;
  std::vector<float> v(h * w);
  std::iota(v.begin(), v.end(), 0.0f);
  Tensor<float> img(Shape{1, 1, h, w}, v);
  TrainConfig cfg;
  cfg.batch = 1;
  cfg.patch = patch;
  cfg.augment_flip = cfg.augment_rotate = false;
  std::set<float> origins;
  for (int k = 0; k < 10000; ++k) {
    Rng rng = make_rng(3, {static_cast<std::uint64_t>(k)});
    origins.insert(sample_batch<float>({img}, cfg, 2, rng).x.data()[0]);
  }
  EXPECT_EQ(origins.size(), (h - patch + 1) * (w - patch + 1));
}

TEST(Trainer, UndersizedImagesAreSkipped) {
  IrrmModel<float> m(tiny_model());
  std::vector<Tensor<float>> data{random_tensor<float>(Shape{1, 3, 8, 8}, 1)};
  EXPECT_THROW(Trainer(m, data, tiny_train()), DataError);
  data.push_back(random_tensor<float>(Shape{1, 3, 16, 16}, 2));
  Trainer t(m, data, tiny_train());
  EXPECT_NO_THROW(t.step());
}

TEST(Trainer, LogLineFormat) {
  StepRecord r{12, 1.0 / 3.0, 0.125, 2e-5, 0.5, 3.25, 2e-4};
  const std::string line = format_log_line(r);
  EXPECT_EQ(line, "12\t0.333333333\t0.125\t2e-05\t0.5\t3.25\t0.0002");
  const StepRecord back = parse_log_line(line);
  EXPECT_EQ(back.step, 12u);
  EXPECT_DOUBLE_EQ(back.grad_norm, 3.25);
  EXPECT_THROW(parse_log_line("1\t2"), DataError);
}

TEST(Trainer, DeterministicUnderSeed) {
  auto run = [] {
    IrrmModel<float> m(tiny_model());
    Trainer t(m, tiny_dataset(), tiny_train());
    std::string log;
    for (int i = 0; i < 4; ++i) log += format_log_line(t.step()) + "\n";
    return log;
  };
  EXPECT_EQ(run(), run());
}

TEST(Trainer, ResumeReproducesUninterruptedTrajectory) {
  const fs::path dir = scratch("resume");
  std::vector<std::string> full;
  {
    IrrmModel<float> m(tiny_model());
    Trainer t(m, tiny_dataset(), tiny_train());
    for (int i = 0; i < 6; ++i) full.push_back(format_log_line(t.step()));
  }
  std::vector<std::string> resumed;
  {
    IrrmModel<float> m(tiny_model());
    Trainer t(m, tiny_dataset(), tiny_train());
    for (int i = 0; i < 3; ++i) resumed.push_back(format_log_line(t.step()));
    save_checkpoint(dir / "mid.irrm", t.checkpoint());
  }
  {
    Checkpoint ck = load_checkpoint(dir / "mid.irrm");
    ASSERT_TRUE(ck.optimizer.has_value());
    std::size_t start = 0;
    for (const auto& [k, v] : ck.extra) {
      if (k == "train_step") start = std::stoul(v);
    }
    EXPECT_EQ(start, 3u);
    Trainer t(ck.model, tiny_dataset(), tiny_train(), *ck.optimizer, start);
    for (int i = 0; i < 3; ++i) resumed.push_back(format_log_line(t.step()));
  }
  EXPECT_EQ(resumed, full);
}

TEST(Trainer, RunWritesLogAndCheckpoints) {
  const fs::path dir = scratch("run");
  IrrmModel<float> m(tiny_model());
  Trainer t(m, tiny_dataset(), tiny_train());
  std::size_t seen = 0;
  run_training(t, TrainRunOptions{dir, false, [&](const StepRecord& r) {
                                    EXPECT_EQ(r.step, seen++);
                                    EXPECT_TRUE(std::isfinite(r.grad_norm));
                                  }});
  EXPECT_EQ(seen, 6u);
  std::ifstream log(dir / "train.log");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    EXPECT_EQ(parse_log_line(line).step, lines);
    ++lines;
  }
  EXPECT_EQ(lines, 6u);
  EXPECT_TRUE(fs::exists(dir / "latest.irrm"));
  Checkpoint ck = load_checkpoint(dir / "model.irrm");
  auto x = random_tensor<float>(Shape{1, 3, 8, 8}, 20);
  EXPECT_EQ(max_abs_diff(ck.model.forward(x).y, m.forward(x).y), 0.0);
}

TEST(Trainer, NonFiniteLossHaltsAndKeepsLastCheckpoint) {
  const fs::path dir = scratch("nan");
  IrrmModel<float> m(tiny_model());
  save_checkpoint(dir / "latest.irrm", Checkpoint{m, std::nullopt, {}});
  const auto before = read_file_bytes(dir / "latest.irrm");
  std::vector<float> bad(3 * 16 * 16, 0.5f);
  bad[7] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig cfg = tiny_train();
  cfg.checkpoint_every = 1;
  Trainer t(m, {Tensor<float>(Shape{1, 3, 16, 16}, bad)}, cfg);
  EXPECT_THROW(run_training(t, TrainRunOptions{dir, false, {}}), NumericError);
  EXPECT_EQ(read_file_bytes(dir / "latest.irrm"), before);
}

TEST(Trainer, GradientsReachFirstBlockAfterOneStep) {
  // At identity init the tails are zero, so only they receive gradient; one
  // update later every layer, including the first head, does.
  IrrmModel<float> m(tiny_model());
  Trainer t(m, tiny_dataset(), tiny_train());
  t.step();
  m.zero_grad();
  TrainConfig cfg = tiny_train();
  Rng rng = make_rng(99);
  auto batch = sample_batch(tiny_dataset(), cfg, 2, rng);
  auto zs = sample_latents<float>(m.config(), cfg.batch, cfg.patch, cfg.patch, 1.0, 1);
  backward(total_loss(m, batch.x, batch.y_gt, zs, cfg).total);
  const auto params = m.parameters();
  ASSERT_EQ(params.front().name, "rdm0.irb0.eb0.head.weight");
  double largest = 0.0;
  for (float g : params.front().tensor.grad()) largest = std::max(largest, std::abs(static_cast<double>(g)));
  EXPECT_GT(largest, 0.0);
}

TEST(Trainer, LatentScaleSweepDeviatesMonotonically) {
  IrrmModel<float> m(tiny_model());
  Trainer t(m, tiny_dataset(), tiny_train());
  for (int i = 0; i < 6; ++i) t.step();
  NoGradGuard guard;
  auto x = random_tensor<float>(Shape{1, 3, 16, 16}, 21);
  auto y = m.forward(x).y;
  const auto ref = m.inverse(y, sample_latents<float>(m.config(), 1, 16, 16, 0.0, 5));
  double prev = 0.0;
  for (double sigma : {0.5, 1.0, 2.0}) {
    const double dev = squared_norm(sub(m.inverse(y, sample_latents<float>(m.config(), 1, 16, 16, sigma, 5)), ref));
    EXPECT_GT(dev, prev) << sigma;
    prev = dev;
  }
}
