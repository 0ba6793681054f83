#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "irrm/checkpoint.hpp"
#include "irrm/model.hpp"
#include "irrm/optim.hpp"
#include "irrm/resize.hpp"

namespace irrm {

/// Objective weights, optimizer constants, schedule and data sampling.
struct TrainConfig {
  double lambda1 = 8.0;  // reconstruction (L1)
  double lambda2 = 8.0;  // LR guidance (L2)
  double lambda3 = 1.0;  // latent regularization
  double lr0 = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;
  std::size_t halve_every = 10000;
  std::size_t batch = 4;
  std::size_t patch = 64;
  bool augment_flip = true;
  bool augment_rotate = true;
  std::uint64_t seed = 0;
  std::size_t total_steps = 2000;
  double clip_norm = 5.0;  // <= 0 disables clipping
  std::size_t checkpoint_every = 500;

  void validate(int scale) const {
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) throw ShapeError("loss weights must be non-negative");
    if (!(lr0 > 0)) throw ShapeError("lr0 must be positive");
    if (halve_every == 0) throw ShapeError("halve_every must be positive");
    if (batch == 0) throw ShapeError("batch must be positive");
    if (patch == 0 || patch % static_cast<std::size_t>(scale) != 0) {
      throw ShapeError("patch " + std::to_string(patch) + " must be a positive multiple of scale " +
                       std::to_string(scale));
    }
  }

  AdamConfig adam() const { return {beta1, beta2, eps_adam}; }
};

/// lr0 halved every `halve_every` steps.
inline double lr_at(std::size_t step, const TrainConfig& cfg) {
  return cfg.lr0 * std::pow(0.5, static_cast<double>(step / cfg.halve_every));
}

/// Mean absolute error.
template <class T>
Tensor<T> loss_back(const Tensor<T>& x_back, const Tensor<T>& x) {
  return mean(abs(sub(x_back, x)));
}

/// Mean squared error.
template <class T>
Tensor<T> loss_forw(const Tensor<T>& y_forw, const Tensor<T>& y_gt) {
  return mean(square(sub(y_forw, y_gt)));
}

/// Mean square of all latent entries across levels.
template <class T>
Tensor<T> loss_latent(const LatentPyramid<T>& z) {
  if (z.levels.empty()) return Tensor<T>::scalar(T(0));
  Tensor<T> acc = sum(square(z.levels.front()));
  for (std::size_t k = 1; k < z.levels.size(); ++k) acc = add(acc, sum(square(z.levels[k])));
  return mul_scalar(acc, T(1) / static_cast<T>(z.numel()));
}

template <class T>
struct LossTerms {
  Tensor<T> total;
  Tensor<T> back;
  Tensor<T> forw;
  Tensor<T> latent;
};

/// Weighted training objective. The reconstruction is the inverse pass from
/// the model's own LR output and the supplied latent sample, so gradients flow
/// through both directions.
template <class T>
LossTerms<T> total_loss(const IrrmModel<T>& model, const Tensor<T>& x, const Tensor<T>& y_gt,
                        const LatentPyramid<T>& sampled_z, const TrainConfig& cfg) {
  ForwardResult<T> fwd = model.forward(x);
  Tensor<T> x_back = model.inverse(fwd.y, sampled_z);
  LossTerms<T> t;
  t.back = loss_back(x_back, x);
  t.forw = loss_forw(fwd.y, y_gt);
  t.latent = loss_latent(fwd.z);
  t.total = add(add(mul_scalar(t.back, static_cast<T>(cfg.lambda1)), mul_scalar(t.forw, static_cast<T>(cfg.lambda2))),
                mul_scalar(t.latent, static_cast<T>(cfg.lambda3)));
  return t;
}

/// Copies a size x size window at (top, left) of channel plane `src` into
/// `dst` under one of the 8 symmetries of the square: code bits 0-1 give the
/// number of quarter turns, bit 2 a horizontal mirror applied first.
template <class T>
void dihedral_crop(const T* src, std::size_t src_w, std::size_t top, std::size_t left, std::size_t size, int code,
                   T* dst) {
  const std::size_t last = size - 1;
  for (std::size_t i = 0; i < size; ++i) {
    for (std::size_t j = 0; j < size; ++j) {
      std::size_t si = i, sj = j;
      switch (code & 3) {
        case 1: si = last - j; sj = i; break;
        case 2: si = last - i; sj = last - j; break;
        case 3: si = j; sj = last - i; break;
        default: break;
      }
      if (code & 4) sj = last - sj;
      dst[i * size + j] = src[(top + si) * src_w + left + sj];
    }
  }
}

template <class T>
struct Batch {
  Tensor<T> x;     // (batch, C, patch, patch)
  Tensor<T> y_gt;  // bicubic LR of x
};

/// Random crops with optional dihedral augmentation and their bicubic LR
/// targets. `dataset` holds (1, C, H, W) images each at least patch-sized.
template <class T>
Batch<T> sample_batch(const std::vector<Tensor<T>>& dataset, const TrainConfig& cfg, int scale, Rng& rng) {
  if (dataset.empty()) throw DataError("sample_batch: empty dataset");
  const std::size_t p = cfg.patch, c = dataset.front().shape().c;
  std::vector<T> out(cfg.batch * c * p * p);
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
  for (std::size_t b = 0; b < cfg.batch; ++b) {
    const Tensor<T>& img = dataset[pick(rng)];
    const Shape& s = img.shape();
    if (s.h < p || s.w < p || s.c != c) throw DataError("sample_batch: image " + s.str() + " cannot supply the patch");
    const std::size_t top = std::uniform_int_distribution<std::size_t>(0, s.h - p)(rng);
    const std::size_t left = std::uniform_int_distribution<std::size_t>(0, s.w - p)(rng);
    int code = 0;
    if (cfg.augment_flip && cfg.augment_rotate) {
      code = std::uniform_int_distribution<int>(0, 7)(rng);
    } else if (cfg.augment_rotate) {
      code = std::uniform_int_distribution<int>(0, 3)(rng);
    } else if (cfg.augment_flip) {
      code = 4 * std::uniform_int_distribution<int>(0, 1)(rng);
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      dihedral_crop(img.data().data() + ch * s.plane(), s.w, top, left, p, code, out.data() + (b * c + ch) * p * p);
    }
  }
  Tensor<T> x(Shape{cfg.batch, c, p, p}, std::move(out));
  return {x, bicubic_resize(x, Ratio{1, scale})};
}

struct StepRecord {
  std::size_t step = 0;
  double loss = 0, l_back = 0, l_forw = 0, l_latent = 0, grad_norm = 0, lr = 0;
};

/// Tab-separated log line with 9 significant digits.
inline std::string format_log_line(const StepRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g", r.step, r.loss, r.l_back, r.l_forw,
                r.l_latent, r.grad_norm, r.lr);
  return buf;
}

inline StepRecord parse_log_line(const std::string& line) {
  StepRecord r;
  if (std::sscanf(line.c_str(), "%zu\t%lf\t%lf\t%lf\t%lf\t%lf\t%lf", &r.step, &r.loss, &r.l_back, &r.l_forw,
                  &r.l_latent, &r.grad_norm, &r.lr) != 7) {
    throw DataError("malformed training log line: " + line);
  }
  return r;
}

/// Single-threaded optimizer loop. Step k draws its batch and latents from a
/// generator keyed by (seed, k), so a run resumed from a checkpoint at step k
/// continues exactly as an uninterrupted one.
class Trainer {
 public:
  Trainer(IrrmModel<float>& model, std::vector<Tensor<float>> dataset, TrainConfig cfg,
          AdamState<float> state = {}, std::size_t start_step = 0)
      : model_(model), dataset_(std::move(dataset)), cfg_(cfg), state_(std::move(state)), next_step_(start_step) {
    cfg_.validate(model_.config().scale);
    std::erase_if(dataset_, [&](const Tensor<float>& img) {
      const Shape& s = img.shape();
      const bool small = s.h < cfg_.patch || s.w < cfg_.patch;
      if (small) std::cerr << "warning: skipping " << s.str() << " image smaller than patch " << cfg_.patch << "\n";
      return small;
    });
    if (dataset_.empty()) throw DataError("training dataset has no image of at least patch size");
  }

  StepRecord step() {
    const std::size_t k = next_step_;
    Rng rng = make_rng(cfg_.seed, {k});
    Batch<float> batch = sample_batch(dataset_, cfg_, model_.config().scale, rng);
    const std::uint64_t z_seed = rng();
    LatentPyramid<float> z = sample_latents<float>(model_.config(), cfg_.batch, cfg_.patch, cfg_.patch, 1.0, z_seed);

    model_.zero_grad();
    LossTerms<float> terms = total_loss(model_, batch.x, batch.y_gt, z, cfg_);
    StepRecord rec;
    rec.step = k;
    rec.loss = terms.total.item();
    rec.l_back = terms.back.item();
    rec.l_forw = terms.forw.item();
    rec.l_latent = terms.latent.item();
    rec.lr = lr_at(k, cfg_);
    if (!std::isfinite(rec.loss)) throw NumericError("non-finite loss at step " + std::to_string(k));
    backward(terms.total);

    std::vector<Tensor<float>> params;
    for (auto& p : model_.parameters()) params.push_back(p.tensor);
    rec.grad_norm = clip_grad_norm(params, cfg_.clip_norm);
    if (!std::isfinite(rec.grad_norm)) throw NumericError("non-finite gradient norm at step " + std::to_string(k));
    adam_step(params, state_, rec.lr, cfg_.adam());
    ++next_step_;
    return rec;
  }

  std::size_t next_step() const { return next_step_; }
  const AdamState<float>& optimizer() const { return state_; }
  const TrainConfig& config() const { return cfg_; }

  Checkpoint checkpoint() const {
    return Checkpoint{model_, state_, {{"train_step", std::to_string(next_step_)}, {"seed", std::to_string(cfg_.seed)}}};
  }

 private:
  IrrmModel<float>& model_;
  std::vector<Tensor<float>> dataset_;
  TrainConfig cfg_;
  AdamState<float> state_;
  std::size_t next_step_ = 0;
};

struct TrainRunOptions {
  std::filesystem::path out_dir;
  bool append_log = false;
  std::function<void(const StepRecord&)> on_step;
};

/// Runs until cfg.total_steps, appending one log line per step to
/// out_dir/train.log and writing out_dir/latest.irrm every checkpoint_every
/// steps and at the end. A non-finite loss stops the run with NumericError;
/// the previously written checkpoint is left untouched.
inline void run_training(Trainer& trainer, const TrainRunOptions& opt) {
  std::filesystem::create_directories(opt.out_dir);
  const auto log_path = opt.out_dir / "train.log";
  std::ofstream log(log_path, opt.append_log ? std::ios::app : std::ios::trunc);
  if (!log) throw DataError("cannot write " + log_path.string());
  const TrainConfig& cfg = trainer.config();
  while (trainer.next_step() < cfg.total_steps) {
    const StepRecord rec = trainer.step();
    log << format_log_line(rec) << '\n';
    log.flush();
    if (opt.on_step) opt.on_step(rec);
    if (cfg.checkpoint_every > 0 && trainer.next_step() % cfg.checkpoint_every == 0) {
      save_checkpoint(opt.out_dir / "latest.irrm", trainer.checkpoint());
    }
  }
  save_checkpoint(opt.out_dir / "latest.irrm", trainer.checkpoint());
  save_checkpoint(opt.out_dir / "model.irrm", trainer.checkpoint());
}

}  // namespace irrm
