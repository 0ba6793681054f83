// irrm: train, rescale, evaluate and inspect invertible rescaling models.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <limits>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "irrm/checkpoint.hpp"
#include "irrm/config.hpp"
#include "irrm/image.hpp"
#include "irrm/metrics.hpp"
#include "irrm/resize.hpp"
#include "irrm/train.hpp"

namespace fs = std::filesystem;
using namespace irrm;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

ConfigEntries parse_overrides(const std::vector<std::string>& sets) {
  ConfigEntries out;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + s + "'");
    out.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  return out;
}

RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& sets, RunConfig base = {}) {
  RunConfig cfg = config_path.empty() ? base : load_config_file(config_path, base);
  cfg = apply_config(cfg, parse_overrides(sets), "--set");
  try {
    cfg.validate();
  } catch (const ShapeError& e) {
    throw UsageError(std::string("invalid configuration: ") + e.what());
  }
  return cfg;
}

std::string fmt(double v, int digits = 4) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// Pads to a multiple of the scale, maps to (y, z) and keeps the original size
// so reconstructions can be cropped back.
struct Downscaled {
  Tensor<float> y;
  LatentPyramid<float> z;
  std::size_t width = 0, height = 0;
};

Downscaled downscale_image(const IrrmModel<float>& model, const ImageU8& img) {
  NoGradGuard guard;
  const auto scale = static_cast<std::size_t>(model.config().scale);
  const ImageU8 padded = reflect_pad(img, scale);
  ForwardResult<float> f = model.forward(to_tensor<float>(padded));
  return {f.y, f.z, img.width, img.height};
}

ImageU8 upscale_tensor(const IrrmModel<float>& model, const Tensor<float>& y, const LatentPyramid<float>& z,
                       std::size_t width, std::size_t height) {
  NoGradGuard guard;
  const ImageU8 full = to_image(model.inverse(y, z));
  return crop(full, width, height);
}

Tensor<float> quantize(const Tensor<float>& y) { return to_tensor<float>(to_image(y)); }

std::size_t thread_cap() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("IRRM_THREADS")) {
    try {
      const std::size_t cap = parse_size("IRRM_THREADS", env);
      if (cap == 0) throw UsageError("IRRM_THREADS must be at least 1");
      n = std::min(n, cap);
    } catch (const DataError& e) {
      throw UsageError(e.what());
    }
  }
  return n;
}

// Runs fn(i) for i in [0, count) on up to thread_cap() threads. The first
// exception is rethrown after all workers finish.
template <class Fn>
void parallel_for(std::size_t count, Fn fn) {
  const std::size_t workers = std::min(count, thread_cap());
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    for (std::size_t i; (i = next++) < count;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(work);
  work();
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

std::vector<fs::path> require_pngs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("data directory " + dir.string() + " does not exist");
  auto files = list_pngs(dir);
  if (files.empty()) throw DataError("no PNG files in " + dir.string());
  return files;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, data, out, resume;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
};

std::optional<std::string> extra_value(const Checkpoint& ck, const std::string& key) {
  for (const auto& [k, v] : ck.extra) {
    if (k == key) return v;
  }
  return std::nullopt;
}

int cmd_train(const TrainArgs& a) {
  std::vector<std::string> sets = a.sets;
  if (a.seed) sets.push_back("seed=" + std::to_string(*a.seed));

  // A resumed run starts from the stored model settings and seed; the
  // configuration may change training keys but not the architecture.
  RunConfig base;
  std::optional<Checkpoint> resumed;
  std::size_t start_step = 0;
  if (!a.resume.empty()) {
    resumed = load_checkpoint(a.resume);
    base.model = resumed->model.config();
    base.train.seed = parse_size("seed", extra_value(*resumed, "seed").value_or("0"));
    start_step = parse_size("train_step", extra_value(*resumed, "train_step").value_or("0"));
  }
  const RunConfig cfg = resolve_config(a.config, sets, base);
  if (resumed && format_config(RunConfig{resumed->model.config(), cfg.train}) != format_config(cfg)) {
    throw UsageError("model settings differ from those stored in " + a.resume);
  }

  std::cout << "# resolved configuration\n" << format_config(cfg) << std::flush;

  std::vector<Tensor<float>> data;
  for (const auto& f : require_pngs(a.data)) data.push_back(to_tensor<float>(load_png(f)));

  const fs::path out(a.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw DataError("cannot create output directory " + out.string());
  const std::string text = format_config(cfg);
  write_file_atomic(out / "config.cfg", std::vector<std::uint8_t>(text.begin(), text.end()));

  IrrmModel<float> model = resumed ? resumed->model : IrrmModel<float>(cfg.model, cfg.train.seed);
  AdamState<float> state = resumed && resumed->optimizer ? *resumed->optimizer : AdamState<float>{};
  Trainer trainer(model, std::move(data), cfg.train, std::move(state), start_step);

  TrainRunOptions opt;
  opt.out_dir = out;
  opt.append_log = resumed.has_value();
  opt.on_step = [&](const StepRecord& r) {
    if (r.step % 100 == 0 || r.step + 1 == cfg.train.total_steps) {
      std::cerr << "step " << r.step << "  loss " << r.loss << "  grad_norm " << r.grad_norm << "\n";
    }
  };
  run_training(trainer, opt);
  std::cout << "wrote " << (out / "model.irrm").string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct DownscaleArgs {
  std::string model, in, out_lr, out_z;
  bool quantize_lr = false;
};

int cmd_downscale(const DownscaleArgs& a) {
  const Checkpoint ck = load_checkpoint(a.model);
  const ImageU8 img = load_png(a.in);
  Downscaled d = downscale_image(ck.model, img);
  const ImageU8 lr = to_image(d.y);
  std::optional<Container> latents;
  if (!a.out_z.empty()) {
    // The exact LR tensor travels with z unless the caller asked for the 8-bit LR only.
    const Tensor<float> y = a.quantize_lr ? quantize(d.y) : d.y;
    latents = latents_container(d.z, &y);
    latents->header.emplace_back("width", std::to_string(d.width));
    latents->header.emplace_back("height", std::to_string(d.height));
  }
  const auto png = encode_png(lr);
  write_file_atomic(a.out_lr, png);
  if (latents) write_container(a.out_z, *latents);
  return kOk;
}

// ---------------------------------------------------------------------------

struct UpscaleArgs {
  std::string model, in_lr, z, out;
  std::optional<double> sigma;
  std::uint64_t seed = 0;
};

int cmd_upscale(const UpscaleArgs& a) {
  const Checkpoint ck = load_checkpoint(a.model);
  const ModelConfig& mc = ck.model.config();
  const ImageU8 lr = load_png(a.in_lr);
  const auto scale = static_cast<std::size_t>(mc.scale);
  Tensor<float> y = to_tensor<float>(lr);
  std::size_t width = lr.width * scale, height = lr.height * scale;
  LatentPyramid<float> z;
  if (!a.z.empty()) {
    const Container c = read_container(a.z);
    LatentFile f = latents_from(c);
    // Prefer the stored full-precision LR when it is the one the PNG was made from.
    if (f.y && f.y->shape() == y.shape() && to_image(*f.y).pixels == lr.pixels) y = *f.y;
    if (auto w = c.get("width")) width = parse_size("width", *w);
    if (auto h = c.get("height")) height = parse_size("height", *h);
    z = std::move(f.z);
  } else {
    z = sample_latents<float>(mc, 1, lr.height * scale, lr.width * scale, *a.sigma, a.seed);
  }
  if (width > lr.width * scale || height > lr.height * scale) {
    throw DataError("latent file records a size larger than the LR image allows");
  }
  save_png(upscale_tensor(ck.model, y, z, width, height), a.out);
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string model, data;
  std::size_t draws = 1;
  std::optional<std::size_t> crop_border;
  double sigma = 1.0;
  std::uint64_t seed = 0;
  bool bicubic = false;
  int scale = 0;
  bool quantize_lr = false;
};

struct ImageScores {
  std::vector<double> psnr, ssim;  // one entry per draw
};

int cmd_eval(const EvalArgs& a) {
  if (a.draws == 0) throw UsageError("--draws must be at least 1");
  std::optional<Checkpoint> ck;
  int scale = a.scale;
  if (!a.bicubic) {
    if (a.model.empty()) throw UsageError("eval needs --model unless --bicubic is given");
    ck = load_checkpoint(a.model);
    if (scale != 0 && scale != ck->model.config().scale) throw UsageError("--scale disagrees with the model");
    scale = ck->model.config().scale;
  } else if (scale != 2 && scale != 4) {
    if (!a.model.empty()) {
      scale = load_checkpoint(a.model).model.config().scale;
    } else {
      throw UsageError("--bicubic needs --scale 2 or 4 (or a --model to take it from)");
    }
  }
  const std::size_t border = a.crop_border.value_or(static_cast<std::size_t>(scale));
  const std::size_t draws = a.bicubic ? 1 : a.draws;
  const auto files = require_pngs(a.data);

  std::vector<ImageScores> scores(files.size());
  parallel_for(files.size(), [&](std::size_t i) {
    const ImageU8 hr = load_png(files[i]);
    auto& s = scores[i];
    if (a.bicubic) {
      const ImageU8 padded = reflect_pad(hr, static_cast<std::size_t>(scale));
      const auto x = to_tensor<double>(padded);
      const auto lr = to_tensor<double>(to_image(bicubic_resize(x, Ratio{1, scale})));
      const ImageU8 up = crop(to_image(bicubic_resize(lr, Ratio{scale, 1})), hr.width, hr.height);
      s.psnr.push_back(psnr(hr, up, border).db());
      s.ssim.push_back(ssim(hr, up, border));
      return;
    }
    const IrrmModel<float>& model = ck->model;
    Downscaled d = downscale_image(model, hr);
    if (a.quantize_lr) d.y = quantize(d.y);
    const Shape ys = d.y.shape();
    const auto sc = static_cast<std::size_t>(scale);
    for (std::size_t k = 0; k < draws; ++k) {
      Rng rng = make_rng(a.seed, {k, i});
      const auto z = sample_latents<float>(model.config(), 1, ys.h * sc, ys.w * sc, a.sigma, rng());
      const ImageU8 up = upscale_tensor(model, d.y, z, d.width, d.height);
      s.psnr.push_back(psnr(hr, up, border).db());
      s.ssim.push_back(ssim(hr, up, border));
    }
  });

  auto mean = [](const std::vector<double>& v) {
    double sum = 0.0;
    for (double x : v) sum += x;
    return sum / static_cast<double>(v.size());
  };
  std::cout << "file\tpsnr_db\tssim\tpsnr_spread_db\n";
  std::vector<double> draw_psnr(draws, 0.0);
  double sum_psnr = 0.0, sum_ssim = 0.0, max_spread = 0.0;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const auto& s = scores[i];
    const auto [lo, hi] = std::minmax_element(s.psnr.begin(), s.psnr.end());
    const double spread = std::isinf(*hi) && std::isinf(*lo) ? 0.0 : *hi - *lo;
    max_spread = std::max(max_spread, spread);
    sum_psnr += mean(s.psnr);
    sum_ssim += mean(s.ssim);
    for (std::size_t k = 0; k < draws; ++k) draw_psnr[k] += s.psnr[k] / static_cast<double>(files.size());
    std::cout << files[i].filename().string() << "\t" << fmt(mean(s.psnr)) << "\t" << fmt(mean(s.ssim), 6) << "\t"
              << fmt(spread) << "\n";
  }
  const double n = static_cast<double>(files.size());
  const auto [lo, hi] = std::minmax_element(draw_psnr.begin(), draw_psnr.end());
  const double mean_spread = std::isinf(*hi) && std::isinf(*lo) ? 0.0 : *hi - *lo;
  std::cout << "mean\t" << fmt(sum_psnr / n) << "\t" << fmt(sum_ssim / n, 6) << "\t" << fmt(mean_spread) << "\n";
  std::cout << "max_spread\t\t\t" << fmt(max_spread) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct InspectArgs {
  std::string model, config;
  std::vector<std::string> sets;
};

int cmd_inspect(const InspectArgs& a) {
  std::optional<IrrmModel<float>> model;
  if (!a.model.empty()) {
    if (!a.config.empty() || !a.sets.empty()) throw UsageError("give either --model or --config, not both");
    model = load_checkpoint(a.model).model;
  } else {
    model = IrrmModel<float>(resolve_config(a.config, a.sets).model);
  }
  const ModelConfig& mc = model->config();
  std::cout << "coupling_mode\t" << to_string(mc.coupling) << "\n"
            << "eb_kind\t" << to_string(mc.eb_kind) << "\n"
            << "scale\t" << mc.scale << "\n"
            << "num_rdm\t" << mc.num_rdm() << "\n"
            << "irbs_per_rdm\t" << mc.irbs_per_rdm << "\n"
            << "hidden\t" << mc.hidden << "\n"
            << "long_skip\t" << (mc.long_skip ? "true" : "false") << "\n"
            << "params\t" << model->count_params() << "\n";
  // MACs scale linearly with area, so any size divisible by the scale gives the per-pixel figure.
  const std::size_t side = 64;
  std::cout << "macs_per_hr_pixel\t" << shortest_real(model->macs(side, side) / (side * side)) << "\n";
  std::cout << "layer\tin\tout\tkernel\tlevel\tparams\n";
  for (const auto& l : model->describe()) {
    std::cout << l.name << "\t" << l.in_channels << "\t" << l.out_channels << "\t" << l.kernel << "x" << l.kernel
              << "\t" << l.level << "\t" << l.params << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct ZsweepArgs {
  std::string model, in, sigmas, out;
  std::uint64_t seed = 0;
};

std::vector<double> parse_sigmas(const std::string& list) {
  std::vector<double> out;
  std::stringstream ss(list);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      out.push_back(parse_real("--sigmas", item));
    } catch (const DataError& e) {
      throw UsageError(e.what());
    }
    if (!(out.back() >= 0.0)) throw UsageError("--sigmas values must be non-negative");
  }
  if (out.empty()) throw UsageError("--sigmas is empty");
  return out;
}

int cmd_zsweep(const ZsweepArgs& a) {
  const std::vector<double> sigmas = parse_sigmas(a.sigmas);
  const Checkpoint ck = load_checkpoint(a.model);
  const ImageU8 img = load_png(a.in);
  const Downscaled d = downscale_image(ck.model, img);
  const Shape ys = d.y.shape();
  const auto sc = static_cast<std::size_t>(ck.model.config().scale);

  // The same unit draw is scaled by every sigma, so outputs differ only in latent magnitude.
  auto reconstruct = [&](double sigma) {
    const auto z = sample_latents<float>(ck.model.config(), 1, ys.h * sc, ys.w * sc, sigma, a.seed);
    return upscale_tensor(ck.model, d.y, z, d.width, d.height);
  };
  const ImageU8 reference = reconstruct(0.0);

  std::vector<std::pair<std::string, ImageU8>> outputs;
  std::ostringstream table;
  table << "sigma\tpsnr_vs_sigma0_db\trms_dev\n";
  for (double s : sigmas) {
    const ImageU8 r = s == 0.0 ? reference : reconstruct(s);
    double sq = 0.0;
    for (std::size_t i = 0; i < r.pixels.size(); ++i) {
      const double e = static_cast<double>(r.pixels[i]) - static_cast<double>(reference.pixels[i]);
      sq += e * e;
    }
    table << shortest_real(s) << "\t" << psnr(reference, r).str() << "\t"
          << fmt(std::sqrt(sq / static_cast<double>(r.pixels.size())), 6) << "\n";
    outputs.emplace_back("sigma_" + shortest_real(s) + ".png", r);
  }

  const fs::path out(a.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw DataError("cannot create output directory " + out.string());
  for (const auto& [name, image] : outputs) save_png(image, out / name);
  const std::string text = table.str();
  write_file_atomic(out / "zsweep.tsv", std::vector<std::uint8_t>(text.begin(), text.end()));
  std::cout << text;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Tensor buffers are large and short-lived. Keeping them on the heap instead
  // of fresh mmaps per allocation avoids a page-fault storm every step.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Invertible residual rescaling: train, downscale, upscale, evaluate and inspect models."};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model on a directory of PNG images");
  t->add_option("--config", train.config, "key = value configuration file")->check(CLI::ExistingFile);
  t->add_option("--data", train.data, "Directory of training PNGs")->required();
  t->add_option("--out", train.out, "Output directory for checkpoints and the log")->required();
  t->add_option("--seed", train.seed, "Overrides the configured seed");
  t->add_option("--resume", train.resume, "Continue from a checkpoint written by an earlier run");
  t->add_option("--set", train.sets, "Override one configuration key (key=value), repeatable");

  DownscaleArgs down;
  auto* d = app.add_subcommand("downscale", "Map an HR image to an LR image and latents");
  d->add_option("--model", down.model, "Model checkpoint")->required();
  d->add_option("--in", down.in, "Input HR PNG")->required();
  d->add_option("--out-lr", down.out_lr, "Output LR PNG")->required();
  d->add_option("--out-z", down.out_z, "Output latent file");
  d->add_flag("--quantize-lr", down.quantize_lr, "Store the 8-bit LR instead of the exact one in the latent file");

  UpscaleArgs up;
  auto* u = app.add_subcommand("upscale", "Reconstruct an HR image from an LR image");
  u->add_option("--model", up.model, "Model checkpoint")->required();
  u->add_option("--in-lr", up.in_lr, "Input LR PNG")->required();
  auto* zopt = u->add_option("--z", up.z, "Latent file written by downscale");
  auto* sopt = u->add_option("--sample-sigma", up.sigma, "Draw latents from N(0, sigma^2) instead");
  zopt->excludes(sopt);
  u->add_option("--seed", up.seed, "Seed for sampled latents");
  u->add_option("--out", up.out, "Output HR PNG")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Round-trip PSNR/SSIM (Y channel) over a directory");
  e->alias("roundtrip");
  e->add_option("--model", ev.model, "Model checkpoint");
  e->add_option("--data", ev.data, "Directory of HR PNGs")->required();
  e->add_option("--draws", ev.draws, "Independent latent draws per image")->capture_default_str();
  e->add_option("--crop-border", ev.crop_border, "Pixels cropped from each edge before scoring (default: scale)");
  e->add_option("--sigma", ev.sigma, "Standard deviation of the sampled latents")->capture_default_str();
  e->add_option("--seed", ev.seed, "Seed for latent draws")->capture_default_str();
  e->add_flag("--bicubic", ev.bicubic, "Score bicubic down- then upscaling instead of the model");
  e->add_option("--scale", ev.scale, "Scale for --bicubic without a model");
  e->add_flag("--quantize-lr", ev.quantize_lr, "Round the LR image to 8 bits before upscaling");

  InspectArgs in;
  auto* i = app.add_subcommand("inspect", "Report parameter counts, layer shapes and MACs");
  i->add_option("--model", in.model, "Model checkpoint");
  i->add_option("--config", in.config, "Configuration file")->check(CLI::ExistingFile);
  i->add_option("--set", in.sets, "Override one configuration key (key=value), repeatable");

  ZsweepArgs zs;
  auto* z = app.add_subcommand("zsweep", "Reconstruct one image at several latent scales");
  z->add_option("--model", zs.model, "Model checkpoint")->required();
  z->add_option("--in", zs.in, "Input HR PNG")->required();
  z->add_option("--sigmas", zs.sigmas, "Comma-separated latent standard deviations")->required();
  z->add_option("--out", zs.out, "Output directory")->required();
  z->add_option("--seed", zs.seed, "Seed for the latent draw")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*t) return cmd_train(train);
    if (*d) return cmd_downscale(down);
    if (*u) {
      if (up.z.empty() && !up.sigma) throw UsageError("upscale needs --z or --sample-sigma");
      if (up.sigma && *up.sigma < 0) throw UsageError("--sample-sigma must be non-negative");
      return cmd_upscale(up);
    }
    if (*e) return cmd_eval(ev);
    if (*i) return cmd_inspect(in);
    if (*z) return cmd_zsweep(zs);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const NumericError& err) {
    std::cerr << "numeric failure: " << err.what() << "\n";
    return kNumeric;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kData;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kData;
  }
  return kUsage;
}
