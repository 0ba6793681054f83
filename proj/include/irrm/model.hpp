#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "irrm/conv.hpp"
#include "irrm/ops.hpp"
#include "irrm/rng.hpp"
#include "irrm/wavelet.hpp"

namespace irrm {

/// Enhanced Block topology.
enum class EbKind { PCB, RB, RBPlus };

/// How an Invertible Residual Block couples its two branches.
enum class CouplingMode { LiteralEq3, ThreeEb };

inline std::string to_string(EbKind k) {
  switch (k) {
    case EbKind::PCB: return "pcb";
    case EbKind::RB: return "rb";
    case EbKind::RBPlus: return "rb+";
  }
  return "?";
}

inline std::string to_string(CouplingMode m) {
  return m == CouplingMode::ThreeEb ? "three_eb" : "literal_eq3";
}

inline EbKind parse_eb_kind(const std::string& s) {
  if (s == "pcb" || s == "PCB") return EbKind::PCB;
  if (s == "rb" || s == "RB") return EbKind::RB;
  if (s == "rb+" || s == "RB+" || s == "rbplus") return EbKind::RBPlus;
  throw ShapeError("unknown eb_kind '" + s + "' (expected pcb, rb or rb+)");
}

inline CouplingMode parse_coupling_mode(const std::string& s) {
  if (s == "three_eb") return CouplingMode::ThreeEb;
  if (s == "literal_eq3") return CouplingMode::LiteralEq3;
  throw ShapeError("unknown coupling_mode '" + s + "' (expected three_eb or literal_eq3)");
}

struct EbConfig {
  EbKind kind = EbKind::RB;
  std::size_t in_channels = 0;
  std::size_t hidden_channels = 32;
  std::size_t out_channels = 0;
  double slope = 0.2;
};

struct ModelConfig {
  int scale = 2;
  std::size_t channels = 3;
  std::size_t irbs_per_rdm = 4;
  std::size_t hidden = 32;
  EbKind eb_kind = EbKind::RB;
  CouplingMode coupling = CouplingMode::ThreeEb;
  double clamp_alpha = 1.0;
  bool long_skip = true;
  double slope = 0.2;

  std::size_t num_rdm() const { return scale == 4 ? 2 : 1; }

  void validate() const {
    if (scale != 2 && scale != 4) throw ShapeError("scale must be 2 or 4, got " + std::to_string(scale));
    if (channels == 0) throw ShapeError("channels must be positive");
    if (hidden == 0) throw ShapeError("hidden width must be positive");
    if (eb_kind == EbKind::RBPlus && hidden % 2 != 0) throw ShapeError("rb+ needs an even hidden width");
    if (!(clamp_alpha > 0.0)) throw ShapeError("clamp_alpha must be positive");
  }
};

enum class Preset { S, M, L };

/// Size presets: 4/8/12 IRBs per RDM with hidden width 32/48/64.
inline ModelConfig preset_config(Preset p, int scale = 2) {
  ModelConfig cfg;
  cfg.scale = scale;
  switch (p) {
    case Preset::S: cfg.irbs_per_rdm = 4; cfg.hidden = 32; break;
    case Preset::M: cfg.irbs_per_rdm = 8; cfg.hidden = 48; break;
    case Preset::L: cfg.irbs_per_rdm = 12; cfg.hidden = 64; break;
  }
  return cfg;
}

inline Preset parse_preset(const std::string& s) {
  if (s == "S" || s == "s") return Preset::S;
  if (s == "M" || s == "m") return Preset::M;
  if (s == "L" || s == "l") return Preset::L;
  throw ShapeError("unknown preset '" + s + "' (expected S, M or L)");
}

/// Weight initialization. `Identity` zeroes the last layer of every EB so the
/// whole flow starts as the identity; `Random` draws it like the other layers.
enum class InitMode { Identity, Random };

struct InitSpec {
  InitMode mode = InitMode::Identity;
  std::uint64_t seed = 0;
  double gain = 0.1;
};

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

/// One convolution in the flat summary of a model.
struct LayerInfo {
  std::string name;
  std::size_t in_channels;
  std::size_t out_channels;
  std::size_t kernel;
  std::size_t level;  // RDM depth (1-based); spatial extent is input / 2^level
  std::size_t params;
};

template <class T>
struct Conv2dLayer {
  Tensor<T> weight;
  Tensor<T> bias;

  Conv2dLayer() = default;
  Conv2dLayer(std::size_t in, std::size_t out, std::size_t k)
      : weight(Shape{out, in, k, k}), bias(Shape{out, 1, 1, 1}) {}

  std::size_t in_channels() const { return weight.shape().c; }
  std::size_t out_channels() const { return weight.shape().n; }
  std::size_t kernel() const { return weight.shape().h; }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, 1, kernel() / 2); }

  void init_normal(Rng& rng, double gain) {
    const double fan_in = static_cast<double>(in_channels() * kernel() * kernel());
    weight = normal_tensor<T>(weight.shape(), 0.0, gain * std::sqrt(2.0 / fan_in), rng);
    bias = Tensor<T>::zeros(bias.shape());
  }
  void init_zero() {
    weight = Tensor<T>::zeros(weight.shape());
    bias = Tensor<T>::zeros(bias.shape());
  }
};

/// Learnable sub-network of a coupling block.
///
/// All kinds use three 3x3 convolutions (head, body, tail) with leaky ReLU:
///   PCB:  tail(act(body(act(head(x)))))
///   RB:   h = act(head(x)); tail(h + act(body(h)))
///   RB+:  head and body at half width; tail sees concat(h, h + act(body(h)))
/// PCB and RB therefore hold identical parameter counts.
template <class T>
class EnhancedBlock {
 public:
  EnhancedBlock() = default;
  explicit EnhancedBlock(const EbConfig& cfg) : cfg_(cfg) {
    const std::size_t width = cfg.kind == EbKind::RBPlus ? cfg.hidden_channels / 2 : cfg.hidden_channels;
    head_ = Conv2dLayer<T>(cfg.in_channels, width, 3);
    body_ = Conv2dLayer<T>(width, width, 3);
    tail_ = Conv2dLayer<T>(cfg.kind == EbKind::RBPlus ? 2 * width : width, cfg.out_channels, 3);
  }

  const EbConfig& config() const { return cfg_; }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.shape().c != cfg_.in_channels) {
      throw ShapeError("enhanced block expects " + std::to_string(cfg_.in_channels) + " channels, got " +
                       x.shape().str());
    }
    const T slope = static_cast<T>(cfg_.slope);
    Tensor<T> h = leaky_relu(head_(x), slope);
    switch (cfg_.kind) {
      case EbKind::PCB:
        return tail_(leaky_relu(body_(h), slope));
      case EbKind::RB:
        return tail_(add(h, leaky_relu(body_(h), slope)));
      case EbKind::RBPlus: {
        Tensor<T> r = add(h, leaky_relu(body_(h), slope));
        return tail_(concat_channels<T>({h, r}));
      }
    }
    return h;
  }

  void init(InitMode mode, Rng& rng, double gain) {
    head_.init_normal(rng, gain);
    body_.init_normal(rng, gain);
    if (mode == InitMode::Identity) {
      tail_.init_zero();
    } else {
      tail_.init_normal(rng, gain);
    }
  }

  template <class F>
  void for_each_layer(const std::string& prefix, F&& f) {
    f(prefix + "head", head_);
    f(prefix + "body", body_);
    f(prefix + "tail", tail_);
  }
  template <class F>
  void for_each_layer(const std::string& prefix, F&& f) const {
    f(prefix + "head", head_);
    f(prefix + "body", body_);
    f(prefix + "tail", tail_);
  }

 private:
  EbConfig cfg_;
  Conv2dLayer<T> head_, body_, tail_;
};

/// Affine coupling block over a detail branch u1 (3C channels) and an
/// image-shaped branch u2 (C channels).
///
/// ThreeEb:     u2' = u2 + E1(u1); s = exp(a*tanh(E2(u2'))); u1' = u1*s + E3(u2')
/// LiteralEq3:  v1 = exp(a*tanh(Ea(u2))); u1' = u1*v1 + v1;
///              v2 = exp(a*tanh(Eb(u1'))); u2' = u2*v2 + v2
/// Every divisor in the inverse lies in [exp(-a), exp(a)].
template <class T>
class InvertibleBlock {
 public:
  InvertibleBlock() = default;
  explicit InvertibleBlock(const ModelConfig& cfg) : mode_(cfg.coupling), alpha_(static_cast<T>(cfg.clamp_alpha)) {
    const std::size_t lo = cfg.channels, hi = 3 * cfg.channels;
    auto eb = [&](std::size_t in, std::size_t out) {
      return EnhancedBlock<T>(EbConfig{cfg.eb_kind, in, cfg.hidden, out, cfg.slope});
    };
    if (mode_ == CouplingMode::ThreeEb) {
      ebs_ = {eb(hi, lo), eb(lo, hi), eb(lo, hi)};
    } else {
      ebs_ = {eb(lo, hi), eb(hi, lo)};
    }
  }

  std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& u1, const Tensor<T>& u2) const {
    check(u1, u2);
    if (mode_ == CouplingMode::ThreeEb) {
      Tensor<T> u2n = add(u2, ebs_[0](u1));
      Tensor<T> u1n = add(mul(u1, scale_of(ebs_[1](u2n))), ebs_[2](u2n));
      return {u1n, u2n};
    }
    Tensor<T> v1 = scale_of(ebs_[0](u2));
    Tensor<T> u1n = add(mul(u1, v1), v1);
    Tensor<T> v2 = scale_of(ebs_[1](u1n));
    Tensor<T> u2n = add(mul(u2, v2), v2);
    return {u1n, u2n};
  }

  std::pair<Tensor<T>, Tensor<T>> inverse(const Tensor<T>& u1n, const Tensor<T>& u2n) const {
    check(u1n, u2n);
    if (mode_ == CouplingMode::ThreeEb) {
      Tensor<T> u1 = div(sub(u1n, ebs_[2](u2n)), scale_of(ebs_[1](u2n)));
      Tensor<T> u2 = sub(u2n, ebs_[0](u1));
      return {u1, u2};
    }
    Tensor<T> v2 = scale_of(ebs_[1](u1n));
    Tensor<T> u2 = div(sub(u2n, v2), v2);
    Tensor<T> v1 = scale_of(ebs_[0](u2));
    Tensor<T> u1 = div(sub(u1n, v1), v1);
    return {u1, u2};
  }

  std::vector<EnhancedBlock<T>>& blocks() { return ebs_; }
  const std::vector<EnhancedBlock<T>>& blocks() const { return ebs_; }

 private:
  Tensor<T> scale_of(const Tensor<T>& e) const { return exp(mul_scalar(tanh(e), alpha_)); }

  void check(const Tensor<T>& u1, const Tensor<T>& u2) const {
    const Shape& a = u1.shape();
    const Shape& b = u2.shape();
    if (a.c != 3 * b.c || a.n != b.n || a.h != b.h || a.w != b.w) {
      throw ShapeError("invertible block: detail branch " + a.str() + " and image branch " + b.str() +
                       " are inconsistent");
    }
  }

  CouplingMode mode_ = CouplingMode::ThreeEb;
  T alpha_ = T(1);
  std::vector<EnhancedBlock<T>> ebs_;
};

/// One x2 stage: long-skip wavelet split followed by a stack of coupling blocks.
template <class T>
class DownscalingModule {
 public:
  DownscalingModule() = default;
  explicit DownscalingModule(const ModelConfig& cfg) : long_skip_(cfg.long_skip) {
    for (std::size_t i = 0; i < cfg.irbs_per_rdm; ++i) irbs_.emplace_back(cfg);
  }

  /// Returns (y, z): the half-size image branch and the detail branch.
  std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& x) const {
    Tensor<T> u1, u2;
    if (long_skip_) {
      std::tie(u2, u1) = residual_decompose(x);
    } else {
      WaveletBands<T> bands = haar_forward(x);
      u2 = mul_scalar(bands.low, T(0.5));
      u1 = bands.high;
    }
    for (const auto& irb : irbs_) std::tie(u1, u2) = irb.forward(u1, u2);
    return {u2, u1};
  }

  Tensor<T> inverse(const Tensor<T>& y, const Tensor<T>& z) const {
    Tensor<T> u1 = z, u2 = y;
    for (auto it = irbs_.rbegin(); it != irbs_.rend(); ++it) std::tie(u1, u2) = it->inverse(u1, u2);
    if (long_skip_) return residual_recompose(u2, u1);
    return haar_inverse(WaveletBands<T>{mul_scalar(u2, T(2)), u1});
  }

  std::vector<InvertibleBlock<T>>& blocks() { return irbs_; }
  const std::vector<InvertibleBlock<T>>& blocks() const { return irbs_; }

 private:
  bool long_skip_ = true;
  std::vector<InvertibleBlock<T>> irbs_;
};

/// Detail latents of every RDM, finest level first.
template <class T>
struct LatentPyramid {
  std::vector<Tensor<T>> levels;

  std::size_t numel() const {
    std::size_t total = 0;
    for (const auto& l : levels) total += l.numel();
    return total;
  }
};

/// Latent shapes for an (batch, C, height, width) input.
inline std::vector<Shape> latent_shapes(const ModelConfig& cfg, std::size_t batch, std::size_t height,
                                        std::size_t width) {
  std::vector<Shape> shapes;
  for (std::size_t k = 1; k <= cfg.num_rdm(); ++k) {
    shapes.push_back(Shape{batch, 3 * cfg.channels, height >> k, width >> k});
  }
  return shapes;
}

/// i.i.d. N(0, sigma^2) latents. The same seed gives the same unit draws for
/// every sigma, so results for different sigmas differ only by scale.
template <class T>
LatentPyramid<T> sample_latents(const ModelConfig& cfg, std::size_t batch, std::size_t height,
                                std::size_t width, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw ShapeError("sample_latents: sigma must be >= 0");
  Rng rng = make_rng(seed, {0x7a});
  LatentPyramid<T> z;
  for (const Shape& s : latent_shapes(cfg, batch, height, width)) {
    Tensor<T> unit = normal_tensor<T>(s, 0.0, 1.0, rng);
    std::vector<T> v(unit.data().begin(), unit.data().end());
    for (auto& e : v) e = static_cast<T>(sigma) * e;
    z.levels.emplace_back(s, std::move(v));
  }
  return z;
}

template <class T>
struct ForwardResult {
  Tensor<T> y;
  LatentPyramid<T> z;
};

/// The full multi-scale invertible rescaling model.
template <class T>
class IrrmModel {
 public:
  IrrmModel() : IrrmModel(ModelConfig{}) {}

  /// Builds the model; identity init when long_skip is set, random otherwise.
  explicit IrrmModel(const ModelConfig& cfg, std::uint64_t seed = 0)
      : IrrmModel(cfg, InitSpec{cfg.long_skip ? InitMode::Identity : InitMode::Random, seed, 0.1}) {}

  IrrmModel(const ModelConfig& cfg, const InitSpec& init) : cfg_(cfg) {
    cfg_.validate();
    for (std::size_t k = 0; k < cfg_.num_rdm(); ++k) rdms_.emplace_back(cfg_);
    Rng rng = make_rng(init.seed, {0x1417});
    for (auto& rdm : rdms_) {
      for (auto& irb : rdm.blocks()) {
        for (auto& eb : irb.blocks()) eb.init(init.mode, rng, init.gain);
      }
    }
    set_trainable(true);
  }

  const ModelConfig& config() const { return cfg_; }

  ForwardResult<T> forward(const Tensor<T>& x) const {
    check_input(x.shape());
    ForwardResult<T> out;
    Tensor<T> cur = x;
    for (const auto& rdm : rdms_) {
      auto [y, z] = rdm.forward(cur);
      out.z.levels.push_back(z);
      cur = y;
    }
    out.y = cur;
    return out;
  }

  Tensor<T> inverse(const Tensor<T>& y, const LatentPyramid<T>& z) const {
    if (z.levels.size() != rdms_.size()) {
      throw ShapeError("latent pyramid has " + std::to_string(z.levels.size()) + " levels, model expects " +
                       std::to_string(rdms_.size()));
    }
    if (y.shape().c != cfg_.channels) {
      throw ShapeError("LR image " + y.shape().str() + " does not have " + std::to_string(cfg_.channels) +
                       " channels");
    }
    const std::size_t s = static_cast<std::size_t>(cfg_.scale);
    const auto expected = latent_shapes(cfg_, y.shape().n, y.shape().h * s, y.shape().w * s);
    for (std::size_t k = 0; k < expected.size(); ++k) {
      if (z.levels[k].shape() != expected[k]) {
        throw ShapeError("latent level " + std::to_string(k + 1) + " has shape " + z.levels[k].shape().str() +
                         ", expected " + expected[k].str());
      }
    }
    Tensor<T> cur = y;
    for (std::size_t k = rdms_.size(); k-- > 0;) cur = rdms_[k].inverse(cur, z.levels[k]);
    return cur;
  }

  /// Every weight and bias, in a stable order with stable names.
  std::vector<NamedTensor<T>> parameters() const {
    std::vector<NamedTensor<T>> out;
    for_each_layer([&](const std::string& name, const Conv2dLayer<T>& layer, std::size_t) {
      out.push_back({name + ".weight", layer.weight});
      out.push_back({name + ".bias", layer.bias});
    });
    return out;
  }

  /// Replaces a parameter's values; the name must exist and shapes must match.
  void set_parameter(const std::string& name, const Tensor<T>& value) {
    bool found = false;
    for_each_layer_mut([&](const std::string& lname, Conv2dLayer<T>& layer) {
      for (auto* slot : {&layer.weight, &layer.bias}) {
        const std::string full = lname + (slot == &layer.weight ? ".weight" : ".bias");
        if (full != name) continue;
        if (slot->shape() != value.shape()) {
          throw ShapeError("parameter " + name + " has shape " + slot->shape().str() + ", got " +
                           value.shape().str());
        }
        *slot = value.detach();
        slot->set_requires_grad(true);
        found = true;
      }
    });
    if (!found) throw DataError("unknown parameter '" + name + "'");
  }

  void set_trainable(bool on) {
    for_each_layer_mut([&](const std::string&, Conv2dLayer<T>& layer) {
      layer.weight.set_requires_grad(on);
      layer.bias.set_requires_grad(on);
    });
  }

  void zero_grad() {
    for_each_layer_mut([&](const std::string&, Conv2dLayer<T>& layer) {
      layer.weight.zero_grad();
      layer.bias.zero_grad();
    });
  }

  std::vector<LayerInfo> describe() const {
    std::vector<LayerInfo> out;
    for_each_layer([&](const std::string& name, const Conv2dLayer<T>& l, std::size_t level) {
      out.push_back({name, l.in_channels(), l.out_channels(), l.kernel(), level,
                     l.weight.numel() + l.bias.numel()});
    });
    return out;
  }

  std::size_t count_params() const {
    std::size_t total = 0;
    for (const auto& p : parameters()) total += p.tensor.numel();
    return total;
  }

  /// Multiply-accumulates of one forward pass on an (1, C, height, width) input.
  double macs(std::size_t height, std::size_t width) const {
    double total = 0.0;
    for (const auto& l : describe()) {
      const double pixels = static_cast<double>(height >> l.level) * static_cast<double>(width >> l.level);
      total += static_cast<double>(l.out_channels * l.in_channels * l.kernel * l.kernel) * pixels;
    }
    return total;
  }

  template <class U>
  IrrmModel<U> cast() const {
    IrrmModel<U> out(cfg_);
    for (const auto& p : parameters()) out.set_parameter(p.name, p.tensor.template cast<U>());
    return out;
  }

 private:
  void check_input(const Shape& s) const {
    const std::size_t scale = static_cast<std::size_t>(cfg_.scale);
    if (s.c != cfg_.channels) {
      throw ShapeError("input " + s.str() + " does not have " + std::to_string(cfg_.channels) + " channels");
    }
    if (s.h % scale != 0 || s.w % scale != 0) {
      throw ShapeError("input " + s.str() + " is not divisible by scale " + std::to_string(scale) + "; pad by " +
                       std::to_string((scale - s.h % scale) % scale) + " rows and " +
                       std::to_string((scale - s.w % scale) % scale) + " columns");
    }
  }

  template <class F>
  void for_each_layer(F&& f) const {
    for (std::size_t r = 0; r < rdms_.size(); ++r) {
      const auto& irbs = rdms_[r].blocks();
      for (std::size_t i = 0; i < irbs.size(); ++i) {
        const auto& ebs = irbs[i].blocks();
        for (std::size_t e = 0; e < ebs.size(); ++e) {
          const std::string prefix =
              "rdm" + std::to_string(r) + ".irb" + std::to_string(i) + ".eb" + std::to_string(e) + ".";
          ebs[e].for_each_layer(prefix, [&](const std::string& n, const Conv2dLayer<T>& l) { f(n, l, r + 1); });
        }
      }
    }
  }

  template <class F>
  void for_each_layer_mut(F&& f) {
    for (std::size_t r = 0; r < rdms_.size(); ++r) {
      auto& irbs = rdms_[r].blocks();
      for (std::size_t i = 0; i < irbs.size(); ++i) {
        auto& ebs = irbs[i].blocks();
        for (std::size_t e = 0; e < ebs.size(); ++e) {
          const std::string prefix =
              "rdm" + std::to_string(r) + ".irb" + std::to_string(i) + ".eb" + std::to_string(e) + ".";
          ebs[e].for_each_layer(prefix, f);
        }
      }
    }
  }

  ModelConfig cfg_;
  std::vector<DownscalingModule<T>> rdms_;
};

}  // namespace irrm
