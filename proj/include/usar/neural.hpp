#pragma once

// Multi-resolution prediction network: a high-resolution extractor and a
// low-resolution extractor (FC + batch norm + ReLU blocks) feeding a
// prediction trunk with a masked-softmax goal head and a sigmoid victim
// head. Forward, exact backward, Adam, training loop and model files.
//
// All arithmetic is double precision with fixed loop orders, so results are
// bitwise reproducible for a given seed.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "usar/features.hpp"
#include "usar/rng.hpp"
#include "usar/world.hpp"

namespace usar {

class ModelError : public Error {
 public:
  using Error::Error;
};

enum class Variant : std::uint8_t { multires, baseline_locations, baseline_dmd_area };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::multires: return "multires";
    case Variant::baseline_locations: return "baseline-locations";
    case Variant::baseline_dmd_area: return "baseline-dmd-area";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  for (Variant v : {Variant::multires, Variant::baseline_locations, Variant::baseline_dmd_area})
    if (to_string(v) == s) return v;
  throw Error("unknown model variant '" + std::string(s) + "'");
}

inline constexpr std::array<Variant, 3> kAllVariants = {Variant::baseline_locations, Variant::baseline_dmd_area,
                                                        Variant::multires};

// Everything needed to rebuild the network shape and the input encoding.
struct Manifest {
  Variant variant = Variant::multires;
  int m = 6;
  int k_max = kMaxGoals;
  int n_areas = 1;
  std::vector<int> hr_widths = {4};
  std::vector<int> lr_widths = {64};
  std::vector<int> trunk_widths = {64};
  double count_scale = 0.1;
  double bn_eps = 1e-5;
  double bn_momentum = 0.9;
  std::uint64_t seed = 0;

  int hr_in() const {
    switch (variant) {
      case Variant::multires: return k_max;
      case Variant::baseline_dmd_area: return k_max + 1;
      case Variant::baseline_locations: return 2 * m;
    }
    return 0;
  }
  int lr_in() const { return variant == Variant::multires ? kLowResPerArea * n_areas : 0; }
  bool uses_lowres() const { return lr_in() > 0; }

  friend bool operator==(const Manifest&, const Manifest&) = default;
};

inline json manifest_to_json(const Manifest& m) {
  return {{"variant", to_string(m.variant)},
          {"m", m.m},
          {"k_max", m.k_max},
          {"n_areas", m.n_areas},
          {"hr_widths", m.hr_widths},
          {"lr_widths", m.lr_widths},
          {"trunk_widths", m.trunk_widths},
          {"activation", "relu"},
          {"normalization", {{"dmd", "divide by m"}, {"count_scale", m.count_scale}, {"status", "one-hot"},
                             {"locations", "divide by map height/width"}}},
          {"bn_eps", m.bn_eps},
          {"bn_momentum", m.bn_momentum},
          {"seed", m.seed}};
}

inline Manifest manifest_from_json(const json& j) {
  Manifest m;
  m.variant = parse_variant(j.at("variant").get<std::string>());
  m.m = j.at("m");
  m.k_max = j.at("k_max");
  m.n_areas = j.at("n_areas");
  m.hr_widths = j.at("hr_widths").get<std::vector<int>>();
  m.lr_widths = j.at("lr_widths").get<std::vector<int>>();
  m.trunk_widths = j.at("trunk_widths").get<std::vector<int>>();
  m.count_scale = j.at("normalization").at("count_scale");
  m.bn_eps = j.at("bn_eps");
  m.bn_momentum = j.at("bn_momentum");
  m.seed = j.at("seed");
  if (m.k_max != kMaxGoals) throw ModelError("model built for " + std::to_string(m.k_max) + " goal slots");
  return m;
}

// Fully connected layer followed by batch normalization (ReLU applied by the caller).
struct DenseBN {
  int in = 0;
  int out = 0;
  std::vector<double> W;  // out x in, row-major
  std::vector<double> b;
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> run_mean;
  std::vector<double> run_var;
  friend bool operator==(const DenseBN&, const DenseBN&) = default;
};

struct Linear {
  int in = 0;
  int out = 0;
  std::vector<double> W;
  std::vector<double> b;
  friend bool operator==(const Linear&, const Linear&) = default;
};

struct ModelParams {
  Manifest manifest;
  std::vector<DenseBN> hr;
  std::vector<DenseBN> lr;
  std::vector<DenseBN> trunk;
  Linear goal;
  Linear victim;
  std::uint64_t revision = 0;  // bumped by every optimizer step

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    return a.manifest == b.manifest && a.hr == b.hr && a.lr == b.lr && a.trunk == b.trunk && a.goal == b.goal &&
           a.victim == b.victim;
  }
};

struct NamedTensor {
  std::string name;
  std::vector<double>* data;
};

// Trainable tensors in declared order.
inline std::vector<NamedTensor> trainable(ModelParams& p) {
  std::vector<NamedTensor> out;
  auto blocks = [&](const char* group, std::vector<DenseBN>& list) {
    for (std::size_t i = 0; i < list.size(); ++i) {
      const std::string base = std::string(group) + "." + std::to_string(i) + ".";
      out.push_back({base + "W", &list[i].W});
      out.push_back({base + "b", &list[i].b});
      out.push_back({base + "gamma", &list[i].gamma});
      out.push_back({base + "beta", &list[i].beta});
    }
  };
  blocks("hr", p.hr);
  blocks("lr", p.lr);
  blocks("trunk", p.trunk);
  out.push_back({"goal.W", &p.goal.W});
  out.push_back({"goal.b", &p.goal.b});
  out.push_back({"victim.W", &p.victim.W});
  out.push_back({"victim.b", &p.victim.b});
  return out;
}

// Every stored tensor (trainable plus batch-norm running statistics), in file order.
inline std::vector<NamedTensor> all_tensors(ModelParams& p) {
  std::vector<NamedTensor> out;
  auto blocks = [&](const char* group, std::vector<DenseBN>& list) {
    for (std::size_t i = 0; i < list.size(); ++i) {
      const std::string base = std::string(group) + "." + std::to_string(i) + ".";
      out.push_back({base + "W", &list[i].W});
      out.push_back({base + "b", &list[i].b});
      out.push_back({base + "gamma", &list[i].gamma});
      out.push_back({base + "beta", &list[i].beta});
      out.push_back({base + "run_mean", &list[i].run_mean});
      out.push_back({base + "run_var", &list[i].run_var});
    }
  };
  blocks("hr", p.hr);
  blocks("lr", p.lr);
  blocks("trunk", p.trunk);
  out.push_back({"goal.W", &p.goal.W});
  out.push_back({"goal.b", &p.goal.b});
  out.push_back({"victim.W", &p.victim.W});
  out.push_back({"victim.b", &p.victim.b});
  return out;
}

inline std::size_t parameter_count(const ModelParams& p) {
  std::size_t n = 0;
  for (auto& t : trainable(const_cast<ModelParams&>(p))) n += t.data->size();
  return n;
}

inline ModelParams zeros_like(const ModelParams& p) {
  ModelParams z = p;
  for (auto& t : all_tensors(z)) std::fill(t.data->begin(), t.data->end(), 0.0);
  return z;
}

namespace detail {

inline DenseBN make_block(int in, int out, Rng& rng) {
  DenseBN blk;
  blk.in = in;
  blk.out = out;
  const double limit = std::sqrt(6.0 / in);
  blk.W.resize(static_cast<std::size_t>(in) * out);
  for (double& w : blk.W) w = rng.uniform(-limit, limit);
  blk.b.assign(out, 0.0);
  blk.gamma.assign(out, 1.0);
  blk.beta.assign(out, 0.0);
  blk.run_mean.assign(out, 0.0);
  blk.run_var.assign(out, 1.0);
  return blk;
}

inline Linear make_linear(int in, int out, Rng& rng) {
  Linear l;
  l.in = in;
  l.out = out;
  const double limit = std::sqrt(6.0 / in);
  l.W.resize(static_cast<std::size_t>(in) * out);
  for (double& w : l.W) w = rng.uniform(-limit, limit);
  l.b.assign(out, 0.0);
  return l;
}

}  // namespace detail

inline ModelParams init_model(const Manifest& manifest) {
  if (manifest.hr_widths.empty() || manifest.trunk_widths.empty())
    throw ModelError("extractor and trunk need at least one block");
  if (manifest.variant == Variant::multires && manifest.lr_widths.empty())
    throw ModelError("multi-resolution model needs a low-resolution block");
  ModelParams p;
  p.manifest = manifest;
  Rng rng(manifest.seed);
  int width = manifest.hr_in();
  for (int w : manifest.hr_widths) {
    p.hr.push_back(detail::make_block(width, w, rng));
    width = w;
  }
  int joined = width;
  if (manifest.uses_lowres()) {
    width = manifest.lr_in();
    for (int w : manifest.lr_widths) {
      p.lr.push_back(detail::make_block(width, w, rng));
      width = w;
    }
    joined += width;
  }
  width = joined;
  for (int w : manifest.trunk_widths) {
    p.trunk.push_back(detail::make_block(width, w, rng));
    width = w;
  }
  p.goal = detail::make_linear(width, manifest.k_max, rng);
  p.victim = detail::make_linear(width, 1, rng);
  return p;
}

// --- Inputs ---

struct Batch {
  int n = 0;
  std::vector<double> hr;  // n x hr_in
  std::vector<double> lr;  // n x lr_in (empty for baselines)
  std::vector<std::uint8_t> mask;  // n x k_max
};

inline void check_frame(const Manifest& m, const FeatureFrame& f) {
  if (f.m != m.m)
    throw ModelError("frame built with m=" + std::to_string(f.m) + " but model expects m=" + std::to_string(m.m));
  if (m.variant == Variant::multires || m.variant == Variant::baseline_dmd_area) {
    if (static_cast<int>(f.lowres.size()) != kLowResPerArea * m.n_areas)
      throw ModelError("frame has " + std::to_string(f.num_areas()) + " areas but model expects " +
                       std::to_string(m.n_areas));
  }
  if (m.variant == Variant::baseline_locations && static_cast<int>(f.locations.size()) != 2 * m.m)
    throw ModelError("frame carries " + std::to_string(f.locations.size()) + " location values, expected " +
                     std::to_string(2 * m.m));
}

inline Batch assemble(const Manifest& m, std::span<const FeatureFrame* const> frames) {
  Batch b;
  b.n = static_cast<int>(frames.size());
  b.hr.reserve(static_cast<std::size_t>(b.n) * m.hr_in());
  b.lr.reserve(static_cast<std::size_t>(b.n) * m.lr_in());
  b.mask.reserve(static_cast<std::size_t>(b.n) * m.k_max);
  for (const FeatureFrame* f : frames) {
    check_frame(m, *f);
    switch (m.variant) {
      case Variant::multires:
        b.hr.insert(b.hr.end(), f->dmd.begin(), f->dmd.end());
        b.lr.insert(b.lr.end(), f->lowres.begin(), f->lowres.end());
        break;
      case Variant::baseline_dmd_area: {
        const auto v = build_baseline_dmd_area(*f);
        b.hr.insert(b.hr.end(), v.begin(), v.end());
        break;
      }
      case Variant::baseline_locations: b.hr.insert(b.hr.end(), f->locations.begin(), f->locations.end()); break;
    }
    b.mask.insert(b.mask.end(), f->mask.begin(), f->mask.end());
  }
  return b;
}

inline Batch assemble(const Manifest& m, std::span<const FeatureFrame> frames) {
  std::vector<const FeatureFrame*> ptrs;
  ptrs.reserve(frames.size());
  for (const auto& f : frames) ptrs.push_back(&f);
  return assemble(m, std::span<const FeatureFrame* const>(ptrs));
}

// Per-sample targets; -1 marks an absent label.
struct Labels {
  std::vector<int> goal;
  std::vector<int> victim;  // 1 yellow, 0 green
};

// Victim labels at or after the horizon carry no loss and no accuracy.
inline Labels make_labels(std::span<const FeatureFrame* const> frames, double victim_horizon = 300.0) {
  Labels l;
  for (const FeatureFrame* f : frames) {
    l.goal.push_back(f->goal_label.value_or(-1));
    l.victim.push_back(f->victim_label && f->t < victim_horizon ? *f->victim_label : -1);
  }
  return l;
}

inline Labels make_labels(std::span<const FeatureFrame> frames, double victim_horizon = 300.0) {
  std::vector<const FeatureFrame*> ptrs;
  for (const auto& f : frames) ptrs.push_back(&f);
  return make_labels(std::span<const FeatureFrame* const>(ptrs), victim_horizon);
}

// --- Forward ---

enum class Mode : std::uint8_t { train, infer };

struct Prediction {
  std::array<double, kMaxGoals> goal_probs{};
  double p_yellow = 0.5;
};

struct BlockCache {
  std::vector<double> x;      // input, n x in
  std::vector<double> xhat;   // normalized pre-activation, n x out
  std::vector<double> y;      // after affine batch norm, n x out
  std::vector<double> out;    // after ReLU
  std::vector<double> mean;   // batch statistics (train mode)
  std::vector<double> var;
  std::vector<double> inv_std;
};

struct ForwardCache {
  Mode mode = Mode::train;
  int n = 0;
  std::uint64_t revision = 0;
  const ModelParams* params = nullptr;
  std::vector<BlockCache> hr, lr, trunk;
  std::vector<double> h;            // trunk output, n x width
  std::vector<double> goal_logits;  // n x k_max, -inf on padded slots
  std::vector<double> goal_probs;
  std::vector<double> victim_logit;
  std::vector<double> p_yellow;
  std::vector<std::uint8_t> mask;
};

namespace detail {

inline void block_forward(const DenseBN& blk, std::span<const double> x, int n, Mode mode, double eps,
                          BlockCache& c) {
  const int in = blk.in, out = blk.out;
  c.x.assign(x.begin(), x.end());
  std::vector<double> z(static_cast<std::size_t>(n) * out);
  for (int i = 0; i < n; ++i) {
    const double* xi = &x[static_cast<std::size_t>(i) * in];
    for (int o = 0; o < out; ++o) {
      const double* wo = &blk.W[static_cast<std::size_t>(o) * in];
      double s = blk.b[o];
      for (int j = 0; j < in; ++j) s += wo[j] * xi[j];
      z[static_cast<std::size_t>(i) * out + o] = s;
    }
  }
  c.mean.assign(out, 0.0);
  c.var.assign(out, 0.0);
  c.inv_std.assign(out, 0.0);
  if (mode == Mode::train) {
    for (int i = 0; i < n; ++i)
      for (int o = 0; o < out; ++o) c.mean[o] += z[static_cast<std::size_t>(i) * out + o];
    for (int o = 0; o < out; ++o) c.mean[o] /= n;
    for (int i = 0; i < n; ++i)
      for (int o = 0; o < out; ++o) {
        const double d = z[static_cast<std::size_t>(i) * out + o] - c.mean[o];
        c.var[o] += d * d;
      }
    for (int o = 0; o < out; ++o) c.var[o] /= n;
  } else {
    c.mean = blk.run_mean;
    c.var = blk.run_var;
  }
  for (int o = 0; o < out; ++o) c.inv_std[o] = 1.0 / std::sqrt(c.var[o] + eps);
  c.xhat.resize(z.size());
  c.y.resize(z.size());
  c.out.resize(z.size());
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < out; ++o) {
      const std::size_t k = static_cast<std::size_t>(i) * out + o;
      c.xhat[k] = (z[k] - c.mean[o]) * c.inv_std[o];
      c.y[k] = blk.gamma[o] * c.xhat[k] + blk.beta[o];
      c.out[k] = c.y[k] > 0.0 ? c.y[k] : 0.0;
    }
}

// Returns d(loss)/d(input); accumulates parameter gradients into g.
inline std::vector<double> block_backward(const DenseBN& blk, const BlockCache& c, std::span<const double> d_out, int n,
                                          DenseBN& g) {
  const int in = blk.in, out = blk.out;
  std::vector<double> dy(d_out.begin(), d_out.end());
  for (std::size_t k = 0; k < dy.size(); ++k)
    if (!(c.y[k] > 0.0)) dy[k] = 0.0;
  std::vector<double> sum_dxhat(out, 0.0), sum_dxhat_xhat(out, 0.0);
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < out; ++o) {
      const std::size_t k = static_cast<std::size_t>(i) * out + o;
      g.gamma[o] += dy[k] * c.xhat[k];
      g.beta[o] += dy[k];
      const double dxhat = dy[k] * blk.gamma[o];
      sum_dxhat[o] += dxhat;
      sum_dxhat_xhat[o] += dxhat * c.xhat[k];
    }
  std::vector<double> dz(dy.size());
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < out; ++o) {
      const std::size_t k = static_cast<std::size_t>(i) * out + o;
      const double dxhat = dy[k] * blk.gamma[o];
      dz[k] = c.inv_std[o] / n * (n * dxhat - sum_dxhat[o] - c.xhat[k] * sum_dxhat_xhat[o]);
    }
  std::vector<double> dx(static_cast<std::size_t>(n) * in, 0.0);
  for (int i = 0; i < n; ++i) {
    const double* xi = &c.x[static_cast<std::size_t>(i) * in];
    double* dxi = &dx[static_cast<std::size_t>(i) * in];
    for (int o = 0; o < out; ++o) {
      const double d = dz[static_cast<std::size_t>(i) * out + o];
      g.b[o] += d;
      double* gwo = &g.W[static_cast<std::size_t>(o) * in];
      const double* wo = &blk.W[static_cast<std::size_t>(o) * in];
      for (int j = 0; j < in; ++j) {
        gwo[j] += d * xi[j];
        dxi[j] += d * wo[j];
      }
    }
  }
  return dx;
}

inline std::vector<double> linear_forward(const Linear& l, std::span<const double> x, int n) {
  std::vector<double> y(static_cast<std::size_t>(n) * l.out);
  for (int i = 0; i < n; ++i) {
    const double* xi = &x[static_cast<std::size_t>(i) * l.in];
    for (int o = 0; o < l.out; ++o) {
      const double* wo = &l.W[static_cast<std::size_t>(o) * l.in];
      double s = l.b[o];
      for (int j = 0; j < l.in; ++j) s += wo[j] * xi[j];
      y[static_cast<std::size_t>(i) * l.out + o] = s;
    }
  }
  return y;
}

inline void linear_backward(const Linear& l, std::span<const double> x, std::span<const double> dy, int n, Linear& g,
                            std::vector<double>& dx) {
  for (int i = 0; i < n; ++i) {
    const double* xi = &x[static_cast<std::size_t>(i) * l.in];
    double* dxi = &dx[static_cast<std::size_t>(i) * l.in];
    for (int o = 0; o < l.out; ++o) {
      const double d = dy[static_cast<std::size_t>(i) * l.out + o];
      if (d == 0.0) continue;
      g.b[o] += d;
      double* gwo = &g.W[static_cast<std::size_t>(o) * l.in];
      const double* wo = &l.W[static_cast<std::size_t>(o) * l.in];
      for (int j = 0; j < l.in; ++j) {
        gwo[j] += d * xi[j];
        dxi[j] += d * wo[j];
      }
    }
  }
}

inline std::vector<double> run_blocks(const std::vector<DenseBN>& blocks, std::vector<double> x, int n, Mode mode,
                                      double eps, std::vector<BlockCache>& caches) {
  caches.resize(blocks.size());
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    block_forward(blocks[i], x, n, mode, eps, caches[i]);
    x = caches[i].out;
  }
  return x;
}

}  // namespace detail

// Softmax over active slots only; inactive slots get probability exactly 0.
inline void masked_softmax(std::span<const double> logits, std::span<const std::uint8_t> mask, std::span<double> out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < logits.size(); ++k)
    if (mask[k]) mx = std::max(mx, logits[k]);
  double sum = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[k] = mask[k] ? std::exp(logits[k] - mx) : 0.0;
    sum += out[k];
  }
  if (sum > 0.0)
    for (std::size_t k = 0; k < logits.size(); ++k) out[k] /= sum;
}

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline ForwardCache forward(const ModelParams& p, const Batch& batch, Mode mode) {
  const Manifest& m = p.manifest;
  if (batch.n <= 0) throw ModelError("forward needs a nonempty batch");
  if (mode == Mode::train && batch.n < 2) throw ModelError("train-mode batch normalization needs at least 2 samples");
  if (batch.hr.size() != static_cast<std::size_t>(batch.n) * m.hr_in())
    throw ModelError("high-resolution input width does not match the manifest");
  if (batch.lr.size() != static_cast<std::size_t>(batch.n) * m.lr_in())
    throw ModelError("low-resolution input width does not match the manifest");
  const int n = batch.n;
  ForwardCache c;
  c.mode = mode;
  c.n = n;
  c.revision = p.revision;
  c.params = &p;
  c.mask = batch.mask;

  std::vector<double> e_hr = detail::run_blocks(p.hr, batch.hr, n, mode, m.bn_eps, c.hr);
  std::vector<double> joined;
  if (m.uses_lowres()) {
    std::vector<double> e_lr = detail::run_blocks(p.lr, batch.lr, n, mode, m.bn_eps, c.lr);
    const int wh = p.hr.back().out, wl = p.lr.back().out;
    joined.resize(static_cast<std::size_t>(n) * (wh + wl));
    for (int i = 0; i < n; ++i) {
      std::copy_n(&e_hr[static_cast<std::size_t>(i) * wh], wh, &joined[static_cast<std::size_t>(i) * (wh + wl)]);
      std::copy_n(&e_lr[static_cast<std::size_t>(i) * wl], wl, &joined[static_cast<std::size_t>(i) * (wh + wl) + wh]);
    }
  } else {
    joined = std::move(e_hr);
  }
  c.h = detail::run_blocks(p.trunk, std::move(joined), n, mode, m.bn_eps, c.trunk);

  const int K = m.k_max;
  c.goal_logits = detail::linear_forward(p.goal, c.h, n);
  c.goal_probs.assign(c.goal_logits.size(), 0.0);
  for (int i = 0; i < n; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * K;
    for (int k = 0; k < K; ++k)
      if (!batch.mask[off + k]) c.goal_logits[off + k] = -std::numeric_limits<double>::infinity();
    masked_softmax(std::span(c.goal_logits).subspan(off, K), std::span(batch.mask).subspan(off, K),
                   std::span(c.goal_probs).subspan(off, K));
  }
  c.victim_logit = detail::linear_forward(p.victim, c.h, n);
  c.p_yellow.resize(n);
  for (int i = 0; i < n; ++i) c.p_yellow[i] = sigmoid(c.victim_logit[i]);
  return c;
}

inline std::vector<Prediction> predictions(const ForwardCache& c) {
  std::vector<Prediction> out(c.n);
  const std::size_t K = out.empty() ? 0 : out[0].goal_probs.size();
  for (int i = 0; i < c.n; ++i) {
    std::copy_n(&c.goal_probs[i * K], K, out[i].goal_probs.begin());
    out[i].p_yellow = c.p_yellow[i];
  }
  return out;
}

inline std::vector<Prediction> predict(const ModelParams& p, std::span<const FeatureFrame> frames) {
  if (frames.empty()) return {};
  return predictions(forward(p, assemble(p.manifest, frames), Mode::infer));
}

inline Prediction predict_one(const ModelParams& p, const FeatureFrame& frame) {
  return predict(p, std::span(&frame, 1)).front();
}

// Running statistics: r <- momentum * r + (1 - momentum) * batch statistic
// (biased batch variance, so inference matches training on a fixed batch).
inline void update_running_stats(ModelParams& p, const ForwardCache& c) {
  if (c.mode != Mode::train) return;
  const double mom = p.manifest.bn_momentum;
  auto upd = [&](std::vector<DenseBN>& blocks, const std::vector<BlockCache>& caches) {
    for (std::size_t i = 0; i < blocks.size(); ++i)
      for (int o = 0; o < blocks[i].out; ++o) {
        blocks[i].run_mean[o] = mom * blocks[i].run_mean[o] + (1.0 - mom) * caches[i].mean[o];
        blocks[i].run_var[o] = mom * blocks[i].run_var[o] + (1.0 - mom) * caches[i].var[o];
      }
  };
  upd(p.hr, c.hr);
  upd(p.lr, c.lr);
  upd(p.trunk, c.trunk);
}

// --- Loss ---

struct LossValue {
  double total = 0.0;
  double goal = 0.0;
  double victim = 0.0;
  int goal_count = 0;
  int victim_count = 0;
};

inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

// Mean goal cross-entropy plus weight * mean victim binary cross-entropy.
inline LossValue loss(const ForwardCache& c, const Labels& labels, double victim_weight = 0.3) {
  if (labels.goal.size() != static_cast<std::size_t>(c.n) || labels.victim.size() != static_cast<std::size_t>(c.n))
    throw ModelError("label count does not match batch");
  const std::size_t K = c.goal_logits.size() / c.n;
  LossValue L;
  for (int i = 0; i < c.n; ++i) {
    const int g = labels.goal[i];
    if (g >= 0) {
      const std::size_t off = i * K;
      if (!c.mask[off + g]) throw ModelError("goal label points at an inactive slot");
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < K; ++k)
        if (c.mask[off + k]) mx = std::max(mx, c.goal_logits[off + k]);
      double sum = 0.0;
      for (std::size_t k = 0; k < K; ++k)
        if (c.mask[off + k]) sum += std::exp(c.goal_logits[off + k] - mx);
      L.goal += mx + std::log(sum) - c.goal_logits[off + g];
      ++L.goal_count;
    }
    const int v = labels.victim[i];
    if (v >= 0) {
      const double z = c.victim_logit[i];
      L.victim += softplus(z) - v * z;
      ++L.victim_count;
    }
  }
  if (L.goal_count == 0 && L.victim_count == 0) throw ModelError("batch has no labeled samples");
  if (L.goal_count > 0) L.goal /= L.goal_count;
  if (L.victim_count > 0) L.victim /= L.victim_count;
  L.total = L.goal + victim_weight * L.victim;
  return L;
}

// --- Backward ---

inline ModelParams backward(const ModelParams& p, const ForwardCache& c, const Labels& labels,
                            double victim_weight = 0.3) {
  if (c.mode != Mode::train) throw ModelError("backward requires a train-mode forward cache");
  if (c.params != &p || c.revision != p.revision) throw ModelError("stale forward cache");
  const int n = c.n;
  const int K = p.manifest.k_max;
  int goal_count = 0, victim_count = 0;
  for (int i = 0; i < n; ++i) {
    goal_count += labels.goal[i] >= 0;
    victim_count += labels.victim[i] >= 0;
  }
  if (goal_count == 0 && victim_count == 0) throw ModelError("batch has no labeled samples");

  ModelParams g = zeros_like(p);
  std::vector<double> d_goal(static_cast<std::size_t>(n) * K, 0.0);
  std::vector<double> d_victim(n, 0.0);
  for (int i = 0; i < n; ++i) {
    if (labels.goal[i] >= 0) {
      for (int k = 0; k < K; ++k) {
        const std::size_t idx = static_cast<std::size_t>(i) * K + k;
        d_goal[idx] = (c.goal_probs[idx] - (k == labels.goal[i] ? 1.0 : 0.0)) / goal_count;
      }
    }
    if (labels.victim[i] >= 0) d_victim[i] = victim_weight * (c.p_yellow[i] - labels.victim[i]) / victim_count;
  }
  const int width = p.trunk.back().out;
  std::vector<double> dh(static_cast<std::size_t>(n) * width, 0.0);
  detail::linear_backward(p.goal, c.h, d_goal, n, g.goal, dh);
  detail::linear_backward(p.victim, c.h, d_victim, n, g.victim, dh);

  std::vector<double> d = std::move(dh);
  for (std::size_t b = p.trunk.size(); b-- > 0;) d = detail::block_backward(p.trunk[b], c.trunk[b], d, n, g.trunk[b]);

  const int wh = p.hr.back().out;
  std::vector<double> d_hr, d_lr;
  if (p.manifest.uses_lowres()) {
    const int wl = p.lr.back().out;
    d_hr.resize(static_cast<std::size_t>(n) * wh);
    d_lr.resize(static_cast<std::size_t>(n) * wl);
    for (int i = 0; i < n; ++i) {
      std::copy_n(&d[static_cast<std::size_t>(i) * (wh + wl)], wh, &d_hr[static_cast<std::size_t>(i) * wh]);
      std::copy_n(&d[static_cast<std::size_t>(i) * (wh + wl) + wh], wl, &d_lr[static_cast<std::size_t>(i) * wl]);
    }
    for (std::size_t b = p.lr.size(); b-- > 0;) d_lr = detail::block_backward(p.lr[b], c.lr[b], d_lr, n, g.lr[b]);
  } else {
    d_hr = std::move(d);
  }
  for (std::size_t b = p.hr.size(); b-- > 0;) d_hr = detail::block_backward(p.hr[b], c.hr[b], d_hr, n, g.hr[b]);
  return g;
}

// --- Adam ---

struct AdamState {
  std::uint64_t step = 0;
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<std::vector<double>> m1;
  std::vector<std::vector<double>> m2;
};

inline void adam_step(ModelParams& p, ModelParams& grads, AdamState& s) {
  auto params = trainable(p);
  auto gs = trainable(grads);
  if (params.size() != gs.size()) throw ModelError("gradient store does not match parameters");
  if (s.m1.empty()) {
    for (auto& t : params) {
      s.m1.emplace_back(t.data->size(), 0.0);
      s.m2.emplace_back(t.data->size(), 0.0);
    }
  }
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (params[t].data->size() != gs[t].data->size() || s.m1[t].size() != gs[t].data->size())
      throw ModelError("shape mismatch in tensor " + params[t].name);
    for (std::size_t i = 0; i < gs[t].data->size(); ++i)
      if (!std::isfinite((*gs[t].data)[i]))
        throw ModelError("non-finite gradient in " + gs[t].name + "[" + std::to_string(i) + "] at step " +
                         std::to_string(s.step + 1));
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& w = *params[t].data;
    const auto& gv = *gs[t].data;
    auto& m1 = s.m1[t];
    auto& m2 = s.m2[t];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m1[i] = s.beta1 * m1[i] + (1.0 - s.beta1) * gv[i];
      m2[i] = s.beta2 * m2[i] + (1.0 - s.beta2) * gv[i] * gv[i];
      const double mhat = m1[i] / c1;
      const double vhat = m2[i] / c2;
      w[i] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
    }
  }
  ++p.revision;
}

// --- Training ---

struct TrainConfig {
  int epochs = 100;
  int batch_size = 16;
  double lr = 0.001;
  double victim_weight = 0.3;
  double victim_horizon = 300.0;
  std::uint64_t seed = 0;
  int early_stop_patience = 0;  // 0 disables; needs validation frames
};

struct EpochStats {
  int epoch = 0;
  double total = 0.0;
  double goal = 0.0;
  double victim = 0.0;
  double goal_acc = 0.0;
  double vic_acc = 0.0;
  std::optional<double> val_total;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochStats> history;
};

// Index of the most probable active slot, lowest index on ties; -1 if none.
inline int argmax_slot(std::span<const double> probs, std::span<const std::uint8_t> mask) {
  int best = -1;
  for (std::size_t k = 0; k < probs.size(); ++k)
    if (mask[k] && (best < 0 || probs[k] > probs[best])) best = static_cast<int>(k);
  return best;
}

inline bool contributes(const FeatureFrame& f, double horizon) {
  return f.goal_label.has_value() || (f.victim_label.has_value() && f.t < horizon);
}

inline double evaluate_loss(const ModelParams& p, std::span<const FeatureFrame* const> frames, const TrainConfig& cfg) {
  double sum = 0.0;
  int batches = 0;
  for (std::size_t s = 0; s < frames.size(); s += 256) {
    auto chunk = frames.subspan(s, std::min<std::size_t>(256, frames.size() - s));
    const Labels labels = make_labels(chunk, cfg.victim_horizon);
    const auto c = forward(p, assemble(p.manifest, chunk), Mode::infer);
    sum += loss(c, labels, cfg.victim_weight).total;
    ++batches;
  }
  return batches ? sum / batches : 0.0;
}

inline TrainResult train(std::span<const FeatureFrame> corpus, const Manifest& manifest, const TrainConfig& cfg,
                         std::span<const FeatureFrame> validation = {}) {
  std::vector<const FeatureFrame*> pool;
  for (const FeatureFrame& f : corpus) {
    check_frame(manifest, f);
    if (contributes(f, cfg.victim_horizon)) pool.push_back(&f);
  }
  if (pool.size() < 2) throw ModelError("training corpus has fewer than two labeled samples");
  std::vector<const FeatureFrame*> val;
  for (const FeatureFrame& f : validation)
    if (contributes(f, cfg.victim_horizon)) val.push_back(&f);

  TrainResult result;
  Manifest mf = manifest;
  mf.seed = cfg.seed;
  result.params = init_model(mf);
  ModelParams& p = result.params;
  AdamState adam;
  adam.lr = cfg.lr;
  Rng shuffle_rng(Rng::mix(cfg.seed, 0x5EED));

  const int K = mf.k_max;
  double best_val = std::numeric_limits<double>::infinity();
  ModelParams best_params;
  int since_best = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(std::span(pool));
    EpochStats st;
    st.epoch = epoch;
    int batches = 0, goal_hits = 0, goal_n = 0, vic_hits = 0, vic_n = 0;
    for (std::size_t s = 0; s < pool.size(); s += cfg.batch_size) {
      const std::size_t len = std::min<std::size_t>(cfg.batch_size, pool.size() - s);
      if (len < 2) break;  // batch statistics need two samples
      auto chunk = std::span<const FeatureFrame* const>(pool).subspan(s, len);
      const Labels labels = make_labels(chunk, cfg.victim_horizon);
      if (std::all_of(labels.goal.begin(), labels.goal.end(), [](int g) { return g < 0; }) &&
          std::all_of(labels.victim.begin(), labels.victim.end(), [](int v) { return v < 0; }))
        continue;
      const Batch batch = assemble(mf, chunk);
      const ForwardCache c = forward(p, batch, Mode::train);
      const LossValue L = loss(c, labels, cfg.victim_weight);
      ModelParams g = backward(p, c, labels, cfg.victim_weight);
      update_running_stats(p, c);
      adam_step(p, g, adam);
      st.total += L.total;
      st.goal += L.goal;
      st.victim += L.victim;
      ++batches;
      for (int i = 0; i < c.n; ++i) {
        if (labels.goal[i] >= 0) {
          const auto off = static_cast<std::size_t>(i) * K;
          goal_hits += argmax_slot(std::span(c.goal_probs).subspan(off, K), std::span(c.mask).subspan(off, K)) ==
                       labels.goal[i];
          ++goal_n;
        }
        if (labels.victim[i] >= 0) {
          vic_hits += (c.p_yellow[i] > 0.5) == (labels.victim[i] == 1);
          ++vic_n;
        }
      }
    }
    if (batches > 0) {
      st.total /= batches;
      st.goal /= batches;
      st.victim /= batches;
    }
    st.goal_acc = goal_n ? static_cast<double>(goal_hits) / goal_n : 0.0;
    st.vic_acc = vic_n ? static_cast<double>(vic_hits) / vic_n : 0.0;
    if (!val.empty()) st.val_total = evaluate_loss(p, val, cfg);
    result.history.push_back(st);

    if (cfg.early_stop_patience > 0 && st.val_total) {
      if (*st.val_total < best_val) {
        best_val = *st.val_total;
        best_params = p;
        since_best = 0;
      } else if (++since_best >= cfg.early_stop_patience) {
        p = best_params;
        break;
      }
    }
  }
  return result;
}

inline void write_history_csv(std::ostream& out, const std::vector<EpochStats>& history) {
  out << "epoch,L_total,L_gp,L_vp,goal_acc,vic_acc\n";
  char buf[256];
  for (const EpochStats& e : history) {
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g,%.6f,%.6f\n", e.epoch, e.total, e.goal, e.victim, e.goal_acc,
                  e.vic_acc);
    out << buf;
  }
}

// --- Model file ---
//
// Layout: 8-byte magic, u32 version, u64 manifest length, manifest JSON,
// u32 tensor count, then per tensor a u64 element count followed by
// little-endian IEEE-754 doubles, in all_tensors() order.

inline constexpr char kModelMagic[8] = {'U', 'S', 'A', 'R', 'M', 'D', 'L', '\0'};
inline constexpr std::uint32_t kModelVersion = 1;

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 8);
}

inline void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 4);
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw ModelError("model file is truncated");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw ModelError("model file is truncated");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace detail

inline void write_model(std::ostream& out, const ModelParams& params) {
  ModelParams& p = const_cast<ModelParams&>(params);
  out.write(kModelMagic, sizeof kModelMagic);
  detail::put_u32(out, kModelVersion);
  const std::string manifest = manifest_to_json(p.manifest).dump();
  detail::put_u64(out, manifest.size());
  out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  const auto tensors = all_tensors(p);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    detail::put_u64(out, t.data->size());
    for (double v : *t.data) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
}

inline ModelParams read_model(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8)) throw ModelError("model file is truncated");
  if (std::memcmp(magic, kModelMagic, 8) != 0) throw ModelError("not a model file (bad magic)");
  const std::uint32_t version = detail::get_u32(in);
  if (version != kModelVersion) throw ModelError("unsupported model version " + std::to_string(version));
  const std::uint64_t len = detail::get_u64(in);
  if (len > (1u << 20)) throw ModelError("model manifest is implausibly large");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw ModelError("model file is truncated");
  Manifest manifest;
  try {
    manifest = manifest_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw ModelError(std::string("bad model manifest: ") + e.what());
  }
  ModelParams p = init_model(manifest);
  auto tensors = all_tensors(p);
  const std::uint32_t count = detail::get_u32(in);
  if (count != tensors.size())
    throw ModelError("model file has " + std::to_string(count) + " tensors, manifest implies " +
                     std::to_string(tensors.size()));
  for (auto& t : tensors) {
    const std::uint64_t n = detail::get_u64(in);
    if (n != t.data->size())
      throw ModelError("tensor " + t.name + " has " + std::to_string(n) + " values, expected " +
                       std::to_string(t.data->size()));
    for (double& v : *t.data) v = std::bit_cast<double>(detail::get_u64(in));
  }
  return p;
}

inline void save_model(const std::filesystem::path& path, const ModelParams& p) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ModelError("cannot write model " + path.string());
  write_model(out, p);
  if (!out) throw ModelError("failed writing model " + path.string());
}

inline ModelParams load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelError("cannot open model " + path.string());
  return read_model(in);
}

}  // namespace usar
