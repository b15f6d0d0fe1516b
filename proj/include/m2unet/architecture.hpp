#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "m2unet/autograd.hpp"
#include "m2unet/params.hpp"
#include "m2unet/rng.hpp"

namespace m2unet {

enum class LayerKind { conv, dwisesep, bottleneck, resbottleneck, upconcat, sigmoid };
enum class Activation { relu6, relu };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::dwisesep: return "dwisesep";
    case LayerKind::bottleneck: return "bottleneck";
    case LayerKind::resbottleneck: return "resbottleneck";
    case LayerKind::upconcat: return "upconcat";
    case LayerKind::sigmoid: return "sigmoid";
  }
  return "?";
}

inline constexpr double kDecoderContraction = 0.15;
inline constexpr double kEncoderExpansion = 6.0;
inline constexpr std::uint64_t kCanonicalParamCount = 549'748;

/// Hidden width of a bottleneck: t * c_in rounded half-up, at least 1.
inline std::size_t hidden_width(double t, std::size_t c_in) {
  if (!(t > 0) || c_in == 0) throw ConfigError("hidden_width: need t > 0 and c_in >= 1");
  const auto h = static_cast<std::size_t>(std::floor(t * static_cast<double>(c_in) + 0.5));
  return h < 1 ? 1 : h;
}

/// 1x1 expand -> 3x3 depthwise (stride s) -> 1x1 linear projection, BN after
/// each convolution, optional identity shortcut.
struct BottleneckSpec {
  double t = 6.0;
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  std::size_t stride = 1;
  bool residual = false;
  Activation act = Activation::relu6;

  std::size_t hidden() const { return hidden_width(t, c_in); }

  void validate() const {
    if (stride != 1 && stride != 2) throw ConfigError("bottleneck: stride must be 1 or 2");
    if (residual && (stride != 1 || c_in != c_out)) {
      throw ConfigError("bottleneck: residual requires stride 1 and c_in == c_out");
    }
    (void)hidden();
  }

  /// Closed-form trainable parameter count (no biases; BN contributes gamma and beta).
  std::uint64_t param_count() const {
    const std::uint64_t h = hidden();
    return (c_in * h + 2 * h) + (9 * h + 2 * h) + (h * c_out + 2 * c_out);
  }
};

/// One row of the layer table: operator applied n times, producing c channels.
struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  double t = 1.0;
  std::size_t c = 0;
  std::size_t n = 1;
  std::size_t s = 1;
  /// Row whose output feeds an upconcat; -1 is the input image. Resolved
  /// automatically when unset.
  std::optional<int> skip_source{};
  Activation act = Activation::relu6;
};

/// The canonical 19-row M2U-Net layer table.
inline std::vector<LayerSpec> m2unet_layers(double t_decoder = kDecoderContraction) {
  using K = LayerKind;
  const double te = kEncoderExpansion;
  return {
      {K::conv, 1, 32, 1, 2},            {K::dwisesep, 1, 16, 1, 1},        {K::bottleneck, te, 24, 1, 2},
      {K::resbottleneck, te, 24, 1, 1},  {K::bottleneck, te, 32, 1, 2},     {K::resbottleneck, te, 32, 2, 1},
      {K::bottleneck, te, 64, 1, 2},     {K::resbottleneck, te, 64, 3, 1},  {K::bottleneck, te, 96, 1, 1},
      {K::resbottleneck, te, 96, 2, 1},  {K::upconcat, 1, 128, 1, 1},       {K::bottleneck, t_decoder, 64, 1, 1},
      {K::upconcat, 1, 88, 1, 1},        {K::bottleneck, t_decoder, 44, 1, 1}, {K::upconcat, 1, 60, 1, 1},
      {K::bottleneck, t_decoder, 30, 1, 1}, {K::upconcat, 1, 33, 1, 1},     {K::bottleneck, t_decoder, 1, 1, 1},
      {K::sigmoid, 1, 1, 1, 1},
  };
}

/// Two-block miniature with the same block types, used by fixtures and the
/// end-to-end gradient check.
inline std::vector<LayerSpec> mini_layers() {
  using K = LayerKind;
  return {
      {K::conv, 1, 8, 1, 2},
      {K::resbottleneck, kEncoderExpansion, 8, 1, 1},
      {K::upconcat, 1, 11, 1, 1},
      {K::bottleneck, kDecoderContraction, 1, 1, 1},
      {K::sigmoid, 1, 1, 1, 1},
  };
}

/// Resolved shapes and costs of one row at a given input resolution.
struct RowInfo {
  LayerSpec spec;
  Shape in;
  Shape out;
  int skip = -2;  // resolved skip source for upconcat rows
  std::vector<std::size_t> hidden;  // per repeat, bottleneck rows only
  CostTally cost;
};

template <typename T>
struct ModelGraph {
  std::vector<LayerSpec> layers;
  std::size_t in_channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  double t_decoder = kDecoderContraction;
  T bn_eps = T(1e-5);
  T bn_momentum = T(0.1);
  ParameterStore<T> params;

  /// Spatial sizes must be multiples of this.
  std::size_t divisor() const {
    std::size_t d = 1;
    for (const auto& l : layers) {
      if ((l.kind != LayerKind::upconcat && l.kind != LayerKind::sigmoid) && l.s == 2) d *= 2;
    }
    return d;
  }

  template <typename U>
  ModelGraph<U> cast() const {
    ModelGraph<U> g;
    g.layers = layers;
    g.in_channels = in_channels;
    g.height = height;
    g.width = width;
    g.t_decoder = t_decoder;
    g.bn_eps = static_cast<U>(bn_eps);
    g.bn_momentum = static_cast<U>(bn_momentum);
    g.params = params.template cast<U>();
    return g;
  }
};

namespace detail {

inline std::string pname(std::size_t row, std::size_t rep, const char* part) {
  return "layers." + std::to_string(row) + "." + std::to_string(rep) + "." + part;
}

inline CostTally conv_cost(const Shape& in, std::size_t c_out, std::size_t k, std::size_t stride, std::size_t groups) {
  const std::size_t pad = k / 2;
  const std::size_t ho = conv_out_extent(in.h, k, stride, pad), wo = conv_out_extent(in.w, k, stride, pad);
  const std::uint64_t cin_pg = in.c / groups;
  return {c_out * ho * wo * k * k * cin_pg, c_out * cin_pg * k * k};
}

}  // namespace detail

template <typename T>
struct BottleneckWeights {
  Tensor<T> expand;   // (hidden, c_in, 1, 1)
  Tensor<T> dw;       // (hidden, 1, 3, 3)
  Tensor<T> project;  // (c_out, hidden, 1, 1)
  BatchNormParams<T> expand_bn, dw_bn, project_bn;

  static BottleneckWeights zeros(const BottleneckSpec& s) {
    const std::size_t h = s.hidden();
    return {Tensor<T>({h, s.c_in, 1, 1}),        Tensor<T>({h, 1, 3, 3}),
            Tensor<T>({s.c_out, h, 1, 1}),       BatchNormParams<T>::identity(h),
            BatchNormParams<T>::identity(h),     BatchNormParams<T>::identity(s.c_out)};
  }
};

/// Inference-mode bottleneck block.
template <typename T>
Tensor<T> bottleneck_forward(const Tensor<T>& x, const BottleneckSpec& s, const BottleneckWeights<T>& w,
                             CostTally* tally = nullptr) {
  s.validate();
  if (x.c() != s.c_in) {
    throw InputError("bottleneck: expected " + std::to_string(s.c_in) + " channels, got " + std::to_string(x.c()));
  }
  const std::size_t h = s.hidden();
  if (w.expand.shape() != Shape{h, s.c_in, 1, 1} || w.dw.shape() != Shape{h, 1, 3, 3} ||
      w.project.shape() != Shape{s.c_out, h, 1, 1}) {
    throw InputError("bottleneck: weight shapes do not match spec");
  }
  auto act = [&](const Tensor<T>& v) { return s.act == Activation::relu6 ? relu6(v) : relu(v); };
  auto y = act(batchnorm(conv2d(x, w.expand, ConvGeometry{}, tally), w.expand_bn, BnMode::infer, nullptr, tally));
  y = act(batchnorm(conv2d(y, w.dw, ConvGeometry{h, s.stride, 1}, tally), w.dw_bn, BnMode::infer, nullptr, tally));
  y = batchnorm(conv2d(y, w.project, ConvGeometry{}, tally), w.project_bn, BnMode::infer, nullptr, tally);
  return s.residual ? add_residual(y, x) : y;
}

/// Decoder join: upsample x by two and append the skip channels.
template <typename T>
Tensor<T> upconcat(const Tensor<T>& x, const Tensor<T>& skip) {
  if (skip.h() != 2 * x.h() || skip.w() != 2 * x.w() || skip.n() != x.n()) {
    throw InputError("upconcat: skip " + skip.shape().str() + " is not twice the size of " + x.shape().str());
  }
  return concat_channels(bilinear_upsample_x2(x), skip);
}

/// Propagates shapes through the layer table, resolving skip sources, channel
/// counts and costs. Throws ConfigError on any inconsistency.
inline std::vector<RowInfo> resolve_rows(const std::vector<LayerSpec>& layers, std::size_t in_channels,
                                         std::size_t h, std::size_t w) {
  std::vector<RowInfo> rows;
  Shape cur{1, in_channels, h, w};
  // (row index, shape) of every map produced so far; -1 is the input image.
  std::vector<std::pair<int, Shape>> produced{{-1, cur}};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    RowInfo r;
    r.spec = layers[i];
    r.in = cur;
    const LayerSpec& l = layers[i];
    if (l.n < 1) throw ConfigError("row " + std::to_string(i) + ": repeat count must be >= 1");
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::dwisesep:
      case LayerKind::bottleneck:
      case LayerKind::resbottleneck: {
        if (l.s != 1 && l.s != 2) throw ConfigError("row " + std::to_string(i) + ": stride must be 1 or 2");
        if (l.c == 0) throw ConfigError("row " + std::to_string(i) + ": zero output channels");
        for (std::size_t rep = 0; rep < l.n; ++rep) {
          const std::size_t stride = rep == 0 ? l.s : 1;
          if (stride == 2 && (cur.h % 2 || cur.w % 2)) {
            throw ConfigError("row " + std::to_string(i) + ": odd spatial size before stride-2 operator");
          }
          if (l.kind == LayerKind::conv) {
            r.cost += detail::conv_cost(cur, l.c, 3, stride, 1);
            r.cost.params += 2 * l.c;
          } else if (l.kind == LayerKind::dwisesep) {
            r.cost += detail::conv_cost(cur, cur.c, 3, stride, cur.c);
            r.cost.params += 2 * cur.c;
            Shape mid{1, cur.c, cur.h / stride, cur.w / stride};
            r.cost += detail::conv_cost(mid, l.c, 1, 1, 1);
            r.cost.params += 2 * l.c;
          } else {
            BottleneckSpec b{l.t, cur.c, l.c, stride, l.kind == LayerKind::resbottleneck, l.act};
            b.validate();
            const std::size_t hd = b.hidden();
            r.hidden.push_back(hd);
            r.cost += detail::conv_cost(cur, hd, 1, 1, 1);
            Shape mid{1, hd, cur.h, cur.w};
            r.cost += detail::conv_cost(mid, hd, 3, stride, hd);
            Shape low{1, hd, cur.h / stride, cur.w / stride};
            r.cost += detail::conv_cost(low, l.c, 1, 1, 1);
            r.cost.params += 2 * hd + 2 * hd + 2 * l.c;
          }
          cur = Shape{1, l.c, cur.h / stride, cur.w / stride};
        }
        break;
      }
      case LayerKind::upconcat: {
        const Shape up{1, cur.c, cur.h * 2, cur.w * 2};
        int src = -2;
        if (l.skip_source) {
          src = *l.skip_source;
        } else {
          for (auto it = produced.rbegin(); it != produced.rend(); ++it) {
            if (it->second.h == up.h && it->second.w == up.w) {
              src = it->first;
              break;
            }
          }
        }
        const Shape* skip = nullptr;
        for (const auto& [idx, s] : produced) {
          if (idx == src) skip = &s;
        }
        if (!skip) throw ConfigError("row " + std::to_string(i) + ": no skip source at " + up.str());
        if (skip->h != up.h || skip->w != up.w) {
          throw ConfigError("row " + std::to_string(i) + ": skip source spatial size " + skip->str() +
                            " does not match upsampled " + up.str());
        }
        if (l.c != up.c + skip->c) {
          throw ConfigError("row " + std::to_string(i) + ": upconcat declares " + std::to_string(l.c) +
                            " channels but produces " + std::to_string(up.c + skip->c));
        }
        r.skip = src;
        cur = Shape{1, l.c, up.h, up.w};
        break;
      }
      case LayerKind::sigmoid:
        if (l.c != cur.c) throw ConfigError("row " + std::to_string(i) + ": sigmoid channel mismatch");
        break;
    }
    r.out = cur;
    produced.emplace_back(static_cast<int>(i), cur);
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Builds a graph from a layer table and registers its (zero-initialised)
/// parameters; see init_weights for random initialisation.
template <typename T = float>
ModelGraph<T> build_graph(std::vector<LayerSpec> layers, std::size_t h, std::size_t w, std::size_t in_channels = 3,
                          double t_decoder = kDecoderContraction) {
  ModelGraph<T> g;
  g.layers = std::move(layers);
  g.in_channels = in_channels;
  g.height = h;
  g.width = w;
  g.t_decoder = t_decoder;
  const std::size_t d = g.divisor();
  if (h == 0 || w == 0 || h % d || w % d) {
    throw ConfigError("input " + std::to_string(h) + "x" + std::to_string(w) + " is not a multiple of " +
                      std::to_string(d));
  }
  const auto rows = resolve_rows(g.layers, in_channels, h, w);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const auto& l = r.spec;
    std::size_t cin = r.in.c;
    for (std::size_t rep = 0; rep < l.n && l.kind != LayerKind::upconcat && l.kind != LayerKind::sigmoid; ++rep) {
      switch (l.kind) {
        case LayerKind::conv:
          g.params.add_kernel(detail::pname(i, rep, "conv.weight"), {l.c, cin, 3, 3});
          g.params.add_batchnorm(detail::pname(i, rep, "conv.bn"), l.c);
          break;
        case LayerKind::dwisesep:
          g.params.add_kernel(detail::pname(i, rep, "dw.weight"), {cin, 1, 3, 3});
          g.params.add_batchnorm(detail::pname(i, rep, "dw.bn"), cin);
          g.params.add_kernel(detail::pname(i, rep, "project.weight"), {l.c, cin, 1, 1});
          g.params.add_batchnorm(detail::pname(i, rep, "project.bn"), l.c);
          break;
        default: {
          const std::size_t hd = r.hidden[rep];
          g.params.add_kernel(detail::pname(i, rep, "expand.weight"), {hd, cin, 1, 1});
          g.params.add_batchnorm(detail::pname(i, rep, "expand.bn"), hd);
          g.params.add_kernel(detail::pname(i, rep, "dw.weight"), {hd, 1, 3, 3});
          g.params.add_batchnorm(detail::pname(i, rep, "dw.bn"), hd);
          g.params.add_kernel(detail::pname(i, rep, "project.weight"), {l.c, hd, 1, 1});
          g.params.add_batchnorm(detail::pname(i, rep, "project.bn"), l.c);
        }
      }
      cin = l.c;
    }
  }
  return g;
}

/// The canonical network for an h x w RGB input (both multiples of 16).
template <typename T = float>
ModelGraph<T> build_m2unet(std::size_t h, std::size_t w, double t_decoder = kDecoderContraction) {
  if (h == 0 || w == 0 || h % 16 || w % 16) {
    throw ConfigError("M2U-Net input must be a multiple of 16, got " + std::to_string(h) + "x" + std::to_string(w));
  }
  return build_graph<T>(m2unet_layers(t_decoder), h, w, 3, t_decoder);
}

/// Per-row costs at the graph's nominal resolution (or an override).
template <typename T>
std::vector<RowInfo> describe(const ModelGraph<T>& g, std::size_t h = 0, std::size_t w = 0) {
  return resolve_rows(g.layers, g.in_channels, h ? h : g.height, w ? w : g.width);
}

struct ParamReport {
  std::vector<std::uint64_t> per_row;
  std::uint64_t total = 0;
};

template <typename T>
ParamReport param_count(const ModelGraph<T>& g) {
  ParamReport r;
  for (const auto& row : describe(g)) {
    r.per_row.push_back(row.cost.params);
    r.total += row.cost.params;
  }
  return r;
}

/// Multiply-accumulates of one batch-1 forward pass (convolutions only).
template <typename T>
std::uint64_t madds_count(const ModelGraph<T>& g, std::size_t h = 0, std::size_t w = 0) {
  std::uint64_t m = 0;
  for (const auto& row : describe(g, h, w)) m += row.cost.madds;
  return m;
}

/// FNV-1a over the layer table and every parameter name and shape.
template <typename T>
std::string architecture_hash(const ModelGraph<T>& g) {
  std::ostringstream os;
  os << "in=" << g.in_channels << ";";
  for (const auto& l : g.layers) {
    os << layer_kind_name(l.kind) << "," << std::setprecision(17) << l.t << "," << l.c << "," << l.n << "," << l.s
       << "," << static_cast<int>(l.act) << ";";
  }
  for (const auto& e : g.params.entries()) os << e.name << e.value.shape().str() << ";";
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(os.str());
  return hex.str();
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

/// Eager execution over tensors; batchnorm in inference mode.
template <typename T>
struct InferenceContext {
  using Value = Tensor<T>;
  const ModelGraph<T>& g;
  CostTally tally{};

  Value input(const Tensor<T>& image) { return image; }
  Value conv(const Value& x, const std::string& name, ConvGeometry geom) {
    return m2unet::conv2d(x, g.params[name], geom, &tally);
  }
  Value bn(const Value& x, const std::string& prefix) {
    return m2unet::batchnorm(x, g.params.batchnorm(prefix, g.bn_eps, g.bn_momentum), BnMode::infer, nullptr, &tally);
  }
  Value act(const Value& x, Activation a) { return a == Activation::relu6 ? m2unet::relu6(x) : m2unet::relu(x); }
  Value upsample(const Value& x) { return bilinear_upsample_x2(x); }
  Value concat(const Value& a, const Value& b) { return concat_channels(a, b); }
  Value add(const Value& a, const Value& b) { return add_residual(a, b); }
  Value sigmoid(const Value& x) { return m2unet::sigmoid(x); }
};

/// Records onto a Tape with trainable parameters as gradient leaves.
template <typename T>
struct TapeContext {
  using Value = Var;
  ModelGraph<T>& g;
  Tape<T>& tape;
  BnMode bn_mode = BnMode::train;
  CostTally tally{};
  std::map<std::string, Var> leaves{};

  Var param(const std::string& name) {
    auto it = leaves.find(name);
    if (it != leaves.end()) return it->second;
    const auto& e = g.params.entry(name);
    Var v = tape.leaf(e.value, e.trainable);
    leaves.emplace(name, v);
    return v;
  }

  Value input(const Tensor<T>& image) { return tape.leaf(image, false); }
  Value conv(Value x, const std::string& name, ConvGeometry geom) { return tape.conv2d(x, param(name), geom, &tally); }
  Value bn(Value x, const std::string& prefix) {
    auto p = g.params.batchnorm(prefix, g.bn_eps, g.bn_momentum);
    Var out = tape.batchnorm(x, param(prefix + ".gamma"), param(prefix + ".beta"), p, bn_mode, &tally);
    if (bn_mode == BnMode::train) g.params.store_running_stats(prefix, p);
    return out;
  }
  Value act(Value x, Activation a) { return a == Activation::relu6 ? tape.relu6(x) : tape.relu(x); }
  Value upsample(Value x) { return tape.upsample(x); }
  Value concat(Value a, Value b) { return tape.concat(a, b); }
  Value add(Value a, Value b) { return tape.add(a, b); }
  Value sigmoid(Value x) { return tape.sigmoid(x); }

  /// Gradients of every trainable parameter touched by the forward pass.
  std::map<std::string, Tensor<T>> gradients() const {
    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, v] : leaves) {
      if (g.params.entry(name).trainable) out.emplace(name, tape.grad(v));
    }
    return out;
  }
};

/// Runs the layer table under an execution context. Returns the last row's
/// output (probabilities when the table ends in sigmoid).
template <typename T, typename Ctx>
typename Ctx::Value run_graph(const ModelGraph<T>& g, Ctx& ctx, const Tensor<T>& image) {
  using V = typename Ctx::Value;
  const std::size_t d = g.divisor();
  if (image.c() != g.in_channels) {
    throw InputError("forward: expected " + std::to_string(g.in_channels) + " input channels, got " +
                     std::to_string(image.c()));
  }
  if (image.h() == 0 || image.w() == 0 || image.h() % d || image.w() % d) {
    throw InputError("forward: spatial size " + image.shape().str() + " not a multiple of " + std::to_string(d));
  }
  const auto rows = resolve_rows(g.layers, g.in_channels, image.h(), image.w());
  std::set<int> taps;
  for (const auto& r : rows) {
    if (r.spec.kind == LayerKind::upconcat) taps.insert(r.skip);
  }

  V x = ctx.input(image);
  std::map<int, V> saved;
  if (taps.count(-1)) saved.emplace(-1, x);
  using detail::pname;

  for (std::size_t i = 0; i < rows.size(); ++i) {
    const LayerSpec& l = rows[i].spec;
    for (std::size_t rep = 0; rep < l.n && l.kind != LayerKind::upconcat && l.kind != LayerKind::sigmoid; ++rep) {
      const std::size_t stride = rep == 0 ? l.s : 1;
      switch (l.kind) {
        case LayerKind::conv:
          x = ctx.act(ctx.bn(ctx.conv(x, pname(i, rep, "conv.weight"), {1, stride, 1}), pname(i, rep, "conv.bn")),
                      l.act);
          break;
        case LayerKind::dwisesep: {
          const std::size_t c = g.params[pname(i, rep, "dw.weight")].n();
          x = ctx.act(ctx.bn(ctx.conv(x, pname(i, rep, "dw.weight"), {c, stride, 1}), pname(i, rep, "dw.bn")), l.act);
          x = ctx.bn(ctx.conv(x, pname(i, rep, "project.weight"), {}), pname(i, rep, "project.bn"));
          break;
        }
        default: {
          const std::size_t hd = rows[i].hidden[rep];
          V y = ctx.act(ctx.bn(ctx.conv(x, pname(i, rep, "expand.weight"), {}), pname(i, rep, "expand.bn")), l.act);
          y = ctx.act(ctx.bn(ctx.conv(y, pname(i, rep, "dw.weight"), {hd, stride, 1}), pname(i, rep, "dw.bn")), l.act);
          y = ctx.bn(ctx.conv(y, pname(i, rep, "project.weight"), {}), pname(i, rep, "project.bn"));
          x = l.kind == LayerKind::resbottleneck ? ctx.add(y, x) : std::move(y);
        }
      }
    }
    if (l.kind == LayerKind::upconcat) {
      x = ctx.concat(ctx.upsample(x), saved.at(rows[i].skip));
    } else if (l.kind == LayerKind::sigmoid) {
      x = ctx.sigmoid(x);
    }
    if (taps.count(static_cast<int>(i))) saved.emplace(static_cast<int>(i), x);
  }
  return x;
}

/// Probability map (n, 1, h, w) for a batch of images, batchnorm in inference mode.
template <typename T>
Tensor<T> forward(const ModelGraph<T>& g, const Tensor<T>& image, CostTally* tally = nullptr) {
  InferenceContext<T> ctx{g};
  Tensor<T> out = run_graph(g, ctx, image);
  if (tally) *tally += ctx.tally;
  return out;
}

}  // namespace m2unet
