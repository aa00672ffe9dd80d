#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "stnlab/rng.hpp"
#include "stnlab/st.hpp"
#include "stnlab/tensor.hpp"

namespace stnlab {

enum class LayerKind { Conv, Relu, Pool, Flatten, Dense };

struct LayerDesc {
  LayerKind kind = LayerKind::Relu;
  int channels = 0, ksize = 0, stride = 1, pad = 0;  // conv
  int window = 0, pool_stride = 0;                   // pool
  int units = 0;                                     // dense

  static LayerDesc conv(int channels, int ksize, int stride = 1, int pad = 0) {
    LayerDesc d;
    d.kind = LayerKind::Conv;
    d.channels = channels;
    d.ksize = ksize;
    d.stride = stride;
    d.pad = pad;
    return d;
  }
  static LayerDesc relu() { return LayerDesc{}; }
  static LayerDesc pool(int window, int stride) {
    LayerDesc d;
    d.kind = LayerKind::Pool;
    d.window = window;
    d.pool_stride = stride;
    return d;
  }
  static LayerDesc flatten() {
    LayerDesc d;
    d.kind = LayerKind::Flatten;
    return d;
  }
  static LayerDesc dense(int units) {
    LayerDesc d;
    d.kind = LayerKind::Dense;
    d.units = units;
    return d;
  }
};

// (i) plain CNN, (ii) ST on the input with a separate localization CNN,
// (iii) ST warping the feature map after conv block X, (iv) ST on the input
// with the localization network sharing the first X conv blocks.
enum class Variant { Plain, StnC0, StnCX, StnSLX };

struct NetworkSpec {
  std::string name;
  std::vector<LayerDesc> backbone;
  Variant variant = Variant::Plain;
  int x = 0;  // insertion-or-sharing depth, counted in conv blocks
  LocMode loc_mode = LocMode::FullAffine;
  std::vector<int> loc_hidden = {32};
  std::size_t input_channels = 1, input_h = 0, input_w = 0;
  int num_classes = 10;

  int conv_count() const {
    int n = 0;
    for (const auto& l : backbone)
      if (l.kind == LayerKind::Conv) ++n;
    return n;
  }

  void validate() const {
    if (backbone.empty()) throw InvalidInputError("network spec: empty backbone");
    if (input_h == 0 || input_w == 0 || input_channels == 0)
      throw InvalidInputError("network spec: input extents not set");
    switch (variant) {
      case Variant::Plain:
        break;
      case Variant::StnC0:
        if (x != 0) throw InvalidInputError("network spec: stn_c0 requires X=0");
        break;
      case Variant::StnCX:
      case Variant::StnSLX:
        if (x < 1)
          throw InvalidInputError("network spec: X=0 is permitted only as stn_c0");
        if (x > conv_count())
          throw InvalidInputError("network spec: X=" + std::to_string(x) +
                                  " exceeds backbone conv count " +
                                  std::to_string(conv_count()));
        break;
    }
    for (int h : loc_hidden)
      if (h < 1) throw InvalidInputError("network spec: localization hidden size must be >= 1");
  }
};

// Index just past conv block `x` (the conv, its relu, and a directly
// following pool). x = 0 is the input itself.
inline std::size_t insertion_index(const std::vector<LayerDesc>& layers, int x) {
  if (x == 0) return 0;
  int seen = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].kind != LayerKind::Conv) continue;
    if (++seen < x) continue;
    std::size_t j = i + 1;
    if (j < layers.size() && layers[j].kind == LayerKind::Relu) ++j;
    if (j < layers.size() && layers[j].kind == LayerKind::Pool) ++j;
    return j;
  }
  throw InvalidInputError("insertion_index: X=" + std::to_string(x) + " exceeds conv count");
}

namespace detail {

struct Dims {
  std::size_t c = 0, h = 0, w = 0;
  bool flat = false;
  std::size_t n = 0;

  std::size_t numel() const { return flat ? n : c * h * w; }
};

inline Dims layer_output_dims(const LayerDesc& l, Dims d, const std::string& where) {
  switch (l.kind) {
    case LayerKind::Conv: {
      if (d.flat) throw InvalidInputError(where + ": conv after flatten");
      const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(d.h) + 2 * l.pad - l.ksize;
      const std::ptrdiff_t sw = static_cast<std::ptrdiff_t>(d.w) + 2 * l.pad - l.ksize;
      if (sh < 0 || sw < 0 || sh % l.stride || sw % l.stride)
        throw InvalidInputError(where + ": conv does not fit " + std::to_string(d.h) + "x" +
                                std::to_string(d.w));
      d.c = static_cast<std::size_t>(l.channels);
      d.h = static_cast<std::size_t>(sh / l.stride) + 1;
      d.w = static_cast<std::size_t>(sw / l.stride) + 1;
      return d;
    }
    case LayerKind::Pool:
      if (d.flat) throw InvalidInputError(where + ": pool after flatten");
      if (d.h < static_cast<std::size_t>(l.window) || d.w < static_cast<std::size_t>(l.window))
        throw InvalidInputError(where + ": pool window does not fit");
      d.h = (d.h - l.window) / l.pool_stride + 1;
      d.w = (d.w - l.window) / l.pool_stride + 1;
      return d;
    case LayerKind::Relu:
      return d;
    case LayerKind::Flatten:
      d.n = d.numel();
      d.flat = true;
      return d;
    case LayerKind::Dense:
      if (!d.flat) throw InvalidInputError(where + ": dense requires flatten first");
      d.n = static_cast<std::size_t>(l.units);
      return d;
  }
  throw InvalidInputError(where + ": unreachable layer kind");
}

}  // namespace detail

// All parameters with stable names plus the spec that shaped them. Parameter
// tensors are shared handles: in stn_slX the localization path and the
// classification path resolve the shared names to the *same* storage.
struct ModelInstance {
  NetworkSpec spec;
  std::vector<std::pair<std::string, Tensor>> params;

  const Tensor& p(const std::string& name) const {
    for (const auto& [n, t] : params)
      if (n == name) return t;
    throw InvalidInputError("model: no parameter named " + name);
  }

  void set_param(const std::string& name, Tensor t) {
    for (auto& [n, slot] : params)
      if (n == name) {
        if (slot.shape() != t.shape())
          throw InvalidInputError("model: shape mismatch replacing " + name);
        slot = std::move(t);
        return;
      }
    throw InvalidInputError("model: no parameter named " + name);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params) n += t.numel();
    return n;
  }
};

namespace detail {

inline std::string layer_param_base(const std::string& prefix,
                                    const std::vector<LayerDesc>& layers, std::size_t i) {
  int conv_idx = 0, dense_idx = 0;
  for (std::size_t j = 0; j < i; ++j) {
    if (layers[j].kind == LayerKind::Conv) ++conv_idx;
    if (layers[j].kind == LayerKind::Dense) ++dense_idx;
  }
  if (layers[i].kind == LayerKind::Conv) return prefix + "conv" + std::to_string(conv_idx);
  return prefix + "dense" + std::to_string(dense_idx);
}

inline void he_uniform_fill(Tensor& t, std::size_t fan_in, std::uint64_t seed,
                            const std::string& stream) {
  Rng rng = Rng::stream(seed, stream);
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.values()) v = rng.uniform(-limit, limit);
}

// Materialize conv/dense parameters for a layer stack; returns output dims.
inline Dims materialize_layers(ModelInstance& m, const std::string& prefix,
                               const std::vector<LayerDesc>& layers, Dims d,
                               std::uint64_t seed) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerDesc& l = layers[i];
    if (l.kind == LayerKind::Conv) {
      const std::string base = layer_param_base(prefix, layers, i);
      Tensor w({static_cast<std::size_t>(l.channels), d.c, static_cast<std::size_t>(l.ksize),
                static_cast<std::size_t>(l.ksize)},
               true);
      he_uniform_fill(w, d.c * l.ksize * l.ksize, seed, "init/" + base + ".w");
      Tensor b({static_cast<std::size_t>(l.channels)}, true);
      m.params.emplace_back(base + ".w", std::move(w));
      m.params.emplace_back(base + ".b", std::move(b));
    } else if (l.kind == LayerKind::Dense) {
      const std::string base = layer_param_base(prefix, layers, i);
      Tensor w({static_cast<std::size_t>(l.units), d.n}, true);
      he_uniform_fill(w, d.n, seed, "init/" + base + ".w");
      Tensor b({static_cast<std::size_t>(l.units)}, true);
      m.params.emplace_back(base + ".w", std::move(w));
      m.params.emplace_back(base + ".b", std::move(b));
    }
    d = layer_output_dims(l, d, prefix);
  }
  return d;
}

// Separate localization network for stn_c0 / stn_cX: two conv(16,3x3)-relu
// blocks, pooled while the map is large enough, then the hidden dense stack.
// Kept small on purpose; the contrast under study is placement, not capacity.
inline std::vector<LayerDesc> separate_locnet_layers(Dims d) {
  std::vector<LayerDesc> layers;
  for (int block = 0; block < 2; ++block) {
    layers.push_back(LayerDesc::conv(16, 3, 1, 1));
    layers.push_back(LayerDesc::relu());
    if (d.h >= 2 && d.w >= 2) {
      layers.push_back(LayerDesc::pool(2, 2));
      d.h = (d.h - 2) / 2 + 1;
      d.w = (d.w - 2) / 2 + 1;
    }
    d.c = 16;
  }
  layers.push_back(LayerDesc::flatten());
  return layers;
}

inline std::vector<LayerDesc> loc_hidden_layers(const NetworkSpec& spec) {
  std::vector<LayerDesc> layers;
  for (int h : spec.loc_hidden) {
    layers.push_back(LayerDesc::dense(h));
    layers.push_back(LayerDesc::relu());
  }
  return layers;
}

}  // namespace detail

inline ModelInstance build(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelInstance m;
  m.spec = spec;
  detail::Dims in{spec.input_channels, spec.input_h, spec.input_w};

  // backbone parameters (names independent of variant, so equal seeds give
  // equal backbone initializations across variants)
  detail::Dims bb_out = detail::materialize_layers(m, "bb.", spec.backbone, in, seed);
  (void)bb_out;

  if (spec.variant == Variant::Plain) return m;

  // dims of what the localization network reads
  const std::size_t ins = insertion_index(spec.backbone, spec.x);
  detail::Dims tap = in;
  for (std::size_t i = 0; i < ins; ++i)
    tap = detail::layer_output_dims(spec.backbone[i], tap, "bb.");

  detail::Dims loc_in = tap;
  if (spec.variant == Variant::StnC0 || spec.variant == Variant::StnCX) {
    auto locnet = detail::separate_locnet_layers(loc_in);
    loc_in = detail::materialize_layers(m, "loc.", locnet, loc_in, seed);
  } else {
    loc_in.n = loc_in.numel();
    loc_in.flat = true;
  }
  auto hidden = detail::loc_hidden_layers(spec);
  loc_in = detail::materialize_layers(m, "loc.fc.", hidden, loc_in, seed);

  LocHead head = make_localization_head(loc_in.n, spec.loc_mode);
  m.params.emplace_back("loc.head.w", head.weight);
  m.params.emplace_back("loc.head.b", head.bias);
  return m;
}

namespace detail {

inline Tensor run_layers(Tape& tape, const ModelInstance& m, const std::string& prefix,
                         const std::vector<LayerDesc>& layers, std::size_t begin, std::size_t end,
                         Tensor x) {
  for (std::size_t i = begin; i < end; ++i) {
    const LayerDesc& l = layers[i];
    switch (l.kind) {
      case LayerKind::Conv: {
        const std::string base = layer_param_base(prefix, layers, i);
        x = conv2d(tape, x, m.p(base + ".w"), m.p(base + ".b"), l.stride, l.pad);
        break;
      }
      case LayerKind::Relu:
        x = relu(tape, x);
        break;
      case LayerKind::Pool:
        x = max_pool2d(tape, x, l.window, l.pool_stride);
        break;
      case LayerKind::Flatten:
        x = flatten(tape, x);
        break;
      case LayerKind::Dense: {
        const std::string base = layer_param_base(prefix, layers, i);
        x = dense(tape, x, m.p(base + ".w"), m.p(base + ".b"));
        break;
      }
    }
  }
  return x;
}

inline Tensor run_loc_tail(Tape& tape, const ModelInstance& m, Tensor feats,
                           const NetworkSpec& spec) {
  auto hidden = loc_hidden_layers(spec);
  feats = run_layers(tape, m, "loc.fc.", hidden, 0, hidden.size(), std::move(feats));
  LocHead head{spec.loc_mode, m.p("loc.head.w"), m.p("loc.head.b")};
  return localization_head(tape, feats, head);
}

}  // namespace detail

struct ForwardResult {
  Tensor logits;
  Tensor theta;     // [B,2,3]; undefined for the plain variant
  Tensor pre_warp;  // defined when taps were requested
  Tensor post_warp;
};

inline ForwardResult forward(Tape& tape, const ModelInstance& m, const Tensor& batch,
                             bool want_taps = false) {
  const NetworkSpec& spec = m.spec;
  detail::require(batch.rank() == 4 && batch.extent(1) == spec.input_channels &&
                      batch.extent(2) == spec.input_h && batch.extent(3) == spec.input_w,
                  "forward: batch shape " + shape_str(batch.shape()) +
                      " does not match spec input [B," + std::to_string(spec.input_channels) +
                      "," + std::to_string(spec.input_h) + "," + std::to_string(spec.input_w) +
                      "]");
  ForwardResult r;
  const auto& bb = spec.backbone;

  switch (spec.variant) {
    case Variant::Plain: {
      r.logits = detail::run_layers(tape, m, "bb.", bb, 0, bb.size(), batch);
      return r;
    }
    case Variant::StnC0: {
      auto locnet = detail::separate_locnet_layers(
          detail::Dims{spec.input_channels, spec.input_h, spec.input_w});
      Tensor feats = detail::run_layers(tape, m, "loc.", locnet, 0, locnet.size(), batch);
      r.theta = detail::run_loc_tail(tape, m, feats, spec);
      SamplingGrid grid = affine_grid(tape, r.theta, spec.input_h, spec.input_w);
      Tensor warped = bilinear_sample(tape, batch, grid);
      if (want_taps) {
        r.pre_warp = batch;
        r.post_warp = warped;
      }
      r.logits = detail::run_layers(tape, m, "bb.", bb, 0, bb.size(), warped);
      return r;
    }
    case Variant::StnCX: {
      const std::size_t ins = insertion_index(bb, spec.x);
      Tensor fmap = detail::run_layers(tape, m, "bb.", bb, 0, ins, batch);
      auto locnet = detail::separate_locnet_layers(
          detail::Dims{fmap.extent(1), fmap.extent(2), fmap.extent(3)});
      Tensor feats = detail::run_layers(tape, m, "loc.", locnet, 0, locnet.size(), fmap);
      r.theta = detail::run_loc_tail(tape, m, feats, spec);
      SamplingGrid grid = affine_grid(tape, r.theta, fmap.extent(2), fmap.extent(3));
      Tensor warped = bilinear_sample(tape, fmap, grid);
      if (want_taps) {
        r.pre_warp = fmap;
        r.post_warp = warped;
      }
      r.logits = detail::run_layers(tape, m, "bb.", bb, ins, bb.size(), warped);
      return r;
    }
    case Variant::StnSLX: {
      // shared prefix runs twice: once on the raw input for localization,
      // once on the warped input inside the full backbone pass
      const std::size_t ins = insertion_index(bb, spec.x);
      Tensor shared = detail::run_layers(tape, m, "bb.", bb, 0, ins, batch);
      Tensor feats = flatten(tape, shared);
      r.theta = detail::run_loc_tail(tape, m, feats, spec);
      SamplingGrid grid = affine_grid(tape, r.theta, spec.input_h, spec.input_w);
      Tensor warped = bilinear_sample(tape, batch, grid);
      if (want_taps) {
        r.pre_warp = batch;
        r.post_warp = warped;
      }
      r.logits = detail::run_layers(tape, m, "bb.", bb, 0, bb.size(), warped);
      return r;
    }
  }
  throw InvalidInputError("forward: unreachable variant");
}

// The classification feature extractor tapped after conv block `layer`
// (0 = the input itself). Runs the plain backbone prefix regardless of the
// model's ST variant.
inline Tensor feature_at_layer(Tape& tape, const ModelInstance& m, const Tensor& batch,
                               int layer) {
  const std::size_t ins = insertion_index(m.spec.backbone, layer);
  return detail::run_layers(tape, m, "bb.", m.spec.backbone, 0, ins, batch);
}

// ---------------------------------------------------------------------------
// Named spec registry

inline std::vector<LayerDesc> default_backbone(int classes) {
  using L = LayerDesc;
  return {L::conv(32, 3, 1, 1), L::relu(), L::pool(2, 2),
          L::conv(64, 3, 1, 1), L::relu(), L::pool(2, 2),
          L::flatten(),         L::dense(128), L::relu(), L::dense(classes)};
}

// 8-conv backbone for the depth sweep; X in {0,3,6,8} lands on block
// boundaries.
inline std::vector<LayerDesc> deep_backbone(int classes) {
  using L = LayerDesc;
  return {L::conv(16, 3, 1, 1), L::relu(),
          L::conv(16, 3, 1, 1), L::relu(), L::pool(2, 2),
          L::conv(32, 3, 1, 1), L::relu(),
          L::conv(32, 3, 1, 1), L::relu(), L::pool(2, 2),
          L::conv(32, 3, 1, 1), L::relu(),
          L::conv(32, 3, 1, 1), L::relu(), L::pool(2, 2),
          L::conv(64, 3, 1, 1), L::relu(),
          L::conv(64, 3, 1, 1), L::relu(),
          L::flatten(),         L::dense(64), L::relu(), L::dense(classes)};
}

// Names: cnn | stn_c0 | stn_c<X> | stn_sl<X>, each with a deep_ prefixed
// sibling on the 8-conv backbone.
inline NetworkSpec spec_by_name(const std::string& name, std::size_t in_c, std::size_t in_h,
                                std::size_t in_w, int classes = 10,
                                LocMode loc_mode = LocMode::FullAffine) {
  NetworkSpec spec;
  spec.name = name;
  spec.input_channels = in_c;
  spec.input_h = in_h;
  spec.input_w = in_w;
  spec.num_classes = classes;
  spec.loc_mode = loc_mode;

  std::string rest = name;
  if (rest.starts_with("deep_")) {
    spec.backbone = deep_backbone(classes);
    rest = rest.substr(5);
  } else {
    spec.backbone = default_backbone(classes);
  }

  auto parse_x = [&](const std::string& s) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
      throw InvalidInputError("unknown model spec name: " + name);
    return std::stoi(s);
  };

  if (rest == "cnn") {
    spec.variant = Variant::Plain;
  } else if (rest == "stn_c0") {
    spec.variant = Variant::StnC0;
  } else if (rest.starts_with("stn_c")) {
    spec.variant = Variant::StnCX;
    spec.x = parse_x(rest.substr(5));
  } else if (rest.starts_with("stn_sl")) {
    spec.variant = Variant::StnSLX;
    spec.x = parse_x(rest.substr(6));
  } else {
    throw InvalidInputError("unknown model spec name: " + name);
  }
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic, format version, spec text, then per-parameter
// (name, shape, little-endian f64 payload). Round-trips bit-exactly.

namespace detail {

constexpr char kCkptMagic[8] = {'S', 'T', 'N', 'L', 'A', 'B', 'C', 'K'};
constexpr std::uint32_t kCkptVersion = 1;

inline void put_le_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_le_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

struct ByteReader {
  const std::vector<unsigned char>& b;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) {
    if (pos + n > b.size())
      throw CheckpointError(CheckpointError::Kind::CorruptLength,
                            std::string("corrupt length: file ends inside ") + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b.data() + pos), n);
    pos += n;
    return s;
  }
};

inline std::string spec_to_text(const NetworkSpec& spec) {
  std::ostringstream os;
  os << "name=" << spec.name << "\n";
  os << "variant=";
  switch (spec.variant) {
    case Variant::Plain: os << "plain"; break;
    case Variant::StnC0: os << "stn_c0"; break;
    case Variant::StnCX: os << "stn_cx"; break;
    case Variant::StnSLX: os << "stn_slx"; break;
  }
  os << "\n";
  os << "x=" << spec.x << "\n";
  os << "loc_mode=" << (spec.loc_mode == LocMode::FullAffine ? "full_affine" : "rotation_only")
     << "\n";
  os << "loc_hidden=";
  for (std::size_t i = 0; i < spec.loc_hidden.size(); ++i)
    os << (i ? "," : "") << spec.loc_hidden[i];
  os << "\n";
  os << "input=" << spec.input_channels << "x" << spec.input_h << "x" << spec.input_w << "\n";
  os << "classes=" << spec.num_classes << "\n";
  for (const auto& l : spec.backbone) {
    switch (l.kind) {
      case LayerKind::Conv:
        os << "layer=conv:" << l.channels << "," << l.ksize << "," << l.stride << "," << l.pad
           << "\n";
        break;
      case LayerKind::Relu: os << "layer=relu\n"; break;
      case LayerKind::Pool: os << "layer=pool:" << l.window << "," << l.pool_stride << "\n"; break;
      case LayerKind::Flatten: os << "layer=flatten\n"; break;
      case LayerKind::Dense: os << "layer=dense:" << l.units << "\n"; break;
    }
  }
  return os.str();
}

inline NetworkSpec spec_from_text(const std::string& text) {
  NetworkSpec spec;
  spec.loc_hidden.clear();
  std::istringstream is(text);
  std::string line;
  auto fail = [](const std::string& msg) {
    throw CheckpointError(CheckpointError::Kind::CorruptLength, "bad spec block: " + msg);
  };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("missing '=' in \"" + line + "\"");
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "name") {
      spec.name = val;
    } else if (key == "variant") {
      if (val == "plain") spec.variant = Variant::Plain;
      else if (val == "stn_c0") spec.variant = Variant::StnC0;
      else if (val == "stn_cx") spec.variant = Variant::StnCX;
      else if (val == "stn_slx") spec.variant = Variant::StnSLX;
      else fail("unknown variant " + val);
    } else if (key == "x") {
      spec.x = std::stoi(val);
    } else if (key == "loc_mode") {
      if (val == "full_affine") spec.loc_mode = LocMode::FullAffine;
      else if (val == "rotation_only") spec.loc_mode = LocMode::RotationOnly;
      else fail("unknown loc_mode " + val);
    } else if (key == "loc_hidden") {
      std::istringstream hs(val);
      std::string tok;
      while (std::getline(hs, tok, ',')) spec.loc_hidden.push_back(std::stoi(tok));
    } else if (key == "input") {
      std::size_t c = 0, h = 0, w = 0;
      char x1 = 0, x2 = 0;
      std::istringstream ds(val);
      ds >> c >> x1 >> h >> x2 >> w;
      if (!ds || x1 != 'x' || x2 != 'x') fail("bad input extents " + val);
      spec.input_channels = c;
      spec.input_h = h;
      spec.input_w = w;
    } else if (key == "classes") {
      spec.num_classes = std::stoi(val);
    } else if (key == "layer") {
      if (val == "relu") spec.backbone.push_back(LayerDesc::relu());
      else if (val == "flatten") spec.backbone.push_back(LayerDesc::flatten());
      else if (val.starts_with("conv:")) {
        int c, k, s, p;
        char sep;
        std::istringstream ls(val.substr(5));
        ls >> c >> sep >> k >> sep >> s >> sep >> p;
        if (!ls) fail("bad conv layer " + val);
        spec.backbone.push_back(LayerDesc::conv(c, k, s, p));
      } else if (val.starts_with("pool:")) {
        int w, s;
        char sep;
        std::istringstream ls(val.substr(5));
        ls >> w >> sep >> s;
        if (!ls) fail("bad pool layer " + val);
        spec.backbone.push_back(LayerDesc::pool(w, s));
      } else if (val.starts_with("dense:")) {
        spec.backbone.push_back(LayerDesc::dense(std::stoi(val.substr(6))));
      } else {
        fail("unknown layer " + val);
      }
    } else {
      fail("unknown key " + key);
    }
  }
  spec.validate();
  return spec;
}

}  // namespace detail

inline void save_model(const ModelInstance& m, const std::filesystem::path& path) {
  using namespace detail;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os.write(kCkptMagic, sizeof(kCkptMagic));
  put_le_u32(os, kCkptVersion);
  const std::string spec_text = spec_to_text(m.spec);
  put_le_u64(os, spec_text.size());
  os.write(spec_text.data(), static_cast<std::streamsize>(spec_text.size()));
  put_le_u32(os, static_cast<std::uint32_t>(m.params.size()));
  for (const auto& [name, t] : m.params) {
    put_le_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_le_u64(os, d);
    for (double v : t.values()) put_le_u64(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw IoError("short write on checkpoint " + path.string());
}

inline ModelInstance load_model(const std::filesystem::path& path) {
  using namespace detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
  ByteReader r{bytes};
  r.need(sizeof(kCkptMagic), "magic");
  if (!std::equal(kCkptMagic, kCkptMagic + sizeof(kCkptMagic), bytes.begin()))
    throw CheckpointError(CheckpointError::Kind::BadMagic,
                          "not a stnlab checkpoint: " + path.string());
  r.pos = sizeof(kCkptMagic);
  const std::uint32_t version = r.u32("version");
  if (version != kCkptVersion)
    throw CheckpointError(CheckpointError::Kind::VersionMismatch,
                          "checkpoint format version " + std::to_string(version) +
                              ", expected " + std::to_string(kCkptVersion));
  const std::uint64_t spec_len = r.u64("spec length");
  const std::string spec_text = r.str(spec_len, "spec block");
  NetworkSpec spec = spec_from_text(spec_text);

  // fresh instance defines the admissible parameter inventory
  ModelInstance m = build(spec, 0);
  std::vector<bool> seen(m.params.size(), false);

  const std::uint32_t n_params = r.u32("parameter count");
  if (n_params != m.params.size())
    throw CheckpointError(CheckpointError::Kind::CorruptLength,
                          "checkpoint holds " + std::to_string(n_params) + " parameters, spec " +
                              spec.name + " defines " + std::to_string(m.params.size()));
  for (std::uint32_t i = 0; i < n_params; ++i) {
    const std::uint32_t name_len = r.u32("parameter name length");
    const std::string name = r.str(name_len, "parameter name");
    const std::uint32_t rank = r.u32("parameter rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.u64("parameter extent");

    std::size_t slot = m.params.size();
    for (std::size_t j = 0; j < m.params.size(); ++j)
      if (m.params[j].first == name) slot = j;
    if (slot == m.params.size())
      throw CheckpointError(CheckpointError::Kind::UnknownParameter,
                            "unknown parameter name " + name);
    if (seen[slot])
      throw CheckpointError(CheckpointError::Kind::UnknownParameter,
                            "duplicate parameter name " + name);
    seen[slot] = true;
    Tensor& t = m.params[slot].second;
    if (shape != t.shape())
      throw CheckpointError(CheckpointError::Kind::CorruptLength,
                            "parameter " + name + " has shape " + shape_str(shape) +
                                ", spec wants " + shape_str(t.shape()));
    for (auto& v : t.values()) v = std::bit_cast<double>(r.u64("parameter payload"));
  }
  return m;
}

}  // namespace stnlab
