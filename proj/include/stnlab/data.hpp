#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "stnlab/rng.hpp"
#include "stnlab/st.hpp"
#include "stnlab/tensor.hpp"

namespace stnlab {

struct TransformRecord {
  enum class Kind { None, Rotation, Translation };
  Kind kind = Kind::None;
  double angle = 0.0;  // radians, (-pi, pi]
  int dy = 0, dx = 0;  // pixels
};

// Images in [0,1], one applied-transform record per example carrying the
// ground-truth parameter the augmentation used.
struct LabeledDataset {
  Tensor images;  // [N,1,H,W]
  std::vector<int> labels;
  std::vector<TransformRecord> applied;
  int num_classes = 10;

  std::size_t size() const { return labels.size(); }
  std::size_t height() const { return images.extent(2); }
  std::size_t width() const { return images.extent(3); }

  Tensor image(std::size_t i) const {
    const std::size_t plane = height() * width();
    Tensor t({1, 1, height(), width()});
    std::copy_n(images.values().begin() + i * plane, plane, t.values().begin());
    return t;
  }

  Tensor batch(const std::vector<std::size_t>& idx) const {
    const std::size_t plane = height() * width();
    Tensor t({idx.size(), 1, height(), width()});
    for (std::size_t k = 0; k < idx.size(); ++k)
      std::copy_n(images.values().begin() + idx[k] * plane, plane,
                  t.values().begin() + k * plane);
    return t;
  }

  LabeledDataset subset(std::size_t n) const {
    n = std::min(n, size());
    LabeledDataset out;
    out.num_classes = num_classes;
    out.labels.assign(labels.begin(), labels.begin() + n);
    out.applied.assign(applied.begin(), applied.begin() + n);
    const std::size_t plane = height() * width();
    out.images = Tensor({n, 1, height(), width()});
    std::copy_n(images.values().begin(), n * plane, out.images.values().begin());
    return out;
  }
};

namespace detail {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path,
                                                  const char* what) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(std::string("cannot open ") + what + " file " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  return bytes;
}

inline std::uint32_t be_u32(const std::vector<unsigned char>& b, std::size_t off,
                            const char* what) {
  if (off + 4 > b.size())
    throw ParseError(std::string("truncated ") + what + ": header field cut short", off);
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

inline void put_be_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

// IDX container (MNIST distribution format): big-endian magic, big-endian
// u32 dimension sizes, row-major u8 payload. Pixels scale to [0,1] by /255.
inline LabeledDataset load_mnist_idx(const std::filesystem::path& images_path,
                                     const std::filesystem::path& labels_path) {
  using namespace detail;
  const auto ib = read_file_bytes(images_path, "images");
  const auto lb = read_file_bytes(labels_path, "labels");

  const std::uint32_t im = be_u32(ib, 0, "images file");
  if (im != kIdxImagesMagic)
    throw ParseError("bad magic in images file " + images_path.string() + ": expected 0x00000803",
                     0);
  const std::uint32_t lm = be_u32(lb, 0, "labels file");
  if (lm != kIdxLabelsMagic)
    throw ParseError("bad magic in labels file " + labels_path.string() + ": expected 0x00000801",
                     0);

  const std::uint32_t n_img = be_u32(ib, 4, "images file");
  const std::uint32_t rows = be_u32(ib, 8, "images file");
  const std::uint32_t cols = be_u32(ib, 12, "images file");
  const std::uint32_t n_lab = be_u32(lb, 4, "labels file");
  if (n_img != n_lab)
    throw ParseError("image count " + std::to_string(n_img) + " does not match label count " +
                         std::to_string(n_lab),
                     4);

  const std::size_t want_img = 16 + std::size_t(n_img) * rows * cols;
  if (ib.size() < want_img)
    throw ParseError("truncated images payload: expected " + std::to_string(want_img) +
                         " bytes, got " + std::to_string(ib.size()),
                     ib.size());
  const std::size_t want_lab = 8 + std::size_t(n_lab);
  if (lb.size() < want_lab)
    throw ParseError("truncated labels payload: expected " + std::to_string(want_lab) +
                         " bytes, got " + std::to_string(lb.size()),
                     lb.size());

  LabeledDataset ds;
  ds.images = Tensor({n_img, 1, rows, cols});
  ds.labels.resize(n_img);
  ds.applied.assign(n_img, TransformRecord{});
  for (std::size_t i = 0; i < n_img; ++i) {
    const int lab = lb[8 + i];
    if (lab > 9)
      throw ParseError("label value " + std::to_string(lab) + " out of range [0,10)", 8 + i);
    ds.labels[i] = lab;
  }
  auto& v = ds.images.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = ib[16 + i] / 255.0;
  return ds;
}

inline void save_idx(const LabeledDataset& ds, const std::filesystem::path& images_path,
                     const std::filesystem::path& labels_path) {
  using namespace detail;
  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw IoError("cannot write images file " + images_path.string());
  put_be_u32(img, kIdxImagesMagic);
  put_be_u32(img, static_cast<std::uint32_t>(ds.size()));
  put_be_u32(img, static_cast<std::uint32_t>(ds.height()));
  put_be_u32(img, static_cast<std::uint32_t>(ds.width()));
  for (double v : ds.images.values()) {
    const long q = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
    const unsigned char b = static_cast<unsigned char>(q);
    img.write(reinterpret_cast<const char*>(&b), 1);
  }
  std::ofstream lab(labels_path, std::ios::binary);
  if (!lab) throw IoError("cannot write labels file " + labels_path.string());
  put_be_u32(lab, kIdxLabelsMagic);
  put_be_u32(lab, static_cast<std::uint32_t>(ds.size()));
  for (int l : ds.labels) {
    const unsigned char b = static_cast<unsigned char>(l);
    lab.write(reinterpret_cast<const char*>(&b), 1);
  }
}

// Zero-pad every image into a canvas x canvas frame, content centered.
inline LabeledDataset pad_canvas(const LabeledDataset& ds, std::size_t canvas) {
  detail::require(canvas >= ds.height() && canvas >= ds.width(),
                  "pad_canvas: canvas " + std::to_string(canvas) + " smaller than image " +
                      std::to_string(ds.height()) + "x" + std::to_string(ds.width()));
  const std::size_t oy = (canvas - ds.height()) / 2;
  const std::size_t ox = (canvas - ds.width()) / 2;
  LabeledDataset out;
  out.labels = ds.labels;
  out.applied = ds.applied;
  out.num_classes = ds.num_classes;
  out.images = Tensor({ds.size(), 1, canvas, canvas});
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t y = 0; y < ds.height(); ++y)
      std::copy_n(ds.images.values().begin() + (i * ds.height() + y) * ds.width(), ds.width(),
                  out.images.values().begin() + (i * canvas + oy + y) * canvas + ox);
  return out;
}

// Deterministic applier behind the random augmentation; exposed so exact
// parameters (90-degree multiples, fixed shifts) can be driven directly.
inline LabeledDataset apply_transforms(const LabeledDataset& ds,
                                       const std::vector<TransformRecord>& records) {
  detail::require(records.size() == ds.size(), "apply_transforms: one record per example");
  const std::size_t h = ds.height(), w = ds.width(), plane = h * w;
  LabeledDataset out;
  out.labels = ds.labels;
  out.applied = records;
  out.num_classes = ds.num_classes;
  out.images = Tensor({ds.size(), 1, h, w});
  Tape tape;
  tape.set_recording(false);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double* src = ds.images.values().data() + i * plane;
    double* dst = out.images.values().data() + i * plane;
    const TransformRecord& r = records[i];
    switch (r.kind) {
      case TransformRecord::Kind::None:
        std::copy_n(src, plane, dst);
        break;
      case TransformRecord::Kind::Rotation: {
        if (r.angle == 0.0) {
          std::copy_n(src, plane, dst);
          break;
        }
        // content rotation by angle = sampling with the inverse rotation grid
        Tensor img = ds.image(i);
        SamplingGrid g = affine_grid(AffineParams::rotation(-r.angle), 1, h, w);
        Tensor warped = bilinear_sample(tape, img, g);
        std::copy_n(warped.values().begin(), plane, dst);
        break;
      }
      case TransformRecord::Kind::Translation: {
        for (std::size_t y = 0; y < h; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) - r.dy;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t x = 0; x < w; ++x) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) - r.dx;
            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
            dst[y * w + x] = src[static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)];
          }
        }
        break;
      }
    }
  }
  return out;
}

// Warp every image by a uniformly sampled parameter, recording the
// ground-truth transform per example. Deterministic in `seed` via the
// "augment" stream. Rotation range is in radians; translation range is the
// maximum absolute integer shift in pixels.
inline LabeledDataset apply_random_transform(const LabeledDataset& ds,
                                             TransformRecord::Kind kind, double range,
                                             std::uint64_t seed) {
  using Kind = TransformRecord::Kind;
  detail::require(kind != Kind::None, "apply_random_transform: kind must be rotation|translation");
  if (kind == Kind::Rotation)
    detail::require(range >= 0.0 && range <= std::numbers::pi,
                    "apply_random_transform: rotation range must be within [0, pi] radians");
  else
    detail::require(range >= 0.0 && range <= static_cast<double>(ds.height()) / 2.0 &&
                        range <= static_cast<double>(ds.width()) / 2.0,
                    "apply_random_transform: shift range must be within half the image extent");

  Rng rng = Rng::stream(seed, "augment");
  std::vector<TransformRecord> records(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    TransformRecord r;
    r.kind = kind;
    if (kind == Kind::Rotation) {
      r.angle = range == 0.0 ? 0.0 : rng.uniform(-range, range);
      if (r.angle <= -std::numbers::pi) r.angle = std::numbers::pi;
    } else {
      const auto lim = static_cast<std::int64_t>(range);
      r.dy = static_cast<int>(rng.uniform_int(-lim, lim));
      r.dx = static_cast<int>(rng.uniform_int(-lim, lim));
    }
    records[i] = r;
  }
  return apply_transforms(ds, records);
}

// ---------------------------------------------------------------------------
// Procedural glyph rendering (anti-aliased stroke rasterizer)

namespace detail {

struct P2 {
  double x, y;
};

inline double segment_distance(double px, double py, P2 a, P2 b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double wx = px - a.x, wy = py - a.y;
  const double vv = vx * vx + vy * vy;
  double t = vv > 0.0 ? (wx * vx + wy * vy) / vv : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (a.x + t * vx), dy = py - (a.y + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

// Rasterize polylines given in unit coordinates (x right, y down) onto a
// size x size canvas. Coverage ramps linearly over `aa` pixels around the
// stroke edge.
inline std::vector<double> raster_strokes(std::size_t size,
                                          const std::vector<std::vector<P2>>& strokes,
                                          double half_width_px, double aa_px) {
  std::vector<double> img(size * size, 0.0);
  const double s = static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double px = (static_cast<double>(x) + 0.5);
      const double py = (static_cast<double>(y) + 0.5);
      double d = 1e30;
      for (const auto& poly : strokes)
        for (std::size_t k = 0; k + 1 < poly.size(); ++k)
          d = std::min(d, segment_distance(px, py, P2{poly[k].x * s, poly[k].y * s},
                                           P2{poly[k + 1].x * s, poly[k + 1].y * s}));
      const double v = std::clamp((half_width_px + 0.5 * aa_px - d) / aa_px, 0.0, 1.0);
      img[y * size + x] = v;
    }
  }
  return img;
}

inline std::vector<P2> arc(double cx, double cy, double rx, double ry, double deg0, double deg1,
                           int n) {
  std::vector<P2> pts;
  pts.reserve(n + 1);
  for (int i = 0; i <= n; ++i) {
    const double t = (deg0 + (deg1 - deg0) * i / n) * std::numbers::pi / 180.0;
    pts.push_back(P2{cx + rx * std::cos(t), cy + ry * std::sin(t)});
  }
  return pts;
}

inline void jitter_strokes(std::vector<std::vector<P2>>& strokes, Rng& rng, double rot,
                           double scale_lo, double scale_hi, double shift, double vertex_noise) {
  const double a = rng.uniform(-rot, rot);
  const double sc = rng.uniform(scale_lo, scale_hi);
  const double tx = rng.uniform(-shift, shift), ty = rng.uniform(-shift, shift);
  const double ca = std::cos(a), sa = std::sin(a);
  for (auto& poly : strokes) {
    for (auto& p : poly) {
      const double x = p.x - 0.5 + rng.uniform(-vertex_noise, vertex_noise);
      const double y = p.y - 0.5 + rng.uniform(-vertex_noise, vertex_noise);
      p.x = 0.5 + sc * (ca * x - sa * y) + tx;
      p.y = 0.5 + sc * (sa * x + ca * y) + ty;
    }
  }
}

}  // namespace detail

// One centered glyph per image; channel_truth names the matched-filter
// channel that should fire (0 = "W", 1 = "M").
struct GlyphPair {
  Tensor image;  // [1,1,H,W]
  int channel_truth = 0;
};

// W/M corpus for the feature-map alignment demonstration. Entries alternate
// W, M; entry 2p+1 is bit-exactly the 180-degree index rotation of entry 2p,
// so the channel-swap identity under a half-turn holds by construction.
inline std::vector<GlyphPair> make_glyph_dataset(std::size_t count, std::size_t size,
                                                 std::uint64_t seed) {
  detail::require(size >= 16, "make_glyph_dataset: size must be >= 16");
  using detail::P2;
  Rng rng = Rng::stream(seed, "glyphs");
  std::vector<GlyphPair> out;
  out.reserve(count);
  for (std::size_t p = 0; out.size() < count; ++p) {
    std::vector<std::vector<P2>> w_strokes = {
        {P2{0.14, 0.24}, P2{0.33, 0.78}, P2{0.50, 0.40}, P2{0.67, 0.78}, P2{0.86, 0.24}}};
    detail::jitter_strokes(w_strokes, rng, 0.06, 0.92, 1.08, 0.02, 0.015);
    const double half_width = rng.uniform(0.030, 0.045) * static_cast<double>(size);
    std::vector<double> w_img = detail::raster_strokes(size, w_strokes, half_width, 1.2);

    GlyphPair wg;
    wg.image = Tensor::from({1, 1, size, size}, w_img);
    wg.channel_truth = 0;
    out.push_back(std::move(wg));
    if (out.size() == count) break;

    std::vector<double> m_img(w_img.size());
    for (std::size_t i = 0; i < w_img.size(); ++i) m_img[i] = w_img[w_img.size() - 1 - i];
    GlyphPair mg;
    mg.image = Tensor::from({1, 1, size, size}, std::move(m_img));
    mg.channel_truth = 1;
    out.push_back(std::move(mg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic handwritten-style digits (self-contained stand-in corpus written
// through the same IDX pipeline as MNIST)

namespace detail {

inline std::vector<std::vector<P2>> digit_skeleton(int digit) {
  using V = std::vector<P2>;
  switch (digit) {
    case 0:
      return {arc(0.50, 0.50, 0.21, 0.32, 0, 360, 24)};
    case 1:
      return {V{P2{0.36, 0.30}, P2{0.56, 0.14}, P2{0.56, 0.86}}};
    case 2: {
      auto top = arc(0.50, 0.33, 0.20, 0.19, 170, 380, 12);
      top.push_back(P2{0.30, 0.84});
      return {top, V{P2{0.30, 0.86}, P2{0.76, 0.86}}};
    }
    case 3:
      return {arc(0.47, 0.32, 0.19, 0.18, -130, 90, 12), arc(0.47, 0.66, 0.21, 0.20, -90, 130, 12)};
    case 4:
      return {V{P2{0.62, 0.12}, P2{0.24, 0.60}, P2{0.80, 0.60}}, V{P2{0.62, 0.32}, P2{0.62, 0.88}}};
    case 5:
      return {V{P2{0.72, 0.14}, P2{0.32, 0.14}, P2{0.30, 0.47}},
              arc(0.48, 0.66, 0.22, 0.21, -100, 120, 14)};
    case 6:
      return {V{P2{0.66, 0.13}, P2{0.44, 0.38}, P2{0.31, 0.60}}, arc(0.48, 0.68, 0.19, 0.18, 0, 360, 20)};
    case 7:
      return {V{P2{0.26, 0.14}, P2{0.76, 0.14}, P2{0.42, 0.88}}};
    case 8:
      return {arc(0.50, 0.31, 0.16, 0.15, 0, 360, 20), arc(0.50, 0.67, 0.20, 0.19, 0, 360, 20)};
    case 9:
      return {arc(0.46, 0.34, 0.19, 0.18, 0, 360, 20), V{P2{0.65, 0.36}, P2{0.64, 0.88}}};
    default:
      throw InvalidInputError("digit_skeleton: digit out of range");
  }
}

}  // namespace detail

// Deterministic digit corpus: class i%10 for example i, per-example jitter
// in pose, scale and stroke width. Serves as the MNIST-shaped input when the
// real files are not on disk.
inline LabeledDataset synth_digits(std::size_t count, std::size_t size, std::uint64_t seed) {
  detail::require(size >= 16, "synth_digits: size must be >= 16");
  LabeledDataset ds;
  ds.images = Tensor({count, 1, size, size});
  ds.labels.resize(count);
  ds.applied.assign(count, TransformRecord{});
  Rng rng = Rng::stream(seed, "digits");
  const std::size_t plane = size * size;
  for (std::size_t i = 0; i < count; ++i) {
    const int digit = static_cast<int>(i % 10);
    auto strokes = detail::digit_skeleton(digit);
    detail::jitter_strokes(strokes, rng, 0.12, 0.88, 1.10, 0.045, 0.012);
    const double half_width = rng.uniform(0.040, 0.058) * static_cast<double>(size);
    const auto img = detail::raster_strokes(size, strokes, half_width, 1.3);
    std::copy(img.begin(), img.end(), ds.images.values().begin() + i * plane);
    ds.labels[i] = digit;
  }
  return ds;
}

}  // namespace stnlab
