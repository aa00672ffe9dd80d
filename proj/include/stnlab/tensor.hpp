#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stnlab/errors.hpp"

namespace stnlab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {
struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // same length as value when requires_grad
  bool requires_grad = false;
};
}  // namespace detail

// Dense 64-bit float tensor. Value-semantic handle over shared storage:
// copies alias the same buffer, clone() makes an independent one. Values are
// immutable by convention once an op has consumed the tensor; grad buffers
// are the only thing backward mutates.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : d_(std::make_shared<detail::TensorData>()) {
    d_->shape = std::move(shape);
    d_->value.assign(shape_numel(d_->shape), 0.0);
    d_->requires_grad = requires_grad;
    if (requires_grad) d_->grad.assign(d_->value.size(), 0.0);
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw InvalidInputError("Tensor::from: shape " + shape_str(shape) + " wants " +
                              std::to_string(shape_numel(shape)) + " values, got " +
                              std::to_string(values.size()));
    Tensor t;
    t.d_ = std::make_shared<detail::TensorData>();
    t.d_->shape = std::move(shape);
    t.d_->value = std::move(values);
    t.d_->requires_grad = requires_grad;
    if (requires_grad) t.d_->grad.assign(t.d_->value.size(), 0.0);
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t extent(std::size_t i) const { return d_->shape[i]; }
  std::size_t numel() const { return d_->value.size(); }

  std::vector<double>& values() { return d_->value; }
  const std::vector<double>& values() const { return d_->value; }
  double item() const {
    if (numel() != 1)
      throw InvalidInputError("Tensor::item: tensor has " + std::to_string(numel()) +
                              " elements, expected 1");
    return d_->value[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  std::vector<double>& grad() { return d_->grad; }
  const std::vector<double>& grad() const { return d_->grad; }
  void zero_grad() {
    if (d_->requires_grad) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
  }

  Tensor clone(bool requires_grad) const {
    Tensor t(d_->shape, requires_grad);
    t.d_->value = d_->value;
    return t;
  }

  // Storage identity; two handles share parameters iff this compares equal.
  const void* storage_id() const { return d_.get(); }

 private:
  std::shared_ptr<detail::TensorData> d_;
};

// Records one backward rule per op, in forward order. Reverse iteration is
// reverse-topological because an op's inputs always exist before its output.
// After a node propagates, the *output* grad buffer is cleared; leaf grads
// accumulate across backward() calls until the caller zeroes them.
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    if (recording_) nodes_.push_back(std::move(backward_fn));
  }

  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> nodes_;
  bool recording_ = true;
};

inline void backward(Tape& tape, const Tensor& loss) {
  if (loss.numel() != 1)
    throw InvalidInputError("backward: loss must be scalar, got shape " +
                            shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw InvalidInputError("backward: loss does not require grad (nothing recorded)");
  const_cast<Tensor&>(loss).grad()[0] += 1.0;
  tape.run_backward();
}

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using MapCRM = Eigen::Map<const RowMat>;

// col is [C*kh*kw, oh*ow] for one image, row-major.
inline void im2col(const double* im, std::size_t c_in, std::size_t h, std::size_t w,
                   std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
                   std::size_t oh, std::size_t ow, double* col) {
  const std::size_t ohw = oh * ow;
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        double* dst = col + ((c * kh + ky) * kw + kx) * ohw;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(dst, dst + ow, 0.0);
            dst += ow;
            continue;
          }
          const double* src_row = im + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            *dst++ = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w))
                         ? 0.0
                         : src_row[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

inline void col2im_accumulate(const double* col, std::size_t c_in, std::size_t h, std::size_t w,
                              std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
                              std::size_t oh, std::size_t ow, double* im_grad) {
  const std::size_t ohw = oh * ow;
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const double* src = col + ((c * kh + ky) * kw + kx) * ohw;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            src += ow;
            continue;
          }
          double* dst_row = im_grad + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w))
              dst_row[static_cast<std::size_t>(ix)] += *src;
            ++src;
          }
        }
      }
    }
  }
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidInputError(msg);
}

}  // namespace detail

// Cross-correlation (no kernel flip) with per-output-channel bias.
// input [B,Cin,H,W], kernel [Cout,Cin,kH,kW], bias [Cout].
inline Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias,
                     int stride = 1, int padding = 0) {
  using namespace detail;
  require(input.rank() == 4, "conv2d: input must be rank 4, got " + shape_str(input.shape()));
  require(kernel.rank() == 4, "conv2d: kernel must be rank 4, got " + shape_str(kernel.shape()));
  require(bias.rank() == 1, "conv2d: bias must be rank 1, got " + shape_str(bias.shape()));
  require(stride >= 1, "conv2d: stride must be positive, got " + std::to_string(stride));
  require(padding >= 0, "conv2d: padding must be non-negative, got " + std::to_string(padding));
  const std::size_t b = input.extent(0), c_in = input.extent(1), h = input.extent(2),
                    w = input.extent(3);
  const std::size_t c_out = kernel.extent(0), kh = kernel.extent(2), kw = kernel.extent(3);
  require(kernel.extent(1) == c_in,
          "conv2d: kernel channel extent " + std::to_string(kernel.extent(1)) +
              " does not match input channel extent " + std::to_string(c_in));
  require(bias.extent(0) == c_out,
          "conv2d: bias extent " + std::to_string(bias.extent(0)) +
              " does not match kernel output channel extent " + std::to_string(c_out));
  const std::ptrdiff_t span_h = static_cast<std::ptrdiff_t>(h) + 2 * padding -
                                static_cast<std::ptrdiff_t>(kh);
  const std::ptrdiff_t span_w = static_cast<std::ptrdiff_t>(w) + 2 * padding -
                                static_cast<std::ptrdiff_t>(kw);
  require(span_h >= 0 && span_h % stride == 0,
          "conv2d: height extent " + std::to_string(h) + " with padding " +
              std::to_string(padding) + ", kernel " + std::to_string(kh) + ", stride " +
              std::to_string(stride) + " gives no integral output height");
  require(span_w >= 0 && span_w % stride == 0,
          "conv2d: width extent " + std::to_string(w) + " with padding " +
              std::to_string(padding) + ", kernel " + std::to_string(kw) + ", stride " +
              std::to_string(stride) + " gives no integral output width");
  const std::size_t oh = static_cast<std::size_t>(span_h) / stride + 1;
  const std::size_t ow = static_cast<std::size_t>(span_w) / stride + 1;
  const std::size_t ckk = c_in * kh * kw, ohw = oh * ow;

  const bool rg = input.requires_grad() || kernel.requires_grad() || bias.requires_grad();
  Tensor out({b, c_out, oh, ow}, rg);

  std::vector<double> col(ckk * ohw);
  MapCRM kmat(kernel.values().data(), static_cast<Eigen::Index>(c_out),
              static_cast<Eigen::Index>(ckk));
  Eigen::Map<const Eigen::VectorXd> bv(bias.values().data(), static_cast<Eigen::Index>(c_out));
  for (std::size_t i = 0; i < b; ++i) {
    im2col(input.values().data() + i * c_in * h * w, c_in, h, w, kh, kw,
           static_cast<std::size_t>(stride), static_cast<std::size_t>(padding), oh, ow,
           col.data());
    MapCRM cmat(col.data(), static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(ohw));
    MapRM omat(out.values().data() + i * c_out * ohw, static_cast<Eigen::Index>(c_out),
               static_cast<Eigen::Index>(ohw));
    omat.noalias() = kmat * cmat;
    omat.colwise() += bv;
  }

  if (rg) {
    Tensor in_t = input, k_t = kernel, b_t = bias, out_t = out;
    const int s = stride, p = padding;
    tape.record([in_t, k_t, b_t, out_t, s, p, b, c_in, h, w, c_out, kh, kw, oh, ow,
                 ckk, ohw]() mutable {
      std::vector<double> col(ckk * ohw);
      std::vector<double> dcol(ckk * ohw);
      MapCRM kmat(k_t.values().data(), static_cast<Eigen::Index>(c_out),
                  static_cast<Eigen::Index>(ckk));
      for (std::size_t i = 0; i < b; ++i) {
        MapCRM dout(out_t.grad().data() + i * c_out * ohw, static_cast<Eigen::Index>(c_out),
                    static_cast<Eigen::Index>(ohw));
        if (k_t.requires_grad() || b_t.requires_grad()) {
          im2col(in_t.values().data() + i * c_in * h * w, c_in, h, w, kh, kw,
                 static_cast<std::size_t>(s), static_cast<std::size_t>(p), oh, ow, col.data());
          MapCRM cmat(col.data(), static_cast<Eigen::Index>(ckk),
                      static_cast<Eigen::Index>(ohw));
          if (k_t.requires_grad()) {
            MapRM dk(k_t.grad().data(), static_cast<Eigen::Index>(c_out),
                     static_cast<Eigen::Index>(ckk));
            dk.noalias() += dout * cmat.transpose();
          }
          if (b_t.requires_grad()) {
            Eigen::Map<Eigen::VectorXd> db(b_t.grad().data(),
                                           static_cast<Eigen::Index>(c_out));
            db.noalias() += dout.rowwise().sum();
          }
        }
        if (in_t.requires_grad()) {
          MapRM dc(dcol.data(), static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(ohw));
          dc.noalias() = kmat.transpose() * dout;
          col2im_accumulate(dcol.data(), c_in, h, w, kh, kw, static_cast<std::size_t>(s),
                            static_cast<std::size_t>(p), oh, ow,
                            in_t.grad().data() + i * c_in * h * w);
        }
      }
      std::fill(out_t.grad().begin(), out_t.grad().end(), 0.0);
    });
  }
  return out;
}

// Per-window maximum. Gradient goes to the argmax; ties resolve to the first
// element in row-major scan order within the window.
inline Tensor max_pool2d(Tape& tape, const Tensor& input, int window, int stride) {
  using namespace detail;
  require(input.rank() == 4,
          "max_pool2d: input must be rank 4, got " + shape_str(input.shape()));
  require(window >= 1, "max_pool2d: window must be positive");
  require(stride >= 1, "max_pool2d: stride must be positive");
  const std::size_t b = input.extent(0), c = input.extent(1), h = input.extent(2),
                    w = input.extent(3);
  require(h >= static_cast<std::size_t>(window) && w >= static_cast<std::size_t>(window),
          "max_pool2d: window " + std::to_string(window) + " larger than spatial extents " +
              std::to_string(h) + "x" + std::to_string(w));
  const std::size_t oh = (h - window) / stride + 1;
  const std::size_t ow = (w - window) / stride + 1;

  const bool rg = input.requires_grad();
  Tensor out({b, c, oh, ow}, rg);
  std::vector<std::size_t> argmax(rg ? out.numel() : 0);

  const double* src = input.values().data();
  double* dst = out.values().data();
  std::size_t oi = 0;
  for (std::size_t i = 0; i < b * c; ++i) {
    const double* plane = src + i * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++oi) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (int ky = 0; ky < window; ++ky) {
          const std::size_t iy = oy * stride + ky;
          for (int kx = 0; kx < window; ++kx) {
            const std::size_t ix = ox * stride + kx;
            const double v = plane[iy * w + ix];
            if (v > best) {
              best = v;
              best_idx = i * h * w + iy * w + ix;
            }
          }
        }
        dst[oi] = best;
        if (rg) argmax[oi] = best_idx;
      }
    }
  }

  if (rg) {
    Tensor in_t = input, out_t = out;
    tape.record([in_t, out_t, argmax = std::move(argmax)]() mutable {
      auto& g_in = in_t.grad();
      auto& g_out = out_t.grad();
      for (std::size_t i = 0; i < g_out.size(); ++i) g_in[argmax[i]] += g_out[i];
      std::fill(g_out.begin(), g_out.end(), 0.0);
    });
  }
  return out;
}

// Affine map input [B,N] * weight^T [N,M] + bias [M].
inline Tensor dense(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias) {
  using namespace detail;
  require(input.rank() == 2, "dense: input must be rank 2, got " + shape_str(input.shape()));
  require(weight.rank() == 2, "dense: weight must be rank 2, got " + shape_str(weight.shape()));
  require(bias.rank() == 1, "dense: bias must be rank 1, got " + shape_str(bias.shape()));
  const std::size_t b = input.extent(0), n = input.extent(1);
  const std::size_t m = weight.extent(0);
  require(weight.extent(1) == n, "dense: weight inner extent " + std::to_string(weight.extent(1)) +
                                     " does not match input inner extent " + std::to_string(n));
  require(bias.extent(0) == m, "dense: bias extent " + std::to_string(bias.extent(0)) +
                                   " does not match weight output extent " + std::to_string(m));

  const bool rg = input.requires_grad() || weight.requires_grad() || bias.requires_grad();
  Tensor out({b, m}, rg);
  MapCRM x(input.values().data(), static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(n));
  MapCRM wt(weight.values().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  MapRM y(out.values().data(), static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(m));
  Eigen::Map<const Eigen::RowVectorXd> bv(bias.values().data(), static_cast<Eigen::Index>(m));
  y.noalias() = x * wt.transpose();
  y.rowwise() += bv;

  if (rg) {
    Tensor in_t = input, w_t = weight, b_t = bias, out_t = out;
    tape.record([in_t, w_t, b_t, out_t, b, n, m]() mutable {
      MapCRM dy(out_t.grad().data(), static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(m));
      if (in_t.requires_grad()) {
        MapCRM wt(w_t.values().data(), static_cast<Eigen::Index>(m),
                  static_cast<Eigen::Index>(n));
        MapRM dx(in_t.grad().data(), static_cast<Eigen::Index>(b),
                 static_cast<Eigen::Index>(n));
        dx.noalias() += dy * wt;
      }
      if (w_t.requires_grad()) {
        MapCRM x(in_t.values().data(), static_cast<Eigen::Index>(b),
                 static_cast<Eigen::Index>(n));
        MapRM dw(w_t.grad().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
        dw.noalias() += dy.transpose() * x;
      }
      if (b_t.requires_grad()) {
        Eigen::Map<Eigen::RowVectorXd> db(b_t.grad().data(), static_cast<Eigen::Index>(m));
        db.noalias() += dy.colwise().sum();
      }
      std::fill(out_t.grad().begin(), out_t.grad().end(), 0.0);
    });
  }
  return out;
}

inline Tensor relu(Tape& tape, const Tensor& input) {
  const bool rg = input.requires_grad();
  Tensor out(input.shape(), rg);
  const auto& x = input.values();
  auto& y = out.values();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  if (rg) {
    Tensor in_t = input, out_t = out;
    tape.record([in_t, out_t]() mutable {
      const auto& x = in_t.values();
      auto& g_in = in_t.grad();
      auto& g_out = out_t.grad();
      for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i] > 0.0) g_in[i] += g_out[i];
      std::fill(g_out.begin(), g_out.end(), 0.0);
    });
  }
  return out;
}

// Mean over the batch of -log softmax(logits)[label], max-subtracted.
inline Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits,
                                    std::span<const int> labels) {
  using namespace detail;
  require(logits.rank() == 2,
          "softmax_cross_entropy: logits must be rank 2, got " + shape_str(logits.shape()));
  const std::size_t b = logits.extent(0), k = logits.extent(1);
  require(labels.size() == b, "softmax_cross_entropy: got " + std::to_string(labels.size()) +
                                  " labels for batch extent " + std::to_string(b));
  for (std::size_t i = 0; i < b; ++i)
    require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < k,
            "softmax_cross_entropy: label " + std::to_string(labels[i]) +
                " out of range [0," + std::to_string(k) + ") at index " + std::to_string(i));

  std::vector<double> probs(b * k);
  double loss = 0.0;
  const double* z = logits.values().data();
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = z + i * k;
    double m = row[0];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double e = std::exp(row[j] - m);
      probs[i * k + j] = e;
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] *= inv;
    loss += std::log(sum) + m - row[static_cast<std::size_t>(labels[i])];
  }
  loss /= static_cast<double>(b);

  const bool rg = logits.requires_grad();
  Tensor out = Tensor::scalar(loss, rg);
  if (rg) {
    Tensor in_t = logits, out_t = out;
    std::vector<int> lab(labels.begin(), labels.end());
    tape.record([in_t, out_t, probs = std::move(probs), lab = std::move(lab), b, k]() mutable {
      const double g = out_t.grad()[0] / static_cast<double>(b);
      auto& g_in = in_t.grad();
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < k; ++j)
          g_in[i * k + j] +=
              g * (probs[i * k + j] - (static_cast<std::size_t>(lab[i]) == j ? 1.0 : 0.0));
      std::fill(out_t.grad().begin(), out_t.grad().end(), 0.0);
    });
  }
  return out;
}

inline Tensor reshape(Tape& tape, const Tensor& input, Shape new_shape) {
  detail::require(shape_numel(new_shape) == input.numel(),
                  "reshape: cannot view " + shape_str(input.shape()) + " as " +
                      shape_str(new_shape));
  const bool rg = input.requires_grad();
  Tensor out(std::move(new_shape), rg);
  out.values() = input.values();
  if (rg) {
    Tensor in_t = input, out_t = out;
    tape.record([in_t, out_t]() mutable {
      auto& g_in = in_t.grad();
      auto& g_out = out_t.grad();
      for (std::size_t i = 0; i < g_in.size(); ++i) g_in[i] += g_out[i];
      std::fill(g_out.begin(), g_out.end(), 0.0);
    });
  }
  return out;
}

inline Tensor flatten(Tape& tape, const Tensor& input) {
  detail::require(input.rank() >= 1, "flatten: undefined on rank-0 input");
  return reshape(tape, input, {input.extent(0), input.numel() / input.extent(0)});
}

// Sum of all elements; handy for building scalar losses in tests.
inline Tensor sum(Tape& tape, const Tensor& input) {
  double s = 0.0;
  for (double v : input.values()) s += v;
  const bool rg = input.requires_grad();
  Tensor out = Tensor::scalar(s, rg);
  if (rg) {
    Tensor in_t = input, out_t = out;
    tape.record([in_t, out_t]() mutable {
      const double g = out_t.grad()[0];
      auto& g_in = in_t.grad();
      for (auto& v : g_in) v += g;
      std::fill(out_t.grad().begin(), out_t.grad().end(), 0.0);
    });
  }
  return out;
}

}  // namespace stnlab
