#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "stnlab/tensor.hpp"

namespace stnlab {

// 2x3 affine transform theta = [a b tx; c d ty] acting on normalized
// coordinates: src = theta * (x_t, y_t, 1)^T. Corner pixel centers sit at
// +-1 ("align corners"), which makes quarter-turn rotations exact index
// permutations.
//
// Sign convention: the sampler *pulls*, so a module predicting theta applies
// the transform theta^{-1} to image content. Content-transform helpers below
// take care of the inversion explicitly.
struct AffineParams {
  // row-major [a, b, tx, c, d, ty]
  std::array<double, 6> m{1.0, 0.0, 0.0, 0.0, 1.0, 0.0};

  static AffineParams identity() { return AffineParams{}; }

  static AffineParams rotation(double alpha) {
    const double c = std::cos(alpha), s = std::sin(alpha);
    return AffineParams{{c, -s, 0.0, s, c, 0.0}};
  }

  // Exact multiple-of-90-degree rotation (entries exactly 0/+-1).
  static AffineParams rotation_quarter(int quarter_turns) {
    static constexpr double kc[4] = {1.0, 0.0, -1.0, 0.0};
    static constexpr double ks[4] = {0.0, 1.0, 0.0, -1.0};
    const int k = ((quarter_turns % 4) + 4) % 4;
    return AffineParams{{kc[k], -ks[k], 0.0, ks[k], kc[k], 0.0}};
  }

  static AffineParams translation(double tx, double ty) {
    return AffineParams{{1.0, 0.0, tx, 0.0, 1.0, ty}};
  }

  static AffineParams scale(double s) { return AffineParams{{s, 0.0, 0.0, 0.0, s, 0.0}}; }

  double det() const { return m[0] * m[4] - m[1] * m[3]; }

  bool finite() const {
    for (double v : m)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// compose(p, q)(x) = p(q(x))
inline AffineParams compose(const AffineParams& p, const AffineParams& q) {
  AffineParams r;
  r.m[0] = p.m[0] * q.m[0] + p.m[1] * q.m[3];
  r.m[1] = p.m[0] * q.m[1] + p.m[1] * q.m[4];
  r.m[2] = p.m[0] * q.m[2] + p.m[1] * q.m[5] + p.m[2];
  r.m[3] = p.m[3] * q.m[0] + p.m[4] * q.m[3];
  r.m[4] = p.m[3] * q.m[1] + p.m[4] * q.m[4];
  r.m[5] = p.m[3] * q.m[2] + p.m[4] * q.m[5] + p.m[5];
  return r;
}

inline AffineParams invert(const AffineParams& p) {
  const double d = p.det();
  if (std::abs(d) <= 1e-8)
    throw SingularTransformError("invert: |det| = " + std::to_string(std::abs(d)) +
                                 " below 1e-8");
  const double inv = 1.0 / d;
  AffineParams r;
  r.m[0] = p.m[4] * inv;
  r.m[1] = -p.m[1] * inv;
  r.m[3] = -p.m[3] * inv;
  r.m[4] = p.m[0] * inv;
  r.m[2] = -(r.m[0] * p.m[2] + r.m[1] * p.m[5]);
  r.m[5] = -(r.m[3] * p.m[2] + r.m[4] * p.m[5]);
  return r;
}

// Rotation angle in (-pi, pi] read off the first column of the linear part.
// Invariant under uniform scaling.
inline double extract_angle(const AffineParams& p) {
  const double a = p.m[0], c = p.m[3];
  if (std::hypot(a, c) < 1e-8)
    throw DegenerateTransformError("extract_angle: first column of linear part is ~0");
  double ang = std::atan2(c, a);
  if (ang <= -std::numbers::pi) ang = std::numbers::pi;  // branch cut: (-pi, pi]
  return ang;
}

inline Tensor theta_tensor(std::span<const AffineParams> params, bool requires_grad = false) {
  Tensor t({params.size(), 2, 3}, requires_grad);
  for (std::size_t b = 0; b < params.size(); ++b)
    for (std::size_t i = 0; i < 6; ++i) t.values()[b * 6 + i] = params[b].m[i];
  return t;
}

inline std::vector<AffineParams> to_affine_params(const Tensor& theta) {
  detail::require(theta.rank() == 3 && theta.extent(1) == 2 && theta.extent(2) == 3,
                  "to_affine_params: expected [B,2,3], got " + shape_str(theta.shape()));
  std::vector<AffineParams> out(theta.extent(0));
  for (std::size_t b = 0; b < out.size(); ++b)
    for (std::size_t i = 0; i < 6; ++i) out[b].m[i] = theta.values()[b * 6 + i];
  return out;
}

// Normalized source coordinates, [B,H,W,2], stored (y, x) per site.
struct SamplingGrid {
  Tensor coords;

  std::size_t batch() const { return coords.extent(0); }
  std::size_t height() const { return coords.extent(1); }
  std::size_t width() const { return coords.extent(2); }
};

// Position of lattice point j on the [-1,1] axis with endpoints at the
// centers of the corner pixels. A single-pixel extent sits at the center.
inline double lattice_coord(std::size_t j, std::size_t extent) {
  if (extent <= 1) return 0.0;
  return 2.0 * static_cast<double>(j) / static_cast<double>(extent - 1) - 1.0;
}

// Source grid for the transformer: src = theta * (x_t, y_t, 1)^T over the
// uniform target lattice. Differentiable in theta.
inline SamplingGrid affine_grid(Tape& tape, const Tensor& theta, std::size_t out_height,
                                std::size_t out_width) {
  detail::require(theta.rank() == 3 && theta.extent(1) == 2 && theta.extent(2) == 3,
                  "affine_grid: params must be [B,2,3], got " + shape_str(theta.shape()));
  detail::require(out_height >= 1 && out_width >= 1, "affine_grid: output extents must be >= 1");
  for (double v : theta.values())
    if (!std::isfinite(v)) throw InvalidInputError("affine_grid: non-finite transform parameter");

  const std::size_t b = theta.extent(0);
  const bool rg = theta.requires_grad();
  Tensor coords({b, out_height, out_width, 2}, rg);
  const double* th = theta.values().data();
  double* g = coords.values().data();
  for (std::size_t i = 0; i < b; ++i) {
    const double a = th[i * 6 + 0], bb = th[i * 6 + 1], tx = th[i * 6 + 2];
    const double c = th[i * 6 + 3], d = th[i * 6 + 4], ty = th[i * 6 + 5];
    for (std::size_t oy = 0; oy < out_height; ++oy) {
      const double yt = lattice_coord(oy, out_height);
      for (std::size_t ox = 0; ox < out_width; ++ox) {
        const double xt = lattice_coord(ox, out_width);
        double* site = g + ((i * out_height + oy) * out_width + ox) * 2;
        site[0] = c * xt + d * yt + ty;  // y_s
        site[1] = a * xt + bb * yt + tx; // x_s
      }
    }
  }

  if (rg) {
    Tensor th_t = theta, co_t = coords;
    tape.record([th_t, co_t, b, out_height, out_width]() mutable {
      auto& dth = th_t.grad();
      auto& dco = co_t.grad();
      for (std::size_t i = 0; i < b; ++i) {
        double da = 0, db = 0, dtx = 0, dc = 0, dd = 0, dty = 0;
        for (std::size_t oy = 0; oy < out_height; ++oy) {
          const double yt = lattice_coord(oy, out_height);
          for (std::size_t ox = 0; ox < out_width; ++ox) {
            const double xt = lattice_coord(ox, out_width);
            const double* dsite = dco.data() + ((i * out_height + oy) * out_width + ox) * 2;
            dc += dsite[0] * xt;
            dd += dsite[0] * yt;
            dty += dsite[0];
            da += dsite[1] * xt;
            db += dsite[1] * yt;
            dtx += dsite[1];
          }
        }
        dth[i * 6 + 0] += da;
        dth[i * 6 + 1] += db;
        dth[i * 6 + 2] += dtx;
        dth[i * 6 + 3] += dc;
        dth[i * 6 + 4] += dd;
        dth[i * 6 + 5] += dty;
      }
      std::fill(dco.begin(), dco.end(), 0.0);
    });
  }
  return SamplingGrid{coords};
}

// Analytic-transform convenience: same theta replicated across the batch,
// nothing recorded.
inline SamplingGrid affine_grid(const AffineParams& params, std::size_t batch,
                                std::size_t out_height, std::size_t out_width) {
  if (!params.finite()) throw InvalidInputError("affine_grid: non-finite transform parameter");
  std::vector<AffineParams> rep(batch, params);
  Tensor theta = theta_tensor(rep);
  Tape t;
  t.set_recording(false);
  return affine_grid(t, theta, out_height, out_width);
}

// Bilinear interpolation of the four neighbors of each source coordinate.
// Coordinates outside [-1,1] read zeros. Differentiable w.r.t. both the
// input values and the grid coordinates.
inline Tensor bilinear_sample(Tape& tape, const Tensor& input, const SamplingGrid& grid) {
  detail::require(input.rank() == 4,
                  "bilinear_sample: input must be rank 4, got " + shape_str(input.shape()));
  detail::require(grid.coords.rank() == 4 && grid.coords.extent(3) == 2,
                  "bilinear_sample: grid must be [B,H,W,2], got " +
                      shape_str(grid.coords.shape()));
  detail::require(grid.batch() == input.extent(0),
                  "bilinear_sample: grid batch extent " + std::to_string(grid.batch()) +
                      " does not match input batch extent " + std::to_string(input.extent(0)));

  const std::size_t b = input.extent(0), c = input.extent(1), h = input.extent(2),
                    w = input.extent(3);
  const std::size_t oh = grid.height(), ow = grid.width();
  const bool rg = input.requires_grad() || grid.coords.requires_grad();
  Tensor out({b, c, oh, ow}, rg);

  const double sy = 0.5 * static_cast<double>(h - 1);
  const double sx = 0.5 * static_cast<double>(w - 1);
  const double* in = input.values().data();
  const double* g = grid.coords.values().data();
  double* o = out.values().data();

  auto at = [&](std::size_t bi, std::size_t ci, std::ptrdiff_t y, std::ptrdiff_t x) -> double {
    if (y < 0 || y >= static_cast<std::ptrdiff_t>(h) || x < 0 ||
        x >= static_cast<std::ptrdiff_t>(w))
      return 0.0;
    return in[((bi * c + ci) * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)];
  };

  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const double* site = g + ((bi * oh + oy) * ow + ox) * 2;
        const double py = (site[0] + 1.0) * sy;
        const double px = (site[1] + 1.0) * sx;
        const double fy0 = std::floor(py), fx0 = std::floor(px);
        const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(fy0);
        const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(fx0);
        const double fy = py - fy0, fx = px - fx0;
        for (std::size_t ci = 0; ci < c; ++ci) {
          const double v00 = at(bi, ci, y0, x0), v01 = at(bi, ci, y0, x0 + 1);
          const double v10 = at(bi, ci, y0 + 1, x0), v11 = at(bi, ci, y0 + 1, x0 + 1);
          o[((bi * c + ci) * oh + oy) * ow + ox] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) +
                                                   fy * ((1.0 - fx) * v10 + fx * v11);
        }
      }
    }
  }

  if (rg) {
    Tensor in_t = input, grid_t = grid.coords, out_t = out;
    tape.record([in_t, grid_t, out_t, b, c, h, w, oh, ow, sy, sx]() mutable {
      const double* in = in_t.values().data();
      const double* g = grid_t.values().data();
      const bool gi = in_t.requires_grad();
      const bool gg = grid_t.requires_grad();
      auto& dout = out_t.grad();
      auto in_bounds = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
        return y >= 0 && y < static_cast<std::ptrdiff_t>(h) && x >= 0 &&
               x < static_cast<std::ptrdiff_t>(w);
      };
      for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::size_t si = ((bi * oh + oy) * ow + ox) * 2;
            const double py = (g[si] + 1.0) * sy;
            const double px = (g[si + 1] + 1.0) * sx;
            const double fy0 = std::floor(py), fx0 = std::floor(px);
            const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(fy0);
            const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(fx0);
            const double fy = py - fy0, fx = px - fx0;
            double dpy = 0.0, dpx = 0.0;
            for (std::size_t ci = 0; ci < c; ++ci) {
              const double go = dout[((bi * c + ci) * oh + oy) * ow + ox];
              if (go == 0.0) continue;
              const std::size_t base = (bi * c + ci) * h * w;
              double v[2][2] = {{0.0, 0.0}, {0.0, 0.0}};
              for (int dy = 0; dy < 2; ++dy) {
                for (int dx = 0; dx < 2; ++dx) {
                  const std::ptrdiff_t y = y0 + dy, x = x0 + dx;
                  if (!in_bounds(y, x)) continue;
                  const std::size_t idx =
                      base + static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
                  v[dy][dx] = in[idx];
                  if (gi) {
                    const double wy = dy ? fy : 1.0 - fy;
                    const double wx = dx ? fx : 1.0 - fx;
                    in_t.grad()[idx] += go * wy * wx;
                  }
                }
              }
              if (gg) {
                dpy += go * ((1.0 - fx) * (v[1][0] - v[0][0]) + fx * (v[1][1] - v[0][1]));
                dpx += go * ((1.0 - fy) * (v[0][1] - v[0][0]) + fy * (v[1][1] - v[1][0]));
              }
            }
            if (gg) {
              grid_t.grad()[si] += dpy * sy;
              grid_t.grad()[si + 1] += dpx * sx;
            }
          }
        }
      }
      std::fill(dout.begin(), dout.end(), 0.0);
    });
  }
  return out;
}

// theta built from a per-example scalar angle: [cos a, -sin a, 0; sin a, cos a, 0].
inline Tensor rotation_to_theta(Tape& tape, const Tensor& alpha) {
  detail::require(alpha.rank() == 2 && alpha.extent(1) == 1,
                  "rotation_to_theta: alpha must be [B,1], got " + shape_str(alpha.shape()));
  const std::size_t b = alpha.extent(0);
  const bool rg = alpha.requires_grad();
  Tensor theta({b, 2, 3}, rg);
  for (std::size_t i = 0; i < b; ++i) {
    const double a = alpha.values()[i];
    const double co = std::cos(a), si = std::sin(a);
    double* t = theta.values().data() + i * 6;
    t[0] = co;
    t[1] = -si;
    t[2] = 0.0;
    t[3] = si;
    t[4] = co;
    t[5] = 0.0;
  }
  if (rg) {
    Tensor a_t = alpha, th_t = theta;
    tape.record([a_t, th_t, b]() mutable {
      auto& dth = th_t.grad();
      for (std::size_t i = 0; i < b; ++i) {
        const double a = a_t.values()[i];
        const double co = std::cos(a), si = std::sin(a);
        const double* d = dth.data() + i * 6;
        a_t.grad()[i] += -si * (d[0] + d[4]) - co * d[1] + co * d[3];
      }
      std::fill(dth.begin(), dth.end(), 0.0);
    });
  }
  return theta;
}

enum class LocMode { FullAffine, RotationOnly };

// Final regression layer of a localization network. Initialized so the
// predicted transform is the identity: zero weights, identity bias.
struct LocHead {
  LocMode mode = LocMode::FullAffine;
  Tensor weight;  // [6,N] or [1,N]
  Tensor bias;    // [6] or [1]
};

inline LocHead make_localization_head(std::size_t n_in, LocMode mode) {
  LocHead head;
  head.mode = mode;
  const std::size_t n_out = mode == LocMode::FullAffine ? 6 : 1;
  head.weight = Tensor({n_out, n_in}, /*requires_grad=*/true);
  head.bias = Tensor({n_out}, /*requires_grad=*/true);
  if (mode == LocMode::FullAffine) {
    head.bias.values()[0] = 1.0;
    head.bias.values()[4] = 1.0;
  }
  return head;
}

// features [B,N] -> theta [B,2,3]
inline Tensor localization_head(Tape& tape, const Tensor& features, const LocHead& head) {
  detail::require(features.rank() == 2, "localization_head: features must be flattened to [B,N]");
  Tensor raw = dense(tape, features, head.weight, head.bias);
  if (head.mode == LocMode::FullAffine) return reshape(tape, raw, {features.extent(0), 2, 3});
  return rotation_to_theta(tape, raw);
}

// Content-transform helper: returns the image whose content is `params`
// applied to the content of `input` (i.e. samples with the inverse grid).
inline Tensor warp_content(Tape& tape, const Tensor& input, const AffineParams& params) {
  SamplingGrid g = affine_grid(invert(params), input.extent(0), input.extent(2), input.extent(3));
  return bilinear_sample(tape, input, g);
}

}  // namespace stnlab
