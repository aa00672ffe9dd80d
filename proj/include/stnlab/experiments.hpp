#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "stnlab/data.hpp"
#include "stnlab/io.hpp"
#include "stnlab/models.hpp"

namespace stnlab {

enum class OptimizerKind { SgdMomentum, Adam };

struct TrainConfig {
  int epochs = 25;
  int batch_size = 64;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::uint64_t seed = 1;
  std::string model = "cnn";
  // dataset selection + augmentation; consumed by the harness that prepares
  // the data, recorded in run metadata so runs are self-describing
  std::string train_images = "train-images-idx3-ubyte";
  std::string train_labels = "train-labels-idx1-ubyte";
  std::string test_images = "t10k-images-idx3-ubyte";
  std::string test_labels = "t10k-labels-idx1-ubyte";
  TransformRecord::Kind augment = TransformRecord::Kind::None;
  double augment_range = 0.0;  // radians or pixels, by kind
  std::size_t canvas = 0;      // 0 = native extent
  std::size_t train_limit = 0; // 0 = everything
  std::size_t test_limit = 0;

  void validate() const {
    if (!(learning_rate > 0.0))
      throw InvalidInputError("train config: learning_rate must be > 0");
    if (batch_size < 1) throw InvalidInputError("train config: batch_size must be >= 1");
    if (epochs < 0) throw InvalidInputError("train config: epochs must be >= 0");
  }
};

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  double accuracy = 0.0;
};

struct TrainResult {
  ModelInstance model;
  std::vector<EpochStats> history;
};

namespace detail {

struct OptimizerState {
  std::vector<std::vector<double>> m, v;
  std::int64_t t = 0;
};

inline void optimizer_step(ModelInstance& model, OptimizerState& st, const TrainConfig& cfg) {
  if (st.m.empty()) {
    st.m.resize(model.params.size());
    st.v.resize(model.params.size());
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      st.m[i].assign(model.params[i].second.numel(), 0.0);
      st.v[i].assign(model.params[i].second.numel(), 0.0);
    }
  }
  ++st.t;
  if (cfg.optimizer == OptimizerKind::Adam) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      Tensor& p = model.params[i].second;
      const auto& g = p.grad();
      auto& m = st.m[i];
      auto& v = st.v[i];
      auto& w = p.values();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
        w[j] -= cfg.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
      }
    }
  } else {
    constexpr double mu = 0.9;
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      Tensor& p = model.params[i].second;
      const auto& g = p.grad();
      auto& vel = st.m[i];
      auto& w = p.values();
      for (std::size_t j = 0; j < w.size(); ++j) {
        vel[j] = mu * vel[j] + g[j];
        w[j] -= cfg.learning_rate * vel[j];
      }
    }
  }
}

}  // namespace detail

// Deterministic given (cfg.seed, data): init and shuffling draw from named
// streams of the seed. Gradients are zeroed before every step; the tape is
// dropped after each step.
inline TrainResult train(const NetworkSpec& spec, const TrainConfig& cfg,
                         const LabeledDataset& data) {
  cfg.validate();
  detail::require(data.size() > 0, "train: dataset is empty");
  TrainResult result;
  result.model = build(spec, cfg.seed);
  detail::OptimizerState opt;
  Rng shuffle_rng = Rng::stream(cfg.seed, "shuffle");

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::vector<std::size_t> idx(order.begin() + start, order.begin() + end);
      Tensor batch = data.batch(idx);
      std::vector<int> labels(idx.size());
      for (std::size_t k = 0; k < idx.size(); ++k) labels[k] = data.labels[idx[k]];

      Tape tape;
      ForwardResult fr = forward(tape, result.model, batch);
      Tensor loss = softmax_cross_entropy(tape, fr.logits, labels);
      const double loss_val = loss.item();
      if (!std::isfinite(loss_val))
        throw DivergenceError("training loss became non-finite", epoch);
      loss_sum += loss_val * static_cast<double>(idx.size());

      const std::size_t k = fr.logits.extent(1);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const double* row = fr.logits.values().data() + i * k;
        std::size_t arg = 0;
        for (std::size_t j = 1; j < k; ++j)
          if (row[j] > row[arg]) arg = j;
        if (static_cast<int>(arg) == labels[i]) ++correct;
      }

      for (auto& [_, p] : result.model.params) p.zero_grad();
      backward(tape, loss);
      detail::optimizer_step(result.model, opt, cfg);
    }
    result.history.push_back(EpochStats{epoch, loss_sum / static_cast<double>(data.size()),
                                        static_cast<double>(correct) /
                                            static_cast<double>(data.size())});
  }
  return result;
}

struct EvalResult {
  double error_rate = 0.0;
  std::vector<std::vector<std::int64_t>> confusion;  // [true][predicted]
};

inline EvalResult evaluate(const ModelInstance& model, const LabeledDataset& data,
                           std::size_t batch_size = 256) {
  const std::size_t k = static_cast<std::size_t>(model.spec.num_classes);
  EvalResult r;
  r.confusion.assign(k, std::vector<std::int64_t>(k, 0));
  std::size_t wrong = 0;
  Tape tape;
  tape.set_recording(false);
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    std::vector<std::size_t> idx(end - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    Tensor batch = data.batch(idx);
    ForwardResult fr = forward(tape, model, batch);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const double* row = fr.logits.values().data() + i * k;
      std::size_t arg = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (row[j] > row[arg]) arg = j;
      const int truth = data.labels[idx[i]];
      r.confusion[static_cast<std::size_t>(truth)][arg]++;
      if (arg != static_cast<std::size_t>(truth)) ++wrong;
    }
  }
  r.error_rate = data.size() ? static_cast<double>(wrong) / static_cast<double>(data.size()) : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Feature-map alignment analysis: both sides of the non-alignment inequality,
// plus the best purely spatial warp over a searched family, plus the residual
// after a supplied channel permutation.

struct AlignmentOptions {
  int rotation_steps = 72;  // 5-degree grid over the full circle
  int max_shift = 2;        // feature-map pixels, each axis
  std::vector<int> channel_perm;  // empty = identity
};

struct AlignmentRow {
  std::size_t example = 0;
  double residual_aligned = 0.0;
  double residual_best_spatial = 0.0;
  double channel_swap_residual = 0.0;
  double best_rotation_deg = 0.0;
  int best_shift_y = 0, best_shift_x = 0;
};

struct AlignmentReport {
  std::vector<AlignmentRow> rows;
  double median_aligned = 0.0;
  double median_best_spatial = 0.0;
  double median_channel_swap = 0.0;
};

namespace detail {

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Relative L2 over the masked region; empty or zero-reference masks give
// +inf so a vacuous warp can never look aligned.
inline double masked_relative_l2(const double* a, const double* f, std::size_t channels,
                                 std::size_t plane, const std::vector<unsigned char>& mask,
                                 const std::vector<int>& perm) {
  double num = 0.0, den = 0.0;
  for (std::size_t c = 0; c < channels; ++c) {
    const std::size_t ac = perm.empty() ? c : static_cast<std::size_t>(perm[c]);
    const double* ap = a + ac * plane;
    const double* fp = f + c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      if (!mask[i]) continue;
      const double d = ap[i] - fp[i];
      num += d * d;
      den += fp[i] * fp[i];
    }
  }
  if (den == 0.0) return num == 0.0 ? std::numeric_limits<double>::infinity() : 1e300;
  return std::sqrt(num / den);
}

}  // namespace detail

inline AlignmentReport alignment_analysis(const ModelInstance& model, int layer,
                                          const AffineParams& transform,
                                          const LabeledDataset& data,
                                          const AlignmentOptions& opt = {}) {
  detail::require(layer >= 0 && layer <= model.spec.conv_count(),
                  "alignment_analysis: layer out of range");
  const AffineParams t_inverse = invert(transform);  // also the invertibility gate
  detail::require(data.size() > 0, "alignment_analysis: dataset is empty");
  if (!opt.channel_perm.empty()) {
    // permutation over the tapped feature channels, validated below once the
    // channel extent is known
  }

  Tape tape;
  tape.set_recording(false);
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Tensor batch = data.batch(idx);
  Tensor f = feature_at_layer(tape, model, batch, layer);
  Tensor t_batch = warp_content(tape, batch, transform);
  Tensor ft = feature_at_layer(tape, model, t_batch, layer);

  const std::size_t n = f.extent(0), channels = f.extent(1), h = f.extent(2), w = f.extent(3);
  const std::size_t plane = h * w;
  std::vector<int> perm = opt.channel_perm;
  if (!perm.empty()) {
    detail::require(perm.size() == channels,
                    "alignment_analysis: channel permutation must cover all channels");
    for (int p : perm)
      detail::require(p >= 0 && static_cast<std::size_t>(p) < channels,
                      "alignment_analysis: channel permutation entry out of range");
  } else {
    perm.resize(channels);
    for (std::size_t c = 0; c < channels; ++c) perm[c] = static_cast<int>(c);
  }

  // Warp candidates applied to the transformed feature map. The sampling
  // theta *is* the content transform's inverse; the aligned case uses
  // `transform` itself so no inversion noise enters the reference residual.
  struct Candidate {
    AffineParams theta;
    double rot_deg;
    int dy, dx;
  };
  std::vector<Candidate> candidates;
  candidates.push_back({transform, 0.0, 0, 0});  // content warp T_g^{-1}
  const double px_y = h > 1 ? 2.0 / static_cast<double>(h - 1) : 0.0;
  const double px_x = w > 1 ? 2.0 / static_cast<double>(w - 1) : 0.0;
  for (int k = 0; k < opt.rotation_steps; ++k) {
    const double deg = 360.0 * k / opt.rotation_steps;
    const AffineParams rot = AffineParams::rotation(deg * std::numbers::pi / 180.0);
    for (int dy = -opt.max_shift; dy <= opt.max_shift; ++dy) {
      for (int dx = -opt.max_shift; dx <= opt.max_shift; ++dx) {
        const AffineParams shift = AffineParams::translation(dx * px_x, dy * px_y);
        candidates.push_back({invert(compose(shift, rot)), deg, dy, dx});
      }
    }
  }

  AlignmentReport report;
  report.rows.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    report.rows[i].example = i;
    report.rows[i].residual_best_spatial = std::numeric_limits<double>::infinity();
  }

  const std::vector<int> no_perm;
  std::vector<unsigned char> mask(plane);
  for (std::size_t ci = 0; ci < candidates.size(); ++ci) {
    const Candidate& cand = candidates[ci];
    SamplingGrid grid = affine_grid(cand.theta, n, h, w);
    // mask: sites whose source coordinate stays inside [-1,1]^2 (identical
    // across the batch since the candidate theta is shared)
    const double* g0 = grid.coords.values().data();
    for (std::size_t s = 0; s < plane; ++s)
      mask[s] = std::abs(g0[2 * s]) <= 1.0 && std::abs(g0[2 * s + 1]) <= 1.0;
    Tensor warped = bilinear_sample(tape, ft, grid);
    for (std::size_t i = 0; i < n; ++i) {
      const double* a = warped.values().data() + i * channels * plane;
      const double* fp = f.values().data() + i * channels * plane;
      const double r = detail::masked_relative_l2(a, fp, channels, plane, mask, no_perm);
      AlignmentRow& row = report.rows[i];
      if (ci == 0) {
        row.residual_aligned = r;
        row.channel_swap_residual =
            detail::masked_relative_l2(a, fp, channels, plane, mask, perm);
      }
      if (r < row.residual_best_spatial) {
        row.residual_best_spatial = r;
        row.best_rotation_deg =
            ci == 0 ? extract_angle(t_inverse) * 180.0 / std::numbers::pi : cand.rot_deg;
        row.best_shift_y = cand.dy;
        row.best_shift_x = cand.dx;
      }
    }
  }

  std::vector<double> al, bs, cs;
  for (const auto& row : report.rows) {
    al.push_back(row.residual_aligned);
    bs.push_back(row.residual_best_spatial);
    cs.push_back(row.channel_swap_residual);
  }
  report.median_aligned = detail::median_of(al);
  report.median_best_spatial = detail::median_of(bs);
  report.median_channel_swap = detail::median_of(cs);
  return report;
}

// ---------------------------------------------------------------------------
// Angle-prediction sweep

struct AngleSweepRow {
  std::size_t example = 0;
  double applied = 0.0;    // radians
  double predicted = 0.0;  // radians; NaN when the predicted theta was degenerate
  bool valid = true;
};

struct AngleSweep {
  std::vector<AngleSweepRow> rows;
  double circular_correlation = 0.0;
  std::string variant;
  // The sampler pulls: predicted theta maps output coordinates to source
  // coordinates, so the module applies theta^{-1} to image content. Under
  // this convention a perfectly aligning module predicts theta(applied).
  std::string sign_convention = "theta_pull";
};

inline std::vector<double> sweep_angles(int count) {
  std::vector<double> a(count);
  for (int k = 0; k < count; ++k)
    a[k] = -std::numbers::pi + 2.0 * std::numbers::pi * k / count;
  return a;
}

// T-linear circular association (Fisher & Lee), computed on unit-circle
// embeddings. Degenerate spreads give 0.
inline double circular_correlation(const std::vector<double>& phi,
                                   const std::vector<double>& psi) {
  detail::require(phi.size() == psi.size(), "circular_correlation: length mismatch");
  if (phi.empty()) return 0.0;
  double sx = 0.0, cx = 0.0, sy = 0.0, cy = 0.0;
  for (std::size_t i = 0; i < phi.size(); ++i) {
    sx += std::sin(phi[i]);
    cx += std::cos(phi[i]);
    sy += std::sin(psi[i]);
    cy += std::cos(psi[i]);
  }
  const double mx = std::atan2(sx, cx), my = std::atan2(sy, cy);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < phi.size(); ++i) {
    const double a = std::sin(phi[i] - mx), b = std::sin(psi[i] - my);
    sxy += a * b;
    sxx += a * a;
    syy += b * b;
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  if (sxx == syy) return sxy / sxx;  // exact for psi = +-phi shifted by a constant
  return sxy / (std::sqrt(sxx) * std::sqrt(syy));
}

using ThetaPredictor =
    std::function<std::vector<AffineParams>(const Tensor& rotated_batch, double applied_angle)>;

inline AngleSweep angle_sweep_impl(const ThetaPredictor& predict, const LabeledDataset& digits,
                                   const std::vector<double>& angles) {
  detail::require(digits.size() > 0, "angle_sweep: no digits");
  detail::require(!angles.empty(), "angle_sweep: no angles");
  AngleSweep sweep;
  std::vector<double> phi, psi;
  for (double angle : angles) {
    std::vector<TransformRecord> recs(digits.size());
    for (auto& r : recs) {
      r.kind = TransformRecord::Kind::Rotation;
      r.angle = angle;
    }
    const LabeledDataset rotated = apply_transforms(digits, recs);
    std::vector<std::size_t> idx(digits.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const std::vector<AffineParams> thetas = predict(rotated.batch(idx), angle);
    detail::require(thetas.size() == digits.size(), "angle_sweep: predictor size mismatch");
    for (std::size_t i = 0; i < thetas.size(); ++i) {
      AngleSweepRow row;
      row.example = i;
      row.applied = angle;
      try {
        row.predicted = extract_angle(thetas[i]);
        row.valid = true;
        phi.push_back(row.applied);
        psi.push_back(row.predicted);
      } catch (const DegenerateTransformError&) {
        row.predicted = std::numeric_limits<double>::quiet_NaN();
        row.valid = false;
      }
      sweep.rows.push_back(row);
    }
  }
  sweep.circular_correlation = circular_correlation(phi, psi);
  return sweep;
}

inline AngleSweep angle_sweep(const ModelInstance& model, const LabeledDataset& digits,
                              const std::vector<double>& angles) {
  detail::require(model.spec.variant != Variant::Plain,
                  "angle_sweep: model must be an ST variant");
  AngleSweep sweep = angle_sweep_impl(
      [&model](const Tensor& batch, double) {
        Tape tape;
        tape.set_recording(false);
        ForwardResult fr = forward(tape, model, batch);
        return to_affine_params(fr.theta);
      },
      digits, angles);
  sweep.variant = model.spec.name;
  return sweep;
}

// ---------------------------------------------------------------------------
// Fig-2 style visualisation: transformed input / the model's own correction /
// the ideal correction, one column per example.

struct PgmImage {
  std::size_t width = 0, height = 0;
  std::vector<unsigned char> bytes;
};

inline PgmImage render_alignment_grid(const ModelInstance& model, const LabeledDataset& examples,
                                      const AffineParams& transform, std::size_t gutter = 2) {
  detail::require(examples.size() >= 1 && examples.size() <= 16,
                  "render_alignment_grid: need 1..16 examples");
  const std::size_t n = examples.size(), h = examples.height(), w = examples.width();
  Tape tape;
  tape.set_recording(false);

  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Tensor batch = examples.batch(idx);
  Tensor transformed = warp_content(tape, batch, transform);

  Tensor corrected;
  if (model.spec.variant == Variant::Plain) {
    corrected = transformed;
  } else {
    ForwardResult fr = forward(tape, model, transformed);
    SamplingGrid grid = affine_grid(tape, fr.theta, h, w);
    corrected = bilinear_sample(tape, transformed, grid);
  }
  SamplingGrid ideal_grid = affine_grid(transform, n, h, w);
  Tensor ideal = bilinear_sample(tape, transformed, ideal_grid);

  PgmImage img;
  img.width = n * (w + 2 * gutter);
  img.height = 3 * (h + 2 * gutter);
  img.bytes.assign(img.width * img.height, 0);
  const Tensor* rows[3] = {&transformed, &corrected, &ideal};
  for (int r = 0; r < 3; ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* src = rows[r]->values().data() + i * h * w;
      const std::size_t oy = r * (h + 2 * gutter) + gutter;
      const std::size_t ox = i * (w + 2 * gutter) + gutter;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          img.bytes[(oy + y) * img.width + ox + x] = static_cast<unsigned char>(
              std::lround(std::clamp(src[y * w + x], 0.0, 1.0) * 255.0));
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// CSV emitters (fixed headers; the strict reader round-trips all of these)

inline void history_csv(const std::filesystem::path& path,
                        const std::vector<EpochStats>& history) {
  CsvWriter csv(path);
  csv.header({"epoch", "mean_loss", "accuracy"});
  for (const auto& e : history)
    csv.row({std::to_string(e.epoch), format_double(e.mean_loss), format_double(e.accuracy)});
  csv.close();
}

inline void confusion_csv(const std::filesystem::path& path,
                          const std::vector<std::vector<std::int64_t>>& confusion) {
  CsvWriter csv(path);
  std::vector<std::string> header = {"true_label"};
  for (std::size_t j = 0; j < confusion.size(); ++j)
    header.push_back("pred_" + std::to_string(j));
  csv.header(header);
  for (std::size_t i = 0; i < confusion.size(); ++i) {
    std::vector<std::string> row = {std::to_string(i)};
    for (std::int64_t v : confusion[i]) row.push_back(std::to_string(v));
    csv.row(row);
  }
  csv.close();
}

inline void alignment_csv(const std::filesystem::path& path, const AlignmentReport& report) {
  CsvWriter csv(path);
  csv.header({"example", "residual_aligned", "residual_best_spatial", "best_rotation_deg",
              "best_shift_y", "best_shift_x", "channel_swap_residual"});
  for (const auto& r : report.rows)
    csv.row({std::to_string(r.example), format_double(r.residual_aligned),
             format_double(r.residual_best_spatial), format_double(r.best_rotation_deg),
             std::to_string(r.best_shift_y), std::to_string(r.best_shift_x),
             format_double(r.channel_swap_residual)});
  csv.close();
}

inline void sweep_csv(const std::filesystem::path& path, const AngleSweep& sweep) {
  CsvWriter csv(path);
  csv.header({"example", "applied_angle_rad", "predicted_angle_rad", "valid", "variant",
              "sign_convention"});
  for (const auto& r : sweep.rows)
    csv.row({std::to_string(r.example), format_double(r.applied), format_double(r.predicted),
             r.valid ? "1" : "0", sweep.variant, sweep.sign_convention});
  csv.close();
}

}  // namespace stnlab
