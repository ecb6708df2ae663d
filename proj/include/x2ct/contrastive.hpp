#pragma once

// Symmetric InfoNCE, the weighted tri-modal objective, AdamW, and the two
// training stages: teacher pre-alignment of volume/report encoders, then
// student training against the frozen teachers.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "x2ct/encoders.hpp"
#include "x2ct/error.hpp"
#include "x2ct/rng.hpp"
#include "x2ct/tensor.hpp"

namespace x2ct {

struct LossWeights {
  double alpha = 0.0;  // volume-report
  double beta = 1.0;   // radiograph-report
  double gamma = 1.0;  // radiograph-volume

  void validate() const {
    if (alpha < 0 || beta < 0 || gamma < 0) throw ConfigError("loss weights must be non-negative");
    if (alpha == 0 && beta == 0 && gamma == 0) throw ConfigError("at least one loss weight must be positive");
  }
};

struct TrainConfig {
  double tau = 0.07;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  Reduction reduction = Reduction::Mean;
  std::uint64_t seed = 7;

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("train.tau must be positive");
    if (batch_size < 2) throw ConfigError("train.batch_size must be >= 2");
    if (!(lr >= 0.0)) throw ConfigError("train.lr must be non-negative");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be non-negative");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
      throw ConfigError("train.adam_beta1/adam_beta2 must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
  }
};

// ---- losses -----------------------------------------------------------------

inline void require_unit_rows(const Tensor& h, const char* what) {
  for (std::size_t r = 0; r < h.rows(); ++r) {
    double ss = 0.0;
    for (double v : h.row(r)) ss += v * v;
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-6)
      throw NumericError(std::string(what) + ": row " + std::to_string(r) + " is not unit-norm");
  }
}

// Symmetric InfoNCE with positives on the diagonal:
// 0.5 * [xent_rows(S/tau) + xent_rows(S^T/tau)], S = hA hB^T.
inline Var info_nce_loss(Var ha, Var hb, double tau, Reduction reduction = Reduction::Mean) {
  const Tensor& A = ha.tape->value(ha);
  const Tensor& B = hb.tape->value(hb);
  if (A.rank() != 2 || A.shape != B.shape)
    throw ShapeError("info_nce_loss: batches differ, " + shape_str(A.shape) + " vs " + shape_str(B.shape));
  if (A.rows() < 2) throw ShapeError("info_nce_loss: needs at least 2 pairs for negatives");
  if (!(tau > 0.0)) throw NumericError("info_nce_loss: tau must be positive");
  require_unit_rows(A, "info_nce_loss");
  require_unit_rows(B, "info_nce_loss");
  std::vector<std::size_t> diag(A.rows());
  std::iota(diag.begin(), diag.end(), std::size_t{0});
  Var logits = scale(similarity(ha, hb), 1.0 / tau);
  Var forward = softmax_cross_entropy_rows(logits, diag, reduction);
  Var backward = softmax_cross_entropy_rows(transpose(logits), diag, reduction);
  return scale(add(forward, backward), 0.5);
}

struct X2ctLoss {
  Var total;
  // Unweighted term values; NaN when the term's weight is zero.
  double volume_report = std::numeric_limits<double>::quiet_NaN();
  double radiograph_report = std::numeric_limits<double>::quiet_NaN();
  double radiograph_volume = std::numeric_limits<double>::quiet_NaN();
};

// alpha*L(C,R) + beta*L(X,R) + gamma*L(X,C); zero-weight terms are not recorded.
inline X2ctLoss x2ct_loss(Var hc, Var hr, Var hx, const LossWeights& w, double tau,
                          Reduction reduction = Reduction::Mean) {
  w.validate();
  Tape& tape = *hc.tape;
  const auto n = tape.value(hc).rows();
  if (tape.value(hr).rows() != n || tape.value(hx).rows() != n)
    throw ShapeError("x2ct_loss: batch sizes differ across modalities");
  X2ctLoss out;
  std::vector<Var> parts;
  auto term = [&](double weight, Var a, Var b, double& slot) {
    if (weight == 0.0) return;
    Var l = info_nce_loss(a, b, tau, reduction);
    slot = tape.value(l).item();
    parts.push_back(weight == 1.0 ? l : scale(l, weight));
  };
  term(w.alpha, hc, hr, out.volume_report);
  term(w.beta, hx, hr, out.radiograph_report);
  term(w.gamma, hx, hc, out.radiograph_volume);
  out.total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) out.total = add(out.total, parts[i]);
  return out;
}

// ---- optimizer --------------------------------------------------------------

struct AdamState {
  ParamMap m;
  ParamMap v;
  std::uint64_t t = 0;
};

// One AdamW step with bias-corrected moments and decoupled weight decay:
// p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p.
// Decay applies to weight matrices (rank 2) only.
inline void adamw_step(ParamMap& params, const ParamMap& grads, AdamState& state, const TrainConfig& cfg) {
  for (const auto& [name, g] : grads) {
    for (double x : g.data)
      if (!std::isfinite(x)) throw NumericError("non-finite gradient in tensor '" + name + "'");
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.t));
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Tensor& g = git->second;
    if (g.shape != p.shape)
      throw ShapeError("adamw_step: gradient for '" + name + "' is " + shape_str(g.shape) + ", parameter is " +
                       shape_str(p.shape));
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.shape != p.shape) m = Tensor(p.shape);
    if (v.shape != p.shape) v = Tensor(p.shape);
    const double decay = p.rank() == 2 ? cfg.lr * cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m.data[i] = cfg.adam_beta1 * m.data[i] + (1.0 - cfg.adam_beta1) * g.data[i];
      v.data[i] = cfg.adam_beta2 * v.data[i] + (1.0 - cfg.adam_beta2) * g.data[i] * g.data[i];
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      p.data[i] = p.data[i] - cfg.lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps)) - decay * p.data[i];
    }
  }
}

// ---- training ---------------------------------------------------------------

struct TrainLog {
  struct Row {
    std::size_t epoch;
    std::string term;
    double value;
  };
  std::vector<Row> rows;

  void add(std::size_t epoch, std::string term, double value) { rows.push_back({epoch, std::move(term), value}); }

  double value(std::size_t epoch, const std::string& term) const {
    for (const auto& r : rows)
      if (r.epoch == epoch && r.term == term) return r.value;
    return std::numeric_limits<double>::quiet_NaN();
  }

  std::string csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,term,value\n";
    for (const auto& r : rows) os << r.epoch << ',' << r.term << ',' << r.value << '\n';
    return os.str();
  }
};

namespace detail {

inline Tensor gather_rows(const Tensor& src, const std::vector<std::size_t>& idx) {
  Tensor out({idx.size(), src.cols()});
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy(src.row(idx[i]).begin(), src.row(idx[i]).end(), out.row(i).begin());
  return out;
}

// Seeded epoch batches; the trailing incomplete batch is dropped unless the
// whole set is smaller than one batch.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                           std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  SplitMix64 rng(derive_seed(seed, 1000 + epoch));
  shuffle(order, rng);
  std::vector<std::vector<std::size_t>> batches;
  if (n < batch_size) {
    batches.push_back(order);
    return batches;
  }
  for (std::size_t start = 0; start + batch_size <= n; start += batch_size)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(start + batch_size));
  return batches;
}

inline void check_finite(double v, const std::string& what, std::size_t epoch) {
  if (!std::isfinite(v)) throw NumericError(what + " became non-finite in epoch " + std::to_string(epoch));
}

}  // namespace detail

// Train-split inputs shared by both stages; rows are index-matched triplets.
struct TripletFeatures {
  Tensor volume_features;  // n x kVolumeFeatures
  Tensor report_counts;    // n x vocab
  std::vector<Tensor> patches;  // per radiograph, (patches_per_image x patch_pixels); stage 2 only
};

// Stage 1: aligns the volume and report encoders with alpha = 1, beta = gamma = 0.
// Returns frozen parameters.
inline EncoderParams train_stage1_teachers(const TripletFeatures& data, const ModelConfig& model,
                                           const TrainConfig& cfg, TrainLog* log = nullptr) {
  cfg.validate();
  const std::size_t n = data.volume_features.rows();
  if (n < 2) throw DataError("teacher training needs at least 2 training triplets");
  if (data.report_counts.rows() != n) throw ShapeError("teacher training: feature row counts differ");
  EncoderParams params = init_teachers(data.report_counts.cols(), model.embed_dim, derive_seed(cfg.seed, 11));
  fit_volume_standardizer(params.tensors, data.volume_features);
  const Tensor volume_inputs = standardize_volume_features(data.volume_features, params);
  AdamState state;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& batch : detail::epoch_batches(n, cfg.batch_size, cfg.seed, epoch)) {
      Tape tape;
      const auto vol = linear_leaves(tape, params, "volume", true);
      const auto rep = linear_leaves(tape, params, "report", true);
      Var hc = linear_encoder_forward(vol, tape.leaf(detail::gather_rows(volume_inputs, batch)));
      Var hr = linear_encoder_forward(rep, tape.leaf(detail::gather_rows(data.report_counts, batch)));
      Var loss = info_nce_loss(hc, hr, cfg.tau, cfg.reduction);
      const double value = tape.value(loss).item();
      detail::check_finite(value, "teacher loss", epoch);
      tape.backward(loss);
      ParamMap grads{{"volume.weight", tape.grad(vol.w)}, {"volume.bias", tape.grad(vol.b)},
                     {"report.weight", tape.grad(rep.w)}, {"report.bias", tape.grad(rep.b)}};
      adamw_step(params.tensors, grads, state, cfg);
      sum += value;
      ++count;
    }
    if (log) {
      log->add(epoch, "L_CR", sum / static_cast<double>(count));
      log->add(epoch, "total", sum / static_cast<double>(count));
    }
  }
  params.trainable = false;
  return params;
}

// Stage 2: trains the radiograph encoder on beta*L(X,R) + gamma*L(X,C)
// (+ alpha*L(C,R), which carries no gradient) against frozen teachers.
// Throws ContractError if the teachers are not frozen or change.
inline EncoderParams train_stage2_student(const TripletFeatures& data, const EncoderParams& teachers,
                                          const ModelConfig& model, const TrainConfig& cfg, const LossWeights& weights,
                                          TrainLog* log = nullptr) {
  cfg.validate();
  weights.validate();
  model.validate();
  if (teachers.trainable) throw ContractError("student training requires frozen teachers");
  const std::string teacher_hash = checkpoint_hash(teachers.tensors);
  const std::size_t n = data.patches.size();
  if (n < 2) throw DataError("student training needs at least 2 training triplets");
  if (data.volume_features.rows() != n || data.report_counts.rows() != n)
    throw ShapeError("student training: modality row counts differ");

  const Tensor hc_all = embed_volume_features(data.volume_features, teachers);
  const Tensor hr_all = embed_linear(teachers, "report", data.report_counts);

  EncoderParams params = init_student(model, derive_seed(cfg.seed, 12));
  AdamState state;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double sum_total = 0.0, sum_cr = 0.0, sum_xr = 0.0, sum_xc = 0.0;
    std::size_t count = 0;
    for (const auto& batch : detail::epoch_batches(n, cfg.batch_size, cfg.seed, epoch)) {
      Tape tape;
      std::vector<const Tensor*> parts;
      for (auto i : batch) parts.push_back(&data.patches[i]);
      const auto sv = student_leaves(tape, params, true);
      Var hx = student_forward(sv, tape.leaf(stack_rows(parts)), model.patches_per_image());
      Var hc = tape.leaf(detail::gather_rows(hc_all, batch));
      Var hr = tape.leaf(detail::gather_rows(hr_all, batch));
      const X2ctLoss loss = x2ct_loss(hc, hr, hx, weights, cfg.tau, cfg.reduction);
      const double value = tape.value(loss.total).item();
      detail::check_finite(value, "student loss", epoch);
      tape.backward(loss.total);
      ParamMap grads{{"student.patch.weight", tape.grad(sv.patch_w)}, {"student.patch.bias", tape.grad(sv.patch_b)},
                     {"student.fc1.weight", tape.grad(sv.fc1_w)},     {"student.fc1.bias", tape.grad(sv.fc1_b)},
                     {"student.fc2.weight", tape.grad(sv.fc2_w)},     {"student.fc2.bias", tape.grad(sv.fc2_b)}};
      adamw_step(params.tensors, grads, state, cfg);
      sum_total += value;
      sum_cr += loss.volume_report;
      sum_xr += loss.radiograph_report;
      sum_xc += loss.radiograph_volume;
      ++count;
    }
    if (log) {
      const double k = static_cast<double>(count);
      if (weights.alpha != 0.0) log->add(epoch, "L_CR", sum_cr / k);
      if (weights.beta != 0.0) log->add(epoch, "L_XR", sum_xr / k);
      if (weights.gamma != 0.0) log->add(epoch, "L_XC", sum_xc / k);
      log->add(epoch, "total", sum_total / k);
    }
  }
  if (checkpoint_hash(teachers.tensors) != teacher_hash)
    throw ContractError("teacher parameters changed during student training");
  params.trainable = true;
  return params;
}

}  // namespace x2ct
