#pragma once

// Evaluation protocols: top-k cross-modal retrieval, zero-shot and
// linear-probe multi-label classification, ranking metrics and the fast
// DeLong comparison of correlated AUCs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "x2ct/encoders.hpp"
#include "x2ct/error.hpp"
#include "x2ct/rng.hpp"
#include "x2ct/tensor.hpp"

namespace x2ct {

// A metric that is undefined for the given labels (e.g. one class only).
struct UndefinedMetric : DataError {
  using DataError::DataError;
};

// ---- retrieval --------------------------------------------------------------

struct RetrievalResult {
  std::size_t k = 0;
  double recall = 0.0;
  std::string direction;  // e.g. "X->C"
  std::size_t n_queries = 0;
};

inline double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  return denom > 0.0 ? dot / denom : 0.0;
}

// 0-based rank of each query's true match when the gallery is sorted by
// descending cosine similarity, ties broken by ascending gallery index.
inline std::vector<std::size_t> match_ranks(const Tensor& queries, const Tensor& gallery,
                                            const std::vector<std::size_t>& true_match) {
  if (queries.cols() != gallery.cols()) throw ShapeError("retrieval: query and gallery widths differ");
  if (true_match.size() != queries.rows()) throw DataError("retrieval: one true match is needed per query");
  std::vector<std::size_t> ranks(queries.rows());
  std::vector<double> sims(gallery.rows());
  for (std::size_t q = 0; q < queries.rows(); ++q) {
    const std::size_t target = true_match[q];
    if (target >= gallery.rows()) throw DataError("retrieval: match index " + std::to_string(target) + " not in gallery");
    for (std::size_t g = 0; g < gallery.rows(); ++g) sims[g] = cosine(queries.row(q), gallery.row(g));
    const double s = sims[target];
    std::size_t rank = 0;
    for (std::size_t g = 0; g < gallery.rows(); ++g)
      if (sims[g] > s || (sims[g] == s && g < target)) ++rank;
    ranks[q] = rank;
  }
  return ranks;
}

inline RetrievalResult topk_recall(const Tensor& queries, const Tensor& gallery,
                                   const std::vector<std::size_t>& true_match, std::size_t k,
                                   std::string direction = {}) {
  if (k < 1 || k > gallery.rows())
    throw DataError("retrieval: k=" + std::to_string(k) + " outside [1, " + std::to_string(gallery.rows()) + "]");
  const auto ranks = match_ranks(queries, gallery, true_match);
  std::size_t hits = 0;
  for (auto r : ranks) hits += r < k ? 1 : 0;
  return {k, static_cast<double>(hits) / static_cast<double>(ranks.size()), std::move(direction), ranks.size()};
}

inline std::vector<std::size_t> identity_matches(std::size_t n) {
  std::vector<std::size_t> m(n);
  std::iota(m.begin(), m.end(), std::size_t{0});
  return m;
}

// ---- zero-shot --------------------------------------------------------------

struct PromptEmbeddings {
  Tensor positive;  // L x d, "<Label> is present."
  Tensor negative;  // L x d, "No <label>."
};

inline PromptEmbeddings zero_shot_prompts(const LabelSpace& space, const ReportVocab& vocab,
                                          const EncoderParams& report_encoder) {
  std::vector<std::string> pos, neg;
  for (const auto& n : space.names) {
    pos.push_back(positive_sentence(n));
    neg.push_back(negative_sentence(n));
  }
  return {embed_reports(pos, vocab, report_encoder), embed_reports(neg, vocab, report_encoder)};
}

// score(i, l) = softmax over {s+, s-} / tau of the positive prompt.
inline Tensor zero_shot_scores(const Tensor& images, const PromptEmbeddings& prompts, double tau) {
  const std::size_t L = prompts.positive.rows();
  if (prompts.negative.rows() != L) throw ShapeError("zero-shot: prompt pair counts differ");
  Tensor out({images.rows(), L});
  for (std::size_t i = 0; i < images.rows(); ++i)
    for (std::size_t l = 0; l < L; ++l) {
      const double sp = cosine(images.row(i), prompts.positive.row(l)) / tau;
      const double sn = cosine(images.row(i), prompts.negative.row(l)) / tau;
      out(i, l) = 1.0 / (1.0 + std::exp(sn - sp));
    }
  return out;
}

// ---- ranking metrics --------------------------------------------------------

// 1-based ranks in ascending order of value, ties averaged.
inline std::vector<double> midranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline void count_classes(std::span<const int> labels, std::size_t& pos, std::size_t& neg) {
  pos = neg = 0;
  for (int y : labels) (y ? pos : neg) += 1;
}

// Mann-Whitney AUC with midranks.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("auc: scores and labels differ in length");
  std::size_t m, n;
  count_classes(labels, m, n);
  if (m == 0 || n == 0) throw UndefinedMetric("auc: both classes must be present");
  const auto r = midranks(scores);
  double sum = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i)
    if (labels[i]) sum += r[i];
  const double md = static_cast<double>(m), nd = static_cast<double>(n);
  return (sum - md * (md + 1.0) / 2.0) / (md * nd);
}

// Order used wherever a single ranking is needed: descending score, then
// ascending index.
inline std::vector<std::size_t> ranking_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  return order;
}

// Average precision over the deterministic ranking.
inline double pr_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("pr_auc: scores and labels differ in length");
  std::size_t m, n;
  count_classes(labels, m, n);
  if (m == 0) throw UndefinedMetric("pr_auc: no positive examples");
  const auto order = ranking_order(scores);
  double ap = 0.0;
  std::size_t tp = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (!labels[order[r]]) continue;
    ++tp;
    ap += static_cast<double>(tp) / static_cast<double>(r + 1);
  }
  return ap / static_cast<double>(m);
}

// ---- DeLong -----------------------------------------------------------------

// Standard normal CDF, Hart's double-precision rational approximation
// (absolute error below 1e-14).
inline double normal_cdf(double x) {
  const double ax = std::abs(x);
  double c = 0.0;
  if (ax <= 37.0) {
    const double e = std::exp(-ax * ax / 2.0);
    if (ax < 7.07106781186547) {
      double num = 3.52624965998911e-02 * ax + 0.700383064443688;
      num = num * ax + 6.37396220353165;
      num = num * ax + 33.912866078383;
      num = num * ax + 112.079291497871;
      num = num * ax + 221.213596169931;
      num = num * ax + 220.206867912376;
      double den = 8.83883476483184e-02 * ax + 1.75566716318264;
      den = den * ax + 16.064177579207;
      den = den * ax + 86.7807322029461;
      den = den * ax + 296.564248779674;
      den = den * ax + 637.333633378831;
      den = den * ax + 793.826512519948;
      den = den * ax + 440.413735824752;
      c = e * num / den;
    } else {
      double b = ax + 0.65;
      b = ax + 4.0 / b;
      b = ax + 3.0 / b;
      b = ax + 2.0 / b;
      b = ax + 1.0 / b;
      c = e / b / 2.506628274631;
    }
  }
  return x > 0.0 ? 1.0 - c : c;
}

// Per-model structural components: V10 over positives, V01 over negatives.
struct StructuralComponents {
  std::vector<double> v10;
  std::vector<double> v01;
  double auc = 0.0;
};

struct StatTestResult {
  double auc_a = 0.0;
  double auc_b = 0.0;
  double z = 0.0;
  double p_two_tailed = 1.0;
  std::array<double, 4> covariance{};  // row-major 2x2
};

// Midrank route (Sun & Xu), O(n log n).
inline StructuralComponents structural_components_fast(std::span<const double> scores, std::span<const int> labels) {
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < scores.size(); ++i) (labels[i] ? pos : neg).push_back(scores[i]);
  if (pos.empty() || neg.empty()) throw UndefinedMetric("delong: both classes must be present");
  const double m = static_cast<double>(pos.size()), n = static_cast<double>(neg.size());
  std::vector<double> all = pos;
  all.insert(all.end(), neg.begin(), neg.end());
  const auto tx = midranks(pos), ty = midranks(neg), tz = midranks(all);
  StructuralComponents sc;
  double sum_pos = 0.0;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    sc.v10.push_back((tz[i] - tx[i]) / n);
    sum_pos += tz[i];
  }
  for (std::size_t j = 0; j < neg.size(); ++j) sc.v01.push_back(1.0 - (tz[pos.size() + j] - ty[j]) / m);
  sc.auc = (sum_pos - m * (m + 1.0) / 2.0) / (m * n);
  return sc;
}

namespace detail {

inline double sample_cov(const std::vector<double>& a, const std::vector<double>& b) {
  const double k = static_cast<double>(a.size());
  if (a.size() < 2) return 0.0;
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / k;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / k;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - ma) * (b[i] - mb);
  return s / (k - 1.0);
}

}  // namespace detail

// Covariance of (AUC_a, AUC_b) from structural components: S10/m + S01/n.
inline std::array<double, 4> delong_covariance(const StructuralComponents& a, const StructuralComponents& b) {
  const double m = static_cast<double>(a.v10.size()), n = static_cast<double>(a.v01.size());
  std::array<double, 4> s{};
  const StructuralComponents* comp[2] = {&a, &b};
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      s[2 * i + j] = detail::sample_cov(comp[i]->v10, comp[j]->v10) / m +
                     detail::sample_cov(comp[i]->v01, comp[j]->v01) / n;
  return s;
}

inline StatTestResult delong_test(std::span<const double> scores_a, std::span<const double> scores_b,
                                  std::span<const int> labels) {
  if (scores_a.size() != labels.size() || scores_b.size() != labels.size())
    throw ShapeError("delong: score vectors and labels differ in length");
  const auto a = structural_components_fast(scores_a, labels);
  const auto b = structural_components_fast(scores_b, labels);
  StatTestResult r;
  r.auc_a = a.auc;
  r.auc_b = b.auc;
  r.covariance = delong_covariance(a, b);
  const double var = r.covariance[0] + r.covariance[3] - 2.0 * r.covariance[1];
  if (!(var > 0.0)) {
    r.z = 0.0;
    r.p_two_tailed = 1.0;
    return r;
  }
  r.z = (r.auc_a - r.auc_b) / std::sqrt(var);
  r.p_two_tailed = std::clamp(2.0 * (1.0 - normal_cdf(std::abs(r.z))), 0.0, 1.0);
  return r;
}

// ---- multi-label stratified sampling ----------------------------------------

namespace detail {

inline double strat_cost(const std::vector<double>& counts, const std::vector<double>& ideal) {
  double c = 0.0;
  for (std::size_t l = 0; l < counts.size(); ++l) c += (counts[l] - ideal[l]) * (counts[l] - ideal[l]);
  return c;
}

}  // namespace detail

// Iterative stratification into a subset of round(fraction * n) rows and
// its complement: the rarest remaining label is distributed first, each of
// its examples going to the side with the largest remaining demand for
// that label (then overall demand, then a seeded coin). A final greedy
// repair fixes the subset size and swaps rows while that moves per-label
// counts closer to fraction * count. Returns sorted row indices.
inline std::vector<std::size_t> iterative_stratified_sample(const std::vector<std::vector<int>>& labels,
                                                            double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("stratified sample fraction must lie in (0, 1)");
  const std::size_t n = labels.size();
  if (n == 0) return {};
  const std::size_t L = labels.front().size();
  for (const auto& row : labels)
    if (row.size() != L) throw ShapeError("stratified sample: ragged label matrix");

  SplitMix64 rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(order, rng);

  const auto target = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  const double frac[2] = {fraction, 1.0 - fraction};
  std::vector<double> label_total(L, 0.0);
  for (const auto& row : labels)
    for (std::size_t l = 0; l < L; ++l) label_total[l] += row[l];

  double want_total[2] = {static_cast<double>(target), static_cast<double>(n - target)};
  std::vector<double> want_label[2];
  for (int f = 0; f < 2; ++f) {
    want_label[f].resize(L);
    for (std::size_t l = 0; l < L; ++l) want_label[f][l] = frac[f] * label_total[l];
  }

  std::vector<int> fold(n, -1);
  auto assign = [&](std::size_t e, int f) {
    fold[e] = f;
    want_total[f] -= 1.0;
    for (std::size_t l = 0; l < L; ++l)
      if (labels[e][l]) want_label[f][l] -= 1.0;
  };
  auto pick = [&](double a0, double a1, double b0, double b1) {
    if (a0 != a1) return a0 > a1 ? 0 : 1;
    if (b0 != b1) return b0 > b1 ? 0 : 1;
    return static_cast<int>(rng.below(2));
  };

  while (true) {
    std::vector<std::size_t> remaining(L, 0);
    for (auto e : order)
      if (fold[e] < 0)
        for (std::size_t l = 0; l < L; ++l) remaining[l] += labels[e][l] ? 1 : 0;
    std::size_t rarest = L;
    for (std::size_t l = 0; l < L; ++l)
      if (remaining[l] > 0 && (rarest == L || remaining[l] < remaining[rarest])) rarest = l;
    if (rarest == L) break;
    for (auto e : order) {
      if (fold[e] >= 0 || !labels[e][rarest]) continue;
      assign(e, pick(want_label[0][rarest], want_label[1][rarest], want_total[0], want_total[1]));
    }
  }
  for (auto e : order)
    if (fold[e] < 0) assign(e, pick(want_total[0], want_total[1], 0.0, 0.0));

  // Repair: exact subset size, then count-improving swaps.
  std::vector<double> ideal(L), counts(L, 0.0);
  for (std::size_t l = 0; l < L; ++l) ideal[l] = fraction * label_total[l];
  std::size_t size = 0;
  for (std::size_t e = 0; e < n; ++e)
    if (fold[e] == 0) {
      ++size;
      for (std::size_t l = 0; l < L; ++l) counts[l] += labels[e][l];
    }
  auto moved_cost = [&](std::size_t e, double sign) {
    std::vector<double> c = counts;
    for (std::size_t l = 0; l < L; ++l) c[l] += sign * labels[e][l];
    return detail::strat_cost(c, ideal);
  };
  while (size != target) {
    const int from = size > target ? 0 : 1;
    const double sign = from == 0 ? -1.0 : 1.0;
    std::size_t best = n;
    double best_cost = std::numeric_limits<double>::infinity();
    for (auto e : order) {
      if (fold[e] != from) continue;
      const double c = moved_cost(e, sign);
      if (c < best_cost) {
        best_cost = c;
        best = e;
      }
    }
    fold[best] = 1 - from;
    for (std::size_t l = 0; l < L; ++l) counts[l] += sign * labels[best][l];
    size = from == 0 ? size - 1 : size + 1;
  }
  for (std::size_t iter = 0; iter < 4 * n; ++iter) {
    const double current = detail::strat_cost(counts, ideal);
    double best_cost = current;
    std::size_t best_in = n, best_out = n;
    for (auto a : order) {
      if (fold[a] != 0) continue;
      for (auto b : order) {
        if (fold[b] != 1 || labels[a] == labels[b]) continue;
        std::vector<double> c = counts;
        for (std::size_t l = 0; l < L; ++l) c[l] += labels[b][l] - labels[a][l];
        const double cost = detail::strat_cost(c, ideal);
        if (cost < best_cost - 1e-12) {
          best_cost = cost;
          best_in = a;
          best_out = b;
        }
      }
    }
    if (best_in == n) break;
    fold[best_in] = 1;
    fold[best_out] = 0;
    for (std::size_t l = 0; l < L; ++l) counts[l] += labels[best_out][l] - labels[best_in][l];
  }

  std::vector<std::size_t> subset;
  for (std::size_t e = 0; e < n; ++e)
    if (fold[e] == 0) subset.push_back(e);
  return subset;
}

// ---- linear probing ---------------------------------------------------------

struct ClassifierHead {
  Tensor weights;  // d x L
  Tensor bias;     // L
};

struct ProbeConfig {
  double lr = 2.0;
  std::size_t epochs = 500;
  double l2 = 1e-4;
};

// Labels as a dense n x L tensor plus the column mask that drops labels
// with a single class.
struct ProbeTargets {
  std::vector<double> targets;
  std::vector<double> mask;
};

inline ProbeTargets probe_targets(const std::vector<std::vector<int>>& labels) {
  const std::size_t n = labels.size(), L = n ? labels.front().size() : 0;
  ProbeTargets t;
  t.targets.resize(n * L);
  t.mask.resize(n * L);
  for (std::size_t l = 0; l < L; ++l) {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) pos += labels[i][l] ? 1 : 0;
    const double keep = (pos > 0 && pos < n) ? 1.0 : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      t.targets[i * L + l] = labels[i][l] ? 1.0 : 0.0;
      t.mask[i * L + l] = keep;
    }
  }
  return t;
}

// Masked mean sigmoid cross-entropy + (l2 / 2) * ||W||^2.
inline Var probe_loss(Var x, Var w, Var b, const ProbeTargets& t, double l2) {
  Var logits = add_bias(matmul(x, w), b);
  Var data = sigmoid_bce(logits, t.targets, t.mask);
  if (l2 == 0.0) return data;
  return add(data, scale(sum(mul(w, w)), 0.5 * l2));
}

inline ClassifierHead train_linear_probe(const Tensor& embeddings, const std::vector<std::vector<int>>& labels,
                                         const ProbeConfig& cfg, std::vector<double>* loss_curve = nullptr) {
  if (embeddings.rows() == 0 || labels.empty()) throw DataError("linear probe: empty training set");
  if (labels.size() != embeddings.rows()) throw ShapeError("linear probe: embeddings and labels differ in count");
  const std::size_t d = embeddings.cols(), L = labels.front().size();
  const ProbeTargets t = probe_targets(labels);
  if (std::none_of(t.mask.begin(), t.mask.end(), [](double m) { return m != 0.0; }))
    throw UndefinedMetric("linear probe: no label has both classes in the training set");
  ClassifierHead head{Tensor({d, L}), Tensor({L})};
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Tape tape;
    Var x = tape.leaf(embeddings);
    Var w = tape.leaf(head.weights, true);
    Var b = tape.leaf(head.bias, true);
    Var loss = probe_loss(x, w, b, t, cfg.l2);
    if (loss_curve) loss_curve->push_back(tape.value(loss).item());
    tape.backward(loss);
    const Tensor gw = tape.grad(w), gb = tape.grad(b);
    for (std::size_t i = 0; i < gw.size(); ++i) head.weights.data[i] -= cfg.lr * gw.data[i];
    for (std::size_t i = 0; i < gb.size(); ++i) head.bias.data[i] -= cfg.lr * gb.data[i];
  }
  return head;
}

inline Tensor probe_scores(const ClassifierHead& head, const Tensor& embeddings) {
  Tape tape;
  Var logits = add_bias(matmul(tape.leaf(embeddings), tape.leaf(head.weights)), tape.leaf(head.bias));
  Tensor out = tape.value(logits);
  for (auto& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
  return out;
}

// ---- label-wise summaries ---------------------------------------------------

struct LabelMetrics {
  std::vector<std::optional<double>> auc;
  std::vector<std::optional<double>> pr;
  double macro_auc = std::numeric_limits<double>::quiet_NaN();
  double macro_pr = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::size_t> skipped;
};

inline std::vector<double> column(const Tensor& m, std::size_t c) {
  std::vector<double> out(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) out[r] = m(r, c);
  return out;
}

inline std::vector<int> label_column(const std::vector<std::vector<int>>& labels, std::size_t c) {
  std::vector<int> out(labels.size());
  for (std::size_t r = 0; r < labels.size(); ++r) out[r] = labels[r][c];
  return out;
}

// Macro averages over labels with both classes present; others are skipped.
inline LabelMetrics label_metrics(const Tensor& scores, const std::vector<std::vector<int>>& labels) {
  if (scores.rows() != labels.size()) throw ShapeError("label metrics: score and label row counts differ");
  LabelMetrics m;
  double sa = 0.0, sp = 0.0;
  std::size_t used = 0;
  for (std::size_t l = 0; l < scores.cols(); ++l) {
    const auto s = column(scores, l);
    const auto y = label_column(labels, l);
    try {
      const double a = auc(s, y);
      const double p = pr_auc(s, y);
      m.auc.push_back(a);
      m.pr.push_back(p);
      sa += a;
      sp += p;
      ++used;
    } catch (const UndefinedMetric&) {
      m.auc.push_back(std::nullopt);
      m.pr.push_back(std::nullopt);
      m.skipped.push_back(l);
    }
  }
  if (used > 0) {
    m.macro_auc = sa / static_cast<double>(used);
    m.macro_pr = sp / static_cast<double>(used);
  }
  return m;
}

}  // namespace x2ct
