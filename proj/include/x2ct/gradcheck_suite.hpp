#pragma once

// Finite-difference checks over every differentiable op and over the full
// student objective. Shared by `x2ct gradcheck` and the test suites.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "x2ct/contrastive.hpp"
#include "x2ct/encoders.hpp"
#include "x2ct/rng.hpp"
#include "x2ct/tensor.hpp"

namespace x2ct {

struct GradCheckCase {
  std::string name;
  double worst = 0.0;  // max relative error over all seeds
};

namespace detail {

inline Tensor random_tensor(Shape shape, SplitMix64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Entries bounded away from zero, so relu kinks are never straddled.
inline Tensor off_kink_tensor(Shape shape, SplitMix64& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.05, 1.0);
  return t;
}

inline Tensor random_unit_rows(std::size_t n, std::size_t d, SplitMix64& rng) {
  Tensor t({n, d});
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (auto& v : t.row(r)) {
      v = rng.normal();
      s += v * v;
    }
    for (auto& v : t.row(r)) v /= std::sqrt(s);
  }
  return t;
}

// Reduces a non-scalar output to a scalar with fixed random weights.
inline Var weighted_sum(Var out, const Tensor& weights) {
  return sum(mul(out, out.tape->leaf(weights)));
}

// Smallest |pre-activation| of every relu in the student forward pass.
inline double student_kink_margin(const std::vector<Tensor>& p, const Tensor& patches, std::size_t per_image) {
  Tape tape;
  Var h = add_bias(matmul(tape.leaf(patches), tape.leaf(p[0])), tape.leaf(p[1]));
  Var z = add_bias(matmul(mean_pool_rows(relu(h), per_image), tape.leaf(p[2])), tape.leaf(p[3]));
  double margin = INFINITY;
  for (Var v : {h, z})
    for (double x : tape.value(v).data) margin = std::min(margin, std::abs(x));
  return margin;
}

}  // namespace detail

inline std::vector<GradCheckCase> run_gradcheck_suite(std::size_t seeds = 20, double step = 1e-4,
                                                      std::uint64_t base_seed = 2024) {
  using Fn = std::function<double(SplitMix64&)>;
  using detail::random_tensor;
  using detail::weighted_sum;
  auto check = [step](auto&& fn, const std::vector<Tensor>& in) { return grad_check(fn, in, step); };

  std::vector<std::pair<std::string, Fn>> cases;
  cases.emplace_back("matmul", [&](SplitMix64& r) {
    const Tensor w = random_tensor({3, 2}, r);
    return check([&](Tape&, std::span<const Var> x) { return weighted_sum(matmul(x[0], x[1]), w); },
                 {random_tensor({3, 4}, r), random_tensor({4, 2}, r)});
  });
  cases.emplace_back("add_bias", [&](SplitMix64& r) {
    const Tensor w = random_tensor({3, 4}, r);
    return check([&](Tape&, std::span<const Var> x) { return weighted_sum(add_bias(x[0], x[1]), w); },
                 {random_tensor({3, 4}, r), random_tensor({4}, r)});
  });
  cases.emplace_back("add", [&](SplitMix64& r) {
    const Tensor w = random_tensor({3, 4}, r);
    return check([&](Tape&, std::span<const Var> x) { return weighted_sum(add(x[0], x[1]), w); },
                 {random_tensor({3, 4}, r), random_tensor({3, 4}, r)});
  });
  cases.emplace_back("mul", [&](SplitMix64& r) {
    const Tensor w = random_tensor({3, 4}, r);
    return check([&](Tape&, std::span<const Var> x) { return weighted_sum(mul(x[0], x[1]), w); },
                 {random_tensor({3, 4}, r), random_tensor({3, 4}, r)});
  });
  cases.emplace_back("scale", [&](SplitMix64& r) {
    const Tensor w = random_tensor({3, 4}, r);
    return check([&](Tape&, std::span<const Var> x) { return weighted_sum(scale(x[0], -1.7), w); },
                 {random_tensor({3, 4}, r)});
  });
  cases.emplace_back("relu", [&](SplitMix64& r) {
    const Tensor w = random_tensor({3, 4}, r);
    return check([&](Tape&, std::span<const Var> x) { return weighted_sum(relu(x[0]), w); },
                 {detail::off_kink_tensor({3, 4}, r)});
  });
  cases.emplace_back("sum", [&](SplitMix64& r) {
    return check([&](Tape&, std::span<const Var> x) { return scale(sum(mul(x[0], x[0])), 0.5); },
                 {random_tensor({3, 4}, r)});
  });
  cases.emplace_back("mean_pool_rows", [&](SplitMix64& r) {
    const Tensor w = random_tensor({3, 3}, r);
    return check([&](Tape&, std::span<const Var> x) { return weighted_sum(mean_pool_rows(x[0], 2), w); },
                 {random_tensor({6, 3}, r)});
  });
  cases.emplace_back("l2_normalize_rows", [&](SplitMix64& r) {
    const Tensor w = random_tensor({3, 4}, r);
    return check([&](Tape&, std::span<const Var> x) { return weighted_sum(l2_normalize_rows(x[0]), w); },
                 {random_tensor({3, 4}, r)});
  });
  cases.emplace_back("similarity", [&](SplitMix64& r) {
    const Tensor w = random_tensor({3, 5}, r);
    return check([&](Tape&, std::span<const Var> x) { return weighted_sum(similarity(x[0], x[1]), w); },
                 {random_tensor({3, 4}, r), random_tensor({5, 4}, r)});
  });
  cases.emplace_back("transpose", [&](SplitMix64& r) {
    const Tensor w = random_tensor({4, 3}, r);
    return check([&](Tape&, std::span<const Var> x) { return weighted_sum(transpose(x[0]), w); },
                 {random_tensor({3, 4}, r)});
  });
  for (Reduction red : {Reduction::Mean, Reduction::Sum}) {
    const std::string name = red == Reduction::Mean ? "softmax_cross_entropy_rows(mean)" : "softmax_cross_entropy_rows(sum)";
    cases.emplace_back(name, [&, red](SplitMix64& r) {
      std::vector<std::size_t> targets(4);
      for (auto& t : targets) t = r.below(5);
      return check([&](Tape&, std::span<const Var> x) { return softmax_cross_entropy_rows(x[0], targets, red); },
                   {random_tensor({4, 5}, r, -3.0, 3.0)});
    });
  }
  cases.emplace_back("sigmoid_bce", [&](SplitMix64& r) {
    std::vector<double> targets(12), mask(12);
    for (auto& t : targets) t = r.bernoulli(0.5) ? 1.0 : 0.0;
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = i % 3 == 2 ? 0.0 : 1.0;
    return check([&](Tape&, std::span<const Var> x) { return sigmoid_bce(x[0], targets, mask); },
                 {random_tensor({4, 3}, r, -3.0, 3.0)});
  });
  cases.emplace_back("info_nce_loss", [&](SplitMix64& r) {
    return check(
        [&](Tape&, std::span<const Var> x) {
          return info_nce_loss(l2_normalize_rows(x[0]), l2_normalize_rows(x[1]), 0.07);
        },
        {random_tensor({4, 6}, r), random_tensor({4, 6}, r)});
  });
  cases.emplace_back("x2ct_loss(embeddings)", [&](SplitMix64& r) {
    const LossWeights w{0.5, 1.0, 1.0};
    return check(
        [&](Tape&, std::span<const Var> x) {
          return x2ct_loss(l2_normalize_rows(x[0]), l2_normalize_rows(x[1]), l2_normalize_rows(x[2]), w, 0.07).total;
        },
        {random_tensor({4, 5}, r), random_tensor({4, 5}, r), random_tensor({4, 5}, r)});
  });
  cases.emplace_back("x2ct_loss(student parameters)", [&](SplitMix64& r) {
    const ModelConfig model{4, 6, 4, 8};
    const std::size_t n = 3, per_image = model.patches_per_image();
    const LossWeights w{0.0, 1.0, 1.0};
    const Tensor hc = detail::random_unit_rows(n, model.embed_dim, r);
    const Tensor hr = detail::random_unit_rows(n, model.embed_dim, r);
    // Redraw until every relu pre-activation sits clear of its kink.
    for (;;) {
      const EncoderParams init = init_student(model, r.next());
      std::vector<Tensor> params;
      for (const char* k : {"student.patch.weight", "student.patch.bias", "student.fc1.weight", "student.fc1.bias",
                            "student.fc2.weight", "student.fc2.bias"})
        params.push_back(init.at(k));
      const Tensor patches = random_tensor({n * per_image, model.patch_pixels()}, r, 0.0, 1.0);
      if (detail::student_kink_margin(params, patches, per_image) < 1e-2) continue;
      return check(
          [&](Tape& tape, std::span<const Var> x) {
            const StudentVars v{x[0], x[1], x[2], x[3], x[4], x[5]};
            Var hx = student_forward(v, tape.leaf(patches), per_image);
            return x2ct_loss(tape.leaf(hc), tape.leaf(hr), hx, w, 0.07).total;
          },
          params);
    }
  });

  std::vector<GradCheckCase> out;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    GradCheckCase result{cases[c].first, 0.0};
    for (std::size_t s = 0; s < seeds; ++s) {
      SplitMix64 rng(derive_seed(base_seed, c * 1000 + s));
      result.worst = std::max(result.worst, cases[c].second(rng));
    }
    out.push_back(result);
  }
  return out;
}

}  // namespace x2ct
