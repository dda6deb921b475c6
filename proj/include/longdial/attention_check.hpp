#pragma once

// Finite-difference gradient checking and the attention invariant suite
// behind `longdial attn-check`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "longdial/attention.hpp"
#include "longdial/random.hpp"

namespace longdial {

/// Max elementwise relative error |a - n| / max(|a|, |n|, floor) between
/// analytic gradients and central differences of `loss`. Each parameter is
/// perturbed in place and restored.
struct GradientCheckResult {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t entries = 0;
};

struct GradientPair {
  Matrix* parameter;
  const Matrix* analytic;
};

inline GradientCheckResult gradient_check(const std::function<double()>& loss,
                                          const std::vector<GradientPair>& pairs,
                                          double epsilon, double floor = 1e-6) {
  if (epsilon < 1e-6 || epsilon > 1e-3) throw AttentionError("epsilon must be in [1e-6, 1e-3]");
  GradientCheckResult r;
  for (const auto& [param, analytic] : pairs) {
    if (param->rows() != analytic->rows() || param->cols() != analytic->cols())
      throw AttentionError("gradient shape mismatch");
    for (Eigen::Index i = 0; i < param->rows(); ++i) {
      for (Eigen::Index j = 0; j < param->cols(); ++j) {
        const double orig = (*param)(i, j);
        (*param)(i, j) = orig + epsilon;
        const double up = loss();
        (*param)(i, j) = orig - epsilon;
        const double down = loss();
        (*param)(i, j) = orig;
        const double numeric = (up - down) / (2.0 * epsilon);
        const double a = (*analytic)(i, j);
        const double abs_err = std::abs(a - numeric);
        const double denom = std::max({std::abs(a), std::abs(numeric), floor});
        r.max_absolute_error = std::max(r.max_absolute_error, abs_err);
        r.max_relative_error = std::max(r.max_relative_error, abs_err / denom);
        ++r.entries;
      }
    }
  }
  return r;
}

/// Gaussian-ish fill from the project Rng (sum of uniforms), deterministic.
inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      double s = 0.0;
      for (int t = 0; t < 4; ++t) s += rng.uniform();
      m(i, j) = (s - 2.0) * std::sqrt(3.0) * scale;
    }
  return m;
}

// Losses are sum(weights .* output) with a fixed random weight matrix.

inline GradientCheckResult check_full_attention_gradients(std::size_t n, std::size_t d,
                                                          double epsilon, Rng& rng) {
  Matrix q = random_matrix(n, d, rng), k = random_matrix(n, d, rng), v = random_matrix(n, d, rng);
  const Matrix w = random_matrix(n, d, rng);
  const auto g = full_attention_backward(q, k, v, w);
  auto loss = [&] { return (full_attention(q, k, v).array() * w.array()).sum(); };
  return gradient_check(loss, {{&q, &g.dq}, {&k, &g.dk}, {&v, &g.dv}}, epsilon);
}

inline GradientCheckResult check_sinkhorn_gradients(std::size_t blocks, std::size_t iterations,
                                                    double temperature, double epsilon, Rng& rng) {
  Matrix logits = random_matrix(blocks, blocks, rng);
  const Matrix w = random_matrix(blocks, blocks, rng);
  const Matrix g = sinkhorn_backward(sinkhorn_forward(logits, iterations, temperature), w);
  auto loss = [&] {
    return (sinkhorn_normalize(logits, iterations, temperature).array() * w.array()).sum();
  };
  return gradient_check(loss, {{&logits, &g}}, epsilon);
}

/// End to end through pooling, sort_blocks, Sinkhorn and block attention.
inline GradientCheckResult check_sparse_layer_gradients(std::size_t n, std::size_t d,
                                                        std::size_t block_size,
                                                        std::size_t iterations,
                                                        double temperature, double epsilon,
                                                        Rng& rng) {
  Matrix q = random_matrix(n, d, rng), k = random_matrix(n, d, rng), v = random_matrix(n, d, rng);
  Matrix mixing = random_matrix(d, d, rng, 0.5);
  const Matrix w = random_matrix(n, d, rng);
  const auto tape = sparse_layer_forward(q, k, v, mixing, block_size, iterations, temperature, n);
  const auto g = sparse_layer_backward(tape, w);
  auto loss = [&] {
    return (sparse_layer_forward(q, k, v, mixing, block_size, iterations, temperature, n)
                .attention.output.array() *
            w.array())
        .sum();
  };
  return gradient_check(loss, {{&q, &g.dq}, {&k, &g.dk}, {&v, &g.dv}, {&mixing, &g.d_mixing}},
                        epsilon);
}

/// Reference block-local attention: dense attention inside each block,
/// built from full_attention on sub-matrices.
inline Matrix block_local_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                    std::size_t block_size) {
  Matrix out(q.rows(), v.cols());
  for (const auto& r : block_partition(static_cast<std::size_t>(q.rows()), block_size)) {
    const auto b = static_cast<Eigen::Index>(r.begin);
    const auto len = static_cast<Eigen::Index>(r.valid);
    out.middleRows(b, len) =
        full_attention(q.middleRows(b, len), k.middleRows(b, len), v.middleRows(b, len));
  }
  return out;
}

struct CheckLine {
  std::string name;
  double value = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct AttnCheckOptions {
  AttentionSpec spec;
  std::uint64_t seed = 0;
  double epsilon = 1e-5;
  std::size_t instances = 20;
};

/// Runs every attention invariant at the configured shape and reports the worst
/// observed error per check.
inline std::vector<CheckLine> run_attention_checks(const AttnCheckOptions& opt) {
  const AttentionSpec& spec = opt.spec;
  spec.validate();
  Rng rng(opt.seed);
  const std::size_t n = spec.seq_len;
  const std::size_t d = spec.model_dim;
  const std::size_t nb = spec.num_blocks();
  std::vector<CheckLine> out;
  auto add = [&](std::string name, double value, double tol) {
    out.push_back({std::move(name), value, tol, value <= tol});
  };

  // Sinkhorn stochasticity at the configured iteration count and at 20.
  double row_dev = 0.0, col_dev = 0.0, col_dev20 = 0.0;
  for (std::size_t i = 0; i < opt.instances; ++i) {
    const Matrix logits = random_matrix(nb, nb, rng);
    const auto dev = stochastic_deviation(
        sinkhorn_normalize(logits, spec.sinkhorn_iterations, spec.temperature));
    const auto dev20 = stochastic_deviation(sinkhorn_normalize(logits, 20, spec.temperature));
    row_dev = std::max({row_dev, dev.rows, dev20.rows});
    col_dev = std::max(col_dev, dev.cols);
    col_dev20 = std::max(col_dev20, dev20.cols);
  }
  add("sinkhorn_row_sum_deviation", row_dev, 1e-6);
  // Informational at the configured count; gated at 20 iterations.
  out.push_back({"sinkhorn_col_sum_deviation@configured", col_dev,
                 std::numeric_limits<double>::infinity(), true});
  add("sinkhorn_col_sum_deviation@20", col_dev20, 1e-4);

  const double uniform_err =
      (sinkhorn_normalize(Matrix::Zero(static_cast<Eigen::Index>(nb), static_cast<Eigen::Index>(nb)),
                          spec.sinkhorn_iterations, spec.temperature)
           .array() -
       1.0 / static_cast<double>(nb))
          .abs()
          .maxCoeff();
  add("sinkhorn_zero_logits_uniform", uniform_err, 1e-12);

  // Attention-weight rows are distributions over usable keys.
  double weight_dev = 0.0;
  double identity_err = 0.0;
  double padding_err = 0.0;
  for (std::size_t i = 0; i < opt.instances; ++i) {
    const Matrix q = random_matrix(n, d, rng), k = random_matrix(n, d, rng),
                 v = random_matrix(n, d, rng);
    const Matrix mixing = random_matrix(d, d, rng, 0.5);
    const auto tape = sparse_layer_forward(q, k, v, mixing, spec.block_size,
                                           spec.sinkhorn_iterations, spec.temperature, n);
    for (std::size_t b = 0; b < tape.attention.num_blocks; ++b)
      for (std::size_t r = 0; r < spec.block_size; ++r)
        if (b * spec.block_size + r < n)
          weight_dev = std::max(weight_dev,
                                std::abs(tape.attention.weights[b].row(static_cast<Eigen::Index>(r)).sum() - 1.0));

    const Matrix ident = Matrix::Identity(static_cast<Eigen::Index>(nb), static_cast<Eigen::Index>(nb));
    identity_err = std::max(identity_err, (sinkhorn_attention(q, k, v, spec.block_size, ident) -
                                           block_local_attention(q, k, v, spec.block_size))
                                              .cwiseAbs()
                                              .maxCoeff());

    // Extend with explicit garbage padding inside the last block.
    const std::size_t pad = nb * spec.block_size - n;
    if (pad > 0) {
      const auto extend = [&](const Matrix& x) {
        Matrix e(static_cast<Eigen::Index>(n + pad), x.cols());
        e.topRows(static_cast<Eigen::Index>(n)) = x;
        e.bottomRows(static_cast<Eigen::Index>(pad)) = random_matrix(pad, static_cast<std::size_t>(x.cols()), rng, 10.0);
        return e;
      };
      const auto padded = sparse_layer_forward(extend(q), extend(k), extend(v), mixing,
                                               spec.block_size, spec.sinkhorn_iterations,
                                               spec.temperature, n);
      padding_err = std::max(padding_err, (padded.attention.output.topRows(static_cast<Eigen::Index>(n)) -
                                           tape.attention.output)
                                              .cwiseAbs()
                                              .maxCoeff());
    }
  }
  add("attention_weight_row_sum_deviation", weight_dev, 1e-6);
  add("identity_sorting_vs_block_local", identity_err, 1e-6);
  add("padding_invariance", padding_err, 1e-6);

  if (spec.block_size >= n) {
    double single = 0.0;
    for (std::size_t i = 0; i < opt.instances; ++i) {
      const Matrix q = random_matrix(n, d, rng), k = random_matrix(n, d, rng),
                   v = random_matrix(n, d, rng);
      const Matrix mixing = random_matrix(d, d, rng, 0.5);
      single = std::max(single, (sparse_layer(q, k, v, mixing, spec) - full_attention(q, k, v))
                                    .cwiseAbs()
                                    .maxCoeff());
    }
    add("single_block_sparse_equals_full", single, 1e-6);
  }

  const std::size_t gn = std::min<std::size_t>(n, 32);
  const std::size_t gd = std::min<std::size_t>(d, 8);
  add("grad_full_attention", check_full_attention_gradients(gn, gd, opt.epsilon, rng).max_relative_error, 1e-4);
  add("grad_sinkhorn_normalize",
      check_sinkhorn_gradients(std::max<std::size_t>(nb, 2), spec.sinkhorn_iterations,
                               spec.temperature, opt.epsilon, rng)
          .max_relative_error,
      1e-4);
  add("grad_sparse_layer",
      check_sparse_layer_gradients(gn, gd, std::min(spec.block_size, gn), spec.sinkhorn_iterations,
                                   spec.temperature, opt.epsilon, rng)
          .max_relative_error,
      1e-3);

  const auto modes = hybrid_schedule(spec);
  std::size_t schedule_errors = 0;
  for (std::size_t l = 0; l < modes.size(); ++l)
    if ((modes[l] == AttentionMode::kFull) != (spec.full_attention_layers.count(l + 1) == 1))
      ++schedule_errors;
  add("hybrid_schedule_mismatches", static_cast<double>(schedule_errors), 0.0);
  return out;
}

}  // namespace longdial
