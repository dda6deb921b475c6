#include <gtest/gtest.h>

#include <fstream>

#include "longdial/attention_check.hpp"
#include "test_support.hpp"

using namespace longdial;
using testing_support::block_local_oracle;

namespace {

Matrix rnd(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  return random_matrix(r, c, rng, scale);
}

Matrix permutation_matrix(const std::vector<std::size_t>& order) {
  Matrix p = Matrix::Zero(static_cast<Eigen::Index>(order.size()), static_cast<Eigen::Index>(order.size()));
  for (std::size_t i = 0; i < order.size(); ++i) p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(order[i])) = 1.0;
  return p;
}

}  // namespace

TEST(Partition, Examples) {
  EXPECT_EQ(block_partition(10, 5), (std::vector<BlockRange>{{0, 5, 5}, {5, 10, 5}}));
  const auto p = block_partition(10, 4);
  ASSERT_EQ(p.size(), 3u);
  EXPECT_EQ(p[2].padded(), 2u);
  const auto one = block_partition(4, 8);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].padded(), 4u);
  EXPECT_THROW(block_partition(0, 3), AttentionError);
}

TEST(FullAttention, HandComputedFixture) {
  Matrix q(3, 2), k(3, 2), v(3, 2);
  q << 1, 0, 0, 1, 1, 1;
  k << 1, 0, 0, 1, 1, -1;
  v << 1, 2, 3, 4, 5, 6;
  Matrix expected(3, 2);
  expected << 3.0, 4.0, 2.712067670604236, 3.7120676706042364, 2.593327443921285, 3.5933274439212846;
  EXPECT_LT((full_attention(q, k, v) - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FullAttention, Degenerate) {
  Rng rng(1);
  const Matrix q = rnd(1, 3, rng), k = rnd(1, 3, rng), v = rnd(1, 3, rng);
  EXPECT_LT((full_attention(q, k, v) - v).cwiseAbs().maxCoeff(), 1e-15);

  const Matrix q5 = rnd(5, 3, rng), v5 = rnd(5, 3, rng);
  const Matrix same = Matrix::Ones(5, 1) * rnd(1, 3, rng);
  const Matrix mean = Matrix::Ones(5, 1) * v5.colwise().mean();
  EXPECT_LT((full_attention(q5, same, v5) - mean).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(full_attention(rnd(2, 3, rng), rnd(2, 4, rng), rnd(2, 3, rng)), AttentionError);
}

TEST(FullAttention, MatchesLoopOracle) {
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    const std::size_t n = 1 + rng.below(20), d = 1 + rng.below(8);
    const Matrix q = rnd(n, d, rng), k = rnd(n, d, rng), v = rnd(n, d, rng);
    EXPECT_LT((full_attention(q, k, v) - testing_support::softmax_attention_loops(q, k, v)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Sinkhorn, TwoByTwoHandIteration) {
  Matrix l(2, 2);
  l << 2.0, 0.5, -1.0, 1.0;
  Matrix expected(2, 2);
  expected << 0.8500514274563814, 0.1499485725436186, 0.0051428306776657405, 0.9948571693223343;
  EXPECT_LT((sinkhorn_normalize(l, 2, 0.5) - expected).cwiseAbs().maxCoeff(), 1e-12);

  const Matrix sharp = sinkhorn_normalize(10.0 * Matrix::Identity(2, 2), 2, 0.1);
  EXPECT_LT((sharp - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Sinkhorn, Invariants) {
  Rng rng(3);
  for (std::size_t nb = 1; nb <= 8; ++nb) {
    EXPECT_LT((sinkhorn_normalize(Matrix::Zero(nb, nb), 5) - Matrix::Constant(nb, nb, 1.0 / nb)).cwiseAbs().maxCoeff(), 1e-12);
    for (int rep = 0; rep < 10; ++rep) {
      const Matrix l = rnd(nb, nb, rng);
      const Matrix s = sinkhorn_normalize(l, 20);
      EXPECT_GT(s.minCoeff(), 0.0);
      EXPECT_LT(s.maxCoeff(), 1.0 + 1e-12);
      const auto dev = stochastic_deviation(s);
      EXPECT_LE(dev.rows, 1e-6);
      EXPECT_LE(dev.cols, 1e-4);
      double prev = std::numeric_limits<double>::infinity();
      for (std::size_t it = 1; it <= 20; ++it) {
        const double c = stochastic_deviation(sinkhorn_normalize(l, it)).cols;
        EXPECT_LE(c, prev + 1e-9);
        prev = c;
      }
    }
  }
  // Wider logits converge more slowly but still monotonically.
  for (int rep = 0; rep < 20; ++rep) {
    const Matrix l = rnd(8, 8, rng, 2.0);
    EXPECT_LT(stochastic_deviation(sinkhorn_normalize(l, 60)).cols,
              stochastic_deviation(sinkhorn_normalize(l, 20)).cols + 1e-15);
  }
  Matrix bad = Matrix::Zero(2, 2);
  bad(0, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(sinkhorn_normalize(bad, 3), AttentionError);
  EXPECT_THROW(sinkhorn_normalize(Matrix::Zero(2, 3), 3), AttentionError);
}

TEST(SortBlocks, SymmetryAndEquivariance) {
  Rng rng(4);
  const Matrix w = rnd(3, 3, rng);
  const Matrix same = Matrix::Ones(4, 1) * rnd(1, 3, rng);
  EXPECT_LT((sort_blocks(same, w, 8) - Matrix::Constant(4, 4, 0.25)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_DOUBLE_EQ(sort_blocks(rnd(1, 3, rng), w, 8)(0, 0), 1.0);

  Matrix ortho = Matrix::Identity(3, 3) * 3.0;
  EXPECT_LT((sort_blocks(ortho, Matrix::Identity(3, 3), 20, 0.1) - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-3);

  for (int rep = 0; rep < 20; ++rep) {
    const Matrix s = rnd(5, 3, rng);
    std::vector<std::size_t> order{3, 0, 4, 1, 2};
    const Matrix p = permutation_matrix(order);
    const Matrix a = sort_blocks(p * s, w, 8);
    const Matrix b = p * sort_blocks(s, w, 8) * p.transpose();
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-6);
  }
  EXPECT_THROW(sort_blocks(rnd(3, 2, rng), w, 8), AttentionError);
}

TEST(SinkhornAttention, SingleBlockEqualsFull) {
  Rng rng(5);
  for (int i = 0; i < 30; ++i) {
    const std::size_t n = 1 + rng.below(24), d = 1 + rng.below(8);
    const std::size_t bs = n + rng.below(4);
    const Matrix q = rnd(n, d, rng), k = rnd(n, d, rng), v = rnd(n, d, rng);
    const Matrix one = Matrix::Ones(1, 1);
    EXPECT_LT((sinkhorn_attention(q, k, v, bs, one) - full_attention(q, k, v)).cwiseAbs().maxCoeff(), 1e-6);
    AttentionSpec spec;
    spec.seq_len = n;
    spec.model_dim = d;
    spec.block_size = bs;
    EXPECT_LT((sparse_layer(q, k, v, rnd(d, d, rng), spec) - full_attention(q, k, v)).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(SinkhornAttention, IdentitySortingIsBlockLocal) {
  Rng rng(6);
  for (int i = 0; i < 30; ++i) {
    const std::size_t bs = 1 + rng.below(6);
    const std::size_t n = 1 + rng.below(30), d = 1 + rng.below(8);
    const std::size_t nb = (n + bs - 1) / bs;
    const Matrix q = rnd(n, d, rng), k = rnd(n, d, rng), v = rnd(n, d, rng);
    const Matrix out = sinkhorn_attention(q, k, v, bs, Matrix::Identity(nb, nb));
    EXPECT_LT((out - block_local_oracle(q, k, v, bs)).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(SinkhornAttention, WeightsAndPadding) {
  Rng rng(7);
  for (int i = 0; i < 20; ++i) {
    const std::size_t bs = 2 + rng.below(4);
    const std::size_t n = bs * (1 + rng.below(4)) - rng.below(bs);
    const std::size_t d = 1 + rng.below(6);
    const Matrix q = rnd(n, d, rng), k = rnd(n, d, rng), v = rnd(n, d, rng), w = rnd(d, d, rng);
    const auto tape = sparse_layer_forward(q, k, v, w, bs, 8, 1.0, n);
    for (std::size_t b = 0; b < tape.attention.num_blocks; ++b) {
      for (std::size_t r = 0; r < bs; ++r) {
        const double sum = tape.attention.weights[b].row(static_cast<Eigen::Index>(r)).sum();
        if (b * bs + r < n)
          EXPECT_NEAR(sum, 1.0, 1e-6);
        else
          EXPECT_EQ(sum, 0.0);
      }
    }
    // Extra padding rows filled with garbage leave real outputs unchanged.
    const std::size_t pad = tape.attention.num_blocks * bs - n;
    if (pad == 0) continue;
    auto extend = [&](const Matrix& x) {
      Matrix e(static_cast<Eigen::Index>(n + pad), x.cols());
      e << x, rnd(pad, static_cast<std::size_t>(x.cols()), rng, 50.0);
      return e;
    };
    const auto padded = sparse_layer_forward(extend(q), extend(k), extend(v), w, bs, 8, 1.0, n);
    EXPECT_LT((padded.attention.output.topRows(static_cast<Eigen::Index>(n)) - tape.attention.output).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_EQ(padded.attention.output.bottomRows(static_cast<Eigen::Index>(pad)).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(HybridSchedule, Layers) {
  AttentionSpec spec;
  const auto modes = hybrid_schedule(spec);
  ASSERT_EQ(modes.size(), 12u);
  for (std::size_t l = 1; l <= 12; ++l)
    EXPECT_EQ(modes[l - 1] == AttentionMode::kFull, l == 4 || l == 8 || l == 12) << l;
  spec.full_attention_layers = {};
  for (auto m : hybrid_schedule(spec)) EXPECT_EQ(m, AttentionMode::kSparse);
  spec.full_attention_layers = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
  for (auto m : hybrid_schedule(spec)) EXPECT_EQ(m, AttentionMode::kFull);
  spec.full_attention_layers = {13};
  EXPECT_THROW(hybrid_schedule(spec), AttentionError);
}

TEST(Gradients, FiniteDifferences) {
  Rng rng(8);
  EXPECT_LT(check_full_attention_gradients(8, 4, 1e-5, rng).max_relative_error, 1e-4);
  EXPECT_LT(check_sinkhorn_gradients(4, 8, 1.0, 1e-5, rng).max_relative_error, 1e-4);
  EXPECT_LT(check_sinkhorn_gradients(4, 20, 0.5, 1e-5, rng).max_relative_error, 1e-4);
  EXPECT_LT(check_sparse_layer_gradients(16, 4, 4, 8, 1.0, 1e-5, rng).max_relative_error, 1e-3);
  EXPECT_LT(check_sparse_layer_gradients(30, 8, 7, 8, 1.0, 1e-5, rng).max_relative_error, 1e-3);
  Matrix p = Matrix::Zero(1, 1);
  const Matrix g = Matrix::Zero(1, 1);
  EXPECT_THROW(gradient_check([] { return 0.0; }, {{&p, &g}}, 1e-2), AttentionError);
}

TEST(Fixtures, GoldenMatrixRoundTrip) {
  std::ifstream in(LONGDIAL_TEST_DATA "/attention_golden.json");
  ASSERT_TRUE(in);
  const auto j = nlohmann::json::parse(in);
  const Matrix q = matrix_from_json(j["q"]), k = matrix_from_json(j["k"]), v = matrix_from_json(j["v"]);
  EXPECT_LT((full_attention(q, k, v) - matrix_from_json(j["full_attention"])).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((sinkhorn_normalize(matrix_from_json(j["logits"]), 2, 0.5) - matrix_from_json(j["sinkhorn_2iter_t0.5"])).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(matrix_from_json(matrix_to_json(q)), q);
  EXPECT_THROW(matrix_from_json(nlohmann::json::parse("[[1,2],[3]]")), AttentionError);
}

TEST(Suite, DefaultsPassAndIterationsMatter) {
  AttnCheckOptions opt;
  for (const auto& line : run_attention_checks(opt)) EXPECT_TRUE(line.passed) << line.name << " " << line.value;

  opt.spec.sinkhorn_iterations = 1;
  double col1 = 0.0, col20 = 0.0;
  for (const auto& line : run_attention_checks(opt)) {
    if (line.name == "sinkhorn_col_sum_deviation@configured") col1 = line.value;
    if (line.name == "sinkhorn_col_sum_deviation@20") col20 = line.value;
  }
  EXPECT_GT(col1, col20);
}
