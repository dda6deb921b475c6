#pragma once

// Desk-scale hybrid attention: block-sorted Sinkhorn attention for sparse
// layers, dense softmax attention for the designated full layers. Single
// head; every forward op has a reverse-mode counterpart.
//
// Sparse layer, end to end:
//   summaries = mean-pool(K) per block                        (blocks x d)
//   logits    = summaries * mixing * summaries^T              (blocks x blocks)
//   sorting   = sinkhorn(logits / temperature)
//   block b attends over its own keys plus sum_b' sorting(b, b') * block b'
//
// Sinkhorn runs in log space. Each iteration is a column pass followed by a
// row pass, so rows of the result sum to 1 to rounding error and columns
// converge with the iteration count.

#include <cmath>
#include <cstddef>
#include <limits>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace longdial {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

class AttentionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct AttentionSpec {
  std::size_t seq_len = 16;
  std::size_t model_dim = 4;
  std::size_t block_size = 4;
  std::size_t num_layers = 12;
  std::set<std::size_t> full_attention_layers = {4, 8, 12};  // 1-based
  std::size_t sinkhorn_iterations = 8;
  double temperature = 1.0;

  std::size_t num_blocks() const { return (seq_len + block_size - 1) / block_size; }

  void validate() const {
    if (seq_len < 1 || model_dim < 1) throw AttentionError("seq_len and model_dim must be >= 1");
    if (block_size < 1) throw AttentionError("block_size must be >= 1");
    if (sinkhorn_iterations < 1) throw AttentionError("sinkhorn_iterations must be >= 1");
    if (!(temperature > 0.0)) throw AttentionError("temperature must be positive");
    for (std::size_t l : full_attention_layers)
      if (l < 1 || l > num_layers) throw AttentionError("full attention layer out of range");
  }
};

enum class AttentionMode { kFull, kSparse };

inline std::vector<AttentionMode> hybrid_schedule(const AttentionSpec& spec) {
  spec.validate();
  std::vector<AttentionMode> modes(spec.num_layers, AttentionMode::kSparse);
  for (std::size_t l : spec.full_attention_layers) modes[l - 1] = AttentionMode::kFull;
  return modes;
}

/// [begin, end) in padded coordinates; positions at or past `begin + valid`
/// are padding.
struct BlockRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t valid = 0;

  std::size_t padded() const { return end - begin - valid; }
  bool operator==(const BlockRange&) const = default;
};

inline std::vector<BlockRange> block_partition(std::size_t seq_len, std::size_t block_size) {
  if (seq_len < 1 || block_size < 1)
    throw AttentionError("block_partition needs positive seq_len and block_size");
  std::vector<BlockRange> blocks;
  for (std::size_t b = 0; b < seq_len; b += block_size)
    blocks.push_back({b, b + block_size, std::min(block_size, seq_len - b)});
  return blocks;
}

// ---------------------------------------------------------------------------
// Dense attention

struct AttentionGrads {
  Matrix dq;
  Matrix dk;
  Matrix dv;
};

namespace detail {

inline void check_qkv(const Matrix& q, const Matrix& k, const Matrix& v) {
  if (q.cols() != k.cols()) throw AttentionError("Q and K widths differ");
  if (k.rows() != v.rows()) throw AttentionError("K and V lengths differ");
  if (q.rows() < 1 || k.rows() < 1 || q.cols() < 1) throw AttentionError("empty attention input");
}

inline Matrix softmax_rows(const Matrix& scores) {
  Matrix out(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const double m = scores.row(i).maxCoeff();
    out.row(i) = (scores.row(i).array() - m).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

// Gradient through row softmax: dS = A .* (dA - rowsum(dA .* A)).
inline Matrix softmax_rows_backward(const Matrix& a, const Matrix& da) {
  const Vector dot = (da.array() * a.array()).rowwise().sum();
  return (a.array() * (da.colwise() - dot).array()).matrix();
}

}  // namespace detail

inline Matrix full_attention_weights(const Matrix& q, const Matrix& k) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  return detail::softmax_rows(q * k.transpose() * scale);
}

inline Matrix full_attention(const Matrix& q, const Matrix& k, const Matrix& v) {
  detail::check_qkv(q, k, v);
  return full_attention_weights(q, k) * v;
}

inline AttentionGrads full_attention_backward(const Matrix& q, const Matrix& k,
                                              const Matrix& v, const Matrix& d_out) {
  detail::check_qkv(q, k, v);
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  const Matrix a = full_attention_weights(q, k);
  const Matrix ds = detail::softmax_rows_backward(a, d_out * v.transpose());
  return {ds * k * scale, ds.transpose() * q * scale, a.transpose() * d_out};
}

// ---------------------------------------------------------------------------
// Sinkhorn normalization

struct SinkhornTape {
  enum class Pass { kColumn, kRow };
  std::vector<Pass> passes;
  std::vector<Matrix> outputs;  // log-space state after each pass
  double temperature = 1.0;
  Matrix result;
};

namespace detail {

inline Vector row_logsumexp(const Matrix& x) {
  Vector out(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    out(i) = m + std::log((x.row(i).array() - m).exp().sum());
  }
  return out;
}

}  // namespace detail

inline SinkhornTape sinkhorn_forward(const Matrix& logits, std::size_t iterations,
                                     double temperature) {
  if (logits.rows() != logits.cols() || logits.rows() < 1)
    throw AttentionError("sinkhorn needs a non-empty square matrix");
  if (iterations < 1) throw AttentionError("sinkhorn needs at least one iteration");
  if (!(temperature > 0.0)) throw AttentionError("temperature must be positive");
  if (!logits.allFinite()) throw AttentionError("sinkhorn logits must be finite");

  SinkhornTape tape;
  tape.temperature = temperature;
  Matrix x = logits / temperature;
  for (std::size_t it = 0; it < iterations; ++it) {
    x = x.rowwise() - detail::row_logsumexp(x.transpose()).transpose();
    tape.passes.push_back(SinkhornTape::Pass::kColumn);
    tape.outputs.push_back(x);
    x = x.colwise() - detail::row_logsumexp(x);
    tape.passes.push_back(SinkhornTape::Pass::kRow);
    tape.outputs.push_back(x);
  }
  tape.result = x.array().exp().matrix();
  return tape;
}

inline Matrix sinkhorn_normalize(const Matrix& logits, std::size_t iterations,
                                 double temperature = 1.0) {
  return sinkhorn_forward(logits, iterations, temperature).result;
}

/// d(loss)/d(logits) given d(loss)/d(result).
inline Matrix sinkhorn_backward(const SinkhornTape& tape, const Matrix& d_result) {
  // Each pass is y = x - lse(x) along one axis, and exp(y) is the matching
  // softmax of x, so dx = dy - exp(y) * sum(dy) along that axis.
  Matrix dy = (d_result.array() * tape.result.array()).matrix();
  for (std::size_t p = tape.passes.size(); p-- > 0;) {
    const Matrix soft = tape.outputs[p].array().exp().matrix();
    if (tape.passes[p] == SinkhornTape::Pass::kRow) {
      const Vector sums = dy.rowwise().sum();
      dy = dy - (soft.array().colwise() * sums.array()).matrix();
    } else {
      const Eigen::RowVectorXd sums = dy.colwise().sum();
      dy = dy - (soft.array().rowwise() * sums.array()).matrix();
    }
  }
  return dy / tape.temperature;
}

/// Largest |row sum - 1| and |column sum - 1|.
struct StochasticDeviation {
  double rows = 0.0;
  double cols = 0.0;
};

inline StochasticDeviation stochastic_deviation(const Matrix& m) {
  return {(m.rowwise().sum().array() - 1.0).abs().maxCoeff(),
          (m.colwise().sum().array() - 1.0).abs().maxCoeff()};
}

// ---------------------------------------------------------------------------
// Block sorting

/// Mean of the real (unpadded) rows of each block. `valid_length` rows of x
/// are real; x may carry extra padding rows beyond it.
inline Matrix block_summaries(const Matrix& x, std::size_t block_size, std::size_t valid_length) {
  if (valid_length < 1 || valid_length > static_cast<std::size_t>(x.rows()))
    throw AttentionError("valid_length out of range");
  const auto blocks = block_partition(valid_length, block_size);
  Matrix s = Matrix::Zero(static_cast<Eigen::Index>(blocks.size()), x.cols());
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& r = blocks[b];
    s.row(static_cast<Eigen::Index>(b)) =
        x.middleRows(static_cast<Eigen::Index>(r.begin), static_cast<Eigen::Index>(r.valid))
            .colwise()
            .mean();
  }
  return s;
}

inline Matrix block_summaries_backward(const Matrix& d_summaries, std::size_t rows,
                                       std::size_t block_size, std::size_t valid_length) {
  const auto blocks = block_partition(valid_length, block_size);
  Matrix dx = Matrix::Zero(static_cast<Eigen::Index>(rows), d_summaries.cols());
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& r = blocks[b];
    for (std::size_t i = r.begin; i < r.begin + r.valid; ++i)
      dx.row(static_cast<Eigen::Index>(i)) =
          d_summaries.row(static_cast<Eigen::Index>(b)) / static_cast<double>(r.valid);
  }
  return dx;
}

struct SortTape {
  Matrix summaries;
  Matrix mixing;
  SinkhornTape sinkhorn;
};

inline SortTape sort_blocks_forward(const Matrix& summaries, const Matrix& mixing,
                                    std::size_t iterations, double temperature) {
  if (mixing.rows() != summaries.cols() || mixing.cols() != summaries.cols())
    throw AttentionError("mixing weights must be d x d for d-wide summaries");
  SortTape tape{summaries, mixing, {}};
  tape.sinkhorn = sinkhorn_forward(summaries * mixing * summaries.transpose(), iterations,
                                   temperature);
  return tape;
}

/// Bilinear block scores through Sinkhorn normalization.
inline Matrix sort_blocks(const Matrix& summaries, const Matrix& mixing, std::size_t iterations,
                          double temperature = 1.0) {
  return sort_blocks_forward(summaries, mixing, iterations, temperature).sinkhorn.result;
}

struct SortGrads {
  Matrix d_summaries;
  Matrix d_mixing;
};

inline SortGrads sort_blocks_backward(const SortTape& tape, const Matrix& d_sorting) {
  const Matrix dl = sinkhorn_backward(tape.sinkhorn, d_sorting);
  const Matrix& s = tape.summaries;
  const Matrix& w = tape.mixing;
  return {dl * s * w.transpose() + dl.transpose() * s * w, s.transpose() * dl * s};
}

// ---------------------------------------------------------------------------
// Sinkhorn (block-sorted) attention

/// Forward state kept for the backward pass. Attention weights per block
/// are (block_size x 2*block_size): own keys first, then re-mixed keys.
/// Masked columns and padded query rows hold zeros.
struct SparseAttentionTape {
  std::size_t rows = 0;
  std::size_t valid_length = 0;
  std::size_t block_size = 0;
  std::size_t num_blocks = 0;
  Matrix q, k, v;  // padded to num_blocks * block_size, padding rows zeroed
  Matrix sorting;
  std::vector<Matrix> weights;
  std::vector<std::vector<bool>> key_mask;  // true = column usable
  Matrix output;
};

namespace detail {

inline Matrix pad_rows(const Matrix& x, std::size_t valid, std::size_t padded) {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(padded), x.cols());
  out.topRows(static_cast<Eigen::Index>(valid)) = x.topRows(static_cast<Eigen::Index>(valid));
  return out;
}

inline Matrix block_rows(const Matrix& x, std::size_t b, std::size_t bs) {
  return x.middleRows(static_cast<Eigen::Index>(b * bs), static_cast<Eigen::Index>(bs));
}

}  // namespace detail

/// Rows at or beyond `valid_length` are padding: they contribute nothing
/// and get zero output. A re-mixed key slot that receives no mass from real
/// positions is masked.
inline SparseAttentionTape sinkhorn_attention_forward(const Matrix& q, const Matrix& k,
                                                      const Matrix& v, std::size_t block_size,
                                                      const Matrix& sorting,
                                                      std::size_t valid_length) {
  detail::check_qkv(q, k, v);
  if (q.rows() != k.rows()) throw AttentionError("sinkhorn attention is self-attention: Q and K lengths differ");
  if (block_size < 1) throw AttentionError("block_size must be >= 1");
  const auto rows = static_cast<std::size_t>(q.rows());
  if (valid_length < 1 || valid_length > rows) throw AttentionError("valid_length out of range");

  const std::size_t nb = (rows + block_size - 1) / block_size;
  if (static_cast<std::size_t>(sorting.rows()) != nb || sorting.cols() != sorting.rows())
    throw AttentionError("sorting matrix must be blocks x blocks");

  SparseAttentionTape t;
  t.rows = rows;
  t.valid_length = valid_length;
  t.block_size = block_size;
  t.num_blocks = nb;
  const std::size_t padded = nb * block_size;
  t.q = detail::pad_rows(q, valid_length, padded);
  t.k = detail::pad_rows(k, valid_length, padded);
  t.v = detail::pad_rows(v, valid_length, padded);
  t.sorting = sorting;
  t.output = Matrix::Zero(q.rows(), v.cols());

  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  const auto bs = static_cast<Eigen::Index>(block_size);
  for (std::size_t b = 0; b < nb; ++b) {
    Matrix kcat(2 * bs, k.cols());
    Matrix vcat(2 * bs, v.cols());
    kcat.topRows(bs) = detail::block_rows(t.k, b, block_size);
    vcat.topRows(bs) = detail::block_rows(t.v, b, block_size);
    Matrix kmix = Matrix::Zero(bs, k.cols());
    Matrix vmix = Matrix::Zero(bs, v.cols());
    std::vector<double> mass(block_size, 0.0);
    for (std::size_t src = 0; src < nb; ++src) {
      const double w = sorting(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(src));
      kmix += w * detail::block_rows(t.k, src, block_size);
      vmix += w * detail::block_rows(t.v, src, block_size);
      for (std::size_t r = 0; r < block_size; ++r)
        if (src * block_size + r < valid_length) mass[r] += w;
    }
    kcat.bottomRows(bs) = kmix;
    vcat.bottomRows(bs) = vmix;

    std::vector<bool> mask(2 * block_size);
    for (std::size_t r = 0; r < block_size; ++r) {
      mask[r] = b * block_size + r < valid_length;
      mask[block_size + r] = mass[r] != 0.0;
    }

    Matrix a = Matrix::Zero(bs, 2 * bs);
    const Matrix scores = detail::block_rows(t.q, b, block_size) * kcat.transpose() * scale;
    for (std::size_t i = 0; i < block_size; ++i) {
      if (b * block_size + i >= valid_length) continue;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < 2 * block_size; ++j)
        if (mask[j]) m = std::max(m, scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
      double z = 0.0;
      for (std::size_t j = 0; j < 2 * block_size; ++j) {
        if (!mask[j]) continue;
        const double e = std::exp(scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - m);
        a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = e;
        z += e;
      }
      a.row(static_cast<Eigen::Index>(i)) /= z;
      t.output.row(static_cast<Eigen::Index>(b * block_size + i)) =
          a.row(static_cast<Eigen::Index>(i)) * vcat;
    }
    t.weights.push_back(std::move(a));
    t.key_mask.push_back(std::move(mask));
  }
  return t;
}

inline Matrix sinkhorn_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                 std::size_t block_size, const Matrix& sorting) {
  return sinkhorn_attention_forward(q, k, v, block_size, sorting,
                                    static_cast<std::size_t>(q.rows()))
      .output;
}

inline Matrix sinkhorn_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                 const AttentionSpec& spec, const Matrix& sorting) {
  if (static_cast<std::size_t>(q.rows()) != spec.seq_len ||
      static_cast<std::size_t>(q.cols()) != spec.model_dim)
    throw AttentionError("inputs do not match the AttentionSpec shape");
  return sinkhorn_attention(q, k, v, spec.block_size, sorting);
}

struct SparseAttentionGrads {
  Matrix dq, dk, dv;
  Matrix d_sorting;
};

inline SparseAttentionGrads sinkhorn_attention_backward(const SparseAttentionTape& t,
                                                        const Matrix& d_out) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(t.q.cols()));
  const auto bs = static_cast<Eigen::Index>(t.block_size);
  const auto padded = static_cast<Eigen::Index>(t.num_blocks * t.block_size);
  Matrix dq = Matrix::Zero(padded, t.q.cols());
  Matrix dk = Matrix::Zero(padded, t.k.cols());
  Matrix dv = Matrix::Zero(padded, t.v.cols());
  Matrix dsort = Matrix::Zero(t.sorting.rows(), t.sorting.cols());
  Matrix dout = Matrix::Zero(padded, d_out.cols());
  dout.topRows(static_cast<Eigen::Index>(t.valid_length)) =
      d_out.topRows(static_cast<Eigen::Index>(t.valid_length));

  for (std::size_t b = 0; b < t.num_blocks; ++b) {
    const auto row0 = static_cast<Eigen::Index>(b * t.block_size);
    Matrix kcat(2 * bs, t.k.cols());
    Matrix vcat(2 * bs, t.v.cols());
    kcat.topRows(bs) = t.k.middleRows(row0, bs);
    vcat.topRows(bs) = t.v.middleRows(row0, bs);
    Matrix kmix = Matrix::Zero(bs, t.k.cols());
    Matrix vmix = Matrix::Zero(bs, t.v.cols());
    for (std::size_t src = 0; src < t.num_blocks; ++src) {
      const double w = t.sorting(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(src));
      kmix += w * t.k.middleRows(static_cast<Eigen::Index>(src * t.block_size), bs);
      vmix += w * t.v.middleRows(static_cast<Eigen::Index>(src * t.block_size), bs);
    }
    kcat.bottomRows(bs) = kmix;
    vcat.bottomRows(bs) = vmix;

    const Matrix& a = t.weights[b];
    const Matrix dob = dout.middleRows(row0, bs);
    const Matrix dvcat = a.transpose() * dob;
    const Matrix ds = detail::softmax_rows_backward(a, dob * vcat.transpose());
    dq.middleRows(row0, bs) += ds * kcat * scale;
    const Matrix dkcat = ds.transpose() * t.q.middleRows(row0, bs) * scale;

    dk.middleRows(row0, bs) += dkcat.topRows(bs);
    dv.middleRows(row0, bs) += dvcat.topRows(bs);
    const Matrix dkmix = dkcat.bottomRows(bs);
    const Matrix dvmix = dvcat.bottomRows(bs);
    for (std::size_t src = 0; src < t.num_blocks; ++src) {
      const auto src0 = static_cast<Eigen::Index>(src * t.block_size);
      const double w = t.sorting(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(src));
      dk.middleRows(src0, bs) += w * dkmix;
      dv.middleRows(src0, bs) += w * dvmix;
      dsort(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(src)) +=
          (dkmix.array() * t.k.middleRows(src0, bs).array()).sum() +
          (dvmix.array() * t.v.middleRows(src0, bs).array()).sum();
    }
  }

  SparseAttentionGrads g;
  const auto rows = static_cast<Eigen::Index>(t.rows);
  const auto valid = static_cast<Eigen::Index>(t.valid_length);
  g.dq = Matrix::Zero(rows, t.q.cols());
  g.dk = Matrix::Zero(rows, t.k.cols());
  g.dv = Matrix::Zero(rows, t.v.cols());
  g.dq.topRows(valid) = dq.topRows(valid);
  g.dk.topRows(valid) = dk.topRows(valid);
  g.dv.topRows(valid) = dv.topRows(valid);
  g.d_sorting = std::move(dsort);
  return g;
}

// ---------------------------------------------------------------------------
// Sparse layer: pooling -> sort_blocks -> sinkhorn attention

struct SparseLayerTape {
  SortTape sort;
  SparseAttentionTape attention;
};

inline SparseLayerTape sparse_layer_forward(const Matrix& q, const Matrix& k, const Matrix& v,
                                            const Matrix& mixing, std::size_t block_size,
                                            std::size_t iterations, double temperature,
                                            std::size_t valid_length) {
  SparseLayerTape tape;
  const Matrix summaries = block_summaries(k, block_size, valid_length);
  // Padding beyond the real rows may add whole blocks that have no summary;
  // callers keep padding within the last block.
  if (static_cast<std::size_t>(summaries.rows()) !=
      (static_cast<std::size_t>(q.rows()) + block_size - 1) / block_size)
    throw AttentionError("padding must not add whole blocks");
  tape.sort = sort_blocks_forward(summaries, mixing, iterations, temperature);
  tape.attention =
      sinkhorn_attention_forward(q, k, v, block_size, tape.sort.sinkhorn.result, valid_length);
  return tape;
}

inline Matrix sparse_layer(const Matrix& q, const Matrix& k, const Matrix& v,
                           const Matrix& mixing, const AttentionSpec& spec) {
  return sparse_layer_forward(q, k, v, mixing, spec.block_size, spec.sinkhorn_iterations,
                              spec.temperature, static_cast<std::size_t>(q.rows()))
      .attention.output;
}

struct SparseLayerGrads {
  Matrix dq, dk, dv, d_mixing;
};

inline SparseLayerGrads sparse_layer_backward(const SparseLayerTape& tape, const Matrix& d_out) {
  auto att = sinkhorn_attention_backward(tape.attention, d_out);
  const auto sort = sort_blocks_backward(tape.sort, att.d_sorting);
  att.dk += block_summaries_backward(sort.d_summaries, tape.attention.rows,
                                     tape.attention.block_size, tape.attention.valid_length);
  return {std::move(att.dq), std::move(att.dk), std::move(att.dv), sort.d_mixing};
}

// ---------------------------------------------------------------------------
// Matrix fixtures: json arrays of arrays, row-major.

inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.empty() || !j[0].is_array())
    throw AttentionError("matrix json must be a non-empty array of arrays");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw AttentionError("ragged matrix json");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

}  // namespace longdial
