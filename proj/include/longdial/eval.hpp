#pragma once

// Topic-segmentation metrics (Pk, WindowDiff), the Random / Even baselines,
// and ROUGE-N / ROUGE-L.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "longdial/dialogue.hpp"
#include "longdial/random.hpp"

namespace longdial {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Boundary b means turn b ends a segment. The final turn always ends a
/// segment and is never stored.
class Segmentation {
 public:
  Segmentation(std::size_t turn_count, std::vector<std::size_t> boundaries)
      : turn_count_(turn_count), boundaries_(std::move(boundaries)) {
    if (turn_count_ == 0) throw MetricError("segmentation needs at least one turn");
    std::sort(boundaries_.begin(), boundaries_.end());
    boundaries_.erase(std::unique(boundaries_.begin(), boundaries_.end()), boundaries_.end());
    if (!boundaries_.empty() && boundaries_.back() + 1 >= turn_count_)
      throw MetricError("boundary index out of range");
  }

  std::size_t turn_count() const noexcept { return turn_count_; }
  const std::vector<std::size_t>& boundaries() const noexcept { return boundaries_; }
  std::size_t segment_count() const noexcept { return boundaries_.size() + 1; }

  std::vector<std::size_t> segment_lengths() const {
    std::vector<std::size_t> out;
    std::size_t prev = 0;
    for (std::size_t b : boundaries_) {
      out.push_back(b + 1 - prev);
      prev = b + 1;
    }
    out.push_back(turn_count_ - prev);
    return out;
  }

  bool operator==(const Segmentation&) const = default;

 private:
  std::size_t turn_count_;
  std::vector<std::size_t> boundaries_;
};

inline Segmentation labels_to_segmentation(std::span<const int> labels) {
  if (labels.empty()) throw MetricError("labels must be non-empty");
  std::vector<std::size_t> b;
  for (std::size_t i = 0; i + 1 < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw MetricError("labels must be 0 or 1");
    if (labels[i] == 1) b.push_back(i);
  }
  if (labels.back() != 0 && labels.back() != 1) throw MetricError("labels must be 0 or 1");
  return Segmentation(labels.size(), std::move(b));
}

/// The final label is always 1 (the implicit segment end).
inline std::vector<int> segmentation_to_labels(const Segmentation& seg) {
  std::vector<int> labels(seg.turn_count(), 0);
  for (std::size_t b : seg.boundaries()) labels[b] = 1;
  labels.back() = 1;
  return labels;
}

/// max(1, round(mean reference segment length / 2)).
inline std::size_t default_window(const Segmentation& reference) {
  const double mean = static_cast<double>(reference.turn_count()) /
                      static_cast<double>(reference.segment_count());
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(mean / 2.0)));
}

namespace detail {

// prefix[i] = number of boundaries with index < i.
inline std::vector<std::size_t> boundary_prefix(const Segmentation& s) {
  std::vector<std::size_t> prefix(s.turn_count() + 1, 0);
  std::size_t bi = 0;
  for (std::size_t i = 0; i < s.turn_count(); ++i) {
    prefix[i + 1] = prefix[i];
    if (bi < s.boundaries().size() && s.boundaries()[bi] == i) {
      ++prefix[i + 1];
      ++bi;
    }
  }
  return prefix;
}

inline std::size_t resolve_window(const Segmentation& ref, const Segmentation& hyp,
                                  std::optional<std::size_t> k) {
  if (ref.turn_count() != hyp.turn_count())
    throw MetricError("reference and hypothesis turn counts differ");
  const std::size_t window = k ? *k : default_window(ref);
  if (window == 0) throw MetricError("window k must be positive");
  if (ref.turn_count() <= window) throw MetricError("turn count must exceed window k");
  return window;
}

template <class Disagree>
double sliding_error(const Segmentation& ref, const Segmentation& hyp, std::size_t k,
                     Disagree&& disagree) {
  const auto pr = boundary_prefix(ref);
  const auto ph = boundary_prefix(hyp);
  const std::size_t positions = ref.turn_count() - k;
  std::size_t errors = 0;
  // Boundaries in [i, i + k) separate turn i from turn i + k.
  for (std::size_t i = 0; i < positions; ++i)
    if (disagree(pr[i + k] - pr[i], ph[i + k] - ph[i])) ++errors;
  return static_cast<double>(errors) / static_cast<double>(positions);
}

}  // namespace detail

/// Fraction of probes (i, i+k) on which reference and hypothesis disagree
/// about whether both ends share a segment.
inline double pk(const Segmentation& reference, const Segmentation& hypothesis,
                 std::optional<std::size_t> k = std::nullopt) {
  const std::size_t w = detail::resolve_window(reference, hypothesis, k);
  return detail::sliding_error(reference, hypothesis, w, [](std::size_t r, std::size_t h) {
    return (r == 0) != (h == 0);
  });
}

/// Fraction of probes whose boundary counts differ.
inline double windiff(const Segmentation& reference, const Segmentation& hypothesis,
                      std::optional<std::size_t> k = std::nullopt) {
  const std::size_t w = detail::resolve_window(reference, hypothesis, k);
  return detail::sliding_error(reference, hypothesis, w,
                               [](std::size_t r, std::size_t h) { return r != h; });
}

template <RandomSource R>
Segmentation baseline_random(std::size_t turn_count, double boundary_prob, R& rng) {
  if (!(boundary_prob >= 0.0 && boundary_prob <= 1.0))
    throw MetricError("boundary_prob must be in [0, 1]");
  std::vector<std::size_t> b;
  for (std::size_t i = 0; i + 1 < turn_count; ++i)
    if (rng.uniform() < boundary_prob) b.push_back(i);
  return Segmentation(turn_count, std::move(b));
}

/// Boundary density of a reference, the default Random-baseline rate.
inline double boundary_density(const Segmentation& s) {
  if (s.turn_count() < 2) return 0.0;
  return static_cast<double>(s.boundaries().size()) / static_cast<double>(s.turn_count() - 1);
}

/// Segment lengths differ by at most one; earlier segments take the extra turns.
inline Segmentation baseline_even(std::size_t turn_count, std::size_t num_segments) {
  if (num_segments < 1 || num_segments > turn_count)
    throw MetricError("num_segments must be in [1, turn_count]");
  const std::size_t base = turn_count / num_segments;
  const std::size_t extra = turn_count % num_segments;
  std::vector<std::size_t> b;
  std::size_t end = 0;
  for (std::size_t s = 0; s + 1 < num_segments; ++s) {
    end += base + (s < extra ? 1 : 0);
    b.push_back(end - 1);
  }
  return Segmentation(turn_count, std::move(b));
}

// ---------------------------------------------------------------------------
// ROUGE

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline RougeScore make_rouge_score(double p, double r) {
  return {p, r, p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0};
}

/// Lowercased whitespace tokens with punctuation stripped from both edges;
/// tokens that are all punctuation disappear. No stemming.
inline std::vector<std::string> rouge_tokens(std::string_view text) {
  std::vector<std::string> out;
  detail::for_each_token(text, [&](std::string_view t) {
    std::size_t b = 0;
    std::size_t e = t.size();
    while (b < e && std::ispunct(static_cast<unsigned char>(t[b]))) ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(t[e - 1]))) --e;
    if (b == e) return;
    std::string tok(t.substr(b, e - b));
    for (char& c : tok) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    out.push_back(std::move(tok));
  });
  return out;
}

namespace detail {

inline std::map<std::vector<std::string>, std::size_t> ngram_counts(
    const std::vector<std::string>& tokens, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i)
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

/// LCS table, (|a|+1) x (|b|+1), row-major.
inline std::vector<std::size_t> lcs_table(std::span<const std::string> a,
                                          std::span<const std::string> b) {
  const std::size_t w = b.size() + 1;
  std::vector<std::size_t> t((a.size() + 1) * w, 0);
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j)
      t[i * w + j] = a[i - 1] == b[j - 1] ? t[(i - 1) * w + j - 1] + 1
                                          : std::max(t[(i - 1) * w + j], t[i * w + j - 1]);
  return t;
}

/// Indices into `ref` of one LCS with `cand`.
inline std::vector<std::size_t> lcs_indices(std::span<const std::string> ref,
                                            std::span<const std::string> cand) {
  const auto t = lcs_table(ref, cand);
  const std::size_t w = cand.size() + 1;
  std::vector<std::size_t> idx;
  std::size_t i = ref.size();
  std::size_t j = cand.size();
  while (i > 0 && j > 0) {
    if (ref[i - 1] == cand[j - 1]) {
      idx.push_back(i - 1);
      --i;
      --j;
    } else if (t[(i - 1) * w + j] >= t[i * w + j - 1]) {
      --i;
    } else {
      --j;
    }
  }
  std::reverse(idx.begin(), idx.end());
  return idx;
}

}  // namespace detail

inline std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  return detail::lcs_table(a, b).back();
}

inline RougeScore rouge_n(std::string_view candidate, std::string_view reference,
                          std::size_t n) {
  if (n < 1) throw MetricError("rouge_n requires n >= 1");
  const auto cand = detail::ngram_counts(rouge_tokens(candidate), n);
  const auto ref = detail::ngram_counts(rouge_tokens(reference), n);
  std::size_t cand_total = 0;
  std::size_t ref_total = 0;
  std::size_t overlap = 0;
  for (const auto& [g, c] : cand) cand_total += c;
  for (const auto& [g, c] : ref) {
    ref_total += c;
    if (auto it = cand.find(g); it != cand.end()) overlap += std::min(c, it->second);
  }
  if (cand_total == 0 || ref_total == 0) return {};
  return make_rouge_score(static_cast<double>(overlap) / static_cast<double>(cand_total),
                          static_cast<double>(overlap) / static_cast<double>(ref_total));
}

/// Sentences for summary-level ROUGE-L: lines, each split at terminal
/// punctuation, tokenized for ROUGE; empty sentences dropped.
inline std::vector<std::vector<std::string>> rouge_sentences(std::string_view text) {
  std::vector<std::vector<std::string>> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    for (const auto& s : split_sentences(text.substr(pos, end - pos))) {
      auto toks = rouge_tokens(s);
      if (!toks.empty()) out.push_back(std::move(toks));
    }
    pos = end + 1;
  }
  return out;
}

/// sentence_split = false: LCS over the whole token sequences.
/// sentence_split = true: summary-level union-LCS, each reference sentence
/// against all candidate sentences, with hits clipped by token counts.
inline RougeScore rouge_l(std::string_view candidate, std::string_view reference,
                          bool sentence_split = false) {
  if (!sentence_split) {
    const auto c = rouge_tokens(candidate);
    const auto r = rouge_tokens(reference);
    if (c.empty() || r.empty()) return {};
    const auto lcs = static_cast<double>(lcs_length(c, r));
    return make_rouge_score(lcs / static_cast<double>(c.size()),
                            lcs / static_cast<double>(r.size()));
  }

  const auto cand_sents = rouge_sentences(candidate);
  const auto ref_sents = rouge_sentences(reference);
  std::map<std::string, std::size_t> cand_left;
  std::map<std::string, std::size_t> ref_left;
  std::size_t cand_total = 0;
  std::size_t ref_total = 0;
  for (const auto& s : cand_sents)
    for (const auto& t : s) ++cand_left[t], ++cand_total;
  for (const auto& s : ref_sents)
    for (const auto& t : s) ++ref_left[t], ++ref_total;
  if (cand_total == 0 || ref_total == 0) return {};

  std::size_t hits = 0;
  for (const auto& r : ref_sents) {
    std::set<std::size_t> uni;
    for (const auto& c : cand_sents)
      for (std::size_t i : detail::lcs_indices(r, c)) uni.insert(i);
    for (std::size_t i : uni) {
      auto& cl = cand_left[r[i]];
      auto& rl = ref_left[r[i]];
      if (cl > 0 && rl > 0) {
        --cl;
        --rl;
        ++hits;
      }
    }
  }
  return make_rouge_score(static_cast<double>(hits) / static_cast<double>(cand_total),
                          static_cast<double>(hits) / static_cast<double>(ref_total));
}

}  // namespace longdial
