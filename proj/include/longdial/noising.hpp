#pragma once

// Window-based denoising: pick a window of consecutive whole turns, corrupt
// it with the dialogue noises and emit (input with noisy window, clean window).
//
// Draw order for one example (all from a single Rng seeded by
// derive_example_seed(derive_seed(global_seed, id), example_index)):
//   1. window start            below(n_turns)
//   2. speaker mask            uniform() per window turn with a speaker
//   3. split/merge coin        uniform() < 0.5 picks split (only when both
//                              are enabled)
//   4. merge, if applied       sample_poisson(lambda), then below(n - k + 1)
//   5. infilling, per span     sample_poisson(lambda), then below(T) for the
//                              anchor, redrawn on overlap; a span that finds
//                              no free anchor is dropped and a new length drawn
//   6. permutation             Fisher-Yates, i = n-1 .. 1, below(i + 1)
// Splitting consumes no draws.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "longdial/dialogue.hpp"
#include "longdial/random.hpp"

namespace longdial {

struct NoiseConfig {
  double window_fraction = 0.10;
  std::size_t max_window_tokens = 512;
  double speaker_mask_prob = 0.5;
  double infill_rate = 0.15;
  double poisson_lambda = 3.0;
  std::size_t min_merge_turns = 2;
  std::uint64_t global_seed = 0;
  /// Anchor draws per span before its length is redrawn, and consecutive
  /// unplaceable spans before infilling stops short of its budget.
  std::size_t infill_max_retries = 100;
  bool enable_turn_split = true;
  bool enable_turn_merge = true;
  bool enable_permutation = true;

  void validate() const {
    if (!(window_fraction > 0.0 && window_fraction <= 1.0))
      throw std::invalid_argument("window_fraction must be in (0, 1]");
    if (max_window_tokens < 1)
      throw std::invalid_argument("max_window_tokens must be >= 1");
    if (!(speaker_mask_prob >= 0.0 && speaker_mask_prob <= 1.0))
      throw std::invalid_argument("speaker_mask_prob must be in [0, 1]");
    if (!(infill_rate >= 0.0 && infill_rate < 1.0))
      throw std::invalid_argument("infill_rate must be in [0, 1)");
    if (!(poisson_lambda > 0.0 && poisson_lambda <= 700.0))
      throw std::invalid_argument("poisson_lambda must be in (0, 700]");
    if (min_merge_turns < 2)
      throw std::invalid_argument("min_merge_turns must be >= 2");
  }
};

struct Window {
  std::size_t start_turn = 0;
  std::size_t turn_count = 0;
  std::span<const Turn> turns;
  std::size_t budget = 0;       // token budget B
  std::size_t token_count = 0;  // serialized tokens actually in the window
  bool oversized_turn = false;  // the start turn alone exceeded B
};

enum class StructuralNoise { kNone, kSplit, kMerge };

inline const char* to_string(StructuralNoise s) {
  switch (s) {
    case StructuralNoise::kSplit: return "split";
    case StructuralNoise::kMerge: return "merge";
    case StructuralNoise::kNone: break;
  }
  return "none";
}

/// One infilling edit, addressed in the turn list as it stood right before
/// infilling. `length` tokens starting at `offset` of turn `turn`'s utterance
/// become one [MASK]; length 0 inserts [MASK] before token `offset`.
struct InfillSpan {
  std::size_t turn = 0;
  std::size_t offset = 0;
  std::size_t length = 0;
  std::size_t sampled_length = 0;

  bool operator==(const InfillSpan&) const = default;
};

struct MergeEdit {
  std::size_t start = 0;
  std::size_t count = 0;
  std::size_t sampled = 0;  // raw Poisson draw before the floor and clamp

  bool operator==(const MergeEdit&) const = default;
};

struct SplitEdit {
  std::size_t turn = 0;
  std::size_t pieces = 0;

  bool operator==(const SplitEdit&) const = default;
};

/// Everything needed to replay a corruption on the clean window.
struct NoiseTrace {
  std::size_t window_budget = 0;
  bool oversized_turn = false;
  std::vector<std::size_t> masked_speakers;
  std::optional<bool> coin_chose_split;
  StructuralNoise structural = StructuralNoise::kNone;
  std::optional<SplitEdit> split;
  std::optional<MergeEdit> merge;
  std::size_t infill_total_tokens = 0;
  std::size_t infill_budget = 0;
  std::size_t infill_replaced = 0;
  std::vector<InfillSpan> infill_spans;
  std::vector<std::size_t> permutation;  // output position -> input index

  bool operator==(const NoiseTrace&) const = default;
};

struct DenoisingExample {
  std::string dialogue_id;
  std::size_t example_index = 0;
  std::string input_text;
  std::string target_text;
  std::size_t window_start = 0;
  std::size_t window_turn_count = 0;
  NoiseTrace trace;
};

class NoisingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Window selection

inline std::size_t window_budget(std::size_t total_tokens,
                                 const NoiseConfig& cfg) {
  const auto fraction = static_cast<std::size_t>(
      std::floor(cfg.window_fraction * static_cast<double>(total_tokens) + 1e-9));
  return std::max<std::size_t>(1, std::min(fraction, cfg.max_window_tokens));
}

/// Greedy whole-turn window from `start`; exposed separately so the packing
/// rule can be checked for every start.
inline Window window_from_start(std::span<const Turn> turns, std::size_t start,
                                std::size_t budget) {
  if (start >= turns.size()) throw NoisingError("window start out of range");
  Window w;
  w.start_turn = start;
  w.budget = budget;
  std::size_t used = turn_token_count(turns[start]);
  std::size_t end = start + 1;
  if (used > budget) {
    w.oversized_turn = true;
  } else {
    while (end < turns.size()) {
      const std::size_t next = turn_token_count(turns[end]);
      if (used + next > budget) break;
      used += next;
      ++end;
    }
  }
  w.turn_count = end - start;
  w.token_count = used;
  w.turns = turns.subspan(start, w.turn_count);
  return w;
}

template <RandomSource R>
Window select_window(const Dialogue& dialogue, const NoiseConfig& cfg, R& rng) {
  if (dialogue.turns.empty())
    throw NoisingError("dialogue '" + dialogue.id + "' has no turns");
  const std::span<const Turn> turns(dialogue.turns);
  const std::size_t budget = window_budget(dialogue_token_count(turns), cfg);
  return window_from_start(turns, rng.below(turns.size()), budget);
}

// ---------------------------------------------------------------------------
// Deterministic edits. Each sampling function below draws its decisions and
// delegates to one of these, which is also what trace replay calls.

inline std::vector<Turn> apply_speaker_mask(std::vector<Turn> turns,
                                            std::span<const std::size_t> masked) {
  for (std::size_t i : masked) {
    if (i >= turns.size() || !turns[i].speaker)
      throw NoisingError("speaker mask index does not name a speakered turn");
    turns[i].speaker = std::string(kMaskSpeaker);
  }
  return turns;
}

/// Index of the earliest turn with the most sentences, if that count is >= 2.
inline std::optional<std::size_t> split_candidate(std::span<const Turn> turns) {
  std::optional<std::size_t> best;
  std::size_t best_count = 1;
  for (std::size_t i = 0; i < turns.size(); ++i) {
    if (turns[i].sentences.size() > best_count) {
      best = i;
      best_count = turns[i].sentences.size();
    }
  }
  return best;
}

inline std::vector<Turn> apply_turn_split(std::vector<Turn> turns,
                                          std::size_t index) {
  if (index >= turns.size()) throw NoisingError("split index out of range");
  Turn original = std::move(turns[index]);
  std::vector<Turn> pieces;
  pieces.reserve(original.sentences.size());
  for (std::size_t s = 0; s < original.sentences.size(); ++s) {
    Turn piece;
    piece.speaker = s == 0 ? original.speaker
                           : std::optional<std::string>(std::string(kMaskSpeaker));
    piece.sentences.push_back(std::move(original.sentences[s]));
    pieces.push_back(std::move(piece));
  }
  turns.erase(turns.begin() + static_cast<std::ptrdiff_t>(index));
  turns.insert(turns.begin() + static_cast<std::ptrdiff_t>(index),
               std::make_move_iterator(pieces.begin()),
               std::make_move_iterator(pieces.end()));
  return turns;
}

inline std::vector<Turn> apply_turn_merge(std::vector<Turn> turns,
                                          std::size_t start, std::size_t count) {
  if (count < 1 || start + count > turns.size())
    throw NoisingError("merge range out of bounds");
  Turn& head = turns[start];
  for (std::size_t i = start + 1; i < start + count; ++i) {
    for (auto& s : turns[i].sentences) head.sentences.push_back(std::move(s));
  }
  turns.erase(turns.begin() + static_cast<std::ptrdiff_t>(start + 1),
              turns.begin() + static_cast<std::ptrdiff_t>(start + count));
  return turns;
}

inline std::vector<Turn> apply_text_infilling(std::vector<Turn> turns,
                                              std::span<const InfillSpan> spans) {
  struct Edit {
    std::size_t offset;
    std::size_t length;
  };
  std::vector<std::vector<Edit>> per_turn(turns.size());
  for (const auto& s : spans) {
    if (s.turn >= turns.size()) throw NoisingError("infill span turn out of range");
    per_turn[s.turn].push_back({s.offset, s.length});
  }
  for (std::size_t t = 0; t < turns.size(); ++t) {
    auto& edits = per_turn[t];
    if (edits.empty()) continue;
    // Insertions sort before a replacement at the same offset.
    std::sort(edits.begin(), edits.end(), [](const Edit& a, const Edit& b) {
      return a.offset != b.offset ? a.offset < b.offset : a.length < b.length;
    });

    // Flatten with sentence membership so sentence grouping survives.
    std::vector<std::pair<std::size_t, std::string>> tokens;
    for (std::size_t s = 0; s < turns[t].sentences.size(); ++s)
      for (auto& tok : tokenize(turns[t].sentences[s])) tokens.emplace_back(s, std::move(tok));

    std::vector<std::pair<std::size_t, std::string>> out;
    std::size_t e = 0;
    std::size_t p = 0;
    while (p < tokens.size()) {
      bool replaced = false;
      while (e < edits.size() && edits[e].offset == p) {
        out.emplace_back(tokens[p].first, std::string(kMask));
        if (edits[e].length > 0) {
          if (p + edits[e].length > tokens.size())
            throw NoisingError("infill span runs past the end of its turn");
          p += edits[e].length;
          replaced = true;
          ++e;
          break;
        }
        ++e;
      }
      if (!replaced) {
        out.push_back(std::move(tokens[p]));
        ++p;
      }
      if (e < edits.size() && edits[e].offset < p)
        throw NoisingError("overlapping infill spans");
    }
    if (e != edits.size()) throw NoisingError("infill offset out of range");

    std::vector<std::string> sentences;
    std::optional<std::size_t> current;
    for (auto& [sid, tok] : out) {
      if (!current || *current != sid) {
        sentences.emplace_back();
        current = sid;
      } else {
        sentences.back().push_back(' ');
      }
      sentences.back().append(tok);
    }
    turns[t].sentences = std::move(sentences);
  }
  return turns;
}

inline std::vector<Turn> apply_permutation(const std::vector<Turn>& turns,
                                           std::span<const std::size_t> order) {
  if (order.size() != turns.size())
    throw NoisingError("permutation size does not match turn count");
  std::vector<bool> seen(turns.size(), false);
  std::vector<Turn> out;
  out.reserve(turns.size());
  for (std::size_t src : order) {
    if (src >= turns.size() || seen[src]) throw NoisingError("invalid permutation");
    seen[src] = true;
    out.push_back(turns[src]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampled noises

template <RandomSource R>
std::vector<Turn> noise_speaker_mask(std::vector<Turn> turns, double prob, R& rng,
                                     std::vector<std::size_t>* masked = nullptr) {
  std::vector<std::size_t> picked;
  for (std::size_t i = 0; i < turns.size(); ++i) {
    if (!turns[i].speaker) continue;
    if (rng.uniform() < prob) picked.push_back(i);
  }
  turns = apply_speaker_mask(std::move(turns), picked);
  if (masked) *masked = std::move(picked);
  return turns;
}

inline std::vector<Turn> noise_turn_splitting(std::vector<Turn> turns,
                                              std::optional<SplitEdit>* edit = nullptr) {
  const auto idx = split_candidate(turns);
  if (!idx) return turns;
  if (edit) *edit = SplitEdit{*idx, turns[*idx].sentences.size()};
  return apply_turn_split(std::move(turns), *idx);
}

template <RandomSource R>
std::vector<Turn> noise_turn_merging(std::vector<Turn> turns, const NoiseConfig& cfg,
                                     R& rng, std::optional<MergeEdit>* edit = nullptr) {
  if (turns.size() < 2) return turns;
  const std::size_t sampled = sample_poisson(cfg.poisson_lambda, rng);
  const std::size_t k = std::min(std::max(sampled, cfg.min_merge_turns), turns.size());
  const std::size_t start = rng.below(turns.size() - k + 1);
  if (edit) *edit = MergeEdit{start, k, sampled};
  return apply_turn_merge(std::move(turns), start, k);
}

struct InfillOutcome {
  std::size_t total_tokens = 0;  // T
  std::size_t budget = 0;        // ceil(rate * T)
  std::size_t replaced = 0;
  std::vector<InfillSpan> spans;
};

/// Replaced-token cap for infilling: the first span to cross the budget may
/// overshoot, but never past rate * T + lambda tokens in total.
inline std::size_t infill_cap(std::size_t total, std::size_t budget,
                              const NoiseConfig& cfg) {
  const auto cap = static_cast<std::size_t>(std::floor(
      cfg.infill_rate * static_cast<double>(total) + cfg.poisson_lambda + 1e-9));
  return std::max(budget, std::min(cap, total));
}

template <RandomSource R>
std::vector<Turn> noise_text_infilling(std::vector<Turn> turns, const NoiseConfig& cfg,
                                       R& rng, InfillOutcome* outcome = nullptr) {
  InfillOutcome res;
  std::vector<std::size_t> turn_begin(turns.size() + 1, 0);
  for (std::size_t t = 0; t < turns.size(); ++t)
    turn_begin[t + 1] = turn_begin[t] + utterance_token_count(turns[t]);
  const std::size_t total = turn_begin.back();
  res.total_tokens = total;
  res.budget = static_cast<std::size_t>(
      std::ceil(cfg.infill_rate * static_cast<double>(total) - 1e-9));
  const std::size_t cap = infill_cap(total, res.budget, cfg);

  // An insertion sits just before its anchor token: a later span may start
  // there but not swallow it, and no second insertion may share the anchor.
  std::vector<bool> covered(total, false);
  std::vector<bool> inserted(total, false);
  std::size_t failed_spans = 0;
  while (res.replaced < res.budget && failed_spans < cfg.infill_max_retries) {
    const std::size_t sampled = sample_poisson(cfg.poisson_lambda, rng);
    bool placed = false;
    for (std::size_t attempt = 0; attempt < cfg.infill_max_retries && !placed; ++attempt) {
      const std::size_t anchor = rng.below(total);
      const auto turn_it = std::upper_bound(turn_begin.begin(), turn_begin.end(), anchor);
      const auto t = static_cast<std::size_t>(turn_it - turn_begin.begin()) - 1;
      const std::size_t turn_end = turn_begin[t + 1];
      std::size_t length = std::min(sampled, turn_end - anchor);
      length = std::min(length, cap - res.replaced);

      bool free = !covered[anchor] && (length > 0 || !inserted[anchor]);
      for (std::size_t p = anchor + 1; free && p < anchor + length; ++p)
        free = !covered[p] && !inserted[p];
      if (!free) continue;

      if (length == 0) {
        inserted[anchor] = true;
      } else {
        for (std::size_t p = anchor; p < anchor + length; ++p) covered[p] = true;
      }
      res.replaced += length;
      res.spans.push_back({t, anchor - turn_begin[t], length, sampled});
      placed = true;
    }
    failed_spans = placed ? 0 : failed_spans + 1;
  }
  turns = apply_text_infilling(std::move(turns), res.spans);
  if (outcome) *outcome = std::move(res);
  return turns;
}

template <RandomSource R>
std::vector<std::size_t> sample_permutation(std::size_t n, R& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i-- > 1;) {
    const std::size_t j = rng.below(i + 1);
    std::swap(order[i], order[j]);
  }
  return order;
}

template <RandomSource R>
std::vector<Turn> noise_turn_permutation(const std::vector<Turn>& turns, R& rng,
                                         std::vector<std::size_t>* order_out = nullptr) {
  auto order = sample_permutation(turns.size(), rng);
  auto out = apply_permutation(turns, order);
  if (order_out) *order_out = std::move(order);
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline

/// Runs the noise pipeline on a clean window and records every decision.
template <RandomSource R>
std::vector<Turn> corrupt_window(std::span<const Turn> window, const NoiseConfig& cfg,
                                 R& rng, NoiseTrace& trace) {
  std::vector<Turn> turns(window.begin(), window.end());
  turns = noise_speaker_mask(std::move(turns), cfg.speaker_mask_prob, rng,
                             &trace.masked_speakers);

  const bool split_possible = cfg.enable_turn_split && split_candidate(turns).has_value();
  const bool merge_possible = cfg.enable_turn_merge && turns.size() >= 2;
  bool use_split = cfg.enable_turn_split;
  if (cfg.enable_turn_split && cfg.enable_turn_merge) {
    use_split = rng.uniform() < 0.5;
    trace.coin_chose_split = use_split;
  }
  if (use_split && !split_possible) use_split = false;
  if (!use_split && !merge_possible) use_split = split_possible;

  if (use_split && split_possible) {
    turns = noise_turn_splitting(std::move(turns), &trace.split);
    trace.structural = StructuralNoise::kSplit;
  } else if (merge_possible) {
    turns = noise_turn_merging(std::move(turns), cfg, rng, &trace.merge);
    trace.structural = StructuralNoise::kMerge;
  }

  InfillOutcome infill;
  turns = noise_text_infilling(std::move(turns), cfg, rng, &infill);
  trace.infill_total_tokens = infill.total_tokens;
  trace.infill_budget = infill.budget;
  trace.infill_replaced = infill.replaced;
  trace.infill_spans = std::move(infill.spans);

  if (cfg.enable_permutation) {
    turns = noise_turn_permutation(turns, rng, &trace.permutation);
  } else {
    trace.permutation.resize(turns.size());
    std::iota(trace.permutation.begin(), trace.permutation.end(), std::size_t{0});
  }
  return turns;
}

/// Re-applies a recorded corruption to the clean window. No randomness.
inline std::vector<Turn> replay_trace(std::span<const Turn> window,
                                      const NoiseTrace& trace) {
  std::vector<Turn> turns(window.begin(), window.end());
  turns = apply_speaker_mask(std::move(turns), trace.masked_speakers);
  switch (trace.structural) {
    case StructuralNoise::kSplit:
      if (!trace.split) throw NoisingError("trace marks split without a split edit");
      turns = apply_turn_split(std::move(turns), trace.split->turn);
      break;
    case StructuralNoise::kMerge:
      if (!trace.merge) throw NoisingError("trace marks merge without a merge edit");
      turns = apply_turn_merge(std::move(turns), trace.merge->start, trace.merge->count);
      break;
    case StructuralNoise::kNone:
      break;
  }
  turns = apply_text_infilling(std::move(turns), trace.infill_spans);
  // An empty permutation means the order was left alone.
  if (!trace.permutation.empty()) turns = apply_permutation(turns, trace.permutation);
  return turns;
}

inline std::string assemble_input(std::span<const Turn> dialogue, const Window& window,
                                  std::span<const Turn> noisy) {
  std::vector<Turn> all;
  all.reserve(dialogue.size() - window.turn_count + noisy.size());
  all.insert(all.end(), dialogue.begin(),
             dialogue.begin() + static_cast<std::ptrdiff_t>(window.start_turn));
  all.insert(all.end(), noisy.begin(), noisy.end());
  all.insert(all.end(),
             dialogue.begin() + static_cast<std::ptrdiff_t>(window.start_turn + window.turn_count),
             dialogue.end());
  return serialize_dialogue(all);
}

inline DenoisingExample build_example(const Dialogue& dialogue, const NoiseConfig& cfg,
                                      std::size_t example_index = 0) {
  cfg.validate();
  Rng rng(derive_example_seed(derive_seed(cfg.global_seed, dialogue.id), example_index));
  const Window window = select_window(dialogue, cfg, rng);

  DenoisingExample ex;
  ex.dialogue_id = dialogue.id;
  ex.example_index = example_index;
  ex.window_start = window.start_turn;
  ex.window_turn_count = window.turn_count;
  ex.target_text = serialize_dialogue(window.turns);
  ex.trace.window_budget = window.budget;
  ex.trace.oversized_turn = window.oversized_turn;

  const auto noisy = corrupt_window(window.turns, cfg, rng, ex.trace);
  ex.input_text = assemble_input(dialogue.turns, window, noisy);
  return ex;
}

inline std::vector<DenoisingExample> build_examples(const Dialogue& dialogue,
                                                    const NoiseConfig& cfg,
                                                    std::size_t examples_per_dialogue) {
  if (examples_per_dialogue < 1)
    throw std::invalid_argument("examples_per_dialogue must be >= 1");
  std::vector<DenoisingExample> out;
  out.reserve(examples_per_dialogue);
  for (std::size_t i = 0; i < examples_per_dialogue; ++i)
    out.push_back(build_example(dialogue, cfg, i));
  return out;
}

}  // namespace longdial
