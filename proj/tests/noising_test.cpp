#include <gtest/gtest.h>

#include <algorithm>
#include <map>

#include "longdial/noising.hpp"
#include "test_support.hpp"

using namespace longdial;
using testing_support::poisson_draws;
using testing_support::ScriptedSource;
using testing_support::turn;

namespace {

std::string words(std::size_t n) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += (i ? " w" : "w");
  return s + ".";
}

std::multiset<std::string> utterance_tokens(const std::vector<Turn>& turns) {
  std::multiset<std::string> out;
  for (const auto& t : turns)
    for (const auto& s : t.sentences)
      for (auto& tok : tokenize(s)) out.insert(tok);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Worked examples with forced draws

TEST(WorkedExample, SpeakerMask) {
  ScriptedSource src({0.0}, {});
  const auto out = noise_speaker_mask(testing_support::worked_speaker_mask(), 0.5, src);
  EXPECT_EQ(serialize_dialogue(out), "[MASK_SPEAKER]: The weather is good today!");
  EXPECT_TRUE(src.drained());
}

TEST(WorkedExample, TurnSplitting) {
  std::optional<SplitEdit> edit;
  const auto out = noise_turn_splitting(testing_support::worked_three_sentences(), &edit);
  EXPECT_EQ(serialize_dialogue(out),
            "Tom: The weather is good today!\n"
            "[MASK_SPEAKER]: Do you have any plans?\n"
            "[MASK_SPEAKER]: How about we go to play basketball?");
  ASSERT_TRUE(edit);
  EXPECT_EQ(edit->pieces, 3u);
}

TEST(WorkedExample, TurnMerging) {
  NoiseConfig cfg;
  ScriptedSource src(poisson_draws(2), {0});
  std::optional<MergeEdit> edit;
  const auto out = noise_turn_merging(testing_support::worked_merge(), cfg, src, &edit);
  EXPECT_EQ(serialize_dialogue(out),
            "Tom: The weather is good today! Do you have any plans? I still have homework to do "
            "today. I'm afraid I can't go out to play.");
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].sentences.size(), 4u);
  EXPECT_TRUE(src.drained());
}

TEST(WorkedExample, TextInfilling) {
  // 17 utterance tokens: budget ceil(2.55) = 3. Spans: "good today!",
  // an insertion before "any", then "How about".
  NoiseConfig cfg;
  std::deque<double> u;
  for (std::size_t k : {2u, 0u, 2u})
    for (double d : poisson_draws(k)) u.push_back(d);
  ScriptedSource src(u, {3, 8, 10});
  InfillOutcome outcome;
  const auto out = noise_text_infilling(testing_support::worked_three_sentences(), cfg, src, &outcome);
  EXPECT_EQ(serialize_dialogue(out),
            "Tom: The weather is [MASK] Do you have [MASK] any plans? [MASK] we go to play basketball?");
  EXPECT_TRUE(src.drained());
  EXPECT_EQ(outcome.total_tokens, 17u);
  EXPECT_EQ(outcome.budget, 3u);
  EXPECT_EQ(outcome.replaced, 4u);
  EXPECT_EQ(out[0].sentences.size(), 3u);
}

TEST(WorkedExample, TurnPermutation) {
  ScriptedSource src({}, {1, 0});
  std::vector<std::size_t> order;
  const auto out = noise_turn_permutation(testing_support::worked_permutation(), src, &order);
  EXPECT_EQ(serialize_dialogue(out),
            "Sam: I still have homework to do today. I'm afraid I can't go out to play.\n"
            "Tom: Do you have any plans?\n"
            "Bob: How about we go to play basketball?");
  EXPECT_EQ(order, (std::vector<std::size_t>{2, 0, 1}));
}

// ---------------------------------------------------------------------------
// Window selection

TEST(Window, Budget) {
  NoiseConfig cfg;
  EXPECT_EQ(window_budget(1000, cfg), 100u);
  EXPECT_EQ(window_budget(10000, cfg), 512u);
  EXPECT_EQ(window_budget(5, cfg), 1u);
  EXPECT_EQ(window_budget(1009, cfg), 100u);
}

TEST(Window, ThreeSixtyTokenTurnsGiveOneTurn) {
  // "A: " + 59 words = 60 tokens per turn.
  const std::vector<Turn> turns(3, turn("A", words(59).c_str()));
  ASSERT_EQ(turn_token_count(turns[0]), 60u);
  for (std::size_t start = 0; start < 3; ++start) {
    const auto w = window_from_start(turns, start, 100);
    EXPECT_EQ(w.start_turn, start);
    EXPECT_EQ(w.turn_count, 1u);
    EXPECT_FALSE(w.oversized_turn);
  }
}

TEST(Window, OversizedStartTurnIncludedAlone) {
  const std::vector<Turn> turns{turn("A", words(5).c_str()), turn("B", words(200).c_str()),
                                turn("C", words(5).c_str())};
  const auto w = window_from_start(turns, 1, 50);
  EXPECT_EQ(w.turn_count, 1u);
  EXPECT_TRUE(w.oversized_turn);
  const auto w0 = window_from_start(turns, 0, 50);
  EXPECT_EQ(w0.turn_count, 1u);
  EXPECT_FALSE(w0.oversized_turn);
}

TEST(Window, InvariantsOnRandomDialogues) {
  NoiseConfig cfg;
  Rng gen(4);
  for (int i = 0; i < 300; ++i) {
    const auto d = testing_support::synthetic_dialogue("w", 1 + gen.below(80), gen, 3, 12);
    Rng rng(i);
    const auto w = select_window(d, cfg, rng);
    EXPECT_GE(w.turn_count, 1u);
    EXPECT_LE(w.start_turn + w.turn_count, d.turns.size());
    const std::size_t tokens = dialogue_token_count(w.turns);
    EXPECT_EQ(tokens, w.token_count);
    std::size_t largest = 0;
    for (const auto& t : w.turns) largest = std::max(largest, turn_token_count(t));
    EXPECT_LE(tokens, std::max(w.budget, largest));
    // Greedy: the next turn would not have fit.
    const std::size_t end = w.start_turn + w.turn_count;
    if (!w.oversized_turn && end < d.turns.size()) {
      EXPECT_GT(tokens + turn_token_count(d.turns[end]), w.budget);
    }
  }
  Rng rng(0);
  EXPECT_THROW(select_window(Dialogue{"e", {}}, cfg, rng), NoisingError);
}

// ---------------------------------------------------------------------------
// Individual noises

TEST(SpeakerMask, RateAndIdentity) {
  Rng rng(12);
  std::vector<Turn> turns(10000, turn("S", "x"));
  std::vector<std::size_t> masked;
  const auto out = noise_speaker_mask(turns, 0.5, rng, &masked);
  const double rate = static_cast<double>(masked.size()) / 10000.0;
  EXPECT_GE(rate, 0.49);
  EXPECT_LE(rate, 0.51);
  EXPECT_EQ(utterance_tokens(out), utterance_tokens(turns));

  const auto same = noise_speaker_mask(turns, 0.0, rng);
  EXPECT_EQ(same, turns);

  std::vector<Turn> mixed{turn(nullptr, "a"), turn("B", "b")};
  ScriptedSource src({0.0}, {});  // one draw only: the speakerless turn is skipped
  const auto m = noise_speaker_mask(mixed, 1.0, src);
  EXPECT_FALSE(m[0].speaker);
  EXPECT_EQ(*m[1].speaker, kMaskSpeaker);
}

TEST(TurnSplitting, TieBreakAndIdentity) {
  const std::vector<Turn> singles{turn("A", "x."), turn("B", "y")};
  EXPECT_EQ(noise_turn_splitting(singles), singles);

  const std::vector<Turn> tie{turn("A", "a. b."), turn("B", "c."), turn("C", "d. e.")};
  std::optional<SplitEdit> edit;
  const auto out = noise_turn_splitting(tie, &edit);
  EXPECT_EQ(edit->turn, 0u);
  ASSERT_EQ(out.size(), tie.size() + 1);
  EXPECT_EQ(serialize_dialogue(out), "A: a.\n[MASK_SPEAKER]: b.\nB: c.\nC: d. e.");
  EXPECT_EQ(utterance_tokens(out), utterance_tokens(tie));

  // A speakerless turn still hands [MASK_SPEAKER] to its later pieces.
  const auto bare = noise_turn_splitting({turn(nullptr, "p. q.")});
  EXPECT_EQ(serialize_dialogue(bare), "p.\n[MASK_SPEAKER]: q.");
}

TEST(TurnMerging, ClampAndIdentity) {
  NoiseConfig cfg;
  {
    const std::vector<Turn> one{turn("A", "x")};
    Rng rng(1);
    EXPECT_EQ(noise_turn_merging(one, cfg, rng), one);
  }
  {
    const std::vector<Turn> three{turn("A", "x."), turn("B", "y."), turn("C", "z.")};
    ScriptedSource src(poisson_draws(5), {0});
    std::optional<MergeEdit> edit;
    const auto out = noise_turn_merging(three, cfg, src, &edit);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(edit->count, 3u);
    EXPECT_EQ(edit->sampled, 5u);
    EXPECT_EQ(serialize_dialogue(out), "A: x. y. z.");
  }
  {
    // A draw of 0 is floored to min_merge_turns.
    const std::vector<Turn> four{turn("A", "a"), turn("B", "b"), turn("C", "c"), turn("D", "d")};
    ScriptedSource src(poisson_draws(0), {2});
    const auto out = noise_turn_merging(four, cfg, src);
    EXPECT_EQ(serialize_dialogue(out), "A: a\nB: b\nC: c d");
  }
  Rng rng(9);
  for (int i = 0; i < 200; ++i) {
    const auto d = testing_support::synthetic_dialogue("m", 2 + rng.below(10), rng);
    std::optional<MergeEdit> edit;
    const auto out = noise_turn_merging(d.turns, cfg, rng, &edit);
    EXPECT_EQ(out.size(), d.turns.size() - (edit->count - 1));
    EXPECT_EQ(out[edit->start].speaker, d.turns[edit->start].speaker);
    EXPECT_EQ(utterance_tokens(out), utterance_tokens(d.turns));
  }
}

TEST(TextInfilling, IdentityAtZeroRate) {
  NoiseConfig cfg;
  cfg.infill_rate = 0.0;
  Rng rng(3);
  const auto turns = testing_support::worked_merge();
  InfillOutcome o;
  EXPECT_EQ(noise_text_infilling(turns, cfg, rng, &o), turns);
  EXPECT_TRUE(o.spans.empty());
}

TEST(TextInfilling, BudgetBoundOnLargeStream) {
  NoiseConfig cfg;
  Rng gen(21);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<Turn> turns;
    std::size_t total = 0;
    while (total < 10000) {
      turns.push_back(turn("S", testing_support::random_utterance(gen, 4, 20).c_str()));
      total += utterance_token_count(turns.back());
    }
    InfillOutcome o;
    const auto out = noise_text_infilling(turns, cfg, gen, &o);
    const double t = static_cast<double>(o.total_tokens);
    const double frac = static_cast<double>(o.replaced) / t;
    EXPECT_GE(frac, 0.15);
    EXPECT_LE(frac, 0.15 + cfg.poisson_lambda / t + 1e-12);

    // Speakers untouched; every span stays inside its turn.
    ASSERT_EQ(out.size(), turns.size());
    for (std::size_t i = 0; i < turns.size(); ++i) EXPECT_EQ(out[i].speaker, turns[i].speaker);
    for (const auto& s : o.spans) EXPECT_LE(s.offset + s.length, utterance_token_count(turns[s.turn]));

    // Each span becomes one mask; replaced tokens disappear.
    std::size_t masks = 0, kept = 0;
    for (const auto& tr : out)
      for (const auto& s : tr.sentences)
        for (const auto& tok : tokenize(s)) (tok == kMask ? masks : kept) += 1;
    EXPECT_EQ(masks, o.spans.size());
    EXPECT_EQ(kept, o.total_tokens - o.replaced);
  }
}

TEST(TextInfilling, TinyWindowsReachBudget) {
  NoiseConfig cfg;
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    Rng rng(seed);
    InfillOutcome o;
    noise_text_infilling({turn("A", "word")}, cfg, rng, &o);
    EXPECT_EQ(o.budget, 1u);
    EXPECT_EQ(o.replaced, 1u);
  }
}

TEST(TextInfilling, ApplyRejectsBadSpans) {
  const auto turns = testing_support::worked_speaker_mask();  // 5 tokens
  EXPECT_THROW(apply_text_infilling(turns, std::vector<InfillSpan>{{0, 3, 3, 3}}), NoisingError);
  EXPECT_THROW(apply_text_infilling(turns, std::vector<InfillSpan>{{0, 0, 2, 2}, {0, 1, 1, 1}}),
               NoisingError);
  EXPECT_THROW(apply_text_infilling(turns, std::vector<InfillSpan>{{1, 0, 1, 1}}), NoisingError);
  // Insertion then replacement at the same offset.
  const auto out = apply_text_infilling(turns, std::vector<InfillSpan>{{0, 2, 1, 1}, {0, 2, 0, 0}});
  EXPECT_EQ(serialize_dialogue(out), "Tom: The weather [MASK] [MASK] good today!");
}

TEST(TurnPermutation, UniformOverAllOrders) {
  Rng rng(77);
  std::map<std::vector<std::size_t>, int> freq;
  const int trials = 60000;
  for (int i = 0; i < trials; ++i) ++freq[sample_permutation(3, rng)];
  ASSERT_EQ(freq.size(), 6u);
  for (const auto& [order, count] : freq) EXPECT_NEAR(count / double(trials), 1.0 / 6.0, 0.01);

  const std::vector<Turn> one{turn("A", "x")};
  EXPECT_EQ(noise_turn_permutation(one, rng), one);
}

TEST(Config, Validation) {
  NoiseConfig ok;
  EXPECT_NO_THROW(ok.validate());
  auto bad = [](auto mutate) {
    NoiseConfig c;
    mutate(c);
    return c;
  };
  EXPECT_THROW(bad([](NoiseConfig& c) { c.window_fraction = 0.0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](NoiseConfig& c) { c.window_fraction = 1.5; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](NoiseConfig& c) { c.speaker_mask_prob = -0.1; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](NoiseConfig& c) { c.infill_rate = 1.0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](NoiseConfig& c) { c.poisson_lambda = 0.0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](NoiseConfig& c) { c.min_merge_turns = 1; }).validate(), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Full pipeline

TEST(BuildExample, DeterministicAndConsistent) {
  NoiseConfig cfg;
  cfg.global_seed = 5;
  Rng gen(31);
  for (int i = 0; i < 300; ++i) {
    const auto d = testing_support::synthetic_dialogue("dlg-" + std::to_string(i), 1 + gen.below(60), gen);
    const auto a = build_example(d, cfg);
    const auto b = build_example(d, cfg);
    EXPECT_EQ(a.input_text, b.input_text);
    EXPECT_EQ(a.target_text, b.target_text);
    EXPECT_EQ(a.trace, b.trace);

    const std::span<const Turn> all(d.turns);
    const auto window = all.subspan(a.window_start, a.window_turn_count);
    EXPECT_EQ(a.target_text, serialize_dialogue(window));
    EXPECT_FALSE(contains_special_token(a.target_text));

    // Outside-window text is untouched, byte for byte.
    const std::string full = serialize_dialogue(d.turns);
    if (a.window_start > 0) {
      const std::string prefix = serialize_dialogue(all.first(a.window_start)) + "\n";
      EXPECT_EQ(a.input_text.compare(0, prefix.size(), prefix), 0);
    }
    const std::size_t end = a.window_start + a.window_turn_count;
    if (end < d.turns.size()) {
      const std::string suffix = "\n" + serialize_dialogue(all.subspan(end));
      ASSERT_GE(a.input_text.size(), suffix.size());
      EXPECT_EQ(a.input_text.substr(a.input_text.size() - suffix.size()), suffix);
    }

    // Replay reproduces the noisy window.
    const auto replayed = replay_trace(window, a.trace);
    Window w{a.window_start, a.window_turn_count, window};
    EXPECT_EQ(assemble_input(d.turns, w, replayed), a.input_text);

    // Speaker slots survive infilling and permutation; split/merge change
    // counts by the recorded amounts.
    if (a.trace.structural == StructuralNoise::kSplit)
      EXPECT_EQ(replayed.size(), window.size() + a.trace.split->pieces - 1);
    else if (a.trace.structural == StructuralNoise::kMerge)
      EXPECT_EQ(replayed.size(), window.size() - (a.trace.merge->count - 1));
    else
      EXPECT_EQ(replayed.size(), window.size());
  }
}

TEST(BuildExample, TokenConservationWithoutInfilling) {
  NoiseConfig cfg;
  cfg.infill_rate = 0.0;
  Rng gen(8);
  for (int i = 0; i < 200; ++i) {
    const auto d = testing_support::synthetic_dialogue(std::to_string(i), 2 + gen.below(40), gen);
    const auto ex = build_example(d, cfg);
    const auto window = std::span<const Turn>(d.turns).subspan(ex.window_start, ex.window_turn_count);
    const auto noisy = replay_trace(window, ex.trace);
    EXPECT_EQ(utterance_tokens(noisy), utterance_tokens({window.begin(), window.end()}));
  }
}

TEST(BuildExample, AllNoiseOffGivesCleanInput) {
  NoiseConfig cfg;
  cfg.speaker_mask_prob = 0.0;
  cfg.infill_rate = 0.0;
  cfg.enable_turn_split = false;
  cfg.enable_turn_merge = false;
  cfg.enable_permutation = false;
  Rng gen(13);
  for (int i = 0; i < 100; ++i) {
    const auto d = testing_support::synthetic_dialogue(std::to_string(i), 1 + gen.below(30), gen);
    EXPECT_EQ(build_example(d, cfg).input_text, serialize_dialogue(d.turns));
  }
}

TEST(BuildExample, ShortDialogue) {
  NoiseConfig cfg;
  const Dialogue d{"tiny", {turn("A", "Hi."), turn("B", "Yo.")}};
  const auto ex = build_example(d, cfg);
  EXPECT_EQ(ex.window_turn_count, 1u);
  EXPECT_FALSE(ex.input_text.empty());
  EXPECT_EQ(ex.target_text, serialize_turn(d.turns[ex.window_start]));
}

TEST(BuildExample, MultipleExamplesDiffer) {
  NoiseConfig cfg;
  Rng gen(100);
  const auto d = testing_support::synthetic_dialogue("hundred", 100, gen);
  const auto exs = build_examples(d, cfg, 3);
  ASSERT_EQ(exs.size(), 3u);
  std::set<std::size_t> starts;
  for (const auto& e : exs) starts.insert(e.window_start);
  EXPECT_EQ(starts.size(), 3u);
  EXPECT_EQ(build_example(d, cfg, 2).input_text, exs[2].input_text);
}
