#pragma once

// Dialogue data model and the canonical text serialization.
//
// Canonical form: one line per turn, "<speaker>: <utterance>", or just
// "<utterance>" for speakerless turns; turns joined by a single '\n'.
// The utterance is the single-space join of the turn's sentences.

#include <concepts>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace longdial {

inline constexpr std::string_view kMaskSpeaker = "[MASK_SPEAKER]";
inline constexpr std::string_view kMask = "[MASK]";
inline constexpr char kTurnSeparator = '\n';
inline constexpr std::string_view kSpeakerDelimiter = ": ";

class DialogueError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Turn {
  std::optional<std::string> speaker;
  std::vector<std::string> sentences;

  bool operator==(const Turn&) const = default;
};

struct Dialogue {
  std::string id;
  std::vector<Turn> turns;

  bool operator==(const Dialogue&) const = default;
};

namespace detail {

constexpr bool is_space(char c) noexcept {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' ||
         c == '\v';
}

constexpr bool is_terminal_punct(char c) noexcept {
  return c == '.' || c == '!' || c == '?';
}

template <class Fn>
void for_each_token(std::string_view text, Fn&& fn) {
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    while (i < n && is_space(text[i])) ++i;
    if (i == n) break;
    const std::size_t start = i;
    while (i < n && !is_space(text[i])) ++i;
    fn(text.substr(start, i - start));
  }
}

inline std::string join(std::span<const std::string> parts,
                        std::string_view sep) {
  std::string out;
  std::size_t total = 0;
  for (const auto& p : parts) total += p.size() + sep.size();
  out.reserve(total);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out.append(sep);
    out.append(parts[i]);
  }
  return out;
}

}  // namespace detail

/// Splits on runs of whitespace. Punctuation stays attached to its word.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  detail::for_each_token(text,
                         [&](std::string_view t) { tokens.emplace_back(t); });
  return tokens;
}

inline std::size_t count_tokens(std::string_view text) {
  std::size_t n = 0;
  detail::for_each_token(text, [&](std::string_view) { ++n; });
  return n;
}

inline std::string detokenize(std::span<const std::string> tokens) {
  return detail::join(tokens, " ");
}

/// Collapses whitespace runs to single spaces and trims both ends.
inline std::string normalize_whitespace(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  detail::for_each_token(text, [&](std::string_view t) {
    if (!out.empty()) out.push_back(' ');
    out.append(t);
  });
  return out;
}

/// Whitespace tokenizer behind the `Tokenizer` concept below. Token budgets
/// and mask rates are measured in its units.
struct WhitespaceTokenizer {
  std::vector<std::string> operator()(std::string_view text) const {
    return tokenize(text);
  }
};

template <class T>
concept Tokenizer = requires(const T& t, std::string_view s) {
  { t(s) } -> std::convertible_to<std::vector<std::string>>;
};

/// A sentence ends at a token whose last character is '.', '!' or '?'.
/// A trailing fragment without terminal punctuation is its own sentence.
/// Sentences come back whitespace-normalized.
inline std::vector<std::string> split_sentences(std::string_view utterance) {
  std::vector<std::string> sentences;
  std::string current;
  detail::for_each_token(utterance, [&](std::string_view t) {
    if (!current.empty()) current.push_back(' ');
    current.append(t);
    if (detail::is_terminal_punct(t.back())) {
      sentences.push_back(std::move(current));
      current.clear();
    }
  });
  if (!current.empty()) sentences.push_back(std::move(current));
  return sentences;
}

inline std::string utterance_text(const Turn& turn) {
  return detail::join(turn.sentences, " ");
}

inline std::string serialize_turn(const Turn& turn) {
  std::string out;
  if (turn.speaker) {
    out.append(*turn.speaker);
    out.append(kSpeakerDelimiter);
  }
  out.append(utterance_text(turn));
  return out;
}

/// Token count of serialize_turn(turn), computed without building the string.
inline std::size_t turn_token_count(const Turn& turn) {
  std::size_t n = 0;
  if (turn.speaker) n += count_tokens(*turn.speaker + ":");
  for (const auto& s : turn.sentences) n += count_tokens(s);
  return n;
}

inline std::size_t utterance_token_count(const Turn& turn) {
  std::size_t n = 0;
  for (const auto& s : turn.sentences) n += count_tokens(s);
  return n;
}

inline std::string serialize_dialogue(std::span<const Turn> turns) {
  if (turns.empty()) throw DialogueError("cannot serialize an empty turn list");
  std::string out;
  for (std::size_t i = 0; i < turns.size(); ++i) {
    if (i) out.push_back(kTurnSeparator);
    out.append(serialize_turn(turns[i]));
  }
  return out;
}

inline std::size_t dialogue_token_count(std::span<const Turn> turns) {
  std::size_t n = 0;
  for (const auto& t : turns) n += turn_token_count(t);
  return n;
}

inline bool contains_special_token(std::string_view text) {
  return text.find(kMask) != std::string_view::npos ||
         text.find(kMaskSpeaker) != std::string_view::npos;
}

/// Checks a clean corpus speaker name; throws DialogueError on violation.
inline void validate_speaker(std::string_view speaker) {
  if (speaker.empty()) throw DialogueError("speaker name is empty");
  for (char c : speaker) {
    if (c == ':') throw DialogueError("speaker name contains ':'");
    if (c == '\n' || c == '\r')
      throw DialogueError("speaker name contains a line break");
  }
  if (detail::is_space(speaker.front()) || detail::is_space(speaker.back()))
    throw DialogueError("speaker name has surrounding whitespace");
  if (contains_special_token(speaker))
    throw DialogueError("speaker name collides with a special token");
}

/// `allow_special` admits mask tokens, which only noisy turns may carry.
inline void validate_turn(const Turn& turn, bool allow_special = false) {
  if (turn.speaker && !(allow_special && *turn.speaker == kMaskSpeaker))
    validate_speaker(*turn.speaker);
  if (turn.sentences.empty()) throw DialogueError("turn has no sentences");
  for (const auto& s : turn.sentences) {
    if (count_tokens(s) == 0) throw DialogueError("turn has an empty sentence");
    if (s.find(kTurnSeparator) != std::string::npos)
      throw DialogueError("sentence contains a line break");
    if (!allow_special && contains_special_token(s))
      throw DialogueError("utterance collides with a special token");
  }
}

inline void validate_dialogue(const Dialogue& d) {
  if (d.turns.empty()) throw DialogueError("dialogue '" + d.id + "' has no turns");
  for (const auto& t : d.turns) validate_turn(t);
}

/// Builds a validated clean turn from a raw utterance. An empty or
/// whitespace-only speaker is treated as absent.
inline Turn make_turn(std::optional<std::string_view> speaker,
                      std::string_view utterance) {
  Turn turn;
  if (speaker) {
    std::string name = normalize_whitespace(*speaker);
    if (!name.empty()) turn.speaker = std::move(name);
  }
  turn.sentences = split_sentences(utterance);
  validate_turn(turn);
  return turn;
}

/// Inverse of serialize_dialogue. A line is speakered when it contains ": "
/// with a non-empty, colon-free prefix; otherwise the whole line is the
/// utterance. Speakerless utterances containing ": " are ambiguous in the
/// canonical form and parse as speakered.
inline std::vector<Turn> parse_serialized(std::string_view text) {
  std::vector<Turn> turns;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find(kTurnSeparator, pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    Turn turn;
    const std::size_t delim = line.find(kSpeakerDelimiter);
    if (delim != std::string_view::npos && delim > 0 &&
        line.substr(0, delim).find(':') == std::string_view::npos) {
      turn.speaker = std::string(line.substr(0, delim));
      line.remove_prefix(delim + kSpeakerDelimiter.size());
    }
    turn.sentences = split_sentences(line);
    if (turn.sentences.empty())
      throw DialogueError("serialized turn has an empty utterance");
    turns.push_back(std::move(turn));
    pos = end + 1;
  }
  return turns;
}

}  // namespace longdial
