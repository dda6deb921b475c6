#pragma once

// Streaming corpus ingestion and Table-style corpus statistics.
//
// json-lines: one object per line,
//   {"id": "...", "turns": [{"speaker": "Tom" | null, "utterance": "..."}]}
// plain-transcript: blocks of "Speaker: text" lines separated by blank lines;
//   the block's 0-based index is its id. A line without ": " is a
//   speakerless turn.
//
// Readers hold one record at a time regardless of corpus size.

#include <cstddef>
#include <cstdint>
#include <istream>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "longdial/dialogue.hpp"

namespace longdial {

enum class CorpusFormat { kJsonLines, kPlainTranscript };

inline std::optional<CorpusFormat> parse_corpus_format(std::string_view name) {
  if (name == "jsonl" || name == "json-lines") return CorpusFormat::kJsonLines;
  if (name == "plain" || name == "plain-transcript") return CorpusFormat::kPlainTranscript;
  return std::nullopt;
}

class IngestError : public std::runtime_error {
 public:
  IngestError(std::size_t line, std::string message)
      : std::runtime_error("line " + std::to_string(line) + ": " + message),
        line_(line),
        detail_(std::move(message)) {}

  std::size_t line() const noexcept { return line_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::size_t line_;
  std::string detail_;
};

using IngestResult = std::variant<Dialogue, IngestError>;

/// Parses one json-lines record. `line` is only used for error reporting.
inline Dialogue parse_jsonl_record(std::string_view text, std::size_t line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw IngestError(line, std::string("malformed json: ") + e.what());
  }
  if (!j.is_object()) throw IngestError(line, "record is not an object");
  const auto id = j.find("id");
  if (id == j.end() || !id->is_string()) throw IngestError(line, "missing string \"id\"");
  const auto turns = j.find("turns");
  if (turns == j.end() || !turns->is_array()) throw IngestError(line, "missing array \"turns\"");

  Dialogue d;
  d.id = id->get<std::string>();
  if (turns->empty()) throw IngestError(line, "record '" + d.id + "' has empty \"turns\"");
  d.turns.reserve(turns->size());
  for (const auto& t : *turns) {
    if (!t.is_object()) throw IngestError(line, "turn is not an object");
    const auto utt = t.find("utterance");
    if (utt == t.end() || !utt->is_string())
      throw IngestError(line, "turn missing string \"utterance\"");
    std::optional<std::string> speaker;
    if (const auto sp = t.find("speaker"); sp != t.end() && !sp->is_null()) {
      if (!sp->is_string()) throw IngestError(line, "\"speaker\" must be a string or null");
      speaker = sp->get<std::string>();
    }
    try {
      d.turns.push_back(make_turn(speaker, utt->get_ref<const std::string&>()));
    } catch (const DialogueError& e) {
      throw IngestError(line, "record '" + d.id + "': " + e.what());
    }
  }
  return d;
}

inline Turn parse_transcript_line(std::string_view line) {
  const std::size_t delim = line.find(kSpeakerDelimiter);
  if (delim == std::string_view::npos) return make_turn(std::nullopt, line);
  return make_turn(line.substr(0, delim), line.substr(delim + kSpeakerDelimiter.size()));
}

/// Lazy reader over a line-oriented corpus stream.
class CorpusReader {
 public:
  CorpusReader(std::istream& in, CorpusFormat format) : in_(in), format_(format) {}

  /// Next record, or nullopt at end of stream. Malformed records come back
  /// as IngestError values so the caller picks the policy.
  std::optional<IngestResult> next() {
    return format_ == CorpusFormat::kJsonLines ? next_jsonl() : next_block();
  }

  std::size_t line_number() const noexcept { return line_; }

 private:
  bool read_line(std::string& line) {
    if (!std::getline(in_, line)) return false;
    ++line_;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  }

  static bool blank(std::string_view s) { return count_tokens(s) == 0; }

  std::optional<IngestResult> next_jsonl() {
    std::string line;
    while (read_line(line)) {
      if (blank(line)) continue;
      try {
        return IngestResult(parse_jsonl_record(line, line_));
      } catch (const IngestError& e) {
        return IngestResult(e);
      }
    }
    return std::nullopt;
  }

  std::optional<IngestResult> next_block() {
    std::string line;
    bool started = false;
    Dialogue d;
    std::optional<IngestError> error;
    while (read_line(line)) {
      if (blank(line)) {
        if (started) break;
        continue;
      }
      if (!started) {
        started = true;
        d.id = std::to_string(block_index_++);
      }
      if (error) continue;  // drain the rest of a bad block
      try {
        d.turns.push_back(parse_transcript_line(line));
      } catch (const DialogueError& e) {
        error.emplace(line_, "block " + d.id + ": " + e.what());
      }
    }
    if (!started) return std::nullopt;
    if (error) return IngestResult(*error);
    return IngestResult(std::move(d));
  }

  std::istream& in_;
  CorpusFormat format_;
  std::size_t line_ = 0;
  std::size_t block_index_ = 0;
};

enum class ErrorPolicy { kSkip, kAbort };

struct IngestSummary {
  std::size_t dialogues = 0;
  std::size_t errors = 0;
};

/// Drives a reader to completion. kAbort rethrows the first IngestError;
/// kSkip counts it and reports it through `on_error` if given.
template <class OnDialogue, class OnError>
IngestSummary for_each_dialogue(CorpusReader& reader, ErrorPolicy policy,
                                OnDialogue&& on_dialogue, OnError&& on_error) {
  IngestSummary summary;
  while (auto rec = reader.next()) {
    if (auto* err = std::get_if<IngestError>(&*rec)) {
      if (policy == ErrorPolicy::kAbort) throw *err;
      ++summary.errors;
      on_error(*err);
      continue;
    }
    ++summary.dialogues;
    on_dialogue(std::get<Dialogue>(std::move(*rec)));
  }
  return summary;
}

template <class OnDialogue>
IngestSummary for_each_dialogue(CorpusReader& reader, ErrorPolicy policy,
                                OnDialogue&& on_dialogue) {
  return for_each_dialogue(reader, policy, std::forward<OnDialogue>(on_dialogue),
                           [](const IngestError&) {});
}

// ---------------------------------------------------------------------------
// Statistics

/// Means are empty when undefined: no dialogues, or (for speakers) no
/// speaker names anywhere in the corpus.
struct CorpusStats {
  std::size_t dialogue_count = 0;
  std::optional<double> mean_turns;
  std::optional<double> mean_speakers;
  std::optional<double> mean_length_words;
};

/// Exact integer sums, so shard merges and streaming runs agree bit-for-bit
/// with a single in-memory pass.
class StatsAccumulator {
 public:
  void add(const Dialogue& d) {
    ++count_;
    turns_ += d.turns.size();
    std::set<std::string_view> names;
    for (const auto& t : d.turns)
      if (t.speaker) names.insert(*t.speaker);
    speakers_ += names.size();
    any_speaker_ = any_speaker_ || !names.empty();
    words_ += dialogue_token_count(d.turns);
  }

  StatsAccumulator& merge(const StatsAccumulator& other) {
    count_ += other.count_;
    turns_ += other.turns_;
    speakers_ += other.speakers_;
    words_ += other.words_;
    any_speaker_ = any_speaker_ || other.any_speaker_;
    return *this;
  }

  CorpusStats result() const {
    CorpusStats s;
    s.dialogue_count = count_;
    if (count_ == 0) return s;
    const auto n = static_cast<double>(count_);
    s.mean_turns = static_cast<double>(turns_) / n;
    if (any_speaker_) s.mean_speakers = static_cast<double>(speakers_) / n;
    s.mean_length_words = static_cast<double>(words_) / n;
    return s;
  }

 private:
  std::uint64_t count_ = 0;
  std::uint64_t turns_ = 0;
  std::uint64_t speakers_ = 0;
  std::uint64_t words_ = 0;
  bool any_speaker_ = false;
};

template <class Range>
CorpusStats compute_stats(const Range& dialogues) {
  StatsAccumulator acc;
  for (const Dialogue& d : dialogues) acc.add(d);
  return acc.result();
}

inline nlohmann::ordered_json to_json(const CorpusStats& s) {
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  };
  nlohmann::ordered_json j;
  j["dialogue_count"] = s.dialogue_count;
  j["mean_turns"] = opt(s.mean_turns);
  j["mean_speakers"] = opt(s.mean_speakers);
  j["mean_length_words"] = opt(s.mean_length_words);
  return j;
}

/// Inverse of the json-lines schema, used for reserialization.
inline nlohmann::ordered_json to_json(const Dialogue& d) {
  nlohmann::ordered_json j;
  j["id"] = d.id;
  auto& turns = j["turns"] = nlohmann::ordered_json::array();
  for (const auto& t : d.turns) {
    nlohmann::ordered_json tj;
    tj["speaker"] = t.speaker ? nlohmann::ordered_json(*t.speaker) : nlohmann::ordered_json(nullptr);
    tj["utterance"] = utterance_text(t);
    turns.push_back(std::move(tj));
  }
  return j;
}

}  // namespace longdial
