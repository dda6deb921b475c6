#pragma once

// Corpus-level corruption: json-lines output records and an order-stable
// parallel driver.
//
// Output record, one per line, keys in this order:
//   {"id", "example_index", "input", "target",
//    "window": {"start_turn", "turn_count"}, "trace": {...}}

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <deque>
#include <exception>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <json.hpp>

#include "longdial/noising.hpp"

namespace longdial {

using ojson = nlohmann::ordered_json;

inline ojson to_json(const NoiseTrace& t) {
  ojson j;
  j["window_budget"] = t.window_budget;
  j["oversized_turn"] = t.oversized_turn;
  j["masked_speakers"] = t.masked_speakers;
  j["coin"] = t.coin_chose_split ? ojson(*t.coin_chose_split ? "split" : "merge") : ojson(nullptr);
  j["structural"] = to_string(t.structural);
  if (t.split) j["split"] = {{"turn", t.split->turn}, {"pieces", t.split->pieces}};
  if (t.merge)
    j["merge"] = {{"start", t.merge->start}, {"k", t.merge->count}, {"sampled", t.merge->sampled}};
  auto& infill = j["infill"];
  infill["total_tokens"] = t.infill_total_tokens;
  infill["budget"] = t.infill_budget;
  infill["replaced"] = t.infill_replaced;
  infill["spans"] = ojson::array();
  for (const auto& s : t.infill_spans)
    infill["spans"].push_back(ojson::array({s.turn, s.offset, s.length, s.sampled_length}));
  j["permutation"] = t.permutation;
  return j;
}

inline NoiseTrace trace_from_json(const nlohmann::json& j) {
  NoiseTrace t;
  t.window_budget = j.at("window_budget").get<std::size_t>();
  t.oversized_turn = j.at("oversized_turn").get<bool>();
  t.masked_speakers = j.at("masked_speakers").get<std::vector<std::size_t>>();
  if (const auto& c = j.at("coin"); !c.is_null()) t.coin_chose_split = c.get<std::string>() == "split";
  const auto structural = j.at("structural").get<std::string>();
  if (structural == "split") {
    t.structural = StructuralNoise::kSplit;
  } else if (structural == "merge") {
    t.structural = StructuralNoise::kMerge;
  } else if (structural != "none") {
    throw NoisingError("unknown structural noise '" + structural + "'");
  }
  if (j.contains("split"))
    t.split = SplitEdit{j["split"].at("turn").get<std::size_t>(),
                        j["split"].at("pieces").get<std::size_t>()};
  if (j.contains("merge"))
    t.merge = MergeEdit{j["merge"].at("start").get<std::size_t>(),
                        j["merge"].at("k").get<std::size_t>(),
                        j["merge"].at("sampled").get<std::size_t>()};
  const auto& infill = j.at("infill");
  t.infill_total_tokens = infill.at("total_tokens").get<std::size_t>();
  t.infill_budget = infill.at("budget").get<std::size_t>();
  t.infill_replaced = infill.at("replaced").get<std::size_t>();
  for (const auto& s : infill.at("spans")) {
    t.infill_spans.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>(),
                              s.at(2).get<std::size_t>(), s.at(3).get<std::size_t>()});
  }
  t.permutation = j.at("permutation").get<std::vector<std::size_t>>();
  return t;
}

inline ojson to_json(const DenoisingExample& ex) {
  ojson j;
  j["id"] = ex.dialogue_id;
  j["example_index"] = ex.example_index;
  j["input"] = ex.input_text;
  j["target"] = ex.target_text;
  j["window"] = {{"start_turn", ex.window_start}, {"turn_count", ex.window_turn_count}};
  j["trace"] = to_json(ex.trace);
  return j;
}

inline DenoisingExample example_from_json(const nlohmann::json& j) {
  DenoisingExample ex;
  ex.dialogue_id = j.at("id").get<std::string>();
  ex.example_index = j.at("example_index").get<std::size_t>();
  ex.input_text = j.at("input").get<std::string>();
  ex.target_text = j.at("target").get<std::string>();
  ex.window_start = j.at("window").at("start_turn").get<std::size_t>();
  ex.window_turn_count = j.at("window").at("turn_count").get<std::size_t>();
  ex.trace = trace_from_json(j.at("trace"));
  return ex;
}

/// Single-line record, bytes fixed for a given example.
inline std::string example_to_line(const DenoisingExample& ex) {
  return to_json(ex).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

struct RecordError {
  std::string dialogue_id;
  std::string message;
};

using CorruptResult = std::variant<DenoisingExample, RecordError>;

/// Lazily corrupts a dialogue source in chunks. Within a chunk, dialogues are
/// fanned out to `workers` threads; results are always yielded in input
/// order, so output bytes do not depend on the worker count.
class CorpusCorruptor {
 public:
  using Source = std::function<std::optional<Dialogue>()>;

  CorpusCorruptor(Source source, NoiseConfig cfg, std::size_t examples_per_dialogue,
                  std::size_t workers = 1, std::size_t chunk_size = 256)
      : source_(std::move(source)),
        cfg_(cfg),
        per_dialogue_(examples_per_dialogue),
        workers_(std::max<std::size_t>(1, workers)),
        chunk_size_(std::max<std::size_t>(1, chunk_size)) {
    cfg_.validate();
    if (per_dialogue_ < 1) throw std::invalid_argument("examples_per_dialogue must be >= 1");
  }

  std::optional<CorruptResult> next() {
    if (ready_.empty() && !exhausted_) fill();
    if (ready_.empty()) return std::nullopt;
    CorruptResult r = std::move(ready_.front());
    ready_.pop_front();
    return r;
  }

 private:
  void fill() {
    std::vector<Dialogue> chunk;
    chunk.reserve(chunk_size_);
    while (chunk.size() < chunk_size_) {
      auto d = source_();
      if (!d) {
        exhausted_ = true;
        break;
      }
      chunk.push_back(std::move(*d));
    }
    if (chunk.empty()) return;

    std::vector<std::vector<CorruptResult>> results(chunk.size());
    std::atomic<std::size_t> cursor{0};
    auto work = [&] {
      for (std::size_t i = cursor++; i < chunk.size(); i = cursor++) {
        try {
          for (auto& ex : build_examples(chunk[i], cfg_, per_dialogue_))
            results[i].emplace_back(std::move(ex));
        } catch (const std::exception& e) {
          results[i].clear();
          results[i].emplace_back(RecordError{chunk[i].id, e.what()});
        }
      }
    };
    const std::size_t n_threads = std::min(workers_, chunk.size());
    if (n_threads <= 1) {
      work();
    } else {
      std::vector<std::jthread> pool;
      pool.reserve(n_threads);
      for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work);
    }
    for (auto& per : results)
      for (auto& r : per) ready_.push_back(std::move(r));
  }

  Source source_;
  NoiseConfig cfg_;
  std::size_t per_dialogue_;
  std::size_t workers_;
  std::size_t chunk_size_;
  bool exhausted_ = false;
  std::deque<CorruptResult> ready_;
};

}  // namespace longdial
