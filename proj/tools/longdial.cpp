// longdial: corpus statistics, denoising-example generation, segmentation
// and ROUGE scoring, and attention self-checks.
//
// Exit codes: 0 success, 1 usage or I/O error, 2 data error under --strict,
// 3 invariant failure.

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "longdial/attention_check.hpp"
#include "longdial/corpus.hpp"
#include "longdial/eval.hpp"
#include "longdial/pipeline.hpp"

namespace {

using longdial::ojson;
using nlohmann::json;

constexpr const char* kVersion = "0.1.0";
constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitInvariant = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t default_seed() {
  if (const char* env = std::getenv("LONGDIAL_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw UsageError(std::string("LONGDIAL_SEED is not an unsigned integer: ") + env);
    }
  }
  return 0;
}

/// Opens `path` for reading; "-" is stdin.
class InputFile {
 public:
  explicit InputFile(const std::string& path) {
    if (path == "-") return;
    file_ = std::make_unique<std::ifstream>(path, std::ios::binary);
    if (!*file_) throw UsageError("cannot read '" + path + "'");
  }
  std::istream& stream() { return file_ ? *file_ : std::cin; }

 private:
  std::unique_ptr<std::ifstream> file_;
};

class OutputFile {
 public:
  explicit OutputFile(const std::string& path) {
    if (path.empty() || path == "-") return;
    file_ = std::make_unique<std::ofstream>(path, std::ios::binary | std::ios::trunc);
    if (!*file_) throw UsageError("cannot write '" + path + "'");
  }
  std::ostream& stream() { return file_ ? *file_ : std::cout; }

 private:
  std::unique_ptr<std::ofstream> file_;
};

longdial::CorpusFormat format_from(const std::string& name) {
  const auto f = longdial::parse_corpus_format(name);
  if (!f) throw UsageError("unknown format '" + name + "' (use jsonl or plain)");
  return *f;
}

struct Manifest {
  explicit Manifest(std::string cmd) : command(std::move(cmd)) {}

  std::string command;
  ojson config = ojson::object();
  ojson inputs = ojson::array();
  std::string output;
  std::size_t records = 0;
  std::size_t errors = 0;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void emit(const std::string& path) const {
    ojson j;
    j["tool"] = "longdial";
    j["version"] = kVersion;
    j["command"] = command;
    j["config"] = config;
    j["inputs"] = inputs;
    j["output"] = output.empty() ? ojson(nullptr) : ojson(output);
    j["records"] = records;
    j["errors"] = errors;
    j["duration_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (path.empty()) {
      std::cerr << j.dump() << '\n';
      return;
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw UsageError("cannot write manifest '" + path + "'");
    out << j.dump(2) << '\n';
  }
};

ojson noise_config_json(const longdial::NoiseConfig& c) {
  ojson j;
  j["window_fraction"] = c.window_fraction;
  j["max_window_tokens"] = c.max_window_tokens;
  j["speaker_mask_prob"] = c.speaker_mask_prob;
  j["infill_rate"] = c.infill_rate;
  j["poisson_lambda"] = c.poisson_lambda;
  j["min_merge_turns"] = c.min_merge_turns;
  j["global_seed"] = c.global_seed;
  j["infill_max_retries"] = c.infill_max_retries;
  j["enable_turn_split"] = c.enable_turn_split;
  j["enable_turn_merge"] = c.enable_turn_merge;
  j["enable_permutation"] = c.enable_permutation;
  return j;
}

// ---------------------------------------------------------------------------

struct StatsArgs {
  std::string input;
  std::string format = "jsonl";
  bool strict = false;
  bool pretty = false;
  std::string manifest;
};

int run_stats(const StatsArgs& a) {
  Manifest m("stats");
  m.inputs.push_back(a.input);
  m.config["format"] = a.format;
  m.config["strict"] = a.strict;
  InputFile in(a.input);
  longdial::CorpusReader reader(in.stream(), format_from(a.format));
  longdial::StatsAccumulator acc;
  longdial::IngestSummary summary;
  try {
    summary = longdial::for_each_dialogue(
        reader, a.strict ? longdial::ErrorPolicy::kAbort : longdial::ErrorPolicy::kSkip,
        [&](longdial::Dialogue d) { acc.add(d); },
        [](const longdial::IngestError& e) { std::cerr << "skipped: " << e.what() << '\n'; });
  } catch (const longdial::IngestError& e) {
    throw DataError(e.what());
  }
  std::cout << longdial::to_json(acc.result()).dump(a.pretty ? 2 : -1) << '\n';
  m.records = summary.dialogues;
  m.errors = summary.errors;
  m.emit(a.manifest);
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct CorruptArgs {
  std::string input;
  std::string output;
  std::string format = "jsonl";
  std::size_t examples_per_dialogue = 1;
  std::size_t workers = 1;
  std::size_t chunk_size = 256;
  bool strict = false;
  std::string manifest;
  longdial::NoiseConfig cfg;
  bool no_split = false;
  bool no_merge = false;
  bool no_permutation = false;
};

int run_corrupt(CorruptArgs a) {
  a.cfg.enable_turn_split = !a.no_split;
  a.cfg.enable_turn_merge = !a.no_merge;
  a.cfg.enable_permutation = !a.no_permutation;
  try {
    a.cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  Manifest m("corrupt");
  m.inputs.push_back(a.input);
  m.output = a.output;
  m.config["noise"] = noise_config_json(a.cfg);
  m.config["format"] = a.format;
  m.config["examples_per_dialogue"] = a.examples_per_dialogue;
  m.config["workers"] = a.workers;
  m.config["strict"] = a.strict;

  InputFile in(a.input);
  OutputFile out(a.output);
  longdial::CorpusReader reader(in.stream(), format_from(a.format));
  std::optional<std::string> abort_reason;
  std::size_t ingest_errors = 0;

  auto source = [&]() -> std::optional<longdial::Dialogue> {
    while (!abort_reason) {
      auto rec = reader.next();
      if (!rec) return std::nullopt;
      if (auto* d = std::get_if<longdial::Dialogue>(&*rec)) return std::move(*d);
      const auto& err = std::get<longdial::IngestError>(*rec);
      ++ingest_errors;
      std::cerr << "skipped: " << err.what() << '\n';
      if (a.strict) abort_reason = err.what();
    }
    return std::nullopt;
  };

  longdial::CorpusCorruptor corruptor(source, a.cfg, a.examples_per_dialogue, a.workers,
                                      a.chunk_size);
  std::size_t record_errors = 0;
  while (auto r = corruptor.next()) {
    if (auto* ex = std::get_if<longdial::DenoisingExample>(&*r)) {
      out.stream() << longdial::example_to_line(*ex) << '\n';
      ++m.records;
    } else {
      const auto& err = std::get<longdial::RecordError>(*r);
      ++record_errors;
      std::cerr << "failed: dialogue '" << err.dialogue_id << "': " << err.message << '\n';
      if (a.strict && !abort_reason) abort_reason = err.message;
    }
  }
  out.stream().flush();
  m.errors = ingest_errors + record_errors;
  std::string manifest_path = a.manifest;
  if (manifest_path.empty() && !a.output.empty() && a.output != "-")
    manifest_path = a.output + ".manifest.json";
  m.emit(manifest_path);
  if (abort_reason) throw DataError(*abort_reason);
  return kExitOk;
}

// ---------------------------------------------------------------------------

std::vector<int> labels_field(const json& j, const char* key, std::size_t line) {
  const auto it = j.find(key);
  if (it == j.end() || !it->is_array())
    throw longdial::IngestError(line, std::string("missing array \"") + key + "\"");
  try {
    return it->get<std::vector<int>>();
  } catch (const json::exception&) {
    throw longdial::IngestError(line, std::string("\"") + key + "\" must hold integers");
  }
}

/// Reads {"id", <key>} records keyed by id, preserving file order.
std::vector<std::pair<std::string, json>> read_records(std::istream& in) {
  std::vector<std::pair<std::string, json>> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (longdial::count_tokens(line) == 0) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw longdial::IngestError(n, e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string())
      throw longdial::IngestError(n, "record needs a string \"id\"");
    out.emplace_back(j["id"].get<std::string>(), std::move(j));
  }
  return out;
}

struct SegArgs {
  std::string reference;
  std::string hypothesis;
  std::optional<std::size_t> k;
  bool baselines = false;
  std::uint64_t seed = 0;
  std::string output;
  std::string manifest;
};

ojson seg_scores(const longdial::Segmentation& ref, const longdial::Segmentation& hyp,
                 std::optional<std::size_t> k) {
  ojson j;
  j["pk"] = longdial::pk(ref, hyp, k);
  j["windiff"] = longdial::windiff(ref, hyp, k);
  j["k"] = k ? *k : longdial::default_window(ref);
  return j;
}

int run_eval_seg(const SegArgs& a) {
  Manifest m("eval-seg");
  m.inputs.push_back(a.reference);
  if (!a.hypothesis.empty()) m.inputs.push_back(a.hypothesis);
  m.config["k"] = a.k ? ojson(*a.k) : ojson("default: round(mean reference segment length / 2)");
  m.config["baselines"] = a.baselines;
  m.config["seed"] = a.seed;

  std::vector<std::pair<std::string, json>> refs;
  std::map<std::string, json> hyps;
  const bool two_files = !a.hypothesis.empty();
  try {
    InputFile rin(a.reference);
    refs = read_records(rin.stream());
    if (two_files) {
      InputFile hin(a.hypothesis);
      for (auto& [id, j] : read_records(hin.stream())) {
        if (!hyps.emplace(id, std::move(j)).second) throw DataError("duplicate hypothesis id '" + id + "'");
      }
      if (hyps.size() != refs.size()) throw DataError("reference and hypothesis ids do not match");
    }
  } catch (const longdial::IngestError& e) {
    throw DataError(e.what());
  }

  OutputFile out(a.output);
  double sum_pk = 0.0, sum_wd = 0.0;
  double rnd_pk = 0.0, rnd_wd = 0.0, even_pk = 0.0, even_wd = 0.0;
  std::size_t line = 0;
  for (const auto& [id, rj] : refs) {
    ++line;
    std::vector<int> ref_labels, hyp_labels;
    try {
      if (two_files) {
        const auto it = hyps.find(id);
        if (it == hyps.end()) throw DataError("no hypothesis for id '" + id + "'");
        ref_labels = labels_field(rj, "labels", line);
        hyp_labels = labels_field(it->second, "labels", line);
      } else {
        ref_labels = labels_field(rj, "ref_labels", line);
        hyp_labels = labels_field(rj, "hyp_labels", line);
      }
    } catch (const longdial::IngestError& e) {
      throw DataError(e.what());
    }
    ojson row;
    try {
      const auto ref = longdial::labels_to_segmentation(ref_labels);
      const auto hyp = longdial::labels_to_segmentation(hyp_labels);
      row["id"] = id;
      const auto s = seg_scores(ref, hyp, a.k);
      row.update(s);
      sum_pk += s["pk"].get<double>();
      sum_wd += s["windiff"].get<double>();
      if (a.baselines) {
        longdial::Rng rng(longdial::derive_seed(a.seed, id));
        const auto rnd = longdial::baseline_random(ref.turn_count(), longdial::boundary_density(ref), rng);
        const auto even = longdial::baseline_even(ref.turn_count(), ref.segment_count());
        const auto rs = seg_scores(ref, rnd, a.k);
        const auto es = seg_scores(ref, even, a.k);
        rnd_pk += rs["pk"].get<double>();
        rnd_wd += rs["windiff"].get<double>();
        even_pk += es["pk"].get<double>();
        even_wd += es["windiff"].get<double>();
      }
    } catch (const longdial::MetricError& e) {
      throw DataError("id '" + id + "': " + e.what());
    }
    out.stream() << row.dump() << '\n';
    ++m.records;
  }

  const double n = refs.empty() ? 1.0 : static_cast<double>(refs.size());
  ojson footer;
  footer["summary"] = "mean";
  footer["count"] = refs.size();
  footer["pk"] = refs.empty() ? ojson(nullptr) : ojson(sum_pk / n);
  footer["windiff"] = refs.empty() ? ojson(nullptr) : ojson(sum_wd / n);
  out.stream() << footer.dump() << '\n';
  if (a.baselines) {
    const auto emit = [&](const char* name, const char* metric, double total) {
      ojson r;
      r["baseline"] = name;
      r["metric"] = metric;
      r["mean"] = refs.empty() ? ojson(nullptr) : ojson(total / n);
      out.stream() << r.dump() << '\n';
    };
    emit("random", "pk", rnd_pk);
    emit("random", "windiff", rnd_wd);
    emit("even", "pk", even_pk);
    emit("even", "windiff", even_wd);
  }
  m.emit(a.manifest);
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct RougeArgs {
  std::string pairs;
  bool sentence_split = false;
  bool strict = false;
  std::string output;
  std::string manifest;
};

ojson score_json(const longdial::RougeScore& s) {
  return {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}};
}

int run_eval_rouge(const RougeArgs& a) {
  Manifest m("eval-rouge");
  m.inputs.push_back(a.pairs);
  m.config["lowercase"] = true;
  m.config["stemming"] = false;
  m.config["punctuation"] = "stripped from token edges";
  m.config["rougeL_sentence_split"] = a.sentence_split;
  m.config["strict"] = a.strict;

  InputFile in(a.pairs);
  OutputFile out(a.output);
  std::string line;
  std::size_t n = 0;
  double f1[3] = {0.0, 0.0, 0.0};
  while (std::getline(in.stream(), line)) {
    ++n;
    if (longdial::count_tokens(line) == 0) continue;
    json j = json::parse(line, nullptr, false);
    const bool ok = !j.is_discarded() && j.is_object() && j.contains("id") && j["id"].is_string() &&
                    j.contains("candidate") && j["candidate"].is_string() &&
                    j.contains("reference") && j["reference"].is_string();
    if (!ok) {
      ++m.errors;
      std::cerr << "skipped: line " << n << ": malformed pair\n";
      if (a.strict) throw DataError("line " + std::to_string(n) + ": malformed pair");
      continue;
    }
    const auto& cand = j["candidate"].get_ref<const std::string&>();
    const auto& ref = j["reference"].get_ref<const std::string&>();
    const auto r1 = longdial::rouge_n(cand, ref, 1);
    const auto r2 = longdial::rouge_n(cand, ref, 2);
    const auto rl = longdial::rouge_l(cand, ref, a.sentence_split);
    ojson row;
    row["id"] = j["id"];
    row["rouge1"] = score_json(r1);
    row["rouge2"] = score_json(r2);
    row["rougeL"] = score_json(rl);
    out.stream() << row.dump() << '\n';
    f1[0] += r1.f1;
    f1[1] += r2.f1;
    f1[2] += rl.f1;
    ++m.records;
  }
  ojson footer;
  footer["summary"] = "mean_f1";
  footer["count"] = m.records;
  const double c = static_cast<double>(m.records);
  footer["rouge1"] = m.records ? ojson(f1[0] / c) : ojson(nullptr);
  footer["rouge2"] = m.records ? ojson(f1[1] / c) : ojson(nullptr);
  footer["rougeL"] = m.records ? ojson(f1[2] / c) : ojson(nullptr);
  out.stream() << footer.dump() << '\n';
  m.emit(a.manifest);
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct AttnArgs {
  longdial::AttnCheckOptions opt;
  std::vector<std::size_t> full_layers = {4, 8, 12};
  bool pretty = false;
  std::string manifest;
};

int run_attn_check(AttnArgs a) {
  a.opt.spec.full_attention_layers = {a.full_layers.begin(), a.full_layers.end()};
  try {
    a.opt.spec.validate();
  } catch (const longdial::AttentionError& e) {
    throw UsageError(e.what());
  }
  Manifest m("attn-check");
  const auto& s = a.opt.spec;
  m.config["seq_len"] = s.seq_len;
  m.config["model_dim"] = s.model_dim;
  m.config["block_size"] = s.block_size;
  m.config["num_layers"] = s.num_layers;
  m.config["full_attention_layers"] = a.full_layers;
  m.config["sinkhorn_iterations"] = s.sinkhorn_iterations;
  m.config["temperature"] = s.temperature;
  m.config["seed"] = a.opt.seed;
  m.config["epsilon"] = a.opt.epsilon;
  m.config["instances"] = a.opt.instances;

  const auto lines = longdial::run_attention_checks(a.opt);
  ojson report;
  report["checks"] = ojson::array();
  bool all = true;
  for (const auto& l : lines) {
    ojson c;
    c["name"] = l.name;
    c["max_error"] = l.value;
    c["tolerance"] = std::isfinite(l.tolerance) ? ojson(l.tolerance) : ojson(nullptr);
    c["passed"] = l.passed;
    report["checks"].push_back(std::move(c));
    all = all && l.passed;
    ++m.records;
    if (!l.passed) ++m.errors;
  }
  report["passed"] = all;
  std::cout << report.dump(a.pretty ? 2 : -1) << '\n';
  m.emit(a.manifest);
  return all ? kExitOk : kExitInvariant;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"longdial: long-dialogue denoising toolkit"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  StatsArgs stats;
  auto* sc = app.add_subcommand("stats", "Corpus statistics as json");
  sc->add_option("input", stats.input, "Corpus path ('-' for stdin)")->required();
  sc->add_option("--format", stats.format, "jsonl | plain")->capture_default_str();
  sc->add_flag("--strict", stats.strict, "Abort on the first malformed record");
  sc->add_flag("--pretty", stats.pretty, "Indent json output");
  sc->add_option("--manifest", stats.manifest, "Run manifest path (default: stderr)");

  CorruptArgs corrupt;
  corrupt.cfg.global_seed = 0;
  auto* cc = app.add_subcommand("corrupt", "Generate window-denoising examples");
  cc->add_option("input", corrupt.input, "Corpus path ('-' for stdin)")->required();
  cc->add_option("-o,--output", corrupt.output, "Output json-lines path (default: stdout)");
  cc->add_option("--format", corrupt.format, "jsonl | plain")->capture_default_str();
  auto* seed_opt = cc->add_option("--seed", corrupt.cfg.global_seed, "Global seed (env LONGDIAL_SEED)");
  cc->add_option("--examples-per-dialogue", corrupt.examples_per_dialogue)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cc->add_option("--workers", corrupt.workers)->check(CLI::PositiveNumber)->capture_default_str();
  cc->add_option("--chunk-size", corrupt.chunk_size)->check(CLI::PositiveNumber)->capture_default_str();
  cc->add_option("--window-fraction", corrupt.cfg.window_fraction)->capture_default_str();
  cc->add_option("--max-window-tokens", corrupt.cfg.max_window_tokens)->capture_default_str();
  cc->add_option("--speaker-mask-prob", corrupt.cfg.speaker_mask_prob)->capture_default_str();
  cc->add_option("--infill-rate", corrupt.cfg.infill_rate)->capture_default_str();
  cc->add_option("--poisson-lambda", corrupt.cfg.poisson_lambda)->capture_default_str();
  cc->add_option("--min-merge-turns", corrupt.cfg.min_merge_turns)->capture_default_str();
  cc->add_option("--infill-max-retries", corrupt.cfg.infill_max_retries)->capture_default_str();
  cc->add_flag("--no-split", corrupt.no_split, "Disable turn splitting");
  cc->add_flag("--no-merge", corrupt.no_merge, "Disable turn merging");
  cc->add_flag("--no-permutation", corrupt.no_permutation, "Disable turn permutation");
  cc->add_flag("--strict", corrupt.strict, "Stop and exit 2 on the first bad record");
  cc->add_option("--manifest", corrupt.manifest, "Run manifest path (default: <output>.manifest.json)");

  SegArgs seg;
  auto* ec = app.add_subcommand("eval-seg", "Pk / WindowDiff over turn labels");
  ec->add_option("reference", seg.reference,
                 "json-lines of {id, labels}, or {id, ref_labels, hyp_labels} when no hypothesis file is given")
      ->required();
  ec->add_option("hypothesis", seg.hypothesis, "json-lines of {id, labels}");
  ec->add_option("--k", seg.k, "Window width (default: half the mean reference segment length)");
  ec->add_flag("--baselines", seg.baselines, "Also score Random and Even baselines");
  auto* seg_seed = ec->add_option("--seed", seg.seed, "Seed for the Random baseline");
  ec->add_option("-o,--output", seg.output);
  ec->add_option("--manifest", seg.manifest);

  RougeArgs rouge;
  auto* rc = app.add_subcommand("eval-rouge", "ROUGE-1/2/L over candidate/reference pairs");
  rc->add_option("pairs", rouge.pairs, "json-lines of {id, candidate, reference}")->required();
  rc->add_flag("--rougeL-sentence-split", rouge.sentence_split, "Summary-level ROUGE-L");
  rc->add_flag("--strict", rouge.strict, "Exit 2 on the first malformed pair");
  rc->add_option("-o,--output", rouge.output);
  rc->add_option("--manifest", rouge.manifest);

  AttnArgs attn;
  auto* ac = app.add_subcommand("attn-check", "Run the attention invariant and gradient suite");
  ac->add_option("--seq-len", attn.opt.spec.seq_len)->check(CLI::PositiveNumber)->capture_default_str();
  ac->add_option("--model-dim", attn.opt.spec.model_dim)->check(CLI::PositiveNumber)->capture_default_str();
  ac->add_option("--block-size", attn.opt.spec.block_size)->check(CLI::PositiveNumber)->capture_default_str();
  ac->add_option("--num-layers", attn.opt.spec.num_layers)->capture_default_str();
  ac->add_option("--full-layers", attn.full_layers, "1-based full-attention layers")->capture_default_str();
  ac->add_option("--sinkhorn-iterations", attn.opt.spec.sinkhorn_iterations)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  ac->add_option("--temperature", attn.opt.spec.temperature)->capture_default_str();
  ac->add_option("--seed", attn.opt.seed)->capture_default_str();
  ac->add_option("--epsilon", attn.opt.epsilon)->capture_default_str();
  ac->add_option("--instances", attn.opt.instances)->check(CLI::PositiveNumber)->capture_default_str();
  ac->add_flag("--pretty", attn.pretty);
  ac->add_option("--manifest", attn.manifest);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*sc) return run_stats(stats);
    if (*cc) {
      if (seed_opt->count() == 0) corrupt.cfg.global_seed = default_seed();
      return run_corrupt(corrupt);
    }
    if (*ec) {
      if (seg_seed->count() == 0) seg.seed = default_seed();
      return run_eval_seg(seg);
    }
    if (*rc) return run_eval_rouge(rouge);
    if (*ac) return run_attn_check(attn);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
