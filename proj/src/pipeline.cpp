#include "segfetch/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "segfetch/checkpoint.hpp"
#include "segfetch/dataset.hpp"
#include "segfetch/plot.hpp"

namespace segfetch {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

namespace {

// Reads optional keys from one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  template <class T, class Parse>
  void get_enum(const char* key, T& out, Parse parse) {
    std::string name;
    get(key, name);
    if (!name.empty()) out = parse(name);
  }

  template <class T, class Parse>
  void get_enum_list(const char* key, std::vector<T>& out, Parse parse) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& arr = j_.at(key);
    if (!arr.is_array()) throw ConfigError(where(key) + " must be a list");
    out.clear();
    for (const auto& v : arr) out.push_back(parse(v.get<std::string>()));
  }

  bool has(const char* key) const { return j_.contains(key); }

  Section child(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, where(key));
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError("unknown key " + where(key));
    }
  }

 private:
  std::string where(const std::string& key = "") const {
    std::string p = path_.empty() ? key : (key.empty() ? path_ : path_ + "." + key);
    return p.empty() ? "<root>" : p;
  }

  const json& j_;
  std::string path_;
  std::set<std::string, std::less<>> seen_;
};

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("io", "cannot read " + path.string());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("io", "cannot write " + path.string());
  f << text;
  if (!f) throw Error("io", "write failed for " + path.string());
}

}  // namespace

void ExperimentConfig::validate() const {
  features.validate();
  labels.validate();
  train.validate();
  throttle.validate();
  cache.validate();
  main_model().validate();
  const double sum = split.train + split.validation + split.test;
  if (split.train <= 0 || split.validation <= 0 || split.test <= 0 || std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("split ratios must be positive and sum to 1");
  }
  if (trace.file.empty() && trace.length < 3) throw ConfigError("trace.length must be >= 3");
  if (simulate.baseline_degree == 0) throw ConfigError("simulate.baseline_degree must be positive");
  if (simulate.top_k == 0) throw ConfigError("simulate.top_k must be positive");
  if (simulate.timeline_interval == 0) throw ConfigError("simulate.timeline_interval must be positive");
  for (const auto& b : simulate.baselines) make_baseline(b, simulate.baseline_degree);
  for (unsigned s : eval.segment_bits) {
    SegmentationConfig seg{s};
    seg.validate(features.addr);
  }
}

ModelConfig ExperimentConfig::main_model() const {
  return model_config_for(model, features, labels, InputMode::segmented);
}

ExperimentConfig config_from_json(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Section top(root, "");
  top.get("seed", c.seed);

  {
    auto t = top.child("trace");
    t.get("file", c.trace.file);
    t.get_enum("format", c.trace.format, parse_trace_format);
    t.get("length", c.trace.length);
    auto p = t.child("pattern");
    p.get_enum("kind", c.trace.pattern.kind, parse_pattern_kind);
    p.get("stride", c.trace.pattern.stride);
    p.get("start_block", c.trace.pattern.start_block);
    p.get("pc", c.trace.pattern.pc);
    p.get("max_step", c.trace.pattern.max_step);
    p.get("accesses_per_page", c.trace.pattern.accesses_per_page);
    p.get("deltas", c.trace.pattern.deltas);
    p.get("restart_every", c.trace.pattern.restart_every);
    p.get("region_pages", c.trace.pattern.region_pages);
    p.get("stream_strides", c.trace.pattern.stream_strides);
    p.get("cycles_per_access", c.trace.pattern.cycles_per_access);
    p.finish();
    t.finish();
  }
  {
    auto a = top.child("address");
    a.get("addr_bits", c.features.addr.addr_bits);
    a.get("page_size_bits", c.features.addr.page_size_bits);
    a.get("block_offset_bits", c.features.addr.block_offset_bits);
    a.finish();
  }
  {
    auto f = top.child("features");
    f.get("segment_bits", c.features.seg.bits);
    f.get("hash_bits", c.features.hash_bits);
    f.get("history", c.features.history);
    f.finish();
  }
  {
    auto l = top.child("label");
    l.get("window", c.labels.window);
    l.get("bound", c.labels.bound);
    l.get("skip", c.labels.skip);
    l.finish();
  }
  {
    auto m = top.child("model");
    m.get("d_model", c.model.d_model);
    m.get("heads", c.model.heads);
    m.get("layers", c.model.layers);
    m.get("ffn_mult", c.model.ffn_mult);
    m.get_enum("context", c.model.context, parse_context_mode);
    // Derived fields; explicit values must agree with the other sections.
    std::size_t outputs = 0, history = 0, features = 0;
    m.get("outputs", outputs);
    m.get("history", history);
    m.get("features", features);
    m.finish();
    c.features.validate();
    c.labels.validate();
    if (outputs != 0 && outputs != c.labels.bitmap_size()) {
      throw ConfigError("model.outputs (" + std::to_string(outputs) + ") must equal 2 * label.bound (" +
                        std::to_string(c.labels.bitmap_size()) + ")");
    }
    if (history != 0 && history != c.features.history) {
      throw ConfigError("model.history must equal features.history");
    }
    const std::size_t s = c.features.seg.segment_count(c.features.addr);
    if (features != 0 && features != s) {
      throw ConfigError("model.features (" + std::to_string(features) +
                        ") must equal the segment count S (" + std::to_string(s) + ")");
    }
  }
  {
    auto t = top.child("train");
    t.get("learning_rate", c.train.learning_rate);
    t.get("decay_factor", c.train.decay_factor);
    t.get("decay_every", c.train.decay_every);
    t.get("beta1", c.train.beta1);
    t.get("beta2", c.train.beta2);
    t.get("adam_eps", c.train.adam_eps);
    t.get("batch_size", c.train.batch_size);
    t.get("epochs", c.train.epochs);
    t.get("patience", c.train.patience);
    t.get("clip_norm", c.train.clip_norm);
    t.finish();
  }
  {
    auto t = top.child("throttle");
    t.get("grid_step", c.throttle.grid_step);
    t.get("max_degree", c.throttle.max_degree);
    t.finish();
  }
  {
    auto k = top.child("cache");
    k.get("sets", c.cache.sets);
    k.get("ways", c.cache.ways);
    k.get("line_bytes", c.cache.line_bytes);
    k.get("replacement", c.cache.replacement);
    k.finish();
  }
  {
    auto l = top.child("latency");
    l.get("T", c.latency.latency);
    l.get_enum("throughput", c.latency.throughput, parse_throughput);
    l.get("distance", c.distance);
    l.finish();
  }
  {
    auto s = top.child("split");
    s.get("train", c.split.train);
    s.get("validation", c.split.validation);
    s.get("test", c.split.test);
    s.finish();
  }
  {
    auto s = top.child("simulate");
    s.get_enum("trigger_stream", c.simulate.triggers, parse_trigger_stream);
    s.get("baselines", c.simulate.baselines);
    s.get("baseline_degree", c.simulate.baseline_degree);
    s.get("oracle", c.simulate.oracle);
    s.get("top_k", c.simulate.top_k);
    s.get("timeline_interval", c.simulate.timeline_interval);
    s.finish();
  }
  {
    auto e = top.child("eval");
    e.get_enum_list("input_modes", c.eval.input_modes, parse_input_mode);
    e.get("segment_bits", c.eval.segment_bits);
    e.get_enum_list("context_modes", c.eval.context_modes, parse_context_mode);
    e.finish();
  }
  {
    auto s = top.child("sweep");
    s.get("latencies", c.sweep.latencies);
    s.get_enum_list("throughputs", c.sweep.throughputs, parse_throughput);
    s.get("distance", c.sweep.distance);
    s.finish();
  }
  top.finish();
  c.train.seed = c.seed;
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) { return config_from_json(read_text(path)); }

std::string config_to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  const auto& p = c.trace.pattern;
  j["trace"] = {{"file", c.trace.file},
                {"format", trace_format_name(c.trace.format)},
                {"length", c.trace.length},
                {"pattern",
                 {{"kind", pattern_kind_name(p.kind)},
                  {"stride", p.stride},
                  {"start_block", p.start_block},
                  {"pc", p.pc},
                  {"max_step", p.max_step},
                  {"accesses_per_page", p.accesses_per_page},
                  {"deltas", p.deltas},
                  {"restart_every", p.restart_every},
                  {"region_pages", p.region_pages},
                  {"stream_strides", p.stream_strides},
                  {"cycles_per_access", p.cycles_per_access}}}};
  j["address"] = {{"addr_bits", c.features.addr.addr_bits},
                  {"page_size_bits", c.features.addr.page_size_bits},
                  {"block_offset_bits", c.features.addr.block_offset_bits}};
  j["features"] = {{"segment_bits", c.features.seg.bits},
                   {"hash_bits", c.features.hash_bits},
                   {"history", c.features.history}};
  j["label"] = {{"window", c.labels.window}, {"bound", c.labels.bound}, {"skip", c.labels.skip}};
  const ModelConfig m = c.main_model();
  j["model"] = {{"d_model", m.d_model},   {"heads", m.heads},       {"layers", m.layers},
                {"ffn_mult", m.ffn_mult}, {"context", context_mode_name(m.context)},
                {"outputs", m.outputs},   {"history", m.history}, {"features", m.features}};
  const auto& t = c.train;
  j["train"] = {{"learning_rate", t.learning_rate}, {"decay_factor", t.decay_factor},
                {"decay_every", t.decay_every},     {"beta1", t.beta1},
                {"beta2", t.beta2},                 {"adam_eps", t.adam_eps},
                {"batch_size", t.batch_size},       {"epochs", t.epochs},
                {"patience", t.patience},           {"clip_norm", t.clip_norm}};
  j["throttle"] = {{"grid_step", c.throttle.grid_step}, {"max_degree", c.throttle.max_degree}};
  j["cache"] = {{"sets", c.cache.sets},
                {"ways", c.cache.ways},
                {"line_bytes", c.cache.line_bytes},
                {"replacement", c.cache.replacement}};
  j["latency"] = {{"T", c.latency.latency},
                  {"throughput", throughput_name(c.latency.throughput)},
                  {"distance", c.distance}};
  j["split"] = {{"train", c.split.train}, {"validation", c.split.validation}, {"test", c.split.test}};
  j["simulate"] = {{"trigger_stream", trigger_stream_name(c.simulate.triggers)},
                   {"baselines", c.simulate.baselines},
                   {"baseline_degree", c.simulate.baseline_degree},
                   {"oracle", c.simulate.oracle},
                   {"top_k", c.simulate.top_k},
                   {"timeline_interval", c.simulate.timeline_interval}};
  json modes = json::array(), contexts = json::array(), throughputs = json::array();
  for (auto mode : c.eval.input_modes) modes.push_back(input_mode_name(mode));
  for (auto ctx : c.eval.context_modes) contexts.push_back(context_mode_name(ctx));
  for (auto tp : c.sweep.throughputs) throughputs.push_back(throughput_name(tp));
  j["eval"] = {{"input_modes", modes}, {"segment_bits", c.eval.segment_bits}, {"context_modes", contexts}};
  j["sweep"] = {{"latencies", c.sweep.latencies},
                {"throughputs", throughputs},
                {"distance", c.sweep.distance}};
  return j.dump(2) + "\n";
}

std::string config_hash(const ExperimentConfig& cfg) { return to_hex(fnv1a(config_to_json(cfg))); }

// ---------------------------------------------------------------------------
// Stages and manifests

Stage parse_stage(const std::string& name) {
  for (Stage s : all_stages()) {
    if (stage_name(s) == name) return s;
  }
  throw ConfigError("unknown stage '" + name + "'");
}

std::string stage_name(Stage stage) {
  switch (stage) {
    case Stage::gen: return "gen";
    case Stage::preprocess: return "preprocess";
    case Stage::train: return "train";
    case Stage::tune: return "tune";
    case Stage::eval: return "eval";
    case Stage::simulate: return "simulate";
    case Stage::sweep: return "sweep";
    case Stage::report: return "report";
  }
  return "unknown";
}

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> stages = {Stage::gen,  Stage::preprocess, Stage::train, Stage::tune,
                                            Stage::eval, Stage::simulate,   Stage::sweep, Stage::report};
  return stages;
}

fs::path default_run_dir(const ExperimentConfig& cfg, const fs::path& root) {
  return root / config_hash(cfg);
}

std::string file_hash(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("io", "cannot read " + path.string());
  Fnv1a h;
  char buf[1 << 16];
  while (f) {
    f.read(buf, sizeof buf);
    h.update(std::as_bytes(std::span(buf, static_cast<std::size_t>(f.gcount()))));
  }
  return to_hex(h.digest());
}

namespace {

// Run-directory state shared by the stage implementations.
class Run {
 public:
  Run(const ExperimentConfig& cfg, fs::path dir, Stage stage)
      : cfg_(cfg), dir_(std::move(dir)), stage_(stage), hash_(config_hash(cfg)) {}

  const ExperimentConfig& cfg() const { return cfg_; }
  fs::path path(const std::string& rel) const { return dir_ / rel; }

  /// Verifies an upstream artifact against the manifest that produced it.
  fs::path input(Stage producer, const std::string& rel) {
    const json& m = manifest(producer);
    const fs::path p = path(rel);
    const auto& outs = m.at("outputs");
    if (!outs.contains(rel) || !fs::exists(p)) {
      throw StageDependencyError("stage " + stage_name(stage_) + " needs " + rel + " from stage " +
                                 stage_name(producer));
    }
    const std::string h = file_hash(p);
    if (outs.at(rel).get<std::string>() != h) {
      throw StalenessError(rel + " changed after stage " + stage_name(producer) + " wrote it");
    }
    inputs_[rel] = h;
    return p;
  }

  bool has_stage(Stage producer) const { return fs::exists(manifest_path(producer)); }

  void output(const std::string& rel, const std::string& bytes) {
    write_text(path(rel), bytes);
    outputs_.push_back(rel);
  }

  void record_output(const std::string& rel) { outputs_.push_back(rel); }

  /// Files from outside the run directory (an external trace).
  void external_input(const fs::path& p) { inputs_[p.string()] = file_hash(p); }

  void commit() {
    json m;
    m["stage"] = stage_name(stage_);
    m["config_hash"] = hash_;
    m["version"] = kVersion;
    m["inputs"] = json::object();
    for (const auto& [rel, h] : inputs_) m["inputs"][rel] = h;
    m["outputs"] = json::object();
    std::sort(outputs_.begin(), outputs_.end());
    for (const auto& rel : outputs_) m["outputs"][rel] = file_hash(path(rel));
    write_text(manifest_path(stage_), m.dump(2) + "\n");
  }

 private:
  fs::path manifest_path(Stage s) const { return dir_ / "manifests" / (stage_name(s) + ".json"); }

  const json& manifest(Stage producer) {
    auto it = manifests_.find(producer);
    if (it != manifests_.end()) return it->second;
    const fs::path p = manifest_path(producer);
    if (!fs::exists(p)) {
      throw StageDependencyError("stage " + stage_name(stage_) + " requires stage " +
                                 stage_name(producer) + " to run first (no " + p.string() + ")");
    }
    json m = json::parse(read_text(p));
    if (m.at("config_hash").get<std::string>() != hash_) {
      throw StalenessError("stage " + stage_name(producer) + " ran under config " +
                           m.at("config_hash").get<std::string>() + ", current config is " + hash_);
    }
    return manifests_.emplace(producer, std::move(m)).first->second;
  }

  const ExperimentConfig& cfg_;
  fs::path dir_;
  Stage stage_;
  std::string hash_;
  std::map<Stage, json> manifests_;
  std::map<std::string, std::string> inputs_;
  std::vector<std::string> outputs_;
};

constexpr const char* kTrace = "trace.csv.gz";
constexpr const char* kTrain = "dataset_train.bin";
constexpr const char* kValidation = "dataset_validation.bin";
constexpr const char* kTest = "dataset_test.bin";
constexpr const char* kPreprocess = "preprocess.json";
constexpr const char* kModel = "model.ckpt";
constexpr const char* kThreshold = "threshold.json";

struct Streams {
  TraceSplit split;
  Trace raw_test;
  Trace train, validation, test;  // trigger streams
};

Streams make_streams(const Trace& trace, const ExperimentConfig& cfg) {
  Streams s;
  s.split = split_trace(trace.size(), cfg.split);
  auto slice = [&](AccessRange r) {
    return Trace(trace.begin() + static_cast<std::ptrdiff_t>(r.begin),
                 trace.begin() + static_cast<std::ptrdiff_t>(r.end));
  };
  auto triggers = [&](Trace raw) {
    if (cfg.simulate.triggers == TriggerStream::llc_misses) {
      return llc_miss_stream(raw, cfg.cache, cfg.features.addr);
    }
    return raw;
  };
  s.train = triggers(slice(s.split.train));
  s.validation = triggers(slice(s.split.validation));
  s.raw_test = slice(s.split.test);
  s.test = triggers(s.raw_test);
  return s;
}

// Samples round-trip through the on-disk f32 encoding so that in-memory
// ablations see exactly what a stored dataset would hold.
std::vector<Sample> as_stored(const std::vector<Sample>& samples) {
  return decode_dataset(encode_dataset(samples));
}

std::size_t effective_skip(const ExperimentConfig& cfg, const Trace& train_stream) {
  return cfg.distance ? distance_skip(cfg.latency.latency, train_stream) : cfg.labels.skip;
}

json metrics_json(const Counts& c) {
  const Metrics m = c.metrics();
  return {{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1},
          {"tp", c.tp},               {"fp", c.fp},         {"fn", c.fn}};
}

std::vector<DeltaBitmap> labels_of(std::span<const Sample> samples) {
  std::vector<DeltaBitmap> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

// Trains, tunes and tests one model variant.
struct Variant {
  ModelParams params;
  ModelConfig model;
  ThresholdReport threshold;
  Counts test;
  std::size_t best_epoch = 0;
};

Variant fit_variant(const std::vector<Sample>& train, const std::vector<Sample>& validation,
                    const std::vector<Sample>& test, const ModelConfig& model,
                    const ExperimentConfig& cfg) {
  Variant v;
  v.model = model;
  auto result = segfetch::train(train, validation, model, cfg.train);
  v.params = round_to_float(std::move(result.params));
  v.best_epoch = result.best_epoch;
  v.threshold = tune_threshold(v.params, model, validation, cfg.throttle);
  v.test = evaluate_threshold(predict_all(test, v.params, model), labels_of(test),
                              v.threshold.optimal_threshold, cfg.throttle.max_degree);
  return v;
}

}  // namespace

namespace {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error("io", "csv column '" + name + "' missing");
    return static_cast<std::size_t>(it - header.begin());
  }
  std::vector<double> numbers(const std::string& name) const {
    const std::size_t c = column(name);
    std::vector<double> out;
    for (const auto& r : rows) out.push_back(std::stod(r.at(c)));
    return out;
  }
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

CsvTable read_csv(const fs::path& path) {
  std::istringstream in(read_text(path));
  CsvTable t;
  std::string line;
  if (std::getline(in, line)) t.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (!line.empty()) t.rows.push_back(split_csv_line(line));
  }
  return t;
}

std::string fmt(double v) {
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

void stage_gen(Run& run) {
  const auto& c = run.cfg();
  Trace trace;
  if (c.trace.file.empty()) {
    trace = generate_trace(c.trace.pattern, c.trace.length, c.seed, c.features.addr);
  } else {
    run.external_input(c.trace.file);
    trace = read_trace(c.trace.file, c.trace.format);
  }
  write_trace(run.path(kTrace), trace, true);
  run.record_output(kTrace);
  json info = {{"accesses", trace.size()},
               {"source", c.trace.file.empty() ? "generated:" + pattern_kind_name(c.trace.pattern.kind)
                                               : c.trace.file},
               {"first_cycle", trace.front().cycle},
               {"last_cycle", trace.back().cycle}};
  run.output("trace.json", info.dump(2) + "\n");
}

json split_json(AccessRange r) { return {{"begin", r.begin}, {"end", r.end}}; }

json dataset_stats(const std::vector<Sample>& samples) {
  std::size_t empty = 0, truncated = 0, bits = 0;
  for (const auto& s : samples) {
    empty += s.label.popcount() == 0;
    truncated += s.truncated;
    bits += s.label.popcount();
  }
  return {{"samples", samples.size()},
          {"empty_labels", empty},
          {"truncated", truncated},
          {"mean_label_size", samples.empty() ? 0.0 : static_cast<double>(bits) / static_cast<double>(samples.size())}};
}

void stage_preprocess(Run& run) {
  const auto& c = run.cfg();
  const Trace trace = read_trace(run.input(Stage::gen, kTrace));
  const Streams s = make_streams(trace, c);
  LabelConfig labels = c.labels;
  labels.skip = effective_skip(c, s.train);

  json info;
  info["split"] = {{"train", split_json(s.split.train)},
                   {"validation", split_json(s.split.validation)},
                   {"test", split_json(s.split.test)}};
  info["trigger_stream"] = trigger_stream_name(c.simulate.triggers);
  info["mean_cycles_per_access"] = mean_cycles_per_access(s.train);
  info["label_skip"] = labels.skip;
  info["input_mode"] = input_mode_name(InputMode::segmented);
  info["dictionary_size"] = 0;
  const std::pair<const char*, const Trace*> parts[] = {
      {kTrain, &s.train}, {kValidation, &s.validation}, {kTest, &s.test}};
  for (const auto& [file, stream] : parts) {
    const auto samples = build_samples(*stream, c.features, labels, InputMode::segmented);
    write_dataset(run.path(file).string(), samples);
    run.record_output(file);
    info["datasets"][file] = dataset_stats(samples);
    info["datasets"][file]["triggers"] = stream->size();
  }
  run.output(kPreprocess, info.dump(2) + "\n");
}

void stage_train(Run& run) {
  const auto& c = run.cfg();
  const auto train_set = read_dataset(run.input(Stage::preprocess, kTrain).string());
  const auto val_set = read_dataset(run.input(Stage::preprocess, kValidation).string());
  const ModelConfig mc = c.main_model();
  auto result = train(train_set, val_set, mc, c.train);
  const ModelParams params = round_to_float(std::move(result.params));
  run.output(kModel, encode_checkpoint(mc, params));
  run.output("training_log.csv", training_log_csv(result.log));

  json info;
  info["best_epoch"] = result.best_epoch;
  info["epochs_run"] = result.log.size();
  info["initial_train_loss"] = result.initial_train_loss;
  if (!result.log.empty() && result.best_epoch >= 1) {
    const auto& best = result.log[result.best_epoch - 1];
    info["best_train_loss"] = best.train_loss;
    info["best_val_loss"] = best.val_loss;
  }
  info["parameter_count"] = params.parameter_count();
  info["parameter_checksum"] = to_hex(params.checksum());
  info["latency_estimate_cycles"] = estimate_latency(LatencyCosts::log_tree(mc.d_model), mc);
  run.output("train.json", info.dump(2) + "\n");
}

void stage_tune(Run& run) {
  const auto& c = run.cfg();
  const Checkpoint ck = load_checkpoint(run.input(Stage::train, kModel).string());
  const auto val_set = read_dataset(run.input(Stage::preprocess, kValidation).string());
  const ThresholdReport report = tune_threshold(ck.params, ck.config, val_set, c.throttle);
  run.output(kThreshold, threshold_report_json(report));
  run.output("threshold_grid.csv", threshold_grid_csv(report));
}

struct AblationRow {
  std::string mode;
  unsigned segment_bits = 0;
  ContextMode context = ContextMode::both;
  std::size_t dictionary_size = 0;
  double threshold = 0.0;
  Counts counts;
  std::size_t best_epoch = 0;
};

void stage_eval(Run& run) {
  const auto& c = run.cfg();
  const Checkpoint ck = load_checkpoint(run.input(Stage::train, kModel).string());
  const ThresholdReport tuned = threshold_report_from_json(read_text(run.input(Stage::tune, kThreshold)));
  const auto train_set = read_dataset(run.input(Stage::preprocess, kTrain).string());
  const auto val_set = read_dataset(run.input(Stage::preprocess, kValidation).string());
  const auto test_set = read_dataset(run.input(Stage::preprocess, kTest).string());
  const Trace trace = read_trace(run.input(Stage::gen, kTrace));
  const Streams streams = make_streams(trace, c);
  LabelConfig labels = c.labels;
  labels.skip = effective_skip(c, streams.train);

  const auto conf = predict_all(test_set, ck.params, ck.config);
  const auto test_labels = labels_of(test_set);
  json out;
  out["test"] = metrics_json(evaluate_threshold(conf, test_labels, tuned.optimal_threshold, c.throttle.max_degree));
  out["test"]["threshold"] = tuned.optimal_threshold;
  out["test_at_half"] = metrics_json(evaluate_threshold(conf, test_labels, 0.5, c.throttle.max_degree));

  // Each job trains an independent variant; results land in fixed slots.
  std::vector<AblationRow> rows;
  std::vector<std::function<void(AblationRow&)>> jobs;
  for (InputMode mode : c.eval.input_modes) {
    const std::vector<unsigned> widths =
        mode == InputMode::segmented ? c.eval.segment_bits : std::vector<unsigned>{c.features.seg.bits};
    for (unsigned s : widths) {
      AblationRow row;
      row.mode = input_mode_name(mode);
      row.segment_bits = mode == InputMode::segmented ? s : 0;
      row.context = ck.config.context;
      rows.push_back(row);
      if (mode == InputMode::segmented && s == c.features.seg.bits) {
        jobs.push_back([&, conf](AblationRow& r) {
          r.threshold = tuned.optimal_threshold;
          r.counts = evaluate_threshold(conf, test_labels, tuned.optimal_threshold, c.throttle.max_degree);
        });
        continue;
      }
      jobs.push_back([&, mode, s](AblationRow& r) {
        FeatureConfig features = c.features;
        features.seg.bits = s;
        TokenDictionary dict;
        TokenDictionary* d = mode == InputMode::segmented ? nullptr : &dict;
        const auto tr = as_stored(build_samples(streams.train, features, labels, mode, d));
        dict.freeze();
        const auto va = as_stored(build_samples(streams.validation, features, labels, mode, d));
        const auto te = as_stored(build_samples(streams.test, features, labels, mode, d));
        const ModelConfig mc = model_config_for(ck.config, features, labels, mode, dict.size());
        const Variant v = fit_variant(tr, va, te, mc, c);
        r.dictionary_size = dict.size();
        r.threshold = v.threshold.optimal_threshold;
        r.counts = v.test;
        r.best_epoch = v.best_epoch;
      });
    }
  }
  for (ContextMode ctx : c.eval.context_modes) {
    if (ctx == ck.config.context) continue;
    AblationRow row;
    row.mode = "context";
    row.segment_bits = c.features.seg.bits;
    row.context = ctx;
    rows.push_back(row);
    jobs.push_back([&, ctx](AblationRow& r) {
      ModelConfig mc = ck.config;
      mc.context = ctx;
      const Variant v = fit_variant(train_set, val_set, test_set, mc, c);
      r.threshold = v.threshold.optimal_threshold;
      r.counts = v.test;
      r.best_epoch = v.best_epoch;
    });
  }
  parallel_for(jobs.size(), [&](std::size_t i) { jobs[i](rows[i]); });

  std::ostringstream csv;
  csv << "mode,segment_bits,context,dictionary_size,threshold,precision,recall,f1\n";
  out["ablation"] = json::array();
  for (const auto& r : rows) {
    const Metrics m = r.counts.metrics();
    json row = metrics_json(r.counts);
    row["mode"] = r.mode;
    row["segment_bits"] = r.segment_bits;
    row["context"] = context_mode_name(r.context);
    row["dictionary_size"] = r.dictionary_size;
    row["threshold"] = r.threshold;
    out["ablation"].push_back(row);
    csv << r.mode << ',' << r.segment_bits << ',' << context_mode_name(r.context) << ','
        << r.dictionary_size << ',' << fmt(r.threshold) << ',' << fmt(m.precision) << ','
        << fmt(m.recall) << ',' << fmt(m.f1) << '\n';
  }
  run.output("eval.json", out.dump(2) + "\n");
  run.output("ablation.csv", csv.str());
}

struct SimJob {
  std::string name;
  std::function<std::unique_ptr<Prefetcher>()> make;
  LatencyModel latency;
  bool record_events = false;
  SimReport report;
};

void run_sims(std::vector<SimJob>& jobs, const Trace& trace, const ExperimentConfig& c) {
  parallel_for(jobs.size(), [&](std::size_t i) {
    auto& job = jobs[i];
    const auto prefetcher = job.make();
    SimConfig sc;
    sc.cache = c.cache;
    sc.latency = job.latency;
    sc.triggers = c.simulate.triggers;
    sc.record_events = job.record_events;
    job.report = simulate(trace, prefetcher.get(), sc, c.features.addr);
    job.report.prefetcher = job.name;
  });
}

constexpr const char* kSimCsvHeader =
    "name,demand_accesses,demand_misses,baseline_misses,triggers,triggers_dropped,prefetches_issued,"
    "useful_prefetches,late_prefetches,useless_evicted,accuracy,coverage,mean_degree\n";

std::string sim_csv_row(const SimReport& r) {
  std::ostringstream o;
  o << r.prefetcher << ',' << r.demand_accesses << ',' << r.demand_misses << ',' << r.baseline_misses
    << ',' << r.triggers << ',' << r.triggers_dropped << ',' << r.prefetches_issued << ','
    << r.useful_prefetches << ',' << r.late_prefetches << ',' << r.useless_evicted << ','
    << fmt(r.accuracy) << ',' << fmt(r.coverage) << ',' << fmt(r.mean_degree()) << '\n';
  return o.str();
}

ModelPrefetcherConfig threshold_mode(double threshold, std::size_t max_degree) {
  ModelPrefetcherConfig m;
  m.mode = DegreeMode::threshold;
  m.threshold = threshold;
  m.max_degree = max_degree;
  return m;
}

void stage_simulate(Run& run) {
  const auto& c = run.cfg();
  const Trace trace = read_trace(run.input(Stage::gen, kTrace));
  const auto pre = json::parse(read_text(run.input(Stage::preprocess, kPreprocess)));
  const Checkpoint ck = load_checkpoint(run.input(Stage::train, kModel).string());
  const ThresholdReport tuned = threshold_report_from_json(read_text(run.input(Stage::tune, kThreshold)));
  const Streams streams = make_streams(trace, c);
  LabelConfig labels = c.labels;
  labels.skip = pre.at("label_skip").get<std::size_t>();

  std::vector<SimJob> jobs;
  jobs.push_back({"none", [] { return std::unique_ptr<Prefetcher>(); }, c.latency, false, {}});
  jobs.push_back({"model",
                  [&] {
                    return std::make_unique<ModelPrefetcher>(
                        ck.params, ck.config, c.features, labels,
                        threshold_mode(tuned.optimal_threshold, c.throttle.max_degree));
                  },
                  c.latency, true, {}});
  jobs.push_back({"model_top" + std::to_string(c.simulate.top_k),
                  [&] {
                    ModelPrefetcherConfig m;
                    m.mode = DegreeMode::top_k;
                    m.top_k = c.simulate.top_k;
                    return std::make_unique<ModelPrefetcher>(ck.params, ck.config, c.features, labels, m);
                  },
                  c.latency, false, {}});
  for (const auto& name : c.simulate.baselines) {
    jobs.push_back({name, [&, name] { return make_baseline(name, c.simulate.baseline_degree); },
                    LatencyModel{}, false, {}});
  }
  if (c.simulate.oracle) {
    jobs.push_back({"oracle",
                    [&] {
                      return std::make_unique<OraclePrefetcher>(streams.raw_test, c.features.addr,
                                                                c.labels.window);
                    },
                    LatencyModel{}, false, {}});
  }
  run_sims(jobs, streams.raw_test, c);

  std::string csv = kSimCsvHeader;
  for (const auto& job : jobs) {
    run.output("sim/" + job.name + ".json", sim_report_json(job.report));
    csv += sim_csv_row(job.report);
    if (job.name == "model") {
      run.output("degree_histogram.csv", degree_histogram_csv(job.report));
      run.output("miss_timeline.csv", miss_timeline_csv(job.report, c.simulate.timeline_interval));
    }
  }
  run.output("simulate.csv", csv);
}

void stage_sweep(Run& run) {
  const auto& c = run.cfg();
  const Trace trace = read_trace(run.input(Stage::gen, kTrace));
  const auto pre = json::parse(read_text(run.input(Stage::preprocess, kPreprocess)));
  const Checkpoint ck = load_checkpoint(run.input(Stage::train, kModel).string());
  const ThresholdReport tuned = threshold_report_from_json(read_text(run.input(Stage::tune, kThreshold)));
  const Streams streams = make_streams(trace, c);
  const std::size_t main_skip = pre.at("label_skip").get<std::size_t>();

  // One model per label skip; the main model covers its own skip.
  auto skip_for = [&](std::uint64_t T, bool distance) {
    return distance ? distance_skip(T, streams.train) : std::size_t{0};
  };
  std::vector<std::size_t> skips;
  for (auto T : c.sweep.latencies) {
    for (bool d : c.sweep.distance) {
      const std::size_t k = skip_for(T, d);
      if (std::find(skips.begin(), skips.end(), k) == skips.end()) skips.push_back(k);
    }
  }
  std::sort(skips.begin(), skips.end());
  struct SkipModel {
    std::size_t skip = 0;
    LabelConfig labels;
    ModelParams params;
    double threshold = 0.5;
    bool trainable = true;  // false when no training label fits inside the bound
  };
  std::vector<SkipModel> models(skips.size());
  parallel_for(skips.size(), [&](std::size_t i) {
    SkipModel& m = models[i];
    m.skip = skips[i];
    m.labels = c.labels;
    m.labels.skip = m.skip;
    if (m.skip == main_skip) {
      m.params = ck.params;
      m.threshold = tuned.optimal_threshold;
      return;
    }
    const auto tr = as_stored(build_samples(streams.train, c.features, m.labels, InputMode::segmented));
    const auto va = as_stored(build_samples(streams.validation, c.features, m.labels, InputMode::segmented));
    const bool any_label = std::any_of(tr.begin(), tr.end(), [](const Sample& x) { return x.label.popcount() > 0; });
    if (!any_label) {
      m.trainable = false;
      return;
    }
    auto result = train(tr, va, ck.config, c.train);
    m.params = round_to_float(std::move(result.params));
    m.threshold = tune_threshold(m.params, ck.config, va, c.throttle).optimal_threshold;
  });
  for (const auto& m : models) {
    if (m.skip == main_skip || !m.trainable) continue;
    const std::string base = "sweep/model_skip" + std::to_string(m.skip);
    run.output(base + ".ckpt", encode_checkpoint(ck.config, m.params));
  }
  auto model_for = [&](std::size_t skip) -> const SkipModel& {
    return *std::find_if(models.begin(), models.end(), [&](const SkipModel& m) { return m.skip == skip; });
  };

  struct Point {
    std::uint64_t T;
    Throughput tp;
    bool distance;
    std::size_t skip;
  };
  std::vector<Point> points;
  std::vector<SimJob> jobs;
  for (auto T : c.sweep.latencies) {
    for (Throughput tp : c.sweep.throughputs) {
      for (bool d : c.sweep.distance) {
        const std::size_t skip = skip_for(T, d);
        points.push_back({T, tp, d, skip});
        const SkipModel& m = model_for(skip);
        jobs.push_back({"T" + std::to_string(T) + "_" + throughput_name(tp) + (d ? "_distance" : "_plain"),
                        [&c, &ck, &m]() -> std::unique_ptr<Prefetcher> {
                          if (!m.trainable) return nullptr;
                          return std::make_unique<ModelPrefetcher>(
                              m.params, ck.config, c.features, m.labels,
                              threshold_mode(m.threshold, c.throttle.max_degree));
                        },
                        LatencyModel{T, tp}, false, {}});
      }
    }
  }
  run_sims(jobs, streams.raw_test, c);

  std::ostringstream csv;
  csv << "T,throughput,distance,skip,trainable,threshold,prefetches_issued,useful_prefetches,late_prefetches,"
         "triggers_dropped,accuracy,coverage\n";
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const auto& r = jobs[i].report;
    const auto& p = points[i];
    run.output("sweep/" + jobs[i].name + ".json", sim_report_json(r));
    csv << p.T << ',' << throughput_name(p.tp) << ',' << (p.distance ? "on" : "off") << ',' << p.skip
        << ',' << (model_for(p.skip).trainable ? 1 : 0) << ',' << fmt(model_for(p.skip).threshold) << ',' << r.prefetches_issued << ','
        << r.useful_prefetches << ',' << r.late_prefetches << ',' << r.triggers_dropped << ','
        << fmt(r.accuracy) << ',' << fmt(r.coverage) << '\n';
  }
  run.output("sweep.csv", csv.str());
}

void stage_report(Run& run) {
  json summary;
  summary["train"] = json::parse(read_text(run.input(Stage::train, "train.json")));
  const CsvTable log = read_csv(run.input(Stage::train, "training_log.csv"));
  const auto threshold = json::parse(read_text(run.input(Stage::tune, kThreshold)));
  summary["threshold"] = {{"optimal_threshold", threshold.at("optimal_threshold")},
                          {"optimal_f1", threshold.at("optimal_f1")},
                          {"mean_degree", threshold.at("mean_degree")},
                          {"degenerate", threshold.at("degenerate")}};
  const CsvTable grid = read_csv(run.input(Stage::tune, "threshold_grid.csv"));
  const CsvTable sims = read_csv(run.input(Stage::simulate, "simulate.csv"));
  const CsvTable degrees = read_csv(run.input(Stage::simulate, "degree_histogram.csv"));

  summary["simulate"] = json::array();
  for (const auto& row : sims.rows) {
    json r;
    for (std::size_t k = 0; k < sims.header.size(); ++k) {
      r[sims.header[k]] = k == 0 ? json(row[k]) : json(std::stod(row[k]));
    }
    summary["simulate"].push_back(r);
  }

  run.output("plots/training_loss.csv", read_text(run.path("training_log.csv")));
  run.output("plots/training_loss.svg",
             plot::line_chart({"Training loss", "epoch", "BCE loss"},
                              {{"train", log.numbers("epoch"), log.numbers("train_loss")},
                               {"validation", log.numbers("epoch"), log.numbers("val_loss")}}));
  run.output("plots/threshold_f1.csv", read_text(run.path("threshold_grid.csv")));
  run.output("plots/threshold_f1.svg",
             plot::line_chart({"Validation metrics vs threshold", "threshold", "score"},
                              {{"F1", grid.numbers("threshold"), grid.numbers("f1")},
                               {"precision", grid.numbers("threshold"), grid.numbers("precision")},
                               {"recall", grid.numbers("threshold"), grid.numbers("recall")}}));
  {
    std::vector<plot::Bar> bars;
    const auto deg = degrees.numbers("degree");
    const auto count = degrees.numbers("triggers");
    for (std::size_t i = 0; i < deg.size(); ++i) bars.push_back({fmt(deg[i]), {count[i]}});
    run.output("plots/degree_histogram.csv", read_text(run.path("degree_histogram.csv")));
    run.output("plots/degree_histogram.svg",
               plot::bar_chart({"Prefetch degree per trigger", "degree", "triggers"}, {"model"}, bars));
  }
  {
    std::vector<plot::Bar> bars;
    const auto acc = sims.numbers("accuracy");
    const auto cov = sims.numbers("coverage");
    const std::size_t name = sims.column("name");
    for (std::size_t i = 0; i < sims.rows.size(); ++i) {
      if (sims.rows[i][name] == "none") continue;
      bars.push_back({sims.rows[i][name], {acc[i], cov[i]}});
    }
    run.output("plots/coverage_accuracy.csv", read_text(run.path("simulate.csv")));
    run.output("plots/coverage_accuracy.svg",
               plot::bar_chart({"Prefetch accuracy and coverage", "prefetcher", "fraction"},
                               {"accuracy", "coverage"}, bars));
  }

  if (run.has_stage(Stage::eval)) {
    summary["eval"] = json::parse(read_text(run.input(Stage::eval, "eval.json")));
    run.output("plots/ablation.csv", read_text(run.input(Stage::eval, "ablation.csv")));
  }
  if (run.has_stage(Stage::sweep)) {
    const CsvTable sweep = read_csv(run.input(Stage::sweep, "sweep.csv"));
    std::map<std::string, plot::Series> lines;
    const std::size_t tp = sweep.column("throughput"), dist = sweep.column("distance");
    const auto T = sweep.numbers("T");
    const auto cov = sweep.numbers("coverage");
    summary["sweep"] = json::array();
    for (std::size_t i = 0; i < sweep.rows.size(); ++i) {
      const std::string key = sweep.rows[i][tp] + (sweep.rows[i][dist] == "on" ? " + distance" : "");
      auto& s = lines[key];
      s.name = key;
      s.x.push_back(T[i]);
      s.y.push_back(cov[i]);
      summary["sweep"].push_back({{"T", T[i]},
                                  {"throughput", sweep.rows[i][tp]},
                                  {"distance", sweep.rows[i][dist]},
                                  {"coverage", cov[i]}});
    }
    std::vector<plot::Series> series;
    for (auto& [key, s] : lines) series.push_back(s);
    run.output("plots/sweep.csv", read_text(run.path("sweep.csv")));
    run.output("plots/sweep.svg",
               plot::line_chart({"Coverage vs induced latency", "T (cycles)", "coverage"}, series));
  }
  run.output("summary.json", summary.dump(2) + "\n");
}

}  // namespace

void run_stage(Stage stage, const ExperimentConfig& cfg, const fs::path& run_dir) {
  cfg.validate();
  fs::create_directories(run_dir);
  Run run(cfg, run_dir, stage);
  switch (stage) {
    case Stage::gen: stage_gen(run); break;
    case Stage::preprocess: stage_preprocess(run); break;
    case Stage::train: stage_train(run); break;
    case Stage::tune: stage_tune(run); break;
    case Stage::eval: stage_eval(run); break;
    case Stage::simulate: stage_simulate(run); break;
    case Stage::sweep: stage_sweep(run); break;
    case Stage::report: stage_report(run); break;
  }
  run.output("config.json", config_to_json(cfg));
  run.commit();
}

}  // namespace segfetch
