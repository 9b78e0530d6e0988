// Command-line driver for the experiment pipeline.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "segfetch/pipeline.hpp"

namespace {

using nlohmann::json;

// Applies "a.b.c=value" overrides to the raw config document. The value is
// parsed as JSON when possible and taken as a string otherwise.
void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw segfetch::ConfigError("--set expects key.path=value, got '" + assignment + "'");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (dot == std::string::npos) {
      (*node)[key] = value;
      break;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

int fail(const segfetch::Error& e, const std::string& stage) {
  json record = {{"error", {{"kind", e.kind()}, {"message", e.what()}, {"stage", stage}}}};
  std::cerr << record.dump() << '\n';
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"segfetch: trace-driven attention prefetcher experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string run_dir;
  std::string runs_root = "runs";
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config (JSON); defaults when omitted");
    cmd->add_option("--run-dir", run_dir, "run directory (default: <runs-root>/<config hash>)");
    cmd->add_option("--runs-root", runs_root, "parent of content-addressed run directories");
    cmd->add_option("--seed", seed, "override the config seed");
    cmd->add_option("--set", overrides, "override a config key, e.g. --set model.d_model=32");
  };

  std::vector<std::pair<CLI::App*, std::vector<segfetch::Stage>>> commands;
  for (segfetch::Stage s : segfetch::all_stages()) {
    auto* cmd = app.add_subcommand(segfetch::stage_name(s), "run the " + segfetch::stage_name(s) + " stage");
    add_common(cmd);
    commands.push_back({cmd, {s}});
  }
  auto* all = app.add_subcommand("all", "run every stage in order");
  add_common(all);
  commands.push_back({all, segfetch::all_stages()});

  auto* show = app.add_subcommand("config", "print the resolved config and its run directory");
  add_common(show);

  CLI11_PARSE(app, argc, argv);

  std::string current = "config";
  try {
    json doc = json::object();
    if (!config_path.empty()) {
      std::ifstream f(config_path);
      if (!f) throw segfetch::ConfigError("cannot read config " + config_path);
      doc = json::parse(f, nullptr, false);
      if (doc.is_discarded()) throw segfetch::ConfigError(config_path + " is not valid JSON");
    }
    for (const auto& o : overrides) apply_override(doc, o);
    if (seed) doc["seed"] = *seed;
    const segfetch::ExperimentConfig cfg = segfetch::config_from_json(doc.dump());
    const std::filesystem::path dir =
        run_dir.empty() ? segfetch::default_run_dir(cfg, runs_root) : std::filesystem::path(run_dir);

    if (show->parsed()) {
      std::cout << segfetch::config_to_json(cfg) << "run_dir: " << dir.string() << '\n';
      return 0;
    }
    for (const auto& [cmd, stages] : commands) {
      if (!cmd->parsed()) continue;
      for (segfetch::Stage s : stages) {
        current = segfetch::stage_name(s);
        std::cerr << "[segfetch] " << current << " -> " << dir.string() << '\n';
        segfetch::run_stage(s, cfg, dir);
      }
    }
  } catch (const segfetch::Error& e) {
    return fail(e, current);
  } catch (const std::exception& e) {
    return fail(segfetch::Error("internal", e.what()), current);
  }
  return 0;
}
