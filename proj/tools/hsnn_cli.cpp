// hsnn: data generation, training, index publishing, retrieval, evaluation
// and ablation grids from the command line.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hsnn/experiment.hpp"
#include "hsnn/tensor_io.hpp"

namespace fs = std::filesystem;
using namespace hsnn;

namespace {

constexpr const char* kRunConfigFile = "run_config.json";

struct Common {
  std::string config;
  std::uint64_t seed = 1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "run configuration (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "run seed")->required();
}

RunConfig base_config(const Common& c) {
  return c.config.empty() ? RunConfig{} : load_run_config(c.config);
}

// Model and training sections come from the artifact written by `train`,
// everything else from --config.
RunConfig artifact_config(const Common& c, const fs::path& artifact) {
  RunConfig cfg = base_config(c);
  if (fs::exists(artifact / kRunConfigFile)) {
    const RunConfig stored = load_run_config(artifact / kRunConfigFile);
    cfg.model = stored.model;
    cfg.train = stored.train;
    cfg.index_version = stored.index_version;
  }
  return cfg;
}

void emit(const std::string& out, const std::string& text) {
  if (out.empty() || out == "-") {
    std::cout << text;
  } else {
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    write_text_file(out, text);
  }
}

std::vector<std::size_t> parse_sizes(const std::string& list) {
  std::vector<std::size_t> out;
  std::stringstream ss(list);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("expected a comma-separated list of integers, got '" + list + "'");
    }
  }
  return out;
}

std::vector<std::string> split_names(const std::string& list) {
  std::vector<std::string> out;
  std::stringstream ss(list);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

std::vector<std::uint64_t> read_user_ids(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read user ids from " + path.string());
  std::vector<std::uint64_t> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    try {
      std::size_t used = 0;
      ids.push_back(std::stoull(line, &used));
      if (used != line.size()) throw std::invalid_argument(line);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": not a user id: '" +
                        line + "'");
    }
  }
  return ids;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned hierarchical index retrieval: data, training, serving, evaluation", "hsnn"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  Common common;
  std::string data_dir, out, model_dir, snapshot_dir, users_file;

  CLI::App* gen = app.add_subcommand("gen-data", "generate a planted world and its impression stream");
  add_common(gen, common);
  gen->add_option("--out", out, "dataset directory")->required();

  std::string mode, item_preset, nodes, presets;
  CLI::App* train = app.add_subcommand("train", "train an HSNN on a generated dataset");
  add_common(train, common);
  train->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", out, "model directory")->required();
  train->add_option("--mode", mode, "joim, sil or em");
  train->add_option("--item-preset", item_preset, "item layer preset (XS, S, M, L)");
  train->add_option("--nodes", nodes, "index layer sizes, coarse first, e.g. 20,5");
  train->add_option("--presets", presets, "index layer presets, e.g. M,S");

  CLI::App* build = app.add_subcommand("build-index", "publish a serving snapshot and its index");
  add_common(build, common);
  build->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
  build->add_option("--model", model_dir, "model directory from train")->required()->check(CLI::ExistingDirectory);
  build->add_option("--out", out, "serving directory")->required();

  std::size_t top_k = 100;
  bool exhaustive = false;
  CLI::App* retrieve = app.add_subcommand("retrieve", "top-k retrieval for a list of users");
  add_common(retrieve, common);
  retrieve->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
  retrieve->add_option("--serving", snapshot_dir, "serving directory from build-index")->required()->check(CLI::ExistingDirectory);
  retrieve->add_option("--users", users_file, "file with one user id per line")->required()->check(CLI::ExistingFile);
  retrieve->add_option("--top-k", top_k, "items per user");
  retrieve->add_flag("--exhaustive", exhaustive, "keep every node at every layer");
  retrieve->add_option("--out", out, "results file (default stdout)");

  CLI::App* evaluate = app.add_subcommand("evaluate", "NE, recall and cost report");
  add_common(evaluate, common);
  evaluate->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--serving", snapshot_dir, "serving directory from build-index")->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--out", out, "report file (default stdout)");

  std::string modes, toggles, seeds;
  CLI::App* ablate = app.add_subcommand("ablate", "paired-seed ablation grid as CSV");
  add_common(ablate, common);
  ablate->add_option("--modes", modes, "comma-separated modes (default: config mode)");
  ablate->add_option("--toggles", toggles, "components to switch off: scheduler,warmup,balance");
  ablate->add_option("--seeds", seeds, "comma-separated seeds (default: --seed)");
  ablate->add_option("--out", out, "CSV file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    const CLI::App* sub = nullptr;
    for (const CLI::App* s : app.get_subcommands()) sub = s;
    std::cerr << (sub ? sub->help() : app.help());
    return 64;
  }

  try {
    if (gen->parsed()) {
      const RunConfig cfg = base_config(common);
      const Dataset data = generate_dataset(cfg, common.seed);
      save_dataset(out, data);
      std::printf("dataset %016llx: %zu train, %zu calibration, %zu eval examples, %zu churn events\n",
                  static_cast<unsigned long long>(data.hash()), data.stream.num_examples(),
                  data.calibration.size(), data.evaluation.size(), data.stream.events.size());
    } else if (train->parsed()) {
      RunConfig cfg = base_config(common);
      if (!mode.empty()) cfg.train.mode = parse_train_mode(mode);
      if (!item_preset.empty()) cfg.model.item.preset = parse_preset(item_preset);
      if (!nodes.empty()) {
        cfg.model.nodes = parse_sizes(nodes);
        if (presets.empty()) cfg.model.presets.assign(cfg.model.nodes.size(), Preset::M);
      }
      if (!presets.empty()) {
        cfg.model.presets.clear();
        for (const std::string& p : split_names(presets)) cfg.model.presets.push_back(parse_preset(p));
      }
      cfg.model.validate();
      const Dataset data = load_dataset(data_dir);
      TrainedRun run = train_run(cfg, common.seed, data);
      fs::create_directories(out);
      save_hsnn(fs::path(out) / "model", run.model, cfg.schema(), run.trace.steps);
      write_text_file(fs::path(out) / "trace.csv", trace_csv(run.trace));
      write_text_file(fs::path(out) / kRunConfigFile, cfg.to_json());
      std::printf("trained %s for %zu steps (%zu index refreshes)\n",
                  train_mode_name(cfg.train.mode).c_str(), run.trace.steps, run.trace.reclusters);
    } else if (build->parsed()) {
      const RunConfig cfg = artifact_config(common, model_dir);
      const FeatureSchema schema = cfg.schema();
      const Dataset data = load_dataset(data_dir);
      std::size_t step = 0;
      HsnnModel model = load_hsnn(fs::path(model_dir) / "model", schema, &step);
      const HierarchicalIndex index =
          publish_index(model, data.world.items(), schema, cfg.index_version);
      const ServingSnapshot snap = split_model(model, index.version(), step);
      fs::create_directories(out);
      save_snapshot(fs::path(out) / "snapshot", snap, schema);
      save_index(fs::path(out) / "index", index);
      write_text_file(fs::path(out) / kRunConfigFile, cfg.to_json());
      const auto occ = index.occupancy();
      std::printf("index v%llu: %zu items, %zu levels, occupancy ratio %.6f\n",
                  static_cast<unsigned long long>(index.version()), index.item_ids().size(),
                  index.levels(), occ.empty() ? 1.0 : occupancy_ratio(occ[0]));
    } else if (retrieve->parsed()) {
      const RunConfig cfg = artifact_config(common, snapshot_dir);
      const FeatureSchema schema = cfg.schema();
      const Dataset data = load_dataset(data_dir);
      const ServingSnapshot snap = load_snapshot(fs::path(snapshot_dir) / "snapshot", schema);
      const HierarchicalIndex index = load_index(fs::path(snapshot_dir) / "index");
      const InvertedIndex inv = InvertedIndex::build(snap, index, data.world.items(), schema);
      RetrievalBudget budget = exhaustive ? exhaustive_budget(inv, top_k) : serving_budget(cfg.eval, inv);
      budget.top_k = top_k;
      const I2ifIndex i2if = build_i2if_index(data.world.items());
      std::string text;
      for (std::uint64_t id : read_user_ids(users_file)) {
        if (id >= data.world.users().size() || data.world.users()[id].id != id) {
          throw ConfigError("unknown user id " + std::to_string(id));
        }
        const RetrievalResult r =
            retrieve_layerwise(snap, inv, schema, data.world.users()[id], i2if, budget);
        text += format_results(id, r.items);
      }
      emit(out, text);
    } else if (evaluate->parsed()) {
      const RunConfig cfg = artifact_config(common, snapshot_dir);
      const FeatureSchema schema = cfg.schema();
      const Dataset data = load_dataset(data_dir);
      const ServingSnapshot snap = load_snapshot(fs::path(snapshot_dir) / "snapshot", schema);
      const HierarchicalIndex index = load_index(fs::path(snapshot_dir) / "index");
      emit(out, evaluate_run(cfg, common.seed, data, snap, index).to_json());
    } else if (ablate->parsed()) {
      const RunConfig cfg = base_config(common);
      AblationSpec spec;
      for (const std::string& m : split_names(modes)) spec.modes.push_back(parse_train_mode(m));
      spec.toggles = split_names(toggles);
      if (seeds.empty()) {
        spec.seeds = {common.seed};
      } else {
        for (std::size_t s : parse_sizes(seeds)) spec.seeds.push_back(s);
      }
      emit(out, ablation_csv(run_ablation_grid(cfg, spec), cfg));
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.code() << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
