#include "mfenkf/harness/sweep.hpp"
#include "mfenkf/io.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

namespace {

using namespace mfenkf;

// Picks the full-space model a surrogate approximates: the nature model by
// default, or a forest tree root selected on the command line.
ModelSpec select_model(const ExperimentConfig& cfg, const std::string& forest_id, int tree) {
  if (forest_id.empty()) return cfg.nature;
  for (const ForestSpec& f : cfg.forests) {
    if (f.id != forest_id) continue;
    if (tree < 1 || tree > static_cast<int>(f.trees.size()))
      throw std::invalid_argument("config: forest '" + forest_id + "' has no tree " +
                                  std::to_string(tree));
    return f.trees[static_cast<std::size_t>(tree - 1)].model;
  }
  throw std::invalid_argument("config: no forest with id '" + forest_id + "'");
}

int cmd_generate_snapshots(const std::string& config_path, const std::string& forest_id, int tree,
                           const std::string& output, int spinup, int count, int stride,
                           long long seed) {
  const ExperimentConfig cfg = load_config(config_path);
  const ModelSpec spec = select_model(cfg, forest_id, tree);
  const BuiltModel model = build_model(cfg, spec);

  auto gen = make_stream(seed >= 0 ? static_cast<std::uint64_t>(seed) : cfg.seed,
                         Stream::TruthInit, 1);
  Vector x = cfg.init_spread * normal_matrix(gen, model.dim, 1).col(0);
  for (int w = 0; w < spinup; ++w) x = model.step(x, cfg.window);

  Matrix snaps(model.dim, count);
  for (int s = 0; s < count; ++s) {
    for (int k = 0; k < stride; ++k) x = model.step(x, cfg.window);
    snaps.col(s) = x;
  }
  write_snapshots(output, snaps);
  std::cerr << "wrote " << count << " snapshots of dimension " << model.dim << " to " << output
            << "\n";
  return 0;
}

int cmd_build_pod(const std::string& config_path, const std::string& forest_id, int tree,
                  const std::string& snapshots_path, int rank, bool centered,
                  const std::string& output) {
  const ExperimentConfig cfg = load_config(config_path);
  const ModelSpec spec = select_model(cfg, forest_id, tree);

  const SnapshotSet snaps{read_snapshots(snapshots_path), cfg.window};
  PODBasis basis;
  if (spec.type == "lorenz96") {
    basis = build_pod(snaps, rank, Lorenz96{spec.k, spec.forcing}, centered);
  } else if (spec.type == "qg") {
    QGConfig qc;
    qc.nx = spec.nx;
    qc.ny = spec.ny;
    qc.re = spec.re;
    qc.ro = spec.ro;
    qc.dt_internal = spec.dt_internal;
    basis = build_pod(snaps, rank, QGSolver(qc), centered);
  } else {
    throw std::invalid_argument("config: cannot project model type '" + spec.type + "'");
  }
  write_pod_basis(output, basis);
  std::cerr << "wrote rank-" << rank << " basis for a dimension-" << basis.full_dim()
            << " model to " << output << "\n";
  return 0;
}

int cmd_run(const std::string& config_path, const std::string& output_override, int threads) {
  ExperimentConfig cfg = load_config(config_path);
  if (!output_override.empty()) cfg.output = output_override;
  if (cfg.output.empty())
    throw std::invalid_argument("config: no 'output' path (set it in the config or via --output)");

  const SweepResult sweep = run_sweep(cfg, threads);
  double wall = 0.0;
  for (const RunResult& r : sweep.runs) wall += r.wall_seconds;
  std::cerr << sweep.rows << " rows written to " << cfg.output << " ("
            << sweep.runs.size() << " runs, " << wall << " s of simulation)\n";
  return sweep.all_diverged ? 3 : 0;
}

int cmd_validate(const std::string& config_path) {
  const ExperimentConfig cfg = load_config(config_path);

  bool ok = true;
  for (const ForestSpec& fs : cfg.forests) {
    const ModelForest forest =
        build_forest(cfg, fs, cfg.ensemble_sizes.front(), cfg.inflations.front());

    // Probe states for operator round trips, one per distinct node space.
    std::vector<StateVector> probes;
    auto gen = make_stream(cfg.seed, Stream::EnsembleInit, 0);
    for (const ModelNode& tree : forest.trees)
      for_each_post_order(tree, [&](const ModelNode& node) {
        probes.push_back(StateVector{normal_matrix(gen, node.dim, 1).col(0), node.space});
      });

    const ValidationReport report = validate_forest(forest, probes);
    std::cout << "forest " << fs.id << ": " << (report.ok() ? "ok" : "INVALID") << "\n";
    for (const auto& rt : report.node_round_trips)
      std::cout << "  node " << rt.node << " round-trip deviation " << rt.deviation << "\n";
    for (const auto& issue : report.failures)
      std::cout << "  " << issue.where << ": " << issue.message << "\n";
    ok = ok && report.ok();
  }
  if (!ok) throw std::invalid_argument("config: forest validation failed");
  std::cout << "config ok: " << cfg.forests.size() << " forest(s), "
            << cfg.ensemble_sizes.size() << " ensemble size(s), " << cfg.inflations.size()
            << " inflation(s), " << cfg.runs << " repetition(s)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Model-forest ensemble Kalman filter experiments"};
  app.require_subcommand(1);

  std::string config_path, output, forest_id, snapshots_path;
  int tree = 1, spinup = 0, count = 100, stride = 1, rank = 12, threads = 1;
  long long seed = -1;
  bool centered = false;

  CLI::App* gen = app.add_subcommand("generate-snapshots",
                                     "Integrate a model and store a snapshot matrix");
  gen->add_option("-c,--config", config_path, "experiment config file")->required();
  gen->add_option("-o,--output", output, "snapshot file to write")->required();
  gen->add_option("--forest", forest_id, "take the model from this forest (default: nature)");
  gen->add_option("--tree", tree, "1-based tree index within --forest");
  gen->add_option("--spinup", spinup, "windows to discard before sampling");
  gen->add_option("--count", count, "number of snapshots");
  gen->add_option("--stride", stride, "windows between snapshots");
  gen->add_option("--seed", seed, "override the config master seed");

  CLI::App* pod = app.add_subcommand("build-pod",
                                     "Build a reduced basis and operators from snapshots");
  pod->add_option("-c,--config", config_path, "experiment config file")->required();
  pod->add_option("-s,--snapshots", snapshots_path, "snapshot file")->required();
  pod->add_option("-o,--output", output, "basis file to write")->required();
  pod->add_option("-r,--rank", rank, "basis rank")->required();
  pod->add_option("--forest", forest_id, "project the model of this forest (default: nature)");
  pod->add_option("--tree", tree, "1-based tree index within --forest");
  pod->add_flag("--centered", centered, "subtract the snapshot mean before the decomposition");

  CLI::App* run = app.add_subcommand("run", "Run a twin-experiment sweep from a JSON config");
  run->add_option("-c,--config", config_path, "experiment config file")->required();
  run->add_option("-o,--output", output, "override the config CSV path");
  run->add_option("-t,--threads", threads, "worker threads (output is identical for any value)");

  CLI::App* val = app.add_subcommand("validate",
                                     "Check a JSON config and print the resolved experiment");
  val->add_option("-c,--config", config_path, "experiment config file")->required();

  try {
    app.parse(argc, argv);
    if (gen->parsed())
      return cmd_generate_snapshots(config_path, forest_id, tree, output, spinup, count, stride,
                                    seed);
    if (pod->parsed())
      return cmd_build_pod(config_path, forest_id, tree, snapshots_path, rank, centered, output);
    if (run->parsed()) return cmd_run(config_path, output, threads);
    if (val->parsed()) return cmd_validate(config_path);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
