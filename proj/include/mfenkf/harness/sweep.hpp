#pragma once

// Sweep driver: expands the (ensemble size x inflation x forest x repetition)
// grid into independent jobs, executes them (optionally on a thread pool),
// aggregates repetitions, and emits one CSV row per grid cell.  Output is
// byte-identical across reruns and thread counts: every job derives its own
// random streams, shared truths are precomputed serially, and rows are
// assembled in grid order after all jobs finish.

#include "mfenkf/harness/experiment.hpp"

#include <atomic>
#include <cstdio>
#include <fstream>
#include <thread>

namespace mfenkf {

struct SweepResult {
  std::string csv;
  std::vector<RunResult> runs;  // every job result, grid order
  int rows = 0;
  bool all_diverged = false;
};

namespace detail {

inline std::string format_full(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string format_short(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

}  // namespace detail

inline SweepResult run_sweep(const ExperimentConfig& cfg, int threads = 1) {
  validate_config(cfg);

  // Refuse an unwritable output path before any model run happens.
  if (!cfg.output.empty()) {
    std::ofstream probe(cfg.output, std::ios::trunc);
    if (!probe) throw std::runtime_error("cannot open file for writing: " + cfg.output);
  }

  std::vector<TruthRealization> truths;
  truths.reserve(static_cast<std::size_t>(cfg.runs));
  for (int r = 0; r < cfg.runs; ++r) truths.push_back(make_truth(cfg, r));

  struct Job {
    std::size_t n_idx, a_idx, f_idx;
    int run_id;
  };
  std::vector<Job> jobs;
  for (std::size_t ni = 0; ni < cfg.ensemble_sizes.size(); ++ni)
    for (std::size_t ai = 0; ai < cfg.inflations.size(); ++ai)
      for (std::size_t fi = 0; fi < cfg.forests.size(); ++fi)
        for (int r = 0; r < cfg.runs; ++r) jobs.push_back({ni, ai, fi, r});

  std::vector<RunResult> results(jobs.size());
  auto work = [&](std::size_t j) {
    const Job& job = jobs[j];
    results[j] = run_twin_experiment(cfg, job.f_idx, cfg.ensemble_sizes[job.n_idx],
                                     cfg.inflations[job.a_idx], job.run_id,
                                     truths[static_cast<std::size_t>(job.run_id)]);
  };
  if (threads <= 1) {
    for (std::size_t j = 0; j < jobs.size(); ++j) work(j);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    const std::size_t n_threads =
        std::min(static_cast<std::size_t>(threads), jobs.size());
    pool.reserve(n_threads);
    for (std::size_t t = 0; t < n_threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t j = next++; j < jobs.size(); j = next++) work(j);
      });
    for (std::thread& t : pool) t.join();
  }

  SweepResult out;
  out.csv = "forest_id,N,alpha,runs,diverged,mean_rmse,std_rmse,hf_runs_per_step\n";
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::size_t j = 0;
  bool any_converged = false;
  for (std::size_t ni = 0; ni < cfg.ensemble_sizes.size(); ++ni)
    for (std::size_t ai = 0; ai < cfg.inflations.size(); ++ai)
      for (std::size_t fi = 0; fi < cfg.forests.size(); ++fi) {
        std::vector<double> aggregates;
        double hf_acc = 0.0;
        int diverged = 0;
        for (int r = 0; r < cfg.runs; ++r, ++j) {
          const RunResult& res = results[j];
          if (res.diverged) {
            ++diverged;
          } else {
            aggregates.push_back(res.aggregate);
            hf_acc += static_cast<double>(res.hf_model_runs) /
                      static_cast<double>(res.steps_completed);
          }
        }
        double mean = nan, stddev = nan, hf_per_step = nan;
        if (!aggregates.empty()) {
          any_converged = true;
          mean = 0.0;
          for (double a : aggregates) mean += a;
          mean /= static_cast<double>(aggregates.size());
          stddev = 0.0;
          if (aggregates.size() > 1) {
            for (double a : aggregates) stddev += (a - mean) * (a - mean);
            stddev = std::sqrt(stddev / static_cast<double>(aggregates.size() - 1));
          }
          hf_per_step = hf_acc / static_cast<double>(aggregates.size());
        }
        out.csv += cfg.forests[fi].id;
        out.csv += ',';
        out.csv += std::to_string(cfg.ensemble_sizes[ni]);
        out.csv += ',';
        out.csv += detail::format_short(cfg.inflations[ai]);
        out.csv += ',';
        out.csv += std::to_string(cfg.runs);
        out.csv += ',';
        out.csv += std::to_string(diverged);
        out.csv += ',';
        out.csv += detail::format_full(mean);
        out.csv += ',';
        out.csv += detail::format_full(stddev);
        out.csv += ',';
        out.csv += detail::format_short(hf_per_step);
        out.csv += '\n';
        ++out.rows;
      }
  out.all_diverged = !any_converged;
  out.runs = std::move(results);

  if (!cfg.output.empty()) {
    std::ofstream file(cfg.output, std::ios::trunc);
    if (!file) throw std::runtime_error("cannot open file for writing: " + cfg.output);
    file << out.csv;
    if (!file) throw std::runtime_error("write failed: " + cfg.output);
  }
  return out;
}

}  // namespace mfenkf
