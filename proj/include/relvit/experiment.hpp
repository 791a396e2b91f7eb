#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "relvit/config.hpp"

namespace relvit {

/// Dataset named by the config: read from data.dir or generated in memory.
Dataset materialize_dataset(const ExperimentConfig& config);
/// Split named by the config: split.file, or built from the split.* keys.
Split materialize_split(const ExperimentConfig& config, const Dataset& dataset);

struct RunOptions {
    bool force = false;
    /// Stop after this many finished epochs; a later call resumes.
    std::optional<int> stop_after_epoch;
};

struct RunOutcome {
    std::filesystem::path dir;
    /// True when the directory already held a finished run with this config.
    bool skipped = false;
    bool finished = false;
    /// Last epoch record of the metric log.
    MetricRecord final_metrics;
};

/// Trains one configuration inside `dir`.
///
/// Layout: config.yaml, config_hash, seed, split.json, metrics.jsonl,
/// checkpoints/, final.ckpt, metrics.json and DONE. A finished directory with
/// the same hash is left untouched unless `force`; an unfinished one resumes
/// from checkpoints/last.ckpt. A directory holding another configuration is
/// refused unless `force`.
RunOutcome run_experiment(const ExperimentConfig& config, const std::filesystem::path& dir,
                          const RunOptions& options = {});

/// Grid over config keys; every combination is run once per seed.
struct SweepSpec {
    std::map<std::string, std::vector<std::string>> grid;
    std::vector<std::uint64_t> seeds;
};

/// Keys a sweep may vary.
const std::vector<std::string>& sweepable_keys();

SweepSpec load_sweep(const std::filesystem::path& path);

struct AblationRow {
    std::map<std::string, std::string> point;
    std::uint64_t seed = 0;
    std::string run_dir;
    MetricRecord metrics;
};

/// Expands the sweep into configurations (grid order, then seeds); an empty
/// grid yields the base configuration alone.
std::vector<std::pair<std::map<std::string, std::string>, ExperimentConfig>> expand_sweep(const ExperimentConfig& base,
                                                                                          const SweepSpec& sweep);

/// Runs every grid point under `root` and writes results.tsv there. Two
/// points that resolve to the same run directory are refused.
std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const SweepSpec& sweep,
                                      const std::filesystem::path& root, bool force = false);

} // namespace relvit
