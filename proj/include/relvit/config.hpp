#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "relvit/dataset.hpp"
#include "relvit/splits.hpp"
#include "relvit/trainer.hpp"

namespace relvit {

struct DataConfig {
    /// Directory written by `gen-data`; empty means generate in memory.
    std::string dir;
    int samples = 5000;
    std::uint64_t seed = 7;
    SyntheticConfig synthetic;
};

struct SplitConfig {
    SplitKind kind = SplitKind::held_out_combinations;
    /// Explicit held-out concepts; when empty they are selected by regime.
    std::vector<ConceptId> held_out;
    HeldOutRegime regime = HeldOutRegime::easy;
    int count = 6;
    int threshold = 1000000;
    int max_hops = 4;
    /// Pre-built split document; overrides the fields above.
    std::string file;
};

struct EvalConfig {
    int top_k = 10;
    bool log_steps = true;
};

/// Validated experiment configuration with every default materialized.
struct ExperimentConfig {
    TrainerConfig trainer;
    DataConfig data;
    SplitConfig split;
    EvalConfig eval;
    /// Canonical text of every schema key.
    std::map<std::string, std::string> values;

    /// FNV-1a over the sorted canonical key=value lines, as 16 hex digits.
    std::string hash() const;
    /// Flat YAML document that loads back to an identical configuration.
    std::string to_yaml() const;
};

/// Documented keys with their default values (canonical text).
const std::map<std::string, std::string>& config_defaults();

/// Parses a YAML document; nested maps are flattened to dotted keys.
/// Throws ConfigError naming the key and the violated constraint.
ExperimentConfig parse_config(std::string_view yaml);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Builds a configuration from (possibly partial) key -> value text.
ExperimentConfig config_from_values(const std::map<std::string, std::string>& overrides);

/// Copy of `base` with some keys replaced.
ExperimentConfig with_overrides(const ExperimentConfig& base, const std::map<std::string, std::string>& overrides);

} // namespace relvit
