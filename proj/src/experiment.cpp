#include "relvit/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "relvit/errors.hpp"

namespace relvit {

namespace fs = std::filesystem;

namespace {

std::string read_text(const fs::path& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream os(p);
    os << text;
    if (!os) {
        throw std::ios_base::failure("cannot write " + p.string());
    }
}

std::vector<MetricRecord> read_log(const fs::path& p) {
    std::vector<MetricRecord> out;
    std::ifstream is(p);
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty()) {
            out.push_back(MetricRecord::parse(line));
        }
    }
    return out;
}

MetricRecord last_epoch_record(const std::vector<MetricRecord>& log) {
    for (auto it = log.rbegin(); it != log.rend(); ++it) {
        if ((*it)["kind"] == "epoch") {
            return *it;
        }
    }
    return MetricRecord::object();
}

Metrics metrics_from(const MetricRecord& rec) {
    Metrics m;
    for (const auto& [k, v] : rec.items()) {
        if (v.is_number()) {
            m.scalars[k] = v.get<double>();
        }
    }
    return m;
}

} // namespace

Dataset materialize_dataset(const ExperimentConfig& c) {
    if (c.data.dir.empty()) {
        return generate_dataset(c.data.samples, c.data.seed, c.data.synthetic);
    }
    Dataset d = read_dataset(c.data.dir);
    const auto& b = c.trainer.backbone;
    for (const AnnotatedSample& s : d.samples) {
        if (s.image.height != b.image_height || s.image.width != b.image_width) {
            throw ConfigError("data.dir images are " + std::to_string(s.image.height) + "x" +
                              std::to_string(s.image.width) + " but backbone.image_size is " +
                              std::to_string(b.image_height));
        }
    }
    return d;
}

Split materialize_split(const ExperimentConfig& c, const Dataset& d) {
    if (!c.split.file.empty()) {
        return read_split(c.split.file);
    }
    switch (c.split.kind) {
    case SplitKind::original:
        return build_systematic_split(d, std::vector<ConceptId>{});
    case SplitKind::held_out_combinations: {
        std::vector<ConceptId> held = c.split.held_out;
        if (held.empty() && c.split.count > 0) {
            held = select_held_out(d, c.split.regime, static_cast<std::size_t>(c.split.count), c.split.threshold);
        }
        return build_systematic_split(d, held);
    }
    case SplitKind::hop_ceiling:
        break;
    }
    throw ConfigError("split.kind hop_ceiling needs question records with semantics (use split.file)");
}

RunOutcome run_experiment(const ExperimentConfig& config, const fs::path& dir, const RunOptions& options) {
    RunOutcome out;
    out.dir = dir;
    const std::string hash = config.hash();
    if (fs::exists(dir / "config_hash")) {
        const std::string existing = read_text(dir / "config_hash");
        if (existing != hash && !options.force) {
            throw ConfigError("run directory " + dir.string() + " holds config " + existing +
                              ", refusing to overwrite (use --force)");
        }
        if (existing == hash && fs::exists(dir / "DONE") && !options.force) {
            out.skipped = true;
            out.finished = true;
            out.final_metrics = last_epoch_record(read_log(dir / "metrics.jsonl"));
            return out;
        }
        if (options.force) {
            fs::remove_all(dir);
        }
    }
    fs::create_directories(dir / "checkpoints");
    write_text(dir / "config.yaml", config.to_yaml());
    write_text(dir / "config_hash", hash);
    write_text(dir / "seed", std::to_string(config.trainer.train.seed) + "\n");

    const Dataset dataset = materialize_dataset(config);
    const Split split = materialize_split(config, dataset);
    write_split(split, dir / "split.json");

    std::optional<TrainState> resume;
    std::vector<MetricRecord> kept;
    if (fs::exists(dir / "checkpoints" / "last.ckpt")) {
        TrainState state(config.trainer, dataset.inventory);
        load_checkpoint(state, dir / "checkpoints" / "last.ckpt", hash);
        for (MetricRecord& rec : read_log(dir / "metrics.jsonl")) {
            if (rec["epoch"].get<int>() < state.epoch) {
                kept.push_back(std::move(rec));
            }
        }
        resume = std::move(state);
    }
    {
        std::ofstream os(dir / "metrics.jsonl", std::ios::trunc);
        for (const MetricRecord& rec : kept) {
            os << rec.dump() << '\n';
        }
    }
    std::ofstream log(dir / "metrics.jsonl", std::ios::app);
    TrainOptions topt;
    topt.checkpoint_dir = dir / "checkpoints";
    topt.config_hash = hash;
    topt.log_steps = config.eval.log_steps;
    topt.stop_after_epoch = options.stop_after_epoch;
    topt.on_record = [&](const MetricRecord& rec) { log << rec.dump() << '\n' << std::flush; };
    TrainResult result = train(config.trainer, dataset, split, topt, std::move(resume));
    log.close();

    const std::vector<MetricRecord> full = read_log(dir / "metrics.jsonl");
    out.final_metrics = last_epoch_record(full);
    out.finished = result.state.epoch >= config.trainer.train.epochs;
    if (out.finished) {
        save_checkpoint(result.state, dir / "final.ckpt", hash);
        ReportPaths paths{dir / "metrics.json", dir / "features.tsv", std::nullopt};
        std::optional<FeatureDump> dump;
        if (result.last_eval) {
            dump = FeatureDump{result.last_eval->features, {}};
            for (std::size_t i = 0; i < split.test.size(); ++i) {
                dump->labels.push_back(dataset.samples[static_cast<std::size_t>(split.test[i])].primary.str());
            }
        }
        emit_report(metrics_from(out.final_metrics), paths, dump ? &*dump : nullptr);
        write_text(dir / "DONE", hash + "\n");
    }
    return out;
}

const std::vector<std::string>& sweepable_keys() {
    static const std::vector<std::string> keys{"loss.alpha", "dictionary.strategy", "dictionary.capacity",
                                               "loss.tasks", "dictionary.scheme"};
    return keys;
}

SweepSpec load_sweep(const fs::path& path) {
    YAML::Node root;
    try {
        root = YAML::LoadFile(path.string());
    } catch (const YAML::Exception& e) {
        throw ConfigError("cannot read sweep file " + path.string() + ": " + e.what());
    }
    SweepSpec spec;
    if (!root || root.IsNull()) {
        return spec;
    }
    if (!root.IsMap()) {
        throw ConfigError("sweep file must be a mapping with 'grid' and 'seeds'");
    }
    for (const auto& kv : root) {
        const std::string key = kv.first.as<std::string>();
        if (key == "grid") {
            for (const auto& g : kv.second) {
                std::vector<std::string> values;
                for (const auto& v : g.second) {
                    values.push_back(v.as<std::string>());
                }
                spec.grid[g.first.as<std::string>()] = values;
            }
        } else if (key == "seeds") {
            for (const auto& v : kv.second) {
                spec.seeds.push_back(v.as<std::uint64_t>());
            }
        } else {
            throw ConfigError("unknown sweep key '" + key + "'");
        }
    }
    return spec;
}

std::vector<std::pair<std::map<std::string, std::string>, ExperimentConfig>> expand_sweep(const ExperimentConfig& base,
                                                                                          const SweepSpec& sweep) {
    for (const auto& [key, values] : sweep.grid) {
        if (std::find(sweepable_keys().begin(), sweepable_keys().end(), key) == sweepable_keys().end()) {
            throw ConfigError("sweep key '" + key + "' is not sweepable");
        }
        if (values.empty()) {
            throw ConfigError("sweep key '" + key + "' has no values");
        }
    }
    std::vector<std::map<std::string, std::string>> points{{}};
    for (const auto& [key, values] : sweep.grid) {
        std::vector<std::map<std::string, std::string>> next;
        for (const auto& p : points) {
            for (const std::string& v : values) {
                auto q = p;
                q[key] = v;
                next.push_back(std::move(q));
            }
        }
        points = std::move(next);
    }
    std::vector<std::uint64_t> seeds = sweep.seeds;
    if (seeds.empty()) {
        seeds.push_back(base.trainer.train.seed);
    }
    std::vector<std::pair<std::map<std::string, std::string>, ExperimentConfig>> out;
    for (const auto& p : points) {
        for (std::uint64_t s : seeds) {
            auto overrides = p;
            overrides["seed"] = std::to_string(s);
            out.emplace_back(p, with_overrides(base, overrides));
        }
    }
    return out;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const SweepSpec& sweep, const fs::path& root,
                                      bool force) {
    const auto runs = expand_sweep(base, sweep);
    std::set<std::string> dirs;
    for (const auto& [point, cfg] : runs) {
        if (!dirs.insert(cfg.hash()).second) {
            throw ConfigError("sweep points overlap: two grid points resolve to run-" + cfg.hash());
        }
    }
    std::vector<AblationRow> rows;
    for (const auto& [point, cfg] : runs) {
        const fs::path dir = root / ("run-" + cfg.hash());
        RunOptions opt;
        opt.force = force;
        const RunOutcome r = run_experiment(cfg, dir, opt);
        rows.push_back({point, cfg.trainer.train.seed, dir.filename().string(), r.final_metrics});
    }
    std::ofstream os(root / "results.tsv");
    os << "# relvit-ablation schema_version=" << kReportSchemaVersion << '\n';
    os << "run\tseed";
    for (const auto& [key, values] : sweep.grid) {
        os << '\t' << key;
    }
    os << "\tmap_full\tmap_unseen\tsilhouette\n";
    os.precision(17);
    for (const AblationRow& r : rows) {
        os << r.run_dir << '\t' << r.seed;
        for (const auto& [key, value] : r.point) {
            os << '\t' << value;
        }
        for (const char* m : {"map_full", "map_unseen", "silhouette"}) {
            os << '\t';
            if (r.metrics.contains(m) && r.metrics[m].is_number()) {
                os << r.metrics[m].get<double>();
            } else {
                os << "nan";
            }
        }
        os << '\n';
    }
    return rows;
}

} // namespace relvit
