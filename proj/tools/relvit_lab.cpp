// relvit_lab: command-line entry point for data generation, splitting,
// training, evaluation, reports and ablation sweeps.
//
// Exit codes: 0 success, 2 configuration/usage error, 3 data error,
// 4 numeric failure, 1 anything else.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "relvit/concept_parsing.hpp"
#include "relvit/errors.hpp"
#include "relvit/experiment.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace relvit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

bool g_json = false;

fs::path lab_home() {
    if (const char* home = std::getenv("RELVIT_LAB_HOME"); home != nullptr && *home != '\0') {
        return home;
    }
    return fs::current_path() / "relvit-lab";
}

void print(const json& doc, const std::string& human) {
    if (g_json) {
        std::cout << doc.dump() << '\n';
    } else {
        std::cout << human;
    }
}

std::string fmt_metric(const json& rec, const char* key) {
    if (!rec.contains(key) || !rec[key].is_number()) {
        return "n/a";
    }
    std::ostringstream os;
    os.precision(4);
    os << std::fixed << rec[key].get<double>();
    return os.str();
}

/// Config for a checkpoint: explicit path, else config.yaml beside the
/// checkpoint or one level up (run-dir layout).
ExperimentConfig config_for_checkpoint(const std::string& config_path, const fs::path& ckpt) {
    if (!config_path.empty()) {
        return load_config(config_path);
    }
    for (const fs::path& dir : {ckpt.parent_path(), ckpt.parent_path().parent_path()}) {
        if (fs::exists(dir / "config.yaml")) {
            return load_config(dir / "config.yaml");
        }
    }
    throw ConfigError("no --config given and no config.yaml next to " + ckpt.string());
}

struct Loaded {
    ExperimentConfig config;
    Dataset dataset;
    TrainState state;
};

Loaded load_run(const std::string& config_path, const fs::path& ckpt) {
    ExperimentConfig config = config_for_checkpoint(config_path, ckpt);
    Dataset dataset = materialize_dataset(config);
    TrainState state(config.trainer, dataset.inventory);
    load_checkpoint(state, ckpt, config.hash());
    return {std::move(config), std::move(dataset), std::move(state)};
}

const AnnotatedSample& sample_by_id(const Dataset& d, int id) {
    for (const AnnotatedSample& s : d.samples) {
        if (s.id == id) {
            return s;
        }
    }
    throw DataError("no sample with id " + std::to_string(id));
}

std::vector<QuestionRecord> read_question_tsv(const fs::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw DataError("cannot read " + path.string());
    }
    std::vector<QuestionRecord> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') {
            continue;
        }
        const auto t1 = line.find('\t');
        const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
        if (t2 == std::string::npos) {
            throw DataError("question line needs id<TAB>partition<TAB>semantics: " + line);
        }
        QuestionRecord q;
        q.id = line.substr(0, t1);
        const std::string part = line.substr(t1 + 1, t2 - t1 - 1);
        if (part != "train" && part != "test") {
            throw DataError("question partition must be train or test, got '" + part + "'");
        }
        q.partition = part == "train" ? Partition::train : Partition::test;
        q.semantics = line.substr(t2 + 1);
        out.push_back(std::move(q));
    }
    return out;
}

std::set<std::string> read_lexicon(const std::string& spec) {
    std::set<std::string> out;
    if (fs::exists(spec)) {
        std::ifstream is(spec);
        std::string w;
        while (is >> w) {
            out.insert(w);
        }
        return out;
    }
    std::stringstream ss(spec);
    std::string w;
    while (std::getline(ss, w, ',')) {
        if (!w.empty()) {
            out.insert(w);
        }
    }
    return out;
}

json split_summary(const Split& split) {
    json held = json::array();
    for (const ConceptId& c : split.spec.held_out) {
        held.push_back(c.str());
    }
    return {{"kind", to_string(split.spec.kind)},
            {"train", split.train.size()},
            {"test", split.test.size()},
            {"excluded", split.excluded.size()},
            {"held_out", held}};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"relvit_lab: concept-guided self-distillation lab"};
    app.require_subcommand(1);
    app.add_flag("--json", g_json, "Machine-readable output");

    // train
    auto* train_cmd = app.add_subcommand("train", "Train one configuration in a run directory");
    std::string config_path;
    std::string resume_path;
    std::optional<std::uint64_t> seed_override;
    std::string run_dir;
    bool force = false;
    std::optional<int> stop_after;
    train_cmd->add_option("--config", config_path, "Config file")->required();
    train_cmd->add_option("--resume", resume_path, "Checkpoint to resume from");
    train_cmd->add_option("--seed", seed_override, "Override the seed");
    train_cmd->add_option("--run-dir", run_dir, "Run directory (default $RELVIT_LAB_HOME/runs/run-<hash>)");
    train_cmd->add_flag("--force", force, "Re-run even if the directory holds a finished run");
    train_cmd->add_option("--stop-after-epoch", stop_after, "Stop after N finished epochs");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
    std::string ckpt_path;
    std::string split_path;
    std::string out_path;
    eval_cmd->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
    eval_cmd->add_option("--split", split_path, "Split document")->required();
    eval_cmd->add_option("--config", config_path, "Config (default: config.yaml of the run)");
    eval_cmd->add_option("--out", out_path, "metrics.json destination");

    // gen-data
    auto* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic relational dataset");
    std::string data_dir;
    int samples = 5000;
    std::uint64_t data_seed = 7;
    int image_size = 64;
    gen_cmd->add_option("--out", data_dir, "Output directory")->required();
    gen_cmd->add_option("--samples", samples, "Number of samples")->check(CLI::PositiveNumber);
    gen_cmd->add_option("--seed", data_seed, "Generation seed");
    gen_cmd->add_option("--image-size", image_size, "Image side length")->check(CLI::PositiveNumber);

    // split
    auto* split_cmd = app.add_subcommand("split", "Build a systematic split");
    std::string kind = "combos";
    std::string held_out_list;
    std::string regime = "easy";
    int count = 6;
    int threshold = 1000000;
    int max_hops = 4;
    std::string questions_path;
    std::string gqa_train;
    std::string gqa_test;
    std::string hoi_csv;
    split_cmd->add_option("--kind", kind, "combos or hops")->check(CLI::IsMember({"combos", "hops"}));
    split_cmd->add_option("--data", data_dir, "Dataset directory (combos)");
    split_cmd->add_option("--hoi-csv", hoi_csv, "HOI annotation CSV (combos)");
    split_cmd->add_option("--held-out", held_out_list, "Comma-separated held-out concepts");
    split_cmd->add_option("--regime", regime, "Held-out selection regime")->check(CLI::IsMember({"easy", "hard"}));
    split_cmd->add_option("--count", count, "Held-out concepts to select");
    split_cmd->add_option("--threshold", threshold, "Training-count threshold for selection");
    split_cmd->add_option("--questions", questions_path, "TSV id<TAB>partition<TAB>semantics (hops)");
    split_cmd->add_option("--gqa-train", gqa_train, "GQA training questions JSON (hops)");
    split_cmd->add_option("--gqa-test", gqa_test, "GQA test questions JSON (hops)");
    split_cmd->add_option("--max-hops", max_hops, "Hop ceiling for training")->check(CLI::PositiveNumber);
    split_cmd->add_option("--out", out_path, "Split document destination")->required();

    // parse-concepts
    auto* parse_cmd = app.add_subcommand("parse-concepts", "Extract concepts from a question");
    std::string question;
    std::string lexicon_spec;
    std::string answer;
    parse_cmd->add_option("--question", question, "Question text")->required();
    parse_cmd->add_option("--lexicon", lexicon_spec, "Lexicon file (one word per line) or comma list")->required();
    parse_cmd->add_option("--answer", answer, "Answer text");

    // stats
    auto* stats_cmd = app.add_subcommand("stats", "Per-concept sample counts");
    std::size_t top = 10;
    stats_cmd->add_option("--data", data_dir, "Dataset directory")->required();
    stats_cmd->add_option("--top", top, "Number of top concepts to list");
    stats_cmd->add_option("--out", out_path, "TSV with every concept count");

    // report-clusters
    auto* clusters_cmd = app.add_subcommand("report-clusters", "Silhouette and 2-D projection of test features");
    std::string out_dir;
    clusters_cmd->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
    clusters_cmd->add_option("--split", split_path, "Split document (default: the run's split.json)");
    clusters_cmd->add_option("--config", config_path, "Config (default: config.yaml of the run)");
    clusters_cmd->add_option("--out", out_dir, "Output directory")->required();

    // report-correspondence
    auto* corr_cmd = app.add_subcommand("report-correspondence", "Token correspondences between two images");
    int image_a = 0;
    std::optional<int> image_b;
    std::size_t top_k = 10;
    corr_cmd->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
    corr_cmd->add_option("--config", config_path, "Config (default: config.yaml of the run)");
    corr_cmd->add_option("--image-a", image_a, "Sample id of image A")->required();
    corr_cmd->add_option("--image-b", image_b, "Sample id of image B (default: a second view of A)");
    corr_cmd->add_option("--top-k", top_k, "Pairs to keep")->check(CLI::PositiveNumber);
    corr_cmd->add_option("--out", out_path, "TSV destination")->required();

    // ablate
    auto* ablate_cmd = app.add_subcommand("ablate", "Grid sweep over a base configuration");
    std::string sweep_path;
    std::string root;
    ablate_cmd->add_option("--config", config_path, "Base config")->required();
    ablate_cmd->add_option("--sweep", sweep_path, "Sweep file (grid + seeds)");
    ablate_cmd->add_option("--root", root, "Output root (default $RELVIT_LAB_HOME/ablations/<hash>)");
    ablate_cmd->add_flag("--force", force, "Re-run finished grid points");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*train_cmd) {
            ExperimentConfig config = load_config(config_path);
            if (seed_override) {
                config = with_overrides(config, {{"seed", std::to_string(*seed_override)}});
            }
            const fs::path dir = run_dir.empty() ? lab_home() / "runs" / ("run-" + config.hash()) : fs::path(run_dir);
            if (!resume_path.empty()) {
                fs::create_directories(dir / "checkpoints");
                const fs::path target = dir / "checkpoints" / "last.ckpt";
                if (!fs::exists(target) || !fs::equivalent(resume_path, target)) {
                    fs::copy_file(resume_path, target, fs::copy_options::overwrite_existing);
                }
                if (!fs::exists(dir / "config_hash")) {
                    std::ofstream(dir / "config_hash") << config.hash();
                }
            }
            RunOptions opt;
            opt.force = force;
            opt.stop_after_epoch = stop_after;
            const RunOutcome r = run_experiment(config, dir, opt);
            json doc = {{"run_dir", r.dir.string()},
                        {"config_hash", config.hash()},
                        {"skipped", r.skipped},
                        {"finished", r.finished},
                        {"metrics", r.final_metrics}};
            print(doc, std::string(r.skipped ? "already finished: " : "run: ") + r.dir.string() +
                           "\n  map_full " + fmt_metric(r.final_metrics, "map_full") + "  map_unseen " +
                           fmt_metric(r.final_metrics, "map_unseen") + "  silhouette " +
                           fmt_metric(r.final_metrics, "silhouette") + "\n");
        } else if (*eval_cmd) {
            Loaded run = load_run(config_path, ckpt_path);
            const Split split = read_split(split_path);
            const EvalResult ev = evaluate(run.state, run.dataset, split.test, split.spec.held_out);
            Metrics m;
            m.scalars["map_full"] = ev.map_full;
            if (ev.map_unseen) {
                m.scalars["map_unseen"] = *ev.map_unseen;
            }
            if (ev.accuracy) {
                m.scalars["accuracy"] = *ev.accuracy;
            }
            if (ev.silhouette) {
                m.scalars["silhouette"] = *ev.silhouette;
            }
            if (!out_path.empty()) {
                emit_report(m, {out_path, std::nullopt, std::nullopt});
            }
            json doc = json::object();
            for (const auto& [k, v] : m.scalars) {
                doc[k] = v;
            }
            std::string human;
            for (const auto& [k, v] : m.scalars) {
                human += k + " " + fmt_metric(doc, k.c_str()) + "\n";
            }
            print(doc, human);
        } else if (*gen_cmd) {
            SyntheticConfig sc;
            sc.image_size = image_size;
            const Dataset d = generate_dataset(samples, data_seed, sc);
            write_dataset(d, data_dir);
            print({{"dir", data_dir}, {"samples", d.samples.size()}, {"concepts", d.inventory.size()}},
                  "wrote " + std::to_string(d.samples.size()) + " samples over " +
                      std::to_string(d.inventory.size()) + " concepts to " + data_dir + "\n");
        } else if (*split_cmd) {
            Split split;
            if (kind == "combos") {
                std::vector<ConceptId> held;
                std::stringstream ss(held_out_list);
                for (std::string c; std::getline(ss, c, ',');) {
                    if (!c.empty()) {
                        held.emplace_back(c);
                    }
                }
                if (!hoi_csv.empty()) {
                    const AnnotationSet a = read_hoi_csv(hoi_csv);
                    split = build_systematic_split(a.concepts, a.partitions, a.inventory, held);
                } else if (!data_dir.empty()) {
                    const Dataset d = read_dataset(data_dir);
                    if (held.empty() && count > 0) {
                        held = select_held_out(d, regime == "easy" ? HeldOutRegime::easy : HeldOutRegime::hard,
                                               static_cast<std::size_t>(count), threshold);
                    }
                    split = build_systematic_split(d, held);
                } else {
                    throw ConfigError("split --kind combos needs --data or --hoi-csv");
                }
            } else {
                std::vector<QuestionRecord> qs;
                if (!questions_path.empty()) {
                    qs = read_question_tsv(questions_path);
                }
                if (!gqa_train.empty()) {
                    for (auto& q : read_gqa_questions(gqa_train, Partition::train)) {
                        qs.push_back(std::move(q));
                    }
                }
                if (!gqa_test.empty()) {
                    for (auto& q : read_gqa_questions(gqa_test, Partition::test)) {
                        qs.push_back(std::move(q));
                    }
                }
                if (qs.empty()) {
                    throw ConfigError("split --kind hops needs --questions or --gqa-train/--gqa-test");
                }
                split = build_hop_split(qs, max_hops);
            }
            write_split(split, out_path);
            const json doc = split_summary(split);
            print(doc, "split " + std::string(to_string(split.spec.kind)) + ": train " +
                           std::to_string(split.train.size()) + ", test " + std::to_string(split.test.size()) +
                           ", excluded " + std::to_string(split.excluded.size()) + "\n");
        } else if (*parse_cmd) {
            const std::set<std::string> lexicon = read_lexicon(lexicon_spec);
            if (lexicon.empty()) {
                throw ConfigError("--lexicon is empty");
            }
            const auto concepts = parse_concepts(question, lexicon, reference_tagger, answer);
            json arr = json::array();
            std::string human;
            for (const ConceptId& c : concepts) {
                arr.push_back(c.str());
                human += c.str() + "\n";
            }
            print({{"concepts", arr}}, human);
        } else if (*stats_cmd) {
            const Dataset d = read_dataset(data_dir);
            const ConceptStats st = concept_stats(d);
            json topj = json::array();
            std::string human = "concepts " + std::to_string(st.counts.size()) + "  mean " +
                                std::to_string(st.mean) + "  median " + std::to_string(st.median) +
                                "  without samples " + std::to_string(st.without_samples) + "  below ten " +
                                std::to_string(st.below_ten) + "\n";
            for (const auto& [c, n] : st.top(top)) {
                topj.push_back({{"concept", c.str()}, {"count", n}});
                human += "  " + c.str() + "\t" + std::to_string(n) + "\n";
            }
            if (!out_path.empty()) {
                std::ofstream os(out_path);
                os << "# relvit-concept-counts schema_version=" << kReportSchemaVersion << "\nconcept\tcount\n";
                for (const auto& [c, n] : st.counts) {
                    os << c.str() << '\t' << n << '\n';
                }
            }
            print({{"concepts", st.counts.size()},
                   {"mean", st.mean},
                   {"median", st.median},
                   {"without_samples", st.without_samples},
                   {"below_ten", st.below_ten},
                   {"top", topj}},
                  human);
        } else if (*clusters_cmd) {
            Loaded run = load_run(config_path, ckpt_path);
            Split split;
            if (!split_path.empty()) {
                split = read_split(split_path);
            } else {
                split = materialize_split(run.config, run.dataset);
            }
            const EvalResult ev = evaluate(run.state, run.dataset, split.test, split.spec.held_out);
            const ClusterReport rep = cluster_separation(ev.features, ev.primary_labels);
            fs::create_directories(out_dir);
            FeatureDump dump{ev.features, {}};
            for (int i : split.test) {
                dump.labels.push_back(run.dataset.samples[static_cast<std::size_t>(i)].primary.str());
            }
            Metrics m;
            m.scalars["silhouette"] = rep.silhouette;
            m.scalars["samples"] = rep.samples;
            m.scalars["clusters"] = rep.clusters;
            emit_report(m, {fs::path(out_dir) / "metrics.json", fs::path(out_dir) / "features.tsv", std::nullopt},
                        &dump);
            std::ofstream os(fs::path(out_dir) / "projection.tsv");
            os.precision(17);
            os << "# relvit-projection schema_version=" << kReportSchemaVersion << "\nlabel\tpc1\tpc2\n";
            for (Eigen::Index r = 0; r < rep.projection.rows(); ++r) {
                os << dump.labels[static_cast<std::size_t>(r)] << '\t' << rep.projection(r, 0) << '\t'
                   << rep.projection(r, 1) << '\n';
            }
            print({{"silhouette", rep.silhouette}, {"samples", rep.samples}, {"clusters", rep.clusters}},
                  "silhouette " + std::to_string(rep.silhouette) + " over " + std::to_string(rep.samples) +
                      " samples in " + std::to_string(rep.clusters) + " clusters\n");
        } else if (*corr_cmd) {
            Loaded run = load_run(config_path, ckpt_path);
            const AnnotatedSample& a = sample_by_id(run.dataset, image_a);
            TokenSequence ta;
            TokenSequence tb;
            if (image_b) {
                ta = run.state.pair.student.backbone.forward(a.image);
                tb = run.state.pair.student.backbone.forward(sample_by_id(run.dataset, *image_b).image);
            } else {
                const ViewPair views =
                    make_views(a.image, run.config.trainer.augmentation,
                               derive_seed(run.config.trainer.train.seed, static_cast<std::uint64_t>(a.id), 0));
                ta = run.state.pair.student.backbone.forward(views.view1);
                tb = run.state.pair.student.backbone.forward(views.view2);
            }
            const auto matches = correspondence(ta.tokens, tb.tokens, ta.grid_cols, top_k);
            const fs::path out(out_path);
            Metrics m;
            m.scalars["pairs"] = static_cast<double>(matches.size());
            emit_report(m, {out.parent_path() / (out.stem().string() + ".metrics.json"), std::nullopt, out}, nullptr,
                        &matches);
            json arr = json::array();
            std::string human;
            for (const TokenMatch& t : matches) {
                arr.push_back({{"a", t.index_a}, {"b", t.index_b}, {"similarity", t.similarity}});
                human += std::to_string(t.index_a) + " -> " + std::to_string(t.index_b) + "  " +
                         std::to_string(t.similarity) + "\n";
            }
            print({{"pairs", arr}}, human);
        } else if (*ablate_cmd) {
            const ExperimentConfig base = load_config(config_path);
            const SweepSpec sweep = sweep_path.empty() ? SweepSpec{} : load_sweep(sweep_path);
            const fs::path out_root = root.empty() ? lab_home() / "ablations" / base.hash() : fs::path(root);
            fs::create_directories(out_root);
            const auto rows = run_ablation(base, sweep, out_root, force);
            json arr = json::array();
            std::string human = "results: " + (out_root / "results.tsv").string() + "\n";
            for (const AblationRow& r : rows) {
                json point = json::object();
                std::string label;
                for (const auto& [k, v] : r.point) {
                    point[k] = v;
                    label += k + "=" + v + " ";
                }
                arr.push_back({{"run", r.run_dir}, {"seed", r.seed}, {"point", point}, {"metrics", r.metrics}});
                human += "  " + label + "seed=" + std::to_string(r.seed) + "  map_unseen " +
                         fmt_metric(r.metrics, "map_unseen") + "  silhouette " + fmt_metric(r.metrics, "silhouette") +
                         "\n";
            }
            print({{"root", out_root.string()}, {"rows", arr}}, human);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const DomainError& e) {
        std::cerr << "invalid input: " << e.what() << '\n';
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kExitData;
    } catch (const LoadError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kExitData;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitOther;
    }
    return kExitOk;
}
