#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "relvit/config.hpp"
#include "relvit/errors.hpp"
#include "relvit/experiment.hpp"
#include "support.hpp"

using namespace relvit;
namespace fs = std::filesystem;

namespace {

const char* kTinyYaml = R"(seed: 3
data:
  samples: 96
backbone:
  image_size: 16
  patch_size: 4
  depths: [1]
  widths: [8]
  heads: [2]
head:
  hidden: 8
  out: 8
  layers: 2
augmentation:
  blur_kernel: 3
  crop_scale_min: 0.5
train:
  epochs: 2
  batch_size: 16
  lr: 0.001
split:
  count: 2
eval:
  log_steps: true
)";

std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

int run_lab(const std::string& args) {
    const std::string cmd = std::string(RELVIT_LAB_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST_CASE("a config with only a seed takes every default") {
    const ExperimentConfig c = parse_config("seed: 42\n");
    CHECK(c.trainer.train.seed == 42);
    for (const auto& [key, value] : config_defaults()) {
        if (key != "seed") {
            CAPTURE(key);
            CHECK(c.values.at(key) == value);
        }
    }
    CHECK(c.trainer.loss.alpha == doctest::Approx(0.1));
    CHECK(c.trainer.ema_momentum == doctest::Approx(0.999));
    CHECK(c.trainer.loss.temperatures.teacher == doctest::Approx(0.04));
    CHECK(c.trainer.loss.temperatures.student == doctest::Approx(0.1));
    CHECK(c.trainer.dictionary.capacity == 10);
}

TEST_CASE("constraint violations name the key") {
    CHECK_THROWS_WITH_AS(parse_config("loss.alpha: -1\n"), "loss.alpha must be ≥ 0", ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("ema:\n  lambda: 1.5\n"), doctest::Contains("ema.lambda"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("loss.tau_teacher: 0\n"), doctest::Contains("loss.tau_teacher"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("dictionary.capacity: 0\n"), doctest::Contains("dictionary.capacity"),
                         ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("dictionary.strategy: newest\n"), doctest::Contains("dictionary.strategy"),
                         ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("loss.alpha: abc\n"), doctest::Contains("loss.alpha"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config("loss.alhpa: 1\n"), doctest::Contains("unknown config key 'loss.alhpa'"),
                         ConfigError);
    CHECK_THROWS_AS(parse_config("- 1\n- 2\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("a: [\n"), ConfigError);
    CHECK_THROWS_AS(load_config("/nonexistent/relvit.yaml"), ConfigError);
}

TEST_CASE("hash ignores key order and nesting but not values") {
    const ExperimentConfig a = parse_config("seed: 1\nloss.alpha: 0.5\ntrain.lr: 0.01\n");
    const ExperimentConfig b = parse_config("train:\n  lr: 0.01\nloss:\n  alpha: 0.5\nseed: 1\n");
    const ExperimentConfig c = parse_config("seed: 1\nloss.alpha: 0.25\ntrain.lr: 0.01\n");
    CHECK(a.hash() == b.hash());
    CHECK(a.hash() != c.hash());
    CHECK(a.hash().size() == 16);
    CHECK(parse_config(a.to_yaml()).hash() == a.hash());
    CHECK(with_overrides(a, {{"loss.alpha", "0.25"}}).hash() == c.hash());
    CHECK(config_from_values({{"seed", "1"}, {"loss.alpha", "0.5"}, {"train.lr", "0.01"}}).hash() == a.hash());
}

TEST_CASE("run_experiment layout, reruns and refusals") {
    const fs::path root = testing_support::scratch_dir("experiment");
    const ExperimentConfig cfg = parse_config(kTinyYaml);
    const RunOutcome first = run_experiment(cfg, root / "run");
    CHECK(first.finished);
    CHECK_FALSE(first.skipped);
    for (const char* f : {"config.yaml", "config_hash", "seed", "split.json", "metrics.jsonl", "final.ckpt",
                          "metrics.json", "DONE", "checkpoints/last.ckpt", "checkpoints/epoch-1.ckpt"}) {
        CAPTURE(f);
        CHECK(fs::exists(root / "run" / f));
    }
    CHECK(slurp(root / "run" / "config_hash") == cfg.hash());
    CHECK(load_config(root / "run" / "config.yaml").hash() == cfg.hash());
    CHECK(first.final_metrics["epoch"].get<int>() == 1);
    CHECK(first.final_metrics.contains("map_unseen"));

    const std::string log = slurp(root / "run" / "metrics.jsonl");
    const auto stamp = fs::last_write_time(root / "run" / "metrics.jsonl");
    const RunOutcome again = run_experiment(cfg, root / "run");
    CHECK(again.skipped);
    CHECK(slurp(root / "run" / "metrics.jsonl") == log);
    CHECK(fs::last_write_time(root / "run" / "metrics.jsonl") == stamp);
    CHECK(again.final_metrics == first.final_metrics);

    const RunOutcome forced = run_experiment(cfg, root / "run", {true, std::nullopt});
    CHECK_FALSE(forced.skipped);
    CHECK(slurp(root / "run" / "metrics.jsonl") == log);

    const ExperimentConfig other = with_overrides(cfg, {{"loss.alpha", "0.5"}});
    CHECK_THROWS_WITH_AS(run_experiment(other, root / "run"), doctest::Contains("refusing"), ConfigError);
    CHECK(slurp(root / "run" / "config_hash") == cfg.hash());
}

TEST_CASE("sweeps expand the grid times the seeds") {
    const ExperimentConfig base = parse_config(kTinyYaml);
    SweepSpec alphas{{{"loss.alpha", {"0", "0.01", "0.1", "0.3", "1.0"}}}, {}};
    const auto a = expand_sweep(base, alphas);
    REQUIRE(a.size() == 5);
    std::set<std::string> hashes;
    for (const auto& [point, cfg] : a) {
        hashes.insert(cfg.hash());
        CHECK(std::stod(cfg.values.at("loss.alpha")) == std::stod(point.at("loss.alpha")));
    }
    CHECK(hashes.size() == 5);

    SweepSpec grid{{{"dictionary.capacity", {"1", "5", "10", "20"}},
                    {"dictionary.strategy", {"uniform", "most_recent"}}},
                   {}};
    CHECK(expand_sweep(base, grid).size() == 8);
    grid.seeds = {1, 2, 3};
    CHECK(expand_sweep(base, grid).size() == 24);

    const auto single = expand_sweep(base, {});
    REQUIRE(single.size() == 1);
    CHECK(single[0].second.hash() == base.hash());

    const fs::path root = testing_support::scratch_dir("sweep");
    // "0.10" and "0.1" canonicalize to the same configuration.
    SweepSpec overlap{{{"loss.alpha", {"0.1", "0.10"}}}, {}};
    CHECK_THROWS_WITH_AS(run_ablation(base, overlap, root), doctest::Contains("overlap"), ConfigError);

    write(root / "sweep.yaml", "grid:\n  loss.alpha: [0, 0.5]\nseeds: [1, 2]\n");
    const SweepSpec loaded = load_sweep(root / "sweep.yaml");
    CHECK(loaded.grid.at("loss.alpha") == std::vector<std::string>{"0", "0.5"});
    CHECK(loaded.seeds == std::vector<std::uint64_t>{1, 2});
    write(root / "bad.yaml", "grid:\n  train.lr: [1, 2]\nseeds: [1]\n");
    CHECK_THROWS_WITH_AS(expand_sweep(base, load_sweep(root / "bad.yaml")), doctest::Contains("not sweepable"),
                         ConfigError);
    write(root / "typo.yaml", "grids:\n  loss.alpha: [0]\n");
    CHECK_THROWS_AS(load_sweep(root / "typo.yaml"), ConfigError);
}

TEST_CASE("run_ablation writes one row per grid point") {
    const fs::path root = testing_support::scratch_dir("ablation");
    const ExperimentConfig base = with_overrides(parse_config(kTinyYaml), {{"train.epochs", "1"}});
    SweepSpec sweep{{{"loss.tasks", {"none", "both"}}}, {5}};
    const auto rows = run_ablation(base, sweep, root);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].point.at("loss.tasks") == "none");
    CHECK(fs::exists(root / rows[1].run_dir / "DONE"));
    std::ifstream tsv(root / "results.tsv");
    std::string line;
    int lines = 0;
    while (std::getline(tsv, line)) {
        ++lines;
    }
    CHECK(lines == 4);
}

TEST_CASE("relvit_lab exit codes") {
    const fs::path dir = testing_support::scratch_dir("lab");
    write(dir / "bad.yaml", "loss.alpha: -1\n");
    write(dir / "tiny.yaml", kTinyYaml);
    write(dir / "nan.yaml", std::string(kTinyYaml) + "loss.tau_student: 1e-300\n");
    const std::string home = "RELVIT_LAB_HOME=" + dir.string() + " ";

    CHECK(run_lab("parse-concepts --question 'A man holding a car' --lexicon man,car,hold --answer yes") == 0);
    CHECK(run_lab("--help") == 0);
    CHECK(run_lab("") == 2);
    CHECK(run_lab("train --config " + (dir / "bad.yaml").string()) == 2);
    CHECK(run_lab("no-such-command") == 2);
    CHECK(run_lab("stats --data " + (dir / "missing").string()) == 3);
    CHECK(run_lab("train --config " + (dir / "nan.yaml").string() + " --run-dir " + (dir / "nan").string()) == 4);
    CHECK(fs::exists(dir / "nan" / "checkpoints" / "diagnostic.ckpt"));
    CHECK(run_lab("gen-data --out " + (dir / "data").string() + " --samples 80 --image-size 16") == 0);
    CHECK(run_lab("stats --data " + (dir / "data").string()) == 0);
    CHECK(run_lab("split --data " + (dir / "data").string() + " --held-out circle:above:square --out " +
                  (dir / "split.json").string()) == 0);
    CHECK(fs::exists(dir / "split.json"));
    CHECK(std::system(("cd " + dir.string() + " && " + home + RELVIT_LAB_PATH +
                       " train --config tiny.yaml >/dev/null 2>&1")
                          .c_str()) == 0);
    CHECK(fs::exists(dir / "runs" / ("run-" + parse_config(kTinyYaml).hash()) / "DONE"));
}
