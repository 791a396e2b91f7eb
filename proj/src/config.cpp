#include "relvit/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "relvit/errors.hpp"
#include "relvit/serialize.hpp"

namespace relvit {

namespace {

[[noreturn]] void bad(std::string_view key, const std::string& constraint) {
    throw ConfigError(std::string(key) + " " + constraint);
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view text) {
    std::vector<std::string> out;
    std::string t = trim(text);
    if (t.size() >= 2 && t.front() == '[' && t.back() == ']') {
        t = trim(std::string_view(t).substr(1, t.size() - 2));
    }
    if (t.empty()) {
        return out;
    }
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = t.find(',', start);
        out.push_back(trim(std::string_view(t).substr(start, comma - start)));
        if (comma == std::string::npos) {
            break;
        }
        start = comma + 1;
    }
    return out;
}

std::string join(const std::vector<std::string>& parts) {
    std::string out;
    for (const std::string& p : parts) {
        out += (out.empty() ? "" : ",") + p;
    }
    return out;
}

std::string fmt_double(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

double as_double(std::string_view key, std::string_view text) {
    const std::string t = trim(text);
    double v = 0.0;
    const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
    if (r.ec != std::errc() || r.ptr != t.data() + t.size() || !std::isfinite(v)) {
        bad(key, "must be a number, got '" + t + "'");
    }
    return v;
}

long long as_integer(std::string_view key, std::string_view text) {
    const std::string t = trim(text);
    long long v = 0;
    const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
    if (r.ec != std::errc() || r.ptr != t.data() + t.size()) {
        bad(key, "must be an integer, got '" + t + "'");
    }
    return v;
}

int as_int(std::string_view key, std::string_view text, long long lo, const char* constraint) {
    const long long v = as_integer(key, text);
    if (v < lo || v > std::numeric_limits<int>::max()) {
        bad(key, constraint);
    }
    return static_cast<int>(v);
}

bool as_bool(std::string_view key, std::string_view text) {
    const std::string t = trim(text);
    if (t == "true" || t == "yes" || t == "on" || t == "1") {
        return true;
    }
    if (t == "false" || t == "no" || t == "off" || t == "0") {
        return false;
    }
    bad(key, "must be true or false, got '" + t + "'");
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

double probability(std::string_view key, std::string_view text) {
    const double v = as_double(key, text);
    if (v < 0 || v > 1) {
        bad(key, "must be in [0, 1]");
    }
    return v;
}

double positive(std::string_view key, std::string_view text) {
    const double v = as_double(key, text);
    if (!(v > 0)) {
        bad(key, "must be > 0");
    }
    return v;
}

double non_negative(std::string_view key, std::string_view text) {
    const double v = as_double(key, text);
    if (!(v >= 0)) {
        bad(key, "must be ≥ 0");
    }
    return v;
}

template <typename F>
auto enum_value(std::string_view key, std::string_view text, F parse) {
    try {
        return parse(trim(text));
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        bad(key, std::string("has an invalid value: ") + e.what());
    }
}

std::vector<int> int_list(std::string_view key, std::string_view text, long long lo, const char* constraint) {
    std::vector<int> out;
    for (const std::string& item : split_list(text)) {
        out.push_back(as_int(key, item, lo, constraint));
    }
    return out;
}

std::string fmt_ints(const std::vector<int>& v) {
    std::vector<std::string> parts;
    for (int x : v) {
        parts.push_back(std::to_string(x));
    }
    return join(parts);
}

/// Applies a value to the configuration and returns its canonical text.
using Setter = std::function<std::string(ExperimentConfig&, std::string_view key, std::string_view text)>;

struct Entry {
    std::string default_text;
    Setter set;
};

void resize_stages(BackboneConfig& b, std::size_t n, std::string_view key) {
    if (n == 0) {
        bad(key, "must list at least one stage");
    }
    if (b.stages.size() != n) {
        if (key != "backbone.depths") {
            bad(key, "must list one value per stage (" + std::to_string(b.stages.size()) + ")");
        }
        b.stages.resize(n);
    }
    for (std::size_t i = 0; i < n; ++i) {
        b.stages[i].downsample = i > 0;
    }
}

// Keys are applied in sorted order, so stage-list keys see backbone.depths first.
const std::map<std::string, Entry>& schema() {
    static const std::map<std::string, Entry> table = [] {
        std::map<std::string, Entry> t;
        auto add = [&](std::string key, std::string def, Setter s) { t.emplace(std::move(key), Entry{std::move(def), std::move(s)}); };

        add("seed", "0", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            const long long s = as_integer(k, v);
            if (s < 0) {
                bad(k, "must be ≥ 0");
            }
            c.trainer.train.seed = static_cast<std::uint64_t>(s);
            return std::to_string(s);
        });

        // augmentation (output size follows backbone.image_size)
        auto aug_double = [&](const char* key, double AugmentationConfig::*field, std::string def,
                              double (*check)(std::string_view, std::string_view)) {
            add(std::string("augmentation.") + key, def,
                [field, check](ExperimentConfig& c, std::string_view k, std::string_view v) {
                    c.trainer.augmentation.*field = check(k, v);
                    return fmt_double(c.trainer.augmentation.*field);
                });
        };
        aug_double("crop_scale_min", &AugmentationConfig::crop_scale_min, "0.2", positive);
        aug_double("crop_scale_max", &AugmentationConfig::crop_scale_max, "1", probability);
        aug_double("crop_ratio_min", &AugmentationConfig::crop_ratio_min, fmt_double(3.0 / 4.0), positive);
        aug_double("crop_ratio_max", &AugmentationConfig::crop_ratio_max, fmt_double(4.0 / 3.0), positive);
        aug_double("brightness", &AugmentationConfig::brightness, "0.4", non_negative);
        aug_double("contrast", &AugmentationConfig::contrast, "0.4", non_negative);
        aug_double("saturation", &AugmentationConfig::saturation, "0.4", non_negative);
        aug_double("hue", &AugmentationConfig::hue, "0.1", non_negative);
        aug_double("p_gray", &AugmentationConfig::p_gray, "0.2", probability);
        aug_double("p_blur", &AugmentationConfig::p_blur, "0.5", probability);
        aug_double("blur_sigma_min", &AugmentationConfig::blur_sigma_min, "0.1", positive);
        aug_double("blur_sigma_max", &AugmentationConfig::blur_sigma_max, "2", positive);
        aug_double("p_hflip", &AugmentationConfig::p_hflip, "0.5", probability);
        add("augmentation.blur_kernel", "23", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            const int n = as_int(k, v, 1, "must be a positive odd integer");
            if (n % 2 == 0) {
                bad(k, "must be a positive odd integer");
            }
            c.trainer.augmentation.blur_kernel = n;
            return std::to_string(n);
        });

        // backbone
        add("backbone.image_size", "64", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            const int n = as_int(k, v, 1, "must be ≥ 1");
            c.trainer.backbone.image_height = c.trainer.backbone.image_width = n;
            c.trainer.augmentation.out_height = c.trainer.augmentation.out_width = n;
            c.data.synthetic.image_size = n;
            return std::to_string(n);
        });
        add("backbone.patch_size", "8", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.backbone.patch_size = as_int(k, v, 1, "must be ≥ 1");
            return std::to_string(c.trainer.backbone.patch_size);
        });
        add("backbone.depths", "2,2", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            const auto d = int_list(k, v, 0, "entries must be ≥ 0");
            resize_stages(c.trainer.backbone, d.size(), k);
            for (std::size_t i = 0; i < d.size(); ++i) {
                c.trainer.backbone.stages[i].depth = d[i];
            }
            return fmt_ints(d);
        });
        add("backbone.heads", "4,4", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            const auto h = int_list(k, v, 1, "entries must be ≥ 1");
            resize_stages(c.trainer.backbone, h.size(), k);
            for (std::size_t i = 0; i < h.size(); ++i) {
                c.trainer.backbone.stages[i].heads = h[i];
            }
            return fmt_ints(h);
        });
        add("backbone.widths", "64,128", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            const auto w = int_list(k, v, 1, "entries must be ≥ 1");
            resize_stages(c.trainer.backbone, w.size(), k);
            for (std::size_t i = 0; i < w.size(); ++i) {
                c.trainer.backbone.stages[i].width = w[i];
            }
            return fmt_ints(w);
        });
        add("backbone.summary", "max_pool", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.backbone.summary_mode = enum_value(k, v, [](const std::string& s) { return parse_summary_mode(s); });
            return std::string(to_string(c.trainer.backbone.summary_mode));
        });
        add("backbone.mlp_ratio", "4", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.backbone.mlp_ratio = as_int(k, v, 1, "must be ≥ 1");
            return std::to_string(c.trainer.backbone.mlp_ratio);
        });
        add("backbone.attention", "true", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.backbone.attention = as_bool(k, v);
            return fmt_bool(c.trainer.backbone.attention);
        });

        // heads
        add("head.hidden", "256", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.head.hidden = as_int(k, v, 1, "must be ≥ 1");
            return std::to_string(c.trainer.head.hidden);
        });
        add("head.out", "256", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.head.out = as_int(k, v, 1, "must be ≥ 1");
            return std::to_string(c.trainer.head.out);
        });
        add("head.layers", "3", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.head.layers = as_int(k, v, 1, "must be ≥ 1");
            return std::to_string(c.trainer.head.layers);
        });
        add("head.main", "linear", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.main_head = enum_value(k, v, [](const std::string& s) { return parse_main_head(s); });
            return std::string(to_string(c.trainer.main_head));
        });

        // ema
        add("ema.lambda", "0.999", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.ema_momentum = probability(k, v);
            return fmt_double(c.trainer.ema_momentum);
        });
        add("loss.center_momentum", "0.9", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.loss.center_momentum = probability(k, v);
            return fmt_double(c.trainer.loss.center_momentum);
        });

        // loss
        add("loss.alpha", "0.1", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.loss.alpha = non_negative(k, v);
            return fmt_double(c.trainer.loss.alpha);
        });
        add("loss.tasks", "both", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.loss.tasks = enum_value(k, v, [](const std::string& s) { return parse_loss_tasks(s); });
            return std::string(to_string(c.trainer.loss.tasks));
        });
        add("loss.target", "dictionary", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.loss.target = enum_value(k, v, [](const std::string& s) { return parse_aux_target(s); });
            return std::string(to_string(c.trainer.loss.target));
        });
        add("loss.main_task", "multi_label", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.loss.main_task = enum_value(k, v, [](const std::string& s) { return parse_main_task(s); });
            return std::string(to_string(c.trainer.loss.main_task));
        });
        add("loss.tau_teacher", "0.04", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.loss.temperatures.teacher = positive(k, v);
            return fmt_double(c.trainer.loss.temperatures.teacher);
        });
        add("loss.tau_student", "0.1", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.loss.temperatures.student = positive(k, v);
            return fmt_double(c.trainer.loss.temperatures.student);
        });

        // dictionary
        add("dictionary.capacity", "10", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.dictionary.capacity = static_cast<std::size_t>(as_int(k, v, 1, "must be ≥ 1"));
            return std::to_string(c.trainer.dictionary.capacity);
        });
        add("dictionary.strategy", "most_recent", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.dictionary.strategy =
                enum_value(k, v, [](const std::string& s) { return parse_sampling_strategy(s); });
            return std::string(to_string(c.trainer.dictionary.strategy));
        });
        add("dictionary.enqueue_view", "1", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            const int n = as_int(k, v, 1, "must be 1 or 2");
            if (n > 2) {
                bad(k, "must be 1 or 2");
            }
            c.trainer.dictionary.enqueue_view = n;
            return std::to_string(n);
        });
        add("dictionary.scheme", "triple", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.dictionary.scheme = enum_value(k, v, [](const std::string& s) { return parse_concept_scheme(s); });
            return std::string(to_string(c.trainer.dictionary.scheme));
        });

        // train
        add("train.lr", "0.00015", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.train.optimizer.lr = positive(k, v);
            return fmt_double(c.trainer.train.optimizer.lr);
        });
        add("train.beta1", "0.9", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.train.optimizer.beta1 = probability(k, v);
            return fmt_double(c.trainer.train.optimizer.beta1);
        });
        add("train.beta2", "0.999", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.train.optimizer.beta2 = probability(k, v);
            return fmt_double(c.trainer.train.optimizer.beta2);
        });
        add("train.eps", "1e-05", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.train.optimizer.eps = positive(k, v);
            return fmt_double(c.trainer.train.optimizer.eps);
        });
        add("train.weight_decay", "0.05", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.train.optimizer.weight_decay = non_negative(k, v);
            return fmt_double(c.trainer.train.optimizer.weight_decay);
        });
        add("train.milestones", "", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.train.milestones = int_list(k, v, 1, "entries must be ≥ 1");
            return fmt_ints(c.trainer.train.milestones);
        });
        add("train.lr_factor", "0.1", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.train.lr_factor = positive(k, v);
            return fmt_double(c.trainer.train.lr_factor);
        });
        add("train.grad_clip_norm", "none", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            if (trim(v) == "none" || trim(v).empty()) {
                c.trainer.train.grad_clip_norm.reset();
                return std::string("none");
            }
            c.trainer.train.grad_clip_norm = positive(k, v);
            return fmt_double(*c.trainer.train.grad_clip_norm);
        });
        add("train.batch_size", "32", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.train.batch_size = as_int(k, v, 1, "must be ≥ 1");
            return std::to_string(c.trainer.train.batch_size);
        });
        add("train.epochs", "30", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.trainer.train.epochs = as_int(k, v, 1, "must be ≥ 1");
            return std::to_string(c.trainer.train.epochs);
        });

        // data
        add("data.dir", "", [](ExperimentConfig& c, std::string_view, std::string_view v) {
            c.data.dir = trim(v);
            return c.data.dir;
        });
        add("data.samples", "5000", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.data.samples = as_int(k, v, 1, "must be ≥ 1");
            return std::to_string(c.data.samples);
        });
        add("data.seed", "7", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            const long long s = as_integer(k, v);
            if (s < 0) {
                bad(k, "must be ≥ 0");
            }
            c.data.seed = static_cast<std::uint64_t>(s);
            return std::to_string(s);
        });
        add("data.grid", "3", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.data.synthetic.grid = as_int(k, v, 2, "must be ≥ 2");
            return std::to_string(c.data.synthetic.grid);
        });
        add("data.p_third_object", "0.25", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.data.synthetic.p_third_object = probability(k, v);
            return fmt_double(c.data.synthetic.p_third_object);
        });
        add("data.test_fraction", "0.2", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.data.synthetic.test_fraction = probability(k, v);
            return fmt_double(c.data.synthetic.test_fraction);
        });

        // split
        add("split.kind", "held_out_combinations", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.split.kind = enum_value(k, v, [](const std::string& s) { return parse_split_kind(s); });
            return std::string(to_string(c.split.kind));
        });
        add("split.held_out", "", [](ExperimentConfig& c, std::string_view, std::string_view v) {
            c.split.held_out.clear();
            std::vector<std::string> parts = split_list(v);
            std::sort(parts.begin(), parts.end());
            parts.erase(std::unique(parts.begin(), parts.end()), parts.end());
            for (const std::string& p : parts) {
                c.split.held_out.emplace_back(p);
            }
            return join(parts);
        });
        add("split.regime", "easy", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            const std::string t = trim(v);
            if (t != "easy" && t != "hard") {
                bad(k, "must be one of {easy, hard}, got '" + t + "'");
            }
            c.split.regime = t == "easy" ? HeldOutRegime::easy : HeldOutRegime::hard;
            return t;
        });
        add("split.count", "6", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.split.count = as_int(k, v, 0, "must be ≥ 0");
            return std::to_string(c.split.count);
        });
        add("split.threshold", "1000000", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.split.threshold = as_int(k, v, 0, "must be ≥ 0");
            return std::to_string(c.split.threshold);
        });
        add("split.max_hops", "4", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.split.max_hops = as_int(k, v, 1, "must be ≥ 1");
            return std::to_string(c.split.max_hops);
        });
        add("split.file", "", [](ExperimentConfig& c, std::string_view, std::string_view v) {
            c.split.file = trim(v);
            return c.split.file;
        });

        // eval
        add("eval.top_k", "10", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.eval.top_k = as_int(k, v, 1, "must be ≥ 1");
            return std::to_string(c.eval.top_k);
        });
        add("eval.log_steps", "true", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.eval.log_steps = as_bool(k, v);
            return fmt_bool(c.eval.log_steps);
        });
        return t;
    }();
    return table;
}

void flatten(const YAML::Node& node, const std::string& prefix, std::map<std::string, std::string>& out) {
    if (node.IsMap()) {
        for (const auto& kv : node) {
            const std::string key = kv.first.as<std::string>();
            flatten(kv.second, prefix.empty() ? key : prefix + "." + key, out);
        }
        return;
    }
    if (prefix.empty()) {
        throw ConfigError("config document must be a mapping of keys to values");
    }
    std::string text;
    if (node.IsSequence()) {
        std::vector<std::string> parts;
        for (const auto& item : node) {
            if (!item.IsScalar()) {
                bad(prefix, "must be a list of scalars");
            }
            parts.push_back(item.as<std::string>());
        }
        text = join(parts);
    } else if (node.IsScalar()) {
        text = node.as<std::string>();
    } else if (node.IsNull()) {
        text = "";
    }
    if (!out.emplace(prefix, text).second) {
        bad(prefix, "is given more than once");
    }
}

std::string yaml_quote(const std::string& s) {
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"' || ch == '\\') {
            out += '\\';
        }
        out += ch;
    }
    return out + "\"";
}

} // namespace

const std::map<std::string, std::string>& config_defaults() {
    static const std::map<std::string, std::string> defaults = [] {
        std::map<std::string, std::string> d;
        for (const auto& [k, e] : schema()) {
            d[k] = e.default_text;
        }
        return d;
    }();
    return defaults;
}

ExperimentConfig config_from_values(const std::map<std::string, std::string>& overrides) {
    for (const auto& [k, v] : overrides) {
        if (!schema().contains(k)) {
            throw ConfigError("unknown config key '" + k + "'");
        }
    }
    ExperimentConfig c;
    for (const auto& [key, entry] : schema()) {
        const auto it = overrides.find(key);
        c.values[key] = entry.set(c, key, it != overrides.end() ? it->second : entry.default_text);
    }
    c.trainer.validate();
    return c;
}

ExperimentConfig with_overrides(const ExperimentConfig& base, const std::map<std::string, std::string>& overrides) {
    std::map<std::string, std::string> merged = base.values;
    for (const auto& [k, v] : overrides) {
        merged[k] = v;
    }
    return config_from_values(merged);
}

ExperimentConfig parse_config(std::string_view yaml) {
    YAML::Node root;
    try {
        root = YAML::Load(std::string(yaml));
    } catch (const YAML::Exception& e) {
        throw ConfigError(std::string("config is not valid YAML: ") + e.what());
    }
    std::map<std::string, std::string> flat;
    if (root.IsDefined() && !root.IsNull()) {
        if (!root.IsMap()) {
            throw ConfigError("config document must be a mapping of keys to values");
        }
        flatten(root, "", flat);
    }
    return config_from_values(flat);
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw ConfigError("cannot read config file " + path.string());
    }
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

std::string ExperimentConfig::hash() const {
    std::string canon;
    for (const auto& [k, v] : values) {
        canon += k + "=" + v + "\n";
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canon)));
    return buf;
}

std::string ExperimentConfig::to_yaml() const {
    std::string out;
    for (const auto& [k, v] : values) {
        out += k + ": " + yaml_quote(v) + "\n";
    }
    return out;
}

} // namespace relvit
