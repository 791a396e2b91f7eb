#include "relvit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "relvit/errors.hpp"
#include "relvit/rng.hpp"
#include "relvit/serialize.hpp"

namespace relvit {

namespace {

using json = nlohmann::json;

constexpr std::array<std::array<double, 3>, 6> kColors{{
    {0.85, 0.15, 0.15},
    {0.15, 0.70, 0.20},
    {0.15, 0.30, 0.85},
    {0.90, 0.80, 0.10},
    {0.60, 0.20, 0.75},
    {0.95, 0.50, 0.10},
}};
constexpr double kBackground = 0.92;
constexpr std::string_view kImageMagic = "RVIM";

bool inside(ShapeKind shape, double dx, double dy, double r) {
    switch (shape) {
    case ShapeKind::circle: return dx * dx + dy * dy <= r * r;
    case ShapeKind::square: return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    case ShapeKind::triangle: return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) / 2.0;
    case ShapeKind::cross:
        return (std::abs(dx) <= r && std::abs(dy) <= 0.3 * r) || (std::abs(dy) <= r && std::abs(dx) <= 0.3 * r);
    }
    return false;
}

template <std::size_t N>
int index_of(const std::array<std::string_view, N>& names, std::string_view s, const char* what) {
    for (std::size_t i = 0; i < N; ++i) {
        if (names[i] == s) {
            return static_cast<int>(i);
        }
    }
    throw DataError(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

std::vector<ConceptId> concepts_of(const SceneSpec& scene) {
    std::set<ConceptId> out;
    for (const Relation& r : scene.relations) {
        out.insert(relation_concept(scene.objects[static_cast<std::size_t>(r.subject)].shape, r.predicate,
                                    scene.objects[static_cast<std::size_t>(r.object)].shape));
    }
    return {out.begin(), out.end()};
}

// Objects realizing one target triple, plus an optional distractor.
SceneSpec construct_scene(ShapeKind subject, Predicate p, ShapeKind object, const SyntheticConfig& cfg, Rng& rng) {
    const int g = cfg.grid;
    SceneObject a{subject, static_cast<int>(rng.uniform_index(kColors.size())), 0, 0, rng.bernoulli(0.5)};
    SceneObject b{object, static_cast<int>(rng.uniform_index(kColors.size())), 0, 0, rng.bernoulli(0.5)};
    auto cell = [&] { return static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(g))); };
    auto ordered_pair = [&](int& lo, int& hi) {
        lo = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(g - 1)));
        hi = lo + 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(g - 1 - lo)));
    };
    switch (p) {
    case Predicate::left_of:
        ordered_pair(a.col, b.col);
        a.row = cell();
        b.row = cell();
        break;
    case Predicate::above:
        ordered_pair(a.row, b.row);
        a.col = cell();
        b.col = cell();
        break;
    case Predicate::same_color:
    case Predicate::larger:
        do {
            a.row = cell();
            a.col = cell();
            b.row = cell();
            b.col = cell();
        } while (a.row == b.row && a.col == b.col);
        if (p == Predicate::same_color) {
            b.color = a.color;
        } else {
            a.large = true;
            b.large = false;
        }
        break;
    }
    SceneSpec scene;
    scene.objects = {a, b};
    if (rng.bernoulli(cfg.p_third_object) && g * g > 2) {
        SceneObject c{static_cast<ShapeKind>(rng.uniform_index(4)), static_cast<int>(rng.uniform_index(kColors.size())),
                      0, 0, rng.bernoulli(0.5)};
        do {
            c.row = cell();
            c.col = cell();
        } while ((c.row == a.row && c.col == a.col) || (c.row == b.row && c.col == b.col));
        scene.objects.push_back(c);
    }
    scene.relations = derive_relations(scene.objects);
    return scene;
}

} // namespace

int Dataset::label_index(const ConceptId& c) const {
    auto it = std::lower_bound(inventory.begin(), inventory.end(), c);
    if (it != inventory.end() && *it == c) {
        return static_cast<int>(it - inventory.begin());
    }
    return -1;
}

ConceptId relation_concept(ShapeKind subject, Predicate p, ShapeKind object) {
    return ConceptId(std::string(kShapeNames[static_cast<std::size_t>(subject)]) + ":" +
                     std::string(kPredicateNames[static_cast<std::size_t>(p)]) + ":" +
                     std::string(kShapeNames[static_cast<std::size_t>(object)]));
}

std::vector<ConceptId> relation_inventory() {
    std::vector<ConceptId> out;
    for (std::size_t s = 0; s < 4; ++s) {
        for (std::size_t p = 0; p < 4; ++p) {
            for (std::size_t o = 0; o < 4; ++o) {
                out.push_back(relation_concept(static_cast<ShapeKind>(s), static_cast<Predicate>(p),
                                               static_cast<ShapeKind>(o)));
            }
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<Relation> derive_relations(const std::vector<SceneObject>& objects) {
    std::vector<Relation> out;
    for (std::size_t i = 0; i < objects.size(); ++i) {
        for (std::size_t j = 0; j < objects.size(); ++j) {
            if (i == j) {
                continue;
            }
            const SceneObject& a = objects[i];
            const SceneObject& b = objects[j];
            const int s = static_cast<int>(i);
            const int o = static_cast<int>(j);
            if (a.col < b.col) {
                out.push_back({s, Predicate::left_of, o});
            }
            if (a.row < b.row) {
                out.push_back({s, Predicate::above, o});
            }
            if (a.color == b.color) {
                out.push_back({s, Predicate::same_color, o});
            }
            if (a.large && !b.large) {
                out.push_back({s, Predicate::larger, o});
            }
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

Image render_scene(const SceneSpec& scene, const SyntheticConfig& cfg) {
    const int size = cfg.image_size;
    const double cell = static_cast<double>(size) / cfg.grid;
    Image img(size, size, 3, kBackground);
    constexpr int kSuper = 4;
    for (const SceneObject& obj : scene.objects) {
        const double cx = (obj.col + 0.5) * cell;
        const double cy = (obj.row + 0.5) * cell;
        const double r = (obj.large ? 0.42 : 0.26) * cell;
        const int y0 = std::max(0, static_cast<int>(std::floor(cy - r)) - 1);
        const int y1 = std::min(size - 1, static_cast<int>(std::ceil(cy + r)) + 1);
        const int x0 = std::max(0, static_cast<int>(std::floor(cx - r)) - 1);
        const int x1 = std::min(size - 1, static_cast<int>(std::ceil(cx + r)) + 1);
        const auto& rgb = kColors[static_cast<std::size_t>(obj.color)];
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                int hits = 0;
                for (int sy = 0; sy < kSuper; ++sy) {
                    for (int sx = 0; sx < kSuper; ++sx) {
                        const double px = x + (sx + 0.5) / kSuper;
                        const double py = y + (sy + 0.5) / kSuper;
                        hits += inside(obj.shape, px - cx, py - cy, r) ? 1 : 0;
                    }
                }
                if (hits == 0) {
                    continue;
                }
                const double cover = static_cast<double>(hits) / (kSuper * kSuper);
                for (int c = 0; c < 3; ++c) {
                    img.at(y, x, c) = (1.0 - cover) * img.at(y, x, c) + cover * rgb[static_cast<std::size_t>(c)];
                }
            }
        }
    }
    for (double& v : img.data) {
        v = std::round(v * 255.0) / 255.0;
    }
    return img;
}

std::optional<AnnotatedSample> make_sample(int id, SceneSpec scene, const SyntheticConfig& cfg,
                                           const std::vector<ConceptId>& inventory, Partition partition) {
    scene.relations = derive_relations(scene.objects);
    std::vector<ConceptId> concepts = concepts_of(scene);
    if (concepts.empty()) {
        return std::nullopt;
    }
    AnnotatedSample s;
    s.id = id;
    s.image = render_scene(scene, cfg);
    s.labels = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(inventory.size()));
    for (const ConceptId& c : concepts) {
        auto it = std::lower_bound(inventory.begin(), inventory.end(), c);
        if (it == inventory.end() || !(*it == c)) {
            throw DataError("concept '" + c.str() + "' missing from the inventory");
        }
        s.labels(it - inventory.begin()) = 1.0;
    }
    s.concepts = std::move(concepts);
    s.scene = std::move(scene);
    s.primary = s.concepts.front();
    s.partition = partition;
    return s;
}

Dataset generate_dataset(int n_samples, std::uint64_t seed, const SyntheticConfig& cfg) {
    if (n_samples < 1) {
        throw DomainError("generate_dataset: n_samples must be >= 1");
    }
    if (cfg.grid < 2 || cfg.image_size < cfg.grid || cfg.test_fraction < 0.0 || cfg.test_fraction >= 1.0) {
        throw DomainError("generate_dataset: invalid synthetic config");
    }
    Dataset d;
    d.config = cfg;
    d.seed = seed;
    d.inventory = relation_inventory();
    const std::size_t m = d.inventory.size();

    // Primary relations cycle through freshly shuffled inventory permutations.
    std::vector<std::size_t> order(m);
    for (int i = 0; i < n_samples; ++i) {
        const std::size_t slot = static_cast<std::size_t>(i) % m;
        if (slot == 0) {
            Rng perm(derive_seed(seed, static_cast<std::uint64_t>(i) / m, 0x5eed));
            for (std::size_t k = 0; k < m; ++k) {
                order[k] = k;
            }
            for (std::size_t k = m; k > 1; --k) {
                std::swap(order[k - 1], order[perm.uniform_index(k)]);
            }
        }
        const std::size_t target = order[slot];
        const auto subject = static_cast<ShapeKind>(target / 16);
        const auto predicate = static_cast<Predicate>((target / 4) % 4);
        const auto object = static_cast<ShapeKind>(target % 4);

        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i), 0));
        const Partition part = rng.bernoulli(cfg.test_fraction) ? Partition::test : Partition::train;
        for (;;) {
            auto sample = make_sample(i, construct_scene(subject, predicate, object, cfg, rng), cfg, d.inventory, part);
            if (sample) {
                sample->primary = relation_concept(subject, predicate, object);
                d.samples.push_back(std::move(*sample));
                break;
            }
        }
    }
    return d;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    std::ofstream manifest(dir / "manifest.jsonl");
    if (!manifest) {
        throw DataError("cannot write " + (dir / "manifest.jsonl").string());
    }
    json header = {{"schema_version", 1},
                   {"seed", dataset.seed},
                   {"image_size", dataset.config.image_size},
                   {"grid", dataset.config.grid},
                   {"p_third_object", dataset.config.p_third_object},
                   {"test_fraction", dataset.config.test_fraction},
                   {"inventory", json::array()}};
    for (const ConceptId& c : dataset.inventory) {
        header["inventory"].push_back(c.str());
    }
    manifest << header.dump() << '\n';
    BinaryWriter images;
    images.bytes(kImageMagic);
    images.u32(1);
    images.u64(dataset.samples.size());
    for (const AnnotatedSample& s : dataset.samples) {
        json rec = {{"id", s.id},
                    {"partition", s.partition == Partition::train ? "train" : "test"},
                    {"primary", s.primary.str()},
                    {"answer", s.answer}};
        rec["concepts"] = json::array();
        for (const ConceptId& c : s.concepts) {
            rec["concepts"].push_back(c.str());
        }
        rec["labels"] = json::array();
        for (Eigen::Index k = 0; k < s.labels.size(); ++k) {
            rec["labels"].push_back(static_cast<int>(s.labels(k)));
        }
        json objects = json::array();
        for (const SceneObject& o : s.scene.objects) {
            objects.push_back({{"shape", kShapeNames[static_cast<std::size_t>(o.shape)]},
                               {"color", kColorNames[static_cast<std::size_t>(o.color)]},
                               {"row", o.row},
                               {"col", o.col},
                               {"large", o.large}});
        }
        json relations = json::array();
        for (const Relation& r : s.scene.relations) {
            relations.push_back({r.subject, kPredicateNames[static_cast<std::size_t>(r.predicate)], r.object});
        }
        rec["scene"] = {{"objects", objects}, {"relations", relations}};
        manifest << rec.dump() << '\n';

        images.u32(static_cast<std::uint32_t>(s.image.height));
        images.u32(static_cast<std::uint32_t>(s.image.width));
        images.u32(static_cast<std::uint32_t>(s.image.channels));
        for (double v : s.image.data) {
            images.u8(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
        }
    }
    std::ofstream archive(dir / "images.bin", std::ios::binary);
    archive.write(images.buffer().data(), static_cast<std::streamsize>(images.buffer().size()));
    if (!archive || !manifest) {
        throw DataError("failed writing dataset to " + dir.string());
    }
}

Dataset read_dataset(const std::filesystem::path& dir) {
    std::ifstream manifest(dir / "manifest.jsonl");
    std::ifstream archive(dir / "images.bin", std::ios::binary);
    if (!manifest || !archive) {
        throw DataError("dataset not found in " + dir.string());
    }
    std::string blob((std::istreambuf_iterator<char>(archive)), std::istreambuf_iterator<char>());
    Dataset d;
    try {
        std::string line;
        std::getline(manifest, line);
        const json header = json::parse(line);
        d.seed = header.at("seed").get<std::uint64_t>();
        d.config.image_size = header.at("image_size").get<int>();
        d.config.grid = header.at("grid").get<int>();
        d.config.p_third_object = header.at("p_third_object").get<double>();
        d.config.test_fraction = header.at("test_fraction").get<double>();
        for (const auto& c : header.at("inventory")) {
            d.inventory.emplace_back(c.get<std::string>());
        }
        BinaryReader images(blob);
        if (images.bytes(kImageMagic.size()) != kImageMagic || images.u32() != 1) {
            throw DataError("images.bin: bad header");
        }
        const std::uint64_t count = images.u64();
        while (std::getline(manifest, line)) {
            if (line.empty()) {
                continue;
            }
            const json rec = json::parse(line);
            AnnotatedSample s;
            s.id = rec.at("id").get<int>();
            s.partition = rec.at("partition").get<std::string>() == "test" ? Partition::test : Partition::train;
            s.primary = ConceptId(rec.at("primary").get<std::string>());
            s.answer = rec.at("answer").get<int>();
            for (const auto& c : rec.at("concepts")) {
                s.concepts.emplace_back(c.get<std::string>());
            }
            const auto& labels = rec.at("labels");
            s.labels.resize(static_cast<Eigen::Index>(labels.size()));
            for (std::size_t k = 0; k < labels.size(); ++k) {
                s.labels(static_cast<Eigen::Index>(k)) = labels[k].get<double>();
            }
            for (const auto& o : rec.at("scene").at("objects")) {
                SceneObject obj;
                obj.shape = static_cast<ShapeKind>(index_of(kShapeNames, o.at("shape").get<std::string>(), "shape"));
                obj.color = index_of(kColorNames, o.at("color").get<std::string>(), "color");
                obj.row = o.at("row").get<int>();
                obj.col = o.at("col").get<int>();
                obj.large = o.at("large").get<bool>();
                s.scene.objects.push_back(obj);
            }
            for (const auto& r : rec.at("scene").at("relations")) {
                s.scene.relations.push_back(
                    {r.at(0).get<int>(),
                     static_cast<Predicate>(index_of(kPredicateNames, r.at(1).get<std::string>(), "predicate")),
                     r.at(2).get<int>()});
            }
            const int h = static_cast<int>(images.u32());
            const int w = static_cast<int>(images.u32());
            const int c = static_cast<int>(images.u32());
            s.image = Image(h, w, c);
            const std::string_view px = images.bytes(s.image.data.size());
            for (std::size_t k = 0; k < px.size(); ++k) {
                s.image.data[k] = static_cast<unsigned char>(px[k]) / 255.0;
            }
            d.samples.push_back(std::move(s));
        }
        if (d.samples.size() != count) {
            throw DataError("manifest/archive sample counts differ");
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed manifest: ") + e.what());
    } catch (const LoadError& e) {
        throw DataError(std::string("malformed image archive: ") + e.what());
    }
    return d;
}

std::vector<std::pair<ConceptId, int>> ConceptStats::top(std::size_t k) const {
    std::vector<std::pair<ConceptId, int>> v(counts.begin(), counts.end());
    std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    if (v.size() > k) {
        v.resize(k);
    }
    return v;
}

ConceptStats concept_stats(const std::vector<std::vector<ConceptId>>& sample_concepts,
                           const std::vector<ConceptId>& inventory) {
    ConceptStats st;
    for (const ConceptId& c : inventory) {
        st.counts.emplace(c, 0);
    }
    for (const auto& concepts : sample_concepts) {
        std::set<ConceptId> unique(concepts.begin(), concepts.end());
        st.concepts_per_sample[static_cast<int>(unique.size())] += 1;
        if (unique.empty()) {
            ++st.samples_without_concept;
        }
        for (const ConceptId& c : unique) {
            st.counts[c] += 1;
        }
    }
    std::vector<int> values;
    for (const auto& [c, n] : st.counts) {
        values.push_back(n);
        st.without_samples += n == 0 ? 1 : 0;
        st.below_ten += n < 10 ? 1 : 0;
    }
    if (!values.empty()) {
        double total = 0.0;
        for (int v : values) {
            total += v;
        }
        st.mean = total / static_cast<double>(values.size());
        std::sort(values.begin(), values.end());
        const std::size_t mid = values.size() / 2;
        st.median = values.size() % 2 == 1 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
    }
    return st;
}

ConceptStats concept_stats(const Dataset& dataset) {
    std::vector<std::vector<ConceptId>> concepts;
    concepts.reserve(dataset.samples.size());
    for (const AnnotatedSample& s : dataset.samples) {
        concepts.push_back(s.concepts);
    }
    return concept_stats(concepts, dataset.inventory);
}

} // namespace relvit
