#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>

#include "relvit/concept_parsing.hpp"
#include "relvit/dataset.hpp"
#include "relvit/errors.hpp"
#include "relvit/splits.hpp"
#include "support.hpp"

using namespace relvit;

namespace {

std::vector<ConceptId> ids(std::initializer_list<const char*> names) {
    std::vector<ConceptId> out;
    for (const char* n : names) {
        out.emplace_back(n);
    }
    return out;
}

std::vector<std::vector<ConceptId>> concepts_of(const Dataset& d) {
    std::vector<std::vector<ConceptId>> out;
    for (const auto& s : d.samples) {
        out.push_back(s.concepts);
    }
    return out;
}

std::vector<Partition> partitions_of(const Dataset& d) {
    std::vector<Partition> out;
    for (const auto& s : d.samples) {
        out.push_back(s.partition);
    }
    return out;
}

// Recount oracle: which source-training samples survive a held-out set.
std::vector<int> expected_train(const Dataset& d, const std::set<ConceptId>& held) {
    std::vector<int> out;
    for (std::size_t i = 0; i < d.samples.size(); ++i) {
        const auto& s = d.samples[i];
        if (s.partition != Partition::train) {
            continue;
        }
        const bool hit = std::any_of(s.concepts.begin(), s.concepts.end(),
                                     [&](const ConceptId& c) { return held.contains(c); });
        if (!hit) {
            out.push_back(static_cast<int>(i));
        }
    }
    return out;
}

const SyntheticConfig kSmall{16, 3, 0.25, 0.2};

} // namespace

TEST_CASE("generate_dataset is deterministic and covers the inventory") {
    const Dataset a = generate_dataset(128, 4, kSmall);
    const Dataset b = generate_dataset(128, 4, kSmall);
    REQUIRE(a.samples.size() == 128);
    CHECK(a.inventory.size() == 64);
    CHECK(std::is_sorted(a.inventory.begin(), a.inventory.end()));
    std::set<ConceptId> primaries;
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        CHECK(a.samples[i].image.data == b.samples[i].image.data);
        CHECK(a.samples[i].concepts == b.samples[i].concepts);
        CHECK(a.samples[i].partition == b.samples[i].partition);
        primaries.insert(a.samples[i].primary);
    }
    CHECK(primaries.size() == 64);
    const Dataset c = generate_dataset(128, 5, kSmall);
    int differ = 0;
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        differ += a.samples[i].image.data != c.samples[i].image.data ? 1 : 0;
    }
    CHECK(differ > 100);
    CHECK_THROWS_AS(generate_dataset(0, 1, kSmall), DomainError);
}

TEST_CASE("labels agree with scene geometry") {
    const Dataset d = generate_dataset(200, 9, {24, 3, 0.5, 0.2});
    for (const auto& s : d.samples) {
        const auto& objs = s.scene.objects;
        std::set<ConceptId> expected;
        for (std::size_t i = 0; i < objs.size(); ++i) {
            for (std::size_t j = 0; j < objs.size(); ++j) {
                if (i == j) {
                    continue;
                }
                const auto& a = objs[i];
                const auto& b = objs[j];
                CHECK_FALSE((a.row == b.row && a.col == b.col));
                if (a.col < b.col) {
                    expected.insert(relation_concept(a.shape, Predicate::left_of, b.shape));
                }
                if (a.row < b.row) {
                    expected.insert(relation_concept(a.shape, Predicate::above, b.shape));
                }
                if (a.color == b.color) {
                    expected.insert(relation_concept(a.shape, Predicate::same_color, b.shape));
                }
                if (a.large && !b.large) {
                    expected.insert(relation_concept(a.shape, Predicate::larger, b.shape));
                }
            }
        }
        CHECK(std::vector<ConceptId>(expected.begin(), expected.end()) == s.concepts);
        CHECK(std::find(s.concepts.begin(), s.concepts.end(), s.primary) != s.concepts.end());
        for (std::size_t k = 0; k < d.inventory.size(); ++k) {
            const bool present = std::binary_search(s.concepts.begin(), s.concepts.end(), d.inventory[k]);
            CHECK(s.labels(static_cast<Eigen::Index>(k)) == (present ? 1.0 : 0.0));
        }
        CHECK(s.image.height == 24);
        CHECK(s.answer == -1);
    }
}

TEST_CASE("every object is visible at its cell centre") {
    const SyntheticConfig cfg{30, 3, 0.0, 0.0};
    for (int shape = 0; shape < 4; ++shape) {
        for (bool large : {false, true}) {
            SceneSpec scene;
            scene.objects = {{static_cast<ShapeKind>(shape), 2, 1, 1, large}};
            const Image img = render_scene(scene, cfg);
            const double cell = 30.0 / 3.0;
            const int cx = static_cast<int>(1.5 * cell);
            CHECK(img.at(cx, cx, 2) > img.at(cx, cx, 0));  // blue dominates
            CHECK(img.at(0, 0, 0) == doctest::Approx(std::round(0.92 * 255.0) / 255.0));
        }
    }
}

TEST_CASE("make_sample rejects scenes without relations") {
    const auto inv = relation_inventory();
    SceneSpec single;
    single.objects = {{ShapeKind::circle, 0, 0, 0, false}};
    CHECK_FALSE(make_sample(0, single, kSmall, inv, Partition::train).has_value());

    // Same row and column ordering, different colours, equal size: no relation holds.
    SceneSpec twin;
    twin.objects = {{ShapeKind::circle, 0, 0, 0, false}, {ShapeKind::square, 1, 0, 0, false}};
    CHECK_FALSE(make_sample(0, twin, kSmall, inv, Partition::train).has_value());

    SceneSpec pair;
    pair.objects = {{ShapeKind::circle, 0, 0, 0, true}, {ShapeKind::square, 1, 0, 2, false}};
    const auto s = make_sample(3, pair, kSmall, inv, Partition::test);
    REQUIRE(s.has_value());
    CHECK(s->concepts == ids({"circle:larger:square", "circle:left-of:square"}));
    CHECK(s->partition == Partition::test);
    CHECK(s->labels.sum() == 2.0);
}

TEST_CASE("systematic split: empty held-out set is the original split") {
    const Dataset d = generate_dataset(160, 2, kSmall);
    const Split s = build_systematic_split(d, {});
    CHECK(s.spec.kind == SplitKind::original);
    CHECK(s.excluded.empty());
    CHECK(s.train == expected_train(d, {}));
}

TEST_CASE("systematic split matches a recount and keeps atoms covered") {
    const Dataset d = generate_dataset(640, 3, kSmall);
    const auto held = ids({"circle:above:square", "cross:larger:triangle", "square:same-color:circle"});
    const Split s = build_systematic_split(d, held);
    CHECK(s.spec.kind == SplitKind::held_out_combinations);
    CHECK(s.train == expected_train(d, {held.begin(), held.end()}));

    std::set<int> seen;
    for (int i : s.train) {
        CHECK(seen.insert(i).second);
    }
    for (int i : s.test) {
        CHECK(seen.insert(i).second);
        CHECK(d.samples[static_cast<std::size_t>(i)].partition == Partition::test);
    }
    for (int i : s.excluded) {
        CHECK(seen.insert(i).second);
    }
    CHECK(seen.size() == d.samples.size());
    CHECK(s.excluded.size() > 0);

    std::set<std::string> atoms;
    for (int i : s.train) {
        for (const ConceptId& c : d.samples[static_cast<std::size_t>(i)].concepts) {
            CHECK(std::find(held.begin(), held.end(), c) == held.end());
            for (const auto& a : atoms_of(c)) {
                atoms.insert(a);
            }
        }
    }
    for (const ConceptId& c : d.inventory) {
        for (const auto& a : atoms_of(c)) {
            CHECK(atoms.contains(a));
        }
    }
}

TEST_CASE("systematic split errors") {
    const Dataset d = generate_dataset(160, 2, kSmall);
    std::vector<ConceptId> all_above;
    for (const ConceptId& c : d.inventory) {
        if (atoms_of(c)[1] == "above") {
            all_above.push_back(c);
        }
    }
    REQUIRE(all_above.size() == 16);
    CHECK_THROWS_WITH_AS(build_systematic_split(d, all_above), doctest::Contains("atom 'above' uncovered"),
                         DataError);
    CHECK_THROWS_AS(build_systematic_split(d, ids({"dog:ride:horse"})), DataError);
    CHECK_THROWS_AS(build_systematic_split(d, d.inventory), DataError);

    const auto concepts = concepts_of(d);
    const auto parts = partitions_of(d);
    CHECK_THROWS_AS(build_systematic_split(concepts, std::span(parts).first(10), d.inventory, {}), DomainError);
}

TEST_CASE("atoms_of") {
    CHECK(atoms_of(ConceptId("circle:above:square")) == std::vector<std::string>{"circle", "above", "square"});
    CHECK(atoms_of(ConceptId("ride:bicycle")) == std::vector<std::string>{"ride", "bicycle"});
    CHECK(atoms_of(ConceptId("man")) == std::vector<std::string>{"man"});
}

TEST_CASE("select_held_out respects regime and coverage") {
    const Dataset d = generate_dataset(640, 8, kSmall);
    const auto stats = concept_stats(d);
    const auto easy = select_held_out(d, HeldOutRegime::easy, 6, 1 << 30);
    REQUIRE(easy.size() == 6);
    CHECK_NOTHROW(build_systematic_split(d, easy));
    const auto hard = select_held_out(d, HeldOutRegime::hard, 6, 0);
    REQUIRE(hard.size() == 6);
    CHECK_NOTHROW(build_systematic_split(d, hard));
    const auto train_count = [&](const ConceptId& c) {
        int n = 0;
        for (const auto& s : d.samples) {
            n += s.partition == Partition::train && std::binary_search(s.concepts.begin(), s.concepts.end(), c);
        }
        return n;
    };
    int easy_total = 0;
    int hard_total = 0;
    for (std::size_t i = 0; i < 6; ++i) {
        easy_total += train_count(easy[i]);
        hard_total += train_count(hard[i]);
    }
    CHECK(easy_total < hard_total);
    CHECK(stats.counts.size() == 64);
}

TEST_CASE("count_hops on reference programs") {
    CHECK(count_hops("relate([0], pizza, with, s(1130674)); filter([1], pizza); verify([2], covered); "
                     "verify_size([2], small); and([3,4]);") == 5);
    CHECK(count_hops("select([], dreser); exist([0], ?); select([], tablecloth); exist([2], ?); or([1, 3], ?);") ==
          5);
    CHECK(count_hops("select([], window); relate([0], appliance, near, s(1297947)) "
                     "relate([1], microwave, right, s(1297947)); exist([2], ?);") == 4);
    CHECK(count_hops("") == 0);
    CHECK(count_hops("  ;  ") == 0);

    const SemanticsProgram p = parse_semantics("relate([0], pizza, with, s(1130674)); filter([1], pizza);");
    REQUIRE(p.steps.size() == 2);
    CHECK(p.steps[0].name == "relate");
    CHECK(p.steps[0].arguments == std::vector<std::string>{"[0]", "pizza", "with", "s(1130674)"});
    CHECK(p.steps[1].arguments == std::vector<std::string>{"[1]", "pizza"});
}

TEST_CASE("count_hops is additive under concatenation") {
    const std::vector<std::string> pieces{"select([], a);", "exist([0], ?);", "relate([1], b, near, s(3));",
                                          "and([0,1]);", "filter([2], red)"};
    Rng rng(12);
    for (int trial = 0; trial < 200; ++trial) {
        std::string a;
        std::string b;
        int na = static_cast<int>(rng.uniform_index(4));
        int nb = static_cast<int>(rng.uniform_index(4));
        for (int i = 0; i < na; ++i) {
            a += pieces[rng.uniform_index(pieces.size())] + " ";
        }
        for (int i = 0; i < nb; ++i) {
            b += pieces[rng.uniform_index(pieces.size())] + " ";
        }
        // A trailing call without ';' still separates by whitespace.
        CHECK(count_hops(a + " " + b) == count_hops(a) + count_hops(b));
        CHECK(count_hops(a) == na);
    }
}

TEST_CASE("malformed semantics raise ParseError with a position") {
    CHECK_THROWS_WITH_AS(count_hops("select([], a; exist([0], ?);"), doctest::Contains("position"), ParseError);
    CHECK_THROWS_AS(count_hops("select([], a));"), ParseError);
    CHECK_THROWS_AS(count_hops("select[0]);"), ParseError);
}

TEST_CASE("hop split") {
    const std::string five = "select([], a); exist([0], ?); select([], b); exist([2], ?); or([1, 3], ?);";
    const std::string four = "select([], w); relate([0], x, near, s(1)); relate([1], y, right, s(1)); exist([2], ?);";
    std::vector<QuestionRecord> qs{
        {"q0", five, std::nullopt, Partition::train},
        {"q1", four, std::nullopt, Partition::train},
        {"q2", std::nullopt, 6, Partition::train},
        {"q3", std::nullopt, 2, Partition::train},
        {"q4", five, std::nullopt, Partition::test},
    };
    const Split s = build_hop_split(qs, 4);
    CHECK(s.spec.kind == SplitKind::hop_ceiling);
    CHECK(s.train == std::vector<int>{1, 3});
    CHECK(s.excluded == std::vector<int>{0, 2});
    CHECK(s.test == std::vector<int>{4});

    std::vector<QuestionRecord> short_only{{"a", four, std::nullopt, Partition::train},
                                           {"b", std::nullopt, 1, Partition::train},
                                           {"c", four, std::nullopt, Partition::test}};
    const Split same = build_hop_split(short_only, 4);
    CHECK(same.train == std::vector<int>{0, 1});
    CHECK(same.excluded.empty());
    CHECK(same.test == std::vector<int>{2});

    std::vector<QuestionRecord> bad{{"qx", std::nullopt, std::nullopt, Partition::train}};
    CHECK_THROWS_WITH_AS(build_hop_split(bad, 4), doctest::Contains("'qx' has no semantics"), DomainError);
    CHECK_THROWS_AS(build_hop_split(short_only, 0), DomainError);
}

TEST_CASE("parse_concepts") {
    const std::set<std::string> lexicon{"man", "hold", "blue", "car", "woman", "sit", "table"};
    CHECK(parse_concepts("Is the man holding a blue car?", lexicon, reference_tagger, "No").empty());
    const auto got = parse_concepts("A man holding a blue car", lexicon, reference_tagger, "yes");
    CHECK(got == std::set<ConceptId>{ConceptId("man"), ConceptId("hold"), ConceptId("blue"), ConceptId("car")});
    CHECK(parse_concepts("What colour is the sky?", lexicon, reference_tagger, "grey").empty());
    const auto plural = parse_concepts("Are the women sitting at tables?", lexicon, reference_tagger, "yes");
    CHECK(plural == std::set<ConceptId>{ConceptId("woman"), ConceptId("sit"), ConceptId("table")});
    CHECK_THROWS_AS(parse_concepts("x", {}, reference_tagger, "yes"), DomainError);

    const Tagger short_tagger = [](const std::vector<std::string>&) { return std::vector<std::string>{}; };
    CHECK_THROWS_AS(parse_concepts("a man", lexicon, short_tagger, "yes"), DomainError);

    // Every output is a lexicon entry, whatever the tagger says.
    const Tagger all_nouns = [](const std::vector<std::string>& t) { return std::vector<std::string>(t.size(), "NN"); };
    for (const char* q : {"the man and the car", "blue tables near cars", "nothing here at all"}) {
        for (const ConceptId& c : parse_concepts(q, lexicon, all_nouns, "yes")) {
            CHECK(lexicon.contains(c.str()));
        }
    }
}

TEST_CASE("concept_stats") {
    const auto inv = ids({"a", "b", "c", "d"});
    const std::vector<std::vector<ConceptId>> samples{ids({"a", "b"}), ids({"a"}), ids({"a", "a"}), ids({})};
    const ConceptStats st = concept_stats(samples, inv);
    CHECK(st.counts.at(ConceptId("a")) == 3);
    CHECK(st.counts.at(ConceptId("b")) == 1);
    CHECK(st.counts.at(ConceptId("c")) == 0);
    CHECK(st.without_samples == 2);
    CHECK(st.below_ten == 4);
    CHECK(st.samples_without_concept == 1);
    CHECK(st.mean == doctest::Approx(1.0));
    CHECK(st.median == doctest::Approx(0.5));
    CHECK(st.concepts_per_sample.at(1) == 2);
    CHECK(st.concepts_per_sample.at(2) == 1);
    CHECK(st.top(1).front() == std::pair{ConceptId("a"), 3});

    const Dataset d = generate_dataset(300, 6, kSmall);
    const ConceptStats ds = concept_stats(d);
    for (const ConceptId& c : d.inventory) {
        int n = 0;
        for (const auto& s : d.samples) {
            n += std::count(s.concepts.begin(), s.concepts.end(), c) > 0 ? 1 : 0;
        }
        CHECK(ds.counts.at(c) == n);
    }
}

TEST_CASE("split and dataset persistence") {
    const auto dir = testing_support::scratch_dir("splits");
    const Dataset d = generate_dataset(80, 7, kSmall);
    const Split s = build_systematic_split(d, ids({"circle:above:square"}));
    write_split(s, dir / "split.json");
    const Split back = read_split(dir / "split.json");
    CHECK(back.train == s.train);
    CHECK(back.test == s.test);
    CHECK(back.excluded == s.excluded);
    CHECK(back.spec.kind == s.spec.kind);
    CHECK(back.spec.held_out == s.spec.held_out);

    write_dataset(d, dir / "data");
    const Dataset r = read_dataset(dir / "data");
    CHECK(r.seed == d.seed);
    CHECK(r.inventory == d.inventory);
    REQUIRE(r.samples.size() == d.samples.size());
    for (std::size_t i = 0; i < d.samples.size(); ++i) {
        CHECK(r.samples[i].image.data == d.samples[i].image.data);
        CHECK(r.samples[i].concepts == d.samples[i].concepts);
        CHECK(r.samples[i].labels == d.samples[i].labels);
        CHECK(r.samples[i].scene == d.samples[i].scene);
        CHECK(r.samples[i].primary == d.samples[i].primary);
    }
    CHECK_THROWS(read_split(dir / "missing.json"));
}

TEST_CASE("annotation adapters") {
    const auto dir = testing_support::scratch_dir("adapters");
    {
        std::ofstream csv(dir / "hoi.csv");
        csv << "image,split,hoi_ids\n"
            << "img1,train,ride:bicycle;hold:bicycle\n"
            << "img2,train,ride:horse\n"
            << "img3,test,hold:horse;ride:bicycle\n"
            << "img4,train,hold:bicycle;hold:horse\n";
    }
    const AnnotationSet a = read_hoi_csv(dir / "hoi.csv");
    CHECK(a.ids == std::vector<std::string>{"img1", "img2", "img3", "img4"});
    CHECK(a.concepts[0] == ids({"hold:bicycle", "ride:bicycle"}));
    CHECK(a.partitions[2] == Partition::test);
    CHECK(a.inventory == ids({"hold:bicycle", "hold:horse", "ride:bicycle", "ride:horse"}));

    const Split s = build_systematic_split(a.concepts, a.partitions, a.inventory, ids({"ride:bicycle"}));
    CHECK(s.train == std::vector<int>{1, 3});
    CHECK(s.excluded == std::vector<int>{0});
    CHECK_THROWS_WITH_AS(build_systematic_split(a.concepts, a.partitions, a.inventory, ids({"ride:bicycle", "hold:horse"})),
                         doctest::Contains("atom 'hold' uncovered"), DataError);

    {
        std::ofstream q(dir / "q.json");
        q << R"({"q1": {"semantic": [{"operation": "select"}, {"operation": "exist"}]},
                 "q2": {"semantic": [{}, {}, {}, {}, {}]}})";
    }
    const auto qs = read_gqa_questions(dir / "q.json", Partition::train);
    REQUIRE(qs.size() == 2);
    std::map<std::string, int> hops;
    for (const auto& r : qs) {
        hops[r.id] = *r.hops;
    }
    CHECK(hops.at("q1") == 2);
    CHECK(hops.at("q2") == 5);
    CHECK(build_hop_split(qs, 4).excluded.size() == 1);
}

// Real-corpus checks run only when the annotation files are provided.
TEST_CASE("HICO systematic training counts" * doctest::skip(std::getenv("RELVIT_HICO_CSV") == nullptr)) {
    const AnnotationSet a = read_hoi_csv(std::getenv("RELVIT_HICO_CSV"));
    const Split original = build_systematic_split(a.concepts, a.partitions, a.inventory, {});
    CHECK(original.train.size() == 38118);
    for (const auto& [env, expected] : {std::pair{"RELVIT_HICO_EASY", 37820}, std::pair{"RELVIT_HICO_HARD", 9903}}) {
        const char* path = std::getenv(env);
        if (path == nullptr) {
            continue;
        }
        std::ifstream in(path);
        std::vector<ConceptId> held;
        for (std::string line; std::getline(in, line);) {
            if (!line.empty()) {
                held.emplace_back(line);
            }
        }
        const Split s = build_systematic_split(a.concepts, a.partitions, a.inventory, held);
        CHECK(s.train.size() == static_cast<std::size_t>(expected));
    }
}

TEST_CASE("GQA hop-split training count" * doctest::skip(std::getenv("RELVIT_GQA_TRAIN") == nullptr)) {
    const auto qs = read_gqa_questions(std::getenv("RELVIT_GQA_TRAIN"), Partition::train);
    CHECK(build_hop_split(qs, 4).train.size() == 711945);
}
