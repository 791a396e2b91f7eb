#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>

#include "oracles.hpp"
#include "relvit/errors.hpp"
#include "relvit/eval_report.hpp"
#include "support.hpp"

using namespace relvit;

namespace {

// std::vector<bool> is not contiguous, so spans of bool need a plain buffer.
struct Flags {
    std::unique_ptr<bool[]> data;
    std::size_t n = 0;

    explicit Flags(const std::vector<bool>& v) : data(new bool[v.size()]), n(v.size()) {
        std::copy(v.begin(), v.end(), data.get());
    }
    std::span<const bool> span() const { return {data.get(), n}; }
};

std::optional<double> ap(const std::vector<double>& scores, const std::vector<bool>& pos) {
    Flags f(pos);
    return average_precision(scores, f.span());
}

oracle::Mat rows_of(const Eigen::MatrixXd& m) {
    oracle::Mat out;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        out.emplace_back();
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            out.back().push_back(m(r, c));
        }
    }
    return out;
}

} // namespace

TEST_CASE("average precision examples") {
    CHECK(*ap({0.9, 0.8, 0.1, 0.0}, {true, true, false, false}) == doctest::Approx(1.0));
    CHECK(*ap({0.9, 0.8, 0.1}, {false, false, true}) == doctest::Approx(1.0 / 3.0));
    CHECK(*ap({0.9, 0.8, 0.7, 0.6}, {true, false, true, false}) == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0));
    CHECK_FALSE(ap({0.5, 0.2}, {false, false}).has_value());
    // Ties are grouped: one positive among two tied items scores 1/2.
    CHECK(*ap({0.5, 0.5}, {false, true}) == doctest::Approx(0.5));
    CHECK(*ap({0.5, 0.5}, {true, false}) == doctest::Approx(0.5));
    CHECK_THROWS_AS(ap({0.5}, {true, false}), DomainError);
    CHECK_THROWS_AS(ap({NAN, 0.2}, {true, false}), DomainError);
}

TEST_CASE("average precision against the quadratic oracle") {
    Rng rng(21);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 2 + rng.uniform_index(30);
        std::vector<double> scores(n);
        std::vector<bool> pos(n);
        bool any = false;
        for (std::size_t i = 0; i < n; ++i) {
            // Coarse scores so ties occur.
            scores[i] = trial % 2 == 0 ? rng.normal() : static_cast<double>(rng.uniform_index(5));
            pos[i] = rng.bernoulli(0.3);
            any = any || pos[i];
        }
        if (!any) {
            pos[0] = true;
        }
        const double got = *ap(scores, pos);
        CHECK(std::abs(got - oracle::average_precision(scores, pos)) < 1e-12);
        CHECK(got > 0.0);
        CHECK(got <= 1.0);

        // Strictly increasing transforms leave AP unchanged.
        std::vector<double> t(n);
        for (std::size_t i = 0; i < n; ++i) {
            t[i] = std::exp(0.5 * scores[i]) * 3.0 + 1.0;
        }
        CHECK(std::abs(*ap(t, pos) - got) < 1e-12);
    }
}

TEST_CASE("mean_ap excludes classes without positives") {
    const std::vector<std::optional<double>> per{0.5, std::nullopt, 1.0, 0.25};
    const MeanApResult all = mean_ap(per);
    CHECK(all.map == doctest::Approx((0.5 + 1.0 + 0.25) / 3.0));
    CHECK(all.excluded == std::vector<int>{1});
    CHECK(all.included == std::vector<int>{0, 2, 3});
    const std::vector<int> subset{1, 3};
    const MeanApResult sub = mean_ap(per, subset);
    CHECK(sub.map == doctest::Approx(0.25));
    CHECK(sub.excluded == std::vector<int>{1});
    const std::vector<std::optional<double>> none{std::nullopt, std::nullopt};
    CHECK_THROWS_AS(mean_ap(none), DomainError);
    const std::vector<int> bad{7};
    CHECK_THROWS_AS(mean_ap(per, bad), DomainError);

    Eigen::MatrixXd scores(3, 2);
    scores << 0.9, 0.1, 0.2, 0.8, 0.1, 0.3;
    Eigen::MatrixXd labels(3, 2);
    labels << 1, 0, 0, 0, 0, 1;
    const auto pc = per_class_ap(scores, labels);
    CHECK(*pc[0] == doctest::Approx(1.0));
    CHECK(*pc[1] == doctest::Approx(0.5));
    CHECK_THROWS_AS(per_class_ap(scores, Eigen::MatrixXd::Zero(2, 2)), DomainError);

    const std::vector<int> answers{0, 0, 1};
    CHECK(accuracy(scores, answers) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("silhouette separates well-separated clouds") {
    Rng rng(22);
    Eigen::MatrixXd x(60, 4);
    std::vector<int> labels(60);
    for (int i = 0; i < 60; ++i) {
        const int k = i % 3;
        labels[static_cast<std::size_t>(i)] = k;
        for (int c = 0; c < 4; ++c) {
            x(i, c) = (c == k ? 10.0 : 0.0) + 0.3 * rng.normal();
        }
    }
    const ClusterReport r = cluster_separation(x, labels);
    CHECK(r.silhouette > 0.9);
    CHECK(r.samples == 60);
    CHECK(r.clusters == 3);
    CHECK(r.projection.rows() == 60);
    CHECK(r.projection.cols() == 2);

    const Eigen::MatrixXd same = Eigen::MatrixXd::Ones(6, 3);
    const std::vector<int> two{0, 0, 0, 1, 1, 1};
    CHECK_THROWS_AS(cluster_separation(same, two), DomainError);
    const std::vector<int> one{0, 0, 0, 0, 0, 1};
    CHECK_THROWS_AS(cluster_separation(x.topRows(6), one), DomainError);
}

TEST_CASE("silhouette against the oracle and scale invariance") {
    Rng rng(23);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 6 + static_cast<int>(rng.uniform_index(20));
        const Eigen::MatrixXd x = testing_support::random_matrix(rng, n, 5);
        std::vector<int> labels(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            labels[static_cast<std::size_t>(i)] = i < 4 ? i % 2 : static_cast<int>(rng.uniform_index(4));
        }
        const double got = cluster_separation(x, labels).silhouette;
        CHECK(std::abs(got - oracle::silhouette(rows_of(x), labels)) < 1e-8);
        CHECK(got >= -1.0);
        CHECK(got <= 1.0);
        Eigen::MatrixXd scaled = x;
        for (Eigen::Index r = 0; r < n; ++r) {
            scaled.row(r) *= 0.1 + rng.uniform01() * 5.0;
        }
        CHECK(std::abs(cluster_separation(scaled, labels).silhouette - got) < 1e-10);
    }
}

TEST_CASE("correspondence") {
    Rng rng(24);
    const Eigen::MatrixXd a = testing_support::random_matrix(rng, 9, 6);
    const auto self = correspondence(a, a, 3, 100);
    REQUIRE(self.size() == 9);
    for (const TokenMatch& m : self) {
        CHECK(m.index_a == m.index_b);
        CHECK(m.similarity == doctest::Approx(1.0));
        CHECK(m.row_a == m.index_a / 3);
        CHECK(m.col_a == m.index_a % 3);
    }
    CHECK(correspondence(a, a, 3, 4).size() == 4);
    CHECK(correspondence(a, a, 3, 0).empty());
    CHECK_THROWS_AS(correspondence(a, testing_support::random_matrix(rng, 9, 5), 3, 4), DomainError);
    CHECK_THROWS_AS(correspondence(a, a, 0, 4), DomainError);
    Eigen::MatrixXd z = a;
    z.row(2).setZero();
    CHECK_THROWS_AS(correspondence(z, a, 3, 4), DomainError);

    for (int trial = 0; trial < 200; ++trial) {
        const Eigen::MatrixXd x = testing_support::random_matrix(rng, 6, 4);
        const Eigen::MatrixXd y = testing_support::random_matrix(rng, 6, 4);
        const auto matches = correspondence(x, y, 2, 6);
        const auto expected = oracle::argmax_cosine(rows_of(y), rows_of(x));
        REQUIRE(matches.size() == 6);
        for (std::size_t k = 0; k < matches.size(); ++k) {
            const TokenMatch& m = matches[k];
            CHECK(m.index_b == expected[static_cast<std::size_t>(m.index_a)]);
            CHECK(std::abs(m.similarity - oracle::cosine(rows_of(x)[static_cast<std::size_t>(m.index_a)],
                                                         rows_of(y)[static_cast<std::size_t>(m.index_b)])) < 1e-12);
            if (k > 0) {
                CHECK(matches[k - 1].similarity >= m.similarity);
            }
        }
        // Similarity is symmetric: the matched pair scores the same from either side.
        const auto back = correspondence(y, x, 2, 6);
        for (const TokenMatch& m : back) {
            const double s = oracle::cosine(rows_of(y)[static_cast<std::size_t>(m.index_a)],
                                            rows_of(x)[static_cast<std::size_t>(m.index_b)]);
            CHECK(std::abs(m.similarity - s) < 1e-12);
        }
    }
}

TEST_CASE("emit_report round trip and file headers") {
    const auto dir = testing_support::scratch_dir("report");
    Metrics empty;
    emit_report(empty, {dir / "empty.json", std::nullopt, std::nullopt});
    CHECK(read_metrics(dir / "empty.json") == empty);

    Metrics m;
    m.scalars = {{"map_full", 0.5}, {"map_unseen", 0.25}};
    m.sections["per_class"] = {{"a:b:c", 0.75}};
    FeatureDump dump{Eigen::MatrixXd::Identity(2, 3), {"x", "y"}};
    const std::vector<TokenMatch> matches{{0, 3, 0.9, 0, 0, 1, 1}};
    emit_report(m, {dir / "sub" / "metrics.json", dir / "features.tsv", dir / "corr.tsv"}, &dump, &matches);
    CHECK(read_metrics(dir / "sub" / "metrics.json") == m);

    std::ifstream f(dir / "features.tsv");
    std::string line;
    std::getline(f, line);
    CHECK(line.starts_with("# relvit-features schema_version=1"));
    std::getline(f, line);
    CHECK(line == "label\tf0\tf1\tf2");
    std::getline(f, line);
    CHECK(line == "x\t1\t0\t0");

    std::ifstream c(dir / "corr.tsv");
    std::getline(c, line);
    CHECK(line.starts_with("# relvit-correspondence schema_version=1"));
    std::getline(c, line);
    CHECK(line == "index_a\trow_a\tcol_a\tindex_b\trow_b\tcol_b\tsimilarity");
    std::getline(c, line);
    CHECK(line.starts_with("0\t0\t0\t3\t1\t1\t"));
    CHECK(std::stod(line.substr(line.rfind('\t') + 1)) == 0.9);

    {
        std::ofstream bad(dir / "v2.json");
        bad << R"({"schema_version": 2, "scalars": {}, "sections": {}})";
    }
    CHECK_THROWS_AS(read_metrics(dir / "v2.json"), DataError);
}
