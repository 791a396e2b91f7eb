#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "relvit/backbone.hpp"
#include "relvit/errors.hpp"
#include "support.hpp"

using namespace relvit;
using testing_support::random_image;

TEST_CASE("tokenize patch counts and layout") {
    CHECK(tokenize(Image(224, 224, 3), 16).rows() == 196);
    CHECK(tokenize(Image(224, 224, 3), 16).cols() == 16 * 16 * 3);
    CHECK(tokenize(Image(64, 64, 3), 8).rows() == 64);
    CHECK_THROWS_AS(tokenize(Image(65, 64, 3), 8), DomainError);

    Image img(4, 4, 1);
    for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 4; ++x) {
            img.at(y, x, 0) = 10 * y + x;
        }
    }
    const ag::Matrix t = tokenize(img, 2);
    REQUIRE(t.rows() == 4);
    // Patch 1 is the top-right 2x2 block, read row-major.
    CHECK(t(1, 0) == 2);
    CHECK(t(1, 1) == 3);
    CHECK(t(1, 2) == 12);
    CHECK(t(1, 3) == 13);
    CHECK(t(2, 0) == 20);
}

TEST_CASE("config validation") {
    BackboneConfig c;
    CHECK_NOTHROW(c.validate());
    CHECK(c.final_grid() == std::pair{4, 4});
    c.stages[1].heads = 3;
    CHECK_THROWS_AS(c.validate(), DomainError);
    c = BackboneConfig{};
    c.image_height = 60;
    CHECK_THROWS_AS(c.validate(), DomainError);
    c = BackboneConfig{};
    c.image_height = c.image_width = 24;
    c.patch_size = 8;
    CHECK_THROWS_AS(c.validate(), DomainError);  // 3x3 grid cannot merge
}

TEST_CASE("forward: determinism and token counts") {
    Rng rng(1);
    BackboneConfig c;
    c.stages = {{1, 16, 2, false}, {1, 32, 4, true}};
    const Backbone net(c, rng);
    const Image img = random_image(rng, 64, 64);
    const TokenSequence a = net.forward(img);
    const TokenSequence b = net.forward(img);
    CHECK(same_tokens(a, b));
    CHECK(a.size() == 16);
    CHECK(a.dim() == 32);
    CHECK(a.grid_rows == 4);
    CHECK(a.grid_cols == 4);
    CHECK(a.tokens.allFinite());
    CHECK_THROWS_AS(net.forward(random_image(rng, 32, 64)), DomainError);

    ag::Graph g;
    const BackboneOutput out = net.forward(g, img);
    CHECK((out.tokens.value() - a.tokens).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("cls_token mode carries a separate summary token") {
    Rng rng(2);
    BackboneConfig c = testing_support::micro_backbone();
    c.summary_mode = SummaryMode::cls_token;
    const Backbone net(c, rng);
    const TokenSequence t = net.forward(random_image(rng, 8, 8));
    CHECK(t.size() == 4);
    REQUIRE(t.cls.has_value());
    CHECK(summarize(t, SummaryMode::cls_token) == *t.cls);
}

TEST_CASE("non-finite activations raise NumericError naming the stage") {
    Rng rng(3);
    Backbone net(testing_support::micro_backbone(), rng);
    for (ag::Parameter* p : net.parameters()) {
        if (p->name == "patch_embed.weight") {
            p->value(0, 0) = std::numeric_limits<double>::quiet_NaN();
        }
    }
    CHECK_THROWS_WITH_AS(net.forward(random_image(rng, 8, 8)), doctest::Contains("stage 0"), NumericError);
}

TEST_CASE("summarize") {
    TokenSequence one{ag::Matrix{{0.5, -2.0}}, 1, 1, std::nullopt};
    CHECK(summarize(one, SummaryMode::max_pool) == one.tokens.row(0));
    CHECK(summarize(one, SummaryMode::cls_token) == one.tokens.row(0));

    TokenSequence two{ag::Matrix{{1.0, 0.0}, {0.0, 1.0}}, 1, 2, std::nullopt};
    CHECK(summarize(two, SummaryMode::max_pool) == Eigen::RowVector2d(1.0, 1.0));

    TokenSequence empty{ag::Matrix(0, 3), 0, 0, std::nullopt};
    CHECK_THROWS_AS(summarize(empty, SummaryMode::max_pool), DomainError);

    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        TokenSequence t = testing_support::random_tokens(rng, 3, 3, 5);
        std::vector<int> perm(9);
        std::iota(perm.begin(), perm.end(), 0);
        for (int i = 8; i > 0; --i) {
            std::swap(perm[static_cast<std::size_t>(i)], perm[rng.uniform_index(static_cast<std::uint64_t>(i) + 1)]);
        }
        TokenSequence p = t;
        for (int i = 0; i < 9; ++i) {
            p.tokens.row(i) = t.tokens.row(perm[static_cast<std::size_t>(i)]);
        }
        CHECK(summarize(p, SummaryMode::max_pool) == summarize(t, SummaryMode::max_pool));

        // The argmax token per column is unchanged by uniform positive scaling.
        TokenSequence s = t;
        s.tokens *= 3.7;
        for (Eigen::Index col = 0; col < 5; ++col) {
            Eigen::Index ia = 0;
            Eigen::Index ib = 0;
            t.tokens.col(col).maxCoeff(&ia);
            s.tokens.col(col).maxCoeff(&ib);
            CHECK(ia == ib);
        }
    }
}

TEST_CASE("locality: masking patch k moves token k the most without attention") {
    Rng rng(5);
    BackboneConfig c;
    c.image_height = c.image_width = 16;
    c.patch_size = 4;
    c.stages = {{2, 8, 2, false}};
    c.attention = false;
    const Backbone net(c, rng);
    const Image img = random_image(rng, 16, 16);
    const TokenSequence base = net.forward(img);
    for (int k = 0; k < 16; ++k) {
        Image masked = img;
        const int r = k / 4;
        const int col = k % 4;
        for (int y = 4 * r; y < 4 * r + 4; ++y) {
            for (int x = 4 * col; x < 4 * col + 4; ++x) {
                for (int ch = 0; ch < 3; ++ch) {
                    masked.at(y, x, ch) = 0.0;
                }
            }
        }
        const TokenSequence m = net.forward(masked);
        const Eigen::VectorXd change = (m.tokens - base.tokens).rowwise().norm();
        Eigen::Index arg = 0;
        change.maxCoeff(&arg);
        CHECK(arg == k);
    }
}

TEST_CASE("finite-difference gradients for every tensor of a 4-token micro backbone") {
    for (SummaryMode mode : {SummaryMode::max_pool, SummaryMode::cls_token}) {
        Rng rng(6);
        BackboneConfig c = testing_support::micro_backbone();
        c.summary_mode = mode;
        Backbone net(c, rng);
        testing_support::spread_parameters(net.parameters(), rng, 0.3);
        const Image img = random_image(rng, 8, 8);
        const ag::Matrix weights = testing_support::random_matrix(rng, 4, c.output_dim());

        // Plain sum over a layer-normed output is constant, so a random
        // linear functional of the tokens is used instead.
        auto loss = [&](ag::Graph& g) {
            const BackboneOutput out = net.forward(g, img);
            ag::Var w = g.constant(weights);
            ag::Var t = ag::sum(ag::matmul(ag::transpose(out.tokens), w));
            ag::Var s = ag::sum(out.summary(mode));
            return ag::add(ag::scale(t, 1.0 / 4.0), s);
        };
        const auto checks = testing_support::gradient_check(net.parameters(), loss);
        CHECK(checks.size() == net.parameters().size());
        for (const auto& r : checks) {
            CAPTURE(r.name);
            CHECK(r.relative_error < 1e-4);
        }
    }
}

TEST_CASE("every backbone parameter receives gradient") {
    Rng rng(7);
    BackboneConfig c;
    c.image_height = c.image_width = 16;
    c.patch_size = 4;
    c.stages = {{1, 4, 2, false}, {1, 8, 2, true}};
    c.summary_mode = SummaryMode::cls_token;
    Backbone net(c, rng);
    testing_support::spread_parameters(net.parameters(), rng, 0.3);
    ag::Graph g;
    const BackboneOutput out = net.forward(g, random_image(rng, 16, 16));
    CHECK(out.tokens.rows() == 4);
    g.backward(ag::add(ag::sum(ag::gelu(out.tokens)), ag::sum(ag::gelu(*out.cls))));
    for (const ag::Parameter* p : net.parameters()) {
        CAPTURE(p->name);
        CHECK(g.gradient(*p).norm() > 0.0);
    }
}
