#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "relvit/augmentation.hpp"
#include "relvit/backbone.hpp"
#include "relvit/errors.hpp"
#include "support.hpp"

using namespace relvit;
using testing_support::random_image;

namespace {

bool in_unit_range(const Image& img) {
    for (double v : img.data) {
        if (!(v >= 0.0 && v <= 1.0)) {
            return false;
        }
    }
    return true;
}

bool channels_equal(const Image& img) {
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            if (img.at(y, x, 0) != img.at(y, x, 1) || img.at(y, x, 1) != img.at(y, x, 2)) {
                return false;
            }
        }
    }
    return true;
}

AugmentationConfig small(int size) {
    AugmentationConfig cfg;
    cfg.out_height = cfg.out_width = size;
    cfg.blur_kernel = 5;
    return cfg;
}

} // namespace

TEST_CASE("make_views is deterministic in the seed") {
    Rng rng(1);
    const Image img = random_image(rng, 40, 48);
    const AugmentationConfig cfg = small(32);
    const ViewPair a = make_views(img, cfg, 123);
    const ViewPair b = make_views(img, cfg, 123);
    CHECK(a.view1 == b.view1);
    CHECK(a.view2 == b.view2);
    const ViewPair c = make_views(img, cfg, 124);
    CHECK_FALSE(c.view1 == a.view1);
    CHECK_FALSE(a.view1 == a.view2);
}

TEST_CASE("default pipeline produces 224x224x3 views") {
    Rng rng(2);
    const Image img = random_image(rng, 256, 300);
    AugmentationConfig cfg;
    const ViewPair v = make_views(img, cfg, 9);
    for (const Image* view : {&v.view1, &v.view2}) {
        CHECK(view->height == 224);
        CHECK(view->width == 224);
        CHECK(view->channels == 3);
        CHECK(view->data.size() == 224u * 224u * 3u);
        CHECK(in_unit_range(*view));
    }
    CHECK(tokenize(v.view1, 16).rows() == 196);
    CHECK(tokenize(v.view2, 16).rows() == tokenize(v.view1, 16).rows());
}

TEST_CASE("grayscale fires with probability 0.2") {
    Rng img_rng(3);
    const Image img = random_image(img_rng, 24, 24);
    AugmentationConfig cfg = small(16);
    cfg.p_blur = 0.0;
    Rng rng(77);
    int gray = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        AugmentationTrace trace;
        const Image out = augment(img, cfg, rng, &trace);
        if (trace.grayscale) {
            ++gray;
            CHECK(channels_equal(out));
        }
    }
    const double frac = static_cast<double>(gray) / n;
    CHECK(frac >= 0.18);
    CHECK(frac <= 0.22);
}

TEST_CASE("blur and flip probabilities") {
    Rng img_rng(4);
    const Image img = random_image(img_rng, 24, 24);
    AugmentationConfig cfg = small(16);
    Rng rng(5);
    int blurred = 0;
    int flipped = 0;
    const int n = 4000;
    for (int i = 0; i < n; ++i) {
        AugmentationTrace trace;
        (void)augment(img, cfg, rng, &trace);
        blurred += trace.blurred ? 1 : 0;
        flipped += trace.flipped ? 1 : 0;
    }
    CHECK(std::abs(blurred / static_cast<double>(n) - 0.5) < 0.03);
    CHECK(std::abs(flipped / static_cast<double>(n) - 0.5) < 0.03);
}

TEST_CASE("values stay in [0, 1] under strong jitter") {
    Rng img_rng(6);
    AugmentationConfig cfg = small(16);
    cfg.brightness = cfg.contrast = cfg.saturation = 3.0;
    cfg.hue = 0.5;
    cfg.p_gray = 0.5;
    cfg.p_blur = 1.0;
    for (int i = 0; i < 200; ++i) {
        const Image img = random_image(img_rng, 20, 30);
        const ViewPair v = make_views(img, cfg, static_cast<std::uint64_t>(i));
        REQUIRE(in_unit_range(v.view1));
        REQUIRE(in_unit_range(v.view2));
    }
}

TEST_CASE("views always have equal patch counts") {
    Rng img_rng(7);
    AugmentationConfig cfg = small(32);
    for (int i = 0; i < 50; ++i) {
        const int h = 20 + static_cast<int>(img_rng.uniform_index(60));
        const int w = 20 + static_cast<int>(img_rng.uniform_index(60));
        const ViewPair v = make_views(random_image(img_rng, h, w), cfg, static_cast<std::uint64_t>(i));
        CHECK(tokenize(v.view1, 8).rows() == 16);
        CHECK(tokenize(v.view2, 8).rows() == 16);
    }
}

TEST_CASE("identity configuration reduces to a plain resize") {
    Rng rng(8);
    const Image img = random_image(rng, 16, 16);
    const ViewPair same = make_views(img, AugmentationConfig::identity(16, 16), 1);
    CHECK(same.view1 == img);
    CHECK(same.view2 == img);

    const ViewPair down = make_views(img, AugmentationConfig::identity(8, 8), 2);
    CHECK(down.view1 == resize_crop(img, 0, 0, 16, 16, 8, 8));
    // Half-pixel bilinear at factor 2 averages each 2x2 block.
    for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 8; ++x) {
            for (int c = 0; c < 3; ++c) {
                const double mean = 0.25 * (img.at(2 * y, 2 * x, c) + img.at(2 * y + 1, 2 * x, c) +
                                            img.at(2 * y, 2 * x + 1, c) + img.at(2 * y + 1, 2 * x + 1, c));
                CHECK(down.view1.at(y, x, c) == doctest::Approx(mean).epsilon(1e-14));
            }
        }
    }
}

TEST_CASE("flip only") {
    Rng rng(9);
    const Image img = random_image(rng, 8, 8);
    AugmentationConfig cfg = AugmentationConfig::identity(8, 8);
    cfg.p_hflip = 1.0;
    const ViewPair v = make_views(img, cfg, 3);
    for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 8; ++x) {
            for (int c = 0; c < 3; ++c) {
                CHECK(v.view1.at(y, x, c) == img.at(y, 7 - x, c));
            }
        }
    }
}

TEST_CASE("errors") {
    Rng rng(10);
    const Image tiny = random_image(rng, 1, 1);
    CHECK_THROWS_AS(make_views(tiny, small(8), 0), DomainError);
    Image gray(8, 8, 1);
    CHECK_THROWS_AS(make_views(gray, small(8), 0), DomainError);

    AugmentationConfig bad = small(30);
    CHECK_THROWS_AS(bad.validate(8), DomainError);
    bad = small(32);
    bad.p_gray = 1.5;
    CHECK_THROWS_WITH_AS(bad.validate(8), "augmentation.p_gray must be in [0, 1]", DomainError);
    bad = small(32);
    bad.crop_scale_min = 0.9;
    bad.crop_scale_max = 0.5;
    CHECK_THROWS_AS(bad.validate(8), DomainError);
    bad = small(32);
    bad.blur_kernel = 4;
    CHECK_THROWS_AS(bad.validate(8), DomainError);
    CHECK_NOTHROW(AugmentationConfig{}.validate(16));
}
