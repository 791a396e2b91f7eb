#pragma once

#include <cstdint>

#include "relvit/image.hpp"
#include "relvit/rng.hpp"

namespace relvit {

/// Two-view augmentation pipeline: crop -> color jitter -> grayscale -> blur -> flip.
struct AugmentationConfig {
    int out_height = 224;
    int out_width = 224;
    double crop_scale_min = 0.2;
    double crop_scale_max = 1.0;
    double crop_ratio_min = 3.0 / 4.0;
    double crop_ratio_max = 4.0 / 3.0;
    double brightness = 0.4;
    double contrast = 0.4;
    double saturation = 0.4;
    double hue = 0.1;
    double p_gray = 0.2;
    int blur_kernel = 23;
    double blur_sigma_min = 0.1;
    double blur_sigma_max = 2.0;
    double p_blur = 0.5;
    double p_hflip = 0.5;

    /// All stochastic stages off: make_views becomes a plain resize.
    static AugmentationConfig identity(int height, int width);

    /// Throws DomainError naming the violated field.
    void validate(int patch_size = 1) const;
};

struct ViewPair {
    Image view1;
    Image view2;
};

/// Records which stochastic stages fired for one view (for statistics/tests).
struct AugmentationTrace {
    bool grayscale = false;
    bool blurred = false;
    bool flipped = false;
};

/// One augmented view. Consumes randomness from `rng` only.
Image augment(const Image& image, const AugmentationConfig& cfg, Rng& rng, AugmentationTrace* trace = nullptr);

/// Two independently augmented views, deterministic given `seed`.
ViewPair make_views(const Image& image, const AugmentationConfig& cfg, std::uint64_t seed);

/// Bilinear resize of the (top, left, h, w) window to out_h x out_w (half-pixel centers).
Image resize_crop(const Image& image, int top, int left, int h, int w, int out_h, int out_w);

} // namespace relvit
