#include "relvit/augmentation.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "relvit/errors.hpp"

namespace relvit {

namespace {

struct CropBox {
    int top;
    int left;
    int height;
    int width;
};

void clamp01(Image& img) {
    for (double& v : img.data) {
        v = std::clamp(v, 0.0, 1.0);
    }
}

double luma(const Image& img, int y, int x) {
    return 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
}

CropBox sample_crop(const Image& img, const AugmentationConfig& cfg, Rng& rng) {
    const double area = static_cast<double>(img.height) * img.width;
    const double log_lo = std::log(cfg.crop_ratio_min);
    const double log_hi = std::log(cfg.crop_ratio_max);
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max);
        const double aspect = std::exp(rng.uniform(log_lo, log_hi));
        const int w = static_cast<int>(std::lround(std::sqrt(target * aspect)));
        const int h = static_cast<int>(std::lround(std::sqrt(target / aspect)));
        if (w > 0 && w <= img.width && h > 0 && h <= img.height) {
            const int top = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(img.height - h + 1)));
            const int left = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(img.width - w + 1)));
            return {top, left, h, w};
        }
    }
    // Fallback: central crop clamped to the admissible aspect ratios.
    const double in_ratio = static_cast<double>(img.width) / img.height;
    int w = img.width;
    int h = img.height;
    if (in_ratio < cfg.crop_ratio_min) {
        h = static_cast<int>(std::lround(w / cfg.crop_ratio_min));
    } else if (in_ratio > cfg.crop_ratio_max) {
        w = static_cast<int>(std::lround(h * cfg.crop_ratio_max));
    }
    return {(img.height - h) / 2, (img.width - w) / 2, h, w};
}

void adjust_brightness(Image& img, double f) {
    for (double& v : img.data) {
        v *= f;
    }
}

void adjust_contrast(Image& img, double f) {
    double m = 0.0;
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            m += luma(img, y, x);
        }
    }
    m /= static_cast<double>(img.height) * img.width;
    for (double& v : img.data) {
        v = f * v + (1.0 - f) * m;
    }
}

void adjust_saturation(Image& img, double f) {
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const double g = luma(img, y, x);
            for (int c = 0; c < 3; ++c) {
                img.at(y, x, c) = f * img.at(y, x, c) + (1.0 - f) * g;
            }
        }
    }
}

// Hue rotation in HSV space; `shift` is a fraction of the full hue circle.
void adjust_hue(Image& img, double shift) {
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const double r = img.at(y, x, 0);
            const double g = img.at(y, x, 1);
            const double b = img.at(y, x, 2);
            const double mx = std::max({r, g, b});
            const double mn = std::min({r, g, b});
            const double delta = mx - mn;
            if (delta <= 0.0) {
                continue;
            }
            double h;
            if (mx == r) {
                h = std::fmod((g - b) / delta, 6.0);
            } else if (mx == g) {
                h = (b - r) / delta + 2.0;
            } else {
                h = (r - g) / delta + 4.0;
            }
            h = h / 6.0 + shift;
            h -= std::floor(h);
            const double s = delta / mx;
            const double v = mx;
            const double h6 = h * 6.0;
            const int sector = static_cast<int>(std::floor(h6)) % 6;
            const double frac = h6 - std::floor(h6);
            const double p = v * (1.0 - s);
            const double q = v * (1.0 - s * frac);
            const double t = v * (1.0 - s * (1.0 - frac));
            double rgb[3];
            switch (sector) {
            case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
            case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
            case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
            case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
            case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
            default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
            }
            for (int c = 0; c < 3; ++c) {
                img.at(y, x, c) = rgb[c];
            }
        }
    }
}

void to_grayscale(Image& img) {
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const double g = luma(img, y, x);
            for (int c = 0; c < 3; ++c) {
                img.at(y, x, c) = g;
            }
        }
    }
}

// Separable Gaussian blur with edge replication.
void gaussian_blur(Image& img, int kernel, double sigma) {
    const int radius = kernel / 2;
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        total += k[static_cast<std::size_t>(i + radius)];
    }
    for (double& v : k) {
        v /= total;
    }
    Image tmp(img.height, img.width, img.channels);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < img.channels; ++c) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    acc += k[static_cast<std::size_t>(i + radius)] * img.at(y, std::clamp(x + i, 0, img.width - 1), c);
                }
                tmp.at(y, x, c) = acc;
            }
        }
    }
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < img.channels; ++c) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    acc += k[static_cast<std::size_t>(i + radius)] * tmp.at(std::clamp(y + i, 0, img.height - 1), x, c);
                }
                img.at(y, x, c) = acc;
            }
        }
    }
}

void flip_horizontal(Image& img) {
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width / 2; ++x) {
            for (int c = 0; c < img.channels; ++c) {
                std::swap(img.at(y, x, c), img.at(y, img.width - 1 - x, c));
            }
        }
    }
}

} // namespace

AugmentationConfig AugmentationConfig::identity(int height, int width) {
    AugmentationConfig cfg;
    cfg.out_height = height;
    cfg.out_width = width;
    cfg.crop_scale_min = cfg.crop_scale_max = 1.0;
    cfg.brightness = cfg.contrast = cfg.saturation = cfg.hue = 0.0;
    cfg.p_gray = cfg.p_blur = cfg.p_hflip = 0.0;
    return cfg;
}

void AugmentationConfig::validate(int patch_size) const {
    auto fail = [](const std::string& what) { throw DomainError("augmentation." + what); };
    if (out_height <= 0 || out_width <= 0) {
        fail("out_size must be positive");
    }
    if (patch_size > 0 && (out_height % patch_size != 0 || out_width % patch_size != 0)) {
        fail("out_size must be divisible by the patch size " + std::to_string(patch_size));
    }
    if (!(crop_scale_min > 0.0) || crop_scale_min > crop_scale_max || crop_scale_max > 1.0) {
        fail("crop_scale must satisfy 0 < low <= high <= 1");
    }
    if (!(crop_ratio_min > 0.0) || crop_ratio_min > crop_ratio_max) {
        fail("crop ratio range must satisfy 0 < low <= high");
    }
    for (auto [name, p] : {std::pair{"p_gray", p_gray}, {"p_blur", p_blur}, {"p_hflip", p_hflip}}) {
        if (!(p >= 0.0 && p <= 1.0)) {
            fail(std::string(name) + " must be in [0, 1]");
        }
    }
    if (brightness < 0 || contrast < 0 || saturation < 0 || hue < 0 || hue > 0.5) {
        fail("jitter magnitudes must be >= 0 (hue <= 0.5)");
    }
    if (blur_kernel < 1 || blur_kernel % 2 == 0) {
        fail("blur_kernel must be a positive odd integer");
    }
    if (!(blur_sigma_min > 0.0) || blur_sigma_min > blur_sigma_max) {
        fail("blur sigma range must satisfy 0 < low <= high");
    }
}

Image resize_crop(const Image& image, int top, int left, int h, int w, int out_h, int out_w) {
    Image out(out_h, out_w, image.channels);
    const double sy = static_cast<double>(h) / out_h;
    const double sx = static_cast<double>(w) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - x0;
            for (int c = 0; c < image.channels; ++c) {
                const double a = image.at(top + y0, left + x0, c);
                const double b = image.at(top + y0, left + x1, c);
                const double d = image.at(top + y1, left + x0, c);
                const double e = image.at(top + y1, left + x1, c);
                double v = a;
                if (wx != 0.0 || wy != 0.0) {
                    v = (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * d + wx * e);
                }
                out.at(y, x, c) = v;
            }
        }
    }
    return out;
}

Image augment(const Image& image, const AugmentationConfig& cfg, Rng& rng, AugmentationTrace* trace) {
    if (image.channels != 3) {
        throw DomainError("augmentation requires a 3-channel image");
    }
    const double min_area = cfg.crop_scale_min * image.height * image.width;
    if (image.height < 1 || image.width < 1 || std::sqrt(min_area * cfg.crop_ratio_min) < 1.0 ||
        std::sqrt(min_area / cfg.crop_ratio_max) < 1.0) {
        throw DomainError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                          " is smaller than the minimal crop");
    }

    const CropBox box = sample_crop(image, cfg, rng);
    Image img = resize_crop(image, box.top, box.left, box.height, box.width, cfg.out_height, cfg.out_width);
    clamp01(img);

    const double fb = rng.uniform(std::max(0.0, 1.0 - cfg.brightness), 1.0 + cfg.brightness);
    const double fc = rng.uniform(std::max(0.0, 1.0 - cfg.contrast), 1.0 + cfg.contrast);
    const double fs = rng.uniform(std::max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation);
    const double fh = rng.uniform(-cfg.hue, cfg.hue);
    if (fb != 1.0) {
        adjust_brightness(img, fb);
        clamp01(img);
    }
    if (fc != 1.0) {
        adjust_contrast(img, fc);
        clamp01(img);
    }
    if (fs != 1.0) {
        adjust_saturation(img, fs);
        clamp01(img);
    }
    if (fh != 0.0) {
        adjust_hue(img, fh);
        clamp01(img);
    }

    AugmentationTrace local;
    local.grayscale = rng.bernoulli(cfg.p_gray);
    if (local.grayscale) {
        to_grayscale(img);
        clamp01(img);
    }
    local.blurred = rng.bernoulli(cfg.p_blur);
    if (local.blurred) {
        gaussian_blur(img, cfg.blur_kernel, rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max));
        clamp01(img);
    }
    local.flipped = rng.bernoulli(cfg.p_hflip);
    if (local.flipped) {
        flip_horizontal(img);
    }
    if (trace != nullptr) {
        *trace = local;
    }
    return img;
}

ViewPair make_views(const Image& image, const AugmentationConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    ViewPair out;
    out.view1 = augment(image, cfg, rng);
    out.view2 = augment(image, cfg, rng);
    return out;
}

} // namespace relvit
