#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "relvit/backbone.hpp"
#include "relvit/distill_losses.hpp"
#include "relvit/rng.hpp"
#include "relvit/token_sequence.hpp"
#include "relvit/trainer.hpp"

namespace testing_support {

inline Eigen::MatrixXd random_matrix(relvit::Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = scale * rng.normal();
    }
    return m;
}

inline relvit::TokenSequence random_tokens(relvit::Rng& rng, int rows, int cols, int dim, double scale = 1.0) {
    return {random_matrix(rng, rows * cols, dim, scale), rows, cols, std::nullopt};
}

inline relvit::Image random_image(relvit::Rng& rng, int h, int w) {
    relvit::Image img(h, w, 3);
    for (double& v : img.data) {
        v = rng.uniform01();
    }
    return img;
}

/// 8x8 input, 4x4 patches, one 4-wide stage: 4 tokens, a few hundred parameters.
inline relvit::BackboneConfig micro_backbone() {
    relvit::BackboneConfig c;
    c.image_height = 8;
    c.image_width = 8;
    c.patch_size = 4;
    c.stages = {{1, 4, 2, false}};
    c.mlp_ratio = 2;
    return c;
}

inline relvit::HeadConfig micro_head() { return {6, 5, 2}; }

/// Re-scales every parameter so that heads produce logits of order one.
inline void spread_parameters(std::vector<relvit::ag::Parameter*> params, relvit::Rng& rng, double scale) {
    for (relvit::ag::Parameter* p : params) {
        for (Eigen::Index i = 0; i < p->value.size(); ++i) {
            p->value.data()[i] += scale * rng.normal();
        }
    }
}

struct GradCheck {
    std::string name;
    std::size_t size = 0;
    /// ||analytic - numeric|| / max(||analytic||, ||numeric||), 0 when both vanish.
    double relative_error = 0.0;
};

/// Central finite differences of `loss` (a scalar built on a fresh graph)
/// against the reverse-mode gradient, one entry per parameter tensor.
template <typename LossFn>
std::vector<GradCheck> gradient_check(const std::vector<relvit::ag::Parameter*>& params, LossFn&& loss,
                                      double h = 1e-5) {
    relvit::ag::Graph g;
    const relvit::ag::Var out = loss(g);
    g.backward(out);
    std::vector<GradCheck> result;
    for (relvit::ag::Parameter* p : params) {
        const Eigen::MatrixXd analytic = g.gradient(*p);
        Eigen::MatrixXd numeric(p->value.rows(), p->value.cols());
        for (Eigen::Index i = 0; i < p->value.size(); ++i) {
            const double keep = p->value.data()[i];
            p->value.data()[i] = keep + h;
            relvit::ag::Graph gp(false);
            const double up = loss(gp).scalar();
            p->value.data()[i] = keep - h;
            relvit::ag::Graph gm(false);
            const double down = loss(gm).scalar();
            p->value.data()[i] = keep;
            numeric.data()[i] = (up - down) / (2.0 * h);
        }
        const double scale = std::max(analytic.norm(), numeric.norm());
        result.push_back({p->name, static_cast<std::size_t>(p->value.size()),
                          scale == 0.0 ? 0.0 : (analytic - numeric).norm() / scale});
    }
    return result;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("relvit-test-" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace testing_support
