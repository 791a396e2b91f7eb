#pragma once

#include <string>
#include <vector>

#include "relvit/autograd.hpp"
#include "relvit/rng.hpp"

namespace relvit {

/// Affine map x W + b over row vectors.
struct Linear {
    ag::Parameter weight;
    ag::Parameter bias;
    bool has_bias = true;

    Linear() = default;
    /// Truncated-normal(0.02) weights, zero bias.
    Linear(const std::string& name, int in, int out, Rng& rng, bool with_bias = true);

    ag::Var forward(ag::Graph& g, ag::Var x) const;
    void collect(std::vector<ag::Parameter*>& out);
    void collect(std::vector<const ag::Parameter*>& out) const;
};

struct LayerNorm {
    ag::Parameter gamma;
    ag::Parameter beta;
    double eps = 1e-6;

    LayerNorm() = default;
    LayerNorm(const std::string& name, int width, double eps);

    ag::Var forward(ag::Graph& g, ag::Var x) const;
    void collect(std::vector<ag::Parameter*>& out);
    void collect(std::vector<const ag::Parameter*>& out) const;
};

/// Linear -> GELU -> ... -> Linear.
struct Mlp {
    std::vector<Linear> layers;

    Mlp() = default;
    Mlp(const std::string& name, const std::vector<int>& widths, Rng& rng);

    ag::Var forward(ag::Graph& g, ag::Var x) const;
    void collect(std::vector<ag::Parameter*>& out);
    void collect(std::vector<const ag::Parameter*>& out) const;
};

} // namespace relvit
