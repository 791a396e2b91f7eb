#include "relvit/layers.hpp"

namespace relvit {

namespace {

ag::Matrix truncated_normal(int rows, int cols, Rng& rng) {
    ag::Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = rng.truncated_normal(0.02);
    }
    return m;
}

} // namespace

Linear::Linear(const std::string& name, int in, int out, Rng& rng, bool with_bias)
    : weight{name + ".weight", truncated_normal(in, out, rng), true},
      bias{name + ".bias", ag::Matrix::Zero(1, with_bias ? out : 0), false},
      has_bias(with_bias) {}

ag::Var Linear::forward(ag::Graph& g, ag::Var x) const {
    ag::Var y = ag::matmul(x, g.param(weight));
    return has_bias ? ag::add_row(y, g.param(bias)) : y;
}

void Linear::collect(std::vector<ag::Parameter*>& out) {
    out.push_back(&weight);
    if (has_bias) {
        out.push_back(&bias);
    }
}

void Linear::collect(std::vector<const ag::Parameter*>& out) const {
    out.push_back(&weight);
    if (has_bias) {
        out.push_back(&bias);
    }
}

LayerNorm::LayerNorm(const std::string& name, int width, double eps_)
    : gamma{name + ".gamma", ag::Matrix::Ones(1, width), false},
      beta{name + ".beta", ag::Matrix::Zero(1, width), false},
      eps(eps_) {}

ag::Var LayerNorm::forward(ag::Graph& g, ag::Var x) const {
    return ag::layer_norm(x, g.param(gamma), g.param(beta), eps);
}

void LayerNorm::collect(std::vector<ag::Parameter*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
}

void LayerNorm::collect(std::vector<const ag::Parameter*>& out) const {
    out.push_back(&gamma);
    out.push_back(&beta);
}

Mlp::Mlp(const std::string& name, const std::vector<int>& widths, Rng& rng) {
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        layers.emplace_back(name + "." + std::to_string(i), widths[i], widths[i + 1], rng);
    }
}

ag::Var Mlp::forward(ag::Graph& g, ag::Var x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        x = layers[i].forward(g, x);
        if (i + 1 < layers.size()) {
            x = ag::gelu(x);
        }
    }
    return x;
}

void Mlp::collect(std::vector<ag::Parameter*>& out) {
    for (Linear& l : layers) {
        l.collect(out);
    }
}

void Mlp::collect(std::vector<const ag::Parameter*>& out) const {
    for (const Linear& l : layers) {
        l.collect(out);
    }
}

} // namespace relvit
