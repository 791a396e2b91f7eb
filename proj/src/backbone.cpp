#include "relvit/backbone.hpp"

#include <cmath>
#include <string>

#include "relvit/errors.hpp"

namespace relvit {

std::string_view to_string(SummaryMode m) { return m == SummaryMode::max_pool ? "max_pool" : "cls_token"; }

SummaryMode parse_summary_mode(std::string_view s) {
    if (s == "max_pool") {
        return SummaryMode::max_pool;
    }
    if (s == "cls_token") {
        return SummaryMode::cls_token;
    }
    throw DomainError("unknown summary mode '" + std::string(s) + "'");
}

void BackboneConfig::validate() const {
    if (patch_size <= 0 || image_height <= 0 || image_width <= 0 || channels <= 0) {
        throw DomainError("backbone: image size, channels and patch size must be positive");
    }
    if (image_height % patch_size != 0 || image_width % patch_size != 0) {
        throw DomainError("backbone: image " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                          " not divisible by patch size " + std::to_string(patch_size));
    }
    if (stages.empty()) {
        throw DomainError("backbone: at least one stage required");
    }
    int rows = image_height / patch_size;
    int cols = image_width / patch_size;
    for (std::size_t s = 0; s < stages.size(); ++s) {
        const StageConfig& st = stages[s];
        if (st.depth < 0 || st.width <= 0 || st.heads <= 0 || st.width % st.heads != 0) {
            throw DomainError("backbone: stage " + std::to_string(s) + " width must be divisible by heads");
        }
        if (s > 0 && st.downsample) {
            if (rows % 2 != 0 || cols % 2 != 0) {
                throw DomainError("backbone: stage " + std::to_string(s) + " cannot merge a " + std::to_string(rows) +
                                  "x" + std::to_string(cols) + " token grid");
            }
            rows /= 2;
            cols /= 2;
        }
    }
    if (mlp_ratio <= 0 || !(ln_eps > 0)) {
        throw DomainError("backbone: mlp_ratio and ln_eps must be positive");
    }
}

std::pair<int, int> BackboneConfig::final_grid() const {
    int rows = image_height / patch_size;
    int cols = image_width / patch_size;
    for (std::size_t s = 1; s < stages.size(); ++s) {
        if (stages[s].downsample) {
            rows /= 2;
            cols /= 2;
        }
    }
    return {rows, cols};
}

ag::Matrix tokenize(const Image& image, int patch_size) {
    if (patch_size <= 0 || image.height % patch_size != 0 || image.width % patch_size != 0) {
        throw DomainError("tokenize: image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                          " not divisible by patch size " + std::to_string(patch_size));
    }
    const int rows = image.height / patch_size;
    const int cols = image.width / patch_size;
    ag::Matrix out(rows * cols, patch_size * patch_size * image.channels);
    for (int pr = 0; pr < rows; ++pr) {
        for (int pc = 0; pc < cols; ++pc) {
            const int n = pr * cols + pc;
            int k = 0;
            for (int dy = 0; dy < patch_size; ++dy) {
                for (int dx = 0; dx < patch_size; ++dx) {
                    for (int c = 0; c < image.channels; ++c) {
                        out(n, k++) = image.at(pr * patch_size + dy, pc * patch_size + dx, c);
                    }
                }
            }
        }
    }
    return out;
}

Eigen::RowVectorXd summarize(const TokenSequence& tokens, SummaryMode mode) {
    if (tokens.tokens.rows() == 0) {
        throw DomainError("summarize: empty token sequence");
    }
    if (mode == SummaryMode::cls_token) {
        return tokens.cls ? *tokens.cls : Eigen::RowVectorXd(tokens.tokens.row(0));
    }
    return tokens.tokens.colwise().maxCoeff();
}

ag::Var BackboneOutput::summary(SummaryMode mode) const {
    if (mode == SummaryMode::cls_token) {
        return cls ? *cls : ag::gather_rows(tokens, {0});
    }
    return ag::max_rows(tokens);
}

TokenSequence BackboneOutput::values() const {
    TokenSequence t{tokens.value(), grid_rows, grid_cols, std::nullopt};
    if (cls) {
        t.cls = Eigen::RowVectorXd(cls->value().row(0));
    }
    return t;
}

Backbone::Backbone(BackboneConfig config, Rng& rng) : config_(std::move(config)) {
    config_.validate();
    const int t = config_.patch_size;
    const int n0 = (config_.image_height / t) * (config_.image_width / t);
    const int w0 = config_.stages.front().width;
    patch_embed_ = Linear("patch_embed", t * t * config_.channels, w0, rng);
    pos_embed_ = ag::Parameter{"pos_embed", ag::Matrix(n0, w0), false};
    for (Eigen::Index i = 0; i < pos_embed_.value.size(); ++i) {
        pos_embed_.value.data()[i] = rng.truncated_normal(0.02);
    }
    int prev = w0;
    for (std::size_t s = 0; s < config_.stages.size(); ++s) {
        const StageConfig& sc = config_.stages[s];
        const std::string prefix = "stage" + std::to_string(s);
        Stage stage;
        if (s > 0 && sc.downsample) {
            stage.merge_norm = LayerNorm(prefix + ".merge.norm", 4 * prev, config_.ln_eps);
            stage.reduce = Linear(prefix + ".merge.reduce", 4 * prev, sc.width, rng, false);
        } else if (sc.width != prev) {
            stage.reduce = Linear(prefix + ".proj", prev, sc.width, rng);
        }
        for (int b = 0; b < sc.depth; ++b) {
            const std::string bp = prefix + ".block" + std::to_string(b);
            Block blk;
            blk.ln1 = LayerNorm(bp + ".ln1", sc.width, config_.ln_eps);
            blk.qkv = Linear(bp + ".attn.qkv", sc.width, 3 * sc.width, rng);
            blk.proj = Linear(bp + ".attn.proj", sc.width, sc.width, rng);
            blk.ln2 = LayerNorm(bp + ".ln2", sc.width, config_.ln_eps);
            blk.mlp = Mlp(bp + ".mlp", {sc.width, config_.mlp_ratio * sc.width, sc.width}, rng);
            blk.heads = sc.heads;
            stage.blocks.push_back(std::move(blk));
        }
        stages_.push_back(std::move(stage));
        prev = sc.width;
    }
    if (config_.summary_mode == SummaryMode::cls_token) {
        cls_token_ = ag::Parameter{"cls_token", ag::Matrix(1, prev), false};
        for (Eigen::Index i = 0; i < cls_token_->value.size(); ++i) {
            cls_token_->value.data()[i] = rng.truncated_normal(0.02);
        }
    }
    final_norm_ = LayerNorm("final_norm", prev, config_.ln_eps);
}

ag::Var Backbone::block_forward(ag::Graph& g, const Block& b, ag::Var x) const {
    if (config_.attention) {
        const ag::Var h = b.ln1.forward(g, x);
        const ag::Var qkv = b.qkv.forward(g, h);
        const Eigen::Index width = x.cols();
        const Eigen::Index dh = width / b.heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<ag::Var> heads;
        heads.reserve(static_cast<std::size_t>(b.heads));
        for (int k = 0; k < b.heads; ++k) {
            const ag::Var q = ag::slice_cols(qkv, k * dh, dh);
            const ag::Var key = ag::slice_cols(qkv, width + k * dh, dh);
            const ag::Var v = ag::slice_cols(qkv, 2 * width + k * dh, dh);
            const ag::Var attn = ag::softmax_rows(ag::scale(ag::matmul(q, ag::transpose(key)), scale));
            heads.push_back(ag::matmul(attn, v));
        }
        x = ag::add(x, b.proj.forward(g, ag::concat_cols(heads)));
    }
    return ag::add(x, b.mlp.forward(g, b.ln2.forward(g, x)));
}

BackboneOutput Backbone::forward(ag::Graph& g, const Image& image) const {
    if (image.height != config_.image_height || image.width != config_.image_width ||
        image.channels != config_.channels) {
        throw DomainError("backbone: input " + std::to_string(image.height) + "x" + std::to_string(image.width) + "x" +
                          std::to_string(image.channels) + " does not match config");
    }
    int rows = config_.image_height / config_.patch_size;
    int cols = config_.image_width / config_.patch_size;
    ag::Var x = patch_embed_.forward(g, g.constant(tokenize(image, config_.patch_size)));
    x = ag::add(x, g.param(pos_embed_));

    bool has_cls = false;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
        const Stage& stage = stages_[s];
        if (stage.merge_norm) {
            std::vector<ag::Var> parts;
            for (auto [dy, dx] : {std::pair{0, 0}, {1, 0}, {0, 1}, {1, 1}}) {
                std::vector<int> idx;
                for (int r = 0; r < rows / 2; ++r) {
                    for (int c = 0; c < cols / 2; ++c) {
                        idx.push_back((2 * r + dy) * cols + 2 * c + dx);
                    }
                }
                parts.push_back(ag::gather_rows(x, std::move(idx)));
            }
            rows /= 2;
            cols /= 2;
            x = stage.reduce->forward(g, stage.merge_norm->forward(g, ag::concat_cols(parts)));
        } else if (stage.reduce) {
            x = stage.reduce->forward(g, x);
        }
        if (cls_token_ && s + 1 == stages_.size()) {
            const ag::Var parts[] = {g.param(*cls_token_), x};
            x = ag::concat_rows(parts);
            has_cls = true;
        }
        for (const Block& b : stage.blocks) {
            x = block_forward(g, b, x);
        }
        if (!x.value().allFinite()) {
            throw NumericError("backbone: non-finite activation in stage " + std::to_string(s));
        }
    }
    x = final_norm_.forward(g, x);

    BackboneOutput out;
    out.grid_rows = rows;
    out.grid_cols = cols;
    if (has_cls) {
        std::vector<int> idx(static_cast<std::size_t>(rows * cols));
        for (std::size_t i = 0; i < idx.size(); ++i) {
            idx[i] = static_cast<int>(i) + 1;
        }
        out.cls = ag::gather_rows(x, {0});
        out.tokens = ag::gather_rows(x, std::move(idx));
    } else {
        out.tokens = x;
    }
    return out;
}

TokenSequence Backbone::forward(const Image& image) const {
    ag::Graph g(false);
    return forward(g, image).values();
}

std::vector<ag::Parameter*> Backbone::parameters() {
    std::vector<ag::Parameter*> out;
    patch_embed_.collect(out);
    out.push_back(&pos_embed_);
    for (Stage& s : stages_) {
        if (s.merge_norm) {
            s.merge_norm->collect(out);
        }
        if (s.reduce) {
            s.reduce->collect(out);
        }
        for (Block& b : s.blocks) {
            b.ln1.collect(out);
            b.qkv.collect(out);
            b.proj.collect(out);
            b.ln2.collect(out);
            b.mlp.collect(out);
        }
    }
    if (cls_token_) {
        out.push_back(&*cls_token_);
    }
    final_norm_.collect(out);
    return out;
}

std::vector<const ag::Parameter*> Backbone::parameters() const {
    auto mut = const_cast<Backbone*>(this)->parameters();
    return {mut.begin(), mut.end()};
}

} // namespace relvit
