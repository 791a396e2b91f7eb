#pragma once

#include <optional>
#include <string_view>
#include <utility>
#include <vector>

#include "relvit/autograd.hpp"
#include "relvit/image.hpp"
#include "relvit/layers.hpp"
#include "relvit/rng.hpp"
#include "relvit/token_sequence.hpp"

namespace relvit {

struct StageConfig {
    int depth = 2;
    int width = 64;
    int heads = 4;
    /// 2x2 token merging at the start of this stage (ignored for stage 0).
    bool downsample = false;
};

enum class SummaryMode { max_pool, cls_token };

std::string_view to_string(SummaryMode m);
SummaryMode parse_summary_mode(std::string_view s);

struct BackboneConfig {
    int image_height = 64;
    int image_width = 64;
    int channels = 3;
    int patch_size = 8;
    std::vector<StageConfig> stages{{2, 64, 4, false}, {2, 128, 4, true}};
    SummaryMode summary_mode = SummaryMode::max_pool;
    int mlp_ratio = 4;
    double ln_eps = 1e-6;
    /// Disabling attention leaves only per-token MLP/merging paths (locality checks).
    bool attention = true;

    void validate() const;
    /// Token grid (rows, cols) produced by the final stage.
    std::pair<int, int> final_grid() const;
    int output_dim() const { return stages.back().width; }
};

/// Splits an image into N = HW/T^2 row-major patches of T*T*C values each.
ag::Matrix tokenize(const Image& image, int patch_size);

/// Element-wise max over tokens (max_pool) or the designated token (cls_token).
/// Without a stored [CLS] token the first token is the designated one.
Eigen::RowVectorXd summarize(const TokenSequence& tokens, SummaryMode mode);

/// Graph-level output of a forward pass.
struct BackboneOutput {
    ag::Var tokens;  // N x d
    std::optional<ag::Var> cls;
    int grid_rows = 0;
    int grid_cols = 0;

    ag::Var summary(SummaryMode mode) const;
    TokenSequence values() const;
};

/// Small multi-stage vision transformer (pre-norm blocks, learned absolute
/// position embeddings, 2x2 token merging between stages).
class Backbone {
public:
    Backbone() = default;
    Backbone(BackboneConfig config, Rng& rng);

    const BackboneConfig& config() const { return config_; }

    BackboneOutput forward(ag::Graph& g, const Image& image) const;
    /// Value-only forward pass.
    TokenSequence forward(const Image& image) const;

    std::vector<ag::Parameter*> parameters();
    std::vector<const ag::Parameter*> parameters() const;

private:
    struct Block {
        LayerNorm ln1;
        Linear qkv;
        Linear proj;
        LayerNorm ln2;
        Mlp mlp;
        int heads = 1;
    };
    struct Stage {
        std::optional<LayerNorm> merge_norm;
        std::optional<Linear> reduce;
        std::vector<Block> blocks;
    };

    ag::Var block_forward(ag::Graph& g, const Block& b, ag::Var x) const;

    BackboneConfig config_;
    Linear patch_embed_;
    ag::Parameter pos_embed_;
    std::optional<ag::Parameter> cls_token_;
    std::vector<Stage> stages_;
    LayerNorm final_norm_;
};

} // namespace relvit
