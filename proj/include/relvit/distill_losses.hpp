#pragma once

#include <span>
#include <string>
#include <vector>

#include "relvit/autograd.hpp"
#include "relvit/backbone.hpp"
#include "relvit/layers.hpp"
#include "relvit/token_sequence.hpp"

namespace relvit {

struct HeadConfig {
    int hidden = 256;
    int out = 256;
    /// Number of linear layers in the MLP.
    int layers = 3;
};

/// MLP mapping d-dimensional features to K logits.
class ProjectionHead {
public:
    ProjectionHead() = default;
    ProjectionHead(const std::string& name, int in_dim, const HeadConfig& cfg, Rng& rng);

    ag::Var forward(ag::Graph& g, ag::Var features) const;
    /// Value-only logits for a stack of feature rows.
    ag::Matrix logits(const ag::Matrix& features) const;

    int out_dim() const;

    std::vector<ag::Parameter*> parameters();
    std::vector<const ag::Parameter*> parameters() const;

private:
    Mlp mlp_;
};

/// Running mean of teacher logits subtracted before the teacher softmax.
struct TeacherCenter {
    Eigen::RowVectorXd center;
    double momentum = 0.9;

    TeacherCenter() = default;
    TeacherCenter(int k, double m) : center(Eigen::RowVectorXd::Zero(k)), momentum(m) {}

    /// center <- m * center + (1 - m) * mean over rows of `logits`.
    void update(const ag::Matrix& logits);
};

struct Temperatures {
    double teacher = 0.04;
    double student = 0.1;
};

/// softmax((logits - center) / tau_teacher), row-wise. Pure.
ag::Matrix teacher_probabilities(const ag::Matrix& logits, const Eigen::RowVectorXd& center, double tau_teacher);

/// teacher_probabilities followed by a center update with the batch mean of `logits`.
ag::Matrix teacher_distribution(const ag::Matrix& logits, TeacherCenter& center, double tau_teacher);

/// Backbone plus the global and local projection heads of one side.
struct DistillationNetwork {
    Backbone backbone;
    ProjectionHead global_head;
    ProjectionHead local_head;

    DistillationNetwork() = default;
    DistillationNetwork(const BackboneConfig& backbone_cfg, const HeadConfig& head_cfg, Rng& rng);

    std::vector<ag::Parameter*> parameters();
    std::vector<const ag::Parameter*> parameters() const;
};

/// Student/teacher networks, EMA momentum, temperatures and teacher centers.
struct DistillationPair {
    DistillationNetwork student;
    DistillationNetwork teacher;
    double momentum = 0.999;
    Temperatures temperatures;
    TeacherCenter global_center;
    TeacherCenter local_center;

    DistillationPair() = default;
    /// Teacher starts as an exact copy of the student.
    DistillationPair(const BackboneConfig& backbone_cfg, const HeadConfig& head_cfg, Rng& rng, double momentum = 0.999,
                     Temperatures temps = {}, double center_momentum = 0.9);
};

/// theta_t <- lambda * theta_t + (1 - lambda) * theta_s for every parameter pair.
void ema_update(std::span<ag::Parameter* const> teacher, std::span<const ag::Parameter* const> student,
                double momentum);
void ema_update(DistillationPair& pair);

/// Per student token i, the index of the f-token with maximal cosine
/// similarity; ties resolve to the lowest index.
std::vector<int> match_tokens(const ag::Matrix& f_tokens, const ag::Matrix& student_tokens);

/// One auxiliary-loss sample: a stored (or fallback) teacher feature and the
/// student output for view 2.
struct AuxSample {
    const TokenSequence* target = nullptr;
    BackboneOutput student;
};

/// Auxiliary losses of a batch plus the teacher logits used for center updates.
struct AuxLosses {
    ag::Var global;
    ag::Var local;
    ag::Matrix teacher_global_logits;
    ag::Matrix teacher_local_logits;
};

/// Concept-guided global loss, averaged over the batch:
/// -sum_k P_t,k log P_s,k with P_t from the teacher head on summarize(f).
ag::Var global_loss(ag::Graph& g, std::span<const AuxSample> batch, const DistillationPair& pair, SummaryMode mode,
                    ag::Matrix* teacher_logits = nullptr);

/// Concept-guided local loss, averaged over tokens and batch, using greedy
/// cosine matching of student tokens onto f-tokens.
ag::Var local_loss(ag::Graph& g, std::span<const AuxSample> batch, const DistillationPair& pair,
                   ag::Matrix* teacher_logits = nullptr);

AuxLosses aux_losses(ag::Graph& g, std::span<const AuxSample> batch, const DistillationPair& pair, SummaryMode mode);

/// main + alpha * (global + local).
struct LossBundle {
    double main = 0.0;
    double global = 0.0;
    double local = 0.0;
    double aux = 0.0;
    double total = 0.0;
    double alpha = 0.1;
};

LossBundle combine(double main, double global, double local, double alpha);

} // namespace relvit
