#include "relvit/distill_losses.hpp"

#include <cmath>
#include <utility>

#include "relvit/errors.hpp"

namespace relvit {

ProjectionHead::ProjectionHead(const std::string& name, int in_dim, const HeadConfig& cfg, Rng& rng) {
    if (cfg.layers < 1 || cfg.hidden <= 0 || cfg.out <= 0) {
        throw DomainError("projection head: layers, hidden and out must be positive");
    }
    std::vector<int> widths{in_dim};
    for (int i = 0; i + 1 < cfg.layers; ++i) {
        widths.push_back(cfg.hidden);
    }
    widths.push_back(cfg.out);
    mlp_ = Mlp(name, widths, rng);
}

ag::Var ProjectionHead::forward(ag::Graph& g, ag::Var features) const { return mlp_.forward(g, features); }

ag::Matrix ProjectionHead::logits(const ag::Matrix& features) const {
    ag::Graph g(false);
    return mlp_.forward(g, g.constant(features)).value();
}

int ProjectionHead::out_dim() const { return static_cast<int>(mlp_.layers.back().weight.value.cols()); }

std::vector<ag::Parameter*> ProjectionHead::parameters() {
    std::vector<ag::Parameter*> out;
    mlp_.collect(out);
    return out;
}

std::vector<const ag::Parameter*> ProjectionHead::parameters() const {
    std::vector<const ag::Parameter*> out;
    mlp_.collect(out);
    return out;
}

void TeacherCenter::update(const ag::Matrix& logits) {
    if (logits.rows() == 0) {
        return;
    }
    if (logits.cols() != center.size()) {
        throw DomainError("center update: logit width does not match center");
    }
    if (!logits.allFinite()) {
        throw NumericError("center update: non-finite teacher logits");
    }
    center = momentum * center + (1.0 - momentum) * logits.colwise().mean();
}

ag::Matrix teacher_probabilities(const ag::Matrix& logits, const Eigen::RowVectorXd& center, double tau_teacher) {
    if (!logits.allFinite()) {
        throw NumericError("teacher distribution: non-finite logits");
    }
    if (!(tau_teacher > 0)) {
        throw DomainError("teacher temperature must be positive");
    }
    if (logits.cols() != center.size()) {
        throw DomainError("teacher distribution: logit width does not match center");
    }
    ag::Matrix shifted = logits;
    shifted.rowwise() -= center;
    return ag::softmax_rows(shifted, 1.0 / tau_teacher);
}

ag::Matrix teacher_distribution(const ag::Matrix& logits, TeacherCenter& center, double tau_teacher) {
    ag::Matrix p = teacher_probabilities(logits, center.center, tau_teacher);
    center.update(logits);
    return p;
}

DistillationNetwork::DistillationNetwork(const BackboneConfig& backbone_cfg, const HeadConfig& head_cfg, Rng& rng)
    : backbone(backbone_cfg, rng),
      global_head("global_head", backbone_cfg.output_dim(), head_cfg, rng),
      local_head("local_head", backbone_cfg.output_dim(), head_cfg, rng) {}

std::vector<ag::Parameter*> DistillationNetwork::parameters() {
    auto out = backbone.parameters();
    for (ag::Parameter* p : global_head.parameters()) {
        out.push_back(p);
    }
    for (ag::Parameter* p : local_head.parameters()) {
        out.push_back(p);
    }
    return out;
}

std::vector<const ag::Parameter*> DistillationNetwork::parameters() const {
    auto mut = const_cast<DistillationNetwork*>(this)->parameters();
    return {mut.begin(), mut.end()};
}

DistillationPair::DistillationPair(const BackboneConfig& backbone_cfg, const HeadConfig& head_cfg, Rng& rng,
                                   double momentum_, Temperatures temps, double center_momentum)
    : student(backbone_cfg, head_cfg, rng),
      teacher(student),
      momentum(momentum_),
      temperatures(temps),
      global_center(head_cfg.out, center_momentum),
      local_center(head_cfg.out, center_momentum) {}

void ema_update(std::span<ag::Parameter* const> teacher, std::span<const ag::Parameter* const> student,
                double momentum) {
    if (teacher.size() != student.size()) {
        throw DomainError("ema_update: parameter lists differ in length");
    }
    for (std::size_t i = 0; i < teacher.size(); ++i) {
        ag::Matrix& t = teacher[i]->value;
        const ag::Matrix& s = student[i]->value;
        if (t.rows() != s.rows() || t.cols() != s.cols()) {
            throw DomainError("ema_update: shape mismatch for '" + teacher[i]->name + "'");
        }
    }
    for (std::size_t i = 0; i < teacher.size(); ++i) {
        teacher[i]->value = momentum * teacher[i]->value + (1.0 - momentum) * student[i]->value;
    }
}

void ema_update(DistillationPair& pair) {
    const auto t = pair.teacher.parameters();
    const auto s = std::as_const(pair.student).parameters();
    ema_update(t, s, pair.momentum);
}

std::vector<int> match_tokens(const ag::Matrix& f_tokens, const ag::Matrix& student_tokens) {
    if (f_tokens.rows() != student_tokens.rows() || f_tokens.cols() != student_tokens.cols()) {
        throw DomainError("match_tokens: token sets differ in count or dimension");
    }
    const Eigen::VectorXd fn = f_tokens.rowwise().norm();
    const Eigen::VectorXd sn = student_tokens.rowwise().norm();
    if ((fn.array() == 0.0).any() || (sn.array() == 0.0).any()) {
        throw DomainError("match_tokens: zero-norm token");
    }
    const ag::Matrix sim = (student_tokens.array().colwise() / sn.array()).matrix() *
                           (f_tokens.array().colwise() / fn.array()).matrix().transpose();
    std::vector<int> out(static_cast<std::size_t>(sim.rows()));
    for (Eigen::Index i = 0; i < sim.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < sim.cols(); ++j) {
            if (sim(i, j) > sim(i, best)) {
                best = j;
            }
        }
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

ag::Var global_loss(ag::Graph& g, std::span<const AuxSample> batch, const DistillationPair& pair, SummaryMode mode,
                    ag::Matrix* teacher_logits) {
    if (batch.empty()) {
        throw DomainError("global_loss: empty batch");
    }
    const Eigen::Index d = batch.front().target->dim();
    ag::Matrix summaries(static_cast<Eigen::Index>(batch.size()), d);
    std::vector<ag::Var> student;
    student.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (batch[i].target->dim() != batch[i].student.tokens.cols()) {
            throw DomainError("global_loss: feature and student dimensions differ");
        }
        summaries.row(static_cast<Eigen::Index>(i)) = summarize(*batch[i].target, mode);
        student.push_back(batch[i].student.summary(mode));
    }
    ag::Matrix logits = pair.teacher.global_head.logits(summaries);
    const ag::Matrix targets = teacher_probabilities(logits, pair.global_center.center, pair.temperatures.teacher);
    const ag::Var s_logits = pair.student.global_head.forward(g, ag::concat_rows(student));
    if (teacher_logits != nullptr) {
        *teacher_logits = std::move(logits);
    }
    return ag::soft_cross_entropy(s_logits, targets, pair.temperatures.student);
}

ag::Var local_loss(ag::Graph& g, std::span<const AuxSample> batch, const DistillationPair& pair,
                   ag::Matrix* teacher_logits) {
    if (batch.empty()) {
        throw DomainError("local_loss: empty batch");
    }
    const Eigen::Index n = batch.front().target->size();
    const Eigen::Index k = pair.teacher.local_head.out_dim();
    const auto rows = static_cast<Eigen::Index>(batch.size()) * n;
    ag::Matrix targets(rows, k);
    ag::Matrix all_logits(rows, k);
    std::vector<ag::Var> student;
    student.reserve(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const ag::Matrix& f = batch[b].target->tokens;
        if (f.rows() != n) {
            throw DomainError("local_loss: token counts differ within the batch");
        }
        const std::vector<int> match = match_tokens(f, batch[b].student.tokens.value());
        const ag::Matrix logits = pair.teacher.local_head.logits(f);
        const ag::Matrix p = teacher_probabilities(logits, pair.local_center.center, pair.temperatures.teacher);
        const Eigen::Index base = static_cast<Eigen::Index>(b) * n;
        for (Eigen::Index i = 0; i < n; ++i) {
            targets.row(base + i) = p.row(match[static_cast<std::size_t>(i)]);
        }
        all_logits.middleRows(base, n) = logits;
        student.push_back(batch[b].student.tokens);
    }
    const ag::Var s_logits = pair.student.local_head.forward(g, ag::concat_rows(student));
    if (teacher_logits != nullptr) {
        *teacher_logits = std::move(all_logits);
    }
    return ag::soft_cross_entropy(s_logits, targets, pair.temperatures.student);
}

AuxLosses aux_losses(ag::Graph& g, std::span<const AuxSample> batch, const DistillationPair& pair, SummaryMode mode) {
    AuxLosses out;
    out.global = global_loss(g, batch, pair, mode, &out.teacher_global_logits);
    out.local = local_loss(g, batch, pair, &out.teacher_local_logits);
    return out;
}

LossBundle combine(double main, double global, double local, double alpha) {
    if (!std::isfinite(main) || !std::isfinite(global) || !std::isfinite(local) || !std::isfinite(alpha)) {
        throw NumericError("combine: non-finite loss component");
    }
    if (alpha < 0) {
        throw DomainError("combine: alpha must be >= 0");
    }
    LossBundle b;
    b.main = main;
    b.global = global;
    b.local = local;
    b.alpha = alpha;
    b.aux = global + local;
    b.total = main + alpha * b.aux;
    return b;
}

} // namespace relvit
