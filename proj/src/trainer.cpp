#include "relvit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <utility>

#include "relvit/errors.hpp"

namespace relvit {

namespace {

constexpr char kCheckpointMagic[4] = {'R', 'V', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;
// Stream id that keeps the per-epoch shuffle independent of per-sample view seeds.
constexpr std::uint64_t kOrderStream = 0x6f72646572ULL;

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::array<std::pair<std::string_view, E>, N>& table, const char* what) {
    for (const auto& [name, value] : table) {
        if (name == s) {
            return value;
        }
    }
    std::string options;
    for (const auto& [name, value] : table) {
        options += (options.empty() ? "" : ", ") + std::string(name);
    }
    throw ConfigError(std::string(what) + " must be one of {" + options + "}, got '" + std::string(s) + "'");
}

template <typename E, std::size_t N>
std::string_view enum_name(E v, const std::array<std::pair<std::string_view, E>, N>& table) {
    for (const auto& [name, value] : table) {
        if (value == v) {
            return name;
        }
    }
    return "?";
}

const std::array<std::pair<std::string_view, LossTasks>, 4> kTasks{
    {{"none", LossTasks::none}, {"global", LossTasks::global}, {"local", LossTasks::local}, {"both", LossTasks::both}}};
const std::array<std::pair<std::string_view, AuxTarget>, 3> kTargets{
    {{"dictionary", AuxTarget::dictionary}, {"teacher_view", AuxTarget::teacher_view}, {"both", AuxTarget::both}}};
const std::array<std::pair<std::string_view, MainHeadKind>, 2> kHeads{
    {{"linear", MainHeadKind::linear}, {"factorized", MainHeadKind::factorized}}};
const std::array<std::pair<std::string_view, MainTaskKind>, 2> kMainTasks{
    {{"multi_label", MainTaskKind::multi_label}, {"single_answer", MainTaskKind::single_answer}}};
const std::array<std::pair<std::string_view, ConceptScheme>, 3> kSchemes{
    {{"triple", ConceptScheme::triple}, {"predicate", ConceptScheme::predicate}, {"shape", ConceptScheme::shape}}};

bool uses_global(LossTasks t) { return t == LossTasks::global || t == LossTasks::both; }
bool uses_local(LossTasks t) { return t == LossTasks::local || t == LossTasks::both; }

void require(bool ok, const std::string& message) {
    if (!ok) {
        throw ConfigError(message);
    }
}

std::vector<ConceptId> scheme_inventory(std::span<const ConceptId> classes, ConceptScheme scheme) {
    return scheme_concepts(classes, scheme);
}

FeatureShape feature_shape(const BackboneConfig& cfg) {
    const auto [rows, cols] = cfg.final_grid();
    return {rows, cols, cfg.output_dim(), cfg.summary_mode == SummaryMode::cls_token};
}

void write_params(BinaryWriter& w, const std::vector<const ag::Parameter*>& params) {
    w.u64(params.size());
    for (const ag::Parameter* p : params) {
        w.str(p->name);
        w.matrix(p->value);
    }
}

void read_params(BinaryReader& r, const std::vector<ag::Parameter*>& params, const char* what) {
    const std::uint64_t n = r.u64();
    if (n != params.size()) {
        throw LoadError(std::string("checkpoint ") + what + ": parameter count differs from the configuration");
    }
    for (ag::Parameter* p : params) {
        const std::string name = r.str();
        ag::Matrix value = r.matrix();
        if (name != p->name || value.rows() != p->value.rows() || value.cols() != p->value.cols()) {
            throw LoadError(std::string("checkpoint ") + what + ": parameter '" + name + "' does not match '" +
                            p->name + "'");
        }
        p->value = std::move(value);
    }
}

template <typename T>
std::vector<const T*> as_const_ptrs(const std::vector<T*>& v) {
    return {v.begin(), v.end()};
}

} // namespace

std::string_view to_string(LossTasks v) { return enum_name(v, kTasks); }
std::string_view to_string(AuxTarget v) { return enum_name(v, kTargets); }
std::string_view to_string(MainHeadKind v) { return enum_name(v, kHeads); }
std::string_view to_string(MainTaskKind v) { return enum_name(v, kMainTasks); }
std::string_view to_string(ConceptScheme v) { return enum_name(v, kSchemes); }
LossTasks parse_loss_tasks(std::string_view s) { return parse_enum(s, kTasks, "loss.tasks"); }
AuxTarget parse_aux_target(std::string_view s) { return parse_enum(s, kTargets, "loss.target"); }
MainHeadKind parse_main_head(std::string_view s) { return parse_enum(s, kHeads, "head.main"); }
MainTaskKind parse_main_task(std::string_view s) { return parse_enum(s, kMainTasks, "loss.main_task"); }
ConceptScheme parse_concept_scheme(std::string_view s) { return parse_enum(s, kSchemes, "dictionary.scheme"); }

// -- configuration -------------------------------------------------------------

void TrainConfig::validate() const {
    require(std::isfinite(optimizer.lr) && optimizer.lr > 0, "train.lr must be > 0");
    require(optimizer.eps > 0, "train.eps must be > 0");
    require(optimizer.weight_decay >= 0, "train.weight_decay must be ≥ 0");
    require(optimizer.beta1 >= 0 && optimizer.beta1 < 1, "train.beta1 must be in [0, 1)");
    require(optimizer.beta2 >= 0 && optimizer.beta2 < 1, "train.beta2 must be in [0, 1)");
    require(batch_size > 0, "train.batch_size must be > 0");
    require(epochs > 0, "train.epochs must be > 0");
    require(lr_factor > 0, "train.lr_factor must be > 0");
    if (grad_clip_norm) {
        require(*grad_clip_norm > 0, "train.grad_clip_norm must be > 0");
    }
    for (std::size_t i = 0; i < milestones.size(); ++i) {
        require(milestones[i] > 0, "train.milestones must be positive");
        if (i > 0) {
            require(milestones[i] > milestones[i - 1], "train.milestones must be strictly increasing");
        }
    }
}

std::vector<int> TrainConfig::resolved_milestones() const {
    if (!milestones.empty()) {
        return milestones;
    }
    std::vector<int> out;
    for (int m : {epochs / 2, 5 * epochs / 6}) {
        if (m > 0 && (out.empty() || m > out.back())) {
            out.push_back(m);
        }
    }
    return out;
}

double TrainConfig::lr_at(int epoch) const {
    double lr = optimizer.lr;
    for (int m : resolved_milestones()) {
        if (epoch >= m) {
            lr *= lr_factor;
        }
    }
    return lr;
}

void TrainerConfig::validate() const {
    try {
        backbone.validate();
    } catch (const DomainError& e) {
        throw ConfigError(e.what());
    }
    require(head.hidden > 0 && head.out > 0 && head.layers >= 1, "head sizes must be positive");
    require(ema_momentum >= 0 && ema_momentum <= 1, "ema.lambda must be in [0, 1]");
    require(std::isfinite(loss.alpha) && loss.alpha >= 0, "loss.alpha must be ≥ 0");
    require(loss.temperatures.teacher > 0, "loss.tau_teacher must be > 0");
    require(loss.temperatures.student > 0, "loss.tau_student must be > 0");
    require(loss.center_momentum >= 0 && loss.center_momentum <= 1, "loss.center_momentum must be in [0, 1]");
    require(dictionary.capacity >= 1, "dictionary.capacity must be ≥ 1");
    require(dictionary.enqueue_view == 1 || dictionary.enqueue_view == 2, "dictionary.enqueue_view must be 1 or 2");
    if (loss.tasks != LossTasks::none) {
        require(augmentation.out_height == backbone.image_height && augmentation.out_width == backbone.image_width,
                "augmentation output size must equal the backbone image size");
        try {
            augmentation.validate(backbone.patch_size);
        } catch (const DomainError& e) {
            throw ConfigError(e.what());
        }
    }
    train.validate();
}

// -- main head and loss ----------------------------------------------------------

MainHead::MainHead(MainHeadKind kind, int in_dim, std::span<const ConceptId> classes, Rng& rng)
    : kind_(kind), classes_(static_cast<int>(classes.size())) {
    if (classes.empty()) {
        throw ConfigError("main head needs at least one class");
    }
    if (kind == MainHeadKind::linear) {
        linear_ = Linear("main_head", in_dim, classes_, rng);
        return;
    }
    std::vector<std::vector<std::string>> atoms;
    for (const ConceptId& c : classes) {
        atoms.push_back(atoms_of(c));
        if (atoms.back().size() != 3) {
            throw ConfigError("head.main 'factorized' needs subject:predicate:object classes, got '" + c.str() +
                              "'");
        }
    }
    static constexpr const char* kPart[3] = {"subject", "predicate", "object"};
    for (int k = 0; k < 3; ++k) {
        std::set<std::string> vocab_set;
        for (const auto& a : atoms) {
            vocab_set.insert(a[static_cast<std::size_t>(k)]);
        }
        const std::vector<std::string> vocab(vocab_set.begin(), vocab_set.end());
        parts_.emplace_back(std::string("main_head.") + kPart[k], in_dim, static_cast<int>(vocab.size()), rng, k == 0);
        ag::Matrix sel = ag::Matrix::Zero(static_cast<Eigen::Index>(vocab.size()), classes_);
        for (int c = 0; c < classes_; ++c) {
            const auto it = std::lower_bound(vocab.begin(), vocab.end(), atoms[static_cast<std::size_t>(c)][static_cast<std::size_t>(k)]);
            sel(std::distance(vocab.begin(), it), c) = 1.0;
        }
        selectors_.push_back(std::move(sel));
    }
}

ag::Var MainHead::forward(ag::Graph& g, ag::Var features) const {
    if (kind_ == MainHeadKind::linear) {
        return linear_.forward(g, features);
    }
    ag::Var out = ag::matmul(parts_[0].forward(g, features), g.constant(selectors_[0]));
    for (std::size_t k = 1; k < parts_.size(); ++k) {
        out = ag::add(out, ag::matmul(parts_[k].forward(g, features), g.constant(selectors_[k])));
    }
    return out;
}

ag::Matrix MainHead::scores(const ag::Matrix& features) const {
    ag::Graph g(false);
    return forward(g, g.constant(features)).value();
}

std::vector<ag::Parameter*> MainHead::parameters() {
    std::vector<ag::Parameter*> out;
    if (kind_ == MainHeadKind::linear) {
        linear_.collect(out);
    } else {
        for (Linear& l : parts_) {
            l.collect(out);
        }
    }
    return out;
}

std::vector<const ag::Parameter*> MainHead::parameters() const {
    return as_const_ptrs(const_cast<MainHead*>(this)->parameters());
}

ag::Var main_loss(ag::Var logits, const ag::Matrix& targets, MainTaskKind kind) {
    if (kind == MainTaskKind::multi_label) {
        if (targets.rows() != logits.rows() || targets.cols() != logits.cols()) {
            throw DomainError("main_loss: label arity " + std::to_string(targets.cols()) + " does not match " +
                              std::to_string(logits.cols()) + " head outputs");
        }
        return ag::bce_with_logits(logits, targets);
    }
    if (targets.rows() != logits.rows() || targets.cols() != 1) {
        throw DomainError("main_loss: single-answer targets must be one index per row");
    }
    std::vector<int> answers(static_cast<std::size_t>(targets.rows()));
    for (Eigen::Index r = 0; r < targets.rows(); ++r) {
        const double a = targets(r, 0);
        if (a != std::floor(a) || a < 0 || a >= static_cast<double>(logits.cols())) {
            throw DomainError("main_loss: answer index outside the head's " + std::to_string(logits.cols()) +
                              " classes");
        }
        answers[static_cast<std::size_t>(r)] = static_cast<int>(a);
    }
    return ag::categorical_cross_entropy(logits, answers);
}

// -- optimizer ---------------------------------------------------------------------

double clip_gradients(std::span<ag::Matrix> grads, double max_norm) {
    double sq = 0.0;
    for (const ag::Matrix& g : grads) {
        sq += g.squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) {
        throw NumericError("gradient norm is not finite");
    }
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (ag::Matrix& g : grads) {
            g *= s;
        }
    }
    return norm;
}

void AdamW::step(std::span<ag::Parameter* const> params, std::span<const ag::Matrix> grads, double lr) {
    if (params.size() != grads.size()) {
        throw DomainError("AdamW: one gradient per parameter required");
    }
    if (m_.empty()) {
        for (const ag::Parameter* p : params) {
            m_.push_back(ag::Matrix::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(ag::Matrix::Zero(p->value.rows(), p->value.cols()));
        }
    }
    if (m_.size() != params.size()) {
        throw DomainError("AdamW: parameter list changed between steps");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        ag::Parameter& p = *params[i];
        const ag::Matrix& g = grads[i];
        if (g.rows() != p.value.rows() || g.cols() != p.value.cols()) {
            throw DomainError("AdamW: gradient shape mismatch for '" + p.name + "'");
        }
        if (p.decay && cfg_.weight_decay > 0) {
            p.value *= 1.0 - lr * cfg_.weight_decay;
        }
        m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
        v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
        const ag::Matrix denom = ((v_[i] / bc2).array().sqrt() + cfg_.eps).matrix();
        p.value.array() -= lr * (m_[i] / bc1).array() / denom.array();
    }
}

void AdamW::save(BinaryWriter& w) const {
    w.u64(t_);
    w.u64(m_.size());
    for (std::size_t i = 0; i < m_.size(); ++i) {
        w.matrix(m_[i]);
        w.matrix(v_[i]);
    }
}

void AdamW::load(BinaryReader& r) {
    t_ = r.u64();
    const std::uint64_t n = r.u64();
    m_.clear();
    v_.clear();
    for (std::uint64_t i = 0; i < n; ++i) {
        m_.push_back(r.matrix());
        v_.push_back(r.matrix());
    }
}

bool AdamW::operator==(const AdamW& o) const { return t_ == o.t_ && m_ == o.m_ && v_ == o.v_; }

// -- state -------------------------------------------------------------------------

std::vector<ConceptId> scheme_concepts(std::span<const ConceptId> concepts, ConceptScheme scheme) {
    std::set<ConceptId> out;
    for (const ConceptId& c : concepts) {
        if (scheme == ConceptScheme::triple) {
            out.insert(c);
            continue;
        }
        const auto atoms = atoms_of(c);
        if (atoms.size() != 3) {
            throw ConfigError("dictionary.scheme '" + std::string(to_string(scheme)) +
                              "' needs subject:predicate:object concepts, got '" + c.str() + "'");
        }
        if (scheme == ConceptScheme::predicate) {
            out.insert(ConceptId(atoms[1]));
        } else {
            out.insert(ConceptId(atoms[0]));
            out.insert(ConceptId(atoms[2]));
        }
    }
    return {out.begin(), out.end()};
}

TrainState::TrainState(const TrainerConfig& cfg, std::vector<ConceptId> classes_in)
    : config(cfg),
      classes(std::move(classes_in)),
      concepts(scheme_inventory(classes, cfg.dictionary.scheme)),
      rng(cfg.train.seed),
      pair(cfg.backbone, cfg.head, rng, cfg.ema_momentum, cfg.loss.temperatures, cfg.loss.center_momentum),
      main_head(cfg.main_head, cfg.backbone.output_dim(), classes, rng),
      dictionary(concepts, cfg.dictionary.capacity, cfg.dictionary.strategy, feature_shape(cfg.backbone)),
      optimizer(cfg.train.optimizer) {}

std::vector<ag::Parameter*> TrainState::trainable() {
    auto out = pair.student.parameters();
    for (ag::Parameter* p : main_head.parameters()) {
        out.push_back(p);
    }
    return out;
}

StepPlan plan_step(TrainState& s, std::span<const AnnotatedSample* const> batch) {
    if (batch.empty()) {
        throw DomainError("train_step: empty batch");
    }
    for (const AnnotatedSample* sample : batch) {
        if (sample->concepts.empty()) {
            throw DomainError("train_step: sample " + std::to_string(sample->id) + " has no concepts");
        }
    }
    const TrainerConfig& cfg = s.config;
    StepPlan plan;
    plan.batch.assign(batch.begin(), batch.end());
    if (cfg.loss.tasks == LossTasks::none) {
        return plan;
    }
    for (const AnnotatedSample* sample : batch) {
        const auto seed = derive_seed(cfg.train.seed, static_cast<std::uint64_t>(sample->id),
                                      static_cast<std::uint64_t>(s.epoch));
        plan.views.push_back(make_views(sample->image, cfg.augmentation, seed));
        TokenSequence t1 = s.pair.teacher.backbone.forward(plan.views.back().view1);
        plan.to_enqueue.push_back(cfg.dictionary.enqueue_view == 1
                                      ? t1
                                      : s.pair.teacher.backbone.forward(plan.views.back().view2));
        const std::vector<ConceptId> keys = scheme_concepts(sample->concepts, cfg.dictionary.scheme);
        plan.drawn.push_back(select_concept(keys, s.rng));
        if (cfg.loss.target != AuxTarget::teacher_view) {
            const FeatureEntry* entry = s.dictionary.sample(plan.drawn.back(), s.rng);
            if (entry == nullptr) {
                ++plan.fallbacks;
            }
            plan.dictionary_targets.push_back(entry != nullptr ? entry->tokens : t1);
        }
        plan.view_targets.push_back(std::move(t1));
    }
    return plan;
}

StepLosses step_losses(ag::Graph& g, const TrainState& s, const StepPlan& plan) {
    const TrainerConfig& cfg = s.config;
    const SummaryMode mode = cfg.backbone.summary_mode;
    const auto B = static_cast<Eigen::Index>(plan.batch.size());
    StepLosses out;

    // Main task on the un-augmented image.
    std::vector<ag::Var> summaries;
    ag::Matrix targets(B, cfg.loss.main_task == MainTaskKind::multi_label ? s.main_head.classes() : 1);
    for (Eigen::Index b = 0; b < B; ++b) {
        const AnnotatedSample& sample = *plan.batch[static_cast<std::size_t>(b)];
        summaries.push_back(s.pair.student.backbone.forward(g, sample.image).summary(mode));
        if (cfg.loss.main_task == MainTaskKind::multi_label) {
            if (sample.labels.size() != targets.cols()) {
                throw DomainError("train_step: label vector of sample " + std::to_string(sample.id) +
                                  " does not match the class count");
            }
            targets.row(b) = sample.labels.transpose();
        } else {
            targets(b, 0) = sample.answer;
        }
    }
    out.main = main_loss(s.main_head.forward(g, ag::concat_rows(summaries)), targets, cfg.loss.main_task);

    std::vector<ag::Var> aux_terms;
    if (cfg.loss.tasks != LossTasks::none) {
        std::vector<AuxSample> from_dict;
        std::vector<AuxSample> from_view;
        for (std::size_t b = 0; b < plan.batch.size(); ++b) {
            const BackboneOutput student = s.pair.student.backbone.forward(g, plan.views[b].view2);
            if (cfg.loss.target != AuxTarget::teacher_view) {
                from_dict.push_back({&plan.dictionary_targets[b], student});
            }
            if (cfg.loss.target != AuxTarget::dictionary) {
                from_view.push_back({&plan.view_targets[b], student});
            }
        }
        std::vector<ag::Var> globals;
        std::vector<ag::Var> locals;
        for (const std::vector<AuxSample>* set : {&from_dict, &from_view}) {
            if (set->empty()) {
                continue;
            }
            if (uses_global(cfg.loss.tasks)) {
                ag::Matrix logits;
                globals.push_back(global_loss(g, *set, s.pair, mode, &logits));
                out.teacher_global_logits.conservativeResize(out.teacher_global_logits.rows() + logits.rows(),
                                                             logits.cols());
                out.teacher_global_logits.bottomRows(logits.rows()) = logits;
            }
            if (uses_local(cfg.loss.tasks)) {
                ag::Matrix logits;
                locals.push_back(local_loss(g, *set, s.pair, &logits));
                out.teacher_local_logits.conservativeResize(out.teacher_local_logits.rows() + logits.rows(),
                                                            logits.cols());
                out.teacher_local_logits.bottomRows(logits.rows()) = logits;
            }
        }
        auto total_of = [](const std::vector<ag::Var>& v) -> std::optional<ag::Var> {
            if (v.empty()) {
                return std::nullopt;
            }
            ag::Var t = v.front();
            for (std::size_t i = 1; i < v.size(); ++i) {
                t = ag::add(t, v[i]);
            }
            return t;
        };
        out.global = total_of(globals);
        out.local = total_of(locals);
    }

    out.total = out.main;
    for (const std::optional<ag::Var>& term : {out.global, out.local}) {
        if (term) {
            out.total = ag::add(out.total, ag::scale(*term, cfg.loss.alpha));
        }
    }
    out.bundle = combine(out.main.scalar(), out.global ? out.global->scalar() : 0.0,
                         out.local ? out.local->scalar() : 0.0, cfg.loss.alpha);
    return out;
}

LossBundle train_step(TrainState& s, std::span<const AnnotatedSample* const> batch) {
    const StepPlan plan = plan_step(s, batch);
    ag::Graph g;
    const StepLosses losses = step_losses(g, s, plan);
    g.backward(losses.total);

    const std::vector<ag::Parameter*> params = s.trainable();
    std::vector<ag::Matrix> grads;
    grads.reserve(params.size());
    for (const ag::Parameter* p : params) {
        grads.push_back(g.gradient(*p));
    }
    if (s.config.train.grad_clip_norm) {
        s.last_grad_norm = clip_gradients(grads, *s.config.train.grad_clip_norm);
    } else {
        double sq = 0.0;
        for (const ag::Matrix& m : grads) {
            sq += m.squaredNorm();
        }
        s.last_grad_norm = std::sqrt(sq);
        if (!std::isfinite(s.last_grad_norm)) {
            throw NumericError("gradient norm is not finite at step " + std::to_string(s.step));
        }
    }
    s.optimizer.step(params, grads, s.config.train.lr_at(s.epoch));
    ema_update(s.pair);
    if (losses.teacher_global_logits.rows() > 0) {
        s.pair.global_center.update(losses.teacher_global_logits);
    }
    if (losses.teacher_local_logits.rows() > 0) {
        s.pair.local_center.update(losses.teacher_local_logits);
    }
    for (std::size_t b = 0; b < plan.drawn.size(); ++b) {
        s.dictionary.enqueue(plan.drawn[b], plan.to_enqueue[b]);
    }
    ++s.step;
    return losses.bundle;
}

// -- checkpoints -------------------------------------------------------------------

std::string checkpoint_bytes(const TrainState& s, std::string_view config_hash) {
    BinaryWriter body;
    body.bytes(std::string_view(kCheckpointMagic, 4));
    body.u32(kCheckpointVersion);
    body.str(config_hash);
    body.u64(s.step);
    body.u32(static_cast<std::uint32_t>(s.epoch));
    body.f64(s.last_grad_norm);
    body.str(s.rng.state());
    write_params(body, s.pair.student.parameters());
    write_params(body, s.pair.teacher.parameters());
    write_params(body, s.main_head.parameters());
    body.matrix(s.pair.global_center.center);
    body.matrix(s.pair.local_center.center);
    s.optimizer.save(body);
    body.str(s.dictionary.snapshot());
    std::string out = body.take();
    BinaryWriter tail;
    tail.u64(fnv1a64(out));
    return out + tail.buffer();
}

void restore_checkpoint(TrainState& s, std::string_view payload, std::string_view config_hash) {
    if (payload.size() < 4 + 8 || payload.substr(0, 4) != std::string_view(kCheckpointMagic, 4)) {
        throw LoadError("not a checkpoint (bad magic)");
    }
    const std::string_view body = payload.substr(0, payload.size() - 8);
    BinaryReader tail(payload.substr(payload.size() - 8));
    if (tail.u64() != fnv1a64(body)) {
        throw LoadError("checkpoint checksum mismatch");
    }
    BinaryReader r(body);
    r.bytes(4);
    if (const std::uint32_t v = r.u32(); v != kCheckpointVersion) {
        throw LoadError("unsupported checkpoint version " + std::to_string(v));
    }
    if (const std::string hash = r.str(); hash != config_hash) {
        throw ConfigError("checkpoint config hash " + hash + " does not match " + std::string(config_hash));
    }
    TrainState loaded = s;
    loaded.step = r.u64();
    loaded.epoch = static_cast<int>(r.u32());
    loaded.last_grad_norm = r.f64();
    loaded.rng.set_state(r.str());
    read_params(r, loaded.pair.student.parameters(), "student");
    read_params(r, loaded.pair.teacher.parameters(), "teacher");
    read_params(r, loaded.main_head.parameters(), "main head");
    for (TeacherCenter* c : {&loaded.pair.global_center, &loaded.pair.local_center}) {
        const ag::Matrix m = r.matrix();
        if (m.rows() != 1 || m.cols() != c->center.size()) {
            throw LoadError("checkpoint center width differs from the configuration");
        }
        c->center = m;
    }
    loaded.optimizer.load(r);
    ConceptFeatureDictionary dict = ConceptFeatureDictionary::restore(r.str());
    if (dict.shape() != s.dictionary.shape() || dict.capacity() != s.dictionary.capacity() ||
        dict.concept_count() != s.dictionary.concept_count()) {
        throw LoadError("checkpoint dictionary layout differs from the configuration");
    }
    loaded.dictionary = std::move(dict);
    if (!r.done()) {
        throw LoadError("trailing bytes in checkpoint");
    }
    s = std::move(loaded);
}

void save_checkpoint(const TrainState& s, const std::filesystem::path& path, std::string_view config_hash) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        const std::string bytes = checkpoint_bytes(s, config_hash);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) {
            throw std::ios_base::failure("cannot write checkpoint " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

void load_checkpoint(TrainState& s, const std::filesystem::path& path, std::string_view config_hash) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw LoadError("cannot open checkpoint " + path.string());
    }
    const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    restore_checkpoint(s, bytes, config_hash);
}

// -- evaluation and loop -----------------------------------------------------------

EvalResult evaluate(const TrainState& s, const Dataset& dataset, std::span<const int> indices,
                    std::span<const ConceptId> held_out) {
    if (indices.empty()) {
        throw DomainError("evaluate: no samples");
    }
    const SummaryMode mode = s.config.backbone.summary_mode;
    EvalResult out;
    out.features.resize(static_cast<Eigen::Index>(indices.size()), s.config.backbone.output_dim());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const AnnotatedSample& sample = dataset.samples.at(static_cast<std::size_t>(indices[i]));
        out.features.row(static_cast<Eigen::Index>(i)) = summarize(s.pair.student.backbone.forward(sample.image), mode);
        out.primary_labels.push_back(dataset.label_index(sample.primary));
    }
    out.scores = s.main_head.scores(out.features);
    if (s.config.loss.main_task == MainTaskKind::multi_label) {
        ag::Matrix labels(out.scores.rows(), out.scores.cols());
        for (std::size_t i = 0; i < indices.size(); ++i) {
            labels.row(static_cast<Eigen::Index>(i)) =
                dataset.samples[static_cast<std::size_t>(indices[i])].labels.transpose();
        }
        const auto ap = per_class_ap(out.scores, labels);
        out.map_full = mean_ap(ap).map;
        std::vector<int> subset;
        for (const ConceptId& c : held_out) {
            if (const int k = dataset.label_index(c); k >= 0) {
                subset.push_back(k);
            }
        }
        if (!subset.empty()) {
            try {
                out.map_unseen = mean_ap(ap, subset).map;
            } catch (const DomainError&) {
                out.map_unseen.reset();
            }
        }
    } else {
        std::vector<int> answers;
        for (int i : indices) {
            answers.push_back(dataset.samples[static_cast<std::size_t>(i)].answer);
        }
        out.accuracy = accuracy(out.scores, answers);
    }
    try {
        out.silhouette = cluster_separation(out.features, out.primary_labels).silhouette;
    } catch (const DomainError&) {
        out.silhouette.reset();
    }
    return out;
}

TrainResult train(const TrainerConfig& config, const Dataset& dataset, const Split& split,
                  const TrainOptions& options, std::optional<TrainState> resume) {
    config.validate();
    const auto n = static_cast<int>(dataset.samples.size());
    for (const std::vector<int>* part : {&split.train, &split.test}) {
        for (int i : *part) {
            if (i < 0 || i >= n) {
                throw ConfigError("split does not match dataset: index " + std::to_string(i) + " outside " +
                                  std::to_string(n) + " samples");
            }
        }
    }
    for (const ConceptId& c : split.spec.held_out) {
        if (dataset.label_index(c) < 0) {
            throw ConfigError("split does not match dataset: held-out concept '" + c.str() + "' not in inventory");
        }
    }
    if (split.train.empty()) {
        throw ConfigError("split has no training samples");
    }

    TrainResult result{resume ? std::move(*resume) : TrainState(config, dataset.inventory), {}, std::nullopt};
    TrainState& state = result.state;
    auto emit = [&](MetricRecord rec) {
        if (options.on_record) {
            options.on_record(rec);
        }
        result.log.push_back(std::move(rec));
    };

    const auto batch_size = static_cast<std::size_t>(config.train.batch_size);
    for (int epoch = state.epoch; epoch < config.train.epochs; ++epoch) {
        state.epoch = epoch;
        std::vector<int> order = split.train;
        Rng order_rng(derive_seed(config.train.seed, kOrderStream, static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[order_rng.uniform_index(i)]);
        }
        double sum_main = 0.0;
        double sum_global = 0.0;
        double sum_local = 0.0;
        std::size_t steps = 0;
        const double lr = config.train.lr_at(epoch);
        for (std::size_t start = 0; start < order.size(); start += batch_size) {
            std::vector<const AnnotatedSample*> batch;
            for (std::size_t j = start; j < std::min(order.size(), start + batch_size); ++j) {
                batch.push_back(&dataset.samples[static_cast<std::size_t>(order[j])]);
            }
            LossBundle losses;
            try {
                losses = train_step(state, batch);
            } catch (const NumericError&) {
                if (options.checkpoint_dir) {
                    save_checkpoint(state, *options.checkpoint_dir / "diagnostic.ckpt", options.config_hash);
                }
                throw;
            }
            sum_main += losses.main;
            sum_global += losses.global;
            sum_local += losses.local;
            ++steps;
            if (options.log_steps) {
                MetricRecord rec;
                rec["kind"] = "step";
                rec["step"] = state.step;
                rec["epoch"] = epoch;
                rec["loss_main"] = losses.main;
                rec["loss_global"] = losses.global;
                rec["loss_local"] = losses.local;
                rec["loss_total"] = losses.total;
                rec["lr"] = lr;
                emit(std::move(rec));
            }
        }
        state.epoch = epoch + 1;

        MetricRecord rec;
        rec["kind"] = "epoch";
        rec["step"] = state.step;
        rec["epoch"] = epoch;
        rec["loss_main"] = sum_main / static_cast<double>(steps);
        rec["loss_global"] = sum_global / static_cast<double>(steps);
        rec["loss_local"] = sum_local / static_cast<double>(steps);
        rec["lr"] = lr;
        if (!split.test.empty()) {
            EvalResult ev = evaluate(state, dataset, split.test, split.spec.held_out);
            rec["map_full"] = ev.map_full;
            rec["map_unseen"] = ev.map_unseen ? MetricRecord(*ev.map_unseen) : MetricRecord(nullptr);
            if (ev.accuracy) {
                rec["accuracy"] = *ev.accuracy;
            }
            rec["silhouette"] = ev.silhouette ? MetricRecord(*ev.silhouette) : MetricRecord(nullptr);
            result.last_eval = std::move(ev);
        }
        emit(std::move(rec));

        if (options.checkpoint_dir) {
            save_checkpoint(state, *options.checkpoint_dir / ("epoch-" + std::to_string(epoch + 1) + ".ckpt"),
                            options.config_hash);
            save_checkpoint(state, *options.checkpoint_dir / "last.ckpt", options.config_hash);
        }
        if (options.stop_after_epoch && state.epoch >= *options.stop_after_epoch) {
            break;
        }
    }
    return result;
}

} // namespace relvit
