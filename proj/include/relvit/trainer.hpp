#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "relvit/augmentation.hpp"
#include "relvit/backbone.hpp"
#include "relvit/concept_dictionary.hpp"
#include "relvit/dataset.hpp"
#include "relvit/distill_losses.hpp"
#include "relvit/eval_report.hpp"
#include "relvit/serialize.hpp"
#include "relvit/splits.hpp"

namespace relvit {

/// Which auxiliary terms enter the total loss.
enum class LossTasks { none, global, local, both };
/// Where the auxiliary target feature f comes from.
///   dictionary:   a stored same-concept feature, teacher(view1) when the queue is empty
///   teacher_view: always teacher(view1) (plain self-distillation)
///   both:         the sum of the two
enum class AuxTarget { dictionary, teacher_view, both };
enum class MainHeadKind { linear, factorized };
enum class MainTaskKind { multi_label, single_answer };
/// How a sample's relation triples are turned into dictionary keys.
enum class ConceptScheme { triple, predicate, shape };

std::string_view to_string(LossTasks v);
std::string_view to_string(AuxTarget v);
std::string_view to_string(MainHeadKind v);
std::string_view to_string(MainTaskKind v);
std::string_view to_string(ConceptScheme v);
LossTasks parse_loss_tasks(std::string_view s);
AuxTarget parse_aux_target(std::string_view s);
MainHeadKind parse_main_head(std::string_view s);
MainTaskKind parse_main_task(std::string_view s);
ConceptScheme parse_concept_scheme(std::string_view s);

struct AdamWConfig {
    double lr = 1.5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-5;
    double weight_decay = 0.05;
};

struct TrainConfig {
    AdamWConfig optimizer;
    /// Epochs at which the learning rate is multiplied by lr_factor.
    /// Empty means {epochs / 2, 5 * epochs / 6}.
    std::vector<int> milestones;
    double lr_factor = 0.1;
    std::optional<double> grad_clip_norm;
    int batch_size = 32;
    int epochs = 30;
    std::uint64_t seed = 0;

    void validate() const;
    std::vector<int> resolved_milestones() const;
    /// Learning rate in effect during (0-based) `epoch`.
    double lr_at(int epoch) const;
};

struct LossConfig {
    double alpha = 0.1;
    LossTasks tasks = LossTasks::both;
    AuxTarget target = AuxTarget::dictionary;
    Temperatures temperatures;
    double center_momentum = 0.9;
    MainTaskKind main_task = MainTaskKind::multi_label;
};

struct DictionaryConfig {
    std::size_t capacity = 10;
    SamplingStrategy strategy = SamplingStrategy::most_recent;
    /// Which teacher view is stored after the step (1 or 2).
    int enqueue_view = 1;
    ConceptScheme scheme = ConceptScheme::triple;
};

struct TrainerConfig {
    BackboneConfig backbone;
    HeadConfig head;
    MainHeadKind main_head = MainHeadKind::linear;
    double ema_momentum = 0.999;
    AugmentationConfig augmentation;
    LossConfig loss;
    DictionaryConfig dictionary;
    TrainConfig train;

    void validate() const;
};

/// Classifier on top of the pooled student summary.
///
/// The factorized head scores a triple "s:p:o" as u_s(h) + v_p(h) + w_o(h),
/// so a class that never had a positive still shares weights with seen ones.
class MainHead {
public:
    MainHead() = default;
    MainHead(MainHeadKind kind, int in_dim, std::span<const ConceptId> classes, Rng& rng);

    MainHeadKind kind() const { return kind_; }
    int classes() const { return classes_; }

    ag::Var forward(ag::Graph& g, ag::Var features) const;
    ag::Matrix scores(const ag::Matrix& features) const;

    std::vector<ag::Parameter*> parameters();
    std::vector<const ag::Parameter*> parameters() const;

private:
    MainHeadKind kind_ = MainHeadKind::linear;
    int classes_ = 0;
    Linear linear_;
    std::vector<Linear> parts_;
    std::vector<ag::Matrix> selectors_;
};

/// Multi-label: mean binary cross-entropy over every (sample, class) entry,
/// `targets` has the shape of `logits`. Single-answer: categorical
/// cross-entropy, `targets` is a column of class indices.
ag::Var main_loss(ag::Var logits, const ag::Matrix& targets, MainTaskKind kind);

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_gradients(std::span<ag::Matrix> grads, double max_norm);

/// Decoupled-weight-decay Adam. Moments are indexed by parameter position,
/// so every call must pass the same parameter list.
class AdamW {
public:
    AdamW() = default;
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

    const AdamWConfig& config() const { return cfg_; }
    std::uint64_t steps() const { return t_; }

    void step(std::span<ag::Parameter* const> params, std::span<const ag::Matrix> grads, double lr);

    void save(BinaryWriter& w) const;
    void load(BinaryReader& r);

    bool operator==(const AdamW& other) const;

private:
    AdamWConfig cfg_;
    std::uint64_t t_ = 0;
    std::vector<ag::Matrix> m_;
    std::vector<ag::Matrix> v_;
};

/// Dictionary keys of one sample under a scheme (sorted, unique).
std::vector<ConceptId> scheme_concepts(std::span<const ConceptId> concepts, ConceptScheme scheme);

/// Everything that evolves during training.
struct TrainState {
    TrainerConfig config;
    /// Label inventory (main-task classes).
    std::vector<ConceptId> classes;
    /// Dictionary key set.
    std::vector<ConceptId> concepts;
    /// Seeds initialization, then drives concept and dictionary draws.
    Rng rng;
    DistillationPair pair;
    MainHead main_head;
    ConceptFeatureDictionary dictionary;
    AdamW optimizer;
    std::uint64_t step = 0;
    /// Index of the epoch in progress; equals the number of finished epochs
    /// between epochs.
    int epoch = 0;
    double last_grad_norm = 0.0;

    TrainState(const TrainerConfig& config, std::vector<ConceptId> classes);

    /// Student backbone, student heads, main head (the optimized set).
    std::vector<ag::Parameter*> trainable();
};

/// Randomness of one step, drawn up front: the two views per sample, the
/// drawn concept, the auxiliary targets and the feature to enqueue.
struct StepPlan {
    std::vector<const AnnotatedSample*> batch;
    std::vector<ViewPair> views;
    std::vector<ConceptId> drawn;
    /// Dictionary-side target per sample (a stored feature or the fallback).
    std::vector<TokenSequence> dictionary_targets;
    /// teacher(view1) per sample.
    std::vector<TokenSequence> view_targets;
    std::vector<TokenSequence> to_enqueue;
    /// Samples whose dictionary queue was empty.
    int fallbacks = 0;
};

/// Draws views, concepts and dictionary samples. Consumes state.rng only.
StepPlan plan_step(TrainState& state, std::span<const AnnotatedSample* const> batch);

/// Graph of one step's losses for a fixed plan.
struct StepLosses {
    ag::Var main;
    std::optional<ag::Var> global;
    std::optional<ag::Var> local;
    ag::Var total;
    ag::Matrix teacher_global_logits;
    ag::Matrix teacher_local_logits;
    LossBundle bundle;
};

StepLosses step_losses(ag::Graph& g, const TrainState& state, const StepPlan& plan);

/// One optimization step over a batch: plan, losses, AdamW on the student
/// side, EMA teacher update, center updates, enqueue.
LossBundle train_step(TrainState& state, std::span<const AnnotatedSample* const> batch);

/// Checkpoint container: both networks, heads, optimizer, dictionary,
/// centers, counters, rng state and the caller's config hash.
std::string checkpoint_bytes(const TrainState& state, std::string_view config_hash);
/// Loads a checkpoint into a state built from the same configuration.
/// Throws LoadError on corruption and ConfigError on a hash mismatch.
void restore_checkpoint(TrainState& state, std::string_view payload, std::string_view config_hash);
void save_checkpoint(const TrainState& state, const std::filesystem::path& path, std::string_view config_hash);
void load_checkpoint(TrainState& state, const std::filesystem::path& path, std::string_view config_hash);

struct EvalResult {
    double map_full = 0.0;
    std::optional<double> map_unseen;
    std::optional<double> accuracy;
    std::optional<double> silhouette;
    /// Pooled student summaries, one row per evaluated sample.
    ag::Matrix features;
    ag::Matrix scores;
    std::vector<int> primary_labels;
};

/// Student features and main-head scores on `indices`; mAP over classes with
/// positives, unseen mAP over `held_out`, silhouette by primary concept.
EvalResult evaluate(const TrainState& state, const Dataset& dataset, std::span<const int> indices,
                    std::span<const ConceptId> held_out);

using MetricRecord = nlohmann::ordered_json;

struct TrainOptions {
    /// When set, `epoch-<n>.ckpt` and `last.ckpt` are written after every epoch.
    std::optional<std::filesystem::path> checkpoint_dir;
    std::string config_hash;
    bool log_steps = true;
    /// Stop after this many finished epochs (the run can be resumed later).
    std::optional<int> stop_after_epoch;
    std::function<void(const MetricRecord&)> on_record;
};

struct TrainResult {
    TrainState state;
    std::vector<MetricRecord> log;
    std::optional<EvalResult> last_eval;
};

/// Full training loop over the split's training indices with per-epoch
/// evaluation on its test indices. A `resume` state continues at its epoch.
TrainResult train(const TrainerConfig& config, const Dataset& dataset, const Split& split,
                  const TrainOptions& options = {}, std::optional<TrainState> resume = std::nullopt);

} // namespace relvit
