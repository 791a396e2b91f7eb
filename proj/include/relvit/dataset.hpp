#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "relvit/concept_dictionary.hpp"
#include "relvit/image.hpp"

namespace relvit {

// Synthetic relational scenes: a few flat-colored shapes on a grid, labeled
// with every (subject shape, predicate, object shape) triple that holds.

enum class ShapeKind : std::uint8_t { circle, square, triangle, cross };
enum class Predicate : std::uint8_t { left_of, above, same_color, larger };

inline constexpr std::array<std::string_view, 4> kShapeNames{"circle", "square", "triangle", "cross"};
inline constexpr std::array<std::string_view, 4> kPredicateNames{"left-of", "above", "same-color", "larger"};
inline constexpr std::array<std::string_view, 6> kColorNames{"red", "green", "blue", "yellow", "purple", "orange"};

struct SceneObject {
    ShapeKind shape = ShapeKind::circle;
    int color = 0;
    int row = 0;
    int col = 0;
    bool large = false;

    bool operator==(const SceneObject&) const = default;
};

struct Relation {
    int subject = 0;
    Predicate predicate = Predicate::left_of;
    int object = 0;

    auto operator<=>(const Relation&) const = default;
};

struct SceneSpec {
    std::vector<SceneObject> objects;
    std::vector<Relation> relations;

    bool operator==(const SceneSpec&) const = default;
};

enum class Partition : std::uint8_t { train, test };

/// Image, concept set and main-task target of one sample.
struct AnnotatedSample {
    int id = 0;
    Image image;
    /// Sorted, unique, non-empty.
    std::vector<ConceptId> concepts;
    /// Multi-hot over the dataset's label inventory.
    Eigen::VectorXd labels;
    /// Single-answer tasks only; -1 otherwise.
    int answer = -1;
    SceneSpec scene;
    /// The relation the generator constructed the scene around.
    ConceptId primary;
    Partition partition = Partition::train;
};

struct SyntheticConfig {
    int image_size = 64;
    int grid = 3;
    double p_third_object = 0.25;
    double test_fraction = 0.2;
};

struct Dataset {
    SyntheticConfig config;
    std::uint64_t seed = 0;
    /// Label inventory; also the concept set M of the dictionary.
    std::vector<ConceptId> inventory;
    std::vector<AnnotatedSample> samples;

    /// Position of a concept in the inventory, or -1.
    int label_index(const ConceptId& c) const;
};

/// "<subject>:<predicate>:<object>".
ConceptId relation_concept(ShapeKind subject, Predicate p, ShapeKind object);

/// All 4 x 4 x 4 relation triples in canonical order.
std::vector<ConceptId> relation_inventory();

/// Every relation that holds geometrically between ordered object pairs.
std::vector<Relation> derive_relations(const std::vector<SceneObject>& objects);

/// Rasterizes a scene (4x4 supersampled coverage, quantized to 8 bits).
Image render_scene(const SceneSpec& scene, const SyntheticConfig& cfg);

/// Builds a labeled sample from a scene; nullopt when no relation holds
/// (e.g. a single-object scene), so the caller regenerates.
std::optional<AnnotatedSample> make_sample(int id, SceneSpec scene, const SyntheticConfig& cfg,
                                           const std::vector<ConceptId>& inventory, Partition partition);

/// Deterministic generation. Every inventory triple occurs at least once as
/// a primary relation when n_samples >= kMinSamplesForCoverage.
Dataset generate_dataset(int n_samples, std::uint64_t seed, const SyntheticConfig& cfg = {});

inline constexpr int kMinSamplesForCoverage = 64;

/// Manifest (manifest.jsonl) plus 8-bit image archive (images.bin).
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

/// Per-concept sample counts and summary statistics.
struct ConceptStats {
    std::map<ConceptId, int> counts;
    double mean = 0.0;
    double median = 0.0;
    int without_samples = 0;
    int below_ten = 0;
    int samples_without_concept = 0;
    /// concepts-per-sample -> number of samples.
    std::map<int, int> concepts_per_sample;

    /// Concepts sorted by descending count (ties by id).
    std::vector<std::pair<ConceptId, int>> top(std::size_t k) const;
};

ConceptStats concept_stats(const std::vector<std::vector<ConceptId>>& sample_concepts,
                           const std::vector<ConceptId>& inventory);
ConceptStats concept_stats(const Dataset& dataset);

} // namespace relvit
