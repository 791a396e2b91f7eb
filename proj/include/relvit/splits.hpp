#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "relvit/concept_dictionary.hpp"
#include "relvit/dataset.hpp"

namespace relvit {

enum class SplitKind { original, held_out_combinations, hop_ceiling };

std::string_view to_string(SplitKind k);
SplitKind parse_split_kind(std::string_view s);

/// Declarative description of a systematic partition.
struct SplitSpec {
    SplitKind kind = SplitKind::original;
    std::vector<ConceptId> held_out;
    int max_hops = 4;
};

/// A resolved split: indices into the source sample list.
struct Split {
    SplitSpec spec;
    std::vector<int> train;
    std::vector<int> test;
    /// Source-training samples removed by the split.
    std::vector<int> excluded;
};

/// Atoms of a concept id: its ':'-separated components ("circle:above:square"
/// -> circle, above, square; "ride:bicycle" -> ride, bicycle).
std::vector<std::string> atoms_of(const ConceptId& c);

/// Held-out-combination split over per-sample concept sets.
///
/// Training keeps the source-training samples that carry no held-out concept;
/// every atom of the inventory must still occur in the remaining training
/// concepts, otherwise a DataError names the uncovered atom.
Split build_systematic_split(std::span<const std::vector<ConceptId>> sample_concepts,
                             std::span<const Partition> partitions, std::span<const ConceptId> inventory,
                             std::span<const ConceptId> held_out);
Split build_systematic_split(const Dataset& dataset, std::span<const ConceptId> held_out);

enum class HeldOutRegime {
    /// Rarest combinations (fewest training samples) first.
    easy,
    /// Most frequent combinations first.
    hard,
};

/// Picks up to `count` held-out concepts whose training count is below
/// (easy) or at least (hard) `threshold`, skipping any that would break
/// atomic coverage.
std::vector<ConceptId> select_held_out(const Dataset& dataset, HeldOutRegime regime, std::size_t count,
                                       int threshold);

// -- reasoning hops ---------------------------------------------------------

struct PrimitiveCall {
    std::string name;
    /// Raw top-level arguments, trimmed.
    std::vector<std::string> arguments;
};

/// Ordered list of primitive calls of one question.
struct SemanticsProgram {
    std::vector<PrimitiveCall> steps;
};

/// Parses `name(args)` calls separated by ';' and/or whitespace. Unbalanced
/// brackets raise ParseError with the offending position.
SemanticsProgram parse_semantics(std::string_view semantics);

/// Number of primitive calls (reasoning hops).
int count_hops(std::string_view semantics);

struct QuestionRecord {
    std::string id;
    std::optional<std::string> semantics;
    /// Hop count when known without a semantics string (e.g. GQA's operation list).
    std::optional<int> hops;
    Partition partition = Partition::train;
};

/// Training keeps source-training questions with at most `max_hops` hops; test is unchanged.
Split build_hop_split(std::span<const QuestionRecord> questions, int max_hops = 4);

// -- persistence --------------------------------------------------------------

void write_split(const Split& split, const std::filesystem::path& path);
Split read_split(const std::filesystem::path& path);

// -- annotation adapters (metadata only) ---------------------------------------

/// HICO-style CSV: `image,split,hoi_ids` with split in {train,test} and
/// hoi_ids separated by ';'. Returns per-image concept sets and partitions.
struct AnnotationSet {
    std::vector<std::string> ids;
    std::vector<std::vector<ConceptId>> concepts;
    std::vector<Partition> partitions;
    std::vector<ConceptId> inventory;
};
AnnotationSet read_hoi_csv(const std::filesystem::path& path);

/// GQA question file (object keyed by question id with `semantic` operation
/// lists). Hop counts come from the operation list length.
std::vector<QuestionRecord> read_gqa_questions(const std::filesystem::path& path, Partition partition);

} // namespace relvit
