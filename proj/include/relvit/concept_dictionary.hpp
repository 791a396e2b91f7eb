#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "relvit/rng.hpp"
#include "relvit/token_sequence.hpp"

namespace relvit {

/// Opaque concept token (an HOI pair, a parsed keyword, a relation triple).
class ConceptId {
public:
    ConceptId() = default;
    explicit ConceptId(std::string value);

    const std::string& str() const { return value_; }

    auto operator<=>(const ConceptId&) const = default;

private:
    std::string value_;
};

/// A stored teacher feature sequence and the step counter at insertion.
struct FeatureEntry {
    TokenSequence tokens;
    std::uint64_t inserted_at = 0;
};

/// Bounded FIFO of feature entries, newest last.
class FeatureQueue {
public:
    explicit FeatureQueue(std::size_t capacity) : capacity_(capacity) {}

    std::size_t capacity() const { return capacity_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    /// i-th newest entry, i in [1, size()].
    const FeatureEntry& newest(std::size_t i) const { return entries_[entries_.size() - i]; }
    const std::deque<FeatureEntry>& entries() const { return entries_; }

    /// Appends, evicting exactly the oldest entry first when full.
    void push(FeatureEntry entry);

private:
    std::size_t capacity_;
    std::deque<FeatureEntry> entries_;
};

enum class SamplingStrategy : std::uint8_t { uniform = 0, most_recent = 1 };

std::string_view to_string(SamplingStrategy s);
SamplingStrategy parse_sampling_strategy(std::string_view s);

/// Token layout every stored entry must have.
struct FeatureShape {
    int grid_rows = 0;
    int grid_cols = 0;
    int dim = 0;
    bool has_cls = false;

    int tokens() const { return grid_rows * grid_cols; }
    bool operator==(const FeatureShape&) const = default;
};

/// Map from concept to a bounded queue of detached teacher feature sequences.
///
/// Every concept of the experiment gets a (possibly empty) queue at
/// construction; lookups of any other id are domain errors.
class ConceptFeatureDictionary {
public:
    static constexpr std::uint32_t kFormatVersion = 1;

    ConceptFeatureDictionary(std::span<const ConceptId> concepts, std::size_t capacity, SamplingStrategy strategy,
                             FeatureShape shape);

    std::size_t capacity() const { return capacity_; }
    SamplingStrategy strategy() const { return strategy_; }
    const FeatureShape& shape() const { return shape_; }
    std::size_t concept_count() const { return queues_.size(); }
    std::uint64_t step_counter() const { return counter_; }
    bool contains(const ConceptId& c) const { return queues_.contains(c); }

    const FeatureQueue& queue(const ConceptId& c) const;

    /// Inserts a copy of `tokens` as the newest entry of the concept's queue.
    void enqueue(const ConceptId& c, const TokenSequence& tokens);

    /// Draws one entry per the strategy without removing it; nullptr when the queue is empty.
    const FeatureEntry* sample(const ConceptId& c, Rng& rng) const;

    /// Serialized state; see docs/checkpoint-format.md for the byte layout.
    std::string snapshot() const;
    static ConceptFeatureDictionary restore(std::string_view payload);

    /// Exact equality of queues, counters, strategy and capacity.
    bool operator==(const ConceptFeatureDictionary& other) const;

private:
    ConceptFeatureDictionary() = default;

    FeatureQueue& queue_mut(const ConceptId& c);

    std::size_t capacity_ = 0;
    SamplingStrategy strategy_ = SamplingStrategy::most_recent;
    FeatureShape shape_;
    std::uint64_t counter_ = 0;
    std::map<ConceptId, FeatureQueue> queues_;
};

/// Probability of drawing the i-th newest of n entries (index 0 = newest).
std::vector<double> sampling_distribution(SamplingStrategy strategy, std::size_t n);

/// Uniform draw from a sample's concept set.
const ConceptId& select_concept(std::span<const ConceptId> concepts, Rng& rng);

} // namespace relvit
