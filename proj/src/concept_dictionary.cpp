#include "relvit/concept_dictionary.hpp"

#include "relvit/errors.hpp"
#include "relvit/serialize.hpp"

namespace relvit {

namespace {

constexpr std::string_view kMagic = "RVCD";

void check_shape(const FeatureShape& shape, const TokenSequence& t) {
    if (t.tokens.rows() != shape.tokens() || t.tokens.cols() != shape.dim || t.grid_rows != shape.grid_rows ||
        t.grid_cols != shape.grid_cols) {
        throw DomainError("feature entry shape " + std::to_string(t.tokens.rows()) + "x" +
                          std::to_string(t.tokens.cols()) + " does not match dictionary shape " +
                          std::to_string(shape.tokens()) + "x" + std::to_string(shape.dim));
    }
    if (t.cls.has_value() != shape.has_cls || (t.cls && t.cls->size() != shape.dim)) {
        throw DomainError("feature entry summary token does not match dictionary shape");
    }
}

} // namespace

bool same_tokens(const TokenSequence& a, const TokenSequence& b) {
    if (a.grid_rows != b.grid_rows || a.grid_cols != b.grid_cols || a.tokens.rows() != b.tokens.rows() ||
        a.tokens.cols() != b.tokens.cols() || a.cls.has_value() != b.cls.has_value()) {
        return false;
    }
    if (a.cls && (a.cls->size() != b.cls->size() || *a.cls != *b.cls)) {
        return false;
    }
    return a.tokens == b.tokens;
}

ConceptId::ConceptId(std::string value) : value_(std::move(value)) {
    if (value_.empty()) {
        throw DomainError("concept id must be non-empty");
    }
}

void FeatureQueue::push(FeatureEntry entry) {
    if (entries_.size() == capacity_) {
        entries_.pop_front();
    }
    entries_.push_back(std::move(entry));
}

std::string_view to_string(SamplingStrategy s) {
    return s == SamplingStrategy::uniform ? "uniform" : "most_recent";
}

SamplingStrategy parse_sampling_strategy(std::string_view s) {
    if (s == "uniform") {
        return SamplingStrategy::uniform;
    }
    if (s == "most_recent") {
        return SamplingStrategy::most_recent;
    }
    throw DomainError("unknown sampling strategy '" + std::string(s) + "'");
}

ConceptFeatureDictionary::ConceptFeatureDictionary(std::span<const ConceptId> concepts, std::size_t capacity,
                                                   SamplingStrategy strategy, FeatureShape shape)
    : capacity_(capacity), strategy_(strategy), shape_(shape) {
    if (capacity == 0) {
        throw DomainError("queue capacity must be at least 1");
    }
    if (shape.grid_rows <= 0 || shape.grid_cols <= 0 || shape.dim <= 0) {
        throw DomainError("feature shape must be positive");
    }
    for (const ConceptId& c : concepts) {
        queues_.try_emplace(c, capacity);
    }
}

const FeatureQueue& ConceptFeatureDictionary::queue(const ConceptId& c) const {
    auto it = queues_.find(c);
    if (it == queues_.end()) {
        throw DomainError("unknown concept '" + c.str() + "'");
    }
    return it->second;
}

FeatureQueue& ConceptFeatureDictionary::queue_mut(const ConceptId& c) {
    auto it = queues_.find(c);
    if (it == queues_.end()) {
        throw DomainError("unknown concept '" + c.str() + "'");
    }
    return it->second;
}

void ConceptFeatureDictionary::enqueue(const ConceptId& c, const TokenSequence& tokens) {
    FeatureQueue& q = queue_mut(c);
    check_shape(shape_, tokens);
    q.push(FeatureEntry{tokens, ++counter_});
}

const FeatureEntry* ConceptFeatureDictionary::sample(const ConceptId& c, Rng& rng) const {
    const FeatureQueue& q = queue(c);
    const std::size_t n = q.size();
    if (n == 0) {
        return nullptr;
    }
    if (strategy_ == SamplingStrategy::uniform) {
        return &q.newest(1 + rng.uniform_index(n));
    }
    // Weight of the i-th newest is n - i + 1; draw an integer ticket from the
    // total mass and walk from the newest entry.
    std::uint64_t ticket = rng.uniform_index(n * (n + 1) / 2);
    for (std::size_t i = 1; i <= n; ++i) {
        const std::uint64_t w = n - i + 1;
        if (ticket < w) {
            return &q.newest(i);
        }
        ticket -= w;
    }
    return &q.newest(n);
}

std::string ConceptFeatureDictionary::snapshot() const {
    BinaryWriter w;
    w.bytes(kMagic);
    w.u32(kFormatVersion);
    w.u64(queues_.size());
    w.u64(capacity_);
    w.u8(static_cast<std::uint8_t>(strategy_));
    w.u32(static_cast<std::uint32_t>(shape_.grid_rows));
    w.u32(static_cast<std::uint32_t>(shape_.grid_cols));
    w.u32(static_cast<std::uint32_t>(shape_.dim));
    w.u8(shape_.has_cls ? 1 : 0);
    w.u64(counter_);
    for (const auto& [id, q] : queues_) {
        w.str(id.str());
        w.u64(q.size());
        for (const FeatureEntry& e : q.entries()) {
            w.u64(e.inserted_at);
            for (Eigen::Index r = 0; r < e.tokens.tokens.rows(); ++r) {
                for (Eigen::Index c = 0; c < e.tokens.tokens.cols(); ++c) {
                    w.f64(e.tokens.tokens(r, c));
                }
            }
            if (e.tokens.cls) {
                for (Eigen::Index c = 0; c < e.tokens.cls->size(); ++c) {
                    w.f64((*e.tokens.cls)(c));
                }
            }
        }
    }
    w.u64(fnv1a64(w.buffer()));
    return w.take();
}

ConceptFeatureDictionary ConceptFeatureDictionary::restore(std::string_view payload) {
    if (payload.size() < kMagic.size() + sizeof(std::uint64_t)) {
        throw LoadError("dictionary payload truncated");
    }
    const std::string_view body = payload.substr(0, payload.size() - sizeof(std::uint64_t));
    {
        BinaryReader tail(payload.substr(body.size()));
        if (tail.u64() != fnv1a64(body)) {
            throw LoadError("dictionary payload checksum mismatch (truncated or corrupted)");
        }
    }
    BinaryReader r(body);
    if (r.bytes(kMagic.size()) != kMagic) {
        throw LoadError("not a concept dictionary payload");
    }
    const std::uint32_t version = r.u32();
    if (version != kFormatVersion) {
        throw LoadError("unsupported dictionary format version " + std::to_string(version));
    }
    ConceptFeatureDictionary d;
    const std::uint64_t m = r.u64();
    d.capacity_ = r.u64();
    const std::uint8_t strategy = r.u8();
    if (strategy > 1 || d.capacity_ == 0) {
        throw LoadError("dictionary header is corrupted");
    }
    d.strategy_ = static_cast<SamplingStrategy>(strategy);
    d.shape_.grid_rows = static_cast<int>(r.u32());
    d.shape_.grid_cols = static_cast<int>(r.u32());
    d.shape_.dim = static_cast<int>(r.u32());
    d.shape_.has_cls = r.u8() != 0;
    d.counter_ = r.u64();
    const Eigen::Index n = d.shape_.tokens();
    const Eigen::Index dim = d.shape_.dim;
    for (std::uint64_t i = 0; i < m; ++i) {
        ConceptId id(r.str());
        const std::uint64_t count = r.u64();
        if (count > d.capacity_) {
            throw LoadError("queue for '" + id.str() + "' exceeds capacity");
        }
        FeatureQueue q(d.capacity_);
        for (std::uint64_t k = 0; k < count; ++k) {
            FeatureEntry e;
            e.inserted_at = r.u64();
            e.tokens.grid_rows = d.shape_.grid_rows;
            e.tokens.grid_cols = d.shape_.grid_cols;
            e.tokens.tokens.resize(n, dim);
            for (Eigen::Index row = 0; row < n; ++row) {
                for (Eigen::Index c = 0; c < dim; ++c) {
                    e.tokens.tokens(row, c) = r.f64();
                }
            }
            if (d.shape_.has_cls) {
                Eigen::RowVectorXd cls(dim);
                for (Eigen::Index c = 0; c < dim; ++c) {
                    cls(c) = r.f64();
                }
                e.tokens.cls = std::move(cls);
            }
            q.push(std::move(e));
        }
        d.queues_.emplace(std::move(id), std::move(q));
    }
    if (!r.done()) {
        throw LoadError("trailing bytes in dictionary payload");
    }
    return d;
}

bool ConceptFeatureDictionary::operator==(const ConceptFeatureDictionary& other) const {
    if (capacity_ != other.capacity_ || strategy_ != other.strategy_ || !(shape_ == other.shape_) ||
        counter_ != other.counter_ || queues_.size() != other.queues_.size()) {
        return false;
    }
    auto it = other.queues_.begin();
    for (const auto& [id, q] : queues_) {
        if (!(id == it->first) || q.size() != it->second.size()) {
            return false;
        }
        for (std::size_t i = 0; i < q.size(); ++i) {
            const FeatureEntry& a = q.entries()[i];
            const FeatureEntry& b = it->second.entries()[i];
            if (a.inserted_at != b.inserted_at || !same_tokens(a.tokens, b.tokens)) {
                return false;
            }
        }
        ++it;
    }
    return true;
}

std::vector<double> sampling_distribution(SamplingStrategy strategy, std::size_t n) {
    std::vector<double> p(n);
    if (n == 0) {
        return p;
    }
    const double total = strategy == SamplingStrategy::uniform ? static_cast<double>(n)
                                                               : static_cast<double>(n * (n + 1)) / 2.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double w = strategy == SamplingStrategy::uniform ? 1.0 : static_cast<double>(n - i);
        p[i] = w / total;
    }
    return p;
}

const ConceptId& select_concept(std::span<const ConceptId> concepts, Rng& rng) {
    if (concepts.empty()) {
        throw DomainError("sample has no concepts");
    }
    return concepts[rng.uniform_index(concepts.size())];
}

} // namespace relvit
