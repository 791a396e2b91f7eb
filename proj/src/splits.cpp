#include "relvit/splits.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "relvit/errors.hpp"

namespace relvit {

namespace {

using json = nlohmann::json;

std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) {
        ++b;
    }
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) {
        --e;
    }
    return std::string(s.substr(b, e - b));
}

bool is_ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool is_ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

} // namespace

std::string_view to_string(SplitKind k) {
    switch (k) {
    case SplitKind::original: return "original";
    case SplitKind::held_out_combinations: return "held_out_combinations";
    case SplitKind::hop_ceiling: return "hop_ceiling";
    }
    return "original";
}

SplitKind parse_split_kind(std::string_view s) {
    if (s == "original") {
        return SplitKind::original;
    }
    if (s == "held_out_combinations" || s == "combos") {
        return SplitKind::held_out_combinations;
    }
    if (s == "hop_ceiling" || s == "hops") {
        return SplitKind::hop_ceiling;
    }
    throw DomainError("unknown split kind '" + std::string(s) + "'");
}

std::vector<std::string> atoms_of(const ConceptId& c) {
    std::vector<std::string> out;
    std::string part;
    std::istringstream is(c.str());
    while (std::getline(is, part, ':')) {
        if (!part.empty()) {
            out.push_back(part);
        }
    }
    return out;
}

Split build_systematic_split(std::span<const std::vector<ConceptId>> sample_concepts,
                             std::span<const Partition> partitions, std::span<const ConceptId> inventory,
                             std::span<const ConceptId> held_out) {
    if (sample_concepts.size() != partitions.size()) {
        throw DomainError("systematic split: one partition flag per sample required");
    }
    const std::set<ConceptId> known(inventory.begin(), inventory.end());
    const std::set<ConceptId> removed(held_out.begin(), held_out.end());
    for (const ConceptId& c : removed) {
        if (!known.contains(c)) {
            throw DataError("held-out concept '" + c.str() + "' is not in the inventory");
        }
    }
    if (!known.empty() && removed.size() >= known.size()) {
        throw DataError("held-out set must be a proper subset of the inventory");
    }

    Split split;
    split.spec.kind = removed.empty() ? SplitKind::original : SplitKind::held_out_combinations;
    split.spec.held_out.assign(removed.begin(), removed.end());
    std::set<std::string> covered;
    for (std::size_t i = 0; i < sample_concepts.size(); ++i) {
        const int idx = static_cast<int>(i);
        if (partitions[i] == Partition::test) {
            split.test.push_back(idx);
            continue;
        }
        const auto& cs = sample_concepts[i];
        const bool hit = std::any_of(cs.begin(), cs.end(), [&](const ConceptId& c) { return removed.contains(c); });
        if (hit) {
            split.excluded.push_back(idx);
            continue;
        }
        split.train.push_back(idx);
        for (const ConceptId& c : cs) {
            for (std::string& a : atoms_of(c)) {
                covered.insert(std::move(a));
            }
        }
    }
    // Atoms in inventory order so the reported atom is deterministic.
    for (const ConceptId& c : inventory) {
        for (const std::string& a : atoms_of(c)) {
            if (!covered.contains(a)) {
                throw DataError("atom '" + a + "' uncovered");
            }
        }
    }
    return split;
}

Split build_systematic_split(const Dataset& dataset, std::span<const ConceptId> held_out) {
    std::vector<std::vector<ConceptId>> concepts;
    std::vector<Partition> parts;
    concepts.reserve(dataset.samples.size());
    parts.reserve(dataset.samples.size());
    for (const AnnotatedSample& s : dataset.samples) {
        concepts.push_back(s.concepts);
        parts.push_back(s.partition);
    }
    return build_systematic_split(concepts, parts, dataset.inventory, held_out);
}

std::vector<ConceptId> select_held_out(const Dataset& dataset, HeldOutRegime regime, std::size_t count,
                                       int threshold) {
    std::map<ConceptId, int> train_counts;
    for (const ConceptId& c : dataset.inventory) {
        train_counts[c] = 0;
    }
    for (const AnnotatedSample& s : dataset.samples) {
        if (s.partition == Partition::train) {
            for (const ConceptId& c : s.concepts) {
                train_counts[c] += 1;
            }
        }
    }
    std::vector<std::pair<ConceptId, int>> candidates;
    for (const auto& [c, n] : train_counts) {
        if (n == 0) {
            continue;
        }
        if ((regime == HeldOutRegime::easy && n < threshold) || (regime == HeldOutRegime::hard && n >= threshold)) {
            candidates.emplace_back(c, n);
        }
    }
    std::stable_sort(candidates.begin(), candidates.end(), [regime](const auto& a, const auto& b) {
        return regime == HeldOutRegime::easy ? a.second < b.second : a.second > b.second;
    });
    std::vector<ConceptId> chosen;
    for (const auto& [c, n] : candidates) {
        if (chosen.size() == count) {
            break;
        }
        chosen.push_back(c);
        try {
            build_systematic_split(dataset, chosen);
        } catch (const DataError&) {
            chosen.pop_back();
        }
    }
    return chosen;
}

SemanticsProgram parse_semantics(std::string_view s) {
    SemanticsProgram program;
    std::size_t i = 0;
    const std::size_t n = s.size();
    while (i < n) {
        const char c = s[i];
        if (std::isspace(static_cast<unsigned char>(c)) || c == ';') {
            ++i;
            continue;
        }
        if (!is_ident_start(c)) {
            if (c == ')' || c == ']') {
                throw ParseError("unbalanced parentheses: unexpected '" + std::string(1, c) + "'", i);
            }
            throw ParseError("expected primitive name", i);
        }
        const std::size_t name_begin = i;
        while (i < n && is_ident_char(s[i])) {
            ++i;
        }
        PrimitiveCall call;
        call.name = std::string(s.substr(name_begin, i - name_begin));
        while (i < n && std::isspace(static_cast<unsigned char>(s[i]))) {
            ++i;
        }
        if (i >= n || s[i] != '(') {
            throw ParseError("expected '(' after primitive '" + call.name + "'", i);
        }
        const std::size_t open = i;
        std::vector<char> stack{')'};
        std::size_t arg_begin = ++i;
        while (i < n && !stack.empty()) {
            const char ch = s[i];
            if (ch == '(') {
                stack.push_back(')');
            } else if (ch == '[') {
                stack.push_back(']');
            } else if (ch == ')' || ch == ']') {
                if (ch != stack.back()) {
                    throw ParseError("unbalanced parentheses: mismatched '" + std::string(1, ch) + "'", i);
                }
                stack.pop_back();
                if (stack.empty()) {
                    std::string arg = trim(s.substr(arg_begin, i - arg_begin));
                    if (!arg.empty() || !call.arguments.empty()) {
                        call.arguments.push_back(std::move(arg));
                    }
                }
            } else if (ch == ',' && stack.size() == 1) {
                call.arguments.push_back(trim(s.substr(arg_begin, i - arg_begin)));
                arg_begin = i + 1;
            }
            ++i;
        }
        if (!stack.empty()) {
            throw ParseError("unbalanced parentheses in '" + call.name + "'", open);
        }
        program.steps.push_back(std::move(call));
    }
    return program;
}

int count_hops(std::string_view semantics) { return static_cast<int>(parse_semantics(semantics).steps.size()); }

Split build_hop_split(std::span<const QuestionRecord> questions, int max_hops) {
    if (max_hops < 1) {
        throw DomainError("hop split: max_hops must be >= 1");
    }
    Split split;
    split.spec.kind = SplitKind::hop_ceiling;
    split.spec.max_hops = max_hops;
    for (std::size_t i = 0; i < questions.size(); ++i) {
        const QuestionRecord& q = questions[i];
        if (!q.semantics && !q.hops) {
            throw DomainError("hop split: question '" + q.id + "' has no semantics");
        }
        const int idx = static_cast<int>(i);
        if (q.partition == Partition::test) {
            split.test.push_back(idx);
            continue;
        }
        const int hops = q.hops ? *q.hops : count_hops(*q.semantics);
        (hops <= max_hops ? split.train : split.excluded).push_back(idx);
    }
    return split;
}

void write_split(const Split& split, const std::filesystem::path& path) {
    json doc = {{"schema_version", 1},
                {"kind", to_string(split.spec.kind)},
                {"max_hops", split.spec.max_hops},
                {"held_out", json::array()},
                {"train", split.train},
                {"test", split.test},
                {"excluded", split.excluded}};
    for (const ConceptId& c : split.spec.held_out) {
        doc["held_out"].push_back(c.str());
    }
    std::ofstream os(path);
    os << doc.dump(2) << '\n';
    if (!os) {
        throw DataError("cannot write split to " + path.string());
    }
}

Split read_split(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw DataError("cannot read split " + path.string());
    }
    try {
        const json doc = json::parse(is);
        if (doc.at("schema_version").get<int>() != 1) {
            throw DataError("unsupported split schema version");
        }
        Split split;
        split.spec.kind = parse_split_kind(doc.at("kind").get<std::string>());
        split.spec.max_hops = doc.at("max_hops").get<int>();
        for (const auto& c : doc.at("held_out")) {
            split.spec.held_out.emplace_back(c.get<std::string>());
        }
        split.train = doc.at("train").get<std::vector<int>>();
        split.test = doc.at("test").get<std::vector<int>>();
        split.excluded = doc.at("excluded").get<std::vector<int>>();
        return split;
    } catch (const json::exception& e) {
        throw DataError("malformed split file: " + std::string(e.what()));
    }
}

AnnotationSet read_hoi_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw DataError("cannot read " + path.string());
    }
    AnnotationSet out;
    std::set<ConceptId> inventory;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line.starts_with("image,")) {
            continue;
        }
        std::istringstream row(line);
        std::string id;
        std::string part;
        std::string hois;
        if (!std::getline(row, id, ',') || !std::getline(row, part, ',')) {
            throw DataError("malformed HOI row: " + line);
        }
        std::getline(row, hois);
        std::vector<ConceptId> concepts;
        std::istringstream hs(hois);
        std::string h;
        while (std::getline(hs, h, ';')) {
            h = trim(h);
            if (!h.empty()) {
                concepts.emplace_back(h);
                inventory.insert(concepts.back());
            }
        }
        std::sort(concepts.begin(), concepts.end());
        out.ids.push_back(trim(id));
        out.partitions.push_back(trim(part) == "test" ? Partition::test : Partition::train);
        out.concepts.push_back(std::move(concepts));
    }
    out.inventory.assign(inventory.begin(), inventory.end());
    return out;
}

std::vector<QuestionRecord> read_gqa_questions(const std::filesystem::path& path, Partition partition) {
    std::ifstream is(path);
    if (!is) {
        throw DataError("cannot read " + path.string());
    }
    std::vector<QuestionRecord> out;
    try {
        const json doc = json::parse(is);
        out.reserve(doc.size());
        for (const auto& [qid, q] : doc.items()) {
            QuestionRecord r;
            r.id = qid;
            r.partition = partition;
            if (q.contains("semantic")) {
                r.hops = static_cast<int>(q.at("semantic").size());
            }
            out.push_back(std::move(r));
        }
    } catch (const json::exception& e) {
        throw DataError("malformed GQA question file: " + std::string(e.what()));
    }
    return out;
}

} // namespace relvit
