#include "relvit/concept_parsing.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <unordered_map>
#include <unordered_set>

#include "relvit/errors.hpp"

namespace relvit {

namespace {

const std::unordered_map<std::string, std::string>& closed_class() {
    static const std::unordered_map<std::string, std::string> words = [] {
        std::unordered_map<std::string, std::string> m;
        for (const char* w : {"a", "an", "the", "this", "that", "these", "those", "any", "some", "each", "every",
                              "all", "both", "either", "neither", "no", "another"}) {
            m[w] = "DT";
        }
        for (const char* w : {"in", "on", "at", "of", "with", "near", "by", "to", "from", "under", "behind", "above",
                              "below", "beside", "inside", "into", "onto", "over", "for", "about", "across",
                              "around", "between", "through", "than", "like"}) {
            m[w] = "IN";
        }
        for (const char* w : {"i", "you", "he", "she", "it", "we", "they", "me", "him", "her", "us", "them"}) {
            m[w] = "PRP";
        }
        for (const char* w : {"and", "or", "but", "nor"}) {
            m[w] = "CC";
        }
        for (const char* w : {"what", "which", "who", "whom", "whose", "where", "when", "why", "how"}) {
            m[w] = "WP";
        }
        for (const char* w : {"is", "are", "was", "were", "be", "been", "being", "am", "do", "does", "did", "has",
                              "have", "had"}) {
            m[w] = "VBZ";
        }
        for (const char* w : {"can", "could", "will", "would", "should", "may", "might", "must"}) {
            m[w] = "MD";
        }
        for (const char* w : {"not", "there", "here", "very", "too", "also"}) {
            m[w] = "RB";
        }
        return m;
    }();
    return words;
}

const std::unordered_set<std::string>& known_adjectives() {
    static const std::unordered_set<std::string> words{
        "red",   "green",  "blue",  "yellow", "white", "black",  "brown", "gray",   "grey",  "orange", "purple",
        "pink",  "small",  "large", "big",    "little", "tall",  "short", "long",   "wide",  "young",  "old",
        "new",   "wooden", "metal", "plastic", "empty", "full",  "open",  "closed", "dark",  "bright", "round",
        "square", "left",  "right", "happy",  "clean", "dirty", "hot",   "cold",   "soft",  "hard",   "thin",
        "thick", "same",   "different", "other", "covered", "standing", "sitting"};
    return words;
}

bool ends_with(const std::string& w, std::string_view suffix) {
    return w.size() > suffix.size() && w.compare(w.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_vowel(char c) { return c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u'; }

} // namespace

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (std::isalpha(static_cast<unsigned char>(c))) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) {
        out.push_back(std::move(cur));
    }
    return out;
}

std::vector<std::string> reference_tagger(const std::vector<std::string>& tokens) {
    std::vector<std::string> tags;
    tags.reserve(tokens.size());
    for (const std::string& w : tokens) {
        if (auto it = closed_class().find(w); it != closed_class().end()) {
            tags.push_back(it->second);
        } else if (known_adjectives().contains(w)) {
            tags.push_back("JJ");
        } else if (ends_with(w, "ing")) {
            tags.push_back("VBG");
        } else if (ends_with(w, "ed")) {
            tags.push_back("VBD");
        } else if (ends_with(w, "ous") || ends_with(w, "ful") || ends_with(w, "ive") || ends_with(w, "able")) {
            tags.push_back("JJ");
        } else if (ends_with(w, "s") && !ends_with(w, "ss")) {
            tags.push_back("NNS");
        } else {
            tags.push_back("NN");
        }
    }
    return tags;
}

std::string lemmatize(const std::string& word, const std::string& tag) {
    static const std::map<std::string, std::string> irregular{
        {"men", "man"},     {"women", "woman"},   {"children", "child"}, {"people", "person"}, {"feet", "foot"},
        {"teeth", "tooth"}, {"mice", "mouse"},    {"geese", "goose"},    {"knives", "knife"},  {"leaves", "leaf"},
        {"shelves", "shelf"}, {"sitting", "sit"}, {"running", "run"},    {"swimming", "swim"}, {"lying", "lie"},
        {"wore", "wear"},   {"worn", "wear"},     {"held", "hold"},      {"sat", "sit"},       {"stood", "stand"}};
    if (auto it = irregular.find(word); it != irregular.end()) {
        return it->second;
    }
    if (tag.starts_with("NN")) {
        if (ends_with(word, "ies") && word.size() > 4) {
            return word.substr(0, word.size() - 3) + "y";
        }
        if (ends_with(word, "ches") || ends_with(word, "shes") || ends_with(word, "xes") || ends_with(word, "sses")) {
            return word.substr(0, word.size() - 2);
        }
        if (ends_with(word, "s") && !ends_with(word, "ss") && !ends_with(word, "us")) {
            return word.substr(0, word.size() - 1);
        }
        return word;
    }
    if (tag.starts_with("VB")) {
        std::string stem = word;
        if (ends_with(word, "ing") && word.size() > 5) {
            stem = word.substr(0, word.size() - 3);
        } else if (ends_with(word, "ied")) {
            return word.substr(0, word.size() - 3) + "y";
        } else if (ends_with(word, "ed") && word.size() > 4) {
            stem = word.substr(0, word.size() - 2);
        } else if (ends_with(word, "es") && word.size() > 4) {
            return word.substr(0, word.size() - 2);
        } else if (ends_with(word, "s") && !ends_with(word, "ss") && word.size() > 3) {
            return word.substr(0, word.size() - 1);
        } else {
            return word;
        }
        // Undo consonant doubling ("stopp" -> "stop").
        const std::size_t n = stem.size();
        if (n >= 3 && stem[n - 1] == stem[n - 2] && !is_vowel(stem[n - 1]) && stem[n - 1] != 'l' &&
            stem[n - 1] != 's' && stem[n - 1] != 'z') {
            stem.pop_back();
        }
        return stem;
    }
    return word;
}

std::set<ConceptId> parse_concepts(std::string_view question, const std::set<std::string>& lexicon,
                                   const Tagger& tagger, std::string_view answer) {
    if (lexicon.empty()) {
        throw DomainError("parse_concepts: lexicon must be non-empty");
    }
    std::string ans;
    for (char c : answer) {
        if (!std::isspace(static_cast<unsigned char>(c)) && c != '.') {
            ans.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    std::set<ConceptId> out;
    if (ans == "no") {
        return out;
    }
    const std::vector<std::string> tokens = split_words(question);
    const std::vector<std::string> tags = tagger(tokens);
    if (tags.size() != tokens.size()) {
        throw DomainError("parse_concepts: tagger returned " + std::to_string(tags.size()) + " tags for " +
                          std::to_string(tokens.size()) + " tokens");
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const std::string& tag = tags[i];
        if (!(tag.starts_with("NN") || tag.starts_with("VB") || tag.starts_with("JJ"))) {
            continue;
        }
        const std::string lemma = lemmatize(tokens[i], tag);
        if (lexicon.contains(lemma)) {
            out.emplace(lemma);
        }
    }
    return out;
}

} // namespace relvit
