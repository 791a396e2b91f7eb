#pragma once

#include <functional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "relvit/concept_dictionary.hpp"

namespace relvit {

/// Part-of-speech tagger: one Penn-style tag per token.
using Tagger = std::function<std::vector<std::string>(const std::vector<std::string>& tokens)>;

/// Lower-cased alphabetic word tokens.
std::vector<std::string> split_words(std::string_view text);

/// Deterministic lexicon/suffix tagger shipped as the default.
std::vector<std::string> reference_tagger(const std::vector<std::string>& tokens);

/// Rule-table lemmatizer keyed on the tag family (NN*, VB*, JJ*).
std::string lemmatize(const std::string& word, const std::string& tag);

/// Keywords of a question: tokens tagged NN*/VB*/JJ*, lemmatized, filtered
/// to the lexicon. Questions answered "no" yield the empty set.
std::set<ConceptId> parse_concepts(std::string_view question, const std::set<std::string>& lexicon,
                                   const Tagger& tagger, std::string_view answer);

} // namespace relvit
