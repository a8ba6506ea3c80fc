#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace kerm {

// Lowercases ASCII and splits on whitespace and ASCII punctuation. Bytes
// >= 0x80 are word characters so UTF-8 words stay intact. This is the one
// tokenizer used everywhere (sentence scoring, entity recognition and the
// model vocabulary) so token offsets agree across stages.
std::vector<std::string> tokenize(std::string_view text);

// Canonical entity id: the tokens of `surface` joined with '_'. Underscores
// count as separators, so "Liver Enzyme", "liver_enzyme" and "liver-enzyme"
// all map to "liver_enzyme". ConceptNet URIs (/c/en/liver_enzyme/n) are
// reduced to their concept segment first. Returns "" if nothing is left.
std::string normalize_entity(std::string_view surface);

// "/r/UsedFor" -> "usedfor". Relation names are compared in this form.
std::string normalize_relation(std::string_view raw);

std::string join(const std::vector<std::string>& parts, std::string_view sep);

// Splits on runs of whitespace; empty fields are dropped.
std::vector<std::string> split_ws(std::string_view line);

// Splits on every occurrence of `delim`, keeping empty fields.
std::vector<std::string> split_exact(std::string_view line, char delim);

}  // namespace kerm
