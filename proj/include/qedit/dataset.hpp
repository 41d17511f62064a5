#pragma once

// Synthetic closed-world knowledge: entities, functional relations with a few
// surface forms each, a pretraining corpus, and sequential edit streams.
//
// Every entity, relation form and function word is exactly one token, so the
// subject and relation spans of a rendered prompt are known exactly.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "qedit/model.hpp"
#include "qedit/numerics.hpp"

namespace qedit {

class Vocabulary {
public:
    Token add(const std::string& word);
    Token id(const std::string& word) const;  // throws Error(input) when unknown
    bool contains(const std::string& word) const { return index_.count(word) != 0; }
    const std::string& word(Token t) const;
    std::size_t size() const noexcept { return words_.size(); }

    Tokens encode(const std::string& text) const;  // whitespace separated
    std::string decode(const Tokens& tokens) const;

    const std::vector<std::string>& words() const noexcept { return words_; }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, Token> index_;
};

struct Entity {
    std::string name;
    std::string type;  // answer of the "{subject} is a" prompt
};

struct Relation {
    std::string name;
    std::vector<std::string> forms;  // one prompt template per entry; see render()
    // For derived relations: object = second(first(subject)).
    std::optional<std::pair<std::size_t, std::size_t>> composed_of;
};

struct Fact {
    std::size_t subject = 0;
    std::size_t relation = 0;
    std::size_t object = 0;
    friend bool operator==(const Fact&, const Fact&) = default;
};

struct Prompt {
    Tokens tokens;
    Span subject;
    Span relation;
    std::string text;
};

struct WorldSizes {
    std::size_t n_entities = 200;
    std::size_t n_relations = 8;
    std::size_t n_facts = 500;
};

class SyntheticWorld {
public:
    std::uint64_t seed = 0;
    std::vector<Entity> entities;
    std::vector<Relation> relations;
    std::vector<Fact> facts;
    std::vector<std::string> fillers;  // prefix words
    Vocabulary vocab;

    // Index of the fact for (subject, relation), if any.
    std::optional<std::size_t> find(std::size_t subject, std::size_t relation) const;
    std::optional<std::size_t> entity_index(const std::string& name) const;
    std::optional<std::size_t> relation_index(const std::string& name) const;

    std::size_t form_count(std::size_t relation) const { return relations.at(relation).forms.size(); }
    // Renders `prefix` + the given surface form of (subject, relation).
    Prompt render(std::size_t subject, std::size_t relation, std::size_t form,
                  const std::vector<std::string>& prefix = {}) const;
    // "{subject} is a"
    Prompt essence(std::size_t subject) const;

    // Rebuilds `vocab` and the lookup tables from entities/relations/fillers.
    void index();

private:
    std::unordered_map<std::uint64_t, std::size_t> fact_index_;
    std::unordered_map<std::string, std::size_t> entity_index_;
    std::unordered_map<std::string, std::size_t> relation_index_;
};

// Deterministic in (seed, sizes). Relation 0 is a base "leader" relation,
// relation 1 is "spouse" over persons and relation 2 is their composition,
// which supplies the chained-edit structure; the rest are random functional
// relations. Throws Error(config) on infeasible sizes.
SyntheticWorld generate_world(std::uint64_t seed, WorldSizes sizes);

// Canonical name of the three structural relations.
inline constexpr const char* kLeaderRelation = "leader";
inline constexpr const char* kSpouseRelation = "spouse";
inline constexpr const char* kLeaderSpouseRelation = "leader_spouse";

struct PretrainCorpusOptions {
    std::size_t prefixed_copies = 1;  // extra copies of each example behind random fillers
    std::size_t max_prefix = 3;
    std::uint64_t seed = 0;
};

// Every fact under every surface form plus the essence prompts.
std::vector<TrainExample> pretraining_corpus(const SyntheticWorld& world,
                                             const PretrainCorpusOptions& options);

struct LocalityProbe {
    std::string prompt;
    std::string answer;
    friend bool operator==(const LocalityProbe&, const LocalityProbe&) = default;
};

struct EditSample {
    std::size_t id = 0;
    std::string subject;
    std::string relation;
    std::string old_object;
    std::string new_object;
    std::string prompt;
    Span subject_span;
    Span relation_span;
    std::vector<std::string> rephrases;
    std::vector<LocalityProbe> locality;
    std::optional<std::size_t> chain_parent;

    friend bool operator==(const EditSample&, const EditSample&) = default;
};

struct EditStream {
    std::vector<EditSample> samples;

    // (parent index, child index) pairs, parent < child.
    std::vector<std::pair<std::size_t, std::size_t>> chain_links() const;
    friend bool operator==(const EditStream&, const EditStream&) = default;
};

struct StreamOptions {
    std::size_t edits = 100;
    double chain_fraction = 0.0;
    std::size_t n_rephrase = 2;
    std::size_t n_locality = 2;
    std::size_t max_chain_gap = 8;
    std::uint64_t seed = 0;
};

// Chained pairs share a subject: the parent edits the composed relation and
// the later child edits the base relation it is composed through, so the
// child changes what the parent's query should answer.
EditStream generate_edit_stream(const SyntheticWorld& world, const StreamOptions& options);

// Answer the parent query of a chain should give after the child edit.
std::string realigned_answer(const SyntheticWorld& world, const EditSample& parent,
                             const EditSample& child);

// Tokenized view of a sample against a vocabulary.
struct EncodedSample {
    Tokens prompt;
    Token target = 0;
    Token old_target = 0;
    Span subject;
    Span relation;
    std::vector<Tokens> rephrases;
    std::vector<std::pair<Tokens, Token>> locality;
    Tokens essence;  // "{subject} is a"
};

EncodedSample encode(const Vocabulary& vocab, const EditSample& sample);

// JSON lines, one EditSample per line. Loading reports malformed input as
// Error(parse) naming the 1-based line number.
void save_stream(const EditStream& stream, const std::filesystem::path& path);
EditStream load_stream(const std::filesystem::path& path);
std::string to_json_line(const EditSample& sample);

void save_world(const SyntheticWorld& world, const std::filesystem::path& path);
SyntheticWorld load_world(const std::filesystem::path& path);

}  // namespace qedit
