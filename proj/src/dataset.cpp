#include "qedit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

namespace qedit {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Vocabulary

Token Vocabulary::add(const std::string& word) {
    if (auto it = index_.find(word); it != index_.end()) return it->second;
    const auto t = static_cast<Token>(words_.size());
    words_.push_back(word);
    index_.emplace(word, t);
    return t;
}

Token Vocabulary::id(const std::string& word) const {
    auto it = index_.find(word);
    if (it == index_.end()) throw Error(ErrorKind::input, "unknown word '" + word + "'");
    return it->second;
}

const std::string& Vocabulary::word(Token t) const {
    if (t >= words_.size()) throw Error(ErrorKind::input, "token " + std::to_string(t) + " out of range");
    return words_[t];
}

Tokens Vocabulary::encode(const std::string& text) const {
    Tokens out;
    std::istringstream is(text);
    std::string w;
    while (is >> w) out.push_back(id(w));
    return out;
}

std::string Vocabulary::decode(const Tokens& tokens) const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += word(tokens[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// World

namespace {

constexpr const char* kSubjectSlot = "{s}";
const std::vector<std::string> kTypes{"person", "place", "org"};

std::uint64_t fact_key(std::size_t s, std::size_t r) {
    return (static_cast<std::uint64_t>(s) << 32) | static_cast<std::uint64_t>(r);
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

Relation make_relation(const std::string& name, const std::vector<std::string>& words) {
    Relation r;
    r.name = name;
    r.forms = {std::string(kSubjectSlot) + " " + words[0],
               std::string(kSubjectSlot) + " " + words[1] + " is",
               std::string(kSubjectSlot) + " " + words[2] + " of"};
    return r;
}

const std::vector<std::string> kGenericNames{
    "born_in",   "lives_in",  "works_for",  "friend_of", "rival_of",  "mentor_of",
    "founded",   "owns",      "admires",    "visited",   "studied_at", "member_of",
    "sibling_of", "neighbor_of", "employs", "supports",  "trained_by", "allied_with"};

}  // namespace

std::optional<std::size_t> SyntheticWorld::find(std::size_t subject, std::size_t relation) const {
    auto it = fact_index_.find(fact_key(subject, relation));
    if (it == fact_index_.end()) return std::nullopt;
    return it->second;
}

std::optional<std::size_t> SyntheticWorld::entity_index(const std::string& name) const {
    auto it = entity_index_.find(name);
    if (it == entity_index_.end()) return std::nullopt;
    return it->second;
}

std::optional<std::size_t> SyntheticWorld::relation_index(const std::string& name) const {
    auto it = relation_index_.find(name);
    if (it == relation_index_.end()) return std::nullopt;
    return it->second;
}

void SyntheticWorld::index() {
    vocab = Vocabulary();
    for (const auto& t : kTypes) vocab.add(t);
    vocab.add("is");
    vocab.add("a");
    vocab.add("of");
    for (const auto& f : fillers) vocab.add(f);
    entity_index_.clear();
    for (std::size_t i = 0; i < entities.size(); ++i) {
        vocab.add(entities[i].name);
        entity_index_[entities[i].name] = i;
    }
    relation_index_.clear();
    for (std::size_t r = 0; r < relations.size(); ++r) {
        relation_index_[relations[r].name] = r;
        for (const auto& form : relations[r].forms)
            for (const auto& w : split_words(form))
                if (w != kSubjectSlot) vocab.add(w);
    }
    fact_index_.clear();
    for (std::size_t i = 0; i < facts.size(); ++i) {
        fact_index_[fact_key(facts[i].subject, facts[i].relation)] = i;
    }
}

Prompt SyntheticWorld::render(std::size_t subject, std::size_t relation, std::size_t form,
                              const std::vector<std::string>& prefix) const {
    const auto& rel = relations.at(relation);
    const auto words = split_words(rel.forms.at(form));
    Prompt p;
    std::vector<std::string> all = prefix;
    std::size_t subj_pos = 0;
    for (const auto& w : words) {
        if (w == kSubjectSlot) {
            subj_pos = all.size();
            all.push_back(entities.at(subject).name);
        } else {
            all.push_back(w);
        }
    }
    for (const auto& w : all) {
        p.tokens.push_back(vocab.id(w));
        if (!p.text.empty()) p.text += ' ';
        p.text += w;
    }
    p.subject = {subj_pos, subj_pos + 1};
    // Relation words are the contiguous run after the subject.
    p.relation = {subj_pos + 1, all.size()};
    if (subj_pos != prefix.size() || p.relation.length() == 0) {
        throw Error(ErrorKind::data, "relation form '" + rel.forms[form] + "' must start with the subject");
    }
    return p;
}

Prompt SyntheticWorld::essence(std::size_t subject) const {
    Prompt p;
    p.text = entities.at(subject).name + " is a";
    p.tokens = vocab.encode(p.text);
    p.subject = {0, 1};
    p.relation = {1, 3};
    return p;
}

SyntheticWorld generate_world(std::uint64_t seed, WorldSizes sizes) {
    const std::size_t E = sizes.n_entities;
    const std::size_t R = sizes.n_relations;
    const std::size_t F = sizes.n_facts;
    if (E < 2 || R == 0 || F == 0) throw Error(ErrorKind::config, "world sizes must be positive (and >= 2 entities)");
    if (F > E * R) throw Error(ErrorKind::config, "n_facts exceeds n_entities * n_relations");
    if (R > 3 + kGenericNames.size()) throw Error(ErrorKind::config, "too many relations");

    std::mt19937_64 rng(seed);
    SyntheticWorld w;
    w.seed = seed;
    w.fillers = {"so", "well", "now", "then", "recall", "note", "indeed", "today",
                 "yes", "ok", "also", "quiz", "hey", "fact", "here", "next"};

    const bool structured = R >= 3;
    std::size_t persons = 0;
    if (structured) {
        persons = std::min<std::size_t>(static_cast<std::size_t>(0.4 * static_cast<double>(E)), F / 3);
        persons -= persons % 2;
        persons = std::max<std::size_t>(persons, 2);
        if (persons + 1 > E) throw Error(ErrorKind::config, "not enough entities for the structural relations");
    }
    for (std::size_t i = 0; i < E; ++i) {
        Entity e;
        if (i < persons) {
            e.type = "person";
        } else {
            e.type = (i % 2 == 0) ? "place" : "org";
        }
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%s_%03zu", e.type.c_str(), i);
        e.name = buf;
        w.entities.push_back(e);
    }

    std::size_t generic_relations = R;
    if (structured) {
        w.relations.push_back(make_relation(kLeaderRelation, {"leader", "led_by", "headed_by"}));
        w.relations.push_back(make_relation(kSpouseRelation, {"spouse", "married_to", "partner"}));
        Relation composed =
            make_relation(kLeaderSpouseRelation, {"leader_spouse", "first_spouse", "consort"});
        composed.composed_of = std::make_pair(std::size_t{0}, std::size_t{1});
        w.relations.push_back(composed);
        generic_relations = R - 3;
    }
    for (std::size_t g = 0; g < generic_relations; ++g) {
        const auto& n = kGenericNames[g];
        w.relations.push_back(make_relation(n, {n, n + "_alt", n + "_syn"}));
    }
    const std::size_t first_generic = structured ? 3 : 0;

    std::size_t leaders = 0;
    if (structured) {
        const std::size_t nonpersons = E - persons;
        const std::size_t remaining = F - std::min(F, persons);
        const std::size_t generic_cap = generic_relations * E;
        if (persons > F) throw Error(ErrorKind::config, "n_facts too small for the spouse relation");
        leaders = std::min({nonpersons, std::max<std::size_t>(1, F / 10), remaining / 2});
        if (remaining - 2 * leaders > generic_cap) {
            leaders = std::min(nonpersons, (remaining - generic_cap + 1) / 2);
        }
        if (2 * leaders > remaining || remaining - 2 * leaders > generic_cap) {
            throw Error(ErrorKind::config, "fact count cannot be realized with these sizes");
        }
    }

    // spouse: random perfect matching of persons.
    if (structured) {
        std::vector<std::size_t> ps(persons);
        for (std::size_t i = 0; i < persons; ++i) ps[i] = i;
        std::shuffle(ps.begin(), ps.end(), rng);
        std::vector<std::size_t> spouse(persons);
        for (std::size_t i = 0; i + 1 < persons; i += 2) {
            spouse[ps[i]] = ps[i + 1];
            spouse[ps[i + 1]] = ps[i];
        }
        for (std::size_t p = 0; p < persons; ++p) w.facts.push_back({p, 1, spouse[p]});

        std::vector<std::size_t> subjects;
        for (std::size_t i = persons; i < E; ++i) subjects.push_back(i);
        std::shuffle(subjects.begin(), subjects.end(), rng);
        std::uniform_int_distribution<std::size_t> pick_person(0, persons - 1);
        for (std::size_t i = 0; i < leaders; ++i) {
            const std::size_t leader = pick_person(rng);
            w.facts.push_back({subjects[i], 0, leader});
            w.facts.push_back({subjects[i], 2, spouse[leader]});
        }
    }

    const std::size_t generic_facts = F - w.facts.size();
    if (generic_facts > 0) {
        std::vector<std::uint64_t> pairs;
        pairs.reserve(generic_relations * E);
        for (std::size_t r = 0; r < generic_relations; ++r)
            for (std::size_t s = 0; s < E; ++s) pairs.push_back(fact_key(s, first_generic + r));
        std::shuffle(pairs.begin(), pairs.end(), rng);
        std::uniform_int_distribution<std::size_t> pick(0, E - 2);
        for (std::size_t i = 0; i < generic_facts; ++i) {
            const std::size_t s = static_cast<std::size_t>(pairs[i] >> 32);
            const std::size_t r = static_cast<std::size_t>(pairs[i] & 0xffffffffu);
            std::size_t o = pick(rng);
            if (o >= s) ++o;
            w.facts.push_back({s, r, o});
        }
    }
    w.index();
    return w;
}

std::vector<TrainExample> pretraining_corpus(const SyntheticWorld& world,
                                             const PretrainCorpusOptions& options) {
    std::mt19937_64 rng(options.seed);
    std::uniform_int_distribution<std::size_t> plen(1, std::max<std::size_t>(1, options.max_prefix));
    std::uniform_int_distribution<std::size_t> pword(0, world.fillers.size() - 1);
    auto random_prefix = [&] {
        std::vector<std::string> p(plen(rng));
        for (auto& w : p) w = world.fillers[pword(rng)];
        return p;
    };
    std::vector<TrainExample> out;
    auto emit = [&](const Tokens& prompt, Token target) { out.push_back({prompt, target}); };
    for (std::size_t copy = 0; copy <= options.prefixed_copies; ++copy) {
        for (const auto& f : world.facts) {
            const Token target = world.vocab.id(world.entities[f.object].name);
            for (std::size_t form = 0; form < world.form_count(f.relation); ++form) {
                const auto prefix = copy == 0 ? std::vector<std::string>{} : random_prefix();
                emit(world.render(f.subject, f.relation, form, prefix).tokens, target);
            }
        }
        for (std::size_t e = 0; e < world.entities.size(); ++e) {
            Tokens prompt = world.essence(e).tokens;
            if (copy > 0) {
                Tokens pre;
                for (const auto& w : random_prefix()) pre.push_back(world.vocab.id(w));
                prompt.insert(prompt.begin(), pre.begin(), pre.end());
            }
            emit(prompt, world.vocab.id(world.entities[e].type));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Edit streams

std::vector<std::pair<std::size_t, std::size_t>> EditStream::chain_links() const {
    std::vector<std::pair<std::size_t, std::size_t>> links;
    for (std::size_t j = 0; j < samples.size(); ++j) {
        if (samples[j].chain_parent) links.emplace_back(*samples[j].chain_parent, j);
    }
    return links;
}

namespace {

EditSample make_sample(const SyntheticWorld& world, std::size_t subject, std::size_t relation,
                       std::size_t new_object, std::size_t n_rephrase, std::mt19937_64& rng) {
    const auto fact = world.find(subject, relation);
    EditSample s;
    s.subject = world.entities[subject].name;
    s.relation = world.relations[relation].name;
    s.old_object = world.entities[world.facts[*fact].object].name;
    s.new_object = world.entities[new_object].name;
    const Prompt p = world.render(subject, relation, 0);
    s.prompt = p.text;
    s.subject_span = p.subject;
    s.relation_span = p.relation;
    const std::size_t forms = world.form_count(relation);
    std::uniform_int_distribution<std::size_t> pword(0, world.fillers.size() - 1);
    for (std::size_t i = 0; i < n_rephrase; ++i) {
        const std::size_t form = 1 + i % std::max<std::size_t>(1, forms - 1);
        std::vector<std::string> prefix;
        // Past the distinct surface forms, vary by a filler prefix.
        if (i >= forms - 1) prefix.push_back(world.fillers[pword(rng)]);
        s.rephrases.push_back(world.render(subject, relation, std::min(form, forms - 1), prefix).text);
    }
    return s;
}

}  // namespace

EditStream generate_edit_stream(const SyntheticWorld& world, const StreamOptions& options) {
    if (options.edits == 0) throw Error(ErrorKind::config, "edit stream needs at least one edit");
    if (!(options.chain_fraction >= 0.0 && options.chain_fraction <= 1.0)) {
        throw Error(ErrorKind::config, "chain_fraction must lie in [0, 1]");
    }
    if (options.n_rephrase == 0 || options.n_locality == 0) {
        throw Error(ErrorKind::config, "need at least one rephrase and one locality probe");
    }
    std::mt19937_64 rng(options.seed);
    const std::size_t T = options.edits;
    const std::size_t pairs =
        static_cast<std::size_t>(std::llround(options.chain_fraction * static_cast<double>(T) / 2.0));

    const auto leader_rel = world.relation_index(kLeaderRelation);
    const auto spouse_rel = world.relation_index(kSpouseRelation);
    const auto composed_rel = world.relation_index(kLeaderSpouseRelation);

    std::vector<std::size_t> persons_with_spouse;
    if (spouse_rel) {
        for (const auto& f : world.facts)
            if (f.relation == *spouse_rel) persons_with_spouse.push_back(f.subject);
    }

    // Chain candidates: subjects with both a leader fact and its composition.
    std::vector<std::size_t> chain_subjects;
    if (leader_rel && composed_rel) {
        for (const auto& f : world.facts) {
            if (f.relation == *leader_rel && world.find(f.subject, *composed_rel)) {
                chain_subjects.push_back(f.subject);
            }
        }
    }
    if (pairs > 0 && (pairs > chain_subjects.size() || persons_with_spouse.size() < 4)) {
        throw Error(ErrorKind::data, "chain_fraction needs " + std::to_string(pairs) +
                                         " chainable subjects, world has " +
                                         std::to_string(chain_subjects.size()));
    }
    if (2 * pairs > T) throw Error(ErrorKind::data, "chain_fraction leaves no room in the stream");
    std::shuffle(chain_subjects.begin(), chain_subjects.end(), rng);

    // Slot layout: each pair takes (i, j) with 1 <= j - i <= max_chain_gap.
    std::vector<int> slot_pair(T, -1);
    std::vector<bool> slot_is_child(T, false);
    const std::size_t gap = std::max<std::size_t>(1, options.max_chain_gap);
    for (std::size_t p = 0; p < pairs; ++p) {
        bool placed = false;
        for (int attempt = 0; attempt < 10000 && !placed; ++attempt) {
            std::uniform_int_distribution<std::size_t> pick(0, T - 2);
            const std::size_t i = pick(rng);
            if (slot_pair[i] != -1) continue;
            std::vector<std::size_t> free;
            for (std::size_t j = i + 1; j < std::min(T, i + gap + 1); ++j)
                if (slot_pair[j] == -1) free.push_back(j);
            if (free.empty()) continue;
            const std::size_t j = free[std::uniform_int_distribution<std::size_t>(0, free.size() - 1)(rng)];
            slot_pair[i] = static_cast<int>(p);
            slot_pair[j] = static_cast<int>(p);
            slot_is_child[j] = true;
            placed = true;
        }
        if (!placed) throw Error(ErrorKind::data, "could not lay out chained edits in the stream");
    }

    std::set<std::uint64_t> edited;
    auto key = [](std::size_t s, std::size_t r) { return (static_cast<std::uint64_t>(s) << 32) | r; };
    for (std::size_t p = 0; p < pairs; ++p) {
        edited.insert(key(chain_subjects[p], *leader_rel));
        edited.insert(key(chain_subjects[p], *composed_rel));
    }

    auto pick_other = [&](const std::vector<std::size_t>& pool, std::set<std::size_t> avoid) {
        std::vector<std::size_t> ok;
        for (auto x : pool)
            if (!avoid.count(x)) ok.push_back(x);
        if (ok.empty()) throw Error(ErrorKind::data, "no admissible replacement object");
        return ok[std::uniform_int_distribution<std::size_t>(0, ok.size() - 1)(rng)];
    };
    std::vector<std::size_t> all_entities(world.entities.size());
    for (std::size_t i = 0; i < all_entities.size(); ++i) all_entities[i] = i;

    // Plain edits: one per subject, on subjects outside every chain. All
    // relations of a subject read the same subject value, so two edits on one
    // subject would overwrite each other.
    std::set<std::size_t> used_subjects(chain_subjects.begin(), chain_subjects.begin() + static_cast<std::ptrdiff_t>(pairs));
    std::vector<std::size_t> candidates(world.facts.size());
    std::iota(candidates.begin(), candidates.end(), 0);
    std::shuffle(candidates.begin(), candidates.end(), rng);
    const std::size_t plain_needed = T - 2 * pairs;
    std::vector<std::size_t> plain_facts;
    for (const std::size_t i : candidates) {
        if (plain_facts.size() == plain_needed) break;
        if (used_subjects.insert(world.facts[i].subject).second) plain_facts.push_back(i);
    }
    if (plain_facts.size() < plain_needed) throw Error(ErrorKind::data, "world has too few subjects for the stream");

    EditStream stream;
    stream.samples.resize(T);
    std::vector<std::size_t> parent_slot(pairs);
    std::vector<std::size_t> parent_target(pairs);
    std::size_t next_plain = 0;
    for (std::size_t t = 0; t < T; ++t) {
        if (slot_pair[t] >= 0 && !slot_is_child[t]) {
            const auto p = static_cast<std::size_t>(slot_pair[t]);
            const std::size_t s = chain_subjects[p];
            const std::size_t old = world.facts[*world.find(s, *composed_rel)].object;
            parent_target[p] = pick_other(persons_with_spouse, {old});
            stream.samples[t] = make_sample(world, s, *composed_rel, parent_target[p], options.n_rephrase, rng);
            parent_slot[p] = t;
        } else if (slot_pair[t] >= 0) {
            const auto p = static_cast<std::size_t>(slot_pair[t]);
            const std::size_t s = chain_subjects[p];
            const std::size_t old_leader = world.facts[*world.find(s, *leader_rel)].object;
            const std::size_t old_spouse = world.facts[*world.find(s, *composed_rel)].object;
            // The new leader's spouse must differ from both earlier answers.
            std::set<std::size_t> avoid{old_leader};
            for (auto person : persons_with_spouse) {
                const std::size_t sp = world.facts[*world.find(person, *spouse_rel)].object;
                if (sp == old_spouse || sp == parent_target[p]) avoid.insert(person);
            }
            const std::size_t leader = pick_other(persons_with_spouse, avoid);
            stream.samples[t] = make_sample(world, s, *leader_rel, leader, options.n_rephrase, rng);
            stream.samples[t].chain_parent = parent_slot[p];
        } else {
            const auto& f = world.facts[plain_facts[next_plain++]];
            edited.insert(key(f.subject, f.relation));
            const bool person_range = spouse_rel && (f.relation == *spouse_rel ||
                                                     (leader_rel && f.relation == *leader_rel) ||
                                                     (composed_rel && f.relation == *composed_rel));
            const std::size_t o = pick_other(person_range ? persons_with_spouse : all_entities,
                                             {f.object, f.subject});
            stream.samples[t] = make_sample(world, f.subject, f.relation, o, options.n_rephrase, rng);
        }
        stream.samples[t].id = t;
    }

    // Locality probes: facts about subjects no edit touches. A subject edit
    // moves the subject's value vector, which every relation of it reads.
    std::set<std::size_t> edited_subjects;
    for (const auto& k : edited) edited_subjects.insert(static_cast<std::size_t>(k >> 32));
    std::vector<std::size_t> probe_pool;
    for (std::size_t i = 0; i < world.facts.size(); ++i) {
        if (!edited_subjects.count(world.facts[i].subject)) probe_pool.push_back(i);
    }
    if (probe_pool.size() < options.n_locality) throw Error(ErrorKind::data, "no facts left for locality probes");
    for (auto& sample : stream.samples) {
        std::vector<std::size_t> chosen = probe_pool;
        std::shuffle(chosen.begin(), chosen.end(), rng);
        for (std::size_t k = 0; k < options.n_locality; ++k) {
            const auto& f = world.facts[chosen[k]];
            sample.locality.push_back({world.render(f.subject, f.relation, 0).text, world.entities[f.object].name});
        }
    }
    return stream;
}

std::string realigned_answer(const SyntheticWorld& world, const EditSample& parent,
                             const EditSample& child) {
    const auto rel = world.relation_index(parent.relation);
    if (!rel || !world.relations[*rel].composed_of) {
        throw Error(ErrorKind::data, "sample " + std::to_string(parent.id) + " is not a composed-relation edit");
    }
    const auto [first, second] = *world.relations[*rel].composed_of;
    if (world.relations[first].name != child.relation || parent.subject != child.subject) {
        throw Error(ErrorKind::data, "samples " + std::to_string(parent.id) + " and " +
                                         std::to_string(child.id) + " are not a chain");
    }
    const auto leader = world.entity_index(child.new_object);
    const auto fact = leader ? world.find(*leader, second) : std::nullopt;
    if (!fact) throw Error(ErrorKind::data, "new object of the chain child has no " + world.relations[second].name);
    return world.entities[world.facts[*fact].object].name;
}

EncodedSample encode(const Vocabulary& vocab, const EditSample& sample) {
    EncodedSample e;
    e.prompt = vocab.encode(sample.prompt);
    e.target = vocab.id(sample.new_object);
    e.old_target = vocab.id(sample.old_object);
    e.subject = sample.subject_span;
    e.relation = sample.relation_span;
    if (e.subject.end > e.prompt.size() || e.relation.end > e.prompt.size() || e.subject.length() == 0 ||
        e.relation.length() == 0) {
        throw Error(ErrorKind::data, "sample " + std::to_string(sample.id) + " has spans outside its prompt");
    }
    for (const auto& r : sample.rephrases) e.rephrases.push_back(vocab.encode(r));
    for (const auto& l : sample.locality) e.locality.emplace_back(vocab.encode(l.prompt), vocab.id(l.answer));
    e.essence = vocab.encode(sample.subject + " is a");
    return e;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

json sample_json(const EditSample& s) {
    json loc = json::array();
    for (const auto& l : s.locality) loc.push_back({{"prompt", l.prompt}, {"answer", l.answer}});
    json j;
    j["id"] = s.id;
    j["subject"] = s.subject;
    j["relation"] = s.relation;
    j["old_object"] = s.old_object;
    j["new_object"] = s.new_object;
    j["prompt"] = s.prompt;
    j["subject_span"] = {s.subject_span.start, s.subject_span.end};
    j["relation_span"] = {s.relation_span.start, s.relation_span.end};
    j["rephrases"] = s.rephrases;
    j["locality"] = loc;
    j["chain_parent"] = s.chain_parent ? json(*s.chain_parent) : json(nullptr);
    return j;
}

EditSample sample_from_json(const json& j) {
    EditSample s;
    s.id = j.at("id").get<std::size_t>();
    s.subject = j.at("subject").get<std::string>();
    s.relation = j.at("relation").get<std::string>();
    s.old_object = j.at("old_object").get<std::string>();
    s.new_object = j.at("new_object").get<std::string>();
    s.prompt = j.at("prompt").get<std::string>();
    const auto& ss = j.at("subject_span");
    const auto& rs = j.at("relation_span");
    s.subject_span = {ss.at(0).get<std::size_t>(), ss.at(1).get<std::size_t>()};
    s.relation_span = {rs.at(0).get<std::size_t>(), rs.at(1).get<std::size_t>()};
    s.rephrases = j.at("rephrases").get<std::vector<std::string>>();
    for (const auto& l : j.at("locality")) {
        s.locality.push_back({l.at("prompt").get<std::string>(), l.at("answer").get<std::string>()});
    }
    if (!j.at("chain_parent").is_null()) s.chain_parent = j.at("chain_parent").get<std::size_t>();
    return s;
}

}  // namespace

std::string to_json_line(const EditSample& sample) { return sample_json(sample).dump(); }

void save_stream(const EditStream& stream, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error(ErrorKind::io, "cannot write " + path.string());
    for (const auto& s : stream.samples) os << to_json_line(s) << '\n';
    if (!os) throw Error(ErrorKind::io, "failed writing " + path.string());
}

EditStream load_stream(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorKind::io, "cannot open " + path.string());
    EditStream stream;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            stream.samples.push_back(sample_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw Error(ErrorKind::parse, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return stream;
}

void save_world(const SyntheticWorld& world, const std::filesystem::path& path) {
    json j;
    j["seed"] = world.seed;
    json ents = json::array();
    for (const auto& e : world.entities) ents.push_back({{"name", e.name}, {"type", e.type}});
    j["entities"] = ents;
    json rels = json::array();
    for (const auto& r : world.relations) {
        json jr{{"name", r.name}, {"forms", r.forms}};
        jr["composed_of"] = r.composed_of ? json::array({r.composed_of->first, r.composed_of->second})
                                          : json(nullptr);
        rels.push_back(jr);
    }
    j["relations"] = rels;
    json facts = json::array();
    for (const auto& f : world.facts) facts.push_back({f.subject, f.relation, f.object});
    j["facts"] = facts;
    j["fillers"] = world.fillers;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error(ErrorKind::io, "cannot write " + path.string());
    os << j.dump(1) << '\n';
    if (!os) throw Error(ErrorKind::io, "failed writing " + path.string());
}

SyntheticWorld load_world(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorKind::io, "cannot open " + path.string());
    SyntheticWorld w;
    try {
        const json j = json::parse(is);
        w.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& e : j.at("entities")) {
            w.entities.push_back({e.at("name").get<std::string>(), e.at("type").get<std::string>()});
        }
        for (const auto& r : j.at("relations")) {
            Relation rel;
            rel.name = r.at("name").get<std::string>();
            rel.forms = r.at("forms").get<std::vector<std::string>>();
            if (!r.at("composed_of").is_null()) {
                rel.composed_of = std::make_pair(r["composed_of"].at(0).get<std::size_t>(),
                                                 r["composed_of"].at(1).get<std::size_t>());
            }
            w.relations.push_back(rel);
        }
        for (const auto& f : j.at("facts")) {
            w.facts.push_back({f.at(0).get<std::size_t>(), f.at(1).get<std::size_t>(), f.at(2).get<std::size_t>()});
        }
        w.fillers = j.at("fillers").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw Error(ErrorKind::parse, path.string() + ": " + e.what());
    }
    w.index();
    return w;
}

}  // namespace qedit
