#include "qedit/harness.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "qedit/engine.hpp"

namespace qedit {

using nlohmann::json;

namespace {

constexpr std::size_t kChunk = 256;
constexpr std::size_t kTraceFacts = 20;

// log_softmax of the next-token logits after each prompt.
std::vector<std::vector<double>> next_log_probs(const TransformerModel& model,
                                                const std::vector<Tokens>& prompts) {
    std::vector<std::vector<double>> out;
    out.reserve(prompts.size());
    for (std::size_t begin = 0; begin < prompts.size(); begin += kChunk) {
        const std::size_t end = std::min(prompts.size(), begin + kChunk);
        std::vector<Tokens> seqs(prompts.begin() + static_cast<std::ptrdiff_t>(begin),
                                 prompts.begin() + static_cast<std::ptrdiff_t>(end));
        engine::Cache cache;
        engine::embed(model, seqs, cache);
        std::vector<std::size_t> readout;
        for (std::size_t s = 0; s < seqs.size(); ++s) readout.push_back(cache.offsets[s + 1] - 1);
        engine::run(model, cache, {}, readout);
        for (std::size_t s = 0; s < seqs.size(); ++s) out.push_back(log_softmax(cache.logits.row(s)));
    }
    return out;
}

Token argmax(const std::vector<double>& v) {
    return static_cast<Token>(std::max_element(v.begin(), v.end()) - v.begin());
}

double accuracy(const TransformerModel& model, const std::vector<Tokens>& prompts,
                const std::vector<Token>& answers) {
    if (prompts.empty()) return 0.0;
    const auto got = greedy_next(model, prompts);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < got.size(); ++i) ok += got[i] == answers[i];
    return static_cast<double>(ok) / static_cast<double>(prompts.size());
}

}  // namespace

std::vector<Token> greedy_next(const TransformerModel& model, const std::vector<Tokens>& prompts) {
    std::vector<Token> out;
    for (const auto& lp : next_log_probs(model, prompts)) out.push_back(argmax(lp));
    return out;
}

double reliability(const TransformerModel& model, const std::vector<EncodedSample>& edits) {
    std::vector<Tokens> prompts;
    std::vector<Token> answers;
    for (const auto& e : edits) {
        prompts.push_back(e.prompt);
        answers.push_back(e.target);
    }
    return accuracy(model, prompts, answers);
}

double generality(const TransformerModel& model, const std::vector<EncodedSample>& edits) {
    std::vector<Tokens> prompts;
    std::vector<Token> answers;
    for (const auto& e : edits) {
        if (e.rephrases.empty()) throw Error(ErrorKind::config, "generality needs at least one rephrase per edit");
        for (const auto& r : e.rephrases) {
            prompts.push_back(r);
            answers.push_back(e.target);
        }
    }
    return accuracy(model, prompts, answers);
}

double locality(const TransformerModel& model, const TransformerModel& pre,
                const std::vector<EncodedSample>& edits) {
    std::vector<Tokens> prompts;
    for (const auto& e : edits)
        for (const auto& l : e.locality) prompts.push_back(l.first);
    if (prompts.empty()) return 1.0;
    return accuracy(model, prompts, greedy_next(pre, prompts));
}

double general_probe(const TransformerModel& model, const std::vector<LabeledPrompt>& probes) {
    std::vector<Tokens> prompts;
    std::vector<Token> answers;
    for (const auto& p : probes) {
        prompts.push_back(p.prompt);
        answers.push_back(p.answer);
    }
    return accuracy(model, prompts, answers);
}

double fact_accuracy(const TransformerModel& model, const SyntheticWorld& world) {
    std::vector<Tokens> prompts;
    std::vector<Token> answers;
    for (const auto& f : world.facts) {
        const Token answer = world.vocab.id(world.entities[f.object].name);
        for (std::size_t form = 0; form < world.form_count(f.relation); ++form) {
            prompts.push_back(world.render(f.subject, f.relation, form).tokens);
            answers.push_back(answer);
        }
    }
    return accuracy(model, prompts, answers);
}

EditLosses edit_losses(const TransformerModel& model, const TransformerModel& pre,
                       const std::vector<EncodedSample>& edits) {
    std::vector<Tokens> rel_prompts, gen_prompts, loc_prompts;
    std::vector<Token> rel_ans, gen_ans;
    for (const auto& e : edits) {
        rel_prompts.push_back(e.prompt);
        rel_ans.push_back(e.target);
        for (const auto& r : e.rephrases) {
            gen_prompts.push_back(r);
            gen_ans.push_back(e.target);
        }
        for (const auto& l : e.locality) loc_prompts.push_back(l.first);
    }
    EditLosses out;
    const auto rel = next_log_probs(model, rel_prompts);
    for (std::size_t i = 0; i < rel.size(); ++i) out.rel -= rel[i][rel_ans[i]];
    const auto gen = next_log_probs(model, gen_prompts);
    for (std::size_t i = 0; i < gen.size(); ++i) out.gen -= gen[i][gen_ans[i]];
    const auto after = next_log_probs(model, loc_prompts);
    const auto before = next_log_probs(pre, loc_prompts);
    for (std::size_t i = 0; i < after.size(); ++i) {
        std::vector<double> p(before[i].size()), q(after[i].size());
        for (std::size_t v = 0; v < p.size(); ++v) {
            p[v] = std::exp(before[i][v]);
            q[v] = std::exp(after[i][v]);
        }
        out.loc += kl_divergence(p, q);
    }
    if (!std::isfinite(out.rel) || !std::isfinite(out.gen) || !std::isfinite(out.loc)) {
        throw Error(ErrorKind::numeric, "edit losses are not finite");
    }
    out.ed = out.rel + out.gen + out.loc;
    return out;
}

void RunConfig::validate() const {
    editor.validate();
    if (queue.capacity_pct < 0.0 || queue.capacity_pct > 100.0) {
        throw Error(ErrorKind::config, "queue capacity_pct must lie in [0, 100]");
    }
    if (queue.eta_que < 0.0 || queue.eta_deq < 0.0) throw Error(ErrorKind::config, "eta thresholds must be >= 0");
    if (queue.top_k == 0) throw Error(ErrorKind::config, "top_k must be at least 1");
    if (edit_layers == 0) throw Error(ErrorKind::config, "edit at least one layer");
    if (static_cast<int>(no_st) + static_cast<int>(no_queue) + static_cast<int>(no_topk_random) > 1) {
        throw Error(ErrorKind::config, "at most one ablation flag may be set");
    }
    if (general_probe_size == 0) throw Error(ErrorKind::config, "general_probe_size must be at least 1");
}

std::string RunConfig::variant() const {
    if (no_st) return "no_st";
    if (no_queue) return "no_queue";
    if (no_topk_random) return "no_topk_random";
    return "full";
}

json to_json(const RunConfig& c) {
    const auto& e = c.editor;
    const auto& q = c.queue;
    return {{"seed", c.seed},
            {"eval_every", c.eval_every},
            {"general_probe_size", c.general_probe_size},
            {"layers", {{"mode", to_string(c.layer_mode)}, {"k", c.edit_layers}}},
            {"editor",
             {{"n_prefixes", e.n_prefixes},
              {"max_prefix", e.max_prefix},
              {"v_steps", e.v_steps},
              {"v_lr", e.v_lr},
              {"kl_weight", e.kl_weight},
              {"v_target_nll", e.v_target_nll},
              {"alpha1", e.alpha1},
              {"alpha2", e.alpha2},
              {"st_steps", e.st_steps},
              {"st_lr", e.st_lr},
              {"ridge", e.ridge}}},
            {"queue",
             {{"capacity_pct", q.capacity_pct},
              {"eta_que", q.eta_que},
              {"eta_deq", q.eta_deq},
              {"top_k", q.top_k},
              {"distance_mode", to_string(q.distance_mode)},
              {"dequeue_mode", to_string(q.dequeue_mode)}}},
            {"ablation", {{"no_st", c.no_st}, {"no_queue", c.no_queue}, {"no_topk_random", c.no_topk_random}}}};
}

namespace {

void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw Error(ErrorKind::config, "section '" + section + "' must be an object");
    for (const auto& [k, v] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || k == a;
        if (!ok) throw Error(ErrorKind::config, "unknown key '" + k + "' in section '" + section + "'");
    }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& section) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw Error(ErrorKind::config, "bad value for '" + section + "." + key + "'");
    }
}

}  // namespace

RunConfig run_config_from_json(const json& j, RunConfig c) {
    check_keys(j, "run", {"seed", "eval_every", "general_probe_size", "layers", "editor", "queue", "ablation"});
    read(j, "seed", c.seed, "run");
    read(j, "eval_every", c.eval_every, "run");
    read(j, "general_probe_size", c.general_probe_size, "run");
    if (j.contains("layers")) {
        const auto& l = j["layers"];
        check_keys(l, "layers", {"mode", "k"});
        std::string mode = to_string(c.layer_mode);
        read(l, "mode", mode, "layers");
        c.layer_mode = layer_mode_from_string(mode);
        read(l, "k", c.edit_layers, "layers");
    }
    if (j.contains("editor")) {
        const auto& e = j["editor"];
        check_keys(e, "editor", {"n_prefixes", "max_prefix", "v_steps", "v_lr", "kl_weight", "v_target_nll",
                                 "alpha1", "alpha2", "st_steps", "st_lr", "ridge"});
        read(e, "n_prefixes", c.editor.n_prefixes, "editor");
        read(e, "max_prefix", c.editor.max_prefix, "editor");
        read(e, "v_steps", c.editor.v_steps, "editor");
        read(e, "v_lr", c.editor.v_lr, "editor");
        read(e, "kl_weight", c.editor.kl_weight, "editor");
        read(e, "v_target_nll", c.editor.v_target_nll, "editor");
        read(e, "alpha1", c.editor.alpha1, "editor");
        read(e, "alpha2", c.editor.alpha2, "editor");
        read(e, "st_steps", c.editor.st_steps, "editor");
        read(e, "st_lr", c.editor.st_lr, "editor");
        read(e, "ridge", c.editor.ridge, "editor");
    }
    if (j.contains("queue")) {
        const auto& q = j["queue"];
        check_keys(q, "queue", {"capacity_pct", "eta_que", "eta_deq", "top_k", "distance_mode", "dequeue_mode"});
        read(q, "capacity_pct", c.queue.capacity_pct, "queue");
        read(q, "eta_que", c.queue.eta_que, "queue");
        read(q, "eta_deq", c.queue.eta_deq, "queue");
        read(q, "top_k", c.queue.top_k, "queue");
        std::string dm = to_string(c.queue.distance_mode), qm = to_string(c.queue.dequeue_mode);
        read(q, "distance_mode", dm, "queue");
        read(q, "dequeue_mode", qm, "queue");
        c.queue.distance_mode = distance_mode_from_string(dm);
        c.queue.dequeue_mode = dequeue_mode_from_string(qm);
    }
    if (j.contains("ablation")) {
        const auto& a = j["ablation"];
        check_keys(a, "ablation", {"no_st", "no_queue", "no_topk_random"});
        read(a, "no_st", c.no_st, "ablation");
        read(a, "no_queue", c.no_queue, "ablation");
        read(a, "no_topk_random", c.no_topk_random, "ablation");
    }
    return c;
}

std::string RunReport::csv() const {
    std::ostringstream os;
    os.precision(6);
    os << std::fixed;
    os << "t,rel,gen,loc,avg,general_acc,queue_len,corrections,failed_edits\n";
    for (const auto& r : rows) {
        os << r.t << ',' << r.rel << ',' << r.gen << ',' << r.loc << ',' << r.avg << ',' << r.general_acc << ','
           << r.queue_len << ',' << r.corrections << ',' << r.failed_edits << '\n';
    }
    return os.str();
}

json RunReport::summary() const {
    json rows_j = json::array();
    for (const auto& r : rows) {
        rows_j.push_back({{"t", r.t},
                          {"rel", r.rel},
                          {"gen", r.gen},
                          {"loc", r.loc},
                          {"avg", r.avg},
                          {"general_acc", r.general_acc},
                          {"mean_delta_norm", r.mean_delta_norm},
                          {"queue_len", r.queue_len},
                          {"corrections", r.corrections},
                          {"failed_edits", r.failed_edits}});
    }
    json out{{"variant", variant},
             {"edit_layers", edit_layers},
             {"rows", rows_j},
             {"general_acc_t0", general_acc_t0},
             {"general_acc_delta", rows.empty() ? 0.0 : rows.back().general_acc - general_acc_t0},
             {"losses", {{"rel", losses.rel}, {"gen", losses.gen}, {"loc", losses.loc}, {"ed", losses.ed}}},
             {"failed_edits", failed_edits},
             {"failures", failures},
             {"corrections", corrections},
             {"degraded", degraded},
             {"queue", queue_state}};
    return out;
}

std::vector<LabeledPrompt> general_probe_set(const SyntheticWorld& world, const EditStream& stream,
                                             std::size_t n, std::uint64_t seed) {
    std::set<std::string> subjects, locality_prompts;
    for (const auto& s : stream.samples) {
        subjects.insert(s.subject);
        for (const auto& l : s.locality) locality_prompts.insert(l.prompt);
    }
    std::vector<LabeledPrompt> pool;
    for (const auto& f : world.facts) {
        if (subjects.count(world.entities[f.subject].name)) continue;
        const Prompt p = world.render(f.subject, f.relation, 0);
        if (locality_prompts.count(p.text)) continue;
        pool.push_back({p.tokens, world.vocab.id(world.entities[f.object].name)});
    }
    if (pool.empty()) throw Error(ErrorKind::data, "no held-out facts left for the general probe");
    std::mt19937_64 rng(seed);
    std::shuffle(pool.begin(), pool.end(), rng);
    if (pool.size() > n) pool.resize(n);
    return pool;
}

TraceSummary trace_memorized(const TransformerModel& model, const SyntheticWorld& world, std::size_t n,
                             const TraceOptions& options) {
    const std::size_t L = model.config().n_layers;
    std::vector<std::size_t> order(world.facts.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(options.seed);
    std::shuffle(order.begin(), order.end(), rng);

    TraceSummary out;
    out.subject_ie.assign(L, 0.0);
    for (const std::size_t i : order) {
        if (out.facts == n) break;
        const Fact& f = world.facts[i];
        const Prompt p = world.render(f.subject, f.relation, 0);
        const Token answer = world.vocab.id(world.entities[f.object].name);
        if (greedy_next(model, {p.tokens})[0] != answer) continue;
        TraceOptions o = options;
        o.seed = options.seed + i;
        const TraceResult r = causal_trace(model, p.tokens, p.subject, answer, o);
        for (std::size_t l = 0; l < L; ++l) out.subject_ie[l] += r.ie_grid(l, r.subject_last);
        out.p_clean += r.p_clean;
        out.p_corrupt += r.p_corrupt;
        ++out.facts;
    }
    if (out.facts == 0) throw Error(ErrorKind::trace, "no memorized fact to trace");
    const double inv = 1.0 / static_cast<double>(out.facts);
    for (auto& v : out.subject_ie) v *= inv;
    out.p_clean *= inv;
    out.p_corrupt *= inv;
    out.selected_layer = static_cast<std::size_t>(
        std::max_element(out.subject_ie.begin(), out.subject_ie.end()) - out.subject_ie.begin());
    const double gap = out.p_clean - out.p_corrupt;
    out.recovered = gap > 0.0 ? out.subject_ie[out.selected_layer] / gap : 0.0;
    return out;
}

std::vector<CovMatrix> layer_covariances(const TransformerModel& model, const SyntheticWorld& world,
                                         double ridge) {
    const auto corpus = key_corpus(world);
    const std::size_t L = model.config().n_layers;
    std::vector<std::vector<Vec>> keys(L);
    for (std::size_t begin = 0; begin < corpus.size(); begin += kChunk) {
        const std::size_t end = std::min(corpus.size(), begin + kChunk);
        std::vector<Tokens> seqs;
        for (std::size_t i = begin; i < end; ++i) seqs.push_back(corpus[i]);
        engine::Cache cache;
        engine::embed(model, seqs, cache);
        engine::run(model, cache, {}, {0});
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t r = 0; r < cache.layers[l].key.rows(); ++r) keys[l].push_back(cache.layers[l].key.row_vec(r));
    }
    std::vector<CovMatrix> out;
    for (std::size_t l = 0; l < L; ++l) out.push_back(cov_from_keys(keys[l], ridge));
    return out;
}

RunReport run_sme(TransformerModel& model, const SyntheticWorld& world, const EditStream& stream,
                  const RunConfig& config, const std::vector<CovMatrix>* covs, const EditObserver& observer) {
    config.validate();
    const auto& cfg = model.config();
    const std::size_t T = stream.samples.size();
    if (T == 0) throw Error(ErrorKind::data, "empty edit stream");
    const std::size_t capacity =
        config.no_queue ? 0 : static_cast<std::size_t>(std::llround(config.queue.capacity_pct / 100.0 * static_cast<double>(T)));
    if (!config.no_queue && capacity > 0 && config.queue.top_k > capacity) {
        throw Error(ErrorKind::config, "top_k (" + std::to_string(config.queue.top_k) + ") exceeds the queue capacity (" +
                                           std::to_string(capacity) + " edits)");
    }
    const std::size_t every = config.eval_every ? config.eval_every : std::max<std::size_t>(1, T / 10);

    const TransformerModel pre = model;
    std::vector<CovMatrix> own;
    if (!covs) {
        own = layer_covariances(model, world, config.editor.ridge);
        covs = &own;
    }
    if (covs->size() != cfg.n_layers) throw Error(ErrorKind::config, "need one covariance per layer");
    std::vector<const CovMatrix*> cov_ptrs;
    for (const auto& c : *covs) cov_ptrs.push_back(&c);

    EditHyper hyper = config.editor;
    if (config.no_st) hyper.mixed_key = true;

    std::vector<WeightQueue> queues;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        WeightQueue q(config.seed * 1000003u + l);
        q.capacity = capacity;
        q.eta_que = config.queue.eta_que;
        q.eta_deq = config.queue.eta_deq;
        q.top_k = config.queue.top_k;
        q.distance_mode = config.queue.distance_mode;
        q.dequeue_mode = config.queue.dequeue_mode;
        q.selection = config.no_topk_random ? Selection::random : Selection::nearest;
        queues.push_back(std::move(q));
    }
    const bool keep_snapshot = config.queue.distance_mode == DistanceMode::snapshot;

    const auto probes = general_probe_set(world, stream, config.general_probe_size, config.seed);
    std::vector<EncodedSample> encoded;
    for (const auto& s : stream.samples) encoded.push_back(encode(world.vocab, s));

    const auto links = stream.chain_links();
    std::vector<Token> realigned(T, 0);
    for (const auto& [parent, child] : links)
        realigned[parent] = world.vocab.id(realigned_answer(world, stream.samples[parent], stream.samples[child]));

    // Samples 0..t, where a parent whose child has been applied is scored
    // against the realigned answer.
    const auto scored = [&](std::size_t t) {
        std::vector<EncodedSample> seen(encoded.begin(), encoded.begin() + static_cast<std::ptrdiff_t>(t + 1));
        for (const auto& [parent, child] : links)
            if (child <= t) seen[parent].target = realigned[parent];
        return seen;
    };

    RunReport report;
    report.variant = config.variant();
    report.general_acc_t0 = general_probe(pre, probes);
    double delta_norm_sum = 0.0;
    std::size_t delta_count = 0;

    std::vector<std::size_t> layers;
    if (config.layer_mode == LayerMode::traced) {
        TraceOptions topt;
        topt.seed = config.seed;
        TraceResult trace;
        trace.selected_layer = trace_memorized(pre, world, kTraceFacts, topt).selected_layer;
        layers = select_edit_layers(cfg, LayerMode::traced, &trace, 1);
    } else {
        layers = select_edit_layers(cfg, LayerMode::fixed_last_k, nullptr, config.edit_layers);
    }
    report.edit_layers = layers;

    for (std::size_t t = 0; t < T; ++t) {
        const auto& sample = encoded[t];
        try {
            const auto prefixes = sample_prefixes(world, hyper.n_prefixes, hyper.max_prefix, config.seed * 7919u + t);
            const EditOutcome outcome = apply_edit(model, sample, cov_ptrs, hyper, layers, prefixes);
            for (const auto& le : outcome.layers) {
                delta_norm_sum += le.delta.frobenius_norm();
                ++delta_count;
                if (config.no_queue) continue;
                QueueEntry entry = make_entry(t, le, model.w_proj(le.kv.layer), stream.samples[t], keep_snapshot);
                const StepReport step = process_edit(queues[le.kv.layer], model, std::move(entry), cov_ptrs);
                for (const auto& c : step.corrections) report.corrections += c.applied;
            }
        } catch (const Error& e) {
            ++report.failed_edits;
            report.failures.push_back("edit " + std::to_string(t) + ": " + e.what());
        }
        if (observer) observer(t, model);

        if ((t + 1) % every == 0 || t + 1 == T) {
            const auto seen = scored(t);
            ReportRow row;
            row.t = t + 1;
            row.rel = reliability(model, seen);
            row.gen = generality(model, seen);
            row.loc = locality(model, pre, seen);
            row.avg = (row.rel + row.gen + row.loc) / 3.0;
            row.general_acc = general_probe(model, probes);
            row.mean_delta_norm = delta_count ? delta_norm_sum / static_cast<double>(delta_count) : 0.0;
            for (const auto& q : queues) row.queue_len = std::max(row.queue_len, q.entries.size());
            row.corrections = report.corrections;
            row.failed_edits = report.failed_edits;
            report.rows.push_back(row);
        }
    }
    report.losses = edit_losses(model, pre, scored(T - 1));
    report.degraded = report.failed_edits * 10 > T;
    json qs = json::array();
    for (const auto& q : queues)
        if (!q.entries.empty()) qs.push_back(queue_state(q));
    report.queue_state = qs;
    return report;
}

std::vector<RunReport> run_ablations(const TransformerModel& base_model, const SyntheticWorld& world,
                                     const EditStream& stream, const RunConfig& config) {
    RunConfig base = config;
    base.no_st = base.no_queue = base.no_topk_random = false;
    base.validate();
    const auto covs = layer_covariances(base_model, world, base.editor.ridge);
    std::vector<RunReport> out;
    for (int v = 0; v < 4; ++v) {
        RunConfig c = base;
        c.no_st = v == 1;
        c.no_queue = v == 2;
        c.no_topk_random = v == 3;
        TransformerModel m = base_model;
        out.push_back(run_sme(m, world, stream, c, &covs));
    }
    return out;
}

}  // namespace qedit
