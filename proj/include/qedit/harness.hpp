#pragma once

// The sequential editing driver and its metrics.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "qedit/dataset.hpp"
#include "qedit/editor.hpp"
#include "qedit/queue.hpp"
#include "qedit/tracing.hpp"

namespace qedit {

// Greedy next token of each prompt, batched.
std::vector<Token> greedy_next(const TransformerModel& model, const std::vector<Tokens>& prompts);

struct LabeledPrompt {
    Tokens prompt;
    Token answer = 0;
};

// Fraction of edit prompts whose greedy answer is the sample's target.
double reliability(const TransformerModel& model, const std::vector<EncodedSample>& edits);
// The same over every rephrase of every edit. Throws Error(config) when an
// edit has no rephrases.
double generality(const TransformerModel& model, const std::vector<EncodedSample>& edits);
// Fraction of locality probes where the model agrees with `pre` on the argmax.
double locality(const TransformerModel& model, const TransformerModel& pre,
                const std::vector<EncodedSample>& edits);
double general_probe(const TransformerModel& model, const std::vector<LabeledPrompt>& probes);

// Greedy accuracy over every fact under every surface form.
double fact_accuracy(const TransformerModel& model, const SyntheticWorld& world);

struct EditLosses {
    double rel = 0.0;
    double gen = 0.0;
    double loc = 0.0;
    double ed = 0.0;
};

// Summed NLL of edit answers and rephrases and summed KL(pre || model) at
// the locality probes' answer positions.
EditLosses edit_losses(const TransformerModel& model, const TransformerModel& pre,
                       const std::vector<EncodedSample>& edits);

struct QueueSettings {
    double capacity_pct = 30.0;  // of the planned stream length
    double eta_que = 0.5;
    double eta_deq = 0.5;
    std::size_t top_k = 5;  // 50 at LLM scale with a 300-entry queue
    DistanceMode distance_mode = DistanceMode::delta;
    DequeueMode dequeue_mode = DequeueMode::rationale;
};

struct RunConfig {
    std::size_t eval_every = 0;  // 0: max(1, T/10)
    EditHyper editor;
    QueueSettings queue;
    LayerMode layer_mode = LayerMode::fixed_last_k;
    std::size_t edit_layers = 3;
    bool no_st = false;
    bool no_queue = false;
    bool no_topk_random = false;
    std::size_t general_probe_size = 100;
    std::uint64_t seed = 0;

    void validate() const;
    std::string variant() const;
};

nlohmann::json to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});

struct ReportRow {
    std::size_t t = 0;
    double rel = 0.0, gen = 0.0, loc = 0.0, avg = 0.0;
    double general_acc = 0.0;
    double mean_delta_norm = 0.0;
    std::size_t queue_len = 0;
    std::size_t corrections = 0;
    std::size_t failed_edits = 0;
};

struct RunReport {
    std::string variant;
    std::vector<std::size_t> edit_layers;
    std::vector<ReportRow> rows;
    double general_acc_t0 = 0.0;
    EditLosses losses;
    std::size_t failed_edits = 0;
    std::vector<std::string> failures;  // one message per failed edit
    std::size_t corrections = 0;
    bool degraded = false;  // more than 10% of edits failed
    nlohmann::json queue_state;

    std::string csv() const;
    nlohmann::json summary() const;
};

struct TraceSummary {
    std::size_t facts = 0;
    std::vector<double> subject_ie;  // mean indirect effect per layer at the last subject token
    double p_clean = 0.0;
    double p_corrupt = 0.0;
    std::size_t selected_layer = 0;
    // Mean effect of the selected site over mean (p_clean - p_corrupt).
    double recovered = 0.0;
};

// Traces the first `n` facts (in seeded order) that the model answers
// correctly, under the first surface form. Throws Error(trace) if none is.
TraceSummary trace_memorized(const TransformerModel& model, const SyntheticWorld& world, std::size_t n,
                             const TraceOptions& options);

// Held-out facts: no subject is edited and no prompt is a locality probe.
std::vector<LabeledPrompt> general_probe_set(const SyntheticWorld& world, const EditStream& stream,
                                             std::size_t n, std::uint64_t seed);

// Ridge covariances of the edit layers, estimated on the world's key corpus.
std::vector<CovMatrix> layer_covariances(const TransformerModel& model, const SyntheticWorld& world,
                                         double ridge);

// Called after every edit with (t, model); used by tests and the CLI.
using EditObserver = std::function<void(std::size_t, const TransformerModel&)>;

// Edits `model` in place through the whole stream. `covs`, when given, must
// come from the same pre-edit model (one per layer).
RunReport run_sme(TransformerModel& model, const SyntheticWorld& world, const EditStream& stream,
                  const RunConfig& config, const std::vector<CovMatrix>* covs = nullptr,
                  const EditObserver& observer = {});

// full, no_st, no_queue and no_topk_random from copies of `base_model`.
std::vector<RunReport> run_ablations(const TransformerModel& base_model, const SyntheticWorld& world,
                                     const EditStream& stream, const RunConfig& config);

}  // namespace qedit
