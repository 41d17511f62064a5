#include "qedit/tracing.hpp"

#include <cmath>
#include <random>

#include "qedit/engine.hpp"

namespace qedit {

namespace {

std::vector<double> embedding_std(const TransformerModel& model) {
    const Matrix& e = model.token_embedding;
    std::vector<double> mean(e.cols(), 0.0), sd(e.cols(), 0.0);
    for (std::size_t r = 0; r < e.rows(); ++r)
        for (std::size_t c = 0; c < e.cols(); ++c) mean[c] += e(r, c);
    for (auto& m : mean) m /= static_cast<double>(e.rows());
    for (std::size_t r = 0; r < e.rows(); ++r)
        for (std::size_t c = 0; c < e.cols(); ++c) sd[c] += (e(r, c) - mean[c]) * (e(r, c) - mean[c]);
    for (auto& s : sd) s = std::sqrt(s / static_cast<double>(e.rows()));
    return sd;
}

double answer_prob(std::span<const double> logits, Token answer) {
    return softmax(logits)[answer];
}

}  // namespace

Matrix corrupt_subject(const TransformerModel& model, const Tokens& tokens, Span subject,
                       double noise_scale, std::uint64_t seed) {
    if (subject.length() == 0 || subject.end > tokens.size()) {
        throw Error(ErrorKind::span, "subject span [" + std::to_string(subject.start) + ", " +
                                         std::to_string(subject.end) + ") invalid for a prompt of " +
                                         std::to_string(tokens.size()) + " tokens");
    }
    engine::Cache cache;
    engine::embed(model, {tokens}, cache);
    Matrix out = cache.embed;
    const auto sd = embedding_std(model);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    for (std::size_t i = subject.start; i < subject.end; ++i)
        for (std::size_t c = 0; c < out.cols(); ++c) out(i, c) += noise_scale * sd[c] * n(rng);
    return out;
}

Matrix forward_from_embedding(const TransformerModel& model, const Tokens& tokens,
                              const Matrix& embedding, const PatchSpec& patch) {
    engine::Cache cache;
    engine::embed(model, {tokens}, cache);
    if (embedding.rows() != tokens.size() || embedding.cols() != model.config().d_model) {
        throw Error(ErrorKind::dimension, "embedding shape does not match the prompt");
    }
    cache.embed = embedding;
    std::vector<engine::RowPatch> rows;
    for (const auto& p : patch) rows.push_back({p.layer, p.position, p.site, p.replacement});
    engine::run(model, cache, rows);
    return cache.logits;
}

std::size_t argmax_layer(const Matrix& ie_grid, std::size_t column) {
    if (column >= ie_grid.cols()) throw Error(ErrorKind::span, "trace column outside the grid");
    std::size_t best = 0;
    for (std::size_t l = 1; l < ie_grid.rows(); ++l)
        if (ie_grid(l, column) > ie_grid(best, column)) best = l;
    return best;
}

TraceResult causal_trace(const TransformerModel& model, const Tokens& tokens, Span subject,
                         Token answer, const TraceOptions& options, const std::string& label) {
    const auto& cfg = model.config();
    const std::size_t L = cfg.n_layers, T = tokens.size();
    if (options.noise_samples == 0) throw Error(ErrorKind::config, "noise_samples must be at least 1");

    const ForwardResult clean = forward(model, tokens, true);
    const auto last = clean.logits.row(T - 1);
    std::size_t best = 0;
    for (std::size_t v = 1; v < last.size(); ++v)
        if (last[v] > last[best]) best = v;
    if (best != answer) {
        throw Error(ErrorKind::trace, label + ": the model does not predict the traced answer");
    }

    TraceResult result;
    result.p_clean = answer_prob(last, answer);
    result.ie_grid = Matrix(L, T);

    // One batch per noise sample: the plain corrupted run followed by every
    // single-site restoration, each as its own sequence.
    const std::size_t runs = 1 + L * T;
    std::vector<Tokens> seqs(runs, tokens);
    for (std::size_t s = 0; s < options.noise_samples; ++s) {
        const Matrix corrupt = corrupt_subject(model, tokens, subject, options.noise_scale, options.seed + s);
        engine::Cache cache;
        engine::embed(model, seqs, cache);
        for (std::size_t r = 0; r < runs; ++r)
            for (std::size_t i = 0; i < T; ++i) cache.embed.set_row(r * T + i, corrupt.row(i));
        std::vector<engine::RowPatch> patches;
        std::vector<std::size_t> readout{T - 1};
        for (std::size_t l = 0; l < L; ++l) {
            for (std::size_t i = 0; i < T; ++i) {
                const std::size_t r = 1 + l * T + i;
                patches.push_back({l, r * T + i, PatchSite::hidden_state,
                                   clean.trace->layers[l].resid_out.row_vec(i)});
                readout.push_back(r * T + T - 1);
            }
        }
        engine::run(model, cache, std::move(patches), readout);
        const double p_corrupt = answer_prob(cache.logits.row(0), answer);
        result.p_corrupt += p_corrupt;
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t i = 0; i < T; ++i)
                result.ie_grid(l, i) += answer_prob(cache.logits.row(1 + l * T + i), answer) - p_corrupt;
    }
    const double inv = 1.0 / static_cast<double>(options.noise_samples);
    result.p_corrupt *= inv;
    for (auto& v : result.ie_grid.flat()) v *= inv;

    result.subject_last = subject.end - 1;
    result.selected_layer = argmax_layer(result.ie_grid, result.subject_last);
    return result;
}

const char* to_string(LayerMode m) { return m == LayerMode::traced ? "traced" : "fixed_last_k"; }

LayerMode layer_mode_from_string(const std::string& s) {
    if (s == "fixed_last_k") return LayerMode::fixed_last_k;
    if (s == "traced") return LayerMode::traced;
    throw Error(ErrorKind::config, "unknown layer mode '" + s + "' (fixed_last_k or traced)");
}

std::vector<std::size_t> select_edit_layers(const ModelConfig& config, LayerMode mode,
                                            const TraceResult* trace, std::size_t k) {
    if (mode == LayerMode::traced) {
        if (!trace) throw Error(ErrorKind::config, "traced layer selection needs a trace");
        if (trace->selected_layer >= config.n_layers) throw Error(ErrorKind::config, "traced layer out of range");
        return {trace->selected_layer};
    }
    if (k == 0 || k > config.n_layers) {
        throw Error(ErrorKind::config, "cannot edit the last " + std::to_string(k) + " of " +
                                           std::to_string(config.n_layers) + " layers");
    }
    std::vector<std::size_t> layers;
    for (std::size_t l = config.n_layers - k; l < config.n_layers; ++l) layers.push_back(l);
    return layers;
}

}  // namespace qedit
