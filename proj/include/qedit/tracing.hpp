#pragma once

// Causal tracing: corrupt the subject embeddings, then restore one clean
// hidden state at a time and measure how much of the answer probability
// comes back.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qedit/model.hpp"
#include "qedit/numerics.hpp"

namespace qedit {

// Embedding matrix (T x d_model) of `tokens` with Gaussian noise of
// scale * (per-dimension std of the token embeddings) added inside `subject`.
Matrix corrupt_subject(const TransformerModel& model, const Tokens& tokens, Span subject,
                       double noise_scale, std::uint64_t seed);

// Logits of a run that starts from the given embedding rows.
Matrix forward_from_embedding(const TransformerModel& model, const Tokens& tokens,
                              const Matrix& embedding, const PatchSpec& patch = {});

struct TraceOptions {
    double noise_scale = 3.0;
    std::size_t noise_samples = 10;  // IE is averaged over this many corruptions
    std::uint64_t seed = 0;
};

struct TraceResult {
    Matrix ie_grid;  // n_layers x prompt length
    double p_clean = 0.0;
    double p_corrupt = 0.0;
    std::size_t subject_last = 0;  // column of the last subject token
    std::size_t selected_layer = 0;  // largest effect at the last subject token
};

// Row of the largest entry in the given column.
std::size_t argmax_layer(const Matrix& ie_grid, std::size_t column);

// `answer` must be the model's greedy prediction after `tokens`; otherwise
// Error(trace) naming `label`.
TraceResult causal_trace(const TransformerModel& model, const Tokens& tokens, Span subject,
                         Token answer, const TraceOptions& options = {},
                         const std::string& label = "prompt");

enum class LayerMode { fixed_last_k, traced };

const char* to_string(LayerMode m);
LayerMode layer_mode_from_string(const std::string& s);

std::vector<std::size_t> select_edit_layers(const ModelConfig& config, LayerMode mode,
                                            const TraceResult* trace, std::size_t k);

}  // namespace qedit
