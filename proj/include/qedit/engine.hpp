#pragma once

// Batched forward/backward machinery behind the public model API.
//
// A batch is a list of independent token sequences laid out as consecutive
// rows of one matrix, so every linear layer is a single kernel call; causal
// attention is restricted to each sequence's own rows.

#include <cstddef>
#include <vector>

#include "qedit/model.hpp"

namespace qedit::engine {

// A patch addressed by absolute batch row.
struct RowPatch {
    std::size_t layer = 0;
    std::size_t row = 0;
    PatchSite site = PatchSite::ffn_output;
    Vec value;
};

struct LayerCache {
    Matrix resid_in;
    Matrix ln1_out;
    std::vector<double> ln1_mean, ln1_rstd;
    Matrix q, k, v;
    std::vector<double> probs;  // per sequence, per head, T x T blocks
    Matrix ctx;
    Matrix attn_out;
    Matrix mid;  // resid_in + attn_out
    Matrix ln2_out;
    std::vector<double> ln2_mean, ln2_rstd;
    Matrix pre;  // W_fc x + b_fc
    Matrix key;  // activation(pre)
    Matrix ffn_out;
    Matrix resid_out;
};

struct Cache {
    std::vector<std::size_t> offsets;  // sequence start rows, plus total at the end
    std::vector<Token> tokens;         // one per row
    Matrix embed;                      // rows x d_model input to layer 0
    std::vector<LayerCache> layers;
    Matrix final_norm;
    std::vector<double> lnf_mean, lnf_rstd;
    std::vector<std::size_t> readout_rows;  // rows with computed logits
    Matrix logits;                          // readout_rows.size() x vocab
    std::vector<RowPatch> patches;

    std::size_t rows() const { return offsets.empty() ? 0 : offsets.back(); }
    std::size_t sequence_of(std::size_t row) const;
};

// Lays out sequences and builds token + position embeddings. Throws
// Error(input) on out-of-vocabulary tokens or over-long sequences.
void embed(const TransformerModel& model, const std::vector<Tokens>& sequences, Cache& cache);

// Runs all layers from `cache.embed`. An empty `readout_rows` means every row.
void run(const TransformerModel& model, Cache& cache, std::vector<RowPatch> patches,
         std::vector<std::size_t> readout_rows = {});

// Re-runs from the FFN output of `layer` onward, reusing everything upstream
// of it, with `patches` replacing the previous ones. Patches must not touch
// anything below that FFN output.
void resume_from_ffn_output(const TransformerModel& model, Cache& cache, std::size_t layer,
                            std::vector<RowPatch> patches);

struct BackwardOptions {
    bool param_grads = false;
    // Lowest layer to differentiate through. With `stop_at_ffn_output`, the
    // walk ends once the FFN output gradient of `stop_layer` is known.
    std::size_t stop_layer = 0;
    bool stop_at_ffn_output = false;
};

struct SiteGrads {
    std::vector<Matrix> ffn_out;    // per layer, rows x d_model (empty below stop)
    std::vector<Matrix> resid_out;  // per layer
};

// Back-propagates d(objective)/d(logits) (rows aligned with readout_rows).
// Parameter gradients are accumulated into `grads` when requested.
void backward(const TransformerModel& model, const Cache& cache, const Matrix& dlogits,
              const BackwardOptions& options, TransformerModel* grads, SiteGrads* sites);

// A zero-valued model with the same shapes, used as a gradient accumulator.
TransformerModel zeros_like(const TransformerModel& model);

}  // namespace qedit::engine
