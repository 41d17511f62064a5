#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qedit/matrix.hpp"

namespace qedit {

using Token = std::uint32_t;
using Tokens = std::vector<Token>;

enum class Activation { gelu, relu };

const char* to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 128;
    std::size_t d_ff = 512;
    std::size_t n_heads = 4;
    std::size_t vocab_size = 0;
    std::size_t max_seq = 16;
    Activation activation = Activation::gelu;
    std::uint64_t seed = 0;

    // Throws Error(config) on inconsistent sizes.
    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Parameters of one pre-layernorm transformer block. Vectors are stored as
// 1 x n matrices so that every parameter is a Matrix.
struct LayerParams {
    Matrix ln1_gain, ln1_bias;
    Matrix w_q, w_k, w_v, w_o;  // d_model x d_model
    Matrix ln2_gain, ln2_bias;
    Matrix w_fc;    // d_ff x d_model: the key memory
    Matrix b_fc;    // 1 x d_ff
    Matrix w_proj;  // d_model x d_ff: the value memory (no bias)

    friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

class TransformerModel {
public:
    // Fresh, seeded initialization. The unembedding starts at zero so a fresh
    // model predicts the uniform distribution.
    explicit TransformerModel(ModelConfig config);

    const ModelConfig& config() const noexcept { return config_; }

    const LayerParams& layer(std::size_t l) const;
    LayerParams& layer(std::size_t l);

    const Matrix& w_fc(std::size_t l) const { return layer(l).w_fc; }
    const Matrix& w_proj(std::size_t l) const { return layer(l).w_proj; }
    // Replaces W_proj of layer l; throws Error(dimension) on a shape change.
    void set_w_proj(std::size_t l, Matrix w);

    Matrix token_embedding;  // vocab x d_model
    Matrix pos_embedding;    // max_seq x d_model
    Matrix lnf_gain, lnf_bias;
    Matrix unembedding;  // vocab x d_model

    // Every parameter tensor in a fixed order, with a stable name.
    std::vector<std::pair<std::string, Matrix*>> parameters();
    std::vector<std::pair<std::string, const Matrix*>> parameters() const;

    friend bool operator==(const TransformerModel&, const TransformerModel&) = default;

private:
    ModelConfig config_;
    std::vector<LayerParams> layers_;
};

// Scalar activation and its derivative.
double activate(Activation a, double x);
double activate_grad(Activation a, double x);

// Per-layer, per-token intermediate values of one forward pass.
struct LayerTrace {
    Matrix resid_in;   // h^(l-1): T x d_model
    Matrix attn_out;   // a^l: T x d_model
    Matrix ffn_key;    // sigma(W_fc gamma(a + h) + b_fc): T x d_ff
    Matrix ffn_out;    // W_proj key: T x d_model
    Matrix resid_out;  // h^l: T x d_model
};

struct ActivationTrace {
    std::vector<LayerTrace> layers;
};

enum class PatchSite { ffn_output, hidden_state };

struct Patch {
    std::size_t layer = 0;
    std::size_t position = 0;
    PatchSite site = PatchSite::ffn_output;
    Vec replacement;
};

using PatchSpec = std::vector<Patch>;

struct ForwardResult {
    Matrix logits;  // T x vocab
    std::optional<ActivationTrace> trace;
};

ForwardResult forward(const TransformerModel& model, const Tokens& tokens, bool capture = false);
Matrix forward_with_patch(const TransformerModel& model, const Tokens& tokens,
                          const PatchSpec& patch);

// Sum over target tokens of log P(target_j | prompt, target_<j). Throws on an
// empty target.
double target_log_prob(const TransformerModel& model, const Tokens& prompt, const Tokens& target,
                       const PatchSpec& patch = {});

// Greedy argmax continuation of `prompt` for `n` tokens.
Tokens greedy_decode(const TransformerModel& model, const Tokens& prompt, std::size_t n);

// A differentiable scalar of the logits of one sequence:
//   sum_i weight_i * log p(token_i | position_i) + sum_j weight_j * KL(p_j || reference_j)
struct LogProbTerm {
    std::size_t position = 0;
    Token token = 0;
    double weight = 1.0;
};

struct KlTerm {
    std::size_t position = 0;
    std::vector<double> reference;  // a distribution over the vocabulary
    double weight = 1.0;
};

struct Objective {
    std::vector<LogProbTerm> log_probs;
    std::vector<KlTerm> kls;
};

struct HiddenSite {
    std::size_t layer = 0;
    std::size_t position = 0;
    PatchSite site = PatchSite::ffn_output;
};

double evaluate_objective(const TransformerModel& model, const Tokens& tokens,
                          const Objective& objective, const PatchSpec& patch = {});

// Exact gradient of the objective with respect to the vector sitting at
// `site` (the FFN output or the residual output of that layer and position).
Vec grad_hidden(const TransformerModel& model, const Tokens& tokens, const Objective& objective,
                HiddenSite site);

// One supervised example for pretraining: predict `target` after `prompt`.
struct TrainExample {
    Tokens prompt;
    Token target = 0;
};

struct PretrainOptions {
    std::size_t steps = 1500;
    double lr = 1e-3;
    std::size_t batch_size = 32;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    // Called after each step with (step, loss); may be empty.
    std::function<void(std::size_t, double)> on_step;
};

struct PretrainResult {
    std::vector<double> loss_curve;
};

// Adam on mean cross-entropy at each example's answer position. Throws
// Error(training) if the loss exceeds ten times its initial value.
PretrainResult pretrain_base(TransformerModel& model, const std::vector<TrainExample>& corpus,
                             const PretrainOptions& options);

// Checkpoint container; the layout is documented in docs/checkpoint.md.
void save_checkpoint(const TransformerModel& model, const std::filesystem::path& path);
TransformerModel load_checkpoint(const std::filesystem::path& path);

}  // namespace qedit
