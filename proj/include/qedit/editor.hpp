#pragma once

// Locating and installing one fact: FFN keys k*, the target value v*, the
// ridge covariance C, the rank-one closed-form update and the structural
// refinement of W_proj.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qedit/dataset.hpp"
#include "qedit/model.hpp"
#include "qedit/numerics.hpp"

namespace qedit {

// C = (1/n) sum k k^T + ridge * I, factored once.
struct CovMatrix {
    Matrix c;
    double ridge = 0.0;
    std::size_t sample_count = 0;
    std::optional<Cholesky> chol;

    Vec solve(const Vec& k) const;
};

CovMatrix cov_from_keys(const std::vector<Vec>& keys, double ridge);
// Keys of every token of every corpus prompt.
CovMatrix compute_cov(const TransformerModel& model, const std::vector<Tokens>& corpus,
                      std::size_t layer, double ridge);

struct KeyStar {
    Matrix tokens;  // prompt length x d_ff, averaged over prefixes
    Vec k_s;
    Vec k_r;
};

// FFN keys of every prompt token at `layer`, each averaged over the prompt
// rendered behind every prefix in `prefixes` (an empty prefix is allowed).
KeyStar compute_k_star(const TransformerModel& model, const Tokens& prompt, Span subject,
                       Span relation, std::size_t layer, const std::vector<Tokens>& prefixes);

// sigma(W_proj k_r + b_r)
Vec relation_hidden(const Vec& k_r, const Matrix& w_proj, const Vec& b_r, Activation act);

struct StructuralLoss {
    double loss = 0.0;
    Matrix grad;  // d loss / d W_proj
};

// || W_proj k_s + h_r - v* ||_2 and its gradient in W_proj.
StructuralLoss structural_loss(const Vec& k_s, const Vec& h_r, const Vec& v_star, const Matrix& w_proj);

struct EditHyper {
    std::size_t n_prefixes = 4;  // N, counting the empty prefix
    std::size_t max_prefix = 3;
    std::size_t v_steps = 40;
    double v_lr = 0.1;  // step length relative to the norm of the clean value
    double kl_weight = 0.0625;
    double v_target_nll = 0.1;  // stop early once the mean NLL drops below this
    double alpha1 = 0.5;
    double alpha2 = 0.5;
    std::size_t st_steps = 5;
    double st_lr = 1e-3;
    double ridge = 1e-2;
    // Ablation: key is the mean over subject and relation tokens, no L_st.
    bool mixed_key = false;

    void validate() const;
};

struct VStarResult {
    Vec v_star;
    Vec z_init;
    std::vector<double> objective_log;   // per accepted step, starting at z_init
    std::vector<double> log_prob_log;    // mean patched log P(o*) alongside
};

// Gradient descent on the FFN output z at (layer, last subject token) of
// every prefixed prompt and of the essence prompt.
VStarResult solve_v_star(const TransformerModel& model, const EncodedSample& sample, std::size_t layer,
                         const EditHyper& hyper, const std::vector<Tokens>& prefixes);

// W' = W + Lambda (C^-1 k)^T with Lambda = (v - W k) / ((C^-1 k)^T k).
Matrix closed_form_update(const Matrix& w_proj, const Vec& k_s, const Vec& v_star, const CovMatrix& cov);

struct KeyValuePair {
    KeyStar key;
    Vec h_r;
    Vec v_star;
    std::size_t layer = 0;
};

struct LayerEdit {
    KeyValuePair kv;
    Vec key;  // the key the closed form was solved at (k_s, or the mixed key)
    Matrix delta;
    double closed_form_residual = 0.0;  // ||W'k - v*|| / ||v*|| before refinement
    double st_loss_before = 0.0;
    double st_loss_after = 0.0;
    std::vector<double> v_objective;
};

struct EditOutcome {
    std::vector<LayerEdit> layers;
    double pre_prob = 0.0;   // P(o* | edit prompt) before
    double post_prob = 0.0;  // and after
};

// Optional fault injection for atomicity tests: called after each layer's
// update with the layer index; throwing aborts the edit.
using EditProbe = std::function<void(std::size_t)>;

// Installs the sample's new object. On any error every W_proj is restored
// bit-exactly and the error is rethrown.
EditOutcome apply_edit(TransformerModel& model, const EncodedSample& sample,
                       const std::vector<const CovMatrix*>& covs, const EditHyper& hyper,
                       const std::vector<std::size_t>& layers, const std::vector<Tokens>& prefixes,
                       const EditProbe& probe = {});

// N prefixes: the empty one followed by N-1 random filler sequences.
std::vector<Tokens> sample_prefixes(const SyntheticWorld& world, std::size_t n, std::size_t max_len,
                                    std::uint64_t seed);

// Every surface form of every fact, bare and behind a random prefix, plus the
// essence prompts.
std::vector<Tokens> key_corpus(const SyntheticWorld& world);

}  // namespace qedit
