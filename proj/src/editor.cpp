#include "qedit/editor.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "qedit/engine.hpp"
#include "qedit/kernels.hpp"

namespace qedit {

Vec CovMatrix::solve(const Vec& k) const {
    if (!chol) throw Error(ErrorKind::algebra, "covariance is not factored");
    return chol->solve(k);
}

CovMatrix cov_from_keys(const std::vector<Vec>& keys, double ridge) {
    if (keys.empty()) throw Error(ErrorKind::data, "covariance needs at least one key");
    if (!(ridge > 0.0)) throw Error(ErrorKind::domain, "ridge must be positive");
    const std::size_t d = keys.front().dim();
    Matrix stacked(keys.size(), d);
    for (std::size_t i = 0; i < keys.size(); ++i) {
        if (keys[i].dim() != d) throw Error(ErrorKind::dimension, "keys differ in dimension");
        stacked.set_row(i, keys[i].span());
    }
    CovMatrix cov;
    cov.c = Matrix(d, d);
    kernels::linear_grad_weight({keys.size(), d, d}, stacked.flat(), stacked.flat(), cov.c.flat());
    cov.c *= 1.0 / static_cast<double>(keys.size());
    // Symmetrize away accumulation-order noise.
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = i + 1; j < d; ++j) {
            const double m = 0.5 * (cov.c(i, j) + cov.c(j, i));
            cov.c(i, j) = cov.c(j, i) = m;
        }
        cov.c(i, i) += ridge;
    }
    cov.ridge = ridge;
    cov.sample_count = keys.size();
    cov.chol.emplace(cov.c);
    return cov;
}

CovMatrix compute_cov(const TransformerModel& model, const std::vector<Tokens>& corpus,
                      std::size_t layer, double ridge) {
    if (corpus.empty()) throw Error(ErrorKind::data, "empty key corpus");
    if (layer >= model.config().n_layers) throw Error(ErrorKind::input, "layer out of range");
    std::vector<Vec> keys;
    constexpr std::size_t chunk = 256;
    for (std::size_t begin = 0; begin < corpus.size(); begin += chunk) {
        const std::size_t end = std::min(corpus.size(), begin + chunk);
        const std::vector<Tokens> seqs(corpus.begin() + static_cast<std::ptrdiff_t>(begin),
                                       corpus.begin() + static_cast<std::ptrdiff_t>(end));
        engine::Cache cache;
        engine::embed(model, seqs, cache);
        engine::run(model, cache, {}, {0});
        for (std::size_t r = 0; r < cache.layers[layer].key.rows(); ++r) keys.push_back(cache.layers[layer].key.row_vec(r));
    }
    return cov_from_keys(keys, ridge);
}

KeyStar compute_k_star(const TransformerModel& model, const Tokens& prompt, Span subject,
                       Span relation, std::size_t layer, const std::vector<Tokens>& prefixes) {
    const auto& cfg = model.config();
    if (prefixes.empty()) throw Error(ErrorKind::input, "need at least one prefix");
    if (layer >= cfg.n_layers) throw Error(ErrorKind::input, "layer out of range");
    std::vector<Tokens> seqs;
    for (const auto& p : prefixes) {
        Tokens s = p;
        s.insert(s.end(), prompt.begin(), prompt.end());
        if (s.size() > cfg.max_seq) {
            throw Error(ErrorKind::input, "prefixed prompt of " + std::to_string(s.size()) +
                                              " tokens exceeds max_seq");
        }
        seqs.push_back(std::move(s));
    }
    engine::Cache cache;
    engine::embed(model, seqs, cache);
    engine::run(model, cache, {}, {0});
    KeyStar out;
    out.tokens = Matrix(prompt.size(), cfg.d_ff);
    const double inv = 1.0 / static_cast<double>(prefixes.size());
    for (std::size_t j = 0; j < prefixes.size(); ++j) {
        const std::size_t base = cache.offsets[j] + prefixes[j].size();
        for (std::size_t i = 0; i < prompt.size(); ++i) {
            const auto src = cache.layers[layer].key.row(base + i);
            auto dst = out.tokens.row(i);
            for (std::size_t c = 0; c < cfg.d_ff; ++c) dst[c] += src[c] * inv;
        }
    }
    out.k_s = pool_span(out.tokens, subject);
    out.k_r = pool_span(out.tokens, relation);
    return out;
}

Vec relation_hidden(const Vec& k_r, const Matrix& w_proj, const Vec& b_r, Activation act) {
    if (k_r.dim() != w_proj.cols() || b_r.dim() != w_proj.rows()) {
        throw Error(ErrorKind::dimension, "relation_hidden: inconsistent dimensions");
    }
    Vec h = matvec(w_proj, k_r);
    for (std::size_t i = 0; i < h.dim(); ++i) h[i] = activate(act, h[i] + b_r[i]);
    return h;
}

StructuralLoss structural_loss(const Vec& k_s, const Vec& h_r, const Vec& v_star, const Matrix& w_proj) {
    if (k_s.dim() != w_proj.cols() || h_r.dim() != w_proj.rows() || v_star.dim() != w_proj.rows()) {
        throw Error(ErrorKind::dimension, "structural_loss: inconsistent dimensions");
    }
    Vec r = matvec(w_proj, k_s);
    r += h_r;
    r -= v_star;
    StructuralLoss out;
    out.loss = r.norm();
    out.grad = Matrix(w_proj.rows(), w_proj.cols());
    if (out.loss > 0.0) {
        r *= 1.0 / out.loss;
        out.grad = outer(r, k_s);
    }
    return out;
}

void EditHyper::validate() const {
    if (std::abs(alpha1 + alpha2 - 1.0) > 1e-12 || alpha1 < 0.0 || alpha2 < 0.0) {
        throw Error(ErrorKind::config, "alpha1 and alpha2 must be non-negative and sum to 1");
    }
    if (n_prefixes == 0) throw Error(ErrorKind::config, "n_prefixes must be at least 1");
    if (v_steps == 0) throw Error(ErrorKind::config, "v_steps must be at least 1");
    if (!(v_lr > 0.0) || !(st_lr >= 0.0) || !(kl_weight >= 0.0)) {
        throw Error(ErrorKind::config, "learning rates and kl_weight must be non-negative");
    }
    if (!(ridge > 0.0)) throw Error(ErrorKind::config, "ridge must be positive");
}

namespace {

struct VProblem {
    const TransformerModel& model;
    std::size_t layer;
    Token target;
    double alpha1, kl_weight;
    engine::Cache cache;
    std::vector<std::size_t> subject_rows;
    std::size_t n_prompts = 0;  // readout rows 0..n_prompts-1; the essence row follows
    std::vector<double> reference;

    double mean_log_prob = 0.0;
    Matrix dlogits;

    double evaluate(const Vec& z) {
        std::vector<engine::RowPatch> patches;
        for (auto r : subject_rows) patches.push_back({layer, r, PatchSite::ffn_output, z});
        engine::resume_from_ffn_output(model, cache, layer, std::move(patches));
        const std::size_t vocab = model.config().vocab_size;
        dlogits = Matrix(cache.readout_rows.size(), vocab);
        double nll = 0.0;
        mean_log_prob = 0.0;
        const double inv = 1.0 / static_cast<double>(n_prompts);
        for (std::size_t j = 0; j < n_prompts; ++j) {
            const auto lp = log_softmax(cache.logits.row(j));
            nll -= lp[target] * inv;
            mean_log_prob += lp[target] * inv;
            auto g = dlogits.row(j);
            for (std::size_t v = 0; v < vocab; ++v) g[v] = alpha1 * std::exp(lp[v]) * inv;
            g[target] -= alpha1 * inv;
        }
        double kl = 0.0;
        if (kl_weight > 0.0) {
            const auto lp = log_softmax(cache.logits.row(n_prompts));
            for (std::size_t v = 0; v < vocab; ++v) {
                const double p = std::exp(lp[v]);
                if (p > 0.0) kl += p * (lp[v] - std::log(reference[v]));
            }
            auto g = dlogits.row(n_prompts);
            for (std::size_t v = 0; v < vocab; ++v) {
                const double p = std::exp(lp[v]);
                g[v] = alpha1 * kl_weight * p * (lp[v] - std::log(reference[v]) - kl);
            }
        }
        return alpha1 * (nll + kl_weight * kl);
    }

    Vec gradient() const {
        engine::BackwardOptions opts;
        opts.stop_layer = layer;
        opts.stop_at_ffn_output = true;
        engine::SiteGrads sites;
        engine::backward(model, cache, dlogits, opts, nullptr, &sites);
        Vec g(model.config().d_model);
        for (auto r : subject_rows) {
            const auto row = sites.ffn_out[layer].row(r);
            for (std::size_t c = 0; c < g.dim(); ++c) g[c] += row[c];
        }
        return g;
    }
};

}  // namespace

VStarResult solve_v_star(const TransformerModel& model, const EncodedSample& sample, std::size_t layer,
                         const EditHyper& hyper, const std::vector<Tokens>& prefixes) {
    const auto& cfg = model.config();
    if (layer >= cfg.n_layers) throw Error(ErrorKind::input, "layer out of range");
    if (prefixes.empty()) throw Error(ErrorKind::input, "need at least one prefix");
    if (sample.subject.length() == 0 || sample.subject.end > sample.prompt.size()) {
        throw Error(ErrorKind::span, "subject span outside the prompt");
    }

    VProblem prob{model, layer, sample.target, hyper.alpha1, hyper.kl_weight, {}, {}, 0, {}, 0.0, {}};
    std::vector<Tokens> seqs;
    for (const auto& p : prefixes) {
        Tokens s = p;
        s.insert(s.end(), sample.prompt.begin(), sample.prompt.end());
        if (s.size() > cfg.max_seq) throw Error(ErrorKind::input, "prefixed prompt exceeds max_seq");
        seqs.push_back(std::move(s));
    }
    prob.n_prompts = seqs.size();
    seqs.push_back(sample.essence);
    engine::embed(model, seqs, prob.cache);
    std::vector<std::size_t> readout;
    for (std::size_t j = 0; j < seqs.size(); ++j) readout.push_back(prob.cache.offsets[j + 1] - 1);
    for (std::size_t j = 0; j < prefixes.size(); ++j) {
        prob.subject_rows.push_back(prob.cache.offsets[j] + prefixes[j].size() + sample.subject.end - 1);
    }
    // Subjects lead the essence prompt.
    prob.subject_rows.push_back(prob.cache.offsets[prefixes.size()] + sample.subject.length() - 1);
    engine::run(model, prob.cache, {}, readout);
    prob.reference = softmax(prob.cache.logits.row(prob.n_prompts));

    VStarResult out;
    out.z_init = prob.cache.layers[layer].ffn_out.row_vec(prob.cache.offsets[0] + prefixes[0].size() +
                                                          sample.subject.end - 1);
    Vec z = out.z_init;
    double obj = prob.evaluate(z);
    if (!std::isfinite(obj)) throw Error(ErrorKind::numeric, "non-finite v* objective at step 0");
    out.objective_log.push_back(obj);
    out.log_prob_log.push_back(prob.mean_log_prob);

    // Steps are relative to the norm of the clean value, so the solver does not
    // depend on the activation scale of the layer.
    const double scale = std::max(out.z_init.norm(), 1e-12);
    double lr = hyper.v_lr;
    for (std::size_t step = 1; step <= hyper.v_steps; ++step) {
        if (-prob.mean_log_prob < hyper.v_target_nll) break;
        const Vec g = prob.gradient();
        if (!g.all_finite()) throw Error(ErrorKind::numeric, "non-finite v* gradient at step " + std::to_string(step));
        const double gn = g.norm();
        if (!(gn > 0.0)) break;
        bool accepted = false;
        for (int tries = 0; tries < 8 && !accepted; ++tries) {
            Vec cand = z;
            const double a = lr * scale / gn;
            for (std::size_t c = 0; c < z.dim(); ++c) cand[c] -= a * g[c];
            const double c_obj = prob.evaluate(cand);
            if (!std::isfinite(c_obj)) {
                throw Error(ErrorKind::numeric, "non-finite v* objective at step " + std::to_string(step));
            }
            if (c_obj < obj) {
                z = std::move(cand);
                obj = c_obj;
                accepted = true;
                lr *= 1.25;
            } else {
                lr *= 0.5;
            }
        }
        if (!accepted) {
            prob.evaluate(z);
            break;
        }
        out.objective_log.push_back(obj);
        out.log_prob_log.push_back(prob.mean_log_prob);
    }
    out.v_star = std::move(z);
    return out;
}

Matrix closed_form_update(const Matrix& w_proj, const Vec& k_s, const Vec& v_star, const CovMatrix& cov) {
    if (k_s.dim() != w_proj.cols() || v_star.dim() != w_proj.rows() || cov.c.rows() != k_s.dim()) {
        throw Error(ErrorKind::dimension, "closed_form_update: inconsistent dimensions");
    }
    const Vec u = cov.solve(k_s);
    const double denom = dot(u, k_s);
    if (!(std::abs(denom) > 1e-300) || !std::isfinite(denom)) {
        throw Error(ErrorKind::algebra, "closed-form denominator (C^-1 k)^T k vanishes");
    }
    Vec lambda = v_star - matvec(w_proj, k_s);
    lambda *= 1.0 / denom;
    Matrix out = w_proj + outer(lambda, u);
    if (!out.all_finite()) throw Error(ErrorKind::algebra, "closed-form update is not finite");
    return out;
}

EditOutcome apply_edit(TransformerModel& model, const EncodedSample& sample,
                       const std::vector<const CovMatrix*>& covs, const EditHyper& hyper,
                       const std::vector<std::size_t>& layers, const std::vector<Tokens>& prefixes,
                       const EditProbe& probe) {
    hyper.validate();
    const auto& cfg = model.config();
    std::vector<std::size_t> order = layers;
    std::sort(order.begin(), order.end());
    std::vector<Matrix> saved;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) saved.push_back(model.w_proj(l));

    try {
        for (auto l : order) {
            if (l >= cfg.n_layers || l >= covs.size() || covs[l] == nullptr) {
                throw Error(ErrorKind::config, "no covariance for edit layer " + std::to_string(l));
            }
        }
        EditOutcome out;
        out.pre_prob = std::exp(target_log_prob(model, sample.prompt, {sample.target}));
        for (auto l : order) {
            LayerEdit e;
            e.kv.layer = l;
            e.kv.key = compute_k_star(model, sample.prompt, sample.subject, sample.relation, l, prefixes);
            const Matrix w0 = model.w_proj(l);
            e.kv.h_r = relation_hidden(e.kv.key.k_r, w0, Vec(cfg.d_model), cfg.activation);
            const VStarResult vs = solve_v_star(model, sample, l, hyper, prefixes);
            e.kv.v_star = vs.v_star;
            e.v_objective = vs.objective_log;

            if (hyper.mixed_key) {
                std::vector<std::size_t> idx;
                for (std::size_t i = 0; i < sample.prompt.size(); ++i)
                    if (sample.subject.contains(i) || sample.relation.contains(i)) idx.push_back(i);
                e.key = Vec(cfg.d_ff);
                for (auto i : idx) {
                    const auto r = e.kv.key.tokens.row(i);
                    for (std::size_t c = 0; c < cfg.d_ff; ++c) e.key[c] += r[c] / static_cast<double>(idx.size());
                }
            } else {
                e.key = e.kv.key.k_s;
            }

            Matrix w = closed_form_update(w0, e.key, e.kv.v_star, *covs[l]);
            e.closed_form_residual = l2_distance(matvec(w, e.key), e.kv.v_star) / e.kv.v_star.norm();
            if (!hyper.mixed_key) {
                e.st_loss_before = structural_loss(e.kv.key.k_s, e.kv.h_r, e.kv.v_star, w).loss;
                if (hyper.alpha2 > 0.0) {
                    for (std::size_t s = 0; s < hyper.st_steps; ++s) {
                        const auto st = structural_loss(e.kv.key.k_s, e.kv.h_r, e.kv.v_star, w);
                        for (std::size_t i = 0; i < w.flat().size(); ++i) {
                            w.flat()[i] -= hyper.st_lr * hyper.alpha2 * st.grad.flat()[i];
                        }
                    }
                }
                e.st_loss_after = structural_loss(e.kv.key.k_s, e.kv.h_r, e.kv.v_star, w).loss;
            }
            if (!w.all_finite()) throw Error(ErrorKind::numeric, "edited W_proj is not finite");
            e.delta = w - w0;
            model.set_w_proj(l, std::move(w));
            if (probe) probe(l);
            out.layers.push_back(std::move(e));
        }
        out.post_prob = std::exp(target_log_prob(model, sample.prompt, {sample.target}));
        return out;
    } catch (...) {
        for (std::size_t l = 0; l < cfg.n_layers; ++l) model.set_w_proj(l, saved[l]);
        throw;
    }
}

std::vector<Tokens> sample_prefixes(const SyntheticWorld& world, std::size_t n, std::size_t max_len,
                                    std::uint64_t seed) {
    if (n == 0) throw Error(ErrorKind::config, "need at least one prefix");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> len(1, std::max<std::size_t>(1, max_len));
    std::uniform_int_distribution<std::size_t> word(0, world.fillers.size() - 1);
    std::vector<Tokens> out(1);
    while (out.size() < n) {
        Tokens p(len(rng));
        for (auto& t : p) t = world.vocab.id(world.fillers[word(rng)]);
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<Tokens> key_corpus(const SyntheticWorld& world) {
    std::vector<Tokens> out;
    std::mt19937_64 rng(world.seed ^ 0x6b6579u);
    std::uniform_int_distribution<std::size_t> len(1, 3);
    std::uniform_int_distribution<std::size_t> word(0, world.fillers.size() - 1);
    for (const auto& f : world.facts) {
        for (std::size_t form = 0; form < world.form_count(f.relation); ++form) {
            for (int prefixed = 0; prefixed < 2; ++prefixed) {
                std::vector<std::string> prefix;
                if (prefixed) {
                    prefix.resize(len(rng));
                    for (auto& w : prefix) w = world.fillers[word(rng)];
                }
                out.push_back(world.render(f.subject, f.relation, form, prefix).tokens);
            }
        }
    }
    for (std::size_t e = 0; e < world.entities.size(); ++e) out.push_back(world.essence(e).tokens);
    return out;
}

}  // namespace qedit
