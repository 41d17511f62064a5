#include "qedit/engine.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "qedit/kernels.hpp"

namespace qedit::engine {

namespace {

constexpr double kLnEps = 1e-5;

void linear(const Matrix& x, const Matrix& w, Matrix& y) {
    y = Matrix(x.rows(), w.rows());
    kernels::linear({x.rows(), w.rows(), w.cols()}, x.flat(), w.flat(), y.flat());
}

// dx += dy W
void linear_grad_input(const Matrix& dy, const Matrix& w, Matrix& dx) {
    kernels::linear_grad_input({dy.rows(), w.rows(), w.cols()}, dy.flat(), w.flat(), dx.flat());
}

// dw += dy^T x
void linear_grad_weight(const Matrix& dy, const Matrix& x, Matrix& dw) {
    kernels::linear_grad_weight({dy.rows(), dw.rows(), dw.cols()}, dy.flat(), x.flat(), dw.flat());
}

void layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, Matrix& y,
                std::vector<double>& mean, std::vector<double>& rstd) {
    const std::size_t n = x.cols();
    y = Matrix(x.rows(), n);
    mean.assign(x.rows(), 0.0);
    rstd.assign(x.rows(), 0.0);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        double mu = 0.0;
        for (double v : xr) mu += v;
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (double v : xr) var += (v - mu) * (v - mu);
        var /= static_cast<double>(n);
        const double rs = 1.0 / std::sqrt(var + kLnEps);
        mean[r] = mu;
        rstd[r] = rs;
        auto yr = y.row(r);
        for (std::size_t c = 0; c < n; ++c) yr[c] = (xr[c] - mu) * rs * gain(0, c) + bias(0, c);
    }
}

// dx += LN'(dy); optional parameter gradients.
void layer_norm_backward(const Matrix& dy, const Matrix& x, const Matrix& gain,
                         const std::vector<double>& mean, const std::vector<double>& rstd,
                         Matrix& dx, Matrix* dgain, Matrix* dbias) {
    const std::size_t n = x.cols();
    std::vector<double> xhat(n), dyg(n);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto dyr = dy.row(r);
        auto xr = x.row(r);
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            xhat[c] = (xr[c] - mean[r]) * rstd[r];
            dyg[c] = dyr[c] * gain(0, c);
            m1 += dyg[c];
            m2 += dyg[c] * xhat[c];
        }
        m1 /= static_cast<double>(n);
        m2 /= static_cast<double>(n);
        auto dxr = dx.row(r);
        for (std::size_t c = 0; c < n; ++c) dxr[c] += rstd[r] * (dyg[c] - m1 - xhat[c] * m2);
        if (dgain != nullptr) {
            for (std::size_t c = 0; c < n; ++c) {
                (*dgain)(0, c) += dyr[c] * xhat[c];
                (*dbias)(0, c) += dyr[c];
            }
        }
    }
}

std::size_t probs_size(const Cache& cache, std::size_t heads) {
    std::size_t total = 0;
    for (std::size_t s = 0; s + 1 < cache.offsets.size(); ++s) {
        const std::size_t t = cache.offsets[s + 1] - cache.offsets[s];
        total += heads * t * t;
    }
    return total;
}

void attention_forward(const ModelConfig& cfg, const Cache& cache, LayerCache& lc) {
    const std::size_t d = cfg.d_model;
    const std::size_t dh = d / cfg.n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    lc.ctx = Matrix(lc.q.rows(), d);
    lc.probs.assign(probs_size(cache, cfg.n_heads), 0.0);
    std::size_t pofs = 0;
    std::vector<double> scores;
    for (std::size_t s = 0; s + 1 < cache.offsets.size(); ++s) {
        const std::size_t o = cache.offsets[s];
        const std::size_t t = cache.offsets[s + 1] - o;
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            double* p = lc.probs.data() + pofs;
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < t; ++i) {
                const double* qi = lc.q.row(o + i).data() + c0;
                double mx = -1e300;
                scores.assign(i + 1, 0.0);
                for (std::size_t j = 0; j <= i; ++j) {
                    const double* kj = lc.k.row(o + j).data() + c0;
                    double sc = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) sc += qi[c] * kj[c];
                    scores[j] = sc * scale;
                    mx = std::max(mx, scores[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    scores[j] = std::exp(scores[j] - mx);
                    z += scores[j];
                }
                double* ci = lc.ctx.row(o + i).data() + c0;
                for (std::size_t j = 0; j <= i; ++j) {
                    const double pij = scores[j] / z;
                    p[i * t + j] = pij;
                    const double* vj = lc.v.row(o + j).data() + c0;
                    for (std::size_t c = 0; c < dh; ++c) ci[c] += pij * vj[c];
                }
            }
            pofs += t * t;
        }
    }
}

void attention_backward(const ModelConfig& cfg, const Cache& cache, const LayerCache& lc,
                        const Matrix& dctx, Matrix& dq, Matrix& dk, Matrix& dv) {
    const std::size_t d = cfg.d_model;
    const std::size_t dh = d / cfg.n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::size_t pofs = 0;
    std::vector<double> dp;
    for (std::size_t s = 0; s + 1 < cache.offsets.size(); ++s) {
        const std::size_t o = cache.offsets[s];
        const std::size_t t = cache.offsets[s + 1] - o;
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            const double* p = lc.probs.data() + pofs;
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < t; ++i) {
                const double* gi = dctx.row(o + i).data() + c0;
                dp.assign(i + 1, 0.0);
                double weighted = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    const double* vj = lc.v.row(o + j).data() + c0;
                    double s2 = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) s2 += gi[c] * vj[c];
                    dp[j] = s2;
                    weighted += p[i * t + j] * s2;
                    double* dvj = dv.row(o + j).data() + c0;
                    const double pij = p[i * t + j];
                    for (std::size_t c = 0; c < dh; ++c) dvj[c] += pij * gi[c];
                }
                const double* qi = lc.q.row(o + i).data() + c0;
                double* dqi = dq.row(o + i).data() + c0;
                for (std::size_t j = 0; j <= i; ++j) {
                    const double ds = p[i * t + j] * (dp[j] - weighted) * scale;
                    if (ds == 0.0) continue;
                    const double* kj = lc.k.row(o + j).data() + c0;
                    double* dkj = dk.row(o + j).data() + c0;
                    for (std::size_t c = 0; c < dh; ++c) {
                        dqi[c] += ds * kj[c];
                        dkj[c] += ds * qi[c];
                    }
                }
            }
            pofs += t * t;
        }
    }
}

void apply_patches(Matrix& m, const std::vector<RowPatch>& patches, std::size_t layer,
                   PatchSite site) {
    for (const auto& p : patches) {
        if (p.layer == layer && p.site == site) m.set_row(p.row, p.value.span());
    }
}

void run_ffn(const TransformerModel& model, std::size_t l, LayerCache& lc) {
    const auto& lp = model.layer(l);
    const Activation act = model.config().activation;
    layer_norm(lc.mid, lp.ln2_gain, lp.ln2_bias, lc.ln2_out, lc.ln2_mean, lc.ln2_rstd);
    linear(lc.ln2_out, lp.w_fc, lc.pre);
    lc.key = Matrix(lc.pre.rows(), lc.pre.cols());
    for (std::size_t r = 0; r < lc.pre.rows(); ++r) {
        auto pr = lc.pre.row(r);
        auto kr = lc.key.row(r);
        for (std::size_t c = 0; c < pr.size(); ++c) {
            pr[c] += lp.b_fc(0, c);
            kr[c] = activate(act, pr[c]);
        }
    }
    linear(lc.key, lp.w_proj, lc.ffn_out);
}

void finish_layer(LayerCache& lc, const std::vector<RowPatch>& patches, std::size_t l) {
    apply_patches(lc.ffn_out, patches, l, PatchSite::ffn_output);
    lc.resid_out = lc.mid;
    lc.resid_out += lc.ffn_out;
    apply_patches(lc.resid_out, patches, l, PatchSite::hidden_state);
}

void run_layer(const TransformerModel& model, Cache& cache, std::size_t l, const Matrix& input) {
    const auto& lp = model.layer(l);
    LayerCache& lc = cache.layers[l];
    lc.resid_in = input;
    layer_norm(lc.resid_in, lp.ln1_gain, lp.ln1_bias, lc.ln1_out, lc.ln1_mean, lc.ln1_rstd);
    linear(lc.ln1_out, lp.w_q, lc.q);
    linear(lc.ln1_out, lp.w_k, lc.k);
    linear(lc.ln1_out, lp.w_v, lc.v);
    attention_forward(model.config(), cache, lc);
    linear(lc.ctx, lp.w_o, lc.attn_out);
    lc.mid = lc.resid_in;
    lc.mid += lc.attn_out;
    run_ffn(model, l, lc);
    finish_layer(lc, cache.patches, l);
}

void run_head(const TransformerModel& model, Cache& cache) {
    const Matrix& last = cache.layers.back().resid_out;
    layer_norm(last, model.lnf_gain, model.lnf_bias, cache.final_norm, cache.lnf_mean,
               cache.lnf_rstd);
    Matrix sel(cache.readout_rows.size(), model.config().d_model);
    for (std::size_t i = 0; i < cache.readout_rows.size(); ++i)
        sel.set_row(i, cache.final_norm.row(cache.readout_rows[i]));
    linear(sel, model.unembedding, cache.logits);
}

void validate_patches(const ModelConfig& cfg, const Cache& cache,
                      const std::vector<RowPatch>& patches) {
    for (const auto& p : patches) {
        if (p.layer >= cfg.n_layers) {
            throw Error(ErrorKind::patch, "patch layer " + std::to_string(p.layer) + " out of range");
        }
        if (p.row >= cache.rows()) {
            throw Error(ErrorKind::patch, "patch position " + std::to_string(p.row) + " out of range");
        }
        if (p.value.dim() != cfg.d_model) {
            throw Error(ErrorKind::patch, "patch vector has dim " + std::to_string(p.value.dim()));
        }
    }
}

}  // namespace

std::size_t Cache::sequence_of(std::size_t row) const {
    auto it = std::upper_bound(offsets.begin(), offsets.end(), row);
    return static_cast<std::size_t>(it - offsets.begin()) - 1;
}

void embed(const TransformerModel& model, const std::vector<Tokens>& sequences, Cache& cache) {
    const auto& cfg = model.config();
    cache.offsets.assign(1, 0);
    std::size_t total = 0;
    for (const auto& s : sequences) {
        if (s.empty() || s.size() > cfg.max_seq) {
            throw Error(ErrorKind::input, "sequence length " + std::to_string(s.size()) +
                                              " outside [1, " + std::to_string(cfg.max_seq) + "]");
        }
        total += s.size();
        cache.offsets.push_back(total);
    }
    cache.embed = Matrix(total, cfg.d_model);
    cache.tokens.clear();
    cache.tokens.reserve(total);
    for (const auto& s : sequences) cache.tokens.insert(cache.tokens.end(), s.begin(), s.end());
    std::size_t row = 0;
    for (const auto& s : sequences) {
        for (std::size_t i = 0; i < s.size(); ++i, ++row) {
            if (s[i] >= cfg.vocab_size) {
                throw Error(ErrorKind::input, "token " + std::to_string(s[i]) + " outside vocabulary");
            }
            auto dst = cache.embed.row(row);
            auto te = model.token_embedding.row(s[i]);
            auto pe = model.pos_embedding.row(i);
            for (std::size_t c = 0; c < cfg.d_model; ++c) dst[c] = te[c] + pe[c];
        }
    }
}

void run(const TransformerModel& model, Cache& cache, std::vector<RowPatch> patches,
         std::vector<std::size_t> readout_rows) {
    const auto& cfg = model.config();
    validate_patches(cfg, cache, patches);
    cache.patches = std::move(patches);
    if (readout_rows.empty()) {
        readout_rows.resize(cache.rows());
        for (std::size_t i = 0; i < readout_rows.size(); ++i) readout_rows[i] = i;
    }
    cache.readout_rows = std::move(readout_rows);
    cache.layers.resize(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        run_layer(model, cache, l, l == 0 ? cache.embed : cache.layers[l - 1].resid_out);
    }
    run_head(model, cache);
}

void resume_from_ffn_output(const TransformerModel& model, Cache& cache, std::size_t layer,
                            std::vector<RowPatch> patches) {
    const auto& cfg = model.config();
    validate_patches(cfg, cache, patches);
    for (const auto& p : patches) {
        if (p.layer < layer) throw Error(ErrorKind::patch, "resume patch below resume layer");
    }
    // Any previous patch at this FFN output has to be undone first.
    bool dirty = false;
    for (const auto& p : cache.patches) {
        if (p.layer == layer && p.site == PatchSite::ffn_output) dirty = true;
    }
    cache.patches = std::move(patches);
    LayerCache& lc = cache.layers[layer];
    if (dirty) linear(lc.key, model.layer(layer).w_proj, lc.ffn_out);
    finish_layer(lc, cache.patches, layer);
    for (std::size_t l = layer + 1; l < cfg.n_layers; ++l) {
        run_layer(model, cache, l, cache.layers[l - 1].resid_out);
    }
    run_head(model, cache);
}

TransformerModel zeros_like(const TransformerModel& model) {
    TransformerModel z = model;
    for (auto& [name, m] : z.parameters()) *m *= 0.0;
    return z;
}

void backward(const TransformerModel& model, const Cache& cache, const Matrix& dlogits,
              const BackwardOptions& options, TransformerModel* grads, SiteGrads* sites) {
    const auto& cfg = model.config();
    const std::size_t rows = cache.rows();
    const std::size_t d = cfg.d_model;
    const bool pg = options.param_grads && grads != nullptr;
    if (dlogits.rows() != cache.readout_rows.size() || dlogits.cols() != cfg.vocab_size) {
        throw Error(ErrorKind::dimension, "dlogits shape does not match readout rows");
    }
    if (sites != nullptr) {
        sites->ffn_out.assign(cfg.n_layers, Matrix());
        sites->resid_out.assign(cfg.n_layers, Matrix());
    }

    // Head.
    Matrix dsel(dlogits.rows(), d);
    linear_grad_input(dlogits, model.unembedding, dsel);
    Matrix dfinal(rows, d);
    for (std::size_t i = 0; i < cache.readout_rows.size(); ++i) {
        auto src = dsel.row(i);
        auto dst = dfinal.row(cache.readout_rows[i]);
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
    if (pg) {
        Matrix sel(cache.readout_rows.size(), d);
        for (std::size_t i = 0; i < cache.readout_rows.size(); ++i)
            sel.set_row(i, cache.final_norm.row(cache.readout_rows[i]));
        linear_grad_weight(dlogits, sel, grads->unembedding);
    }
    Matrix dx(rows, d);
    layer_norm_backward(dfinal, cache.layers.back().resid_out, model.lnf_gain, cache.lnf_mean,
                        cache.lnf_rstd, dx, pg ? &grads->lnf_gain : nullptr,
                        pg ? &grads->lnf_bias : nullptr);

    const Activation act = cfg.activation;
    for (std::size_t l = cfg.n_layers; l-- > options.stop_layer;) {
        const auto& lp = model.layer(l);
        const LayerCache& lc = cache.layers[l];
        LayerParams* gp = pg ? &grads->layer(l) : nullptr;

        if (sites != nullptr) sites->resid_out[l] = dx;
        for (const auto& p : cache.patches) {
            if (p.layer == l && p.site == PatchSite::hidden_state) {
                auto r = dx.row(p.row);
                std::fill(r.begin(), r.end(), 0.0);
            }
        }
        Matrix dffn = dx;
        if (sites != nullptr) sites->ffn_out[l] = dffn;
        if (options.stop_at_ffn_output && l == options.stop_layer) return;
        for (const auto& p : cache.patches) {
            if (p.layer == l && p.site == PatchSite::ffn_output) {
                auto r = dffn.row(p.row);
                std::fill(r.begin(), r.end(), 0.0);
            }
        }

        // FFN.
        Matrix& dmid = dx;  // residual path
        if (pg) linear_grad_weight(dffn, lc.key, gp->w_proj);
        Matrix dpre(rows, cfg.d_ff);
        linear_grad_input(dffn, lp.w_proj, dpre);
        for (std::size_t r = 0; r < rows; ++r) {
            auto dr = dpre.row(r);
            auto pr = lc.pre.row(r);
            for (std::size_t c = 0; c < cfg.d_ff; ++c) dr[c] *= activate_grad(act, pr[c]);
        }
        if (pg) {
            linear_grad_weight(dpre, lc.ln2_out, gp->w_fc);
            for (std::size_t r = 0; r < rows; ++r) {
                auto dr = dpre.row(r);
                for (std::size_t c = 0; c < cfg.d_ff; ++c) gp->b_fc(0, c) += dr[c];
            }
        }
        Matrix dln2(rows, d);
        linear_grad_input(dpre, lp.w_fc, dln2);
        layer_norm_backward(dln2, lc.mid, lp.ln2_gain, lc.ln2_mean, lc.ln2_rstd, dmid,
                            pg ? &gp->ln2_gain : nullptr, pg ? &gp->ln2_bias : nullptr);

        // Attention.
        if (pg) linear_grad_weight(dmid, lc.ctx, gp->w_o);
        Matrix dctx(rows, d);
        linear_grad_input(dmid, lp.w_o, dctx);
        Matrix dq(rows, d), dk(rows, d), dv(rows, d);
        attention_backward(cfg, cache, lc, dctx, dq, dk, dv);
        if (pg) {
            linear_grad_weight(dq, lc.ln1_out, gp->w_q);
            linear_grad_weight(dk, lc.ln1_out, gp->w_k);
            linear_grad_weight(dv, lc.ln1_out, gp->w_v);
        }
        Matrix dln1(rows, d);
        linear_grad_input(dq, lp.w_q, dln1);
        linear_grad_input(dk, lp.w_k, dln1);
        linear_grad_input(dv, lp.w_v, dln1);
        // dx currently holds d(mid); add the LN1 branch to get d(resid_in).
        layer_norm_backward(dln1, lc.resid_in, lp.ln1_gain, lc.ln1_mean, lc.ln1_rstd, dx,
                            pg ? &gp->ln1_gain : nullptr, pg ? &gp->ln1_bias : nullptr);
    }

    if (pg && options.stop_layer == 0 && !cache.tokens.empty()) {
        for (std::size_t s = 0; s + 1 < cache.offsets.size(); ++s) {
            for (std::size_t r = cache.offsets[s]; r < cache.offsets[s + 1]; ++r) {
                auto src = dx.row(r);
                auto te = grads->token_embedding.row(cache.tokens[r]);
                auto pe = grads->pos_embedding.row(r - cache.offsets[s]);
                for (std::size_t c = 0; c < d; ++c) {
                    te[c] += src[c];
                    pe[c] += src[c];
                }
            }
        }
    }
}

}  // namespace qedit::engine
