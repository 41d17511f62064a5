#include "qedit/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "qedit/engine.hpp"
#include "qedit/numerics.hpp"

namespace qedit {

const char* to_string(Activation a) { return a == Activation::gelu ? "gelu" : "relu"; }

Activation activation_from_string(const std::string& s) {
    if (s == "gelu") return Activation::gelu;
    if (s == "relu") return Activation::relu;
    throw Error(ErrorKind::config, "unknown activation '" + s + "'");
}

void ModelConfig::validate() const {
    if (n_layers == 0 || d_model == 0 || d_ff == 0 || n_heads == 0 || vocab_size == 0 ||
        max_seq == 0) {
        throw Error(ErrorKind::config, "model sizes must all be at least 1");
    }
    if (d_model % n_heads != 0) throw Error(ErrorKind::config, "d_model must be divisible by n_heads");
    if (d_ff < d_model) throw Error(ErrorKind::config, "d_ff must be at least d_model");
}

double activate(Activation a, double x) {
    if (a == Activation::relu) return x > 0.0 ? x : 0.0;
    return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
}

double activate_grad(Activation a, double x) {
    if (a == Activation::relu) return x > 0.0 ? 1.0 : 0.0;
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    return cdf + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

namespace {

Matrix gaussian(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
    Matrix m(rows, cols);
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : m.flat()) v = dist(rng);
    return m;
}

}  // namespace

TransformerModel::TransformerModel(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    const std::size_t d = config_.d_model;
    const std::size_t f = config_.d_ff;
    std::mt19937_64 rng(config_.seed);
    const double in_d = 1.0 / std::sqrt(static_cast<double>(d));
    const double in_f = 1.0 / std::sqrt(static_cast<double>(f));
    const double depth = 1.0 / std::sqrt(2.0 * static_cast<double>(config_.n_layers));

    token_embedding = gaussian(config_.vocab_size, d, 1.0, rng);
    pos_embedding = gaussian(config_.max_seq, d, 0.5, rng);
    layers_.resize(config_.n_layers);
    for (auto& lp : layers_) {
        lp.ln1_gain = Matrix(1, d, 1.0);
        lp.ln1_bias = Matrix(1, d);
        lp.w_q = gaussian(d, d, in_d, rng);
        lp.w_k = gaussian(d, d, in_d, rng);
        lp.w_v = gaussian(d, d, in_d, rng);
        lp.w_o = gaussian(d, d, in_d * depth, rng);
        lp.ln2_gain = Matrix(1, d, 1.0);
        lp.ln2_bias = Matrix(1, d);
        lp.w_fc = gaussian(f, d, in_d, rng);
        lp.b_fc = Matrix(1, f);
        lp.w_proj = gaussian(d, f, in_f * depth, rng);
    }
    lnf_gain = Matrix(1, d, 1.0);
    lnf_bias = Matrix(1, d);
    unembedding = Matrix(config_.vocab_size, d);
}

const LayerParams& TransformerModel::layer(std::size_t l) const {
    if (l >= layers_.size()) throw Error(ErrorKind::input, "layer " + std::to_string(l) + " out of range");
    return layers_[l];
}

LayerParams& TransformerModel::layer(std::size_t l) {
    if (l >= layers_.size()) throw Error(ErrorKind::input, "layer " + std::to_string(l) + " out of range");
    return layers_[l];
}

void TransformerModel::set_w_proj(std::size_t l, Matrix w) {
    auto& lp = layer(l);
    if (!w.same_shape(lp.w_proj)) throw Error(ErrorKind::dimension, "W_proj replacement shape");
    lp.w_proj = std::move(w);
}

std::vector<std::pair<std::string, Matrix*>> TransformerModel::parameters() {
    std::vector<std::pair<std::string, Matrix*>> out;
    out.emplace_back("token_embedding", &token_embedding);
    out.emplace_back("pos_embedding", &pos_embedding);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        auto& lp = layers_[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        out.emplace_back(p + "ln1_gain", &lp.ln1_gain);
        out.emplace_back(p + "ln1_bias", &lp.ln1_bias);
        out.emplace_back(p + "w_q", &lp.w_q);
        out.emplace_back(p + "w_k", &lp.w_k);
        out.emplace_back(p + "w_v", &lp.w_v);
        out.emplace_back(p + "w_o", &lp.w_o);
        out.emplace_back(p + "ln2_gain", &lp.ln2_gain);
        out.emplace_back(p + "ln2_bias", &lp.ln2_bias);
        out.emplace_back(p + "w_fc", &lp.w_fc);
        out.emplace_back(p + "b_fc", &lp.b_fc);
        out.emplace_back(p + "w_proj", &lp.w_proj);
    }
    out.emplace_back("lnf_gain", &lnf_gain);
    out.emplace_back("lnf_bias", &lnf_bias);
    out.emplace_back("unembedding", &unembedding);
    return out;
}

std::vector<std::pair<std::string, const Matrix*>> TransformerModel::parameters() const {
    auto mut = const_cast<TransformerModel*>(this)->parameters();
    std::vector<std::pair<std::string, const Matrix*>> out;
    out.reserve(mut.size());
    for (auto& [n, m] : mut) out.emplace_back(n, m);
    return out;
}

namespace {

std::vector<engine::RowPatch> to_rows(const PatchSpec& patch, std::size_t len) {
    std::vector<engine::RowPatch> rows;
    rows.reserve(patch.size());
    for (const auto& p : patch) {
        if (p.position >= len) {
            throw Error(ErrorKind::patch, "patch position " + std::to_string(p.position) +
                                              " beyond sequence length " + std::to_string(len));
        }
        rows.push_back({p.layer, p.position, p.site, p.replacement});
    }
    return rows;
}

}  // namespace

ForwardResult forward(const TransformerModel& model, const Tokens& tokens, bool capture) {
    engine::Cache cache;
    engine::embed(model, {tokens}, cache);
    engine::run(model, cache, {});
    ForwardResult out{cache.logits, std::nullopt};
    if (capture) {
        ActivationTrace trace;
        for (const auto& lc : cache.layers) {
            trace.layers.push_back({lc.resid_in, lc.attn_out, lc.key, lc.ffn_out, lc.resid_out});
        }
        out.trace = std::move(trace);
    }
    return out;
}

Matrix forward_with_patch(const TransformerModel& model, const Tokens& tokens,
                          const PatchSpec& patch) {
    engine::Cache cache;
    engine::embed(model, {tokens}, cache);
    engine::run(model, cache, to_rows(patch, tokens.size()));
    return cache.logits;
}

double target_log_prob(const TransformerModel& model, const Tokens& prompt, const Tokens& target,
                       const PatchSpec& patch) {
    if (target.empty()) throw Error(ErrorKind::input, "empty target");
    if (prompt.empty()) throw Error(ErrorKind::input, "empty prompt");
    Tokens seq = prompt;
    seq.insert(seq.end(), target.begin(), target.end() - 1);
    const Matrix logits = forward_with_patch(model, seq, patch);
    double total = 0.0;
    for (std::size_t j = 0; j < target.size(); ++j) {
        const auto lp = log_softmax(logits.row(prompt.size() - 1 + j));
        total += lp[target[j]];
    }
    return total;
}

Tokens greedy_decode(const TransformerModel& model, const Tokens& prompt, std::size_t n) {
    Tokens seq = prompt;
    Tokens out;
    for (std::size_t i = 0; i < n; ++i) {
        engine::Cache cache;
        engine::embed(model, {seq}, cache);
        engine::run(model, cache, {}, {seq.size() - 1});
        auto row = cache.logits.row(0);
        const auto best = static_cast<Token>(std::max_element(row.begin(), row.end()) - row.begin());
        out.push_back(best);
        seq.push_back(best);
    }
    return out;
}

namespace {

void check_objective(const Objective& objective, std::size_t len, std::size_t vocab) {
    for (const auto& t : objective.log_probs) {
        if (t.position >= len || t.token >= vocab) throw Error(ErrorKind::input, "objective term out of range");
    }
    for (const auto& t : objective.kls) {
        if (t.position >= len || t.reference.size() != vocab) {
            throw Error(ErrorKind::input, "KL term out of range");
        }
    }
}

// Objective value and d(objective)/d(logits) for one sequence's logits.
double objective_and_grad(const Matrix& logits, const Objective& objective, Matrix* dlogits) {
    double value = 0.0;
    if (dlogits != nullptr) *dlogits = Matrix(logits.rows(), logits.cols());
    for (const auto& t : objective.log_probs) {
        const auto lp = log_softmax(logits.row(t.position));
        value += t.weight * lp[t.token];
        if (dlogits != nullptr) {
            auto g = dlogits->row(t.position);
            for (std::size_t v = 0; v < lp.size(); ++v) g[v] -= t.weight * std::exp(lp[v]);
            g[t.token] += t.weight;
        }
    }
    for (const auto& t : objective.kls) {
        const auto lp = log_softmax(logits.row(t.position));
        double kl = 0.0;
        for (std::size_t v = 0; v < lp.size(); ++v) {
            const double p = std::exp(lp[v]);
            if (p > 0.0) kl += p * (lp[v] - std::log(t.reference[v]));
        }
        value += t.weight * kl;
        if (dlogits != nullptr) {
            auto g = dlogits->row(t.position);
            for (std::size_t v = 0; v < lp.size(); ++v) {
                const double p = std::exp(lp[v]);
                g[v] += t.weight * p * (lp[v] - std::log(t.reference[v]) - kl);
            }
        }
    }
    if (!std::isfinite(value)) throw Error(ErrorKind::numeric, "objective is not finite");
    return value;
}

}  // namespace

double evaluate_objective(const TransformerModel& model, const Tokens& tokens,
                          const Objective& objective, const PatchSpec& patch) {
    check_objective(objective, tokens.size(), model.config().vocab_size);
    const Matrix logits = forward_with_patch(model, tokens, patch);
    return objective_and_grad(logits, objective, nullptr);
}

Vec grad_hidden(const TransformerModel& model, const Tokens& tokens, const Objective& objective,
                HiddenSite site) {
    const auto& cfg = model.config();
    if (site.layer >= cfg.n_layers || site.position >= tokens.size()) {
        throw Error(ErrorKind::input, "gradient site out of range");
    }
    check_objective(objective, tokens.size(), cfg.vocab_size);
    engine::Cache cache;
    engine::embed(model, {tokens}, cache);
    engine::run(model, cache, {});
    Matrix dlogits;
    objective_and_grad(cache.logits, objective, &dlogits);
    engine::SiteGrads sites;
    engine::BackwardOptions opts;
    opts.stop_layer = site.layer;
    opts.stop_at_ffn_output = site.site == PatchSite::ffn_output;
    engine::backward(model, cache, dlogits, opts, nullptr, &sites);
    const Matrix& g = site.site == PatchSite::ffn_output ? sites.ffn_out[site.layer]
                                                         : sites.resid_out[site.layer];
    Vec out = g.row_vec(site.position);
    if (!out.all_finite()) throw Error(ErrorKind::numeric, "non-finite gradient");
    return out;
}

PretrainResult pretrain_base(TransformerModel& model, const std::vector<TrainExample>& corpus,
                             const PretrainOptions& options) {
    PretrainResult result;
    if (options.steps == 0) return result;
    if (corpus.empty()) throw Error(ErrorKind::data, "empty pretraining corpus");
    const auto& cfg = model.config();

    auto params = model.parameters();
    std::vector<std::vector<double>> m1(params.size()), m2(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        m1[i].assign(params[i].second->size(), 0.0);
        m2[i].assign(params[i].second->size(), 0.0);
    }
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, clip = 1.0;

    std::mt19937_64 rng(options.seed);
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t cursor = 0;
    const std::size_t batch = std::max<std::size_t>(1, std::min(options.batch_size, corpus.size()));
    const std::size_t warmup = std::min<std::size_t>(50, options.steps / 10 + 1);

    double initial = -1.0;
    for (std::size_t step = 0; step < options.steps; ++step) {
        std::vector<Tokens> seqs;
        std::vector<Token> targets;
        seqs.reserve(batch);
        for (std::size_t b = 0; b < batch; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const auto& ex = corpus[order[cursor++]];
            seqs.push_back(ex.prompt);
            targets.push_back(ex.target);
        }
        engine::Cache cache;
        engine::embed(model, seqs, cache);
        std::vector<std::size_t> readout;
        for (std::size_t s = 0; s < seqs.size(); ++s) readout.push_back(cache.offsets[s + 1] - 1);
        engine::run(model, cache, {}, readout);

        Matrix dlogits(readout.size(), cfg.vocab_size);
        double loss = 0.0;
        const double inv = 1.0 / static_cast<double>(readout.size());
        for (std::size_t s = 0; s < readout.size(); ++s) {
            const auto lp = log_softmax(cache.logits.row(s));
            loss -= lp[targets[s]] * inv;
            auto g = dlogits.row(s);
            for (std::size_t v = 0; v < lp.size(); ++v) g[v] = std::exp(lp[v]) * inv;
            g[targets[s]] -= inv;
        }
        if (!std::isfinite(loss)) {
            throw Error(ErrorKind::training, "non-finite loss at step " + std::to_string(step));
        }
        if (initial < 0.0) initial = loss;
        if (loss > 10.0 * initial) {
            throw Error(ErrorKind::training, "loss diverged at step " + std::to_string(step));
        }
        result.loss_curve.push_back(loss);
        if (options.on_step) options.on_step(step, loss);

        TransformerModel grads = engine::zeros_like(model);
        engine::BackwardOptions opts;
        opts.param_grads = true;
        engine::backward(model, cache, dlogits, opts, &grads, nullptr);

        auto gparams = grads.parameters();
        double gnorm2 = 0.0;
        for (auto& [n, g] : gparams)
            for (double v : g->flat()) gnorm2 += v * v;
        const double gscale = std::sqrt(gnorm2) > clip ? clip / std::sqrt(gnorm2) : 1.0;

        const double progress = static_cast<double>(step) / static_cast<double>(options.steps);
        double lr = options.lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * progress)));
        if (step < warmup) lr *= static_cast<double>(step + 1) / static_cast<double>(warmup);
        const double t = static_cast<double>(step + 1);
        const double bc1 = 1.0 - std::pow(beta1, t);
        const double bc2 = 1.0 - std::pow(beta2, t);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto w = params[i].second->flat();
            auto g = gparams[i].second->flat();
            auto& a = m1[i];
            auto& b = m2[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                const double gj = g[j] * gscale;
                a[j] = beta1 * a[j] + (1.0 - beta1) * gj;
                b[j] = beta2 * b[j] + (1.0 - beta2) * gj * gj;
                w[j] -= lr * ((a[j] / bc1) / (std::sqrt(b[j] / bc2) + eps) +
                              options.weight_decay * w[j]);
            }
        }
    }
    return result;
}

namespace {

constexpr char kMagic[8] = {'Q', 'E', 'D', 'I', 'T', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw Error(ErrorKind::io, "truncated checkpoint");
    return v;
}

nlohmann::json config_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers}, {"d_model", c.d_model},   {"d_ff", c.d_ff},
            {"n_heads", c.n_heads},   {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq},
            {"activation", to_string(c.activation)}, {"seed", c.seed}};
}

}  // namespace

void save_checkpoint(const TransformerModel& model, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error(ErrorKind::io, "cannot write checkpoint " + path.string());
    os.write(kMagic, sizeof(kMagic));
    write_pod(os, kVersion);
    const std::string header = config_json(model.config()).dump();
    write_pod(os, static_cast<std::uint64_t>(header.size()));
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    const auto params = model.parameters();
    write_pod(os, static_cast<std::uint64_t>(params.size()));
    for (const auto& [name, m] : params) {
        write_pod(os, static_cast<std::uint64_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod(os, static_cast<std::uint64_t>(m->rows()));
        write_pod(os, static_cast<std::uint64_t>(m->cols()));
        os.write(reinterpret_cast<const char*>(m->data()),
                 static_cast<std::streamsize>(m->size() * sizeof(double)));
    }
    if (!os) throw Error(ErrorKind::io, "failed writing checkpoint " + path.string());
}

TransformerModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorKind::io, "cannot open checkpoint " + path.string());
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw Error(ErrorKind::parse, path.string() + " is not a checkpoint");
    }
    const auto version = read_pod<std::uint32_t>(is);
    if (version != kVersion) throw Error(ErrorKind::parse, "unsupported checkpoint version");
    const auto hlen = read_pod<std::uint64_t>(is);
    std::string header(hlen, '\0');
    is.read(header.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw Error(ErrorKind::io, "truncated checkpoint header");
    ModelConfig cfg;
    try {
        const auto j = nlohmann::json::parse(header);
        cfg.n_layers = j.at("n_layers");
        cfg.d_model = j.at("d_model");
        cfg.d_ff = j.at("d_ff");
        cfg.n_heads = j.at("n_heads");
        cfg.vocab_size = j.at("vocab_size");
        cfg.max_seq = j.at("max_seq");
        cfg.activation = activation_from_string(j.at("activation"));
        cfg.seed = j.at("seed");
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::parse, std::string("checkpoint header: ") + e.what());
    }
    TransformerModel model(cfg);
    auto params = model.parameters();
    const auto count = read_pod<std::uint64_t>(is);
    if (count != params.size()) throw Error(ErrorKind::parse, "checkpoint tensor count mismatch");
    for (auto& [name, m] : params) {
        const auto nlen = read_pod<std::uint64_t>(is);
        std::string stored(nlen, '\0');
        is.read(stored.data(), static_cast<std::streamsize>(nlen));
        const auto rows = read_pod<std::uint64_t>(is);
        const auto cols = read_pod<std::uint64_t>(is);
        if (stored != name || rows != m->rows() || cols != m->cols()) {
            throw Error(ErrorKind::parse, "checkpoint tensor '" + stored + "' does not match " + name);
        }
        is.read(reinterpret_cast<char*>(m->data()),
                static_cast<std::streamsize>(m->size() * sizeof(double)));
        if (!is) throw Error(ErrorKind::io, "truncated tensor " + name);
    }
    return model;
}

}  // namespace qedit
