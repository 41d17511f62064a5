#pragma once

// Shared small models and worlds for the unit tests.

#include <random>

#include "qedit/dataset.hpp"
#include "qedit/model.hpp"

namespace qedit::testing {

inline ModelConfig small_config(Activation act = Activation::gelu) {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.d_ff = 32;
    c.n_heads = 2;
    c.vocab_size = 16;
    c.max_seq = 8;
    c.activation = act;
    c.seed = 3;
    return c;
}

// Fresh models have a zero unembedding; give every parameter some signal.
inline TransformerModel randomized(ModelConfig c, std::uint64_t seed = 9) {
    TransformerModel m(c);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 0.3);
    for (auto& v : m.unembedding.flat()) v = n(rng);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        for (auto& v : m.layer(l).b_fc.flat()) v = n(rng);
        for (auto& v : m.layer(l).ln2_gain.flat()) v += n(rng);
    }
    return m;
}

inline Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(r, c);
    for (auto& v : m.flat()) v = n(rng);
    return m;
}

inline Vec random_vec(std::size_t d, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Vec v(d);
    for (auto& x : v) x = n(rng);
    return v;
}

// A world of 40 entities and 80 facts with a 2-layer model trained on it.
struct TinySetup {
    SyntheticWorld world;
    TransformerModel model;
};

inline const TinySetup& tiny_setup() {
    static const TinySetup setup = [] {
        SyntheticWorld world = generate_world(11, {40, 5, 80});
        ModelConfig c;
        c.n_layers = 2;
        c.d_model = 32;
        c.d_ff = 64;
        c.n_heads = 2;
        c.vocab_size = world.vocab.size();
        c.max_seq = 12;
        c.seed = 5;
        TransformerModel model(c);
        PretrainOptions o;
        o.steps = 600;
        o.lr = 3e-3;
        o.batch_size = 32;
        pretrain_base(model, pretraining_corpus(world, {1, 3, 0}), o);
        return TinySetup{std::move(world), std::move(model)};
    }();
    return setup;
}

}  // namespace qedit::testing
