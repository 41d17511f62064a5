#include <doctest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "qedit/editor.hpp"
#include "qedit/harness.hpp"

using namespace qedit;
using qedit::testing::random_matrix;
using qedit::testing::random_vec;
using qedit::testing::tiny_setup;

namespace {

// A random SPD covariance from d + 5 random keys.
CovMatrix random_cov(std::size_t d, std::mt19937_64& rng) {
    std::vector<Vec> keys;
    for (std::size_t i = 0; i < d + 5; ++i) keys.push_back(random_vec(d, rng));
    return cov_from_keys(keys, 1e-2);
}

// A sample that moves a memorized fact of the tiny world to a new object.
EncodedSample edit_sample(std::size_t fact, std::size_t shift) {
    const auto& s = tiny_setup();
    const Fact& f = s.world.facts.at(fact);
    const Prompt p = s.world.render(f.subject, f.relation, 0);
    EncodedSample e;
    e.prompt = p.tokens;
    e.subject = p.subject;
    e.relation = p.relation;
    e.old_target = s.world.vocab.id(s.world.entities[f.object].name);
    e.target = s.world.vocab.id(s.world.entities[(f.object + shift) % s.world.entities.size()].name);
    e.essence = s.world.essence(f.subject).tokens;
    return e;
}

std::vector<CovMatrix> tiny_covs() { return layer_covariances(tiny_setup().model, tiny_setup().world, 1e-2); }

std::vector<const CovMatrix*> pointers(const std::vector<CovMatrix>& covs) {
    std::vector<const CovMatrix*> out;
    for (const auto& c : covs) out.push_back(&c);
    return out;
}

}  // namespace

TEST_CASE("closed-form update on a hand example") {
    // C = I/2 + 0.5 I = I, so W' = W + (v - W k) k^T / (k^T k).
    const CovMatrix cov = cov_from_keys({Vec{1, 0}, Vec{0, 1}}, 0.5);
    CHECK(cov.c == Matrix{{1, 0}, {0, 1}});
    const Matrix w{{1, 2}, {3, 4}, {5, 6}};
    const Matrix out = closed_form_update(w, Vec{1, 0}, Vec{0, 0, 1}, cov);
    CHECK(out == Matrix{{0, 2}, {0, 4}, {1, 6}});
}

TEST_CASE("closed-form update reproduces v* on random instances") {
    std::mt19937_64 rng(101);
    std::uniform_int_distribution<std::size_t> dim(8, 128);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d_ff = dim(rng), d_model = dim(rng);
        const CovMatrix cov = random_cov(d_ff, rng);
        const Matrix w = random_matrix(d_model, d_ff, rng);
        const Vec k = random_vec(d_ff, rng);
        const Vec v = random_vec(d_model, rng, 5.0);
        const Matrix out = closed_form_update(w, k, v, cov);
        REQUIRE(l2_distance(matvec(out, k), v) / v.norm() < 1e-6);
        // The update is rank one along C^-1 k.
        const Vec u = cov.solve(k);
        Matrix delta = out - w;
        Vec probe = random_vec(d_ff, rng);
        const double along = dot(u, probe) / dot(u, u);
        for (std::size_t i = 0; i < d_ff; ++i) probe[i] -= along * u[i];
        REQUIRE(matvec(delta, probe).norm() < 1e-8 * (1.0 + delta.frobenius_norm()));
    }
}

TEST_CASE("closed-form update rejects bad input") {
    const CovMatrix cov = cov_from_keys({Vec{1, 0}, Vec{0, 1}}, 0.5);
    CHECK_THROWS_AS(closed_form_update(Matrix(3, 3), Vec{1, 0}, Vec{0, 0, 1}, cov), Error);
    CHECK_THROWS_AS(closed_form_update(Matrix(3, 2), Vec{1, 0}, Vec{0, 1}, cov), Error);
    try {
        closed_form_update(Matrix(3, 2), Vec{0, 0}, Vec{0, 0, 1}, cov);
        FAIL("zero key accepted");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::algebra);
    }
}

TEST_CASE("covariance estimate") {
    std::mt19937_64 rng(5);
    std::vector<Vec> keys;
    for (int i = 0; i < 30; ++i) keys.push_back(random_vec(6, rng));
    const CovMatrix cov = cov_from_keys(keys, 0.1);
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t j = 0; j < 6; ++j) {
            double s = 0.0;
            for (const auto& k : keys) s += k[i] * k[j];
            CHECK(cov.c(i, j) == doctest::Approx(s / 30.0 + (i == j ? 0.1 : 0.0)).epsilon(1e-12));
            CHECK(cov.c(i, j) == cov.c(j, i));
        }
    }
    CHECK(cov.sample_count == 30);
    const Vec b = random_vec(6, rng);
    CHECK(l2_distance(matvec(cov.c, cov.solve(b)), b) < 1e-10);
    CHECK_THROWS_AS(cov_from_keys({}, 0.1), Error);
    CHECK_THROWS_AS(cov_from_keys({Vec{1, 2}, Vec{1}}, 0.1), Error);

    const auto& s = tiny_setup();
    const std::vector<Tokens> corpus{s.world.render(0, 0, 0).tokens, s.world.render(1, 1, 1).tokens};
    std::vector<Vec> manual;
    for (const auto& t : corpus) {
        const auto f = forward(s.model, t, true);
        for (std::size_t r = 0; r < t.size(); ++r) manual.push_back(f.trace->layers[1].ffn_key.row_vec(r));
    }
    const CovMatrix a = compute_cov(s.model, corpus, 1, 0.01);
    const CovMatrix ref = cov_from_keys(manual, 0.01);
    CHECK(l2_distance(a.c, ref.c) < 1e-12);
    CHECK_THROWS_AS(compute_cov(s.model, {}, 1, 0.01), Error);
    CHECK_THROWS_AS(compute_cov(s.model, corpus, 2, 0.01), Error);
}

TEST_CASE("structural loss gradient matches finite differences") {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::size_t> dim(3, 24);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = dim(rng), m = dim(rng);
        const Matrix w = random_matrix(n, m, rng);
        const Vec k = random_vec(m, rng), h = random_vec(n, rng), v = random_vec(n, rng);
        const StructuralLoss st = structural_loss(k, h, v, w);
        Vec r = matvec(w, k);
        r += h;
        r -= v;
        CHECK(st.loss == doctest::Approx(r.norm()).epsilon(1e-12));

        const Vec flat(std::vector<double>(w.flat().begin(), w.flat().end()));
        const auto f = [&](const Vec& x) { return structural_loss(k, h, v, Matrix(n, m, x.values())).loss; };
        const Vec fd = finite_diff_grad(f, flat, 1e-6);
        double err = 0.0, scale = 0.0;
        for (std::size_t i = 0; i < fd.dim(); ++i) {
            err = std::max(err, std::abs(fd[i] - st.grad.flat()[i]));
            scale = std::max(scale, std::abs(fd[i]));
        }
        CHECK(err / scale < 1e-4);
    }
    const StructuralLoss zero = structural_loss(Vec{1, 0}, Vec{0, 0}, Vec{2, 3}, Matrix{{2, 0}, {3, 0}});
    CHECK(zero.loss == 0.0);
    CHECK(zero.grad == Matrix(2, 2));
    CHECK_THROWS_AS(structural_loss(Vec{1}, Vec{0, 0}, Vec{2, 3}, Matrix(2, 2)), Error);
}

TEST_CASE("relation hidden state") {
    const Matrix w{{1, 0}, {0, 2}};
    const Vec h = relation_hidden(Vec{0.5, 1.0}, w, Vec{0.1, -1.0}, Activation::relu);
    CHECK(h[0] == doctest::Approx(0.6));
    CHECK(h[1] == doctest::Approx(1.0));
    const Vec g = relation_hidden(Vec{0.5, 1.0}, w, Vec{0.0, 0.0}, Activation::gelu);
    CHECK(g[0] == doctest::Approx(activate(Activation::gelu, 0.5)));
    CHECK_THROWS_AS(relation_hidden(Vec{1}, w, Vec{0, 0}, Activation::relu), Error);
}

TEST_CASE("k* with one empty prefix is the traced key") {
    const auto& s = tiny_setup();
    const Prompt p = s.world.render(5, 2, 1);
    const auto f = forward(s.model, p.tokens, true);
    for (std::size_t l = 0; l < 2; ++l) {
        const KeyStar k = compute_k_star(s.model, p.tokens, p.subject, p.relation, l, {{}});
        CHECK(k.tokens == f.trace->layers[l].ffn_key);
        CHECK(k.k_s == pool_span(f.trace->layers[l].ffn_key, p.subject));
        CHECK(k.k_r == pool_span(f.trace->layers[l].ffn_key, p.relation));
    }

    // Averaging over prefixes aligns the prompt rows.
    const std::vector<Tokens> prefixes{{}, {s.world.vocab.id(s.world.fillers[0])}};
    const KeyStar k = compute_k_star(s.model, p.tokens, p.subject, p.relation, 1, prefixes);
    Tokens shifted = prefixes[1];
    shifted.insert(shifted.end(), p.tokens.begin(), p.tokens.end());
    const auto g = forward(s.model, shifted, true);
    for (std::size_t i = 0; i < p.tokens.size(); ++i) {
        for (std::size_t c = 0; c < k.tokens.cols(); ++c) {
            const double want = 0.5 * (f.trace->layers[1].ffn_key(i, c) + g.trace->layers[1].ffn_key(i + 1, c));
            REQUIRE(k.tokens(i, c) == doctest::Approx(want).epsilon(1e-12));
        }
    }
    CHECK_THROWS_AS(compute_k_star(s.model, p.tokens, p.subject, p.relation, 1, {}), Error);
    CHECK_THROWS_AS(compute_k_star(s.model, p.tokens, p.subject, p.relation, 2, {{}}), Error);
    CHECK_THROWS_AS(compute_k_star(s.model, p.tokens, p.subject, p.relation, 1, {Tokens(12, 0)}), Error);
}

TEST_CASE("v* raises the new answer") {
    const auto& s = tiny_setup();
    const EncodedSample e = edit_sample(4, 7);
    EditHyper h;
    const auto prefixes = sample_prefixes(s.world, 3, 2, 1);
    const VStarResult r = solve_v_star(s.model, e, 0, h, prefixes);
    const auto clean = forward(s.model, e.prompt, true);
    const std::size_t pos = e.subject.end - 1;
    CHECK(r.z_init == clean.trace->layers[0].ffn_out.row_vec(pos));
    REQUIRE(r.objective_log.size() >= 2);
    for (std::size_t i = 1; i < r.objective_log.size(); ++i) CHECK(r.objective_log[i] < r.objective_log[i - 1]);
    const double before = target_log_prob(s.model, e.prompt, {e.target});
    const double after = target_log_prob(s.model, e.prompt, {e.target}, {{0, pos, PatchSite::ffn_output, r.v_star}});
    CHECK(after > before);

    EncodedSample bad = e;
    bad.subject = {0, 0};
    CHECK_THROWS_AS(solve_v_star(s.model, bad, 0, h, prefixes), Error);
    CHECK_THROWS_AS(solve_v_star(s.model, e, 2, h, prefixes), Error);
    CHECK_THROWS_AS(solve_v_star(s.model, e, 0, h, {}), Error);
}

TEST_CASE("apply_edit installs the new answer") {
    const auto& s = tiny_setup();
    const auto covs = tiny_covs();
    EditHyper h;
    h.v_target_nll = 0.05;
    std::size_t installed = 0;
    for (std::size_t fact = 0; fact < 10; ++fact) {
        TransformerModel m = s.model;
        const EncodedSample e = edit_sample(fact * 3, 5);
        const auto out = apply_edit(m, e, pointers(covs), h, {0}, sample_prefixes(s.world, 2, 2, fact));
        REQUIRE(out.layers.size() == 1);
        const LayerEdit& le = out.layers[0];
        CHECK(le.closed_form_residual < 1e-6);
        CHECK(le.st_loss_after <= le.st_loss_before);
        CHECK(l2_distance(m.w_proj(0), s.model.w_proj(0) + le.delta) < 1e-12);
        CHECK(out.post_prob > out.pre_prob);
        installed += greedy_decode(m, e.prompt, 1)[0] == e.target;
    }
    CHECK(installed >= 9);
}

TEST_CASE("apply_edit leaves every other parameter frozen") {
    const auto& s = tiny_setup();
    const auto covs = tiny_covs();
    TransformerModel m = s.model;
    apply_edit(m, edit_sample(2, 3), pointers(covs), {}, {1}, sample_prefixes(s.world, 2, 2, 0));
    const auto before = s.model.parameters();
    const auto after = m.parameters();
    REQUIRE(before.size() == after.size());
    std::size_t changed = 0;
    for (std::size_t i = 0; i < before.size(); ++i) {
        const bool same = *before[i].second == *after[i].second;
        if (!same) {
            CHECK(after[i].first == "layer1.w_proj");
            ++changed;
        }
    }
    CHECK(changed == 1);
}

TEST_CASE("apply_edit is atomic") {
    const auto& s = tiny_setup();
    const auto covs = tiny_covs();
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        TransformerModel m = s.model;
        const std::size_t fail_at = trial % 2;
        const auto probe = [&](std::size_t l) {
            if (l == fail_at) throw Error(ErrorKind::numeric, "injected");
        };
        CHECK_THROWS_AS(apply_edit(m, edit_sample(trial, 1 + trial % 5), pointers(covs), {}, {0, 1},
                                   sample_prefixes(s.world, 2, 2, trial), probe),
                        Error);
        CHECK(m == s.model);
    }
    TransformerModel m = s.model;
    CHECK_THROWS_AS(apply_edit(m, edit_sample(0, 1), {pointers(covs)[0]}, {}, {0, 1}, {{}}), Error);
    CHECK(m == s.model);
    EditHyper bad;
    bad.alpha1 = 0.9;
    CHECK_THROWS_AS(apply_edit(m, edit_sample(0, 1), pointers(covs), bad, {0}, {{}}), Error);
    CHECK(m == s.model);
}

TEST_CASE("mixed key edits skip the structural refinement") {
    const auto& s = tiny_setup();
    const auto covs = tiny_covs();
    TransformerModel m = s.model;
    EditHyper h;
    h.mixed_key = true;
    const EncodedSample e = edit_sample(6, 2);
    const auto out = apply_edit(m, e, pointers(covs), h, {0}, {{}});
    const LayerEdit& le = out.layers[0];
    Vec mean(le.key.dim());
    std::size_t n = 0;
    for (std::size_t i = 0; i < e.prompt.size(); ++i) {
        if (!e.subject.contains(i) && !e.relation.contains(i)) continue;
        mean += le.kv.key.tokens.row_vec(i);
        ++n;
    }
    mean *= 1.0 / static_cast<double>(n);
    CHECK(l2_distance(mean, le.key) < 1e-12);
    CHECK(le.st_loss_before == 0.0);
    CHECK(le.st_loss_after == 0.0);
    CHECK(l2_distance(matvec(m.w_proj(0), le.key), le.kv.v_star) / le.kv.v_star.norm() < 1e-6);
}

TEST_CASE("edit hyperparameter validation") {
    EditHyper h;
    CHECK_NOTHROW(h.validate());
    h.alpha1 = 0.7;
    CHECK_THROWS_AS(h.validate(), Error);
    h = {};
    h.n_prefixes = 0;
    CHECK_THROWS_AS(h.validate(), Error);
    h = {};
    h.ridge = 0.0;
    CHECK_THROWS_AS(h.validate(), Error);
    h = {};
    h.v_lr = -1.0;
    CHECK_THROWS_AS(h.validate(), Error);
}

TEST_CASE("prefixes and key corpus") {
    const auto& s = tiny_setup();
    const auto p = sample_prefixes(s.world, 5, 3, 9);
    REQUIRE(p.size() == 5);
    CHECK(p[0].empty());
    for (std::size_t i = 1; i < p.size(); ++i) {
        CHECK(p[i].size() >= 1);
        CHECK(p[i].size() <= 3);
    }
    CHECK(p == sample_prefixes(s.world, 5, 3, 9));
    CHECK_THROWS_AS(sample_prefixes(s.world, 0, 3, 9), Error);

    std::size_t forms = 0;
    for (const auto& f : s.world.facts) forms += s.world.form_count(f.relation);
    CHECK(key_corpus(s.world).size() == 2 * forms + s.world.entities.size());
}
