#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>
#include <tuple>

#include "fixtures.hpp"
#include "qedit/harness.hpp"
#include "qedit/queue.hpp"

using namespace qedit;
using qedit::testing::random_vec;
using qedit::testing::tiny_setup;

namespace {

QueueEntry entry(std::size_t index, Matrix delta, std::size_t layer = 0) {
    QueueEntry e;
    e.edit_index = index;
    e.layer = layer;
    e.delta = std::move(delta);
    return e;
}

QueueEntry scalar_entry(std::size_t index, double d) { return entry(index, Matrix{{d}}); }

std::vector<Candidate> oracle(const WeightQueue& q, const QueueEntry& current) {
    std::vector<std::tuple<double, std::size_t, std::size_t>> all;
    for (std::size_t i = 0; i < q.entries.size(); ++i) {
        const auto& e = q.entries[i];
        if (e.edit_index < current.edit_index && e.layer == current.layer) {
            all.emplace_back(l2_distance(e.delta, current.delta), e.edit_index, i);
        }
    }
    std::sort(all.begin(), all.end());
    std::vector<Candidate> out;
    for (const auto& [d, idx, pos] : all) {
        if (d < q.eta_que && out.size() < q.top_k) out.push_back({pos, d});
    }
    return out;
}

}  // namespace

TEST_CASE("top-K on the worked example") {
    WeightQueue q;
    q.capacity = 10;
    q.top_k = 2;
    q.eta_que = 0.5;
    enqueue(q, scalar_entry(0, 0.1));
    enqueue(q, scalar_entry(1, 0.7));
    enqueue(q, scalar_entry(2, 0.3));
    const auto c = top_k_candidates(q, scalar_entry(3, 0.0));
    REQUIRE(c.size() == 2);
    CHECK(c[0].position == 0);
    CHECK(c[0].distance == doctest::Approx(0.1));
    CHECK(c[1].position == 2);
}

TEST_CASE("top-K agrees with a brute-force oracle") {
    std::mt19937_64 rng(42);
    std::uniform_int_distribution<int> small(-2, 2);
    std::uniform_int_distribution<std::size_t> len(0, 40), kk(1, 8), layer(0, 1);
    std::uniform_real_distribution<double> eta(0.5, 4.0);
    std::size_t nonempty = 0, with_ties = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        WeightQueue q;
        q.capacity = 64;
        q.top_k = kk(rng);
        q.eta_que = eta(rng);
        const std::size_t n = len(rng);
        // Integer entries in a 2x2 matrix give many exact ties.
        auto random_delta = [&] { return Matrix{{double(small(rng)), double(small(rng))}, {double(small(rng)), 0.0}}; };
        for (std::size_t i = 0; i < n; ++i) enqueue(q, entry(i, random_delta(), layer(rng)));
        const QueueEntry current = entry(n, random_delta(), layer(rng));
        const auto got = top_k_candidates(q, current);
        const auto want = oracle(q, current);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            REQUIRE(got[i].position == want[i].position);
            REQUIRE(got[i].distance == want[i].distance);
        }
        nonempty += !got.empty();
        for (std::size_t i = 1; i < got.size(); ++i) {
            if (got[i].distance == got[i - 1].distance) {
                ++with_ties;
                break;
            }
        }
    }
    CHECK(nonempty > 500);
    CHECK(with_ties > 100);
}

TEST_CASE("top-K skips the current and newer entries") {
    WeightQueue q;
    q.capacity = 5;
    q.top_k = 5;
    q.eta_que = 10.0;
    enqueue(q, scalar_entry(0, 0.0));
    enqueue(q, scalar_entry(1, 0.0));
    enqueue(q, scalar_entry(2, 0.0));
    const auto c = top_k_candidates(q, scalar_entry(1, 0.0));
    REQUIRE(c.size() == 1);
    CHECK(c[0].position == 0);
}

TEST_CASE("random selection") {
    WeightQueue a(7), b(7);
    for (auto* q : {&a, &b}) {
        q->capacity = 20;
        q->top_k = 3;
        q->eta_que = 0.0;  // ignored in random mode
        q->selection = Selection::random;
        for (std::size_t i = 0; i < 10; ++i) enqueue(*q, scalar_entry(i, static_cast<double>(i)));
        enqueue(*q, entry(10, Matrix{{0.0}}, 1));
    }
    const auto ca = top_k_candidates(a, scalar_entry(10, 0.0));
    const auto cb = top_k_candidates(b, scalar_entry(10, 0.0));
    REQUIRE(ca.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(ca[i].position == cb[i].position);
        CHECK(ca[i].position < 10);
    }
    std::set<std::size_t> seen;
    for (int t = 0; t < 20; ++t)
        for (const auto& c : top_k_candidates(a, scalar_entry(10, 0.0))) seen.insert(c.position);
    CHECK(seen.size() > 3);
}

TEST_CASE("enqueue is a bounded FIFO") {
    WeightQueue q;
    q.capacity = 0;
    CHECK_FALSE(enqueue(q, scalar_entry(0, 1.0)));
    CHECK(q.entries.empty());

    q.capacity = 2;
    CHECK_FALSE(enqueue(q, scalar_entry(0, 1.0)));
    CHECK_FALSE(enqueue(q, scalar_entry(1, 1.0)));
    const auto out = enqueue(q, scalar_entry(2, 1.0));
    REQUIRE(out);
    CHECK(out->edit_index == 0);
    REQUIRE(q.entries.size() == 2);
    CHECK(q.entries.front().edit_index == 1);
    CHECK(q.entries.back().edit_index == 2);
}

TEST_CASE("dequeue modes") {
    auto make = [](DequeueMode mode) {
        WeightQueue q;
        q.capacity = 4;
        q.eta_deq = 0.5;
        q.dequeue_mode = mode;
        enqueue(q, scalar_entry(0, 0.0));
        return q;
    };
    SUBCASE("rationale evicts a distant head") {
        auto q = make(DequeueMode::rationale);
        CHECK_FALSE(maybe_dequeue(q, scalar_entry(1, 0.2)));
        CHECK(q.entries.size() == 1);
        const auto out = maybe_dequeue(q, scalar_entry(1, 0.9));
        REQUIRE(out);
        CHECK(out->edit_index == 0);
        CHECK(q.entries.empty());
    }
    SUBCASE("literal evicts a near head") {
        auto q = make(DequeueMode::literal);
        CHECK_FALSE(maybe_dequeue(q, scalar_entry(1, 0.9)));
        CHECK(maybe_dequeue(q, scalar_entry(1, 0.2)));
    }
    SUBCASE("the current entry and other layers stay") {
        auto q = make(DequeueMode::rationale);
        CHECK_FALSE(maybe_dequeue(q, scalar_entry(0, 5.0)));
        CHECK_FALSE(maybe_dequeue(q, entry(1, Matrix{{5.0}}, 1)));
        CHECK(q.entries.size() == 1);
        WeightQueue empty;
        CHECK_FALSE(maybe_dequeue(empty, scalar_entry(1, 0.0)));
    }
}

TEST_CASE("distance modes") {
    WeightQueue q;
    QueueEntry a = scalar_entry(0, 1.0), b = scalar_entry(1, 4.0);
    CHECK(q.distance(a, b) == 3.0);
    q.distance_mode = DistanceMode::snapshot;
    CHECK_THROWS_AS(q.distance(a, b), Error);
    a.snapshot = Matrix{{10.0}};
    b.snapshot = Matrix{{10.5}};
    CHECK(q.distance(a, b) == 0.5);

    CHECK(distance_mode_from_string(to_string(DistanceMode::snapshot)) == DistanceMode::snapshot);
    CHECK(dequeue_mode_from_string(to_string(DequeueMode::literal)) == DequeueMode::literal);
    CHECK_THROWS_AS(distance_mode_from_string("cosine"), Error);
    CHECK_THROWS_AS(dequeue_mode_from_string("never"), Error);
}

TEST_CASE("self_correct re-solves the older mapping") {
    const auto& s = tiny_setup();
    const auto covs = layer_covariances(s.model, s.world, 1e-2);
    const std::vector<const CovMatrix*> cp{&covs[0], &covs[1]};
    std::mt19937_64 rng(2);
    const std::size_t d_ff = s.model.config().d_ff, d_model = s.model.config().d_model;

    WeightQueue q;
    q.capacity = 4;
    q.b_prime = random_vec(d_model, rng, 0.1);
    QueueEntry old = entry(0, Matrix(d_model, d_ff), 1);
    old.k_s = random_vec(d_ff, rng);
    old.h_r = random_vec(d_model, rng);
    enqueue(q, old);
    QueueEntry current = entry(1, Matrix(d_model, d_ff), 1);
    current.v_star = random_vec(d_model, rng);

    TransformerModel m = s.model;
    const auto recs = self_correct(q, current, {{0, 0.0}}, m, cp);
    REQUIRE(recs.size() == 1);
    CHECK(recs[0].applied);
    CHECK(recs[0].source == 1);
    CHECK(recs[0].corrected == 0);
    CHECK(recs[0].delta_w == current.v_star + old.h_r);
    const Vec want = current.v_star + old.h_r + q.b_prime;
    CHECK(l2_distance(matvec(m.w_proj(1), old.k_s), want) / want.norm() < 1e-6);

    // Only the candidate's W_proj moves.
    const auto before = s.model.parameters();
    const auto after = m.parameters();
    for (std::size_t i = 0; i < before.size(); ++i) {
        if (after[i].first != "layer1.w_proj") CHECK(*before[i].second == *after[i].second);
    }
    CHECK(m.w_proj(1) != s.model.w_proj(1));

    // An unsolvable mapping is recorded and leaves the model alone.
    q.entries.front().k_s = Vec(d_ff);
    TransformerModel m2 = s.model;
    const auto failed = self_correct(q, current, {{0, 0.0}}, m2, cp);
    REQUIRE(failed.size() == 1);
    CHECK_FALSE(failed[0].applied);
    CHECK(m2 == s.model);
}

TEST_CASE("process_edit on a chained pair") {
    const auto& s = tiny_setup();
    const auto covs = layer_covariances(s.model, s.world, 1e-2);
    const std::vector<const CovMatrix*> cp{&covs[0], &covs[1]};
    StreamOptions so;
    so.edits = 10;
    so.chain_fraction = 0.2;
    so.max_chain_gap = 1;
    so.seed = 4;
    const auto stream = generate_edit_stream(s.world, so);
    const auto [pi, ci] = stream.chain_links().at(0);
    const EncodedSample parent = encode(s.world.vocab, stream.samples[pi]);
    const EncodedSample child = encode(s.world.vocab, stream.samples[ci]);

    TransformerModel m = s.model;
    const auto prefixes = sample_prefixes(s.world, 2, 2, 0);
    const auto first = apply_edit(m, parent, cp, {}, {0}, prefixes);
    const auto second = apply_edit(m, child, cp, {}, {0}, prefixes);
    const QueueEntry a = make_entry(0, first.layers[0], m.w_proj(0), stream.samples[pi], false);
    const QueueEntry b = make_entry(1, second.layers[0], m.w_proj(0), stream.samples[ci], false);
    CHECK(a.subject == b.subject);
    CHECK(a.snapshot.empty());

    WeightQueue q;
    q.capacity = 3;
    q.top_k = 1;
    q.eta_que = 1.0 + l2_distance(a.delta, b.delta);
    q.eta_deq = q.eta_que;
    CHECK(process_edit(q, m, a, cp).corrections.empty());
    const Matrix before = m.w_proj(0);
    const StepReport step = process_edit(q, m, b, cp);
    REQUIRE(step.corrections.size() == 1);
    CHECK(step.corrections[0].applied);
    CHECK(step.corrections[0].corrected == 0);
    CHECK(step.evicted.empty());
    CHECK(q.entries.size() == 2);
    CHECK(m.w_proj(0) != before);

    WeightQueue off;
    TransformerModel untouched = s.model;
    const StepReport none = process_edit(off, untouched, a, cp);
    CHECK(none.corrections.empty());
    CHECK(off.entries.empty());
    CHECK(untouched == s.model);

    const auto state = queue_state(q);
    CHECK(state["capacity"] == 3);
    CHECK(state["entries"].size() == 2);
    CHECK(state["entries"][0]["triple"][0] == a.subject);
    CHECK(state["distance_mode"] == "delta");
}
