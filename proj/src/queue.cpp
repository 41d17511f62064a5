#include "qedit/queue.hpp"

#include <algorithm>

namespace qedit {

QueueEntry make_entry(std::size_t edit_index, const LayerEdit& edit, const Matrix& w_after,
                      const EditSample& sample, bool keep_snapshot) {
    QueueEntry e;
    e.edit_index = edit_index;
    e.layer = edit.kv.layer;
    e.delta = edit.delta;
    if (keep_snapshot) e.snapshot = w_after;
    e.snapshot_norm = w_after.frobenius_norm();
    e.k_s = edit.kv.key.k_s;
    e.h_r = edit.kv.h_r;
    e.v_star = edit.kv.v_star;
    e.subject = sample.subject;
    e.relation = sample.relation;
    e.object = sample.new_object;
    return e;
}

const char* to_string(DistanceMode m) { return m == DistanceMode::delta ? "delta" : "snapshot"; }
const char* to_string(DequeueMode m) { return m == DequeueMode::rationale ? "rationale" : "literal"; }

DistanceMode distance_mode_from_string(const std::string& s) {
    if (s == "delta") return DistanceMode::delta;
    if (s == "snapshot") return DistanceMode::snapshot;
    throw Error(ErrorKind::config, "unknown distance mode '" + s + "' (delta or snapshot)");
}

DequeueMode dequeue_mode_from_string(const std::string& s) {
    if (s == "rationale") return DequeueMode::rationale;
    if (s == "literal") return DequeueMode::literal;
    throw Error(ErrorKind::config, "unknown dequeue mode '" + s + "' (rationale or literal)");
}

double WeightQueue::distance(const QueueEntry& a, const QueueEntry& b) const {
    if (distance_mode == DistanceMode::snapshot) {
        if (a.snapshot.empty() || b.snapshot.empty()) {
            throw Error(ErrorKind::config, "snapshot distance needs entries built with snapshots");
        }
        return l2_distance(a.snapshot, b.snapshot);
    }
    return l2_distance(a.delta, b.delta);
}

std::optional<QueueEntry> enqueue(WeightQueue& queue, QueueEntry entry) {
    if (queue.capacity == 0) return std::nullopt;
    queue.entries.push_back(std::move(entry));
    if (queue.entries.size() > queue.capacity) {
        QueueEntry head = std::move(queue.entries.front());
        queue.entries.pop_front();
        return head;
    }
    return std::nullopt;
}

std::vector<Candidate> top_k_candidates(WeightQueue& queue, const QueueEntry& current) {
    std::vector<Candidate> all;
    for (std::size_t i = 0; i < queue.entries.size(); ++i) {
        const auto& e = queue.entries[i];
        if (e.edit_index >= current.edit_index || e.layer != current.layer) continue;
        all.push_back({i, queue.distance(current, e)});
    }
    if (queue.selection == Selection::random) {
        std::shuffle(all.begin(), all.end(), queue.rng());
        if (all.size() > queue.top_k) all.resize(queue.top_k);
        std::sort(all.begin(), all.end(), [](const Candidate& a, const Candidate& b) { return a.position < b.position; });
        return all;
    }
    // FIFO order is ascending edit index, so a stable sort keeps older first on ties.
    std::stable_sort(all.begin(), all.end(),
                     [](const Candidate& a, const Candidate& b) { return a.distance < b.distance; });
    std::vector<Candidate> out;
    for (const auto& c : all) {
        if (out.size() == queue.top_k) break;
        if (c.distance < queue.eta_que) out.push_back(c);
    }
    return out;
}

std::vector<CorrectionRecord> self_correct(const WeightQueue& queue, const QueueEntry& current,
                                           const std::vector<Candidate>& candidates,
                                           TransformerModel& model,
                                           const std::vector<const CovMatrix*>& covs) {
    std::vector<CorrectionRecord> out;
    for (const auto& c : candidates) {
        const QueueEntry& e = queue.entries.at(c.position);
        CorrectionRecord rec;
        rec.source = current.edit_index;
        rec.corrected = e.edit_index;
        rec.layer = e.layer;
        rec.distance = c.distance;
        rec.delta_w = current.v_star + e.h_r;
        Vec target = rec.delta_w;
        if (!queue.b_prime.empty()) target += queue.b_prime;
        try {
            if (e.layer >= covs.size() || covs[e.layer] == nullptr) {
                throw Error(ErrorKind::algebra, "no covariance for layer " + std::to_string(e.layer));
            }
            Matrix w = closed_form_update(model.w_proj(e.layer), e.k_s, target, *covs[e.layer]);
            model.set_w_proj(e.layer, std::move(w));
            rec.applied = true;
        } catch (const Error& err) {
            if (err.kind() != ErrorKind::algebra) throw;
        }
        out.push_back(std::move(rec));
    }
    return out;
}

std::optional<QueueEntry> maybe_dequeue(WeightQueue& queue, const QueueEntry& current) {
    if (queue.entries.empty()) return std::nullopt;
    const QueueEntry& head = queue.entries.front();
    if (head.edit_index == current.edit_index) return std::nullopt;
    if (head.layer != current.layer) return std::nullopt;
    const double d = queue.distance(current, head);
    const bool evict = queue.dequeue_mode == DequeueMode::rationale ? d > queue.eta_deq : d < queue.eta_deq;
    if (!evict) return std::nullopt;
    QueueEntry out = std::move(queue.entries.front());
    queue.entries.pop_front();
    return out;
}

StepReport process_edit(WeightQueue& queue, TransformerModel& model, QueueEntry entry,
                        const std::vector<const CovMatrix*>& covs) {
    StepReport report;
    if (queue.capacity == 0) return report;
    if (!entry.delta.all_finite()) throw Error(ErrorKind::numeric, "queue entry delta is not finite");
    const QueueEntry current = entry;
    if (auto overflow = enqueue(queue, std::move(entry))) report.evicted.push_back(std::move(*overflow));
    const auto candidates = top_k_candidates(queue, current);
    report.corrections = self_correct(queue, current, candidates, model, covs);
    if (auto head = maybe_dequeue(queue, current)) report.evicted.push_back(std::move(*head));
    return report;
}

nlohmann::json queue_state(const WeightQueue& queue) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : queue.entries) {
        entries.push_back({{"edit_index", e.edit_index},
                           {"layer", e.layer},
                           {"triple", {e.subject, e.relation, e.object}},
                           {"delta_norm", e.delta.frobenius_norm()}});
    }
    return {{"capacity", queue.capacity},
            {"eta_que", queue.eta_que},
            {"eta_deq", queue.eta_deq},
            {"top_k", queue.top_k},
            {"distance_mode", to_string(queue.distance_mode)},
            {"dequeue_mode", to_string(queue.dequeue_mode)},
            {"entries", entries}};
}

}  // namespace qedit
