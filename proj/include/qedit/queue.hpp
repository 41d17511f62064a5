#pragma once

// The weight queue: a bounded FIFO of recent edit deltas used to find and
// realign earlier edits that the current one makes stale.

#include <cstdint>
#include <deque>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "qedit/editor.hpp"

namespace qedit {

struct QueueEntry {
    std::size_t edit_index = 0;
    std::size_t layer = 0;
    Matrix delta;     // W_proj change made by the edit
    Matrix snapshot;  // W_proj right after the edit; kept only in snapshot mode
    double snapshot_norm = 0.0;
    Vec k_s;
    Vec h_r;
    Vec v_star;
    std::string subject, relation, object;
};

// Builds the queue entry of one edited layer.
QueueEntry make_entry(std::size_t edit_index, const LayerEdit& edit, const Matrix& w_after,
                      const EditSample& sample, bool keep_snapshot);

enum class DistanceMode { delta, snapshot };
enum class DequeueMode { rationale, literal };
enum class Selection { nearest, random };

const char* to_string(DistanceMode m);
const char* to_string(DequeueMode m);
DistanceMode distance_mode_from_string(const std::string& s);
DequeueMode dequeue_mode_from_string(const std::string& s);

struct Candidate {
    std::size_t position = 0;  // index into WeightQueue::entries
    double distance = 0.0;
};

struct CorrectionRecord {
    std::size_t source = 0;     // edit index doing the correcting
    std::size_t corrected = 0;  // edit index being corrected
    std::size_t layer = 0;
    double distance = 0.0;
    Vec delta_w;  // v*_t + h_r^i
    bool applied = false;
};

class WeightQueue {
public:
    std::size_t capacity = 0;
    double eta_que = 0.5;
    double eta_deq = 0.5;
    std::size_t top_k = 50;
    DistanceMode distance_mode = DistanceMode::delta;
    DequeueMode dequeue_mode = DequeueMode::rationale;
    Selection selection = Selection::nearest;
    Vec b_prime;  // correction bias, zero unless set
    std::deque<QueueEntry> entries;

    explicit WeightQueue(std::uint64_t seed = 0) : rng_(seed) {}

    double distance(const QueueEntry& a, const QueueEntry& b) const;
    std::mt19937_64& rng() { return rng_; }

private:
    std::mt19937_64 rng_;
};

// Step 1. Appends at the tail; returns the head evicted by overflow, if any.
std::optional<QueueEntry> enqueue(WeightQueue& queue, QueueEntry entry);

// Step 2. Strictly older entries of the same layer with d < eta_que, nearest
// first (older first on ties), at most top_k. In random selection mode a
// seeded uniform subset of at most top_k older same-layer entries instead.
std::vector<Candidate> top_k_candidates(WeightQueue& queue, const QueueEntry& current);

// Step 3. Re-solves each candidate's mapping at its own key with target
// v*_t + h_r^i + b'. Only W_proj of the candidates' layers changes.
std::vector<CorrectionRecord> self_correct(const WeightQueue& queue, const QueueEntry& current,
                                           const std::vector<Candidate>& candidates,
                                           TransformerModel& model,
                                           const std::vector<const CovMatrix*>& covs);

// Step 4. Compares the head with the current entry and evicts it by the
// configured rule. The current entry itself is never evicted here.
std::optional<QueueEntry> maybe_dequeue(WeightQueue& queue, const QueueEntry& current);

struct StepReport {
    std::vector<CorrectionRecord> corrections;
    std::vector<QueueEntry> evicted;
};

// Steps 1-4 for one layer's entry. A zero-capacity queue does nothing.
StepReport process_edit(WeightQueue& queue, TransformerModel& model, QueueEntry entry,
                        const std::vector<const CovMatrix*>& covs);

nlohmann::json queue_state(const WeightQueue& queue);

}  // namespace qedit
