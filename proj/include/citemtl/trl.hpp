#pragma once

// Task relation learning: train a single-task model on an auxiliary dataset,
// predict every primary TRAIN instance with it, and score the auxiliary by
// the normalized information gain of its predicted labels over the primary
// gold labels. lambda = IG / Entr(primary) in [0, 1].
//
// Entropies use logarithm base |primary label space|, so a uniform primary
// label distribution has entropy exactly 1 and a one-hot distribution exactly
// 0. All statistics are computed in double regardless of training precision.

#include <cstdint>
#include <string>
#include <vector>

#include "citemtl/text.hpp"
#include "citemtl/trainer.hpp"

namespace citemtl {

struct ContingencyTable {
    LabelSpace primary_space;
    LabelSpace aux_space;
    // counts[j][i]: primary-train instances with gold primary label i
    // predicted as auxiliary label j.
    std::vector<std::vector<std::int64_t>> counts;
    std::int64_t total = 0;

    static ContingencyTable from_counts(LabelSpace primary, LabelSpace aux,
                                        std::vector<std::vector<std::int64_t>> counts);
};

// Entropy of a probability vector with log base = vector length. Entries must
// be nonnegative and sum to 1 (within 1e-9); 0 log 0 counts as 0. Spaces of
// size < 2 are degenerate and rejected here (run_trl maps them to lambda 0).
double entropy(const std::vector<double>& dist);

struct InformationGain {
    double entr_primary = 0.0;
    std::vector<double> conditional_entropies;  // per auxiliary label
    std::vector<double> row_probabilities;      // P(j)
    double ig = 0.0;
    bool degenerate_primary = false;  // |primary| < 2 or single observed label
};

// Entr(primary) and IG = Entr(primary) - sum_j P(j) Entr(primary | j).
// Empirical frequencies, no smoothing; empty rows contribute zero.
InformationGain information_gain(const ContingencyTable& table);

// lambda = ig / entr_primary, clamped into [0, 1]. A zero-entropy primary
// yields 0 (degenerate; the caller warns).
double compute_lambda(double entr_primary, double ig);

struct TrlReport {
    std::string primary;
    std::string aux;
    ContingencyTable table;
    InformationGain gain;
    double lambda = 0.0;
    bool degenerate_primary = false;
    RunReport aux_training;  // metadata of the auxiliary-only training run
    double wall_clock_seconds = 0.0;
};

// Full TRL procedure for one (primary, auxiliary) pair under the run config
// and seed; with several auxiliaries, call once per pair. The auxiliary model
// reuses the main run's protocol (same encoder config, schedule, checkpoint
// selection on the auxiliary's own validation split).
TrlReport run_trl(const DatasetSpec& aux, const DatasetSpec& primary, const Vocabulary& vocab,
                  const TrainConfig& cfg, std::uint64_t seed);

}  // namespace citemtl
