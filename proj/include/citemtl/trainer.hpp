#pragma once

// Training loop and experiment protocol: slanted triangular learning rate,
// round-robin multi-task steps (one batch per dataset per step), per-epoch
// validation with best-checkpoint selection, the multi-seed protocol and the
// lambda grid search.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "citemtl/metrics.hpp"
#include "citemtl/model.hpp"
#include "citemtl/text.hpp"

namespace citemtl {

struct TrainConfig {
    int batch_size = 32;
    double learning_rate = 5e-5;
    int epochs = 10;
    double cut_frac = 0.1;  // slanted triangular schedule
    double ratio = 32.0;
    double grad_clip = 1.0;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    EncoderConfig encoder;  // vocab_size is filled in from the run's vocabulary
    ReadoutMode readout = ReadoutMode::kCitedHere;
    int head_hidden = kHeadHiddenDefault;

    void validate() const;
};

// Piecewise-linear warmup/decay: lr_max/ratio at step 0, lr_max exactly at
// step floor(cut_frac * total_steps), back to lr_max/ratio at step
// total_steps. The trainer samples steps 0..total_steps-1.
double slanted_triangular_lr(std::int64_t step, std::int64_t total_steps, double lr_max,
                             double cut_frac, double ratio);

struct EpochStats {
    int epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_macro_f1 = 0.0;
};

struct RunReport {
    std::string primary;
    std::uint64_t seed = 0;
    std::vector<EpochStats> epochs;
    std::vector<double> step_losses;
    int selected_epoch = 0;  // argmax validation macro-F1, earliest on ties
    double test_macro_f1 = 0.0;
    double test_accuracy = 0.0;
    ConfusionMatrix test_confusion;
    LambdaAssignment lambdas;
    std::int64_t readout_fallbacks = 0;
    double wall_clock_seconds = 0.0;  // volatile; serialized separately
};

struct TrainTask {
    const DatasetSpec* primary = nullptr;
    std::vector<const DatasetSpec*> aux;
    const Vocabulary* vocab = nullptr;
    LambdaAssignment lambdas;
};

struct TrainResult {
    MtlModel<float> model;  // best-validation parameters
    RunReport report;
};

// One fully deterministic training run under (task, config, seed).
TrainResult train(const TrainTask& task, const TrainConfig& cfg, std::uint64_t seed);

// Macro-F1 / accuracy / confusion of a model over a list of instances.
struct EvalResult {
    double macro_f1 = 0.0;
    double accuracy = 0.0;
    ConfusionMatrix confusion;
    std::vector<int> predictions;
};
EvalResult evaluate_split(const MtlModel<float>& model, const std::string& dataset,
                          const std::vector<Instance>& instances, const Vocabulary& vocab,
                          const LabelSpace& labels, int batch_size);

struct ProtocolReport {
    std::vector<RunReport> runs;  // ascending seed order
    double mean_test_macro_f1 = 0.0;
    double std_test_macro_f1 = 0.0;  // population standard deviation
    double wall_clock_seconds = 0.0;
};

// Trains once per seed (seeds deduplicated and sorted, so the aggregate is
// invariant to the order they were given in) and aggregates test macro-F1.
ProtocolReport run_protocol(const TrainTask& task, const TrainConfig& cfg, int jobs = 1);

struct GridPoint {
    std::vector<double> values;  // aligned with aux_names
    double score = 0.0;          // mean validation macro-F1 over grid seeds
};

struct GridSearchReport {
    std::vector<std::string> aux_names;  // sorted
    std::vector<double> grid;
    std::vector<GridPoint> points;  // lexicographic order of the value vector
    LambdaAssignment best;
    std::int64_t runs_executed = 0;
    double wall_clock_seconds = 0.0;
};

inline std::vector<double> default_lambda_grid() {
    return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
}

// Exhaustive search over the Cartesian product of grid values, one axis per
// auxiliary dataset. Scores each point by mean validation macro-F1 over
// grid_seeds; ties resolve to the lexicographically smaller lambda vector.
GridSearchReport grid_search_lambda(const TrainTask& task_without_lambdas,
                                    const std::vector<double>& grid, const TrainConfig& cfg,
                                    const std::vector<std::uint64_t>& grid_seeds, int jobs = 1);

}  // namespace citemtl
