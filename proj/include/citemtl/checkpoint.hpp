#pragma once

// Versioned JSON checkpoints. A checkpoint is self-describing: encoder config,
// readout mode, vocabulary, per-dataset heads keyed by name with their label
// spaces, the lambda assignment the run used, and every parameter tensor.
// Field order is fixed (see README) so checkpoints are portable.

#include <filesystem>
#include <string>

#include "citemtl/model.hpp"
#include "citemtl/text.hpp"

namespace citemtl {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
    MtlModel<float> model;
    Vocabulary vocab;
    LambdaAssignment lambdas;
};

void save_checkpoint(const std::filesystem::path& path, const MtlModel<float>& model,
                     const Vocabulary& vocab, const LambdaAssignment& lambdas);

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace citemtl
