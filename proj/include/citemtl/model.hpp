#pragma once

// Multi-task model: one shared encoder, one MLP head per dataset.
// The joint training loss is the primary dataset's mean cross entropy plus
// the lambda-weighted mean cross entropy of each auxiliary dataset; gradients
// from every term reach the encoder, while each head only learns from its own
// dataset.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "citemtl/encoder.hpp"
#include "citemtl/readout.hpp"
#include "citemtl/rng.hpp"
#include "citemtl/tensor.hpp"

namespace citemtl {

// Stable string hash (FNV-1a) for deriving per-dataset RNG streams.
inline std::uint64_t string_seed(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

struct LambdaEntry {
    double value = 0.0;
    std::string source;  // "trl" | "grid_search" | "manual"
};

// Auxiliary dataset name -> weight in [0, 1]. The primary dataset never
// appears here; its weight is implicitly 1.
using LambdaAssignment = std::map<std::string, LambdaEntry>;

inline void validate_lambdas(const LambdaAssignment& lambdas, const std::string& primary) {
    for (const auto& [name, entry] : lambdas) {
        if (name == primary) {
            throw std::invalid_argument("lambda assignment must not include the primary dataset '" +
                                        primary + "'");
        }
        if (entry.value < 0.0 || entry.value > 1.0) {
            throw std::invalid_argument("lambda for '" + name + "' is " +
                                        std::to_string(entry.value) + ", outside [0, 1]");
        }
    }
}

template <typename T>
struct TaskHead {
    std::string dataset;
    std::vector<std::string> labels;  // ordered; defines the logit layout
    Tensor<T> w1, b1, w2, b2;         // d_model -> hidden -> n_labels, GELU hidden

    int n_labels() const { return static_cast<int>(labels.size()); }

    std::vector<std::pair<std::string, Tensor<T>>> named() const {
        return {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}};
    }
};

inline constexpr int kHeadHiddenDefault = 64;

template <typename T>
TaskHead<T> init_head(const std::string& dataset, int d_model, int hidden,
                      std::vector<std::string> labels, Rng& rng) {
    if (labels.empty()) throw std::invalid_argument("head '" + dataset + "': no labels");
    const int n_labels = static_cast<int>(labels.size());
    TaskHead<T> h;
    h.dataset = dataset;
    h.labels = std::move(labels);
    h.w1 = Tensor<T>::trunc_normal({d_model, hidden}, rng, 0.02).set_requires_grad(true);
    h.b1 = Tensor<T>::zeros({hidden}).set_requires_grad(true);
    h.w2 = Tensor<T>::trunc_normal({hidden, n_labels}, rng, 0.02).set_requires_grad(true);
    h.b2 = Tensor<T>::zeros({n_labels}).set_requires_grad(true);
    return h;
}

// One logical thread owns and mutates a model; frozen copies are safe to read
// from anywhere.
template <typename T>
struct MtlModel {
    EncoderParams<T> encoder;
    ReadoutMode readout_mode = ReadoutMode::kCitedHere;
    std::map<std::string, TaskHead<T>> heads;  // ordered -> deterministic params

    const TaskHead<T>& head(const std::string& dataset) const {
        auto it = heads.find(dataset);
        if (it == heads.end()) {
            throw std::invalid_argument("model has no head for dataset '" + dataset + "'");
        }
        return it->second;
    }

    std::vector<Tensor<T>> trainable() const {
        std::vector<Tensor<T>> out = encoder.all();
        for (const auto& [name, h] : heads) {
            for (auto& [pname, t] : h.named()) out.push_back(t);
        }
        return out;
    }
};

// Each head gets its own init stream derived from its dataset name, so adding
// an auxiliary dataset never perturbs the other heads' initial weights.
template <typename T>
MtlModel<T> build_model(const EncoderConfig& cfg, ReadoutMode mode,
                        const std::map<std::string, std::vector<std::string>>& dataset_labels,
                        int head_hidden = kHeadHiddenDefault) {
    MtlModel<T> m;
    m.encoder = init_params<T>(cfg);
    m.readout_mode = mode;
    for (const auto& [name, labels] : dataset_labels) {
        Rng rng(derive_seed(cfg.seed, 0x6ea0ULL, string_seed(name)));
        m.heads.emplace(name, init_head<T>(name, cfg.d_model, head_hidden, labels, rng));
    }
    return m;
}

// A tokenized minibatch.
struct Batch {
    std::int64_t size = 0;
    std::int64_t seq_len = 0;
    std::vector<int> token_ids;                     // [B, L] row-major
    std::vector<std::uint8_t> mask;                 // [B, L]
    std::vector<std::vector<int>> marker_positions; // per example
    std::vector<int> targets;                       // gold label indices
};

template <typename T>
Tensor<T> head_logits(const TaskHead<T>& head, const Tensor<T>& context) {
    return add_bias(matmul(gelu(add_bias(matmul(context, head.w1), head.b1)), head.w2), head.b2);
}

// encode -> readout -> the dataset's own head.
template <typename T>
Tensor<T> model_forward(const MtlModel<T>& model, const std::string& dataset, const Batch& batch,
                        const EncodeContext& ctx, std::int64_t* readout_fallbacks = nullptr) {
    const TaskHead<T>& h = model.head(dataset);
    Tensor<T> emb =
        encode(model.encoder, batch.token_ids, batch.mask, batch.size, batch.seq_len, ctx);
    Tensor<T> context =
        readout(emb, batch.mask, batch.marker_positions, model.readout_mode, readout_fallbacks);
    return head_logits(h, context);
}

// Argmax predictions, no graph. Ties break to the lowest label index.
template <typename T>
std::vector<int> predict(const MtlModel<T>& model, const std::string& dataset,
                         const Batch& batch) {
    NoGradGuard ng;
    EncodeContext ctx;  // eval mode
    Tensor<T> logits = model_forward(model, dataset, batch, ctx);
    const std::int64_t k = logits.shape()[1];
    std::vector<int> out(static_cast<std::size_t>(batch.size));
    for (std::int64_t i = 0; i < batch.size; ++i) {
        const T* row = logits.data().data() + i * k;
        int best = 0;
        for (std::int64_t j = 1; j < k; ++j)
            if (row[j] > row[best]) best = static_cast<int>(j);
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

// Joint weighted loss over one batch per dataset. step_seed drives the
// per-dataset dropout streams; the primary's stream is independent of which
// auxiliaries are present, so an empty/zero lambda map reproduces single-task
// training exactly.
template <typename T>
Tensor<T> mtl_loss(const MtlModel<T>& model, const std::string& primary_name,
                   const Batch& primary_batch,
                   const std::map<std::string, const Batch*>& aux_batches,
                   const LambdaAssignment& lambdas, bool train, std::uint64_t step_seed,
                   std::int64_t* readout_fallbacks = nullptr) {
    validate_lambdas(lambdas, primary_name);
    for (const auto& [name, batch] : aux_batches) {
        if (lambdas.find(name) == lambdas.end()) {
            throw std::invalid_argument("no lambda for auxiliary dataset '" + name + "'");
        }
        if (batch == nullptr || batch->size == 0) {
            throw std::invalid_argument("empty batch for auxiliary dataset '" + name + "'");
        }
    }
    if (primary_batch.size == 0) throw std::invalid_argument("empty primary batch");

    const auto forward_ce = [&](const std::string& name, const Batch& batch) {
        Rng rng(derive_seed(step_seed, 0xd409ULL, string_seed(name)));
        EncodeContext ctx{train, &rng};
        Tensor<T> logits = model_forward(model, name, batch, ctx, readout_fallbacks);
        return cross_entropy(logits, batch.targets);
    };

    Tensor<T> loss = forward_ce(primary_name, primary_batch);
    for (const auto& [name, batch] : aux_batches) {
        const double lam = lambdas.at(name).value;
        loss = add(loss, scale(forward_ce(name, *batch), static_cast<T>(lam)));
    }
    return loss;
}

}  // namespace citemtl
