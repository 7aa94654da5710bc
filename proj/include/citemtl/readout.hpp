#pragma once

// Readout: aggregate per-token embeddings into one context vector.
// CLS takes position 0, MEAN averages non-pad positions, CITED_HERE averages
// the marker tokens' embeddings. An example with no marker under CITED_HERE
// falls back to MEAN and is counted, never silently dropped.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "citemtl/tensor.hpp"

namespace citemtl {

enum class ReadoutMode { kCls, kMean, kCitedHere };

inline const char* readout_name(ReadoutMode m) {
    switch (m) {
        case ReadoutMode::kCls: return "cls";
        case ReadoutMode::kMean: return "mean";
        case ReadoutMode::kCitedHere: return "cited_here";
    }
    return "?";
}

inline ReadoutMode parse_readout(const std::string& s) {
    if (s == "cls") return ReadoutMode::kCls;
    if (s == "mean") return ReadoutMode::kMean;
    if (s == "cited_here") return ReadoutMode::kCitedHere;
    throw std::invalid_argument("unknown readout '" + s + "' (expected cls|mean|cited_here)");
}

// embeddings: [B, L, d]; mask: row-major [B, L]; marker_positions: per example.
// Returns [B, d]. All three modes are one weighted pooling with per-example
// weights, so gradients distribute as the weights do (1/m per marker, 1/n_real
// per non-pad position, 1 at position 0).
template <typename T>
Tensor<T> readout(const Tensor<T>& embeddings, const std::vector<std::uint8_t>& mask,
                  const std::vector<std::vector<int>>& marker_positions, ReadoutMode mode,
                  std::int64_t* fallback_count = nullptr) {
    if (embeddings.shape().size() != 3) {
        throw std::invalid_argument("readout: embeddings must be [B, L, d], got " +
                                    shape_str(embeddings.shape()));
    }
    const std::int64_t b = embeddings.shape()[0], l = embeddings.shape()[1],
                       d = embeddings.shape()[2];
    if (static_cast<std::int64_t>(mask.size()) != b * l) {
        throw std::invalid_argument("readout: mask does not cover the batch");
    }

    // Pooling weights, row-major [B, L].
    std::vector<T> weights(static_cast<std::size_t>(b * l), T(0));
    for (std::int64_t bi = 0; bi < b; ++bi) {
        const std::uint8_t* mrow = mask.data() + bi * l;
        T* wrow = weights.data() + bi * l;
        const auto mean_weights = [&]() {
            std::int64_t n_real = 0;
            for (std::int64_t i = 0; i < l; ++i) n_real += mrow[i] ? 1 : 0;
            if (n_real == 0) {
                throw std::invalid_argument("readout: example " + std::to_string(bi) +
                                            " is fully padded");
            }
            const T w = T(1) / static_cast<T>(n_real);
            for (std::int64_t i = 0; i < l; ++i)
                if (mrow[i]) wrow[i] = w;
        };
        switch (mode) {
            case ReadoutMode::kCls:
                if (!mrow[0]) {
                    throw std::invalid_argument("readout: CLS position missing in example " +
                                                std::to_string(bi));
                }
                wrow[0] = T(1);
                break;
            case ReadoutMode::kMean:
                mean_weights();
                break;
            case ReadoutMode::kCitedHere: {
                if (static_cast<std::int64_t>(marker_positions.size()) != b) {
                    throw std::invalid_argument(
                        "readout: marker positions do not cover the batch");
                }
                const auto& pos = marker_positions[static_cast<std::size_t>(bi)];
                if (pos.empty()) {
                    // Zero-marker fallback policy: MEAN for this example.
                    if (fallback_count) ++*fallback_count;
                    mean_weights();
                    break;
                }
                const T w = T(1) / static_cast<T>(pos.size());
                for (int p : pos) {
                    if (p < 0 || p >= l || !mrow[p]) {
                        throw std::invalid_argument("readout: marker position " +
                                                    std::to_string(p) +
                                                    " invalid in example " + std::to_string(bi));
                    }
                    wrow[p] += w;
                }
                break;
            }
        }
    }

    std::vector<T> out(static_cast<std::size_t>(b * d), T(0));
    const T* pe = embeddings.data().data();
    for (std::int64_t bi = 0; bi < b; ++bi) {
        const T* wrow = weights.data() + bi * l;
        T* orow = out.data() + bi * d;
        for (std::int64_t i = 0; i < l; ++i) {
            const T w = wrow[i];
            if (w == T(0)) continue;
            const T* erow = pe + (bi * l + i) * d;
            for (std::int64_t j = 0; j < d; ++j) orow[j] += w * erow[j];
        }
    }
    return detail::make_result<T>(
        {b, d}, std::move(out), {embeddings},
        [embeddings, weights = std::move(weights), b, l, d](TensorNode<T>* out_node) {
            return [embeddings, weights, b, l, d, out_node]() {
                auto en = embeddings.node();
                if (!en->needs_grad()) return;
                const T* g = out_node->grad.data();
                T* ge = en->ensure_grad().data();
                for (std::int64_t bi = 0; bi < b; ++bi) {
                    const T* grow = g + bi * d;
                    const T* wrow = weights.data() + bi * l;
                    for (std::int64_t i = 0; i < l; ++i) {
                        const T w = wrow[i];
                        if (w == T(0)) continue;
                        T* erow = ge + (bi * l + i) * d;
                        for (std::int64_t j = 0; j < d; ++j) erow[j] += w * grow[j];
                    }
                }
            };
        });
}

}  // namespace citemtl
