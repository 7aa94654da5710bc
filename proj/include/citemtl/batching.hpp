#pragma once

// Tokenized instances and minibatch assembly shared by the trainer, TRL and
// the CLI. Instances are tokenized once per run; batches trim the shared
// padding down to the longest real sequence in the batch.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "citemtl/model.hpp"
#include "citemtl/text.hpp"

namespace citemtl {

struct TokenizedInstance {
    Encoded enc;
    int real_len = 0;  // CLS + kept tokens
    int target = -1;
};

inline std::vector<TokenizedInstance> tokenize_split(const std::vector<Instance>& instances,
                                                     const Vocabulary& vocab,
                                                     const LabelSpace& labels, int max_len) {
    std::vector<TokenizedInstance> out;
    out.reserve(instances.size());
    for (const auto& inst : instances) {
        TokenizedInstance ti;
        ti.enc = tokenize(inst.text, vocab, max_len);
        int len = 0;
        for (auto m : ti.enc.mask) len += m ? 1 : 0;
        ti.real_len = len;
        ti.target = labels.index_of(inst.label);
        out.push_back(std::move(ti));
    }
    return out;
}

inline Batch assemble_batch(const std::vector<TokenizedInstance>& pool,
                            const std::vector<std::size_t>& indices) {
    Batch b;
    b.size = static_cast<std::int64_t>(indices.size());
    int max_real = 1;
    for (auto i : indices) max_real = std::max(max_real, pool[i].real_len);
    b.seq_len = max_real;
    b.token_ids.reserve(indices.size() * static_cast<std::size_t>(max_real));
    b.mask.reserve(indices.size() * static_cast<std::size_t>(max_real));
    for (auto i : indices) {
        const auto& ti = pool[i];
        b.token_ids.insert(b.token_ids.end(), ti.enc.ids.begin(), ti.enc.ids.begin() + max_real);
        b.mask.insert(b.mask.end(), ti.enc.mask.begin(), ti.enc.mask.begin() + max_real);
        b.marker_positions.push_back(ti.enc.marker_positions);
        b.targets.push_back(ti.target);
    }
    return b;
}

}  // namespace citemtl
