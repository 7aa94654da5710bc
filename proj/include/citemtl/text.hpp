#pragma once

// Dataset loading, vocabulary construction and tokenization.
//
// Datasets are JSONL files of {id, text, label} records. Citation positions
// are marked inline with the literal string "<CITED HERE>"; the marker
// replaces the citation anchor and becomes a single reserved token id.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace citemtl {

inline constexpr const char* kCitedHereMarker = "<CITED HERE>";

struct Instance {
    std::string id;
    std::string text;
    std::string label;
};

struct LabelSpace {
    std::string name;
    std::vector<std::string> labels;

    int size() const { return static_cast<int>(labels.size()); }
    // Index of a label; throws if the label is not in the space.
    int index_of(const std::string& label) const;
};

struct DatasetSpec {
    std::string name;
    LabelSpace label_space;
    std::vector<Instance> train;
    std::vector<Instance> validation;
    std::vector<Instance> test;

    // Load statistics: instances whose text carries more than one marker are
    // supported (marker embeddings are averaged) but flagged here.
    std::int64_t multi_marker_count = 0;
    std::int64_t no_marker_count = 0;
};

struct Vocabulary {
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kCls = 2;
    static constexpr int kCitedHere = 3;
    static constexpr int kNumReserved = 4;

    // Non-reserved tokens in id order; token i has id kNumReserved + i.
    std::vector<std::string> tokens;
    std::unordered_map<std::string, int> ids;
    int min_freq = 2;

    int size() const { return kNumReserved + static_cast<int>(tokens.size()); }
    int lookup(const std::string& token) const {
        auto it = ids.find(token);
        return it == ids.end() ? kUnk : it->second;
    }
    static Vocabulary from_tokens(std::vector<std::string> tokens, int min_freq);
};

struct Encoded {
    std::vector<int> ids;                // length max_len, CLS first, PAD tail
    std::vector<std::uint8_t> mask;      // 1 = real token
    std::vector<int> marker_positions;   // positions of CITED_HERE ids
};

// Lowercased whitespace tokens; each literal "<CITED HERE>" occurrence is one
// token (the marker string itself, matched before splitting).
std::vector<std::string> word_tokens(const std::string& text);

std::int64_t count_markers(const std::string& text);

// CLS-prefixed, padded id sequence. When the text overflows max_len the kept
// window is centered on the first marker so at least one marker survives
// truncation; texts without a marker keep their prefix.
Encoded tokenize(const std::string& text, const Vocabulary& vocab, int max_len);

// Shared vocabulary over the train splits of every dataset (the encoder is
// shared, so the vocabulary is too). Tokens with frequency >= min_freq are
// kept, ordered by descending frequency then lexicographically.
Vocabulary build_vocab(const std::vector<const std::vector<Instance>*>& train_splits,
                       int min_freq);

std::vector<Instance> load_jsonl(const std::filesystem::path& path);

struct SplitResult {
    std::vector<Instance> train;
    std::vector<Instance> validation;
    std::vector<Instance> test;
};

// Deterministic shuffle + partition. Validation and test sizes are floored;
// the remainder goes to train.
SplitResult split_instances(const std::vector<Instance>& instances,
                            const std::array<double, 3>& ratios, std::uint64_t seed);

LabelSpace load_label_space(const std::filesystem::path& path);

struct SplitOptions {
    std::array<double, 3> ratios{0.70, 0.15, 0.15};  // single-file datasets
    double val_fraction = 0.15;  // carved from train when no validation file
    std::uint64_t seed = 13;
};

// Loads a dataset from either
//   - a directory holding labels.json + train.jsonl [validation.jsonl] [test.jsonl], or
//   - a single foo.jsonl with a sibling foo.labels.json (split by ratios).
// A directory without validation.jsonl gets val_fraction carved out of train.
DatasetSpec load_dataset(const std::filesystem::path& path, const SplitOptions& opts = {});

}  // namespace citemtl
