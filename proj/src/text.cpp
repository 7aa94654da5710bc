#include "citemtl/text.hpp"

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#include "citemtl/rng.hpp"
#include "json.hpp"

namespace citemtl {

namespace {

std::string lowercase(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

void append_whitespace_tokens(const std::string& segment, std::vector<std::string>& out) {
    std::size_t i = 0;
    const std::size_t n = segment.size();
    while (i < n) {
        while (i < n && std::isspace(static_cast<unsigned char>(segment[i]))) ++i;
        std::size_t start = i;
        while (i < n && !std::isspace(static_cast<unsigned char>(segment[i]))) ++i;
        if (i > start) out.push_back(lowercase(segment.substr(start, i - start)));
    }
}

}  // namespace

int LabelSpace::index_of(const std::string& label) const {
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == label) return static_cast<int>(i);
    throw std::out_of_range("label space '" + name + "' has no label '" + label + "'");
}

std::vector<std::string> word_tokens(const std::string& text) {
    std::vector<std::string> out;
    const std::size_t marker_len = std::strlen(kCitedHereMarker);
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t m = text.find(kCitedHereMarker, pos);
        const std::size_t seg_end = (m == std::string::npos) ? text.size() : m;
        append_whitespace_tokens(text.substr(pos, seg_end - pos), out);
        if (m == std::string::npos) break;
        out.emplace_back(kCitedHereMarker);
        pos = m + marker_len;
    }
    return out;
}

std::int64_t count_markers(const std::string& text) {
    std::int64_t n = 0;
    const std::size_t marker_len = std::strlen(kCitedHereMarker);
    std::size_t pos = 0;
    while ((pos = text.find(kCitedHereMarker, pos)) != std::string::npos) {
        ++n;
        pos += marker_len;
    }
    return n;
}

Encoded tokenize(const std::string& text, const Vocabulary& vocab, int max_len) {
    if (max_len < 3) {
        throw std::invalid_argument("tokenize: max_len must be >= 3, got " +
                                    std::to_string(max_len));
    }
    const std::vector<std::string> toks = word_tokens(text);
    std::vector<int> ids;
    ids.reserve(toks.size());
    int first_marker = -1;
    for (const auto& t : toks) {
        if (t == kCitedHereMarker) {
            if (first_marker < 0) first_marker = static_cast<int>(ids.size());
            ids.push_back(Vocabulary::kCitedHere);
        } else {
            ids.push_back(vocab.lookup(t));
        }
    }

    const int window = max_len - 1;  // room after the CLS slot
    int start = 0;
    int count = static_cast<int>(ids.size());
    if (count > window) {
        if (first_marker >= 0) {
            // Center the kept window on the first marker; clamping keeps the
            // marker inside for any window >= 1.
            start = std::clamp(first_marker - window / 2, 0, count - window);
        }
        count = window;
    }

    Encoded e;
    e.ids.assign(static_cast<std::size_t>(max_len), Vocabulary::kPad);
    e.mask.assign(static_cast<std::size_t>(max_len), 0);
    e.ids[0] = Vocabulary::kCls;
    e.mask[0] = 1;
    for (int i = 0; i < count; ++i) {
        const int id = ids[static_cast<std::size_t>(start + i)];
        e.ids[static_cast<std::size_t>(1 + i)] = id;
        e.mask[static_cast<std::size_t>(1 + i)] = 1;
        if (id == Vocabulary::kCitedHere) e.marker_positions.push_back(1 + i);
    }
    return e;
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens, int min_freq) {
    Vocabulary v;
    v.min_freq = min_freq;
    v.tokens = std::move(tokens);
    v.ids.reserve(v.tokens.size());
    for (std::size_t i = 0; i < v.tokens.size(); ++i) {
        auto [it, inserted] = v.ids.emplace(v.tokens[i], kNumReserved + static_cast<int>(i));
        if (!inserted) {
            throw std::invalid_argument("vocabulary: duplicate token '" + v.tokens[i] + "'");
        }
    }
    return v;
}

Vocabulary build_vocab(const std::vector<const std::vector<Instance>*>& train_splits,
                       int min_freq) {
    if (min_freq < 1) throw std::invalid_argument("build_vocab: min_freq must be >= 1");
    std::size_t n_instances = 0;
    std::unordered_map<std::string, std::int64_t> freq;
    for (const auto* split : train_splits) {
        n_instances += split->size();
        for (const auto& inst : *split) {
            for (const auto& tok : word_tokens(inst.text)) {
                if (tok == kCitedHereMarker) continue;  // reserved id
                ++freq[tok];
            }
        }
    }
    if (n_instances == 0) throw std::invalid_argument("build_vocab: empty corpus");

    std::vector<std::pair<std::string, std::int64_t>> kept;
    kept.reserve(freq.size());
    for (auto& [tok, f] : freq)
        if (f >= min_freq) kept.emplace_back(tok, f);
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<std::string> tokens;
    tokens.reserve(kept.size());
    for (auto& [tok, f] : kept) tokens.push_back(std::move(tok));
    return Vocabulary::from_tokens(std::move(tokens), min_freq);
}

std::vector<Instance> load_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset file: " + path.string());
    std::vector<Instance> out;
    std::set<std::string> seen_ids;
    std::string line;
    std::int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                     ": malformed JSON: " + e.what());
        }
        const auto field = [&](const char* name) -> std::string {
            if (!j.contains(name) || !j[name].is_string()) {
                throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                         ": missing or non-string field \"" + name + "\"");
            }
            return j[name].get<std::string>();
        };
        Instance inst{field("id"), field("text"), field("label")};
        if (inst.text.empty()) {
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                     ": empty text");
        }
        if (!seen_ids.insert(inst.id).second) {
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                     ": duplicate id \"" + inst.id + "\"");
        }
        out.push_back(std::move(inst));
    }
    return out;
}

SplitResult split_instances(const std::vector<Instance>& instances,
                            const std::array<double, 3>& ratios, std::uint64_t seed) {
    if (instances.empty()) throw std::invalid_argument("split: empty input");
    const double sum = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(sum - 1.0) > 1e-9) {
        throw std::invalid_argument("split: ratios sum to " + std::to_string(sum) +
                                    ", expected 1");
    }
    std::vector<std::size_t> order(instances.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed, 0x5eedULL));
    deterministic_shuffle(order, rng);

    const auto n = static_cast<std::int64_t>(instances.size());
    const auto n_val = static_cast<std::int64_t>(ratios[1] * static_cast<double>(n));
    const auto n_test = static_cast<std::int64_t>(ratios[2] * static_cast<double>(n));
    const auto n_train = n - n_val - n_test;

    SplitResult r;
    r.train.reserve(static_cast<std::size_t>(n_train));
    r.validation.reserve(static_cast<std::size_t>(n_val));
    r.test.reserve(static_cast<std::size_t>(n_test));
    for (std::int64_t i = 0; i < n; ++i) {
        const Instance& inst = instances[order[static_cast<std::size_t>(i)]];
        if (i < n_train)
            r.train.push_back(inst);
        else if (i < n_train + n_val)
            r.validation.push_back(inst);
        else
            r.test.push_back(inst);
    }
    return r;
}

LabelSpace load_label_space(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open label-space file: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error(path.string() + ": malformed JSON: " + e.what());
    }
    LabelSpace ls;
    if (!j.contains("name") || !j["name"].is_string() || !j.contains("labels") ||
        !j["labels"].is_array()) {
        throw std::runtime_error(path.string() + ": expected {\"name\": ..., \"labels\": [...]}");
    }
    ls.name = j["name"].get<std::string>();
    for (const auto& l : j["labels"]) ls.labels.push_back(l.get<std::string>());
    if (ls.labels.empty()) throw std::runtime_error(path.string() + ": empty label list");
    std::set<std::string> uniq(ls.labels.begin(), ls.labels.end());
    if (uniq.size() != ls.labels.size()) {
        throw std::runtime_error(path.string() + ": duplicate labels");
    }
    return ls;
}

namespace {

void validate_split(const DatasetSpec& ds, const std::vector<Instance>& split,
                    const char* split_name) {
    for (const auto& inst : split) {
        // Throws with a precise message when the label is unknown.
        try {
            ds.label_space.index_of(inst.label);
        } catch (const std::out_of_range&) {
            throw std::runtime_error("dataset '" + ds.name + "' " + split_name + " instance '" +
                                     inst.id + "' has label '" + inst.label +
                                     "' outside the label space");
        }
    }
}

void finalize_dataset(DatasetSpec& ds) {
    validate_split(ds, ds.train, "train");
    validate_split(ds, ds.validation, "validation");
    validate_split(ds, ds.test, "test");
    std::set<std::string> ids;
    for (const auto* split : {&ds.train, &ds.validation, &ds.test}) {
        for (const auto& inst : *split) {
            if (!ids.insert(inst.id).second) {
                throw std::runtime_error("dataset '" + ds.name + "': id '" + inst.id +
                                         "' appears in more than one split");
            }
            const std::int64_t markers = count_markers(inst.text);
            if (markers == 0) ++ds.no_marker_count;
            if (markers > 1) ++ds.multi_marker_count;
        }
    }
}

}  // namespace

DatasetSpec load_dataset(const std::filesystem::path& path, const SplitOptions& opts) {
    namespace fs = std::filesystem;
    DatasetSpec ds;
    if (fs::is_directory(path)) {
        ds.label_space = load_label_space(path / "labels.json");
        ds.name = ds.label_space.name;
        ds.train = load_jsonl(path / "train.jsonl");
        if (fs::exists(path / "validation.jsonl")) {
            ds.validation = load_jsonl(path / "validation.jsonl");
        } else {
            // No validation file: carve a fraction out of the train split.
            SplitResult r =
                split_instances(ds.train, {1.0 - opts.val_fraction, opts.val_fraction, 0.0},
                                opts.seed);
            ds.train = std::move(r.train);
            ds.validation = std::move(r.validation);
        }
        if (fs::exists(path / "test.jsonl")) ds.test = load_jsonl(path / "test.jsonl");
    } else {
        if (path.extension() != ".jsonl") {
            throw std::runtime_error("dataset path must be a directory or a .jsonl file: " +
                                     path.string());
        }
        fs::path labels = path;
        labels.replace_extension(".labels.json");
        ds.label_space = load_label_space(labels);
        ds.name = ds.label_space.name;
        SplitResult r = split_instances(load_jsonl(path), opts.ratios, opts.seed);
        ds.train = std::move(r.train);
        ds.validation = std::move(r.validation);
        ds.test = std::move(r.test);
    }
    finalize_dataset(ds);
    return ds;
}

}  // namespace citemtl
