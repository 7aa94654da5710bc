#include "citemtl/metrics.hpp"

#include <stdexcept>

namespace citemtl {

namespace {

void check_inputs(const std::vector<int>& golds, const std::vector<int>& preds, int n_classes) {
    if (golds.empty()) throw std::invalid_argument("metrics: empty input");
    if (golds.size() != preds.size()) {
        throw std::invalid_argument("metrics: " + std::to_string(golds.size()) + " golds vs " +
                                    std::to_string(preds.size()) + " predictions");
    }
    for (std::size_t i = 0; i < golds.size(); ++i) {
        if (golds[i] < 0 || golds[i] >= n_classes || preds[i] < 0 || preds[i] >= n_classes) {
            throw std::out_of_range("metrics: label index outside [0, " +
                                    std::to_string(n_classes) + ") at position " +
                                    std::to_string(i));
        }
    }
}

}  // namespace

ConfusionMatrix confusion_matrix(const std::vector<int>& golds, const std::vector<int>& preds,
                                 const std::vector<std::string>& labels) {
    const int k = static_cast<int>(labels.size());
    check_inputs(golds, preds, k);
    ConfusionMatrix cm;
    cm.labels = labels;
    cm.counts.assign(labels.size(), std::vector<std::int64_t>(labels.size(), 0));
    for (std::size_t i = 0; i < golds.size(); ++i) {
        ++cm.counts[static_cast<std::size_t>(golds[i])][static_cast<std::size_t>(preds[i])];
    }
    cm.total = static_cast<std::int64_t>(golds.size());
    return cm;
}

double macro_f1(const std::vector<int>& golds, const std::vector<int>& preds, int n_classes) {
    check_inputs(golds, preds, n_classes);
    std::vector<std::int64_t> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
    for (std::size_t i = 0; i < golds.size(); ++i) {
        if (golds[i] == preds[i]) {
            ++tp[golds[i]];
        } else {
            ++fn[golds[i]];
            ++fp[preds[i]];
        }
    }
    double sum = 0.0;
    for (int c = 0; c < n_classes; ++c) {
        const double p_den = static_cast<double>(tp[c] + fp[c]);
        const double r_den = static_cast<double>(tp[c] + fn[c]);
        const double precision = p_den > 0 ? static_cast<double>(tp[c]) / p_den : 0.0;
        const double recall = r_den > 0 ? static_cast<double>(tp[c]) / r_den : 0.0;
        const double f1 =
            (precision + recall) > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
        sum += f1;
    }
    return sum / static_cast<double>(n_classes);
}

double accuracy(const std::vector<int>& golds, const std::vector<int>& preds) {
    if (golds.empty()) throw std::invalid_argument("metrics: empty input");
    if (golds.size() != preds.size()) {
        throw std::invalid_argument("metrics: size mismatch");
    }
    std::int64_t hit = 0;
    for (std::size_t i = 0; i < golds.size(); ++i)
        if (golds[i] == preds[i]) ++hit;
    return static_cast<double>(hit) / static_cast<double>(golds.size());
}

}  // namespace citemtl
