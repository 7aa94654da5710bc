#pragma once

// Classification metrics. Macro-F1 is the headline metric everywhere; the
// confusion matrix feeds reports.

#include <cstdint>
#include <string>
#include <vector>

namespace citemtl {

struct ConfusionMatrix {
    std::vector<std::string> labels;
    // counts[gold][pred]
    std::vector<std::vector<std::int64_t>> counts;
    std::int64_t total = 0;
};

ConfusionMatrix confusion_matrix(const std::vector<int>& golds, const std::vector<int>& preds,
                                 const std::vector<std::string>& labels);

// Unweighted mean of per-class F1 over the whole label space. A class with
// zero support in both golds and preds scores F1 = 0, as does any class whose
// precision + recall is zero.
double macro_f1(const std::vector<int>& golds, const std::vector<int>& preds, int n_classes);

double accuracy(const std::vector<int>& golds, const std::vector<int>& preds);

}  // namespace citemtl
