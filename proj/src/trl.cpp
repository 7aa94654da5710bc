#include "citemtl/trl.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

#include "citemtl/batching.hpp"

namespace citemtl {

namespace {

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

}  // namespace

ContingencyTable ContingencyTable::from_counts(LabelSpace primary, LabelSpace aux,
                                               std::vector<std::vector<std::int64_t>> counts) {
    ContingencyTable t;
    if (counts.size() != static_cast<std::size_t>(aux.size())) {
        throw std::invalid_argument("contingency table: " + std::to_string(counts.size()) +
                                    " rows for " + std::to_string(aux.size()) +
                                    " auxiliary labels");
    }
    t.total = 0;
    for (const auto& row : counts) {
        if (row.size() != static_cast<std::size_t>(primary.size())) {
            throw std::invalid_argument("contingency table: row width mismatch");
        }
        for (auto c : row) {
            if (c < 0) throw std::invalid_argument("contingency table: negative count");
            t.total += c;
        }
    }
    t.primary_space = std::move(primary);
    t.aux_space = std::move(aux);
    t.counts = std::move(counts);
    return t;
}

double entropy(const std::vector<double>& dist) {
    const std::size_t k = dist.size();
    if (k < 2) {
        throw std::domain_error("entropy: label space of size " + std::to_string(k) +
                                " is degenerate");
    }
    double sum = 0.0;
    for (double p : dist) {
        if (p < 0.0) throw std::invalid_argument("entropy: negative probability");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        throw std::invalid_argument("entropy: probabilities sum to " + std::to_string(sum));
    }
    // An exactly uniform distribution has entropy exactly 1 in base k; the
    // direct formula would land within a few ulps but not exactly.
    bool uniform = true;
    for (double p : dist) {
        if (p != dist[0]) {
            uniform = false;
            break;
        }
    }
    if (uniform) return 1.0;

    const double log_k = std::log(static_cast<double>(k));
    double h = 0.0;
    for (double p : dist) {
        if (p > 0.0) h -= p * (std::log(p) / log_k);
    }
    return h < 0.0 ? 0.0 : h;
}

InformationGain information_gain(const ContingencyTable& table) {
    if (table.total < 1) throw std::invalid_argument("information gain: empty table");
    InformationGain r;
    const int n_primary = table.primary_space.size();
    const int n_aux = table.aux_space.size();
    if (n_primary < 2) {
        r.degenerate_primary = true;
        r.conditional_entropies.assign(static_cast<std::size_t>(n_aux), 0.0);
        r.row_probabilities.assign(static_cast<std::size_t>(n_aux), 0.0);
        return r;
    }
    const double n_total = static_cast<double>(table.total);

    // Marginal gold distribution.
    std::vector<double> marginal(static_cast<std::size_t>(n_primary), 0.0);
    for (int j = 0; j < n_aux; ++j) {
        for (int i = 0; i < n_primary; ++i) {
            marginal[static_cast<std::size_t>(i)] +=
                static_cast<double>(table.counts[static_cast<std::size_t>(j)]
                                                [static_cast<std::size_t>(i)]);
        }
    }
    for (double& p : marginal) p /= n_total;
    r.entr_primary = entropy(marginal);

    double expected_conditional = 0.0;
    for (int j = 0; j < n_aux; ++j) {
        const auto& row = table.counts[static_cast<std::size_t>(j)];
        std::int64_t row_total = 0;
        for (auto c : row) row_total += c;
        const double pj = static_cast<double>(row_total) / n_total;
        r.row_probabilities.push_back(pj);
        if (row_total == 0) {
            // empty rows contribute nothing
            r.conditional_entropies.push_back(0.0);
            continue;
        }
        std::vector<double> cond(static_cast<std::size_t>(n_primary));
        for (int i = 0; i < n_primary; ++i) {
            cond[static_cast<std::size_t>(i)] =
                static_cast<double>(row[static_cast<std::size_t>(i)]) /
                static_cast<double>(row_total);
        }
        const double h = entropy(cond);
        r.conditional_entropies.push_back(h);
        expected_conditional += pj * h;
    }

    r.ig = r.entr_primary - expected_conditional;
    // Floating-point slack only; the quantity is mathematically in
    // [0, entr_primary].
    if (r.ig < 0.0) r.ig = 0.0;
    if (r.ig > r.entr_primary) r.ig = r.entr_primary;
    return r;
}

double compute_lambda(double entr_primary, double ig) {
    if (entr_primary < 0.0 || ig < 0.0) {
        throw std::invalid_argument("compute_lambda: negative entropy or information gain");
    }
    if (entr_primary == 0.0) return 0.0;  // degenerate primary, caller warns
    const double lambda = ig / entr_primary;
    return lambda < 0.0 ? 0.0 : (lambda > 1.0 ? 1.0 : lambda);
}

TrlReport run_trl(const DatasetSpec& aux, const DatasetSpec& primary, const Vocabulary& vocab,
                  const TrainConfig& cfg, std::uint64_t seed) {
    if (primary.train.empty()) throw std::invalid_argument("trl: empty primary train split");
    const double t_start = now_seconds();

    TrlReport report;
    report.primary = primary.name;
    report.aux = aux.name;

    // Single-task run on the auxiliary dataset under the main protocol.
    TrainTask aux_task;
    aux_task.primary = &aux;
    aux_task.vocab = &vocab;
    TrainResult aux_run = train(aux_task, cfg, seed);
    report.aux_training = std::move(aux_run.report);

    // Argmax-predict every primary TRAIN instance into the auxiliary space.
    const auto pool =
        tokenize_split(primary.train, vocab, primary.label_space, cfg.encoder.max_len);
    std::vector<std::vector<std::int64_t>> counts(
        static_cast<std::size_t>(aux.label_space.size()),
        std::vector<std::int64_t>(static_cast<std::size_t>(primary.label_space.size()), 0));
    std::size_t i = 0;
    while (i < pool.size()) {
        const std::size_t take =
            std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), pool.size() - i);
        std::vector<std::size_t> idx(take);
        for (std::size_t j = 0; j < take; ++j) idx[j] = i + j;
        const Batch batch = assemble_batch(pool, idx);
        const std::vector<int> preds = predict(aux_run.model, aux.name, batch);
        for (std::size_t j = 0; j < take; ++j) {
            ++counts[static_cast<std::size_t>(preds[j])]
                    [static_cast<std::size_t>(pool[i + j].target)];
        }
        i += take;
    }

    report.table =
        ContingencyTable::from_counts(primary.label_space, aux.label_space, std::move(counts));
    report.gain = information_gain(report.table);
    report.degenerate_primary = report.gain.degenerate_primary;
    report.lambda =
        report.degenerate_primary ? 0.0 : compute_lambda(report.gain.entr_primary, report.gain.ig);
    report.wall_clock_seconds = now_seconds() - t_start;
    return report;
}

}  // namespace citemtl
