#include "citemtl/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <set>
#include <stdexcept>
#include <thread>

#include "citemtl/batching.hpp"
#include "citemtl/rng.hpp"

namespace citemtl {

namespace {

constexpr std::uint64_t kShuffleTag = 0x5f1eULL;
constexpr std::uint64_t kStepTag = 0x57e9ULL;

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

// Shuffled index stream over a dataset that reshuffles whenever exhausted;
// auxiliary datasets cycle through it independently of the primary epoch.
class CyclingSampler {
public:
    CyclingSampler(std::size_t n, std::uint64_t stream_seed) : n_(n), rng_(stream_seed) {
        refill();
    }

    std::vector<std::size_t> next(std::size_t count) {
        std::vector<std::size_t> out;
        out.reserve(count);
        while (out.size() < count) {
            if (cursor_ == order_.size()) refill();
            out.push_back(order_[cursor_++]);
        }
        return out;
    }

private:
    void refill() {
        order_.resize(n_);
        for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
        deterministic_shuffle(order_, rng_);
        cursor_ = 0;
    }

    std::size_t n_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

struct ParamSnapshot {
    std::vector<std::vector<float>> values;
};

ParamSnapshot snapshot_params(const MtlModel<float>& model) {
    ParamSnapshot s;
    for (const auto& t : model.trainable()) s.values.push_back(t.data());
    return s;
}

void restore_params(MtlModel<float>& model, const ParamSnapshot& s) {
    auto params = model.trainable();
    if (params.size() != s.values.size()) {
        throw std::logic_error("checkpoint restore: parameter count mismatch");
    }
    for (std::size_t i = 0; i < params.size(); ++i) params[i].data() = s.values[i];
}

std::vector<int> predict_all(const MtlModel<float>& model, const std::string& dataset,
                             const std::vector<TokenizedInstance>& pool, int batch_size) {
    std::vector<int> preds;
    preds.reserve(pool.size());
    std::size_t i = 0;
    while (i < pool.size()) {
        const std::size_t take = std::min<std::size_t>(batch_size, pool.size() - i);
        std::vector<std::size_t> idx(take);
        for (std::size_t j = 0; j < take; ++j) idx[j] = i + j;
        const Batch batch = assemble_batch(pool, idx);
        const std::vector<int> p = predict(model, dataset, batch);
        preds.insert(preds.end(), p.begin(), p.end());
        i += take;
    }
    return preds;
}

}  // namespace

void TrainConfig::validate() const {
    if (batch_size <= 0 || epochs <= 0 || learning_rate <= 0.0 || grad_clip <= 0.0) {
        throw std::invalid_argument("train config: numeric fields must be positive");
    }
    if (!(cut_frac > 0.0 && cut_frac < 1.0) || !(ratio > 1.0)) {
        throw std::invalid_argument("train config: need cut_frac in (0,1) and ratio > 1");
    }
    if (seeds.empty()) throw std::invalid_argument("train config: no seeds");
}

double slanted_triangular_lr(std::int64_t step, std::int64_t total_steps, double lr_max,
                             double cut_frac, double ratio) {
    if (total_steps <= 0) throw std::invalid_argument("lr schedule: total_steps must be > 0");
    if (step < 0 || step > total_steps) {
        throw std::invalid_argument("lr schedule: step " + std::to_string(step) +
                                    " outside [0, " + std::to_string(total_steps) + "]");
    }
    if (!(cut_frac > 0.0 && cut_frac < 1.0) || !(ratio > 1.0)) {
        throw std::invalid_argument("lr schedule: need cut_frac in (0,1) and ratio > 1");
    }
    const auto cut = std::max<std::int64_t>(
        1, static_cast<std::int64_t>(cut_frac * static_cast<double>(total_steps)));
    const double floor_frac = 1.0 / ratio;
    if (step <= cut) {
        const double p = static_cast<double>(step) / static_cast<double>(cut);
        return lr_max * (floor_frac + (1.0 - floor_frac) * p);
    }
    const double q =
        static_cast<double>(step - cut) / static_cast<double>(total_steps - cut);
    return lr_max * (1.0 - (1.0 - floor_frac) * q);
}

EvalResult evaluate_split(const MtlModel<float>& model, const std::string& dataset,
                          const std::vector<Instance>& instances, const Vocabulary& vocab,
                          const LabelSpace& labels, int batch_size) {
    if (instances.empty()) throw std::invalid_argument("evaluate: empty split");
    const auto pool = tokenize_split(instances, vocab, labels, model.encoder.config.max_len);
    EvalResult r;
    r.predictions = predict_all(model, dataset, pool, batch_size);
    std::vector<int> golds;
    golds.reserve(pool.size());
    for (const auto& ti : pool) golds.push_back(ti.target);
    r.macro_f1 = macro_f1(golds, r.predictions, labels.size());
    r.accuracy = accuracy(golds, r.predictions);
    r.confusion = confusion_matrix(golds, r.predictions, labels.labels);
    return r;
}

TrainResult train(const TrainTask& task, const TrainConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (!task.primary || !task.vocab) throw std::invalid_argument("train: incomplete task");
    const DatasetSpec& primary = *task.primary;
    if (primary.train.empty()) throw std::invalid_argument("train: empty primary train split");
    if (primary.validation.empty()) {
        throw std::invalid_argument("train: empty primary validation split");
    }
    validate_lambdas(task.lambdas, primary.name);
    for (const auto* aux : task.aux) {
        if (task.lambdas.find(aux->name) == task.lambdas.end()) {
            throw std::invalid_argument("train: no lambda for auxiliary dataset '" + aux->name +
                                        "'");
        }
        if (aux->train.empty()) {
            throw std::invalid_argument("train: empty train split for auxiliary '" + aux->name +
                                        "'");
        }
    }

    const double t_start = now_seconds();

    EncoderConfig enc_cfg = cfg.encoder;
    enc_cfg.vocab_size = task.vocab->size();
    enc_cfg.seed = seed;

    std::map<std::string, std::vector<std::string>> head_specs;
    head_specs[primary.name] = primary.label_space.labels;
    for (const auto* aux : task.aux) head_specs[aux->name] = aux->label_space.labels;
    MtlModel<float> model =
        build_model<float>(enc_cfg, cfg.readout, head_specs, cfg.head_hidden);

    Adam<float> adam(model.trainable());

    const auto primary_pool =
        tokenize_split(primary.train, *task.vocab, primary.label_space, enc_cfg.max_len);
    struct AuxState {
        const DatasetSpec* spec;
        std::vector<TokenizedInstance> pool;
        CyclingSampler sampler;
    };
    std::vector<AuxState> aux_states;
    for (const auto* aux : task.aux) {
        aux_states.push_back(
            {aux, tokenize_split(aux->train, *task.vocab, aux->label_space, enc_cfg.max_len),
             CyclingSampler(aux->train.size(),
                            derive_seed(seed, kShuffleTag, string_seed(aux->name)))});
    }

    const std::int64_t steps_per_epoch =
        (static_cast<std::int64_t>(primary_pool.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const std::int64_t total_steps = steps_per_epoch * cfg.epochs;

    RunReport report;
    report.primary = primary.name;
    report.seed = seed;
    report.lambdas = task.lambdas;

    ParamSnapshot best;
    double best_val = -1.0;
    int best_epoch = 0;
    std::int64_t global_step = 0;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        // Fresh shuffle of the primary split; stream depends only on the
        // primary dataset, so auxiliary presence cannot perturb it.
        std::vector<std::size_t> order(primary_pool.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(derive_seed(seed, kShuffleTag, string_seed(primary.name),
                                    static_cast<std::uint64_t>(epoch)));
        deterministic_shuffle(order, shuffle_rng);

        double loss_sum = 0.0;
        for (std::int64_t step = 0; step < steps_per_epoch; ++step) {
            const std::size_t lo = static_cast<std::size_t>(step) * cfg.batch_size;
            const std::size_t hi = std::min(lo + cfg.batch_size, order.size());
            const std::vector<std::size_t> pidx(order.begin() + lo, order.begin() + hi);
            const Batch primary_batch = assemble_batch(primary_pool, pidx);

            std::vector<Batch> aux_batch_storage;
            aux_batch_storage.reserve(aux_states.size());
            std::map<std::string, const Batch*> aux_batches;
            for (auto& as : aux_states) {
                aux_batch_storage.push_back(
                    assemble_batch(as.pool, as.sampler.next(cfg.batch_size)));
                aux_batches[as.spec->name] = &aux_batch_storage.back();
            }

            Tensor<float> loss = mtl_loss(model, primary.name, primary_batch, aux_batches,
                                          task.lambdas, /*train=*/true,
                                          derive_seed(seed, kStepTag,
                                                      static_cast<std::uint64_t>(global_step)),
                                          &report.readout_fallbacks);
            const double loss_value = static_cast<double>(loss.item());
            if (!std::isfinite(loss_value)) {
                throw std::runtime_error("train: loss diverged (non-finite) at step " +
                                         std::to_string(global_step));
            }
            report.step_losses.push_back(loss_value);
            loss_sum += loss_value;

            adam.zero_grad();
            loss.backward();
            adam.clip_grad_norm(cfg.grad_clip);
            adam.step(static_cast<float>(slanted_triangular_lr(
                global_step, total_steps, cfg.learning_rate, cfg.cut_frac, cfg.ratio)));
            ++global_step;
        }

        const EvalResult val = evaluate_split(model, primary.name, primary.validation,
                                              *task.vocab, primary.label_space, cfg.batch_size);
        report.epochs.push_back(
            {epoch, loss_sum / static_cast<double>(steps_per_epoch), val.macro_f1});
        if (val.macro_f1 > best_val) {
            best_val = val.macro_f1;
            best_epoch = epoch;
            best = snapshot_params(model);
        }
    }

    restore_params(model, best);
    report.selected_epoch = best_epoch;

    if (!primary.test.empty()) {
        const EvalResult test = evaluate_split(model, primary.name, primary.test, *task.vocab,
                                               primary.label_space, cfg.batch_size);
        report.test_macro_f1 = test.macro_f1;
        report.test_accuracy = test.accuracy;
        report.test_confusion = test.confusion;
    }
    report.wall_clock_seconds = now_seconds() - t_start;
    return {std::move(model), std::move(report)};
}

namespace {

// Runs fn(i) for i in [0, n) on up to `jobs` worker threads. Results are
// produced into caller-indexed slots, so aggregation order never depends on
// scheduling. Exceptions propagate to the caller.
void parallel_for(std::int64_t n, int jobs, const std::function<void(std::int64_t)>& fn) {
    jobs = std::max(1, jobs);
    if (jobs == 1 || n <= 1) {
        for (std::int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::int64_t> next{0};
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(jobs));
    std::vector<std::thread> workers;
    for (int w = 0; w < jobs; ++w) {
        workers.emplace_back([&, w]() {
            try {
                for (std::int64_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
        });
    }
    for (auto& t : workers) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace

ProtocolReport run_protocol(const TrainTask& task, const TrainConfig& cfg, int jobs) {
    cfg.validate();
    const double t_start = now_seconds();
    std::set<std::uint64_t> uniq(cfg.seeds.begin(), cfg.seeds.end());
    const std::vector<std::uint64_t> seeds(uniq.begin(), uniq.end());

    ProtocolReport pr;
    pr.runs.resize(seeds.size());
    parallel_for(static_cast<std::int64_t>(seeds.size()), jobs, [&](std::int64_t i) {
        pr.runs[static_cast<std::size_t>(i)] =
            train(task, cfg, seeds[static_cast<std::size_t>(i)]).report;
    });

    double sum = 0.0;
    for (const auto& r : pr.runs) sum += r.test_macro_f1;
    pr.mean_test_macro_f1 = sum / static_cast<double>(pr.runs.size());
    double sq = 0.0;
    for (const auto& r : pr.runs) {
        const double d = r.test_macro_f1 - pr.mean_test_macro_f1;
        sq += d * d;
    }
    pr.std_test_macro_f1 = std::sqrt(sq / static_cast<double>(pr.runs.size()));
    pr.wall_clock_seconds = now_seconds() - t_start;
    return pr;
}

GridSearchReport grid_search_lambda(const TrainTask& task_without_lambdas,
                                    const std::vector<double>& grid, const TrainConfig& cfg,
                                    const std::vector<std::uint64_t>& grid_seeds, int jobs) {
    if (grid.empty()) throw std::invalid_argument("grid search: empty grid");
    if (task_without_lambdas.aux.empty()) {
        throw std::invalid_argument("grid search: no auxiliary datasets to weight");
    }
    const double t_start = now_seconds();
    std::vector<std::uint64_t> seeds = grid_seeds;
    if (seeds.empty()) seeds.push_back(cfg.seeds.front());

    GridSearchReport gr;
    for (const auto* aux : task_without_lambdas.aux) gr.aux_names.push_back(aux->name);
    std::sort(gr.aux_names.begin(), gr.aux_names.end());
    gr.grid = grid;

    const std::size_t n_aux = gr.aux_names.size();
    std::int64_t n_points = 1;
    for (std::size_t i = 0; i < n_aux; ++i) n_points *= static_cast<std::int64_t>(grid.size());

    gr.points.resize(static_cast<std::size_t>(n_points));
    std::vector<std::vector<double>> assignments(static_cast<std::size_t>(n_points));
    for (std::int64_t p = 0; p < n_points; ++p) {
        // Odometer with the last axis fastest: points enumerate the value
        // vectors in lexicographic order.
        std::vector<double> values(n_aux);
        std::int64_t rem = p;
        for (std::size_t a = n_aux; a-- > 0;) {
            values[a] = grid[static_cast<std::size_t>(rem % grid.size())];
            rem /= static_cast<std::int64_t>(grid.size());
        }
        assignments[static_cast<std::size_t>(p)] = std::move(values);
    }

    parallel_for(n_points, jobs, [&](std::int64_t p) {
        TrainTask task = task_without_lambdas;
        task.lambdas.clear();
        for (std::size_t a = 0; a < n_aux; ++a) {
            task.lambdas[gr.aux_names[a]] = {assignments[static_cast<std::size_t>(p)][a],
                                             "grid_search"};
        }
        double score_sum = 0.0;
        for (auto seed : seeds) {
            const TrainResult res = train(task, cfg, seed);
            // Validation macro-F1 of the selected epoch.
            score_sum += res.report.epochs[static_cast<std::size_t>(res.report.selected_epoch - 1)]
                             .val_macro_f1;
        }
        gr.points[static_cast<std::size_t>(p)] = {assignments[static_cast<std::size_t>(p)],
                                                  score_sum / static_cast<double>(seeds.size())};
    });
    gr.runs_executed = n_points * static_cast<std::int64_t>(seeds.size());

    // Strict improvement keeps the lexicographically smallest argmax.
    std::size_t best_idx = 0;
    for (std::size_t p = 1; p < gr.points.size(); ++p) {
        if (gr.points[p].score > gr.points[best_idx].score) best_idx = p;
    }
    for (std::size_t a = 0; a < n_aux; ++a) {
        gr.best[gr.aux_names[a]] = {gr.points[best_idx].values[a], "grid_search"};
    }
    gr.wall_clock_seconds = now_seconds() - t_start;
    return gr;
}

}  // namespace citemtl
