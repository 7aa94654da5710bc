#include "citemtl/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace citemtl {

namespace {

using ordered_json = nlohmann::ordered_json;

ordered_json tensor_to_json(const Tensor<float>& t) {
    ordered_json j;
    j["shape"] = t.shape();
    // float -> double is exact, so values round-trip bit-for-bit
    std::vector<double> data(t.data().begin(), t.data().end());
    j["data"] = std::move(data);
    return j;
}

Tensor<float> tensor_from_json(const nlohmann::json& j, const std::string& what) {
    if (!j.contains("shape") || !j.contains("data")) {
        throw std::runtime_error("checkpoint: tensor '" + what + "' missing shape/data");
    }
    Shape shape = j["shape"].get<Shape>();
    std::vector<double> data = j["data"].get<std::vector<double>>();
    std::vector<float> fdata(data.begin(), data.end());
    return Tensor<float>::from_data(std::move(shape), std::move(fdata)).set_requires_grad(true);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const MtlModel<float>& model,
                     const Vocabulary& vocab, const LambdaAssignment& lambdas) {
    ordered_json j;
    j["format_version"] = kCheckpointFormatVersion;

    const EncoderConfig& cfg = model.encoder.config;
    ordered_json jc;
    jc["vocab_size"] = cfg.vocab_size;
    jc["d_model"] = cfg.d_model;
    jc["n_layers"] = cfg.n_layers;
    jc["n_heads"] = cfg.n_heads;
    jc["d_ff"] = cfg.d_ff;
    jc["max_len"] = cfg.max_len;
    jc["dropout"] = cfg.dropout;
    jc["seed"] = cfg.seed;
    j["encoder_config"] = std::move(jc);

    j["readout"] = readout_name(model.readout_mode);

    ordered_json jv;
    jv["min_freq"] = vocab.min_freq;
    jv["tokens"] = vocab.tokens;
    j["vocab"] = std::move(jv);

    ordered_json jl = ordered_json::object();
    for (const auto& [name, entry] : lambdas) {
        jl[name] = {{"value", entry.value}, {"source", entry.source}};
    }
    j["lambda_assignment"] = std::move(jl);

    ordered_json je = ordered_json::object();
    for (const auto& [name, t] : model.encoder.named()) je[name] = tensor_to_json(t);
    j["encoder"] = std::move(je);

    ordered_json jh = ordered_json::object();
    for (const auto& [name, head] : model.heads) {
        ordered_json h;
        h["labels"] = head.labels;
        for (const auto& [pname, t] : head.named()) h[pname] = tensor_to_json(t);
        jh[name] = std::move(h);
    }
    j["heads"] = std::move(jh);

    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
    out << j.dump() << "\n";
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error(path.string() + ": malformed checkpoint JSON: " + e.what());
    }
    if (!j.contains("format_version") || j["format_version"].get<int>() != kCheckpointFormatVersion) {
        throw std::runtime_error(path.string() + ": unsupported checkpoint format version");
    }

    Checkpoint ckpt;
    const auto& jc = j.at("encoder_config");
    EncoderConfig cfg;
    cfg.vocab_size = jc.at("vocab_size").get<int>();
    cfg.d_model = jc.at("d_model").get<int>();
    cfg.n_layers = jc.at("n_layers").get<int>();
    cfg.n_heads = jc.at("n_heads").get<int>();
    cfg.d_ff = jc.at("d_ff").get<int>();
    cfg.max_len = jc.at("max_len").get<int>();
    cfg.dropout = jc.at("dropout").get<double>();
    cfg.seed = jc.at("seed").get<std::uint64_t>();
    cfg.validate();

    ckpt.vocab = Vocabulary::from_tokens(j.at("vocab").at("tokens").get<std::vector<std::string>>(),
                                         j.at("vocab").at("min_freq").get<int>());
    if (ckpt.vocab.size() != cfg.vocab_size) {
        throw std::runtime_error(path.string() + ": vocabulary size " +
                                 std::to_string(ckpt.vocab.size()) +
                                 " does not match encoder config " +
                                 std::to_string(cfg.vocab_size));
    }

    for (const auto& [name, entry] : j.at("lambda_assignment").items()) {
        ckpt.lambdas[name] = {entry.at("value").get<double>(),
                              entry.at("source").get<std::string>()};
    }

    ckpt.model.readout_mode = parse_readout(j.at("readout").get<std::string>());
    ckpt.model.encoder = init_params<float>(cfg);
    for (auto& [name, t] : ckpt.model.encoder.named()) {
        Tensor<float> loaded = tensor_from_json(j.at("encoder").at(name), name);
        if (loaded.shape() != t.shape()) {
            throw std::runtime_error(path.string() + ": tensor '" + name + "' has shape " +
                                     shape_str(loaded.shape()) + ", expected " +
                                     shape_str(t.shape()));
        }
        t.data() = loaded.data();
    }

    for (const auto& [name, jhead] : j.at("heads").items()) {
        TaskHead<float> head;
        head.dataset = name;
        head.labels = jhead.at("labels").get<std::vector<std::string>>();
        head.w1 = tensor_from_json(jhead.at("w1"), name + ".w1");
        head.b1 = tensor_from_json(jhead.at("b1"), name + ".b1");
        head.w2 = tensor_from_json(jhead.at("w2"), name + ".w2");
        head.b2 = tensor_from_json(jhead.at("b2"), name + ".b2");
        if (head.w2.shape()[1] != head.n_labels()) {
            throw std::runtime_error(path.string() + ": head '" + name + "' logit width " +
                                     std::to_string(head.w2.shape()[1]) + " vs " +
                                     std::to_string(head.n_labels()) + " labels");
        }
        ckpt.model.heads.emplace(name, std::move(head));
    }
    return ckpt;
}

}  // namespace citemtl
