#include <cmath>
#include <stdexcept>

#include "citemtl/encoder.hpp"
#include "citemtl/readout.hpp"
#include "doctest.h"
#include "support/finite_diff.hpp"

using namespace citemtl;

namespace {

EncoderConfig small_config(int vocab = 16, std::uint64_t seed = 1) {
    EncoderConfig cfg;
    cfg.vocab_size = vocab;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 24;
    cfg.max_len = 12;
    cfg.dropout = 0.1;
    cfg.seed = seed;
    return cfg;
}

std::vector<int> random_ids(Rng& rng, int n, int vocab) {
    std::vector<int> ids(n);
    for (auto& id : ids) id = static_cast<int>(rng.next_below(vocab));
    return ids;
}

}  // namespace

TEST_SUITE_BEGIN("encoder");

TEST_CASE("config validation") {
    EncoderConfig cfg = small_config();
    cfg.n_heads = 3;  // 16 % 3 != 0
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = small_config();
    cfg.d_ff = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("init: same seed same bytes, different seeds differ, 4-sigma bounds") {
    auto a = init_params<float>(small_config(16, 7));
    auto b = init_params<float>(small_config(16, 7));
    auto c = init_params<float>(small_config(16, 8));

    CHECK(a.tok_embed.data() == b.tok_embed.data());
    CHECK(a.layers[1].w_ff1.data() == b.layers[1].w_ff1.data());

    float max_delta = 0;
    for (std::size_t i = 0; i < a.tok_embed.data().size(); ++i) {
        max_delta = std::max(max_delta, std::abs(a.tok_embed.data()[i] - c.tok_embed.data()[i]));
    }
    CHECK(max_delta > 0);

    for (const auto& [name, t] : a.named()) {
        const bool is_weight = name.find('w') != std::string::npos ||
                               name.find("embed") != std::string::npos;
        for (float v : t.data()) {
            CHECK(std::isfinite(v));
            if (is_weight && name.find("gain") == std::string::npos) {
                CHECK(v >= -0.08f);
                CHECK(v <= 0.08f);
            }
        }
    }
}

TEST_CASE("encode: output shape and eval determinism") {
    auto cfg = small_config();
    auto params = init_params<float>(cfg);
    Rng rng(3);
    const int b = 2, l = 10;
    auto ids = random_ids(rng, b * l, cfg.vocab_size);
    std::vector<std::uint8_t> mask(b * l, 1);
    EncodeContext ctx;  // eval

    auto out = encode(params, ids, mask, b, l, ctx);
    CHECK(out.shape() == Shape{2, 10, 16});

    auto out2 = encode(params, ids, mask, b, l, ctx);
    CHECK(out.data() == out2.data());
}

TEST_CASE("encode: errors on overflow and bad ids") {
    auto cfg = small_config();
    auto params = init_params<float>(cfg);
    std::vector<int> ids(cfg.max_len + 1, 0);
    std::vector<std::uint8_t> mask(cfg.max_len + 1, 1);
    EncodeContext ctx;
    CHECK_THROWS_AS(encode(params, ids, mask, 1, cfg.max_len + 1, ctx), std::invalid_argument);

    std::vector<int> bad{0, cfg.vocab_size, 1};
    std::vector<std::uint8_t> m3(3, 1);
    CHECK_THROWS_AS(encode(params, bad, m3, 1, 3, ctx), std::out_of_range);
}

TEST_CASE("encode: pad-region content cannot affect non-pad embeddings") {
    auto cfg = small_config();
    auto params = init_params<float>(cfg);
    Rng rng(5);
    const int b = 2, l = 8, real = 5;
    auto ids1 = random_ids(rng, b * l, cfg.vocab_size);
    auto ids2 = ids1;
    std::vector<std::uint8_t> mask(b * l, 0);
    for (int bi = 0; bi < b; ++bi)
        for (int i = 0; i < real; ++i) mask[bi * l + i] = 1;
    // scribble over the pad region of the second batch
    for (int bi = 0; bi < b; ++bi)
        for (int i = real; i < l; ++i) ids2[bi * l + i] = static_cast<int>(rng.next_below(16));

    EncodeContext ctx;
    auto e1 = encode(params, ids1, mask, b, l, ctx);
    auto e2 = encode(params, ids2, mask, b, l, ctx);
    const int d = cfg.d_model;
    for (int bi = 0; bi < b; ++bi)
        for (int i = 0; i < real; ++i)
            for (int j = 0; j < d; ++j) {
                const std::size_t at = static_cast<std::size_t>((bi * l + i) * d + j);
                CHECK(e1.data()[at] == doctest::Approx(e2.data()[at]).epsilon(1e-6));
            }
}

TEST_CASE("encode: attention rows sum to one and masked keys get zero weight") {
    auto cfg = small_config();
    auto params = init_params<float>(cfg);
    Rng rng(9);
    const int b = 2, l = 6, real = 4;
    auto ids = random_ids(rng, b * l, cfg.vocab_size);
    std::vector<std::uint8_t> mask(b * l, 0);
    for (int bi = 0; bi < b; ++bi)
        for (int i = 0; i < real; ++i) mask[bi * l + i] = 1;

    EncodeContext ctx;
    EncodeTrace<float> trace;
    encode(params, ids, mask, b, l, ctx, &trace);
    REQUIRE(trace.attention.size() == 2);
    for (const auto& attn : trace.attention) {
        const auto& s = attn.shape();
        REQUIRE(s == Shape{b * cfg.n_heads, l, l});
        for (std::int64_t row = 0; row < s[0] * s[1]; ++row) {
            const std::int64_t bi = row / (cfg.n_heads * l);
            double masked_sum = 0, total = 0;
            for (int j = 0; j < l; ++j) {
                const float w = attn.data()[static_cast<std::size_t>(row * l + j)];
                total += w;
                if (!mask[static_cast<std::size_t>(bi * l + j)]) masked_sum += w;
            }
            CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
            CHECK(masked_sum == doctest::Approx(0.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("encode: permuting the batch permutes outputs") {
    auto cfg = small_config();
    auto params = init_params<float>(cfg);
    Rng rng(13);
    const int l = 7;
    auto ex0 = random_ids(rng, l, cfg.vocab_size);
    auto ex1 = random_ids(rng, l, cfg.vocab_size);
    std::vector<int> batch01, batch10;
    batch01.insert(batch01.end(), ex0.begin(), ex0.end());
    batch01.insert(batch01.end(), ex1.begin(), ex1.end());
    batch10.insert(batch10.end(), ex1.begin(), ex1.end());
    batch10.insert(batch10.end(), ex0.begin(), ex0.end());
    std::vector<std::uint8_t> mask(2 * l, 1);

    EncodeContext ctx;
    auto out01 = encode(params, batch01, mask, 2, l, ctx);
    auto out10 = encode(params, batch10, mask, 2, l, ctx);
    const int d = cfg.d_model;
    for (int i = 0; i < l * d; ++i) {
        CHECK(out01.data()[static_cast<std::size_t>(i)] ==
              out10.data()[static_cast<std::size_t>(l * d + i)]);
        CHECK(out01.data()[static_cast<std::size_t>(l * d + i)] ==
              out10.data()[static_cast<std::size_t>(i)]);
    }
}

TEST_CASE("encode: dropout only active in train mode and reproducible per stream") {
    auto cfg = small_config();
    auto params = init_params<float>(cfg);
    Rng rng(21);
    const int b = 1, l = 5;
    auto ids = random_ids(rng, b * l, cfg.vocab_size);
    std::vector<std::uint8_t> mask(b * l, 1);

    Rng d1(42), d2(42), d3(43);
    EncodeContext t1{true, &d1}, t2{true, &d2}, t3{true, &d3};
    auto a = encode(params, ids, mask, b, l, t1);
    auto b2 = encode(params, ids, mask, b, l, t2);
    auto c = encode(params, ids, mask, b, l, t3);
    CHECK(a.data() == b2.data());
    CHECK(a.data() != c.data());

    EncodeContext ev;
    auto e1 = encode(params, ids, mask, b, l, ev);
    CHECK(e1.data() != a.data());
}

TEST_CASE("encoder end-to-end gradient check (double)") {
    EncoderConfig cfg;
    cfg.vocab_size = 10;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 12;
    cfg.max_len = 6;
    cfg.dropout = 0.0;
    cfg.seed = 5;
    auto params = init_params<double>(cfg);
    // Re-randomize at a larger scale: near the 0.02-sigma init the layer-norm
    // row variances are small enough that a 1e-3 finite-difference step sees
    // real curvature, which tests the step size rather than the gradients.
    {
        Rng prng(1234);
        for (auto& [name, p] : params.named()) {
            const bool is_gain = name.find("gain") != std::string::npos;
            for (auto& v : p.data()) {
                v = is_gain ? 1.0 + 0.2 * prng.next_normal() : 0.3 * prng.next_normal();
            }
        }
    }
    Rng rng(17);
    const int b = 2, l = 5;
    auto ids = random_ids(rng, b * l, cfg.vocab_size);
    std::vector<std::uint8_t> mask(b * l, 1);
    mask[b * l - 1] = 0;  // one pad position

    std::vector<int> targets{1, 0};
    auto head_w = Tensor<double>::trunc_normal({cfg.d_model, 2}, rng, 0.5).set_requires_grad(true);

    auto loss_of = [&]() {
        EncodeContext ctx;
        auto emb = encode(params, ids, mask, b, l, ctx);
        auto pooled = readout(emb, mask, {{1}, {2, 3}}, ReadoutMode::kCitedHere);
        return cross_entropy(matmul(pooled, head_w), targets);
    };

    std::vector<std::pair<std::string, Tensor<double>>> named = params.named();
    named.emplace_back("head_w", head_w);
    auto res = citemtl::testing::check_gradients(
        named, [&]() { NoGradGuard ng; return loss_of().item(); },
        [&]() {
            for (auto& [n, p] : named) p.zero_grad();
            loss_of().backward();
        });
    CHECK_MESSAGE(res.ok, res.worst_param, "[", res.worst_index, "] rel err ",
                  res.worst_rel_err);
}

TEST_SUITE_END();

TEST_SUITE_BEGIN("readout");

TEST_CASE("CITED_HERE with one marker returns that embedding bit-exactly") {
    Rng rng(1);
    const int b = 3, l = 5, d = 4;
    auto emb = Tensor<float>::zeros({b, l, d});
    for (auto& v : emb.data()) v = static_cast<float>(rng.next_normal());
    std::vector<std::uint8_t> mask(b * l, 1);
    std::vector<std::vector<int>> markers{{2}, {0}, {4}};
    auto out = readout(emb, mask, markers, ReadoutMode::kCitedHere);
    for (int bi = 0; bi < b; ++bi) {
        const int k = markers[static_cast<std::size_t>(bi)][0];
        for (int j = 0; j < d; ++j) {
            CHECK(out.data()[static_cast<std::size_t>(bi * d + j)] ==
                  emb.data()[static_cast<std::size_t>((bi * l + k) * d + j)]);
        }
    }
}

TEST_CASE("MEAN of constant embeddings is the constant; pad-invariant") {
    const int b = 1, l = 4, d = 3;
    auto emb = Tensor<float>::zeros({b, l, d});
    std::vector<std::uint8_t> mask{1, 1, 1, 0};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < d; ++j) emb.data()[static_cast<std::size_t>(i * d + j)] = 2.5f + j;
    // garbage in the pad slot
    for (int j = 0; j < d; ++j) emb.data()[static_cast<std::size_t>(3 * d + j)] = 99.0f;
    auto out = readout(emb, mask, {{}}, ReadoutMode::kMean);
    for (int j = 0; j < d; ++j) {
        CHECK(out.data()[static_cast<std::size_t>(j)] == doctest::Approx(2.5 + j));
    }

    // changing pad contents changes nothing
    emb.data()[3 * d] = -123.0f;
    auto out2 = readout(emb, mask, {{}}, ReadoutMode::kMean);
    CHECK(out.data() == out2.data());
}

TEST_CASE("CITED_HERE with two markers averages them (loop oracle)") {
    Rng rng(4);
    const int b = 1, l = 6, d = 5;
    auto emb = Tensor<double>::zeros({b, l, d});
    for (auto& v : emb.data()) v = rng.next_normal();
    std::vector<std::uint8_t> mask(l, 1);
    auto out = readout(emb, mask, {{2, 5}}, ReadoutMode::kCitedHere);
    for (int j = 0; j < d; ++j) {
        // scalar oracle: explicit two-term average
        const double expect =
            (emb.data()[static_cast<std::size_t>(2 * d + j)] +
             emb.data()[static_cast<std::size_t>(5 * d + j)]) / 2.0;
        CHECK(out.data()[static_cast<std::size_t>(j)] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("CLS equals position zero and ignores the rest") {
    Rng rng(6);
    const int b = 2, l = 4, d = 3;
    auto emb = Tensor<float>::zeros({b, l, d});
    for (auto& v : emb.data()) v = static_cast<float>(rng.next_normal());
    std::vector<std::uint8_t> mask(b * l, 1);
    auto out = readout(emb, mask, {{}, {}}, ReadoutMode::kCls);
    for (int bi = 0; bi < b; ++bi)
        for (int j = 0; j < d; ++j) {
            CHECK(out.data()[static_cast<std::size_t>(bi * d + j)] ==
                  emb.data()[static_cast<std::size_t>(bi * l * d + j)]);
        }

    // position-0 is the only dependency
    auto emb2 = Tensor<float>::from_data(emb.shape(), emb.data());
    for (int i = 1; i < l; ++i) emb2.data()[static_cast<std::size_t>(i * d)] = 7.0f;
    auto out2 = readout(emb2, mask, {{}, {}}, ReadoutMode::kCls);
    CHECK(out.data() == out2.data());
}

TEST_CASE("zero-marker fallback counts and uses MEAN") {
    const int b = 2, l = 3, d = 2;
    auto emb = Tensor<float>::full({b, l, d}, 1.0f);
    std::vector<std::uint8_t> mask(b * l, 1);
    std::int64_t fallbacks = 0;
    auto out = readout(emb, mask, {{1}, {}}, ReadoutMode::kCitedHere, &fallbacks);
    CHECK(fallbacks == 1);
    CHECK(out.data()[2] == doctest::Approx(1.0));
}

TEST_CASE("gradients distribute 1/m to each of m marker embeddings") {
    Rng rng(12);
    const int b = 2, l = 6, d = 4;
    auto emb = Tensor<double>::zeros({b, l, d});
    for (auto& v : emb.data()) v = rng.next_normal();
    emb.set_requires_grad(true);
    std::vector<std::uint8_t> mask(b * l, 1);
    std::vector<std::vector<int>> markers{{1, 3, 4}, {2}};

    auto run = [&]() { return sum_all(readout(emb, mask, markers, ReadoutMode::kCitedHere)); };
    auto res = citemtl::testing::check_gradients(
        {{"emb", emb}}, [&]() { NoGradGuard ng; return run().item(); },
        [&]() {
            emb.zero_grad();
            run().backward();
        });
    CHECK_MESSAGE(res.ok, res.worst_param, " rel err ", res.worst_rel_err);

    // analytic check of the exact 1/m factor
    emb.zero_grad();
    run().backward();
    for (int j = 0; j < d; ++j) {
        CHECK(emb.grad_view()[static_cast<std::size_t>((0 * l + 1) * d + j)] ==
              doctest::Approx(1.0 / 3.0).epsilon(1e-12));
        CHECK(emb.grad_view()[static_cast<std::size_t>((1 * l + 2) * d + j)] ==
              doctest::Approx(1.0).epsilon(1e-12));
        CHECK(emb.grad_view()[static_cast<std::size_t>((0 * l + 0) * d + j)] == 0.0);
    }
}

TEST_CASE("random contract sweep: cls copies, mean pad-invariance, markers exact") {
    Rng rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        const int b = 1 + static_cast<int>(rng.next_below(3));
        const int l = 2 + static_cast<int>(rng.next_below(6));
        const int d = 1 + static_cast<int>(rng.next_below(5));
        auto emb = Tensor<float>::zeros({b, l, d});
        for (auto& v : emb.data()) v = static_cast<float>(rng.next_normal());
        std::vector<std::uint8_t> mask(static_cast<std::size_t>(b * l), 1);
        std::vector<std::vector<int>> markers;
        for (int bi = 0; bi < b; ++bi) {
            markers.push_back({static_cast<int>(rng.next_below(l))});
        }
        auto cls = readout(emb, mask, markers, ReadoutMode::kCls);
        auto ch = readout(emb, mask, markers, ReadoutMode::kCitedHere);
        for (int bi = 0; bi < b; ++bi) {
            const int k = markers[static_cast<std::size_t>(bi)][0];
            for (int j = 0; j < d; ++j) {
                CHECK(cls.data()[static_cast<std::size_t>(bi * d + j)] ==
                      emb.data()[static_cast<std::size_t>(bi * l * d + j)]);
                CHECK(ch.data()[static_cast<std::size_t>(bi * d + j)] ==
                      emb.data()[static_cast<std::size_t>((bi * l + k) * d + j)]);
            }
        }
    }
}

TEST_SUITE_END();
