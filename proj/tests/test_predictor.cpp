#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <numeric>
#include <vector>

#include "evsel/predictor.hpp"
#include "evsel/prng.hpp"

using namespace evsel;

namespace {

MatF random_bag(Rng& rng, std::uint32_t n, std::uint32_t d) {
    MatF H(n, d);
    for (auto& v : H.data) v = static_cast<float>(rng.normal());
    return H;
}

std::vector<double> random_gates(Rng& rng, std::uint32_t n) {
    std::vector<double> g(n);
    for (auto& v : g) v = rng.uniform(0.05, 0.95);
    return g;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

constexpr InjectionMode kModes[] = {InjectionMode::attention_bias,
                                    InjectionMode::feature_reweight, InjectionMode::hybrid};

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

}  // namespace

TEST_CASE("identity gates reproduce the ungated forward bitwise") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const auto n = static_cast<std::uint32_t>(rng.range(1, 30));
        const std::uint32_t d = 10;
        Rng init(rng.next_u64());
        const PredictorParams params = PredictorParams::init(d, 3, 8, init);
        const MatF H = random_bag(rng, n, d);
        const ForwardResult base = forward(params, H, {}, InjectionMode::attention_bias);
        const std::vector<double> ones(n, 1.0);
        for (const InjectionMode mode : kModes) {
            const ForwardResult gated = forward(params, H, ones, mode);
            CHECK(bitwise_equal(base.logits, gated.logits));
            CHECK(bitwise_equal(base.probs, gated.probs));
            CHECK(bitwise_equal(base.attention, gated.attention));
            CHECK(bitwise_equal(base.bag_repr, gated.bag_repr));
        }
    }
}

TEST_CASE("a singleton bag gets attention exactly 1") {
    Rng rng(12);
    Rng init(rng.next_u64());
    const PredictorParams params = PredictorParams::init(6, 2, 4, init);
    const MatF H = random_bag(rng, 1, 6);
    const ForwardResult fr = forward(params, H, {}, InjectionMode::attention_bias);
    REQUIRE(fr.attention.size() == 1);
    CHECK(fr.attention[0] == 1.0);
}

TEST_CASE("zero parameters give uniform attention and the mean representation") {
    PredictorParams params;
    params.W1 = MatD(4, 6);
    params.w2.assign(4, 0.0);
    params.Wc = MatD(2, 6);
    params.b.assign(2, 0.0);
    Rng rng(13);
    const MatF H = random_bag(rng, 2, 6);
    const ForwardResult fr = forward(params, H, {}, InjectionMode::attention_bias);
    CHECK(fr.attention[0] == Catch::Approx(0.5).margin(1e-15));
    CHECK(fr.attention[1] == Catch::Approx(0.5).margin(1e-15));
    for (std::size_t f = 0; f < 6; ++f) {
        const double mean = 0.5 * (static_cast<double>(H(0, f)) + H(1, f));
        CHECK(fr.bag_repr[f] == Catch::Approx(mean).margin(1e-12));
    }
}

TEST_CASE("attention is invariant to a constant shift of the scores") {
    // Shift every scorer output by adding a constant column to the last
    // hidden weight; equivalently compare softmax(z) vs softmax(z + c).
    Rng rng(14);
    const std::uint32_t n = 12;
    std::vector<double> z(n);
    for (auto& v : z) v = rng.uniform(-3.0, 3.0);
    std::vector<double> shifted = z;
    for (auto& v : shifted) v += 17.25;
    const std::vector<double> a = softmax(z);
    const std::vector<double> b = softmax(shifted);
    for (std::size_t i = 0; i < n; ++i) CHECK(a[i] == Catch::Approx(b[i]).margin(1e-12));
}

TEST_CASE("permuting patches permutes attention and keeps logits") {
    Rng rng(15);
    const std::uint32_t n = 9, d = 8;
    Rng init(rng.next_u64());
    const PredictorParams params = PredictorParams::init(d, 3, 8, init);
    const MatF H = random_bag(rng, n, d);
    std::vector<std::uint32_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0u);
    Rng shuffle_rng(77);
    shuffle_rng.shuffle(perm);

    MatF HP(n, d);
    for (std::uint32_t i = 0; i < n; ++i)
        std::copy(H.row(perm[i]), H.row(perm[i]) + d, HP.row(i));

    const ForwardResult a = forward(params, H, {}, InjectionMode::attention_bias);
    const ForwardResult b = forward(params, HP, {}, InjectionMode::attention_bias);
    for (std::size_t c = 0; c < a.logits.size(); ++c)
        CHECK(a.logits[c] == Catch::Approx(b.logits[c]).margin(1e-9));
    for (std::uint32_t i = 0; i < n; ++i)
        CHECK(b.attention[i] == Catch::Approx(a.attention[perm[i]]).margin(1e-9));
}

TEST_CASE("saturated correct prediction has vanishing loss and gradients") {
    // One-patch bag, huge correct-class logit via the bias.
    PredictorParams params;
    params.W1 = MatD(2, 4);
    params.w2.assign(2, 0.0);
    params.Wc = MatD(2, 4);
    params.b = {40.0, -40.0};
    MatF H(1, 4);
    const LossAndGrad lg = loss_and_grad(params, H, {}, InjectionMode::attention_bias, 0);
    CHECK(lg.loss < 1e-8);
    for (double g : lg.params.db) CHECK(std::abs(g) < 1e-6);
    for (double g : lg.params.dWc.data) CHECK(std::abs(g) < 1e-6);
}

TEST_CASE("analytic gradients match central finite differences") {
    Rng rng(16);
    const double h = 1e-5;
    const double tol = 1e-5;
    for (int draw = 0; draw < 20; ++draw) {
        const auto n = static_cast<std::uint32_t>(rng.range(2, 6));
        const std::uint32_t d = 5, classes = 3, hidden = 4;
        Rng init(rng.next_u64());
        PredictorParams params = PredictorParams::init(d, classes, hidden, init);
        for (auto& v : params.b) v = 0.2 * rng.normal();
        const MatF H = random_bag(rng, n, d);
        std::vector<double> gates = random_gates(rng, n);
        const int label = static_cast<int>(rng.below(classes));
        const InjectionMode mode = kModes[draw % 3];

        const LossAndGrad lg = loss_and_grad(params, H, gates, mode, label);

        auto loss_at = [&]() {
            const ForwardResult fr = forward(params, H, gates, mode);
            return cross_entropy(fr.probs, label);
        };

        auto check_tensor = [&](double* data, const double* grad, std::size_t count) {
            for (std::size_t i = 0; i < count; ++i) {
                const double keep = data[i];
                data[i] = keep + h;
                const double up = loss_at();
                data[i] = keep - h;
                const double down = loss_at();
                data[i] = keep;
                const double fd = (up - down) / (2.0 * h);
                CHECK(rel_err(grad[i], fd) < tol);
            }
        };
        check_tensor(params.W1.data.data(), lg.params.dW1.data.data(), params.W1.size());
        check_tensor(params.w2.data(), lg.params.dw2.data(), params.w2.size());
        check_tensor(params.Wc.data.data(), lg.params.dWc.data.data(), params.Wc.size());
        check_tensor(params.b.data(), lg.params.db.data(), params.b.size());
        check_tensor(gates.data(), lg.dgates.data(), gates.size());
    }
}

TEST_CASE("a dead patch contributes exactly zero gate gradient under reweighting") {
    Rng rng(17);
    const std::uint32_t n = 4, d = 5;
    Rng init(rng.next_u64());
    const PredictorParams params = PredictorParams::init(d, 3, 4, init);
    MatF H = random_bag(rng, n, d);
    for (std::uint32_t f = 0; f < d; ++f) H(2, f) = 0.0f;  // dead patch
    std::vector<double> gates = random_gates(rng, n);
    gates[2] = 0.0;
    const LossAndGrad lg = loss_and_grad(params, H, gates, InjectionMode::feature_reweight, 1);
    CHECK(lg.dgates[2] == 0.0);
}

TEST_CASE("predict_subset equals the forward on a materialized sub-bag") {
    Rng rng(18);
    const std::uint32_t n = 14, d = 7;
    Rng init(rng.next_u64());
    const PredictorParams params = PredictorParams::init(d, 4, 6, init);
    const MatF H = random_bag(rng, n, d);

    // Full index set reproduces the plain forward.
    std::vector<std::uint32_t> all(n);
    std::iota(all.begin(), all.end(), 0u);
    const ForwardResult full = forward(params, H, {}, InjectionMode::attention_bias);
    const SubsetPrediction sp_full = predict_subset(params, H, all);
    CHECK(bitwise_equal(full.probs, sp_full.probs));

    // Keep/remove pair against an independent reslice of the rows.
    const std::vector<std::uint32_t> keep = {1, 4, 5, 9};
    const std::vector<std::uint32_t> remove = {0, 2, 3, 6, 7, 8, 10, 11, 12, 13};
    for (const auto& subset : {keep, remove}) {
        MatF sliced(subset.size(), d);
        for (std::size_t i = 0; i < subset.size(); ++i)
            std::copy(H.row(subset[i]), H.row(subset[i]) + d, sliced.row(i));
        const ForwardResult direct = forward(params, sliced, {}, InjectionMode::attention_bias);
        const SubsetPrediction sp = predict_subset(params, H, subset);
        for (std::size_t c = 0; c < direct.probs.size(); ++c)
            CHECK(sp.probs[c] == Catch::Approx(direct.probs[c]).margin(1e-12));
    }
}

TEST_CASE("contract violations throw") {
    Rng rng(19);
    Rng init(rng.next_u64());
    const PredictorParams params = PredictorParams::init(5, 2, 4, init);
    const MatF H = random_bag(rng, 3, 5);
    CHECK_THROWS_AS(predict_subset(params, H, std::vector<std::uint32_t>{}), ContractError);
    CHECK_THROWS_AS(predict_subset(params, H, std::vector<std::uint32_t>{7}), ContractError);
    const std::vector<double> short_gates(2, 0.5);
    CHECK_THROWS_AS(forward(params, H, short_gates, InjectionMode::hybrid), ContractError);
    CHECK_THROWS_AS(loss_and_grad(params, H, {}, InjectionMode::hybrid, 5), ContractError);
}
