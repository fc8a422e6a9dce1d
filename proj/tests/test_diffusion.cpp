#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "diffact/diffusion.hpp"
#include "diffact/rng.hpp"
#include "diffact/vocab.hpp"

using namespace diffact;

static VocabLayout default_layout() { return VocabLayout::make(512, 32); }

TEST_CASE("linear schedule endpoints and spacing") {
    Schedule s = Schedule::linear(10);
    REQUIRE(s.steps() == 10);
    REQUIRE(s.times.front() == 1.0);
    REQUIRE(s.times.back() == 0.0);
    for (int k = 0; k <= 10; ++k) {
        REQUIRE(s.times[static_cast<std::size_t>(k)] ==
                Catch::Approx(1.0 - k / 10.0).margin(1e-12));
    }
    for (int k = 0; k < 10; ++k) {
        REQUIRE(s.times[static_cast<std::size_t>(k)] > s.times[static_cast<std::size_t>(k) + 1]);
    }
    REQUIRE_THROWS_AS(Schedule::linear(0), std::invalid_argument);
}

static TokenSequence make_seq(const VocabLayout& layout, int answer_len, Rng& rng) {
    TokenSequence seq;
    seq.prompt_len = 4;
    seq.ids = {1, 0, 0, 0};
    for (int i = 0; i < answer_len; ++i) {
        seq.ids.push_back(layout.unmap_local(static_cast<int>(rng.uniform_int(32))));
    }
    return seq;
}

TEST_CASE("forward mask endpoints") {
    VocabLayout layout = default_layout();
    Rng rng(1);
    TokenSequence x0 = make_seq(layout, 35, rng);

    Rng r0(2);
    TokenSequence xt0 = forward_mask(x0, 0.0, layout, r0);
    REQUIRE(xt0 == x0);  // t=0 never masks

    Rng r1(3);
    TokenSequence xt1 = forward_mask(x0, 1.0, layout, r1);
    for (int i = 0; i < 4; ++i) REQUIRE(xt1.ids[static_cast<std::size_t>(i)] == x0.ids[static_cast<std::size_t>(i)]);
    for (int i = 4; i < xt1.size(); ++i) {
        REQUIRE(xt1.ids[static_cast<std::size_t>(i)] == layout.mask_token_id);
    }

    Rng r2(4);
    REQUIRE_THROWS_AS(forward_mask(x0, -0.1, layout, r2), std::invalid_argument);
    REQUIRE_THROWS_AS(forward_mask(x0, 1.1, layout, r2), std::invalid_argument);
}

TEST_CASE("forward mask frequency matches t and never touches the prompt") {
    VocabLayout layout = default_layout();
    Rng data_rng(10);
    const double t = 0.5;
    const int reps = 2000;
    const int answer_len = 35;
    long masked = 0;
    Rng mask_rng(11);
    TokenSequence x0 = make_seq(layout, answer_len, data_rng);
    for (int r = 0; r < reps; ++r) {
        TokenSequence xt = forward_mask(x0, t, layout, mask_rng);
        for (int i = 0; i < 4; ++i) {
            REQUIRE(xt.ids[static_cast<std::size_t>(i)] != layout.mask_token_id);
        }
        masked += xt.count_masked(layout);
    }
    double freq = static_cast<double>(masked) / (reps * answer_len);
    // 3 sigma for 70000 Bernoulli(0.5) draws ~ 0.0057.
    REQUIRE(std::abs(freq - t) < 0.0057);
}

TEST_CASE("forward mask is deterministic in the rng state") {
    VocabLayout layout = default_layout();
    Rng data_rng(20);
    TokenSequence x0 = make_seq(layout, 35, data_rng);
    Rng a(21), b(21);
    REQUIRE(forward_mask(x0, 0.3, layout, a) == forward_mask(x0, 0.3, layout, b));
}

TEST_CASE("reverse transition splits mass between staying masked and revealing") {
    VocabLayout layout = default_layout();
    TokenSequence xt;
    xt.prompt_len = 1;
    xt.ids = {1, 520, layout.mask_token_id};
    std::vector<std::vector<double>> probs(3);
    probs[2] = {0.25, 0.25, 0.25, 0.25};

    auto rows = reverse_transition(xt, 0.5, 1.0, probs, layout);
    REQUIRE(rows.size() == 3);

    REQUIRE_FALSE(rows[1].was_masked);
    REQUIRE(rows[1].kept_token == 520);  // unmasked tokens are kept with probability 1
    REQUIRE(rows[1].total() == Catch::Approx(1.0));

    REQUIRE(rows[2].was_masked);
    REQUIRE(rows[2].stay_masked == Catch::Approx(0.5).margin(1e-12));  // s/t
    REQUIRE(rows[2].reveal.size() == 4);
    for (double p : rows[2].reveal) {
        REQUIRE(p == Catch::Approx(0.125).margin(1e-12));  // (t-s)/t * 0.25
    }
    REQUIRE(rows[2].total() == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("reverse transition validates times and distributions") {
    VocabLayout layout = default_layout();
    TokenSequence xt;
    xt.prompt_len = 0;
    xt.ids = {layout.mask_token_id};
    std::vector<std::vector<double>> probs(1);
    probs[0] = {0.5, 0.5};

    REQUIRE_THROWS_AS(reverse_transition(xt, 0.7, 0.7, probs, layout), std::invalid_argument);
    REQUIRE_THROWS_AS(reverse_transition(xt, 0.8, 0.7, probs, layout), std::invalid_argument);

    std::vector<std::vector<double>> bad(1);
    bad[0] = {0.5, 0.6};  // not normalized
    REQUIRE_THROWS_AS(reverse_transition(xt, 0.3, 0.7, bad, layout), std::invalid_argument);

    std::vector<std::vector<double>> missing(1);  // no distribution for the masked slot
    REQUIRE_THROWS_AS(reverse_transition(xt, 0.3, 0.7, missing, layout), std::invalid_argument);
}

TEST_CASE("masked cross entropy oracle values") {
    // Two rows of 4 uniform logits; row 1 ignored. Mean CE = ln 4.
    std::vector<double> logits = {0, 0, 0, 0, 0, 0, 0, 0};
    std::vector<int> labels = {0, kIgnoreLabel};

    double plain = masked_cross_entropy(logits, 4, labels, 0.5, LossWeighting::plain_mean);
    REQUIRE(plain == Catch::Approx(1.3862943611198906).margin(1e-12));

    double weighted = masked_cross_entropy(logits, 4, labels, 0.5, LossWeighting::inverse_time);
    REQUIRE(weighted == Catch::Approx(2.772588722239781).margin(1e-12));  // (1/t) * ln 4

    // Known-logits row [1,2,3,4] with label 3: CE = logsumexp - 4.
    std::vector<double> row = {1, 2, 3, 4};
    std::vector<int> lab = {3};
    double ce = masked_cross_entropy(row, 4, lab, 1.0, LossWeighting::plain_mean);
    REQUIRE(ce == Catch::Approx(0.4401896985611957).margin(1e-12));
}

TEST_CASE("masked cross entropy error contract") {
    std::vector<double> logits = {0, 0, 0, 0};
    std::vector<int> all_ignored = {kIgnoreLabel};
    REQUIRE_THROWS_AS(
        masked_cross_entropy(logits, 4, all_ignored, 0.5, LossWeighting::plain_mean),
        std::invalid_argument);

    std::vector<int> bad_label = {7};
    REQUIRE_THROWS_AS(masked_cross_entropy(logits, 4, bad_label, 0.5, LossWeighting::plain_mean),
                      std::invalid_argument);

    std::vector<int> label = {0};
    REQUIRE_THROWS_AS(masked_cross_entropy(logits, 4, label, 0.0, LossWeighting::inverse_time),
                      std::invalid_argument);
}

TEST_CASE("mean loss of averaging matches the weighting modes") {
    // Same logits, two masked rows with different labels; inverse-time at t=1
    // coincides with the plain mean.
    std::vector<double> logits = {1, 2, 3, 4, 1, 2, 3, 4};
    std::vector<int> labels = {0, 3};
    double a = masked_cross_entropy(logits, 4, labels, 1.0, LossWeighting::inverse_time);
    double b = masked_cross_entropy(logits, 4, labels, 1.0, LossWeighting::plain_mean);
    REQUIRE(a == Catch::Approx(b).margin(1e-15));
}
