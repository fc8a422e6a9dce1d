#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <json.hpp>
#include <vector>

#include "diffact/rng.hpp"
#include "diffact/vocab.hpp"

using namespace diffact;

static VocabLayout default_layout() { return VocabLayout::make(512, 32); }

TEST_CASE("layout id arithmetic") {
    VocabLayout layout = default_layout();
    REQUIRE(layout.vocab_total() == 544);
    REQUIRE(layout.vocab_in() == 545);
    REQUIRE(layout.special_token_base == 512);
    REQUIRE(layout.mask_token_id == 544);
    REQUIRE(layout.ignore_label == -100);
    layout.validate();
}

TEST_CASE("special block membership boundaries") {
    VocabLayout layout = default_layout();
    REQUIRE_FALSE(layout.is_special(511));
    REQUIRE(layout.is_special(512));
    REQUIRE(layout.is_special(543));
    REQUIRE_FALSE(layout.is_special(544));  // mask is not a label class
    REQUIRE_FALSE(layout.is_special(0));
}

TEST_CASE("map_local sends non-special ids to the ignore sentinel") {
    VocabLayout layout = default_layout();
    REQUIRE(layout.map_local(512) == 0);
    REQUIRE(layout.map_local(517) == 5);
    REQUIRE(layout.map_local(543) == 31);
    REQUIRE(layout.map_local(10) == -100);
    REQUIRE(layout.map_local(511) == -100);
    REQUIRE(layout.map_local(layout.mask_token_id) == -100);
}

TEST_CASE("unmap_local round trip is exhaustive over all classes") {
    VocabLayout layout = default_layout();
    REQUIRE(layout.unmap_local(0) == 512);
    REQUIRE(layout.unmap_local(31) == 543);
    for (int k = 0; k < 32; ++k) {
        int id = layout.unmap_local(k);
        REQUIRE(layout.is_special(id));
        REQUIRE(layout.map_local(id) == k);
    }
    for (int id = 512; id < 544; ++id) {
        REQUIRE(layout.unmap_local(layout.map_local(id)) == id);
    }
    REQUIRE_THROWS_AS(layout.unmap_local(-1), std::out_of_range);
    REQUIRE_THROWS_AS(layout.unmap_local(32), std::out_of_range);
}

TEST_CASE("layout JSON round trip uses the documented field names") {
    VocabLayout layout = default_layout();
    nlohmann::json j = layout;
    REQUIRE(j.at("base_vocab_size") == 512);
    REQUIRE(j.at("action_vocab_size") == 32);
    REQUIRE(j.at("mask_token_id") == 544);
    REQUIRE(j.at("special_token_base") == 512);
    VocabLayout back = j.get<VocabLayout>();
    REQUIRE(back == layout);
}

static BinSpec unit_bins() {
    BinSpec bins;
    for (int d = 0; d < kActionDims; ++d) {
        bins.lo[static_cast<std::size_t>(d)] = -1.0;
        bins.hi[static_cast<std::size_t>(d)] = 1.0;
    }
    bins.bins = 32;
    return bins;
}

TEST_CASE("bin index oracle on [-1,1] with 32 bins") {
    BinSpec bins = unit_bins();
    // width 0.0625; x=0 -> floor(1/0.0625) = 16.
    REQUIRE(bins.bin_of(0, 0.0) == 16);
    REQUIRE(bins.bin_of(0, -1.0) == 0);
    REQUIRE(bins.bin_of(0, 1.0) == 31);   // clamped upper edge
    REQUIRE(bins.bin_of(0, -5.0) == 0);   // clipped below
    REQUIRE(bins.bin_of(0, 5.0) == 31);   // clipped above
    // Exact interior edge goes to the higher bin (half-open intervals).
    REQUIRE(bins.bin_of(0, -1.0 + 0.0625) == 1);
    REQUIRE(bins.center(0, 16) == Catch::Approx(0.03125).margin(1e-12));
}

TEST_CASE("bin index is monotone in the value") {
    BinSpec bins = unit_bins();
    Rng rng(404);
    for (int i = 0; i < 2000; ++i) {
        double x = rng.uniform(-1.5, 1.5);
        double y = rng.uniform(-1.5, 1.5);
        if (x > y) std::swap(x, y);
        REQUIRE(bins.bin_of(3, x) <= bins.bin_of(3, y));
    }
}

TEST_CASE("percentile interpolation oracle") {
    std::vector<double> xs;
    for (int i = 1; i <= 100; ++i) xs.push_back(static_cast<double>(i));
    REQUIRE(percentile_sorted(xs, 1.0) == Catch::Approx(1.99).margin(1e-12));
    REQUIRE(percentile_sorted(xs, 99.0) == Catch::Approx(99.01).margin(1e-12));
    REQUIRE(percentile_sorted(xs, 0.0) == Catch::Approx(1.0));
    REQUIRE(percentile_sorted(xs, 100.0) == Catch::Approx(100.0));
}

TEST_CASE("fit_bins uses 1st/99th percentiles and widens degenerate dims") {
    Rng rng(7);
    std::vector<ActionVector> data;
    for (int i = 0; i < 20000; ++i) {
        ActionVector a{};
        a[0] = rng.uniform(-1.0, 1.0);
        for (int d = 1; d < kActionDims - 1; ++d) {
            a[d] = rng.normal();
        }
        a[6] = 0.0;  // constant dimension
        data.push_back(a);
    }
    BinSpec bins = fit_bins(data, 32);
    REQUIRE(bins.bins == 32);
    // Uniform on [-1,1]: 1st/99th percentiles near +-0.98.
    REQUIRE(bins.lo[0] == Catch::Approx(-0.98).margin(0.01));
    REQUIRE(bins.hi[0] == Catch::Approx(0.98).margin(0.01));
    // Constant dimension widened to +-1e-3 around the value.
    REQUIRE(bins.lo[6] == Catch::Approx(-1e-3).margin(1e-12));
    REQUIRE(bins.hi[6] == Catch::Approx(1e-3).margin(1e-12));
    bins.validate();

    REQUIRE_THROWS_AS(fit_bins(std::vector<ActionVector>{}, 32), std::invalid_argument);
}

TEST_CASE("tokenize maps into S and detokenize recovers bin centers") {
    VocabLayout layout = default_layout();
    BinSpec bins = unit_bins();
    ActionVector a{};
    a.c = {-1.0, 0.0, 0.999, -2.0, 2.0, 0.5, 1.0};
    auto toks = tokenize_action(a, bins, layout);
    REQUIRE(toks.size() == static_cast<std::size_t>(kActionDims));
    for (int t : toks) REQUIRE(layout.is_special(t));
    REQUIRE(toks[0] == 512);       // lower edge -> s_0
    REQUIRE(toks[1] == 512 + 16);  // 0.0 -> bin 16
    REQUIRE(toks[4] == 543);       // clipped above -> s_31

    ActionVector back = detokenize(toks, bins, layout);
    double width = 2.0 / 32.0;
    for (int d = 0; d < kActionDims; ++d) {
        double clipped = std::min(1.0, std::max(-1.0, a[d]));
        REQUIRE(std::abs(back[d] - clipped) <= width / 2 + 1e-12);
    }
}

TEST_CASE("round trip within half a bin for 10000 random actions") {
    VocabLayout layout = default_layout();
    BinSpec bins = unit_bins();
    double width = 2.0 / 32.0;
    Rng rng(2024);
    for (int i = 0; i < 10000; ++i) {
        ActionVector a{};
        for (int d = 0; d < kActionDims; ++d) {
            a[d] = rng.uniform(-1.0, 1.0);
        }
        ActionVector back = detokenize(tokenize_action(a, bins, layout), bins, layout);
        for (int d = 0; d < kActionDims; ++d) {
            REQUIRE(std::abs(back[d] -
                             a[d]) <= width / 2 + 1e-12);
        }
    }
}

TEST_CASE("detokenize rejects ids outside S with position info") {
    VocabLayout layout = default_layout();
    BinSpec bins = unit_bins();
    std::vector<int> toks(static_cast<std::size_t>(kActionDims), 512);
    toks[3] = layout.mask_token_id;
    REQUIRE_THROWS_WITH(detokenize(toks, bins, layout),
                        Catch::Matchers::ContainsSubstring("position 3") &&
                            Catch::Matchers::ContainsSubstring("544"));
    toks[3] = 10;  // base-vocab token
    REQUIRE_THROWS(detokenize(toks, bins, layout));
}

TEST_CASE("chunk serialization is row-major and round trips") {
    VocabLayout layout = default_layout();
    BinSpec bins = unit_bins();
    ActionChunk chunk;
    Rng rng(55);
    for (int k = 0; k < 5; ++k) {
        ActionVector a{};
        for (int d = 0; d < kActionDims; ++d) {
            a[d] = rng.uniform(-1.0, 1.0);
        }
        chunk.steps.push_back(a);
    }
    std::vector<int> flat = tokenize_chunk(chunk, bins, layout);
    REQUIRE(flat.size() == 35);
    // Row-major: element k*D + d tokenizes step k, component d.
    auto first = tokenize_action(chunk.steps[0], bins, layout);
    auto third = tokenize_action(chunk.steps[2], bins, layout);
    for (int d = 0; d < kActionDims; ++d) {
        REQUIRE(flat[static_cast<std::size_t>(d)] == first[static_cast<std::size_t>(d)]);
        REQUIRE(flat[static_cast<std::size_t>(2 * kActionDims + d)] ==
                third[static_cast<std::size_t>(d)]);
    }
    ActionChunk back = chunk_from_tokens(flat, bins, layout);
    REQUIRE(back.steps.size() == 5);
    std::vector<int> again = tokenize_chunk(back, bins, layout);
    REQUIRE(again == flat);  // token form -> chunk -> token form is identity
}

TEST_CASE("bin spec JSON uses lo/hi/bins per dimension") {
    BinSpec bins = unit_bins();
    nlohmann::json j = bins;
    REQUIRE(j.at("dims").size() == static_cast<std::size_t>(kActionDims));
    REQUIRE(j.at("dims")[0].at("lo") == -1.0);
    REQUIRE(j.at("dims")[0].at("hi") == 1.0);
    REQUIRE(j.at("dims")[0].at("bins") == 32);
    BinSpec back = j.get<BinSpec>();
    REQUIRE(back == bins);
}
