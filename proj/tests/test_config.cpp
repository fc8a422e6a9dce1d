#include <catch2/catch_amalgamated.hpp>

#include <stdexcept>
#include <string>

#include "diffact/config.hpp"

using namespace diffact;

TEST_CASE("defaults validate and hash deterministically") {
    RunConfig cfg;
    REQUIRE_NOTHROW(cfg.validate());
    std::string h = cfg.hash();
    REQUIRE(h.size() == 16);
    REQUIRE(h.find_first_not_of("0123456789abcdef") == std::string::npos);
    REQUIRE(cfg.hash() == h);
    REQUIRE(cfg.canonical_text() == RunConfig{}.canonical_text());
}

TEST_CASE("config file parsing") {
    const std::string text =
        "# data generation knobs\n"
        "[run]\n"
        "seed = 17\n"
        "\n"
        "[env]\n"
        "episodes = 200\n"
        "chunk = 5\n"
        "; decode section\n"
        "[decode]\n"
        "strategy = vanilla\n"
        "temperature = 0.7\n"
        "[train]\n"
        "lr = 1e-3\n"
        "epochs = 2\n";
    RunConfig cfg = parse_run_config(text);
    REQUIRE(cfg.seed == 17);
    REQUIRE(cfg.episodes == 200);
    REQUIRE(cfg.decode_strategy == DecodeStrategy::vanilla);
    REQUIRE(cfg.decode_temperature == Catch::Approx(0.7));
    REQUIRE(cfg.lr == Catch::Approx(1e-3));
    REQUIRE(cfg.epochs == 2);
    // Untouched fields keep their defaults.
    REQUIRE(cfg.embed_dim == 128);
    REQUIRE(cfg.chunk == 5);
}

TEST_CASE("config parse errors carry line context") {
    REQUIRE_THROWS_WITH(parse_run_config("[run]\nseed 17\n"),
                        Catch::Matchers::ContainsSubstring("line 2"));
    REQUIRE_THROWS_WITH(parse_run_config("seed = 17\n"),
                        Catch::Matchers::ContainsSubstring("outside any"));
    REQUIRE_THROWS_WITH(parse_run_config("[run\nseed = 17\n"),
                        Catch::Matchers::ContainsSubstring("section"));
    REQUIRE_THROWS_WITH(parse_run_config("[run]\nbogus = 17\n"),
                        Catch::Matchers::ContainsSubstring("unknown config key: run.bogus"));
    REQUIRE_THROWS_WITH(parse_run_config("[train]\nlr = fast\n"),
                        Catch::Matchers::ContainsSubstring("train.lr"));
    REQUIRE_THROWS_WITH(parse_run_config("[decode]\nstrategy = magic\n"),
                        Catch::Matchers::ContainsSubstring("vanilla|hierarchical"));
}

TEST_CASE("flag overrides fold into the canonical form") {
    RunConfig from_file = parse_run_config("[train]\nbatch = 16\n[run]\nseed = 9\n");
    RunConfig from_sets;
    from_sets.set("train.batch", "16");
    from_sets.set("run.seed", "9");
    REQUIRE(from_file.hash() == from_sets.hash());
    REQUIRE(from_file.hash() != RunConfig{}.hash());

    RunConfig cfg;
    std::string before = cfg.hash();
    cfg.set("decode.selection", "sample");
    REQUIRE(cfg.hash() != before);
    REQUIRE_THROWS_AS(cfg.set("nope.nothing", "1"), std::invalid_argument);
}

TEST_CASE("output paths do not affect the config hash") {
    RunConfig a;
    RunConfig b;
    b.set("paths.dataset", "/elsewhere/train.jsonl");
    b.set("paths.checkpoint", "/elsewhere/model.ckpt");
    b.set("paths.report_dir", "/elsewhere");
    REQUIRE(a.hash() == b.hash());
    REQUIRE(b.dataset_path == "/elsewhere/train.jsonl");
}

TEST_CASE("micro profile shrinks the run") {
    RunConfig cfg;
    cfg.apply_profile("micro");
    REQUIRE(cfg.embed_dim == 32);
    REQUIRE(cfg.layers == 2);
    REQUIRE(cfg.episodes == 64);
    REQUIRE(cfg.epochs == 1);
    REQUIRE_NOTHROW(cfg.validate());
    REQUIRE(cfg.hash() != RunConfig{}.hash());
    REQUIRE_THROWS_AS(RunConfig{}.apply_profile("jumbo"), std::invalid_argument);
    RunConfig untouched;
    untouched.apply_profile("default");
    REQUIRE(untouched.hash() == RunConfig{}.hash());
}

TEST_CASE("validation rejects inconsistent settings") {
    RunConfig cfg;
    cfg.chunk = 0;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);

    cfg = RunConfig{};
    cfg.max_seq_len = 10;  // 4 + 35 answer tokens will not fit
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);

    cfg = RunConfig{};
    cfg.first_m = 9;  // > chunk
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);

    cfg = RunConfig{};
    cfg.percentile_lo = 99.0;
    cfg.percentile_hi = 1.0;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);

    // Hierarchical decoding needs total_steps = chunk * iters_per_action.
    cfg = RunConfig{};
    cfg.chunk = 3;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.decode_total_steps = 6;
    REQUIRE_NOTHROW(cfg.validate());
    // Vanilla decoding has no such tie.
    cfg = RunConfig{};
    cfg.chunk = 3;
    cfg.decode_strategy = DecodeStrategy::vanilla;
    REQUIRE_NOTHROW(cfg.validate());
}

TEST_CASE("derived model config follows the head mode") {
    RunConfig cfg;
    PredictorConfig local = cfg.make_predictor_config();
    REQUIRE(local.classes_out == 32);
    REQUIRE(local.vocab_in == 545);
    REQUIRE(local.cond_dim == 24);

    cfg.localized_head = false;
    PredictorConfig full = cfg.make_predictor_config();
    REQUIRE(full.classes_out == 544);  // V + V_a baseline head
    REQUIRE(full.vocab_in == 545);

    DecodeConfig dc = cfg.make_decode_config(123);
    REQUIRE(dc.seed == 123);
    REQUIRE(dc.total_steps == 10);
    REQUIRE(dc.strategy == DecodeStrategy::hierarchical);
}
