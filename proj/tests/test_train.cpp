#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "diffact/checkpoint.hpp"
#include "diffact/data.hpp"
#include "diffact/train.hpp"

using namespace diffact;

namespace {

PredictorConfig micro_train_config(int classes_out) {
    PredictorConfig cfg;
    cfg.embed_dim = 32;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.max_seq_len = 48;
    cfg.vocab_in = 545;
    cfg.classes_out = classes_out;
    cfg.cond_dim = 24;
    cfg.n_tasks = 4;
    cfg.obs_prefix_len = 3;
    return cfg;
}

// Small expert dataset tokenized with fitted bins; shared across cases.
std::vector<TrainingExample> make_examples(int episodes, int k, const VocabLayout& layout,
                                           BinSpec* bins_out = nullptr) {
    std::vector<EpisodeRecord> recs;
    for (int i = 0; i < episodes; ++i) {
        EpisodeRecord rec = run_expert_episode(derive_seed(4242, static_cast<std::uint64_t>(i)));
        if (rec.success) recs.push_back(std::move(rec));
    }
    REQUIRE(recs.size() >= static_cast<std::size_t>(episodes) / 2);
    BinSpec bins = fit_bins(all_actions(recs), layout.action_vocab_size);
    if (bins_out) *bins_out = bins;
    return build_training_set(recs, bins, layout, k, 4);
}

}  // namespace

TEST_CASE("mask-ratio draws respect the configured floor") {
    Rng rng = Rng::substream(17, "t_floor");
    double lo = 1.0, hi = 0.0;
    for (int i = 0; i < 20000; ++i) {
        double t = draw_mask_ratio(rng, 0.05);
        REQUIRE(t > 0.05);
        REQUIRE(t <= 1.0);
        lo = std::min(lo, t);
        hi = std::max(hi, t);
    }
    // The draws actually fill the interval (floor matters, ceiling reached).
    REQUIRE(lo < 0.06);
    REQUIRE(hi > 0.99);
    // The floor bounds the inverse-time loss weight.
    REQUIRE(1.0 / lo <= 20.0);

    TrainConfig tc;
    tc.t_min = 1.0;
    REQUIRE_THROWS_AS(tc.validate(), std::invalid_argument);
    tc.t_min = -0.1;
    REQUIRE_THROWS_AS(tc.validate(), std::invalid_argument);
}

TEST_CASE("labels mark masked answer positions only") {
    VocabLayout layout = VocabLayout::make(512, 32);
    TokenSequence x0;
    x0.ids = {2, 0, 0, 0, 515, 520, 543};
    x0.prompt_len = 4;
    TokenSequence xt = x0;
    xt.ids[4] = layout.mask_token_id;
    xt.ids[6] = layout.mask_token_id;

    std::vector<int> local = build_labels(x0, xt, layout, true);
    REQUIRE(local == std::vector<int>{-100, -100, -100, -100, 3, -100, 31});
    std::vector<int> full = build_labels(x0, xt, layout, false);
    REQUIRE(full == std::vector<int>{-100, -100, -100, -100, 515, -100, 543});
}

TEST_CASE("adamw first step moves by about lr in gradient sign") {
    Predictor<float> model(micro_train_config(32), 3);
    std::vector<float> before = model.params();
    AdamState adam;
    TrainConfig tc;
    tc.lr = 0.01;
    tc.weight_decay = 0.0;
    tc.clip_norm = 1e12;  // effectively no clipping

    std::vector<float> grad(model.param_count());
    Rng rng(5);
    for (float& g : grad) g = static_cast<float>(rng.uniform(-1.0, 1.0));
    adamw_step(model, adam, grad, tc);

    REQUIRE(adam.step == 1);
    // With bias correction, step 1 is -lr * g/(|g| + eps') ~= -lr * sign(g).
    for (std::size_t i = 0; i < model.param_count(); i += 97) {
        if (std::abs(grad[i]) < 1e-3) continue;  // sign approx degrades near zero
        double delta = static_cast<double>(model.params()[i]) - before[i];
        double expect = -tc.lr * (grad[i] > 0 ? 1.0 : -1.0);
        REQUIRE(delta == Catch::Approx(expect).margin(tc.lr * 1e-4));
    }
}

TEST_CASE("weight decay is decoupled and flag-gated") {
    Predictor<float> model(micro_train_config(32), 3);
    AdamState adam;
    TrainConfig tc;
    tc.lr = 0.1;
    tc.weight_decay = 0.5;

    const TensorSpec& gain = model.spec("layer0.ln1_g");   // decay = false, init 1.0
    const TensorSpec& head = model.spec("head_w");         // decay = true
    REQUIRE_FALSE(gain.decay);
    REQUIRE(head.decay);
    float head_before = model.params()[head.offset];

    std::vector<float> grad(model.param_count(), 0.0f);  // zero gradient isolates decay
    adamw_step(model, adam, grad, tc);

    REQUIRE(model.params()[gain.offset] == 1.0f);  // no decay on norm gains
    REQUIRE(model.params()[head.offset] ==
            Catch::Approx(head_before * (1.0 - tc.lr * tc.weight_decay)).margin(1e-9));
}

TEST_CASE("gradient clipping rescales to the configured norm") {
    Predictor<float> a(micro_train_config(32), 3);
    Predictor<float> b(micro_train_config(32), 3);
    AdamState adam_a, adam_b;
    TrainConfig clipped;
    clipped.lr = 0.01;
    clipped.weight_decay = 0.0;
    clipped.clip_norm = 1.0;
    TrainConfig unclipped = clipped;
    unclipped.clip_norm = 1e12;

    std::vector<float> grad(a.param_count(), 0.0f);
    grad[10] = 30.0f;
    grad[20] = 40.0f;  // norm = 50, so clip scale = 1/50
    adamw_step(a, adam_a, grad, clipped);

    std::vector<float> scaled(b.param_count(), 0.0f);
    scaled[10] = 30.0f / 50.0f;
    scaled[20] = 40.0f / 50.0f;
    adamw_step(b, adam_b, scaled, unclipped);

    for (std::size_t i : {std::size_t{10}, std::size_t{20}, std::size_t{0}}) {
        REQUIRE(a.params()[i] == Catch::Approx(b.params()[i]).margin(1e-9));
    }
}

TEST_CASE("training reduces the loss and is reproducible") {
    VocabLayout layout = VocabLayout::make(512, 32);
    std::vector<TrainingExample> examples = make_examples(64, 5, layout);
    REQUIRE(examples.size() >= 200);

    TrainConfig tc;
    tc.batch = 32;
    tc.epochs = (200 * tc.batch) / static_cast<int>(examples.size()) + 2;
    tc.seed = 11;

    Predictor<float> model(micro_train_config(32), derive_seed(11, "model"));
    AdamState adam;
    TrainResult res = train_predictor(model, adam, examples, layout, tc);
    REQUIRE(res.steps >= 200);
    REQUIRE(res.loss_curve.size() == static_cast<std::size_t>(res.steps));

    const double start = res.loss_curve.front().second;
    const double smoothed = smoothed_loss(res.loss_curve, 200, 10);
    INFO("loss start " << start << " smoothed@200 " << smoothed);
    REQUIRE(smoothed < start);
    for (const auto& [step, loss] : res.loss_curve) REQUIRE(std::isfinite(loss));

    // Bitwise reproducibility of the whole run.
    Predictor<float> model2(micro_train_config(32), derive_seed(11, "model"));
    AdamState adam2;
    TrainResult res2 = train_predictor(model2, adam2, examples, layout, tc);
    REQUIRE(model.params() == model2.params());
    REQUIRE(adam.m == adam2.m);
    REQUIRE(res.loss_curve == res2.loss_curve);
}

TEST_CASE("resume from checkpoint is byte-identical") {
    VocabLayout layout = VocabLayout::make(512, 32);
    BinSpec bins;
    std::vector<TrainingExample> examples = make_examples(24, 5, layout, &bins);

    TrainConfig tc;
    tc.batch = 32;
    tc.epochs = 4;
    tc.seed = 21;

    // Uninterrupted run.
    Predictor<float> full(micro_train_config(32), derive_seed(21, "model"));
    AdamState full_adam;
    train_predictor(full, full_adam, examples, layout, tc);

    // Two epochs, checkpoint, reload, finish.
    Predictor<float> part(micro_train_config(32), derive_seed(21, "model"));
    AdamState part_adam;
    TrainConfig half = tc;
    half.epochs = 2;
    train_predictor(part, part_adam, examples, layout, half);

    const std::string path =
        (std::filesystem::temp_directory_path() / "diffact_resume.ckpt").string();
    save_checkpoint(path, part, layout, bins, "cfg", tc.seed, &part_adam);
    Checkpoint ckpt = load_checkpoint(path);
    std::remove(path.c_str());

    Predictor<float> resumed = ckpt.make_predictor();
    AdamState resumed_adam = ckpt.adam;
    train_predictor(resumed, resumed_adam, examples, layout, tc);

    REQUIRE(resumed.params() == full.params());
    REQUIRE(resumed_adam.m == full_adam.m);
    REQUIRE(resumed_adam.v == full_adam.v);
    REQUIRE(resumed_adam.step == full_adam.step);
}

TEST_CASE("full-vocab labels train the wide head") {
    VocabLayout layout = VocabLayout::make(512, 32);
    std::vector<TrainingExample> examples = make_examples(8, 5, layout);

    TrainConfig tc;
    tc.batch = 16;
    tc.epochs = 1;
    tc.localized_head = false;
    Predictor<float> model(micro_train_config(layout.vocab_total()), 1);
    AdamState adam;
    TrainResult res = train_predictor(model, adam, examples, layout, tc);
    for (const auto& [step, loss] : res.loss_curve) REQUIRE(std::isfinite(loss));
    REQUIRE(adam.step == res.steps);
}

TEST_CASE("divergence aborts with a diagnostic") {
    VocabLayout layout = VocabLayout::make(512, 32);
    std::vector<TrainingExample> examples = make_examples(8, 5, layout);
    TrainConfig tc;
    tc.batch = 8;
    tc.epochs = 3;
    tc.lr = 1e8;  // guaranteed blow-up
    Predictor<float> model(micro_train_config(32), 1);
    AdamState adam;
    REQUIRE_THROWS_AS(train_predictor(model, adam, examples, layout, tc), std::runtime_error);
}

TEST_CASE("localized head can only emit action tokens") {
    VocabLayout layout = VocabLayout::make(512, 32);
    Predictor<float> model(micro_train_config(32), 31);
    TokenSequence seq;
    seq.ids.assign(4, 0);
    seq.prompt_len = 4;
    seq.ids.insert(seq.ids.end(), 35, layout.mask_token_id);
    ConditioningInput cond;
    cond.observation.assign(24, 0.1);
    cond.task_id = 2;
    std::vector<double> logits = model.forward_logits(seq, cond);
    const int classes = 32;
    for (int row = 4; row < seq.size(); ++row) {
        int best = 0;
        for (int c = 1; c < classes; ++c) {
            if (logits[static_cast<std::size_t>(row) * classes + c] >
                logits[static_cast<std::size_t>(row) * classes + best]) {
                best = c;
            }
        }
        REQUIRE(layout.is_special(layout.unmap_local(best)));
    }
}
