#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "diffact/env.hpp"
#include "diffact/rng.hpp"

using namespace diffact;

TEST_CASE("reset is deterministic in the seed") {
    Env a, b;
    auto oa = a.reset(123, 2);
    auto ob = b.reset(123, 2);
    REQUIRE(oa == ob);
    REQUIRE(a.state().gripper_pos == std::array<double, 3>{0.5, 0.5, 0.25});
    REQUIRE(a.state().gripper_open);
    REQUIRE(a.task().task_id == 2);

    auto oc = b.reset(124, 2);
    REQUIRE(oa != oc);
}

TEST_CASE("reset respects the pairwise separation over 1000 seeds") {
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        Env env;
        env.reset(seed);
        std::vector<std::array<double, 3>> pts;
        for (const auto& o : env.state().objects) pts.push_back(o.pos);
        for (const auto& t : env.state().targets) pts.push_back(t.pos);
        REQUIRE(pts.size() == 4);
        for (std::size_t i = 0; i < pts.size(); ++i) {
            REQUIRE(pts[i][0] >= 0.1);
            REQUIRE(pts[i][0] <= 0.9);
            REQUIRE(pts[i][1] >= 0.1);
            REQUIRE(pts[i][1] <= 0.9);
            for (std::size_t j = i + 1; j < pts.size(); ++j) {
                double dx = pts[i][0] - pts[j][0], dy = pts[i][1] - pts[j][1];
                REQUIRE(std::sqrt(dx * dx + dy * dy) >= kMinSeparation);
            }
        }
    }
}

TEST_CASE("observation width follows the documented layout") {
    REQUIRE(kObservationDim == 3 + 1 + 4 * (3 + 1) + kNumTasks);
    Env env;
    auto obs = env.reset(5, 1);
    REQUIRE(obs.size() == static_cast<std::size_t>(kObservationDim));
    // Task one-hot occupies the last kNumTasks slots.
    REQUIRE(obs[static_cast<std::size_t>(kObservationDim - 4 + 1)] == 1.0);
    REQUIRE(obs[static_cast<std::size_t>(kObservationDim - 4)] == 0.0);
}

TEST_CASE("zero action leaves the world unchanged") {
    Env env;
    env.reset(7, 0);
    WorldState before = env.state();
    ActionVector zero{};
    zero[6] = 1.0;  // keep commanding open
    env.step(zero);
    const WorldState& after = env.state();
    REQUIRE(after.gripper_pos == before.gripper_pos);
    REQUIRE(after.gripper_open == before.gripper_open);
    REQUIRE(after.objects[0].pos == before.objects[0].pos);
    REQUIRE(after.objects[1].pos == before.objects[1].pos);
}

TEST_CASE("position deltas are clipped to the per-step limit") {
    Env env;
    env.reset(7, 0);
    double x0 = env.state().gripper_pos[0];
    ActionVector a{};
    a[0] = 0.2;  // over the limit
    a[6] = 1.0;
    env.step(a);
    REQUIRE(env.state().gripper_pos[0] == Catch::Approx(x0 + kPosClip).margin(1e-12));
}

TEST_CASE("closing near an object grasps it and the object tracks the gripper") {
    Env env;
    env.reset(42, 0);
    const auto obj = env.state().objects[0].pos;
    // Drive the gripper to 0.04 above the object, then close.
    ActionVector a{};
    a[6] = 1.0;
    for (int i = 0; i < 40 && (std::abs(env.state().gripper_pos[0] - obj[0]) > 1e-9 ||
                               std::abs(env.state().gripper_pos[1] - obj[1]) > 1e-9 ||
                               std::abs(env.state().gripper_pos[2] - 0.04) > 1e-9);
         ++i) {
        a[0] = obj[0] - env.state().gripper_pos[0];
        a[1] = obj[1] - env.state().gripper_pos[1];
        a[2] = 0.04 - env.state().gripper_pos[2];
        env.step(a);
    }
    REQUIRE_FALSE(env.state().objects[0].held);
    ActionVector close{};
    close[6] = 0.0;
    env.step(close);
    REQUIRE(env.state().objects[0].held);

    // Held object follows the gripper.
    ActionVector move{};
    move[0] = 0.05;
    move[2] = 0.08;
    move[6] = 0.0;
    env.step(move);
    REQUIRE(env.state().objects[0].pos == env.state().gripper_pos);

    // Opening releases it in place.
    ActionVector open{};
    open[6] = 1.0;
    env.step(open);
    REQUIRE_FALSE(env.state().objects[0].held);
}

TEST_CASE("closing far from every object grasps nothing") {
    Env env;
    env.reset(42, 0);
    ActionVector close{};
    close[6] = 0.0;  // gripper starts at z=0.25, objects at z=0
    env.step(close);
    REQUIRE(env.state().held_index() == -1);
    REQUIRE_FALSE(env.state().gripper_open);
}

TEST_CASE("success boundary is a closed ball with height, held, and open conditions") {
    Env env;
    env.reset(9, 0);  // put red block on the plate
    WorldState s = env.state();
    TaskSpec task = env.task();
    // Pin the geometry to exactly representable values so "distance equals
    // radius" is meaningful in floating point.
    s.targets[0].pos = {0.5, 0.5, 0.0};
    s.targets[0].radius = 0.125;

    // Exactly on the radius boundary, resting, released, gripper open -> true.
    s.objects[0].pos = {0.625, 0.5, 0.0};
    s.objects[0].held = false;
    s.gripper_open = true;
    REQUIRE(task_success(s, task));

    // Just outside -> false.
    s.objects[0].pos[0] = 0.625 + 1e-9;
    REQUIRE_FALSE(task_success(s, task));

    // Centered but held above -> false.
    s.objects[0].pos = {0.5, 0.5, 0.2};
    s.objects[0].held = true;
    REQUIRE_FALSE(task_success(s, task));

    // Centered at height boundary -> false (strictly below required).
    s.objects[0].pos = {0.5, 0.5, kSuccessZ};
    s.objects[0].held = false;
    REQUIRE_FALSE(task_success(s, task));

    // Released in place but gripper closed -> false.
    s.objects[0].pos = {0.5, 0.5, 0.0};
    s.gripper_open = false;
    REQUIRE_FALSE(task_success(s, task));
}

TEST_CASE("scripted expert solves 500 seeded episodes within the horizon") {
    std::vector<int> lengths;
    for (std::uint64_t seed = 1000; seed < 1500; ++seed) {
        Env env;
        env.reset(seed);
        int steps = 0;
        while (!env.success() && steps < env.task().horizon_limit) {
            ActionVector a = scripted_expert(env.state(), env.task());
            for (int d = 0; d < 3; ++d) REQUIRE(std::abs(a[d]) <= kPosClip + 1e-12);
            for (int d = 3; d < 6; ++d) REQUIRE(a[d] == 0.0);
            env.step(a);
            ++steps;
        }
        REQUIRE(env.success());
        lengths.push_back(steps);
    }
    std::sort(lengths.begin(), lengths.end());
    int median = lengths[lengths.size() / 2];
    REQUIRE(median <= 40);
}

TEST_CASE("physics stays in bounds and finite under adversarial actions") {
    Env env;
    env.reset(77, 3);
    Rng rng(2121);
    for (int i = 0; i < 500; ++i) {
        ActionVector a{};
        for (int d = 0; d < kActionDims; ++d) {
            a[d] = rng.uniform(-100.0, 100.0);
        }
        auto obs = env.step(a);
        const auto& g = env.state().gripper_pos;
        REQUIRE(g[0] >= 0.0);
        REQUIRE(g[0] <= 1.0);
        REQUIRE(g[1] >= 0.0);
        REQUIRE(g[1] <= 1.0);
        REQUIRE(g[2] >= 0.0);
        REQUIRE(g[2] <= kTableZ);
        for (double v : obs) REQUIRE(std::isfinite(v));
        REQUIRE(std::isfinite(env.state().yaw));
    }
}

TEST_CASE("expert completes the depth-2 chain in one world") {
    auto chain = chain_task_ids();
    REQUIRE(chain.size() == 2);
    Env env;
    env.reset(31415, chain[0]);
    for (int ti : chain) {
        env.set_task(ti);
        int steps = 0;
        while (!env.success() && steps < env.task().horizon_limit) {
            env.step(scripted_expert(env.state(), env.task()));
            ++steps;
        }
        REQUIRE(env.success());
    }
    // Both blocks ended in the bowl.
    const auto& bowl = env.state().targets[1];
    for (const auto& o : env.state().objects) {
        double dx = o.pos[0] - bowl.pos[0], dy = o.pos[1] - bowl.pos[1];
        REQUIRE(std::sqrt(dx * dx + dy * dy) <= bowl.radius);
    }
}

TEST_CASE("task templates reference distinct object/target pairs") {
    for (int t = 0; t < kNumTasks; ++t) {
        TaskSpec spec = make_task(t);
        REQUIRE(spec.task_id == t);
        REQUIRE(spec.object_ref == t / 2);
        REQUIRE(spec.target_ref == t % 2);
        REQUIRE(spec.horizon_limit == kHorizonLimit);
        REQUIRE_FALSE(spec.description.empty());
    }
    REQUIRE_THROWS_AS(make_task(4), std::invalid_argument);
    REQUIRE_THROWS_AS(make_task(-1), std::invalid_argument);
}
