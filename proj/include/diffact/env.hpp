#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffact/rng.hpp"
#include "diffact/vocab.hpp"

namespace diffact {

// Planar tabletop with two colored blocks and two containers. All thresholds
// are fixed constants so behavioral tests can assert exact boundaries.
inline constexpr double kPosClip = 0.08;        // per-axis position delta limit
inline constexpr double kRotClip = 0.3;         // per-axis rotation delta limit (rad)
inline constexpr double kGraspRadius = 0.05;    // close within this 3D distance to pick
inline constexpr double kMinSeparation = 0.15;  // pairwise entity spacing at reset
inline constexpr double kSuccessZ = 0.1;        // object must sit below this height
inline constexpr int kHorizonLimit = 60;
inline constexpr double kTableZ = 0.5;          // workspace is [0,1]x[0,1]x[0,kTableZ]

enum class TargetKind { plate, bowl, box };

inline std::string to_string(TargetKind k) {
    switch (k) {
        case TargetKind::plate: return "plate";
        case TargetKind::bowl: return "bowl";
        case TargetKind::box: return "box";
    }
    throw std::logic_error("unknown target kind");
}

inline double target_radius(TargetKind k) {
    switch (k) {
        case TargetKind::plate: return 0.08;
        case TargetKind::bowl: return 0.07;
        case TargetKind::box: return 0.06;
    }
    throw std::logic_error("unknown target kind");
}

struct EnvObject {
    int object_id = 0;
    int color_id = 0;  // 0 = red, 1 = blue
    std::array<double, 3> pos{};
    bool held = false;
};

struct EnvTarget {
    int target_id = 0;
    TargetKind kind = TargetKind::plate;
    std::array<double, 3> pos{};
    double radius = 0.0;
};

struct WorldState {
    std::array<double, 3> gripper_pos{};
    double yaw = 0.0;  // rotation channel bookkeeping; no effect on grasping
    bool gripper_open = true;
    std::vector<EnvObject> objects;
    std::vector<EnvTarget> targets;

    int held_index() const {
        for (std::size_t i = 0; i < objects.size(); ++i) {
            if (objects[i].held) return static_cast<int>(i);
        }
        return -1;
    }
};

// "put <color> block on/in <target>". Four templates: 2 objects x 2 targets.
struct TaskSpec {
    int task_id = 0;
    std::string description;
    int object_ref = 0;  // index into WorldState::objects
    int target_ref = 0;  // index into WorldState::targets
    int horizon_limit = kHorizonLimit;
};

// True iff the task object rests inside the target: horizontal distance within
// the radius (closed ball), below the height threshold, released, and the
// gripper open.
inline bool task_success(const WorldState& state, const TaskSpec& task) {
    const EnvObject& obj = state.objects[static_cast<std::size_t>(task.object_ref)];
    const EnvTarget& tgt = state.targets[static_cast<std::size_t>(task.target_ref)];
    double dx = obj.pos[0] - tgt.pos[0];
    double dy = obj.pos[1] - tgt.pos[1];
    double horiz = std::sqrt(dx * dx + dy * dy);
    return horiz <= tgt.radius && obj.pos[2] < kSuccessZ && !obj.held && state.gripper_open;
}

inline constexpr int kNumTasks = 4;
inline constexpr int kNumObjects = 2;
inline constexpr int kNumTargets = 2;
// gripper pos + gripper flag + 4 entities x (pos + scalar) + task one-hot.
inline constexpr int kObservationDim = 3 + 1 + (kNumObjects + kNumTargets) * (3 + 1) + kNumTasks;

inline TaskSpec make_task(int task_id) {
    if (task_id < 0 || task_id >= kNumTasks) {
        throw std::invalid_argument("task_id " + std::to_string(task_id) + " outside [0, " +
                                    std::to_string(kNumTasks) + ")");
    }
    TaskSpec t;
    t.task_id = task_id;
    t.object_ref = task_id / 2;
    t.target_ref = task_id % 2;
    const char* color = t.object_ref == 0 ? "red" : "blue";
    TargetKind kind = t.target_ref == 0 ? TargetKind::plate : TargetKind::bowl;
    const char* prep = kind == TargetKind::plate ? "on" : "in";
    t.description = std::string("put ") + color + " block " + prep + " the " + to_string(kind);
    return t;
}

// Depth-2 chain for long-horizon evaluation: both blocks into the bowl.
inline std::vector<int> chain_task_ids() { return {1, 3}; }

class Env {
  public:
    // Deterministic reset. task_id = -1 samples a task uniformly from the seed.
    // The task draw uses its own substream so that resetting with the sampled
    // task id spelled out reproduces the identical world (replay contract).
    std::vector<double> reset(std::uint64_t seed, int task_id = -1) {
        if (task_id < 0) {
            Rng task_rng = Rng::substream(seed, "env_task");
            task_id = static_cast<int>(task_rng.uniform_int(kNumTasks));
        }
        Rng rng = Rng::substream(seed, "env_reset");
        task_ = make_task(task_id);

        state_ = WorldState{};
        state_.gripper_pos = {0.5, 0.5, 0.25};
        state_.gripper_open = true;

        std::vector<std::array<double, 3>> placed;
        auto place = [&]() {
            // Rejection sample against everything placed so far; the acceptance
            // region is large, so this terminates quickly in practice.
            for (int attempt = 0; attempt < 10000; ++attempt) {
                std::array<double, 3> p = {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), 0.0};
                bool ok = true;
                for (const auto& q : placed) {
                    double dx = p[0] - q[0], dy = p[1] - q[1];
                    if (std::sqrt(dx * dx + dy * dy) < kMinSeparation) ok = false;
                }
                if (ok) {
                    placed.push_back(p);
                    return p;
                }
            }
            throw std::runtime_error("reset: placement rejection sampling failed");
        };

        for (int i = 0; i < kNumObjects; ++i) {
            EnvObject o;
            o.object_id = i;
            o.color_id = i;
            o.pos = place();
            state_.objects.push_back(o);
        }
        TargetKind kinds[kNumTargets] = {TargetKind::plate, TargetKind::bowl};
        for (int i = 0; i < kNumTargets; ++i) {
            EnvTarget t;
            t.target_id = i;
            t.kind = kinds[i];
            t.pos = place();
            t.radius = target_radius(t.kind);
            state_.targets.push_back(t);
        }
        steps_taken_ = 0;
        return observe();
    }

    // Switch the active task without touching the world (chained evaluation).
    void set_task(int task_id) { task_ = make_task(task_id); }

    // Apply one delta action: clip, move, handle gripper transitions. Total
    // function — any input yields a valid in-bounds state.
    std::vector<double> step(const ActionVector& action) {
        auto clip = [](double v, double lim) { return std::clamp(v, -lim, lim); };
        for (int a = 0; a < 3; ++a) {
            state_.gripper_pos[static_cast<std::size_t>(a)] +=
                clip(action[a], kPosClip);
        }
        state_.gripper_pos[0] = std::clamp(state_.gripper_pos[0], 0.0, 1.0);
        state_.gripper_pos[1] = std::clamp(state_.gripper_pos[1], 0.0, 1.0);
        state_.gripper_pos[2] = std::clamp(state_.gripper_pos[2], 0.0, kTableZ);
        state_.yaw += clip(action[5], kRotClip);  // roll/pitch are carried but inert

        const bool want_open = action.gripper() >= 0.5;
        if (state_.gripper_open && !want_open) {
            close_gripper();
        } else if (!state_.gripper_open && want_open) {
            open_gripper();
        }
        int held = state_.held_index();
        if (held >= 0) state_.objects[static_cast<std::size_t>(held)].pos = state_.gripper_pos;
        ++steps_taken_;
        return observe();
    }

    bool success() const { return task_success(state_, task_); }

    std::vector<double> observe() const {
        std::vector<double> obs;
        obs.reserve(kObservationDim);
        for (double v : state_.gripper_pos) obs.push_back(v);
        obs.push_back(state_.gripper_open ? 1.0 : 0.0);
        for (const EnvObject& o : state_.objects) {
            for (double v : o.pos) obs.push_back(v);
            obs.push_back(o.held ? 1.0 : 0.0);
        }
        for (const EnvTarget& t : state_.targets) {
            for (double v : t.pos) obs.push_back(v);
            obs.push_back(t.radius);
        }
        for (int k = 0; k < kNumTasks; ++k) obs.push_back(k == task_.task_id ? 1.0 : 0.0);
        return obs;
    }

    const WorldState& state() const { return state_; }
    const TaskSpec& task() const { return task_; }
    int steps_taken() const { return steps_taken_; }

  private:
    WorldState state_;
    TaskSpec task_;
    int steps_taken_ = 0;

    void close_gripper() {
        state_.gripper_open = false;
        // Pick the nearest object within the grasp radius; ties to lowest id.
        int best = -1;
        double best_dist = 0.0;
        for (std::size_t i = 0; i < state_.objects.size(); ++i) {
            const auto& o = state_.objects[i];
            double dx = o.pos[0] - state_.gripper_pos[0];
            double dy = o.pos[1] - state_.gripper_pos[1];
            double dz = o.pos[2] - state_.gripper_pos[2];
            double dist = std::sqrt(dx * dx + dy * dy + dz * dz);
            if (dist <= kGraspRadius && (best == -1 || dist < best_dist)) {
                best = static_cast<int>(i);
                best_dist = dist;
            }
        }
        if (best >= 0) {
            state_.objects[static_cast<std::size_t>(best)].held = true;
            state_.objects[static_cast<std::size_t>(best)].pos = state_.gripper_pos;
        }
    }

    void open_gripper() {
        state_.gripper_open = true;
        int held = state_.held_index();
        if (held >= 0) state_.objects[static_cast<std::size_t>(held)].held = false;
    }
};

// Stateless scripted expert: decides the next delta purely from the current
// state. Phases — hover above the object, descend, close; lift, traverse to
// the target, descend, open. All deltas respect the clip limits.
inline ActionVector scripted_expert(const WorldState& state, const TaskSpec& task) {
    constexpr double kHoverZ = 0.15;
    constexpr double kGraspZ = 0.02;
    constexpr double kPlaceZ = 0.05;
    constexpr double kXyTol = 0.005;
    constexpr double kZTol = 0.005;

    const EnvObject& obj = state.objects[static_cast<std::size_t>(task.object_ref)];
    const EnvTarget& tgt = state.targets[static_cast<std::size_t>(task.target_ref)];
    auto clip = [](double v) { return std::clamp(v, -kPosClip, kPosClip); };

    ActionVector a{};  // rotations stay zero; gripper filled below
    const double gx = state.gripper_pos[0], gy = state.gripper_pos[1], gz = state.gripper_pos[2];

    if (!obj.held) {
        a[6] = 1.0;  // stay open while approaching
        double dx = obj.pos[0] - gx, dy = obj.pos[1] - gy;
        if (std::abs(dx) > kXyTol || std::abs(dy) > kXyTol) {
            a[0] = clip(dx);
            a[1] = clip(dy);
            a[2] = clip(kHoverZ - gz);
        } else if (gz > kGraspZ + kZTol) {
            a[2] = clip(kGraspZ - gz);
        } else {
            a[6] = 0.0;  // close on the object
        }
    } else {
        a[6] = 0.0;  // keep holding
        double dx = tgt.pos[0] - gx, dy = tgt.pos[1] - gy;
        if (std::abs(dx) > kXyTol || std::abs(dy) > kXyTol) {
            a[0] = clip(dx);
            a[1] = clip(dy);
            a[2] = clip(kHoverZ - gz);
        } else if (gz > kPlaceZ + kZTol) {
            a[2] = clip(kPlaceZ - gz);
        } else {
            a[6] = 1.0;  // release into the target
        }
    }
    return a;
}

}  // namespace diffact
