#pragma once

// The four continual-learning strategies as training-step loss policies plus
// task-boundary hooks.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cldl/data.hpp"
#include "cldl/diffusion.hpp"
#include "cldl/nn.hpp"
#include "cldl/schedule.hpp"

namespace cldl {

enum class StrategyKind { finetune, l2, experience_replay, generative_replay };

StrategyKind strategy_from_string(const std::string& s);
std::string strategy_name(StrategyKind k);

struct StrategyConfig {
    StrategyKind kind = StrategyKind::finetune;
    double rehearsal_coef = -1.0;  // < 0 -> kind default (0.01 ER, 1.0 GR)
    double l2_lambda = 1e3;
    int replay_batch_size = 128;
    int buffer_capacity = 200;
    // >0: rehearsal pool regenerated at task boundaries; 0: sample per step
    int gr_pool_per_task = 1024;

    double effective_coef() const {
        if (rehearsal_coef >= 0.0) return rehearsal_coef;
        return kind == StrategyKind::experience_replay ? 0.01 : 1.0;
    }
};

// Fixed-capacity per-task store of raw training examples. Bytes are kept
// verbatim; normalization happens at batch assembly.
struct ReplayBuffer {
    std::map<int, std::vector<std::vector<std::uint8_t>>> per_task_stores;
    int capacity_per_task = 200;

    bool empty() const { return per_task_stores.empty(); }
    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& [t, s] : per_task_stores) n += s.size();
        return n;
    }
};

// Samples (batch_size) items: task uniform across stores, item uniform within
// the store, with replacement.
Batch sample_rehearsal_batch(const ReplayBuffer& buffer, int batch_size, int n_conditions,
                             Rng& rng);

struct GenPool {
    int task_index = 0;
    MatX<float> samples;  // [n, d] in [-1, 1]
};

struct StrategyState {
    StrategyConfig config;
    ReplayBuffer buffer;                                    // experience replay
    std::optional<ParameterSnapshot<float>> frozen_model;   // generative replay
    std::optional<ParameterSnapshot<float>> l2_anchor;      // l2
    std::vector<GenPool> pools;                             // generative replay
    int completed_tasks = 0;
};

// One training-step loss: base simplified loss on the current batch plus the
// strategy's auxiliary term. Accumulates gradients into the model; the model's
// grads must be zeroed by the caller. Rehearsal-side draws come from
// rehearsal_rng so the base stream is untouched by the strategy choice.
double training_loss(StrategyState& st, NoisePredictor<float>& model, const Batch& current,
                     const NoiseSchedule& sched, Rng& noise_rng, Rng& rehearsal_rng,
                     double* base_out = nullptr, double* aux_out = nullptr);

// Task-boundary hook; call exactly once per task after its last step.
void on_task_end(StrategyState& st, NoisePredictor<float>& model, const SplitView& finished_train,
                 int task_index, std::int64_t step_index, int n_conditions,
                 const NoiseSchedule& sched, Rng& buffer_rng);

}  // namespace cldl
