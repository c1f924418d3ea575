#pragma once

// Self-describing run checkpoint: JSON header plus raw little-endian binary
// sections (float32 parameter/optimizer arrays, buffer bytes, pools, batch
// permutation, log records). Captures everything needed for bit-exact resume.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cldl/nn.hpp"
#include "cldl/strategies.hpp"

namespace cldl {

struct TrainLogRecord {
    std::int64_t task = 0, step = 0;  // step is the global step index (1-based)
    double loss = 0, base = 0, aux = 0;
};

struct DiagLogRecord {
    std::int64_t eval_task = 0, step = 0, timestep = 0;
    std::int32_t split = 0;  // 0 = val, 1 = buffer
    double value = 0;
};

struct Checkpoint {
    std::string config_text;
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    ArchConfig arch;

    std::int64_t global_step = 0;
    int task_index = 0;
    std::int64_t step_in_task = 0;
    bool run_completed = false;

    std::map<std::string, std::string> rng_states;
    std::int64_t adam_t = 0;
    std::vector<float> params, adam_m, adam_v;

    std::optional<ParameterSnapshot<float>> l2_anchor, frozen_model;
    ReplayBuffer buffer;
    std::vector<GenPool> pools;
    int completed_tasks = 0;

    std::vector<std::uint32_t> batch_perm;
    std::uint64_t batch_cursor = 0;

    // metric matrices stored as dense n*n arrays with set masks
    struct MatrixDump {
        std::string name;
        int n = 0;
        std::vector<double> values;
        std::vector<std::uint8_t> mask;
    };
    std::vector<MatrixDump> matrices;

    std::vector<TrainLogRecord> train_log;
    std::vector<DiagLogRecord> diag_log;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace cldl
