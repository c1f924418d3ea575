#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cldl/strategies.hpp"

namespace cldl {

// Flat key=value run configuration. Key names are fixed; unknown keys are
// configuration errors.
struct RunConfig {
    // data
    std::string dataset = "mnist";
    std::string data_dir;  // CLDL_DATA_DIR when empty
    int n_tasks = 5;
    int classes_per_task = 2;
    std::vector<int> class_order;  // empty = ascending label order
    int steps_per_task = 2000;
    int batch_size = 128;
    double val_fraction = 0.1;
    // strategy
    std::string strategy = "finetune";
    double rehearsal_coef = -1.0;  // kind default when < 0
    double l2_lambda = 1e3;
    int replay_batch_size = 0;  // 0 = batch_size
    int buffer_capacity = 200;
    int gr_pool_per_task = 1024;
    // schedule
    int tau = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    std::string sigma_mode = "posterior";
    // evaluation
    int fid_samples = 1024;
    int bpd_noise_samples = 1;
    std::vector<int> diagnostic_timesteps = {50, 700};
    int eval_every = 200;
    int diag_examples = 512;
    int diag_noise_samples = 8;
    int bpd_examples = 0;  // 0 = full validation split
    std::string diag_loss_form = "vlb";
    int checkpoint_every = 1000;
    std::uint64_t extractor_seed = 1234;
    int extractor_steps = 3000;
    // model
    int model_width = 32;
    int emb_dim = 64;
    int mlp_hidden = 256;
    // run
    std::uint64_t seed = 0;
    std::string output_dir;

    std::string canonical_text() const;
    // hash of the canonical text minus data_dir/output_dir (environment paths
    // do not invalidate resume)
    std::uint64_t config_hash() const;
    void validate() const;

    StrategyConfig strategy_config() const;
    std::string strategy_label() const;  // e.g. "experience_replay(coef=1)"
};

RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);

struct TrainOptions {
    std::optional<std::uint64_t> seed_override;
    bool paper_scale = false;
    std::string resume_path;
    std::int64_t stop_after_steps = 0;  // 0 = run to completion
    bool quiet = false;
};

struct RunSummary {
    double avg_fid = 0, fid_forgetting = 0, avg_bpd = 0, bpd_forgetting = 0;
    bool completed = false;  // false when stopped early via stop_after_steps
};

// Full continual run (or resumed continuation); writes CSVs, sample grids and
// checkpoints into config.output_dir.
RunSummary run_train(RunConfig config, const TrainOptions& opts);

// Re-evaluates FID/BPD for the given tasks at a checkpoint's parameters.
// tasks: "all" or comma-separated 1-based list. Returns CSV text.
std::string run_eval(const std::string& checkpoint_path, const std::string& tasks,
                     const std::string& data_dir_override, std::uint64_t sampling_seed);

void run_sample(const std::string& checkpoint_path, int task_1based, int n,
                const std::string& out_png, const std::string& data_dir_override,
                std::uint64_t sampling_seed);

// Aggregates runs into report.md/report.csv plus SVG plots.
void run_report(const std::vector<std::string>& run_dirs, const std::string& out_dir);

// Trains (or loads) the cached frozen FID feature extractor for a dataset.
std::string ensure_extractor(const RunConfig& config, double* heldout_acc = nullptr);

}  // namespace cldl
