#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cldl/nn.hpp"
#include "cldl/rng.hpp"

namespace cldl {

struct LabeledDataset {
    int rows = 0, cols = 0;
    std::vector<std::uint8_t> images;  // count * rows * cols, row-major
    std::vector<std::uint8_t> labels;
    std::size_t count() const { return labels.size(); }
    int n_classes() const;
};

// Reads an IDX image/label pair. Accepts gzip-compressed files (detected by
// the 0x1f 0x8b prefix). Throws DataError naming the offending field.
LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path);

// Resolves <dir>/<stem>, trying the plain name then ".gz".
std::string resolve_idx_path(const std::string& dir, const std::string& stem);

inline float normalize_pixel(std::uint8_t v) {
    return float(v) * (2.0f / 255.0f) - 1.0f;
}
inline std::uint8_t denormalize_pixel(float x) {
    long v = std::lround((double(x) + 1.0) * 127.5);
    return std::uint8_t(v < 0 ? 0 : v > 255 ? 255 : v);
}

// Index view into a dataset; reads through it are counted so tests can audit
// which splits a strategy touched.
struct SplitView {
    const LabeledDataset* data = nullptr;
    std::vector<std::uint32_t> indices;
    int task_index = 0;
    std::shared_ptr<std::atomic<std::uint64_t>> reads =
        std::make_shared<std::atomic<std::uint64_t>>(0);

    std::size_t size() const { return indices.size(); }
    const std::uint8_t* image_bytes(std::size_t i) const;
    std::uint64_t read_count() const { return reads->load(); }

    // Normalized images for the given subset positions (all when empty).
    MatX<float> materialize(std::size_t offset = 0, std::size_t limit = 0) const;
};

struct TaskData {
    int task_index = 0;
    std::vector<int> classes;
    SplitView train, val;
};

struct TaskSequence {
    std::vector<TaskData> tasks;
    int n_tasks() const { return int(tasks.size()); }
};

// Class-incremental split: task i owns classes class_order[i*cpt..(i+1)*cpt),
// with a per-class seeded validation holdout.
TaskSequence split_tasks(const LabeledDataset& ds, int n_tasks, int classes_per_task,
                         const std::vector<int>& class_order, double val_fraction,
                         std::uint64_t seed);

struct Batch {
    MatX<float> x;     // [n, rows*cols] in [-1, 1]
    MatX<float> cond;  // [n, n_conditions] task one-hot
    int task_index = 0;
    int size() const { return int(x.rows()); }
};

// Epoch-shuffled batch stream over one split; the final short batch of an
// epoch is kept. Deterministic given the rng stream; position serializes.
class Batcher {
  public:
    Batcher(const SplitView& split, int batch_size, int n_conditions, Rng rng);

    Batch next();

    // exact-resume support
    const std::vector<std::uint32_t>& permutation() const { return perm_; }
    std::size_t cursor() const { return cursor_; }
    const Rng& rng() const { return rng_; }
    void restore_state(std::vector<std::uint32_t> perm, std::size_t cursor, const Rng& rng);

  private:
    void reshuffle();
    SplitView split_;
    int batch_size_, n_conditions_;
    Rng rng_;
    std::vector<std::uint32_t> perm_;
    std::size_t cursor_ = 0;
};

}  // namespace cldl
