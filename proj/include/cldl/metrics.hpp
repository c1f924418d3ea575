#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "cldl/data.hpp"
#include "cldl/nn.hpp"
#include "cldl/schedule.hpp"

namespace cldl {

// Lower-triangular matrix of m_{i,j} (metric on task i after training task j),
// 0-based indices, defined for j >= i. Double writes are usage errors.
class MetricMatrix {
  public:
    MetricMatrix() = default;
    MetricMatrix(int n, std::string name)
        : n_(n), name_(std::move(name)), values_(std::size_t(n) * n, 0.0),
          set_(std::size_t(n) * n, 0) {}

    void record(int i, int j, double value);
    double at(int i, int j) const;
    bool is_set(int i, int j) const;
    int size() const { return n_; }
    const std::string& name() const { return name_; }
    bool lower_triangle_complete() const;

  private:
    int n_ = 0;
    std::string name_;
    std::vector<double> values_;
    std::vector<std::uint8_t> set_;
};

// (1/N) sum_i m_{i,N}; requires the final column.
double avg_metric(const MetricMatrix& m);
// (1/N) sum_i (m_{i,N} - m_{i,i}); may be negative (backward transfer).
double forgetting(const MetricMatrix& m);

struct FeatureStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
    std::size_t count = 0;
};

// Symmetric PSD square root by eigendecomposition, negative eigenvalues
// clipped at zero.
Eigen::MatrixXd spd_sqrt(const Eigen::MatrixXd& c);

FeatureStats stats_from_features(const Eigen::MatrixXd& feats);  // rows = samples

double frechet_distance(const FeatureStats& a, const FeatureStats& b);

// Frozen feature extractor wrapper; deterministic features.
class FeatureExtractor {
  public:
    explicit FeatureExtractor(const ClassifierConfig& cfg) : net_(cfg) {}

    Eigen::MatrixXd features(const MatX<float>& images);  // [n, feature_dim]
    FeatureStats stats(const MatX<float>& images);        // requires >= 2 images

    Classifier<float>& net() { return net_; }
    const Classifier<float>& net() const { return net_; }
    std::uint64_t param_hash() const;

    void save(const std::string& path) const;
    static FeatureExtractor load(const std::string& path);

  private:
    Classifier<float> net_;
};

FeatureStats extract_stats(FeatureExtractor& extractor, const MatX<float>& images);

// Trains the classifier once on the full (non-continual) training set;
// returns the frozen extractor and reports held-out accuracy.
FeatureExtractor train_feature_extractor(const LabeledDataset& train,
                                         const LabeledDataset& heldout, std::uint64_t seed,
                                         int steps, int batch_size, double* heldout_accuracy);

// Fréchet distance between the task's validation statistics and n_samples
// ancestral samples conditioned on the task. real_stats may cache the
// validation statistics across calls.
double eval_task_fid(NoisePredictor<float>& model, FeatureExtractor& extractor,
                     const TaskData& task, int n_samples, const NoiseSchedule& sched, Rng& rng,
                     const FeatureStats* real_stats = nullptr,
                     MatX<float>* first_samples = nullptr);

// Mean of bpd(full_bound(...)) over the task's validation examples
// (a leading subset of max_examples when > 0).
double eval_task_bpd(NoisePredictor<float>& model, const TaskData& task,
                     const NoiseSchedule& sched, Rng& rng, int n_noise_samples = 1,
                     int max_examples = 0);

}  // namespace cldl
