#include "cldl/metrics.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <cstring>
#include <fstream>

#include "cldl/diffusion.hpp"
#include "cldl/errors.hpp"

namespace cldl {

void MetricMatrix::record(int i, int j, double value) {
    if (i < 0 || j < 0 || i >= n_ || j >= n_ || j < i)
        throw std::logic_error("MetricMatrix::record: entry (" + std::to_string(i) + "," +
                               std::to_string(j) + ") outside the lower triangle");
    auto idx = std::size_t(i) * n_ + j;
    if (set_[idx])
        throw std::logic_error("MetricMatrix::record: entry (" + std::to_string(i) + "," +
                               std::to_string(j) + ") already recorded");
    values_[idx] = value;
    set_[idx] = 1;
}

double MetricMatrix::at(int i, int j) const {
    if (i < 0 || j < 0 || i >= n_ || j >= n_ || j < i || !set_[std::size_t(i) * n_ + j])
        throw std::logic_error("MetricMatrix::at: entry (" + std::to_string(i) + "," +
                               std::to_string(j) + ") not recorded");
    return values_[std::size_t(i) * n_ + j];
}

bool MetricMatrix::is_set(int i, int j) const {
    return i >= 0 && j >= i && j < n_ && set_[std::size_t(i) * n_ + j] != 0;
}

bool MetricMatrix::lower_triangle_complete() const {
    for (int i = 0; i < n_; ++i)
        for (int j = i; j < n_; ++j)
            if (!is_set(i, j)) return false;
    return true;
}

double avg_metric(const MetricMatrix& m) {
    const int n = m.size();
    if (n == 0) throw std::logic_error("avg_metric: empty matrix");
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += m.at(i, n - 1);
    return acc / n;
}

double forgetting(const MetricMatrix& m) {
    const int n = m.size();
    if (n == 0) throw std::logic_error("forgetting: empty matrix");
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += m.at(i, n - 1) - m.at(i, i);
    return acc / n;
}

Eigen::MatrixXd spd_sqrt(const Eigen::MatrixXd& c) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
    if (es.info() != Eigen::Success) throw NumericError("spd_sqrt: eigendecomposition failed");
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

FeatureStats stats_from_features(const Eigen::MatrixXd& feats) {
    const auto n = feats.rows();
    if (n < 2) throw std::domain_error("stats_from_features: need at least 2 samples");
    FeatureStats s;
    s.count = std::size_t(n);
    s.mean = feats.colwise().mean();
    Eigen::MatrixXd centered = feats.rowwise() - s.mean.transpose();
    s.cov = centered.transpose() * centered / double(n - 1);
    s.cov += 1e-6 * Eigen::MatrixXd::Identity(feats.cols(), feats.cols());
    return s;
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
    if (a.mean.size() != b.mean.size())
        throw std::domain_error("frechet_distance: dimension mismatch");
    if (!a.mean.allFinite() || !b.mean.allFinite() || !a.cov.allFinite() || !b.cov.allFinite())
        throw std::domain_error("frechet_distance: non-finite inputs");
    const Eigen::MatrixXd sa = spd_sqrt(a.cov);
    const Eigen::MatrixXd inner = sa * b.cov * sa;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner);
    if (es.info() != Eigen::Success)
        throw NumericError("frechet_distance: eigendecomposition failed");
    const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    double fid = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    if (fid < -1e-6) throw NumericError("frechet_distance: negative beyond tolerance");
    return std::max(fid, 0.0);
}

Eigen::MatrixXd FeatureExtractor::features(const MatX<float>& images) {
    const Eigen::Index n = images.rows();
    Eigen::MatrixXd out(n, net_.config().feature_dim);
    constexpr Eigen::Index chunk = 512;
    MatX<float> feat;
    for (Eigen::Index i = 0; i < n; i += chunk) {
        const Eigen::Index m = std::min(chunk, n - i);
        MatX<float> block = images.middleRows(i, m);
        net_.forward_features(block, feat);
        out.middleRows(i, m) = feat.cast<double>();
    }
    return out;
}

FeatureStats FeatureExtractor::stats(const MatX<float>& images) {
    if (images.rows() < 2) throw std::domain_error("FeatureExtractor::stats: need >= 2 images");
    return stats_from_features(features(images));
}

FeatureStats extract_stats(FeatureExtractor& extractor, const MatX<float>& images) {
    return extractor.stats(images);
}

std::uint64_t FeatureExtractor::param_hash() const {
    std::uint64_t h = 1469598103934665603ull;
    for (float v : net_.parameters()) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        h ^= bits;
        h *= 1099511628211ull;
    }
    return h;
}

void FeatureExtractor::save(const std::string& path) const {
    std::ofstream out(path + ".tmp", std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    const auto& cfg = net_.config();
    std::int32_t hdr[6] = {cfg.height, cfg.width, cfg.c1, cfg.c2, cfg.feature_dim, cfg.n_classes};
    out.write(reinterpret_cast<const char*>(hdr), sizeof hdr);
    auto p = net_.parameters();
    std::uint64_t n = p.size();
    out.write(reinterpret_cast<const char*>(&n), 8);
    out.write(reinterpret_cast<const char*>(p.data()), std::streamsize(n * 4));
    out.close();
    std::rename((path + ".tmp").c_str(), path.c_str());
}

FeatureExtractor FeatureExtractor::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open extractor file " + path);
    std::int32_t hdr[6];
    in.read(reinterpret_cast<char*>(hdr), sizeof hdr);
    ClassifierConfig cfg;
    cfg.height = hdr[0];
    cfg.width = hdr[1];
    cfg.c1 = hdr[2];
    cfg.c2 = hdr[3];
    cfg.feature_dim = hdr[4];
    cfg.n_classes = hdr[5];
    FeatureExtractor ex(cfg);
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), 8);
    auto p = ex.net_.parameters();
    if (n != p.size()) throw DataError("extractor file " + path + " has wrong parameter count");
    in.read(reinterpret_cast<char*>(p.data()), std::streamsize(n * 4));
    if (!in) throw DataError("extractor file " + path + " truncated");
    return ex;
}

FeatureExtractor train_feature_extractor(const LabeledDataset& train,
                                         const LabeledDataset& heldout, std::uint64_t seed,
                                         int steps, int batch_size, double* heldout_accuracy) {
    ClassifierConfig cfg;
    cfg.height = train.rows;
    cfg.width = train.cols;
    cfg.n_classes = train.n_classes();
    FeatureExtractor ex(cfg);
    auto& net = ex.net();
    Rng init_rng = Rng::stream(seed, "extractor_init");
    net.init_params(init_rng);

    Adam<float> opt(net.parameters().size(), 1e-3);
    Rng batch_rng = Rng::stream(seed, "extractor_batch");
    const int d = train.rows * train.cols;
    MatX<float> x(batch_size, d);
    MatX<float> logits;
    std::vector<int> ys(static_cast<std::size_t>(batch_size));
    for (int step = 0; step < steps; ++step) {
        for (int i = 0; i < batch_size; ++i) {
            auto idx = batch_rng.uniform_index(train.count());
            const std::uint8_t* px = train.images.data() + idx * std::size_t(d);
            for (int j = 0; j < d; ++j) x(i, j) = normalize_pixel(px[j]);
            ys[std::size_t(i)] = train.labels[idx];
        }
        net.forward_logits(x, logits);
        // softmax cross-entropy gradient
        MatX<float> g(batch_size, cfg.n_classes);
        for (int i = 0; i < batch_size; ++i) {
            Eigen::RowVectorXf row = logits.row(i);
            row.array() -= row.maxCoeff();
            Eigen::RowVectorXf p = row.array().exp();
            p /= p.sum();
            g.row(i) = p / float(batch_size);
            g(i, ys[std::size_t(i)]) -= 1.0f / float(batch_size);
        }
        net.zero_grad();
        net.backward(g);
        opt.step(net.parameters(), net.gradients());
    }

    if (heldout_accuracy) {
        std::size_t correct = 0;
        constexpr std::size_t chunk = 512;
        for (std::size_t off = 0; off < heldout.count(); off += chunk) {
            std::size_t m = std::min(chunk, heldout.count() - off);
            MatX<float> hx(Eigen::Index(m), d);
            for (std::size_t i = 0; i < m; ++i) {
                const std::uint8_t* px = heldout.images.data() + (off + i) * std::size_t(d);
                for (int j = 0; j < d; ++j) hx(Eigen::Index(i), j) = normalize_pixel(px[j]);
            }
            net.forward_logits(hx, logits);
            for (std::size_t i = 0; i < m; ++i) {
                Eigen::Index arg;
                logits.row(Eigen::Index(i)).maxCoeff(&arg);
                if (int(arg) == int(heldout.labels[off + i])) ++correct;
            }
        }
        *heldout_accuracy = double(correct) / double(heldout.count());
    }
    return ex;
}

double eval_task_fid(NoisePredictor<float>& model, FeatureExtractor& extractor,
                     const TaskData& task, int n_samples, const NoiseSchedule& sched, Rng& rng,
                     const FeatureStats* real_stats, MatX<float>* first_samples) {
    if (task.val.size() == 0) throw std::domain_error("eval_task_fid: empty validation split");
    const int d_feat = extractor.net().config().feature_dim;
    if (n_samples < d_feat + 1)
        throw std::invalid_argument("eval_task_fid: n_samples must be >= feature_dim + 1");

    FeatureStats real = real_stats ? *real_stats : extractor.stats(task.val.materialize());

    const int n_cond = model.n_conditions();
    Eigen::MatrixXd feats(n_samples, d_feat);
    constexpr int chunk = 256;
    for (int off = 0; off < n_samples; off += chunk) {
        const int m = std::min(chunk, n_samples - off);
        MatX<float> samples = ancestral_sample(
            model, VecX<float>::Unit(n_cond, task.task_index).eval(), m, sched, rng);
        if (first_samples && off == 0) *first_samples = samples.topRows(std::min(m, 64));
        feats.middleRows(off, m) = extractor.features(samples);
    }
    return frechet_distance(real, stats_from_features(feats));
}

double eval_task_bpd(NoisePredictor<float>& model, const TaskData& task,
                     const NoiseSchedule& sched, Rng& rng, int n_noise_samples,
                     int max_examples) {
    if (task.val.size() == 0) throw std::domain_error("eval_task_bpd: empty validation split");
    std::size_t n = task.val.size();
    if (max_examples > 0) n = std::min(n, std::size_t(max_examples));
    const int d = task.val.data->rows * task.val.data->cols;
    MatX<float> x0 = task.val.materialize(0, n);
    MatX<float> cond = MatX<float>::Zero(Eigen::Index(n), model.n_conditions());
    cond.col(task.task_index).setOnes();

    double acc = 0.0;
    constexpr Eigen::Index chunk = 64;
    for (Eigen::Index off = 0; off < Eigen::Index(n); off += chunk) {
        const Eigen::Index m = std::min(chunk, Eigen::Index(n) - off);
        MatX<float> xb = x0.middleRows(off, m);
        MatX<float> cb = cond.middleRows(off, m);
        auto breakdowns = full_bound_batch(model, xb, cb, sched, rng, n_noise_samples);
        for (const auto& b : breakdowns) acc += bpd(b, d);
    }
    return acc / double(n);
}

}  // namespace cldl
