#include "cldl/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "cldl/errors.hpp"

namespace cldl {

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

std::vector<std::uint8_t> gunzip(const std::vector<std::uint8_t>& in, const std::string& path) {
    z_stream zs{};
    if (inflateInit2(&zs, 15 + 32) != Z_OK) throw DataError("zlib init failed for " + path);
    std::vector<std::uint8_t> out;
    out.reserve(in.size() * 4);
    std::vector<std::uint8_t> buf(1 << 16);
    zs.next_in = const_cast<Bytef*>(in.data());
    zs.avail_in = uInt(in.size());
    int rc = Z_OK;
    while (rc != Z_STREAM_END) {
        zs.next_out = buf.data();
        zs.avail_out = uInt(buf.size());
        rc = inflate(&zs, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            throw DataError("gzip payload corrupt in " + path);
        }
        out.insert(out.end(), buf.data(), buf.data() + (buf.size() - zs.avail_out));
        if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
            inflateEnd(&zs);
            throw DataError("gzip payload truncated in " + path);
        }
    }
    inflateEnd(&zs);
    return out;
}

std::vector<std::uint8_t> read_maybe_gzip(const std::string& path) {
    auto bytes = read_file(path);
    if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b) return gunzip(bytes, path);
    return bytes;
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off, const std::string& what,
                   const std::string& path) {
    if (off + 4 > b.size()) throw DataError("truncated header (" + what + ") in " + path);
    return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
           (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

}  // namespace

int LabeledDataset::n_classes() const {
    int m = -1;
    for (auto l : labels) m = std::max(m, int(l));
    return m + 1;
}

std::string resolve_idx_path(const std::string& dir, const std::string& stem) {
    namespace fs = std::filesystem;
    fs::path plain = fs::path(dir) / stem;
    if (fs::exists(plain)) return plain.string();
    fs::path gz = fs::path(dir) / (stem + ".gz");
    if (fs::exists(gz)) return gz.string();
    throw DataError("no such data file: " + plain.string() + "[.gz]");
}

LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path) {
    auto ib = read_maybe_gzip(images_path);
    auto lb = read_maybe_gzip(labels_path);

    const std::uint32_t im_magic = be32(ib, 0, "images magic", images_path);
    if (im_magic != 0x00000803u)
        throw DataError("wrong magic in images file " + images_path + ": got " +
                        std::to_string(im_magic) + ", want 2051");
    const std::uint32_t lb_magic = be32(lb, 0, "labels magic", labels_path);
    if (lb_magic != 0x00000801u)
        throw DataError("wrong magic in labels file " + labels_path + ": got " +
                        std::to_string(lb_magic) + ", want 2049");

    const std::uint32_t n_im = be32(ib, 4, "images count", images_path);
    const std::uint32_t rows = be32(ib, 8, "images rows", images_path);
    const std::uint32_t cols = be32(ib, 12, "images cols", images_path);
    const std::uint32_t n_lb = be32(lb, 4, "labels count", labels_path);
    if (n_im != n_lb)
        throw DataError("count mismatch: " + std::to_string(n_im) + " images vs " +
                        std::to_string(n_lb) + " labels");

    const std::size_t want_im = 16 + std::size_t(n_im) * rows * cols;
    if (ib.size() < want_im)
        throw DataError("truncated image payload in " + images_path + ": have " +
                        std::to_string(ib.size()) + " bytes, want " + std::to_string(want_im));
    const std::size_t want_lb = 8 + std::size_t(n_lb);
    if (lb.size() < want_lb)
        throw DataError("truncated label payload in " + labels_path + ": have " +
                        std::to_string(lb.size()) + " bytes, want " + std::to_string(want_lb));

    LabeledDataset ds;
    ds.rows = int(rows);
    ds.cols = int(cols);
    ds.images.assign(ib.begin() + 16, ib.begin() + std::ptrdiff_t(want_im));
    ds.labels.assign(lb.begin() + 8, lb.begin() + std::ptrdiff_t(want_lb));
    return ds;
}

const std::uint8_t* SplitView::image_bytes(std::size_t i) const {
    reads->fetch_add(1, std::memory_order_relaxed);
    return data->images.data() + std::size_t(indices[i]) * data->rows * data->cols;
}

MatX<float> SplitView::materialize(std::size_t offset, std::size_t limit) const {
    const std::size_t n = limit == 0 ? size() - offset : std::min(limit, size() - offset);
    const int d = data->rows * data->cols;
    MatX<float> out(Eigen::Index(n), d);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t* px = image_bytes(offset + i);
        for (int j = 0; j < d; ++j) out(Eigen::Index(i), j) = normalize_pixel(px[j]);
    }
    return out;
}

TaskSequence split_tasks(const LabeledDataset& ds, int n_tasks, int classes_per_task,
                         const std::vector<int>& class_order, double val_fraction,
                         std::uint64_t seed) {
    const int n_classes = ds.n_classes();
    if (n_tasks < 1 || classes_per_task < 1 || n_tasks * classes_per_task != n_classes)
        throw ConfigError("split_tasks: n_tasks * classes_per_task must equal " +
                          std::to_string(n_classes) + " distinct classes");
    std::vector<int> order = class_order;
    if (order.empty()) {
        order.resize(std::size_t(n_classes));
        for (int c = 0; c < n_classes; ++c) order[std::size_t(c)] = c;
    }
    if (int(order.size()) != n_classes)
        throw ConfigError("split_tasks: class_order must list all " + std::to_string(n_classes) +
                          " classes");
    if (std::set<int>(order.begin(), order.end()).size() != order.size())
        throw ConfigError("split_tasks: class_order must be a permutation");
    for (int c : order)
        if (c < 0 || c >= n_classes) throw ConfigError("split_tasks: class out of range");

    std::vector<std::vector<std::uint32_t>> by_class(static_cast<std::size_t>(n_classes));
    for (std::size_t i = 0; i < ds.count(); ++i)
        by_class[ds.labels[i]].push_back(std::uint32_t(i));

    Rng rng(seed);
    TaskSequence seq;
    for (int t = 0; t < n_tasks; ++t) {
        TaskData task;
        task.task_index = t;
        task.train.data = task.val.data = &ds;
        task.train.task_index = task.val.task_index = t;
        for (int k = 0; k < classes_per_task; ++k) {
            int cls = order[std::size_t(t * classes_per_task + k)];
            task.classes.push_back(cls);
            auto idx = by_class[std::size_t(cls)];
            rng.shuffle(idx.begin(), idx.end());
            std::size_t n_val = std::size_t(std::floor(double(idx.size()) * val_fraction));
            task.val.indices.insert(task.val.indices.end(), idx.begin(),
                                    idx.begin() + std::ptrdiff_t(n_val));
            task.train.indices.insert(task.train.indices.end(),
                                      idx.begin() + std::ptrdiff_t(n_val), idx.end());
        }
        seq.tasks.push_back(std::move(task));
    }
    return seq;
}

Batcher::Batcher(const SplitView& split, int batch_size, int n_conditions, Rng rng)
    : split_(split), batch_size_(batch_size), n_conditions_(n_conditions), rng_(rng) {
    if (batch_size < 1) throw ConfigError("Batcher: batch_size >= 1");
    if (split.size() == 0) throw std::domain_error("Batcher: empty split");
    reshuffle();
}

void Batcher::reshuffle() {
    perm_ = split_.indices;
    // shuffle positions, not raw indices, so the permutation composes with
    // the split's own ordering deterministically
    rng_.shuffle(perm_.begin(), perm_.end());
    cursor_ = 0;
}

Batch Batcher::next() {
    if (cursor_ >= perm_.size()) reshuffle();
    const std::size_t n = std::min(std::size_t(batch_size_), perm_.size() - cursor_);
    const int d = split_.data->rows * split_.data->cols;
    Batch b;
    b.task_index = split_.task_index;
    b.x.resize(Eigen::Index(n), d);
    b.cond = MatX<float>::Zero(Eigen::Index(n), n_conditions_);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t* px =
            split_.data->images.data() + std::size_t(perm_[cursor_ + i]) * d;
        split_.reads->fetch_add(1, std::memory_order_relaxed);
        for (int j = 0; j < d; ++j) b.x(Eigen::Index(i), j) = normalize_pixel(px[j]);
        b.cond(Eigen::Index(i), split_.task_index) = 1.0f;
    }
    cursor_ += n;
    return b;
}

void Batcher::restore_state(std::vector<std::uint32_t> perm, std::size_t cursor, const Rng& rng) {
    perm_ = std::move(perm);
    cursor_ = cursor;
    rng_ = rng;
}

}  // namespace cldl
