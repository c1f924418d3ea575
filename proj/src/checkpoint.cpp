#include "cldl/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "cldl/errors.hpp"
#include "json.hpp"

namespace cldl {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'C', 'L', 'D', 'L', 'C', 'K', 'P', '1'};

struct SectionWriter {
    std::vector<std::uint8_t> blob;
    json table = json::object();

    void add(const std::string& name, const void* data, std::size_t bytes) {
        table[name] = {{"offset", blob.size()}, {"bytes", bytes}};
        const auto* p = static_cast<const std::uint8_t*>(data);
        blob.insert(blob.end(), p, p + bytes);
    }
};

struct SectionReader {
    const std::vector<std::uint8_t>* blob = nullptr;
    const json* table = nullptr;

    bool has(const std::string& name) const { return table->contains(name); }
    std::pair<const std::uint8_t*, std::size_t> get(const std::string& name) const {
        if (!has(name)) throw DataError("checkpoint missing section " + name);
        const auto& e = (*table)[name];
        std::size_t off = e["offset"], bytes = e["bytes"];
        if (off + bytes > blob->size()) throw DataError("checkpoint section out of range");
        return {blob->data() + off, bytes};
    }
    template <class T>
    std::vector<T> vec(const std::string& name) const {
        auto [p, bytes] = get(name);
        std::vector<T> out(bytes / sizeof(T));
        std::memcpy(out.data(), p, out.size() * sizeof(T));
        return out;
    }
};

json arch_to_json(const ArchConfig& a) {
    return {{"height", a.height},         {"width", a.width},
            {"base_width", a.base_width}, {"emb_dim", a.emb_dim},
            {"mlp_hidden", a.mlp_hidden}, {"n_conditions", a.n_conditions},
            {"time_freqs", a.time_freqs}};
}

ArchConfig arch_from_json(const json& j) {
    ArchConfig a;
    a.height = j["height"];
    a.width = j["width"];
    a.base_width = j["base_width"];
    a.emb_dim = j["emb_dim"];
    a.mlp_hidden = j["mlp_hidden"];
    a.n_conditions = j["n_conditions"];
    a.time_freqs = j["time_freqs"];
    return a;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    static_assert(std::endian::native == std::endian::little,
                  "checkpoint writer assumes a little-endian host");
    SectionWriter w;
    w.add("params", ck.params.data(), ck.params.size() * 4);
    w.add("adam_m", ck.adam_m.data(), ck.adam_m.size() * 4);
    w.add("adam_v", ck.adam_v.data(), ck.adam_v.size() * 4);
    if (ck.l2_anchor) w.add("l2_anchor", ck.l2_anchor->values.data(), ck.l2_anchor->values.size() * 4);
    if (ck.frozen_model)
        w.add("frozen", ck.frozen_model->values.data(), ck.frozen_model->values.size() * 4);

    json jbuf = json::array();
    {
        std::vector<std::uint8_t> bytes;
        for (const auto& [task, store] : ck.buffer.per_task_stores) {
            jbuf.push_back({{"task", task},
                            {"count", store.size()},
                            {"item_bytes", store.empty() ? 0 : store.front().size()}});
            for (const auto& img : store) bytes.insert(bytes.end(), img.begin(), img.end());
        }
        w.add("buffer", bytes.data(), bytes.size());
    }
    json jpools = json::array();
    {
        std::vector<float> floats;
        for (const auto& pool : ck.pools) {
            jpools.push_back({{"task", pool.task_index},
                              {"rows", pool.samples.rows()},
                              {"cols", pool.samples.cols()}});
            floats.insert(floats.end(), pool.samples.data(),
                          pool.samples.data() + pool.samples.size());
        }
        w.add("pools", floats.data(), floats.size() * 4);
    }
    w.add("batch_perm", ck.batch_perm.data(), ck.batch_perm.size() * 4);

    json jmats = json::array();
    for (const auto& m : ck.matrices) {
        jmats.push_back({{"name", m.name}, {"n", m.n}});
    }
    {
        std::vector<std::uint8_t> bytes;
        for (const auto& m : ck.matrices) {
            const auto* p = reinterpret_cast<const std::uint8_t*>(m.values.data());
            bytes.insert(bytes.end(), p, p + m.values.size() * 8);
            bytes.insert(bytes.end(), m.mask.begin(), m.mask.end());
        }
        w.add("matrices", bytes.data(), bytes.size());
    }
    {
        std::vector<std::uint8_t> bytes;
        bytes.reserve(ck.train_log.size() * 40);
        for (const auto& r : ck.train_log) {
            const std::uint8_t* p = reinterpret_cast<const std::uint8_t*>(&r.task);
            bytes.insert(bytes.end(), p, p + 16);
            p = reinterpret_cast<const std::uint8_t*>(&r.loss);
            bytes.insert(bytes.end(), p, p + 24);
        }
        w.add("train_log", bytes.data(), bytes.size());
    }
    {
        std::vector<std::uint8_t> bytes;
        bytes.reserve(ck.diag_log.size() * 36);
        for (const auto& r : ck.diag_log) {
            const std::uint8_t* p = reinterpret_cast<const std::uint8_t*>(&r.eval_task);
            bytes.insert(bytes.end(), p, p + 24);
            p = reinterpret_cast<const std::uint8_t*>(&r.split);
            bytes.insert(bytes.end(), p, p + 4);
            p = reinterpret_cast<const std::uint8_t*>(&r.value);
            bytes.insert(bytes.end(), p, p + 8);
        }
        w.add("diag_log", bytes.data(), bytes.size());
    }

    json hdr = {
        {"version", 1},
        {"config_text", ck.config_text},
        {"config_hash", ck.config_hash},
        {"seed", ck.seed},
        {"arch", arch_to_json(ck.arch)},
        {"global_step", ck.global_step},
        {"task_index", ck.task_index},
        {"step_in_task", ck.step_in_task},
        {"run_completed", ck.run_completed},
        {"rng", ck.rng_states},
        {"adam_t", ck.adam_t},
        {"batch_cursor", ck.batch_cursor},
        {"completed_tasks", ck.completed_tasks},
        {"buffer_capacity", ck.buffer.capacity_per_task},
        {"buffer_stores", jbuf},
        {"pools", jpools},
        {"matrices", jmats},
        {"has_l2_anchor", bool(ck.l2_anchor)},
        {"has_frozen", bool(ck.frozen_model)},
        {"sections", w.table},
    };
    if (ck.l2_anchor)
        hdr["l2_anchor_meta"] = {{"step", ck.l2_anchor->step_index},
                                 {"task", ck.l2_anchor->task_index},
                                 {"arch", ck.l2_anchor->architecture_id}};
    if (ck.frozen_model)
        hdr["frozen_meta"] = {{"step", ck.frozen_model->step_index},
                              {"task", ck.frozen_model->task_index},
                              {"arch", ck.frozen_model->architecture_id}};

    std::string htext = hdr.dump();
    std::string tmp = path + ".tmp";
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw DataError("cannot write checkpoint " + path);
    f.write(kMagic, 8);
    std::uint64_t hlen = htext.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(htext.data(), std::streamsize(htext.size()));
    f.write(reinterpret_cast<const char*>(w.blob.data()), std::streamsize(w.blob.size()));
    f.close();
    if (!f) throw DataError("short write for checkpoint " + path);
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
        throw DataError("not a checkpoint file: " + path);
    std::uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    std::string htext(hlen, '\0');
    f.read(htext.data(), std::streamsize(hlen));
    if (!f) throw DataError("checkpoint header truncated: " + path);
    std::vector<std::uint8_t> blob((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());

    json hdr = json::parse(htext);
    json sections = hdr["sections"];
    SectionReader r{&blob, &sections};

    Checkpoint ck;
    ck.config_text = hdr["config_text"];
    ck.config_hash = hdr["config_hash"];
    ck.seed = hdr["seed"];
    ck.arch = arch_from_json(hdr["arch"]);
    ck.global_step = hdr["global_step"];
    ck.task_index = hdr["task_index"];
    ck.step_in_task = hdr["step_in_task"];
    ck.run_completed = hdr["run_completed"];
    ck.rng_states = hdr["rng"].get<std::map<std::string, std::string>>();
    ck.adam_t = hdr["adam_t"];
    ck.batch_cursor = hdr["batch_cursor"];
    ck.completed_tasks = hdr["completed_tasks"];

    ck.params = r.vec<float>("params");
    ck.adam_m = r.vec<float>("adam_m");
    ck.adam_v = r.vec<float>("adam_v");

    if (hdr["has_l2_anchor"].get<bool>()) {
        ParameterSnapshot<float> s;
        s.values = r.vec<float>("l2_anchor");
        s.step_index = hdr["l2_anchor_meta"]["step"];
        s.task_index = hdr["l2_anchor_meta"]["task"];
        s.architecture_id = hdr["l2_anchor_meta"]["arch"];
        ck.l2_anchor = std::move(s);
    }
    if (hdr["has_frozen"].get<bool>()) {
        ParameterSnapshot<float> s;
        s.values = r.vec<float>("frozen");
        s.step_index = hdr["frozen_meta"]["step"];
        s.task_index = hdr["frozen_meta"]["task"];
        s.architecture_id = hdr["frozen_meta"]["arch"];
        ck.frozen_model = std::move(s);
    }

    ck.buffer.capacity_per_task = hdr["buffer_capacity"];
    {
        auto [p, bytes] = r.get("buffer");
        std::size_t off = 0;
        for (const auto& e : hdr["buffer_stores"]) {
            int task = e["task"];
            std::size_t count = e["count"], item = e["item_bytes"];
            auto& store = ck.buffer.per_task_stores[task];
            for (std::size_t i = 0; i < count; ++i) {
                if (off + item > bytes) throw DataError("checkpoint buffer section truncated");
                store.emplace_back(p + off, p + off + item);
                off += item;
            }
        }
    }
    {
        auto floats = r.vec<float>("pools");
        std::size_t off = 0;
        for (const auto& e : hdr["pools"]) {
            GenPool pool;
            pool.task_index = e["task"];
            Eigen::Index rows = e["rows"], cols = e["cols"];
            pool.samples.resize(rows, cols);
            if (off + std::size_t(rows * cols) > floats.size())
                throw DataError("checkpoint pools section truncated");
            std::memcpy(pool.samples.data(), floats.data() + off, std::size_t(rows * cols) * 4);
            off += std::size_t(rows * cols);
            ck.pools.push_back(std::move(pool));
        }
    }
    ck.batch_perm = r.vec<std::uint32_t>("batch_perm");
    {
        auto [p, bytes] = r.get("matrices");
        std::size_t off = 0;
        for (const auto& e : hdr["matrices"]) {
            Checkpoint::MatrixDump m;
            m.name = e["name"];
            m.n = e["n"];
            std::size_t cells = std::size_t(m.n) * m.n;
            if (off + cells * 9 > bytes) throw DataError("checkpoint matrices section truncated");
            m.values.resize(cells);
            std::memcpy(m.values.data(), p + off, cells * 8);
            off += cells * 8;
            m.mask.assign(p + off, p + off + cells);
            off += cells;
            ck.matrices.push_back(std::move(m));
        }
    }
    {
        auto [p, bytes] = r.get("train_log");
        std::size_t n = bytes / 40;
        ck.train_log.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            auto& rec = ck.train_log[i];
            std::memcpy(&rec.task, p + i * 40, 16);
            std::memcpy(&rec.loss, p + i * 40 + 16, 24);
        }
    }
    {
        auto [p, bytes] = r.get("diag_log");
        std::size_t n = bytes / 36;
        ck.diag_log.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            auto& rec = ck.diag_log[i];
            std::memcpy(&rec.eval_task, p + i * 36, 24);
            std::memcpy(&rec.split, p + i * 36 + 24, 4);
            std::memcpy(&rec.value, p + i * 36 + 28, 8);
        }
    }
    return ck;
}

}  // namespace cldl
