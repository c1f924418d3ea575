#include "cldl/runner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "cldl/checkpoint.hpp"
#include "cldl/data.hpp"
#include "cldl/diffusion.hpp"
#include "cldl/errors.hpp"
#include "cldl/image_io.hpp"
#include "cldl/metrics.hpp"

namespace cldl {

namespace fs = std::filesystem;

namespace {

std::string fmt_g(double v, int prec = 10) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    return buf;
}

std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(v[i]);
    }
    return s;
}

std::vector<int> parse_int_list(const std::string& s, const std::string& key) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            out.push_back(std::stoi(tok));
        } catch (...) {
            throw ConfigError("config key " + key + ": bad integer '" + tok + "'");
        }
    }
    return out;
}

std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n");
    auto e = s.find_last_not_of(" \t\r\n");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

std::string RunConfig::canonical_text() const {
    std::ostringstream o;
    o << "dataset = " << dataset << "\n";
    o << "data_dir = " << data_dir << "\n";
    o << "n_tasks = " << n_tasks << "\n";
    o << "classes_per_task = " << classes_per_task << "\n";
    o << "class_order = " << (class_order.empty() ? "ascending" : join_ints(class_order)) << "\n";
    o << "steps_per_task = " << steps_per_task << "\n";
    o << "batch_size = " << batch_size << "\n";
    o << "val_fraction = " << fmt_g(val_fraction, 17) << "\n";
    o << "strategy = " << strategy << "\n";
    o << "rehearsal_coef = " << fmt_g(rehearsal_coef, 17) << "\n";
    o << "l2_lambda = " << fmt_g(l2_lambda, 17) << "\n";
    o << "replay_batch_size = " << replay_batch_size << "\n";
    o << "buffer_capacity = " << buffer_capacity << "\n";
    o << "gr_pool_per_task = " << gr_pool_per_task << "\n";
    o << "tau = " << tau << "\n";
    o << "beta_start = " << fmt_g(beta_start, 17) << "\n";
    o << "beta_end = " << fmt_g(beta_end, 17) << "\n";
    o << "sigma_mode = " << sigma_mode << "\n";
    o << "fid_samples = " << fid_samples << "\n";
    o << "bpd_noise_samples = " << bpd_noise_samples << "\n";
    o << "diagnostic_timesteps = " << join_ints(diagnostic_timesteps) << "\n";
    o << "eval_every = " << eval_every << "\n";
    o << "diag_examples = " << diag_examples << "\n";
    o << "diag_noise_samples = " << diag_noise_samples << "\n";
    o << "bpd_examples = " << bpd_examples << "\n";
    o << "diag_loss_form = " << diag_loss_form << "\n";
    o << "checkpoint_every = " << checkpoint_every << "\n";
    o << "extractor_seed = " << extractor_seed << "\n";
    o << "extractor_steps = " << extractor_steps << "\n";
    o << "model_width = " << model_width << "\n";
    o << "emb_dim = " << emb_dim << "\n";
    o << "mlp_hidden = " << mlp_hidden << "\n";
    o << "seed = " << seed << "\n";
    o << "output_dir = " << output_dir << "\n";
    return o.str();
}

std::uint64_t RunConfig::config_hash() const {
    std::istringstream in(canonical_text());
    std::string line, hashed;
    while (std::getline(in, line)) {
        if (line.rfind("data_dir", 0) == 0 || line.rfind("output_dir", 0) == 0) continue;
        hashed += line;
        hashed += '\n';
    }
    return fnv1a64(hashed);
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        if (!seen.insert(key).second)
            throw ConfigError("config key " + key + " given twice");

        auto as_int = [&](int lo = INT_MIN) {
            try {
                int v = std::stoi(val);
                if (v < lo) throw std::out_of_range("");
                return v;
            } catch (...) {
                throw ConfigError("config key " + key + ": bad value '" + val + "'");
            }
        };
        auto as_u64 = [&]() {
            try {
                return std::uint64_t(std::stoull(val));
            } catch (...) {
                throw ConfigError("config key " + key + ": bad value '" + val + "'");
            }
        };
        auto as_double = [&]() {
            try {
                return std::stod(val);
            } catch (...) {
                throw ConfigError("config key " + key + ": bad value '" + val + "'");
            }
        };

        if (key == "dataset") c.dataset = val;
        else if (key == "data_dir") c.data_dir = val;
        else if (key == "n_tasks") c.n_tasks = as_int(1);
        else if (key == "classes_per_task") c.classes_per_task = as_int(1);
        else if (key == "class_order")
            c.class_order = val == "ascending" ? std::vector<int>{} : parse_int_list(val, key);
        else if (key == "steps_per_task") c.steps_per_task = as_int(1);
        else if (key == "batch_size") c.batch_size = as_int(1);
        else if (key == "val_fraction") c.val_fraction = as_double();
        else if (key == "strategy") c.strategy = val;
        else if (key == "rehearsal_coef") c.rehearsal_coef = as_double();
        else if (key == "l2_lambda") c.l2_lambda = as_double();
        else if (key == "replay_batch_size") c.replay_batch_size = as_int(0);
        else if (key == "buffer_capacity") c.buffer_capacity = as_int(1);
        else if (key == "gr_pool_per_task") c.gr_pool_per_task = as_int(0);
        else if (key == "tau") c.tau = as_int(1);
        else if (key == "beta_start") c.beta_start = as_double();
        else if (key == "beta_end") c.beta_end = as_double();
        else if (key == "sigma_mode") c.sigma_mode = val;
        else if (key == "fid_samples") c.fid_samples = as_int(2);
        else if (key == "bpd_noise_samples") c.bpd_noise_samples = as_int(1);
        else if (key == "diagnostic_timesteps") c.diagnostic_timesteps = parse_int_list(val, key);
        else if (key == "eval_every") c.eval_every = as_int(1);
        else if (key == "diag_examples") c.diag_examples = as_int(1);
        else if (key == "diag_noise_samples") c.diag_noise_samples = as_int(1);
        else if (key == "bpd_examples") c.bpd_examples = as_int(0);
        else if (key == "diag_loss_form") c.diag_loss_form = val;
        else if (key == "checkpoint_every") c.checkpoint_every = as_int(1);
        else if (key == "extractor_seed") c.extractor_seed = as_u64();
        else if (key == "extractor_steps") c.extractor_steps = as_int(1);
        else if (key == "model_width") c.model_width = as_int(1);
        else if (key == "emb_dim") c.emb_dim = as_int(1);
        else if (key == "mlp_hidden") c.mlp_hidden = as_int(1);
        else if (key == "seed") c.seed = as_u64();
        else if (key == "output_dir") c.output_dir = val;
        else throw ConfigError("unknown config key: " + key);
    }
    return c;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

void RunConfig::validate() const {
    strategy_from_string(strategy);
    if (rehearsal_coef < 0.0 && rehearsal_coef != -1.0)
        throw ConfigError("rehearsal_coef must be >= 0");
    if (l2_lambda < 0.0) throw ConfigError("l2_lambda must be >= 0");
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        throw ConfigError("val_fraction must be in (0, 1)");
    if (sigma_mode != "posterior" && sigma_mode != "beta")
        throw ConfigError("sigma_mode must be posterior or beta");
    if (diag_loss_form != "vlb" && diag_loss_form != "simple")
        throw ConfigError("diag_loss_form must be vlb or simple");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw ConfigError("need 0 < beta_start <= beta_end < 1");
    for (int t : diagnostic_timesteps)
        if (t < 1 || t > tau)
            throw ConfigError("diagnostic timestep " + std::to_string(t) + " outside 1..tau");
    if (output_dir.empty()) throw ConfigError("output_dir is required");
}

StrategyConfig RunConfig::strategy_config() const {
    StrategyConfig sc;
    sc.kind = strategy_from_string(strategy);
    sc.rehearsal_coef = rehearsal_coef;
    sc.l2_lambda = l2_lambda;
    sc.replay_batch_size = replay_batch_size > 0 ? replay_batch_size : batch_size;
    sc.buffer_capacity = buffer_capacity;
    sc.gr_pool_per_task = gr_pool_per_task;
    return sc;
}

std::string RunConfig::strategy_label() const {
    StrategyConfig sc = strategy_config();
    switch (sc.kind) {
        case StrategyKind::finetune: return "finetune";
        case StrategyKind::l2: return "l2(lambda=" + fmt_g(sc.l2_lambda, 6) + ")";
        case StrategyKind::experience_replay:
            return "experience_replay(coef=" + fmt_g(sc.effective_coef(), 6) + ")";
        case StrategyKind::generative_replay:
            return "generative_replay(coef=" + fmt_g(sc.effective_coef(), 6) + ")";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Extractor cache

std::string ensure_extractor(const RunConfig& config, double* heldout_acc) {
    fs::path dir = fs::path(config.data_dir) / config.dataset;
    fs::path path = dir / ("fid_extractor_s" + std::to_string(config.extractor_seed) + "_n" +
                           std::to_string(config.extractor_steps) + ".bin");
    if (fs::exists(path)) {
        if (heldout_acc) *heldout_acc = -1.0;
        return path.string();
    }
    auto train = load_idx(resolve_idx_path(dir.string(), "train-images-idx3-ubyte"),
                          resolve_idx_path(dir.string(), "train-labels-idx1-ubyte"));
    auto heldout = load_idx(resolve_idx_path(dir.string(), "t10k-images-idx3-ubyte"),
                            resolve_idx_path(dir.string(), "t10k-labels-idx1-ubyte"));
    double acc = 0.0;
    FeatureExtractor ex = train_feature_extractor(train, heldout, config.extractor_seed,
                                                  config.extractor_steps, 128, &acc);
    if (acc < 0.98)
        std::cerr << "warning: feature extractor held-out accuracy " << acc
                  << " is below the 0.98 calibration target\n";
    ex.save(path.string());
    if (heldout_acc) *heldout_acc = acc;
    return path.string();
}

// ---------------------------------------------------------------------------
// Training run

namespace {

struct RunState {
    RunConfig cfg;
    NoiseSchedule sched;
    LabeledDataset dataset;
    TaskSequence tasks;
    std::unique_ptr<UNet<float>> model;
    std::unique_ptr<Adam<float>> opt;
    StrategyState strategy;
    Rng noise_rng, rehearsal_rng, buffer_rng;
    std::unique_ptr<Batcher> batcher;
    int task_index = 0;
    std::int64_t step_in_task = 0;
    std::int64_t global_step = 0;
    MetricMatrix fid_matrix, bpd_matrix;
    std::vector<TrainLogRecord> train_log;
    std::vector<DiagLogRecord> diag_log;
    MatX<float> diag_val0;  // leading task-1 validation subset
    std::vector<std::optional<FeatureStats>> real_stats;
    std::unique_ptr<FeatureExtractor> extractor;
    bool completed = false;
};

ArchConfig arch_from_config(const RunConfig& c) {
    ArchConfig a;
    a.height = 28;
    a.width = 28;
    a.base_width = c.model_width;
    a.emb_dim = c.emb_dim;
    a.mlp_hidden = c.mlp_hidden;
    a.n_conditions = c.n_tasks;
    return a;
}

Checkpoint make_checkpoint(const RunState& st) {
    Checkpoint ck;
    ck.config_text = st.cfg.canonical_text();
    ck.config_hash = st.cfg.config_hash();
    ck.seed = st.cfg.seed;
    ck.arch = st.model->config();
    ck.global_step = st.global_step;
    ck.task_index = st.task_index;
    ck.step_in_task = st.step_in_task;
    ck.run_completed = st.completed;
    ck.rng_states["noise"] = st.noise_rng.serialize();
    ck.rng_states["rehearsal"] = st.rehearsal_rng.serialize();
    ck.rng_states["buffer"] = st.buffer_rng.serialize();
    ck.adam_t = st.opt->step_count();
    auto p = st.model->parameters();
    ck.params.assign(p.begin(), p.end());
    ck.adam_m = st.opt->m();
    ck.adam_v = st.opt->v();
    ck.l2_anchor = st.strategy.l2_anchor;
    ck.frozen_model = st.strategy.frozen_model;
    ck.buffer = st.strategy.buffer;
    ck.pools = st.strategy.pools;
    ck.completed_tasks = st.strategy.completed_tasks;
    if (st.batcher && st.step_in_task > 0 && st.step_in_task < st.cfg.steps_per_task) {
        ck.batch_perm = st.batcher->permutation();
        ck.batch_cursor = st.batcher->cursor();
        ck.rng_states["batcher"] = st.batcher->rng().serialize();
    }
    for (const auto* m : {&st.fid_matrix, &st.bpd_matrix}) {
        Checkpoint::MatrixDump d;
        d.name = m->name();
        d.n = m->size();
        d.values.resize(std::size_t(d.n) * d.n, 0.0);
        d.mask.resize(std::size_t(d.n) * d.n, 0);
        for (int i = 0; i < d.n; ++i)
            for (int j = i; j < d.n; ++j)
                if (m->is_set(i, j)) {
                    d.values[std::size_t(i) * d.n + j] = m->at(i, j);
                    d.mask[std::size_t(i) * d.n + j] = 1;
                }
        ck.matrices.push_back(std::move(d));
    }
    ck.train_log = st.train_log;
    ck.diag_log = st.diag_log;
    return ck;
}

void save_state(const RunState& st, const std::string& name = "checkpoint.ckpt") {
    save_checkpoint(make_checkpoint(st), (fs::path(st.cfg.output_dir) / name).string());
}

void run_diagnostics(RunState& st) {
    const auto& cfg = st.cfg;
    DiagLossForm form = cfg.diag_loss_form == "vlb" ? DiagLossForm::vlb : DiagLossForm::simple;
    VecX<float> cond0 = VecX<float>::Unit(cfg.n_tasks, 0);
    for (int t : cfg.diagnostic_timesteps) {
        {
            Rng rng = Rng::stream(cfg.seed, "diag_val", std::uint64_t(t));
            double v = per_timestep_loss(*st.model, st.diag_val0, t, cond0, st.sched,
                                         cfg.diag_noise_samples, form, rng);
            st.diag_log.push_back({0, st.global_step, t, 0, v});
        }
        auto it = st.strategy.buffer.per_task_stores.find(0);
        if (it != st.strategy.buffer.per_task_stores.end() && !it->second.empty()) {
            const auto& store = it->second;
            const int d = int(store.front().size());
            MatX<float> buf(Eigen::Index(store.size()), d);
            for (std::size_t i = 0; i < store.size(); ++i)
                for (int j = 0; j < d; ++j)
                    buf(Eigen::Index(i), j) = normalize_pixel(store[i][std::size_t(j)]);
            Rng rng = Rng::stream(cfg.seed, "diag_buf", std::uint64_t(t));
            double v = per_timestep_loss(*st.model, buf, t, cond0, st.sched,
                                         cfg.diag_noise_samples, form, rng);
            st.diag_log.push_back({0, st.global_step, t, 1, v});
        }
    }
}

void boundary_evaluations(RunState& st) {
    const auto& cfg = st.cfg;
    const int c = st.task_index;  // just-finished task (0-based)
    fs::create_directories(fs::path(cfg.output_dir) / "samples");
    for (int e = 0; e <= c; ++e) {
        const auto& task = st.tasks.tasks[std::size_t(e)];
        if (!st.real_stats[std::size_t(e)])
            st.real_stats[std::size_t(e)] = st.extractor->stats(task.val.materialize());
        Rng fid_rng = Rng::stream(cfg.seed, "fid_path", std::uint64_t(e));
        MatX<float> grid;
        double fid = eval_task_fid(*st.model, *st.extractor, task, cfg.fid_samples, st.sched,
                                   fid_rng, &*st.real_stats[std::size_t(e)], &grid);
        st.fid_matrix.record(e, c, fid);
        Rng bpd_rng = Rng::stream(cfg.seed, "bpd", std::uint64_t(e));
        double b = eval_task_bpd(*st.model, task, st.sched, bpd_rng, cfg.bpd_noise_samples,
                                 cfg.bpd_examples);
        st.bpd_matrix.record(e, c, b);
        write_sample_grid((fs::path(cfg.output_dir) / "samples" /
                           ("task" + std::to_string(e + 1) + "_after" + std::to_string(c + 1) +
                            ".png"))
                              .string(),
                          grid.topRows(std::min<Eigen::Index>(grid.rows(), 64)), 28, 8);
    }
}

void emit_csvs(const RunState& st) {
    const auto& cfg = st.cfg;
    auto open = [&](const std::string& name) {
        std::ofstream f(fs::path(cfg.output_dir) / name);
        if (!f) throw DataError("cannot write " + name + " in " + cfg.output_dir);
        return f;
    };
    {
        auto f = open("train_log.csv");
        f << "task,step,loss,base,aux\n";
        for (const auto& r : st.train_log)
            f << r.task + 1 << "," << r.step << "," << fmt_g(r.loss) << "," << fmt_g(r.base)
              << "," << fmt_g(r.aux) << "\n";
    }
    {
        auto f = open("timestep_loss.csv");
        f << "task,step,timestep,split,value\n";
        for (const auto& r : st.diag_log)
            f << r.eval_task + 1 << "," << r.step << "," << r.timestep << ","
              << (r.split == 0 ? "val" : "buffer") << "," << fmt_g(r.value) << "\n";
    }
    for (const auto* m : {&st.fid_matrix, &st.bpd_matrix}) {
        auto f = open("metrics_" + m->name() + ".csv");
        f << "task,after_task,value\n";
        for (int i = 0; i < m->size(); ++i)
            for (int j = i; j < m->size(); ++j)
                if (m->is_set(i, j))
                    f << i + 1 << "," << j + 1 << "," << fmt_g(m->at(i, j)) << "\n";
    }
    {
        auto f = open("summary.csv");
        f << "metric,avg,forgetting\n";
        f << "fid," << fmt_g(avg_metric(st.fid_matrix)) << "," << fmt_g(forgetting(st.fid_matrix))
          << "\n";
        f << "bpd," << fmt_g(avg_metric(st.bpd_matrix)) << "," << fmt_g(forgetting(st.bpd_matrix))
          << "\n";
    }
    {
        auto f = open("config.txt");
        f << cfg.canonical_text();
    }
}

}  // namespace

RunSummary run_train(RunConfig cfg, const TrainOptions& opts) {
    if (opts.seed_override) cfg.seed = *opts.seed_override;
    if (opts.paper_scale) cfg.steps_per_task = 20000;
    if (cfg.data_dir.empty()) {
        const char* env = std::getenv("CLDL_DATA_DIR");
        if (env) cfg.data_dir = env;
    }
    if (cfg.data_dir.empty()) throw ConfigError("data_dir not set (config or CLDL_DATA_DIR)");
    cfg.validate();
    fs::create_directories(cfg.output_dir);

    RunState st;
    st.cfg = cfg;
    st.sched = make_linear_schedule(cfg.tau, cfg.beta_start, cfg.beta_end);
    st.sched.sigma_mode = cfg.sigma_mode == "beta" ? SigmaMode::beta : SigmaMode::posterior;

    fs::path ddir = fs::path(cfg.data_dir) / cfg.dataset;
    st.dataset = load_idx(resolve_idx_path(ddir.string(), "train-images-idx3-ubyte"),
                          resolve_idx_path(ddir.string(), "train-labels-idx1-ubyte"));
    if (st.dataset.rows != 28 || st.dataset.cols != 28)
        throw DataError("expected 28x28 images, got " + std::to_string(st.dataset.rows) + "x" +
                        std::to_string(st.dataset.cols));
    st.tasks = split_tasks(st.dataset, cfg.n_tasks, cfg.classes_per_task, cfg.class_order,
                           cfg.val_fraction, splitmix64(cfg.seed ^ fnv1a64("task_split")));

    std::string expath = ensure_extractor(cfg);
    st.extractor = std::make_unique<FeatureExtractor>(FeatureExtractor::load(expath));
    st.real_stats.resize(std::size_t(cfg.n_tasks));

    st.model = std::make_unique<UNet<float>>(arch_from_config(cfg));
    st.opt = std::make_unique<Adam<float>>(st.model->parameters().size(), 2e-4);
    st.strategy.config = cfg.strategy_config();
    st.fid_matrix = MetricMatrix(cfg.n_tasks, "fid");
    st.bpd_matrix = MetricMatrix(cfg.n_tasks, "bpd");

    st.diag_val0 = st.tasks.tasks[0].val.materialize(
        0, std::size_t(std::min<std::size_t>(std::size_t(cfg.diag_examples),
                                             st.tasks.tasks[0].val.size())));

    bool resumed = false;
    if (!opts.resume_path.empty()) {
        Checkpoint ck = load_checkpoint(opts.resume_path);
        if (ck.config_hash != cfg.config_hash())
            throw ConfigError("refusing to resume: config does not match the checkpoint");
        if (ck.run_completed) {
            std::cout << "run already completed; nothing to resume\n";
            RunSummary s;
            s.completed = true;
            for (const auto& m : ck.matrices) {
                MetricMatrix mm(m.n, m.name);
                for (int i = 0; i < m.n; ++i)
                    for (int j = i; j < m.n; ++j)
                        if (m.mask[std::size_t(i) * m.n + j])
                            mm.record(i, j, m.values[std::size_t(i) * m.n + j]);
                (m.name == "fid" ? s.avg_fid : s.avg_bpd) = avg_metric(mm);
                (m.name == "fid" ? s.fid_forgetting : s.bpd_forgetting) = forgetting(mm);
            }
            return s;
        }
        if (ck.arch != st.model->config())
            throw ConfigError("refusing to resume: architecture mismatch");
        auto p = st.model->parameters();
        if (ck.params.size() != p.size()) throw ConfigError("checkpoint parameter size mismatch");
        std::copy(ck.params.begin(), ck.params.end(), p.begin());
        st.opt->m() = ck.adam_m;
        st.opt->v() = ck.adam_v;
        st.opt->set_step_count(ck.adam_t);
        st.noise_rng.deserialize(ck.rng_states.at("noise"));
        st.rehearsal_rng.deserialize(ck.rng_states.at("rehearsal"));
        st.buffer_rng.deserialize(ck.rng_states.at("buffer"));
        st.strategy.buffer = ck.buffer;
        st.strategy.pools = ck.pools;
        st.strategy.l2_anchor = ck.l2_anchor;
        st.strategy.frozen_model = ck.frozen_model;
        st.strategy.completed_tasks = ck.completed_tasks;
        st.task_index = ck.task_index;
        st.step_in_task = ck.step_in_task;
        st.global_step = ck.global_step;
        st.train_log = ck.train_log;
        st.diag_log = ck.diag_log;
        for (const auto& m : ck.matrices) {
            MetricMatrix& mm = m.name == "fid" ? st.fid_matrix : st.bpd_matrix;
            for (int i = 0; i < m.n; ++i)
                for (int j = i; j < m.n; ++j)
                    if (m.mask[std::size_t(i) * m.n + j])
                        mm.record(i, j, m.values[std::size_t(i) * m.n + j]);
        }
        if (st.step_in_task > 0) {
            st.batcher = std::make_unique<Batcher>(st.tasks.tasks[std::size_t(st.task_index)].train,
                                                   cfg.batch_size, cfg.n_tasks, Rng(0));
            Rng brng;
            brng.deserialize(ck.rng_states.at("batcher"));
            st.batcher->restore_state(ck.batch_perm, ck.batch_cursor, brng);
        }
        resumed = true;
        if (!opts.quiet)
            std::cout << "resumed at task " << st.task_index + 1 << " step " << st.step_in_task
                      << " (global " << st.global_step << ")\n";
    } else {
        Rng init_rng = Rng::stream(cfg.seed, "init");
        st.model->init_params(init_rng);
        st.noise_rng = Rng::stream(cfg.seed, "noise");
        st.rehearsal_rng = Rng::stream(cfg.seed, "rehearsal");
        st.buffer_rng = Rng::stream(cfg.seed, "buffer_select");
    }

    if (!opts.quiet && !resumed)
        std::cout << "model parameters: " << st.model->param_count() << "\n";

    try {
        for (; st.task_index < cfg.n_tasks; ++st.task_index, st.step_in_task = 0) {
            const auto& task = st.tasks.tasks[std::size_t(st.task_index)];
            if (!st.batcher || st.step_in_task == 0)
                st.batcher = std::make_unique<Batcher>(
                    task.train, cfg.batch_size, cfg.n_tasks,
                    Rng::stream(cfg.seed, "batch", std::uint64_t(st.task_index)));

            while (st.step_in_task < cfg.steps_per_task) {
                Batch batch = st.batcher->next();
                st.model->zero_grad();
                double base = 0, aux = 0;
                double loss = training_loss(st.strategy, *st.model, batch, st.sched, st.noise_rng,
                                            st.rehearsal_rng, &base, &aux);
                if (!std::isfinite(loss))
                    throw NumericError("non-finite training loss at global step " +
                                       std::to_string(st.global_step + 1));
                st.opt->step(st.model->parameters(), st.model->gradients());
                ++st.step_in_task;
                ++st.global_step;
                st.train_log.push_back({st.task_index, st.global_step, loss, base, aux});

                if (st.step_in_task % cfg.eval_every == 0 ||
                    st.step_in_task == cfg.steps_per_task)
                    run_diagnostics(st);

                if (opts.stop_after_steps > 0 && st.global_step >= opts.stop_after_steps &&
                    st.step_in_task < cfg.steps_per_task) {
                    save_state(st);
                    if (!opts.quiet)
                        std::cout << "stopped after " << st.global_step
                                  << " steps; checkpoint written\n";
                    return RunSummary{};
                }
                if (st.step_in_task % cfg.checkpoint_every == 0 &&
                    st.step_in_task < cfg.steps_per_task)
                    save_state(st);
            }

            on_task_end(st.strategy, *st.model, task.train, st.task_index, st.global_step,
                        cfg.n_tasks, st.sched, st.buffer_rng);
            boundary_evaluations(st);
            if (!opts.quiet)
                std::cout << "task " << st.task_index + 1 << " done: fid(task1)="
                          << fmt_g(st.fid_matrix.at(0, st.task_index), 6) << " bpd(task1)="
                          << fmt_g(st.bpd_matrix.at(0, st.task_index), 6) << "\n";
            if (st.task_index + 1 < cfg.n_tasks) {
                // boundary checkpoint records the start of the next task
                const int finished = st.task_index;
                st.task_index = finished + 1;
                st.step_in_task = 0;
                save_state(st);
                st.task_index = finished;
            }
        }
    } catch (...) {
        try {
            save_state(st, "checkpoint_abort.ckpt");
        } catch (...) {
        }
        throw;
    }

    st.completed = true;
    save_state(st);
    emit_csvs(st);

    RunSummary s;
    s.completed = true;
    s.avg_fid = avg_metric(st.fid_matrix);
    s.fid_forgetting = forgetting(st.fid_matrix);
    s.avg_bpd = avg_metric(st.bpd_matrix);
    s.bpd_forgetting = forgetting(st.bpd_matrix);
    return s;
}

// ---------------------------------------------------------------------------
// Eval / sample entry points

namespace {

struct LoadedCheckpoint {
    RunConfig cfg;
    Checkpoint ck;
    NoiseSchedule sched;
    LabeledDataset dataset;
    TaskSequence tasks;
    std::unique_ptr<UNet<float>> model;
};

LoadedCheckpoint load_for_eval(const std::string& checkpoint_path,
                               const std::string& data_dir_override) {
    LoadedCheckpoint lc;
    lc.ck = load_checkpoint(checkpoint_path);
    lc.cfg = parse_config_text(lc.ck.config_text);
    if (!data_dir_override.empty()) lc.cfg.data_dir = data_dir_override;
    if (lc.cfg.data_dir.empty()) {
        const char* env = std::getenv("CLDL_DATA_DIR");
        if (env) lc.cfg.data_dir = env;
    }
    lc.sched = make_linear_schedule(lc.cfg.tau, lc.cfg.beta_start, lc.cfg.beta_end);
    lc.sched.sigma_mode = lc.cfg.sigma_mode == "beta" ? SigmaMode::beta : SigmaMode::posterior;
    fs::path ddir = fs::path(lc.cfg.data_dir) / lc.cfg.dataset;
    lc.dataset = load_idx(resolve_idx_path(ddir.string(), "train-images-idx3-ubyte"),
                          resolve_idx_path(ddir.string(), "train-labels-idx1-ubyte"));
    lc.tasks = split_tasks(lc.dataset, lc.cfg.n_tasks, lc.cfg.classes_per_task,
                           lc.cfg.class_order, lc.cfg.val_fraction,
                           splitmix64(lc.cfg.seed ^ fnv1a64("task_split")));
    lc.model = std::make_unique<UNet<float>>(lc.ck.arch);
    auto p = lc.model->parameters();
    if (lc.ck.params.size() != p.size())
        throw DataError("checkpoint parameter size mismatch");
    std::copy(lc.ck.params.begin(), lc.ck.params.end(), p.begin());
    return lc;
}

}  // namespace

std::string run_eval(const std::string& checkpoint_path, const std::string& tasks,
                     const std::string& data_dir_override, std::uint64_t sampling_seed) {
    LoadedCheckpoint lc = load_for_eval(checkpoint_path, data_dir_override);
    std::vector<int> which;
    if (tasks == "all") {
        for (int i = 0; i < lc.cfg.n_tasks; ++i) which.push_back(i);
    } else {
        for (int t : parse_int_list(tasks, "tasks")) {
            if (t < 1 || t > lc.cfg.n_tasks) throw ConfigError("eval: task index out of range");
            which.push_back(t - 1);
        }
    }
    FeatureExtractor ex = FeatureExtractor::load(ensure_extractor(lc.cfg));
    std::ostringstream out;
    out << "task,fid,bpd\n";
    for (int e : which) {
        const auto& task = lc.tasks.tasks[std::size_t(e)];
        Rng fid_rng = Rng::stream(sampling_seed, "fid_path", std::uint64_t(e));
        double fid =
            eval_task_fid(*lc.model, ex, task, lc.cfg.fid_samples, lc.sched, fid_rng, nullptr);
        Rng bpd_rng = Rng::stream(sampling_seed, "bpd", std::uint64_t(e));
        double b = eval_task_bpd(*lc.model, task, lc.sched, bpd_rng, lc.cfg.bpd_noise_samples,
                                 lc.cfg.bpd_examples);
        out << e + 1 << "," << fmt_g(fid) << "," << fmt_g(b) << "\n";
    }
    return out.str();
}

void run_sample(const std::string& checkpoint_path, int task_1based, int n,
                const std::string& out_png, const std::string& data_dir_override,
                std::uint64_t sampling_seed) {
    LoadedCheckpoint lc = load_for_eval(checkpoint_path, data_dir_override);
    if (task_1based < 1 || task_1based > lc.cfg.n_tasks)
        throw ConfigError("sample: task index out of range");
    Rng rng = Rng::stream(sampling_seed, "cli_sample", std::uint64_t(task_1based - 1));
    MatX<float> samples = ancestral_sample(
        *lc.model, VecX<float>::Unit(lc.cfg.n_tasks, task_1based - 1).eval(), n, lc.sched, rng);
    write_sample_grid(out_png, samples, 28, 8);
}

}  // namespace cldl
