#include "cldl/strategies.hpp"

#include <stdexcept>

#include "cldl/errors.hpp"

namespace cldl {

StrategyKind strategy_from_string(const std::string& s) {
    if (s == "finetune" || s == "finetuning") return StrategyKind::finetune;
    if (s == "l2") return StrategyKind::l2;
    if (s == "experience_replay") return StrategyKind::experience_replay;
    if (s == "generative_replay") return StrategyKind::generative_replay;
    throw ConfigError("unknown strategy: " + s);
}

std::string strategy_name(StrategyKind k) {
    switch (k) {
        case StrategyKind::finetune: return "finetune";
        case StrategyKind::l2: return "l2";
        case StrategyKind::experience_replay: return "experience_replay";
        case StrategyKind::generative_replay: return "generative_replay";
    }
    return "?";
}

Batch sample_rehearsal_batch(const ReplayBuffer& buffer, int batch_size, int n_conditions,
                             Rng& rng) {
    if (buffer.empty()) throw std::logic_error("sample_rehearsal_batch: empty buffer");
    if (batch_size < 0) throw std::invalid_argument("sample_rehearsal_batch: batch_size >= 0");
    std::vector<int> tasks;
    for (const auto& [t, s] : buffer.per_task_stores) tasks.push_back(t);

    Batch b;
    b.task_index = -1;
    if (batch_size == 0) return b;
    const auto& first = buffer.per_task_stores.begin()->second;
    const int d = int(first.front().size());
    b.x.resize(batch_size, d);
    b.cond = MatX<float>::Zero(batch_size, n_conditions);
    for (int i = 0; i < batch_size; ++i) {
        int task = tasks[rng.uniform_index(tasks.size())];
        const auto& store = buffer.per_task_stores.at(task);
        const auto& img = store[rng.uniform_index(store.size())];
        for (int j = 0; j < d; ++j) b.x(i, j) = normalize_pixel(img[std::size_t(j)]);
        b.cond(i, task) = 1.0f;
    }
    return b;
}

namespace {

// Draw per-example timesteps then noise, in that fixed order.
double simple_loss_on_batch(NoisePredictor<float>& model, const Batch& batch,
                            const NoiseSchedule& sched, Rng& rng, double grad_weight) {
    const int n = batch.size();
    std::vector<int> ts(static_cast<std::size_t>(n));
    for (auto& t : ts) t = 1 + int(rng.uniform_index(std::uint64_t(sched.tau)));
    MatX<float> eps(n, batch.x.cols());
    rng.fill_normal(eps.data(), std::size_t(eps.size()));
    return loss_simple_batch(model, batch.x, ts, batch.cond, eps, sched, grad_weight);
}

Batch sample_pool_batch(const std::vector<GenPool>& pools, int batch_size, int n_conditions,
                        Rng& rng) {
    if (pools.empty()) throw std::logic_error("generative replay: no rehearsal pools");
    const int d = int(pools.front().samples.cols());
    Batch b;
    b.task_index = -1;
    b.x.resize(batch_size, d);
    b.cond = MatX<float>::Zero(batch_size, n_conditions);
    for (int i = 0; i < batch_size; ++i) {
        const auto& pool = pools[rng.uniform_index(pools.size())];
        b.x.row(i) = pool.samples.row(Eigen::Index(rng.uniform_index(std::uint64_t(pool.samples.rows()))));
        b.cond(i, pool.task_index) = 1.0f;
    }
    return b;
}

}  // namespace

double training_loss(StrategyState& st, NoisePredictor<float>& model, const Batch& current,
                     const NoiseSchedule& sched, Rng& noise_rng, Rng& rehearsal_rng,
                     double* base_out, double* aux_out) {
    const double base = simple_loss_on_batch(model, current, sched, noise_rng, 1.0);
    double aux = 0.0;
    const double coef = st.config.effective_coef();

    switch (st.config.kind) {
        case StrategyKind::finetune:
            break;
        case StrategyKind::l2:
            if (st.l2_anchor) {
                const double lambda = st.config.l2_lambda;
                double d2 = l2_distance_sq(model, *st.l2_anchor);
                aux = lambda * d2;
                auto p = model.parameters();
                auto g = model.gradients();
                const auto& a = st.l2_anchor->values;
                for (std::size_t i = 0; i < p.size(); ++i)
                    g[i] += float(2.0 * lambda * (double(p[i]) - double(a[i])));
            }
            break;
        case StrategyKind::experience_replay:
            if (coef != 0.0 && !st.buffer.empty()) {
                Batch rb = sample_rehearsal_batch(st.buffer, st.config.replay_batch_size,
                                                  model.n_conditions(), rehearsal_rng);
                aux = coef * simple_loss_on_batch(model, rb, sched, rehearsal_rng, coef);
            }
            break;
        case StrategyKind::generative_replay:
            if (coef != 0.0 && st.frozen_model) {
                Batch rb;
                if (st.config.gr_pool_per_task > 0) {
                    rb = sample_pool_batch(st.pools, st.config.replay_batch_size,
                                           model.n_conditions(), rehearsal_rng);
                } else {
                    // per-step generation from the frozen snapshot
                    ParameterSnapshot<float> live = snapshot(model);
                    restore(model, *st.frozen_model);
                    const int bs = st.config.replay_batch_size;
                    rb.x.resize(bs, model.input_dim());
                    rb.cond = MatX<float>::Zero(bs, model.n_conditions());
                    for (int i = 0; i < bs; ++i) {
                        int task = int(rehearsal_rng.uniform_index(std::uint64_t(st.completed_tasks)));
                        auto s = ancestral_sample(model, VecX<float>::Unit(model.n_conditions(), task).eval(),
                                                  1, sched, rehearsal_rng);
                        rb.x.row(i) = s.row(0);
                        rb.cond(i, task) = 1.0f;
                    }
                    restore(model, live);
                }
                aux = coef * simple_loss_on_batch(model, rb, sched, rehearsal_rng, coef);
            }
            break;
    }
    if (base_out) *base_out = base;
    if (aux_out) *aux_out = aux;
    return base + aux;
}

void on_task_end(StrategyState& st, NoisePredictor<float>& model, const SplitView& finished_train,
                 int task_index, std::int64_t step_index, int n_conditions,
                 const NoiseSchedule& sched, Rng& buffer_rng) {
    switch (st.config.kind) {
        case StrategyKind::finetune:
            break;
        case StrategyKind::l2:
            st.l2_anchor = snapshot(model, step_index, task_index);
            break;
        case StrategyKind::experience_replay: {
            if (st.buffer.per_task_stores.count(task_index))
                throw std::logic_error("on_task_end called twice for task " +
                                       std::to_string(task_index));
            st.buffer.capacity_per_task = st.config.buffer_capacity;
            const std::size_t n = finished_train.size();
            std::vector<std::uint32_t> pos(n);
            for (std::size_t i = 0; i < n; ++i) pos[i] = std::uint32_t(i);
            buffer_rng.shuffle(pos.begin(), pos.end());
            const std::size_t take = std::min(n, std::size_t(st.config.buffer_capacity));
            const int d = finished_train.data->rows * finished_train.data->cols;
            auto& store = st.buffer.per_task_stores[task_index];
            for (std::size_t i = 0; i < take; ++i) {
                const std::uint8_t* px = finished_train.image_bytes(pos[i]);
                store.emplace_back(px, px + d);
            }
            break;
        }
        case StrategyKind::generative_replay: {
            st.frozen_model = snapshot(model, step_index, task_index);
            if (st.config.gr_pool_per_task > 0) {
                st.pools.clear();
                for (int t = 0; t <= task_index; ++t) {
                    Rng pool_rng = buffer_rng;  // advance the stream per pool
                    buffer_rng.next_u64();
                    GenPool pool;
                    pool.task_index = t;
                    pool.samples = ancestral_sample(
                        model, VecX<float>::Unit(n_conditions, t).eval(),
                        st.config.gr_pool_per_task, sched, pool_rng);
                    st.pools.push_back(std::move(pool));
                }
            }
            break;
        }
    }
    st.completed_tasks = std::max(st.completed_tasks, task_index + 1);
}

}  // namespace cldl
