#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "cldl/errors.hpp"
#include "cldl/image_io.hpp"
#include "cldl/runner.hpp"

namespace cldl {

namespace fs = std::filesystem;

namespace {

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open " + path.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        rows.push_back(std::move(cells));
    }
    return rows;
}

struct RunData {
    std::string dir;
    RunConfig cfg;
    std::string label;
    double avg_fid = 0, fid_forgetting = 0, avg_bpd = 0, bpd_forgetting = 0;
    // (step, timestep, split) -> value, task-1 rows only
    std::map<std::tuple<long, int, std::string>, double> diag;
    std::map<int, double> bpd_task1;  // after_task -> value
};

// experiment frame: canonical config minus run identity and strategy fields
std::string frame_of(const RunConfig& cfg) {
    std::istringstream in(cfg.canonical_text());
    std::string line, out;
    while (std::getline(in, line)) {
        bool skip = false;
        for (const char* k : {"seed", "output_dir", "data_dir", "strategy", "rehearsal_coef",
                              "l2_lambda", "checkpoint_every"})
            if (line.rfind(std::string(k) + " =", 0) == 0) skip = true;
        if (!skip) {
            out += line;
            out += '\n';
        }
    }
    return out;
}

struct Agg {
    double mean = 0, se = 0;
};

Agg aggregate(const std::vector<double>& xs) {
    Agg a;
    const double n = double(xs.size());
    for (double x : xs) a.mean += x;
    a.mean /= n;
    if (xs.size() > 1) {
        double var = 0;
        for (double x : xs) var += (x - a.mean) * (x - a.mean);
        var /= (n - 1);
        a.se = std::sqrt(var / n);
    }
    return a;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

}  // namespace

void run_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
    if (run_dirs.empty()) throw ConfigError("report: no runs given");
    std::vector<RunData> runs;
    for (const auto& dir : run_dirs) {
        RunData r;
        r.dir = dir;
        std::ifstream cf(fs::path(dir) / "config.txt");
        if (!cf) throw DataError("missing config.txt in " + dir);
        std::stringstream ss;
        ss << cf.rdbuf();
        r.cfg = parse_config_text(ss.str());
        r.label = r.cfg.strategy_label();

        for (const auto& row : read_csv(fs::path(dir) / "summary.csv")) {
            if (row[0] == "metric") continue;
            if (row.size() != 3) throw DataError("bad summary.csv row in " + dir);
            if (row[0] == "fid") {
                r.avg_fid = std::stod(row[1]);
                r.fid_forgetting = std::stod(row[2]);
            } else if (row[0] == "bpd") {
                r.avg_bpd = std::stod(row[1]);
                r.bpd_forgetting = std::stod(row[2]);
            }
        }
        for (const auto& row : read_csv(fs::path(dir) / "timestep_loss.csv")) {
            if (row[0] == "task") continue;
            if (row[0] == "1")
                r.diag[{std::stol(row[1]), std::stoi(row[2]), row[3]}] = std::stod(row[4]);
        }
        for (const auto& row : read_csv(fs::path(dir) / "metrics_bpd.csv")) {
            if (row[0] == "task") continue;
            if (row[0] == "1") r.bpd_task1[std::stoi(row[1])] = std::stod(row[2]);
        }
        runs.push_back(std::move(r));
    }

    const std::string frame = frame_of(runs.front().cfg);
    for (const auto& r : runs)
        if (frame_of(r.cfg) != frame)
            throw ConfigError("aggregation error: run " + r.dir +
                              " was produced with a mismatched config");

    std::map<std::string, std::vector<const RunData*>> groups;
    for (const auto& r : runs) groups[r.label].push_back(&r);

    fs::create_directories(out_dir);

    {
        std::ofstream csv(fs::path(out_dir) / "report.csv");
        std::ofstream md(fs::path(out_dir) / "report.md");
        csv << "strategy,seeds,avg_fid,avg_fid_se,fid_forgetting,fid_forgetting_se,avg_bpd,"
               "avg_bpd_se,bpd_forgetting,bpd_forgetting_se\n";
        md << "# Continual diffusion benchmark\n\n";
        md << "Mean ± standard error over seeds.\n\n";
        md << "| Strategy | avg FID | FID-forgetting | avg BPD | BPD-forgetting |\n";
        md << "|---|---|---|---|---|\n";
        for (const auto& [label, rs] : groups) {
            std::vector<double> af, ff, ab, bf;
            for (const auto* r : rs) {
                af.push_back(r->avg_fid);
                ff.push_back(r->fid_forgetting);
                ab.push_back(r->avg_bpd);
                bf.push_back(r->bpd_forgetting);
            }
            Agg a1 = aggregate(af), a2 = aggregate(ff), a3 = aggregate(ab), a4 = aggregate(bf);
            csv << label << "," << rs.size() << "," << fmt(a1.mean) << "," << fmt(a1.se) << ","
                << fmt(a2.mean) << "," << fmt(a2.se) << "," << fmt(a3.mean) << "," << fmt(a3.se)
                << "," << fmt(a4.mean) << "," << fmt(a4.se) << "\n";
            md << "| " << label << " | " << fmt(a1.mean) << " ± " << fmt(a1.se) << " | "
               << fmt(a2.mean) << " ± " << fmt(a2.se) << " | " << fmt(a3.mean) << " ± "
               << fmt(a3.se) << " | " << fmt(a4.mean) << " ± " << fmt(a4.se) << " |\n";
        }
        md << "\nPer-run sample grids are under each run's `samples/` directory.\n";
    }

    // BPD of task 1 after each task (Fig 1b analogue)
    {
        std::vector<PlotSeries> series;
        for (const auto& [label, rs] : groups) {
            PlotSeries s;
            s.label = label;
            std::set<int> afters;
            for (const auto* r : rs)
                for (const auto& [j, v] : r->bpd_task1) afters.insert(j);
            for (int j : afters) {
                std::vector<double> vals;
                for (const auto* r : rs)
                    if (r->bpd_task1.count(j)) vals.push_back(r->bpd_task1.at(j));
                s.x.push_back(j);
                s.y.push_back(aggregate(vals).mean);
            }
            series.push_back(std::move(s));
        }
        write_svg_plot((fs::path(out_dir) / "plot_bpd_task1.svg").string(),
                       "Task-1 BPD after each task", "after task", "BPD", series);
    }

    // diagnostic curves per timestep (Fig 1c/1d analogues) and buffer-vs-val
    // overlays (Fig 2 analogue)
    std::set<int> timesteps;
    for (const auto& r : runs)
        for (const auto& [key, v] : r.diag) timesteps.insert(std::get<1>(key));
    for (int t : timesteps) {
        std::vector<PlotSeries> series;
        for (const auto& [label, rs] : groups) {
            PlotSeries s;
            s.label = label;
            std::set<long> steps;
            for (const auto* r : rs)
                for (const auto& [key, v] : r->diag)
                    if (std::get<1>(key) == t && std::get<2>(key) == "val")
                        steps.insert(std::get<0>(key));
            for (long step : steps) {
                std::vector<double> vals;
                for (const auto* r : rs) {
                    auto it = r->diag.find({step, t, "val"});
                    if (it != r->diag.end()) vals.push_back(it->second);
                }
                if (!vals.empty()) {
                    s.x.push_back(double(step));
                    s.y.push_back(aggregate(vals).mean);
                }
            }
            if (!s.x.empty()) series.push_back(std::move(s));
        }
        write_svg_plot((fs::path(out_dir) / ("plot_diag_t" + std::to_string(t) + ".svg")).string(),
                       "Task-1 validation loss term at t=" + std::to_string(t), "training step",
                       "loss term (nats)", series);

        for (const auto& [label, rs] : groups) {
            bool has_buffer = false;
            for (const auto* r : rs)
                for (const auto& [key, v] : r->diag)
                    if (std::get<1>(key) == t && std::get<2>(key) == "buffer") has_buffer = true;
            if (!has_buffer) continue;
            std::vector<PlotSeries> overlay;
            for (const std::string split : {"val", "buffer"}) {
                PlotSeries s;
                s.label = split;
                std::set<long> steps;
                for (const auto* r : rs)
                    for (const auto& [key, v] : r->diag)
                        if (std::get<1>(key) == t && std::get<2>(key) == split)
                            steps.insert(std::get<0>(key));
                for (long step : steps) {
                    std::vector<double> vals;
                    for (const auto* r : rs) {
                        auto it = r->diag.find({step, t, split});
                        if (it != r->diag.end()) vals.push_back(it->second);
                    }
                    if (!vals.empty()) {
                        s.x.push_back(double(step));
                        s.y.push_back(aggregate(vals).mean);
                    }
                }
                overlay.push_back(std::move(s));
            }
            std::string safe = label;
            for (auto& ch : safe)
                if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
            write_svg_plot((fs::path(out_dir) /
                            ("plot_overfit_t" + std::to_string(t) + "_" + safe + ".svg"))
                               .string(),
                           label + ": task-1 buffer vs validation at t=" + std::to_string(t),
                           "training step", "loss term (nats)", overlay);
        }
    }
}

}  // namespace cldl
