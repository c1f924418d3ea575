#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cldl/errors.hpp"
#include "cldl/runner.hpp"
#include "cldl/synth.hpp"

namespace fs = std::filesystem;

namespace {

bool wildcard_match(const std::string& pat, const std::string& s) {
    std::size_t p = 0, i = 0, star = std::string::npos, mark = 0;
    while (i < s.size()) {
        if (p < pat.size() && (pat[p] == s[i])) {
            ++p;
            ++i;
        } else if (p < pat.size() && pat[p] == '*') {
            star = p++;
            mark = i;
        } else if (star != std::string::npos) {
            p = star + 1;
            i = ++mark;
        } else {
            return false;
        }
    }
    while (p < pat.size() && pat[p] == '*') ++p;
    return p == pat.size();
}

std::vector<std::string> expand_runs(const std::vector<std::string>& patterns) {
    std::vector<std::string> out;
    for (const auto& pat : patterns) {
        if (pat.find('*') == std::string::npos) {
            out.push_back(pat);
            continue;
        }
        fs::path p(pat);
        fs::path parent = p.parent_path().empty() ? "." : p.parent_path();
        std::string leaf = p.filename().string();
        std::vector<std::string> matches;
        if (fs::exists(parent))
            for (const auto& e : fs::directory_iterator(parent))
                if (wildcard_match(leaf, e.path().filename().string()))
                    matches.push_back(e.path().string());
        std::sort(matches.begin(), matches.end());
        out.insert(out.end(), matches.begin(), matches.end());
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cldl - continual learning lab for small conditional diffusion models"};
    app.require_subcommand(1);

    // train
    auto* train = app.add_subcommand("train", "run a continual training experiment");
    std::string config_path, resume_path;
    std::uint64_t seed_override = 0;
    bool has_seed = false, paper_scale = false, quiet = false;
    std::int64_t stop_after = 0;
    train->add_option("--config", config_path, "config file")->required();
    train->add_option("--seed", seed_override, "override the config seed")
        ->each([&](const std::string&) { has_seed = true; });
    train->add_flag("--paper-scale", paper_scale, "use 20000 steps per task");
    train->add_option("--resume", resume_path, "resume from a checkpoint");
    train->add_option("--stop-after-steps", stop_after,
                      "stop cleanly after N global steps (writes a checkpoint)");
    train->add_flag("--quiet", quiet, "suppress progress output");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate FID/BPD at a checkpoint");
    std::string eval_ckpt, eval_tasks = "all", eval_data_dir;
    std::uint64_t sampling_seed = 9999;
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    eval->add_option("--tasks", eval_tasks, "'all' or comma-separated 1-based task list");
    eval->add_option("--data-dir", eval_data_dir, "data directory override");
    eval->add_option("--sampling-seed", sampling_seed, "seed for evaluation sampling");

    // report
    auto* report = app.add_subcommand("report", "aggregate runs into tables and plots");
    std::vector<std::string> run_patterns;
    std::string report_out;
    report->add_option("--runs", run_patterns, "run directories (globs allowed)")->required();
    report->add_option("--out", report_out, "output directory")->required();

    // sample
    auto* sample = app.add_subcommand("sample", "draw samples from a checkpoint");
    std::string sample_ckpt, sample_out = "grid.png", sample_data_dir;
    int sample_task = 1, sample_n = 64;
    std::uint64_t sample_seed = 4242;
    sample->add_option("--checkpoint", sample_ckpt, "checkpoint file")->required();
    sample->add_option("--task", sample_task, "1-based task index")->required();
    sample->add_option("--n", sample_n, "number of samples");
    sample->add_option("--out", sample_out, "output PNG");
    sample->add_option("--data-dir", sample_data_dir, "data directory override");
    sample->add_option("--seed", sample_seed, "sampling seed");

    // make-data
    auto* md_cmd = app.add_subcommand("make-data", "generate the synthetic digit dataset (IDX files)");
    std::string md_out;
    std::uint64_t md_seed = 123;
    std::size_t md_train = 60000, md_test = 10000;
    md_cmd->add_option("--out", md_out, "output directory (files land in <out>)")->required();
    md_cmd->add_option("--n-train", md_train, "training images");
    md_cmd->add_option("--n-test", md_test, "held-out images");
    md_cmd->add_option("--seed", md_seed, "generator seed");

    // fid-extractor
    auto* fx = app.add_subcommand("fid-extractor", "train/cache the frozen FID feature extractor");
    std::string fx_data_dir, fx_dataset = "mnist";
    std::uint64_t fx_seed = 1234;
    int fx_steps = 3000;
    fx->add_option("--data-dir", fx_data_dir, "data directory")->required();
    fx->add_option("--dataset", fx_dataset, "dataset name");
    fx->add_option("--seed", fx_seed, "extractor training seed");
    fx->add_option("--steps", fx_steps, "training steps");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) {
            cldl::RunConfig cfg = cldl::parse_config_file(config_path);
            cldl::TrainOptions opts;
            if (has_seed) opts.seed_override = seed_override;
            opts.paper_scale = paper_scale;
            opts.resume_path = resume_path;
            opts.stop_after_steps = stop_after;
            opts.quiet = quiet;
            cldl::RunSummary s = cldl::run_train(cfg, opts);
            if (s.completed && !quiet)
                std::cout << "avg_fid=" << s.avg_fid << " fid_forgetting=" << s.fid_forgetting
                          << " avg_bpd=" << s.avg_bpd << " bpd_forgetting=" << s.bpd_forgetting
                          << "\n";
        } else if (*eval) {
            std::cout << cldl::run_eval(eval_ckpt, eval_tasks, eval_data_dir, sampling_seed);
        } else if (*report) {
            auto dirs = expand_runs(run_patterns);
            cldl::run_report(dirs, report_out);
            std::cout << "report written to " << report_out << "\n";
        } else if (*sample) {
            cldl::run_sample(sample_ckpt, sample_task, sample_n, sample_out, sample_data_dir,
                             sample_seed);
            std::cout << "wrote " << sample_out << "\n";
        } else if (*md_cmd) {
            cldl::write_synthetic_dataset(md_out, md_train, md_test, md_seed);
            std::cout << "wrote synthetic dataset (" << md_train << " train / " << md_test
                      << " test) to " << md_out << "\n";
        } else if (*fx) {
            cldl::RunConfig cfg;
            cfg.data_dir = fx_data_dir;
            cfg.dataset = fx_dataset;
            cfg.extractor_seed = fx_seed;
            cfg.extractor_steps = fx_steps;
            double acc = 0;
            std::string path = cldl::ensure_extractor(cfg, &acc);
            std::cout << "extractor at " << path;
            if (acc >= 0) std::cout << " (held-out accuracy " << acc << ")";
            std::cout << "\n";
        }
    } catch (const cldl::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const cldl::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const cldl::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
