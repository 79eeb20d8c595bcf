// moelab: run experiments, compare strategies, and run the verification suite.
//
// Exit codes: 0 success, 1 configuration or I/O error, 2 training aborted on a
// non-finite loss, 3 selftest failure.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "moelab/config.hpp"
#include "moelab/telemetry.hpp"
#include "moelab/trainer.hpp"
#include "moelab/verify.hpp"

namespace fs = std::filesystem;
using namespace moelab;

namespace {

enum Exit { kOk = 0, kConfig = 1, kNumeric = 2, kSelftest = 3 };

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> strategy;
    std::optional<int> target;
    std::optional<double> p0, kpro, kint;
    std::vector<std::string> sets;  // KEY=VALUE
};

void add_override_flags(CLI::App* cmd, Overrides& o, bool with_seed) {
    if (with_seed) {
        cmd->add_option("--seed", o.seed, "Run seed (overrides run.seed)");
    }
    cmd->add_option("--strategy", o.strategy, "Routing strategy")->check(CLI::IsMember({"topk", "topp", "dtopp"}));
    cmd->add_option("--target", o.target, "Target activated experts (k for topk)");
    cmd->add_option("--p0", o.p0, "Initial threshold for the PI controller");
    cmd->add_option("--kpro", o.kpro, "Proportional gain");
    cmd->add_option("--kint", o.kint, "Integral gain");
    cmd->add_option("--set", o.sets, "Override any config key, e.g. --set optimizer.steps=500");
}

/// Config file, then CLI flags on top; defaults fill whatever is left.
config::RunConfig load_config(const fs::path& path, const Overrides& o) {
    config::ptree pt = config::read_config_tree(path);
    for (const auto& kv : o.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
        }
        config::set_key(pt, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (o.seed) {
        config::set_key(pt, "run.seed", std::to_string(*o.seed));
    }
    if (o.strategy) {
        config::set_key(pt, "strategy.kind", *o.strategy);
    }
    if (o.target) {
        config::set_key(pt, "strategy.target", std::to_string(*o.target));
    }
    if (o.p0) {
        config::set_key(pt, "pi.p0", config::detail::format_value(*o.p0));
    }
    if (o.kpro) {
        config::set_key(pt, "pi.kpro", config::detail::format_value(*o.kpro));
    }
    if (o.kint) {
        config::set_key(pt, "pi.kint", config::detail::format_value(*o.kint));
    }
    try {
        return config::resolve(pt);
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

std::string optional_real(const std::optional<double>& v) { return v ? telemetry::format_real(*v) : std::string(); }

int run_command(const fs::path& config_path, const fs::path& out, const Overrides& o, bool quiet) {
    const config::RunConfig cfg = load_config(config_path, o);
    const std::int64_t every = cfg.train.eval_interval;
    const auto progress = [&](const train::StepReport& r) {
        if (!quiet && (r.step % every == 0 || r.step == cfg.train.steps)) {
            std::cout << "step " << r.step << "  ce " << telemetry::format_real(r.loss.ce) << "  active "
                      << telemetry::format_real(r.activation.mean) << "  threshold "
                      << (r.threshold ? telemetry::format_real(*r.threshold) : "-") << "\n";
        }
    };
    const train::RunSummary s = train::run_experiment(cfg, out, progress);
    std::cout << "final_train_loss " << telemetry::format_real(s.final_train_loss) << "\nfinal_val_loss "
              << telemetry::format_real(s.final_val_loss) << "\nmean_active_final "
              << telemetry::format_real(s.mean_active_final) << "\nthreshold_final "
              << (s.threshold_final ? telemetry::format_real(*s.threshold_final) : "-") << "\nartifacts in " << out.string()
              << "\n";
    return kOk;
}

int thread_budget() {
    const char* env = std::getenv("MOE_LAB_THREADS");
    if (!env || !*env) {
        return 1;
    }
    try {
        const int n = std::stoi(env);
        if (n < 1) {
            throw std::invalid_argument("");
        }
        return n;
    } catch (const std::exception&) {
        throw ConfigError(std::string("MOE_LAB_THREADS must be a positive integer, got '") + env + "'");
    }
}

int compare_command(const std::vector<std::string>& configs, const std::vector<std::uint64_t>& seeds,
                    const fs::path& out, const Overrides& o) {
    if (configs.size() < 2) {
        throw ConfigError("compare needs at least two configs");
    }
    struct Job {
        std::size_t index = 0;
        std::string config_path;
        std::uint64_t seed = 0;
        config::RunConfig cfg;
        fs::path dir;
        std::optional<train::RunSummary> summary;
        int code = kOk;
        std::string error;
    };
    std::vector<Job> jobs;
    for (std::size_t c = 0; c < configs.size(); ++c) {
        for (std::uint64_t seed : seeds) {
            Overrides per = o;
            per.seed = seed;
            Job j;
            j.index = jobs.size();
            j.config_path = configs[c];
            j.seed = seed;
            j.cfg = load_config(configs[c], per);
            std::ostringstream name;
            name << std::setw(2) << std::setfill('0') << c << "-" << fs::path(configs[c]).stem().string() << "-seed" << seed;
            j.dir = out / name.str();
            jobs.push_back(std::move(j));
        }
    }
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) {
        throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
    }

    std::atomic<std::size_t> next{0};
    std::mutex log;
    const auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            Job& j = jobs[i];
            try {
                j.summary = train::run_experiment(j.cfg, j.dir);
            } catch (const NumericError& e) {
                j.code = kNumeric;
                j.error = e.what();
            } catch (const std::exception& e) {
                j.code = kConfig;
                j.error = e.what();
            }
            const std::lock_guard<std::mutex> lock(log);
            std::cout << "[" << j.index << "] " << j.config_path << " seed " << j.seed << ": "
                      << (j.summary ? "ok, final_val_loss " + telemetry::format_real(j.summary->final_val_loss)
                                    : "FAILED: " + j.error)
                      << std::endl;
        }
    };
    const int threads = std::min<int>(thread_budget(), static_cast<int>(jobs.size()));
    std::vector<std::thread> pool;
    for (int t = 1; t < threads; ++t) {
        pool.emplace_back(worker);
    }
    worker();
    for (auto& t : pool) {
        t.join();
    }

    std::string summary = "config,seed,final_train_loss,final_val_loss,mean_active_final,threshold_final\n";
    int code = kOk;
    for (const Job& j : jobs) {
        if (!j.summary) {
            code = code == kOk ? j.code : code;
            continue;
        }
        summary += j.config_path + "," + std::to_string(j.seed) + "," + telemetry::format_real(j.summary->final_train_loss) +
                   "," + telemetry::format_real(j.summary->final_val_loss) + "," +
                   telemetry::format_real(j.summary->mean_active_final) + "," + optional_real(j.summary->threshold_final) + "\n";
    }
    telemetry::write_text(out / "summary.csv", summary);
    if (code != kOk) {
        std::cerr << "error: some runs failed; summary.csv holds the completed ones\n";
    }
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mixture-of-experts routing lab"};
    app.require_subcommand(1);

    Overrides run_o;
    std::string run_config, run_out;
    bool quiet = false;
    auto* run = app.add_subcommand("run", "Train one configuration");
    run->add_option("--config", run_config, "Config file (.cfg) or a run manifest (.json)")->required();
    run->add_option("--out", run_out, "Output directory")->required();
    run->add_flag("--quiet", quiet, "Only print the final summary");
    add_override_flags(run, run_o, true);

    Overrides cmp_o;
    std::vector<std::string> cmp_configs;
    std::vector<std::uint64_t> cmp_seeds{1};
    std::string cmp_out;
    auto* compare = app.add_subcommand("compare", "Train several configs over several seeds");
    compare->add_option("--configs", cmp_configs, "Config files")->required();
    compare->add_option("--seeds", cmp_seeds, "Seeds")->capture_default_str();
    compare->add_option("--out", cmp_out, "Output directory")->required();
    add_override_flags(compare, cmp_o, false);

    std::string fault;
    std::uint64_t selftest_seed = verify::SelftestOptions{}.seed;
    auto* selftest = app.add_subcommand("selftest", "Run the oracle, controller, gradient and loss checks");
    selftest->add_option("--inject-fault", fault, "Test hook: deliberately break a component")
        ->check(CLI::IsMember({"tie-break"}));
    selftest->add_option("--seed", selftest_seed, "Seed for generated cases")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        if (*run) {
            return run_command(run_config, run_out, run_o, quiet);
        }
        if (*compare) {
            return compare_command(cmp_configs, cmp_seeds, cmp_out, cmp_o);
        }
        verify::SelftestOptions opts;
        opts.flip_tie_break = fault == "tie-break";
        opts.seed = selftest_seed;
        return verify::selftest(std::cout, opts) ? kOk : kSelftest;
    } catch (const NumericError& e) {
        std::cerr << "error: training aborted: " << e.what() << "\n";
        return kNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kConfig;
    }
}
