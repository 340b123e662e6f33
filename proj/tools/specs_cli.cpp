#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "specs/harness.hpp"

namespace {

void print_aggregates(const specs::RunReport& report) {
    std::printf("%-22s %9s %9s %12s %14s %9s\n", "method", "episodes", "acc", "lat(s)",
                "lat/step(s)", "%big");
    for (const auto& row : report.aggregates) {
        std::printf("%-22s %9d %9s %12.6f %14.6f %9.4f\n", row.method.c_str(), row.episodes,
                    std::isnan(row.accuracy) ? "-" : std::to_string(row.accuracy).c_str(),
                    row.mean_latency, row.mean_latency_per_step, row.mean_percent_big);
    }
}

int run_command(const std::string& config_path, const std::string& output_override, int workers) {
    specs::ExperimentConfig cfg = specs::load_experiment_config(config_path);
    if (!output_override.empty()) cfg.output_dir = output_override;
    if (workers > 0) cfg.workers = workers;
    specs::RunReport report = specs::run_experiment(cfg);
    specs::write_report(report, report.config.output_dir);
    print_aggregates(report);
    std::ofstream breakdown(std::filesystem::path(report.config.output_dir) /
                            "latency_breakdown.json");
    breakdown << specs::latency_breakdown(report).dump(2) << "\n";
    std::cout << "report written to " << report.config.output_dir << "\n";
    return 0;
}

int sweep_command(const std::string& config_path, const std::vector<double>& taus,
                  const std::vector<int>& ns, const std::string& output_override) {
    specs::ExperimentConfig base = specs::load_experiment_config(config_path);
    std::string out_root = output_override.empty() ? base.output_dir : output_override;
    std::vector<double> tau_grid = taus.empty() ? std::vector<double>{base.run.tau} : taus;
    std::vector<int> n_grid = ns.empty() ? std::vector<int>{base.run.n} : ns;
    for (double tau : tau_grid) {
        for (int n : n_grid) {
            specs::ExperimentConfig cfg = base;
            cfg.run.tau = tau;
            cfg.run.n = n;
            char tag[64];
            std::snprintf(tag, sizeof(tag), "tau%.3f_n%d", tau, n);
            cfg.output_dir = (std::filesystem::path(out_root) / tag).string();
            specs::RunReport report = specs::run_experiment(cfg);
            specs::write_report(report, cfg.output_dir);
            std::cout << "== tau=" << tau << " n=" << n << " ==\n";
            print_aggregates(report);
        }
    }
    return 0;
}

int theory_command(const std::string& instance_path, std::vector<int> ns,
                   const std::string& out_path) {
    specs::ToyInstance inst = specs::load_instance(instance_path);
    if (ns.empty()) ns = {4, 8, 16, 32, 64};
    nlohmann::json report = specs::theory_suite(inst, ns);
    for (const auto& c : report.at("checks")) {
        std::printf("[%s] %-40s measured=%.6g tolerance=%.6g\n",
                    c.at("pass").get<bool>() ? "PASS" : "FAIL",
                    c.at("check").get<std::string>().c_str(), c.at("measured").get<double>(),
                    c.at("tolerance").get<double>());
    }
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        out << report.dump(2) << "\n";
        std::cout << "validation report written to " << out_path << "\n";
    }
    return report.at("all_pass").get<bool>() ? 0 : 1;
}

int serve_mock_command(const std::string& scenario_path) {
    nlohmann::json scenario = specs::load_scenario(scenario_path);
    specs::MockServer server(scenario);
    std::cout << "mock server listening on " << server.base_url() << " (ctrl-c to stop)\n";
    for (;;) std::this_thread::sleep_for(std::chrono::seconds(1));
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"speculative test-time-scaling engine"};
    app.require_subcommand(1);

    std::string config_path, instance_path, scenario_path, output_dir, report_path;
    std::vector<double> taus;
    std::vector<int> ns;
    int workers = 0;

    auto* run = app.add_subcommand("run", "run an experiment config");
    run->add_option("config", config_path, "experiment config JSON")->required();
    run->add_option("--output-dir", output_dir, "override the config's output directory");
    run->add_option("--workers", workers, "override the worker pool size");

    auto* sweep = app.add_subcommand("sweep", "run a tau/n grid over one config");
    sweep->add_option("config", config_path, "experiment config JSON")->required();
    sweep->add_option("--tau", taus, "switching thresholds to sweep");
    sweep->add_option("--n", ns, "beam widths to sweep");
    sweep->add_option("--output-dir", output_dir, "root output directory");

    auto* theory = app.add_subcommand("theory", "run the oracle validation suite");
    theory->add_option("instance", instance_path, "toy instance JSON")->required();
    theory->add_option("--n", ns, "beam widths for the SMC checks");
    theory->add_option("--out", report_path, "write the validation report JSON here");

    auto* mock = app.add_subcommand("serve-mock", "serve a deterministic mock endpoint");
    mock->add_option("scenario", scenario_path, "scenario JSON")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return run_command(config_path, output_dir, workers);
        if (sweep->parsed()) return sweep_command(config_path, taus, ns, output_dir);
        if (theory->parsed()) return theory_command(instance_path, ns, report_path);
        if (mock->parsed()) return serve_mock_command(scenario_path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
