#include <CLI11.hpp>

#include "tclmarket/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Market-based coordination of thermostatically controlled loads"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out";
    std::string log_path, init_path, out_path = "estimate.json";
    std::uint64_t seed = 0;
    std::string mode, pricing;
    double gamma = 0.0, perturb = -1.0;

    auto* sim = app.add_subcommand("simulate", "Run a market scenario and write reports");
    sim->add_option("--config", config_path, "Scenario config JSON")->required();
    sim->add_option("--out", out_dir, "Output directory");
    auto* seed_opt = sim->add_option("--seed", seed, "Override the config seed");
    auto* mode_opt = sim->add_option("--mode", mode, "Override bidding_mode")
                         ->check(CLI::IsMember({"known-params", "output-based", "perturbed"}));
    auto* pricing_opt = sim->add_option("--pricing", pricing, "Override pricing_mode")
                            ->check(CLI::IsMember({"mechanism", "rtp", "fixed-ratio"}));
    auto* gamma_opt = sim->add_option("--gamma", gamma, "Fixed-ratio multiplier");
    auto* perturb_opt = sim->add_option("--perturb-pct", perturb, "Bid price perturbation, percent");

    auto* est = app.add_subcommand("estimate", "Fit the uncertain load model from a measurement log");
    est->add_option("--log", log_path, "Measurement CSV")->required();
    est->add_option("--init", init_path, "Initial model JSON")->required();
    est->add_option("--out", out_path, "Report JSON path");

    auto* ver = app.add_subcommand("verify", "Check clearing against the team-optimal oracle");
    ver->add_option("--config", config_path, "Scenario config JSON")->required();

    CLI11_PARSE(app, argc, argv);

    if (sim->parsed()) {
        tclmarket::cli::SimulateOverrides ov;
        if (seed_opt->count()) ov.seed = seed;
        if (mode_opt->count()) ov.bidding_mode = mode;
        if (pricing_opt->count()) ov.pricing_mode = pricing;
        if (gamma_opt->count()) ov.gamma = gamma;
        if (perturb_opt->count()) ov.perturb_pct = perturb;
        return tclmarket::cli::cmd_simulate(config_path, out_dir, ov);
    }
    if (est->parsed()) return tclmarket::cli::cmd_estimate(log_path, init_path, out_path);
    if (ver->parsed()) return tclmarket::cli::cmd_verify(config_path);
    return 1;
}
