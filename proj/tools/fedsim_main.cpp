#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedsim/errors.hpp"
#include "fedsim/experiment.hpp"

namespace {

// Hyperparameter grids for the sweep helper.
const std::vector<double> kKappaGrid{0,  0.001, 0.01, 0.1, 1,   5,
                                     10, 20,    50,   100, 200, 500};
const std::vector<double> kMuGrid{0.0, 0.1, 0.2, 0.3, 0.4, 0.5,
                                  0.6, 0.7, 0.8, 0.9, 1.0};

std::string format_value(double v) {
    char buffer[32];
    std::snprintf(buffer, sizeof buffer, "%g", v);
    return buffer;
}

void run_one(const fedsim::ExperimentConfig& config) {
    const auto rows = fedsim::run_experiment(config);
    std::cout << "wrote " << config.out_dir << "/results.csv (" << rows.size()
              << " rows)\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated learning simulator with representation-bias "
                 "elimination"};
    std::string config_path;
    std::string algorithm;
    std::string out_dir;
    std::string sweep;
    std::uint64_t seed = 0;
    bool seed_given = false;
    bool export_reps = false;

    app.add_option("--config", config_path, "Key-value config file");
    app.add_option("--algorithm", algorithm,
                   "fedavg | fedavg_dbe | fedprox | local_only");
    app.add_option("--seed", seed, "Base run seed")
        ->each([&seed_given](const std::string&) { seed_given = true; });
    app.add_option("--out-dir", out_dir, "Output directory");
    app.add_flag("--export-reps", export_reps,
                 "Export final representations to CSV");
    app.add_option("--sweep", sweep,
                   "Run the full grid for one hyperparameter: kappa | mu");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        fedsim::ExperimentConfig config;
        if (!config_path.empty()) config = fedsim::parse_config(config_path);
        // Flags win over file values.
        if (!algorithm.empty()) fedsim::apply_override(config, "algorithm", algorithm);
        if (seed_given) {
            fedsim::apply_override(config, "seed", std::to_string(seed));
        }
        if (!out_dir.empty()) config.out_dir = out_dir;
        if (export_reps) config.export_reps = true;

        if (sweep.empty()) {
            config.validate();
            run_one(config);
            return 0;
        }

        const std::string key = sweep == "mu" ? "mu" : sweep;
        if (key != "kappa" && key != "mu") {
            throw fedsim::ConfigError("--sweep expects 'kappa' or 'mu', got '" +
                                      sweep + "'");
        }
        const auto& grid = key == "kappa" ? kKappaGrid : kMuGrid;
        const std::string base_dir = config.out_dir;
        for (double value : grid) {
            fedsim::ExperimentConfig point = config;
            fedsim::apply_override(point, key, format_value(value));
            point.out_dir = base_dir + "/sweep_" + key + "_" + format_value(value);
            point.validate();
            std::cout << key << " = " << format_value(value) << ": ";
            run_one(point);
        }
        return 0;
    } catch (const fedsim::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << '\n';
        return 2;
    }
}
