#include "fedsim/experiment.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedsim/errors.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

double to_double(const std::string& key, const std::string& value) {
    std::size_t consumed = 0;
    double parsed = 0.0;
    try {
        parsed = std::stod(value, &consumed);
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': '" + value + "' is not a number");
    }
    if (consumed != value.size()) {
        throw ConfigError("key '" + key + "': '" + value + "' is not a number");
    }
    return parsed;
}

std::size_t to_count(const std::string& key, const std::string& value) {
    const double parsed = to_double(key, value);
    if (parsed < 0.0 || parsed != static_cast<double>(static_cast<std::size_t>(parsed))) {
        throw ConfigError("key '" + key + "': '" + value +
                          "' is not a non-negative integer");
    }
    return static_cast<std::size_t>(parsed);
}

bool to_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("key '" + key + "': '" + value + "' is not a boolean");
}

std::vector<std::size_t> to_dims(const std::string& key, const std::string& value) {
    std::vector<std::size_t> dims;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        dims.push_back(to_count(key, trim(item)));
    }
    if (dims.empty()) throw ConfigError("key '" + key + "': empty dimension list");
    return dims;
}

std::string format_real(double value) {
    char buffer[64];
    std::snprintf(buffer, sizeof buffer, "%.6f", value);
    return buffer;
}

}  // namespace

void ExperimentConfig::validate() const {
    federation.validate();
    if (repeat == 0) throw ConfigError("repeat must be >= 1");
    if (dataset.source == DatasetBlock::Source::kSynthetic) {
        if (dataset.classes < 2) throw ConfigError("dataset.classes must be >= 2");
        if (dataset.dim == 0) throw ConfigError("dataset.dim must be >= 1");
        if (dataset.samples_per_class == 0) {
            throw ConfigError("dataset.samples_per_class must be >= 1");
        }
        if (dataset.separation <= 0.0) {
            throw ConfigError("dataset.separation must be > 0");
        }
    } else if (dataset.csv_path.empty()) {
        throw ConfigError("dataset.csv_path is required when dataset.source = csv");
    }
    if (partition.mode == PartitionSpec::Mode::kDirichlet && partition.beta <= 0.0) {
        throw ConfigError("partition.beta must be > 0");
    }
    if (partition.mode == PartitionSpec::Mode::kPathological &&
        partition.labels_per_client == 0) {
        throw ConfigError("partition.labels_per_client must be >= 1");
    }
    if (privacy.noise_scale < 0.0) throw ConfigError("privacy.noise_scale must be >= 0");
    if (privacy.noise_coeff < 0.0 || privacy.noise_coeff > 1.0) {
        throw ConfigError("privacy.noise_coeff must lie in [0, 1]");
    }
    if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

void apply_override(ExperimentConfig& config, const std::string& key,
                    const std::string& value) {
    FederationConfig& fed = config.federation;
    if (key == "algorithm") {
        fed.algorithm = algorithm_from_name(value);
    } else if (key == "num_clients") {
        fed.num_clients = to_count(key, value);
    } else if (key == "join_ratio") {
        fed.join_ratio = to_double(key, value);
    } else if (key == "local_epochs") {
        fed.local_epochs = to_count(key, value);
    } else if (key == "iterations") {
        fed.iterations = to_count(key, value);
    } else if (key == "learning_rate") {
        fed.learning_rate = to_double(key, value);
    } else if (key == "batch_size") {
        fed.batch_size = to_count(key, value);
    } else if (key == "kappa") {
        fed.kappa = to_double(key, value);
    } else if (key == "mu") {
        fed.momentum = to_double(key, value);
    } else if (key == "prox_weight") {
        fed.prox_weight = to_double(key, value);
    } else if (key == "hidden_dims") {
        fed.hidden_dims = to_dims(key, value);
    } else if (key == "dbe_split") {
        fed.dbe_split = to_count(key, value);
    } else if (key == "freeze_prbm") {
        fed.freeze_prbm = to_bool(key, value);
    } else if (key == "seed") {
        fed.seed = to_count(key, value);
    } else if (key == "dataset.source") {
        if (value == "synthetic") {
            config.dataset.source = DatasetBlock::Source::kSynthetic;
        } else if (value == "csv") {
            config.dataset.source = DatasetBlock::Source::kCsv;
        } else {
            throw ConfigError("key 'dataset.source': '" + value +
                              "' is neither 'synthetic' nor 'csv'");
        }
    } else if (key == "dataset.classes") {
        config.dataset.classes = to_count(key, value);
    } else if (key == "dataset.dim") {
        config.dataset.dim = to_count(key, value);
    } else if (key == "dataset.samples_per_class") {
        config.dataset.samples_per_class = to_count(key, value);
    } else if (key == "dataset.separation") {
        config.dataset.separation = to_double(key, value);
    } else if (key == "dataset.csv_path") {
        config.dataset.csv_path = value;
    } else if (key == "dataset.csv_has_header") {
        config.dataset.csv_has_header = to_bool(key, value);
    } else if (key == "partition.mode") {
        if (value == "dirichlet") {
            config.partition.mode = PartitionSpec::Mode::kDirichlet;
        } else if (value == "pathological") {
            config.partition.mode = PartitionSpec::Mode::kPathological;
        } else {
            throw ConfigError("key 'partition.mode': '" + value +
                              "' is neither 'dirichlet' nor 'pathological'");
        }
    } else if (key == "partition.beta") {
        config.partition.beta = to_double(key, value);
    } else if (key == "partition.labels_per_client") {
        config.partition.labels_per_client = to_count(key, value);
    } else if (key == "privacy.enabled") {
        config.privacy.enabled = to_bool(key, value);
    } else if (key == "privacy.noise_scale") {
        config.privacy.noise_scale = to_double(key, value);
    } else if (key == "privacy.noise_coeff") {
        config.privacy.noise_coeff = to_double(key, value);
    } else if (key == "out_dir") {
        config.out_dir = value;
    } else if (key == "repeat") {
        config.repeat = to_count(key, value);
    } else if (key == "export_reps") {
        config.export_reps = to_bool(key, value);
    } else {
        throw ConfigError("unknown key '" + key + "'");
    }
}

ExperimentConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");

    ExperimentConfig config;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto comment = line.find('#');
        if (comment != std::string::npos) line.erase(comment);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected 'key = value'");
        }
        apply_override(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    config.validate();
    return config;
}

void write_results(const std::vector<ResultsRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "seed,iteration,algorithm,global_acc,personalized_acc,train_loss,"
           "fisher_ratio\n";
    for (const ResultsRow& row : rows) {
        out << row.seed << ',' << row.iteration << ',' << row.algorithm << ','
            << format_real(row.global_accuracy) << ','
            << format_real(row.personalized_accuracy) << ','
            << format_real(row.mean_train_loss) << ','
            << format_real(row.mean_fisher_ratio) << '\n';
    }
    if (!out) throw IoError("failed writing " + path);
}

namespace {

LabeledDataset load_base_dataset(const ExperimentConfig& config,
                                 std::uint64_t run_seed) {
    if (config.dataset.source == DatasetBlock::Source::kCsv) {
        return load_csv(config.dataset.csv_path, config.dataset.csv_has_header)
            .dataset;
    }
    return generate_synthetic(config.dataset.classes, config.dataset.dim,
                              config.dataset.samples_per_class,
                              config.dataset.separation, run_seed);
}

void write_summary(const ExperimentConfig& config,
                   const std::vector<ResultsRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "algorithm = " << algorithm_name(config.federation.algorithm) << '\n';
    out << "repeat = " << config.repeat << '\n';
    out << "iterations = " << config.federation.iterations << '\n';

    double global_sum = 0.0;
    double personalized_sum = 0.0;
    double fisher_sum = 0.0;
    std::size_t finals = 0;
    for (const ResultsRow& row : rows) {
        if (row.iteration != config.federation.iterations) continue;
        out << "seed_" << row.seed << ".final_global_acc = "
            << format_real(row.global_accuracy) << '\n';
        out << "seed_" << row.seed << ".final_personalized_acc = "
            << format_real(row.personalized_accuracy) << '\n';
        global_sum += row.global_accuracy;
        personalized_sum += row.personalized_accuracy;
        fisher_sum += row.mean_fisher_ratio;
        ++finals;
    }
    if (finals > 0) {
        const double n = static_cast<double>(finals);
        out << "mean_final_global_acc = " << format_real(global_sum / n) << '\n';
        out << "mean_final_personalized_acc = "
            << format_real(personalized_sum / n) << '\n';
        out << "mean_final_fisher_ratio = " << format_real(fisher_sum / n) << '\n';
    }
}

}  // namespace

namespace {

// Rethrows the active exception with run context, preserving its type so
// the CLI can still map it onto the right exit code.
[[noreturn]] void rethrow_with_seed(std::uint64_t seed) {
    const std::string prefix = "seed " + std::to_string(seed) + ": ";
    try {
        throw;
    } catch (const ConfigError& e) {
        throw ConfigError(prefix + e.what());
    } catch (const DataError& e) {
        throw DataError(prefix + e.what());
    } catch (const NumericError& e) {
        throw NumericError(prefix + e.what());
    } catch (const ShapeError& e) {
        throw ShapeError(prefix + e.what());
    } catch (const StateError& e) {
        throw StateError(prefix + e.what());
    } catch (const ParseError& e) {
        throw ParseError(prefix + e.what());
    } catch (const IoError& e) {
        throw IoError(prefix + e.what());
    }
}

}  // namespace

std::vector<ResultsRow> run_experiment(const ExperimentConfig& config) {
    config.validate();
    std::filesystem::create_directories(config.out_dir);
    const std::string results_path = config.out_dir + "/results.csv";

    std::vector<ResultsRow> rows;
    std::uint64_t active_seed = config.federation.seed;
    try {
        for (std::size_t r = 0; r < config.repeat; ++r) {
            const std::uint64_t run_seed = config.federation.seed + r;
            active_seed = run_seed;

            LabeledDataset base = load_base_dataset(config, run_seed);
            PartitionSpec partition = config.partition;
            partition.num_clients = config.federation.num_clients;
            partition.seed = run_seed;
            std::vector<LabeledDataset> parts = make_partition(base, partition);

            std::vector<ClientSplit> splits;
            splits.reserve(parts.size());
            for (std::size_t i = 0; i < parts.size(); ++i) {
                auto rng = make_rng(run_seed, RngStream::kTrainTestSplit, i);
                splits.push_back(split_train_test(parts[i], 0.75, rng));
            }

            FederationConfig fed = config.federation;
            fed.seed = run_seed;
            if (config.privacy.enabled) {
                fed.noise_scale = config.privacy.noise_scale;
                fed.noise_coeff = config.privacy.noise_coeff;
            } else {
                fed.noise_scale = 0.0;
                fed.noise_coeff = 0.0;
            }

            const std::string algorithm = algorithm_name(fed.algorithm);
            auto on_round = [&](const ServerState& server,
                                const std::vector<ClientState>& clients,
                                const RoundRecord& record) {
                ResultsRow row;
                row.seed = run_seed;
                row.iteration = record.iteration;
                row.algorithm = algorithm;
                row.global_accuracy =
                    evaluate_global(clients, server.model).weighted_mean_accuracy;
                row.personalized_accuracy =
                    evaluate_personalized(clients, server.model)
                        .weighted_mean_accuracy;

                double loss_mass = 0.0;
                double weight = 0.0;
                for (std::size_t p = 0; p < record.participants.size(); ++p) {
                    const double n = static_cast<double>(
                        clients[record.participants[p]].train_size());
                    loss_mass += n * record.train_loss[p];
                    weight += n;
                }
                row.mean_train_loss = weight > 0.0 ? loss_mass / weight : 0.0;
                row.mean_fisher_ratio =
                    bias_diagnostic(clients, server.model).mean_fisher_ratio;
                rows.push_back(std::move(row));
            };

            FederationResult result =
                run_federation(fed, std::move(splits), base.dim(),
                               static_cast<std::size_t>(base.num_classes),
                               /*threads=*/1, on_round);

            if (config.export_reps) {
                export_representations(
                    result.clients, result.server.model,
                    fed.algorithm == Algorithm::kFedAvgDbe,
                    config.out_dir + "/representations_seed" +
                        std::to_string(run_seed) + ".csv");
            }
        }
    } catch (const std::exception&) {
        // Keep whatever finished before the abort.
        write_results(rows, results_path);
        rethrow_with_seed(active_seed);
    }

    write_results(rows, results_path);
    write_summary(config, rows, config.out_dir + "/summary.txt");
    return rows;
}

}  // namespace fedsim
