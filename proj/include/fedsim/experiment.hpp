#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/federation.hpp"

namespace fedsim {

struct DatasetBlock {
    enum class Source { kSynthetic, kCsv };
    Source source = Source::kSynthetic;
    std::size_t classes = 10;
    std::size_t dim = 16;
    std::size_t samples_per_class = 200;
    double separation = 3.0;
    std::string csv_path;
    bool csv_has_header = false;
};

struct PrivacyBlock {
    bool enabled = false;
    double noise_scale = 0.05;  // s
    double noise_coeff = 0.2;   // q
};

struct ExperimentConfig {
    FederationConfig federation;
    DatasetBlock dataset;
    PartitionSpec partition;
    PrivacyBlock privacy;
    std::string out_dir = "out";
    std::size_t repeat = 1;
    bool export_reps = false;

    void validate() const;
};

struct ResultsRow {
    std::uint64_t seed = 0;
    std::size_t iteration = 0;
    std::string algorithm;
    double global_accuracy = 0.0;
    double personalized_accuracy = 0.0;
    double mean_train_loss = 0.0;
    double mean_fisher_ratio = 0.0;
};

// Flat key-value config file: `key = value` lines, '#' comments. Every key
// is optional; unknown keys are rejected by name.
ExperimentConfig parse_config(const std::string& path);

// Applies one key-value pair; shared by the file parser and flag overrides.
void apply_override(ExperimentConfig& config, const std::string& key,
                    const std::string& value);

// One federated run per seed (base seed + repeat index): partition, split,
// run, evaluate every iteration. Writes results.csv and summary.txt under
// out_dir; partial rows are flushed if a run aborts.
std::vector<ResultsRow> run_experiment(const ExperimentConfig& config);

void write_results(const std::vector<ResultsRow>& rows, const std::string& path);

}  // namespace fedsim
