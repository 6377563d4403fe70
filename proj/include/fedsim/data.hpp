#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fedsim/matrix.hpp"

namespace fedsim {

struct LabeledDataset {
    DenseMatrix features;       // n x dim
    std::vector<int> labels;    // values in [0, num_classes)
    int num_classes = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return features.cols; }
};

// Heterogeneity generator configuration.
struct PartitionSpec {
    enum class Mode { kDirichlet, kPathological };
    Mode mode = Mode::kDirichlet;
    double beta = 0.1;
    std::size_t labels_per_client = 2;
    std::size_t num_clients = 20;
    std::uint64_t seed = 1;
};

struct ClientSplit {
    LabeledDataset train;
    LabeledDataset test;
};

struct CsvDataset {
    LabeledDataset dataset;
    // Dense label k in the dataset came from label_values[k] in the file.
    std::vector<long long> label_values;
};

// Gaussian blobs: class c is centered at separation * u_c for a seeded
// random unit direction u_c, unit isotropic variance.
LabeledDataset generate_synthetic(std::size_t num_classes, std::size_t dim,
                                  std::size_t samples_per_class,
                                  double separation, std::uint64_t seed);

// Per class, draws client proportions from Dirichlet(beta) and splits that
// class accordingly (largest-remainder rounding). Clients left empty are
// re-dealt one sample from the largest client.
std::vector<LabeledDataset> partition_dirichlet(const LabeledDataset& dataset,
                                                std::size_t num_clients,
                                                double beta,
                                                std::mt19937_64& rng);

// Each client holds exactly labels_per_client labels; every label's samples
// are divided into disjoint shards of uneven size among the clients that
// hold it.
std::vector<LabeledDataset> partition_pathological(const LabeledDataset& dataset,
                                                   std::size_t num_clients,
                                                   std::size_t labels_per_client,
                                                   std::mt19937_64& rng);

std::vector<LabeledDataset> make_partition(const LabeledDataset& dataset,
                                           const PartitionSpec& spec);

// Seeded shuffle, |train| = ceil(fraction * n).
ClientSplit split_train_test(const LabeledDataset& client_data,
                             double train_fraction, std::mt19937_64& rng);

// Comma-separated rows: feature columns then one integer label column.
// Labels are remapped to a dense [0, num_classes) range.
CsvDataset load_csv(const std::string& path, bool has_header);

}  // namespace fedsim
