#include "fedsim/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "fedsim/errors.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

namespace {

LabeledDataset subset(const LabeledDataset& dataset,
                      const std::vector<std::size_t>& indices) {
    LabeledDataset out;
    out.num_classes = dataset.num_classes;
    out.features = DenseMatrix(indices.size(), dataset.dim());
    out.labels.resize(indices.size());
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const double* src = dataset.features.row(indices[r]);
        std::copy(src, src + dataset.dim(), out.features.row(r));
        out.labels[r] = dataset.labels[indices[r]];
    }
    return out;
}

// Converts fractional shares into integer counts that sum exactly to
// `total`: floor everything, then hand the leftovers to the largest
// remainders.
std::vector<std::size_t> largest_remainder(const std::vector<double>& shares,
                                           std::size_t total) {
    const std::size_t n = shares.size();
    std::vector<std::size_t> counts(n);
    std::vector<std::pair<double, std::size_t>> remainders(n);
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double exact = shares[i] * static_cast<double>(total);
        counts[i] = static_cast<std::size_t>(std::floor(exact));
        if (counts[i] > total) counts[i] = total;
        remainders[i] = {exact - static_cast<double>(counts[i]), i};
        assigned += counts[i];
    }
    std::sort(remainders.begin(), remainders.end(),
              [](const auto& a, const auto& b) {
                  if (a.first != b.first) return a.first > b.first;
                  return a.second < b.second;
              });
    for (std::size_t j = 0; assigned < total; ++j) {
        counts[remainders[j % n].second] += 1;
        ++assigned;
    }
    return counts;
}

std::vector<std::vector<std::size_t>> indices_by_class(const LabeledDataset& ds) {
    std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.labels[i] < 0 || ds.labels[i] >= ds.num_classes) {
            throw DataError("label " + std::to_string(ds.labels[i]) +
                            " outside [0, " + std::to_string(ds.num_classes) +
                            ") at sample " + std::to_string(i));
        }
        by_class[ds.labels[i]].push_back(i);
    }
    return by_class;
}

// Moves single samples from the largest clients onto empty ones so no
// aggregation weight degenerates to zero.
void repair_empty_clients(std::vector<std::vector<std::size_t>>& assignment) {
    for (auto& client : assignment) {
        if (!client.empty()) continue;
        auto largest = std::max_element(
            assignment.begin(), assignment.end(),
            [](const auto& a, const auto& b) { return a.size() < b.size(); });
        if (largest->size() <= 1) {
            throw DataError("not enough samples to give every client one");
        }
        client.push_back(largest->back());
        largest->pop_back();
    }
}

std::vector<LabeledDataset> materialize(
    const LabeledDataset& dataset,
    std::vector<std::vector<std::size_t>>& assignment) {
    repair_empty_clients(assignment);
    std::vector<LabeledDataset> clients;
    clients.reserve(assignment.size());
    for (const auto& indices : assignment) {
        clients.push_back(subset(dataset, indices));
    }
    return clients;
}

}  // namespace

LabeledDataset generate_synthetic(std::size_t num_classes, std::size_t dim,
                                  std::size_t samples_per_class,
                                  double separation, std::uint64_t seed) {
    if (num_classes == 0 || dim == 0 || samples_per_class == 0) {
        throw ConfigError("synthetic dataset counts must be >= 1");
    }
    if (separation <= 0.0) throw ConfigError("separation must be > 0");

    auto rng = make_rng(seed, RngStream::kDataGeneration);
    std::normal_distribution<double> normal(0.0, 1.0);

    std::vector<std::vector<double>> centers(num_classes);
    for (auto& center : centers) {
        center.resize(dim);
        double norm = 0.0;
        for (double& v : center) {
            v = normal(rng);
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (double& v : center) v = separation * v / norm;
    }

    LabeledDataset ds;
    ds.num_classes = static_cast<int>(num_classes);
    ds.features = DenseMatrix(num_classes * samples_per_class, dim);
    ds.labels.resize(num_classes * samples_per_class);
    std::size_t row = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        for (std::size_t s = 0; s < samples_per_class; ++s, ++row) {
            double* x = ds.features.row(row);
            for (std::size_t d = 0; d < dim; ++d) {
                x[d] = centers[c][d] + normal(rng);
            }
            ds.labels[row] = static_cast<int>(c);
        }
    }
    return ds;
}

std::vector<LabeledDataset> partition_dirichlet(const LabeledDataset& dataset,
                                                std::size_t num_clients,
                                                double beta,
                                                std::mt19937_64& rng) {
    if (num_clients == 0) throw ConfigError("num_clients must be >= 1");
    if (beta <= 0.0) throw ConfigError("beta must be > 0");
    if (num_clients > dataset.size()) {
        throw DataError("more clients than samples");
    }

    std::vector<std::vector<std::size_t>> assignment(num_clients);
    std::gamma_distribution<double> gamma(beta, 1.0);
    for (auto& class_indices : indices_by_class(dataset)) {
        if (class_indices.empty()) continue;
        std::shuffle(class_indices.begin(), class_indices.end(), rng);

        std::vector<double> shares(num_clients);
        double sum = 0.0;
        for (double& s : shares) {
            s = gamma(rng);
            sum += s;
        }
        if (sum <= 0.0) {
            // All draws underflowed; fall back to an even split.
            std::fill(shares.begin(), shares.end(), 1.0);
            sum = static_cast<double>(num_clients);
        }
        for (double& s : shares) s /= sum;

        const std::vector<std::size_t> counts =
            largest_remainder(shares, class_indices.size());
        std::size_t pos = 0;
        for (std::size_t i = 0; i < num_clients; ++i) {
            for (std::size_t j = 0; j < counts[i]; ++j, ++pos) {
                assignment[i].push_back(class_indices[pos]);
            }
        }
    }
    return materialize(dataset, assignment);
}

std::vector<LabeledDataset> partition_pathological(const LabeledDataset& dataset,
                                                   std::size_t num_clients,
                                                   std::size_t labels_per_client,
                                                   std::mt19937_64& rng) {
    if (num_clients == 0) throw ConfigError("num_clients must be >= 1");
    const std::size_t num_labels = static_cast<std::size_t>(dataset.num_classes);
    if (labels_per_client == 0 || labels_per_client > num_labels) {
        throw ConfigError("labels_per_client must lie in [1, num_classes]");
    }
    if (num_clients * labels_per_client < num_labels) {
        throw ConfigError("infeasible label assignment: too few client slots "
                          "to cover every label");
    }

    // Spread the client slots over labels as evenly as possible; a random
    // subset of labels absorbs the remainder.
    const std::size_t total_slots = num_clients * labels_per_client;
    std::vector<std::size_t> label_order(num_labels);
    std::iota(label_order.begin(), label_order.end(), 0);
    std::shuffle(label_order.begin(), label_order.end(), rng);
    std::vector<std::size_t> slots(num_labels, total_slots / num_labels);
    for (std::size_t j = 0; j < total_slots % num_labels; ++j) {
        slots[label_order[j]] += 1;
    }

    // Deal labels to clients, always taking from the labels with the most
    // remaining slots so every client ends up with distinct labels.
    std::vector<std::size_t> rank(num_labels);
    for (std::size_t j = 0; j < num_labels; ++j) rank[label_order[j]] = j;
    std::vector<std::vector<std::size_t>> client_labels(num_clients);
    std::vector<std::vector<std::size_t>> label_owners(num_labels);
    for (std::size_t i = 0; i < num_clients; ++i) {
        std::vector<std::size_t> order(num_labels);
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (slots[a] != slots[b]) return slots[a] > slots[b];
            return rank[a] < rank[b];
        });
        for (std::size_t j = 0; j < labels_per_client; ++j) {
            const std::size_t label = order[j];
            if (slots[label] == 0) {
                throw ConfigError("infeasible label assignment");
            }
            slots[label] -= 1;
            client_labels[i].push_back(label);
            label_owners[label].push_back(i);
        }
    }

    // Shard each label's samples among its owners with uneven sizes.
    std::vector<std::vector<std::size_t>> assignment(num_clients);
    std::uniform_real_distribution<double> jitter(-0.5, 0.5);
    auto by_class = indices_by_class(dataset);
    for (std::size_t label = 0; label < num_labels; ++label) {
        auto& owners = label_owners[label];
        auto& samples = by_class[label];
        if (owners.empty() || samples.empty()) continue;
        std::shuffle(samples.begin(), samples.end(), rng);

        std::vector<double> weights(owners.size());
        double sum = 0.0;
        for (double& w : weights) {
            w = 1.0 + jitter(rng);
            sum += w;
        }
        for (double& w : weights) w /= sum;
        std::vector<std::size_t> counts = largest_remainder(weights, samples.size());

        // No owner should be left without a single sample of its label
        // when there are enough to go around.
        if (samples.size() >= owners.size()) {
            for (std::size_t j = 0; j < counts.size(); ++j) {
                while (counts[j] == 0) {
                    auto largest =
                        std::max_element(counts.begin(), counts.end());
                    *largest -= 1;
                    counts[j] += 1;
                }
            }
        }

        std::size_t pos = 0;
        for (std::size_t j = 0; j < owners.size(); ++j) {
            for (std::size_t s = 0; s < counts[j]; ++s, ++pos) {
                assignment[owners[j]].push_back(samples[pos]);
            }
        }
    }
    return materialize(dataset, assignment);
}

std::vector<LabeledDataset> make_partition(const LabeledDataset& dataset,
                                           const PartitionSpec& spec) {
    auto rng = make_rng(spec.seed, RngStream::kPartitioning);
    switch (spec.mode) {
        case PartitionSpec::Mode::kDirichlet:
            return partition_dirichlet(dataset, spec.num_clients, spec.beta, rng);
        case PartitionSpec::Mode::kPathological:
            return partition_pathological(dataset, spec.num_clients,
                                          spec.labels_per_client, rng);
    }
    throw ConfigError("unknown partition mode");
}

ClientSplit split_train_test(const LabeledDataset& client_data,
                             double train_fraction, std::mt19937_64& rng) {
    if (client_data.size() < 2) {
        throw DataError("need at least 2 samples to split");
    }
    if (train_fraction <= 0.0 || train_fraction > 1.0) {
        throw ConfigError("train_fraction must lie in (0, 1]");
    }
    std::vector<std::size_t> indices(client_data.size());
    std::iota(indices.begin(), indices.end(), 0);
    std::shuffle(indices.begin(), indices.end(), rng);

    const auto train_count = static_cast<std::size_t>(
        std::ceil(train_fraction * static_cast<double>(client_data.size())));
    std::vector<std::size_t> train_idx(indices.begin(),
                                       indices.begin() + train_count);
    std::vector<std::size_t> test_idx(indices.begin() + train_count,
                                      indices.end());
    return ClientSplit{subset(client_data, train_idx),
                       subset(client_data, test_idx)};
}

CsvDataset load_csv(const std::string& path, bool has_header) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);

    std::vector<std::vector<double>> feature_rows;
    std::vector<long long> raw_labels;
    std::size_t expected_fields = 0;
    std::size_t line_no = 0;
    std::string line;
    while (std::getline(in, line)) {
        ++line_no;
        if (has_header && line_no == 1) continue;
        if (line.empty()) continue;

        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (!line.empty() && line.back() == ',') fields.push_back("");

        if (fields.size() < 2) {
            throw ParseError("line " + std::to_string(line_no) +
                             ": need at least one feature and a label");
        }
        if (expected_fields == 0) {
            expected_fields = fields.size();
        } else if (fields.size() != expected_fields) {
            throw ParseError("line " + std::to_string(line_no) + ": expected " +
                             std::to_string(expected_fields) + " fields, got " +
                             std::to_string(fields.size()));
        }

        std::vector<double> features(fields.size() - 1);
        for (std::size_t i = 0; i + 1 < fields.size(); ++i) {
            std::size_t consumed = 0;
            try {
                features[i] = std::stod(fields[i], &consumed);
            } catch (const std::exception&) {
                throw ParseError("line " + std::to_string(line_no) + ": field " +
                                 std::to_string(i + 1) + " is not numeric");
            }
            if (consumed != fields[i].size()) {
                throw ParseError("line " + std::to_string(line_no) + ": field " +
                                 std::to_string(i + 1) + " is not numeric");
            }
        }
        long long label = 0;
        std::size_t consumed = 0;
        try {
            label = std::stoll(fields.back(), &consumed);
        } catch (const std::exception&) {
            throw ParseError("line " + std::to_string(line_no) +
                             ": label is not an integer");
        }
        if (consumed != fields.back().size()) {
            throw ParseError("line " + std::to_string(line_no) +
                             ": label is not an integer");
        }
        feature_rows.push_back(std::move(features));
        raw_labels.push_back(label);
    }
    if (feature_rows.empty()) {
        throw ParseError("line " + std::to_string(line_no) + ": no data rows");
    }

    std::map<long long, int> dense;
    for (long long label : raw_labels) dense.emplace(label, 0);
    CsvDataset out;
    out.label_values.reserve(dense.size());
    int next = 0;
    for (auto& [value, id] : dense) {
        id = next++;
        out.label_values.push_back(value);
    }

    out.dataset.num_classes = static_cast<int>(dense.size());
    out.dataset.features = DenseMatrix(feature_rows.size(), feature_rows[0].size());
    out.dataset.labels.resize(raw_labels.size());
    for (std::size_t r = 0; r < feature_rows.size(); ++r) {
        std::copy(feature_rows[r].begin(), feature_rows[r].end(),
                  out.dataset.features.row(r));
        out.dataset.labels[r] = dense[raw_labels[r]];
    }
    if (!out.dataset.features.all_finite()) {
        throw ParseError("non-finite feature value in " + path);
    }
    return out;
}

}  // namespace fedsim
