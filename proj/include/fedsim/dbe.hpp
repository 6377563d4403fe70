#pragma once

#include <cstddef>
#include <random>
#include <utility>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/matrix.hpp"
#include "fedsim/model.hpp"

namespace fedsim {

// Per-client trainable translation vector added to every representation.
// Lives on the client, never uploaded.
struct PrbmState {
    std::vector<double> bias;

    static PrbmState zeros(std::size_t rep_dim) {
        return PrbmState{std::vector<double>(rep_dim, 0.0)};
    }
};

// Moving-average feature mean. Reset at the start of every communication
// iteration; the first update after a reset takes the batch mean verbatim.
struct RunningMean {
    std::vector<double> value;
    bool initialized = false;

    void reset() { initialized = false; }
};

// Consensual mean collected once during the initialization period;
// immutable afterwards.
struct GlobalMean {
    std::vector<double> value;
};

// Each row r becomes r + prbm.bias.
DenseMatrix prbm_translate(const DenseMatrix& reps, const PrbmState& prbm);

RunningMean update_running_mean(const RunningMean& state,
                                const std::vector<double>& batch_mean,
                                double momentum);

// Mean over dimensions of squared differences.
double mr_loss(const RunningMean& running, const GlobalMean& global_mean);

// Exact arithmetic mean of the extractor output over the whole dataset.
std::vector<double> compute_client_mean(const FeatureExtractor& extractor,
                                        const LabeledDataset& dataset);

// Weighted average of client means, weights n_i / sum(n_j).
GlobalMean aggregate_global_mean(
    const std::vector<std::pair<std::vector<double>, std::size_t>>& means);

// mean + coeff * eps with eps ~ N(0, scale^2) per dimension.
std::vector<double> perturb_client_mean(const std::vector<double>& mean,
                                        double noise_scale, double noise_coeff,
                                        std::mt19937_64& rng);

}  // namespace fedsim
