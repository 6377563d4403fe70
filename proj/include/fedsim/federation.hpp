#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/dbe.hpp"
#include "fedsim/model.hpp"

namespace fedsim {

enum class Algorithm { kFedAvg, kFedAvgDbe, kFedProx, kLocalOnly };

std::string algorithm_name(Algorithm algorithm);
Algorithm algorithm_from_name(const std::string& name);

// Every hyperparameter of the federated run. The hidden stack is split at
// `dbe_split`: layers before the boundary form the feature extractor,
// layers after it belong to the classifier side, and the translation plus
// mean statistics live at the boundary. 0 selects the last boundary.
struct FederationConfig {
    std::size_t num_clients = 20;
    double join_ratio = 1.0;          // rho
    std::size_t local_epochs = 1;     // E
    std::size_t iterations = 10;      // T
    double learning_rate = 0.1;       // eta
    std::size_t batch_size = 10;      // B
    double kappa = 0.0;
    double momentum = 1.0;            // mu
    Algorithm algorithm = Algorithm::kFedAvg;
    double prox_weight = 0.0;
    std::vector<std::size_t> hidden_dims{32, 16};
    std::size_t dbe_split = 0;
    bool freeze_prbm = false;         // diagnostic: clamp the translation at zero
    double noise_scale = 0.0;         // s, initialization-period perturbation
    double noise_coeff = 0.0;         // q
    std::uint64_t seed = 1;

    void validate() const;
};

struct Model {
    FeatureExtractor extractor;
    FeatureExtractor head;       // classifier-side hidden layers, often empty
    Classifier classifier;

    std::size_t rep_dim() const { return extractor.output_dim(); }
};

struct ServerState {
    Model model;
    std::optional<GlobalMean> global_mean;
    std::size_t iteration = 0;
};

struct ClientState {
    std::size_t id = 0;
    ClientSplit split;
    PrbmState prbm;            // persists across iterations, never uploaded
    RunningMean running_mean;
    Model local;

    std::size_t train_size() const { return split.train.size(); }
};

struct RoundRecord {
    std::size_t iteration = 0;
    std::vector<std::size_t> participants;
    std::vector<double> train_loss;   // aligned with participants
    std::uint64_t params_digest = 0;
};

struct FederationResult {
    ServerState server;
    std::vector<ClientState> clients;
    std::vector<RoundRecord> history;
};

Model build_model(std::size_t input_dim, std::size_t num_classes,
                  const FederationConfig& config);

std::uint64_t parameter_digest(const Model& model);

// Every client trains a private copy of the initial model for one epoch of
// plain SGD, reports the mean representation of its train set (optionally
// perturbed), and discards the trained weights. Returns the weighted
// average of the reported means.
GlobalMean initialization_period(std::vector<ClientState>& clients,
                                 const Model& initial,
                                 const FederationConfig& config);

// Uniform subset of size max(1, round(join_ratio * num_clients)), without
// replacement, sorted ascending.
std::vector<std::size_t> sample_clients(std::size_t num_clients,
                                        double join_ratio, std::mt19937_64& rng);

// Overwrites the client's local model with the global parameters, resets
// its running mean, then runs E epochs of seeded mini-batch SGD on the
// algorithm's loss. Returns the mean train loss over the executed steps.
double local_train(ClientState& client, const Model& global,
                   const GlobalMean* global_mean, const FederationConfig& config,
                   std::size_t iteration);

// Parameter-wise weighted average with weights n_i / sum(n_j).
Model server_aggregate(
    const std::vector<std::pair<const Model*, std::size_t>>& updates);

using RoundCallback =
    std::function<void(const ServerState&, const std::vector<ClientState>&,
                       const RoundRecord&)>;

// Initialization period (only with the translation/regularization
// algorithm), then T iterations of sample, distribute, train, aggregate.
// Fully deterministic per seed; with threads > 1 the participants train
// concurrently and the result is bit-identical to the serial run.
FederationResult run_federation(const FederationConfig& config,
                                std::vector<ClientSplit> splits,
                                std::size_t input_dim, std::size_t num_classes,
                                std::size_t threads = 1,
                                const RoundCallback& on_round = nullptr);

}  // namespace fedsim
