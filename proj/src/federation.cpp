#include "fedsim/federation.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <exception>
#include <numeric>
#include <thread>

#include "fedsim/errors.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

std::string algorithm_name(Algorithm algorithm) {
    switch (algorithm) {
        case Algorithm::kFedAvg: return "fedavg";
        case Algorithm::kFedAvgDbe: return "fedavg_dbe";
        case Algorithm::kFedProx: return "fedprox";
        case Algorithm::kLocalOnly: return "local_only";
    }
    throw ConfigError("unknown algorithm");
}

Algorithm algorithm_from_name(const std::string& name) {
    if (name == "fedavg") return Algorithm::kFedAvg;
    if (name == "fedavg_dbe") return Algorithm::kFedAvgDbe;
    if (name == "fedprox") return Algorithm::kFedProx;
    if (name == "local_only") return Algorithm::kLocalOnly;
    throw ConfigError("unknown algorithm '" + name + "'");
}

void FederationConfig::validate() const {
    if (num_clients == 0) throw ConfigError("num_clients must be >= 1");
    if (join_ratio <= 0.0 || join_ratio > 1.0) {
        throw ConfigError("join_ratio must lie in (0, 1]");
    }
    if (local_epochs == 0) throw ConfigError("local_epochs must be >= 1");
    if (iterations == 0) throw ConfigError("iterations must be >= 1");
    if (learning_rate <= 0.0) throw ConfigError("learning_rate must be > 0");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (kappa < 0.0) throw ConfigError("kappa must be >= 0");
    if (momentum < 0.0 || momentum > 1.0) {
        throw ConfigError("mu must lie in [0, 1]");
    }
    if (prox_weight < 0.0) throw ConfigError("prox_weight must be >= 0");
    if (hidden_dims.empty()) throw ConfigError("hidden_dims must not be empty");
    for (std::size_t w : hidden_dims) {
        if (w == 0) throw ConfigError("hidden_dims entries must be >= 1");
    }
    if (dbe_split > hidden_dims.size()) {
        throw ConfigError("dbe_split must lie in [0, number of hidden layers]");
    }
    if (noise_scale < 0.0) throw ConfigError("noise_scale must be >= 0");
    if (noise_coeff < 0.0 || noise_coeff > 1.0) {
        throw ConfigError("noise_coeff must lie in [0, 1]");
    }
}

Model build_model(std::size_t input_dim, std::size_t num_classes,
                  const FederationConfig& config) {
    const std::size_t split =
        config.dbe_split == 0 ? config.hidden_dims.size() : config.dbe_split;
    auto rng = make_rng(config.seed, RngStream::kModelInit);

    Model model;
    std::vector<std::size_t> front(config.hidden_dims.begin(),
                                   config.hidden_dims.begin() + split);
    model.extractor = make_extractor(input_dim, front, rng);
    std::vector<std::size_t> back(config.hidden_dims.begin() + split,
                                  config.hidden_dims.end());
    if (!back.empty()) {
        model.head = make_extractor(config.hidden_dims[split - 1], back, rng);
    }
    const std::size_t cls_in =
        back.empty() ? config.hidden_dims[split - 1] : back.back();
    model.classifier = make_classifier(cls_in, num_classes, rng);
    return model;
}

std::uint64_t parameter_digest(const Model& model) {
    const std::vector<double> flat = flatten_parameters(
        model.extractor, model.head, model.classifier, nullptr);
    std::uint64_t hash = 1469598103934665603ULL;  // FNV-1a
    for (double v : flat) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        for (int byte = 0; byte < 8; ++byte) {
            hash ^= (bits >> (byte * 8)) & 0xFF;
            hash *= 1099511628211ULL;
        }
    }
    return hash;
}

std::vector<std::size_t> sample_clients(std::size_t num_clients,
                                        double join_ratio, std::mt19937_64& rng) {
    if (join_ratio <= 0.0 || join_ratio > 1.0) {
        throw ConfigError("join_ratio must lie in (0, 1]");
    }
    std::size_t count = static_cast<std::size_t>(
        std::llround(join_ratio * static_cast<double>(num_clients)));
    count = std::max<std::size_t>(1, std::min(count, num_clients));

    std::vector<std::size_t> ids(num_clients);
    std::iota(ids.begin(), ids.end(), 0);
    for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, num_clients - 1);
        std::swap(ids[i], ids[pick(rng)]);
    }
    ids.resize(count);
    std::sort(ids.begin(), ids.end());
    return ids;
}

namespace {

struct Batch {
    DenseMatrix features;
    std::vector<int> labels;
};

Batch gather_batch(const LabeledDataset& train,
                   const std::vector<std::size_t>& order, std::size_t begin,
                   std::size_t count) {
    Batch batch;
    batch.features = DenseMatrix(count, train.dim());
    batch.labels.resize(count);
    for (std::size_t j = 0; j < count; ++j) {
        const std::size_t src = order[begin + j];
        std::copy(train.features.row(src), train.features.row(src) + train.dim(),
                  batch.features.row(j));
        batch.labels[j] = train.labels[src];
    }
    return batch;
}

double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        sum += diff * diff;
    }
    return sum;
}

void add_scaled(std::vector<LayerGradient>& grads, const FeatureExtractor& current,
                const FeatureExtractor& reference, double weight) {
    for (std::size_t l = 0; l < grads.size(); ++l) {
        for (std::size_t i = 0; i < grads[l].weight.values.size(); ++i) {
            grads[l].weight.values[i] += weight * (current.layers[l].weight.values[i] -
                                                   reference.layers[l].weight.values[i]);
        }
        for (std::size_t i = 0; i < grads[l].bias.size(); ++i) {
            grads[l].bias[i] +=
                weight * (current.layers[l].bias[i] - reference.layers[l].bias[i]);
        }
    }
}

// One epoch of plain cross-entropy SGD, shared by the warm-up and the
// non-regularized algorithms.
double plain_epoch(Model& model, const LabeledDataset& train, std::size_t batch_size,
                   double learning_rate, std::mt19937_64& rng,
                   const Model* prox_reference, double prox_weight,
                   std::size_t* steps_out) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    const std::size_t steps = train.size() / batch_size;
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
        Batch batch = gather_batch(train, order, s * batch_size, batch_size);
        BackwardResult res = backward(model.extractor, model.head, model.classifier,
                                      std::nullopt, batch.features, batch.labels);
        double loss = res.loss.total;
        if (prox_reference && prox_weight > 0.0) {
            add_scaled(res.gradients.extractor, model.extractor,
                       prox_reference->extractor, prox_weight);
            add_scaled(res.gradients.head, model.head, prox_reference->head,
                       prox_weight);
            for (std::size_t i = 0; i < res.gradients.classifier_weight.values.size();
                 ++i) {
                res.gradients.classifier_weight.values[i] +=
                    prox_weight * (model.classifier.weight.values[i] -
                                   prox_reference->classifier.weight.values[i]);
            }
            for (std::size_t i = 0; i < res.gradients.classifier_bias.size(); ++i) {
                res.gradients.classifier_bias[i] +=
                    prox_weight * (model.classifier.bias[i] -
                                   prox_reference->classifier.bias[i]);
            }
            const std::vector<double> flat_now = flatten_parameters(
                model.extractor, model.head, model.classifier, nullptr);
            const std::vector<double> flat_ref = flatten_parameters(
                prox_reference->extractor, prox_reference->head,
                prox_reference->classifier, nullptr);
            loss += 0.5 * prox_weight * squared_distance(flat_now, flat_ref);
        }
        sgd_update(model.extractor, res.gradients.extractor, learning_rate);
        sgd_update(model.head, res.gradients.head, learning_rate);
        sgd_update(model.classifier, res.gradients.classifier_weight,
                   res.gradients.classifier_bias, learning_rate);
        loss_sum += loss;
    }
    if (steps_out) *steps_out = steps;
    return loss_sum;
}

}  // namespace

GlobalMean initialization_period(std::vector<ClientState>& clients,
                                 const Model& initial,
                                 const FederationConfig& config) {
    if (clients.empty()) throw ConfigError("no clients for initialization period");

    std::vector<std::pair<std::vector<double>, std::size_t>> means;
    means.reserve(clients.size());
    for (ClientState& client : clients) {
        if (client.train_size() == 0) throw ConfigError("client has no data");
        auto rng = make_rng(config.seed, RngStream::kClientTraining, client.id, 0);
        // Warm-up weights are private to this scope and discarded after the
        // mean is collected; FL restarts from the untouched initial model.
        Model warm = initial;
        plain_epoch(warm, client.split.train, config.batch_size,
                    config.learning_rate, rng, nullptr, 0.0, nullptr);
        std::vector<double> mean =
            compute_client_mean(warm.extractor, client.split.train);
        if (config.noise_scale > 0.0 && config.noise_coeff > 0.0) {
            mean = perturb_client_mean(mean, config.noise_scale,
                                       config.noise_coeff, rng);
        }
        means.emplace_back(std::move(mean), client.train_size());
    }
    return aggregate_global_mean(means);
}

double local_train(ClientState& client, const Model& global,
                   const GlobalMean* global_mean, const FederationConfig& config,
                   std::size_t iteration) {
    if (client.train_size() == 0) throw DataError("client train set is empty");
    if (config.learning_rate < 0.0) throw ConfigError("learning_rate must be >= 0");

    client.local = global;
    client.running_mean.reset();
    auto rng =
        make_rng(config.seed, RngStream::kClientTraining, client.id, iteration);

    const LabeledDataset& train = client.split.train;
    double loss_sum = 0.0;
    std::size_t total_steps = 0;

    if (config.algorithm != Algorithm::kFedAvgDbe) {
        const Model* prox =
            config.algorithm == Algorithm::kFedProx ? &global : nullptr;
        for (std::size_t epoch = 0; epoch < config.local_epochs; ++epoch) {
            std::size_t steps = 0;
            loss_sum += plain_epoch(client.local, train, config.batch_size,
                                    config.learning_rate, rng, prox,
                                    config.prox_weight, &steps);
            total_steps += steps;
        }
        return total_steps == 0 ? 0.0 : loss_sum / static_cast<double>(total_steps);
    }

    if (!global_mean) {
        throw StateError("missing global mean for regularized training");
    }
    const std::size_t rep_dim = client.local.rep_dim();
    if (client.prbm.bias.size() != rep_dim) {
        throw ShapeError("translation width does not match the model");
    }

    std::vector<std::size_t> order(train.size());
    for (std::size_t epoch = 0; epoch < config.local_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        const std::size_t steps = train.size() / config.batch_size;
        for (std::size_t s = 0; s < steps; ++s) {
            Batch batch =
                gather_batch(train, order, s * config.batch_size, config.batch_size);

            // The first batch after a reset takes the batch mean verbatim.
            MrContext mr;
            mr.kappa = config.kappa;
            mr.momentum = client.running_mean.initialized ? config.momentum : 1.0;
            mr.running_mean_old = client.running_mean.initialized
                                      ? client.running_mean.value
                                      : std::vector<double>(rep_dim, 0.0);
            mr.global_mean = global_mean->value;

            BackwardResult res =
                backward(client.local.extractor, client.local.head,
                         client.local.classifier, client.prbm.bias,
                         batch.features, batch.labels, mr);
            client.running_mean = update_running_mean(
                client.running_mean, res.batch_rep_mean, config.momentum);

            sgd_update(client.local.extractor, res.gradients.extractor,
                       config.learning_rate);
            sgd_update(client.local.head, res.gradients.head, config.learning_rate);
            sgd_update(client.local.classifier, res.gradients.classifier_weight,
                       res.gradients.classifier_bias, config.learning_rate);
            if (!config.freeze_prbm) {
                sgd_update(client.prbm.bias, *res.gradients.translation,
                           config.learning_rate);
            }
            loss_sum += res.loss.total;
            ++total_steps;
        }
    }
    return total_steps == 0 ? 0.0 : loss_sum / static_cast<double>(total_steps);
}

Model server_aggregate(
    const std::vector<std::pair<const Model*, std::size_t>>& updates) {
    if (updates.empty()) throw ConfigError("no updates to aggregate");
    std::size_t total = 0;
    for (const auto& [model, count] : updates) {
        if (count == 0) throw ConfigError("client sample count must be > 0");
        total += count;
    }

    std::vector<double> weights;
    weights.reserve(updates.size());
    double weight_sum = 0.0;
    for (const auto& [model, count] : updates) {
        weights.push_back(static_cast<double>(count) / static_cast<double>(total));
        weight_sum += weights.back();
    }
    if (std::abs(weight_sum - 1.0) > 1e-12) {
        throw NumericError("aggregation weights do not sum to 1");
    }

    const Model& first = *updates.front().first;
    std::vector<double> acc(
        flatten_parameters(first.extractor, first.head, first.classifier, nullptr)
            .size(),
        0.0);
    for (std::size_t u = 0; u < updates.size(); ++u) {
        const Model& m = *updates[u].first;
        const std::vector<double> flat =
            flatten_parameters(m.extractor, m.head, m.classifier, nullptr);
        if (flat.size() != acc.size()) {
            throw ShapeError("client update has mismatched parameter count");
        }
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += weights[u] * flat[i];
    }

    Model aggregated = first;
    unflatten_parameters(acc, aggregated.extractor, aggregated.head,
                         aggregated.classifier, nullptr);
    return aggregated;
}

FederationResult run_federation(const FederationConfig& config,
                                std::vector<ClientSplit> splits,
                                std::size_t input_dim, std::size_t num_classes,
                                std::size_t threads,
                                const RoundCallback& on_round) {
    config.validate();
    if (splits.size() != config.num_clients) {
        throw ConfigError("expected " + std::to_string(config.num_clients) +
                          " client splits, got " + std::to_string(splits.size()));
    }

    FederationResult result;
    result.server.model = build_model(input_dim, num_classes, config);
    const std::size_t rep_dim = result.server.model.rep_dim();

    result.clients.reserve(splits.size());
    for (std::size_t i = 0; i < splits.size(); ++i) {
        ClientState client;
        client.id = i;
        client.split = std::move(splits[i]);
        client.prbm = PrbmState::zeros(rep_dim);
        client.running_mean.value.assign(rep_dim, 0.0);
        client.local = result.server.model;
        result.clients.push_back(std::move(client));
    }

    if (config.algorithm == Algorithm::kFedAvgDbe) {
        result.server.global_mean =
            initialization_period(result.clients, result.server.model, config);
    }
    const GlobalMean* global_mean = result.server.global_mean
                                        ? &*result.server.global_mean
                                        : nullptr;

    for (std::size_t t = 1; t <= config.iterations; ++t) {
        auto sample_rng = make_rng(config.seed, RngStream::kClientSampling, t);
        const std::vector<std::size_t> participants =
            sample_clients(config.num_clients, config.join_ratio, sample_rng);

        std::vector<double> losses(participants.size(), 0.0);
        const std::size_t workers =
            std::max<std::size_t>(1, std::min(threads, participants.size()));
        if (workers == 1) {
            for (std::size_t p = 0; p < participants.size(); ++p) {
                try {
                    losses[p] = local_train(result.clients[participants[p]],
                                            result.server.model, global_mean,
                                            config, t);
                } catch (const NumericError& e) {
                    throw NumericError("iteration " + std::to_string(t) +
                                       ", client " +
                                       std::to_string(participants[p]) + ": " +
                                       e.what());
                }
            }
        } else {
            std::vector<std::exception_ptr> failures(workers);
            std::vector<std::thread> pool;
            pool.reserve(workers);
            for (std::size_t w = 0; w < workers; ++w) {
                pool.emplace_back([&, w]() {
                    try {
                        for (std::size_t p = w; p < participants.size();
                             p += workers) {
                            losses[p] = local_train(result.clients[participants[p]],
                                                    result.server.model,
                                                    global_mean, config, t);
                        }
                    } catch (...) {
                        failures[w] = std::current_exception();
                    }
                });
            }
            for (auto& worker : pool) worker.join();
            for (const auto& failure : failures) {
                if (failure) std::rethrow_exception(failure);
            }
        }

        if (config.algorithm != Algorithm::kLocalOnly) {
            std::vector<std::pair<const Model*, std::size_t>> updates;
            updates.reserve(participants.size());
            for (std::size_t id : participants) {
                updates.emplace_back(&result.clients[id].local,
                                     result.clients[id].train_size());
            }
            result.server.model = server_aggregate(updates);
        }
        result.server.iteration = t;

        RoundRecord record;
        record.iteration = t;
        record.participants = participants;
        record.train_loss = std::move(losses);
        record.params_digest = parameter_digest(result.server.model);
        result.history.push_back(record);
        if (on_round) on_round(result.server, result.clients, result.history.back());
    }
    return result;
}

}  // namespace fedsim
