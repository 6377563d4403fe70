#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <map>
#include <numeric>
#include <set>

#include "fedsim/errors.hpp"
#include "fedsim/federation.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/rng.hpp"

using namespace fedsim;

namespace {

std::vector<ClientSplit> make_splits(std::size_t num_clients, std::uint64_t seed,
                                     std::size_t samples_per_class = 30) {
    LabeledDataset ds = generate_synthetic(3, 4, samples_per_class, 3.0, seed);
    auto rng = make_rng(seed, RngStream::kPartitioning);
    auto parts = partition_dirichlet(ds, num_clients, 1.0, rng);
    std::vector<ClientSplit> splits;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        auto split_rng = make_rng(seed, RngStream::kTrainTestSplit, i);
        splits.push_back(split_train_test(parts[i], 0.75, split_rng));
    }
    return splits;
}

FederationConfig small_config(Algorithm algorithm, std::size_t num_clients = 4) {
    FederationConfig config;
    config.num_clients = num_clients;
    config.join_ratio = 1.0;
    config.local_epochs = 1;
    config.iterations = 3;
    config.learning_rate = 0.05;
    config.batch_size = 5;
    config.algorithm = algorithm;
    config.hidden_dims = {8, 4};
    config.seed = 21;
    if (algorithm == Algorithm::kFedAvgDbe) {
        config.kappa = 1.0;
        config.momentum = 1.0;
    }
    return config;
}

std::vector<double> model_params(const Model& model) {
    return flatten_parameters(model.extractor, model.head, model.classifier,
                              nullptr);
}

// Client whose train samples are all identical, which makes the batch mean
// independent of shuffling.
ClientState constant_client(std::size_t id, const std::vector<double>& sample,
                            const Model& model) {
    ClientState client;
    client.id = id;
    client.split.train.num_classes = 2;
    client.split.train.features = DenseMatrix(4, sample.size());
    for (std::size_t r = 0; r < 4; ++r) {
        std::copy(sample.begin(), sample.end(),
                  client.split.train.features.row(r));
    }
    client.split.train.labels = {0, 0, 0, 0};
    client.split.test = client.split.train;
    client.prbm = PrbmState::zeros(model.rep_dim());
    client.running_mean.value.assign(model.rep_dim(), 0.0);
    client.local = model;
    return client;
}

}  // namespace

TEST_CASE("config validation names the offending field") {
    FederationConfig config = small_config(Algorithm::kFedAvg);
    config.join_ratio = 0.0;
    CHECK_THROWS_AS(config.validate(), ConfigError);
    config = small_config(Algorithm::kFedAvg);
    config.kappa = -1.0;
    CHECK_THROWS_AS(config.validate(), ConfigError);
    config = small_config(Algorithm::kFedAvg);
    config.momentum = 1.5;
    CHECK_THROWS_AS(config.validate(), ConfigError);
    config = small_config(Algorithm::kFedAvg);
    config.dbe_split = 3;
    CHECK_THROWS_AS(config.validate(), ConfigError);
}

TEST_CASE("build_model splits the hidden stack at the requested boundary") {
    FederationConfig config = small_config(Algorithm::kFedAvg);
    config.hidden_dims = {10, 6, 4};

    Model last = build_model(5, 3, config);
    CHECK(last.extractor.layers.size() == 3);
    CHECK(last.head.layers.empty());
    CHECK(last.rep_dim() == 4);
    CHECK(last.classifier.input_dim() == 4);
    CHECK(last.classifier.num_classes() == 3);

    config.dbe_split = 1;
    Model early = build_model(5, 3, config);
    CHECK(early.extractor.layers.size() == 1);
    CHECK(early.rep_dim() == 10);
    CHECK(early.head.layers.size() == 2);
    CHECK(early.classifier.input_dim() == 4);
}

TEST_CASE("sample_clients covers everyone at full participation") {
    auto rng = make_rng(1, RngStream::kClientSampling);
    auto all = sample_clients(7, 1.0, rng);
    CHECK(all == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6});
}

TEST_CASE("sample_clients draws half of 100 clients without replacement") {
    auto rng = make_rng(2, RngStream::kClientSampling);
    auto half = sample_clients(100, 0.5, rng);
    CHECK(half.size() == 50);
    CHECK(std::set<std::size_t>(half.begin(), half.end()).size() == 50);
    for (std::size_t id : half) CHECK(id < 100);
}

TEST_CASE("sample_clients is deterministic per seed and never empty") {
    auto rng_a = make_rng(3, RngStream::kClientSampling, 9);
    auto rng_b = make_rng(3, RngStream::kClientSampling, 9);
    CHECK(sample_clients(10, 0.3, rng_a) == sample_clients(10, 0.3, rng_b));

    auto rng_c = make_rng(3, RngStream::kClientSampling);
    CHECK(sample_clients(10, 0.01, rng_c).size() == 1);
}

TEST_CASE("local_train with zero learning rate leaves parameters unchanged") {
    FederationConfig config = small_config(Algorithm::kFedAvg, 1);
    config.learning_rate = 0.0;
    Model model = build_model(4, 3, config);
    auto splits = make_splits(1, 31);
    ClientState client;
    client.id = 0;
    client.split = splits[0];
    client.prbm = PrbmState::zeros(model.rep_dim());
    client.local = model;

    local_train(client, model, nullptr, config, 1);
    CHECK(model_params(client.local) == model_params(model));
}

TEST_CASE("local_train runs floor(n / B) batches per epoch") {
    // With eta = 0 the extractor is frozen, so the running mean after one
    // epoch folds exactly the per-batch means of the shuffled order; any
    // extra or missing batch changes the fold.
    FederationConfig config = small_config(Algorithm::kFedAvgDbe, 1);
    config.learning_rate = 0.0;
    config.batch_size = 10;
    config.momentum = 0.5;
    Model model = build_model(4, 3, config);

    LabeledDataset ds = generate_synthetic(3, 4, 9, 3.0, 41);  // n = 27
    ClientState client;
    client.id = 0;
    client.split.train = ds;
    client.split.test = ds;
    client.prbm = PrbmState::zeros(model.rep_dim());
    client.running_mean.value.assign(model.rep_dim(), 0.0);
    client.local = model;
    GlobalMean gm{std::vector<double>(model.rep_dim(), 0.0)};

    local_train(client, model, &gm, config, 1);

    // Replicate the epoch: same stream, same shuffle, frozen extractor.
    auto rng = make_rng(config.seed, RngStream::kClientTraining, 0, 1);
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t steps = ds.size() / config.batch_size;
    CHECK(steps == 2);  // floor(27 / 10)
    RunningMean expected;
    for (std::size_t s = 0; s < steps; ++s) {
        DenseMatrix batch(config.batch_size, ds.dim());
        for (std::size_t j = 0; j < config.batch_size; ++j) {
            const std::size_t src = order[s * config.batch_size + j];
            std::copy(ds.features.row(src), ds.features.row(src) + ds.dim(),
                      batch.row(j));
        }
        DenseMatrix reps = forward_features(model.extractor, batch);
        std::vector<double> mean(reps.cols, 0.0);
        for (std::size_t r = 0; r < reps.rows; ++r) {
            for (std::size_t k = 0; k < reps.cols; ++k) {
                mean[k] += reps.at(r, k);
            }
        }
        for (double& m : mean) m /= static_cast<double>(reps.rows);
        expected = update_running_mean(expected, mean, config.momentum);
    }
    CHECK(client.running_mean.value == expected.value);
}

TEST_CASE("local_train skips training when the client is smaller than a batch") {
    FederationConfig config = small_config(Algorithm::kFedAvg, 1);
    config.batch_size = 50;
    Model model = build_model(4, 3, config);
    auto splits = make_splits(1, 32, 10);  // 30 samples, 22 train
    ClientState client;
    client.id = 0;
    client.split = splits[0];
    client.prbm = PrbmState::zeros(model.rep_dim());
    client.local = model;

    const double loss = local_train(client, model, nullptr, config, 1);
    CHECK(loss == 0.0);
    CHECK(model_params(client.local) == model_params(model));
}

TEST_CASE("running mean is reset on every local_train entry") {
    FederationConfig config = small_config(Algorithm::kFedAvgDbe, 1);
    config.batch_size = 4;
    config.momentum = 0.3;
    Model model = build_model(3, 3, config);
    ClientState client = constant_client(0, {0.4, -1.0, 2.0}, model);
    client.running_mean.value.assign(model.rep_dim(), 123.0);  // stale
    client.running_mean.initialized = true;
    GlobalMean gm{std::vector<double>(model.rep_dim(), 0.0)};

    local_train(client, model, &gm, config, 1);

    // All four train rows are identical, so the only batch mean equals the
    // representation of that row regardless of shuffling; with the reset in
    // place the stale 123s cannot leak in.
    DenseMatrix reps = forward_features(model.extractor, client.split.train.features);
    std::vector<double> expected(reps.cols, 0.0);
    for (std::size_t r = 0; r < reps.rows; ++r) {
        for (std::size_t k = 0; k < reps.cols; ++k) expected[k] += reps.at(r, k);
    }
    for (double& m : expected) m /= static_cast<double>(reps.rows);
    CHECK(client.running_mean.initialized);
    CHECK(client.running_mean.value == expected);
}

TEST_CASE("server_aggregate reproduces hand-computed weighted averages") {
    FederationConfig config = small_config(Algorithm::kFedAvg);
    Model zeros = build_model(4, 3, config);
    std::vector<double> flat(model_params(zeros).size(), 0.0);
    unflatten_parameters(flat, zeros.extractor, zeros.head, zeros.classifier,
                         nullptr);
    Model fours = zeros;
    std::fill(flat.begin(), flat.end(), 4.0);
    unflatten_parameters(flat, fours.extractor, fours.head, fours.classifier,
                         nullptr);

    Model mixed = server_aggregate({{&zeros, 1}, {&fours, 3}});
    for (double v : model_params(mixed)) {
        CHECK(v == doctest::Approx(3.0).epsilon(1e-12));
    }

    Model solo = server_aggregate({{&fours, 7}});
    CHECK(model_params(solo) == model_params(fours));

    Model same = server_aggregate({{&fours, 2}, {&fours, 5}, {&fours, 1}});
    for (double v : model_params(same)) {
        CHECK(v == doctest::Approx(4.0).epsilon(1e-12));
    }

    CHECK_THROWS_AS(server_aggregate({}), ConfigError);
    CHECK_THROWS_AS(server_aggregate({{&zeros, 0}}), ConfigError);
}

TEST_CASE("single-client round adopts that client's parameters") {
    FederationConfig config = small_config(Algorithm::kFedAvg, 1);
    config.iterations = 1;
    auto result = run_federation(config, make_splits(1, 33), 4, 3);
    CHECK(model_params(result.server.model) ==
          model_params(result.clients[0].local));
}

TEST_CASE("local-only training never changes the global model") {
    FederationConfig config = small_config(Algorithm::kLocalOnly);
    const Model initial = build_model(4, 3, config);
    auto result = run_federation(config, make_splits(4, 34), 4, 3);
    CHECK(model_params(result.server.model) == model_params(initial));
    for (const RoundRecord& record : result.history) {
        CHECK(record.params_digest == parameter_digest(initial));
    }
}

TEST_CASE("fedprox with zero proximal weight matches fedavg exactly") {
    FederationConfig fedavg = small_config(Algorithm::kFedAvg);
    FederationConfig fedprox = small_config(Algorithm::kFedProx);
    fedprox.prox_weight = 0.0;
    auto result_avg = run_federation(fedavg, make_splits(4, 35), 4, 3);
    auto result_prox = run_federation(fedprox, make_splits(4, 35), 4, 3);
    CHECK(model_params(result_avg.server.model) ==
          model_params(result_prox.server.model));
}

TEST_CASE("fedprox with positive weight stays closer to the global model") {
    FederationConfig fedavg = small_config(Algorithm::kFedAvg);
    fedavg.iterations = 1;
    FederationConfig fedprox = small_config(Algorithm::kFedProx);
    fedprox.iterations = 1;
    fedprox.prox_weight = 10.0;

    const Model initial = build_model(4, 3, fedavg);
    const std::vector<double> start = model_params(initial);
    auto result_avg = run_federation(fedavg, make_splits(4, 36), 4, 3);
    auto result_prox = run_federation(fedprox, make_splits(4, 36), 4, 3);

    auto drift = [&start](const Model& model) {
        const std::vector<double> params = model_params(model);
        double sum = 0.0;
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double diff = params[i] - start[i];
            sum += diff * diff;
        }
        return sum;
    };
    CHECK(drift(result_prox.server.model) < drift(result_avg.server.model));
}

TEST_CASE("translation state persists across rounds and is never uploaded") {
    FederationConfig config = small_config(Algorithm::kFedAvgDbe, 4);
    config.join_ratio = 0.5;
    config.iterations = 4;

    std::map<std::size_t, std::vector<double>> previous;
    auto result = run_federation(
        config, make_splits(4, 37), 4, 3, 1,
        [&previous](const ServerState&, const std::vector<ClientState>& clients,
                    const RoundRecord& record) {
            for (const ClientState& client : clients) {
                const bool participated =
                    std::find(record.participants.begin(),
                              record.participants.end(),
                              client.id) != record.participants.end();
                auto it = previous.find(client.id);
                if (it != previous.end() && !participated) {
                    CHECK(client.prbm.bias == it->second);
                }
                previous[client.id] = client.prbm.bias;
            }
        });

    // Training moved at least one translation vector away from zero.
    bool any_nonzero = false;
    for (const ClientState& client : result.clients) {
        for (double v : client.prbm.bias) any_nonzero |= (v != 0.0);
    }
    CHECK(any_nonzero);
}

TEST_CASE("frozen translation and zero kappa degenerate to fedavg") {
    FederationConfig fedavg = small_config(Algorithm::kFedAvg);
    FederationConfig dbe = small_config(Algorithm::kFedAvgDbe);
    dbe.kappa = 0.0;
    dbe.freeze_prbm = true;

    auto result_avg = run_federation(fedavg, make_splits(4, 38), 4, 3);
    auto result_dbe = run_federation(dbe, make_splits(4, 38), 4, 3);
    const std::vector<double> a = model_params(result_avg.server.model);
    const std::vector<double> b = model_params(result_dbe.server.model);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(std::abs(a[i] - b[i]) <= 1e-9);
    }
}

TEST_CASE("parallel training is bit-identical to serial") {
    FederationConfig config = small_config(Algorithm::kFedAvgDbe, 6);
    config.iterations = 3;
    auto serial = run_federation(config, make_splits(6, 39), 4, 3, 1);
    auto parallel = run_federation(config, make_splits(6, 39), 4, 3, 4);
    CHECK(model_params(serial.server.model) ==
          model_params(parallel.server.model));
    for (std::size_t t = 0; t < serial.history.size(); ++t) {
        CHECK(serial.history[t].params_digest ==
              parallel.history[t].params_digest);
        CHECK(serial.history[t].train_loss == parallel.history[t].train_loss);
    }
    for (std::size_t i = 0; i < serial.clients.size(); ++i) {
        CHECK(serial.clients[i].prbm.bias == parallel.clients[i].prbm.bias);
    }
}

TEST_CASE("initialization period aggregates client means by sample count") {
    // Identity-like check: eta = 0 keeps the extractor untrained, so the
    // client mean is the mean representation of the raw inputs.
    FederationConfig config = small_config(Algorithm::kFedAvgDbe, 2);
    config.learning_rate = 0.0;
    Model model = build_model(3, 3, config);

    std::vector<ClientState> clients;
    clients.push_back(constant_client(0, {1.0, 0.0, -1.0}, model));
    clients.push_back(constant_client(1, {0.0, 2.0, 0.5}, model));

    GlobalMean gm = initialization_period(clients, model, config);
    DenseMatrix reps_a =
        forward_features(model.extractor, clients[0].split.train.features);
    DenseMatrix reps_b =
        forward_features(model.extractor, clients[1].split.train.features);
    // Both clients hold 4 samples, so the consensus is the plain average.
    for (std::size_t k = 0; k < gm.value.size(); ++k) {
        CHECK(gm.value[k] ==
              doctest::Approx(0.5 * (reps_a.at(0, k) + reps_b.at(0, k)))
                  .epsilon(1e-12));
    }

    std::vector<ClientState> solo;
    solo.push_back(constant_client(0, {1.0, 0.0, -1.0}, model));
    GlobalMean own = initialization_period(solo, model, config);
    for (std::size_t k = 0; k < own.value.size(); ++k) {
        CHECK(own.value[k] == doctest::Approx(reps_a.at(0, k)).epsilon(1e-12));
    }

    std::vector<ClientState> none;
    CHECK_THROWS_AS(initialization_period(none, model, config), ConfigError);
}

TEST_CASE("run_federation validates the client count") {
    FederationConfig config = small_config(Algorithm::kFedAvg, 3);
    CHECK_THROWS_AS(run_federation(config, make_splits(2, 40), 4, 3), ConfigError);
}

TEST_CASE("training works with an early translation boundary") {
    // Boundary after the first hidden layer: the translation lives at
    // width 8 and the second hidden layer moves to the classifier side.
    FederationConfig config = small_config(Algorithm::kFedAvgDbe, 4);
    config.dbe_split = 1;
    auto result = run_federation(config, make_splits(4, 42), 4, 3);
    CHECK(result.server.model.head.layers.size() == 1);
    for (const ClientState& client : result.clients) {
        CHECK(client.prbm.bias.size() == 8);
    }
    // The run trained: the digest moved away from the initial model's.
    CHECK(result.history.front().params_digest !=
          parameter_digest(build_model(4, 3, config)));
    CHECK_NOTHROW(evaluate_personalized(result.clients, result.server.model));
}
