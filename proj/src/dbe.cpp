#include "fedsim/dbe.hpp"

#include <string>

#include "fedsim/errors.hpp"

namespace fedsim {

DenseMatrix prbm_translate(const DenseMatrix& reps, const PrbmState& prbm) {
    if (reps.cols != prbm.bias.size()) {
        throw ShapeError("translation length " + std::to_string(prbm.bias.size()) +
                         " does not match representation width " +
                         std::to_string(reps.cols));
    }
    DenseMatrix out = reps;
    for (std::size_t r = 0; r < out.rows; ++r) {
        double* row = out.row(r);
        for (std::size_t k = 0; k < out.cols; ++k) row[k] += prbm.bias[k];
    }
    return out;
}

RunningMean update_running_mean(const RunningMean& state,
                                const std::vector<double>& batch_mean,
                                double momentum) {
    if (momentum < 0.0 || momentum > 1.0) {
        throw ConfigError("momentum must lie in [0, 1]");
    }
    RunningMean next;
    next.initialized = true;
    if (!state.initialized) {
        next.value = batch_mean;
        return next;
    }
    if (state.value.size() != batch_mean.size()) {
        throw ShapeError("running mean length mismatch");
    }
    next.value.resize(batch_mean.size());
    for (std::size_t k = 0; k < batch_mean.size(); ++k) {
        next.value[k] = (1.0 - momentum) * state.value[k] + momentum * batch_mean[k];
    }
    return next;
}

double mr_loss(const RunningMean& running, const GlobalMean& global_mean) {
    if (!running.initialized) {
        throw StateError("running mean has not seen a batch this iteration");
    }
    if (running.value.size() != global_mean.value.size()) {
        throw ShapeError("running/global mean length mismatch");
    }
    double mse = 0.0;
    for (std::size_t k = 0; k < running.value.size(); ++k) {
        const double diff = running.value[k] - global_mean.value[k];
        mse += diff * diff;
    }
    return mse / static_cast<double>(running.value.size());
}

std::vector<double> compute_client_mean(const FeatureExtractor& extractor,
                                        const LabeledDataset& dataset) {
    if (dataset.size() == 0) throw DataError("empty dataset");
    DenseMatrix reps = forward_features(extractor, dataset.features);
    std::vector<double> mean(reps.cols, 0.0);
    for (std::size_t r = 0; r < reps.rows; ++r) {
        const double* row = reps.row(r);
        for (std::size_t k = 0; k < reps.cols; ++k) mean[k] += row[k];
    }
    for (double& m : mean) m /= static_cast<double>(reps.rows);
    return mean;
}

GlobalMean aggregate_global_mean(
    const std::vector<std::pair<std::vector<double>, std::size_t>>& means) {
    if (means.empty()) throw ConfigError("no client means to aggregate");
    std::size_t total = 0;
    for (const auto& [mean, count] : means) {
        if (count == 0) throw ConfigError("client sample count must be > 0");
        if (mean.size() != means.front().first.size()) {
            throw ShapeError("client mean length mismatch");
        }
        total += count;
    }
    GlobalMean global;
    global.value.assign(means.front().first.size(), 0.0);
    for (const auto& [mean, count] : means) {
        const double w = static_cast<double>(count) / static_cast<double>(total);
        for (std::size_t k = 0; k < mean.size(); ++k) {
            global.value[k] += w * mean[k];
        }
    }
    return global;
}

std::vector<double> perturb_client_mean(const std::vector<double>& mean,
                                        double noise_scale, double noise_coeff,
                                        std::mt19937_64& rng) {
    if (noise_scale < 0.0) throw ConfigError("noise scale must be >= 0");
    if (noise_coeff < 0.0 || noise_coeff > 1.0) {
        throw ConfigError("noise coefficient must lie in [0, 1]");
    }
    if (noise_scale == 0.0 || noise_coeff == 0.0) return mean;
    std::normal_distribution<double> noise(0.0, noise_scale);
    std::vector<double> out = mean;
    for (double& v : out) v += noise_coeff * noise(rng);
    return out;
}

}  // namespace fedsim
