#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "fedsim/matrix.hpp"

namespace fedsim {

enum class Activation { kReLU, kIdentity };

struct DenseLayer {
    DenseMatrix weight;         // out x in
    std::vector<double> bias;   // out
    Activation activation = Activation::kReLU;

    std::size_t input_dim() const { return weight.cols; }
    std::size_t output_dim() const { return weight.rows; }
};

// Stack of dense layers mapping inputs to the representation space.
struct FeatureExtractor {
    std::vector<DenseLayer> layers;

    std::size_t input_dim() const { return layers.front().input_dim(); }
    std::size_t output_dim() const { return layers.back().output_dim(); }
    bool empty() const { return layers.empty(); }
};

// Final affine map from the representation space to class logits.
// Softmax lives inside the loss, not here.
struct Classifier {
    DenseMatrix weight;         // classes x rep_dim
    std::vector<double> bias;   // classes

    std::size_t input_dim() const { return weight.cols; }
    std::size_t num_classes() const { return weight.rows; }
};

struct LayerGradient {
    DenseMatrix weight;
    std::vector<double> bias;
};

// Shape-congruent with the model it was computed from. `translation` is
// present only when the loss was evaluated with a per-client translation
// vector.
struct GradientSet {
    std::vector<LayerGradient> extractor;
    std::vector<LayerGradient> head;
    DenseMatrix classifier_weight;
    std::vector<double> classifier_bias;
    std::optional<std::vector<double>> translation;
};

struct LossBreakdown {
    double cross_entropy = 0.0;
    double mean_reg = 0.0;
    double total = 0.0;
};

// Inputs for the mean-regularization term of the composite loss. The
// history value is treated as a constant during backprop; gradient flows
// only through the current batch mean scaled by `momentum`.
struct MrContext {
    std::vector<double> running_mean_old;
    std::vector<double> global_mean;
    double kappa = 0.0;
    double momentum = 1.0;
};

struct BackwardResult {
    GradientSet gradients;
    LossBreakdown loss;
    // Mean extractor output over the batch, needed by the caller to
    // advance its running-mean state.
    std::vector<double> batch_rep_mean;
};

// Row j of the result is the representation of input row j.
DenseMatrix forward_features(const FeatureExtractor& extractor,
                             const DenseMatrix& batch);

DenseMatrix forward_logits(const Classifier& classifier, const DenseMatrix& reps);

// Mean over the batch of -log softmax(logits)[label], with row-max
// subtraction for overflow safety.
double cross_entropy(const DenseMatrix& logits, const std::vector<int>& labels);

// Exact analytic gradients of
//   CE(classifier(head(extractor(x) + translation)), y)
//     + kappa * MSE((1-mu)*old + mu*batch_mean(extractor(x)), global_mean)
// with respect to every parameter array. Without `mr` and `translation`
// this reduces to plain cross-entropy gradients. `head` holds the dense
// layers between the representation boundary and the final affine
// classifier; it is empty for the default split.
BackwardResult backward(const FeatureExtractor& extractor,
                        const FeatureExtractor& head,
                        const Classifier& classifier,
                        const std::optional<std::vector<double>>& translation,
                        const DenseMatrix& batch,
                        const std::vector<int>& labels,
                        const std::optional<MrContext>& mr = std::nullopt);

// Default-split form: the classifier directly consumes the (translated)
// representation.
BackwardResult backward(const FeatureExtractor& extractor,
                        const Classifier& classifier,
                        const std::optional<std::vector<double>>& translation,
                        const DenseMatrix& batch,
                        const std::vector<int>& labels,
                        const std::optional<MrContext>& mr = std::nullopt);

// p <- p - learning_rate * g, elementwise.
void sgd_update(std::vector<double>& params, const std::vector<double>& grads,
                double learning_rate);
void sgd_update(DenseMatrix& params, const DenseMatrix& grads, double learning_rate);
void sgd_update(FeatureExtractor& extractor, const std::vector<LayerGradient>& grads,
                double learning_rate);
void sgd_update(Classifier& classifier, const DenseMatrix& weight_grad,
                const std::vector<double>& bias_grad, double learning_rate);

// Central-difference estimate (f(p+d) - f(p-d)) / (2d) per coordinate.
// Test oracle for the analytic gradients; independent of backward().
std::vector<double> numeric_gradient(
    const std::function<double(const std::vector<double>&)>& loss_fn,
    const std::vector<double>& params, double step);

// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
DenseLayer make_dense_layer(std::size_t input_dim, std::size_t output_dim,
                            Activation activation, std::mt19937_64& rng);
FeatureExtractor make_extractor(std::size_t input_dim,
                                const std::vector<std::size_t>& widths,
                                std::mt19937_64& rng);
Classifier make_classifier(std::size_t rep_dim, std::size_t num_classes,
                           std::mt19937_64& rng);

// Flattened parameter vector in a fixed order (extractor layers, head
// layers, classifier, translation), used by the finite-difference oracle
// and by parameter-space norms.
std::vector<double> flatten_parameters(const FeatureExtractor& extractor,
                                       const FeatureExtractor& head,
                                       const Classifier& classifier,
                                       const std::vector<double>* translation);
void unflatten_parameters(const std::vector<double>& flat,
                          FeatureExtractor& extractor, FeatureExtractor& head,
                          Classifier& classifier, std::vector<double>* translation);
std::vector<double> flatten_gradients(const GradientSet& grads);

}  // namespace fedsim
