#include "fedsim/model.hpp"

#include <cmath>
#include <string>

#include "fedsim/errors.hpp"

namespace fedsim {

namespace {

std::string shape_str(const DenseMatrix& m) {
    return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

// out = act(in * W^T + bias), one row per batch sample.
DenseMatrix layer_forward(const DenseLayer& layer, const DenseMatrix& in,
                          const std::string& where) {
    if (in.cols != layer.input_dim()) {
        throw ShapeError(where + ": input width " + std::to_string(in.cols) +
                         " does not match layer input " +
                         std::to_string(layer.input_dim()));
    }
    const std::size_t batch = in.rows;
    const std::size_t out_dim = layer.output_dim();
    DenseMatrix out(batch, out_dim);
    for (std::size_t b = 0; b < batch; ++b) {
        const double* x = in.row(b);
        double* y = out.row(b);
        for (std::size_t o = 0; o < out_dim; ++o) {
            double acc = layer.bias[o];
            const double* w = layer.weight.row(o);
            for (std::size_t i = 0; i < in.cols; ++i) acc += w[i] * x[i];
            if (layer.activation == Activation::kReLU && acc < 0.0) acc = 0.0;
            y[o] = acc;
        }
    }
    if (!out.all_finite()) {
        throw NumericError(where + ": non-finite activation");
    }
    return out;
}

// Forward through a layer stack, keeping every activation (input included).
std::vector<DenseMatrix> stack_forward(const FeatureExtractor& stack,
                                       DenseMatrix input, const std::string& name) {
    std::vector<DenseMatrix> acts;
    acts.reserve(stack.layers.size() + 1);
    acts.push_back(std::move(input));
    for (std::size_t l = 0; l < stack.layers.size(); ++l) {
        acts.push_back(layer_forward(stack.layers[l], acts.back(),
                                     name + " layer " + std::to_string(l)));
    }
    return acts;
}

// Backprop through a layer stack given the gradient at its output.
// Returns the gradient at its input; fills `grads` (aligned with layers).
DenseMatrix stack_backward(const FeatureExtractor& stack,
                           const std::vector<DenseMatrix>& acts,
                           DenseMatrix d_out, std::vector<LayerGradient>& grads,
                           const std::string& name) {
    grads.resize(stack.layers.size());
    for (std::size_t l = stack.layers.size(); l-- > 0;) {
        const DenseLayer& layer = stack.layers[l];
        const DenseMatrix& in = acts[l];
        const DenseMatrix& out = acts[l + 1];
        const std::size_t batch = in.rows;

        // d_pre: activation derivative applied to the output gradient.
        // ReLU derivative is taken as 0 at exactly 0.
        DenseMatrix d_pre = std::move(d_out);
        if (layer.activation == Activation::kReLU) {
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t o = 0; o < out.cols; ++o) {
                    if (out.at(b, o) <= 0.0) d_pre.at(b, o) = 0.0;
                }
            }
        }

        LayerGradient& g = grads[l];
        g.weight = DenseMatrix(layer.weight.rows, layer.weight.cols);
        g.bias.assign(layer.bias.size(), 0.0);
        for (std::size_t b = 0; b < batch; ++b) {
            const double* x = in.row(b);
            const double* dp = d_pre.row(b);
            for (std::size_t o = 0; o < out.cols; ++o) {
                g.bias[o] += dp[o];
                double* gw = g.weight.row(o);
                for (std::size_t i = 0; i < in.cols; ++i) gw[i] += dp[o] * x[i];
            }
        }

        DenseMatrix d_in(batch, in.cols);
        for (std::size_t b = 0; b < batch; ++b) {
            const double* dp = d_pre.row(b);
            double* di = d_in.row(b);
            for (std::size_t o = 0; o < out.cols; ++o) {
                const double* w = layer.weight.row(o);
                for (std::size_t i = 0; i < in.cols; ++i) di[i] += dp[o] * w[i];
            }
        }
        if (!d_in.all_finite()) {
            throw NumericError(name + " layer " + std::to_string(l) +
                               ": non-finite gradient");
        }
        d_out = std::move(d_in);
    }
    return d_out;
}

// Row-wise softmax with max subtraction.
DenseMatrix softmax_rows(const DenseMatrix& logits) {
    DenseMatrix probs(logits.rows, logits.cols);
    for (std::size_t b = 0; b < logits.rows; ++b) {
        const double* row = logits.row(b);
        double* p = probs.row(b);
        double maxv = row[0];
        for (std::size_t c = 1; c < logits.cols; ++c) maxv = std::max(maxv, row[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < logits.cols; ++c) {
            p[c] = std::exp(row[c] - maxv);
            sum += p[c];
        }
        for (std::size_t c = 0; c < logits.cols; ++c) p[c] /= sum;
    }
    return probs;
}

void check_labels(const std::vector<int>& labels, std::size_t batch,
                  std::size_t num_classes) {
    if (labels.size() != batch) {
        throw ShapeError("label count " + std::to_string(labels.size()) +
                         " does not match batch size " + std::to_string(batch));
    }
    for (std::size_t b = 0; b < batch; ++b) {
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= num_classes) {
            throw DomainError("label " + std::to_string(labels[b]) + " at row " +
                              std::to_string(b) + " outside [0, " +
                              std::to_string(num_classes) + ")");
        }
    }
}

}  // namespace

DenseMatrix forward_features(const FeatureExtractor& extractor,
                             const DenseMatrix& batch) {
    if (batch.rows == 0) throw ShapeError("empty batch");
    if (batch.cols != extractor.input_dim()) {
        throw ShapeError("batch width " + std::to_string(batch.cols) +
                         " does not match extractor input " +
                         std::to_string(extractor.input_dim()));
    }
    DenseMatrix acts = batch;
    for (std::size_t l = 0; l < extractor.layers.size(); ++l) {
        acts = layer_forward(extractor.layers[l], acts,
                             "extractor layer " + std::to_string(l));
    }
    return acts;
}

DenseMatrix forward_logits(const Classifier& classifier, const DenseMatrix& reps) {
    if (reps.rows == 0) throw ShapeError("empty batch");
    if (reps.cols != classifier.input_dim()) {
        throw ShapeError("representation width " + std::to_string(reps.cols) +
                         " does not match classifier input " +
                         std::to_string(classifier.input_dim()));
    }
    const std::size_t batch = reps.rows;
    const std::size_t classes = classifier.num_classes();
    DenseMatrix logits(batch, classes);
    for (std::size_t b = 0; b < batch; ++b) {
        const double* z = reps.row(b);
        double* y = logits.row(b);
        for (std::size_t c = 0; c < classes; ++c) {
            double acc = classifier.bias[c];
            const double* w = classifier.weight.row(c);
            for (std::size_t k = 0; k < reps.cols; ++k) acc += w[k] * z[k];
            y[c] = acc;
        }
    }
    return logits;
}

double cross_entropy(const DenseMatrix& logits, const std::vector<int>& labels) {
    if (logits.rows == 0) throw ShapeError("empty batch");
    if (!logits.all_finite()) throw NumericError("non-finite logits");
    check_labels(labels, logits.rows, logits.cols);
    double total = 0.0;
    for (std::size_t b = 0; b < logits.rows; ++b) {
        const double* row = logits.row(b);
        double maxv = row[0];
        for (std::size_t c = 1; c < logits.cols; ++c) maxv = std::max(maxv, row[c]);
        double lse = 0.0;
        for (std::size_t c = 0; c < logits.cols; ++c) lse += std::exp(row[c] - maxv);
        total += std::log(lse) - (row[labels[b]] - maxv);
    }
    return total / static_cast<double>(logits.rows);
}

BackwardResult backward(const FeatureExtractor& extractor,
                        const FeatureExtractor& head,
                        const Classifier& classifier,
                        const std::optional<std::vector<double>>& translation,
                        const DenseMatrix& batch,
                        const std::vector<int>& labels,
                        const std::optional<MrContext>& mr) {
    if (mr && !translation) {
        throw StateError("mean-regularization requires a translation vector");
    }
    const std::size_t batch_size = batch.rows;
    if (batch_size == 0) throw ShapeError("empty batch");

    std::vector<DenseMatrix> ext_acts = stack_forward(extractor, batch, "extractor");
    const DenseMatrix& reps = ext_acts.back();
    const std::size_t rep_dim = reps.cols;

    if (translation && translation->size() != rep_dim) {
        throw ShapeError("translation length " + std::to_string(translation->size()) +
                         " does not match representation width " +
                         std::to_string(rep_dim));
    }

    DenseMatrix translated = reps;
    if (translation) {
        for (std::size_t b = 0; b < batch_size; ++b) {
            double* row = translated.row(b);
            for (std::size_t k = 0; k < rep_dim; ++k) row[k] += (*translation)[k];
        }
    }

    std::vector<DenseMatrix> head_acts =
        stack_forward(head, std::move(translated), "head");
    const DenseMatrix& head_out = head_acts.back();

    DenseMatrix logits = forward_logits(classifier, head_out);
    if (!logits.all_finite()) throw NumericError("classifier: non-finite logits");
    check_labels(labels, batch_size, classifier.num_classes());

    BackwardResult result;
    DenseMatrix probs = softmax_rows(logits);
    double ce = 0.0;
    for (std::size_t b = 0; b < batch_size; ++b) {
        ce -= std::log(probs.at(b, labels[b]));
    }
    ce /= static_cast<double>(batch_size);
    result.loss.cross_entropy = ce;

    // Mean representation of the batch, one column accumulation per row.
    std::vector<double> rep_mean(rep_dim, 0.0);
    for (std::size_t b = 0; b < batch_size; ++b) {
        const double* row = reps.row(b);
        for (std::size_t k = 0; k < rep_dim; ++k) rep_mean[k] += row[k];
    }
    for (std::size_t k = 0; k < rep_dim; ++k) {
        rep_mean[k] /= static_cast<double>(batch_size);
    }
    result.batch_rep_mean = rep_mean;

    std::vector<double> mixed_mean;
    if (mr) {
        if (mr->running_mean_old.size() != rep_dim ||
            mr->global_mean.size() != rep_dim) {
            throw ShapeError("mean-regularization vectors do not match "
                             "representation width");
        }
        if (mr->kappa < 0.0) throw ConfigError("kappa must be >= 0");
        if (mr->momentum < 0.0 || mr->momentum > 1.0) {
            throw ConfigError("momentum must lie in [0, 1]");
        }
        mixed_mean.resize(rep_dim);
        double mse = 0.0;
        for (std::size_t k = 0; k < rep_dim; ++k) {
            mixed_mean[k] = (1.0 - mr->momentum) * mr->running_mean_old[k] +
                            mr->momentum * rep_mean[k];
            const double diff = mixed_mean[k] - mr->global_mean[k];
            mse += diff * diff;
        }
        mse /= static_cast<double>(rep_dim);
        result.loss.mean_reg = mse;
        result.loss.total = ce + mr->kappa * mse;
    } else {
        result.loss.total = ce;
    }

    // d(CE)/d(logits), mean-reduced.
    DenseMatrix d_logits = probs;
    for (std::size_t b = 0; b < batch_size; ++b) {
        d_logits.at(b, labels[b]) -= 1.0;
        double* row = d_logits.row(b);
        for (std::size_t c = 0; c < logits.cols; ++c) {
            row[c] /= static_cast<double>(batch_size);
        }
    }

    GradientSet& grads = result.gradients;
    grads.classifier_weight =
        DenseMatrix(classifier.weight.rows, classifier.weight.cols);
    grads.classifier_bias.assign(classifier.bias.size(), 0.0);
    DenseMatrix d_head_out(batch_size, head_out.cols);
    for (std::size_t b = 0; b < batch_size; ++b) {
        const double* h = head_out.row(b);
        const double* dl = d_logits.row(b);
        double* dh = d_head_out.row(b);
        for (std::size_t c = 0; c < logits.cols; ++c) {
            grads.classifier_bias[c] += dl[c];
            double* gw = grads.classifier_weight.row(c);
            const double* w = classifier.weight.row(c);
            for (std::size_t k = 0; k < head_out.cols; ++k) {
                gw[k] += dl[c] * h[k];
                dh[k] += dl[c] * w[k];
            }
        }
    }

    DenseMatrix d_translated =
        stack_backward(head, head_acts, std::move(d_head_out), grads.head, "head");

    if (translation) {
        // The translation is added to every row, so its gradient is the
        // column sum of the classifier-input gradients.
        std::vector<double> d_translation(rep_dim, 0.0);
        for (std::size_t b = 0; b < batch_size; ++b) {
            const double* row = d_translated.row(b);
            for (std::size_t k = 0; k < rep_dim; ++k) d_translation[k] += row[k];
        }
        grads.translation = std::move(d_translation);
    }

    DenseMatrix d_reps = std::move(d_translated);
    if (mr) {
        // Regularizer path: every row of the batch contributes 1/B of the
        // batch mean, which enters the mixed mean scaled by momentum.
        const double coeff = mr->kappa * 2.0 * mr->momentum /
                             (static_cast<double>(rep_dim) *
                              static_cast<double>(batch_size));
        for (std::size_t b = 0; b < batch_size; ++b) {
            double* row = d_reps.row(b);
            for (std::size_t k = 0; k < rep_dim; ++k) {
                row[k] += coeff * (mixed_mean[k] - mr->global_mean[k]);
            }
        }
    }

    stack_backward(extractor, ext_acts, std::move(d_reps), grads.extractor,
                   "extractor");
    return result;
}

BackwardResult backward(const FeatureExtractor& extractor,
                        const Classifier& classifier,
                        const std::optional<std::vector<double>>& translation,
                        const DenseMatrix& batch,
                        const std::vector<int>& labels,
                        const std::optional<MrContext>& mr) {
    return backward(extractor, FeatureExtractor{}, classifier, translation, batch,
                    labels, mr);
}

void sgd_update(std::vector<double>& params, const std::vector<double>& grads,
                double learning_rate) {
    if (params.size() != grads.size()) {
        throw ShapeError("parameter/gradient length mismatch: " +
                         std::to_string(params.size()) + " vs " +
                         std::to_string(grads.size()));
    }
    if (learning_rate < 0.0) throw ConfigError("learning_rate must be >= 0");
    for (std::size_t i = 0; i < params.size(); ++i) {
        params[i] -= learning_rate * grads[i];
    }
}

void sgd_update(DenseMatrix& params, const DenseMatrix& grads, double learning_rate) {
    if (!params.same_shape(grads)) {
        throw ShapeError("parameter/gradient shape mismatch: " + shape_str(params) +
                         " vs " + shape_str(grads));
    }
    sgd_update(params.values, grads.values, learning_rate);
}

void sgd_update(FeatureExtractor& extractor, const std::vector<LayerGradient>& grads,
                double learning_rate) {
    if (extractor.layers.size() != grads.size()) {
        throw ShapeError("layer count mismatch in sgd_update");
    }
    for (std::size_t l = 0; l < grads.size(); ++l) {
        sgd_update(extractor.layers[l].weight, grads[l].weight, learning_rate);
        sgd_update(extractor.layers[l].bias, grads[l].bias, learning_rate);
    }
}

void sgd_update(Classifier& classifier, const DenseMatrix& weight_grad,
                const std::vector<double>& bias_grad, double learning_rate) {
    sgd_update(classifier.weight, weight_grad, learning_rate);
    sgd_update(classifier.bias, bias_grad, learning_rate);
}

std::vector<double> numeric_gradient(
    const std::function<double(const std::vector<double>&)>& loss_fn,
    const std::vector<double>& params, double step) {
    if (step <= 0.0) throw ConfigError("step must be > 0");
    std::vector<double> grad(params.size());
    std::vector<double> probe = params;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double saved = probe[i];
        probe[i] = saved + step;
        const double up = loss_fn(probe);
        probe[i] = saved - step;
        const double down = loss_fn(probe);
        probe[i] = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericError("non-finite loss at coordinate " + std::to_string(i));
        }
        grad[i] = (up - down) / (2.0 * step);
    }
    return grad;
}

DenseLayer make_dense_layer(std::size_t input_dim, std::size_t output_dim,
                            Activation activation, std::mt19937_64& rng) {
    if (input_dim == 0 || output_dim == 0) {
        throw ConfigError("layer dimensions must be >= 1");
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(input_dim));
    std::uniform_real_distribution<double> dist(-bound, bound);
    DenseLayer layer;
    layer.weight = DenseMatrix(output_dim, input_dim);
    for (double& w : layer.weight.values) w = dist(rng);
    layer.bias.resize(output_dim);
    for (double& b : layer.bias) b = dist(rng);
    layer.activation = activation;
    return layer;
}

FeatureExtractor make_extractor(std::size_t input_dim,
                                const std::vector<std::size_t>& widths,
                                std::mt19937_64& rng) {
    if (widths.empty()) throw ConfigError("extractor needs at least one layer");
    FeatureExtractor extractor;
    std::size_t in = input_dim;
    for (std::size_t w : widths) {
        extractor.layers.push_back(make_dense_layer(in, w, Activation::kReLU, rng));
        in = w;
    }
    return extractor;
}

Classifier make_classifier(std::size_t rep_dim, std::size_t num_classes,
                           std::mt19937_64& rng) {
    if (num_classes < 2) throw ConfigError("classifier needs at least 2 classes");
    DenseLayer affine =
        make_dense_layer(rep_dim, num_classes, Activation::kIdentity, rng);
    return Classifier{std::move(affine.weight), std::move(affine.bias)};
}

std::vector<double> flatten_parameters(const FeatureExtractor& extractor,
                                       const FeatureExtractor& head,
                                       const Classifier& classifier,
                                       const std::vector<double>* translation) {
    std::vector<double> flat;
    auto append_stack = [&flat](const FeatureExtractor& stack) {
        for (const DenseLayer& layer : stack.layers) {
            flat.insert(flat.end(), layer.weight.values.begin(),
                        layer.weight.values.end());
            flat.insert(flat.end(), layer.bias.begin(), layer.bias.end());
        }
    };
    append_stack(extractor);
    append_stack(head);
    flat.insert(flat.end(), classifier.weight.values.begin(),
                classifier.weight.values.end());
    flat.insert(flat.end(), classifier.bias.begin(), classifier.bias.end());
    if (translation) flat.insert(flat.end(), translation->begin(), translation->end());
    return flat;
}

void unflatten_parameters(const std::vector<double>& flat,
                          FeatureExtractor& extractor, FeatureExtractor& head,
                          Classifier& classifier, std::vector<double>* translation) {
    std::size_t pos = 0;
    auto take = [&flat, &pos](std::vector<double>& dst) {
        if (pos + dst.size() > flat.size()) {
            throw ShapeError("flattened parameter vector too short");
        }
        std::copy(flat.begin() + pos, flat.begin() + pos + dst.size(), dst.begin());
        pos += dst.size();
    };
    auto fill_stack = [&take](FeatureExtractor& stack) {
        for (DenseLayer& layer : stack.layers) {
            take(layer.weight.values);
            take(layer.bias);
        }
    };
    fill_stack(extractor);
    fill_stack(head);
    take(classifier.weight.values);
    take(classifier.bias);
    if (translation) take(*translation);
    if (pos != flat.size()) {
        throw ShapeError("flattened parameter vector too long: " +
                         std::to_string(flat.size() - pos) + " values left over");
    }
}

std::vector<double> flatten_gradients(const GradientSet& grads) {
    std::vector<double> flat;
    auto append_layers = [&flat](const std::vector<LayerGradient>& layers) {
        for (const LayerGradient& g : layers) {
            flat.insert(flat.end(), g.weight.values.begin(), g.weight.values.end());
            flat.insert(flat.end(), g.bias.begin(), g.bias.end());
        }
    };
    append_layers(grads.extractor);
    append_layers(grads.head);
    flat.insert(flat.end(), grads.classifier_weight.values.begin(),
                grads.classifier_weight.values.end());
    flat.insert(flat.end(), grads.classifier_bias.begin(),
                grads.classifier_bias.end());
    if (grads.translation) {
        flat.insert(flat.end(), grads.translation->begin(),
                    grads.translation->end());
    }
    return flat;
}

}  // namespace fedsim
