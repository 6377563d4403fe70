#include "fedsim/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "fedsim/errors.hpp"

namespace fedsim {

namespace {

// Representations at the classifier input for one client's test set.
DenseMatrix client_input_reps(const ClientState& client, const Model& global,
                              bool use_translation) {
    DenseMatrix reps = forward_features(global.extractor, client.split.test.features);
    if (use_translation) reps = prbm_translate(reps, client.prbm);
    if (!global.head.layers.empty()) reps = forward_features(global.head, reps);
    return reps;
}

EvaluationReport evaluate(const std::vector<ClientState>& clients,
                          const Model& global, bool use_translation) {
    if (clients.empty()) throw DataError("no clients to evaluate");
    EvaluationReport report;
    std::size_t total_samples = 0;
    std::size_t total_correct = 0;
    double loss_mass = 0.0;
    for (const ClientState& client : clients) {
        const LabeledDataset& test = client.split.test;
        if (test.size() == 0) {
            throw DataError("client " + std::to_string(client.id) +
                            " has an empty test set");
        }
        DenseMatrix logits = forward_logits(
            global.classifier, client_input_reps(client, global, use_translation));
        std::size_t correct = 0;
        for (std::size_t r = 0; r < logits.rows; ++r) {
            const double* row = logits.row(r);
            std::size_t best = 0;
            for (std::size_t c = 1; c < logits.cols; ++c) {
                if (row[c] > row[best]) best = c;
            }
            if (static_cast<int>(best) == test.labels[r]) ++correct;
        }
        const double accuracy =
            static_cast<double>(correct) / static_cast<double>(test.size());
        report.per_client_accuracy[client.id] = accuracy;
        total_correct += correct;
        total_samples += test.size();
        loss_mass += cross_entropy(logits, test.labels) *
                     static_cast<double>(test.size());
    }
    report.weighted_mean_accuracy =
        static_cast<double>(total_correct) / static_cast<double>(total_samples);
    report.mean_test_loss = loss_mass / static_cast<double>(total_samples);
    return report;
}

void column_stats(const DenseMatrix& reps, std::vector<double>& mean,
                  std::vector<double>& var) {
    mean.assign(reps.cols, 0.0);
    var.assign(reps.cols, 0.0);
    for (std::size_t r = 0; r < reps.rows; ++r) {
        const double* row = reps.row(r);
        for (std::size_t k = 0; k < reps.cols; ++k) mean[k] += row[k];
    }
    for (double& m : mean) m /= static_cast<double>(reps.rows);
    for (std::size_t r = 0; r < reps.rows; ++r) {
        const double* row = reps.row(r);
        for (std::size_t k = 0; k < reps.cols; ++k) {
            const double diff = row[k] - mean[k];
            var[k] += diff * diff;
        }
    }
    for (double& v : var) v /= static_cast<double>(reps.rows);
}

void write_rep_rows(std::ofstream& out, const DenseMatrix& reps,
                    const std::vector<int>& labels, std::size_t client_id,
                    const char* level) {
    char buffer[40];
    for (std::size_t r = 0; r < reps.rows; ++r) {
        out << client_id << ',' << labels[r] << ',' << level;
        for (std::size_t k = 0; k < reps.cols; ++k) {
            std::snprintf(buffer, sizeof buffer, "%.15g", reps.at(r, k));
            out << ',' << buffer;
        }
        out << '\n';
    }
}

}  // namespace

EvaluationReport evaluate_personalized(const std::vector<ClientState>& clients,
                                       const Model& global) {
    return evaluate(clients, global, true);
}

EvaluationReport evaluate_global(const std::vector<ClientState>& clients,
                                 const Model& global) {
    return evaluate(clients, global, false);
}

double fisher_ratio(const DenseMatrix& reps_a, const DenseMatrix& reps_b) {
    if (reps_a.rows == 0 || reps_b.rows == 0) {
        throw DataError("fisher_ratio needs non-empty inputs");
    }
    if (reps_a.cols != reps_b.cols) {
        throw ShapeError("fisher_ratio inputs have different widths");
    }
    std::vector<double> mean_a, var_a, mean_b, var_b;
    column_stats(reps_a, mean_a, var_a);
    column_stats(reps_b, mean_b, var_b);

    double best = 0.0;
    for (std::size_t k = 0; k < reps_a.cols; ++k) {
        const double gap = mean_a[k] - mean_b[k];
        const double denom = std::max(var_a[k] + var_b[k], 1e-12);
        best = std::max(best, gap * gap / denom);
    }
    return best;
}

BiasDiagnostic bias_diagnostic(const std::vector<ClientState>& clients,
                               const Model& global) {
    if (clients.empty()) throw DataError("no clients to diagnose");
    std::vector<DenseMatrix> per_client;
    per_client.reserve(clients.size());
    std::size_t total_rows = 0;
    const std::size_t rep_dim = global.rep_dim();
    for (const ClientState& client : clients) {
        if (client.split.test.size() == 0) {
            throw DataError("client " + std::to_string(client.id) +
                            " has an empty test set");
        }
        per_client.push_back(
            forward_features(global.extractor, client.split.test.features));
        total_rows += per_client.back().rows;
    }

    DenseMatrix pooled(total_rows, rep_dim);
    std::size_t row = 0;
    for (const DenseMatrix& reps : per_client) {
        std::copy(reps.values.begin(), reps.values.end(), pooled.row(row));
        row += reps.rows;
    }

    BiasDiagnostic diagnostic;
    double sum = 0.0;
    for (std::size_t i = 0; i < clients.size(); ++i) {
        const double ratio = fisher_ratio(per_client[i], pooled);
        diagnostic.fisher_ratio_per_client[clients[i].id] = ratio;
        sum += ratio;
    }
    diagnostic.mean_fisher_ratio = sum / static_cast<double>(clients.size());
    return diagnostic;
}

void export_representations(const std::vector<ClientState>& clients,
                            const Model& global, bool include_translated,
                            const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);

    out << "client_id,label,level";
    for (std::size_t k = 0; k < global.rep_dim(); ++k) out << ",f" << k;
    out << '\n';

    for (const ClientState& client : clients) {
        DenseMatrix reps =
            forward_features(global.extractor, client.split.test.features);
        write_rep_rows(out, reps, client.split.test.labels, client.id, "zg");
        if (include_translated) {
            DenseMatrix translated = prbm_translate(reps, client.prbm);
            write_rep_rows(out, translated, client.split.test.labels, client.id,
                           "z");
        }
    }
    if (!out) throw IoError("failed writing " + path);
}

}  // namespace fedsim
