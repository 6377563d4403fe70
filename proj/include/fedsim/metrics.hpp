#pragma once

#include <map>
#include <string>
#include <vector>

#include "fedsim/federation.hpp"
#include "fedsim/matrix.hpp"

namespace fedsim {

struct EvaluationReport {
    std::map<std::size_t, double> per_client_accuracy;
    double weighted_mean_accuracy = 0.0;   // weighted by test-set sizes
    double mean_test_loss = 0.0;
};

struct BiasDiagnostic {
    std::map<std::size_t, double> fisher_ratio_per_client;
    double mean_fisher_ratio = 0.0;
};

// Personalized model: global extractor, the client's translation vector,
// global classifier side. Argmax accuracy on each client's own test set.
EvaluationReport evaluate_personalized(const std::vector<ClientState>& clients,
                                       const Model& global);

// Same evaluation with the translation omitted (plain global model).
EvaluationReport evaluate_global(const std::vector<ClientState>& clients,
                                 const Model& global);

// max over dimensions of squared mean difference over summed population
// variances. The denominator is floored at 1e-12 per dimension.
double fisher_ratio(const DenseMatrix& reps_a, const DenseMatrix& reps_b);

// Fisher ratio of each client's representation cloud (extractor output on
// its test set) against the pooled all-client cloud. Lower means less
// client-discriminative representations.
BiasDiagnostic bias_diagnostic(const std::vector<ClientState>& clients,
                               const Model& global);

// CSV rows: client_id, label, level in {zg, z}, then the feature columns.
// The translated level is emitted only when requested (runs without a
// translation have z identical to zg).
void export_representations(const std::vector<ClientState>& clients,
                            const Model& global, bool include_translated,
                            const std::string& path);

}  // namespace fedsim
