#include "fedsim/matrix.hpp"

#include <cmath>

namespace fedsim {

bool DenseMatrix::all_finite() const {
    return fedsim::all_finite(values);
}

bool all_finite(const std::vector<double>& values) {
    for (double v : values) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

}  // namespace fedsim
