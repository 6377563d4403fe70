#pragma once

#include <cstdint>
#include <random>

namespace fedsim {

// Independent deterministic RNG streams. Every consumer derives its own
// engine from (seed, stream, a, b) so that concurrent client training,
// partitioning and sampling never share generator state. Client training
// streams are keyed by (run seed, client id, iteration), which makes
// parallel execution order-independent.
enum class RngStream : std::uint64_t {
    kModelInit = 1,
    kClientSampling = 2,
    kClientTraining = 3,
    kDataGeneration = 4,
    kPartitioning = 5,
    kTrainTestSplit = 6,
};

std::mt19937_64 make_rng(std::uint64_t seed, RngStream stream,
                         std::uint64_t a = 0, std::uint64_t b = 0);

}  // namespace fedsim
