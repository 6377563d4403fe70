#include "fedsim/rng.hpp"

namespace fedsim {

std::mt19937_64 make_rng(std::uint64_t seed, RngStream stream,
                         std::uint64_t a, std::uint64_t b) {
    const std::uint64_t tag = static_cast<std::uint64_t>(stream);
    std::seed_seq seq{
        static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
        static_cast<std::uint32_t>(tag),  static_cast<std::uint32_t>(tag >> 32),
        static_cast<std::uint32_t>(a),    static_cast<std::uint32_t>(a >> 32),
        static_cast<std::uint32_t>(b),    static_cast<std::uint32_t>(b >> 32),
    };
    return std::mt19937_64(seq);
}

}  // namespace fedsim
