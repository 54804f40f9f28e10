#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace stochpc {

/// Seeded random stream. The (seed, label) pair fully determines the draw
/// sequence, so independent consumers can share a seed without sharing state.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::string label) : seed_(seed), label_(std::move(label)) {
        const std::uint64_t h = fnv1a(label_);
        std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                          static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
        engine_.seed(seq);
    }

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }

    /// Student-t with integer `dof` built from normals: Z / sqrt(chi2_dof / dof).
    double student_t(int dof) {
        const double z = normal();
        double chi2 = 0.0;
        for (int i = 0; i < dof; ++i) {
            const double g = normal();
            chi2 += g * g;
        }
        return z / std::sqrt(chi2 / dof);
    }

    std::uint64_t seed() const noexcept { return seed_; }
    const std::string& label() const noexcept { return label_; }

private:
    static std::uint64_t fnv1a(const std::string& s) {
        std::uint64_t h = 1469598103934665603ULL;
        for (unsigned char c : s) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        return h;
    }

    std::uint64_t seed_;
    std::string label_;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

} // namespace stochpc
