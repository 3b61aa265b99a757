#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace tclmarket {

// Error hierarchy. Every throwing operation names the failing quantity in
// the message so CLI diagnostics stay useful.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SingularMatrix : Error { using Error::Error; };
struct NonConvergence : Error { using Error::Error; };
struct DegeneratePrefs : Error { using Error::Error; };
struct Infeasible : Error { using Error::Error; };
struct InfeasibleCapacity : Error { using Error::Error; };
struct NumericalBreakdown : Error { using Error::Error; };
struct SingularPrediction : Error { using Error::Error; };
struct RankDeficient : Error { using Error::Error; };
struct SchemaError : Error { using Error::Error; };
struct DataGap : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };

// Deterministic RNG wrapper. The mapping from raw 64-bit draws to doubles is
// spelled out here instead of relying on std::uniform_real_distribution,
// whose output is implementation-defined; identical seeds must give
// bit-identical populations across toolchains.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t raw() { return gen_(); }

    // uniform in [0, 1) with 53-bit resolution
    double u01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

    // Box-Muller; one value per call keeps the draw order obvious.
    double normal() {
        double u1 = u01();
        double u2 = u01();
        while (u1 <= 0.0) u1 = u01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // uniform integer in [lo, hi]
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1u;
        return lo + static_cast<std::int64_t>(gen_() % span);
    }

    bool bernoulli(double p) { return u01() < p; }

  private:
    std::mt19937_64 gen_;
};

inline bool nearly_equal(double a, double b, double tol) { return std::fabs(a - b) <= tol; }

} // namespace tclmarket
