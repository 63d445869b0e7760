#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace cloze_debias {

// ---------------------------------------------------------------------------
// Errors

struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct PropensityDomainError : std::domain_error {
    using std::domain_error::domain_error;
};

struct SamplingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ModeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG with substreams.
//
// All stochastic operations take an explicit seed and derive independent
// child streams with substream(). Draws go through our own distribution
// code on top of mt19937_64, so results are reproducible across standard
// library implementations.

std::uint64_t splitmix64(std::uint64_t x);

class Rng {
public:
    explicit Rng(std::uint64_t seed)
        : seed_(seed), engine_(splitmix64(seed ^ 0x6a09e667f3bcc909ull)) {}

    // Independent stream derived from (seed, stream id); does not disturb
    // or depend on this stream's position.
    Rng substream(std::uint64_t stream) const {
        return Rng(splitmix64(seed_ + splitmix64(stream + 0x9e3779b97f4a7c15ull)));
    }

    std::uint64_t next_u64() { return engine_(); }

    // [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n);

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller, one variate per call.
    double normal(double mean, double stddev);

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Dense row-major containers.

template <typename T>
struct Grid {
    std::size_t rows = 0, cols = 0;
    std::vector<T> v;

    Grid() = default;
    Grid(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), v(r * c, fill) {}

    T& at(std::size_t r, std::size_t c) { return v[r * cols + c]; }
    const T& at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
    T* row(std::size_t r) { return v.data() + r * cols; }
    const T* row(std::size_t r) const { return v.data() + r * cols; }

    bool operator==(const Grid& o) const { return rows == o.rows && cols == o.cols && v == o.v; }
};

using GridD = Grid<double>;
using GridI = Grid<std::int32_t>;
using GridU8 = Grid<std::uint8_t>;

// Dense (sequence, item, timestep) tensor, row-major in that order.
struct Tensor3 {
    std::size_t seqs = 0, items = 0, steps = 0;
    std::vector<double> v;

    Tensor3() = default;
    Tensor3(std::size_t s, std::size_t i, std::size_t t, double fill = 0.0)
        : seqs(s), items(i), steps(t), v(s * i * t, fill) {}

    double& at(std::size_t s, std::size_t i, std::size_t t) {
        return v[(s * items + i) * steps + t];
    }
    double at(std::size_t s, std::size_t i, std::size_t t) const {
        return v[(s * items + i) * steps + t];
    }
    std::size_t size() const { return v.size(); }
};

// ---------------------------------------------------------------------------
// Misc

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull);
std::uint64_t fnv1a64(const std::string& s);

// Shortest decimal form that round-trips a double exactly.
std::string format_double(double x);

// Static-partition parallel map: calls fn(begin, end) on disjoint index
// ranges. Deterministic for any thread count as long as fn(i) only touches
// slot i of its outputs.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace cloze_debias
