#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace mfsmp {

/// Counter-based Gaussian source keyed by (seed, step, particle, coordinate).
/// Every access recomputes the same value, so the increments behave like a
/// stored noise array without the storage, and coupled simulations that share
/// a NoiseField see identical Brownian paths (common random numbers).
///
/// An optional particle remap substitutes increments of another particle index;
/// it exists so tests can permute the noise without rerunning the generator.
class NoiseField {
public:
    NoiseField() = default;
    NoiseField(std::uint64_t seed, std::size_t steps, std::size_t particles, std::size_t dim)
        : seed_(seed), steps_(steps), particles_(particles), dim_(dim) {}

    std::uint64_t seed() const { return seed_; }
    std::size_t steps() const { return steps_; }
    std::size_t particles() const { return particles_; }
    std::size_t dim() const { return dim_; }

    /// Standard normal draw for (step, particle, coord).
    double gaussian(std::size_t step, std::size_t particle, std::size_t coord) const;

    /// Brownian increment over a step of length dt.
    double increment(std::size_t step, std::size_t particle, std::size_t coord, double dt) const;

    void set_particle_map(std::vector<std::uint32_t> map) { particle_map_ = std::move(map); }
    const std::vector<std::uint32_t>& particle_map() const { return particle_map_; }

private:
    std::uint64_t seed_ = 0;
    std::size_t steps_ = 0;
    std::size_t particles_ = 0;
    std::size_t dim_ = 0;
    std::vector<std::uint32_t> particle_map_;
};

namespace detail {
std::uint64_t mix64(std::uint64_t x);
}

}  // namespace mfsmp
