#include "mfsmp/rng.hpp"

#include <cmath>

namespace mfsmp {

namespace detail {

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline double to_unit(std::uint64_t h) {
    // 53 mantissa bits, strictly inside (0,1).
    return (static_cast<double>(h >> 11) + 0.5) * 0x1.0p-53;
}

}  // namespace detail

double NoiseField::gaussian(std::size_t step, std::size_t particle, std::size_t coord) const {
    if (!particle_map_.empty()) particle = particle_map_[particle];
    std::uint64_t h = seed_;
    h = detail::mix64(h ^ static_cast<std::uint64_t>(step));
    h = detail::mix64(h ^ static_cast<std::uint64_t>(particle));
    h = detail::mix64(h ^ static_cast<std::uint64_t>(coord));
    std::uint64_t h2 = detail::mix64(h ^ 0xd1b54a32d192ed03ULL);
    double u1 = detail::to_unit(h);
    double u2 = detail::to_unit(h2);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

double NoiseField::increment(std::size_t step, std::size_t particle, std::size_t coord,
                             double dt) const {
    return std::sqrt(dt) * gaussian(step, particle, coord);
}

}  // namespace mfsmp
