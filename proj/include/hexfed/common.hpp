#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace hexfed {

// Bad function arguments or malformed data discovered at runtime.
struct InvalidInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration (bad thresholds, empty profile list, unknown pipeline).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite value produced where a finite one is required.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed file content; message carries the line number when known.
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed and up to three
// stream coordinates (client id, round, purpose tag ...). Every random
// choice in the project is keyed this way so that reruns of the same
// config reproduce bit-identical results regardless of execution order.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a = 0,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t s = splitmix64(base ^ 0x8f1bbcdc00000000ULL);
    s = splitmix64(s ^ splitmix64(a));
    s = splitmix64(s ^ splitmix64(b));
    s = splitmix64(s ^ splitmix64(c));
    return s;
}

inline Rng make_rng(std::uint64_t base, std::uint64_t a = 0, std::uint64_t b = 0,
                    std::uint64_t c = 0) {
    return Rng(derive_seed(base, a, b, c));
}

}  // namespace hexfed
