#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace diffact {

inline constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ull;

// 64-bit FNV-1a. Used for stream names and config hashing.
constexpr std::uint64_t fnv1a(std::string_view s, std::uint64_t h = kFnvOffset) {
    for (char c : s) {
        h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
        h *= kFnvPrime;
    }
    return h;
}

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Stateless counter-based word: same (key, counter) gives the same value on
// every platform. All randomness in the project bottoms out here.
constexpr std::uint64_t counter_word(std::uint64_t key, std::uint64_t counter) {
    return mix64(key ^ mix64(counter + 0x632be59bd9b4e019ull));
}

// Top 53 bits -> [0, 1).
constexpr double unit_double(std::uint64_t bits) {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

// Derive a named child seed from a root seed, e.g. derive_seed(root, "train").
constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view name) {
    return mix64(root ^ fnv1a(name));
}

constexpr std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) {
    return counter_word(root, index);
}

// Counter-based generator: a fixed key plus an incrementing counter. Cheap to
// fork, no hidden state beyond (key, counter).
class Rng {
public:
    explicit Rng(std::uint64_t key) : key_(key) {}

    static Rng substream(std::uint64_t root, std::string_view name) {
        return Rng(derive_seed(root, name));
    }

    // Independent child stream; does not disturb this stream's counter.
    Rng fork(std::uint64_t index) const { return Rng(counter_word(key_, ~index)); }

    std::uint64_t next_u64() { return counter_word(key_, counter_++); }

    double uniform() { return unit_double(next_u64()); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased-enough bounded draw (Lemire multiply-shift).
    std::uint64_t uniform_int(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::uint64_t key() const { return key_; }
    std::uint64_t counter() const { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace diffact
