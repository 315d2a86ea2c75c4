#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <stdexcept>
#include <string>
#include <string_view>

namespace trace {

constexpr const char* kVersion = "0.1.0";

enum class Status : int {
    ok = 0,
    invalid_argument = 1,
    io = 2,
    format = 3,
    numeric = 4,
    gate = 5,      // a quality gate (separability, sample accuracy) failed
    state = 6,     // call sequence violation (missing artifact, wrong phase)
    internal = 7,
};

const char* status_name(Status s);

// All core errors are thrown as TraceError and surface as status codes at the
// C boundary.
struct TraceError : std::runtime_error {
    Status status;
    TraceError(Status s, const std::string& msg) : std::runtime_error(msg), status(s) {}
};

[[noreturn]] inline void fail(Status s, const std::string& msg) { throw TraceError(s, msg); }

inline void require(bool cond, Status s, const std::string& msg) {
    if (!cond) fail(s, msg);
}

// FNV-1a, used for config hashes, rng stream derivation and manifest digests.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const uint8_t* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < n; i++) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}
inline uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

// Round a double to the nearest binary16-representable value (ties to even),
// returned as a double. Half-grid values are exactly representable in float,
// so anything snapped here survives an f32 file round trip bit-for-bit.
inline double snap_half(double x) {
    float f = static_cast<float>(x);
    uint32_t bits = std::bit_cast<uint32_t>(f);
    uint32_t sign = bits & 0x80000000u;
    int32_t exp = int32_t((bits >> 23) & 0xff) - 127;
    uint32_t man = bits & 0x7fffffu;
    if (exp == 128) return x;  // inf/nan pass through, caller checks finiteness
    if (exp >= -14) {
        if (exp > 15) return std::bit_cast<float>(sign | 0x477fe000u);  // clamp to +-65504
        // normal half: keep 10 mantissa bits, round to nearest even
        uint32_t keep = man >> 13, rest = man & 0x1fffu;
        if (rest > 0x1000u || (rest == 0x1000u && (keep & 1u))) keep++;
        if (keep >> 10) {  // mantissa overflow bumps the exponent
            keep = 0;
            if (++exp > 15) return std::bit_cast<float>(sign | 0x477fe000u);
        }
        return std::bit_cast<float>(sign | (uint32_t(exp + 127) << 23) | (keep << 13));
    }
    if (exp < -25) return std::bit_cast<float>(sign);  // underflow to signed zero
    // subnormal half: grid spacing 2^-24
    uint32_t s = uint32_t(-exp - 1);  // 14..24
    uint32_t full = 0x800000u | man;
    uint32_t keep = full >> s, rest = full & ((1u << s) - 1);
    uint32_t half_ulp = 1u << (s - 1);
    if (rest > half_ulp || (rest == half_ulp && (keep & 1u))) keep++;
    float out = static_cast<float>(keep) * 5.9604644775390625e-08f;  // 2^-24
    return sign ? -out : out;
}

// f32 rounding helper for values persisted to disk.
inline double snap_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

}  // namespace trace
