#include "corrgress/random_stream.hpp"

#include <cmath>

#include "corrgress/normal.hpp"

namespace corrgress {

namespace {

constexpr std::uint32_t kM0 = 0xD2511F53u;
constexpr std::uint32_t kM1 = 0xCD9E8D57u;
constexpr std::uint32_t kW0 = 0x9E3779B9u;
constexpr std::uint32_t kW1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t p = std::uint64_t(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

}  // namespace

std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                         std::array<std::uint32_t, 2> key) {
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += kW0;
      key[1] += kW1;
    }
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kM0, ctr[0], hi0, lo0);
    mulhilo(kM1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
  return ctr;
}

std::uint64_t RandomStream::next_u64() {
  if (used_ >= 4) {
    block_ = philox4x32({static_cast<std::uint32_t>(counter_),
                         static_cast<std::uint32_t>(counter_ >> 32),
                         static_cast<std::uint32_t>(stream_id_),
                         static_cast<std::uint32_t>(stream_id_ >> 32)},
                        {static_cast<std::uint32_t>(key_), static_cast<std::uint32_t>(key_ >> 32)});
    ++counter_;
    used_ = 0;
  }
  const std::uint64_t v = (std::uint64_t(block_[used_]) << 32) | block_[used_ + 1];
  used_ += 2;
  return v;
}

double RandomStream::uniform() {
  return (double(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double RandomStream::normal() { return norm_quantile(uniform()); }

double RandomStream::exponential() { return -std::log(uniform()); }

}  // namespace corrgress
