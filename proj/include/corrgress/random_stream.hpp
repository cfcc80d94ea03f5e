#pragma once

#include <array>
#include <cstdint>

namespace corrgress {

/// Philox4x32-10 block function: 128-bit counter, 64-bit key.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                         std::array<std::uint32_t, 2> key);

/// Counter-based stream. The (key, stream_id) pair selects an independent sequence and
/// `counter` is the block position inside it, so any state can be recreated from its triple.
class RandomStream {
 public:
  RandomStream() = default;
  RandomStream(std::uint64_t key, std::uint64_t stream_id, std::uint64_t counter = 0)
      : key_(key), stream_id_(stream_id), counter_(counter) {}

  std::uint64_t key() const { return key_; }
  std::uint64_t stream_id() const { return stream_id_; }
  /// Number of 128-bit blocks consumed so far.
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  /// Uniform on the open interval (0, 1).
  double uniform();
  double normal();
  double exponential();

 private:
  std::uint64_t key_ = 0;
  std::uint64_t stream_id_ = 0;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int used_ = 4;
};

/// Packs a chain, a parameter block and a unit into a stream id.
constexpr std::uint64_t make_stream_id(std::uint32_t chain, std::uint32_t block,
                                       std::uint64_t unit) {
  return (std::uint64_t(chain) << 48) ^ (std::uint64_t(block & 0xffffu) << 32) ^
         (unit & 0xffffffffull);
}

}  // namespace corrgress
