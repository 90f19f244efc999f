#include "hstgcn/rng.hpp"

namespace hstgcn {

std::uint64_t derive_seed(std::uint64_t root, std::string_view stage, std::uint64_t counter) {
  // FNV-1a over the stage name, then mixed with the root and counter.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : stage) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix64(mix64(root ^ h) + counter);
}

}  // namespace hstgcn
