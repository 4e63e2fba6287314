#pragma once

#include "esr/grad/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace esr::lm {

/// Named tensors plus the run coordinates needed to resume.
struct Checkpoint {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::map<std::string, grad::Matrix> tensors;
};

/// Text header ("esr-checkpoint 1", seed, step, one "name rows cols" line per tensor,
/// "data") followed by the raw little-endian doubles in header order. Byte-stable.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// IoError when unreadable or truncated, ConfigError on a bad header.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace esr::lm
