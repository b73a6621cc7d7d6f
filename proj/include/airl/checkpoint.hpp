#pragma once
//
// Parameter checkpoint file, little-endian throughout:
//
//   magic    8 bytes  "AIRLCKPT"
//   version  u32      1
//   count    u32      number of entries
//   entry    repeated `count` times:
//     name_len u32, name bytes (UTF-8, no terminator)
//     rank     u32, dims u64 x rank
//     values   f64 x prod(dims), row-major
//
// Values are stored as raw IEEE-754 bit patterns so a write/read cycle is
// bit-exact.
//

#include "airl/tensor.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace airl {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;

  bool operator==(const NamedArray&) const = default;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'A', 'I', 'R', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& arrays);
std::vector<NamedArray> read_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const std::vector<NamedArray>& arrays);
std::vector<NamedArray> decode_checkpoint(const std::string& bytes);

}  // namespace airl
