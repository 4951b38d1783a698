#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "seqscript/tensor.hpp"

namespace seqscript {

// Binary PGM (P5), maxval 255. Values in [0,1] quantize as round(255*x), so
// a write/read round trip moves a pixel by at most 1/510.
std::vector<std::uint8_t> write_pgm(const Tensor& image);
Tensor read_pgm(const std::vector<std::uint8_t>& bytes);

void write_pgm_file(const Tensor& image, const std::string& path);
Tensor read_pgm_file(const std::string& path);

}  // namespace seqscript
