#pragma once

#include <string>
#include <vector>

#include "difflab/tensor.hpp"

namespace difflab {

// Binary PGM (P5, maxval 255). Values are clamped to [0,1] and rounded.
void write_pgm(const std::string& path, const std::vector<double>& pixels, int rows,
               int cols);

// Reads a P5 PGM back into [0,1] doubles; sets rows/cols.
std::vector<double> read_pgm(const std::string& path, int& rows, int& cols);

// Lays out equal-sized images (rows of a (n, side*side) tensor) left to right
// in a single strip with a 1-pixel separator, then writes one PGM.
void write_image_strip(const std::string& path, const Tensor& images, int side);

}  // namespace difflab
