#include "difflab/image_io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace difflab {

namespace {

unsigned char to_byte(double v) {
    if (v < 0.0) v = 0.0;
    if (v > 1.0) v = 1.0;
    return static_cast<unsigned char>(std::lround(v * 255.0));
}

}  // namespace

void write_pgm(const std::string& path, const std::vector<double>& pixels, int rows,
               int cols) {
    if (rows < 1 || cols < 1 ||
        pixels.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)) {
        throw TensorError("write_pgm: " + std::to_string(pixels.size()) +
                          " pixels for " + std::to_string(rows) + "x" +
                          std::to_string(cols));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw TensorError("write_pgm: cannot open " + path);
    out << "P5\n" << cols << ' ' << rows << "\n255\n";
    std::vector<unsigned char> bytes(pixels.size());
    for (std::size_t i = 0; i < pixels.size(); ++i) bytes[i] = to_byte(pixels[i]);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw TensorError("write_pgm: write failed for " + path);
}

std::vector<double> read_pgm(const std::string& path, int& rows, int& cols) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw TensorError("read_pgm: cannot open " + path);
    std::string magic;
    int maxval = 0;
    in >> magic >> cols >> rows >> maxval;
    if (magic != "P5" || rows < 1 || cols < 1 || maxval != 255) {
        throw TensorError("read_pgm: " + path + " is not an 8-bit P5 graymap");
    }
    in.get();  // single whitespace after the header
    std::vector<unsigned char> bytes(static_cast<std::size_t>(rows) *
                                     static_cast<std::size_t>(cols));
    in.read(reinterpret_cast<char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!in) throw TensorError("read_pgm: truncated pixel data in " + path);
    std::vector<double> pixels(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        pixels[i] = static_cast<double>(bytes[i]) / 255.0;
    }
    return pixels;
}

void write_image_strip(const std::string& path, const Tensor& images, int side) {
    const long n = images.rows();
    if (n < 1 || images.cols() != static_cast<long>(side) * side) {
        throw TensorError("write_image_strip: rows of width " +
                          std::to_string(images.cols()) + " are not " +
                          std::to_string(side) + "x" + std::to_string(side) +
                          " images");
    }
    const int out_cols = static_cast<int>(n) * (side + 1) - 1;
    std::vector<double> canvas(static_cast<std::size_t>(side) * out_cols, 1.0);
    for (long i = 0; i < n; ++i) {
        for (int r = 0; r < side; ++r) {
            for (int c = 0; c < side; ++c) {
                canvas[static_cast<std::size_t>(r) * out_cols +
                       static_cast<std::size_t>(i) * (side + 1) + c] =
                    images.at(i, r * side + c);
            }
        }
    }
    write_pgm(path, canvas, side, out_cols);
}

}  // namespace difflab
