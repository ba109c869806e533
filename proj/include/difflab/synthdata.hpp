#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "difflab/rng.hpp"
#include "difflab/tensor.hpp"

namespace difflab {

inline constexpr int kImageSide = 12;
inline constexpr int kImageDim = kImageSide * kImageSide;

// Procedural grayscale images with two independent binary attributes:
//   shape  — 0: square, 1: disc   (centered, size 3-5 px, center jitter 1 px)
//   stripe — 0: absent, 1: present (two-pixel band across the top)
// Pixel masks record where each attribute lives; the stripe mask is the same
// fixed band for every image so "unchanged outside the edit" is measurable
// even on images where the stripe is absent.
struct ShapesDataset {
    Tensor images;  // (n, kImageDim), values in [0,1]
    std::vector<int> shape_label;
    std::vector<int> stripe_label;
    std::vector<std::vector<std::uint8_t>> shape_mask;   // per image, kImageDim flags
    std::vector<std::vector<std::uint8_t>> stripe_mask;  // fixed band, kImageDim flags
    std::uint64_t seed = 0;

    long size() const { return images.defined() ? images.rows() : 0; }
    // 0..3, shape + 2*stripe
    int combo(long i) const {
        return shape_label[static_cast<std::size_t>(i)] +
               2 * stripe_label[static_cast<std::size_t>(i)];
    }
};

// n must be divisible by 4 so every attribute combination occurs equally often.
ShapesDataset gen_shapes(long n, std::uint64_t seed);

// Deterministic stratified split by attribute combination.
// train_frac must lie strictly inside (0, 1).
std::pair<ShapesDataset, ShapesDataset> split(const ShapesDataset& ds,
                                              double train_frac, std::uint64_t seed);

// Isotropic unit-variance Gaussian mixture with means at
// separation * (centered simplex vertices); needs dim >= k and n % k == 0.
struct GmmDataset {
    Tensor points;  // (n, dim)
    std::vector<int> labels;
    int k = 0;
    int dim = 0;
    std::vector<std::vector<double>> means;  // k rows of width dim
    std::uint64_t seed = 0;
};

GmmDataset gen_gmm(long n, int k, int dim, double separation, std::uint64_t seed);

// One PGM per image plus labels.csv with per-image attribute values and
// run-length-encoded masks, and a dataset.meta manifest carrying (n, seed)
// and a content fingerprint.
void dump_shapes(const ShapesDataset& ds, const std::string& dir);

// FNV-1a over the float64 image payload, labels, and masks
std::uint64_t shapes_fingerprint(const ShapesDataset& ds);

// Rebuild the dataset a dump_shapes directory describes: regenerate from the
// recorded (n, seed) and verify the recorded fingerprint before returning.
// Missing files or a fingerprint mismatch raise instead of silently reusing
// stale data.
ShapesDataset load_shapes(const std::string& dir);

// "start:len;start:len;..." over the flattened image, empty string for an
// all-zero mask
std::string mask_rle(const std::vector<std::uint8_t>& mask);

}  // namespace difflab
