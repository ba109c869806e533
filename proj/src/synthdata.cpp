#include "difflab/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "difflab/config.hpp"
#include "difflab/image_io.hpp"
#include "difflab/serialize.hpp"

namespace difflab {

namespace {

ShapesDataset take_rows(const ShapesDataset& ds, const std::vector<long>& idx) {
    ShapesDataset out;
    out.seed = ds.seed;
    out.images = Tensor::zeros({static_cast<long>(idx.size()), kImageDim});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const std::size_t src = static_cast<std::size_t>(idx[i]);
        for (int j = 0; j < kImageDim; ++j) {
            out.images.values()[i * kImageDim + j] = ds.images.at(idx[i], j);
        }
        out.shape_label.push_back(ds.shape_label[src]);
        out.stripe_label.push_back(ds.stripe_label[src]);
        out.shape_mask.push_back(ds.shape_mask[src]);
        out.stripe_mask.push_back(ds.stripe_mask[src]);
    }
    return out;
}

}  // namespace

ShapesDataset gen_shapes(long n, std::uint64_t seed) {
    if (n < 4 || n % 4 != 0) {
        throw TensorError("gen_shapes: n must be a positive multiple of 4 "
                          "(attribute combinations), got " + std::to_string(n));
    }
    Rng rng(seed);
    ShapesDataset ds;
    ds.seed = seed;
    ds.images = Tensor::zeros({n, kImageDim});

    std::vector<std::uint8_t> band(kImageDim, 0);
    for (int c = 0; c < 2 * kImageSide; ++c) band[static_cast<std::size_t>(c)] = 1;

    for (long i = 0; i < n; ++i) {
        const int shape = static_cast<int>(i % 2);
        const int stripe = static_cast<int>((i / 2) % 2);
        ds.shape_label.push_back(shape);
        ds.stripe_label.push_back(stripe);
        ds.stripe_mask.push_back(band);

        const double bg = rng.uniform(0.0, 0.1);
        const double fg = rng.uniform(0.7, 1.0);
        const int cx = kImageSide / 2 + static_cast<int>(rng.randint(-1, 2));
        const int cy = kImageSide / 2 + static_cast<int>(rng.randint(-1, 2));
        const int size = static_cast<int>(rng.randint(3, 6));

        double* px = ds.images.values().data() + i * kImageDim;
        std::fill(px, px + kImageDim, bg);
        std::vector<std::uint8_t> smask(kImageDim, 0);
        if (shape == 0) {
            // square of side `size`, rows [cy - size/2, cy - size/2 + size)
            const int r0 = cy - size / 2;
            const int c0 = cx - size / 2;
            for (int r = r0; r < r0 + size; ++r) {
                for (int c = c0; c < c0 + size; ++c) {
                    px[r * kImageSide + c] = fg;
                    smask[static_cast<std::size_t>(r * kImageSide + c)] = 1;
                }
            }
        } else {
            // Disc: lattice offsets within radius (size+1)/2 of the center. The
            // half-pixel inflation matters: with radius size/2 a size-3 disc
            // rasterizes to exactly the 3x3 square block, which would make the
            // shape attribute undecidable for a third of the images. With the
            // inflated radius every disc footprint (13/21/29 px) differs from
            // every square footprint (9/16/25 px).
            const double r2 = 0.25 * (size + 1) * (size + 1);
            for (int r = 0; r < kImageSide; ++r) {
                for (int c = 0; c < kImageSide; ++c) {
                    const double dr = r - cy;
                    const double dc = c - cx;
                    if (dr * dr + dc * dc <= r2) {
                        px[r * kImageSide + c] = fg;
                        smask[static_cast<std::size_t>(r * kImageSide + c)] = 1;
                    }
                }
            }
        }
        if (stripe == 1) {
            for (int j = 0; j < 2 * kImageSide; ++j) px[j] = fg;
        }
        ds.shape_mask.push_back(std::move(smask));
    }
    return ds;
}

std::pair<ShapesDataset, ShapesDataset> split(const ShapesDataset& ds,
                                              double train_frac, std::uint64_t seed) {
    if (!(train_frac > 0.0 && train_frac < 1.0)) {
        throw TensorError("split: train_frac must lie in (0, 1), got " +
                          std::to_string(train_frac));
    }
    Rng rng(seed);
    std::vector<long> train_idx;
    std::vector<long> held_idx;
    for (int combo = 0; combo < 4; ++combo) {
        std::vector<long> group;
        for (long i = 0; i < ds.size(); ++i) {
            if (ds.combo(i) == combo) group.push_back(i);
        }
        rng.shuffle(group);
        const long take = std::lround(train_frac * static_cast<double>(group.size()));
        for (std::size_t j = 0; j < group.size(); ++j) {
            (static_cast<long>(j) < take ? train_idx : held_idx).push_back(group[j]);
        }
    }
    // keep original dataset order inside each part
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(held_idx.begin(), held_idx.end());
    return {take_rows(ds, train_idx), take_rows(ds, held_idx)};
}

GmmDataset gen_gmm(long n, int k, int dim, double separation, std::uint64_t seed) {
    if (k < 2) throw TensorError("gen_gmm: need k >= 2, got " + std::to_string(k));
    if (dim < k) {
        throw TensorError("gen_gmm: need dim >= k for simplex means, got dim " +
                          std::to_string(dim) + ", k " + std::to_string(k));
    }
    if (n < k || n % k != 0) {
        throw TensorError("gen_gmm: n must be a positive multiple of k, got " +
                          std::to_string(n));
    }
    GmmDataset ds;
    ds.k = k;
    ds.dim = dim;
    ds.seed = seed;

    // centered simplex vertices e_a - 1/k, normalized then scaled; pairwise
    // cosine is exactly -1/(k-1)
    for (int a = 0; a < k; ++a) {
        std::vector<double> m(static_cast<std::size_t>(dim), 0.0);
        for (int j = 0; j < k; ++j) {
            m[static_cast<std::size_t>(j)] = (j == a ? 1.0 : 0.0) - 1.0 / k;
        }
        double norm = 0.0;
        for (double v : m) norm += v * v;
        norm = std::sqrt(norm);
        for (double& v : m) v = separation * v / norm;
        ds.means.push_back(std::move(m));
    }

    Rng rng(seed);
    ds.points = Tensor::zeros({n, dim});
    for (long i = 0; i < n; ++i) {
        const int a = static_cast<int>(i % k);
        ds.labels.push_back(a);
        for (int j = 0; j < dim; ++j) {
            ds.points.values()[static_cast<std::size_t>(i * dim + j)] =
                ds.means[static_cast<std::size_t>(a)][static_cast<std::size_t>(j)] +
                rng.normal();
        }
    }
    return ds;
}

std::string mask_rle(const std::vector<std::uint8_t>& mask) {
    std::string out;
    std::size_t i = 0;
    while (i < mask.size()) {
        if (!mask[i]) {
            ++i;
            continue;
        }
        std::size_t len = 0;
        const std::size_t start = i;
        while (i < mask.size() && mask[i]) {
            ++len;
            ++i;
        }
        if (!out.empty()) out += ';';
        out += std::to_string(start) + ":" + std::to_string(len);
    }
    return out;
}

void dump_shapes(const ShapesDataset& ds, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream csv(dir + "/labels.csv");
    if (!csv) throw TensorError("dump_shapes: cannot write " + dir + "/labels.csv");
    csv << "filename,shape,stripe,shape_mask,stripe_mask\n";
    for (long i = 0; i < ds.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "img_%05ld.pgm", i);
        std::vector<double> pixels(ds.images.values().begin() + i * kImageDim,
                                   ds.images.values().begin() + (i + 1) * kImageDim);
        write_pgm(dir + "/" + name, pixels, kImageSide, kImageSide);
        csv << name << ',' << ds.shape_label[static_cast<std::size_t>(i)] << ','
            << ds.stripe_label[static_cast<std::size_t>(i)] << ','
            << mask_rle(ds.shape_mask[static_cast<std::size_t>(i)]) << ','
            << mask_rle(ds.stripe_mask[static_cast<std::size_t>(i)]) << '\n';
    }
    if (!csv) throw TensorError("dump_shapes: write failed in " + dir);

    // machine-readable identity: the exact float64 content is reproducible
    // from (n, seed), and the fingerprint pins it against tampering
    Config meta;
    meta.set_str("dataset", "kind", "shapes");
    meta.set_int("dataset", "n", ds.size());
    meta.set_int("dataset", "seed", static_cast<long>(ds.seed));
    meta.set_str("dataset", "fingerprint", fingerprint_hex(shapes_fingerprint(ds)));
    meta.save(dir + "/dataset.meta");
}

std::uint64_t shapes_fingerprint(const ShapesDataset& ds) {
    std::vector<std::uint8_t> buf;
    const std::vector<double>& v = ds.images.values();
    buf.resize(v.size() * sizeof(double));
    if (!v.empty()) std::memcpy(buf.data(), v.data(), buf.size());
    for (long i = 0; i < ds.size(); ++i) {
        buf.push_back(static_cast<std::uint8_t>(ds.shape_label[static_cast<std::size_t>(i)]));
        buf.push_back(static_cast<std::uint8_t>(ds.stripe_label[static_cast<std::size_t>(i)]));
        const auto& sm = ds.shape_mask[static_cast<std::size_t>(i)];
        const auto& tm = ds.stripe_mask[static_cast<std::size_t>(i)];
        buf.insert(buf.end(), sm.begin(), sm.end());
        buf.insert(buf.end(), tm.begin(), tm.end());
    }
    return fingerprint_bytes(buf.data(), buf.size());
}

ShapesDataset load_shapes(const std::string& dir) {
    const std::string meta_path = dir + "/dataset.meta";
    if (!std::filesystem::exists(meta_path)) {
        throw TensorError("load_shapes: missing artifact " + meta_path);
    }
    if (!std::filesystem::exists(dir + "/labels.csv")) {
        throw TensorError("load_shapes: missing artifact " + dir + "/labels.csv");
    }
    Config meta = Config::load(meta_path);
    if (meta.get_str("dataset", "kind") != "shapes") {
        throw TensorError("load_shapes: " + meta_path + " does not describe a shapes dataset");
    }
    ShapesDataset ds = gen_shapes(meta.get_int("dataset", "n"),
                                  static_cast<std::uint64_t>(meta.get_int("dataset", "seed")));
    const std::string want = meta.get_str("dataset", "fingerprint");
    const std::string got = fingerprint_hex(shapes_fingerprint(ds));
    if (want != got) {
        throw TensorError("load_shapes: fingerprint mismatch for " + dir +
                          " (recorded " + want + ", regenerated " + got +
                          "); refusing silent reuse");
    }
    return ds;
}

}  // namespace difflab
