#include "difflab/serialize.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace difflab {

namespace {

constexpr char kMagic[8] = {'D', 'L', 'A', 'B', 'P', 'A', 'R', 'M'};
constexpr uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little ||
                  std::endian::native == std::endian::big,
              "mixed-endian platforms unsupported");

template <typename T>
void put(std::string& buf, T v) {
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        buf.append(bytes.data(), sizeof(T));
    } else {
        buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
    }
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;
    const std::string& path;

    template <typename T>
    T get() {
        if (pos + sizeof(T) > buf.size())
            throw TensorError("load_params: truncated file " + path);
        T v;
        std::memcpy(&v, buf.data() + pos, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) {
            auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
            std::reverse(bytes.begin(), bytes.end());
            v = std::bit_cast<T>(bytes);
        }
        pos += sizeof(T);
        return v;
    }

    std::string get_str(size_t len) {
        if (pos + len > buf.size())
            throw TensorError("load_params: truncated file " + path);
        std::string s = buf.substr(pos, len);
        pos += len;
        return s;
    }
};

}  // namespace

void save_params(const std::string& path, const NamedParams& params) {
    std::string buf;
    buf.append(kMagic, sizeof(kMagic));
    put<uint32_t>(buf, kVersion);
    put<uint64_t>(buf, params.size());
    for (const auto& [name, tensor] : params) {
        put<uint32_t>(buf, static_cast<uint32_t>(name.size()));
        buf.append(name);
        const Shape& shape = tensor.shape();
        put<uint32_t>(buf, static_cast<uint32_t>(shape.size()));
        for (long d : shape) put<uint64_t>(buf, static_cast<uint64_t>(d));
        for (double v : tensor.values()) put<double>(buf, v);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw TensorError("save_params: cannot open " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw TensorError("save_params: write failed for " + path);
}

NamedParams load_params(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw TensorError("load_params: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Reader r{buf, 0, path};
    if (r.get_str(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic)))
        throw TensorError("load_params: bad magic in " + path);
    uint32_t version = r.get<uint32_t>();
    if (version != kVersion)
        throw TensorError("load_params: unsupported version " + std::to_string(version) +
                          " in " + path);
    uint64_t count = r.get<uint64_t>();
    NamedParams params;
    params.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        std::string name = r.get_str(r.get<uint32_t>());
        uint32_t rank = r.get<uint32_t>();
        Shape shape(rank);
        for (uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<long>(r.get<uint64_t>());
        std::vector<double> values(static_cast<size_t>(shape_numel(shape)));
        for (double& v : values) v = r.get<double>();
        params.emplace_back(std::move(name), Tensor::from(shape, std::move(values)));
    }
    return params;
}

uint64_t fingerprint_bytes(const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t fingerprint_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw TensorError("fingerprint: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return fingerprint_bytes(buf.data(), buf.size());
}

std::string fingerprint_hex(uint64_t fp) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[fp & 0xf];
        fp >>= 4;
    }
    return s;
}

}  // namespace difflab
