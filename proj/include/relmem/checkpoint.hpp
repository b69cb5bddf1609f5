#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "relmem/common.hpp"
#include "relmem/tensor.hpp"

namespace relmem {

// Flat binary tensor container. Layout: magic "RELMEM01", version u32, then
// one record per tensor: name length (u32) + UTF-8 name, rank (u64), dims
// (u64 each), values (f64 each). All integers and floats little-endian.
// Records run to end of file; names are unique within a file.

inline constexpr char kCheckpointMagic[8] = {'R', 'E', 'L', 'M', 'E', 'M', '0', '1'};
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void write_u32(std::ostream& os, uint32_t x) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(x >> (8 * i));
    write_bytes(os, b, 4);
}

inline void write_u64(std::ostream& os, uint64_t x) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(x >> (8 * i));
    write_bytes(os, b, 8);
}

inline void write_f64(std::ostream& os, double x) { write_u64(os, std::bit_cast<uint64_t>(x)); }

inline bool read_bytes(std::istream& is, void* p, size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    return static_cast<size_t>(is.gcount()) == n;
}

inline uint32_t read_u32(std::istream& is, const std::string& path) {
    unsigned char b[4];
    check(read_bytes(is, b, 4), path, ": truncated file");
    uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= static_cast<uint32_t>(b[i]) << (8 * i);
    return x;
}

inline uint64_t read_u64(std::istream& is, const std::string& path) {
    unsigned char b[8];
    check(read_bytes(is, b, 8), path, ": truncated file");
    uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= static_cast<uint64_t>(b[i]) << (8 * i);
    return x;
}

inline double read_f64(std::istream& is, const std::string& path) {
    return std::bit_cast<double>(read_u64(is, path));
}

}  // namespace detail

class Checkpoint {
  public:
    void put(std::string name, Tensor t) {
        check(!name.empty(), "checkpoint: empty tensor name");
        check(!has(name), "checkpoint: duplicate tensor name '", name, "'");
        t.set_requires_grad(false);
        items_.emplace_back(std::move(name), std::move(t));
    }

    bool has(const std::string& name) const { return find(name) != nullptr; }

    const Tensor& get(const std::string& name) const {
        const Tensor* t = find(name);
        if (!t) fail("checkpoint: no tensor named '", name, "'");
        return *t;
    }

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return items_; }

    // Names carrying the given prefix, prefix stripped, in file order.
    std::vector<std::string> names_under(const std::string& prefix) const {
        std::vector<std::string> out;
        for (const auto& [name, t] : items_)
            if (name.rfind(prefix, 0) == 0) out.push_back(name.substr(prefix.size()));
        return out;
    }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        check(os.good(), "checkpoint: cannot open '", path, "' for writing");
        detail::write_bytes(os, kCheckpointMagic, sizeof(kCheckpointMagic));
        detail::write_u32(os, kCheckpointVersion);
        for (const auto& [name, t] : items_) {
            detail::write_u32(os, static_cast<uint32_t>(name.size()));
            detail::write_bytes(os, name.data(), name.size());
            detail::write_u64(os, t.shape.size());
            for (int d : t.shape) detail::write_u64(os, static_cast<uint64_t>(d));
            for (double v : t.values) detail::write_f64(os, v);
        }
        check(os.good(), "checkpoint: write to '", path, "' failed");
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        check(is.good(), "checkpoint: cannot open '", path, "'");
        char magic[8];
        check(detail::read_bytes(is, magic, 8), path, ": truncated file");
        check(std::equal(magic, magic + 8, kCheckpointMagic), path,
              ": not a RELMEM01 checkpoint");
        uint32_t version = detail::read_u32(is, path);
        check(version == kCheckpointVersion, path, ": unsupported checkpoint version ", version);
        Checkpoint cp;
        while (true) {
            if (is.peek() == std::ifstream::traits_type::eof()) break;
            uint32_t name_len = detail::read_u32(is, path);
            check(name_len > 0 && name_len < (1u << 20), path, ": implausible name length ",
                  name_len);
            std::string name(name_len, '\0');
            check(detail::read_bytes(is, name.data(), name_len), path, ": truncated file");
            uint64_t rank = detail::read_u64(is, path);
            check(rank >= 1 && rank <= 2, path, ": tensor '", name, "' has unsupported rank ",
                  rank);
            Tensor t;
            uint64_t count = 1;
            for (uint64_t d = 0; d < rank; ++d) {
                uint64_t dim = detail::read_u64(is, path);
                check(dim > 0 && dim < (1ull << 32), path, ": tensor '", name,
                      "' has implausible dim ", dim);
                t.shape.push_back(static_cast<int>(dim));
                count *= dim;
            }
            t.values.resize(count);
            for (uint64_t i = 0; i < count; ++i) t.values[i] = detail::read_f64(is, path);
            cp.put(std::move(name), std::move(t));
        }
        return cp;
    }

  private:
    std::vector<std::pair<std::string, Tensor>> items_;

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : items_)
            if (n == name) return &t;
        return nullptr;
    }
};

}  // namespace relmem
