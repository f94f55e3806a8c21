#ifndef MYGRAM_CHECKPOINT_HPP
#define MYGRAM_CHECKPOINT_HPP

// Parameter checkpoints: little-endian binary
//   u32 count
//   count x { u32 name_len, name bytes (UTF-8), u32 rows, u32 cols, rows*cols f64 (row-major) }

#include "mygram/tensor.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

namespace mygram {

using NamedMatrices = std::vector<std::pair<std::string, Matrix>>;

namespace io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }
inline void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }
inline void write_f32(std::ostream& os, float v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

template <class T>
T read_pod(std::istream& is, const std::string& what)
{
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is)
        throw Error("truncated " + what);
    return v;
}

} // namespace io

inline void save_checkpoint(const std::filesystem::path& path, const NamedMatrices& params)
{
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os)
        throw Error("cannot open checkpoint for writing: " + path.string());
    io::write_u32(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, m] : params) {
        io::write_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        io::write_u32(os, static_cast<std::uint32_t>(m.rows()));
        io::write_u32(os, static_cast<std::uint32_t>(m.cols()));
        os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    }
    if (!os)
        throw Error("failed writing checkpoint: " + path.string());
}

inline NamedMatrices load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw Error("cannot open checkpoint: " + path.string());
    const auto count = io::read_pod<std::uint32_t>(is, "checkpoint header");
    NamedMatrices out;
    out.reserve(count);
    for (std::uint32_t p = 0; p < count; ++p) {
        const auto len = io::read_pod<std::uint32_t>(is, "parameter name length");
        std::string name(len, '\0');
        is.read(name.data(), len);
        const auto rows = io::read_pod<std::uint32_t>(is, "parameter rows");
        const auto cols = io::read_pod<std::uint32_t>(is, "parameter cols");
        Matrix m(rows, cols);
        is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
        if (!is)
            throw Error("truncated checkpoint data for parameter '" + name + "'");
        out.emplace_back(std::move(name), std::move(m));
    }
    return out;
}

} // namespace mygram

#endif // MYGRAM_CHECKPOINT_HPP
