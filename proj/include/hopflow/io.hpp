#ifndef HOPFLOW_IO_HPP
#define HOPFLOW_IO_HPP

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>

#include "common.hpp"

namespace hopflow::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// FNV-1a over 128 bits. Used as the trailing content checksum of cache files.
class Fnv1a128 {
public:
    void update(const void* bytes, std::size_t n)
    {
        auto p = static_cast<const unsigned char*>(bytes);
        for (std::size_t i = 0; i < n; ++i) {
            state_ ^= p[i];
            // prime = 2^88 + 0x13b
            state_ = (state_ << 88) + state_ * 0x13bu;
        }
    }

    std::array<unsigned char, 16> digest() const
    {
        std::array<unsigned char, 16> out{};
        auto v = state_;
        for (int i = 0; i < 16; ++i) {
            out[i] = static_cast<unsigned char>(v & 0xffu);
            v >>= 8;
        }
        return out;
    }

private:
    unsigned __int128 state_ = (static_cast<unsigned __int128>(0x6c62272e07bb0142ULL) << 64) | 0x62b821756295c58dULL;
};

inline void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

inline std::uint64_t read_u64(std::istream& is, const std::string& what)
{
    std::uint64_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError("truncated header reading " + what);
    return v;
}

inline void expect_magic(std::istream& is, std::string_view magic, const std::string& path)
{
    char buf[4] = {};
    if (!is.read(buf, 4) || std::string_view(buf, 4) != magic)
        throw FormatError(path + ": bad magic, expected \"" + std::string(magic) + "\"");
}

inline std::ifstream open_in(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path.string());
    return is;
}

inline std::ofstream open_out(const std::filesystem::path& path)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write " + path.string());
    return os;
}

inline std::uintmax_t file_size(const std::filesystem::path& path) { return std::filesystem::file_size(path); }

} // namespace hopflow::io

#endif
