#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace splab {

using json = nlohmann::json;

namespace io {

inline void write_exact(std::ostream& os, const void* data, std::size_t n) {
    os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!os) throw std::runtime_error("io: write failed");
}

inline void read_exact(std::istream& is, void* data, std::size_t n) {
    is.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n)
        throw std::runtime_error("io: unexpected end of file");
}

// Little-endian scalar I/O. Host is assumed little-endian; the static_assert
// below trips on exotic platforms rather than silently writing bad files.
static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts unsupported");

template <typename T>
void write_le(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    write_exact(os, &v, sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    static_assert(std::is_trivially_copyable_v<T>);
    T v;
    read_exact(is, &v, sizeof(T));
    return v;
}

inline void write_f32_block(std::ostream& os, const std::vector<float>& v) {
    write_exact(os, v.data(), v.size() * sizeof(float));
}

inline void read_f32_block(std::istream& is, std::vector<float>& v) {
    read_exact(is, v.data(), v.size() * sizeof(float));
}

inline void write_magic(std::ostream& os, const char magic[4]) {
    write_exact(os, magic, 4);
}

inline void expect_magic(std::istream& is, const char magic[4], const std::string& what) {
    char buf[4];
    read_exact(is, buf, 4);
    if (std::memcmp(buf, magic, 4) != 0)
        throw std::runtime_error("bad magic bytes, not a " + what + " file");
}

/// nlohmann::json keeps object keys sorted (std::map), so dump() is already
/// canonical: sorted keys, no whitespace.
inline std::string canonical(const json& j) { return j.dump(); }

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::string s((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return s;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

/// FNV-1a 64-bit content hash, used for run-manifest artifact hashes.
inline std::uint64_t fnv1a64(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::uint64_t hash_file(const std::filesystem::path& path) {
    return fnv1a64(read_text_file(path));
}

inline std::string hex64(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

/// Locale-independent fixed-point formatting for CSV cells.
inline std::string csv_number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return std::string(buf);
}

}  // namespace io
}  // namespace splab
