#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "bncap/errors.hpp"

// Little-endian primitives shared by the CEMB and CCKP file formats.
namespace bncap::binary_io {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T byteswap_if_big(T value) {
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char bytes[sizeof(T)];
        std::memcpy(bytes, &value, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
        std::memcpy(&value, bytes, sizeof(T));
    }
    return value;
}

inline void write_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

inline void write_u32(std::ostream& os, std::uint32_t v) {
    v = byteswap_if_big(v);
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void write_f32(std::ostream& os, float v) {
    auto bits = byteswap_if_big(std::bit_cast<std::uint32_t>(v));
    os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
}

inline void write_bytes(std::ostream& os, std::string_view s) { os.write(s.data(), static_cast<std::streamsize>(s.size())); }

/// Writes a u32 length followed by the raw bytes.
inline void write_string(std::ostream& os, std::string_view s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    write_bytes(os, s);
}

inline void read_exact(std::istream& is, char* dst, std::size_t count, const char* what) {
    is.read(dst, static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(is.gcount()) != count) throw FormatError(std::string("truncated file while reading ") + what);
}

inline std::uint8_t read_u8(std::istream& is, const char* what) {
    char c;
    read_exact(is, &c, 1, what);
    return static_cast<std::uint8_t>(c);
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
    std::uint32_t v;
    read_exact(is, reinterpret_cast<char*>(&v), sizeof v, what);
    return byteswap_if_big(v);
}

inline float read_f32(std::istream& is, const char* what) {
    std::uint32_t bits;
    read_exact(is, reinterpret_cast<char*>(&bits), sizeof bits, what);
    return std::bit_cast<float>(byteswap_if_big(bits));
}

inline std::string read_string(std::istream& is, const char* what, std::uint32_t max_len = 1u << 20) {
    const auto len = read_u32(is, what);
    if (len > max_len) throw FormatError(std::string("implausible string length for ") + what);
    std::string s(len, '\0');
    if (len > 0) read_exact(is, s.data(), len, what);
    return s;
}

/// True when the stream has no bytes left.
inline bool at_eof(std::istream& is) { return is.peek() == std::char_traits<char>::eof(); }

}  // namespace bncap::binary_io
