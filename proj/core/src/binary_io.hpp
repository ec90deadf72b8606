#pragma once

// Little-endian primitives shared by the SPMV and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>

namespace shapeprior::detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T byteswap_if_needed(T v) {
    if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
        return v;
    } else {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
        std::memcpy(&v, b, sizeof(T));
        return v;
    }
}

template <typename T>
void write_le(std::ostream& os, T v) {
    v = byteswap_if_needed(v);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void write_le_span(std::ostream& os, std::span<const T> values) {
    if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
        os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
    } else {
        for (T v : values) write_le(os, v);
    }
}

template <typename Error, typename T>
T read_le(std::istream& is, const std::string& what) {
    T v;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw Error("truncated file while reading " + what);
    return byteswap_if_needed(v);
}

template <typename Error, typename T>
void read_le_span(std::istream& is, std::span<T> out, const std::string& what) {
    if (!is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size_bytes())))
        throw Error("truncated file while reading " + what);
    if constexpr (std::endian::native != std::endian::little && sizeof(T) > 1) {
        for (auto& v : out) v = byteswap_if_needed(v);
    }
}

}  // namespace shapeprior::detail
