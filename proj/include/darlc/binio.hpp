#pragma once

// Little-endian float64 helpers shared by the checkpoint formats.

#include "darlc/common.hpp"

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

namespace darlc::binio {

inline void put_f64(std::ostream& os, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    char b[8];
    for (int k = 0; k < 8; ++k) b[k] = static_cast<char>((bits >> (8 * k)) & 0xffu);
    os.write(b, 8);
}

inline double get_f64(std::istream& is, const std::string& origin) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    require(is.gcount() == 8, "checkpoint", origin + ": truncated payload", ErrorKind::io);
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(b[k]) << (8 * k);
    return std::bit_cast<double>(bits);
}

inline void put_matrix(std::ostream& os, const Matrix& m) {
    for (Index k = 0; k < m.size(); ++k) put_f64(os, m.data()[k]);
}

inline Matrix get_matrix(std::istream& is, Index rows, Index cols, const std::string& origin) {
    Matrix m(rows, cols);
    for (Index k = 0; k < m.size(); ++k) m.data()[k] = get_f64(is, origin);
    return m;
}

}  // namespace darlc::binio
