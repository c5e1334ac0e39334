#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace darlc {

/// Row-major dense matrix; rows are samples, tokens or pixels throughout.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

enum class ErrorKind { invalid_argument, config, numeric, io };

/// Error carrying the failing module (and, for config errors, the key at fault).
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string module, const std::string& message)
        : std::runtime_error(module + ": " + message), kind_(kind), module_(std::move(module)) {}

    ErrorKind kind() const noexcept { return kind_; }
    const std::string& module() const noexcept { return module_; }

private:
    ErrorKind kind_;
    std::string module_;
};

inline void require(bool condition, std::string_view module, const std::string& message,
                    ErrorKind kind = ErrorKind::invalid_argument) {
    if (!condition) throw Error(kind, std::string(module), message);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Derives an independent stream seed for one consumer of the root seed.
inline std::uint64_t split_seed(std::uint64_t root, std::string_view tag) {
    return splitmix64(root ^ splitmix64(fnv1a64(tag)));
}

inline std::uint64_t split_seed(std::uint64_t root, std::uint64_t index) {
    return splitmix64(root + splitmix64(index + 0x632be59bd9b4e019ULL));
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace darlc
