#pragma once
#include <stdexcept>
#include <string>

namespace mm {

struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// wrong transformation class handed to a compiler
struct ClassError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CertificationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace mm
