#ifndef MSHIFT_ERRORS_HPP
#define MSHIFT_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace mshift {

// Error taxonomy, mapped to process exit codes by the CLI:
//   ConfigError -> 2, DataError -> 3, NumericError -> 4.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad key, malformed value, inconsistent configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Missing/unreadable files, malformed manifests or binary payloads.
struct DataError : Error {
    using Error::Error;
};

// Degenerate inputs, undefined metrics, broken numeric preconditions.
struct NumericError : Error {
    using Error::Error;
};

// Tensor shape mismatch; message names the primitive and both shapes.
struct ShapeError : NumericError {
    using NumericError::NumericError;
};

}  // namespace mshift

#endif
