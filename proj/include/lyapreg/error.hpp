#pragma once

#include <stdexcept>
#include <string>

namespace lyapreg {

/// Input data violates a documented invariant (bad case file, dimension
/// mismatch, non-finite value). Message is path-qualified where possible.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A numerical routine failed: non-convergence, singular matrix, NaN loss.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace lyapreg
