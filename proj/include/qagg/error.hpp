#pragma once

#include <stdexcept>
#include <string>

namespace qagg {

/// Malformed or inconsistent caller input (shapes, grids, configs).
class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A numerical routine could not produce a usable result.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace qagg
