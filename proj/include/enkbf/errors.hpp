#pragma once

#include <stdexcept>
#include <string>

namespace enkbf {

struct InvalidDimension : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct DimensionMismatch : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct PathTooDeep : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct LevelAboveFine : std::out_of_range {
    using std::out_of_range::out_of_range;
};

struct TooFewParticles : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct InvalidAlpha : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ConfigInvalid : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InsufficientReplicates : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Raised when a simulated state leaves the physically plausible range.
// Callers that sweep over coarse levels catch this and record the failure
// instead of retrying.
struct NumericalBlowUp : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace enkbf
