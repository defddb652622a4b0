#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace nlbss {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class Errc {
    invalid_argument,
    domain,
    singular,
    not_positive_definite,
    not_symmetric,
    shape_mismatch,
    malformed_file,
    channel_mismatch,
    io,
    no_valid_bins,
    out_of_bounds,
    invalid_bin,
    degenerate,
    precondition,
    unsupported,
    missing_artifact,
    version_mismatch,
    config,
};

inline std::string_view to_string(Errc code) {
    switch (code) {
    case Errc::invalid_argument: return "invalid argument";
    case Errc::domain: return "domain error";
    case Errc::singular: return "singular covariance";
    case Errc::not_positive_definite: return "not positive definite";
    case Errc::not_symmetric: return "not symmetric";
    case Errc::shape_mismatch: return "shape mismatch";
    case Errc::malformed_file: return "malformed file";
    case Errc::channel_mismatch: return "channel-count mismatch";
    case Errc::io: return "i/o error";
    case Errc::no_valid_bins: return "no valid bins";
    case Errc::out_of_bounds: return "out of bounds";
    case Errc::invalid_bin: return "invalid bin";
    case Errc::degenerate: return "degenerate component";
    case Errc::precondition: return "precondition violated";
    case Errc::unsupported: return "unsupported";
    case Errc::missing_artifact: return "missing artifact";
    case Errc::version_mismatch: return "artifact version mismatch";
    case Errc::config: return "configuration error";
    }
    return "unknown error";
}

/// Library error. `code()` identifies the failure class; `what()` carries
/// the class name followed by detail.
class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& detail)
        : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

    Errc code() const noexcept { return code_; }

protected:
    struct verbatim_t {};
    Error(Errc code, const std::string& message, verbatim_t) : std::runtime_error(message), code_(code) {}

private:
    Errc code_;
};

/// Ordered set of component indices (0-based).
using IndexSet = std::vector<std::size_t>;

} // namespace nlbss
