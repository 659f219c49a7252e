#pragma once

#include <stdexcept>
#include <string>

namespace widthscale {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// scaling
struct NonSymmetricScaling : Error { using Error::Error; };
struct InvalidTolerance : Error { using Error::Error; };
struct OutsideStabilityBand : Error { using Error::Error; };
struct InconsistentSigns : Error { using Error::Error; };

// netcore / kernels
struct ShapeError : Error { using Error::Error; };
struct EmptyBatch : Error { using Error::Error; };
struct InvalidLabel : Error { using Error::Error; };
struct EmptySample : Error { using Error::Error; };

// limits
struct UntrackedInput : Error { using Error::Error; };
struct MissingInitBias : Error { using Error::Error; };
struct IncompatibleVariant : Error { using Error::Error; };

// harness
struct IngestError : Error { using Error::Error; };
struct CorruptRecord : Error { using Error::Error; };
struct DegenerateGaussian : Error { using Error::Error; };
struct LogDomainError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

}  // namespace widthscale
