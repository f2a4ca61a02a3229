#pragma once

#include <stdexcept>
#include <string>

namespace latentlab {

/// Base of every error raised by the library. `kind()` is the stable name
/// used in CLI messages and by the Python bindings.
class Error : public std::runtime_error {
public:
    Error(const char* kind, const std::string& message)
        : std::runtime_error(std::string(kind) + ": " + message), kind_(kind) {}

    const char* kind() const noexcept { return kind_; }

private:
    const char* kind_;
};

#define LATENTLAB_ERROR(Name)                                                  \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& message) : Error(#Name, message) {}   \
    }

// tensor
LATENTLAB_ERROR(ShapeMismatch);
LATENTLAB_ERROR(NonFiniteResult);
LATENTLAB_ERROR(NotScalarLoss);
LATENTLAB_ERROR(DetachedTape);

// nn
LATENTLAB_ERROR(CorruptFile);
LATENTLAB_ERROR(VersionMismatch);
LATENTLAB_ERROR(ChecksumMismatch);
LATENTLAB_ERROR(InvalidArchitecture);

// loss
LATENTLAB_ERROR(NotOneHot);
LATENTLAB_ERROR(DegenerateMargin);
LATENTLAB_ERROR(TargetIsTruth);
LATENTLAB_ERROR(MissingHead);
LATENTLAB_ERROR(InvalidWeights);

// attack / train / harness
LATENTLAB_ERROR(InvalidConfig);
LATENTLAB_ERROR(EmptyDataset);
LATENTLAB_ERROR(NoIntermediateLayers);
LATENTLAB_ERROR(BadMagic);
LATENTLAB_ERROR(DimensionMismatch);
LATENTLAB_ERROR(TruncatedFile);
LATENTLAB_ERROR(IoError);

#undef LATENTLAB_ERROR

}  // namespace latentlab
