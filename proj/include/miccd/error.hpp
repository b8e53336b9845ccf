#pragma once

#include <stdexcept>
#include <string>

namespace miccd {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define MICCD_DEFINE_ERROR(Name)       \
  class Name : public Error {          \
   public:                             \
    using Error::Error;                \
  };

// causal-graph
MICCD_DEFINE_ERROR(CycleError)
MICCD_DEFINE_ERROR(TargetNotSink)
MICCD_DEFINE_ERROR(GraphTooLarge)
MICCD_DEFINE_ERROR(IndexOutOfRange)
MICCD_DEFINE_ERROR(LengthMismatch)

// scm-sim
MICCD_DEFINE_ERROR(GenerationFailed)
MICCD_DEFINE_ERROR(ThresholdUnset)
MICCD_DEFINE_ERROR(InterventionOnTarget)

// pattern-cluster
MICCD_DEFINE_ERROR(DegenerateComponent)

// nn-core / surrogate
MICCD_DEFINE_ERROR(ShapeMismatch)
MICCD_DEFINE_ERROR(NonFiniteLoss)

// decision
MICCD_DEFINE_ERROR(FactualNotAbnormal)

// metrics
MICCD_DEFINE_ERROR(EmptyInput)
MICCD_DEFINE_ERROR(ZeroReference)
MICCD_DEFINE_ERROR(NoRelevantItems)
MICCD_DEFINE_ERROR(ZeroVariance)

// cli / io
MICCD_DEFINE_ERROR(ConfigInvalid)
MICCD_DEFINE_ERROR(MissingArtifact)
MICCD_DEFINE_ERROR(FormatError)

#undef MICCD_DEFINE_ERROR

}  // namespace miccd
