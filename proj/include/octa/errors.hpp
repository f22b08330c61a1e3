#pragma once

#include <stdexcept>
#include <string>

namespace octa {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed or unreadable file content (bad magic, bad header, truncation).
struct FormatError : Error {
  using Error::Error;
};

// Dimension or shape disagreement between inputs.
struct ShapeError : Error {
  using Error::Error;
};

// Semantically invalid input (degenerate image, bad parameter, capacity).
struct ValueError : Error {
  using Error::Error;
};

// An iterative solver failed to converge or training diverged.
struct ConvergenceError : Error {
  using Error::Error;
};

// Surface segmentation could not produce a feasible result; callers flag
// the volume instead of aborting the whole run.
struct SegmentationError : Error {
  using Error::Error;
};

// A pipeline stage was invoked before its inputs exist.
struct PrerequisiteError : Error {
  using Error::Error;
};

}  // namespace octa
