#pragma once
#include <stdexcept>
#include <string>

namespace seqscript {

// Shape/dimension violations (mismatched operands, bad tensor shapes).
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad model/dataset configuration (inconsistent flags, script-count mismatch).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem failures: missing files, unwritable paths, refusal to overwrite.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed file contents (PGM headers, manifest lines). Carries a line
// number when one makes sense, 0 otherwise.
struct FormatError : std::runtime_error {
  FormatError(const std::string& msg, int line_no = 0)
      : std::runtime_error(line_no > 0 ? msg + " (line " + std::to_string(line_no) + ")" : msg),
        line(line_no) {}
  int line;
};

// Checkpoint file problems, one kind per failure mode.
struct CheckpointError : std::runtime_error {
  enum class Kind { bad_magic, bad_version, truncated, shape_mismatch };
  CheckpointError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
  Kind kind;
};

// A CTC target that no alignment of the given length can produce.
struct InfeasibleAlignmentError : std::runtime_error {
  explicit InfeasibleAlignmentError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values or degenerate numerics where finite math was required.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Broken internal invariant; indicates a bug, not bad input.
struct InternalError : std::logic_error {
  explicit InternalError(const std::string& msg) : std::logic_error(msg) {}
};

}  // namespace seqscript
