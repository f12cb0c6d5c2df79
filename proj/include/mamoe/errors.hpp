// Copyright (c) 2026 The mamoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace mamoe {

/// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Tensor shape mismatch; the message names both offending shapes.
struct ShapeError : Error {
  using Error::Error;
};

/// Invalid argument value (out-of-range index, bad K, ...).
struct ArgumentError : Error {
  using Error::Error;
};

/// Bad configuration file or inconsistent configuration values.
struct ConfigError : Error {
  using Error::Error;
};

/// A function produced a non-finite value where a finite one was required.
struct EvalError : Error {
  using Error::Error;
};

/// Malformed text input (CSV / JSONL); message carries the line number.
struct ParseError : Error {
  using Error::Error;
};

/// Filesystem-level failure (open/read/write).
struct IoError : Error {
  using Error::Error;
};

/// Checkpoint payload does not match its checksum.
struct ChecksumError : Error {
  using Error::Error;
};

/// Checkpoint was written by an incompatible format version.
struct VersionError : Error {
  using Error::Error;
};

/// Training aborted; message names the first non-finite tensor.
struct TrainingError : Error {
  using Error::Error;
};

}  // namespace mamoe
