#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace lpu {

enum class ErrorKind {
  InvalidConfig,
  CapacityExceeded,
  InvalidDeviceCount,
  IndexOutOfRange,
  UnmappedTensor,
  UnknownBlock,
  RegisterPressureExceeded,
  CyclicDependency,
  MalformedBinary,
  InvalidSamplingParams,
  Deadlock,
  DecodeFault,
  IllegalPartition,
  CrossRing,
  BufferOverflow,
  UnknownPreset,
};

const char* error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(error_kind_name(kind)) + ": " + what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

/// Carries the byte deficit so callers can report how far over budget a placement is.
class CapacityExceeded : public Error {
 public:
  CapacityExceeded(double deficit_bytes, const std::string& what)
      : Error(ErrorKind::CapacityExceeded, what), deficit_(deficit_bytes) {}
  double deficit_bytes() const { return deficit_; }

 private:
  double deficit_;
};

}  // namespace lpu
