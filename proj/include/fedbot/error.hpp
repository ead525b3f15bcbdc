#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fedbot {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class IndexError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };
class SchemaError : public Error { using Error::Error; };
class AggregationError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
class ProtocolError : public Error { using Error::Error; };

class TruncationError : public FormatError {
 public:
  TruncationError(const std::string& what, std::size_t offset)
      : FormatError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// A long-running operation was cancelled (signal, shutdown request).
class Interrupted : public Error { using Error::Error; };

// Peer closed the stream (cleanly or mid-frame).
class Disconnected : public Error { using Error::Error; };

// Process exit codes shared by the command line tools.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitData = 2,
  kExitProtocol = 3,
  kExitNumeric = 4,
};

}  // namespace fedbot
