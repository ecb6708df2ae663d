#pragma once

#include <stdexcept>
#include <string>

namespace x2ct {

// Exit-code categories surfaced by the CLI.
enum class ErrorKind { Config = 2, Data = 3, Numeric = 4, Contract = 5 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

struct DataError : Error {
  explicit DataError(const std::string& what) : Error(ErrorKind::Data, what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(ErrorKind::Numeric, what) {}
};

struct ContractError : Error {
  explicit ContractError(const std::string& what) : Error(ErrorKind::Contract, what) {}
};

// Shape/dimension mismatch inside the numerics; treated as a data error.
struct ShapeError : Error {
  explicit ShapeError(const std::string& what) : Error(ErrorKind::Data, what) {}
};

}  // namespace x2ct
