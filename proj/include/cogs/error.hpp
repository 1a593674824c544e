#pragma once

#include <stdexcept>
#include <string>

namespace cogs {

enum class ErrorKind {
  kConfig,
  kShape,
  kRange,
  kIo,
  kNumeric,
  kNotFound,
  kConflict,
  kFormat,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

#define COGS_CHECK(cond, kind, msg)                 \
  do {                                              \
    if (!(cond)) throw ::cogs::Error((kind), (msg)); \
  } while (0)

}  // namespace cogs
