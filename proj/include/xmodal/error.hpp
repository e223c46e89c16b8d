#pragma once

#include <stdexcept>
#include <string>

namespace xmodal {

// Every failure raised by the library derives from Error. The CLI maps the
// three families onto its exit codes (config 2, data 3, numerical 4).
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

class DataError : public Error {
public:
  using Error::Error;
};

class NumericalError : public Error {
public:
  using Error::Error;
};

enum class ExitCode : int {
  ok = 0,
  config = 2,
  data = 3,
  numerical = 4,
};

inline ExitCode exit_code_for(const Error &e) {
  if (dynamic_cast<const ConfigError *>(&e)) return ExitCode::config;
  if (dynamic_cast<const NumericalError *>(&e)) return ExitCode::numerical;
  return ExitCode::data;
}

namespace detail {

inline void require(bool cond, const std::string &what) {
  if (!cond) throw ConfigError(what);
}

} // namespace detail

} // namespace xmodal
