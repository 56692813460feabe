#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace talkback {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// CSV or JSON input that does not parse. `line` is 1-based, 0 when unknown.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A call whose documented precondition does not hold.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(std::vector<std::string> problems)
      : Error(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (const auto& p : v) {
      if (!out.empty()) out += "; ";
      out += p;
    }
    return out;
  }
  std::vector<std::string> problems_;
};

class NoAlternativeError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

class IntegrityError : public Error {
 public:
  IntegrityError(const std::string& what, std::uint64_t seq)
      : Error("integrity error at record " + std::to_string(seq) + ": " + what), seq_(seq) {}
  std::uint64_t sequence() const { return seq_; }

 private:
  std::uint64_t seq_;
};

}  // namespace talkback
