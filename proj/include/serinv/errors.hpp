#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace serinv {

/// Base class for every error raised by the library. `kind()` is a short
/// stable token used by the CLI for machine-parseable error lines.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct ContractError : Error {
  explicit ContractError(const std::string& m) : Error("contract", m) {}
};

struct GraphError : Error {
  explicit GraphError(const std::string& m) : Error("graph", m) {}
};

struct FormatError : Error {
  explicit FormatError(const std::string& m) : Error("format", m) {}
};

struct LengthError : Error {
  explicit LengthError(const std::string& m) : Error("length", m) {}
};

struct ValidationError : Error {
  explicit ValidationError(const std::string& m) : Error("validation", m) {}
};

struct SpecError : Error {
  explicit SpecError(const std::string& m) : Error("spec", m) {}
};

struct LayoutError : Error {
  explicit LayoutError(const std::string& m) : Error("layout", m) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};

struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io", m) {}
};

struct NonFiniteError : Error {
  explicit NonFiniteError(const std::string& m) : Error("non_finite", m) {}
};

/// An utterance is shorter than the receptive field of the convolution stack.
class TooShortError : public Error {
 public:
  TooShortError(std::string id, std::size_t required, std::size_t actual)
      : Error("too_short", "utterance '" + id + "' has " + std::to_string(actual) +
                               " frames; at least " + std::to_string(required) +
                               " are required"),
        id_(std::move(id)),
        required_(required),
        actual_(actual) {}

  const std::string& utterance_id() const noexcept { return id_; }
  std::size_t required() const noexcept { return required_; }
  std::size_t actual() const noexcept { return actual_; }

 private:
  std::string id_;
  std::size_t required_;
  std::size_t actual_;
};

/// Splits share speakers.
class SplitError : public Error {
 public:
  explicit SplitError(std::vector<std::string> speakers)
      : Error("split", describe(speakers)), speakers_(std::move(speakers)) {}
  SplitError(const std::string& message, std::vector<std::string> speakers)
      : Error("split", message), speakers_(std::move(speakers)) {}

  const std::vector<std::string>& speakers() const noexcept { return speakers_; }

 private:
  static std::string describe(const std::vector<std::string>& speakers) {
    std::string m = "speakers appear in more than one split:";
    for (const auto& s : speakers) m += " " + s;
    return m;
  }
  std::vector<std::string> speakers_;
};

}  // namespace serinv
