#pragma once

#include <stdexcept>
#include <string>

namespace yfpo {

// Base class for every error thrown by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Shape mismatch between tensor operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Token id, neuron id, or slice bound out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

// Sequence longer than the model's maximum context.
class LengthError : public Error {
 public:
  using Error::Error;
};

// A precondition of an operation was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

// An operation produced a non-finite value.
class NumericsError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A response token sequence was empty where one is required.
class EmptyResponseError : public Error {
 public:
  using Error::Error;
};

// Relevance aggregation was asked to run over zero samples.
class EmptyCorpusError : public Error {
 public:
  using Error::Error;
};

// Top-K selection with K outside the valid range.
class SelectionError : public Error {
 public:
  using Error::Error;
};

// Artifact (neuron set, checkpoint, dataset) does not match the current model.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

// A file exists but cannot be parsed.
class FormatError : public Error {
 public:
  using Error::Error;
};

// File system level failure (open, read, write).
class PersistenceError : public Error {
 public:
  using Error::Error;
};

// Input text contains characters outside the tokenizer alphabet.
class TokenizationError : public Error {
 public:
  using Error::Error;
};

// Report generation failed (missing baseline, empty input).
class ReportError : public Error {
 public:
  using Error::Error;
};

// A training run was aborted (non-finite loss or incompatible inputs).
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace yfpo
