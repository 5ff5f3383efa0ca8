#pragma once

#include <stdexcept>
#include <string>

namespace cotrec {

// Base class for all pipeline errors. Subclasses exist where callers need
// to react differently (retry, exit code, fallback).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input record. Message carries the file and line number.
class ParseError : public Error {
 public:
  using Error::Error;
};

// An interaction references an item that is not in the metadata table.
class ReferentialError : public Error {
 public:
  using Error::Error;
};

// Leave-one-out split impossible (sequence too short). Names the user.
class SplitError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or precondition violation detected at setup time.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Retryable backend failure (rate limit, 5xx, connection reset).
class TransientError : public Error {
 public:
  using Error::Error;
};

// Backend failure that survived the retry budget, or a permanent refusal.
class TransportError : public Error {
 public:
  using Error::Error;
};

// Backend cannot satisfy a requested capability (e.g. label scoring).
class CapabilityError : public Error {
 public:
  using Error::Error;
};

// Reduction corpus has lower rank than the requested output dimension.
class RankDeficiencyError : public Error {
 public:
  RankDeficiencyError(const std::string& msg, int achieved_rank)
      : Error(msg), achieved_rank(achieved_rank) {}
  int achieved_rank;
};

// LLM output could not be parsed into the expected artifact.
class ExtractionError : public Error {
 public:
  using Error::Error;
};

// Ranking fallback found no valid label in the generated text.
class RankingError : public Error {
 public:
  using Error::Error;
};

// A required upstream artifact is missing or unreadable.
class ArtifactError : public Error {
 public:
  using Error::Error;
};

}  // namespace cotrec
