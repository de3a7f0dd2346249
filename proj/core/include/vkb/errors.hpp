#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace vkb {

// Base class for everything thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller violated a documented precondition (bad dimension, unsorted
// indices, ...).  These indicate programming errors, not bad data.
class ContractError : public Error {
 public:
  using Error::Error;
};

// A configuration value is out of range, unknown, or inconsistent.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// An input file could not be parsed (syntax level).
class ParseError : public Error {
 public:
  using Error::Error;
};

// An input parsed fine but violates a semantic invariant
// (span out of bounds, dangling entity id, duplicate triple, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Filesystem level trouble: missing file, short read, bad magic/version.
class IoError : public Error {
 public:
  using Error::Error;
};

// A requested dataset could not be generated under the given constraints.
class GenerationError : public Error {
 public:
  using Error::Error;
};

// No entity in the lexicon matched a question.
class LinkingError : public Error {
 public:
  using Error::Error;
};

// The mention index no longer matches the encoder parameters it was built
// from; training on it would silently optimize against stale vectors.
class StalenessError : public Error {
 public:
  using Error::Error;
};

// A hop produced an empty candidate set.  Carries enough context for a
// caller to understand which stage starved and to retry with a larger beam.
class EmptyResultError : public Error {
 public:
  EmptyResultError(const std::string& what, int hop, std::int64_t expansion_nnz,
                   std::int64_t retrieved_nnz, std::int64_t k)
      : Error(what),
        hop(hop),
        expansion_nnz(expansion_nnz),
        retrieved_nnz(retrieved_nnz),
        k(k) {}

  int hop = 0;                      // 1-based hop that came up empty
  std::int64_t expansion_nnz = 0;   // nonzeros after the entity->mention expansion
  std::int64_t retrieved_nnz = 0;   // nonzeros returned by the index lookup
  std::int64_t k = 0;               // beam width in effect
};

}  // namespace vkb
