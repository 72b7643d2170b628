#pragma once

#include <stdexcept>
#include <string>

namespace fedmatch {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape mismatch, unlabeled batch where labels are required, unknown tag.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Run configuration failed validation.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Sparse delta that cannot be applied to its reference.
class CorruptDelta : public Error {
 public:
  using Error::Error;
};

class NoEmbeddings : public Error {
 public:
  NoEmbeddings() : Error("no-embeddings: cannot build an index over zero models") {}
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace fedmatch
