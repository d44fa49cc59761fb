#pragma once

#include <stdexcept>
#include <string>

namespace lapr {

// Shape mismatches, bad configuration values, empty inputs.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A cosine was requested on a (near) zero-norm vector: the embedding collapsed.
class DegenerateVector : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A mode cache was built from prompt-bank parameters that no longer match the model.
class StaleCache : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Positive and negative sets cannot be separated for a query (ties, tiny pool).
class DegenerateSupervision : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Pearson correlation over constant data.
class UndefinedCorrelation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Synthetic generation could not satisfy its constraints.
class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed, truncated or unreadable files.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lapr
