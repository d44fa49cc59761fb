#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "lapr/linalg.hpp"

namespace lapr {

/// One database prompt. Ids are dense: record i has id i.
struct PromptRecord {
  std::size_t id = 0;
  Vector image;  // z^I, unit norm (or zero)
  Vector label;  // z^L, unit norm (or zero)
  int category = 0;
  std::string meta;
};

struct QueryRecord {
  std::size_t id = 0;
  Vector embedding;             // u_q, unit norm
  std::optional<Vector> label;  // y_q; present for training and evaluation only
  int category = 0;
};

/// l2-normalizes every embedding in place (zero vectors stay zero).
inline void normalize_records(std::vector<PromptRecord>& prompts) {
  for (auto& p : prompts) {
    p.image = l2_normalize(p.image);
    p.label = l2_normalize(p.label);
  }
}

inline void normalize_records(std::vector<QueryRecord>& queries) {
  for (auto& q : queries) {
    q.embedding = l2_normalize(q.embedding);
    if (q.label) q.label = l2_normalize(*q.label);
  }
}

}  // namespace lapr
