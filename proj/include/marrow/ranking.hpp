#pragma once

#include <algorithm>
#include <string>
#include <vector>

namespace marrow {

struct Hit {
  std::string doc_id;
  double score = 0.0;
  bool operator==(const Hit&) const = default;
};

/// Higher score first; equal scores by ascending doc id.
inline bool ranks_before(const Hit& a, const Hit& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.doc_id < b.doc_id;
}

/// Sorts by the ranking rule and keeps the first k.
inline void sort_and_cut(std::vector<Hit>& hits, std::size_t k) {
  if (k < hits.size()) {
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(), ranks_before);
    hits.resize(k);
  } else {
    std::sort(hits.begin(), hits.end(), ranks_before);
  }
}

}  // namespace marrow
