#pragma once

// Exact inner-product search over unit-norm embeddings.
//
// Index file layout (little-endian):
//   "MRWFLAT\0"  u32 version  u64 n  u64 d
//   n × str doc_id                 str = u32 size + bytes
//   n·d × f32 rows, row-major

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <queue>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "marrow/error.hpp"
#include "marrow/io.hpp"
#include "marrow/parallel.hpp"
#include "marrow/ranking.hpp"

namespace marrow {

inline constexpr double kUnitNormTolerance = 1e-4;

class FlatIndex {
 public:
  explicit FlatIndex(std::size_t dim = 0) : dim_(dim) {}

  /// Rows must share the index dimension, be finite and unit-norm, and carry
  /// unique ids.
  static FlatIndex build(std::size_t dim, const std::vector<std::string>& ids,
                         const std::vector<std::vector<float>>& rows) {
    if (ids.size() != rows.size()) {
      throw ContractError("flat index: " + std::to_string(ids.size()) + " ids for " + std::to_string(rows.size()) +
                          " rows");
    }
    FlatIndex idx(dim);
    idx.ids_.reserve(ids.size());
    idx.data_.reserve(ids.size() * dim);
    for (std::size_t i = 0; i < ids.size(); ++i) idx.add(ids[i], rows[i]);
    return idx;
  }

  void add(const std::string& id, std::span<const float> row) {
    if (row.size() != dim_) {
      throw DataError("flat index: vector for '" + id + "' has dimension " + std::to_string(row.size()) +
                      ", index dimension is " + std::to_string(dim_));
    }
    double sq = 0;
    for (float v : row) {
      if (!std::isfinite(v)) throw DataError("flat index: vector for '" + id + "' is not finite");
      sq += static_cast<double>(v) * v;
    }
    if (std::abs(std::sqrt(sq) - 1.0) > kUnitNormTolerance) {
      throw DataError("flat index: vector for '" + id + "' has norm " + std::to_string(std::sqrt(sq)) +
                      ", expected unit norm");
    }
    if (!id_set_.insert(id).second) throw DataError("flat index: duplicate id '" + id + "'");
    ids_.push_back(id);
    data_.insert(data_.end(), row.begin(), row.end());
  }

  std::size_t size() const noexcept { return ids_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  std::span<const float> row(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }

  /// Float32 dot product, accumulated left to right.
  float score(std::span<const float> query, std::size_t i) const {
    const float* r = data_.data() + i * dim_;
    float s = 0.0f;
    for (std::size_t j = 0; j < dim_; ++j) s += query[j] * r[j];
    return s;
  }

  /// Exact top-k by (score desc, id asc). Rows are split into `partitions`
  /// contiguous ranges, each keeping a bounded heap; the merge applies the
  /// same total order, so the result does not depend on the partitioning.
  std::vector<Hit> search(std::span<const float> query, std::size_t k, std::size_t partitions = 1) const {
    check_query(query);
    const std::size_t n = size();
    if (n == 0 || k == 0) return {};
    k = std::min(k, n);
    partitions = std::max<std::size_t>(1, std::min(partitions, n));
    std::vector<std::vector<Hit>> partial(partitions);
    auto run = [&](std::size_t p) {
      const std::size_t begin = n * p / partitions, end = n * (p + 1) / partitions;
      // max-heap under ranks_before: top() is the worst kept hit
      std::priority_queue<Hit, std::vector<Hit>, decltype(&ranks_before)> heap(ranks_before);
      for (std::size_t i = begin; i < end; ++i) {
        Hit h{ids_[i], static_cast<double>(score(query, i))};
        if (heap.size() < k) {
          heap.push(std::move(h));
        } else if (ranks_before(h, heap.top())) {
          heap.pop();
          heap.push(std::move(h));
        }
      }
      auto& out = partial[p];
      while (!heap.empty()) {
        out.push_back(heap.top());
        heap.pop();
      }
    };
    if (partitions == 1) {
      run(0);
    } else {
      parallel_for(partitions, run);
    }
    std::vector<Hit> merged;
    for (auto& part : partial) merged.insert(merged.end(), part.begin(), part.end());
    sort_and_cut(merged, k);
    return merged;
  }

  /// One ranked list per query; queries are spread over the workers.
  std::vector<std::vector<Hit>> batch_search(const std::vector<std::vector<float>>& queries, std::size_t k,
                                             std::size_t workers = 0) const {
    std::vector<std::vector<Hit>> out(queries.size());
    parallel_for(queries.size(), [&](std::size_t q) { out[q] = search(queries[q], k); }, workers);
    return out;
  }

  std::string serialize() const {
    ByteWriter w;
    w.put_bytes("MRWFLAT\0", 8);
    w.put<std::uint32_t>(1);
    w.put<std::uint64_t>(size());
    w.put<std::uint64_t>(dim_);
    for (const auto& id : ids_) w.put_string(id);
    w.put_bytes(data_.data(), data_.size() * sizeof(float));
    return std::move(w.bytes());
  }

  static FlatIndex deserialize(std::string_view bytes, const std::string& origin = "flat index") {
    ByteReader r(bytes, origin);
    char magic[8];
    r.get_bytes(magic, 8);
    if (std::string_view(magic, 8) != std::string_view("MRWFLAT\0", 8)) throw DataError(origin + ": not a flat index");
    if (r.get<std::uint32_t>() != 1) throw DataError(origin + ": unsupported flat index version");
    const auto n = r.get<std::uint64_t>();
    const auto d = r.get<std::uint64_t>();
    std::vector<std::string> ids;
    for (std::uint64_t i = 0; i < n; ++i) ids.push_back(r.get_string());
    std::vector<float> row(d);
    FlatIndex idx(d);
    for (std::uint64_t i = 0; i < n; ++i) {
      r.get_bytes(row.data(), d * sizeof(float));
      idx.add(ids[i], row);
    }
    if (!r.done()) throw DataError(origin + ": trailing bytes");
    return idx;
  }

  /// Lines of {"id": ..., "vector": [...]}; the first line fixes the dimension.
  static FlatIndex from_jsonl(std::string_view text, const std::string& origin = "embeddings") {
    FlatIndex idx;
    bool first = true;
    std::size_t line_no = 0, pos = 0;
    while (pos < text.size()) {
      auto end = text.find('\n', pos);
      if (end == std::string_view::npos) end = text.size();
      const auto line = text.substr(pos, end - pos);
      pos = end + 1;
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
      const std::string where = origin + ":" + std::to_string(line_no);
      try {
        const auto j = nlohmann::json::parse(line);
        const auto id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
        const auto vec = j.at("vector").get<std::vector<float>>();
        if (first) {
          idx.dim_ = vec.size();
          first = false;
        }
        idx.add(id, vec);
      } catch (const nlohmann::json::exception& e) {
        throw DataError(where + ": " + e.what());
      } catch (const DataError& e) {
        throw DataError(where + ": " + e.what());
      }
    }
    return idx;
  }

  void save(const std::filesystem::path& path) const { write_file(path, serialize()); }
  static FlatIndex load(const std::filesystem::path& path) { return deserialize(read_file(path), path.string()); }

 private:
  void check_query(std::span<const float> query) const {
    if (query.size() != dim_) {
      throw DimensionError("flat search: query dimension " + std::to_string(query.size()) + ", index dimension " +
                           std::to_string(dim_));
    }
  }

  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::unordered_set<std::string> id_set_;
  std::vector<float> data_;
};

}  // namespace marrow
