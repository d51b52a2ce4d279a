#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lpdnet/common.hpp"

namespace lpdnet {

// Id-keyed descriptor collection with exact L2 top-N queries. Descriptors
// must be unit norm (within 1e-6); positions are optional metadata.
class DescriptorIndex {
 public:
  DescriptorIndex() = default;

  void add(const std::string& id, const std::vector<double>& descriptor,
           std::optional<std::pair<double, double>> position = {});

  std::size_t size() const { return ids_.size(); }
  std::size_t dimension() const { return dim_; }
  const std::vector<std::string>& ids() const { return ids_; }
  const double* descriptor(std::size_t i) const { return &data_[i * dim_]; }
  std::optional<std::pair<double, double>> position(std::size_t i) const;
  std::optional<std::size_t> find(const std::string& id) const;

  void save(const std::string& path) const;
  static DescriptorIndex load(const std::string& path);

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<double> data_;        // row-major size x dim
  std::vector<double> positions_;   // 2 per entry when has_positions_
  bool has_positions_ = false;
  std::map<std::string, std::size_t> by_id_;
};

struct QueryHit {
  std::string id;
  double distance = 0.0;  // L2
};

// Exact n smallest L2 distances, ascending, ties by index insertion order.
// `exclude` skips one stored entry (self-match removal).
std::vector<QueryHit> query_topn(const DescriptorIndex& index, const std::vector<double>& query,
                                 std::size_t n, std::optional<std::size_t> exclude = {});

struct RecallReport {
  std::map<std::size_t, double> recall_at;  // N -> fraction
  double recall_at_1pct = 0.0;
  std::size_t num_queries = 0;
};

// Ground truth for one query: either a place key (synthetic) or a position
// with radius semantics. `index_id` marks a query that is itself a database
// entry and must be excluded from its own ranking.
struct QueryTruth {
  std::vector<double> descriptor;
  std::optional<std::string> place_key;
  std::optional<std::pair<double, double>> position;
  std::optional<std::string> index_id;
};

// A query succeeds at N when any of its top-N hits is a true positive
// (matching place key, or within positive_radius of the query position).
// `place_key_of` maps database ids to place keys when keys are used.
RecallReport recall_at_n(const std::vector<QueryTruth>& queries, const DescriptorIndex& index,
                         const std::vector<std::size_t>& ns, double positive_radius,
                         const std::map<std::string, std::string>& place_key_of = {},
                         bool exclude_self = false);

void save_recall_csv(const std::string& path, const RecallReport& report);

struct RobustnessRow {
  double angle_deg = 0.0;
  double mean_mistakes = 0.0;
  double max_mistakes = 0.0;
};

void save_robustness_csv(const std::string& path, const std::vector<RobustnessRow>& rows);

}  // namespace lpdnet
