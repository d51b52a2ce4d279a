#include "lpdnet/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace lpdnet {

namespace {

constexpr char kMagic[8] = {'L', 'P', 'D', 'I', 'N', 'D', 'E', 'X'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
void read_pod(std::ifstream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
}

}  // namespace

void DescriptorIndex::add(const std::string& id, const std::vector<double>& descriptor,
                          std::optional<std::pair<double, double>> position) {
  if (ids_.empty()) {
    dim_ = descriptor.size();
    has_positions_ = position.has_value();
  }
  if (descriptor.size() != dim_)
    throw DataError("DescriptorIndex: descriptor dimension mismatch for '" + id + "'");
  if (position.has_value() != has_positions_)
    throw DataError("DescriptorIndex: inconsistent position metadata for '" + id + "'");
  if (by_id_.count(id)) throw DataError("DescriptorIndex: duplicate id '" + id + "'");

  double norm_sq = 0.0;
  for (double v : descriptor) norm_sq += v * v;
  if (std::abs(std::sqrt(norm_sq) - 1.0) > 1e-6)
    throw DataError("DescriptorIndex: descriptor for '" + id + "' is not unit norm");

  by_id_[id] = ids_.size();
  ids_.push_back(id);
  data_.insert(data_.end(), descriptor.begin(), descriptor.end());
  if (has_positions_) {
    positions_.push_back(position->first);
    positions_.push_back(position->second);
  }
}

std::optional<std::pair<double, double>> DescriptorIndex::position(std::size_t i) const {
  if (!has_positions_) return {};
  return std::make_pair(positions_[2 * i], positions_[2 * i + 1]);
}

std::optional<std::size_t> DescriptorIndex::find(const std::string& id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) return {};
  return it->second;
}

void DescriptorIndex::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write index: " + path);
  out.write(kMagic, sizeof(kMagic));
  write_pod(out, kVersion);
  write_pod(out, static_cast<std::uint64_t>(ids_.size()));
  write_pod(out, static_cast<std::uint64_t>(dim_));
  write_pod(out, static_cast<std::uint8_t>(has_positions_ ? 1 : 0));
  for (const auto& id : ids_) {
    write_pod(out, static_cast<std::uint32_t>(id.size()));
    out.write(id.data(), static_cast<std::streamsize>(id.size()));
  }
  if (has_positions_)
    out.write(reinterpret_cast<const char*>(positions_.data()),
              static_cast<std::streamsize>(positions_.size() * sizeof(double)));
  out.write(reinterpret_cast<const char*>(data_.data()),
            static_cast<std::streamsize>(data_.size() * sizeof(double)));
  if (!out) throw DataError("index write failed: " + path);
}

DescriptorIndex DescriptorIndex::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open index: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw DataError("bad index magic: " + path);
  std::uint32_t version = 0;
  read_pod(in, version);
  if (version != kVersion) throw DataError("unsupported index version");
  std::uint64_t count = 0, dim = 0;
  std::uint8_t has_positions = 0;
  read_pod(in, count);
  read_pod(in, dim);
  read_pod(in, has_positions);

  DescriptorIndex index;
  index.dim_ = static_cast<std::size_t>(dim);
  index.has_positions_ = has_positions != 0;
  index.ids_.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t len = 0;
    read_pod(in, len);
    std::string id(len, '\0');
    in.read(id.data(), len);
    index.by_id_[id] = index.ids_.size();
    index.ids_.push_back(std::move(id));
  }
  if (index.has_positions_) {
    index.positions_.resize(2 * count);
    in.read(reinterpret_cast<char*>(index.positions_.data()),
            static_cast<std::streamsize>(index.positions_.size() * sizeof(double)));
  }
  index.data_.resize(count * dim);
  in.read(reinterpret_cast<char*>(index.data_.data()),
          static_cast<std::streamsize>(index.data_.size() * sizeof(double)));
  if (!in) throw DataError("truncated index: " + path);
  if (index.by_id_.size() != index.ids_.size()) throw DataError("duplicate ids in index: " + path);
  return index;
}

std::vector<QueryHit> query_topn(const DescriptorIndex& index, const std::vector<double>& query,
                                 std::size_t n, std::optional<std::size_t> exclude) {
  if (index.size() == 0) throw DataError("query_topn: empty index");
  if (query.size() != index.dimension()) throw DataError("query_topn: dimension mismatch");
  const std::size_t available = index.size() - (exclude ? 1 : 0);
  if (n > available)
    throw DataError("query_topn: n=" + std::to_string(n) + " exceeds index size (" +
                    std::to_string(available) + ")");

  std::vector<std::pair<double, std::size_t>> hits;
  hits.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (exclude && i == *exclude) continue;
    const double* d = index.descriptor(i);
    double sq = 0.0;
    for (std::size_t c = 0; c < index.dimension(); ++c) {
      const double diff = d[c] - query[c];
      sq += diff * diff;
    }
    hits.emplace_back(sq, i);
  }
  std::partial_sort(hits.begin(), hits.begin() + n, hits.end());

  std::vector<QueryHit> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    out.push_back({index.ids()[hits[i].second], std::sqrt(hits[i].first)});
  return out;
}

RecallReport recall_at_n(const std::vector<QueryTruth>& queries, const DescriptorIndex& index,
                         const std::vector<std::size_t>& ns, double positive_radius,
                         const std::map<std::string, std::string>& place_key_of,
                         bool exclude_self) {
  if (queries.empty()) throw DataError("recall_at_n: no queries");
  if (index.size() == 0) throw DataError("recall_at_n: empty index");

  std::size_t max_n = 0;
  for (auto n : ns) max_n = std::max(max_n, n);
  const std::size_t one_pct =
      std::max<std::size_t>(1, (index.size() + 99) / 100);  // ceil(size/100)
  max_n = std::max(max_n, one_pct);

  auto is_positive = [&](const QueryTruth& q, const std::string& hit_id) {
    if (q.place_key) {
      auto it = place_key_of.find(hit_id);
      if (it == place_key_of.end())
        throw DataError("recall_at_n: no place key for index id '" + hit_id + "'");
      return it->second == *q.place_key;
    }
    if (q.position) {
      const auto idx = index.find(hit_id);
      const auto pos = index.position(*idx);
      if (!pos) throw DataError("recall_at_n: index has no positions for radius ground truth");
      const double dn = pos->first - q.position->first;
      const double de = pos->second - q.position->second;
      return dn * dn + de * de <= positive_radius * positive_radius;
    }
    throw DataError("recall_at_n: query without ground truth");
  };

  std::map<std::size_t, std::size_t> successes;
  for (auto n : ns) successes[n] = 0;
  std::size_t successes_1pct = 0;

  for (const auto& q : queries) {
    std::optional<std::size_t> exclude;
    if (q.index_id) {
      exclude = index.find(*q.index_id);
      if (exclude && !exclude_self)
        throw DataError("recall_at_n: query id '" + *q.index_id +
                        "' is present in the index; self-match exclusion not enabled");
    }
    const std::size_t depth = std::min(max_n, index.size() - (exclude ? 1 : 0));
    const auto hits = query_topn(index, q.descriptor, depth, exclude);

    std::size_t first_positive = depth;  // rank of the first true positive
    for (std::size_t r = 0; r < hits.size(); ++r) {
      if (is_positive(q, hits[r].id)) {
        first_positive = r;
        break;
      }
    }
    for (auto n : ns)
      if (first_positive < n) ++successes[n];
    if (first_positive < one_pct) ++successes_1pct;
  }

  RecallReport report;
  report.num_queries = queries.size();
  for (auto n : ns)
    report.recall_at[n] =
        static_cast<double>(successes[n]) / static_cast<double>(queries.size());
  report.recall_at_1pct =
      static_cast<double>(successes_1pct) / static_cast<double>(queries.size());
  return report;
}

void save_recall_csv(const std::string& path, const RecallReport& report) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write recall report: " + path);
  out << "N,recall\n";
  for (const auto& [n, recall] : report.recall_at)
    out << n << ',' << format_double(recall) << '\n';
}

void save_robustness_csv(const std::string& path, const std::vector<RobustnessRow>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write robustness report: " + path);
  out << "angle_deg,mean_mistakes,max_mistakes\n";
  for (const auto& row : rows)
    out << format_double(row.angle_deg) << ',' << format_double(row.mean_mistakes) << ','
        << format_double(row.max_mistakes) << '\n';
}

}  // namespace lpdnet
