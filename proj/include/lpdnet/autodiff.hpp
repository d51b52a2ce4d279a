#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "lpdnet/tensor.hpp"

namespace lpdnet {
namespace ad {

// Node in the reverse-mode tape. Nodes are created in topological order
// (parents before children), so backward just walks creation ids downward.
struct Node {
  Tensor value;
  Tensor grad;  // allocated on demand
  bool requires_grad = false;
  bool is_leaf = false;
  std::string name;  // parameters only
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Pulls this node's grad and pushes into parent grads (or the leaf sink).
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad() {
    if (grad.shape.empty()) grad = Tensor(value.shape);
    return grad;
  }
};

using Var = std::shared_ptr<Node>;

// Per-branch gradient sink keyed by leaf node. Used for deterministic
// ordered reductions when branches run on worker threads.
using GradSink = std::unordered_map<const Node*, Tensor>;

// Count of l2-normalize calls that hit an exact zero vector.
std::uint64_t zero_norm_warning_count();
void reset_zero_norm_warnings();

// Freezes discrete choices (relu masks, argmax picks, neighbor selections)
// across repeated builds of the same graph. The finite-difference checker
// records them at the base point and replays them for the perturbed
// evaluations, so every difference probes the smooth piece the analytic
// gradient differentiates instead of straddling a kink.
class SelectionTrace {
 public:
  enum class Mode { kRecord, kReplay };

  // Active trace for the current thread (null: ops select normally).
  static SelectionTrace*& current();

  void start_record() {
    mode_ = Mode::kRecord;
    masks_.clear();
    indices_.clear();
    rewind();
  }
  void start_replay() {
    mode_ = Mode::kReplay;
    rewind();
  }
  void rewind() {
    mask_cursor_ = 0;
    index_cursor_ = 0;
  }
  Mode mode() const { return mode_; }

  // Record the given choice, or replace it with the recorded one.
  std::vector<char> masks(std::vector<char> computed);
  std::vector<std::size_t> picks(std::vector<std::size_t> computed);
  std::size_t pick(std::size_t computed);

 private:
  Mode mode_ = Mode::kRecord;
  std::size_t mask_cursor_ = 0;
  std::size_t index_cursor_ = 0;
  std::vector<std::vector<char>> masks_;
  std::vector<std::vector<std::size_t>> indices_;
};

Var constant(Tensor value);
Var leaf(Tensor value, bool requires_grad, std::string name = {});

// y = x * w  (also the transform application when both sides carry grads)
Var matmul(const Var& x, const Var& w);
// y = x^T * w
Var matmul_tn(const Var& x, const Var& w);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
// y[i] = x[i] + b (b is 1 x cols)
Var add_bias(const Var& x, const Var& b);
Var relu(const Var& x);
// Row-wise softmax with max subtraction.
Var softmax_rows(const Var& x);
// Rows scaled to unit L2 norm; zero rows stay zero and raise the warning flag.
Var l2_normalize_rows(const Var& x);
// Column-wise max over all rows -> 1 x C; ties route gradient to the lowest row.
Var maxpool_points(const Var& x);
// x is (groups*k) x C; per-group column-wise max -> groups x C.
Var max_over_groups(const Var& x, std::size_t groups, std::size_t k);
// Elementwise max; ties route gradient to `a`.
Var max_elementwise(const Var& a, const Var& b);
Var gather_rows(const Var& x, std::vector<std::size_t> indices);
// Each row repeated k times, interleaved.
Var repeat_rows(const Var& x, std::size_t k);
Var concat_cols(const Var& a, const Var& b);
Var reshape(const Var& x, std::vector<std::size_t> shape);
Var sum_all(const Var& x);     // -> 1x1
Var colsum(const Var& x);      // -> 1 x C
// y[r] = x[r] * s[r]  (s is R x 1)
Var scale_rows(const Var& x, const Var& s);

// Shared per-point dense layer: y = x*w + b (single fused node). fc is the
// same contract on ordinary 2-D activations.
Var shared_mlp(const Var& x, const Var& w, const Var& b);
inline Var fc(const Var& x, const Var& w, const Var& b) { return shared_mlp(x, w, b); }

// Graph edge tensor: row (i*k + m) is [x_i ; x_i - x_j] for the m-th
// neighbor j of point i. Neighbor selection carries no gradient.
Var edge_features(const Var& x, const std::vector<std::size_t>& neighbors, std::size_t k);

// Reverse pass from a scalar root. With a sink, leaf gradients go into the
// map instead of the shared leaf nodes (thread-safe per branch). seed
// defaults to 1.
void backward(const Var& root, GradSink* sink = nullptr, const Tensor* seed = nullptr);

enum class Init { kGlorotUniform, kZeros };

// Named parameters with paired gradient buffers and a seeded initializer.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed);

  Var create(const std::string& name, std::vector<std::size_t> shape,
             Init init = Init::kGlorotUniform);
  Var create_with(const std::string& name, Tensor value);
  Var get(const std::string& name) const;
  bool has(const std::string& name) const { return params_.count(name) > 0; }

  void zero_grads();
  std::size_t total_elements() const;
  const std::map<std::string, Var>& all() const { return params_; }

  // Checkpoint container: 16-byte magic+version header, then entries
  // (name, shape, raw float64 data) in sorted name order.
  void save(const std::string& path) const;
  void load(const std::string& path);

 private:
  std::map<std::string, Var> params_;
  Rng rng_;
};

struct FdReport {
  double max_rel_err = 0.0;
  std::string worst_param;
};

// Central finite differences against the analytic gradients of
// build_loss(). Relative error uses max(|a|, |b|, 1e-4) as denominator.
FdReport finite_difference_check(const std::function<Var()>& build_loss, ParamStore& store,
                                 double eps);

}  // namespace ad
}  // namespace lpdnet
