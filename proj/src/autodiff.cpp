#include "lpdnet/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace lpdnet {
namespace ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

std::atomic<std::uint64_t> g_next_id{1};
std::atomic<std::uint64_t> g_zero_norm_warnings{0};

thread_local GradSink* t_sink = nullptr;

MatMap map(Tensor& t) { return MatMap(t.data.data(), t.rows(), t.cols()); }
CMatMap cmap(const Tensor& t) { return CMatMap(t.data.data(), t.rows(), t.cols()); }

void check_finite(const Tensor& t, const char* op) {
  // A sum of finite doubles in our value ranges is finite; any NaN/Inf
  // poisons it. One vectorizable pass instead of per-element branches.
  double probe = 0.0;
  for (double v : t.data) probe += v;
  if (!std::isfinite(probe)) {
    for (double v : t.data)
      if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output");
  }
}

Var make_node(Tensor value, std::vector<Var> parents, const char* op) {
  check_finite(value, op);
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  for (auto& p : parents) {
    if (p->requires_grad) node->requires_grad = true;
  }
  node->parents = std::move(parents);
  return node;
}

// Gradient destination for a parent: the shared buffer, or the per-branch
// sink when one is active and the parent is a leaf.
Tensor& grad_dest(const Var& parent) {
  if (t_sink != nullptr && parent->is_leaf) {
    auto [it, inserted] = t_sink->try_emplace(parent.get());
    if (inserted) it->second = Tensor(parent->value.shape);
    return it->second;
  }
  return parent->ensure_grad();
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value)) throw DataError(std::string(op) + ": shape mismatch");
}

}  // namespace

std::uint64_t zero_norm_warning_count() { return g_zero_norm_warnings.load(); }
void reset_zero_norm_warnings() { g_zero_norm_warnings.store(0); }

SelectionTrace*& SelectionTrace::current() {
  thread_local SelectionTrace* trace = nullptr;
  return trace;
}

std::vector<char> SelectionTrace::masks(std::vector<char> computed) {
  if (mode_ == Mode::kRecord) {
    masks_.push_back(computed);
    ++mask_cursor_;
    return computed;
  }
  if (mask_cursor_ >= masks_.size())
    throw NumericError("SelectionTrace: replay ran past the recorded masks");
  return masks_[mask_cursor_++];
}

std::vector<std::size_t> SelectionTrace::picks(std::vector<std::size_t> computed) {
  if (mode_ == Mode::kRecord) {
    indices_.push_back(computed);
    ++index_cursor_;
    return computed;
  }
  if (index_cursor_ >= indices_.size())
    throw NumericError("SelectionTrace: replay ran past the recorded picks");
  return indices_[index_cursor_++];
}

std::size_t SelectionTrace::pick(std::size_t computed) {
  return picks({computed})[0];
}

Var constant(Tensor value) {
  auto node = make_node(std::move(value), {}, "constant");
  node->is_leaf = true;
  return node;
}

Var leaf(Tensor value, bool requires_grad, std::string name) {
  auto node = make_node(std::move(value), {}, "leaf");
  node->is_leaf = true;
  node->requires_grad = requires_grad;
  node->name = std::move(name);
  return node;
}

Var matmul(const Var& x, const Var& w) {
  if (x->value.cols() != w->value.rows()) throw DataError("matmul: inner dimension mismatch");
  Tensor out({x->value.rows(), w->value.cols()});
  map(out).noalias() = cmap(x->value) * cmap(w->value);
  Var node = make_node(std::move(out), {x, w}, "matmul");
  if (node->requires_grad) {
    Var xs = x, ws = w;
    node->backward_fn = [xs, ws](Node& self) {
      const CMatMap dy = cmap(self.grad);
      if (xs->requires_grad) map(grad_dest(xs)).noalias() += dy * cmap(ws->value).transpose();
      if (ws->requires_grad) map(grad_dest(ws)).noalias() += cmap(xs->value).transpose() * dy;
    };
  }
  return node;
}

Var matmul_tn(const Var& x, const Var& w) {
  if (x->value.rows() != w->value.rows()) throw DataError("matmul_tn: outer dimension mismatch");
  Tensor out({x->value.cols(), w->value.cols()});
  map(out).noalias() = cmap(x->value).transpose() * cmap(w->value);
  Var node = make_node(std::move(out), {x, w}, "matmul_tn");
  if (node->requires_grad) {
    Var xs = x, ws = w;
    node->backward_fn = [xs, ws](Node& self) {
      const CMatMap dy = cmap(self.grad);
      if (xs->requires_grad) map(grad_dest(xs)).noalias() += cmap(ws->value) * dy.transpose();
      if (ws->requires_grad) map(grad_dest(ws)).noalias() += cmap(xs->value) * dy;
    };
  }
  return node;
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b->value.data[i];
  Var node = make_node(std::move(out), {a, b}, "add");
  if (node->requires_grad) {
    Var as = a, bs = b;
    node->backward_fn = [as, bs](Node& self) {
      if (as->requires_grad) {
        Tensor& g = grad_dest(as);
        for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += self.grad.data[i];
      }
      if (bs->requires_grad) {
        Tensor& g = grad_dest(bs);
        for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += self.grad.data[i];
      }
    };
  }
  return node;
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b->value.data[i];
  Var node = make_node(std::move(out), {a, b}, "sub");
  if (node->requires_grad) {
    Var as = a, bs = b;
    node->backward_fn = [as, bs](Node& self) {
      if (as->requires_grad) {
        Tensor& g = grad_dest(as);
        for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += self.grad.data[i];
      }
      if (bs->requires_grad) {
        Tensor& g = grad_dest(bs);
        for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] -= self.grad.data[i];
      }
    };
  }
  return node;
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b->value.data[i];
  Var node = make_node(std::move(out), {a, b}, "mul");
  if (node->requires_grad) {
    Var as = a, bs = b;
    node->backward_fn = [as, bs](Node& self) {
      if (as->requires_grad) {
        Tensor& g = grad_dest(as);
        for (std::size_t i = 0; i < g.data.size(); ++i)
          g.data[i] += self.grad.data[i] * bs->value.data[i];
      }
      if (bs->requires_grad) {
        Tensor& g = grad_dest(bs);
        for (std::size_t i = 0; i < g.data.size(); ++i)
          g.data[i] += self.grad.data[i] * as->value.data[i];
      }
    };
  }
  return node;
}

Var scale(const Var& a, double c) {
  Tensor out = a->value;
  for (double& v : out.data) v *= c;
  Var node = make_node(std::move(out), {a}, "scale");
  if (node->requires_grad) {
    Var as = a;
    node->backward_fn = [as, c](Node& self) {
      Tensor& g = grad_dest(as);
      for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += c * self.grad.data[i];
    };
  }
  return node;
}

Var add_scalar(const Var& a, double c) {
  Tensor out = a->value;
  for (double& v : out.data) v += c;
  Var node = make_node(std::move(out), {a}, "add_scalar");
  if (node->requires_grad) {
    Var as = a;
    node->backward_fn = [as](Node& self) {
      Tensor& g = grad_dest(as);
      for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += self.grad.data[i];
    };
  }
  return node;
}

Var add_bias(const Var& x, const Var& b) {
  if (b->value.rows() != 1 || b->value.cols() != x->value.cols())
    throw DataError("add_bias: bias must be 1 x cols");
  Tensor out = x->value;
  const std::size_t rows = out.rows(), cols = out.cols();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.data[r * cols + c] += b->value.data[c];
  Var node = make_node(std::move(out), {x, b}, "add_bias");
  if (node->requires_grad) {
    Var xs = x, bs = b;
    node->backward_fn = [xs, bs](Node& self) {
      const std::size_t rows = self.grad.rows(), cols = self.grad.cols();
      if (xs->requires_grad) {
        Tensor& g = grad_dest(xs);
        for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += self.grad.data[i];
      }
      if (bs->requires_grad) {
        Tensor& g = grad_dest(bs);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) g.data[c] += self.grad.data[r * cols + c];
      }
    };
  }
  return node;
}

Var relu(const Var& x) {
  std::vector<char> mask(x->value.data.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = x->value.data[i] > 0.0 ? 1 : 0;
  if (SelectionTrace* trace = SelectionTrace::current()) mask = trace->masks(std::move(mask));

  Tensor out = x->value;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    if (!mask[i]) out.data[i] = 0.0;
  Var node = make_node(std::move(out), {x}, "relu");
  if (node->requires_grad) {
    Var xs = x;
    auto shared_mask = std::make_shared<std::vector<char>>(std::move(mask));
    node->backward_fn = [xs, shared_mask](Node& self) {
      Tensor& g = grad_dest(xs);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        if ((*shared_mask)[i]) g.data[i] += self.grad.data[i];
    };
  }
  return node;
}

Var softmax_rows(const Var& x) {
  Tensor out = x->value;
  const std::size_t rows = out.rows(), cols = out.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = &out.data[r * cols];
    double mx = row[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      sum += row[c];
    }
    for (std::size_t c = 0; c < cols; ++c) row[c] /= sum;
  }
  Var node = make_node(std::move(out), {x}, "softmax_rows");
  if (node->requires_grad) {
    Var xs = x;
    node->backward_fn = [xs](Node& self) {
      Tensor& g = grad_dest(xs);
      const std::size_t rows = self.value.rows(), cols = self.value.cols();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* s = &self.value.data[r * cols];
        const double* dy = &self.grad.data[r * cols];
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += dy[c] * s[c];
        double* gx = &g.data[r * cols];
        for (std::size_t c = 0; c < cols; ++c) gx[c] += s[c] * (dy[c] - dot);
      }
    };
  }
  return node;
}

Var l2_normalize_rows(const Var& x) {
  Tensor out = x->value;
  const std::size_t rows = out.rows(), cols = out.cols();
  std::vector<double> norms(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    const double* row = &out.data[r * cols];
    for (std::size_t c = 0; c < cols; ++c) s += row[c] * row[c];
    norms[r] = std::sqrt(s);
    double* w = &out.data[r * cols];
    if (norms[r] > 0.0) {
      for (std::size_t c = 0; c < cols; ++c) w[c] /= norms[r];
    } else {
      g_zero_norm_warnings.fetch_add(1, std::memory_order_relaxed);
      for (std::size_t c = 0; c < cols; ++c) w[c] = 0.0;
    }
  }
  Var node = make_node(std::move(out), {x}, "l2_normalize_rows");
  if (node->requires_grad) {
    Var xs = x;
    node->backward_fn = [xs, norms](Node& self) {
      Tensor& g = grad_dest(xs);
      const std::size_t rows = self.value.rows(), cols = self.value.cols();
      for (std::size_t r = 0; r < rows; ++r) {
        if (norms[r] <= 0.0) continue;  // zero row: gradient defined as zero
        const double* y = &self.value.data[r * cols];
        const double* dy = &self.grad.data[r * cols];
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += y[c] * dy[c];
        double* gx = &g.data[r * cols];
        for (std::size_t c = 0; c < cols; ++c) gx[c] += (dy[c] - y[c] * dot) / norms[r];
      }
    };
  }
  return node;
}

Var maxpool_points(const Var& x) {
  const std::size_t rows = x->value.rows(), cols = x->value.cols();
  if (rows == 0) throw DataError("maxpool_points: empty input");
  std::vector<std::size_t> argmax(cols, 0);
  for (std::size_t c = 0; c < cols; ++c) {
    double best = x->value.data[c];
    for (std::size_t r = 1; r < rows; ++r) {
      const double v = x->value.data[r * cols + c];
      if (v > best) {
        best = v;
        argmax[c] = r;
      }
    }
  }
  if (SelectionTrace* trace = SelectionTrace::current()) argmax = trace->picks(std::move(argmax));
  Tensor out({1, cols});
  for (std::size_t c = 0; c < cols; ++c) out.data[c] = x->value.data[argmax[c] * cols + c];
  Var node = make_node(std::move(out), {x}, "maxpool_points");
  if (node->requires_grad) {
    Var xs = x;
    node->backward_fn = [xs, argmax, cols](Node& self) {
      Tensor& g = grad_dest(xs);
      for (std::size_t c = 0; c < cols; ++c) g.data[argmax[c] * cols + c] += self.grad.data[c];
    };
  }
  return node;
}

Var max_over_groups(const Var& x, std::size_t groups, std::size_t k) {
  const std::size_t rows = x->value.rows(), cols = x->value.cols();
  if (rows != groups * k || k == 0) throw DataError("max_over_groups: bad grouping");
  std::vector<std::size_t> argmax(groups * cols, 0);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t c = 0; c < cols; ++c) {
      double best = x->value.data[(g * k) * cols + c];
      std::size_t best_r = g * k;
      for (std::size_t j = 1; j < k; ++j) {
        const double v = x->value.data[(g * k + j) * cols + c];
        if (v > best) {
          best = v;
          best_r = g * k + j;
        }
      }
      argmax[g * cols + c] = best_r;
    }
  }
  if (SelectionTrace* trace = SelectionTrace::current()) argmax = trace->picks(std::move(argmax));
  Tensor out({groups, cols});
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t c = 0; c < cols; ++c)
      out.data[g * cols + c] = x->value.data[argmax[g * cols + c] * cols + c];
  Var node = make_node(std::move(out), {x}, "max_over_groups");
  if (node->requires_grad) {
    Var xs = x;
    node->backward_fn = [xs, argmax, groups, cols](Node& self) {
      Tensor& g = grad_dest(xs);
      for (std::size_t i = 0; i < groups * cols; ++i) {
        const std::size_t c = i % cols;
        g.data[argmax[i] * cols + c] += self.grad.data[i];
      }
    };
  }
  return node;
}

Var max_elementwise(const Var& a, const Var& b) {
  require_same_shape(a, b, "max_elementwise");
  std::vector<char> from_a(a->value.data.size());
  for (std::size_t i = 0; i < from_a.size(); ++i)
    from_a[i] = a->value.data[i] >= b->value.data[i] ? 1 : 0;
  if (SelectionTrace* trace = SelectionTrace::current()) from_a = trace->masks(std::move(from_a));

  Tensor out = a->value;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = from_a[i] ? a->value.data[i] : b->value.data[i];
  Var node = make_node(std::move(out), {a, b}, "max_elementwise");
  if (node->requires_grad) {
    Var as = a, bs = b;
    auto mask = std::make_shared<std::vector<char>>(std::move(from_a));
    node->backward_fn = [as, bs, mask](Node& self) {
      if (as->requires_grad) {
        Tensor& g = grad_dest(as);
        for (std::size_t i = 0; i < g.data.size(); ++i)
          if ((*mask)[i]) g.data[i] += self.grad.data[i];
      }
      if (bs->requires_grad) {
        Tensor& g = grad_dest(bs);
        for (std::size_t i = 0; i < g.data.size(); ++i)
          if (!(*mask)[i]) g.data[i] += self.grad.data[i];
      }
    };
  }
  return node;
}

Var gather_rows(const Var& x, std::vector<std::size_t> indices) {
  const std::size_t cols = x->value.cols();
  Tensor out({indices.size(), cols});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x->value.rows()) throw DataError("gather_rows: index out of range");
    std::copy_n(&x->value.data[indices[i] * cols], cols, &out.data[i * cols]);
  }
  Var node = make_node(std::move(out), {x}, "gather_rows");
  if (node->requires_grad) {
    Var xs = x;
    auto idx = std::make_shared<std::vector<std::size_t>>(std::move(indices));
    node->backward_fn = [xs, idx, cols](Node& self) {
      Tensor& g = grad_dest(xs);
      for (std::size_t i = 0; i < idx->size(); ++i) {
        const double* src = &self.grad.data[i * cols];
        double* dst = &g.data[(*idx)[i] * cols];
        for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
      }
    };
  }
  return node;
}

Var repeat_rows(const Var& x, std::size_t k) {
  const std::size_t rows = x->value.rows(), cols = x->value.cols();
  Tensor out({rows * k, cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < k; ++j)
      std::copy_n(&x->value.data[r * cols], cols, &out.data[(r * k + j) * cols]);
  Var node = make_node(std::move(out), {x}, "repeat_rows");
  if (node->requires_grad) {
    Var xs = x;
    node->backward_fn = [xs, k, rows, cols](Node& self) {
      Tensor& g = grad_dest(xs);
      for (std::size_t r = 0; r < rows; ++r) {
        double* dst = &g.data[r * cols];
        for (std::size_t j = 0; j < k; ++j) {
          const double* src = &self.grad.data[(r * k + j) * cols];
          for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
        }
      }
    };
  }
  return node;
}

Var concat_cols(const Var& a, const Var& b) {
  if (a->value.rows() != b->value.rows()) throw DataError("concat_cols: row mismatch");
  const std::size_t rows = a->value.rows();
  const std::size_t ca = a->value.cols(), cb = b->value.cols();
  Tensor out({rows, ca + cb});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(&a->value.data[r * ca], ca, &out.data[r * (ca + cb)]);
    std::copy_n(&b->value.data[r * cb], cb, &out.data[r * (ca + cb) + ca]);
  }
  Var node = make_node(std::move(out), {a, b}, "concat_cols");
  if (node->requires_grad) {
    Var as = a, bs = b;
    node->backward_fn = [as, bs, rows, ca, cb](Node& self) {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* src = &self.grad.data[r * (ca + cb)];
        if (as->requires_grad) {
          double* dst = &grad_dest(as).data[r * ca];
          for (std::size_t c = 0; c < ca; ++c) dst[c] += src[c];
        }
        if (bs->requires_grad) {
          double* dst = &grad_dest(bs).data[r * cb];
          for (std::size_t c = 0; c < cb; ++c) dst[c] += src[ca + c];
        }
      }
    };
  }
  return node;
}

Var reshape(const Var& x, std::vector<std::size_t> shape) {
  Tensor out(std::move(shape));
  if (out.numel() != x->value.numel()) throw DataError("reshape: element count mismatch");
  out.data = x->value.data;
  Var node = make_node(std::move(out), {x}, "reshape");
  if (node->requires_grad) {
    Var xs = x;
    node->backward_fn = [xs](Node& self) {
      Tensor& g = grad_dest(xs);
      for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += self.grad.data[i];
    };
  }
  return node;
}

Var sum_all(const Var& x) {
  Tensor out({1, 1});
  double s = 0.0;
  for (double v : x->value.data) s += v;
  out.data[0] = s;
  Var node = make_node(std::move(out), {x}, "sum_all");
  if (node->requires_grad) {
    Var xs = x;
    node->backward_fn = [xs](Node& self) {
      Tensor& g = grad_dest(xs);
      const double dy = self.grad.data[0];
      for (double& v : g.data) v += dy;
    };
  }
  return node;
}

Var colsum(const Var& x) {
  const std::size_t rows = x->value.rows(), cols = x->value.cols();
  Tensor out({1, cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.data[c] += x->value.data[r * cols + c];
  Var node = make_node(std::move(out), {x}, "colsum");
  if (node->requires_grad) {
    Var xs = x;
    node->backward_fn = [xs, rows, cols](Node& self) {
      Tensor& g = grad_dest(xs);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) g.data[r * cols + c] += self.grad.data[c];
    };
  }
  return node;
}

Var scale_rows(const Var& x, const Var& s) {
  if (s->value.rows() != x->value.rows() || s->value.cols() != 1)
    throw DataError("scale_rows: scale must be rows x 1");
  const std::size_t rows = x->value.rows(), cols = x->value.cols();
  Tensor out = x->value;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.data[r * cols + c] *= s->value.data[r];
  Var node = make_node(std::move(out), {x, s}, "scale_rows");
  if (node->requires_grad) {
    Var xs = x, ss = s;
    node->backward_fn = [xs, ss, rows, cols](Node& self) {
      if (xs->requires_grad) {
        Tensor& g = grad_dest(xs);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c)
            g.data[r * cols + c] += self.grad.data[r * cols + c] * ss->value.data[r];
      }
      if (ss->requires_grad) {
        Tensor& g = grad_dest(ss);
        for (std::size_t r = 0; r < rows; ++r) {
          double acc = 0.0;
          for (std::size_t c = 0; c < cols; ++c)
            acc += self.grad.data[r * cols + c] * xs->value.data[r * cols + c];
          g.data[r] += acc;
        }
      }
    };
  }
  return node;
}

Var shared_mlp(const Var& x, const Var& w, const Var& b) {
  if (x->value.cols() != w->value.rows()) throw DataError("shared_mlp: inner dimension mismatch");
  if (b->value.rows() != 1 || b->value.cols() != w->value.cols())
    throw DataError("shared_mlp: bias must be 1 x out");
  const std::size_t rows = x->value.rows(), cols = w->value.cols();
  Tensor out({rows, cols});
  map(out).noalias() = cmap(x->value) * cmap(w->value);
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = &out.data[r * cols];
    for (std::size_t c = 0; c < cols; ++c) row[c] += b->value.data[c];
  }
  Var node = make_node(std::move(out), {x, w, b}, "shared_mlp");
  if (node->requires_grad) {
    Var xs = x, ws = w, bs = b;
    node->backward_fn = [xs, ws, bs](Node& self) {
      const CMatMap dy = cmap(self.grad);
      if (xs->requires_grad) map(grad_dest(xs)).noalias() += dy * cmap(ws->value).transpose();
      if (ws->requires_grad) map(grad_dest(ws)).noalias() += cmap(xs->value).transpose() * dy;
      if (bs->requires_grad) {
        Tensor& g = grad_dest(bs);
        const std::size_t rows = self.grad.rows(), cols = self.grad.cols();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) g.data[c] += self.grad.data[r * cols + c];
      }
    };
  }
  return node;
}

Var edge_features(const Var& x, const std::vector<std::size_t>& neighbors, std::size_t k) {
  const std::size_t n = x->value.rows(), cols = x->value.cols();
  if (neighbors.size() != n * k) throw DataError("edge_features: neighbor list size mismatch");
  Tensor out({n * k, 2 * cols});
  for (std::size_t i = 0; i < n; ++i) {
    const double* center = &x->value.data[i * cols];
    for (std::size_t m = 0; m < k; ++m) {
      const std::size_t j = neighbors[i * k + m];
      if (j >= n) throw DataError("edge_features: neighbor index out of range");
      const double* nb = &x->value.data[j * cols];
      double* row = &out.data[(i * k + m) * 2 * cols];
      for (std::size_t c = 0; c < cols; ++c) {
        row[c] = center[c];
        row[cols + c] = center[c] - nb[c];
      }
    }
  }
  Var node = make_node(std::move(out), {x}, "edge_features");
  if (node->requires_grad) {
    Var xs = x;
    auto idx = std::make_shared<std::vector<std::size_t>>(neighbors);
    node->backward_fn = [xs, idx, n, k, cols](Node& self) {
      Tensor& g = grad_dest(xs);
      for (std::size_t i = 0; i < n; ++i) {
        double* gc = &g.data[i * cols];
        for (std::size_t m = 0; m < k; ++m) {
          const std::size_t j = (*idx)[i * k + m];
          const double* row = &self.grad.data[(i * k + m) * 2 * cols];
          double* gn = &g.data[j * cols];
          for (std::size_t c = 0; c < cols; ++c) {
            gc[c] += row[c] + row[cols + c];
            gn[c] -= row[cols + c];
          }
        }
      }
    };
  }
  return node;
}

void backward(const Var& root, GradSink* sink, const Tensor* seed) {
  if (!root->requires_grad) return;

  // Collect the reachable differentiable subgraph.
  std::vector<Node*> nodes;
  std::unordered_map<Node*, bool> visited;
  std::vector<Node*> stack{root.get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (visited.count(n)) continue;
    visited[n] = true;
    nodes.push_back(n);
    for (auto& p : n->parents)
      if (p->requires_grad && !p->is_leaf) stack.push_back(p.get());
  }
  std::sort(nodes.begin(), nodes.end(), [](Node* a, Node* b) { return a->id > b->id; });

  Tensor& rg = root->ensure_grad();
  if (seed != nullptr) {
    if (!seed->same_shape(root->value)) throw DataError("backward: seed shape mismatch");
    for (std::size_t i = 0; i < rg.data.size(); ++i) rg.data[i] += seed->data[i];
  } else {
    if (root->value.numel() != 1) throw DataError("backward: root must be scalar without seed");
    rg.data[0] += 1.0;
  }

  GradSink* prev = t_sink;
  t_sink = sink;
  try {
    for (Node* n : nodes) {
      if (n->backward_fn && !n->grad.shape.empty()) n->backward_fn(*n);
      if (!n->is_leaf) n->grad = Tensor();  // free intermediate gradient storage
    }
  } catch (...) {
    t_sink = prev;
    throw;
  }
  t_sink = prev;
}

ParamStore::ParamStore(std::uint64_t seed) : rng_(mix_seed(seed, 0x9a7a)) {}

Var ParamStore::create(const std::string& name, std::vector<std::size_t> shape, Init init) {
  if (params_.count(name)) throw DataError("ParamStore: duplicate parameter '" + name + "'");
  Tensor value(shape);
  if (init == Init::kGlorotUniform) {
    const double fan_in = static_cast<double>(shape.empty() ? 1 : shape[0]);
    const double fan_out = static_cast<double>(shape.size() > 1 ? shape[1] : 1);
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (double& v : value.data) v = rng_.uniform(-limit, limit);
  }
  Var node = leaf(std::move(value), true, name);
  node->ensure_grad();
  params_[name] = node;
  return node;
}

Var ParamStore::create_with(const std::string& name, Tensor value) {
  if (params_.count(name)) throw DataError("ParamStore: duplicate parameter '" + name + "'");
  Var node = leaf(std::move(value), true, name);
  node->ensure_grad();
  params_[name] = node;
  return node;
}

Var ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw DataError("ParamStore: unknown parameter '" + name + "'");
  return it->second;
}

void ParamStore::zero_grads() {
  for (auto& [name, p] : params_) {
    Tensor& g = p->ensure_grad();
    std::fill(g.data.begin(), g.data.end(), 0.0);
  }
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += p->value.numel();
  return n;
}

namespace {
constexpr char kMagic[12] = {'L', 'P', 'D', 'N', 'E', 'T', 'C', 'K', 'P', 'T', '\0', '\0'};
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

void ParamStore::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write(kMagic, sizeof(kMagic));
  write_pod(out, kVersion);
  for (const auto& [name, p] : params_) {  // std::map: sorted name order
    write_pod(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(out, static_cast<std::uint32_t>(p->value.shape.size()));
    for (auto d : p->value.shape) write_pod(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(p->value.data.data()),
              static_cast<std::streamsize>(p->value.data.size() * sizeof(double)));
  }
  if (!out) throw DataError("checkpoint write failed: " + path);
}

void ParamStore::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  char magic[12];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw DataError("bad checkpoint magic: " + path);
  std::uint32_t version = 0;
  read_pod(in, version);
  if (version != kVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));

  while (true) {
    std::uint32_t name_len = 0;
    read_pod(in, name_len);
    if (!in) break;  // clean EOF
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    std::uint32_t ndim = 0;
    read_pod(in, ndim);
    std::vector<std::size_t> shape(ndim);
    for (auto& d : shape) {
      std::uint64_t v = 0;
      read_pod(in, v);
      d = static_cast<std::size_t>(v);
    }
    Tensor value(shape);
    in.read(reinterpret_cast<char*>(value.data.data()),
            static_cast<std::streamsize>(value.data.size() * sizeof(double)));
    if (!in) throw DataError("truncated checkpoint entry '" + name + "': " + path);

    auto it = params_.find(name);
    if (it != params_.end()) {
      if (it->second->value.shape != shape)
        throw DataError("checkpoint shape mismatch for '" + name + "'");
      it->second->value = std::move(value);
    } else {
      create_with(name, std::move(value));
    }
  }
}

FdReport finite_difference_check(const std::function<Var()>& build_loss, ParamStore& store,
                                 double eps) {
  if (!(eps > 0.0)) throw DataError("finite_difference_check: eps must be > 0");

  // Discrete selections recorded here stay frozen for the perturbed
  // evaluations below, so each difference quotient measures the smooth
  // piece the analytic gradient belongs to.
  SelectionTrace trace;
  SelectionTrace*& active = SelectionTrace::current();
  SelectionTrace* previous = active;
  active = &trace;
  struct Restore {
    SelectionTrace*& slot;
    SelectionTrace* value;
    ~Restore() { slot = value; }
  } restore{active, previous};

  trace.start_record();
  store.zero_grads();
  Var loss = build_loss();
  if (loss->value.numel() != 1) throw NumericError("finite_difference_check: loss not scalar");
  backward(loss);
  loss.reset();

  std::map<std::string, Tensor> analytic;
  for (const auto& [name, p] : store.all()) analytic[name] = p->grad;

  trace.start_replay();
  auto eval = [&]() {
    trace.rewind();
    return build_loss()->value.scalar();
  };

  FdReport report;
  for (const auto& [name, p] : store.all()) {
    Tensor& value = p->value;
    for (std::size_t i = 0; i < value.data.size(); ++i) {
      const double orig = value.data[i];
      value.data[i] = orig + eps;
      const double f_plus = eval();
      value.data[i] = orig - eps;
      const double f_minus = eval();
      value.data[i] = orig;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
        throw NumericError("finite_difference_check: non-finite loss at '" + name + "'");
      const double fd = (f_plus - f_minus) / (2.0 * eps);
      const double an = analytic[name].data[i];
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-4});
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

}  // namespace ad
}  // namespace lpdnet
