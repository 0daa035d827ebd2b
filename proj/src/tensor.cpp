#include "fedsplit/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace fedsplit {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

thread_local bool g_grad_enabled = true;

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!g_grad_enabled) return false;
  for (const Tensor* t : inputs) {
    if (t->node()->participates()) return true;
  }
  return false;
}

void accumulate(TensorNode& dst, const float* g, int64_t n) {
  if (!dst.participates()) return;
  dst.ensure_grad();
  for (int64_t i = 0; i < n; ++i) dst.grad[static_cast<size_t>(i)] += g[static_cast<size_t>(i)];
}

std::shared_ptr<TensorNode> make_node(std::vector<int> shape, std::vector<float> data) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  return n;
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream out;
  out << '(';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ')';
  return out.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor Tensor::zeros(const std::vector<int>& shape, bool requires_grad) {
  return full(shape, 0.0f, requires_grad);
}

Tensor Tensor::full(const std::vector<int>& shape, float value, bool requires_grad) {
  auto n = make_node(shape, std::vector<float>(static_cast<size_t>(shape_numel(shape)), value));
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from_data(const std::vector<int>& shape, std::vector<float> data,
                         bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw DimensionError("from_data: shape " + shape_str(shape) + " does not match data length " +
                         std::to_string(data.size()));
  }
  auto n = make_node(shape, std::move(data));
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

float Tensor::item() const {
  if (size() != 1) throw DimensionError("item: tensor has " + std::to_string(size()) + " values");
  return n_->data[0];
}

const std::vector<float>& Tensor::grad() const {
  if (n_->grad.empty()) throw DimensionError("grad: gradient not populated; run backward() first");
  return n_->grad;
}

std::vector<float>& Tensor::mutable_grad() {
  n_->ensure_grad();
  return n_->grad;
}

Tensor Tensor::clone() const {
  auto n = make_node(n_->shape, n_->data);
  n->requires_grad = n_->requires_grad;
  return Tensor(std::move(n));
}

void Tensor::backward() {
  if (size() != 1) throw DimensionError("backward: loss must be scalar, got " + shape_str(shape()));
  backward({1.0f});
}

void Tensor::backward(const std::vector<float>& seed) {
  if (static_cast<int64_t>(seed.size()) != size()) {
    throw DimensionError("backward: seed length " + std::to_string(seed.size()) +
                         " does not match tensor size " + std::to_string(size()));
  }
  // Iterative post-order DFS producing a topological order of the DAG.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  struct Item {
    TensorNode* node;
    size_t next_parent;
  };
  std::vector<Item> stack{{n_.get(), 0}};
  visited.insert(n_.get());
  while (!stack.empty()) {
    Item& top = stack.back();
    if (top.next_parent < top.node->parents.size()) {
      TensorNode* p = top.node->parents[top.next_parent++].get();
      if (visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(top.node);
      stack.pop_back();
    }
  }
  n_->ensure_grad();
  for (size_t i = 0; i < seed.size(); ++i) n_->grad[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backprop && !node->grad.empty()) node->backprop(*node);
  }
}

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  const bool batched = sa.size() == 3;
  if (!((sa.size() == 2 && sb.size() == 2) || (sa.size() == 3 && sb.size() == 3))) {
    throw DimensionError("matmul: unsupported ranks " + shape_str(sa) + " x " + shape_str(sb));
  }
  const int B = batched ? sa[0] : 1;
  const int M = batched ? sa[1] : sa[0];
  const int K = batched ? sa[2] : sa[1];
  const int Kb = batched ? sb[1] : sb[0];
  const int N = batched ? sb[2] : sb[1];
  if (K != Kb || (batched && sb[0] != B)) {
    throw DimensionError("matmul: shape mismatch " + shape_str(sa) + " x " + shape_str(sb));
  }
  std::vector<int> out_shape = batched ? std::vector<int>{B, M, N} : std::vector<int>{M, N};
  auto out = make_node(out_shape, std::vector<float>(static_cast<size_t>(B) * M * N));
  for (int i = 0; i < B; ++i) {
    ConstMatMap ma(a.data().data() + static_cast<size_t>(i) * M * K, M, K);
    ConstMatMap mb(b.data().data() + static_cast<size_t>(i) * K * N, K, N);
    MatMap mo(out->data.data() + static_cast<size_t>(i) * M * N, M, N);
    mo.noalias() = ma * mb;
  }
  Tensor result(out);
  if (tracking({&a, &b})) {
    auto na = a.node();
    auto nb = b.node();
    out->parents = {na, nb};
    out->backprop = [na, nb, B, M, K, N](const TensorNode& self) {
      if (na->participates()) {
        na->ensure_grad();
        for (int i = 0; i < B; ++i) {
          ConstMatMap g(self.grad.data() + static_cast<size_t>(i) * M * N, M, N);
          ConstMatMap mb(nb->data.data() + static_cast<size_t>(i) * K * N, K, N);
          MatMap da(na->grad.data() + static_cast<size_t>(i) * M * K, M, K);
          da.noalias() += g * mb.transpose();
        }
      }
      if (nb->participates()) {
        nb->ensure_grad();
        for (int i = 0; i < B; ++i) {
          ConstMatMap g(self.grad.data() + static_cast<size_t>(i) * M * N, M, N);
          ConstMatMap ma(na->data.data() + static_cast<size_t>(i) * M * K, M, K);
          MatMap db(nb->grad.data() + static_cast<size_t>(i) * K * N, K, N);
          db.noalias() += ma.transpose() * g;
        }
      }
    };
  }
  return result;
}

namespace {

Tensor elementwise_binary(const Tensor& a, const Tensor& b, float sign_b, bool is_mul) {
  if (a.shape() != b.shape()) {
    throw DimensionError("elementwise op: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const int64_t n = a.size();
  std::vector<float> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const size_t u = static_cast<size_t>(i);
    out[u] = is_mul ? a.data()[u] * b.data()[u] : a.data()[u] + sign_b * b.data()[u];
  }
  auto node = make_node(a.shape(), std::move(out));
  Tensor result(node);
  if (tracking({&a, &b})) {
    auto na = a.node();
    auto nb = b.node();
    node->parents = {na, nb};
    node->backprop = [na, nb, sign_b, is_mul, n](const TensorNode& self) {
      if (na->participates()) {
        na->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
          const size_t u = static_cast<size_t>(i);
          na->grad[u] += is_mul ? self.grad[u] * nb->data[u] : self.grad[u];
        }
      }
      if (nb->participates()) {
        nb->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
          const size_t u = static_cast<size_t>(i);
          nb->grad[u] += is_mul ? self.grad[u] * na->data[u] : sign_b * self.grad[u];
        }
      }
    };
  }
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise_binary(a, b, 1.0f, false); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise_binary(a, b, -1.0f, false); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise_binary(a, b, 0.0f, true); }

Tensor scale(const Tensor& a, float c) {
  const int64_t n = a.size();
  std::vector<float> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = a.data()[static_cast<size_t>(i)] * c;
  auto node = make_node(a.shape(), std::move(out));
  Tensor result(node);
  if (tracking({&a})) {
    auto na = a.node();
    node->parents = {na};
    node->backprop = [na, c, n](const TensorNode& self) {
      if (!na->participates()) return;
      na->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        const size_t u = static_cast<size_t>(i);
        na->grad[u] += c * self.grad[u];
      }
    };
  }
  return result;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || x.shape().back() != bias.dim(0)) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match x " +
                         shape_str(x.shape()));
  }
  const int64_t c = bias.size();
  const int64_t rows = x.size() / c;
  std::vector<float> out(x.data());
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t j = 0; j < c; ++j) {
      out[static_cast<size_t>(r * c + j)] += bias.data()[static_cast<size_t>(j)];
    }
  }
  auto node = make_node(x.shape(), std::move(out));
  Tensor result(node);
  if (tracking({&x, &bias})) {
    auto nx = x.node();
    auto nb = bias.node();
    node->parents = {nx, nb};
    node->backprop = [nx, nb, rows, c](const TensorNode& self) {
      if (nx->participates()) accumulate(*nx, self.grad.data(), rows * c);
      if (nb->participates()) {
        nb->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          for (int64_t j = 0; j < c; ++j) {
            nb->grad[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(r * c + j)];
          }
        }
      }
    };
  }
  return result;
}

Tensor softmax(const Tensor& x, int axis) {
  const auto& shape = x.shape();
  if (axis < 0 || axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " +
                         shape_str(shape));
  }
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= shape[static_cast<size_t>(i)];
  const int64_t n = shape[static_cast<size_t>(axis)];
  std::vector<float> out(static_cast<size_t>(x.size()));
  const auto& in = x.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t j = 0; j < inner; ++j) {
      const int64_t base = o * n * inner + j;
      float m = in[static_cast<size_t>(base)];
      for (int64_t i = 1; i < n; ++i) m = std::max(m, in[static_cast<size_t>(base + i * inner)]);
      double z = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const float e = std::exp(in[static_cast<size_t>(base + i * inner)] - m);
        out[static_cast<size_t>(base + i * inner)] = e;
        z += e;
      }
      const float invz = static_cast<float>(1.0 / z);
      for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(base + i * inner)] *= invz;
    }
  }
  auto node = make_node(shape, std::move(out));
  Tensor result(node);
  if (tracking({&x})) {
    auto nx = x.node();
    node->parents = {nx};
    node->backprop = [nx, outer, inner, n](const TensorNode& self) {
      if (!nx->participates()) return;
      nx->ensure_grad();
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t j = 0; j < inner; ++j) {
          const int64_t base = o * n * inner + j;
          double dot = 0.0;
          for (int64_t i = 0; i < n; ++i) {
            const size_t u = static_cast<size_t>(base + i * inner);
            dot += static_cast<double>(self.grad[u]) * self.data[u];
          }
          for (int64_t i = 0; i < n; ++i) {
            const size_t u = static_cast<size_t>(base + i * inner);
            nx->grad[u] += self.data[u] * (self.grad[u] - static_cast<float>(dot));
          }
        }
      }
    };
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const int64_t c = x.shape().back();
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != c || beta.dim(0) != c) {
    throw DimensionError("layer_norm: gamma/beta must be 1-D of length " + std::to_string(c));
  }
  const int64_t rows = x.size() / c;
  std::vector<float> out(static_cast<size_t>(x.size()));
  // Normalized values are saved for the backward pass.
  auto xhat = std::make_shared<std::vector<float>>(static_cast<size_t>(x.size()));
  auto inv_sigma = std::make_shared<std::vector<float>>(static_cast<size_t>(rows));
  const auto& in = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t base = r * c;
    double mean = 0.0;
    for (int64_t j = 0; j < c; ++j) mean += in[static_cast<size_t>(base + j)];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      const double d = in[static_cast<size_t>(base + j)] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*inv_sigma)[static_cast<size_t>(r)] = is;
    for (int64_t j = 0; j < c; ++j) {
      const size_t u = static_cast<size_t>(base + j);
      const float xh = (in[u] - static_cast<float>(mean)) * is;
      (*xhat)[u] = xh;
      out[u] = xh * gamma.data()[static_cast<size_t>(j)] + beta.data()[static_cast<size_t>(j)];
    }
  }
  auto node = make_node(x.shape(), std::move(out));
  Tensor result(node);
  if (tracking({&x, &gamma, &beta})) {
    auto nx = x.node();
    auto ng = gamma.node();
    auto nb = beta.node();
    node->parents = {nx, ng, nb};
    node->backprop = [nx, ng, nb, xhat, inv_sigma, rows, c](const TensorNode& self) {
      for (int64_t r = 0; r < rows; ++r) {
        const int64_t base = r * c;
        if (ng->participates()) {
          ng->ensure_grad();
          for (int64_t j = 0; j < c; ++j) {
            const size_t u = static_cast<size_t>(base + j);
            ng->grad[static_cast<size_t>(j)] += self.grad[u] * (*xhat)[u];
          }
        }
        if (nb->participates()) {
          nb->ensure_grad();
          for (int64_t j = 0; j < c; ++j) {
            nb->grad[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(base + j)];
          }
        }
        if (nx->participates()) {
          nx->ensure_grad();
          double sum_dxh = 0.0, sum_dxh_xh = 0.0;
          for (int64_t j = 0; j < c; ++j) {
            const size_t u = static_cast<size_t>(base + j);
            const double dxh =
                static_cast<double>(self.grad[u]) * ng->data[static_cast<size_t>(j)];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * (*xhat)[u];
          }
          const double mean_dxh = sum_dxh / static_cast<double>(c);
          const double mean_dxh_xh = sum_dxh_xh / static_cast<double>(c);
          const float is = (*inv_sigma)[static_cast<size_t>(r)];
          for (int64_t j = 0; j < c; ++j) {
            const size_t u = static_cast<size_t>(base + j);
            const double dxh =
                static_cast<double>(self.grad[u]) * ng->data[static_cast<size_t>(j)];
            nx->grad[u] +=
                static_cast<float>(is * (dxh - mean_dxh - (*xhat)[u] * mean_dxh_xh));
          }
        }
      }
    };
  }
  return result;
}

Tensor gelu(const Tensor& x) {
  const int64_t n = x.size();
  std::vector<float> out(static_cast<size_t>(n));
  constexpr double kInvSqrt2 = 0.7071067811865475;
  for (int64_t i = 0; i < n; ++i) {
    const size_t u = static_cast<size_t>(i);
    const double v = x.data()[u];
    out[u] = static_cast<float>(v * 0.5 * (1.0 + std::erf(v * kInvSqrt2)));
  }
  auto node = make_node(x.shape(), std::move(out));
  Tensor result(node);
  if (tracking({&x})) {
    auto nx = x.node();
    node->parents = {nx};
    node->backprop = [nx, n](const TensorNode& self) {
      if (!nx->participates()) return;
      nx->ensure_grad();
      constexpr double kInvSqrt2 = 0.7071067811865475;
      constexpr double kInvSqrt2Pi = 0.3989422804014327;
      for (int64_t i = 0; i < n; ++i) {
        const size_t u = static_cast<size_t>(i);
        const double v = nx->data[u];
        const double phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        nx->grad[u] += self.grad[u] * static_cast<float>(phi + v * pdf);
      }
    };
  }
  return result;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2) {
    throw DimensionError("cross_entropy: logits must be 2-D, got " + shape_str(logits.shape()));
  }
  const int64_t rows = logits.dim(0);
  const int64_t c = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  }
  int64_t count = 0;
  double total = 0.0;
  const auto& in = logits.data();
  for (int64_t r = 0; r < rows; ++r) {
    const int t = targets[static_cast<size_t>(r)];
    if (t == kIgnoreLabel) continue;
    if (t < 0 || t >= c) {
      throw InputError("cross_entropy: target " + std::to_string(t) + " out of range [0, " +
                       std::to_string(c) + ")");
    }
    const int64_t base = r * c;
    float m = in[static_cast<size_t>(base)];
    for (int64_t j = 1; j < c; ++j) m = std::max(m, in[static_cast<size_t>(base + j)]);
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) z += std::exp(in[static_cast<size_t>(base + j)] - m);
    total += m + std::log(z) - in[static_cast<size_t>(base + t)];
    ++count;
  }
  const float loss = count > 0 ? static_cast<float>(total / count) : 0.0f;
  auto node = make_node({1}, {loss});
  Tensor result(node);
  if (tracking({&logits})) {
    auto nl = logits.node();
    auto tg = std::make_shared<std::vector<int>>(targets);
    node->parents = {nl};
    node->backprop = [nl, tg, rows, c, count](const TensorNode& self) {
      if (!nl->participates() || count == 0) return;
      nl->ensure_grad();
      const float g = self.grad[0] / static_cast<float>(count);
      for (int64_t r = 0; r < rows; ++r) {
        const int t = (*tg)[static_cast<size_t>(r)];
        if (t == kIgnoreLabel) continue;
        const int64_t base = r * c;
        float m = nl->data[static_cast<size_t>(base)];
        for (int64_t j = 1; j < c; ++j) m = std::max(m, nl->data[static_cast<size_t>(base + j)]);
        double z = 0.0;
        for (int64_t j = 0; j < c; ++j) z += std::exp(nl->data[static_cast<size_t>(base + j)] - m);
        for (int64_t j = 0; j < c; ++j) {
          const size_t u = static_cast<size_t>(base + j);
          const float p = static_cast<float>(std::exp(nl->data[u] - m) / z);
          nl->grad[u] += g * (p - (j == t ? 1.0f : 0.0f));
        }
      }
    };
  }
  return result;
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (float v : x.data()) total += v;
  auto node = make_node({1}, {static_cast<float>(total)});
  Tensor result(node);
  if (tracking({&x})) {
    auto nx = x.node();
    node->parents = {nx};
    node->backprop = [nx](const TensorNode& self) {
      if (!nx->participates()) return;
      nx->ensure_grad();
      for (auto& g : nx->grad) g += self.grad[0];
    };
  }
  return result;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) {
    throw DimensionError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  }
  const int64_t v = table.dim(0);
  const int64_t h = table.dim(1);
  std::vector<float> out(ids.size() * static_cast<size_t>(h));
  for (size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || id >= v) {
      throw InputError("embedding: id " + std::to_string(id) + " out of range [0, " +
                       std::to_string(v) + ")");
    }
    std::copy_n(table.data().begin() + static_cast<int64_t>(id) * h, h,
                out.begin() + static_cast<int64_t>(i) * h);
  }
  auto node = make_node({static_cast<int>(ids.size()), static_cast<int>(h)}, std::move(out));
  Tensor result(node);
  if (tracking({&table})) {
    auto nt = table.node();
    auto idc = std::make_shared<std::vector<int>>(ids);
    node->parents = {nt};
    node->backprop = [nt, idc, h](const TensorNode& self) {
      if (!nt->participates()) return;
      nt->ensure_grad();
      for (size_t i = 0; i < idc->size(); ++i) {
        const int64_t dst = static_cast<int64_t>((*idc)[i]) * h;
        const int64_t src = static_cast<int64_t>(i) * h;
        for (int64_t j = 0; j < h; ++j) {
          nt->grad[static_cast<size_t>(dst + j)] += self.grad[static_cast<size_t>(src + j)];
        }
      }
    };
  }
  return result;
}

Tensor reshape(const Tensor& x, const std::vector<int>& shape) {
  if (shape_numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  auto node = make_node(shape, x.data());
  Tensor result(node);
  if (tracking({&x})) {
    auto nx = x.node();
    node->parents = {nx};
    node->backprop = [nx](const TensorNode& self) {
      accumulate(*nx, self.grad.data(), self.size());
    };
  }
  return result;
}

namespace {

// Copies src (viewed as B matrices of M x N) transposed into dst.
void transpose_copy(const float* src, float* dst, int64_t b, int64_t m, int64_t n) {
  for (int64_t i = 0; i < b; ++i) {
    const float* s = src + i * m * n;
    float* d = dst + i * m * n;
    for (int64_t r = 0; r < m; ++r) {
      for (int64_t col = 0; col < n; ++col) d[col * m + r] = s[r * n + col];
    }
  }
}

}  // namespace

Tensor transpose_last2(const Tensor& x) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw DimensionError("transpose_last2: rank must be 2 or 3, got " + shape_str(x.shape()));
  }
  const int64_t b = x.rank() == 3 ? x.dim(0) : 1;
  const int64_t m = x.dim(x.rank() - 2);
  const int64_t n = x.dim(x.rank() - 1);
  std::vector<int> out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  std::vector<float> out(static_cast<size_t>(x.size()));
  transpose_copy(x.data().data(), out.data(), b, m, n);
  auto node = make_node(out_shape, std::move(out));
  Tensor result(node);
  if (tracking({&x})) {
    auto nx = x.node();
    node->parents = {nx};
    node->backprop = [nx, b, m, n](const TensorNode& self) {
      if (!nx->participates()) return;
      nx->ensure_grad();
      std::vector<float> tmp(self.grad.size());
      transpose_copy(self.grad.data(), tmp.data(), b, n, m);
      for (size_t i = 0; i < tmp.size(); ++i) nx->grad[i] += tmp[i];
    };
  }
  return result;
}

namespace {

// (B, L, H) <-> (B*heads, L, H/heads) index plumbing shared by both ops.
void heads_scatter(const float* src, float* dst, int64_t b, int64_t l, int64_t heads, int64_t dh,
                   bool splitting) {
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t hi = 0; hi < heads; ++hi) {
      for (int64_t li = 0; li < l; ++li) {
        const int64_t flat = ((bi * heads + hi) * l + li) * dh;
        const int64_t full = (bi * l + li) * heads * dh + hi * dh;
        if (splitting) {
          for (int64_t d = 0; d < dh; ++d) dst[flat + d] = src[full + d];
        } else {
          for (int64_t d = 0; d < dh; ++d) dst[full + d] = src[flat + d];
        }
      }
    }
  }
}

}  // namespace

Tensor split_heads(const Tensor& x, int heads) {
  if (x.rank() != 3 || x.dim(2) % heads != 0) {
    throw DimensionError("split_heads: need (B, L, H) with H divisible by heads, got " +
                         shape_str(x.shape()));
  }
  const int64_t b = x.dim(0), l = x.dim(1), dh = x.dim(2) / heads;
  std::vector<float> out(static_cast<size_t>(x.size()));
  heads_scatter(x.data().data(), out.data(), b, l, heads, dh, true);
  auto node = make_node({static_cast<int>(b) * heads, static_cast<int>(l), static_cast<int>(dh)},
                        std::move(out));
  Tensor result(node);
  if (tracking({&x})) {
    auto nx = x.node();
    node->parents = {nx};
    node->backprop = [nx, b, l, heads, dh](const TensorNode& self) {
      if (!nx->participates()) return;
      nx->ensure_grad();
      std::vector<float> tmp(self.grad.size());
      heads_scatter(self.grad.data(), tmp.data(), b, l, heads, dh, false);
      for (size_t i = 0; i < tmp.size(); ++i) nx->grad[i] += tmp[i];
    };
  }
  return result;
}

Tensor merge_heads(const Tensor& x, int heads) {
  if (x.rank() != 3 || x.dim(0) % heads != 0) {
    throw DimensionError("merge_heads: need (B*heads, L, dh), got " + shape_str(x.shape()));
  }
  const int64_t b = x.dim(0) / heads, l = x.dim(1), dh = x.dim(2);
  std::vector<float> out(static_cast<size_t>(x.size()));
  heads_scatter(x.data().data(), out.data(), b, l, heads, dh, false);
  auto node = make_node(
      {static_cast<int>(b), static_cast<int>(l), static_cast<int>(dh) * heads}, std::move(out));
  Tensor result(node);
  if (tracking({&x})) {
    auto nx = x.node();
    node->parents = {nx};
    node->backprop = [nx, b, l, heads, dh](const TensorNode& self) {
      if (!nx->participates()) return;
      nx->ensure_grad();
      std::vector<float> tmp(self.grad.size());
      heads_scatter(self.grad.data(), tmp.data(), b, l, heads, dh, true);
      for (size_t i = 0; i < tmp.size(); ++i) nx->grad[i] += tmp[i];
    };
  }
  return result;
}

Tensor dropout(const Tensor& x, float p, Rng& rng, bool train) {
  if (!train || p <= 0.0f) return x;
  if (p >= 1.0f) throw ConfigError("dropout: p must be in [0, 1)");
  const int64_t n = x.size();
  const float keep_scale = 1.0f / (1.0f - p);
  auto mask = std::make_shared<std::vector<float>>(static_cast<size_t>(n));
  std::vector<float> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const size_t u = static_cast<size_t>(i);
    const float m = rng.uniform() < p ? 0.0f : keep_scale;
    (*mask)[u] = m;
    out[u] = x.data()[u] * m;
  }
  auto node = make_node(x.shape(), std::move(out));
  Tensor result(node);
  if (tracking({&x})) {
    auto nx = x.node();
    node->parents = {nx};
    node->backprop = [nx, mask, n](const TensorNode& self) {
      if (!nx->participates()) return;
      nx->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        const size_t u = static_cast<size_t>(i);
        nx->grad[u] += self.grad[u] * (*mask)[u];
      }
    };
  }
  return result;
}

Tensor take_position0(const Tensor& x) {
  if (x.rank() != 3) {
    throw DimensionError("take_position0: need (B, L, H), got " + shape_str(x.shape()));
  }
  const int64_t b = x.dim(0), l = x.dim(1), h = x.dim(2);
  std::vector<float> out(static_cast<size_t>(b * h));
  for (int64_t i = 0; i < b; ++i) {
    std::copy_n(x.data().begin() + i * l * h, h, out.begin() + i * h);
  }
  auto node = make_node({static_cast<int>(b), static_cast<int>(h)}, std::move(out));
  Tensor result(node);
  if (tracking({&x})) {
    auto nx = x.node();
    node->parents = {nx};
    node->backprop = [nx, b, l, h](const TensorNode& self) {
      if (!nx->participates()) return;
      nx->ensure_grad();
      for (int64_t i = 0; i < b; ++i) {
        for (int64_t j = 0; j < h; ++j) {
          nx->grad[static_cast<size_t>(i * l * h + j)] += self.grad[static_cast<size_t>(i * h + j)];
        }
      }
    };
  }
  return result;
}

}  // namespace fedsplit
