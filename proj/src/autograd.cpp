#include "cdl/autograd.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace cdl::ag {

const Matrix& Var::value() const { return graph->value(id); }

Var Graph::constant(Matrix value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::parameter(Parameter& p) {
  Node node;
  node.source = &p;
  node.sink = record_ ? &p : nullptr;
  node.requires_grad = record_;
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::parameter(const Parameter& p) {
  Node node;
  node.source = &p;
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Graph::value(int id) const {
  const Node& node = nodes_[static_cast<std::size_t>(id)];
  return node.source ? node.source->value : node.value;
}

Matrix& Graph::grad(int id) {
  Node& node = nodes_[static_cast<std::size_t>(id)];
  if (node.sink) return node.sink->grad;
  if (!node.grad_ready) {
    const Matrix& v = value(id);
    node.grad = Matrix::Zero(v.rows(), v.cols());
    node.grad_ready = true;
  }
  return node.grad;
}

bool Graph::has_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad_ready; }

Var Graph::push(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
  Node node;
  node.value = std::move(value);
  if (record_) {
    for (const Var& in : inputs) node.requires_grad = node.requires_grad || requires_grad(in.id);
    if (node.requires_grad) node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Graph::backward() {
  if (!record_) throw std::logic_error("backward() on a graph that did not record");
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& node = nodes_[i];
    if (node.backward && node.grad_ready) node.backward(*this, static_cast<int>(i));
  }
}

Var matmul(Var x, Var w) {
  Graph& g = *x.graph;
  if (x.cols() != w.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
  Matrix out = x.value() * w.value();
  return g.push(std::move(out), {x, w}, [x, w](Graph& g, int self) {
    const Matrix& dy = g.grad(self);
    if (g.requires_grad(x.id)) g.grad(x.id).noalias() += dy * w.value().transpose();
    if (g.requires_grad(w.id)) g.grad(w.id).noalias() += x.value().transpose() * dy;
  });
}

Var add_bias(Var x, Var b) {
  Graph& g = *x.graph;
  if (b.rows() != 1 || b.cols() != x.cols()) throw std::invalid_argument("add_bias: shape");
  Matrix out = x.value().rowwise() + b.value().row(0);
  return g.push(std::move(out), {x, b}, [x, b](Graph& g, int self) {
    const Matrix& dy = g.grad(self);
    if (g.requires_grad(x.id)) g.grad(x.id) += dy;
    if (g.requires_grad(b.id)) g.grad(b.id) += dy.colwise().sum();
  });
}

Var linear(Var x, Var w, Var b) { return add_bias(matmul(x, w), b); }

Var add(Var a, Var b) {
  Graph& g = *a.graph;
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("add: shape");
  Matrix out = a.value() + b.value();
  return g.push(std::move(out), {a, b}, [a, b](Graph& g, int self) {
    const Matrix& dy = g.grad(self);
    if (g.requires_grad(a.id)) g.grad(a.id) += dy;
    if (g.requires_grad(b.id)) g.grad(b.id) += dy;
  });
}

Var scale(Var x, float factor) {
  Graph& g = *x.graph;
  Matrix out = x.value() * factor;
  return g.push(std::move(out), {x}, [x, factor](Graph& g, int self) {
    g.grad(x.id) += g.grad(self) * factor;
  });
}

Var relu(Var x) {
  Graph& g = *x.graph;
  Matrix out = x.value().cwiseMax(0.0f);
  return g.push(std::move(out), {x}, [x](Graph& g, int self) {
    g.grad(x.id).array() += g.grad(self).array() * (x.value().array() > 0.0f).cast<float>();
  });
}

Var dropout(Var x, float p) {
  Graph& g = *x.graph;
  if (!g.training() || p <= 0.0f) return x;
  if (!g.rng()) throw std::logic_error("dropout in training mode needs a generator");
  const float keep = 1.0f - p;
  Matrix mask(x.rows(), x.cols());
  auto& rng = *g.rng();
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    // 24 high bits give an exactly representable uniform float in [0, 1).
    const float u = static_cast<float>(rng() >> 40) * (1.0f / 16777216.0f);
    mask.data()[i] = u < keep ? 1.0f / keep : 0.0f;
  }
  Matrix out = x.value().cwiseProduct(mask);
  return g.push(std::move(out), {x}, [x, mask = std::move(mask)](Graph& g, int self) {
    g.grad(x.id) += g.grad(self).cwiseProduct(mask);
  });
}

Var layer_norm(Var x, Var gain, Var bias, float eps) {
  Graph& g = *x.graph;
  const Eigen::Index n = x.rows();
  const Eigen::Index m = x.cols();
  Matrix normed(n, m);
  Eigen::VectorXf inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = x.value().row(i).array();
    const float mean = row.mean();
    const float var = (row - mean).square().mean();
    inv_std(i) = 1.0f / std::sqrt(var + eps);
    normed.row(i) = (row - mean) * inv_std(i);
  }
  Matrix out = (normed.array().rowwise() * gain.value().row(0).array()).rowwise() +
               bias.value().row(0).array();
  return g.push(std::move(out), {x, gain, bias},
                [x, gain, bias, normed = std::move(normed), inv_std = std::move(inv_std)](
                    Graph& g, int self) {
                  const Matrix& dy = g.grad(self);
                  if (g.requires_grad(gain.id))
                    g.grad(gain.id) += dy.cwiseProduct(normed).colwise().sum();
                  if (g.requires_grad(bias.id)) g.grad(bias.id) += dy.colwise().sum();
                  if (!g.requires_grad(x.id)) return;
                  Matrix& dx = g.grad(x.id);
                  const float inv_m = 1.0f / static_cast<float>(normed.cols());
                  for (Eigen::Index i = 0; i < normed.rows(); ++i) {
                    const auto dn = (dy.row(i).array() * gain.value().row(0).array()).eval();
                    const float mean_dn = dn.sum() * inv_m;
                    const float mean_dn_n = (dn * normed.row(i).array()).sum() * inv_m;
                    dx.row(i).array() +=
                        inv_std(i) * (dn - mean_dn - normed.row(i).array() * mean_dn_n);
                  }
                });
}

Var embedding(Var table, std::span<const std::int32_t> ids) {
  Graph& g = *table.graph;
  const Matrix& t = table.value();
  Matrix out(static_cast<Eigen::Index>(ids.size()), t.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= t.rows()) throw std::out_of_range("embedding id out of range");
    out.row(static_cast<Eigen::Index>(i)) = t.row(ids[i]);
  }
  std::vector<std::int32_t> kept(ids.begin(), ids.end());
  return g.push(std::move(out), {table}, [table, kept = std::move(kept)](Graph& g, int self) {
    const Matrix& dy = g.grad(self);
    Matrix& dt = g.grad(table.id);
    for (std::size_t i = 0; i < kept.size(); ++i)
      dt.row(kept[i]) += dy.row(static_cast<Eigen::Index>(i));
  });
}

Var attention(Var q, Var k, Var v, const AttentionLayout& layout,
              std::span<const std::uint8_t> key_valid) {
  Graph& g = *q.graph;
  const auto B = static_cast<Eigen::Index>(layout.batch);
  const auto Tq = static_cast<Eigen::Index>(layout.query_len);
  const auto Tk = static_cast<Eigen::Index>(layout.key_len);
  const auto H = static_cast<Eigen::Index>(layout.heads);
  const Eigen::Index d = q.cols();
  if (d % H != 0) throw std::invalid_argument("attention: width not divisible by heads");
  if (q.rows() != B * Tq || k.rows() != B * Tk || v.rows() != B * Tk || k.cols() != d ||
      v.cols() != d || key_valid.size() != static_cast<std::size_t>(B * Tk))
    throw std::invalid_argument("attention: shape mismatch");
  const Eigen::Index dk = d / H;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dk));

  std::vector<Matrix> probs(static_cast<std::size_t>(B * H));
  Matrix out = Matrix::Zero(B * Tq, d);
  for (Eigen::Index b = 0; b < B; ++b) {
    for (Eigen::Index h = 0; h < H; ++h) {
      const auto qb = q.value().block(b * Tq, h * dk, Tq, dk);
      const auto kb = k.value().block(b * Tk, h * dk, Tk, dk);
      const auto vb = v.value().block(b * Tk, h * dk, Tk, dk);
      Matrix s = (qb * kb.transpose()) * inv_sqrt;
      for (Eigen::Index i = 0; i < Tq; ++i) {
        float peak = -std::numeric_limits<float>::infinity();
        for (Eigen::Index j = 0; j < Tk; ++j) {
          const bool ok = key_valid[static_cast<std::size_t>(b * Tk + j)] &&
                          (!layout.causal || j <= i);
          if (!ok) s(i, j) = -std::numeric_limits<float>::infinity();
          else peak = std::max(peak, s(i, j));
        }
        if (peak == -std::numeric_limits<float>::infinity()) {
          s.row(i).setZero();
          continue;
        }
        float sum = 0.0f;
        for (Eigen::Index j = 0; j < Tk; ++j) {
          const float e = s(i, j) == -std::numeric_limits<float>::infinity()
                              ? 0.0f
                              : std::exp(s(i, j) - peak);
          s(i, j) = e;
          sum += e;
        }
        s.row(i) /= sum;
      }
      out.block(b * Tq, h * dk, Tq, dk).noalias() = s * vb;
      probs[static_cast<std::size_t>(b * H + h)] = std::move(s);
    }
  }
  return g.push(std::move(out), {q, k, v},
                [q, k, v, B, Tq, Tk, H, dk, inv_sqrt, probs = std::move(probs)](Graph& g,
                                                                                 int self) {
                  const Matrix& dy = g.grad(self);
                  const bool need_q = g.requires_grad(q.id);
                  const bool need_k = g.requires_grad(k.id);
                  const bool need_v = g.requires_grad(v.id);
                  for (Eigen::Index b = 0; b < B; ++b) {
                    for (Eigen::Index h = 0; h < H; ++h) {
                      const Matrix& p = probs[static_cast<std::size_t>(b * H + h)];
                      const auto dyb = dy.block(b * Tq, h * dk, Tq, dk);
                      const auto qb = q.value().block(b * Tq, h * dk, Tq, dk);
                      const auto kb = k.value().block(b * Tk, h * dk, Tk, dk);
                      const auto vb = v.value().block(b * Tk, h * dk, Tk, dk);
                      if (need_v) g.grad(v.id).block(b * Tk, h * dk, Tk, dk).noalias() +=
                          p.transpose() * dyb;
                      if (!need_q && !need_k) continue;
                      Matrix dp = dyb * vb.transpose();
                      Eigen::VectorXf rowdot = (dp.cwiseProduct(p)).rowwise().sum();
                      Matrix ds = p.cwiseProduct(dp.colwise() - rowdot) * inv_sqrt;
                      if (need_q) g.grad(q.id).block(b * Tq, h * dk, Tq, dk).noalias() += ds * kb;
                      if (need_k)
                        g.grad(k.id).block(b * Tk, h * dk, Tk, dk).noalias() +=
                            ds.transpose() * qb;
                    }
                  }
                });
}

}  // namespace cdl::ag
