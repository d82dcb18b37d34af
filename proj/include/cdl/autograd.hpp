#pragma once

// A small tape of dense 2-D float operations, just large enough for an
// encoder-decoder transformer. Sequences are stored batch-major with one row
// per position: row b * T + t holds position t of example b.

#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cdl::ag {

using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;  // same shape as value, accumulated by Graph::backward

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Graph;

// Handle to a node on a graph. Cheap to copy.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

class Graph {
 public:
  // `record == false` skips every backward closure (inference).
  explicit Graph(bool record = true, bool training = false, std::mt19937_64* rng = nullptr)
      : record_(record), training_(training), rng_(rng) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Matrix value);
  // Trainable leaf; gradients land in `p.grad` during backward().
  Var parameter(Parameter& p);
  // Read-only leaf (no gradient), e.g. for inference.
  Var parameter(const Parameter& p);

  const Matrix& value(int id) const;
  // Gradient buffer of a node, zero-initialized on first access.
  Matrix& grad(int id);
  bool has_grad(int id) const;

  // Runs recorded backward closures in reverse order. Output gradients must
  // have been seeded with grad(id) beforehand.
  void backward();

  bool recording() const { return record_; }
  bool training() const { return training_; }
  std::mt19937_64* rng() const { return rng_; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  using Backward = std::function<void(Graph&, int self)>;
  // Adds an op node. `inputs` decides whether the node needs a gradient.
  Var push(Matrix value, std::initializer_list<Var> inputs, Backward backward);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    const Parameter* source = nullptr;  // leaf bound to a parameter
    Parameter* sink = nullptr;          // where gradients go for trainable leaves
    Backward backward;
    bool requires_grad = false;
    bool grad_ready = false;
  };

  std::deque<Node> nodes_;
  bool record_;
  bool training_;
  std::mt19937_64* rng_;
};

// x [n x k] times w [k x m].
Var matmul(Var x, Var w);
// x [n x m] plus a row vector b [1 x m] broadcast over rows.
Var add_bias(Var x, Var b);
// x W + b.
Var linear(Var x, Var w, Var b);
Var add(Var a, Var b);
Var scale(Var x, float factor);
Var relu(Var x);
// Inverted dropout; identity unless the graph is in training mode and p > 0.
Var dropout(Var x, float p);
// Row-wise layer normalization with learned gain and bias [1 x m].
Var layer_norm(Var x, Var gain, Var bias, float eps = 1e-5f);
// Rows of `table` selected by `ids`.
Var embedding(Var table, std::span<const std::int32_t> ids);

struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t query_len = 1;
  std::size_t key_len = 1;
  std::size_t heads = 1;
  bool causal = false;
};

// Multi-head scaled dot-product attention over already-projected q, k, v.
// `key_valid` has batch * key_len entries; masked keys receive no weight.
Var attention(Var q, Var k, Var v, const AttentionLayout& layout,
              std::span<const std::uint8_t> key_valid);

}  // namespace cdl::ag
