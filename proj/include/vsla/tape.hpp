#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <vector>

namespace vsla {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

/// Handle to a value recorded on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode autodiff tape over dense row-major matrices.
///
/// Every op appends one node. Nodes whose inputs do not require gradients are
/// recorded as constants, so frozen sub-graphs cost only their forward pass.
/// A tape built with `record = false` never stores backward closures.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix&)>;

  explicit Tape(bool record = true) : record_(record) {}

  Var constant(Matrix value);
  Var leaf(Matrix value);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulated so far; zero matrix if nothing flowed into `v`.
  Matrix grad(Var v) const;

  /// Adds `g` into the gradient buffer of `v` (no-op for constants).
  void accumulate(Var v, const Matrix& g);

  void backward(Var scalar_output);
  void backward(Var output, const Matrix& seed);

  /// Records a derived value. `backward` receives the node's output gradient.
  Var push(Matrix value, bool requires_grad, Backward backward);

  bool any_requires_grad(std::initializer_list<Var> vars) const;

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
  bool record_;
};

/// Query/key row sets for grouped multi-head attention. Query row
/// `queries[g][i]` attends over key rows `keys[g]`; with `causal` set it only
/// sees `keys[g][0..i]`.
struct AttentionGroups {
  std::vector<std::vector<int>> queries;
  std::vector<std::vector<int>> keys;
  bool causal = false;
};

namespace ops {

Var matmul(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
Var add_row(Tape& t, Var a, Var row);
Var scale(Tape& t, Var a, double s);
Var gelu(Tape& t, Var x);
/// x * sigmoid(1.702 x), the activation of the original CLIP towers.
Var quick_gelu(Tape& t, Var x);
Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps = 1e-5);
Var gather_rows(Tape& t, Var x, std::vector<int> rows);
Var concat_rows(Tape& t, const std::vector<Var>& parts);
Var slice_cols(Tape& t, Var x, Eigen::Index start, Eigen::Index count);
Var sum_all(Tape& t, Var x);

/// Mean over consecutive row blocks; `sizes[i]` rows form output row i.
Var block_mean_rows(Tape& t, Var x, std::vector<int> sizes);

/// Multi-head scaled dot-product attention restricted to `groups`. Output has
/// the same row count as `q`; rows that belong to no group are zero.
Var attention(Tape& t, Var q, Var k, Var v, std::shared_ptr<const AttentionGroups> groups,
              int heads);

/// Scalar node with externally computed value and input gradients.
Var external_loss(Tape& t, const std::vector<Var>& inputs, double value,
                  std::vector<Matrix> input_grads);

}  // namespace ops

double gelu_value(double x);

}  // namespace vsla
