#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "segfetch/matrix.hpp"

namespace segfetch::autograd {

/// Reverse-mode automatic differentiation over dense matrices.
///
/// A Graph records operations in creation order; `backward` walks them in
/// reverse and accumulates gradients. Parameters are registered with a sink
/// matrix that receives (+=) their gradient, so one Graph per sample can feed
/// a shared gradient buffer.
class Graph {
 public:
  using Node = std::size_t;

  Graph() { nodes_.reserve(128); }

  Node constant(Matrix value);
  /// `value` must outlive the graph. `grad_sink` may be null (frozen).
  Node parameter(const Matrix& value, Matrix* grad_sink);

  Node matmul(Node a, Node b);             // a * b
  Node matmul_transposed(Node a, Node b);  // a * b^T
  Node add(Node a, Node b);                // same shapes
  Node add_row(Node a, Node row);          // row (1 x n) broadcast over rows of a
  Node scale(Node a, double factor);
  Node relu(Node a);
  Node sigmoid(Node a);
  Node softmax_rows(Node a);
  /// Per-row normalization, then gain (1 x n) and bias (1 x n).
  Node layer_norm(Node a, Node gain, Node bias, double eps = 1e-5);
  Node columns(Node a, Eigen::Index start, Eigen::Index count);
  Node concat_columns(std::span<const Node> parts);
  Node concat_rows(std::span<const Node> parts);
  Node row(Node a, Eigen::Index index);
  /// Rows of `table` selected by `indices`.
  Node gather_rows(Node table, std::vector<Eigen::Index> indices);

  const Matrix& value(Node n) const;

  /// Seeds d(output)/d(root) = `seed` and propagates to every parameter sink.
  void backward(Node root, const Matrix& seed);

  std::size_t size() const { return nodes_.size(); }

 private:
  enum class Op : std::uint8_t {
    constant, parameter, matmul, matmul_t, add, add_row, scale, relu, sigmoid,
    softmax, layer_norm, columns, concat_columns, concat_rows, row, gather,
  };

  struct Record {
    explicit Record(Op o) : op(o) {}
    Op op;
    bool needs_grad = false;
    std::vector<Node> inputs;
    Matrix owned;
    const Matrix* external = nullptr;
    Matrix* sink = nullptr;
    Matrix grad;
    Matrix cache;   // layer_norm: normalized input
    Vector cache2;  // layer_norm: 1 / sigma per row
    double scalar = 0.0;
    Eigen::Index start = 0;
    Eigen::Index count = 0;
    std::vector<Eigen::Index> indices;
  };

  Node push(Record r);
  bool any_needs_grad(std::initializer_list<Node> ns) const;
  void accumulate(Node n, const Matrix& g);
  void accumulate_block(Node n, Eigen::Index r0, Eigen::Index c0, const Matrix& g);

  std::vector<Record> nodes_;
};

}  // namespace segfetch::autograd
