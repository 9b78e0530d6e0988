#include "segfetch/autograd.hpp"

#include <cmath>

#include "segfetch/common.hpp"

namespace segfetch::autograd {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw RangeError(std::string("autograd: ") + what);
}

}  // namespace

Graph::Node Graph::push(Record r) {
  nodes_.push_back(std::move(r));
  return nodes_.size() - 1;
}

bool Graph::any_needs_grad(std::initializer_list<Node> ns) const {
  for (Node n : ns) {
    if (nodes_[n].needs_grad) return true;
  }
  return false;
}

const Matrix& Graph::value(Node n) const {
  const Record& r = nodes_[n];
  return r.external != nullptr ? *r.external : r.owned;
}

Graph::Node Graph::constant(Matrix value) {
  Record r(Op::constant);
  r.owned = std::move(value);
  return push(std::move(r));
}

Graph::Node Graph::parameter(const Matrix& value, Matrix* grad_sink) {
  Record r(Op::parameter);
  r.external = &value;
  r.sink = grad_sink;
  r.needs_grad = grad_sink != nullptr;
  return push(std::move(r));
}

Graph::Node Graph::matmul(Node a, Node b) {
  require(value(a).cols() == value(b).rows(), "matmul shape mismatch");
  Record r(Op::matmul);
  r.owned.noalias() = value(a) * value(b);
  r.inputs = {a, b};
  r.needs_grad = any_needs_grad({a, b});
  return push(std::move(r));
}

Graph::Node Graph::matmul_transposed(Node a, Node b) {
  require(value(a).cols() == value(b).cols(), "matmul_transposed shape mismatch");
  Record r(Op::matmul_t);
  r.owned.noalias() = value(a) * value(b).transpose();
  r.inputs = {a, b};
  r.needs_grad = any_needs_grad({a, b});
  return push(std::move(r));
}

Graph::Node Graph::add(Node a, Node b) {
  require(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(),
          "add shape mismatch");
  Record r(Op::add);
  r.owned = value(a) + value(b);
  r.inputs = {a, b};
  r.needs_grad = any_needs_grad({a, b});
  return push(std::move(r));
}

Graph::Node Graph::add_row(Node a, Node row_node) {
  const Matrix& bias = value(row_node);
  require(bias.rows() == 1 && bias.cols() == value(a).cols(), "add_row shape mismatch");
  Record r(Op::add_row);
  r.owned = value(a);
  r.owned.rowwise() += bias.row(0);
  r.inputs = {a, row_node};
  r.needs_grad = any_needs_grad({a, row_node});
  return push(std::move(r));
}

Graph::Node Graph::scale(Node a, double factor) {
  Record r(Op::scale);
  r.owned = value(a) * factor;
  r.scalar = factor;
  r.inputs = {a};
  r.needs_grad = nodes_[a].needs_grad;
  return push(std::move(r));
}

Graph::Node Graph::relu(Node a) {
  Record r(Op::relu);
  r.owned = value(a).cwiseMax(0.0);
  r.inputs = {a};
  r.needs_grad = nodes_[a].needs_grad;
  return push(std::move(r));
}

Graph::Node Graph::sigmoid(Node a) {
  Record r(Op::sigmoid);
  r.owned = value(a).unaryExpr([](double x) {
    // Split by sign so exp never overflows.
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  r.inputs = {a};
  r.needs_grad = nodes_[a].needs_grad;
  return push(std::move(r));
}

Graph::Node Graph::softmax_rows(Node a) {
  const Matrix& x = value(a);
  Record r(Op::softmax);
  r.owned.resize(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    r.owned.row(i) = (x.row(i).array() - m).exp().matrix();
    r.owned.row(i) /= r.owned.row(i).sum();
  }
  r.inputs = {a};
  r.needs_grad = nodes_[a].needs_grad;
  return push(std::move(r));
}

Graph::Node Graph::layer_norm(Node a, Node gain, Node bias, double eps) {
  const Matrix& x = value(a);
  const Matrix& g = value(gain);
  const Matrix& b = value(bias);
  require(g.rows() == 1 && g.cols() == x.cols() && b.rows() == 1 && b.cols() == x.cols(),
          "layer_norm shape mismatch");
  Record r(Op::layer_norm);
  const auto n = static_cast<double>(x.cols());
  r.cache.resize(x.rows(), x.cols());
  r.cache2.resize(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mean = x.row(i).sum() / n;
    const double var = (x.row(i).array() - mean).square().sum() / n;
    const double inv_sigma = 1.0 / std::sqrt(var + eps);
    r.cache.row(i) = (x.row(i).array() - mean) * inv_sigma;
    r.cache2(i) = inv_sigma;
  }
  r.owned = r.cache.array().rowwise() * g.row(0).array();
  r.owned.rowwise() += b.row(0);
  r.inputs = {a, gain, bias};
  r.needs_grad = any_needs_grad({a, gain, bias});
  return push(std::move(r));
}

Graph::Node Graph::columns(Node a, Eigen::Index start, Eigen::Index count) {
  const Matrix& x = value(a);
  require(start >= 0 && count >= 0 && start + count <= x.cols(), "columns out of range");
  Record r(Op::columns);
  r.owned = x.middleCols(start, count);
  r.start = start;
  r.count = count;
  r.inputs = {a};
  r.needs_grad = nodes_[a].needs_grad;
  return push(std::move(r));
}

Graph::Node Graph::concat_columns(std::span<const Node> parts) {
  require(!parts.empty(), "concat_columns of nothing");
  Eigen::Index rows = value(parts[0]).rows();
  Eigen::Index cols = 0;
  for (Node p : parts) {
    require(value(p).rows() == rows, "concat_columns row mismatch");
    cols += value(p).cols();
  }
  Record r(Op::concat_columns);
  r.owned.resize(rows, cols);
  Eigen::Index c = 0;
  for (Node p : parts) {
    r.owned.middleCols(c, value(p).cols()) = value(p);
    c += value(p).cols();
    r.needs_grad = r.needs_grad || nodes_[p].needs_grad;
  }
  r.inputs.assign(parts.begin(), parts.end());
  return push(std::move(r));
}

Graph::Node Graph::concat_rows(std::span<const Node> parts) {
  require(!parts.empty(), "concat_rows of nothing");
  Eigen::Index cols = value(parts[0]).cols();
  Eigen::Index rows = 0;
  for (Node p : parts) {
    require(value(p).cols() == cols, "concat_rows column mismatch");
    rows += value(p).rows();
  }
  Record r(Op::concat_rows);
  r.owned.resize(rows, cols);
  Eigen::Index at = 0;
  for (Node p : parts) {
    r.owned.middleRows(at, value(p).rows()) = value(p);
    at += value(p).rows();
    r.needs_grad = r.needs_grad || nodes_[p].needs_grad;
  }
  r.inputs.assign(parts.begin(), parts.end());
  return push(std::move(r));
}

Graph::Node Graph::row(Node a, Eigen::Index index) {
  require(index >= 0 && index < value(a).rows(), "row out of range");
  Record r(Op::row);
  r.owned = value(a).row(index);
  r.start = index;
  r.inputs = {a};
  r.needs_grad = nodes_[a].needs_grad;
  return push(std::move(r));
}

Graph::Node Graph::gather_rows(Node table, std::vector<Eigen::Index> indices) {
  const Matrix& t = value(table);
  Record r(Op::gather);
  r.owned.resize(static_cast<Eigen::Index>(indices.size()), t.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] >= 0 && indices[i] < t.rows(), "gather index out of range");
    r.owned.row(static_cast<Eigen::Index>(i)) = t.row(indices[i]);
  }
  r.indices = std::move(indices);
  r.inputs = {table};
  r.needs_grad = nodes_[table].needs_grad;
  return push(std::move(r));
}

void Graph::accumulate(Node n, const Matrix& g) {
  Record& r = nodes_[n];
  if (!r.needs_grad) return;
  if (r.grad.size() == 0) {
    r.grad = g;
  } else {
    r.grad += g;
  }
}

void Graph::accumulate_block(Node n, Eigen::Index r0, Eigen::Index c0, const Matrix& g) {
  Record& r = nodes_[n];
  if (!r.needs_grad) return;
  if (r.grad.size() == 0) r.grad = Matrix::Zero(value(n).rows(), value(n).cols());
  r.grad.block(r0, c0, g.rows(), g.cols()) += g;
}

void Graph::backward(Node root, const Matrix& seed) {
  require(seed.rows() == value(root).rows() && seed.cols() == value(root).cols(),
          "backward seed shape mismatch");
  for (Record& r : nodes_) r.grad.resize(0, 0);
  accumulate(root, seed);

  for (Node n = root + 1; n-- > 0;) {
    Record& r = nodes_[n];
    if (!r.needs_grad || r.grad.size() == 0) continue;
    const Matrix g = std::move(r.grad);
    r.grad.resize(0, 0);

    switch (r.op) {
      case Op::constant:
        break;
      case Op::parameter:
        if (r.sink != nullptr) {
          if (r.sink->size() == 0) *r.sink = Matrix::Zero(g.rows(), g.cols());
          *r.sink += g;
        }
        break;
      case Op::matmul: {
        const Node a = r.inputs[0], b = r.inputs[1];
        if (nodes_[a].needs_grad) accumulate(a, g * value(b).transpose());
        if (nodes_[b].needs_grad) accumulate(b, value(a).transpose() * g);
        break;
      }
      case Op::matmul_t: {
        const Node a = r.inputs[0], b = r.inputs[1];
        if (nodes_[a].needs_grad) accumulate(a, g * value(b));
        if (nodes_[b].needs_grad) accumulate(b, g.transpose() * value(a));
        break;
      }
      case Op::add:
        accumulate(r.inputs[0], g);
        accumulate(r.inputs[1], g);
        break;
      case Op::add_row:
        accumulate(r.inputs[0], g);
        if (nodes_[r.inputs[1]].needs_grad) accumulate(r.inputs[1], g.colwise().sum());
        break;
      case Op::scale:
        accumulate(r.inputs[0], g * r.scalar);
        break;
      case Op::relu: {
        const Matrix& x = value(r.inputs[0]);
        accumulate(r.inputs[0], (x.array() > 0.0).select(g, 0.0));
        break;
      }
      case Op::sigmoid: {
        const Matrix& y = r.owned;
        accumulate(r.inputs[0], (g.array() * y.array() * (1.0 - y.array())).matrix());
        break;
      }
      case Op::softmax: {
        const Matrix& y = r.owned;
        Matrix dx(y.rows(), y.cols());
        for (Eigen::Index i = 0; i < y.rows(); ++i) {
          const double dot = g.row(i).dot(y.row(i));
          dx.row(i) = (y.row(i).array() * (g.row(i).array() - dot)).matrix();
        }
        accumulate(r.inputs[0], dx);
        break;
      }
      case Op::layer_norm: {
        const Node x = r.inputs[0], gain = r.inputs[1], bias = r.inputs[2];
        const Matrix& xhat = r.cache;
        if (nodes_[gain].needs_grad) {
          accumulate(gain, (g.array() * xhat.array()).colwise().sum().matrix());
        }
        if (nodes_[bias].needs_grad) accumulate(bias, g.colwise().sum());
        if (nodes_[x].needs_grad) {
          const Matrix& gv = value(gain);
          const auto n = static_cast<double>(xhat.cols());
          Matrix dx(xhat.rows(), xhat.cols());
          for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
            const Vector dxhat = (g.row(i).array() * gv.row(0).array()).matrix();
            const double mean_d = dxhat.sum() / n;
            const double mean_dx = dxhat.dot(xhat.row(i)) / n;
            dx.row(i) = ((dxhat.array() - mean_d - xhat.row(i).array() * mean_dx) * r.cache2(i)).matrix();
          }
          accumulate(x, dx);
        }
        break;
      }
      case Op::columns:
        accumulate_block(r.inputs[0], 0, r.start, g);
        break;
      case Op::concat_columns: {
        Eigen::Index c = 0;
        for (Node p : r.inputs) {
          const Eigen::Index w = value(p).cols();
          if (nodes_[p].needs_grad) accumulate(p, g.middleCols(c, w));
          c += w;
        }
        break;
      }
      case Op::concat_rows: {
        Eigen::Index at = 0;
        for (Node p : r.inputs) {
          const Eigen::Index h = value(p).rows();
          if (nodes_[p].needs_grad) accumulate(p, g.middleRows(at, h));
          at += h;
        }
        break;
      }
      case Op::row:
        accumulate_block(r.inputs[0], r.start, 0, g);
        break;
      case Op::gather: {
        const Node t = r.inputs[0];
        for (std::size_t i = 0; i < r.indices.size(); ++i) {
          accumulate_block(t, r.indices[i], 0, g.row(static_cast<Eigen::Index>(i)));
        }
        break;
      }
    }
  }
}

}  // namespace segfetch::autograd
