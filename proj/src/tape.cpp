#include "vsla/tape.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace vsla {

Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Tape::leaf(Matrix value) { return push(std::move(value), record_, nullptr); }

Var Tape::push(Matrix value, bool requires_grad, Backward backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = record_ && requires_grad;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

bool Tape::any_requires_grad(std::initializer_list<Var> vars) const {
  for (Var v : vars)
    if (nodes_[v.id].requires_grad) return true;
  return false;
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.has_grad) return n.grad;
  return Matrix::Zero(n.value.rows(), n.value.cols());
}

void Tape::accumulate(Var v, const Matrix& g) {
  Node& n = nodes_[v.id];
  if (!n.requires_grad) return;
  if (g.rows() != n.value.rows() || g.cols() != n.value.cols())
    throw std::logic_error("gradient shape mismatch on tape node");
  if (n.has_grad) {
    n.grad += g;
  } else {
    n.grad = g;
    n.has_grad = true;
  }
}

void Tape::backward(Var scalar_output) {
  const Matrix& v = value(scalar_output);
  if (v.size() != 1) throw std::logic_error("backward() without seed needs a scalar output");
  backward(scalar_output, Matrix::Ones(1, 1));
}

void Tape::backward(Var output, const Matrix& seed) {
  if (!record_) throw std::logic_error("backward() on a non-recording tape");
  accumulate(output, seed);
  for (int i = output.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.has_grad || !n.backward) continue;
    // Copy: the closure may append into other nodes but never into this one.
    const Matrix g = n.grad;
    n.backward(*this, g);
  }
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

namespace ops {

Var matmul(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (av.cols() != bv.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
  Matrix out = av * bv;
  return t.push(std::move(out), t.any_requires_grad({a, b}), [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
    if (tp.requires_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
  });
}

Var add(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (av.rows() != bv.rows() || av.cols() != bv.cols())
    throw std::invalid_argument("add: shape mismatch");
  Matrix out = av + bv;
  return t.push(std::move(out), t.any_requires_grad({a, b}), [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var add_row(Tape& t, Var a, Var row) {
  const Matrix& av = t.value(a);
  const Matrix& rv = t.value(row);
  if (rv.rows() != 1 || rv.cols() != av.cols()) throw std::invalid_argument("add_row: bad bias shape");
  Matrix out = av.rowwise() + rv.row(0);
  return t.push(std::move(out), t.any_requires_grad({a, row}),
                [a, row](Tape& tp, const Matrix& g) {
                  tp.accumulate(a, g);
                  if (tp.requires_grad(row)) tp.accumulate(row, g.colwise().sum());
                });
}

Var scale(Tape& t, Var a, double s) {
  Matrix out = t.value(a) * s;
  return t.push(std::move(out), t.requires_grad(a),
                [a, s](Tape& tp, const Matrix& g) { tp.accumulate(a, g * s); });
}

Var gelu(Tape& t, Var x) {
  const Matrix& xv = t.value(x);
  Matrix out = xv.unaryExpr([](double v) { return gelu_value(v); });
  return t.push(std::move(out), t.requires_grad(x), [x](Tape& tp, const Matrix& g) {
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    Matrix d = tp.value(x).unaryExpr([inv_sqrt_2pi](double v) {
      return 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2)) +
             v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
    });
    tp.accumulate(x, g.cwiseProduct(d));
  });
}

Var quick_gelu(Tape& t, Var x) {
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-1.702 * v)); };
  const Matrix& xv = t.value(x);
  Matrix out = xv.unaryExpr([sig](double v) { return v * sig(v); });
  return t.push(std::move(out), t.requires_grad(x), [x, sig](Tape& tp, const Matrix& g) {
    Matrix d = tp.value(x).unaryExpr([sig](double v) {
      const double s = sig(v);
      return s + 1.702 * v * s * (1.0 - s);
    });
    tp.accumulate(x, g.cwiseProduct(d));
  });
}

Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps) {
  const Matrix& xv = t.value(x);
  const Eigen::Index cols = xv.cols();
  if (t.value(gamma).cols() != cols || t.value(beta).cols() != cols)
    throw std::invalid_argument("layer_norm: affine width mismatch");
  auto xhat = std::make_shared<Matrix>(xv.rows(), cols);
  auto inv_std = std::make_shared<Eigen::VectorXd>(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    (*inv_std)(r) = 1.0 / std::sqrt(var + eps);
    xhat->row(r) = (xv.row(r).array() - mu) * (*inv_std)(r);
  }
  Matrix out = (xhat->array().rowwise() * t.value(gamma).row(0).array()).rowwise() +
               t.value(beta).row(0).array();
  return t.push(std::move(out), t.any_requires_grad({x, gamma, beta}),
                [x, gamma, beta, xhat, inv_std](Tape& tp, const Matrix& g) {
                  if (tp.requires_grad(gamma))
                    tp.accumulate(gamma, g.cwiseProduct(*xhat).colwise().sum());
                  if (tp.requires_grad(beta)) tp.accumulate(beta, g.colwise().sum());
                  if (!tp.requires_grad(x)) return;
                  Matrix dxhat = g.array().rowwise() * tp.value(gamma).row(0).array();
                  Matrix dx(g.rows(), g.cols());
                  for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    const double m1 = dxhat.row(r).mean();
                    const double m2 = dxhat.row(r).cwiseProduct(xhat->row(r)).mean();
                    dx.row(r) = (*inv_std)(r) *
                                (dxhat.row(r).array() - m1 - xhat->row(r).array() * m2);
                  }
                  tp.accumulate(x, dx);
                });
}

Var gather_rows(Tape& t, Var x, std::vector<int> rows) {
  const Matrix& xv = t.value(x);
  Matrix out(static_cast<Eigen::Index>(rows.size()), xv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= xv.rows()) throw std::out_of_range("gather_rows: row index");
    out.row(static_cast<Eigen::Index>(i)) = xv.row(rows[i]);
  }
  auto idx = std::make_shared<std::vector<int>>(std::move(rows));
  return t.push(std::move(out), t.requires_grad(x), [x, idx](Tape& tp, const Matrix& g) {
    Matrix dx = Matrix::Zero(tp.value(x).rows(), tp.value(x).cols());
    for (std::size_t i = 0; i < idx->size(); ++i)
      dx.row((*idx)[i]) += g.row(static_cast<Eigen::Index>(i));
    tp.accumulate(x, dx);
  });
}

Var concat_rows(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = t.value(parts.front()).cols();
  bool needs_grad = false;
  for (Var p : parts) {
    if (t.value(p).cols() != cols) throw std::invalid_argument("concat_rows: width mismatch");
    rows += t.value(p).rows();
    needs_grad = needs_grad || t.requires_grad(p);
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    out.middleRows(at, t.value(p).rows()) = t.value(p);
    at += t.value(p).rows();
  }
  return t.push(std::move(out), needs_grad, [parts](Tape& tp, const Matrix& g) {
    Eigen::Index off = 0;
    for (Var p : parts) {
      const Eigen::Index r = tp.value(p).rows();
      if (tp.requires_grad(p)) tp.accumulate(p, g.middleRows(off, r));
      off += r;
    }
  });
}

Var slice_cols(Tape& t, Var x, Eigen::Index start, Eigen::Index count) {
  const Matrix& xv = t.value(x);
  if (start < 0 || start + count > xv.cols()) throw std::out_of_range("slice_cols: range");
  Matrix out = xv.middleCols(start, count);
  return t.push(std::move(out), t.requires_grad(x), [x, start, count](Tape& tp, const Matrix& g) {
    Matrix dx = Matrix::Zero(tp.value(x).rows(), tp.value(x).cols());
    dx.middleCols(start, count) = g;
    tp.accumulate(x, dx);
  });
}

Var sum_all(Tape& t, Var x) {
  Matrix out(1, 1);
  out(0, 0) = t.value(x).sum();
  return t.push(std::move(out), t.requires_grad(x), [x](Tape& tp, const Matrix& g) {
    tp.accumulate(x, Matrix::Constant(tp.value(x).rows(), tp.value(x).cols(), g(0, 0)));
  });
}

Var block_mean_rows(Tape& t, Var x, std::vector<int> sizes) {
  const Matrix& xv = t.value(x);
  Matrix out(static_cast<Eigen::Index>(sizes.size()), xv.cols());
  Eigen::Index at = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] < 1) throw std::invalid_argument("block_mean_rows: empty block");
    out.row(static_cast<Eigen::Index>(i)) = xv.middleRows(at, sizes[i]).colwise().mean();
    at += sizes[i];
  }
  if (at != xv.rows()) throw std::invalid_argument("block_mean_rows: sizes do not cover input");
  auto blocks = std::make_shared<std::vector<int>>(std::move(sizes));
  return t.push(std::move(out), t.requires_grad(x), [x, blocks](Tape& tp, const Matrix& g) {
    Matrix dx(tp.value(x).rows(), tp.value(x).cols());
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < blocks->size(); ++i) {
      const int n = (*blocks)[i];
      dx.middleRows(off, n) = g.row(static_cast<Eigen::Index>(i)).replicate(n, 1) / n;
      off += n;
    }
    tp.accumulate(x, dx);
  });
}

Var attention(Tape& t, Var q, Var k, Var v, std::shared_ptr<const AttentionGroups> groups,
              int heads) {
  const Matrix& qv = t.value(q);
  const Matrix& kv = t.value(k);
  const Matrix& vv = t.value(v);
  const Eigen::Index width = qv.cols();
  if (kv.cols() != width || vv.cols() != width || kv.rows() != vv.rows())
    throw std::invalid_argument("attention: q/k/v shape mismatch");
  if (heads < 1 || width % heads != 0)
    throw std::invalid_argument("attention: width not divisible by heads");
  if (groups->queries.size() != groups->keys.size())
    throw std::invalid_argument("attention: group arity mismatch");
  const Eigen::Index dh = width / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool needs_grad = t.any_requires_grad({q, k, v});

  Matrix out = Matrix::Zero(qv.rows(), width);
  auto probs = std::make_shared<std::vector<Matrix>>();
  if (needs_grad && t.recording()) probs->reserve(groups->queries.size() * heads);

  Matrix qg, kg, vg, s;
  for (std::size_t gi = 0; gi < groups->queries.size(); ++gi) {
    const auto& qrows = groups->queries[gi];
    const auto& krows = groups->keys[gi];
    const auto nq = static_cast<Eigen::Index>(qrows.size());
    const auto nk = static_cast<Eigen::Index>(krows.size());
    if (groups->causal && nk < nq) throw std::invalid_argument("attention: causal group too short");
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index c0 = h * dh;
      qg.resize(nq, dh);
      kg.resize(nk, dh);
      vg.resize(nk, dh);
      for (Eigen::Index i = 0; i < nq; ++i) qg.row(i) = qv.row(qrows[i]).segment(c0, dh);
      for (Eigen::Index j = 0; j < nk; ++j) {
        kg.row(j) = kv.row(krows[j]).segment(c0, dh);
        vg.row(j) = vv.row(krows[j]).segment(c0, dh);
      }
      s.noalias() = qg * kg.transpose();
      s *= sc;
      for (Eigen::Index i = 0; i < nq; ++i) {
        const Eigen::Index visible = groups->causal ? i + 1 : nk;
        const double mx = s.row(i).head(visible).maxCoeff();
        double z = 0.0;
        for (Eigen::Index j = 0; j < nk; ++j) {
          const double e = j < visible ? std::exp(s(i, j) - mx) : 0.0;
          s(i, j) = e;
          z += e;
        }
        s.row(i) /= z;
      }
      const Matrix o = s * vg;
      for (Eigen::Index i = 0; i < nq; ++i) out.row(qrows[i]).segment(c0, dh) = o.row(i);
      if (needs_grad && t.recording()) probs->push_back(s);
    }
  }

  return t.push(std::move(out), needs_grad, [q, k, v, groups, heads, dh, sc, probs](
                                                Tape& tp, const Matrix& g) {
    const Matrix& qv = tp.value(q);
    const Matrix& kv = tp.value(k);
    const Matrix& vv = tp.value(v);
    Matrix dq = Matrix::Zero(qv.rows(), qv.cols());
    Matrix dk = Matrix::Zero(kv.rows(), kv.cols());
    Matrix dv = Matrix::Zero(vv.rows(), vv.cols());
    Matrix qg, kg, vg, go;
    std::size_t pi = 0;
    for (std::size_t gi = 0; gi < groups->queries.size(); ++gi) {
      const auto& qrows = groups->queries[gi];
      const auto& krows = groups->keys[gi];
      const auto nq = static_cast<Eigen::Index>(qrows.size());
      const auto nk = static_cast<Eigen::Index>(krows.size());
      for (int h = 0; h < heads; ++h, ++pi) {
        const Eigen::Index c0 = h * dh;
        const Matrix& p = (*probs)[pi];
        qg.resize(nq, dh);
        kg.resize(nk, dh);
        vg.resize(nk, dh);
        go.resize(nq, dh);
        for (Eigen::Index i = 0; i < nq; ++i) {
          qg.row(i) = qv.row(qrows[i]).segment(c0, dh);
          go.row(i) = g.row(qrows[i]).segment(c0, dh);
        }
        for (Eigen::Index j = 0; j < nk; ++j) {
          kg.row(j) = kv.row(krows[j]).segment(c0, dh);
          vg.row(j) = vv.row(krows[j]).segment(c0, dh);
        }
        const Matrix dp = go * vg.transpose();
        const Matrix dvg = p.transpose() * go;
        Matrix ds = p.cwiseProduct(dp);
        const Eigen::VectorXd row_dot = ds.rowwise().sum();
        ds -= (p.array().colwise() * row_dot.array()).matrix();
        ds *= sc;
        const Matrix dqg = ds * kg;
        const Matrix dkg = ds.transpose() * qg;
        for (Eigen::Index i = 0; i < nq; ++i) dq.row(qrows[i]).segment(c0, dh) += dqg.row(i);
        for (Eigen::Index j = 0; j < nk; ++j) {
          dk.row(krows[j]).segment(c0, dh) += dkg.row(j);
          dv.row(krows[j]).segment(c0, dh) += dvg.row(j);
        }
      }
    }
    tp.accumulate(q, dq);
    tp.accumulate(k, dk);
    tp.accumulate(v, dv);
  });
}

Var external_loss(Tape& t, const std::vector<Var>& inputs, double value,
                  std::vector<Matrix> input_grads) {
  if (inputs.size() != input_grads.size())
    throw std::invalid_argument("external_loss: one gradient per input required");
  bool needs_grad = false;
  for (Var v : inputs) needs_grad = needs_grad || t.requires_grad(v);
  Matrix out(1, 1);
  out(0, 0) = value;
  auto grads = std::make_shared<std::vector<Matrix>>(std::move(input_grads));
  return t.push(std::move(out), needs_grad, [inputs, grads](Tape& tp, const Matrix& g) {
    for (std::size_t i = 0; i < inputs.size(); ++i)
      if (tp.requires_grad(inputs[i])) tp.accumulate(inputs[i], (*grads)[i] * g(0, 0));
  });
}

}  // namespace ops
}  // namespace vsla
