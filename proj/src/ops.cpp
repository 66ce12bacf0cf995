#include "usrf/ops.hpp"

#include <cmath>
#include <numbers>

#include "usrf/error.hpp"

namespace usrf {
namespace {

void require_same_tape(const Tensor& a, const Tensor& b, const char* op) {
  if (&a.tape() != &b.tape()) throw InputError(std::string(op) + ": operands on different tapes");
}

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

enum class Broadcast { None, LeftScalar, RightScalar };

Broadcast broadcast_kind(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::None;
  if (a.size() == 1) return Broadcast::LeftScalar;
  if (b.size() == 1) return Broadcast::RightScalar;
  shape_error(op, a, b);
}

template <typename F, typename DF>
Tensor unary(const char* op, const Tensor& x, F f, DF df) {
  Matrix y = x.value().unaryExpr(f);
  const int ix = x.id();
  return x.tape().record(op, std::move(y), {x}, [ix, df](Tape& t, int self) {
    const Matrix& xv = t.value(ix);
    const Matrix& yv = t.value(self);
    Matrix d(xv.rows(), xv.cols());
    for (Index i = 0; i < xv.size(); ++i) d.data()[i] = df(xv.data()[i], yv.data()[i]);
    t.accumulate(ix, t.grad_of(self).cwiseProduct(d));
  });
}

void check_index_list(const char* op, const IndexList& idx, Index expected, Index bound) {
  if (!idx) throw InputError(std::string(op) + ": null index list");
  if (static_cast<Index>(idx->size()) != expected)
    throw DimensionError(std::string(op) + ": index list length " + std::to_string(idx->size()) +
                         " != " + std::to_string(expected));
  for (Index i : *idx)
    if (i < 0 || i >= bound) throw DimensionError(std::string(op) + ": index out of range");
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_tape(a, b, "matmul");
  if (a.cols() != b.rows()) shape_error("matmul", a.value(), b.value());
  Matrix y = a.value() * b.value();
  const int ia = a.id(), ib = b.id();
  return a.tape().record("matmul", std::move(y), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Tensor transpose(const Tensor& x) {
  Matrix y = x.value().transpose();
  const int ix = x.id();
  return x.tape().record("transpose", std::move(y), {x}, [ix](Tape& t, int self) {
    t.accumulate(ix, t.grad_of(self).transpose());
  });
}

Tensor reshape(const Tensor& x, Index rows, Index cols) {
  if (rows * cols != x.size())
    throw DimensionError("reshape: " + shape_string(x.value()) + " to " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  Matrix y = Eigen::Map<const Matrix>(x.value().data(), rows, cols);
  const int ix = x.id();
  const Index r0 = x.rows(), c0 = x.cols();
  return x.tape().record("reshape", std::move(y), {x}, [ix, r0, c0](Tape& t, int self) {
    t.accumulate(ix, Eigen::Map<const Matrix>(t.grad_of(self).data(), r0, c0));
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_tape(a, b, "add");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const Broadcast kind = broadcast_kind("add", av, bv);
  Matrix y;
  switch (kind) {
    case Broadcast::None: y = av + bv; break;
    case Broadcast::LeftScalar: y = bv.array() + av(0, 0); break;
    case Broadcast::RightScalar: y = av.array() + bv(0, 0); break;
  }
  const int ia = a.id(), ib = b.id();
  return a.tape().record("add", std::move(y), {a, b}, [ia, ib, kind](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    const Matrix total = Matrix::Constant(1, 1, g.sum());
    t.accumulate(ia, kind == Broadcast::LeftScalar ? total : g);
    t.accumulate(ib, kind == Broadcast::RightScalar ? total : g);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_tape(a, b, "sub");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const Broadcast kind = broadcast_kind("sub", av, bv);
  Matrix y;
  switch (kind) {
    case Broadcast::None: y = av - bv; break;
    case Broadcast::LeftScalar: y = (-bv.array() + av(0, 0)).matrix(); break;
    case Broadcast::RightScalar: y = av.array() - bv(0, 0); break;
  }
  const int ia = a.id(), ib = b.id();
  return a.tape().record("sub", std::move(y), {a, b}, [ia, ib, kind](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    if (kind == Broadcast::LeftScalar)
      t.accumulate(ia, Matrix::Constant(1, 1, g.sum()));
    else
      t.accumulate(ia, g);
    if (kind == Broadcast::RightScalar)
      t.accumulate(ib, Matrix::Constant(1, 1, -g.sum()));
    else
      t.accumulate(ib, -g);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_tape(a, b, "mul");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const Broadcast kind = broadcast_kind("mul", av, bv);
  Matrix y;
  switch (kind) {
    case Broadcast::None: y = av.cwiseProduct(bv); break;
    case Broadcast::LeftScalar: y = bv * av(0, 0); break;
    case Broadcast::RightScalar: y = av * bv(0, 0); break;
  }
  const int ia = a.id(), ib = b.id();
  return a.tape().record("mul", std::move(y), {a, b}, [ia, ib, kind](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    const Matrix& av = t.value(ia);
    const Matrix& bv = t.value(ib);
    switch (kind) {
      case Broadcast::None:
        if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(bv));
        if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(av));
        break;
      case Broadcast::LeftScalar:
        t.accumulate(ia, Matrix::Constant(1, 1, g.cwiseProduct(bv).sum()));
        t.accumulate(ib, g * av(0, 0));
        break;
      case Broadcast::RightScalar:
        t.accumulate(ia, g * bv(0, 0));
        t.accumulate(ib, Matrix::Constant(1, 1, g.cwiseProduct(av).sum()));
        break;
    }
  });
}

Tensor scale(const Tensor& x, double c) {
  Matrix y = x.value() * c;
  const int ix = x.id();
  return x.tape().record("scale", std::move(y), {x}, [ix, c](Tape& t, int self) {
    t.accumulate(ix, t.grad_of(self) * c);
  });
}

Tensor add_scalar(const Tensor& x, double c) {
  Matrix y = x.value().array() + c;
  const int ix = x.id();
  return x.tape().record("add_scalar", std::move(y), {x}, [ix](Tape& t, int self) {
    t.accumulate(ix, t.grad_of(self));
  });
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  require_same_tape(x, b, "add_rowvec");
  if (b.rows() != 1 || b.cols() != x.cols()) shape_error("add_rowvec", x.value(), b.value());
  Matrix y = x.value().rowwise() + b.value().row(0);
  const int ix = x.id(), ib = b.id();
  return x.tape().record("add_rowvec", std::move(y), {x, b}, [ix, ib](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    t.accumulate(ix, g);
    if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
  });
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) { return add_rowvec(matmul(x, w), b); }

Tensor scale_rows(const Tensor& x, const Tensor& w) {
  require_same_tape(x, w, "scale_rows");
  if (w.cols() != 1 || w.rows() != x.rows()) shape_error("scale_rows", x.value(), w.value());
  Matrix y = x.value().array().colwise() * w.value().col(0).array();
  const int ix = x.id(), iw = w.id();
  return x.tape().record("scale_rows", std::move(y), {x, w}, [ix, iw](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    if (t.requires_grad(ix)) t.accumulate(ix, (g.array().colwise() * t.value(iw).col(0).array()).matrix());
    if (t.requires_grad(iw)) t.accumulate(iw, g.cwiseProduct(t.value(ix)).rowwise().sum());
  });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + v * pdf;
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor softplus(const Tensor& x) {
  return unary(
      "softplus", x, [](double v) { return std::log1p(std::exp(-std::abs(v))) + std::max(v, 0.0); },
      [](double v, double) {
        return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      });
}

Tensor sum(const Tensor& x) {
  Matrix y = Matrix::Constant(1, 1, x.value().sum());
  const int ix = x.id();
  const Index r = x.rows(), c = x.cols();
  return x.tape().record("sum", std::move(y), {x}, [ix, r, c](Tape& t, int self) {
    t.accumulate(ix, Matrix::Constant(r, c, t.grad_of(self)(0, 0)));
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw DimensionError("mean of empty tensor");
  const double n = static_cast<double>(x.size());
  Matrix y = Matrix::Constant(1, 1, x.value().sum() / n);
  const int ix = x.id();
  const Index r = x.rows(), c = x.cols();
  return x.tape().record("mean", std::move(y), {x}, [ix, r, c, n](Tape& t, int self) {
    t.accumulate(ix, Matrix::Constant(r, c, t.grad_of(self)(0, 0) / n));
  });
}

Tensor segment_sum(const Tensor& x, const IndexList& seg, Index nseg) {
  check_index_list("segment_sum", seg, x.rows(), nseg);
  const Matrix& xv = x.value();
  Matrix y = Matrix::Zero(nseg, xv.cols());
  for (Index i = 0; i < xv.rows(); ++i) y.row((*seg)[i]) += xv.row(i);
  const int ix = x.id();
  return x.tape().record("segment_sum", std::move(y), {x}, [ix, seg](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    Matrix gx(static_cast<Index>(seg->size()), g.cols());
    for (Index i = 0; i < gx.rows(); ++i) gx.row(i) = g.row((*seg)[i]);
    t.accumulate(ix, gx);
  });
}

Tensor segment_mean(const Tensor& x, const IndexList& seg, Index nseg) {
  check_index_list("segment_mean", seg, x.rows(), nseg);
  Vector counts = Vector::Zero(nseg);
  for (Index s : *seg) counts(s) += 1.0;
  for (Index s = 0; s < nseg; ++s)
    if (counts(s) == 0.0) throw DimensionError("segment_mean: empty segment " + std::to_string(s));
  const Matrix& xv = x.value();
  Matrix y = Matrix::Zero(nseg, xv.cols());
  for (Index i = 0; i < xv.rows(); ++i) y.row((*seg)[i]) += xv.row(i);
  y.array().colwise() /= counts.array();
  const int ix = x.id();
  return x.tape().record("segment_mean", std::move(y), {x}, [ix, seg, counts](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    Matrix gx(static_cast<Index>(seg->size()), g.cols());
    for (Index i = 0; i < gx.rows(); ++i) {
      const Index s = (*seg)[i];
      gx.row(i) = g.row(s) / counts(s);
    }
    t.accumulate(ix, gx);
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw InputError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) shape_error("concat_cols", parts.front().value(), p.value());
    cols += p.cols();
  }
  Matrix y(rows, cols);
  std::vector<int> ids;
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    y.middleCols(off, p.cols()) = p.value();
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.cols();
  }
  return parts.front().tape().record("concat_cols", std::move(y), parts, [ids, offsets](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    for (std::size_t i = 0; i < ids.size(); ++i)
      t.accumulate(ids[i], g.middleCols(offsets[i], t.value(ids[i]).cols()));
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw InputError("concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) shape_error("concat_rows", parts.front().value(), p.value());
    rows += p.rows();
  }
  Matrix y(rows, cols);
  std::vector<int> ids;
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    y.middleRows(off, p.rows()) = p.value();
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.rows();
  }
  return parts.front().tape().record("concat_rows", std::move(y), parts, [ids, offsets](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    for (std::size_t i = 0; i < ids.size(); ++i)
      t.accumulate(ids[i], g.middleRows(offsets[i], t.value(ids[i]).rows()));
  });
}

Tensor slice_cols(const Tensor& x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.cols())
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) + ") of " +
                         shape_string(x.value()));
  Matrix y = x.value().middleCols(start, count);
  const int ix = x.id();
  const Index r = x.rows(), c = x.cols();
  return x.tape().record("slice_cols", std::move(y), {x}, [ix, r, c, start, count](Tape& t, int self) {
    Matrix gx = Matrix::Zero(r, c);
    gx.middleCols(start, count) = t.grad_of(self);
    t.accumulate(ix, gx);
  });
}

Tensor gather_rows(const Tensor& x, const IndexList& idx) {
  check_index_list("gather_rows", idx, static_cast<Index>(idx ? idx->size() : 0), x.rows());
  const Matrix& xv = x.value();
  Matrix y(static_cast<Index>(idx->size()), xv.cols());
  for (Index i = 0; i < y.rows(); ++i) y.row(i) = xv.row((*idx)[i]);
  const int ix = x.id();
  const Index r = x.rows();
  return x.tape().record("gather_rows", std::move(y), {x}, [ix, idx, r](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    Matrix gx = Matrix::Zero(r, g.cols());
    for (Index i = 0; i < g.rows(); ++i) gx.row((*idx)[i]) += g.row(i);
    t.accumulate(ix, gx);
  });
}

Tensor scatter_add_rows(const Tensor& x, const IndexList& idx, Index nrows) {
  check_index_list("scatter_add_rows", idx, x.rows(), nrows);
  const Matrix& xv = x.value();
  Matrix y = Matrix::Zero(nrows, xv.cols());
  for (Index i = 0; i < xv.rows(); ++i) y.row((*idx)[i]) += xv.row(i);
  const int ix = x.id();
  return x.tape().record("scatter_add_rows", std::move(y), {x}, [ix, idx](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    Matrix gx(static_cast<Index>(idx->size()), g.cols());
    for (Index i = 0; i < gx.rows(); ++i) gx.row(i) = g.row((*idx)[i]);
    t.accumulate(ix, gx);
  });
}

Tensor dropout(const Tensor& x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw InputError("dropout: p must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  Matrix mask(x.rows(), x.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng.uniform() < p ? 0.0 : keep_scale;
  Matrix y = x.value().cwiseProduct(mask);
  const int ix = x.id();
  return x.tape().record("dropout", std::move(y), {x}, [ix, mask = std::move(mask)](Tape& t, int self) {
    t.accumulate(ix, t.grad_of(self).cwiseProduct(mask));
  });
}

Tensor softmax(const Tensor& x, int axis) {
  if (axis != 0 && axis != 1) throw InputError("softmax: axis must be 0 or 1");
  Matrix y;
  if (axis == 1) {
    y = x.value();
    for (Index r = 0; r < y.rows(); ++r) {
      auto row = y.row(r);
      row.array() -= row.maxCoeff();
      row = row.array().exp().matrix();
      row /= row.sum();
    }
  } else {
    y = x.value();
    for (Index c = 0; c < y.cols(); ++c) {
      auto col = y.col(c);
      col.array() -= col.maxCoeff();
      col = col.array().exp().matrix();
      col /= col.sum();
    }
  }
  const int ix = x.id();
  return x.tape().record("softmax", std::move(y), {x}, [ix, axis](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    const Matrix& yv = t.value(self);
    Matrix gy = g.cwiseProduct(yv);
    Matrix gx;
    if (axis == 1) {
      Vector s = gy.rowwise().sum();
      gx = gy - (yv.array().colwise() * s.array()).matrix();
    } else {
      Eigen::RowVectorXd s = gy.colwise().sum();
      gx = gy - (yv.array().rowwise() * s.array()).matrix();
    }
    t.accumulate(ix, gx);
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_same_tape(x, gain, "layer_norm");
  require_same_tape(x, bias, "layer_norm");
  const Index c = x.cols();
  if (gain.rows() != 1 || gain.cols() != c) shape_error("layer_norm", x.value(), gain.value());
  if (bias.rows() != 1 || bias.cols() != c) shape_error("layer_norm", x.value(), bias.value());
  const Matrix& xv = x.value();
  Matrix xhat(xv.rows(), c);
  Vector inv_std(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Matrix y = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  y.rowwise() += bias.value().row(0);
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(
      "layer_norm", std::move(y), {x, gain, bias},
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int self) {
        const Matrix& g = t.grad_of(self);
        if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
        if (t.requires_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
        if (t.requires_grad(ix)) {
          Matrix gxhat = (g.array().rowwise() * t.value(ig).row(0).array()).matrix();
          Matrix gx(g.rows(), g.cols());
          for (Index r = 0; r < g.rows(); ++r) {
            const double m1 = gxhat.row(r).mean();
            const double m2 = gxhat.row(r).cwiseProduct(xhat.row(r)).mean();
            gx.row(r) = inv_std(r) * (gxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
          }
          t.accumulate(ix, gx);
        }
      });
}

Tensor segment_softmax(const Tensor& scores, const IndexList& seg, Index nseg) {
  check_index_list("segment_softmax", seg, scores.rows(), nseg);
  const Matrix& s = scores.value();
  const Index cols = s.cols();
  Matrix mx = Matrix::Constant(nseg, cols, -std::numeric_limits<double>::infinity());
  for (Index i = 0; i < s.rows(); ++i) mx.row((*seg)[i]) = mx.row((*seg)[i]).cwiseMax(s.row(i));
  Matrix y(s.rows(), cols);
  Matrix denom = Matrix::Zero(nseg, cols);
  for (Index i = 0; i < s.rows(); ++i) {
    y.row(i) = (s.row(i) - mx.row((*seg)[i])).array().exp().matrix();
    denom.row((*seg)[i]) += y.row(i);
  }
  for (Index i = 0; i < s.rows(); ++i) y.row(i).array() /= denom.row((*seg)[i]).array();
  const int is = scores.id();
  return scores.tape().record("segment_softmax", std::move(y), {scores}, [is, seg, nseg](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    const Matrix& yv = t.value(self);
    Matrix gy = g.cwiseProduct(yv);
    Matrix dots = Matrix::Zero(nseg, g.cols());
    for (Index i = 0; i < g.rows(); ++i) dots.row((*seg)[i]) += gy.row(i);
    Matrix gx(g.rows(), g.cols());
    for (Index i = 0; i < g.rows(); ++i)
      gx.row(i) = gy.row(i) - yv.row(i).cwiseProduct(dots.row((*seg)[i]));
    t.accumulate(is, gx);
  });
}

Tensor head_dot(const Tensor& q, const Tensor& k, Index heads) {
  require_same_tape(q, k, "head_dot");
  if (q.rows() != k.rows() || q.cols() != k.cols()) shape_error("head_dot", q.value(), k.value());
  if (heads <= 0 || q.cols() % heads != 0) throw DimensionError("head_dot: width not divisible by heads");
  const Index dh = q.cols() / heads;
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  Matrix y(qv.rows(), heads);
  for (Index h = 0; h < heads; ++h)
    y.col(h) = qv.middleCols(h * dh, dh).cwiseProduct(kv.middleCols(h * dh, dh)).rowwise().sum();
  const int iq = q.id(), ik = k.id();
  return q.tape().record("head_dot", std::move(y), {q, k}, [iq, ik, heads, dh](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    const Matrix& qv = t.value(iq);
    const Matrix& kv = t.value(ik);
    Matrix gq(qv.rows(), qv.cols()), gk(kv.rows(), kv.cols());
    for (Index h = 0; h < heads; ++h) {
      gq.middleCols(h * dh, dh) = kv.middleCols(h * dh, dh).array().colwise() * g.col(h).array();
      gk.middleCols(h * dh, dh) = qv.middleCols(h * dh, dh).array().colwise() * g.col(h).array();
    }
    t.accumulate(iq, gq);
    t.accumulate(ik, gk);
  });
}

Tensor head_scale(const Tensor& v, const Tensor& a, Index heads) {
  require_same_tape(v, a, "head_scale");
  if (a.rows() != v.rows() || a.cols() != heads) shape_error("head_scale", v.value(), a.value());
  if (heads <= 0 || v.cols() % heads != 0) throw DimensionError("head_scale: width not divisible by heads");
  const Index dh = v.cols() / heads;
  const Matrix& vv = v.value();
  const Matrix& av = a.value();
  Matrix y(vv.rows(), vv.cols());
  for (Index h = 0; h < heads; ++h)
    y.middleCols(h * dh, dh) = vv.middleCols(h * dh, dh).array().colwise() * av.col(h).array();
  const int iv = v.id(), ia = a.id();
  return v.tape().record("head_scale", std::move(y), {v, a}, [iv, ia, heads, dh](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    const Matrix& vv = t.value(iv);
    const Matrix& av = t.value(ia);
    if (t.requires_grad(iv)) {
      Matrix gv(vv.rows(), vv.cols());
      for (Index h = 0; h < heads; ++h)
        gv.middleCols(h * dh, dh) = g.middleCols(h * dh, dh).array().colwise() * av.col(h).array();
      t.accumulate(iv, gv);
    }
    if (t.requires_grad(ia)) {
      Matrix ga(av.rows(), heads);
      for (Index h = 0; h < heads; ++h)
        ga.col(h) = g.middleCols(h * dh, dh).cwiseProduct(vv.middleCols(h * dh, dh)).rowwise().sum();
      t.accumulate(ia, ga);
    }
  });
}

Tensor block_matmul(const Tensor& a, const Tensor& b, Index blocks, bool transpose_b) {
  require_same_tape(a, b, "block_matmul");
  if (blocks <= 0 || a.rows() % blocks != 0 || b.rows() % blocks != 0)
    throw DimensionError("block_matmul: rows not divisible into blocks");
  const Index ra = a.rows() / blocks, rb = b.rows() / blocks;
  if (transpose_b ? a.cols() != b.cols() : a.cols() != rb) shape_error("block_matmul", a.value(), b.value());
  const Index out_cols = transpose_b ? rb : b.cols();
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  Matrix y(ra * blocks, out_cols);
  for (Index k = 0; k < blocks; ++k) {
    if (transpose_b)
      y.middleRows(k * ra, ra).noalias() = av.middleRows(k * ra, ra) * bv.middleRows(k * rb, rb).transpose();
    else
      y.middleRows(k * ra, ra).noalias() = av.middleRows(k * ra, ra) * bv.middleRows(k * rb, rb);
  }
  const int ia = a.id(), ib = b.id();
  return a.tape().record("block_matmul", std::move(y), {a, b},
                         [ia, ib, blocks, ra, rb, transpose_b](Tape& t, int self) {
                           const Matrix& g = t.grad_of(self);
                           const Matrix& av = t.value(ia);
                           const Matrix& bv = t.value(ib);
                           Matrix ga(av.rows(), av.cols()), gb(bv.rows(), bv.cols());
                           for (Index k = 0; k < blocks; ++k) {
                             auto gk = g.middleRows(k * ra, ra);
                             auto ak = av.middleRows(k * ra, ra);
                             auto bk = bv.middleRows(k * rb, rb);
                             if (transpose_b) {
                               ga.middleRows(k * ra, ra).noalias() = gk * bk;
                               gb.middleRows(k * rb, rb).noalias() = gk.transpose() * ak;
                             } else {
                               ga.middleRows(k * ra, ra).noalias() = gk * bk.transpose();
                               gb.middleRows(k * rb, rb).noalias() = ak.transpose() * gk;
                             }
                           }
                           t.accumulate(ia, ga);
                           t.accumulate(ib, gb);
                         });
}

Tensor spatial_gating(const Tensor& w, const Tensor& bias, const Tensor& u) {
  require_same_tape(w, u, "spatial_gating");
  require_same_tape(bias, u, "spatial_gating");
  const Index positions = w.rows();
  if (w.cols() != positions) throw DimensionError("spatial_gating: weight must be square, got " + shape_string(w.value()));
  if (bias.rows() != positions || bias.cols() != 1) shape_error("spatial_gating", w.value(), bias.value());
  if (positions == 0 || u.rows() % positions != 0)
    throw DimensionError("spatial_gating: " + std::to_string(u.rows()) + " rows is not a multiple of " +
                         std::to_string(positions) + " positions");
  const Index blocks = u.rows() / positions;
  const Matrix& wv = w.value();
  const Matrix& uv = u.value();
  Matrix y(uv.rows(), uv.cols());
  for (Index k = 0; k < blocks; ++k) {
    auto out = y.middleRows(k * positions, positions);
    out.noalias() = wv * uv.middleRows(k * positions, positions);
    out.colwise() += bias.value().col(0);
  }
  const int iw = w.id(), ib = bias.id(), iu = u.id();
  return u.tape().record("spatial_gating", std::move(y), {w, bias, u},
                         [iw, ib, iu, positions, blocks](Tape& t, int self) {
                           const Matrix& g = t.grad_of(self);
                           const Matrix& wv = t.value(iw);
                           const Matrix& uv = t.value(iu);
                           Matrix gw = Matrix::Zero(positions, positions);
                           Matrix gb = Matrix::Zero(positions, 1);
                           Matrix gu(uv.rows(), uv.cols());
                           for (Index k = 0; k < blocks; ++k) {
                             auto gk = g.middleRows(k * positions, positions);
                             gw.noalias() += gk * uv.middleRows(k * positions, positions).transpose();
                             gb += gk.rowwise().sum();
                             gu.middleRows(k * positions, positions).noalias() = wv.transpose() * gk;
                           }
                           t.accumulate(iw, gw);
                           t.accumulate(ib, gb);
                           t.accumulate(iu, gu);
                         });
}

}  // namespace usrf
