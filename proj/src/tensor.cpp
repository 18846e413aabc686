#include "mdpf/tensor.hpp"

#include <Eigen/Dense>
#include <sstream>
#include <stdexcept>

namespace mdpf {

std::int64_t shape_numel(const std::vector<int>& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_to_string(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  for (int d : shape_) {
    if (d < 0) throw std::invalid_argument("tensor dim must be nonnegative, got " + shape_str());
  }
  data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int> shape, double fill) : Tensor(std::move(shape)) {
  data_.assign(data_.size(), fill);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) +
                                " does not match shape " + shape_str());
  }
}

Tensor Tensor::scalar(double v) {
  Tensor t(std::vector<int>{});
  t.data_[0] = v;
  return t;
}

Tensor Tensor::from_vector(const std::vector<double>& v) {
  return Tensor({static_cast<int>(v.size())}, v);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("item() on tensor with " + std::to_string(numel()) + " elements");
  }
  return data_[0];
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

Tensor& Tensor::operator+=(const Tensor& o) {
  if (!same_shape(o)) {
    throw std::invalid_argument("+= shape mismatch " + shape_str() + " vs " + o.shape_str());
  }
  for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Tensor Tensor::map(const std::function<double(double)>& f) const {
  Tensor out(shape_);
  for (size_t i = 0; i < data_.size(); ++i) out.data_[i] = f(data_[i]);
  return out;
}

std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b) {
  const size_t ra = a.size(), rb = b.size();
  const size_t r = std::max(ra, rb);
  std::vector<int> out(r);
  for (size_t i = 0; i < r; ++i) {
    const int da = i < r - ra ? 1 : a[i - (r - ra)];
    const int db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1) {
      throw std::invalid_argument("cannot broadcast " + shape_to_string(a) + " with " +
                                  shape_to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

namespace {

// Row-major strides, with stride 0 on broadcast (size-1) dims relative to `out`.
std::vector<std::int64_t> bcast_strides(const std::vector<int>& shape,
                                        const std::vector<int>& out) {
  std::vector<std::int64_t> strides(out.size(), 0);
  std::int64_t s = 1;
  const size_t off = out.size() - shape.size();
  for (size_t i = shape.size(); i-- > 0;) {
    strides[i + off] = shape[i] == 1 ? 0 : s;
    s *= shape[i];
  }
  return strides;
}

}  // namespace

Tensor bcast_binary(const Tensor& a, const Tensor& b,
                    const std::function<double(double, double)>& f) {
  if (a.same_shape(b)) {
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
    return out;
  }
  if (a.numel() == 1) {
    const double av = a.data()[0];
    Tensor out(b.shape());
    const double* pb = b.data();
    double* po = out.data();
    const std::int64_t n = b.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = f(av, pb[i]);
    return out;
  }
  if (b.numel() == 1) {
    const double bv = b.data()[0];
    Tensor out(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i], bv);
    return out;
  }

  const std::vector<int> os = broadcast_shape(a.shape(), b.shape());
  Tensor out(os);
  const auto sa = bcast_strides(a.shape(), os);
  const auto sb = bcast_strides(b.shape(), os);
  const int rank = static_cast<int>(os.size());
  std::vector<int> idx(os.size(), 0);
  const std::int64_t n = out.numel();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    po[i] = f(pa[ia], pb[ib]);
    for (int d = rank - 1; d >= 0; --d) {
      ia += sa[d];
      ib += sb[d];
      if (++idx[d] < os[d]) break;
      idx[d] = 0;
      ia -= sa[d] * os[d];
      ib -= sb[d] * os[d];
    }
  }
  return out;
}

Tensor reduce_to_shape(const Tensor& g, const std::vector<int>& target) {
  if (g.shape() == target) return g;
  const std::int64_t tn = shape_numel(target);
  if (tn == 1) {
    double s = 0.0;
    const double* p = g.data();
    for (std::int64_t i = 0; i < g.numel(); ++i) s += p[i];
    Tensor out(target);
    out.data()[0] = s;
    return out;
  }
  Tensor out(target);
  const auto st = bcast_strides(target, g.shape());
  const int rank = g.rank();
  std::vector<int> idx(static_cast<size_t>(rank), 0);
  const double* pg = g.data();
  double* po = out.data();
  std::int64_t it = 0;
  for (std::int64_t i = 0; i < g.numel(); ++i) {
    po[it] += pg[i];
    for (int d = rank - 1; d >= 0; --d) {
      it += st[d];
      if (++idx[d] < g.shape()[d]) break;
      idx[d] = 0;
      it -= st[d] * g.shape()[d];
    }
  }
  return out;
}

namespace {
using EMat = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using EMatMut = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

void check_rank2(const Tensor& a, const Tensor& b, const char* who) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw std::invalid_argument(std::string(who) + " requires rank-2 tensors, got " +
                                a.shape_str() + " and " + b.shape_str());
  }
}
}  // namespace

Tensor matmul_vals(const Tensor& a, const Tensor& b) {
  check_rank2(a, b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul inner dims differ: " + a.shape_str() + " * " +
                                b.shape_str());
  }
  Tensor out({a.dim(0), b.dim(1)});
  EMat ma(a.data(), a.dim(0), a.dim(1));
  EMat mb(b.data(), b.dim(0), b.dim(1));
  EMatMut mo(out.data(), out.dim(0), out.dim(1));
  mo.noalias() = ma * mb;
  return out;
}

Tensor matmul_t_left(const Tensor& a, const Tensor& b) {
  check_rank2(a, b, "matmul_t_left");
  if (a.dim(0) != b.dim(0)) {
    throw std::invalid_argument("matmul_t_left dims differ: " + a.shape_str() + " , " +
                                b.shape_str());
  }
  Tensor out({a.dim(1), b.dim(1)});
  EMat ma(a.data(), a.dim(0), a.dim(1));
  EMat mb(b.data(), b.dim(0), b.dim(1));
  EMatMut mo(out.data(), out.dim(0), out.dim(1));
  mo.noalias() = ma.transpose() * mb;
  return out;
}

Tensor matmul_t_right(const Tensor& a, const Tensor& b) {
  check_rank2(a, b, "matmul_t_right");
  if (a.dim(1) != b.dim(1)) {
    throw std::invalid_argument("matmul_t_right dims differ: " + a.shape_str() + " , " +
                                b.shape_str());
  }
  Tensor out({a.dim(0), b.dim(0)});
  EMat ma(a.data(), a.dim(0), a.dim(1));
  EMat mb(b.data(), b.dim(0), b.dim(1));
  EMatMut mo(out.data(), out.dim(0), out.dim(1));
  mo.noalias() = ma * mb.transpose();
  return out;
}

}  // namespace mdpf
