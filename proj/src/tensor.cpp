#include "mhc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace mhc {

namespace {

thread_local bool g_grad_enabled = true;

constexpr double kSqrt1_2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void check_dim(bool cond, const std::string& msg) {
    if (!cond) throw DimensionError(msg);
}

// trailing-axis alignment, extent-1 axes stretch
Shape broadcast_shapes(const char* op, const Shape& a, const Shape& b) {
    size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (size_t i = 0; i < rank; ++i) {
        int64_t ea = (i < rank - a.size()) ? 1 : a[i - (rank - a.size())];
        int64_t eb = (i < rank - b.size()) ? 1 : b[i - (rank - b.size())];
        if (ea != eb && ea != 1 && eb != 1) {
            throw DimensionError(std::string(op) + ": shapes not broadcastable: " +
                                 shape_str(a) + " vs " + shape_str(b));
        }
        out[i] = std::max(ea, eb);
    }
    return out;
}

// element strides of `operand` viewed through `out`; 0 on broadcast axes
std::vector<int64_t> broadcast_strides(const Shape& operand, const Shape& out) {
    std::vector<int64_t> strides(out.size(), 0);
    int64_t s = 1;
    for (int i = static_cast<int>(operand.size()) - 1,
             j = static_cast<int>(out.size()) - 1;
         i >= 0; --i, --j) {
        strides[static_cast<size_t>(j)] = (operand[static_cast<size_t>(i)] == 1 &&
                                           out[static_cast<size_t>(j)] != 1)
                                              ? 0
                                              : s;
        s *= operand[static_cast<size_t>(i)];
    }
    return strides;
}

// Calls f(out_index, a_offset, b_offset) for every element of `out`.
template <class F>
void for_each_pair(const Shape& out, const std::vector<int64_t>& sa,
                   const std::vector<int64_t>& sb, F&& f) {
    int64_t total = shape_size(out);
    size_t rank = out.size();
    if (rank == 0) {
        f(0, 0, 0);
        return;
    }
    std::vector<int64_t> idx(rank, 0);
    int64_t oa = 0, ob = 0;
    for (int64_t lin = 0; lin < total; ++lin) {
        f(lin, oa, ob);
        for (int ax = static_cast<int>(rank) - 1; ax >= 0; --ax) {
            size_t u = static_cast<size_t>(ax);
            ++idx[u];
            oa += sa[u];
            ob += sb[u];
            if (idx[u] < out[u]) break;
            oa -= sa[u] * out[u];
            ob -= sb[u] * out[u];
            idx[u] = 0;
        }
    }
}

Tensor make_result(Shape shape, std::vector<double> data) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return Tensor(std::move(impl));
}

bool wants_grad(const Tensor& t) { return g_grad_enabled && t.requires_grad(); }

void attach(Tensor& out, std::vector<Tensor> parents, std::function<void()> backprop) {
    out.get()->requires_grad = true;
    out.get()->parents.reserve(parents.size());
    for (auto& p : parents) out.get()->parents.push_back(p.ptr());
    out.get()->backprop = std::move(backprop);
}

// generic elementwise binary op with broadcasting
template <class FF, class DA, class DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, FF f, DA dfa, DB dfb) {
    Shape os = broadcast_shapes(name, a.shape(), b.shape());
    int64_t total = shape_size(os);
    std::vector<double> out(static_cast<size_t>(total));
    const auto& ad = a.data();
    const auto& bd = b.data();

    bool same = a.shape() == b.shape();
    if (same) {
        for (int64_t i = 0; i < total; ++i)
            out[static_cast<size_t>(i)] = f(ad[static_cast<size_t>(i)], bd[static_cast<size_t>(i)]);
    } else {
        auto sa = broadcast_strides(a.shape(), os);
        auto sb = broadcast_strides(b.shape(), os);
        for_each_pair(os, sa, sb, [&](int64_t lin, int64_t oa, int64_t ob) {
            out[static_cast<size_t>(lin)] = f(ad[static_cast<size_t>(oa)], bd[static_cast<size_t>(ob)]);
        });
    }

    Tensor res = make_result(os, std::move(out));
    if (wants_grad(a) || wants_grad(b)) {
        TensorImpl* self = res.get();
        TensorImpl* pa = a.get();
        TensorImpl* pb = b.get();
        bool ga = wants_grad(a), gb = wants_grad(b);
        Shape osc = os;
        attach(res, {a, b}, [self, pa, pb, ga, gb, dfa, dfb, same, osc]() {
            const auto& g = self->grad;
            if (ga) pa->ensure_grad();
            if (gb) pb->ensure_grad();
            if (same) {
                int64_t n = self->size();
                for (int64_t i = 0; i < n; ++i) {
                    size_t u = static_cast<size_t>(i);
                    double av = pa->data[u], bv = pb->data[u], yv = self->data[u];
                    if (ga) pa->grad[u] += g[u] * dfa(av, bv, yv);
                    if (gb) pb->grad[u] += g[u] * dfb(av, bv, yv);
                }
            } else {
                auto sa = broadcast_strides(pa->shape, osc);
                auto sb = broadcast_strides(pb->shape, osc);
                for_each_pair(osc, sa, sb, [&](int64_t lin, int64_t oa, int64_t ob) {
                    size_t ul = static_cast<size_t>(lin);
                    double av = pa->data[static_cast<size_t>(oa)];
                    double bv = pb->data[static_cast<size_t>(ob)];
                    double yv = self->data[ul];
                    if (ga) pa->grad[static_cast<size_t>(oa)] += g[ul] * dfa(av, bv, yv);
                    if (gb) pb->grad[static_cast<size_t>(ob)] += g[ul] * dfb(av, bv, yv);
                });
            }
        });
    }
    return res;
}

// generic elementwise unary op; df(x, y) is dy/dx
template <class FF, class DF>
Tensor unary_op(const Tensor& a, FF f, DF df) {
    int64_t n = a.size();
    std::vector<double> out(static_cast<size_t>(n));
    const auto& ad = a.data();
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = f(ad[static_cast<size_t>(i)]);
    Tensor res = make_result(a.shape(), std::move(out));
    if (wants_grad(a)) {
        TensorImpl* self = res.get();
        TensorImpl* pa = a.get();
        attach(res, {a}, [self, pa, df]() {
            pa->ensure_grad();
            int64_t n = self->size();
            for (int64_t i = 0; i < n; ++i) {
                size_t u = static_cast<size_t>(i);
                pa->grad[u] += self->grad[u] * df(pa->data[u], self->data[u]);
            }
        });
    }
    return res;
}

} // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

int64_t shape_size(const Shape& s) {
    int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return from_data(std::move(shape), {}, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> d(static_cast<size_t>(shape_size(shape)), value);
    return from_data(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    int64_t n = shape_size(shape);
    if (n < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
    if (data.empty()) data.assign(static_cast<size_t>(n), 0.0);
    if (static_cast<int64_t>(data.size()) != n) {
        throw DimensionError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

int64_t Tensor::extent(int axis) const {
    int r = static_cast<int>(rank());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r)
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return impl_->shape[static_cast<size_t>(axis)];
}

double Tensor::value() const {
    if (size() != 1) throw ContractError("value() on non-scalar tensor " + shape_str(shape()));
    return impl_->data[0];
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- matmul ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_dim(a.rank() >= 2 && b.rank() >= 2,
              "matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " x " +
                  shape_str(b.shape()));
    size_t ra = a.shape().size(), rb = b.shape().size();
    int64_t M = a.shape()[ra - 2], K = a.shape()[ra - 1];
    int64_t K2 = b.shape()[rb - 2], N = b.shape()[rb - 1];
    if (K != K2) {
        throw DimensionError("matmul: inner extents differ: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    Shape abatch(a.shape().begin(), a.shape().end() - 2);
    Shape bbatch(b.shape().begin(), b.shape().end() - 2);
    Shape batch = broadcast_shapes("matmul", abatch, bbatch);
    Shape oshape = batch;
    oshape.push_back(M);
    oshape.push_back(N);

    int64_t nbatch = shape_size(batch);
    auto sa = broadcast_strides(abatch, batch);
    auto sb = broadcast_strides(bbatch, batch);

    // per-batch base offsets for a and b
    std::vector<int64_t> offa(static_cast<size_t>(nbatch)), offb(static_cast<size_t>(nbatch));
    for_each_pair(batch, sa, sb, [&](int64_t lin, int64_t oa, int64_t ob) {
        offa[static_cast<size_t>(lin)] = oa * M * K;
        offb[static_cast<size_t>(lin)] = ob * K * N;
    });

    std::vector<double> out(static_cast<size_t>(nbatch * M * N), 0.0);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (int64_t bi = 0; bi < nbatch; ++bi) {
        const double* ap = ad + offa[static_cast<size_t>(bi)];
        const double* bp = bd + offb[static_cast<size_t>(bi)];
        double* op = out.data() + bi * M * N;
        for (int64_t m = 0; m < M; ++m) {
            for (int64_t k = 0; k < K; ++k) {
                double av = ap[m * K + k];
                if (av == 0.0) continue;
                const double* brow = bp + k * N;
                double* orow = op + m * N;
                for (int64_t n = 0; n < N; ++n) orow[n] += av * brow[n];
            }
        }
    }

    Tensor res = make_result(std::move(oshape), std::move(out));
    if (wants_grad(a) || wants_grad(b)) {
        TensorImpl* self = res.get();
        TensorImpl* pa = a.get();
        TensorImpl* pb = b.get();
        bool ga = wants_grad(a), gb = wants_grad(b);
        attach(res, {a, b}, [self, pa, pb, ga, gb, offa, offb, nbatch, M, N, K]() {
            if (ga) pa->ensure_grad();
            if (gb) pb->ensure_grad();
            const double* g = self->grad.data();
            const double* ad = pa->data.data();
            const double* bd = pb->data.data();
            for (int64_t bi = 0; bi < nbatch; ++bi) {
                const double* gp = g + bi * M * N;
                const double* ap = ad + offa[static_cast<size_t>(bi)];
                const double* bp = bd + offb[static_cast<size_t>(bi)];
                if (ga) {
                    double* dap = pa->grad.data() + offa[static_cast<size_t>(bi)];
                    for (int64_t m = 0; m < M; ++m) {
                        for (int64_t n = 0; n < N; ++n) {
                            double gv = gp[m * N + n];
                            if (gv == 0.0) continue;
                            const double* bcol = bp + n;
                            double* darow = dap + m * K;
                            for (int64_t k = 0; k < K; ++k) darow[k] += gv * bcol[k * N];
                        }
                    }
                }
                if (gb) {
                    double* dbp = pb->grad.data() + offb[static_cast<size_t>(bi)];
                    for (int64_t m = 0; m < M; ++m) {
                        for (int64_t k = 0; k < K; ++k) {
                            double av = ap[m * K + k];
                            if (av == 0.0) continue;
                            const double* grow = gp + m * N;
                            double* dbrow = dbp + k * N;
                            for (int64_t n = 0; n < N; ++n) dbrow[n] += av * grow[n];
                        }
                    }
                }
            }
        });
    }
    return res;
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op("add", a, b, [](double x, double y) { return x + y; },
                     [](double, double, double) { return 1.0; },
                     [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op("sub", a, b, [](double x, double y) { return x - y; },
                     [](double, double, double) { return 1.0; },
                     [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op("mul", a, b, [](double x, double y) { return x * y; },
                     [](double, double y, double) { return y; },
                     [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op("div", a, b, [](double x, double y) { return x / y; },
                     [](double, double y, double) { return 1.0 / y; },
                     [](double, double y, double yv) { return -yv / y; });
}

Tensor scale(const Tensor& a, double s) {
    return unary_op(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary_op(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a) {
    return unary_op(a, [](double x) { return std::exp(x); },
                    [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary_op(a, [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
    return unary_op(a, [](double x) { return std::tanh(x); },
                    [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                    [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
    return unary_op(a,
                    [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
                    [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor gelu(const Tensor& a) {
    return unary_op(a,
                    [](double x) { return 0.5 * x * (1.0 + std::erf(x * kSqrt1_2)); },
                    [](double x, double) {
                        double cdf = 0.5 * (1.0 + std::erf(x * kSqrt1_2));
                        double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                        return cdf + x * pdf;
                    });
}

// ---- rms_norm --------------------------------------------------------------

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
    check_dim(gain.rank() == 1, "rms_norm: gain must be rank 1, got " + shape_str(gain.shape()));
    int64_t dn = x.shape().back();
    if (gain.size() != dn) {
        throw DimensionError("rms_norm: gain length " + std::to_string(gain.size()) +
                             " != normalized extent " + std::to_string(dn));
    }
    int64_t rows = x.size() / dn;
    std::vector<double> out(static_cast<size_t>(x.size()));
    const double* xd = x.data().data();
    const double* gd = gain.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = xd + r * dn;
        double ms = 0.0;
        for (int64_t i = 0; i < dn; ++i) ms += xr[i] * xr[i];
        double inv = 1.0 / std::sqrt(ms / static_cast<double>(dn) + eps);
        double* yr = out.data() + r * dn;
        for (int64_t i = 0; i < dn; ++i) yr[i] = xr[i] * inv * gd[i];
    }
    Tensor res = make_result(x.shape(), std::move(out));
    if (wants_grad(x) || wants_grad(gain)) {
        TensorImpl* self = res.get();
        TensorImpl* px = x.get();
        TensorImpl* pg = gain.get();
        bool gx = wants_grad(x), gg = wants_grad(gain);
        attach(res, {x, gain}, [self, px, pg, gx, gg, rows, dn, eps]() {
            if (gx) px->ensure_grad();
            if (gg) pg->ensure_grad();
            const double* g = self->grad.data();
            const double* xd = px->data.data();
            const double* gd = pg->data.data();
            for (int64_t r = 0; r < rows; ++r) {
                const double* xr = xd + r * dn;
                const double* gr = g + r * dn;
                double ms = 0.0;
                for (int64_t i = 0; i < dn; ++i) ms += xr[i] * xr[i];
                double inv = 1.0 / std::sqrt(ms / static_cast<double>(dn) + eps);
                double inv3 = inv * inv * inv;
                double s = 0.0;
                for (int64_t i = 0; i < dn; ++i) s += gr[i] * gd[i] * xr[i];
                if (gx) {
                    double* dxr = px->grad.data() + r * dn;
                    double c = inv3 * s / static_cast<double>(dn);
                    for (int64_t i = 0; i < dn; ++i)
                        dxr[i] += inv * gd[i] * gr[i] - c * xr[i];
                }
                if (gg) {
                    for (int64_t i = 0; i < dn; ++i)
                        pg->grad[static_cast<size_t>(i)] += gr[i] * xr[i] * inv;
                }
            }
        });
    }
    return res;
}

// ---- reductions / shape ----------------------------------------------------

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor res = make_result({1}, {s});
    if (wants_grad(a)) {
        TensorImpl* self = res.get();
        TensorImpl* pa = a.get();
        attach(res, {a}, [self, pa]() {
            pa->ensure_grad();
            double g = self->grad[0];
            for (auto& v : pa->grad) v += g;
        });
    }
    return res;
}

Tensor sum_axis(const Tensor& a, int axis, bool keepdim) {
    int r = static_cast<int>(a.rank());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r)
        throw DimensionError("sum_axis: axis out of range for " + shape_str(a.shape()));
    int64_t pre = 1, post = 1;
    int64_t mid = a.shape()[static_cast<size_t>(axis)];
    for (int i = 0; i < axis; ++i) pre *= a.shape()[static_cast<size_t>(i)];
    for (int i = axis + 1; i < r; ++i) post *= a.shape()[static_cast<size_t>(i)];

    Shape os;
    for (int i = 0; i < r; ++i) {
        if (i == axis) {
            if (keepdim) os.push_back(1);
        } else {
            os.push_back(a.shape()[static_cast<size_t>(i)]);
        }
    }
    if (os.empty()) os.push_back(1);

    std::vector<double> out(static_cast<size_t>(pre * post), 0.0);
    const double* ad = a.data().data();
    for (int64_t p = 0; p < pre; ++p)
        for (int64_t m = 0; m < mid; ++m) {
            const double* src = ad + (p * mid + m) * post;
            double* dst = out.data() + p * post;
            for (int64_t q = 0; q < post; ++q) dst[q] += src[q];
        }

    Tensor res = make_result(std::move(os), std::move(out));
    if (wants_grad(a)) {
        TensorImpl* self = res.get();
        TensorImpl* pa = a.get();
        attach(res, {a}, [self, pa, pre, mid, post]() {
            pa->ensure_grad();
            const double* g = self->grad.data();
            for (int64_t p = 0; p < pre; ++p)
                for (int64_t m = 0; m < mid; ++m) {
                    double* dst = pa->grad.data() + (p * mid + m) * post;
                    const double* src = g + p * post;
                    for (int64_t q = 0; q < post; ++q) dst[q] += src[q];
                }
        });
    }
    return res;
}

Tensor mean_axis(const Tensor& a, int axis, bool keepdim) {
    int r = static_cast<int>(a.rank());
    int ax = axis < 0 ? axis + r : axis;
    if (ax < 0 || ax >= r)
        throw DimensionError("mean_axis: axis out of range for " + shape_str(a.shape()));
    int64_t mid = a.shape()[static_cast<size_t>(ax)];
    return scale(sum_axis(a, axis, keepdim), 1.0 / static_cast<double>(mid));
}

Tensor reshape(const Tensor& a, Shape new_shape) {
    if (shape_size(new_shape) != a.size()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                             shape_str(new_shape));
    }
    Tensor res = make_result(std::move(new_shape), a.data());
    if (wants_grad(a)) {
        TensorImpl* self = res.get();
        TensorImpl* pa = a.get();
        attach(res, {a}, [self, pa]() {
            pa->ensure_grad();
            int64_t n = self->size();
            for (int64_t i = 0; i < n; ++i)
                pa->grad[static_cast<size_t>(i)] += self->grad[static_cast<size_t>(i)];
        });
    }
    return res;
}

// ---- gather / scatter --------------------------------------------------------

namespace {
void check_indices(const std::vector<int64_t>& idx, int64_t limit, const char* op) {
    for (int64_t v : idx) {
        if (v < 0 || v >= limit) {
            throw IndexError(std::string(op) + ": index " + std::to_string(v) +
                             " out of range [0," + std::to_string(limit) + ")");
        }
    }
}
} // namespace

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& idx) {
    check_dim(x.rank() == 2, "gather_rows: expected rank-2 input, got " + shape_str(x.shape()));
    int64_t L = x.shape()[0], D = x.shape()[1];
    check_indices(idx, L, "gather_rows");
    int64_t k = static_cast<int64_t>(idx.size());
    std::vector<double> out(static_cast<size_t>(k * D));
    const double* xd = x.data().data();
    for (int64_t t = 0; t < k; ++t)
        std::memcpy(out.data() + t * D, xd + idx[static_cast<size_t>(t)] * D,
                    static_cast<size_t>(D) * sizeof(double));
    Tensor res = make_result({k, D}, std::move(out));
    if (wants_grad(x)) {
        TensorImpl* self = res.get();
        TensorImpl* px = x.get();
        attach(res, {x}, [self, px, idx, D]() {
            px->ensure_grad();
            int64_t k = static_cast<int64_t>(idx.size());
            for (int64_t t = 0; t < k; ++t) {
                const double* g = self->grad.data() + t * D;
                double* dst = px->grad.data() + idx[static_cast<size_t>(t)] * D;
                for (int64_t j = 0; j < D; ++j) dst[j] += g[j];
            }
        });
    }
    return res;
}

Tensor scatter_add_rows(const Tensor& target, const std::vector<int64_t>& idx, const Tensor& rows) {
    check_dim(target.rank() == 2 && rows.rank() == 2,
              "scatter_add_rows: expected rank-2 tensors");
    int64_t L = target.shape()[0], D = target.shape()[1];
    check_dim(rows.shape()[1] == D,
              "scatter_add_rows: row width " + std::to_string(rows.shape()[1]) +
                  " != target width " + std::to_string(D));
    check_dim(rows.shape()[0] == static_cast<int64_t>(idx.size()),
              "scatter_add_rows: got " + std::to_string(idx.size()) + " indices for " +
                  std::to_string(rows.shape()[0]) + " rows");
    check_indices(idx, L, "scatter_add_rows");

    std::vector<double> out = target.data();
    const double* rd = rows.data().data();
    for (size_t t = 0; t < idx.size(); ++t) {
        double* dst = out.data() + idx[t] * D;
        const double* src = rd + static_cast<int64_t>(t) * D;
        for (int64_t j = 0; j < D; ++j) dst[j] += src[j];
    }
    Tensor res = make_result(target.shape(), std::move(out));
    if (wants_grad(target) || wants_grad(rows)) {
        TensorImpl* self = res.get();
        TensorImpl* pt = target.get();
        TensorImpl* pr = rows.get();
        bool gt = wants_grad(target), gr = wants_grad(rows);
        attach(res, {target, rows}, [self, pt, pr, gt, gr, idx, D]() {
            if (gt) {
                pt->ensure_grad();
                int64_t n = self->size();
                for (int64_t i = 0; i < n; ++i)
                    pt->grad[static_cast<size_t>(i)] += self->grad[static_cast<size_t>(i)];
            }
            if (gr) {
                pr->ensure_grad();
                for (size_t t = 0; t < idx.size(); ++t) {
                    const double* g = self->grad.data() + idx[t] * D;
                    double* dst = pr->grad.data() + static_cast<int64_t>(t) * D;
                    for (int64_t j = 0; j < D; ++j) dst[j] += g[j];
                }
            }
        });
    }
    return res;
}

Tensor gather_cols(const Tensor& x, const std::vector<int64_t>& idx) {
    check_dim(x.rank() == 2, "gather_cols: expected rank-2 input, got " + shape_str(x.shape()));
    int64_t L = x.shape()[0], C = x.shape()[1];
    check_indices(idx, C, "gather_cols");
    int64_t k = static_cast<int64_t>(idx.size());
    std::vector<double> out(static_cast<size_t>(L * k));
    const double* xd = x.data().data();
    for (int64_t r = 0; r < L; ++r)
        for (int64_t t = 0; t < k; ++t)
            out[static_cast<size_t>(r * k + t)] = xd[r * C + idx[static_cast<size_t>(t)]];
    Tensor res = make_result({L, k}, std::move(out));
    if (wants_grad(x)) {
        TensorImpl* self = res.get();
        TensorImpl* px = x.get();
        attach(res, {x}, [self, px, idx, L, C]() {
            px->ensure_grad();
            int64_t k = static_cast<int64_t>(idx.size());
            for (int64_t r = 0; r < L; ++r)
                for (int64_t t = 0; t < k; ++t)
                    px->grad[static_cast<size_t>(r * C + idx[static_cast<size_t>(t)])] +=
                        self->grad[static_cast<size_t>(r * k + t)];
        });
    }
    return res;
}

Tensor stack_streams(const std::vector<Tensor>& streams) {
    if (streams.empty()) throw ContractError("stack_streams: empty input");
    int64_t L = streams[0].shape()[0], D = streams[0].shape()[1];
    int64_t n = static_cast<int64_t>(streams.size());
    for (const auto& s : streams) {
        check_dim(s.rank() == 2 && s.shape()[0] == L && s.shape()[1] == D,
                  "stack_streams: mismatched stream shape " + shape_str(s.shape()));
    }
    std::vector<double> out(static_cast<size_t>(L * n * D));
    for (int64_t si = 0; si < n; ++si) {
        const double* sd = streams[static_cast<size_t>(si)].data().data();
        for (int64_t l = 0; l < L; ++l)
            std::memcpy(out.data() + (l * n + si) * D, sd + l * D,
                        static_cast<size_t>(D) * sizeof(double));
    }
    Tensor res = make_result({L, n, D}, std::move(out));
    bool any = false;
    for (const auto& s : streams) any = any || wants_grad(s);
    if (any) {
        TensorImpl* self = res.get();
        std::vector<TensorImpl*> ps;
        for (const auto& s : streams) ps.push_back(s.get());
        attach(res, streams, [self, ps, L, n, D]() {
            for (int64_t si = 0; si < n; ++si) {
                TensorImpl* p = ps[static_cast<size_t>(si)];
                if (!p->requires_grad) continue;
                p->ensure_grad();
                for (int64_t l = 0; l < L; ++l) {
                    const double* g = self->grad.data() + (l * n + si) * D;
                    double* dst = p->grad.data() + l * D;
                    for (int64_t j = 0; j < D; ++j) dst[j] += g[j];
                }
            }
        });
    }
    return res;
}

Tensor gather_rows_batched(const Tensor& x, const std::vector<std::vector<int64_t>>& idx) {
    check_dim(x.rank() == 2, "gather_rows_batched: expected rank-2 input");
    int64_t L = x.shape()[0], D = x.shape()[1];
    int64_t nc = static_cast<int64_t>(idx.size());
    if (nc == 0) throw ContractError("gather_rows_batched: no index lists");
    int64_t k = static_cast<int64_t>(idx[0].size());
    for (const auto& v : idx) {
        check_dim(static_cast<int64_t>(v.size()) == k,
                  "gather_rows_batched: ragged index lists");
        check_indices(v, L, "gather_rows_batched");
    }
    std::vector<double> out(static_cast<size_t>(nc * k * D));
    const double* xd = x.data().data();
    for (int64_t c = 0; c < nc; ++c)
        for (int64_t t = 0; t < k; ++t)
            std::memcpy(out.data() + (c * k + t) * D,
                        xd + idx[static_cast<size_t>(c)][static_cast<size_t>(t)] * D,
                        static_cast<size_t>(D) * sizeof(double));
    Tensor res = make_result({nc, k, D}, std::move(out));
    if (wants_grad(x)) {
        TensorImpl* self = res.get();
        TensorImpl* px = x.get();
        attach(res, {x}, [self, px, idx, D]() {
            px->ensure_grad();
            int64_t nc = static_cast<int64_t>(idx.size());
            int64_t k = static_cast<int64_t>(idx[0].size());
            for (int64_t c = 0; c < nc; ++c)
                for (int64_t t = 0; t < k; ++t) {
                    const double* g = self->grad.data() + (c * k + t) * D;
                    double* dst =
                        px->grad.data() + idx[static_cast<size_t>(c)][static_cast<size_t>(t)] * D;
                    for (int64_t j = 0; j < D; ++j) dst[j] += g[j];
                }
        });
    }
    return res;
}

Tensor scatter_add_rows_batched(int64_t rows_out, const std::vector<std::vector<int64_t>>& idx,
                                const Tensor& rows) {
    check_dim(rows.rank() == 3, "scatter_add_rows_batched: expected rank-3 rows");
    int64_t nc = rows.shape()[0], k = rows.shape()[1], D = rows.shape()[2];
    check_dim(static_cast<int64_t>(idx.size()) == nc,
              "scatter_add_rows_batched: index list count mismatch");
    for (const auto& v : idx) {
        check_dim(static_cast<int64_t>(v.size()) == k,
                  "scatter_add_rows_batched: ragged index lists");
        check_indices(v, rows_out, "scatter_add_rows_batched");
    }
    std::vector<double> out(static_cast<size_t>(rows_out * D), 0.0);
    const double* rd = rows.data().data();
    for (int64_t c = 0; c < nc; ++c)
        for (int64_t t = 0; t < k; ++t) {
            double* dst = out.data() + idx[static_cast<size_t>(c)][static_cast<size_t>(t)] * D;
            const double* src = rd + (c * k + t) * D;
            for (int64_t j = 0; j < D; ++j) dst[j] += src[j];
        }
    Tensor res = make_result({rows_out, D}, std::move(out));
    if (wants_grad(rows)) {
        TensorImpl* self = res.get();
        TensorImpl* pr = rows.get();
        attach(res, {rows}, [self, pr, idx, k, D]() {
            pr->ensure_grad();
            int64_t nc = static_cast<int64_t>(idx.size());
            for (int64_t c = 0; c < nc; ++c)
                for (int64_t t = 0; t < k; ++t) {
                    const double* g =
                        self->grad.data() + idx[static_cast<size_t>(c)][static_cast<size_t>(t)] * D;
                    double* dst = pr->grad.data() + (c * k + t) * D;
                    for (int64_t j = 0; j < D; ++j) dst[j] += g[j];
                }
        });
    }
    return res;
}

// ---- selective-state recurrence ---------------------------------------------

Tensor ssm_recurrence(const Tensor& x, const Tensor& delta, const Tensor& b_in,
                      const Tensor& c_out, const Tensor& a_log) {
    check_dim(x.rank() == 3, "ssm_recurrence: x must be [B,T,D], got " + shape_str(x.shape()));
    int64_t B = x.shape()[0], T = x.shape()[1], D = x.shape()[2];
    if (T < 1) throw ContractError("ssm_recurrence: empty sequence (T = 0)");
    check_dim(delta.shape() == x.shape(), "ssm_recurrence: delta shape " +
                                              shape_str(delta.shape()) + " != x shape " +
                                              shape_str(x.shape()));
    check_dim(b_in.rank() == 3 && b_in.shape()[0] == B && b_in.shape()[1] == T,
              "ssm_recurrence: b_in shape " + shape_str(b_in.shape()));
    int64_t S = b_in.shape()[2];
    check_dim(c_out.shape() == b_in.shape(), "ssm_recurrence: c_out shape " +
                                                 shape_str(c_out.shape()));
    bool batched_a = a_log.rank() == 3;
    if (batched_a) {
        check_dim(a_log.shape()[0] == B && a_log.shape()[1] == D && a_log.shape()[2] == S,
                  "ssm_recurrence: a_log shape " + shape_str(a_log.shape()));
    } else {
        check_dim(a_log.rank() == 2 && a_log.shape()[0] == D && a_log.shape()[1] == S,
                  "ssm_recurrence: a_log shape " + shape_str(a_log.shape()));
    }

    auto hist = std::make_shared<std::vector<double>>(static_cast<size_t>(B * T * D * S));
    auto abar = std::make_shared<std::vector<double>>(static_cast<size_t>(B * T * D * S));
    std::vector<double> out(static_cast<size_t>(B * T * D), 0.0);

    const double* xd = x.data().data();
    const double* dd = delta.data().data();
    const double* bd = b_in.data().data();
    const double* cd = c_out.data().data();
    const double* ad = a_log.data().data();

    for (int64_t b = 0; b < B; ++b) {
        const double* al = ad + (batched_a ? b * D * S : 0);
        for (int64_t t = 0; t < T; ++t) {
            const double* bt = bd + (b * T + t) * S;
            const double* ct = cd + (b * T + t) * S;
            for (int64_t d = 0; d < D; ++d) {
                double dt = dd[(b * T + t) * D + d];
                double xv = xd[(b * T + t) * D + d];
                double* h = hist->data() + ((b * T + t) * D + d) * S;
                double* ab = abar->data() + ((b * T + t) * D + d) * S;
                const double* hprev =
                    t > 0 ? hist->data() + ((b * T + t - 1) * D + d) * S : nullptr;
                double y = 0.0;
                for (int64_t s = 0; s < S; ++s) {
                    double a = std::exp(-std::exp(al[d * S + s]) * dt);
                    ab[s] = a;
                    double hp = hprev ? hprev[s] : 0.0;
                    h[s] = a * hp + dt * bt[s] * xv;
                    y += ct[s] * h[s];
                }
                out[static_cast<size_t>((b * T + t) * D + d)] = y;
            }
        }
    }

    Tensor res = make_result({B, T, D}, std::move(out));
    bool any = wants_grad(x) || wants_grad(delta) || wants_grad(b_in) || wants_grad(c_out) ||
               wants_grad(a_log);
    if (any) {
        TensorImpl* self = res.get();
        TensorImpl* px = x.get();
        TensorImpl* pd = delta.get();
        TensorImpl* pb = b_in.get();
        TensorImpl* pc = c_out.get();
        TensorImpl* pa = a_log.get();
        bool gx = wants_grad(x), gd = wants_grad(delta), gb = wants_grad(b_in),
             gc = wants_grad(c_out), ga = wants_grad(a_log);
        attach(res, {x, delta, b_in, c_out, a_log},
               [self, px, pd, pb, pc, pa, gx, gd, gb, gc, ga, hist, abar, B, T, D, S, batched_a]() {
                   if (gx) px->ensure_grad();
                   if (gd) pd->ensure_grad();
                   if (gb) pb->ensure_grad();
                   if (gc) pc->ensure_grad();
                   if (ga) pa->ensure_grad();
                   const double* g = self->grad.data();
                   const double* xd = px->data.data();
                   const double* dd = pd->data.data();
                   const double* bd = pb->data.data();
                   const double* cd = pc->data.data();
                   const double* ad = pa->data.data();
                   std::vector<double> dh(static_cast<size_t>(D * S));
                   for (int64_t b = 0; b < B; ++b) {
                       const double* al = ad + (batched_a ? b * D * S : 0);
                       double* dal = ga ? pa->grad.data() + (batched_a ? b * D * S : 0) : nullptr;
                       std::fill(dh.begin(), dh.end(), 0.0);
                       for (int64_t t = T - 1; t >= 0; --t) {
                           const double* bt = bd + (b * T + t) * S;
                           const double* ct = cd + (b * T + t) * S;
                           double* dbt = gb ? pb->grad.data() + (b * T + t) * S : nullptr;
                           double* dct = gc ? pc->grad.data() + (b * T + t) * S : nullptr;
                           for (int64_t d = 0; d < D; ++d) {
                               double gy = g[(b * T + t) * D + d];
                               double dt = dd[(b * T + t) * D + d];
                               double xv = xd[(b * T + t) * D + d];
                               const double* h = hist->data() + ((b * T + t) * D + d) * S;
                               const double* ab = abar->data() + ((b * T + t) * D + d) * S;
                               const double* hprev =
                                   t > 0 ? hist->data() + ((b * T + t - 1) * D + d) * S : nullptr;
                               double* dhd = dh.data() + d * S;
                               double ddt = 0.0, dxv = 0.0;
                               for (int64_t s = 0; s < S; ++s) {
                                   if (gc) dct[s] += gy * h[s];
                                   double dhv = dhd[s] + gy * ct[s];
                                   double hp = hprev ? hprev[s] : 0.0;
                                   double ea = std::exp(al[d * S + s]);
                                   // h = ab*hp + dt*b*x;  ab = exp(-ea*dt)
                                   if (ga) dal[d * S + s] += dhv * hp * ab[s] * (-dt * ea);
                                   ddt += dhv * (bt[s] * xv + hp * ab[s] * (-ea));
                                   if (gb) dbt[s] += dhv * dt * xv;
                                   dxv += dhv * dt * bt[s];
                                   dhd[s] = dhv * ab[s];   // flows to t-1
                               }
                               if (gd) pd->grad[static_cast<size_t>((b * T + t) * D + d)] += ddt;
                               if (gx) px->grad[static_cast<size_t>((b * T + t) * D + d)] += dxv;
                           }
                       }
                   }
               });
    }
    return res;
}

// ---- loss -------------------------------------------------------------------

Tensor masked_cross_entropy(const Tensor& logits, const std::vector<int32_t>& labels,
                            const std::vector<uint8_t>& mask) {
    check_dim(logits.rank() == 2, "masked_cross_entropy: logits must be [L,K]");
    int64_t L = logits.shape()[0], K = logits.shape()[1];
    if (static_cast<int64_t>(labels.size()) != L || static_cast<int64_t>(mask.size()) != L) {
        throw DimensionError("masked_cross_entropy: labels/mask length != L");
    }
    int64_t count = 0;
    for (int64_t i = 0; i < L; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        ++count;
        int32_t lab = labels[static_cast<size_t>(i)];
        if (lab < 0 || lab >= K) {
            throw ContractError("masked_cross_entropy: masked pixel " + std::to_string(i) +
                                " has label " + std::to_string(lab) + " outside [0," +
                                std::to_string(K) + ")");
        }
    }
    if (count == 0) throw ContractError("masked_cross_entropy: mask selects no pixels");

    const double* zd = logits.data().data();
    double total = 0.0;
    for (int64_t i = 0; i < L; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        const double* z = zd + i * K;
        double m = z[0];
        for (int64_t j = 1; j < K; ++j) m = std::max(m, z[j]);
        double se = 0.0;
        for (int64_t j = 0; j < K; ++j) se += std::exp(z[j] - m);
        double lse = m + std::log(se);
        total += lse - z[labels[static_cast<size_t>(i)]];
    }
    Tensor res = make_result({1}, {total / static_cast<double>(count)});
    if (wants_grad(logits)) {
        TensorImpl* self = res.get();
        TensorImpl* pz = logits.get();
        attach(res, {logits}, [self, pz, labels, mask, L, K, count]() {
            pz->ensure_grad();
            double g = self->grad[0] / static_cast<double>(count);
            const double* zd = pz->data.data();
            for (int64_t i = 0; i < L; ++i) {
                if (!mask[static_cast<size_t>(i)]) continue;
                const double* z = zd + i * K;
                double m = z[0];
                for (int64_t j = 1; j < K; ++j) m = std::max(m, z[j]);
                double se = 0.0;
                for (int64_t j = 0; j < K; ++j) se += std::exp(z[j] - m);
                double* dz = pz->grad.data() + i * K;
                for (int64_t j = 0; j < K; ++j) dz[j] += g * std::exp(z[j] - m) / se;
                dz[labels[static_cast<size_t>(i)]] -= g;
            }
        });
    }
    return res;
}

// ---- backward ----------------------------------------------------------------

void backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    // reverse topological order via iterative postorder DFS
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    struct Frame {
        TensorImpl* node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    if (loss.get()->requires_grad) {
        stack.push_back({loss.get(), 0});
        visited.insert(loss.get());
    }
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            TensorImpl* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    loss.get()->ensure_grad();
    loss.get()->grad[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* n = *it;
        if (!n->backprop) continue;   // leaf: keep accumulated grad
        if (n->grad.empty()) continue;
        n->backprop();
        n->grad.clear();
        n->grad.shrink_to_fit();
    }
}

std::vector<int32_t> argmax_rows(const Tensor& logits) {
    check_dim(logits.rank() == 2, "argmax_rows: expected rank-2 input");
    int64_t L = logits.shape()[0], K = logits.shape()[1];
    std::vector<int32_t> out(static_cast<size_t>(L));
    const double* zd = logits.data().data();
    for (int64_t i = 0; i < L; ++i) {
        const double* z = zd + i * K;
        int64_t best = 0;
        for (int64_t j = 1; j < K; ++j)
            if (z[j] > z[best]) best = j;
        out[static_cast<size_t>(i)] = static_cast<int32_t>(best);
    }
    return out;
}

// ---- parameter registry --------------------------------------------------------

Tensor ParameterRegistry::create(const std::string& name, Shape shape) {
    return add(name, Tensor::zeros(std::move(shape), true));
}

Tensor ParameterRegistry::add(const std::string& name, Tensor t) {
    for (const auto& p : params_) {
        if (p.name == name) throw ContractError("parameter registered twice: " + name);
        if (p.tensor.get() == t.get())
            throw ContractError("tensor aliased under two parameter names: " + name);
    }
    t.set_requires_grad(true);
    params_.push_back({name, t});
    return t;
}

Parameter& ParameterRegistry::at(const std::string& name) {
    for (auto& p : params_)
        if (p.name == name) return p;
    throw ContractError("unknown parameter: " + name);
}

void ParameterRegistry::zero_grads() {
    for (auto& p : params_) p.tensor.zero_grad();
}

int64_t ParameterRegistry::total_elements() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
}

} // namespace mhc
