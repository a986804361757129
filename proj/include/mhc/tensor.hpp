#pragma once

// Dense double-precision tensors with reverse-mode gradients.
// The graph is built implicitly by the ops below; backward() walks it once
// in reverse topological order. Intermediate gradients are released as soon
// as they have been propagated, leaf gradients accumulate until zeroed.

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace mhc {

using Shape = std::vector<int64_t>;

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class DimensionError : public Error { public: using Error::Error; };
class IndexError     : public Error { public: using Error::Error; };
class NumericError   : public Error { public: using Error::Error; };
class ContractError  : public Error { public: using Error::Error; };
class ConfigError    : public Error { public: using Error::Error; };
class FormatError    : public Error { public: using Error::Error; };
class DataError      : public Error { public: using Error::Error; };

class DivergenceError : public Error {
public:
    DivergenceError(const std::string& msg, int64_t step, double max_abs_grad)
        : Error(msg), step(step), max_abs_grad(max_abs_grad) {}
    int64_t step;
    double max_abs_grad;
};

std::string shape_str(const Shape& s);
int64_t shape_size(const Shape& s);

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;   // empty until first contribution
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void()> backprop;   // reads this->grad, accumulates into parents

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    void ensure_grad() { if (grad.empty()) grad.assign(data.size(), 0.0); }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t rank() const { return static_cast<int64_t>(impl_->shape.size()); }
    int64_t size() const { return impl_->size(); }
    int64_t extent(int axis) const;

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }
    double at(int64_t i) const { return impl_->data[static_cast<size_t>(i)]; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) { impl_->requires_grad = v; return *this; }
    bool has_grad() const { return !impl_->grad.empty(); }
    std::vector<double>& grad() { impl_->ensure_grad(); return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }

    // scalar convenience
    double value() const;

    TensorImpl* get() const { return impl_.get(); }
    const std::shared_ptr<TensorImpl>& ptr() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// While alive, ops record no graph edges; forward values only.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
private:
    bool prev_;
};

bool grad_enabled();

// ---- ops ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor gelu(const Tensor& a);

// y = x / sqrt(mean(x^2, last axis) + eps) * gain
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6);

Tensor sum(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis, bool keepdim);
Tensor mean_axis(const Tensor& a, int axis, bool keepdim);
Tensor reshape(const Tensor& a, Shape new_shape);

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& idx);
Tensor scatter_add_rows(const Tensor& target, const std::vector<int64_t>& idx, const Tensor& rows);
Tensor gather_cols(const Tensor& x, const std::vector<int64_t>& idx);

// n tensors of shape [L,D] -> [L,n,D]
Tensor stack_streams(const std::vector<Tensor>& streams);

// [L,D] + nc index lists of length k -> [nc,k,D]; adjoint pair below
Tensor gather_rows_batched(const Tensor& x, const std::vector<std::vector<int64_t>>& idx);
// [nc,k,D] -> [rows_out,D]; contributions added in ascending (cluster, position) order
Tensor scatter_add_rows_batched(int64_t rows_out, const std::vector<std::vector<int64_t>>& idx,
                                const Tensor& rows);

// Core selective-state recurrence, strictly causal.
//   x, delta: [B,T,D]; b_in, c_out: [B,T,S]; a_log: [D,S] or [B,D,S]
//   h_t = exp(-exp(a_log)*delta_t) * h_{t-1} + delta_t * b_t * x_t,  y_t[d] = <c_t, h_t[d,:]>
Tensor ssm_recurrence(const Tensor& x, const Tensor& delta, const Tensor& b_in,
                      const Tensor& c_out, const Tensor& a_log);

// Mean negative log-softmax over masked rows. labels[i] in [0,K) where mask[i] != 0.
Tensor masked_cross_entropy(const Tensor& logits, const std::vector<int32_t>& labels,
                            const std::vector<uint8_t>& mask);

void backward(const Tensor& loss);

// forward-only helper
std::vector<int32_t> argmax_rows(const Tensor& logits);

// ---- parameters ----------------------------------------------------------

struct Parameter {
    std::string name;
    Tensor tensor;
};

// Owns the model's trainable tensors; names are unique, order is creation order.
class ParameterRegistry {
public:
    Tensor create(const std::string& name, Shape shape);
    Tensor add(const std::string& name, Tensor t);
    std::vector<Parameter>& items() { return params_; }
    const std::vector<Parameter>& items() const { return params_; }
    Parameter& at(const std::string& name);
    void zero_grads();
    int64_t total_elements() const;

private:
    std::vector<Parameter> params_;
};

} // namespace mhc
