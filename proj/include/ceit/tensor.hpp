#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace ceit {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until first accumulation
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward_fn;  // reads this->grad, accumulates into parents

    void ensure_grad();
};

}  // namespace detail

/// Dense row-major double tensor. Copying a Tensor copies the handle, not
/// the storage; forward ops always allocate fresh output nodes.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad = false);
    /// Normal(0, stddev) with resampling outside +-2*stddev.
    static Tensor trunc_normal(Shape shape, std::mt19937_64& rng, double stddev,
                               bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int ndim() const;
    std::int64_t dim(int axis) const;
    std::int64_t numel() const;

    std::vector<double>& data();
    const std::vector<double>& data() const;
    double item() const;

    bool requires_grad() const;
    void set_requires_grad(bool value);

    bool has_grad() const;
    std::vector<double>& grad();  // allocates zeros on first access
    const std::vector<double>& grad() const;
    void zero_grad();

    /// Detached value copy (no graph edge, no grad tracking).
    Tensor clone_detached() const;

    std::shared_ptr<detail::Node> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::Node> node);

private:
    std::shared_ptr<detail::Node> node_;
};

/// Ordered record of the ops reachable from a loss node; replaying adjoints
/// in reverse topological order visits every recorded op exactly once.
class GradTape {
public:
    static GradTape record(const Tensor& loss);
    void replay();
    std::size_t size() const { return order_.size(); }

private:
    std::vector<std::shared_ptr<detail::Node>> order_;
};

/// Topo-sorts from `loss` (must be scalar) and runs all adjoints. Leaf grads
/// accumulate across calls until zeroed.
void backward(const Tensor& loss);

/// While alive, ops record no graph edges. Used by finite-difference oracles
/// and eval paths.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

/// Forward-pass multiply-accumulate tallies, split by origin so analytic
/// counts can be compared bucket by bucket.
struct MacCounters {
    static void reset();
    /// MACs from linear() and conv2d(), bias adds included.
    static std::uint64_t linear_conv();
    /// MACs from raw matmul() products (attention scores/aggregation).
    static std::uint64_t matmul();
};

// ---- elementwise / structural ops ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor narrow(const Tensor& x, int axis, std::int64_t start, std::int64_t length);
/// Reorders (or repeats) slices along `axis` by index.
Tensor index_select(const Tensor& x, int axis, const std::vector<std::int64_t>& indices);
/// Tiles x along a new leading axis: result shape [copies, ...x.shape].
Tensor expand_leading(const Tensor& x, std::int64_t copies);
Tensor concat(const Tensor& a, const Tensor& b, int axis);
Tensor sum_all(const Tensor& x);

// ---- numeric primitives ----

/// Batched matrix product: a [.., m, k] x b [.., k, n]; b may be rank-2 and
/// is then shared across a's batch dims. Counted in MacCounters::matmul.
Tensor matmul(const Tensor& a, const Tensor& b);

/// x [..., in] * w [in, out] + b. Counted in MacCounters::linear_conv
/// (one MAC per output element for the bias add).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor softmax(const Tensor& x, int axis);

/// Exact Gaussian-CDF form x * Phi(x).
Tensor gelu(const Tensor& x);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int axis, double eps);

/// Normalizes over every axis except `channel_axis`. In training mode uses
/// batch statistics and (optionally) updates running stats in place with the
/// given momentum; in eval mode uses the stored running stats. A training-mode
/// reduction set of size 1 is an error.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor running_mean,
                  Tensor running_var, int channel_axis, double momentum, double eps, bool training,
                  bool update_stats);

/// Cross-correlation. x [B, Cin, H, W], w [Cout, Cin/g, kh, kw]; bias optional.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::int64_t stride,
              std::int64_t padding, std::int64_t groups);

/// Per-window maximum; backward routes to the argmax, ties to the lowest
/// linear index.
Tensor max_pool2d(const Tensor& x, std::int64_t kernel, std::int64_t stride, std::int64_t padding);

/// Mean cross-entropy over rows of logits [B, K].
Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels);

}  // namespace ceit
