#include "ceit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace ceit {

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_macs_linear_conv = 0;
thread_local std::uint64_t g_macs_matmul = 0;

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check_axis(int axis, int ndim, const char* op) {
    if (axis < 0 || axis >= ndim) {
        fail(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
             std::to_string(ndim));
    }
}

std::vector<std::int64_t> strides_of(const Shape& shape) {
    std::vector<std::int64_t> strides(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    return strides;
}

double phi(double x) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)); }

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

void Node::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
}

}  // namespace detail

using detail::Node;

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::wrap(std::shared_ptr<Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    for (auto d : shape) {
        if (d <= 0) fail("Tensor: non-positive dimension in shape " + shape_str(shape));
    }
    auto node = std::make_shared<Node>();
    node->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return wrap(std::move(node));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
        fail("Tensor: shape " + shape_str(shape) + " does not match data length " +
             std::to_string(data.size()));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return wrap(std::move(node));
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

Tensor Tensor::trunc_normal(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.data()) {
        double s = dist(rng);
        while (std::abs(s) > 2.0 * stddev) s = dist(rng);
        v = s;
    }
    return t;
}

const Shape& Tensor::shape() const { return node_->shape; }
int Tensor::ndim() const { return static_cast<int>(node_->shape.size()); }
std::int64_t Tensor::dim(int axis) const { return node_->shape.at(static_cast<std::size_t>(axis)); }
std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(node_->data.size()); }

std::vector<double>& Tensor::data() { return node_->data; }
const std::vector<double>& Tensor::data() const { return node_->data; }

double Tensor::item() const {
    if (numel() != 1) fail("item(): tensor has " + std::to_string(numel()) + " elements");
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool value) { node_->requires_grad = value; }

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::vector<double>& Tensor::grad() {
    node_->ensure_grad();
    return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

Tensor Tensor::clone_detached() const {
    auto node = std::make_shared<Node>();
    node->shape = node_->shape;
    node->data = node_->data;
    node->requires_grad = false;
    return wrap(std::move(node));
}

// ---------------------------------------------------------------------------
// Autodiff driver
// ---------------------------------------------------------------------------

GradTape GradTape::record(const Tensor& loss) {
    GradTape tape;
    std::unordered_set<Node*> visited;
    // iterative post-order
    std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            auto parent = node->parents[next++];
            if (visited.insert(parent.get()).second) {
                stack.emplace_back(std::move(parent), 0);
            }
        } else {
            tape.order_.push_back(node);
            stack.pop_back();
        }
    }
    return tape;
}

void GradTape::replay() {
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        if ((*it)->backward_fn) {
            (*it)->ensure_grad();
            (*it)->backward_fn();
        }
    }
}

void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        fail("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    GradTape tape = GradTape::record(loss);
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    tape.replay();
}

NoGradGuard::NoGradGuard() { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = true; }

bool grad_enabled() { return g_grad_enabled; }

void MacCounters::reset() {
    g_macs_linear_conv = 0;
    g_macs_matmul = 0;
}
std::uint64_t MacCounters::linear_conv() { return g_macs_linear_conv; }
std::uint64_t MacCounters::matmul() { return g_macs_matmul; }

namespace {

Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    if (g_grad_enabled) {
        bool needs = false;
        for (const auto& t : inputs) needs = needs || t.requires_grad();
        if (needs) {
            node->requires_grad = true;
            for (const auto& t : inputs) node->parents.push_back(t.node());
            Node* raw = node.get();
            node->backward_fn = [raw, fn = std::move(backward_fn)]() { fn(*raw); };
        }
    }
    return Tensor::wrap(std::move(node));
}

void accumulate(const std::shared_ptr<Node>& node, const std::vector<double>& delta) {
    node->ensure_grad();
    for (std::size_t i = 0; i < delta.size(); ++i) node->grad[i] += delta[i];
}

bool wants_grad(const Node& out, std::size_t parent) {
    const auto& p = out.parents[parent];
    return p->requires_grad;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise / structural ops
// ---------------------------------------------------------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
             shape_str(b.shape()));
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& n) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (wants_grad(n, p)) accumulate(n.parents[p], n.grad);
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& n) {
        if (wants_grad(n, 0)) accumulate(n.parents[0], n.grad);
        if (wants_grad(n, 1)) {
            auto& p = n.parents[1];
            p->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] -= n.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        if (wants_grad(n, 0)) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * pb->data[i];
        }
        if (wants_grad(n, 1)) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i] * pa->data[i];
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
    return make_result(a.shape(), std::move(out), {a}, [s](Node& n) {
        auto& p = n.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i] * s;
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        fail("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out = x.data();
    return make_result(std::move(shape), std::move(out), {x},
                       [](Node& n) { accumulate(n.parents[0], n.grad); });
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
    const int nd = x.ndim();
    if (static_cast<int>(axes.size()) != nd) fail("permute: axes rank mismatch");
    std::vector<bool> seen(axes.size(), false);
    Shape out_shape(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) {
        check_axis(axes[i], nd, "permute");
        if (seen[axes[i]]) fail("permute: duplicate axis");
        seen[axes[i]] = true;
        out_shape[i] = x.dim(axes[i]);
    }
    const auto in_strides = strides_of(x.shape());
    const auto out_strides = strides_of(out_shape);
    const std::int64_t n = x.numel();
    // out linear index -> in linear index
    std::vector<double> out(static_cast<std::size_t>(n));
    std::vector<std::int64_t> map(static_cast<std::size_t>(n));
    for (std::int64_t oi = 0; oi < n; ++oi) {
        std::int64_t rem = oi, ii = 0;
        for (int d = 0; d < nd; ++d) {
            const std::int64_t c = rem / out_strides[d];
            rem %= out_strides[d];
            ii += c * in_strides[axes[d]];
        }
        map[oi] = ii;
        out[oi] = x.data()[ii];
    }
    return make_result(std::move(out_shape), std::move(out), {x},
                       [map = std::move(map)](Node& n) {
                           auto& p = n.parents[0];
                           p->ensure_grad();
                           for (std::size_t oi = 0; oi < map.size(); ++oi) {
                               p->grad[map[oi]] += n.grad[oi];
                           }
                       });
}

Tensor narrow(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
    check_axis(axis, x.ndim(), "narrow");
    if (start < 0 || length <= 0 || start + length > x.dim(axis)) {
        fail("narrow: range [" + std::to_string(start) + "," + std::to_string(start + length) +
             ") out of bounds for axis length " + std::to_string(x.dim(axis)));
    }
    Shape out_shape = x.shape();
    out_shape[axis] = length;
    const auto strides = strides_of(x.shape());
    const std::int64_t outer = shape_numel(Shape(x.shape().begin(), x.shape().begin() + axis));
    const std::int64_t inner = strides[axis];
    const std::int64_t in_axis = x.dim(axis);
    std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
    std::size_t oi = 0;
    for (std::int64_t o = 0; o < outer; ++o) {
        const double* src = x.data().data() + (o * in_axis + start) * inner;
        std::copy(src, src + length * inner, out.data() + oi);
        oi += static_cast<std::size_t>(length * inner);
    }
    return make_result(std::move(out_shape), std::move(out), {x},
                       [outer, inner, in_axis, start, length](Node& n) {
                           auto& p = n.parents[0];
                           p->ensure_grad();
                           std::size_t oi = 0;
                           for (std::int64_t o = 0; o < outer; ++o) {
                               double* dst = p->grad.data() + (o * in_axis + start) * inner;
                               for (std::int64_t i = 0; i < length * inner; ++i) {
                                   dst[i] += n.grad[oi++];
                               }
                           }
                       });
}

Tensor index_select(const Tensor& x, int axis, const std::vector<std::int64_t>& indices) {
    check_axis(axis, x.ndim(), "index_select");
    const std::int64_t axis_len = x.dim(axis);
    for (auto i : indices) {
        if (i < 0 || i >= axis_len) {
            fail("index_select: index " + std::to_string(i) + " out of range for axis length " +
                 std::to_string(axis_len));
        }
    }
    const auto strides = strides_of(x.shape());
    const std::int64_t inner = strides[axis];
    const std::int64_t outer = shape_numel(Shape(x.shape().begin(), x.shape().begin() + axis));
    const std::int64_t out_len = static_cast<std::int64_t>(indices.size());
    Shape out_shape = x.shape();
    out_shape[axis] = out_len;
    std::vector<double> out(static_cast<std::size_t>(outer * out_len * inner));
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t j = 0; j < out_len; ++j) {
            std::copy_n(x.data().data() + (o * axis_len + indices[j]) * inner, inner,
                        out.data() + (o * out_len + j) * inner);
        }
    }
    return make_result(std::move(out_shape), std::move(out), {x},
                       [outer, inner, axis_len, indices](Node& n) {
                           auto& p = n.parents[0];
                           p->ensure_grad();
                           const std::int64_t out_len = static_cast<std::int64_t>(indices.size());
                           for (std::int64_t o = 0; o < outer; ++o) {
                               for (std::int64_t j = 0; j < out_len; ++j) {
                                   const double* src = n.grad.data() + (o * out_len + j) * inner;
                                   double* dst = p->grad.data() + (o * axis_len + indices[j]) * inner;
                                   for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
                               }
                           }
                       });
}

Tensor expand_leading(const Tensor& x, std::int64_t copies) {
    if (copies <= 0) fail("expand_leading: copies must be positive");
    Shape out_shape;
    out_shape.push_back(copies);
    out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
    const std::int64_t n = x.numel();
    std::vector<double> out(static_cast<std::size_t>(copies * n));
    for (std::int64_t c = 0; c < copies; ++c) {
        std::copy_n(x.data().data(), n, out.data() + c * n);
    }
    return make_result(std::move(out_shape), std::move(out), {x}, [copies, n](Node& node) {
        auto& p = node.parents[0];
        p->ensure_grad();
        for (std::int64_t c = 0; c < copies; ++c) {
            const double* src = node.grad.data() + c * n;
            for (std::int64_t i = 0; i < n; ++i) p->grad[i] += src[i];
        }
    });
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
    check_axis(axis, a.ndim(), "concat");
    if (a.ndim() != b.ndim()) fail("concat: rank mismatch");
    for (int d = 0; d < a.ndim(); ++d) {
        if (d != axis && a.dim(d) != b.dim(d)) {
            fail("concat: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        }
    }
    Shape out_shape = a.shape();
    out_shape[axis] += b.dim(axis);
    const auto strides = strides_of(a.shape());
    const std::int64_t inner = strides[axis];
    const std::int64_t outer = shape_numel(Shape(a.shape().begin(), a.shape().begin() + axis));
    const std::int64_t la = a.dim(axis) * inner;
    const std::int64_t lb = b.dim(axis) * inner;
    std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
    for (std::int64_t o = 0; o < outer; ++o) {
        std::copy_n(a.data().data() + o * la, la, out.data() + o * (la + lb));
        std::copy_n(b.data().data() + o * lb, lb, out.data() + o * (la + lb) + la);
    }
    return make_result(std::move(out_shape), std::move(out), {a, b},
                       [outer, la, lb](Node& n) {
                           auto& pa = n.parents[0];
                           auto& pb = n.parents[1];
                           if (wants_grad(n, 0)) {
                               pa->ensure_grad();
                               for (std::int64_t o = 0; o < outer; ++o) {
                                   const double* src = n.grad.data() + o * (la + lb);
                                   for (std::int64_t i = 0; i < la; ++i) {
                                       pa->grad[o * la + i] += src[i];
                                   }
                               }
                           }
                           if (wants_grad(n, 1)) {
                               pb->ensure_grad();
                               for (std::int64_t o = 0; o < outer; ++o) {
                                   const double* src = n.grad.data() + o * (la + lb) + la;
                                   for (std::int64_t i = 0; i < lb; ++i) {
                                       pb->grad[o * lb + i] += src[i];
                                   }
                               }
                           }
                       });
}

Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return make_result({1}, {s}, {x}, [](Node& n) {
        auto& p = n.parents[0];
        p->ensure_grad();
        for (auto& g : p->grad) g += n.grad[0];
    });
}

// ---------------------------------------------------------------------------
// matmul / linear
// ---------------------------------------------------------------------------

namespace {

// c [m,n] += a [m,k] * b [k,n], with optional transposes realized by strides
void gemm_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
              std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = b + kk * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c [m,k] += a [m,n] * b^T where b is [k,n]
void gemm_bt_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t n,
                 std::int64_t k) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        double* crow = c + i * k;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const double* brow = b + kk * n;
            double acc = 0.0;
            for (std::int64_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
            crow[kk] += acc;
        }
    }
}

// c [k,n] += a^T * b where a is [m,k], b is [m,n]
void gemm_at_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                 std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            double* crow = c + kk * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() < 2 || b.ndim() < 2) fail("matmul: inputs must have rank >= 2");
    const std::int64_t m = a.dim(a.ndim() - 2);
    const std::int64_t k = a.dim(a.ndim() - 1);
    const std::int64_t kb = b.dim(b.ndim() - 2);
    const std::int64_t n = b.dim(b.ndim() - 1);
    if (k != kb) {
        fail("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
             shape_str(b.shape()));
    }
    const bool shared_b = (b.ndim() == 2);
    Shape batch_shape(a.shape().begin(), a.shape().end() - 2);
    if (!shared_b) {
        Shape bb(b.shape().begin(), b.shape().end() - 2);
        if (bb != batch_shape) {
            fail("matmul: batch dimensions disagree, " + shape_str(a.shape()) + " vs " +
                 shape_str(b.shape()));
        }
    }
    const std::int64_t batch = shape_numel(batch_shape);
    Shape out_shape = batch_shape;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<double> out(static_cast<std::size_t>(batch * m * n), 0.0);
    for (std::int64_t bi = 0; bi < batch; ++bi) {
        const double* ap = a.data().data() + bi * m * k;
        const double* bp = b.data().data() + (shared_b ? 0 : bi * k * n);
        gemm_acc(ap, bp, out.data() + bi * m * n, m, k, n);
    }
    g_macs_matmul += static_cast<std::uint64_t>(batch * m * n * k);
    return make_result(std::move(out_shape), std::move(out), {a, b},
                       [batch, m, k, n, shared_b](Node& node) {
                           auto& pa = node.parents[0];
                           auto& pb = node.parents[1];
                           if (wants_grad(node, 0)) {
                               pa->ensure_grad();
                               for (std::int64_t bi = 0; bi < batch; ++bi) {
                                   gemm_bt_acc(node.grad.data() + bi * m * n,
                                               pb->data.data() + (shared_b ? 0 : bi * k * n),
                                               pa->grad.data() + bi * m * k, m, n, k);
                               }
                           }
                           if (wants_grad(node, 1)) {
                               pb->ensure_grad();
                               for (std::int64_t bi = 0; bi < batch; ++bi) {
                                   gemm_at_acc(pa->data.data() + bi * m * k,
                                               node.grad.data() + bi * m * n,
                                               pb->grad.data() + (shared_b ? 0 : bi * k * n), m, k,
                                               n);
                               }
                           }
                       });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (w.ndim() != 2) fail("linear: weight must be rank 2, got " + shape_str(w.shape()));
    const std::int64_t in = w.dim(0);
    const std::int64_t out_f = w.dim(1);
    if (x.dim(x.ndim() - 1) != in) {
        fail("linear: input features " + shape_str(x.shape()) + " do not match weight " +
             shape_str(w.shape()));
    }
    const bool has_bias = b.defined();
    if (has_bias && (b.ndim() != 1 || b.dim(0) != out_f)) {
        fail("linear: bias shape " + shape_str(b.shape()) + " does not match out features " +
             std::to_string(out_f));
    }
    const std::int64_t rows = x.numel() / in;
    Shape out_shape = x.shape();
    out_shape.back() = out_f;
    std::vector<double> out(static_cast<std::size_t>(rows * out_f), 0.0);
    if (has_bias) {
        for (std::int64_t r = 0; r < rows; ++r) {
            std::copy_n(b.data().data(), out_f, out.data() + r * out_f);
        }
    }
    gemm_acc(x.data().data(), w.data().data(), out.data(), rows, in, out_f);
    g_macs_linear_conv += static_cast<std::uint64_t>(rows * out_f) *
                          static_cast<std::uint64_t>(in + (has_bias ? 1 : 0));
    std::vector<Tensor> inputs = {x, w};
    if (has_bias) inputs.push_back(b);
    return make_result(std::move(out_shape), std::move(out), std::move(inputs),
                       [rows, in, out_f, has_bias](Node& node) {
                           auto& px = node.parents[0];
                           auto& pw = node.parents[1];
                           if (wants_grad(node, 0)) {
                               px->ensure_grad();
                               gemm_bt_acc(node.grad.data(), pw->data.data(), px->grad.data(),
                                           rows, out_f, in);
                           }
                           if (wants_grad(node, 1)) {
                               pw->ensure_grad();
                               gemm_at_acc(px->data.data(), node.grad.data(), pw->grad.data(),
                                           rows, in, out_f);
                           }
                           if (has_bias && wants_grad(node, 2)) {
                               auto& pb = node.parents[2];
                               pb->ensure_grad();
                               for (std::int64_t r = 0; r < rows; ++r) {
                                   const double* g = node.grad.data() + r * out_f;
                                   for (std::int64_t j = 0; j < out_f; ++j) pb->grad[j] += g[j];
                               }
                           }
                       });
}

// ---------------------------------------------------------------------------
// softmax / gelu
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
    check_axis(axis, x.ndim(), "softmax");
    const auto strides = strides_of(x.shape());
    const std::int64_t len = x.dim(axis);
    const std::int64_t inner = strides[axis];
    const std::int64_t outer = x.numel() / (len * inner);
    std::vector<double> out(x.data().size());
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
            const std::int64_t base = o * len * inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t j = 0; j < len; ++j) mx = std::max(mx, x.data()[base + j * inner]);
            double denom = 0.0;
            for (std::int64_t j = 0; j < len; ++j) {
                const double e = std::exp(x.data()[base + j * inner] - mx);
                out[base + j * inner] = e;
                denom += e;
            }
            for (std::int64_t j = 0; j < len; ++j) out[base + j * inner] /= denom;
        }
    }
    return make_result(x.shape(), std::move(out), {x}, [len, inner, outer](Node& node) {
        auto& p = node.parents[0];
        p->ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t i = 0; i < inner; ++i) {
                const std::int64_t base = o * len * inner + i;
                double dot = 0.0;
                for (std::int64_t j = 0; j < len; ++j) {
                    dot += node.grad[base + j * inner] * node.data[base + j * inner];
                }
                for (std::int64_t j = 0; j < len; ++j) {
                    const std::int64_t idx = base + j * inner;
                    p->grad[idx] += node.data[idx] * (node.grad[idx] - dot);
                }
            }
        }
    });
}

Tensor gelu(const Tensor& x) {
    std::vector<double> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = x.data()[i] * phi(x.data()[i]);
    }
    return make_result(x.shape(), std::move(out), {x}, [](Node& node) {
        auto& p = node.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < node.grad.size(); ++i) {
            const double v = p->data[i];
            const double d = phi(v) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
            p->grad[i] += node.grad[i] * d;
        }
    });
}

// ---------------------------------------------------------------------------
// layer_norm
// ---------------------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int axis, double eps) {
    check_axis(axis, x.ndim(), "layer_norm");
    if (eps <= 0.0) fail("layer_norm: eps must be positive");
    const std::int64_t len = x.dim(axis);
    if (gamma.numel() != len || beta.numel() != len) {
        fail("layer_norm: gamma/beta length must match axis length " + std::to_string(len));
    }
    const auto strides = strides_of(x.shape());
    const std::int64_t inner = strides[axis];
    const std::int64_t outer = x.numel() / (len * inner);
    std::vector<double> out(x.data().size());
    std::vector<double> xhat(x.data().size());
    std::vector<double> invstd(static_cast<std::size_t>(outer * inner));
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
            const std::int64_t base = o * len * inner + i;
            double mean = 0.0;
            for (std::int64_t j = 0; j < len; ++j) mean += x.data()[base + j * inner];
            mean /= static_cast<double>(len);
            double var = 0.0;
            for (std::int64_t j = 0; j < len; ++j) {
                const double d = x.data()[base + j * inner] - mean;
                var += d * d;
            }
            var /= static_cast<double>(len);
            const double is = 1.0 / std::sqrt(var + eps);
            invstd[o * inner + i] = is;
            for (std::int64_t j = 0; j < len; ++j) {
                const std::int64_t idx = base + j * inner;
                const double h = (x.data()[idx] - mean) * is;
                xhat[idx] = h;
                out[idx] = h * gamma.data()[j] + beta.data()[j];
            }
        }
    }
    return make_result(x.shape(), std::move(out), {x, gamma, beta},
                       [len, inner, outer, xhat = std::move(xhat),
                        invstd = std::move(invstd)](Node& node) {
                           auto& px = node.parents[0];
                           auto& pg = node.parents[1];
                           auto& pb = node.parents[2];
                           const auto& gamma = pg->data;
                           if (wants_grad(node, 1)) pg->ensure_grad();
                           if (wants_grad(node, 2)) pb->ensure_grad();
                           if (wants_grad(node, 0)) px->ensure_grad();
                           for (std::int64_t o = 0; o < outer; ++o) {
                               for (std::int64_t i = 0; i < inner; ++i) {
                                   const std::int64_t base = o * len * inner + i;
                                   double mean_dy = 0.0, mean_dyh = 0.0;
                                   for (std::int64_t j = 0; j < len; ++j) {
                                       const std::int64_t idx = base + j * inner;
                                       const double dy = node.grad[idx] * gamma[j];
                                       mean_dy += dy;
                                       mean_dyh += dy * xhat[idx];
                                   }
                                   mean_dy /= static_cast<double>(len);
                                   mean_dyh /= static_cast<double>(len);
                                   const double is = invstd[o * inner + i];
                                   for (std::int64_t j = 0; j < len; ++j) {
                                       const std::int64_t idx = base + j * inner;
                                       if (wants_grad(node, 1)) {
                                           pg->grad[j] += node.grad[idx] * xhat[idx];
                                       }
                                       if (wants_grad(node, 2)) pb->grad[j] += node.grad[idx];
                                       if (wants_grad(node, 0)) {
                                           const double dy = node.grad[idx] * gamma[j];
                                           px->grad[idx] +=
                                               is * (dy - mean_dy - xhat[idx] * mean_dyh);
                                       }
                                   }
                               }
                           }
                       });
}

// ---------------------------------------------------------------------------
// batch_norm
// ---------------------------------------------------------------------------

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor running_mean,
                  Tensor running_var, int channel_axis, double momentum, double eps, bool training,
                  bool update_stats) {
    check_axis(channel_axis, x.ndim(), "batch_norm");
    const std::int64_t channels = x.dim(channel_axis);
    if (gamma.numel() != channels || beta.numel() != channels ||
        running_mean.numel() != channels || running_var.numel() != channels) {
        fail("batch_norm: parameter length must match channel count " + std::to_string(channels));
    }
    const auto strides = strides_of(x.shape());
    const std::int64_t inner = strides[channel_axis];
    const std::int64_t outer = x.numel() / (channels * inner);
    const std::int64_t reduce_n = outer * inner;
    if (training && reduce_n <= 1) {
        fail("batch_norm: training-mode reduction set has size " + std::to_string(reduce_n) +
             "; need at least 2 samples per channel");
    }
    std::vector<double> mean(static_cast<std::size_t>(channels), 0.0);
    std::vector<double> var(static_cast<std::size_t>(channels), 0.0);
    if (training) {
        for (std::int64_t c = 0; c < channels; ++c) {
            double m = 0.0;
            for (std::int64_t o = 0; o < outer; ++o) {
                const std::int64_t base = (o * channels + c) * inner;
                for (std::int64_t i = 0; i < inner; ++i) m += x.data()[base + i];
            }
            m /= static_cast<double>(reduce_n);
            double v = 0.0;
            for (std::int64_t o = 0; o < outer; ++o) {
                const std::int64_t base = (o * channels + c) * inner;
                for (std::int64_t i = 0; i < inner; ++i) {
                    const double d = x.data()[base + i] - m;
                    v += d * d;
                }
            }
            v /= static_cast<double>(reduce_n);
            mean[c] = m;
            var[c] = v;
        }
        if (update_stats) {
            const double unbias = static_cast<double>(reduce_n) / static_cast<double>(reduce_n - 1);
            for (std::int64_t c = 0; c < channels; ++c) {
                running_mean.data()[c] = (1.0 - momentum) * running_mean.data()[c] + momentum * mean[c];
                running_var.data()[c] =
                    (1.0 - momentum) * running_var.data()[c] + momentum * var[c] * unbias;
            }
        }
    } else {
        mean.assign(running_mean.data().begin(), running_mean.data().end());
        var.assign(running_var.data().begin(), running_var.data().end());
    }
    std::vector<double> invstd(static_cast<std::size_t>(channels));
    for (std::int64_t c = 0; c < channels; ++c) invstd[c] = 1.0 / std::sqrt(var[c] + eps);
    std::vector<double> out(x.data().size());
    std::vector<double> xhat(x.data().size());
    for (std::int64_t c = 0; c < channels; ++c) {
        for (std::int64_t o = 0; o < outer; ++o) {
            const std::int64_t base = (o * channels + c) * inner;
            for (std::int64_t i = 0; i < inner; ++i) {
                const double h = (x.data()[base + i] - mean[c]) * invstd[c];
                xhat[base + i] = h;
                out[base + i] = h * gamma.data()[c] + beta.data()[c];
            }
        }
    }
    return make_result(
        x.shape(), std::move(out), {x, gamma, beta},
        [channels, inner, outer, reduce_n, training, xhat = std::move(xhat),
         invstd = std::move(invstd)](Node& node) {
            auto& px = node.parents[0];
            auto& pg = node.parents[1];
            auto& pb = node.parents[2];
            if (wants_grad(node, 0)) px->ensure_grad();
            if (wants_grad(node, 1)) pg->ensure_grad();
            if (wants_grad(node, 2)) pb->ensure_grad();
            for (std::int64_t c = 0; c < channels; ++c) {
                double sum_dy = 0.0, sum_dyh = 0.0;
                for (std::int64_t o = 0; o < outer; ++o) {
                    const std::int64_t base = (o * channels + c) * inner;
                    for (std::int64_t i = 0; i < inner; ++i) {
                        sum_dy += node.grad[base + i];
                        sum_dyh += node.grad[base + i] * xhat[base + i];
                    }
                }
                if (wants_grad(node, 1)) pg->grad[c] += sum_dyh;
                if (wants_grad(node, 2)) pb->grad[c] += sum_dy;
                if (wants_grad(node, 0)) {
                    const double g = pg->data[c];
                    const double is = invstd[c];
                    if (training) {
                        const double nrec = 1.0 / static_cast<double>(reduce_n);
                        for (std::int64_t o = 0; o < outer; ++o) {
                            const std::int64_t base = (o * channels + c) * inner;
                            for (std::int64_t i = 0; i < inner; ++i) {
                                px->grad[base + i] +=
                                    g * is *
                                    (node.grad[base + i] - sum_dy * nrec -
                                     xhat[base + i] * sum_dyh * nrec);
                            }
                        }
                    } else {
                        for (std::int64_t o = 0; o < outer; ++o) {
                            const std::int64_t base = (o * channels + c) * inner;
                            for (std::int64_t i = 0; i < inner; ++i) {
                                px->grad[base + i] += g * is * node.grad[base + i];
                            }
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// conv2d / max_pool2d
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::int64_t stride,
              std::int64_t padding, std::int64_t groups) {
    if (x.ndim() != 4 || w.ndim() != 4) {
        fail("conv2d: expected 4-D input and weight, got " + shape_str(x.shape()) + " and " +
             shape_str(w.shape()));
    }
    const std::int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Cout = w.dim(0), Cw = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (groups <= 0 || Cin % groups != 0 || Cout % groups != 0) {
        fail("conv2d: groups " + std::to_string(groups) + " incompatible with channels " +
             std::to_string(Cin) + "/" + std::to_string(Cout));
    }
    if (Cw != Cin / groups) {
        fail("conv2d: weight " + shape_str(w.shape()) + " expects " + std::to_string(Cw * groups) +
             " input channels, got " + std::to_string(Cin));
    }
    const std::int64_t OH = (H + 2 * padding - kh) / stride + 1;
    const std::int64_t OW = (W + 2 * padding - kw) / stride + 1;
    if (kh > H + 2 * padding || kw > W + 2 * padding || OH <= 0 || OW <= 0) {
        fail("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
             " larger than padded input " + shape_str(x.shape()));
    }
    const bool has_bias = bias.defined();
    if (has_bias && bias.numel() != Cout) fail("conv2d: bias length must equal Cout");
    const std::int64_t cpg_in = Cin / groups;
    const std::int64_t cpg_out = Cout / groups;
    std::vector<double> out(static_cast<std::size_t>(B * Cout * OH * OW), 0.0);
    const double* xp = x.data().data();
    const double* wp = w.data().data();
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t oc = 0; oc < Cout; ++oc) {
            const std::int64_t g = oc / cpg_out;
            const double bv = has_bias ? bias.data()[oc] : 0.0;
            for (std::int64_t oh = 0; oh < OH; ++oh) {
                for (std::int64_t ow = 0; ow < OW; ++ow) {
                    double acc = bv;
                    for (std::int64_t ic = 0; ic < cpg_in; ++ic) {
                        const std::int64_t xc = g * cpg_in + ic;
                        const double* xbase = xp + ((b * Cin + xc) * H) * W;
                        const double* wbase = wp + ((oc * cpg_in + ic) * kh) * kw;
                        for (std::int64_t r = 0; r < kh; ++r) {
                            const std::int64_t ih = oh * stride - padding + r;
                            if (ih < 0 || ih >= H) continue;
                            for (std::int64_t s = 0; s < kw; ++s) {
                                const std::int64_t iw = ow * stride - padding + s;
                                if (iw < 0 || iw >= W) continue;
                                acc += xbase[ih * W + iw] * wbase[r * kw + s];
                            }
                        }
                    }
                    out[((b * Cout + oc) * OH + oh) * OW + ow] = acc;
                }
            }
        }
    }
    g_macs_linear_conv += static_cast<std::uint64_t>(B * Cout * OH * OW) *
                          static_cast<std::uint64_t>(cpg_in * kh * kw + (has_bias ? 1 : 0));
    std::vector<Tensor> inputs = {x, w};
    if (has_bias) inputs.push_back(bias);
    return make_result(
        {B, Cout, OH, OW}, std::move(out), std::move(inputs),
        [B, Cin, H, W, Cout, kh, kw, OH, OW, stride, padding, cpg_in, cpg_out,
         has_bias](Node& node) {
            auto& px = node.parents[0];
            auto& pw = node.parents[1];
            const bool gx = wants_grad(node, 0);
            const bool gw = wants_grad(node, 1);
            if (gx) px->ensure_grad();
            if (gw) pw->ensure_grad();
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t oc = 0; oc < Cout; ++oc) {
                    const std::int64_t g = oc / cpg_out;
                    for (std::int64_t oh = 0; oh < OH; ++oh) {
                        for (std::int64_t ow = 0; ow < OW; ++ow) {
                            const double gy = node.grad[((b * Cout + oc) * OH + oh) * OW + ow];
                            if (gy == 0.0) continue;
                            for (std::int64_t ic = 0; ic < cpg_in; ++ic) {
                                const std::int64_t xc = g * cpg_in + ic;
                                const std::int64_t xoff = ((b * Cin + xc) * H) * W;
                                const std::int64_t woff = ((oc * cpg_in + ic) * kh) * kw;
                                for (std::int64_t r = 0; r < kh; ++r) {
                                    const std::int64_t ih = oh * stride - padding + r;
                                    if (ih < 0 || ih >= H) continue;
                                    for (std::int64_t s = 0; s < kw; ++s) {
                                        const std::int64_t iw = ow * stride - padding + s;
                                        if (iw < 0 || iw >= W) continue;
                                        if (gx) {
                                            px->grad[xoff + ih * W + iw] +=
                                                gy * pw->data[woff + r * kw + s];
                                        }
                                        if (gw) {
                                            pw->grad[woff + r * kw + s] +=
                                                gy * px->data[xoff + ih * W + iw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if (has_bias && wants_grad(node, 2)) {
                auto& pb = node.parents[2];
                pb->ensure_grad();
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t oc = 0; oc < Cout; ++oc) {
                        double acc = 0.0;
                        const double* g = node.grad.data() + ((b * Cout + oc) * OH) * OW;
                        for (std::int64_t i = 0; i < OH * OW; ++i) acc += g[i];
                        pb->grad[oc] += acc;
                    }
                }
            }
        });
}

Tensor max_pool2d(const Tensor& x, std::int64_t kernel, std::int64_t stride,
                  std::int64_t padding) {
    if (x.ndim() != 4) fail("max_pool2d: expected 4-D input, got " + shape_str(x.shape()));
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t OH = (H + 2 * padding - kernel) / stride + 1;
    const std::int64_t OW = (W + 2 * padding - kernel) / stride + 1;
    if (kernel > H + 2 * padding || kernel > W + 2 * padding || OH <= 0 || OW <= 0) {
        fail("max_pool2d: window larger than padded input " + shape_str(x.shape()));
    }
    std::vector<double> out(static_cast<std::size_t>(B * C * OH * OW));
    std::vector<std::int64_t> argmax(out.size());
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t c = 0; c < C; ++c) {
            const double* xbase = x.data().data() + ((b * C + c) * H) * W;
            for (std::int64_t oh = 0; oh < OH; ++oh) {
                for (std::int64_t ow = 0; ow < OW; ++ow) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::int64_t best_idx = -1;
                    for (std::int64_t r = 0; r < kernel; ++r) {
                        const std::int64_t ih = oh * stride - padding + r;
                        if (ih < 0 || ih >= H) continue;
                        for (std::int64_t s = 0; s < kernel; ++s) {
                            const std::int64_t iw = ow * stride - padding + s;
                            if (iw < 0 || iw >= W) continue;
                            const double v = xbase[ih * W + iw];
                            if (v > best) {  // strict: ties keep the lowest linear index
                                best = v;
                                best_idx = ih * W + iw;
                            }
                        }
                    }
                    const std::int64_t oi = ((b * C + c) * OH + oh) * OW + ow;
                    out[oi] = best;
                    argmax[oi] = ((b * C + c) * H) * W + best_idx;
                }
            }
        }
    }
    return make_result({B, C, OH, OW}, std::move(out), {x},
                       [argmax = std::move(argmax)](Node& node) {
                           auto& p = node.parents[0];
                           p->ensure_grad();
                           for (std::size_t i = 0; i < node.grad.size(); ++i) {
                               p->grad[argmax[i]] += node.grad[i];
                           }
                       });
}

// ---------------------------------------------------------------------------
// cross_entropy
// ---------------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels) {
    if (logits.ndim() != 2) fail("cross_entropy: logits must be [B, K]");
    const std::int64_t B = logits.dim(0), K = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != B) {
        fail("cross_entropy: label count mismatch");
    }
    for (auto l : labels) {
        if (l < 0 || l >= K) fail("cross_entropy: label " + std::to_string(l) + " out of range");
    }
    double loss = 0.0;
    std::vector<double> probs(logits.data().size());
    for (std::int64_t b = 0; b < B; ++b) {
        const double* row = logits.data().data() + b * K;
        double mx = row[0];
        for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        double denom = 0.0;
        for (std::int64_t k = 0; k < K; ++k) {
            probs[b * K + k] = std::exp(row[k] - mx);
            denom += probs[b * K + k];
        }
        for (std::int64_t k = 0; k < K; ++k) probs[b * K + k] /= denom;
        loss += mx + std::log(denom) - row[labels[b]];
    }
    loss /= static_cast<double>(B);
    return make_result({1}, {loss}, {logits},
                       [B, K, labels, probs = std::move(probs)](Node& node) {
                           auto& p = node.parents[0];
                           p->ensure_grad();
                           const double g = node.grad[0] / static_cast<double>(B);
                           for (std::int64_t b = 0; b < B; ++b) {
                               for (std::int64_t k = 0; k < K; ++k) {
                                   const double onehot = (k == labels[b]) ? 1.0 : 0.0;
                                   p->grad[b * K + k] += g * (probs[b * K + k] - onehot);
                               }
                           }
                       });
}

}  // namespace ceit
