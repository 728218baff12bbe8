#include "mambaloc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "mambaloc/rng.hpp"

namespace mambaloc {

namespace {

constexpr double kGeluCoef = 0.7978845608028653558798921198687;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double softplus_stable(double x) {
    // max(x,0) + log1p(exp(-|x|))
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

void check_finite_buffer(const std::vector<double>& v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw NonFiniteValue(std::string("non-finite value in ") + what);
        }
    }
}

}  // namespace

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// --- Tensor -----------------------------------------------------------------

Tensor Tensor::make(Shape shape, std::vector<double> data, bool requires_grad) {
    for (auto d : shape) {
        if (d <= 0) throw ShapeMismatch("tensor extents must be positive, got " + shape_str(shape));
    }
    if (numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw ShapeMismatch("data length " + std::to_string(data.size()) +
                            " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = std::move(shape);
    t.s_->data = std::move(data);
    t.s_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = numel(shape);
    return make(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    if (!std::isfinite(value)) throw NonFiniteValue("Tensor::full with non-finite value");
    auto n = numel(shape);
    return make(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    check_finite_buffer(data, "Tensor::from_data");
    return make(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

std::vector<double>& Tensor::grad() {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), 0.0);
    return s_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), 0.0);
    return s_->grad;
}

void Tensor::zero_grad() {
    if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
}

void Tensor::accumulate_grad(const double* g, std::int64_t n) {
    auto& gd = grad();
    for (std::int64_t i = 0; i < n; ++i) gd[static_cast<std::size_t>(i)] += g[i];
}

double Tensor::item() const {
    if (size() != 1) throw ShapeMismatch("item() on tensor of shape " + shape_str(shape()));
    return s_->data[0];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    const auto& sh = shape();
    if (idx.size() != sh.size()) throw ShapeMismatch("at(): rank mismatch");
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (auto i : idx) {
        flat = flat * sh[k] + i;
        ++k;
    }
    return s_->data[static_cast<std::size_t>(flat)];
}

Tensor Tensor::clone() const {
    return make(s_->shape, s_->data, false);
}

void Tensor::copy_values_from(const Tensor& src) {
    if (src.size() != size()) {
        throw ShapeMismatch("copy_values_from: size mismatch " + shape_str(src.shape()) + " vs " +
                            shape_str(shape()));
    }
    s_->data = src.s_->data;
}

// --- Graph helpers -----------------------------------------------------------

bool Graph::any_requires(const std::vector<Tensor>& ts) const {
    for (const auto& t : ts) {
        if (t.requires_grad()) return true;
    }
    return false;
}

void Graph::finish_node(std::string op, std::vector<Tensor> inputs, std::vector<Tensor> outputs,
                        std::function<void(const Node&)> backward) {
    // Nothing upstream needs gradients: leave the tape untouched.
    if (!recording_ || !any_requires(inputs)) return;
    for (auto& out : outputs) {
        out.set_requires_grad(true);
        out.set_node_id(next_node_id_++);
    }
    nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(outputs), std::move(backward)});
}

void Graph::record(std::string op, std::vector<Tensor> inputs, std::vector<Tensor> outputs,
                   std::function<void(const Node&)> backward) {
    finish_node(std::move(op), std::move(inputs), std::move(outputs), std::move(backward));
}

// --- matmul -------------------------------------------------------------------

namespace {

struct MatmulPlan {
    std::int64_t batch = 1;  // broadcast batch count
    std::int64_t M = 0, K = 0, P = 0;
    bool a_batched = false;  // whether a has its own batch axis striding
    bool b_batched = false;
    Shape out_shape;
};

MatmulPlan plan_matmul(const Shape& as, const Shape& bs) {
    if (as.size() < 2 || bs.size() < 2) {
        throw ShapeMismatch("matmul requires rank >= 2, got " + shape_str(as) + " and " + shape_str(bs));
    }
    MatmulPlan p;
    p.M = as[as.size() - 2];
    p.K = as[as.size() - 1];
    const std::int64_t K2 = bs[bs.size() - 2];
    p.P = bs[bs.size() - 1];
    if (p.K != K2) {
        throw ShapeMismatch("matmul inner dims differ: " + shape_str(as) + " vs " + shape_str(bs));
    }
    Shape abatch(as.begin(), as.end() - 2);
    Shape bbatch(bs.begin(), bs.end() - 2);
    // The smaller batch shape must be a suffix of the larger one (leading
    // broadcast only).
    const Shape& big = abatch.size() >= bbatch.size() ? abatch : bbatch;
    const Shape& small = abatch.size() >= bbatch.size() ? bbatch : abatch;
    if (!std::equal(small.rbegin(), small.rend(), big.rbegin())) {
        throw ShapeMismatch("matmul batch dims incompatible: " + shape_str(as) + " vs " + shape_str(bs));
    }
    if (!small.empty() && numel(small) != numel(big)) {
        // A strict suffix with equal dims means equal numel; anything else is
        // a plain per-batch pairing we do not support.
        throw ShapeMismatch("matmul batch dims incompatible: " + shape_str(as) + " vs " + shape_str(bs));
    }
    p.batch = numel(big);
    p.a_batched = numel(abatch) == p.batch && !abatch.empty();
    p.b_batched = numel(bbatch) == p.batch && !bbatch.empty();
    if (abatch.empty() && bbatch.empty()) {
        p.a_batched = p.b_batched = false;
        p.batch = 1;
    }
    p.out_shape = big;
    p.out_shape.push_back(p.M);
    p.out_shape.push_back(p.P);
    return p;
}

}  // namespace

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
    const MatmulPlan p = plan_matmul(a.shape(), b.shape());
    Tensor out = Tensor::zeros(p.out_shape);
    const double* ad = a.data();
    const double* bd = b.data();
    double* od = out.data();
    const std::int64_t M = p.M, K = p.K, P = p.P;

#pragma omp parallel for collapse(2) schedule(static) if (p.batch * M >= 8)
    for (std::int64_t n = 0; n < p.batch; ++n) {
        for (std::int64_t m = 0; m < M; ++m) {
            const double* arow = ad + (p.a_batched ? n * M * K : 0) + m * K;
            const double* bmat = bd + (p.b_batched ? n * K * P : 0);
            double* orow = od + n * M * P + m * P;
            for (std::int64_t k = 0; k < K; ++k) {
                const double av = arow[k];
                const double* brow = bmat + k * P;
                for (std::int64_t q = 0; q < P; ++q) orow[q] += av * brow[q];
            }
        }
    }

    finish_node("matmul", {a, b}, {out}, [p](const Node& node) {
        const Tensor& a = node.inputs[0];
        const Tensor& b = node.inputs[1];
        const Tensor& y = node.outputs[0];
        const double* dy = y.grad().data();
        const double* ad = a.data();
        const double* bd = b.data();
        const std::int64_t M = p.M, K = p.K, P = p.P;
        if (a.requires_grad()) {
            auto& da = const_cast<Tensor&>(a).grad();
            if (p.a_batched || p.batch == 1) {
                // dA[n,m,k] += sum_q dY[n,m,q] * B[n?,k,q]
#pragma omp parallel for collapse(2) schedule(static) if (p.batch * M >= 8)
                for (std::int64_t n = 0; n < p.batch; ++n) {
                    for (std::int64_t m = 0; m < M; ++m) {
                        const double* dyrow = dy + n * M * P + m * P;
                        const double* bmat = bd + (p.b_batched ? n * K * P : 0);
                        double* darow = da.data() + n * M * K + m * K;
                        for (std::int64_t k = 0; k < K; ++k) {
                            const double* brow = bmat + k * P;
                            double acc = 0.0;
                            for (std::int64_t q = 0; q < P; ++q) acc += dyrow[q] * brow[q];
                            darow[k] += acc;
                        }
                    }
                }
            } else {
                // a broadcast across batch: accumulate over n, parallel over m.
#pragma omp parallel for schedule(static) if (M >= 4)
                for (std::int64_t m = 0; m < M; ++m) {
                    double* darow = da.data() + m * K;
                    for (std::int64_t n = 0; n < p.batch; ++n) {
                        const double* dyrow = dy + n * M * P + m * P;
                        const double* bmat = bd + (p.b_batched ? n * K * P : 0);
                        for (std::int64_t k = 0; k < K; ++k) {
                            const double* brow = bmat + k * P;
                            double acc = 0.0;
                            for (std::int64_t q = 0; q < P; ++q) acc += dyrow[q] * brow[q];
                            darow[k] += acc;
                        }
                    }
                }
            }
        }
        if (b.requires_grad()) {
            auto& db = const_cast<Tensor&>(b).grad();
            if (p.b_batched || p.batch == 1) {
#pragma omp parallel for collapse(2) schedule(static) if (p.batch * K >= 8)
                for (std::int64_t n = 0; n < p.batch; ++n) {
                    for (std::int64_t k = 0; k < K; ++k) {
                        const double* amat = ad + (p.a_batched ? n * M * K : 0);
                        double* dbrow = db.data() + n * K * P + k * P;
                        const double* dymat = dy + n * M * P;
                        for (std::int64_t m = 0; m < M; ++m) {
                            const double av = amat[m * K + k];
                            const double* dyrow = dymat + m * P;
                            for (std::int64_t q = 0; q < P; ++q) dbrow[q] += av * dyrow[q];
                        }
                    }
                }
            } else {
                // b broadcast across batch: each thread owns a k-row of dB.
#pragma omp parallel for schedule(static) if (K >= 4)
                for (std::int64_t k = 0; k < K; ++k) {
                    double* dbrow = db.data() + k * P;
                    for (std::int64_t n = 0; n < p.batch; ++n) {
                        const double* amat = ad + (p.a_batched ? n * M * K : 0);
                        const double* dymat = dy + n * M * P;
                        for (std::int64_t m = 0; m < M; ++m) {
                            const double av = amat[m * K + k];
                            const double* dyrow = dymat + m * P;
                            for (std::int64_t q = 0; q < P; ++q) dbrow[q] += av * dyrow[q];
                        }
                    }
                }
            }
        }
    });
    return out;
}

// --- elementwise activations ---------------------------------------------------

namespace {

enum class Act { Gelu, Silu, Softplus, Exp, Tanh };

double act_forward(Act k, double x) {
    switch (k) {
        case Act::Gelu: {
            const double u = kGeluCoef * (x + kGeluCubic * x * x * x);
            return 0.5 * x * (1.0 + std::tanh(u));
        }
        case Act::Silu:
            return x * sigmoid(x);
        case Act::Softplus:
            return softplus_stable(x);
        case Act::Exp:
            return std::exp(x);
        case Act::Tanh:
            return std::tanh(x);
    }
    return 0.0;
}

// dy/dx given input x and forward value y.
double act_backward(Act k, double x, double y) {
    switch (k) {
        case Act::Gelu: {
            const double u = kGeluCoef * (x + kGeluCubic * x * x * x);
            const double t = std::tanh(u);
            const double du = kGeluCoef * (1.0 + 3.0 * kGeluCubic * x * x);
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
        }
        case Act::Silu: {
            const double s = sigmoid(x);
            return s * (1.0 + x * (1.0 - s));
        }
        case Act::Softplus:
            return sigmoid(x);
        case Act::Exp:
            return y;
        case Act::Tanh:
            return 1.0 - y * y;
    }
    return 0.0;
}

const char* act_name(Act k) {
    switch (k) {
        case Act::Gelu: return "gelu";
        case Act::Silu: return "silu";
        case Act::Softplus: return "softplus";
        case Act::Exp: return "exp";
        case Act::Tanh: return "tanh";
    }
    return "?";
}

}  // namespace

static Tensor activation_op(Graph& g, const Tensor& x, Act kind) {
    Tensor out = Tensor::zeros(x.shape());
    const double* xd = x.data();
    double* od = out.data();
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) od[i] = act_forward(kind, xd[i]);
    g.record(act_name(kind), {x}, {out}, [kind](const Graph::Node& node) {
        const Tensor& x = node.inputs[0];
        const Tensor& y = node.outputs[0];
        const double* xd = x.data();
        const double* yd = y.data();
        const double* dy = y.grad().data();
        auto& dx = const_cast<Tensor&>(x).grad();
        const std::int64_t n = x.size();
        for (std::int64_t i = 0; i < n; ++i) {
            dx[static_cast<std::size_t>(i)] += dy[i] * act_backward(kind, xd[i], yd[i]);
        }
    });
    return out;
}

Tensor Graph::gelu(const Tensor& x) { return activation_op(*this, x, Act::Gelu); }
Tensor Graph::silu(const Tensor& x) { return activation_op(*this, x, Act::Silu); }
Tensor Graph::softplus(const Tensor& x) { return activation_op(*this, x, Act::Softplus); }
Tensor Graph::exp(const Tensor& x) { return activation_op(*this, x, Act::Exp); }
Tensor Graph::tanh(const Tensor& x) { return activation_op(*this, x, Act::Tanh); }

// --- layernorm -----------------------------------------------------------------

Tensor Graph::layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const auto& sh = x.shape();
    if (sh.empty()) throw ShapeMismatch("layernorm: rank-0 input");
    const std::int64_t D = sh.back();
    if (gain.size() != D || bias.size() != D) {
        throw ShapeMismatch("layernorm: gain/bias " + shape_str(gain.shape()) + "/" +
                            shape_str(bias.shape()) + " do not match last dim of " + shape_str(sh));
    }
    if (eps <= 0.0) throw DomainError("layernorm: eps must be > 0");
    const std::int64_t rows = x.size() / D;
    Tensor out = Tensor::zeros(sh);
    // xhat and inv_std are saved for backward.
    Tensor xhat = Tensor::zeros(sh);
    Tensor inv_std = Tensor::zeros({rows});
    const double* xd = x.data();
    const double* gd = gain.data();
    const double* bd = bias.data();
    double* od = out.data();
    double* hd = xhat.data();
    double* isd = inv_std.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = xd + r * D;
        double mu = 0.0;
        for (std::int64_t j = 0; j < D; ++j) mu += row[j];
        mu /= static_cast<double>(D);
        double var = 0.0;
        for (std::int64_t j = 0; j < D; ++j) {
            const double c = row[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(D);
        const double is = 1.0 / std::sqrt(var + eps);
        isd[r] = is;
        double* orow = od + r * D;
        double* hrow = hd + r * D;
        for (std::int64_t j = 0; j < D; ++j) {
            const double xh = (row[j] - mu) * is;
            hrow[j] = xh;
            orow[j] = xh * gd[j] + bd[j];
        }
    }
    finish_node("layernorm", {x, gain, bias}, {out}, [xhat, inv_std, D, rows](const Node& node) {
        const Tensor& x = node.inputs[0];
        const Tensor& gain = node.inputs[1];
        const Tensor& bias = node.inputs[2];
        const Tensor& y = node.outputs[0];
        const double* dy = y.grad().data();
        const double* hd = xhat.data();
        const double* isd = inv_std.data();
        const double* gd = gain.data();
        if (x.requires_grad()) {
            auto& dx = const_cast<Tensor&>(x).grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* dyrow = dy + r * D;
                const double* hrow = hd + r * D;
                double* dxrow = dx.data() + r * D;
                double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat*xhat)
                for (std::int64_t j = 0; j < D; ++j) {
                    const double dxh = dyrow[j] * gd[j];
                    m1 += dxh;
                    m2 += dxh * hrow[j];
                }
                m1 /= static_cast<double>(D);
                m2 /= static_cast<double>(D);
                const double is = isd[r];
                for (std::int64_t j = 0; j < D; ++j) {
                    const double dxh = dyrow[j] * gd[j];
                    dxrow[j] += is * (dxh - m1 - hrow[j] * m2);
                }
            }
        }
        if (gain.requires_grad()) {
            auto& dg = const_cast<Tensor&>(gain).grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* dyrow = dy + r * D;
                const double* hrow = hd + r * D;
                for (std::int64_t j = 0; j < D; ++j) dg[static_cast<std::size_t>(j)] += dyrow[j] * hrow[j];
            }
        }
        if (bias.requires_grad()) {
            auto& db = const_cast<Tensor&>(bias).grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* dyrow = dy + r * D;
                for (std::int64_t j = 0; j < D; ++j) db[static_cast<std::size_t>(j)] += dyrow[j];
            }
        }
    });
    return out;
}

// --- softmax family --------------------------------------------------------------

Tensor Graph::softmax(const Tensor& x) {
    const auto& sh = x.shape();
    if (sh.empty()) throw ShapeMismatch("softmax: rank-0 input");
    const std::int64_t D = sh.back();
    const std::int64_t rows = x.size() / D;
    Tensor out = Tensor::zeros(sh);
    const double* xd = x.data();
    double* od = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = xd + r * D;
        double mx = row[0];
        for (std::int64_t j = 1; j < D; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        double* orow = od + r * D;
        for (std::int64_t j = 0; j < D; ++j) {
            orow[j] = std::exp(row[j] - mx);
            z += orow[j];
        }
        const double inv = 1.0 / z;
        for (std::int64_t j = 0; j < D; ++j) orow[j] *= inv;
    }
    finish_node("softmax", {x}, {out}, [D, rows](const Node& node) {
        const Tensor& x = node.inputs[0];
        const Tensor& y = node.outputs[0];
        const double* yd = y.data();
        const double* dy = y.grad().data();
        auto& dx = const_cast<Tensor&>(x).grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* yrow = yd + r * D;
            const double* dyrow = dy + r * D;
            double dot = 0.0;
            for (std::int64_t j = 0; j < D; ++j) dot += dyrow[j] * yrow[j];
            double* dxrow = dx.data() + r * D;
            for (std::int64_t j = 0; j < D; ++j) dxrow[j] += yrow[j] * (dyrow[j] - dot);
        }
    });
    return out;
}

Tensor Graph::logsoftmax(const Tensor& x) {
    const auto& sh = x.shape();
    if (sh.empty()) throw ShapeMismatch("logsoftmax: rank-0 input");
    const std::int64_t D = sh.back();
    const std::int64_t rows = x.size() / D;
    Tensor out = Tensor::zeros(sh);
    const double* xd = x.data();
    double* od = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = xd + r * D;
        double mx = row[0];
        for (std::int64_t j = 1; j < D; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::int64_t j = 0; j < D; ++j) z += std::exp(row[j] - mx);
        const double lz = mx + std::log(z);
        double* orow = od + r * D;
        for (std::int64_t j = 0; j < D; ++j) orow[j] = row[j] - lz;
    }
    finish_node("logsoftmax", {x}, {out}, [D, rows](const Node& node) {
        const Tensor& x = node.inputs[0];
        const Tensor& y = node.outputs[0];
        const double* yd = y.data();
        const double* dy = y.grad().data();
        auto& dx = const_cast<Tensor&>(x).grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* yrow = yd + r * D;
            const double* dyrow = dy + r * D;
            double sum = 0.0;
            for (std::int64_t j = 0; j < D; ++j) sum += dyrow[j];
            double* dxrow = dx.data() + r * D;
            for (std::int64_t j = 0; j < D; ++j) dxrow[j] += dyrow[j] - std::exp(yrow[j]) * sum;
        }
    });
    return out;
}

// --- structural ops ---------------------------------------------------------------

Tensor Graph::flip_last_dim(const Tensor& x) {
    const auto& sh = x.shape();
    if (sh.empty()) throw ShapeMismatch("flip_last_dim: rank-0 input");
    const std::int64_t D = sh.back();
    const std::int64_t rows = x.size() / D;
    Tensor out = Tensor::zeros(sh);
    const double* xd = x.data();
    double* od = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t j = 0; j < D; ++j) od[r * D + j] = xd[r * D + (D - 1 - j)];
    }
    finish_node("flip_last_dim", {x}, {out}, [D, rows](const Node& node) {
        const Tensor& x = node.inputs[0];
        const double* dy = node.outputs[0].grad().data();
        auto& dx = const_cast<Tensor&>(x).grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            for (std::int64_t j = 0; j < D; ++j) {
                dx[static_cast<std::size_t>(r * D + (D - 1 - j))] += dy[r * D + j];
            }
        }
    });
    return out;
}

Tensor Graph::concat_dim1(const Tensor& a, const Tensor& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (as.size() < 2 || bs.size() != as.size()) {
        throw ShapeMismatch("concat_dim1: ranks " + shape_str(as) + " vs " + shape_str(bs));
    }
    for (std::size_t i = 0; i < as.size(); ++i) {
        if (i != 1 && as[i] != bs[i]) {
            throw ShapeMismatch("concat_dim1: shapes " + shape_str(as) + " vs " + shape_str(bs));
        }
    }
    Shape os = as;
    os[1] = as[1] + bs[1];
    Tensor out = Tensor::zeros(os);
    const std::int64_t B = as[0];
    std::int64_t inner = 1;
    for (std::size_t i = 2; i < as.size(); ++i) inner *= as[i];
    const std::int64_t la = as[1] * inner, lb = bs[1] * inner, lo = os[1] * inner;
    const double* adp = a.data();
    const double* bdp = b.data();
    double* od = out.data();
    for (std::int64_t n = 0; n < B; ++n) {
        std::memcpy(od + n * lo, adp + n * la, static_cast<std::size_t>(la) * sizeof(double));
        std::memcpy(od + n * lo + la, bdp + n * lb, static_cast<std::size_t>(lb) * sizeof(double));
    }
    finish_node("concat_dim1", {a, b}, {out}, [B, la, lb, lo](const Node& node) {
        const Tensor& a = node.inputs[0];
        const Tensor& b = node.inputs[1];
        const double* dy = node.outputs[0].grad().data();
        if (a.requires_grad()) {
            auto& da = const_cast<Tensor&>(a).grad();
            for (std::int64_t n = 0; n < B; ++n) {
                for (std::int64_t i = 0; i < la; ++i) da[static_cast<std::size_t>(n * la + i)] += dy[n * lo + i];
            }
        }
        if (b.requires_grad()) {
            auto& db = const_cast<Tensor&>(b).grad();
            for (std::int64_t n = 0; n < B; ++n) {
                for (std::int64_t i = 0; i < lb; ++i) db[static_cast<std::size_t>(n * lb + i)] += dy[n * lo + la + i];
            }
        }
    });
    return out;
}

Tensor Graph::slice_dim1(const Tensor& x, std::int64_t start, std::int64_t len) {
    const auto& sh = x.shape();
    if (sh.size() < 2) throw ShapeMismatch("slice_dim1: rank < 2, " + shape_str(sh));
    if (start < 0 || len < 1 || start + len > sh[1]) {
        throw ShapeMismatch("slice_dim1: window [" + std::to_string(start) + "," +
                            std::to_string(start + len) + ") out of " + shape_str(sh));
    }
    Shape os = sh;
    os[1] = len;
    Tensor out = Tensor::zeros(os);
    const std::int64_t B = sh[0];
    std::int64_t inner = 1;
    for (std::size_t i = 2; i < sh.size(); ++i) inner *= sh[i];
    const std::int64_t lx = sh[1] * inner, lo = len * inner, off = start * inner;
    const double* xd = x.data();
    double* od = out.data();
    for (std::int64_t n = 0; n < B; ++n) {
        std::memcpy(od + n * lo, xd + n * lx + off, static_cast<std::size_t>(lo) * sizeof(double));
    }
    finish_node("slice_dim1", {x}, {out}, [B, lx, lo, off](const Node& node) {
        const Tensor& x = node.inputs[0];
        const double* dy = node.outputs[0].grad().data();
        auto& dx = const_cast<Tensor&>(x).grad();
        for (std::int64_t n = 0; n < B; ++n) {
            for (std::int64_t i = 0; i < lo; ++i) dx[static_cast<std::size_t>(n * lx + off + i)] += dy[n * lo + i];
        }
    });
    return out;
}

Tensor Graph::slice_last_dim(const Tensor& x, std::int64_t start, std::int64_t len) {
    const auto& sh = x.shape();
    if (sh.empty()) throw ShapeMismatch("slice_last_dim: rank-0 input");
    const std::int64_t D = sh.back();
    if (start < 0 || len < 1 || start + len > D) {
        throw ShapeMismatch("slice_last_dim: window [" + std::to_string(start) + "," +
                            std::to_string(start + len) + ") out of " + shape_str(sh));
    }
    Shape os = sh;
    os.back() = len;
    Tensor out = Tensor::zeros(os);
    const std::int64_t rows = x.size() / D;
    const double* xd = x.data();
    double* od = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        std::memcpy(od + r * len, xd + r * D + start, static_cast<std::size_t>(len) * sizeof(double));
    }
    finish_node("slice_last_dim", {x}, {out}, [rows, D, start, len](const Node& node) {
        const Tensor& x = node.inputs[0];
        const double* dy = node.outputs[0].grad().data();
        auto& dx = const_cast<Tensor&>(x).grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            for (std::int64_t i = 0; i < len; ++i) dx[static_cast<std::size_t>(r * D + start + i)] += dy[r * len + i];
        }
    });
    return out;
}

Tensor Graph::reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw ShapeMismatch("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                            " changes element count");
    }
    Tensor out = Tensor::zeros(shape);
    std::memcpy(out.data(), x.data(), static_cast<std::size_t>(x.size()) * sizeof(double));
    finish_node("reshape", {x}, {out}, [](const Node& node) {
        const Tensor& x = node.inputs[0];
        const auto& dy = node.outputs[0].grad();
        const_cast<Tensor&>(x).accumulate_grad(dy.data(), x.size());
    });
    return out;
}

Tensor Graph::transpose_last2(const Tensor& x) {
    const auto& sh = x.shape();
    if (sh.size() < 2) throw ShapeMismatch("transpose_last2: rank < 2, " + shape_str(sh));
    const std::int64_t M = sh[sh.size() - 2], N = sh[sh.size() - 1];
    const std::int64_t batch = x.size() / (M * N);
    Shape os = sh;
    std::swap(os[os.size() - 2], os[os.size() - 1]);
    Tensor out = Tensor::zeros(os);
    const double* xd = x.data();
    double* od = out.data();
    for (std::int64_t n = 0; n < batch; ++n) {
        const double* xm = xd + n * M * N;
        double* om = od + n * M * N;
        for (std::int64_t i = 0; i < M; ++i) {
            for (std::int64_t j = 0; j < N; ++j) om[j * M + i] = xm[i * N + j];
        }
    }
    finish_node("transpose_last2", {x}, {out}, [batch, M, N](const Node& node) {
        const Tensor& x = node.inputs[0];
        const double* dy = node.outputs[0].grad().data();
        auto& dx = const_cast<Tensor&>(x).grad();
        for (std::int64_t n = 0; n < batch; ++n) {
            const double* dym = dy + n * M * N;
            double* dxm = dx.data() + n * M * N;
            for (std::int64_t i = 0; i < M; ++i) {
                for (std::int64_t j = 0; j < N; ++j) dxm[i * N + j] += dym[j * M + i];
            }
        }
    });
    return out;
}

Tensor Graph::permute0213(const Tensor& x) {
    const auto& sh = x.shape();
    if (sh.size() != 4) throw ShapeMismatch("permute0213: expected rank 4, got " + shape_str(sh));
    const std::int64_t B = sh[0], S = sh[1], H = sh[2], E = sh[3];
    Tensor out = Tensor::zeros({B, H, S, E});
    const double* xd = x.data();
    double* od = out.data();
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t s = 0; s < S; ++s) {
            for (std::int64_t h = 0; h < H; ++h) {
                std::memcpy(od + ((b * H + h) * S + s) * E, xd + ((b * S + s) * H + h) * E,
                            static_cast<std::size_t>(E) * sizeof(double));
            }
        }
    }
    finish_node("permute0213", {x}, {out}, [B, S, H, E](const Node& node) {
        const Tensor& x = node.inputs[0];
        const double* dy = node.outputs[0].grad().data();
        auto& dx = const_cast<Tensor&>(x).grad();
        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t s = 0; s < S; ++s) {
                for (std::int64_t h = 0; h < H; ++h) {
                    const double* src = dy + ((b * H + h) * S + s) * E;
                    double* dst = dx.data() + ((b * S + s) * H + h) * E;
                    for (std::int64_t e = 0; e < E; ++e) dst[e] += src[e];
                }
            }
        }
    });
    return out;
}

Tensor Graph::tile_row(const Tensor& x, std::int64_t batch) {
    if (x.dim() != 1) throw ShapeMismatch("tile_row: expected rank 1, got " + shape_str(x.shape()));
    if (batch < 1) throw ShapeMismatch("tile_row: batch must be >= 1");
    const std::int64_t C = x.size();
    Tensor out = Tensor::zeros({batch, 1, C});
    const double* xd = x.data();
    double* od = out.data();
    for (std::int64_t n = 0; n < batch; ++n) {
        std::memcpy(od + n * C, xd, static_cast<std::size_t>(C) * sizeof(double));
    }
    finish_node("tile_row", {x}, {out}, [batch, C](const Node& node) {
        const Tensor& x = node.inputs[0];
        const double* dy = node.outputs[0].grad().data();
        auto& dx = const_cast<Tensor&>(x).grad();
        for (std::int64_t n = 0; n < batch; ++n) {
            for (std::int64_t j = 0; j < C; ++j) dx[static_cast<std::size_t>(j)] += dy[n * C + j];
        }
    });
    return out;
}

// --- reductions -------------------------------------------------------------------

Tensor Graph::mean(const Tensor& x) {
    const std::int64_t n = x.size();
    const double* xd = x.data();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) acc += xd[i];
    Tensor out = Tensor::scalar(acc / static_cast<double>(n));
    finish_node("mean", {x}, {out}, [n](const Node& node) {
        const Tensor& x = node.inputs[0];
        const double g = node.outputs[0].grad()[0] / static_cast<double>(n);
        auto& dx = const_cast<Tensor&>(x).grad();
        for (std::int64_t i = 0; i < n; ++i) dx[static_cast<std::size_t>(i)] += g;
    });
    return out;
}

Tensor Graph::sum_last_dim(const Tensor& x) {
    const auto& sh = x.shape();
    if (sh.empty()) throw ShapeMismatch("sum_last_dim: rank-0 input");
    const std::int64_t D = sh.back();
    const std::int64_t rows = x.size() / D;
    Shape os(sh.begin(), sh.end() - 1);
    if (os.empty()) os = {1};
    Tensor out = Tensor::zeros(os);
    const double* xd = x.data();
    double* od = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < D; ++j) acc += xd[r * D + j];
        od[r] = acc;
    }
    finish_node("sum_last_dim", {x}, {out}, [rows, D](const Node& node) {
        const Tensor& x = node.inputs[0];
        const double* dy = node.outputs[0].grad().data();
        auto& dx = const_cast<Tensor&>(x).grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            for (std::int64_t j = 0; j < D; ++j) dx[static_cast<std::size_t>(r * D + j)] += dy[r];
        }
    });
    return out;
}

Tensor Graph::l2norm_last_dim(const Tensor& x) {
    const auto& sh = x.shape();
    if (sh.empty()) throw ShapeMismatch("l2norm_last_dim: rank-0 input");
    const std::int64_t D = sh.back();
    const std::int64_t rows = x.size() / D;
    Shape os(sh.begin(), sh.end() - 1);
    if (os.empty()) os = {1};
    Tensor out = Tensor::zeros(os);
    const double* xd = x.data();
    double* od = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < D; ++j) acc += xd[r * D + j] * xd[r * D + j];
        od[r] = std::sqrt(acc);
    }
    finish_node("l2norm_last_dim", {x}, {out}, [rows, D](const Node& node) {
        const Tensor& x = node.inputs[0];
        const Tensor& y = node.outputs[0];
        const double* dy = y.grad().data();
        const double* yd = y.data();
        const double* xd = x.data();
        auto& dx = const_cast<Tensor&>(x).grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            // d||v||/dv_j = v_j / ||v||; at the origin use subgradient 0.
            const double inv = yd[r] > 0.0 ? dy[r] / yd[r] : 0.0;
            for (std::int64_t j = 0; j < D; ++j) dx[static_cast<std::size_t>(r * D + j)] += inv * xd[r * D + j];
        }
    });
    return out;
}

Tensor Graph::row_normalize(const Tensor& x) {
    const auto& sh = x.shape();
    if (sh.empty()) throw ShapeMismatch("row_normalize: rank-0 input");
    const std::int64_t D = sh.back();
    const std::int64_t rows = x.size() / D;
    Tensor out = Tensor::zeros(sh);
    Tensor norms = Tensor::zeros({rows});
    const double* xd = x.data();
    double* od = out.data();
    double* nd = norms.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < D; ++j) acc += xd[r * D + j] * xd[r * D + j];
        const double nrm = std::sqrt(acc);
        if (nrm <= 1e-12) {
            throw DomainError("row_normalize: row " + std::to_string(r) + " has near-zero norm");
        }
        nd[r] = nrm;
        for (std::int64_t j = 0; j < D; ++j) od[r * D + j] = xd[r * D + j] / nrm;
    }
    finish_node("row_normalize", {x}, {out}, [norms, rows, D](const Node& node) {
        const Tensor& x = node.inputs[0];
        const Tensor& y = node.outputs[0];
        const double* dy = y.grad().data();
        const double* yd = y.data();
        const double* nd = norms.data();
        auto& dx = const_cast<Tensor&>(x).grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            // dx = (dy - y * <dy, y>) / ||x||
            double dot = 0.0;
            for (std::int64_t j = 0; j < D; ++j) dot += dy[r * D + j] * yd[r * D + j];
            const double inv = 1.0 / nd[r];
            for (std::int64_t j = 0; j < D; ++j) {
                dx[static_cast<std::size_t>(r * D + j)] += (dy[r * D + j] - yd[r * D + j] * dot) * inv;
            }
        }
    });
    return out;
}

// --- pointwise binary with leading broadcast ------------------------------------

namespace {

// The smaller operand's shape must equal the trailing suffix of the larger's.
void check_suffix_broadcast(const Shape& big, const Shape& small, const char* op) {
    if (small.size() > big.size() || !std::equal(small.rbegin(), small.rend(), big.rbegin())) {
        throw ShapeMismatch(std::string(op) + ": shapes " + shape_str(big) + " and " +
                            shape_str(small) + " are not leading-broadcastable");
    }
}

}  // namespace

Tensor Graph::add(const Tensor& a, const Tensor& b) {
    const bool a_big = a.size() >= b.size();
    const Tensor& big = a_big ? a : b;
    const Tensor& small = a_big ? b : a;
    check_suffix_broadcast(big.shape(), small.shape(), "add");
    const std::int64_t n = big.size(), m = small.size();
    Tensor out = Tensor::zeros(big.shape());
    const double* bd = big.data();
    const double* sd = small.data();
    double* od = out.data();
    for (std::int64_t i = 0; i < n; ++i) od[i] = bd[i] + sd[i % m];
    finish_node("add", {big, small}, {out}, [n, m](const Node& node) {
        const Tensor& big = node.inputs[0];
        const Tensor& small = node.inputs[1];
        const double* dy = node.outputs[0].grad().data();
        if (big.requires_grad()) const_cast<Tensor&>(big).accumulate_grad(dy, n);
        if (small.requires_grad()) {
            auto& ds = const_cast<Tensor&>(small).grad();
            for (std::int64_t i = 0; i < n; ++i) ds[static_cast<std::size_t>(i % m)] += dy[i];
        }
    });
    return out;
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
    const bool a_big = a.size() >= b.size();
    const Tensor& big = a_big ? a : b;
    const Tensor& small = a_big ? b : a;
    check_suffix_broadcast(big.shape(), small.shape(), "mul");
    const std::int64_t n = big.size(), m = small.size();
    Tensor out = Tensor::zeros(big.shape());
    const double* bd = big.data();
    const double* sd = small.data();
    double* od = out.data();
    for (std::int64_t i = 0; i < n; ++i) od[i] = bd[i] * sd[i % m];
    finish_node("mul", {big, small}, {out}, [n, m](const Node& node) {
        const Tensor& big = node.inputs[0];
        const Tensor& small = node.inputs[1];
        const double* dy = node.outputs[0].grad().data();
        const double* bd = big.data();
        const double* sd = small.data();
        if (big.requires_grad()) {
            auto& dbig = const_cast<Tensor&>(big).grad();
            for (std::int64_t i = 0; i < n; ++i) dbig[static_cast<std::size_t>(i)] += dy[i] * sd[i % m];
        }
        if (small.requires_grad()) {
            auto& ds = const_cast<Tensor&>(small).grad();
            for (std::int64_t i = 0; i < n; ++i) ds[static_cast<std::size_t>(i % m)] += dy[i] * bd[i];
        }
    });
    return out;
}

Tensor Graph::scale(const Tensor& x, double a, double b) {
    const std::int64_t n = x.size();
    Tensor out = Tensor::zeros(x.shape());
    const double* xd = x.data();
    double* od = out.data();
    for (std::int64_t i = 0; i < n; ++i) od[i] = a * xd[i] + b;
    finish_node("scale", {x}, {out}, [a, n](const Node& node) {
        const Tensor& x = node.inputs[0];
        const double* dy = node.outputs[0].grad().data();
        auto& dx = const_cast<Tensor&>(x).grad();
        for (std::int64_t i = 0; i < n; ++i) dx[static_cast<std::size_t>(i)] += a * dy[i];
    });
    return out;
}

Tensor Graph::dropout(const Tensor& x, double p, std::uint64_t seed, bool training) {
    if (p < 0.0 || p >= 1.0) throw DomainError("dropout: p must be in [0,1)");
    if (!training || p == 0.0) {
        // Identity pass-through that still participates in the graph.
        return scale(x, 1.0, 0.0);
    }
    const std::int64_t n = x.size();
    Tensor out = Tensor::zeros(x.shape());
    Tensor mask = Tensor::zeros(x.shape());
    const double keep = 1.0 - p;
    const double inv_keep = 1.0 / keep;
    const double* xd = x.data();
    double* od = out.data();
    double* md = mask.data();
    for (std::int64_t i = 0; i < n; ++i) {
        const double u = u64_to_unit(splitmix64(hash_combine(seed, static_cast<std::uint64_t>(i))));
        const double m = u < keep ? inv_keep : 0.0;
        md[i] = m;
        od[i] = xd[i] * m;
    }
    finish_node("dropout", {x}, {out}, [mask, n](const Node& node) {
        const Tensor& x = node.inputs[0];
        const double* dy = node.outputs[0].grad().data();
        const double* md = mask.data();
        auto& dx = const_cast<Tensor&>(x).grad();
        for (std::int64_t i = 0; i < n; ++i) dx[static_cast<std::size_t>(i)] += dy[i] * md[i];
    });
    return out;
}

// --- backward ---------------------------------------------------------------------

void Graph::backward(const Tensor& loss, double upstream) {
    if (loss.size() != 1) {
        throw NonScalarLoss("backward: loss has shape " + shape_str(loss.shape()));
    }
    if (!std::isfinite(loss.item())) {
        throw NonFiniteValue("backward: loss is non-finite");
    }
    const_cast<Tensor&>(loss).grad()[0] += upstream;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        const Node& node = *it;
        // Skip nodes whose outputs never received gradient (dead branches).
        bool touched = false;
        for (const auto& out : node.outputs) {
            if (out.grad_allocated()) {
                touched = true;
                break;
            }
        }
        if (!touched) continue;
        // Make sure every output grad buffer exists before the hook runs.
        for (const auto& out : node.outputs) const_cast<Tensor&>(out).grad();
        node.backward(node);
        for (const auto& in : node.inputs) {
            if (!in.requires_grad() || !in.grad_allocated()) continue;
            for (double g : in.grad()) {
                if (!std::isfinite(g)) {
                    throw NonFiniteGradient("backward: non-finite gradient produced by op '" + node.op + "'");
                }
            }
        }
    }
}

// --- gradient checker ----------------------------------------------------------------

double grad_check(const std::function<Tensor(Graph&, std::vector<Tensor>&)>& f,
                  std::vector<Tensor> leaves, double h) {
    if (h < 1e-7 || h > 1e-4) throw DomainError("grad_check: h must be in [1e-7, 1e-4]");
    // Analytic gradients.
    for (auto& l : leaves) {
        l.set_requires_grad(true);
        l.zero_grad();
    }
    {
        Graph g;
        Tensor loss = f(g, leaves);
        g.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (auto& l : leaves) analytic.push_back(l.grad());

    // Finite differences, one element at a time; gradients off for the probes.
    double worst = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor& leaf = leaves[li];
        leaf.set_requires_grad(false);
        for (std::int64_t i = 0; i < leaf.size(); ++i) {
            const double orig = leaf.data()[i];
            leaf.data()[i] = orig + h;
            double fp, fm;
            {
                Graph g;
                g.set_recording(false);
                fp = f(g, leaves).item();
            }
            leaf.data()[i] = orig - h;
            {
                Graph g;
                g.set_recording(false);
                fm = f(g, leaves).item();
            }
            leaf.data()[i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double ad = analytic[li][static_cast<std::size_t>(i)];
            const double err = std::abs(ad - fd) / std::max(1.0, std::abs(fd));
            worst = std::max(worst, err);
        }
        leaf.set_requires_grad(true);
    }
    return worst;
}

}  // namespace mambaloc
