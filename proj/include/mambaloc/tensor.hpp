#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mambaloc/errors.hpp"

namespace mambaloc {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// N-dimensional f64 tensor, row-major contiguous.  Copying a Tensor copies
/// the handle, not the buffer; clone() makes a detached deep copy.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return s_ != nullptr; }
    const Shape& shape() const { return s_->shape; }
    std::int64_t size() const { return static_cast<std::int64_t>(s_->data.size()); }
    std::int64_t dim() const { return static_cast<std::int64_t>(s_->shape.size()); }

    double* data() { return s_->data.data(); }
    const double* data() const { return s_->data.data(); }
    std::vector<double>& values() { return s_->data; }
    const std::vector<double>& values() const { return s_->data; }

    bool requires_grad() const { return s_->requires_grad; }
    void set_requires_grad(bool v) { s_->requires_grad = v; }

    /// Gradient buffer, allocated (zero-filled) on first access.
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    bool grad_allocated() const { return !s_->grad.empty(); }
    void zero_grad();
    void accumulate_grad(const double* g, std::int64_t n);

    /// Value of a size-1 tensor.
    double item() const;
    double at(std::initializer_list<std::int64_t> idx) const;

    /// Deep copy, detached (no grad buffer carried over).
    Tensor clone() const;
    /// Copies values from src (same size) into this tensor's buffer.
    void copy_values_from(const Tensor& src);

    /// Identity of the underlying buffer; used by Graph bookkeeping.
    const void* key() const { return static_cast<const void*>(s_.get()); }

    /// Node id within the computation graph that last recorded this tensor.
    std::int64_t node_id() const { return s_->node_id; }
    void set_node_id(std::int64_t id) { s_->node_id = id; }

private:
    struct Storage {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;  // empty until touched
        bool requires_grad = false;
        std::int64_t node_id = -1;
    };
    std::shared_ptr<Storage> s_;

    static Tensor make(Shape shape, std::vector<double> data, bool requires_grad);
};

/// Tape of recorded operations.  Ops append in execution order, so the list
/// is topologically sorted by construction; backward() walks it in reverse.
class Graph {
public:
    struct Node {
        std::string op;
        std::vector<Tensor> inputs;
        std::vector<Tensor> outputs;
        // Backward hook: reads output grads, accumulates into input grads.
        std::function<void(const Node&)> backward;
    };

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const { return recording_; }
    void set_recording(bool v) { recording_ = v; }

    std::size_t node_count() const { return nodes_.size(); }

    // --- op vocabulary -----------------------------------------------------

    Tensor matmul(const Tensor& a, const Tensor& b);

    Tensor gelu(const Tensor& x);
    Tensor silu(const Tensor& x);
    Tensor softplus(const Tensor& x);
    Tensor exp(const Tensor& x);
    Tensor tanh(const Tensor& x);

    Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
    Tensor softmax(const Tensor& x);
    Tensor logsoftmax(const Tensor& x);

    Tensor flip_last_dim(const Tensor& x);
    Tensor concat_dim1(const Tensor& a, const Tensor& b);
    Tensor slice_dim1(const Tensor& x, std::int64_t start, std::int64_t len);
    Tensor slice_last_dim(const Tensor& x, std::int64_t start, std::int64_t len);
    Tensor reshape(const Tensor& x, Shape shape);
    Tensor transpose_last2(const Tensor& x);
    /// [B,S,H,E] -> [B,H,S,E]; its own inverse.
    Tensor permute0213(const Tensor& x);
    /// [C] -> [B,1,C] with gradient summed over the batch copies.
    Tensor tile_row(const Tensor& x, std::int64_t batch);

    Tensor mean(const Tensor& x);
    Tensor sum_last_dim(const Tensor& x);
    Tensor l2norm_last_dim(const Tensor& x);
    /// x / ||x|| along the last dim; DomainError on a row with norm <= 1e-12.
    Tensor row_normalize(const Tensor& x);

    Tensor add(const Tensor& a, const Tensor& b);
    Tensor sub(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor scale(const Tensor& x, double a, double b = 0.0);

    /// Inverted dropout with a counter-based generator: the mask depends only
    /// on (seed, element index), so forward is replayable.  Identity when
    /// training == false or p == 0.
    Tensor dropout(const Tensor& x, double p, std::uint64_t seed, bool training);

    // --- extension point for fused ops (used by ssm-core) -------------------

    /// Appends a custom node.  Outputs must already hold forward values.
    void record(std::string op, std::vector<Tensor> inputs, std::vector<Tensor> outputs,
                std::function<void(const Node&)> backward);

    /// Reverse pass from a scalar loss.  upstream seeds d(loss)/d(loss).
    void backward(const Tensor& loss, double upstream = 1.0);

private:
    std::vector<Node> nodes_;
    bool recording_ = true;
    std::int64_t next_node_id_ = 0;

    bool any_requires(const std::vector<Tensor>& ts) const;
    void finish_node(std::string op, std::vector<Tensor> inputs, std::vector<Tensor> outputs,
                     std::function<void(const Node&)> backward);
};

/// Temporarily turns recording off on a graph.
class NoGradGuard {
public:
    explicit NoGradGuard(Graph& g) : g_(g), prev_(g.recording()) { g_.set_recording(false); }
    ~NoGradGuard() { g_.set_recording(prev_); }

private:
    Graph& g_;
    bool prev_;
};

/// Central-difference gradient checker.  Builds the graph twice per probed
/// element via `f`, which must map the leaves to a scalar loss on a fresh
/// graph.  Returns max over all leaf elements of
///   |g_ad - g_fd| / max(1, |g_fd|).
/// `f` must be deterministic; unseeded stochastic ops are misuse.
double grad_check(const std::function<Tensor(Graph&, std::vector<Tensor>&)>& f,
                  std::vector<Tensor> leaves, double h = 1e-6);

}  // namespace mambaloc
