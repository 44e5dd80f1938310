#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

// Define-by-run reverse-mode tape over flat double buffers. Nodes are created
// in topological order; backward() walks them in reverse. Shape bookkeeping is
// the caller's job — ops take explicit dims. With recording off, ops compute
// values through the exact same kernels but store no backward closures, so a
// non-recording pass is bit-identical to a recording one.

namespace entmap {

class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }

    int add_node(size_t n) {
        nodes_.push_back(std::make_unique<Node>());
        nodes_.back()->val.resize(n);
        return (int)nodes_.size() - 1;
    }

    int leaf(const double* data, size_t n) {
        int id = add_node(n);
        std::copy(data, data + n, nodes_[id]->val.begin());
        return id;
    }

    int leaf(const std::vector<double>& v) { return leaf(v.data(), v.size()); }

    int scalar(double v) {
        int id = add_node(1);
        nodes_[id]->val[0] = v;
        return id;
    }

    std::vector<double>& val(int id) { return nodes_[id]->val; }
    const std::vector<double>& val(int id) const { return nodes_[id]->val; }
    std::vector<double>& grad(int id) { return nodes_[id]->grad; }

    void set_backward(int id, std::function<void()> fn) {
        if (recording_) nodes_[id]->back = std::move(fn);
    }

    // Seeds d(root)/d(root) = 1 and accumulates gradients into every node.
    // root must be a scalar node.
    void backward(int root);

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        std::vector<double> val;
        std::vector<double> grad;
        std::function<void()> back;
    };
    std::vector<std::unique_ptr<Node>> nodes_;
    bool recording_;
};

namespace ad {

// elementwise
int add(Tape& t, int a, int b);
int sub(Tape& t, int a, int b);
int mul(Tape& t, int a, int b);
// y = alpha * x + beta
int scale_add(Tape& t, int x, double alpha, double beta);
int exp_(Tape& t, int x);
int silu(Tape& t, int x);
// y_i = clamp(x_i, 0, 1); gradient passes through the interior
int clamp01(Tape& t, int x);
// y_i = x_i + s (s scalar node)
int add_scalar(Tape& t, int x, int s);
// y_i = x_i / s (s scalar node)
int div_scalar(Tape& t, int x, int s);
// y_i = log(exp(a_i) + exp(b_i)), numerically stable
int logaddexp(Tape& t, int a, int b);

// reductions -> scalar node
int sum(Tape& t, int x);
int logsumexp(Tape& t, int x);
int min_all(Tape& t, int x);  // subgradient to the first argmin
int max_all(Tape& t, int x);
// mean((x - target)^2), target is a plain buffer
int mse_vs(Tape& t, int x, const double* target);

// scalar-scalar
int div_ss(Tape& t, int a, int b);

// structured ops (dims explicit)
int matmul(Tape& t, int a, int b, int m, int k, int n);
// rows of x [rows x cols] plus r [1 x cols]
int add_rowbcast(Tape& t, int x, int r, int rows, int cols);
int conv2d3x3(Tape& t, int x, int w, int b, int h, int wpix, int cin, int cout);
int softmax_rows(Tape& t, int x, int rows, int cols);
// scores from query node and a CONSTANT key buffer (no grad into keys)
int attn_scores_constk(Tape& t, int q, const double* k, int npix, int ntok, int heads, int d);
int attn_scores(Tape& t, int q, int k, int npix, int ntok, int heads, int d);
int attn_apply(Tape& t, int a, int v, int npix, int ntok, int heads, int d);
// y_p = sum_h attn[(h*npix+p)*ntok + tok]
int token_headsum(Tape& t, int attn, int npix, int ntok, int heads, int tok);
int bilinear_resize(Tape& t, int x, int sw, int sh, int dw, int dh);
int avgpool2(Tape& t, int x, int h, int w, int c);
int upsample_nearest2(Tape& t, int x, int h, int w, int c);

}  // namespace ad

}  // namespace entmap
