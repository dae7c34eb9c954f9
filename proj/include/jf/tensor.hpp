#pragma once

// Dense f64 tensors with reverse-mode autodiff.
//
// A Tensor is both a value and a graph node: ops link results to their
// inputs and attach a backward rule. Calling backward(loss) walks the
// recorded graph in reverse topological order and accumulates gradients
// into every reachable leaf with requires_grad set. Everything is 64-bit
// and single-precision-free so finite-difference checks stay tight.
//
// Shapes are row-major. Rank conventions used by the model:
//   [n]        vectors (layer-norm parameters, biases)
//   [n, d]     token matrices (row = token)
//   [c, h, w]  feature maps (channel-major)

#include <functional>
#include <memory>
#include <vector>

#include "jf/common.hpp"

namespace jf {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense boolean matrix used for attention visibility masks.
struct BoolMat {
    int rows = 0;
    int cols = 0;
    std::vector<std::uint8_t> v;  // row-major, 1 = allowed

    BoolMat() = default;
    BoolMat(int r, int c, std::uint8_t fill = 0) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, fill) {}
    std::uint8_t& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
    std::uint8_t at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
    bool operator==(const BoolMat& o) const { return rows == o.rows && cols == o.cols && v == o.v; }
};

class Tensor : public std::enable_shared_from_this<Tensor> {
public:
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // allocated on first accumulation; same extent as data

    // Graph record. parents keep the upstream nodes alive; backward_fn only
    // captures raw pointers, so there are no ownership cycles.
    std::vector<TensorPtr> parents;
    std::function<void()> backward_fn;
    const char* op = "leaf";

    static TensorPtr make(std::vector<int> shape, bool requires_grad = false);
    static TensorPtr make(std::vector<int> shape, std::vector<double> data, bool requires_grad = false);
    static TensorPtr zeros(std::vector<int> shape) { return make(std::move(shape)); }
    static TensorPtr full(std::vector<int> shape, double value);
    static TensorPtr scalar(double value) { return make({1}, {value}); }
    // Gaussian-initialized trainable leaf.
    static TensorPtr param(std::vector<int> shape, Rng& rng, double stddev);

    std::size_t numel() const { return data.size(); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(shape.size()); }
    bool is_leaf() const { return parents.empty(); }

    double& at(int r, int c) { return data[static_cast<std::size_t>(r) * shape[1] + c]; }
    double at(int r, int c) const { return data[static_cast<std::size_t>(r) * shape[1] + c]; }

    void ensure_grad();   // allocate + zero-fill
    void zero_grad();

    // Value copy severed from the graph (leaf, requires_grad=false).
    TensorPtr detach() const;
};

std::string shape_str(const std::vector<int>& shape);
std::size_t shape_numel(const std::vector<int>& shape);

// Throws NumericsError if any element of t is NaN/Inf; op names the boundary.
void check_finite(const Tensor& t, const char* op);

// ---- elementwise ----
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr divide(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale_by(const TensorPtr& a, double s);
TensorPtr add_const(const TensorPtr& a, double c);
TensorPtr clamp(const TensorPtr& a, double lo, double hi);  // pass-through gradient inside, 0 outside

enum class Act { sigmoid, gelu };
Act act_from_string(const std::string& name);  // unknown kind -> ConfigError
TensorPtr activation(Act kind, const TensorPtr& x);
TensorPtr sigmoid(const TensorPtr& x);
TensorPtr gelu(const TensorPtr& x);  // tanh approximation

// ---- linear algebra ----
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);  // [m,k]x[k,n] -> [m,n]
TensorPtr transpose2d(const TensorPtr& a);
// y = x + row broadcast over all rows of x[n,d], row[d]
TensorPtr add_rowvec(const TensorPtr& x, const TensorPtr& row);

// ---- shape surgery ----
TensorPtr concat0(const std::vector<TensorPtr>& parts);              // along axis 0
TensorPtr slice0(const TensorPtr& x, int start, int len);            // along axis 0
TensorPtr concat_cols(const std::vector<TensorPtr>& parts);          // [n,*] column concat
TensorPtr slice_cols(const TensorPtr& x, int start, int len);
TensorPtr tokens_to_grid(const TensorPtr& x, int gh, int gw);        // [N,D] -> [D,gh,gw]
TensorPtr grid_to_tokens(const TensorPtr& x);                        // [C,h,w] -> [h*w,C]
TensorPtr flip_w(const TensorPtr& x);                                // [c,h,w] mirrored along width
TensorPtr flip_h(const TensorPtr& x);

// ---- reductions / normalizations ----
TensorPtr sum_all(const TensorPtr& x);  // -> [1]
TensorPtr softmax_rows(const TensorPtr& x);
// Softmax restricted to allowed entries; disallowed outputs are exactly zero
// (the conceptual -inf logits never materialize as stored values).
TensorPtr masked_softmax_rows(const TensorPtr& x, const BoolMat& allowed);
TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta, double eps);
// Column-stochastic normalization: each column of x[r,c] scaled to sum 1.
TensorPtr normalize_cols(const TensorPtr& x);

// ---- spatial ----
// align_corners=false bilinear; exact identity when sizes match.
TensorPtr resize_bilinear(const TensorPtr& x, int out_h, int out_w);
TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int stride, int pad);
// w shaped [c_in, c_out, k, k]; output (h-1)*stride + k.
TensorPtr conv_transpose2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int stride);
// [C,H,W] -> [N, C*P*P]; patches in row-major grid order, each flattened
// channel-major then row-major within the patch.
TensorPtr patchify(const TensorPtr& img, int patch);
TensorPtr unpatchify(const TensorPtr& patches, int channels, int h, int w, int patch);

// ---- autodiff driver ----
// loss must be a scalar ([1] or [1,1]). With free_buffers (the default),
// non-leaf data/grad buffers are released as soon as the walk is past them.
void backward(const TensorPtr& loss, bool free_buffers = true);

struct GradCheckResult {
    double max_rel_err = 0.0;
    int coords_checked = 0;
};

// Central-difference check of d f() / d leaves. f rebuilds its graph from the
// leaves' current data on every call. max_coords_per_leaf == 0 checks every
// coordinate; otherwise a seeded random subset per leaf.
GradCheckResult grad_check(const std::function<TensorPtr()>& f,
                           const std::vector<TensorPtr>& leaves,
                           double eps = 1e-5,
                           int max_coords_per_leaf = 0,
                           std::uint64_t seed = 0);

}  // namespace jf
