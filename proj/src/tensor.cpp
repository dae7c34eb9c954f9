#include "jf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace jf {

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int e : shape) n *= static_cast<std::size_t>(e);
    return n;
}

void check_finite(const Tensor& t, const char* op) {
    for (double v : t.data) {
        if (!std::isfinite(v)) {
            throw NumericsError(std::string(op) + ": non-finite value in tensor " + shape_str(t.shape));
        }
    }
}

TensorPtr Tensor::make(std::vector<int> shape, bool requires_grad) {
    for (int e : shape) {
        if (e <= 0) throw ShapeError("tensor: non-positive extent in " + shape_str(shape));
    }
    auto t = std::make_shared<Tensor>();
    t->data.assign(shape_numel(shape), 0.0);
    t->shape = std::move(shape);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr Tensor::make(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    for (int e : shape) {
        if (e <= 0) throw ShapeError("tensor: non-positive extent in " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("tensor: " + shape_str(shape) + " does not match buffer of " +
                         std::to_string(data.size()) + " values");
    }
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data = std::move(data);
    t->requires_grad = requires_grad;
    check_finite(*t, "tensor");
    return t;
}

TensorPtr Tensor::full(std::vector<int> shape, double value) {
    auto t = make(std::move(shape));
    std::fill(t->data.begin(), t->data.end(), value);
    return t;
}

TensorPtr Tensor::param(std::vector<int> shape, Rng& rng, double stddev) {
    auto t = make(std::move(shape), true);
    for (auto& v : t->data) v = rng.normal(0.0, stddev);
    return t;
}

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() {
    std::fill(grad.begin(), grad.end(), 0.0);
}

TensorPtr Tensor::detach() const {
    auto t = std::make_shared<Tensor>();
    t->shape = shape;
    t->data = data;
    return t;
}

namespace {

void require_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
    if (a->shape != b->shape) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
    }
}

bool grad_needed(std::initializer_list<const TensorPtr*> inputs) {
    for (const TensorPtr* t : inputs) {
        if ((*t)->requires_grad) return true;
    }
    return false;
}

// ---- raw matmul kernels (row-parallel, bitwise scheduling-independent) ----

constexpr double kParallelFlops = 262144.0;

void mm_kernel(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
    auto body = [&](int r0, int r1) {
        for (int i = r0; i < r1; ++i) {
            double* ci = c + static_cast<std::size_t>(i) * n;
            if (!accumulate) std::fill(ci, ci + n, 0.0);
            const double* ai = a + static_cast<std::size_t>(i) * k;
            for (int p = 0; p < k; ++p) {
                const double av = ai[p];
                const double* bp = b + static_cast<std::size_t>(p) * n;
                for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    };
    if (static_cast<double>(m) * k * n >= kParallelFlops && m >= 8 && worker_count() > 1) {
        parallel_for(0, m, body);
    } else {
        body(0, m);
    }
}

// c[p, j] += sum_i a[i, p] * b[i, j]   (a: [m, kd], b: [m, n], c: [kd, n])
void mm_tn_kernel(const double* a, const double* b, double* c, int m, int kd, int n) {
    auto body = [&](int p0, int p1) {
        for (int p = p0; p < p1; ++p) {
            double* cp = c + static_cast<std::size_t>(p) * n;
            for (int i = 0; i < m; ++i) {
                const double av = a[static_cast<std::size_t>(i) * kd + p];
                const double* bi = b + static_cast<std::size_t>(i) * n;
                for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
            }
        }
    };
    if (static_cast<double>(m) * kd * n >= kParallelFlops && kd >= 8 && worker_count() > 1) {
        parallel_for(0, kd, body);
    } else {
        body(0, kd);
    }
}

std::vector<double> transposed(const double* src, int rows, int cols) {
    std::vector<double> out(static_cast<std::size_t>(rows) * cols);
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) out[static_cast<std::size_t>(j) * rows + i] = src[static_cast<std::size_t>(i) * cols + j];
    }
    return out;
}

TensorPtr unary_map(const TensorPtr& x, const char* name, double (*fwd)(double), double (*bwd)(double, double)) {
    auto out = Tensor::make(x->shape);
    for (std::size_t i = 0; i < x->data.size(); ++i) out->data[i] = fwd(x->data[i]);
    check_finite(*out, name);
    out->op = name;
    if (x->requires_grad) {
        out->requires_grad = true;
        out->parents = {x};
        Tensor* xp = x.get();
        Tensor* yp = out.get();
        out->backward_fn = [xp, yp, bwd] {
            xp->ensure_grad();
            for (std::size_t i = 0; i < yp->grad.size(); ++i) {
                xp->grad[i] += yp->grad[i] * bwd(xp->data[i], yp->data[i]);
            }
        };
    }
    return out;
}

}  // namespace

// ---- elementwise ----

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    require_same_shape(a, b, "add");
    auto out = Tensor::make(a->shape);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
    check_finite(*out, "add");
    out->op = "add";
    if (grad_needed({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a, b};
        Tensor *ap = a.get(), *bp = b.get(), *yp = out.get();
        out->backward_fn = [ap, bp, yp] {
            if (ap->requires_grad) {
                ap->ensure_grad();
                for (std::size_t i = 0; i < yp->grad.size(); ++i) ap->grad[i] += yp->grad[i];
            }
            if (bp->requires_grad) {
                bp->ensure_grad();
                for (std::size_t i = 0; i < yp->grad.size(); ++i) bp->grad[i] += yp->grad[i];
            }
        };
    }
    return out;
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    require_same_shape(a, b, "sub");
    auto out = Tensor::make(a->shape);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] - b->data[i];
    check_finite(*out, "sub");
    out->op = "sub";
    if (grad_needed({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a, b};
        Tensor *ap = a.get(), *bp = b.get(), *yp = out.get();
        out->backward_fn = [ap, bp, yp] {
            if (ap->requires_grad) {
                ap->ensure_grad();
                for (std::size_t i = 0; i < yp->grad.size(); ++i) ap->grad[i] += yp->grad[i];
            }
            if (bp->requires_grad) {
                bp->ensure_grad();
                for (std::size_t i = 0; i < yp->grad.size(); ++i) bp->grad[i] -= yp->grad[i];
            }
        };
    }
    return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    require_same_shape(a, b, "mul");
    auto out = Tensor::make(a->shape);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * b->data[i];
    check_finite(*out, "mul");
    out->op = "mul";
    if (grad_needed({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a, b};
        Tensor *ap = a.get(), *bp = b.get(), *yp = out.get();
        out->backward_fn = [ap, bp, yp] {
            if (ap->requires_grad) {
                ap->ensure_grad();
                for (std::size_t i = 0; i < yp->grad.size(); ++i) ap->grad[i] += yp->grad[i] * bp->data[i];
            }
            if (bp->requires_grad) {
                bp->ensure_grad();
                for (std::size_t i = 0; i < yp->grad.size(); ++i) bp->grad[i] += yp->grad[i] * ap->data[i];
            }
        };
    }
    return out;
}

TensorPtr divide(const TensorPtr& a, const TensorPtr& b) {
    require_same_shape(a, b, "divide");
    auto out = Tensor::make(a->shape);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] / b->data[i];
    check_finite(*out, "divide");
    out->op = "divide";
    if (grad_needed({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a, b};
        Tensor *ap = a.get(), *bp = b.get(), *yp = out.get();
        out->backward_fn = [ap, bp, yp] {
            if (ap->requires_grad) {
                ap->ensure_grad();
                for (std::size_t i = 0; i < yp->grad.size(); ++i) ap->grad[i] += yp->grad[i] / bp->data[i];
            }
            if (bp->requires_grad) {
                bp->ensure_grad();
                for (std::size_t i = 0; i < yp->grad.size(); ++i) {
                    bp->grad[i] -= yp->grad[i] * ap->data[i] / (bp->data[i] * bp->data[i]);
                }
            }
        };
    }
    return out;
}

TensorPtr scale_by(const TensorPtr& a, double s) {
    auto out = Tensor::make(a->shape);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * s;
    check_finite(*out, "scale_by");
    out->op = "scale_by";
    if (a->requires_grad) {
        out->requires_grad = true;
        out->parents = {a};
        Tensor *ap = a.get(), *yp = out.get();
        out->backward_fn = [ap, yp, s] {
            ap->ensure_grad();
            for (std::size_t i = 0; i < yp->grad.size(); ++i) ap->grad[i] += yp->grad[i] * s;
        };
    }
    return out;
}

TensorPtr add_const(const TensorPtr& a, double c) {
    auto out = Tensor::make(a->shape);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] + c;
    check_finite(*out, "add_const");
    out->op = "add_const";
    if (a->requires_grad) {
        out->requires_grad = true;
        out->parents = {a};
        Tensor *ap = a.get(), *yp = out.get();
        out->backward_fn = [ap, yp] {
            ap->ensure_grad();
            for (std::size_t i = 0; i < yp->grad.size(); ++i) ap->grad[i] += yp->grad[i];
        };
    }
    return out;
}

TensorPtr clamp(const TensorPtr& a, double lo, double hi) {
    auto out = Tensor::make(a->shape);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = std::min(hi, std::max(lo, a->data[i]));
    out->op = "clamp";
    if (a->requires_grad) {
        out->requires_grad = true;
        out->parents = {a};
        Tensor *ap = a.get(), *yp = out.get();
        out->backward_fn = [ap, yp, lo, hi] {
            ap->ensure_grad();
            for (std::size_t i = 0; i < yp->grad.size(); ++i) {
                if (ap->data[i] >= lo && ap->data[i] <= hi) ap->grad[i] += yp->grad[i];
            }
        };
    }
    return out;
}

Act act_from_string(const std::string& name) {
    if (name == "sigmoid") return Act::sigmoid;
    if (name == "gelu") return Act::gelu;
    throw ConfigError("activation: unknown kind '" + name + "'");
}

namespace {

double sigmoid_fwd(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}
double sigmoid_bwd(double, double y) { return y * (1.0 - y); }

constexpr double kGeluC0 = 0.7978845608028653558798921198687;  // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;

double gelu_fwd(double x) {
    const double u = kGeluC0 * (x + kGeluC1 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}
double gelu_bwd(double x, double) {
    const double u = kGeluC0 * (x + kGeluC1 * x * x * x);
    const double t = std::tanh(u);
    const double sech2 = 1.0 - t * t;
    return 0.5 * (1.0 + t) + 0.5 * x * sech2 * kGeluC0 * (1.0 + 3.0 * kGeluC1 * x * x);
}

}  // namespace

TensorPtr sigmoid(const TensorPtr& x) { return unary_map(x, "sigmoid", sigmoid_fwd, sigmoid_bwd); }
TensorPtr gelu(const TensorPtr& x) { return unary_map(x, "gelu", gelu_fwd, gelu_bwd); }

TensorPtr activation(Act kind, const TensorPtr& x) {
    switch (kind) {
        case Act::sigmoid: return sigmoid(x);
        case Act::gelu: return gelu(x);
    }
    throw ConfigError("activation: unknown kind");
}

// ---- linear algebra ----

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    if (a->rank() != 2 || b->rank() != 2 || a->dim(1) != b->dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a->shape) + " x " + shape_str(b->shape));
    }
    const int m = a->dim(0), k = a->dim(1), n = b->dim(1);
    auto out = Tensor::make({m, n});
    mm_kernel(a->data.data(), b->data.data(), out->data.data(), m, k, n, false);
    check_finite(*out, "matmul");
    out->op = "matmul";
    if (grad_needed({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a, b};
        Tensor *ap = a.get(), *bp = b.get(), *yp = out.get();
        out->backward_fn = [ap, bp, yp, m, k, n] {
            if (ap->requires_grad) {
                ap->ensure_grad();
                std::vector<double> bt = transposed(bp->data.data(), k, n);
                mm_kernel(yp->grad.data(), bt.data(), ap->grad.data(), m, n, k, true);
            }
            if (bp->requires_grad) {
                bp->ensure_grad();
                mm_tn_kernel(ap->data.data(), yp->grad.data(), bp->grad.data(), m, k, n);
            }
        };
    }
    return out;
}

TensorPtr transpose2d(const TensorPtr& a) {
    if (a->rank() != 2) throw ShapeError("transpose2d: need rank 2, got " + shape_str(a->shape));
    const int r = a->dim(0), c = a->dim(1);
    auto out = Tensor::make({c, r}, transposed(a->data.data(), r, c));
    out->op = "transpose2d";
    if (a->requires_grad) {
        out->requires_grad = true;
        out->parents = {a};
        Tensor *ap = a.get(), *yp = out.get();
        out->backward_fn = [ap, yp, r, c] {
            ap->ensure_grad();
            for (int i = 0; i < r; ++i) {
                for (int j = 0; j < c; ++j) {
                    ap->grad[static_cast<std::size_t>(i) * c + j] += yp->grad[static_cast<std::size_t>(j) * r + i];
                }
            }
        };
    }
    return out;
}

TensorPtr add_rowvec(const TensorPtr& x, const TensorPtr& row) {
    if (x->rank() != 2 || row->rank() != 1 || x->dim(1) != row->dim(0)) {
        throw ShapeError("add_rowvec: shapes " + shape_str(x->shape) + " + " + shape_str(row->shape));
    }
    const int n = x->dim(0), d = x->dim(1);
    auto out = Tensor::make(x->shape);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) out->at(i, j) = x->at(i, j) + row->data[static_cast<std::size_t>(j)];
    }
    check_finite(*out, "add_rowvec");
    out->op = "add_rowvec";
    if (grad_needed({&x, &row})) {
        out->requires_grad = true;
        out->parents = {x, row};
        Tensor *xp = x.get(), *rp = row.get(), *yp = out.get();
        out->backward_fn = [xp, rp, yp, n, d] {
            if (xp->requires_grad) {
                xp->ensure_grad();
                for (std::size_t i = 0; i < yp->grad.size(); ++i) xp->grad[i] += yp->grad[i];
            }
            if (rp->requires_grad) {
                rp->ensure_grad();
                for (int i = 0; i < n; ++i) {
                    for (int j = 0; j < d; ++j) rp->grad[static_cast<std::size_t>(j)] += yp->grad[static_cast<std::size_t>(i) * d + j];
                }
            }
        };
    }
    return out;
}

// ---- shape surgery ----

TensorPtr concat0(const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw ShapeError("concat0: no parts");
    std::vector<int> shape = parts[0]->shape;
    std::size_t tail = shape_numel(shape) / static_cast<std::size_t>(shape[0]);
    int total = 0;
    for (const auto& p : parts) {
        if (p->rank() != static_cast<int>(shape.size())) throw ShapeError("concat0: rank mismatch");
        for (std::size_t i = 1; i < shape.size(); ++i) {
            if (p->shape[i] != shape[i]) {
                throw ShapeError("concat0: trailing shape mismatch " + shape_str(p->shape) + " vs " + shape_str(shape));
            }
        }
        total += p->shape[0];
    }
    shape[0] = total;
    auto out = Tensor::make(shape);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->data.begin(), p->data.end(), out->data.begin() + static_cast<std::ptrdiff_t>(off));
        off += p->data.size();
    }
    out->op = "concat0";
    bool need = false;
    for (const auto& p : parts) need = need || p->requires_grad;
    if (need) {
        out->requires_grad = true;
        out->parents = parts;
        std::vector<Tensor*> raw;
        raw.reserve(parts.size());
        for (const auto& p : parts) raw.push_back(p.get());
        Tensor* yp = out.get();
        out->backward_fn = [raw, yp, tail] {
            (void)tail;
            std::size_t off2 = 0;
            for (Tensor* p : raw) {
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (std::size_t i = 0; i < p->data.size(); ++i) p->grad[i] += yp->grad[off2 + i];
                }
                off2 += p->data.size();
            }
        };
    }
    return out;
}

TensorPtr slice0(const TensorPtr& x, int start, int len) {
    if (start < 0 || len <= 0 || start + len > x->dim(0)) {
        throw ShapeError("slice0: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of " + shape_str(x->shape));
    }
    std::vector<int> shape = x->shape;
    shape[0] = len;
    const std::size_t tail = shape_numel(x->shape) / static_cast<std::size_t>(x->dim(0));
    auto out = Tensor::make(shape);
    std::copy(x->data.begin() + static_cast<std::ptrdiff_t>(start * tail),
              x->data.begin() + static_cast<std::ptrdiff_t>((start + len) * tail), out->data.begin());
    out->op = "slice0";
    if (x->requires_grad) {
        out->requires_grad = true;
        out->parents = {x};
        Tensor *xp = x.get(), *yp = out.get();
        out->backward_fn = [xp, yp, start, tail] {
            xp->ensure_grad();
            const std::size_t off = static_cast<std::size_t>(start) * tail;
            for (std::size_t i = 0; i < yp->grad.size(); ++i) xp->grad[off + i] += yp->grad[i];
        };
    }
    return out;
}

TensorPtr concat_cols(const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    const int n = parts[0]->dim(0);
    int total = 0;
    for (const auto& p : parts) {
        if (p->rank() != 2 || p->dim(0) != n) throw ShapeError("concat_cols: row mismatch " + shape_str(p->shape));
        total += p->dim(1);
    }
    auto out = Tensor::make({n, total});
    int coff = 0;
    for (const auto& p : parts) {
        const int d = p->dim(1);
        for (int i = 0; i < n; ++i) {
            std::copy(p->data.begin() + static_cast<std::ptrdiff_t>(i) * d,
                      p->data.begin() + static_cast<std::ptrdiff_t>(i + 1) * d,
                      out->data.begin() + static_cast<std::ptrdiff_t>(i) * total + coff);
        }
        coff += d;
    }
    out->op = "concat_cols";
    bool need = false;
    for (const auto& p : parts) need = need || p->requires_grad;
    if (need) {
        out->requires_grad = true;
        out->parents = parts;
        std::vector<Tensor*> raw;
        for (const auto& p : parts) raw.push_back(p.get());
        Tensor* yp = out.get();
        out->backward_fn = [raw, yp, n, total] {
            int coff2 = 0;
            for (Tensor* p : raw) {
                const int d = p->shape[1];
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (int i = 0; i < n; ++i) {
                        for (int j = 0; j < d; ++j) {
                            p->grad[static_cast<std::size_t>(i) * d + j] +=
                                yp->grad[static_cast<std::size_t>(i) * total + coff2 + j];
                        }
                    }
                }
                coff2 += d;
            }
        };
    }
    return out;
}

TensorPtr slice_cols(const TensorPtr& x, int start, int len) {
    if (x->rank() != 2 || start < 0 || len <= 0 || start + len > x->dim(1)) {
        throw ShapeError("slice_cols: bad range on " + shape_str(x->shape));
    }
    const int n = x->dim(0), d = x->dim(1);
    auto out = Tensor::make({n, len});
    for (int i = 0; i < n; ++i) {
        std::copy(x->data.begin() + static_cast<std::ptrdiff_t>(i) * d + start,
                  x->data.begin() + static_cast<std::ptrdiff_t>(i) * d + start + len,
                  out->data.begin() + static_cast<std::ptrdiff_t>(i) * len);
    }
    out->op = "slice_cols";
    if (x->requires_grad) {
        out->requires_grad = true;
        out->parents = {x};
        Tensor *xp = x.get(), *yp = out.get();
        out->backward_fn = [xp, yp, n, d, start, len] {
            xp->ensure_grad();
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < len; ++j) {
                    xp->grad[static_cast<std::size_t>(i) * d + start + j] += yp->grad[static_cast<std::size_t>(i) * len + j];
                }
            }
        };
    }
    return out;
}

TensorPtr tokens_to_grid(const TensorPtr& x, int gh, int gw) {
    if (x->rank() != 2 || x->dim(0) != gh * gw) {
        throw ShapeError("tokens_to_grid: " + shape_str(x->shape) + " vs grid " + std::to_string(gh) + "x" +
                         std::to_string(gw));
    }
    const int d = x->dim(1);
    auto out = Tensor::make({d, gh, gw});
    for (int i = 0; i < gh * gw; ++i) {
        for (int c = 0; c < d; ++c) {
            out->data[static_cast<std::size_t>(c) * gh * gw + i] = x->data[static_cast<std::size_t>(i) * d + c];
        }
    }
    out->op = "tokens_to_grid";
    if (x->requires_grad) {
        out->requires_grad = true;
        out->parents = {x};
        Tensor *xp = x.get(), *yp = out.get();
        const int cells = gh * gw;
        out->backward_fn = [xp, yp, d, cells] {
            xp->ensure_grad();
            for (int i = 0; i < cells; ++i) {
                for (int c = 0; c < d; ++c) {
                    xp->grad[static_cast<std::size_t>(i) * d + c] += yp->grad[static_cast<std::size_t>(c) * cells + i];
                }
            }
        };
    }
    return out;
}

TensorPtr grid_to_tokens(const TensorPtr& x) {
    if (x->rank() != 3) throw ShapeError("grid_to_tokens: need [c,h,w], got " + shape_str(x->shape));
    const int c = x->dim(0), h = x->dim(1), w = x->dim(2);
    const int cells = h * w;
    auto out = Tensor::make({cells, c});
    for (int i = 0; i < cells; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            out->data[static_cast<std::size_t>(i) * c + ch] = x->data[static_cast<std::size_t>(ch) * cells + i];
        }
    }
    out->op = "grid_to_tokens";
    if (x->requires_grad) {
        out->requires_grad = true;
        out->parents = {x};
        Tensor *xp = x.get(), *yp = out.get();
        out->backward_fn = [xp, yp, c, cells] {
            xp->ensure_grad();
            for (int i = 0; i < cells; ++i) {
                for (int ch = 0; ch < c; ++ch) {
                    xp->grad[static_cast<std::size_t>(ch) * cells + i] += yp->grad[static_cast<std::size_t>(i) * c + ch];
                }
            }
        };
    }
    return out;
}

namespace {

TensorPtr flip_axis(const TensorPtr& x, bool horizontal, const char* name) {
    if (x->rank() != 3) throw ShapeError(std::string(name) + ": need [c,h,w], got " + shape_str(x->shape));
    const int c = x->dim(0), h = x->dim(1), w = x->dim(2);
    auto out = Tensor::make(x->shape);
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h; ++y) {
            for (int xx = 0; xx < w; ++xx) {
                const int sy = horizontal ? y : h - 1 - y;
                const int sx = horizontal ? w - 1 - xx : xx;
                out->data[(static_cast<std::size_t>(ch) * h + y) * w + xx] =
                    x->data[(static_cast<std::size_t>(ch) * h + sy) * w + sx];
            }
        }
    }
    out->op = name;
    if (x->requires_grad) {
        out->requires_grad = true;
        out->parents = {x};
        Tensor *xp = x.get(), *yp = out.get();
        out->backward_fn = [xp, yp, c, h, w, horizontal] {
            xp->ensure_grad();
            for (int ch = 0; ch < c; ++ch) {
                for (int y = 0; y < h; ++y) {
                    for (int xx = 0; xx < w; ++xx) {
                        const int sy = horizontal ? y : h - 1 - y;
                        const int sx = horizontal ? w - 1 - xx : xx;
                        xp->grad[(static_cast<std::size_t>(ch) * h + sy) * w + sx] +=
                            yp->grad[(static_cast<std::size_t>(ch) * h + y) * w + xx];
                    }
                }
            }
        };
    }
    return out;
}

}  // namespace

TensorPtr flip_w(const TensorPtr& x) { return flip_axis(x, true, "flip_w"); }
TensorPtr flip_h(const TensorPtr& x) { return flip_axis(x, false, "flip_h"); }

// ---- reductions / normalizations ----

TensorPtr sum_all(const TensorPtr& x) {
    double s = 0.0;
    for (double v : x->data) s += v;
    auto out = Tensor::make({1}, {s});
    out->op = "sum_all";
    if (x->requires_grad) {
        out->requires_grad = true;
        out->parents = {x};
        Tensor *xp = x.get(), *yp = out.get();
        out->backward_fn = [xp, yp] {
            xp->ensure_grad();
            const double g = yp->grad[0];
            for (std::size_t i = 0; i < xp->grad.size(); ++i) xp->grad[i] += g;
        };
    }
    return out;
}

TensorPtr softmax_rows(const TensorPtr& x) {
    if (x->rank() != 2) throw ShapeError("softmax_rows: need rank 2, got " + shape_str(x->shape));
    BoolMat all(x->dim(0), x->dim(1), 1);
    auto out = masked_softmax_rows(x, all);
    out->op = "softmax_rows";
    return out;
}

TensorPtr masked_softmax_rows(const TensorPtr& x, const BoolMat& allowed) {
    if (x->rank() != 2 || allowed.rows != x->dim(0) || allowed.cols != x->dim(1)) {
        throw ShapeError("masked_softmax_rows: mask " + std::to_string(allowed.rows) + "x" +
                         std::to_string(allowed.cols) + " vs " + shape_str(x->shape));
    }
    const int n = x->dim(0), c = x->dim(1);
    auto out = Tensor::make(x->shape);
    for (int i = 0; i < n; ++i) {
        const double* xi = &x->data[static_cast<std::size_t>(i) * c];
        double* yi = &out->data[static_cast<std::size_t>(i) * c];
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < c; ++j) {
            if (allowed.at(i, j) && xi[j] > mx) mx = xi[j];
        }
        if (!std::isfinite(mx)) {
            throw ShapeError("masked_softmax_rows: row " + std::to_string(i) + " has no allowed entries");
        }
        double denom = 0.0;
        for (int j = 0; j < c; ++j) {
            if (allowed.at(i, j)) {
                yi[j] = std::exp(xi[j] - mx);
                denom += yi[j];
            } else {
                yi[j] = 0.0;
            }
        }
        for (int j = 0; j < c; ++j) yi[j] /= denom;
    }
    check_finite(*out, "masked_softmax_rows");
    out->op = "masked_softmax_rows";
    if (x->requires_grad) {
        out->requires_grad = true;
        out->parents = {x};
        Tensor *xp = x.get(), *yp = out.get();
        out->backward_fn = [xp, yp, n, c] {
            xp->ensure_grad();
            for (int i = 0; i < n; ++i) {
                const double* yi = &yp->data[static_cast<std::size_t>(i) * c];
                const double* gi = &yp->grad[static_cast<std::size_t>(i) * c];
                double dot = 0.0;
                for (int j = 0; j < c; ++j) dot += yi[j] * gi[j];
                double* xi = &xp->grad[static_cast<std::size_t>(i) * c];
                for (int j = 0; j < c; ++j) xi[j] += yi[j] * (gi[j] - dot);
            }
        };
    }
    return out;
}

TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta, double eps) {
    if (eps <= 0.0) throw ConfigError("layer_norm: eps must be > 0");
    if (x->rank() != 2 || gamma->rank() != 1 || beta->rank() != 1 || gamma->dim(0) != x->dim(1) ||
        beta->dim(0) != x->dim(1)) {
        throw ShapeError("layer_norm: shapes " + shape_str(x->shape) + ", " + shape_str(gamma->shape) + ", " +
                         shape_str(beta->shape));
    }
    const int n = x->dim(0), d = x->dim(1);
    auto out = Tensor::make(x->shape);
    std::vector<double> mean(n), inv(n);
    for (int i = 0; i < n; ++i) {
        const double* xi = &x->data[static_cast<std::size_t>(i) * d];
        double m = 0.0;
        for (int j = 0; j < d; ++j) m += xi[j];
        m /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double dv = xi[j] - m;
            var += dv * dv;
        }
        var /= d;
        mean[i] = m;
        inv[i] = 1.0 / std::sqrt(var + eps);
        double* yi = &out->data[static_cast<std::size_t>(i) * d];
        for (int j = 0; j < d; ++j) {
            yi[j] = (xi[j] - m) * inv[i] * gamma->data[static_cast<std::size_t>(j)] + beta->data[static_cast<std::size_t>(j)];
        }
    }
    check_finite(*out, "layer_norm");
    out->op = "layer_norm";
    if (grad_needed({&x, &gamma, &beta})) {
        out->requires_grad = true;
        out->parents = {x, gamma, beta};
        Tensor *xp = x.get(), *gp = gamma.get(), *bp = beta.get(), *yp = out.get();
        out->backward_fn = [xp, gp, bp, yp, n, d, mean, inv] {
            for (int i = 0; i < n; ++i) {
                const double* xi = &xp->data[static_cast<std::size_t>(i) * d];
                const double* gi = &yp->grad[static_cast<std::size_t>(i) * d];
                // dyg = dy * gamma; reductions over the row
                double sum_dyg = 0.0, sum_dyg_xhat = 0.0;
                for (int j = 0; j < d; ++j) {
                    const double xhat = (xi[j] - mean[i]) * inv[i];
                    const double dyg = gi[j] * gp->data[static_cast<std::size_t>(j)];
                    sum_dyg += dyg;
                    sum_dyg_xhat += dyg * xhat;
                }
                if (gp->requires_grad || bp->requires_grad) {
                    if (gp->requires_grad) gp->ensure_grad();
                    if (bp->requires_grad) bp->ensure_grad();
                    for (int j = 0; j < d; ++j) {
                        const double xhat = (xi[j] - mean[i]) * inv[i];
                        if (gp->requires_grad) gp->grad[static_cast<std::size_t>(j)] += gi[j] * xhat;
                        if (bp->requires_grad) bp->grad[static_cast<std::size_t>(j)] += gi[j];
                    }
                }
                if (xp->requires_grad) {
                    xp->ensure_grad();
                    double* xg = &xp->grad[static_cast<std::size_t>(i) * d];
                    for (int j = 0; j < d; ++j) {
                        const double xhat = (xi[j] - mean[i]) * inv[i];
                        const double dyg = gi[j] * gp->data[static_cast<std::size_t>(j)];
                        xg[j] += inv[i] * (dyg - sum_dyg / d - xhat * sum_dyg_xhat / d);
                    }
                }
            }
        };
    }
    return out;
}

TensorPtr normalize_cols(const TensorPtr& x) {
    if (x->rank() != 2) throw ShapeError("normalize_cols: need rank 2, got " + shape_str(x->shape));
    const int r = x->dim(0), c = x->dim(1);
    auto out = Tensor::make(x->shape);
    std::vector<double> colsum(static_cast<std::size_t>(c), 0.0);
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) colsum[static_cast<std::size_t>(j)] += x->at(i, j);
    }
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) out->at(i, j) = x->at(i, j) / colsum[static_cast<std::size_t>(j)];
    }
    check_finite(*out, "normalize_cols");
    out->op = "normalize_cols";
    if (x->requires_grad) {
        out->requires_grad = true;
        out->parents = {x};
        Tensor *xp = x.get(), *yp = out.get();
        out->backward_fn = [xp, yp, r, c, colsum] {
            xp->ensure_grad();
            for (int j = 0; j < c; ++j) {
                double dot = 0.0;
                for (int i = 0; i < r; ++i) {
                    dot += yp->grad[static_cast<std::size_t>(i) * c + j] * yp->data[static_cast<std::size_t>(i) * c + j];
                }
                for (int i = 0; i < r; ++i) {
                    xp->grad[static_cast<std::size_t>(i) * c + j] +=
                        (yp->grad[static_cast<std::size_t>(i) * c + j] - dot) / colsum[static_cast<std::size_t>(j)];
                }
            }
        };
    }
    return out;
}

// ---- spatial ----

namespace {

struct LerpAxis {
    std::vector<int> i0, i1;
    std::vector<double> w1;  // weight of i1; weight of i0 is 1-w1
};

LerpAxis make_axis(int in, int out) {
    LerpAxis ax;
    ax.i0.resize(static_cast<std::size_t>(out));
    ax.i1.resize(static_cast<std::size_t>(out));
    ax.w1.resize(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) * scale - 0.5;
        if (src < 0.0) src = 0.0;
        if (src > in - 1) src = in - 1;
        int lo = static_cast<int>(std::floor(src));
        if (lo > in - 1) lo = in - 1;
        int hi = std::min(lo + 1, in - 1);
        ax.i0[static_cast<std::size_t>(o)] = lo;
        ax.i1[static_cast<std::size_t>(o)] = hi;
        ax.w1[static_cast<std::size_t>(o)] = src - lo;
    }
    return ax;
}

}  // namespace

TensorPtr resize_bilinear(const TensorPtr& x, int out_h, int out_w) {
    if (x->rank() != 3) throw ShapeError("resize_bilinear: need [c,h,w], got " + shape_str(x->shape));
    if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: output " + std::to_string(out_h) + "x" + std::to_string(out_w));
    const int c = x->dim(0), h = x->dim(1), w = x->dim(2);
    if (out_h == h && out_w == w) {
        // exact identity (bitwise) when sizes match
        auto out = Tensor::make(x->shape, x->data);
        out->op = "resize_bilinear";
        if (x->requires_grad) {
            out->requires_grad = true;
            out->parents = {x};
            Tensor *xp = x.get(), *yp = out.get();
            out->backward_fn = [xp, yp] {
                xp->ensure_grad();
                for (std::size_t i = 0; i < yp->grad.size(); ++i) xp->grad[i] += yp->grad[i];
            };
        }
        return out;
    }
    const LerpAxis ay = make_axis(h, out_h);
    const LerpAxis axx = make_axis(w, out_w);
    auto out = Tensor::make({c, out_h, out_w});
    for (int ch = 0; ch < c; ++ch) {
        const double* src = &x->data[static_cast<std::size_t>(ch) * h * w];
        double* dst = &out->data[static_cast<std::size_t>(ch) * out_h * out_w];
        for (int oy = 0; oy < out_h; ++oy) {
            const int y0 = ay.i0[static_cast<std::size_t>(oy)], y1 = ay.i1[static_cast<std::size_t>(oy)];
            const double wy = ay.w1[static_cast<std::size_t>(oy)];
            for (int ox = 0; ox < out_w; ++ox) {
                const int x0 = axx.i0[static_cast<std::size_t>(ox)], x1 = axx.i1[static_cast<std::size_t>(ox)];
                const double wx = axx.w1[static_cast<std::size_t>(ox)];
                const double v = (1 - wy) * ((1 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1]) +
                                 wy * ((1 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1]);
                dst[oy * out_w + ox] = v;
            }
        }
    }
    check_finite(*out, "resize_bilinear");
    out->op = "resize_bilinear";
    if (x->requires_grad) {
        out->requires_grad = true;
        out->parents = {x};
        Tensor *xp = x.get(), *yp = out.get();
        out->backward_fn = [xp, yp, c, h, w, out_h, out_w, ay, axx] {
            xp->ensure_grad();
            for (int ch = 0; ch < c; ++ch) {
                double* gsrc = &xp->grad[static_cast<std::size_t>(ch) * h * w];
                const double* gdst = &yp->grad[static_cast<std::size_t>(ch) * out_h * out_w];
                for (int oy = 0; oy < out_h; ++oy) {
                    const int y0 = ay.i0[static_cast<std::size_t>(oy)], y1 = ay.i1[static_cast<std::size_t>(oy)];
                    const double wy = ay.w1[static_cast<std::size_t>(oy)];
                    for (int ox = 0; ox < out_w; ++ox) {
                        const int x0 = axx.i0[static_cast<std::size_t>(ox)], x1 = axx.i1[static_cast<std::size_t>(ox)];
                        const double wx = axx.w1[static_cast<std::size_t>(ox)];
                        const double g = gdst[oy * out_w + ox];
                        gsrc[y0 * w + x0] += g * (1 - wy) * (1 - wx);
                        gsrc[y0 * w + x1] += g * (1 - wy) * wx;
                        gsrc[y1 * w + x0] += g * wy * (1 - wx);
                        gsrc[y1 * w + x1] += g * wy * wx;
                    }
                }
            }
        };
    }
    return out;
}

TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int stride, int pad) {
    if (x->rank() != 3 || w->rank() != 4) throw ShapeError("conv2d: shapes " + shape_str(x->shape) + ", " + shape_str(w->shape));
    const int ci = x->dim(0), h = x->dim(1), ww = x->dim(2);
    const int co = w->dim(0), kci = w->dim(1), kh = w->dim(2), kw = w->dim(3);
    if (kci != ci) throw ShapeError("conv2d: channels " + std::to_string(ci) + " vs kernel " + std::to_string(kci));
    if (b->rank() != 1 || b->dim(0) != co) throw ShapeError("conv2d: bias " + shape_str(b->shape));
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (ww + 2 * pad - kw) / stride + 1;
    if (oh < 1 || ow < 1) throw ShapeError("conv2d: empty output");
    auto out = Tensor::make({co, oh, ow});
    for (int oc = 0; oc < co; ++oc) {
        double* dst = &out->data[static_cast<std::size_t>(oc) * oh * ow];
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double acc = b->data[static_cast<std::size_t>(oc)];
                for (int ic = 0; ic < ci; ++ic) {
                    const double* src = &x->data[static_cast<std::size_t>(ic) * h * ww];
                    const double* ker = &w->data[((static_cast<std::size_t>(oc) * ci + ic) * kh) * kw];
                    for (int ky = 0; ky < kh; ++ky) {
                        const int sy = oy * stride + ky - pad;
                        if (sy < 0 || sy >= h) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int sx = ox * stride + kx - pad;
                            if (sx < 0 || sx >= ww) continue;
                            acc += src[sy * ww + sx] * ker[ky * kw + kx];
                        }
                    }
                }
                dst[oy * ow + ox] = acc;
            }
        }
    }
    check_finite(*out, "conv2d");
    out->op = "conv2d";
    if (grad_needed({&x, &w, &b})) {
        out->requires_grad = true;
        out->parents = {x, w, b};
        Tensor *xp = x.get(), *wp = w.get(), *bp = b.get(), *yp = out.get();
        out->backward_fn = [xp, wp, bp, yp, ci, h, ww, co, kh, kw, oh, ow, stride, pad] {
            if (bp->requires_grad) bp->ensure_grad();
            if (wp->requires_grad) wp->ensure_grad();
            if (xp->requires_grad) xp->ensure_grad();
            for (int oc = 0; oc < co; ++oc) {
                const double* g = &yp->grad[static_cast<std::size_t>(oc) * oh * ow];
                if (bp->requires_grad) {
                    double s = 0.0;
                    for (int i = 0; i < oh * ow; ++i) s += g[i];
                    bp->grad[static_cast<std::size_t>(oc)] += s;
                }
                for (int ic = 0; ic < ci; ++ic) {
                    const double* src = &xp->data[static_cast<std::size_t>(ic) * h * ww];
                    const double* ker = &wp->data[((static_cast<std::size_t>(oc) * ci + ic) * kh) * kw];
                    double* gker = wp->requires_grad ? &wp->grad[((static_cast<std::size_t>(oc) * ci + ic) * kh) * kw] : nullptr;
                    double* gsrc = xp->requires_grad ? &xp->grad[static_cast<std::size_t>(ic) * h * ww] : nullptr;
                    for (int oy = 0; oy < oh; ++oy) {
                        for (int ox = 0; ox < ow; ++ox) {
                            const double gv = g[oy * ow + ox];
                            if (gv == 0.0) continue;
                            for (int ky = 0; ky < kh; ++ky) {
                                const int sy = oy * stride + ky - pad;
                                if (sy < 0 || sy >= h) continue;
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int sx = ox * stride + kx - pad;
                                    if (sx < 0 || sx >= ww) continue;
                                    if (gker) gker[ky * kw + kx] += gv * src[sy * ww + sx];
                                    if (gsrc) gsrc[sy * ww + sx] += gv * ker[ky * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        };
    }
    return out;
}

TensorPtr conv_transpose2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int stride) {
    if (x->rank() != 3 || w->rank() != 4) {
        throw ShapeError("conv_transpose2d: shapes " + shape_str(x->shape) + ", " + shape_str(w->shape));
    }
    const int ci = x->dim(0), h = x->dim(1), ww = x->dim(2);
    const int kci = w->dim(0), co = w->dim(1), kh = w->dim(2), kw = w->dim(3);
    if (kci != ci) throw ShapeError("conv_transpose2d: channels " + std::to_string(ci) + " vs kernel " + std::to_string(kci));
    if (b->rank() != 1 || b->dim(0) != co) throw ShapeError("conv_transpose2d: bias " + shape_str(b->shape));
    const int oh = (h - 1) * stride + kh;
    const int ow = (ww - 1) * stride + kw;
    auto out = Tensor::make({co, oh, ow});
    for (int oc = 0; oc < co; ++oc) {
        double* dst = &out->data[static_cast<std::size_t>(oc) * oh * ow];
        std::fill(dst, dst + oh * ow, b->data[static_cast<std::size_t>(oc)]);
    }
    for (int ic = 0; ic < ci; ++ic) {
        const double* src = &x->data[static_cast<std::size_t>(ic) * h * ww];
        for (int oc = 0; oc < co; ++oc) {
            const double* ker = &w->data[((static_cast<std::size_t>(ic) * co + oc) * kh) * kw];
            double* dst = &out->data[static_cast<std::size_t>(oc) * oh * ow];
            for (int sy = 0; sy < h; ++sy) {
                for (int sx = 0; sx < ww; ++sx) {
                    const double v = src[sy * ww + sx];
                    if (v == 0.0) continue;
                    for (int ky = 0; ky < kh; ++ky) {
                        for (int kx = 0; kx < kw; ++kx) {
                            dst[(sy * stride + ky) * ow + (sx * stride + kx)] += v * ker[ky * kw + kx];
                        }
                    }
                }
            }
        }
    }
    check_finite(*out, "conv_transpose2d");
    out->op = "conv_transpose2d";
    if (grad_needed({&x, &w, &b})) {
        out->requires_grad = true;
        out->parents = {x, w, b};
        Tensor *xp = x.get(), *wp = w.get(), *bp = b.get(), *yp = out.get();
        out->backward_fn = [xp, wp, bp, yp, ci, h, ww, co, kh, kw, oh, ow, stride] {
            if (bp->requires_grad) {
                bp->ensure_grad();
                for (int oc = 0; oc < co; ++oc) {
                    const double* g = &yp->grad[static_cast<std::size_t>(oc) * oh * ow];
                    double s = 0.0;
                    for (int i = 0; i < oh * ow; ++i) s += g[i];
                    bp->grad[static_cast<std::size_t>(oc)] += s;
                }
            }
            if (wp->requires_grad) wp->ensure_grad();
            if (xp->requires_grad) xp->ensure_grad();
            for (int ic = 0; ic < ci; ++ic) {
                const double* src = &xp->data[static_cast<std::size_t>(ic) * h * ww];
                double* gsrc = xp->requires_grad ? &xp->grad[static_cast<std::size_t>(ic) * h * ww] : nullptr;
                for (int oc = 0; oc < co; ++oc) {
                    const double* ker = &wp->data[((static_cast<std::size_t>(ic) * co + oc) * kh) * kw];
                    double* gker = wp->requires_grad ? &wp->grad[((static_cast<std::size_t>(ic) * co + oc) * kh) * kw] : nullptr;
                    const double* g = &yp->grad[static_cast<std::size_t>(oc) * oh * ow];
                    for (int sy = 0; sy < h; ++sy) {
                        for (int sx = 0; sx < ww; ++sx) {
                            double acc = 0.0;
                            for (int ky = 0; ky < kh; ++ky) {
                                for (int kx = 0; kx < kw; ++kx) {
                                    const double gv = g[(sy * stride + ky) * ow + (sx * stride + kx)];
                                    acc += gv * ker[ky * kw + kx];
                                    if (gker) gker[ky * kw + kx] += gv * src[sy * ww + sx];
                                }
                            }
                            if (gsrc) gsrc[sy * ww + sx] += acc;
                        }
                    }
                }
            }
        };
    }
    return out;
}

TensorPtr patchify(const TensorPtr& img, int patch) {
    if (img->rank() != 3) throw ShapeError("patchify: need [c,h,w], got " + shape_str(img->shape));
    const int c = img->dim(0), h = img->dim(1), w = img->dim(2);
    if (patch < 1 || h % patch != 0 || w % patch != 0) {
        throw ShapeError("patchify: " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by patch " +
                         std::to_string(patch));
    }
    const int gh = h / patch, gw = w / patch;
    const int n = gh * gw, d = c * patch * patch;
    auto out = Tensor::make({n, d});
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            double* dst = &out->data[static_cast<std::size_t>(gy * gw + gx) * d];
            for (int ch = 0; ch < c; ++ch) {
                const double* src = &img->data[static_cast<std::size_t>(ch) * h * w];
                for (int py = 0; py < patch; ++py) {
                    for (int px = 0; px < patch; ++px) {
                        dst[ch * patch * patch + py * patch + px] = src[(gy * patch + py) * w + (gx * patch + px)];
                    }
                }
            }
        }
    }
    out->op = "patchify";
    if (img->requires_grad) {
        out->requires_grad = true;
        out->parents = {img};
        Tensor *xp = img.get(), *yp = out.get();
        out->backward_fn = [xp, yp, c, h, w, patch] {
            xp->ensure_grad();
            const int gw2 = w / patch;
            const int d2 = c * patch * patch;
            for (int gy = 0; gy < h / patch; ++gy) {
                for (int gx = 0; gx < gw2; ++gx) {
                    const double* g = &yp->grad[static_cast<std::size_t>(gy * gw2 + gx) * d2];
                    for (int ch = 0; ch < c; ++ch) {
                        double* gout = &xp->grad[static_cast<std::size_t>(ch) * h * w];
                        for (int py = 0; py < patch; ++py) {
                            for (int px = 0; px < patch; ++px) {
                                gout[(gy * patch + py) * w + (gx * patch + px)] += g[ch * patch * patch + py * patch + px];
                            }
                        }
                    }
                }
            }
        };
    }
    return out;
}

TensorPtr unpatchify(const TensorPtr& patches, int channels, int h, int w, int patch) {
    const int gh = h / patch, gw = w / patch;
    const int n = gh * gw, d = channels * patch * patch;
    if (patches->rank() != 2 || patches->dim(0) != n || patches->dim(1) != d || h % patch != 0 || w % patch != 0) {
        throw ShapeError("unpatchify: " + shape_str(patches->shape) + " vs " + std::to_string(channels) + "x" +
                         std::to_string(h) + "x" + std::to_string(w) + " patch " + std::to_string(patch));
    }
    auto out = Tensor::make({channels, h, w});
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            const double* src = &patches->data[static_cast<std::size_t>(gy * gw + gx) * d];
            for (int ch = 0; ch < channels; ++ch) {
                double* dst = &out->data[static_cast<std::size_t>(ch) * h * w];
                for (int py = 0; py < patch; ++py) {
                    for (int px = 0; px < patch; ++px) {
                        dst[(gy * patch + py) * w + (gx * patch + px)] = src[ch * patch * patch + py * patch + px];
                    }
                }
            }
        }
    }
    out->op = "unpatchify";
    if (patches->requires_grad) {
        out->requires_grad = true;
        out->parents = {patches};
        Tensor *xp = patches.get(), *yp = out.get();
        out->backward_fn = [xp, yp, channels, h, w, patch] {
            xp->ensure_grad();
            const int gw2 = w / patch;
            const int d2 = channels * patch * patch;
            for (int gy = 0; gy < h / patch; ++gy) {
                for (int gx = 0; gx < gw2; ++gx) {
                    double* g = &xp->grad[static_cast<std::size_t>(gy * gw2 + gx) * d2];
                    for (int ch = 0; ch < channels; ++ch) {
                        const double* gout = &yp->grad[static_cast<std::size_t>(ch) * h * w];
                        for (int py = 0; py < patch; ++py) {
                            for (int px = 0; px < patch; ++px) {
                                g[ch * patch * patch + py * patch + px] += gout[(gy * patch + py) * w + (gx * patch + px)];
                            }
                        }
                    }
                }
            }
        };
    }
    return out;
}

// ---- autodiff driver ----

void backward(const TensorPtr& loss, bool free_buffers) {
    if (!loss || loss->numel() != 1) {
        throw ShapeError("backward: loss must be scalar, got " + (loss ? shape_str(loss->shape) : std::string("null")));
    }
    if (!loss->requires_grad) return;

    // Iterative post-order DFS; parents visited in recorded order so the
    // walk (and therefore accumulation order) is deterministic.
    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> visited;
    std::vector<std::pair<Tensor*, std::size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Tensor* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && visited.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor* node = *it;
        if (!node->grad.empty() && node->backward_fn) node->backward_fn();
        if (free_buffers && node != loss.get() && !node->is_leaf()) {
            std::vector<double>().swap(node->grad);
            std::vector<double>().swap(node->data);
        }
    }
}

GradCheckResult grad_check(const std::function<TensorPtr()>& f, const std::vector<TensorPtr>& leaves,
                           double eps, int max_coords_per_leaf, std::uint64_t seed) {
    auto loss = f();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (const auto& leaf : leaves) {
        if (leaf->grad.empty()) {
            analytic.emplace_back(leaf->numel(), 0.0);
        } else {
            analytic.push_back(leaf->grad);
        }
        leaf->zero_grad();
    }

    Rng rng(seed);
    GradCheckResult res;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor& leaf = *leaves[li];
        std::vector<std::size_t> coords;
        if (max_coords_per_leaf <= 0 || static_cast<std::size_t>(max_coords_per_leaf) >= leaf.numel()) {
            coords.resize(leaf.numel());
            for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        } else {
            // sample without replacement (partial Fisher-Yates over an index pool)
            std::vector<std::size_t> pool(leaf.numel());
            for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
            for (int i = 0; i < max_coords_per_leaf; ++i) {
                const std::size_t j = i + rng.below(pool.size() - static_cast<std::size_t>(i));
                std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
                coords.push_back(pool[static_cast<std::size_t>(i)]);
            }
        }
        for (std::size_t ci : coords) {
            const double orig = leaf.data[ci];
            leaf.data[ci] = orig + eps;
            const double fp = f()->data[0];
            leaf.data[ci] = orig - eps;
            const double fm = f()->data[0];
            leaf.data[ci] = orig;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[li][ci];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            const double rel = std::fabs(a - numeric) / denom;
            if (rel > res.max_rel_err) res.max_rel_err = rel;
            ++res.coords_checked;
        }
    }
    return res;
}

}  // namespace jf
