#include "jf/block.hpp"

#include <algorithm>
#include <cmath>

namespace jf {

PropagationMode mode_from_string(const std::string& s) {
    if (s == "a") return PropagationMode::a;
    if (s == "b") return PropagationMode::b;
    if (s == "c") return PropagationMode::c;
    if (s == "d") return PropagationMode::d;
    throw ConfigError("propagation mode must be one of a|b|c|d, got '" + s + "'");
}

std::string mode_to_string(PropagationMode m) {
    switch (m) {
        case PropagationMode::a: return "a";
        case PropagationMode::b: return "b";
        case PropagationMode::c: return "c";
        case PropagationMode::d: return "d";
    }
    return "?";
}

TokenLayout TokenLayout::build(bool has_memory, const std::vector<int>& ref_lens, int cur_len) {
    TokenLayout ly;
    ly.has_memory = has_memory;
    int pos = has_memory ? 1 : 0;
    for (int len : ref_lens) {
        ly.ref_spans.emplace_back(pos, len);
        pos += len;
    }
    ly.cur_span = {pos, cur_len};
    ly.total = pos + cur_len;
    ly.validate();
    return ly;
}

void TokenLayout::validate() const {
    int pos = has_memory ? 1 : 0;
    for (const auto& [start, len] : ref_spans) {
        if (start != pos || len <= 0) throw ShapeError("TokenLayout: reference spans must be contiguous and non-empty");
        pos += len;
    }
    if (cur_span.first != pos || cur_span.second <= 0 || cur_span.first + cur_span.second != total) {
        throw ShapeError("TokenLayout: current span must close the sequence");
    }
}

namespace {

void allow_span(BoolMat& m, int row, std::pair<int, int> span) {
    for (int j = span.first; j < span.first + span.second; ++j) m.at(row, j) = 1;
}

}  // namespace

BoolMat build_layout_mask(const TokenLayout& layout, PropagationMode mode) {
    layout.validate();
    BoolMat m(layout.total, layout.total, 0);

    if (layout.has_memory) {
        m.at(0, 0) = 1;
        for (const auto& span : layout.ref_spans) allow_span(m, 0, span);
    }

    const bool refs_see_refs = (mode == PropagationMode::a || mode == PropagationMode::b);
    const bool refs_see_cur = (mode == PropagationMode::a || mode == PropagationMode::c);
    for (std::size_t i = 0; i < layout.ref_spans.size(); ++i) {
        const auto& span = layout.ref_spans[i];
        for (int q = span.first; q < span.first + span.second; ++q) {
            allow_span(m, q, span);
            if (refs_see_refs) {
                for (std::size_t j = 0; j < layout.ref_spans.size(); ++j) {
                    if (j != i) allow_span(m, q, layout.ref_spans[j]);
                }
            }
            if (refs_see_cur) allow_span(m, q, layout.cur_span);
        }
    }

    for (int q = layout.cur_span.first; q < layout.cur_span.first + layout.cur_span.second; ++q) {
        for (const auto& span : layout.ref_spans) allow_span(m, q, span);
        allow_span(m, q, layout.cur_span);
    }
    return m;
}

BoolMat build_own_span_mask(const TokenLayout& layout) {
    layout.validate();
    BoolMat m(layout.total, layout.total, 0);
    if (layout.has_memory) m.at(0, 0) = 1;
    for (const auto& span : layout.ref_spans) {
        for (int q = span.first; q < span.first + span.second; ++q) allow_span(m, q, span);
    }
    for (int q = layout.cur_span.first; q < layout.cur_span.first + layout.cur_span.second; ++q) {
        allow_span(m, q, layout.cur_span);
    }
    return m;
}

std::vector<std::uint8_t> topk_filter(const std::vector<double>& logits_row,
                                      const std::vector<std::uint8_t>& allowed_row,
                                      const TokenLayout& layout, int k) {
    if (k <= 0) throw ConfigError("topk_filter: K must be >= 1");
    if (logits_row.size() != static_cast<std::size_t>(layout.total) || allowed_row.size() != logits_row.size()) {
        throw ShapeError("topk_filter: row length does not match layout");
    }
    std::vector<std::uint8_t> out = allowed_row;
    // candidate reference-key positions
    std::vector<int> refs;
    for (const auto& [start, len] : layout.ref_spans) {
        for (int j = start; j < start + len; ++j) {
            if (allowed_row[static_cast<std::size_t>(j)]) refs.push_back(j);
        }
    }
    if (static_cast<int>(refs.size()) <= k) return out;
    // order by logit descending, ties by lowest index (refs is index-sorted,
    // so stable_sort keeps the lower index first on equal logits)
    std::stable_sort(refs.begin(), refs.end(), [&](int a, int b) {
        return logits_row[static_cast<std::size_t>(a)] > logits_row[static_cast<std::size_t>(b)];
    });
    for (std::size_t i = static_cast<std::size_t>(k); i < refs.size(); ++i) {
        out[static_cast<std::size_t>(refs[i])] = 0;
    }
    return out;
}

BlockWeights make_block_weights(int dim, int mlp_ratio, Rng& rng, double stddev) {
    BlockWeights w;
    w.wq = Tensor::param({dim, dim}, rng, stddev);
    w.wk = Tensor::param({dim, dim}, rng, stddev);
    w.wv = Tensor::param({dim, dim}, rng, stddev);
    w.wo = Tensor::param({dim, dim}, rng, stddev);
    w.ln1_g = Tensor::full({dim}, 1.0);
    w.ln1_g->requires_grad = true;
    w.ln1_b = Tensor::make({dim}, true);
    w.ln2_g = Tensor::full({dim}, 1.0);
    w.ln2_g->requires_grad = true;
    w.ln2_b = Tensor::make({dim}, true);
    w.mlp_w1 = Tensor::param({dim, dim * mlp_ratio}, rng, stddev);
    w.mlp_b1 = Tensor::make({dim * mlp_ratio}, true);
    w.mlp_w2 = Tensor::param({dim * mlp_ratio, dim}, rng, stddev);
    w.mlp_b2 = Tensor::make({dim}, true);
    return w;
}

namespace {

// Shared attention body over an arbitrary mask. When topk_ctx is present the
// mask of each current-query row is additionally filtered by the row's
// reference logits before softmax.
struct TopKContext {
    const TokenLayout* layout = nullptr;
    int k = 0;
};

TensorPtr attention(const TensorPtr& normed, const BoolMat& allowed, const BlockWeights& w, int heads,
                    const TopKContext* topk_ctx, AttnCapture* capture) {
    const int n = normed->dim(0);
    const int dim = normed->dim(1);
    if (dim % heads != 0) throw ShapeError("attention: dim " + std::to_string(dim) + " not divisible by heads");
    const int dh = dim / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    TensorPtr q = matmul(normed, w.wq);
    TensorPtr k = matmul(normed, w.wk);
    TensorPtr v = matmul(normed, w.wv);

    if (capture) {
        capture->head_probs.assign(static_cast<std::size_t>(heads), {});
        capture->rows = n;
        capture->cols = n;
    }

    std::vector<TensorPtr> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    for (int hidx = 0; hidx < heads; ++hidx) {
        TensorPtr qh = slice_cols(q, hidx * dh, dh);
        TensorPtr kh = slice_cols(k, hidx * dh, dh);
        TensorPtr vh = slice_cols(v, hidx * dh, dh);
        TensorPtr logits = scale_by(matmul(qh, transpose2d(kh)), scale);

        const BoolMat* mask = &allowed;
        BoolMat filtered;
        if (topk_ctx) {
            const TokenLayout& ly = *topk_ctx->layout;
            filtered = allowed;
            std::vector<double> row(static_cast<std::size_t>(ly.total));
            std::vector<std::uint8_t> arow(static_cast<std::size_t>(ly.total));
            for (int qi = ly.cur_span.first; qi < ly.cur_span.first + ly.cur_span.second; ++qi) {
                for (int j = 0; j < ly.total; ++j) {
                    row[static_cast<std::size_t>(j)] = logits->at(qi, j);
                    arow[static_cast<std::size_t>(j)] = allowed.at(qi, j);
                }
                const auto kept = topk_filter(row, arow, ly, topk_ctx->k);
                for (int j = 0; j < ly.total; ++j) filtered.at(qi, j) = kept[static_cast<std::size_t>(j)];
            }
            mask = &filtered;
        }

        TensorPtr probs = masked_softmax_rows(logits, *mask);
        if (capture) capture->head_probs[static_cast<std::size_t>(hidx)] = probs->data;
        head_outs.push_back(matmul(probs, vh));
    }
    TensorPtr merged = heads == 1 ? head_outs[0] : concat_cols(head_outs);
    return matmul(merged, w.wo);
}

TensorPtr mlp(const TensorPtr& x, const BlockWeights& w) {
    TensorPtr h = gelu(add_rowvec(matmul(x, w.mlp_w1), w.mlp_b1));
    return add_rowvec(matmul(h, w.mlp_w2), w.mlp_b2);
}

TensorPtr residual_block(const TensorPtr& tokens, const BoolMat& allowed, const BlockWeights& w, int heads,
                         double ln_eps, const TopKContext* topk_ctx, AttnCapture* capture) {
    TensorPtr x1 = layer_norm(tokens, w.ln1_g, w.ln1_b, ln_eps);
    TensorPtr h = add(tokens, attention(x1, allowed, w, heads, topk_ctx, capture));
    TensorPtr x2 = layer_norm(h, w.ln2_g, w.ln2_b, ln_eps);
    return add(h, mlp(x2, w));
}

}  // namespace

TensorPtr block_forward(const TensorPtr& tokens, const TokenLayout& layout, PropagationMode mode,
                        const BlockWeights& w, const BlockOptions& opt) {
    if (tokens->rank() != 2 || tokens->dim(0) != layout.total) {
        throw ShapeError("block_forward: tokens " + shape_str(tokens->shape) + " vs layout total " +
                         std::to_string(layout.total));
    }
    BoolMat allowed = opt.joint ? build_layout_mask(layout, mode) : build_own_span_mask(layout);
    if (layout.has_memory && !opt.memory_sees_refs) {
        for (int j = 1; j < layout.total; ++j) allowed.at(0, j) = 0;
    }
    TopKContext ctx;
    const TopKContext* ctxp = nullptr;
    if (opt.topk > 0) {
        ctx.layout = &layout;
        ctx.k = opt.topk;
        ctxp = &ctx;
    }
    return residual_block(tokens, allowed, w, opt.heads, opt.ln_eps, ctxp, opt.capture);
}

TensorPtr masked_block_forward(const TensorPtr& tokens, const BoolMat& allowed, const BlockWeights& w,
                               int heads, double ln_eps, AttnCapture* capture) {
    if (tokens->rank() != 2 || tokens->dim(0) != allowed.rows || allowed.rows != allowed.cols) {
        throw ShapeError("masked_block_forward: tokens " + shape_str(tokens->shape) + " vs mask " +
                         std::to_string(allowed.rows) + "x" + std::to_string(allowed.cols));
    }
    return residual_block(tokens, allowed, w, heads, ln_eps, nullptr, capture);
}

}  // namespace jf
