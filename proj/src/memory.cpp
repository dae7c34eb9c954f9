#include "jf/memory.hpp"

#include <cmath>

namespace jf {

std::vector<CompressedMemoryState> init_state(int n_targets, const TensorPtr& init_token) {
    if (n_targets < 1) throw ConfigError("init_state: need at least one target");
    if (init_token->rank() != 2 || init_token->dim(0) != 1) {
        throw ShapeError("init_state: initial token must be [1, D], got " + shape_str(init_token->shape));
    }
    std::vector<CompressedMemoryState> states;
    states.reserve(static_cast<std::size_t>(n_targets));
    for (int i = 0; i < n_targets; ++i) {
        // independent graph node per target; all alias the learned leaf values
        states.push_back({add(init_token, Tensor::zeros(init_token->shape))});
    }
    return states;
}

TensorPtr update_with_decoder_tokens(const TensorPtr& state, const TensorPtr& dec,
                                     const std::vector<BlockWeights>& blocks, int heads, double ln_eps) {
    if (state->rank() != 2 || state->dim(0) != 1 || dec->rank() != 2 || dec->dim(1) != state->dim(1)) {
        throw ShapeError("update_with_decoder_tokens: state " + shape_str(state->shape) + " vs dec " +
                         shape_str(dec->shape));
    }
    const int total = 1 + dec->dim(0);
    BoolMat allowed(total, total, 0);
    for (int j = 0; j < total; ++j) allowed.at(0, j) = 1;  // memory row: dec + itself
    for (int i = 1; i < total; ++i) {
        for (int j = 1; j < total; ++j) allowed.at(i, j) = 1;  // dec rows: dec only
    }
    TensorPtr seq = concat0({state, dec});
    for (const auto& w : blocks) {
        seq = masked_block_forward(seq, allowed, w, heads, ln_eps);
    }
    return slice0(seq, 0, 1);
}

TensorPtr enhance_current(const TensorPtr& cur, const TensorPtr& memory_token, const BlockWeights& w,
                          int heads, double ln_eps, TensorPtr* gates_out) {
    if (cur->rank() != 2 || memory_token->rank() != 2 || memory_token->dim(0) != 1 ||
        cur->dim(1) != memory_token->dim(1)) {
        throw ShapeError("enhance_current: cur " + shape_str(cur->shape) + " vs memory " +
                         shape_str(memory_token->shape));
    }
    const int dim = cur->dim(1);
    if (dim % heads != 0) throw ShapeError("enhance_current: dim not divisible by heads");
    const int dh = dim / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    TensorPtr x1 = layer_norm(cur, w.ln1_g, w.ln1_b, ln_eps);
    TensorPtr m1 = layer_norm(memory_token, w.ln1_g, w.ln1_b, ln_eps);
    TensorPtr q = matmul(x1, w.wq);
    TensorPtr k = matmul(m1, w.wk);  // [1, D]
    TensorPtr v = matmul(m1, w.wv);

    std::vector<TensorPtr> head_outs;
    std::vector<TensorPtr> head_gates;
    head_outs.reserve(static_cast<std::size_t>(heads));
    for (int hidx = 0; hidx < heads; ++hidx) {
        TensorPtr qh = slice_cols(q, hidx * dh, dh);
        TensorPtr kh = slice_cols(k, hidx * dh, dh);
        TensorPtr vh = slice_cols(v, hidx * dh, dh);
        TensorPtr gate = sigmoid(scale_by(matmul(qh, transpose2d(kh)), scale));  // [N, 1]
        head_outs.push_back(matmul(gate, vh));                                  // [N, dh]
        if (gates_out) head_gates.push_back(gate);
    }
    if (gates_out) {
        TensorPtr sum = head_gates[0];
        for (std::size_t i = 1; i < head_gates.size(); ++i) sum = add(sum, head_gates[i]);
        *gates_out = scale_by(sum, 1.0 / heads);
    }
    TensorPtr merged = heads == 1 ? head_outs[0] : concat_cols(head_outs);
    TensorPtr h = add(cur, matmul(merged, w.wo));
    TensorPtr x2 = layer_norm(h, w.ln2_g, w.ln2_b, ln_eps);
    TensorPtr mlp_h = gelu(add_rowvec(matmul(x2, w.mlp_w1), w.mlp_b1));
    return add(h, add_rowvec(matmul(mlp_h, w.mlp_w2), w.mlp_b2));
}

}  // namespace jf
