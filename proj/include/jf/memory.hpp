#pragma once

// Per-target compressed memory: a single [1, D] token carried across the
// frames of one video. Updated after each decoded frame by attention blocks
// over [memory; decoder tokens], and used to gate-enhance the current tokens
// with sigmoid attention (one key, so softmax would be a constant 1).

#include "jf/block.hpp"

namespace jf {

struct CompressedMemoryState {
    TensorPtr token;  // [1, D]
};

// Every target starts from its own copy of the shared learned initial token.
std::vector<CompressedMemoryState> init_state(int n_targets, const TensorPtr& init_token);

// Runs the update blocks over [state; dec]: the memory row attends to
// everything, decoder-token rows attend to decoder tokens only. Returns the
// new memory token.
TensorPtr update_with_decoder_tokens(const TensorPtr& state, const TensorPtr& dec,
                                     const std::vector<BlockWeights>& blocks, int heads, double ln_eps);

// Sigmoid target enhancement. Per current token and head:
//   gate = sigmoid(q . k_mem / sqrt(dh)),  out = gate * v_mem
// then output projection, residual, and the MLP half of the block. Gates are
// independent per token (no normalization across tokens). If gates_out is
// given it receives the per-token gate values averaged over heads ([N, 1]).
TensorPtr enhance_current(const TensorPtr& cur, const TensorPtr& memory_token, const BlockWeights& w,
                          int heads, double ln_eps, TensorPtr* gates_out = nullptr);

}  // namespace jf
