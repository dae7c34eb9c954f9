#pragma once

// Joint modeling block: masked multi-head attention over the concatenated
// [memory; reference frames...; current] token sequence, realizing the four
// propagation modes plus the memory-token visibility row. The masking is
// additive (-inf on disallowed logits, applied inside masked softmax), which
// is equivalent to per-group key/value lists but shares one attention call.

#include <optional>
#include <string>
#include <vector>

#include "jf/tensor.hpp"

namespace jf {

enum class PropagationMode { a, b, c, d };
PropagationMode mode_from_string(const std::string& s);
std::string mode_to_string(PropagationMode m);

struct TokenLayout {
    bool has_memory = false;
    std::vector<std::pair<int, int>> ref_spans;  // (start, len) per reference frame
    std::pair<int, int> cur_span{0, 0};
    int total = 0;

    // Spans are fixed to the order [memory; refs...; current].
    static TokenLayout build(bool has_memory, const std::vector<int>& ref_lens, int cur_len);
    void validate() const;
};

// Visibility rules:
//   current queries  -> all reference tokens + current tokens (every mode)
//   reference i      -> own span, plus other refs in modes a/b, plus current in modes a/c
//   memory query     -> all reference tokens + itself
//   nothing but the memory token itself may attend to the memory column
BoolMat build_layout_mask(const TokenLayout& layout, PropagationMode mode);

// Downgraded block used by the block-location ablation: every span attends
// to its own span only.
BoolMat build_own_span_mask(const TokenLayout& layout);

// Keeps the K largest reference-key logits of one current-query row, disabling
// the rest; non-reference positions pass through. Ties broken toward the
// lowest key index. Returns the surviving-allowed flags for the row.
std::vector<std::uint8_t> topk_filter(const std::vector<double>& logits_row,
                                      const std::vector<std::uint8_t>& allowed_row,
                                      const TokenLayout& layout, int k);

struct BlockWeights {
    TensorPtr wq, wk, wv, wo;          // [D, D]
    TensorPtr ln1_g, ln1_b, ln2_g, ln2_b;  // [D]
    TensorPtr mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

BlockWeights make_block_weights(int dim, int mlp_ratio, Rng& rng, double stddev);

// Per-head softmax attention probabilities captured for diagnostics.
struct AttnCapture {
    std::vector<std::vector<double>> head_probs;  // [heads][rows*cols]
    int rows = 0, cols = 0;
};

struct BlockOptions {
    int heads = 4;
    double ln_eps = 1e-6;
    int topk = 0;              // 0 = no filtering
    bool joint = true;         // false = own-span-only mask (location ablation)
    bool memory_sees_refs = true;  // training-time stochastic gate
    AttnCapture* capture = nullptr;
};

// Pre-norm block: x + MHA(LN(x)) followed by x + MLP(LN(x)).
TensorPtr block_forward(const TensorPtr& tokens, const TokenLayout& layout, PropagationMode mode,
                        const BlockWeights& w, const BlockOptions& opt);

// Same residual structure over an arbitrary visibility mask (memory update
// blocks reuse this with their own masks).
TensorPtr masked_block_forward(const TensorPtr& tokens, const BoolMat& allowed, const BlockWeights& w,
                               int heads, double ln_eps, AttnCapture* capture = nullptr);

}  // namespace jf
