#pragma once

// Whole-model assembly: parameters, the named parameter registry used by the
// optimizer and checkpoints, and the per-target single-frame forward pass
// (tokenize -> joint blocks -> enhancement -> decode -> decoder tokens ->
// memory update).

#include <string>
#include <vector>

#include "jf/block.hpp"
#include "jf/decoder.hpp"
#include "jf/embed.hpp"
#include "jf/memory.hpp"

namespace jf {

struct ModelConfig {
    int patch = 8;
    int dim = 64;
    int heads = 4;
    int depth = 4;
    int mlp_ratio = 4;
    int mem_update_depth = 2;  // 1..3 per the compressed-memory ablation
    bool use_memory = true;
    int train_height = 64, train_width = 64;
    double ln_eps = 1e-6;
    double init_stddev = 0.02;
    // empty = every block is a joint block; otherwise one flag per block
    // (false = feature extraction only, own-span attention)
    std::vector<std::uint8_t> joint_blocks;

    void validate() const;
    bool block_is_joint(int i) const {
        return joint_blocks.empty() || joint_blocks[static_cast<std::size_t>(i)] != 0;
    }
};

// Named trainable leaves. Backbone entries (embeddings + joint blocks) train
// at a reduced learning rate, mirroring the pretrained-backbone split.
struct ParamEntry {
    std::string name;
    TensorPtr tensor;
    bool backbone = false;
};

struct ModelParams {
    ModelConfig cfg;
    EmbedParams embed;
    std::vector<BlockWeights> blocks;
    TensorPtr memory_init;  // [1, D]
    std::vector<BlockWeights> mem_update;
    BlockWeights enhance;
    DecoderParams decoder;

    std::vector<ParamEntry> entries;  // stable registration order

    static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);
    void register_entries();
    const TensorPtr& find(const std::string& name) const;
};

struct FrameForward {
    TensorPtr logits;          // [1, H, W] pre-sigmoid
    TensorPtr probs;           // [1, H, W] = sigmoid(logits)
    TensorPtr new_memory;      // [1, D] after the decoder-token update (null if memory off)
    TensorPtr decoder_tokens;  // [N, D]
    TensorPtr gates;           // [N, 1] enhancement gates (null if memory off)
    std::vector<AttnCapture> attn;  // per block, only when capture_attn
};

struct ForwardOptions {
    PropagationMode mode = PropagationMode::d;
    int topk = 0;                  // 0 = unfiltered
    bool memory_sees_refs = true;  // training-time coin; always true at inference
    bool capture_attn = false;
};

// One target, one frame. cur is [3, H, W]; each reference is the 4-channel
// frame+mask pair [4, H, W]. H and W may differ from the training size, in
// which case positional embeddings are interpolated to the actual grid.
FrameForward frame_forward(const ModelParams& params, const TensorPtr& cur,
                           const std::vector<TensorPtr>& refs, const TensorPtr& memory_state,
                           const ForwardOptions& opt);

}  // namespace jf
