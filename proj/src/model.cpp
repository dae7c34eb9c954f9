#include "jf/model.hpp"

namespace jf {

void ModelConfig::validate() const {
    if (patch < 1 || dim < 1 || heads < 1 || depth < 1 || mlp_ratio < 1) {
        throw ConfigError("model: patch/dim/heads/depth/mlp_ratio must be positive");
    }
    if (dim % heads != 0) throw ConfigError("model: dim must be divisible by heads");
    if (mem_update_depth < 1 || mem_update_depth > 3) {
        throw ConfigError("model: mem_update_depth must be 1..3");
    }
    if (train_height % patch != 0 || train_width % patch != 0) {
        throw ConfigError("model: training size must be divisible by the patch size");
    }
    if (!joint_blocks.empty() && static_cast<int>(joint_blocks.size()) != depth) {
        throw ConfigError("model: joint_blocks must have one flag per block");
    }
}

ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams p;
    p.cfg = cfg;
    Rng rng(mix_seed(seed, 0x6d6f64656cULL));
    const double sd = cfg.init_stddev;
    p.embed = make_embed_params(cfg.patch, cfg.dim, cfg.train_height / cfg.patch, cfg.train_width / cfg.patch,
                                rng, sd);
    for (int i = 0; i < cfg.depth; ++i) p.blocks.push_back(make_block_weights(cfg.dim, cfg.mlp_ratio, rng, sd));
    p.memory_init = Tensor::param({1, cfg.dim}, rng, sd);
    for (int i = 0; i < cfg.mem_update_depth; ++i) {
        p.mem_update.push_back(make_block_weights(cfg.dim, cfg.mlp_ratio, rng, sd));
    }
    p.enhance = make_block_weights(cfg.dim, cfg.mlp_ratio, rng, sd);
    p.decoder = make_decoder_params(cfg.dim, rng, sd);
    p.register_entries();
    return p;
}

namespace {

void add_block(std::vector<ParamEntry>& entries, const std::string& prefix, const BlockWeights& w, bool backbone) {
    entries.push_back({prefix + ".wq", w.wq, backbone});
    entries.push_back({prefix + ".wk", w.wk, backbone});
    entries.push_back({prefix + ".wv", w.wv, backbone});
    entries.push_back({prefix + ".wo", w.wo, backbone});
    entries.push_back({prefix + ".ln1_g", w.ln1_g, backbone});
    entries.push_back({prefix + ".ln1_b", w.ln1_b, backbone});
    entries.push_back({prefix + ".ln2_g", w.ln2_g, backbone});
    entries.push_back({prefix + ".ln2_b", w.ln2_b, backbone});
    entries.push_back({prefix + ".mlp_w1", w.mlp_w1, backbone});
    entries.push_back({prefix + ".mlp_b1", w.mlp_b1, backbone});
    entries.push_back({prefix + ".mlp_w2", w.mlp_w2, backbone});
    entries.push_back({prefix + ".mlp_b2", w.mlp_b2, backbone});
}

}  // namespace

void ModelParams::register_entries() {
    entries.clear();
    entries.push_back({"embed.proj_ref", embed.proj_ref, true});
    entries.push_back({"embed.proj_cur", embed.proj_cur, true});
    entries.push_back({"embed.pos_ref", embed.pos_ref, true});
    entries.push_back({"embed.pos_cur", embed.pos_cur, true});
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        add_block(entries, "block." + std::to_string(i), blocks[i], true);
    }
    entries.push_back({"memory.init", memory_init, false});
    for (std::size_t i = 0; i < mem_update.size(); ++i) {
        add_block(entries, "mem_update." + std::to_string(i), mem_update[i], false);
    }
    add_block(entries, "enhance", enhance, false);
    const DecoderParams& d = decoder;
    auto dp = [&](const char* name, const TensorPtr& t) { entries.push_back({std::string("decoder.") + name, t, false}); };
    dp("skip_reduce_w", d.skip_reduce_w);
    dp("skip_reduce_b", d.skip_reduce_b);
    dp("skip_up_w", d.skip_up_w);
    dp("skip_up_b", d.skip_up_b);
    dp("fuse_w", d.fuse_w);
    dp("fuse_b", d.fuse_b);
    dp("reduce_w", d.reduce_w);
    dp("reduce_b", d.reduce_b);
    dp("proj16_w", d.proj16_w);
    dp("proj16_b", d.proj16_b);
    dp("proj8_w", d.proj8_w);
    dp("proj8_b", d.proj8_b);
    dp("proj4_w", d.proj4_w);
    dp("proj4_b", d.proj4_b);
    dp("up8_w", d.up8_w);
    dp("up8_b", d.up8_b);
    dp("up4_w", d.up4_w);
    dp("up4_b", d.up4_b);
    dp("head_w", d.head_w);
    dp("head_b", d.head_b);
    dp("dtok16_w", d.dtok16_w);
    dp("dtok16_b", d.dtok16_b);
    dp("dtok8_w", d.dtok8_w);
    dp("dtok8_b", d.dtok8_b);
    dp("dtok4_w", d.dtok4_w);
    dp("dtok4_b", d.dtok4_b);
}

const TensorPtr& ModelParams::find(const std::string& name) const {
    for (const auto& e : entries) {
        if (e.name == name) return e.tensor;
    }
    throw ConfigError("model: unknown parameter '" + name + "'");
}

FrameForward frame_forward(const ModelParams& params, const TensorPtr& cur,
                           const std::vector<TensorPtr>& refs, const TensorPtr& memory_state,
                           const ForwardOptions& opt) {
    const ModelConfig& cfg = params.cfg;
    if (cur->rank() != 3 || cur->dim(0) != 3) {
        throw ShapeError("frame_forward: current frame must be [3, H, W], got " + shape_str(cur->shape));
    }
    if (refs.empty()) throw ConfigError("frame_forward: need at least one reference pair");
    const int h = cur->dim(1), w = cur->dim(2);
    if (h % cfg.patch != 0 || w % cfg.patch != 0) {
        throw ShapeError("frame_forward: input size not divisible by patch");
    }
    const int gh = h / cfg.patch, gw = w / cfg.patch;
    const int n_cur = gh * gw;

    const bool memory_on = cfg.use_memory;
    if (memory_on && (!memory_state || memory_state->dim(1) != cfg.dim)) {
        throw ShapeError("frame_forward: memory enabled but no [1, D] state given");
    }

    std::vector<TensorPtr> seq_parts;
    std::vector<int> ref_lens;
    if (memory_on) seq_parts.push_back(memory_state);
    for (const auto& ref : refs) {
        if (ref->rank() != 3 || ref->dim(0) != 4 || ref->dim(1) != h || ref->dim(2) != w) {
            throw ShapeError("frame_forward: reference pair must be [4, H, W], got " + shape_str(ref->shape));
        }
        TensorPtr tokens = embed_tokens(patchify(ref, cfg.patch), params.embed, TokenKind::reference, gh, gw);
        seq_parts.push_back(tokens);
        ref_lens.push_back(tokens->dim(0));
    }
    TensorPtr cur_tokens0 = embed_tokens(patchify(cur, cfg.patch), params.embed, TokenKind::current, gh, gw);
    seq_parts.push_back(cur_tokens0);

    const TokenLayout layout = TokenLayout::build(memory_on, ref_lens, n_cur);
    TensorPtr seq = concat0(seq_parts);

    FrameForward out;
    for (int i = 0; i < cfg.depth; ++i) {
        BlockOptions bopt;
        bopt.heads = cfg.heads;
        bopt.ln_eps = cfg.ln_eps;
        bopt.topk = opt.topk;
        bopt.joint = cfg.block_is_joint(i);
        bopt.memory_sees_refs = opt.memory_sees_refs;
        AttnCapture cap;
        bopt.capture = opt.capture_attn ? &cap : nullptr;
        seq = block_forward(seq, layout, opt.mode, params.blocks[static_cast<std::size_t>(i)], bopt);
        if (opt.capture_attn) out.attn.push_back(std::move(cap));
    }

    TensorPtr cur_out = slice0(seq, layout.cur_span.first, layout.cur_span.second);
    TensorPtr enhanced;
    TensorPtr mem_out;
    if (memory_on) {
        mem_out = slice0(seq, 0, 1);
        TensorPtr gates;
        enhanced = enhance_current(cur_out, mem_out, params.enhance, cfg.heads, cfg.ln_eps, &gates);
        out.gates = gates;
    } else {
        enhanced = Tensor::zeros({n_cur, cfg.dim});
    }

    SkipFeatures skips = make_skips(cur_out, gh, gw, params.decoder);
    DecodeResult dec = decode(cur_out, enhanced, skips, gh, gw, h, w, params.decoder);
    out.logits = dec.logits;
    out.probs = sigmoid(dec.logits);
    out.decoder_tokens = make_decoder_tokens(dec.internals, dec.logits, gh, gw, params.decoder);
    if (memory_on) {
        out.new_memory = update_with_decoder_tokens(mem_out, out.decoder_tokens, params.mem_update,
                                                    cfg.heads, cfg.ln_eps);
    }
    return out;
}

}  // namespace jf
