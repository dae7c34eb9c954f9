#pragma once

// Deterministic moving-shapes video generator. Rasterization rules (fixed so
// masks are pixel-exact and reproducible):
//   - a pixel (x, y) belongs to a shape iff its center (x+0.5, y+0.5) lies
//     inside the analytic shape (boundary inclusive);
//   - rect: |px-cx| <= ax and |py-cy| <= ay;
//   - circle: (px-cx)^2 + (py-cy)^2 <= r^2;
//   - triangle (up-pointing isosceles): vertices (cx, cy-s),
//     (cx-0.9s, cy+0.8s), (cx+0.9s, cy+0.8s), half-plane tests inclusive;
//   - draw order: background, distractors, then targets by index; the last
//     shape drawn owns the pixel, so the front target wins occlusions;
//   - per-frame size s(t) = s0 * (1 + amp * sin(2*pi*freq*t + phase));
//   - linear motion with wall bounce at a fixed per-shape margin.
// Frames are quantized to 8-bit on generation, so PPM round trips are exact.

#include <cstdint>
#include <string>
#include <vector>

#include "jf/metrics.hpp"
#include "jf/netpbm.hpp"
#include "jf/tensor.hpp"

namespace jf {

struct VideoData {
    std::vector<ImageU8> frames;   // RGB
    std::vector<LabelMap> labels;  // 0 background, i = target i
    int n_targets = 0;
};

struct GenConfig {
    int width = 64;
    int height = 64;
    int frames = 30;
    int min_targets = 2;
    int max_targets = 2;
    int distractors = 1;   // share target colors, never labeled
    double min_half = 6.0;
    double max_half = 11.0;
    double min_speed = 0.6;
    double max_speed = 2.0;
    double deform_amp = 0.12;
    double deform_freq = 0.18;

    // zero motion and zero deformation: every frame equals frame 0
    GenConfig static_scene() const {
        GenConfig c = *this;
        c.min_speed = c.max_speed = 0.0;
        c.deform_amp = 0.0;
        return c;
    }
};

struct SyntheticVideo {
    std::uint64_t seed = 0;
    VideoData data;
};

SyntheticVideo gen_synthetic_video(std::uint64_t seed, const GenConfig& cfg);

// Built-in dataset: video i is generated from mix_seed(base_seed, index_offset + i).
std::vector<SyntheticVideo> gen_dataset(std::uint64_t base_seed, int count, int index_offset,
                                        const GenConfig& cfg);

// ---- tensor bridging ----
TensorPtr frame_to_tensor(const ImageU8& frame);                 // [3, H, W], values /255
TensorPtr binary_mask_tensor(const LabelMap& labels, int id);    // [1, H, W] in {0, 1}
TensorPtr ref_pair_tensor(const TensorPtr& frame, const TensorPtr& mask);  // [4, H, W]

// ---- dataset directories (video_xxx/frames/%05d.ppm, video_xxx/masks/%05d.pgm) ----
void write_video_dir(const std::string& dir, const VideoData& v);
VideoData read_video_dir(const std::string& dir, bool require_all_masks);
std::vector<std::string> list_video_dirs(const std::string& root);

}  // namespace jf
