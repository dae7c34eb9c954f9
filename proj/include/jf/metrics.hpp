#pragma once

// Region similarity J (IoU), boundary accuracy F, and sequence evaluation
// under the DAVIS convention (first annotated frame excluded from scoring,
// boundary tolerance 0.008 of the image diagonal).

#include <cstdint>
#include <string>
#include <vector>

namespace jf {

struct Mask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> v;  // 0/1

    bool at(int y, int x) const { return v[static_cast<std::size_t>(y) * width + x] != 0; }
};

using LabelMap = Mask;  // values are target ids, 0 = background

Mask mask_from_label(const LabelMap& labels, std::uint8_t id);

double region_j(const Mask& pred, const Mask& gt);
double boundary_f(const Mask& pred, const Mask& gt, double tol_frac = 0.008);

// 4-connectivity boundary: foreground pixels with a non-foreground (or
// out-of-image) 4-neighbor. Exposed for the brute-force oracle tests.
Mask boundary_of(const Mask& m);

struct TargetScore {
    int target_id = 0;
    double j = 0.0;
    double f = 0.0;
    double jf = 0.0;
};

struct EvalReport {
    std::vector<TargetScore> targets;
    double mean_j = 0.0, mean_f = 0.0, mean_jf = 0.0;
    std::vector<int> unscored_labels;  // present in gt but absent from the frame-0 annotation
};

EvalReport evaluate(const std::vector<LabelMap>& pred, const std::vector<LabelMap>& gt,
                    bool exclude_first = true);

}  // namespace jf
