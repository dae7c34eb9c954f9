#include "jf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "jf/common.hpp"

namespace jf {

namespace {

void require_same_size(const Mask& a, const Mask& b, const char* op) {
    if (a.height != b.height || a.width != b.width) {
        throw ShapeError(std::string(op) + ": mask sizes differ (" + std::to_string(a.height) + "x" +
                         std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                         std::to_string(b.width) + ")");
    }
}

// Dilate by a Euclidean disk of the given radius.
Mask dilate(const Mask& m, int radius) {
    Mask out{m.height, m.width, std::vector<std::uint8_t>(m.v.size(), 0)};
    const int r2 = radius * radius;
    for (int y = 0; y < m.height; ++y) {
        for (int x = 0; x < m.width; ++x) {
            if (!m.at(y, x)) continue;
            for (int dy = -radius; dy <= radius; ++dy) {
                for (int dx = -radius; dx <= radius; ++dx) {
                    if (dy * dy + dx * dx > r2) continue;
                    const int ny = y + dy, nx = x + dx;
                    if (ny < 0 || ny >= m.height || nx < 0 || nx >= m.width) continue;
                    out.v[static_cast<std::size_t>(ny) * m.width + nx] = 1;
                }
            }
        }
    }
    return out;
}

std::size_t count(const Mask& m) {
    std::size_t n = 0;
    for (auto v : m.v) n += (v != 0);
    return n;
}

}  // namespace

Mask mask_from_label(const LabelMap& labels, std::uint8_t id) {
    Mask m{labels.height, labels.width, std::vector<std::uint8_t>(labels.v.size(), 0)};
    for (std::size_t i = 0; i < labels.v.size(); ++i) m.v[i] = (labels.v[i] == id) ? 1 : 0;
    return m;
}

double region_j(const Mask& pred, const Mask& gt) {
    require_same_size(pred, gt, "region_j");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.v.size(); ++i) {
        const bool p = pred.v[i] != 0, g = gt.v[i] != 0;
        inter += (p && g);
        uni += (p || g);
    }
    if (uni == 0) return 1.0;  // both empty
    return static_cast<double>(inter) / static_cast<double>(uni);
}

Mask boundary_of(const Mask& m) {
    Mask out{m.height, m.width, std::vector<std::uint8_t>(m.v.size(), 0)};
    for (int y = 0; y < m.height; ++y) {
        for (int x = 0; x < m.width; ++x) {
            if (!m.at(y, x)) continue;
            const bool edge = (y == 0 || !m.at(y - 1, x)) || (y == m.height - 1 || !m.at(y + 1, x)) ||
                              (x == 0 || !m.at(y, x - 1)) || (x == m.width - 1 || !m.at(y, x + 1));
            if (edge) out.v[static_cast<std::size_t>(y) * m.width + x] = 1;
        }
    }
    return out;
}

double boundary_f(const Mask& pred, const Mask& gt, double tol_frac) {
    require_same_size(pred, gt, "boundary_f");
    const Mask pb = boundary_of(pred);
    const Mask gb = boundary_of(gt);
    const std::size_t np = count(pb), ng = count(gb);
    if (np == 0 && ng == 0) return 1.0;
    if (np == 0 || ng == 0) return 0.0;

    const double diag = std::sqrt(static_cast<double>(pred.height) * pred.height +
                                  static_cast<double>(pred.width) * pred.width);
    const int radius = static_cast<int>(std::ceil(tol_frac * diag));
    const Mask gb_zone = dilate(gb, radius);
    const Mask pb_zone = dilate(pb, radius);

    std::size_t matched_p = 0, matched_g = 0;
    for (std::size_t i = 0; i < pb.v.size(); ++i) {
        matched_p += (pb.v[i] && gb_zone.v[i]);
        matched_g += (gb.v[i] && pb_zone.v[i]);
    }
    const double precision = static_cast<double>(matched_p) / static_cast<double>(np);
    const double recall = static_cast<double>(matched_g) / static_cast<double>(ng);
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

EvalReport evaluate(const std::vector<LabelMap>& pred, const std::vector<LabelMap>& gt, bool exclude_first) {
    if (pred.size() != gt.size() || gt.empty()) {
        throw ShapeError("evaluate: prediction and ground-truth sequences must align");
    }
    // targets are taken from the frame-0 annotation
    std::set<int> annotated;
    for (auto v : gt[0].v) {
        if (v != 0) annotated.insert(v);
    }
    std::set<int> seen;
    for (const auto& frame : gt) {
        for (auto v : frame.v) {
            if (v != 0) seen.insert(v);
        }
    }

    EvalReport report;
    for (int id : seen) {
        if (!annotated.count(id)) report.unscored_labels.push_back(id);
    }

    const std::size_t start = exclude_first ? 1 : 0;
    for (int id : annotated) {
        double sum_j = 0.0, sum_f = 0.0;
        std::size_t frames = 0;
        for (std::size_t t = start; t < gt.size(); ++t) {
            const Mask pm = mask_from_label(pred[t], static_cast<std::uint8_t>(id));
            const Mask gm = mask_from_label(gt[t], static_cast<std::uint8_t>(id));
            sum_j += region_j(pm, gm);
            sum_f += boundary_f(pm, gm);
            ++frames;
        }
        if (frames == 0) continue;  // single-frame sequence with exclusion
        TargetScore s;
        s.target_id = id;
        s.j = sum_j / static_cast<double>(frames);
        s.f = sum_f / static_cast<double>(frames);
        s.jf = 0.5 * (s.j + s.f);
        report.targets.push_back(s);
    }
    if (!report.targets.empty()) {
        for (const auto& s : report.targets) {
            report.mean_j += s.j;
            report.mean_f += s.f;
            report.mean_jf += s.jf;
        }
        report.mean_j /= static_cast<double>(report.targets.size());
        report.mean_f /= static_cast<double>(report.targets.size());
        report.mean_jf /= static_cast<double>(report.targets.size());
    }
    return report;
}

}  // namespace jf
