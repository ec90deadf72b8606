#include "shapeprior/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

namespace shapeprior::harness {

namespace {

void check_extents(const MaskVolume& a, const MaskVolume& b) {
    if (a.extents != b.extents) throw std::invalid_argument("metric: mask extents differ");
}

struct Point {
    double z, y, x;
};

std::vector<Point> boundary(const MaskVolume& m, std::uint8_t c, const Spacing& s) {
    const auto& e = m.extents;
    auto in_class = [&](long z, long y, long x) {
        return z >= 0 && y >= 0 && x >= 0 && z < long(e[0]) && y < long(e[1]) && x < long(e[2]) && m.at(z, y, x) == c;
    };
    std::vector<Point> out;
    for (long z = 0; z < long(e[0]); ++z)
        for (long y = 0; y < long(e[1]); ++y)
            for (long x = 0; x < long(e[2]); ++x) {
                if (!in_class(z, y, x)) continue;
                const bool interior = in_class(z - 1, y, x) && in_class(z + 1, y, x) && in_class(z, y - 1, x) &&
                                      in_class(z, y + 1, x) && in_class(z, y, x - 1) && in_class(z, y, x + 1);
                if (!interior) out.push_back({double(z) * s[0], double(y) * s[1], double(x) * s[2]});
            }
    return out;
}

void nearest(const std::vector<Point>& from, const std::vector<Point>& to, std::vector<double>& out) {
    for (const auto& p : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : to) {
            const double dz = p.z - q.z, dy = p.y - q.y, dx = p.x - q.x;
            best = std::min(best, dz * dz + dy * dy + dx * dx);
        }
        out.push_back(std::sqrt(best));
    }
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

}  // namespace

double dice_score(const MaskVolume& pred, const MaskVolume& gt, std::uint8_t c) {
    check_extents(pred, gt);
    std::size_t a = 0, b = 0, both = 0;
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
        const bool p = pred.labels[i] == c, g = gt.labels[i] == c;
        a += p;
        b += g;
        both += p && g;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * double(both) / double(a + b);
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("percentile of an empty set");
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * double(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - double(lo)) * (values[hi] - values[lo]);
}

double hd95(const MaskVolume& pred, const MaskVolume& gt, std::uint8_t c, const Spacing& spacing) {
    check_extents(pred, gt);
    const auto a = boundary(pred, c, spacing);
    const auto b = boundary(gt, c, spacing);
    if (a.empty() || b.empty()) return kHd95Absent;
    std::vector<double> d;
    d.reserve(a.size() + b.size());
    nearest(a, b, d);
    nearest(b, a, d);
    return percentile(std::move(d), 95.0);
}

CaseMetrics case_metrics(const std::string& id, const MaskVolume& pred, const MaskVolume& gt, std::size_t n_classes) {
    CaseMetrics m{id, {}, {}};
    for (std::size_t c = 0; c < n_classes; ++c) {
        m.dice.push_back(dice_score(pred, gt, static_cast<std::uint8_t>(c)));
        m.hd95.push_back(c == 0 ? kHd95Absent : hd95(pred, gt, static_cast<std::uint8_t>(c), gt.spacing));
    }
    return m;
}

MetricsRecord aggregate(const std::vector<CaseMetrics>& cases, std::size_t epoch, const std::string& split) {
    if (cases.empty()) throw std::invalid_argument("aggregate: no cases");
    const std::size_t n = cases.front().dice.size();
    MetricsRecord r;
    r.epoch = epoch;
    r.split = split;
    r.dice.assign(n, 0.0);
    r.hd95.assign(n, kHd95Absent);
    for (std::size_t c = 0; c < n; ++c) {
        double hd_total = 0.0;
        std::size_t hd_count = 0;
        for (const auto& m : cases) {
            r.dice[c] += m.dice[c];
            if (m.hd95[c] != kHd95Absent) {
                hd_total += m.hd95[c];
                ++hd_count;
            }
        }
        r.dice[c] /= double(cases.size());
        if (hd_count > 0) r.hd95[c] = hd_total / double(hd_count);
    }
    double dice = 0.0, hd = 0.0;
    std::size_t hd_count = 0;
    for (std::size_t c = 1; c < n; ++c) {
        dice += r.dice[c];
        if (r.hd95[c] != kHd95Absent) {
            hd += r.hd95[c];
            ++hd_count;
        }
    }
    r.mean_dice = n > 1 ? dice / double(n - 1) : 0.0;
    r.mean_hd95 = hd_count > 0 ? hd / double(hd_count) : kHd95Absent;
    return r;
}

std::string metrics_rows(const MetricsRecord& r, bool per_class) {
    std::string out;
    const std::string prefix = std::to_string(r.epoch) + "," + r.split + ",";
    if (per_class)
        for (std::size_t c = 1; c < r.dice.size(); ++c)
            out += prefix + std::to_string(c) + "," + fmt(r.dice[c]) + "," + fmt(r.hd95[c]) + "\n";
    out += prefix + "mean," + fmt(r.mean_dice) + "," + fmt(r.mean_hd95) + "\n";
    return out;
}

}  // namespace shapeprior::harness
