#include "fruitform/silhouette.hpp"

#include "fruitform/common.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

namespace fruitform {

std::int64_t SilhouetteMask::foreground_count() const {
    return static_cast<std::int64_t>(grid.cast<std::int64_t>().sum());
}

namespace {

// iterative flood fill over a label grid, 4-connectivity
void flood(const PlaneU8& grid, Eigen::ArrayXXi& labels, int y0, int x0, int label,
           std::uint8_t value) {
    const int h = static_cast<int>(grid.rows());
    const int w = static_cast<int>(grid.cols());
    std::vector<std::pair<int, int>> stack{{y0, x0}};
    labels(y0, x0) = label;
    while (!stack.empty()) {
        const auto [y, x] = stack.back();
        stack.pop_back();
        const int ny[4] = {y - 1, y + 1, y, y};
        const int nx[4] = {x, x, x - 1, x + 1};
        for (int k = 0; k < 4; ++k) {
            if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w) continue;
            if (grid(ny[k], nx[k]) != value || labels(ny[k], nx[k]) != 0) continue;
            labels(ny[k], nx[k]) = label;
            stack.emplace_back(ny[k], nx[k]);
        }
    }
}

} // namespace

PlaneU8 cleanup_mask(const PlaneU8& grid) {
    const int h = static_cast<int>(grid.rows());
    const int w = static_cast<int>(grid.cols());
    if (h == 0 || w == 0) return grid;

    // largest 4-connected foreground component
    Eigen::ArrayXXi labels = Eigen::ArrayXXi::Zero(h, w);
    int next = 0;
    std::vector<std::int64_t> sizes(1, 0); // sizes[0] unused
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (grid(y, x) == 0 || labels(y, x) != 0) continue;
            flood(grid, labels, y, x, ++next, 1);
            sizes.push_back((labels == next).count());
        }
    PlaneU8 out = PlaneU8::Zero(h, w);
    if (next > 0) {
        int best = 1;
        for (int l = 2; l <= next; ++l)
            if (sizes[static_cast<std::size_t>(l)] > sizes[static_cast<std::size_t>(best)]) best = l;
        out = (labels == best).cast<std::uint8_t>();
    }

    // fill holes: background not reachable from the border becomes foreground
    Eigen::ArrayXXi bg = Eigen::ArrayXXi::Zero(h, w);
    for (int x = 0; x < w; ++x) {
        if (out(0, x) == 0 && bg(0, x) == 0) flood(out, bg, 0, x, 1, 0);
        if (out(h - 1, x) == 0 && bg(h - 1, x) == 0) flood(out, bg, h - 1, x, 1, 0);
    }
    for (int y = 0; y < h; ++y) {
        if (out(y, 0) == 0 && bg(y, 0) == 0) flood(out, bg, y, 0, 1, 0);
        if (out(y, w - 1) == 0 && bg(y, w - 1) == 0) flood(out, bg, y, w - 1, 1, 0);
    }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (out(y, x) == 0 && bg(y, x) == 0) out(y, x) = 1;
    return out;
}

namespace {

SilhouetteMask finish_mask(std::string record_id, PlaneU8 binary) {
    SilhouetteMask mask;
    mask.record_id = std::move(record_id);
    mask.grid = cleanup_mask(binary);
    const auto total = static_cast<double>(mask.grid.size());
    mask.area_fraction = total > 0 ? static_cast<double>(mask.foreground_count()) / total : 0.0;

    const int h = mask.height();
    const int w = mask.width();
    if (mask.foreground_count() == 0 || mask.foreground_count() == mask.grid.size()) {
        mask.pass = false;
        mask.fail_reason = "degenerate mask";
        return mask;
    }
    std::int64_t border_fg = 0;
    std::int64_t border_total = 0;
    for (int x = 0; x < w; ++x) {
        border_fg += mask.grid(0, x) + mask.grid(h - 1, x);
        border_total += 2;
    }
    for (int y = 1; y + 1 < h; ++y) {
        border_fg += mask.grid(y, 0) + mask.grid(y, w - 1);
        border_total += 2;
    }
    if (border_fg * 2 > border_total) {
        mask.pass = false;
        mask.fail_reason = "truncated object";
    }
    return mask;
}

} // namespace

SilhouetteMask segment_uniform_background(const ImageU8& rgb, double tol,
                                          const std::string& record_id) {
    if (rgb.empty()) throw ValidationError("segment: empty image");
    const int h = rgb.height();
    const int w = rgb.width();

    // modal border color, 32 bins per channel
    std::vector<std::pair<int, int>> border;
    for (int x = 0; x < w; ++x) {
        border.emplace_back(0, x);
        if (h > 1) border.emplace_back(h - 1, x);
    }
    for (int y = 1; y + 1 < h; ++y) {
        border.emplace_back(y, 0);
        if (w > 1) border.emplace_back(y, w - 1);
    }
    std::vector<std::int32_t> hist(32 * 32 * 32, 0);
    auto bin_of = [&](int y, int x) {
        return (rgb.plane[0](y, x) >> 3) * 1024 + (rgb.plane[1](y, x) >> 3) * 32 +
               (rgb.plane[2](y, x) >> 3);
    };
    for (const auto& [y, x] : border) ++hist[static_cast<std::size_t>(bin_of(y, x))];
    const auto mode_bin =
        static_cast<int>(std::max_element(hist.begin(), hist.end()) - hist.begin());

    double bg[3] = {0, 0, 0};
    std::int64_t n_mode = 0;
    for (const auto& [y, x] : border) {
        if (bin_of(y, x) != mode_bin) continue;
        for (int c = 0; c < 3; ++c) bg[c] += rgb.plane[c](y, x);
        ++n_mode;
    }
    for (double& v : bg) v /= static_cast<double>(n_mode);

    auto dist_to_bg = [&](int y, int x) {
        double d2 = 0;
        for (int c = 0; c < 3; ++c) {
            const double d = rgb.plane[c](y, x) - bg[c];
            d2 += d * d;
        }
        return std::sqrt(d2);
    };

    std::int64_t border_near = 0;
    for (const auto& [y, x] : border)
        if (dist_to_bg(y, x) <= tol) ++border_near;
    if (static_cast<double>(border_near) < 0.6 * static_cast<double>(border.size())) {
        SilhouetteMask mask;
        mask.record_id = record_id;
        mask.grid = PlaneU8::Zero(h, w);
        mask.pass = false;
        mask.fail_reason = "non-uniform background";
        return mask;
    }

    PlaneU8 fg(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) fg(y, x) = dist_to_bg(y, x) > tol ? 1 : 0;
    return finish_mask(record_id, std::move(fg));
}

SilhouetteMask ingest_external_mask(const ImageRecord& record,
                                    const std::filesystem::path& mask_path) {
    const PlaneU8 gray = load_gray(mask_path);
    if (static_cast<int>(gray.cols()) != record.width || static_cast<int>(gray.rows()) != record.height)
        throw ValidationError("mask dimensions " + std::to_string(gray.cols()) + "x" +
                              std::to_string(gray.rows()) + " do not match record " + record.id +
                              " (" + std::to_string(record.width) + "x" +
                              std::to_string(record.height) + ")");
    PlaneU8 binary = (gray >= 128).cast<std::uint8_t>();
    const auto ones = binary.cast<std::int64_t>().sum();
    if (ones == 0 || ones == binary.size()) {
        SilhouetteMask mask;
        mask.record_id = record.id;
        mask.grid = std::move(binary);
        mask.area_fraction = ones == 0 ? 0.0 : 1.0;
        mask.pass = false;
        mask.fail_reason = "degenerate mask";
        return mask;
    }
    return finish_mask(record.id, std::move(binary));
}

QualityFilterResult quality_filter(std::vector<SilhouetteMask> masks) {
    QualityFilterResult result;
    for (auto& m : masks) {
        if (!m.pass) {
            result.excluded.push_back({m.record_id, m.fail_reason});
        } else if (m.area_fraction < 0.05 || m.area_fraction > 0.95) {
            result.excluded.push_back({m.record_id, "area out of range"});
        } else {
            result.kept.push_back(std::move(m));
        }
    }
    return result;
}

void save_mask_png(const SilhouetteMask& mask, const std::filesystem::path& dir) {
    PlaneU8 out = mask.grid * std::uint8_t(255);
    save_gray_png(dir / (mask.record_id + ".mask.png"), out);
}

SilhouetteMask load_mask_png(const std::string& record_id, const std::filesystem::path& path) {
    const PlaneU8 gray = load_gray(path);
    PlaneU8 binary = (gray >= 128).cast<std::uint8_t>();
    SilhouetteMask mask;
    mask.record_id = record_id;
    mask.grid = std::move(binary);
    const auto total = static_cast<double>(mask.grid.size());
    mask.area_fraction = total > 0 ? static_cast<double>(mask.foreground_count()) / total : 0.0;
    return mask;
}

void save_exclusion_report(const std::vector<Exclusion>& excluded,
                           const std::filesystem::path& path) {
    std::ostringstream out;
    out << "record_id,reason\n";
    for (const auto& e : excluded) out << e.record_id << "," << e.reason << "\n";
    atomic_write_file(path, out.str());
}

Tensor3f preprocess_mask(const SilhouetteMask& mask, int side) {
    if (side < 1) throw ValidationError("preprocess_mask: side must be >= 1");
    const int w = mask.width();
    const int h = mask.height();
    if (w == 0 || h == 0) throw ValidationError("preprocess_mask: empty mask");

    Tensor3f out(1, side, side);
    int out_w = side;
    int out_h = side;
    if (w != h || w != side) {
        const double scale = static_cast<double>(side) / std::max(w, h);
        out_w = std::max(1, static_cast<int>(std::lround(w * scale)));
        out_h = std::max(1, static_cast<int>(std::lround(h * scale)));
    }
    const int x0 = (side - out_w) / 2;
    const int y0 = (side - out_h) / 2;

    PlaneF plane = mask.grid.cast<float>();
    if (out_w != w || out_h != h) plane = area_resize(plane, out_w, out_h);
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) out.at(0, y0 + y, x0 + x) = plane(y, x);
    return out;
}

double mask_iou(const PlaneU8& a, const PlaneU8& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ValidationError("mask_iou: dimension mismatch");
    std::int64_t inter = 0;
    std::int64_t uni = 0;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        const bool pa = a(i) != 0;
        const bool pb = b(i) != 0;
        inter += pa && pb;
        uni += pa || pb;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

} // namespace fruitform
