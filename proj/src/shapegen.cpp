#include "fruitform/shapegen.hpp"

#include "fruitform/common.hpp"
#include "fruitform/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace fruitform {

namespace {
constexpr double kPi = std::numbers::pi;
}

std::string to_string(ShapeTemplate t) {
    switch (t) {
        case ShapeTemplate::AppleLike: return "apple-like";
        case ShapeTemplate::MangoLike: return "mango-like";
        case ShapeTemplate::StrawberryLike: return "strawberry-like";
    }
    return "apple-like";
}

void GradeThresholds::validate() const {
    if (!(t1 > t2 && t2 > t3)) throw ValidationError("grade thresholds must be strictly decreasing");
    if (!(t1 < 1.0 && t3 > 0.0)) throw ValidationError("grade thresholds must lie in (0,1)");
}

DeformityClass grade(double score, const GradeThresholds& t) {
    t.validate();
    if (score >= t.t1) return DeformityClass::ExtraClass;
    if (score >= t.t2) return DeformityClass::FirstClass;
    if (score >= t.t3) return DeformityClass::SecondClass;
    return DeformityClass::Ungraded;
}

std::string to_string(BackgroundStyle s) {
    return s == BackgroundStyle::Uniform ? "uniform" : "noisy";
}

BackgroundStyle background_style_from_string(const std::string& name) {
    if (name == "uniform") return BackgroundStyle::Uniform;
    if (name == "noisy") return BackgroundStyle::Noisy;
    throw ValidationError("unknown background style: " + name);
}

namespace {

// Symmetric template outlines as radius profiles over the angle from the
// vertical axis; every term is even in phi. (sx, sy) squash the result so all
// three templates sit taller than wide and the principal axis stays vertical.
struct TemplateShape {
    double sx, sy;
    double (*radius)(double);
};

double wrap_angle_dist(double a, double b) {
    double d = std::fmod(std::abs(a - b), 2.0 * kPi);
    return std::min(d, 2.0 * kPi - d);
}

double apple_radius(double phi) {
    const double dimple = 0.26 * std::exp(-std::pow(wrap_angle_dist(phi, 0.0) / 0.32, 2));
    const double base_flat = 0.07 * std::exp(-std::pow(wrap_angle_dist(phi, kPi) / 0.55, 2));
    return 1.0 - 0.08 * std::cos(2.0 * phi) - dimple - base_flat;
}

double mango_radius(double phi) { return 1.0 + 0.22 * std::cos(phi); }

double strawberry_radius(double phi) {
    return 1.0 + 0.30 * std::cos(phi) + 0.12 * std::cos(2.0 * phi);
}

TemplateShape template_shape(ShapeTemplate t) {
    switch (t) {
        case ShapeTemplate::AppleLike: return {0.95, 1.12, apple_radius};
        case ShapeTemplate::MangoLike: return {0.78, 1.10, mango_radius};
        case ShapeTemplate::StrawberryLike: return {0.90, 1.08, strawberry_radius};
    }
    return {0.95, 1.12, apple_radius};
}

constexpr int kContourPoints = 256;

} // namespace

ShapeProfile gen_shape(ShapeTemplate kind, const DeformityParams& params, double base_radius) {
    if (params.alpha < 0.0 || params.alpha > 1.0)
        throw ValidationError("deformity alpha must lie in [0,1]");
    if (params.bump_count < 0) throw ValidationError("bump_count must be >= 0");
    if (base_radius <= 0.0) throw ValidationError("base_radius must be positive");

    const TemplateShape tmpl = template_shape(kind);
    const int n = kContourPoints;

    Rng rng(params.seed);
    struct Harmonic {
        double amp, freq, phase;
    };
    std::vector<Harmonic> harmonics;
    for (int j = 0; j < 3; ++j)
        harmonics.push_back({0.16 * rng.uniform(0.4, 1.0),
                             static_cast<double>(rng.uniform_int(1, 4)), rng.uniform(0.0, 2.0 * kPi)});
    struct Bump {
        double center, width, amp;
    };
    std::vector<Bump> bumps;
    for (int b = 0; b < params.bump_count; ++b)
        bumps.push_back({rng.uniform(0.0, 2.0 * kPi), rng.uniform(0.15, 0.40),
                         params.bump_amplitude * rng.uniform(0.5, 1.0)});

    auto perturbation = [&](double phi) {
        double p = 0.0;
        for (const auto& hx : harmonics) p += hx.amp * std::sin(hx.freq * phi + hx.phase);
        for (const auto& bx : bumps)
            p += bx.amp * std::exp(-std::pow(wrap_angle_dist(phi, bx.center) / bx.width, 2));
        return p;
    };

    // Trig and the symmetric radius are evaluated on the right half only and
    // mirrored by negating x, so alpha = 0 is mirror-exact in doubles.
    std::vector<double> r_sym(n), sin_phi(n), cos_phi(n);
    for (int i = 0; i <= n / 2; ++i) {
        const double phi = 2.0 * kPi * i / n;
        r_sym[i] = tmpl.radius(phi);
        sin_phi[i] = std::sin(phi);
        cos_phi[i] = std::cos(phi);
    }
    for (int i = n / 2 + 1; i < n; ++i) {
        r_sym[i] = r_sym[n - i];
        sin_phi[i] = -sin_phi[n - i];
        cos_phi[i] = cos_phi[n - i];
    }

    ShapeProfile profile;
    profile.fruit_template = kind;
    profile.base_radius = base_radius;
    profile.contour.reserve(n);
    for (int i = 0; i < n; ++i) {
        const double phi = 2.0 * kPi * i / n;
        const double r_rel = std::max(0.1, r_sym[i] * (1.0 + params.alpha * perturbation(phi)));
        const double r = r_rel * base_radius;
        profile.contour.emplace_back(tmpl.sx * r * sin_phi[i], -tmpl.sy * r * cos_phi[i]);
    }
    return profile;
}

namespace {

// even-odd scanline fill; foreground = pixel centers inside the polygon
PlaneU8 rasterize_polygon(const std::vector<Eigen::Vector2d>& poly, int side) {
    PlaneU8 grid = PlaneU8::Zero(side, side);
    const std::size_t n = poly.size();
    std::vector<double> xs;
    for (int y = 0; y < side; ++y) {
        const double yc = y + 0.5;
        xs.clear();
        for (std::size_t i = 0; i < n; ++i) {
            const auto& a = poly[i];
            const auto& b = poly[(i + 1) % n];
            if ((a.y() <= yc) == (b.y() <= yc)) continue;
            xs.push_back(a.x() + (yc - a.y()) / (b.y() - a.y()) * (b.x() - a.x()));
        }
        std::sort(xs.begin(), xs.end());
        for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
            const int x0 = std::max(0, static_cast<int>(std::ceil(xs[k] - 0.5)));
            const int x1 = std::min(side - 1, static_cast<int>(std::floor(xs[k + 1] - 0.5)));
            for (int x = x0; x <= x1; ++x) grid(y, x) = 1;
        }
    }
    return grid;
}

// coarse random color field, bilinearly interpolated; used by the noisy style
struct ColorField {
    int cell;
    int cells_x, cells_y;
    std::vector<std::array<double, 3>> colors;

    ColorField(int side, int cell_px, Rng& rng) : cell(cell_px) {
        cells_x = side / cell + 2;
        cells_y = side / cell + 2;
        colors.resize(static_cast<std::size_t>(cells_x) * cells_y);
        for (auto& c : colors)
            c = {rng.uniform(60.0, 220.0), rng.uniform(40.0, 200.0), rng.uniform(30.0, 160.0)};
    }

    std::array<double, 3> at(int x, int y) const {
        const double fx = static_cast<double>(x) / cell;
        const double fy = static_cast<double>(y) / cell;
        const int ix = static_cast<int>(fx);
        const int iy = static_cast<int>(fy);
        const double tx = fx - ix;
        const double ty = fy - iy;
        auto c = [&](int gx, int gy) -> const std::array<double, 3>& {
            return colors[static_cast<std::size_t>(gy) * cells_x + gx];
        };
        std::array<double, 3> out{};
        for (int ch = 0; ch < 3; ++ch)
            out[ch] = (1 - tx) * (1 - ty) * c(ix, iy)[ch] + tx * (1 - ty) * c(ix + 1, iy)[ch] +
                      (1 - tx) * ty * c(ix, iy + 1)[ch] + tx * ty * c(ix + 1, iy + 1)[ch];
        return out;
    }
};

std::uint8_t clamp_u8(double v) {
    return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

} // namespace

RenderResult render(const ShapeProfile& profile, const RenderStyle& style, int side) {
    if (side < 8) throw ValidationError("render: side too small");
    if (profile.contour.size() < 64) throw ValidationError("render: contour must have >= 64 points");

    const double c = side / 2.0;
    const double margin = 0.05 * side;
    std::vector<Eigen::Vector2d> poly;
    poly.reserve(profile.contour.size());
    for (const auto& p : profile.contour) {
        const Eigen::Vector2d q(p.x() + c, p.y() + c);
        if (q.x() < margin || q.x() > side - margin || q.y() < margin || q.y() > side - margin)
            throw ValidationError("render: contour out of frame (needs a 5% margin)");
        poly.push_back(q);
    }

    RenderResult result;
    result.mask.grid = rasterize_polygon(poly, side);
    result.mask.area_fraction =
        static_cast<double>(result.mask.foreground_count()) / (static_cast<double>(side) * side);

    Rng rng(style.seed);
    result.rgb = ImageU8(side, side);

    if (style.background == BackgroundStyle::Uniform) {
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x) {
                if (result.mask.grid(y, x)) {
                    // radial shading plus speckle keeps the fill from being flat
                    const double dx = (x + 0.5 - c) / c;
                    const double dy = (y + 0.5 - c) / c;
                    const double shade = 1.05 - 0.35 * (dx * dx + dy * dy);
                    for (int ch = 0; ch < 3; ++ch)
                        result.rgb.plane[ch](y, x) =
                            clamp_u8(style.fill[ch] * shade + rng.normal(0.0, 10.0));
                } else {
                    for (int ch = 0; ch < 3; ++ch)
                        result.rgb.plane[ch](y, x) = clamp_u8(style.bg[ch] + rng.normal(0.0, 3.0));
                }
            }
    } else {
        // fruit and background drawn from look-alike color fields; texture and
        // color then say little about the shape, the boundary says everything
        ColorField fg_field(side, 8, rng);
        ColorField bg_field(side, 8, rng);
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x) {
                const auto& f = result.mask.grid(y, x) ? fg_field.at(x, y) : bg_field.at(x, y);
                for (int ch = 0; ch < 3; ++ch)
                    result.rgb.plane[ch](y, x) = clamp_u8(f[ch] + rng.normal(0.0, 12.0));
            }
    }
    return result;
}

namespace {

struct Moments {
    std::int64_t n = 0;
    std::int64_t sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
};

Moments integer_moments(const PlaneU8& g) {
    Moments m;
    const int h = static_cast<int>(g.rows());
    const int w = static_cast<int>(g.cols());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!g(y, x)) continue;
            ++m.n;
            m.sx += x;
            m.sy += y;
            m.sxx += static_cast<std::int64_t>(x) * x;
            m.sxy += static_cast<std::int64_t>(x) * y;
            m.syy += static_cast<std::int64_t>(y) * y;
        }
    return m;
}

bool lex_less_than_flipped(const PlaneU8& g) {
    const int h = static_cast<int>(g.rows());
    const int w = static_cast<int>(g.cols());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::uint8_t a = g(y, x);
            const std::uint8_t b = g(y, w - 1 - x);
            if (a != b) return a < b;
        }
    return true; // symmetric: either orientation
}

} // namespace

SymmetryResult symmetry_score(const PlaneU8& grid) {
    const int h = static_cast<int>(grid.rows());
    const int w = static_cast<int>(grid.cols());
    if (h == 0 || w == 0) throw ValidationError("symmetry_score: empty grid");

    // canonicalize under horizontal flip so score(mask) == score(hflip(mask))
    // exactly: the integer x-moment decides, grid bytes break ties
    PlaneU8 g = grid;
    {
        const Moments m0 = integer_moments(g);
        if (m0.n == 0) throw ValidationError("symmetry_score: mask has no foreground");
        const std::int64_t lhs = 2 * m0.sx;
        const std::int64_t rhs = m0.n * static_cast<std::int64_t>(w - 1);
        if (lhs > rhs || (lhs == rhs && !lex_less_than_flipped(g))) g = hflip(g);
    }

    const Moments m = integer_moments(g);
    const double n = static_cast<double>(m.n);
    const double mx = static_cast<double>(m.sx) / n;
    const double my = static_cast<double>(m.sy) / n;
    const double cxx = static_cast<double>(m.sxx) / n - mx * mx;
    const double cxy = static_cast<double>(m.sxy) / n - mx * my;
    const double cyy = static_cast<double>(m.syy) / n - my * my;

    SymmetryResult result;
    double r00, r01, r10, r11; // reflection matrix about the axis
    const double spread = cxx + cyy + 1e-12;
    if (std::abs(cxx - cyy) <= 1e-9 * spread && std::abs(cxy) <= 1e-9 * spread) {
        result.axis_degenerate = true;
        r00 = -1.0;
        r01 = 0.0;
        r10 = 0.0;
        r11 = 1.0; // vertical axis
    } else {
        const double theta = 0.5 * std::atan2(2.0 * cxy, cxx - cyy);
        const double c2 = std::cos(2.0 * theta);
        const double s2 = std::sin(2.0 * theta);
        r00 = c2;
        r01 = s2;
        r10 = s2;
        r11 = -c2;
    }

    PlaneU8 reflected = PlaneU8::Zero(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!g(y, x)) continue;
            const double dx = x - mx;
            const double dy = y - my;
            const auto rx = static_cast<int>(std::lround(mx + r00 * dx + r01 * dy));
            const auto ry = static_cast<int>(std::lround(my + r10 * dx + r11 * dy));
            if (rx >= 0 && rx < w && ry >= 0 && ry < h) reflected(ry, rx) = 1;
        }
    result.score = mask_iou(g, reflected);
    return result;
}

SymmetryResult symmetry_score(const SilhouetteMask& mask) { return symmetry_score(mask.grid); }

// --- procedural dataset ----------------------------------------------------

namespace {

// proposal ranges for alpha, roughly matching the default grade bins; samples
// are still accepted purely by their measured score
constexpr std::array<std::pair<double, double>, kNumClasses> kAlphaProposal = {{
    {0.00, 0.06},
    {0.08, 0.20},
    {0.22, 0.36},
    {0.40, 0.80},
}};

} // namespace

ProceduralDatasetResult build_procedural_dataset(std::int64_t per_class, int side,
                                                 const GradeThresholds& thresholds,
                                                 std::uint64_t seed, BackgroundStyle background,
                                                 const std::filesystem::path& out_dir) {
    if (per_class < 1) throw ValidationError("per_class must be >= 1");
    if (side < 16) throw ValidationError("side must be >= 16");
    thresholds.validate();

    std::filesystem::create_directories(out_dir / "images");
    std::filesystem::create_directories(out_dir / "masks");

    ProceduralDatasetResult result;
    result.manifest.fruit = FruitKind::Procedural;

    std::array<std::int64_t, kNumClasses> filled{};
    const std::int64_t max_attempts = per_class * kNumClasses * 400;
    std::int64_t attempt = 0;
    std::int64_t accepted = 0;

    const std::array<ShapeTemplate, 3> templates = {
        ShapeTemplate::AppleLike, ShapeTemplate::MangoLike, ShapeTemplate::StrawberryLike};

    while (true) {
        int want = -1;
        for (int c = 0; c < kNumClasses; ++c)
            if (filled[static_cast<std::size_t>(c)] < per_class) {
                want = c;
                break;
            }
        if (want < 0) break;
        if (++attempt > max_attempts) {
            throw ValidationError(
                "procedural sampler could not fill class " + to_string(class_from_code(want)) +
                " (" + std::to_string(filled[static_cast<std::size_t>(want)]) + "/" +
                std::to_string(per_class) +
                " after " + std::to_string(max_attempts) +
                " attempts); widen the grade thresholds or lower per_class");
        }

        const std::uint64_t sample_seed = derive_seed(seed, static_cast<std::uint64_t>(attempt));
        Rng rng(sample_seed);

        DeformityParams params;
        const auto [lo, hi] = kAlphaProposal[static_cast<std::size_t>(want)];
        params.alpha = rng.uniform(lo, hi);
        params.bump_count = static_cast<int>(rng.uniform_int(0, 3));
        params.bump_amplitude = rng.uniform(0.05, 0.25);
        params.seed = derive_seed(sample_seed, 1);

        const auto tmpl = templates[static_cast<std::size_t>(rng.uniform_int(0, 2))];
        ShapeProfile profile = gen_shape(tmpl, params, 1.0);
        // normalize the (possibly heavily deformed) outline into the frame,
        // with some size jitter; the mirror-IoU label is scale-invariant
        double extent = 0.0;
        for (const auto& p : profile.contour)
            extent = std::max({extent, std::abs(p.x()), std::abs(p.y())});
        const double scale = rng.uniform(0.34, 0.42) * side / extent;
        for (auto& p : profile.contour) p *= scale;
        profile.base_radius = scale;

        RenderStyle style;
        style.background = background;
        style.seed = derive_seed(sample_seed, 2);
        if (background == BackgroundStyle::Uniform) {
            style.fill = {static_cast<std::uint8_t>(rng.uniform_int(150, 230)),
                          static_cast<std::uint8_t>(rng.uniform_int(40, 180)),
                          static_cast<std::uint8_t>(rng.uniform_int(30, 90))};
        }

        RenderResult rendered = render(profile, style, side);
        const double score = symmetry_score(rendered.mask.grid).score;
        const DeformityClass label = grade(score, thresholds);
        const auto bin = static_cast<std::size_t>(class_code(label));
        if (filled[bin] >= per_class) continue;

        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "proc_%06lld", static_cast<long long>(accepted));
        const std::string id = idbuf;

        rendered.mask.record_id = id;
        save_png(out_dir / "images" / (id + ".png"), rendered.rgb);
        save_mask_png(rendered.mask, out_dir / "masks");

        ImageRecord rec;
        rec.id = id;
        rec.fruit = FruitKind::Procedural;
        rec.label = label;
        rec.source = RecordSource::Synthetic;
        rec.path = (out_dir / "images" / (id + ".png")).string();
        rec.width = side;
        rec.height = side;
        result.manifest.records.push_back(std::move(rec));
        result.scores.push_back(score);
        ++filled[bin];
        ++accepted;
    }
    return result;
}

} // namespace fruitform
