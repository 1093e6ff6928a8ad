#pragma once

#include "fruitform/data.hpp"
#include "fruitform/image.hpp"
#include "fruitform/silhouette.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace fruitform {

enum class ShapeTemplate { AppleLike, MangoLike, StrawberryLike };
std::string to_string(ShapeTemplate t);

/// Closed contour of a fruit-like outline, centered on the origin in pixel
/// units. Contours are star-shaped (positive radius), hence simple.
struct ShapeProfile {
    ShapeTemplate fruit_template = ShapeTemplate::AppleLike;
    double base_radius = 1.0;
    std::vector<Eigen::Vector2d> contour; // closed polyline, >= 64 points
};

/// Knobs controlling how far a generated shape departs from its template.
/// All asymmetric perturbation (harmonics and bumps) is scaled by `alpha`,
/// so alpha = 0 produces a contour that is exactly mirror-symmetric and the
/// expected symmetry score decreases as alpha grows.
struct DeformityParams {
    double alpha = 0.0; // in [0,1]
    int bump_count = 0;
    double bump_amplitude = 0.15; // fraction of base radius
    std::uint64_t seed = 0;
};

/// Score cut points mapping a symmetry score onto the four grades.
struct GradeThresholds {
    double t1 = 0.97; // >= t1: ExtraClass
    double t2 = 0.93; // >= t2: FirstClass
    double t3 = 0.88; // >= t3: SecondClass, below: Ungraded

    void validate() const;
};

DeformityClass grade(double score, const GradeThresholds& t);

ShapeProfile gen_shape(ShapeTemplate kind, const DeformityParams& params,
                       double base_radius = 1.0);

enum class BackgroundStyle { Uniform, Noisy };
BackgroundStyle background_style_from_string(const std::string& name);
std::string to_string(BackgroundStyle s);

struct RenderStyle {
    BackgroundStyle background = BackgroundStyle::Uniform;
    std::array<std::uint8_t, 3> fill = {198, 64, 52};
    std::array<std::uint8_t, 3> bg = {22, 22, 26};
    std::uint64_t seed = 0; // texture noise stream
};

struct RenderResult {
    ImageU8 rgb;
    SilhouetteMask mask; // exact polygon rasterization of the contour
};

/// Rasterizes the profile centered in a side x side frame. Throws if the
/// contour does not fit with a 5% margin.
RenderResult render(const ShapeProfile& profile, const RenderStyle& style, int side);

struct SymmetryResult {
    double score = 0.0;         // IoU of the mask with its principal-axis mirror
    bool axis_degenerate = false; // moments gave no preferred axis; vertical used

    operator double() const { return score; }
};

/// Mirror-IoU about the principal axis through the centroid (second-order
/// moments). The grid is canonicalized under horizontal flip first, so the
/// score of a mask and of its mirror image are bit-identical.
SymmetryResult symmetry_score(const PlaneU8& grid);
SymmetryResult symmetry_score(const SilhouetteMask& mask);

struct ProceduralDatasetResult {
    DatasetManifest manifest;
    std::vector<double> scores; // per record, same order
};

/// Rejection-samples deformity parameters until every grade bin holds
/// `per_class` samples; labels come strictly from the measured score of the
/// ground-truth mask. Writes images/<id>.png and masks/<id>.mask.png under
/// `out_dir` with manifest paths relative to it.
ProceduralDatasetResult build_procedural_dataset(std::int64_t per_class, int side,
                                                 const GradeThresholds& thresholds,
                                                 std::uint64_t seed, BackgroundStyle background,
                                                 const std::filesystem::path& out_dir);

} // namespace fruitform
