#pragma once

#include "fruitform/data.hpp"
#include "fruitform/image.hpp"
#include "fruitform/tensor.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace fruitform {

/// Binary foreground mask aligned to a source image. `grid` holds strictly
/// 0/1; after cleanup the foreground is a single 4-connected component with
/// interior holes filled.
struct SilhouetteMask {
    std::string record_id;
    PlaneU8 grid;
    double area_fraction = 0.0;
    bool pass = true;
    std::string fail_reason; // set iff !pass

    int width() const { return static_cast<int>(grid.cols()); }
    int height() const { return static_cast<int>(grid.rows()); }
    std::int64_t foreground_count() const;
};

/// Keeps the largest 4-connected foreground component and fills its interior
/// holes (background not reachable from the border). Identity on clean masks.
PlaneU8 cleanup_mask(const PlaneU8& grid);

/// Segments a fruit photographed on a uniform background. The background
/// color is estimated from the modal border color; pixels farther than `tol`
/// (Euclidean RGB distance) are foreground.
SilhouetteMask segment_uniform_background(const ImageU8& rgb, double tol = 40.0,
                                          const std::string& record_id = {});

/// Ingests an externally produced mask raster (grayscale thresholded at 128)
/// for `record`; dimensions must match the record. Degenerate (all-0/all-1)
/// masks come back as quality failures.
SilhouetteMask ingest_external_mask(const ImageRecord& record,
                                    const std::filesystem::path& mask_path);

struct Exclusion {
    std::string record_id;
    std::string reason;
};

struct QualityFilterResult {
    std::vector<SilhouetteMask> kept;
    std::vector<Exclusion> excluded;
};

/// Drops quality failures and masks whose area fraction falls outside
/// [0.05, 0.95]; report-only, never throws.
QualityFilterResult quality_filter(std::vector<SilhouetteMask> masks);

void save_mask_png(const SilhouetteMask& mask, const std::filesystem::path& dir);
SilhouetteMask load_mask_png(const std::string& record_id, const std::filesystem::path& path);

void save_exclusion_report(const std::vector<Exclusion>& excluded,
                           const std::filesystem::path& path);

/// Letterboxes a mask to a (1, side, side) float tensor in [0,1] using the
/// same geometry mapping as RGB preprocessing.
Tensor3f preprocess_mask(const SilhouetteMask& mask, int side);

double mask_iou(const PlaneU8& a, const PlaneU8& b);

} // namespace fruitform
