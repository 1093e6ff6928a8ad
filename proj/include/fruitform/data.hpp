#pragma once

#include "fruitform/image.hpp"
#include "fruitform/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fruitform {

// --- class taxonomy -------------------------------------------------------

enum class DeformityClass : int { ExtraClass = 0, FirstClass = 1, SecondClass = 2, Ungraded = 3 };

constexpr int kNumClasses = 4;
constexpr std::array<DeformityClass, kNumClasses> kAllClasses = {
    DeformityClass::ExtraClass, DeformityClass::FirstClass,
    DeformityClass::SecondClass, DeformityClass::Ungraded};

std::string to_string(DeformityClass c);
DeformityClass deformity_class_from_string(const std::string& name);
inline int class_code(DeformityClass c) { return static_cast<int>(c); }
DeformityClass class_from_code(int code);

enum class FruitKind { Apple, Mango, Strawberry, Procedural };
std::string to_string(FruitKind k);
FruitKind fruit_kind_from_string(const std::string& name);

enum class RecordSource { Real, Synthetic, Augmented };
std::string to_string(RecordSource s);
RecordSource record_source_from_string(const std::string& name);

enum class Split { Train, Val, Test };
std::string to_string(Split s);
Split split_from_string(const std::string& name);

// --- records & manifests ---------------------------------------------------

/// One labeled image. Augmented records carry their parent id and the
/// dihedral transform that produced them; ids must not contain path
/// separators (they name sidecar files such as `<id>.mask.png`).
struct ImageRecord {
    std::string id;
    FruitKind fruit = FruitKind::Procedural;
    DeformityClass label = DeformityClass::ExtraClass;
    RecordSource source = RecordSource::Real;
    std::optional<std::string> parent_id;
    std::optional<std::string> transform_tag;
    std::string path;
    int width = 0;
    int height = 0;
};

struct DatasetManifest {
    FruitKind fruit = FruitKind::Procedural;
    std::vector<ImageRecord> records;
    std::map<std::string, Split> splits; // id -> split; absent means unassigned

    std::array<std::int64_t, kNumClasses> class_counts() const;
    const ImageRecord* find(const std::string& id) const;

    /// Enforces the record invariants: unique separator-free ids, augmented
    /// records iff (parent_id, transform_tag) present, parents resolve and
    /// share the child's label, split keys resolve.
    void validate() const;
};

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);
std::uint64_t manifest_hash(const DatasetManifest& m);

// --- ingestion -------------------------------------------------------------

struct IngestResult {
    DatasetManifest manifest;
    std::vector<std::string> warnings; // unreadable files, skipped entries
};

/// Builds a manifest from one subdirectory per class under `root`. Unreadable
/// rasters are skipped with a warning; a missing class subdirectory is an
/// error naming every absent class.
IngestResult ingest_directory(const std::filesystem::path& root, FruitKind fruit,
                              const std::map<std::string, DeformityClass>& labeling);

/// Default labeling: subdirectories named exactly after the four classes.
std::map<std::string, DeformityClass> default_labeling();

// --- balancing -------------------------------------------------------------

struct AugmentationPlan {
    std::int64_t target_per_class = 5000;
    // source id -> transform tags, insertion-ordered by manifest position
    std::vector<std::pair<std::string, std::vector<DihedralTag>>> variants;

    std::int64_t total_planned() const;
};

/// Plans enough lossless variants to lift every class to `target_per_class`.
/// Variants are dealt round-robin across source records in manifest order, so
/// per-source counts differ by at most one; a source never exceeds 8 total
/// variants including itself.
AugmentationPlan plan_balancing(const DatasetManifest& manifest, std::int64_t target_per_class);

void save_plan(const AugmentationPlan& plan, const std::filesystem::path& path);
AugmentationPlan load_plan(const std::filesystem::path& path);

/// Executes a plan: writes one PNG per planned variant under `out_dir` and
/// returns the manifest with the augmented records appended. Children inherit
/// the parent's label and split.
DatasetManifest apply_augmentation(const DatasetManifest& manifest, const AugmentationPlan& plan,
                                   const std::filesystem::path& out_dir);

// --- splitting -------------------------------------------------------------

struct SplitRatios {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
};

/// Stratified split. Per class, target sizes are the largest-remainder
/// apportionment of the ratios; an augmented record always lands in its
/// parent's split, so assignment works on parent+children families (exact
/// subset-sum over family sizes, deterministic per seed).
DatasetManifest stratified_split(const DatasetManifest& manifest, const SplitRatios& ratios,
                                 std::uint64_t seed);

// --- preprocessing ---------------------------------------------------------

/// Loads the record's raster and maps it to a (3, side, side) float tensor in
/// [0,1]: aspect-preserving area resize plus symmetric zero letterboxing.
Tensor3f preprocess(const ImageRecord& record, int side = 224);

/// Same geometry mapping for an already-decoded image.
Tensor3f preprocess_image(const ImageU8& img, int side);

} // namespace fruitform
