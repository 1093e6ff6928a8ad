#include "fruitform/dataset_cache.hpp"

#include "fruitform/common.hpp"
#include "fruitform/silhouette.hpp"

namespace fruitform {

TensorDataset load_split_tensors(const DatasetManifest& manifest, Split split, int side,
                                 const std::filesystem::path* masks_dir) {
    std::vector<const ImageRecord*> picked;
    for (const auto& r : manifest.records) {
        auto it = manifest.splits.find(r.id);
        if (it != manifest.splits.end() && it->second == split) picked.push_back(&r);
    }
    if (picked.empty())
        throw ValidationError("split " + to_string(split) + " is empty");

    if (masks_dir) {
        std::string missing;
        int n_missing = 0;
        for (const auto* r : picked) {
            const auto p = *masks_dir / (r->id + ".mask.png");
            if (!std::filesystem::exists(p)) {
                missing += (n_missing ? ", " : "") + r->id;
                ++n_missing;
            }
        }
        if (n_missing)
            throw ValidationError("missing mask file for " + std::to_string(n_missing) +
                                  " record(s): " + missing);
    }

    TensorDataset out;
    out.ids.reserve(picked.size());
    for (const auto* r : picked) {
        out.ids.push_back(r->id);
        out.images.push_back(preprocess(*r, side));
        out.labels.push_back(class_code(r->label));
        if (masks_dir) {
            const auto mask = load_mask_png(r->id, *masks_dir / (r->id + ".mask.png"));
            out.masks.push_back(preprocess_mask(mask, side));
        }
    }
    return out;
}

} // namespace fruitform
