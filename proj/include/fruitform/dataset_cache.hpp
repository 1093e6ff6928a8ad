#pragma once

#include "fruitform/data.hpp"
#include "fruitform/tensor.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace fruitform {

/// One split of a manifest, preprocessed and held in memory (desk-scale
/// datasets; training touches every tensor each epoch).
struct TensorDataset {
    std::vector<std::string> ids;
    std::vector<Tensor3f> images; // (3, side, side) in [0,1]
    std::vector<Tensor3f> masks;  // (1, side, side); empty unless loaded with masks
    std::vector<int> labels;      // class codes

    std::size_t size() const { return ids.size(); }
    bool has_masks() const { return !masks.empty(); }
};

/// Loads and preprocesses every record of `split`. With `masks_dir` set, a
/// `<id>.mask.png` is required per record; all missing ids are reported in
/// one error.
TensorDataset load_split_tensors(const DatasetManifest& manifest, Split split, int side,
                                 const std::filesystem::path* masks_dir = nullptr);

} // namespace fruitform
