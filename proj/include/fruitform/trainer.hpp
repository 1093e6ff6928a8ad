#pragma once

#include "fruitform/data.hpp"
#include "fruitform/dataset_cache.hpp"
#include "fruitform/evalkit.hpp"
#include "fruitform/nets.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fruitform {

// Training blew up (NaN loss); carries the epoch/batch location.
struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class OptimizerKind { Adam, Nadam, RmsProp };
std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& name);

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::Adam;
    double learning_rate = 1e-3; // fine-tune phases default to 1e-4
    int batch_size = 32;
    int max_epochs = 30; // hard cap 30
    std::uint64_t seed = 0;

    void validate() const;
};

constexpr double kFinetuneLearningRate = 1e-4;

struct EpochRow {
    int epoch = 0; // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
};

struct TrainHistory {
    std::vector<EpochRow> rows;
    int best_epoch = 0;       // 1-based index into rows
    int steps_per_epoch = 0;  // ceil(|Train| / batch_size)
};

/// Highest val accuracy; ties go to the lower val loss, remaining ties to the
/// earliest epoch.
int select_best_epoch(const std::vector<EpochRow>& rows);

/// First-order optimizers over the model's parameter list. State matrices are
/// allocated lazily to match the parameter shapes.
class OptimizerState {
public:
    OptimizerState(OptimizerKind kind, double learning_rate) : kind_(kind), lr_(learning_rate) {}

    void step(const std::vector<ParamRef<float>>& params, const GradBuffer<float>& grads);

private:
    OptimizerKind kind_;
    double lr_;
    std::int64_t t_ = 0;
    std::vector<MatX<float>> m_, v_;
};

/// Trains up to cfg.max_epochs and restores the best-epoch weights before
/// returning. Per-epoch shuffling derives from (seed, epoch); two runs with
/// identical inputs produce identical histories and weights.
TrainHistory train(SingleInputModel<float>& model, const DatasetManifest& manifest,
                   const TrainConfig& cfg);

/// Multi-input variant; every Train/Val record must have `<id>.mask.png`
/// under masks_dir.
TrainHistory train_multi(MultiInputModel<float>& model, const DatasetManifest& manifest,
                         const std::filesystem::path& masks_dir, const TrainConfig& cfg);

struct PretrainResult {
    TrainHistory pretrain;
    TrainHistory finetune;
    std::uint64_t handoff_hash = 0; // hash of the weights passed between phases
};

/// Phase 1 trains on the synthetic manifest; phase 2 continues from the
/// phase-1 best weights on the real manifest. Both manifests must cover the
/// same set of classes.
PretrainResult pretrain_then_finetune(SingleInputModel<float>& model,
                                      const DatasetManifest& synthetic,
                                      const DatasetManifest& real, const TrainConfig& cfg_pre,
                                      const TrainConfig& cfg_fine);

// --- history files -----------------------------------------------------------

void save_history(const TrainHistory& history, const TrainConfig& cfg, std::uint64_t dataset_hash,
                  const std::filesystem::path& csv_path, const std::filesystem::path& sidecar_path);

struct LoadedHistory {
    TrainHistory history;
    TrainConfig config;
    std::string dataset_hash;
};

LoadedHistory load_history(const std::filesystem::path& csv_path,
                           const std::filesystem::path& sidecar_path);

} // namespace fruitform
