#pragma once

#include "fruitform/data.hpp"
#include "fruitform/dataset_cache.hpp"
#include "fruitform/nets.hpp"

#include <Eigen/Core>

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fruitform {

/// 4x4 count matrix; rows are the true class, columns the predicted class.
struct ConfusionMatrix {
    Eigen::Matrix<std::int64_t, 4, 4> counts = Eigen::Matrix<std::int64_t, 4, 4>::Zero();

    void add(int true_class, int predicted_class, std::int64_t n = 1);
    std::int64_t total() const { return counts.sum(); }
    std::int64_t correct() const { return counts.trace(); }
};

struct PerClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    bool precision_undefined = false; // no predictions for the class
    bool recall_undefined = false;    // no true examples of the class
};

/// Macro-averaged metrics with the zero-denominator-contributes-zero
/// convention; flagged classes are listed by name.
struct MetricsSummary {
    double accuracy = 0.0;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
    std::array<PerClassMetrics, kNumClasses> per_class;
    std::vector<std::string> zero_denominator_classes;
};

MetricsSummary metrics_from_confusion(const ConfusionMatrix& confusion);

struct SplitEval {
    ConfusionMatrix confusion;
    double accuracy = 0.0;
    double mean_loss = 0.0;
    MetricsSummary metrics;
};

SplitEval evaluate_tensors(const SingleInputModel<float>& model, const TensorDataset& data);
SplitEval evaluate_tensors(const MultiInputModel<float>& model, const TensorDataset& data);

/// Six-column result row plus the confusion matrix behind it.
struct MetricsReport {
    std::string fruit;
    std::string model;
    std::string regime; // "single" | "pretrain-finetune" | "multi"
    double val_accuracy = 0.0;
    double val_loss = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double test_accuracy = 0.0;
    std::string averaging = "macro";
    ConfusionMatrix confusion;
    std::vector<std::string> zero_denominator_classes;
    std::string config_ref; // training sidecar hash
};

/// Validation-side context carried into a report (best-epoch metrics from a
/// training run). Without it the evaluated split doubles as the val columns.
struct TrainingContext {
    double val_accuracy = 0.0;
    double val_loss = 0.0;
    std::string config_ref;
};

MetricsReport evaluate(const SingleInputModel<float>& model, const DatasetManifest& manifest,
                       Split split, const std::optional<TrainingContext>& ctx = std::nullopt);
MetricsReport evaluate(const MultiInputModel<float>& model, const DatasetManifest& manifest,
                       Split split, const std::filesystem::path& masks_dir,
                       const std::optional<TrainingContext>& ctx = std::nullopt);

void save_report(const MetricsReport& report, const std::filesystem::path& json_path);
MetricsReport load_report(const std::filesystem::path& json_path);
void save_report_csv(const MetricsReport& report, const std::filesystem::path& csv_path);

struct ComparisonArtifact {
    std::string text; // aligned table, best test accuracy per fruit starred
    std::string csv;
    std::string json;
};

/// One row per (fruit, model, regime); the best test accuracy per fruit is
/// marked. Values are rendered at four decimals.
ComparisonArtifact render_comparison(const std::vector<MetricsReport>& reports);

} // namespace fruitform
