#include "fruitform/evalkit.hpp"

#include "fruitform/common.hpp"

#include <json.hpp>

#include <algorithm>
#include <cassert>
#include <cstdio>
#include <map>
#include <sstream>

namespace fruitform {

using ojson = nlohmann::ordered_json;

void ConfusionMatrix::add(int true_class, int predicted_class, std::int64_t n) {
    if (true_class < 0 || true_class >= kNumClasses || predicted_class < 0 ||
        predicted_class >= kNumClasses)
        throw ValidationError("confusion: class code out of range");
    counts(true_class, predicted_class) += n;
}

MetricsSummary metrics_from_confusion(const ConfusionMatrix& confusion) {
    const auto& m = confusion.counts;
    MetricsSummary s;
    const std::int64_t total = confusion.total();
    if (total == 0) throw ValidationError("confusion matrix is empty");
    s.accuracy = static_cast<double>(confusion.correct()) / static_cast<double>(total);

    for (int c = 0; c < kNumClasses; ++c) {
        const std::int64_t tp = m(c, c);
        const std::int64_t predicted = m.col(c).sum();
        const std::int64_t actual = m.row(c).sum();
        auto& pc = s.per_class[static_cast<std::size_t>(c)];
        if (predicted == 0) {
            pc.precision_undefined = true;
            s.zero_denominator_classes.push_back(to_string(class_from_code(c)) + ":precision");
        } else {
            pc.precision = static_cast<double>(tp) / static_cast<double>(predicted);
        }
        if (actual == 0) {
            pc.recall_undefined = true;
            s.zero_denominator_classes.push_back(to_string(class_from_code(c)) + ":recall");
        } else {
            pc.recall = static_cast<double>(tp) / static_cast<double>(actual);
        }
        pc.f1 = pc.precision + pc.recall > 0.0
                    ? 2.0 * pc.precision * pc.recall / (pc.precision + pc.recall)
                    : 0.0;
        s.macro_precision += pc.precision / kNumClasses;
        s.macro_recall += pc.recall / kNumClasses;
        s.macro_f1 += pc.f1 / kNumClasses;
    }

    // micro-averaged precision and recall both collapse to trace/total;
    // anything else means the bookkeeping above went wrong
    std::int64_t tp_sum = 0;
    for (int c = 0; c < kNumClasses; ++c) tp_sum += m(c, c);
    const double micro = static_cast<double>(tp_sum) / static_cast<double>(total);
    if (micro != s.accuracy) throw ValidationError("internal: micro average departed from accuracy");
    return s;
}

namespace {

SplitEval finish_eval(ConfusionMatrix confusion, double loss_sum, std::int64_t n) {
    SplitEval e;
    e.confusion = confusion;
    e.mean_loss = loss_sum / static_cast<double>(n);
    e.metrics = metrics_from_confusion(confusion);
    e.accuracy = e.metrics.accuracy;
    return e;
}

} // namespace

SplitEval evaluate_tensors(const SingleInputModel<float>& model, const TensorDataset& data) {
    if (data.size() == 0) throw ValidationError("evaluate: empty dataset");
    ConfusionMatrix confusion;
    double loss_sum = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const VecX<float> logits = model.logits(data.images[i]);
        loss_sum += cross_entropy<float>(logits, data.labels[i], nullptr);
        confusion.add(data.labels[i], argmax_lowest(logits));
    }
    return finish_eval(confusion, loss_sum, static_cast<std::int64_t>(data.size()));
}

SplitEval evaluate_tensors(const MultiInputModel<float>& model, const TensorDataset& data) {
    if (data.size() == 0) throw ValidationError("evaluate: empty dataset");
    if (!data.has_masks()) throw ValidationError("evaluate: multi-input model needs masks");
    ConfusionMatrix confusion;
    double loss_sum = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const VecX<float> logits = model.logits(data.images[i], data.masks[i]);
        loss_sum += cross_entropy<float>(logits, data.labels[i], nullptr);
        confusion.add(data.labels[i], argmax_lowest(logits));
    }
    return finish_eval(confusion, loss_sum, static_cast<std::int64_t>(data.size()));
}

namespace {

MetricsReport report_from_eval(const SplitEval& eval, const std::optional<TrainingContext>& ctx) {
    MetricsReport r;
    r.test_accuracy = eval.accuracy;
    r.precision = eval.metrics.macro_precision;
    r.recall = eval.metrics.macro_recall;
    r.f1 = eval.metrics.macro_f1;
    r.confusion = eval.confusion;
    r.zero_denominator_classes = eval.metrics.zero_denominator_classes;
    if (ctx) {
        r.val_accuracy = ctx->val_accuracy;
        r.val_loss = ctx->val_loss;
        r.config_ref = ctx->config_ref;
    } else {
        r.val_accuracy = eval.accuracy;
        r.val_loss = eval.mean_loss;
    }
    return r;
}

} // namespace

MetricsReport evaluate(const SingleInputModel<float>& model, const DatasetManifest& manifest,
                       Split split, const std::optional<TrainingContext>& ctx) {
    const auto data = load_split_tensors(manifest, split, model.backbone.input_side);
    MetricsReport r = report_from_eval(evaluate_tensors(model, data), ctx);
    r.fruit = to_string(manifest.fruit);
    r.model = to_string(model.spec.backbone.kind);
    r.regime = "single";
    return r;
}

MetricsReport evaluate(const MultiInputModel<float>& model, const DatasetManifest& manifest,
                       Split split, const std::filesystem::path& masks_dir,
                       const std::optional<TrainingContext>& ctx) {
    const auto data = load_split_tensors(manifest, split, model.rgb.input_side, &masks_dir);
    MetricsReport r = report_from_eval(evaluate_tensors(model, data), ctx);
    r.fruit = to_string(manifest.fruit);
    r.model = to_string(model.spec.rgb_branch.kind);
    r.regime = "multi";
    return r;
}

// --- report files ------------------------------------------------------------

namespace {

ojson report_to_json(const MetricsReport& r) {
    ojson j;
    j["fruit"] = r.fruit;
    j["model"] = r.model;
    j["regime"] = r.regime;
    j["val_accuracy"] = r.val_accuracy;
    j["val_loss"] = r.val_loss;
    j["precision"] = r.precision;
    j["recall"] = r.recall;
    j["f1"] = r.f1;
    j["test_accuracy"] = r.test_accuracy;
    j["averaging"] = r.averaging;
    ojson rows = ojson::array();
    for (int t = 0; t < kNumClasses; ++t) {
        ojson row = ojson::array();
        for (int p = 0; p < kNumClasses; ++p) row.push_back(r.confusion.counts(t, p));
        rows.push_back(std::move(row));
    }
    j["confusion"] = std::move(rows);
    j["zero_denominator_classes"] = r.zero_denominator_classes;
    j["config_ref"] = r.config_ref;
    return j;
}

} // namespace

void save_report(const MetricsReport& report, const std::filesystem::path& json_path) {
    atomic_write_file(json_path, report_to_json(report).dump(2) + "\n");
}

MetricsReport load_report(const std::filesystem::path& json_path) {
    MetricsReport r;
    try {
        const auto j = ojson::parse(read_file(json_path));
        r.fruit = j.at("fruit").get<std::string>();
        r.model = j.at("model").get<std::string>();
        r.regime = j.at("regime").get<std::string>();
        r.val_accuracy = j.at("val_accuracy").get<double>();
        r.val_loss = j.at("val_loss").get<double>();
        r.precision = j.at("precision").get<double>();
        r.recall = j.at("recall").get<double>();
        r.f1 = j.at("f1").get<double>();
        r.test_accuracy = j.at("test_accuracy").get<double>();
        r.averaging = j.at("averaging").get<std::string>();
        for (int t = 0; t < kNumClasses; ++t)
            for (int p = 0; p < kNumClasses; ++p)
                r.confusion.counts(t, p) = j.at("confusion").at(t).at(p).get<std::int64_t>();
        r.zero_denominator_classes =
            j.at("zero_denominator_classes").get<std::vector<std::string>>();
        r.config_ref = j.at("config_ref").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed report " + json_path.string() + ": " + e.what());
    }
    return r;
}

namespace {

std::string fixed4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

const char* kCsvHeader = "fruit,model,regime,val_accuracy,val_loss,precision,recall,f1,test_accuracy";

std::string report_csv_row(const MetricsReport& r) {
    std::ostringstream out;
    out << r.fruit << "," << r.model << "," << r.regime << "," << fixed4(r.val_accuracy) << ","
        << fixed4(r.val_loss) << "," << fixed4(r.precision) << "," << fixed4(r.recall) << ","
        << fixed4(r.f1) << "," << fixed4(r.test_accuracy);
    return std::move(out).str();
}

} // namespace

void save_report_csv(const MetricsReport& report, const std::filesystem::path& csv_path) {
    atomic_write_file(csv_path, std::string(kCsvHeader) + "\n" + report_csv_row(report) + "\n");
}

ComparisonArtifact render_comparison(const std::vector<MetricsReport>& reports) {
    if (reports.empty()) throw ValidationError("render_comparison: no reports");

    std::vector<const MetricsReport*> rows;
    for (const auto& r : reports) rows.push_back(&r);
    std::sort(rows.begin(), rows.end(), [](const MetricsReport* a, const MetricsReport* b) {
        return std::tie(a->fruit, a->model, a->regime) < std::tie(b->fruit, b->model, b->regime);
    });

    // best test accuracy per fruit gets the star
    std::map<std::string, double> best_acc;
    for (const auto* r : rows) {
        auto [it, inserted] = best_acc.try_emplace(r->fruit, r->test_accuracy);
        if (!inserted) it->second = std::max(it->second, r->test_accuracy);
    }
    auto is_best = [&](const MetricsReport& r) { return r.test_accuracy == best_acc.at(r.fruit); };

    const std::array<std::string, 9> header = {"fruit",  "model",    "regime",
                                               "val_acc", "val_loss", "precision",
                                               "recall", "f1",       "test_acc"};
    std::vector<std::array<std::string, 9>> cells;
    for (const auto* r : rows) {
        const std::string acc = fixed4(r->test_accuracy);
        cells.push_back({r->fruit, r->model, r->regime, fixed4(r->val_accuracy),
                         fixed4(r->val_loss), fixed4(r->precision), fixed4(r->recall),
                         fixed4(r->f1), is_best(*r) ? "*" + acc + "*" : acc});
    }
    std::array<std::size_t, 9> width{};
    for (std::size_t c = 0; c < 9; ++c) {
        width[c] = header[c].size();
        for (const auto& row : cells) width[c] = std::max(width[c], row[c].size());
    }
    std::ostringstream text;
    auto emit_row = [&](const std::array<std::string, 9>& row) {
        for (std::size_t c = 0; c < 9; ++c) {
            text << row[c] << std::string(width[c] - row[c].size(), ' ');
            text << (c + 1 < 9 ? "  " : "");
        }
        text << "\n";
    };
    emit_row(header);
    {
        std::array<std::string, 9> rule;
        for (std::size_t c = 0; c < 9; ++c) rule[c] = std::string(width[c], '-');
        emit_row(rule);
    }
    for (const auto& row : cells) emit_row(row);

    std::ostringstream csv;
    csv << kCsvHeader << ",best\n";
    for (const auto* r : rows) csv << report_csv_row(*r) << "," << (is_best(*r) ? 1 : 0) << "\n";

    ojson j = ojson::array();
    for (const auto* r : rows) {
        ojson row = report_to_json(*r);
        row["best"] = is_best(*r);
        j.push_back(std::move(row));
    }

    ComparisonArtifact artifact;
    artifact.text = std::move(text).str();
    artifact.csv = std::move(csv).str();
    artifact.json = j.dump(2) + "\n";
    return artifact;
}

} // namespace fruitform
