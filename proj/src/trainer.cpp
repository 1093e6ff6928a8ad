#include "fruitform/trainer.hpp"

#include "fruitform/common.hpp"
#include "fruitform/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace fruitform {

using ojson = nlohmann::ordered_json;

std::string to_string(OptimizerKind k) {
    switch (k) {
        case OptimizerKind::Adam: return "adam";
        case OptimizerKind::Nadam: return "nadam";
        case OptimizerKind::RmsProp: return "rmsprop";
    }
    return "adam";
}

OptimizerKind optimizer_from_string(const std::string& name) {
    for (auto k : {OptimizerKind::Adam, OptimizerKind::Nadam, OptimizerKind::RmsProp})
        if (to_string(k) == name) return k;
    throw ValidationError("unknown optimizer: " + name);
}

void TrainConfig::validate() const {
    if (max_epochs < 1 || max_epochs > 30)
        throw ValidationError("max_epochs must lie in [1,30], got " + std::to_string(max_epochs));
    if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be positive");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
}

int select_best_epoch(const std::vector<EpochRow>& rows) {
    if (rows.empty()) throw ValidationError("select_best_epoch: empty history");
    std::size_t best = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].val_accuracy > rows[best].val_accuracy ||
            (rows[i].val_accuracy == rows[best].val_accuracy &&
             rows[i].val_loss < rows[best].val_loss))
            best = i;
    }
    return rows[best].epoch;
}

namespace {
constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kRho = 0.9;
constexpr double kEps = 1e-8;
} // namespace

void OptimizerState::step(const std::vector<ParamRef<float>>& params,
                          const GradBuffer<float>& grads) {
    if (params.size() != grads.slots.size())
        throw ValidationError("optimizer: gradient buffer does not match parameters");
    if (v_.empty()) {
        for (const auto& p : params) {
            if (kind_ != OptimizerKind::RmsProp)
                m_.push_back(MatX<float>::Zero(p.value->rows(), p.value->cols()));
            v_.push_back(MatX<float>::Zero(p.value->rows(), p.value->cols()));
        }
    }
    ++t_;
    const auto lr = static_cast<float>(lr_);
    const auto b1 = static_cast<float>(kBeta1);
    const auto b2 = static_cast<float>(kBeta2);
    const auto bc1 = static_cast<float>(1.0 - std::pow(kBeta1, static_cast<double>(t_)));
    const auto bc2 = static_cast<float>(1.0 - std::pow(kBeta2, static_cast<double>(t_)));
    const auto eps = static_cast<float>(kEps);

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = *params[i].value;
        const auto& g = grads.slots[i];
        switch (kind_) {
            case OptimizerKind::Adam: {
                m_[i] = b1 * m_[i] + (1.0f - b1) * g;
                v_[i] = b2 * v_[i] + (1.0f - b2) * g.cwiseProduct(g);
                const MatX<float> mhat = m_[i] / bc1;
                const MatX<float> vhat = v_[i] / bc2;
                p.array() -= lr * mhat.array() / (vhat.array().sqrt() + eps);
                break;
            }
            case OptimizerKind::Nadam: {
                m_[i] = b1 * m_[i] + (1.0f - b1) * g;
                v_[i] = b2 * v_[i] + (1.0f - b2) * g.cwiseProduct(g);
                const MatX<float> mhat = m_[i] / bc1;
                const MatX<float> vhat = v_[i] / bc2;
                const MatX<float> lookahead = b1 * mhat + (1.0f - b1) / bc1 * g;
                p.array() -= lr * lookahead.array() / (vhat.array().sqrt() + eps);
                break;
            }
            case OptimizerKind::RmsProp: {
                const auto rho = static_cast<float>(kRho);
                v_[i] = rho * v_[i] + (1.0f - rho) * g.cwiseProduct(g);
                p.array() -= lr * g.array() / (v_[i].array().sqrt() + eps);
                break;
            }
        }
    }
}

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, 0x65706f63ULL + static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    return order;
}

template <typename Model>
std::vector<MatX<float>> snapshot_params(Model& model) {
    std::vector<MatX<float>> out;
    for (const auto& p : model.params()) out.push_back(*p.value);
    return out;
}

template <typename Model>
void restore_params(Model& model, const std::vector<MatX<float>>& snapshot) {
    auto params = model.params();
    for (std::size_t i = 0; i < params.size(); ++i) *params[i].value = snapshot[i];
}

// Shared epoch loop: `step_batch` runs forward/backward over index ranges and
// returns the summed sample loss; `eval_val` produces (loss, accuracy).
template <typename StepFn, typename EvalFn, typename Model>
TrainHistory run_epochs(Model& model, std::size_t n_train, const TrainConfig& cfg, StepFn step_batch,
                        EvalFn eval_val) {
    TrainHistory history;
    history.steps_per_epoch =
        static_cast<int>((n_train + static_cast<std::size_t>(cfg.batch_size) - 1) /
                         static_cast<std::size_t>(cfg.batch_size));
    std::vector<MatX<float>> best_weights = snapshot_params(model);
    double best_acc = -1.0;
    double best_loss = 0.0;

    OptimizerState opt(cfg.optimizer, cfg.learning_rate);
    auto params = model.params();

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto order = epoch_order(n_train, cfg.seed, epoch);
        double loss_sum = 0.0;
        int batch_index = 0;
        for (std::size_t begin = 0; begin < n_train; begin += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(n_train, begin + static_cast<std::size_t>(cfg.batch_size));
            ++batch_index;
            const double batch_loss = step_batch(order, begin, end, opt, params);
            if (!std::isfinite(batch_loss))
                throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) +
                                    ", batch " + std::to_string(batch_index));
            loss_sum += batch_loss * static_cast<double>(end - begin);
        }

        const auto [val_loss, val_acc] = eval_val();
        EpochRow row;
        row.epoch = epoch;
        row.train_loss = loss_sum / static_cast<double>(n_train);
        row.val_loss = val_loss;
        row.val_accuracy = val_acc;
        history.rows.push_back(row);

        if (val_acc > best_acc || (val_acc == best_acc && val_loss < best_loss)) {
            best_acc = val_acc;
            best_loss = val_loss;
            best_weights = snapshot_params(model);
        }
    }

    restore_params(model, best_weights);
    history.best_epoch = select_best_epoch(history.rows);
    return history;
}

} // namespace

TrainHistory train(SingleInputModel<float>& model, const DatasetManifest& manifest,
                   const TrainConfig& cfg) {
    cfg.validate();
    const int side = model.backbone.input_side;
    const TensorDataset train_set = load_split_tensors(manifest, Split::Train, side);
    const TensorDataset val_set = load_split_tensors(manifest, Split::Val, side);

    auto step = [&](const std::vector<std::size_t>& order, std::size_t begin, std::size_t end,
                    OptimizerState& opt, std::vector<ParamRef<float>>& params) {
        Batch<float> batch;
        std::vector<int> labels;
        for (std::size_t i = begin; i < end; ++i) {
            batch.ids.push_back(train_set.ids[order[i]]);
            batch.x.push_back(train_set.images[order[i]]);
            labels.push_back(train_set.labels[order[i]]);
        }
        GradBuffer<float> grads = GradBuffer<float>::zeros_like(model);
        const float loss = compute_gradients(model, batch, labels, grads);
        opt.step(params, grads);
        return static_cast<double>(loss);
    };
    auto eval_val = [&] {
        const SplitEval e = evaluate_tensors(model, val_set);
        return std::pair<double, double>(e.mean_loss, e.accuracy);
    };
    return run_epochs(model, train_set.size(), cfg, step, eval_val);
}

TrainHistory train_multi(MultiInputModel<float>& model, const DatasetManifest& manifest,
                         const std::filesystem::path& masks_dir, const TrainConfig& cfg) {
    cfg.validate();
    const int side = model.rgb.input_side;
    const TensorDataset train_set = load_split_tensors(manifest, Split::Train, side, &masks_dir);
    const TensorDataset val_set = load_split_tensors(manifest, Split::Val, side, &masks_dir);

    auto step = [&](const std::vector<std::size_t>& order, std::size_t begin, std::size_t end,
                    OptimizerState& opt, std::vector<ParamRef<float>>& params) {
        Batch<float> rgb, sil;
        std::vector<int> labels;
        for (std::size_t i = begin; i < end; ++i) {
            rgb.ids.push_back(train_set.ids[order[i]]);
            rgb.x.push_back(train_set.images[order[i]]);
            sil.ids.push_back(train_set.ids[order[i]]);
            sil.x.push_back(train_set.masks[order[i]]);
            labels.push_back(train_set.labels[order[i]]);
        }
        GradBuffer<float> grads = GradBuffer<float>::zeros_like(model);
        const float loss = compute_gradients(model, rgb, sil, labels, grads);
        opt.step(params, grads);
        return static_cast<double>(loss);
    };
    auto eval_val = [&] {
        const SplitEval e = evaluate_tensors(model, val_set);
        return std::pair<double, double>(e.mean_loss, e.accuracy);
    };
    return run_epochs(model, train_set.size(), cfg, step, eval_val);
}

PretrainResult pretrain_then_finetune(SingleInputModel<float>& model,
                                      const DatasetManifest& synthetic,
                                      const DatasetManifest& real, const TrainConfig& cfg_pre,
                                      const TrainConfig& cfg_fine) {
    cfg_pre.validate();
    cfg_fine.validate();
    const auto syn_counts = synthetic.class_counts();
    const auto real_counts = real.class_counts();
    for (int c = 0; c < kNumClasses; ++c)
        if ((syn_counts[static_cast<std::size_t>(c)] > 0) !=
            (real_counts[static_cast<std::size_t>(c)] > 0))
            throw ValidationError("taxonomy mismatch: class " + to_string(class_from_code(c)) +
                                  " present in only one of the two manifests");

    PretrainResult result;
    result.pretrain = train(model, synthetic, cfg_pre);
    result.handoff_hash = hash_params(model);
    result.finetune = train(model, real, cfg_fine);
    return result;
}

// --- history files -----------------------------------------------------------

void save_history(const TrainHistory& history, const TrainConfig& cfg, std::uint64_t dataset_hash,
                  const std::filesystem::path& csv_path, const std::filesystem::path& sidecar_path) {
    std::ostringstream csv;
    csv << "epoch,train_loss,val_loss,val_accuracy\n";
    for (const auto& row : history.rows) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g\n", row.epoch, row.train_loss,
                      row.val_loss, row.val_accuracy);
        csv << buf;
    }
    atomic_write_file(csv_path, csv.str());

    ojson sidecar;
    sidecar["best_epoch"] = history.best_epoch;
    sidecar["config"] = {{"optimizer", to_string(cfg.optimizer)},
                         {"learning_rate", cfg.learning_rate},
                         {"batch_size", cfg.batch_size},
                         {"max_epochs", cfg.max_epochs}};
    sidecar["seed"] = cfg.seed;
    sidecar["dataset_hash"] = hex64(dataset_hash);
    atomic_write_file(sidecar_path, sidecar.dump(2) + "\n");
}

LoadedHistory load_history(const std::filesystem::path& csv_path,
                           const std::filesystem::path& sidecar_path) {
    LoadedHistory out;
    std::ifstream in(csv_path);
    if (!in) throw IoError("cannot open history: " + csv_path.string());
    std::string line;
    std::getline(in, line); // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        EpochRow row;
        if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf", &row.epoch, &row.train_loss, &row.val_loss,
                        &row.val_accuracy) != 4)
            throw ValidationError("malformed history row: " + line);
        out.history.rows.push_back(row);
    }
    try {
        const auto j = ojson::parse(read_file(sidecar_path));
        out.history.best_epoch = j.at("best_epoch").get<int>();
        out.config.optimizer = optimizer_from_string(j.at("config").at("optimizer").get<std::string>());
        out.config.learning_rate = j.at("config").at("learning_rate").get<double>();
        out.config.batch_size = j.at("config").at("batch_size").get<int>();
        out.config.max_epochs = j.at("config").at("max_epochs").get<int>();
        out.config.seed = j.at("seed").get<std::uint64_t>();
        out.dataset_hash = j.at("dataset_hash").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed history sidecar " + sidecar_path.string() + ": " + e.what());
    }
    return out;
}

} // namespace fruitform
