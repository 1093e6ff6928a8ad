#include "fruitform/cli.hpp"

#include "fruitform/common.hpp"
#include "fruitform/data.hpp"
#include "fruitform/evalkit.hpp"
#include "fruitform/nets.hpp"
#include "fruitform/shapegen.hpp"
#include "fruitform/silhouette.hpp"
#include "fruitform/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>

namespace fruitform {

using ojson = nlohmann::ordered_json;

namespace {

std::filesystem::path cache_dir_or(const std::filesystem::path& fallback) {
    if (const char* env = std::getenv("FRUITFORM_CACHE"); env && *env) return env;
    return fallback;
}

SplitRatios parse_ratios(const std::string& text) {
    SplitRatios r;
    double a = 0, b = 0, c = 0;
    if (std::sscanf(text.c_str(), "%lf,%lf,%lf", &a, &b, &c) != 3)
        throw ValidationError("ratios must be three comma-separated numbers, got: " + text);
    r.train = a;
    r.val = b;
    r.test = c;
    return r;
}

// flat JSON config: file values become defaults, explicit flags win
void inject_config_defaults(std::vector<std::string>& args) {
    std::string config_path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
        else if (args[i].starts_with("--config=")) config_path = args[i].substr(9);
    }
    if (config_path.empty()) return;
    ojson j;
    try {
        j = ojson::parse(read_file(config_path));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed config " + config_path + ": " + e.what());
    }
    if (!j.is_object()) throw ValidationError("config must be a flat JSON object");
    for (const auto& [key, value] : j.items()) {
        const std::string flag = "--" + key;
        bool present = false;
        for (const auto& a : args) present |= (a == flag || a.starts_with(flag + "="));
        if (present) continue;
        args.push_back(flag);
        args.push_back(value.is_string() ? value.get<std::string>() : value.dump());
    }
}

void write_run_json(const std::filesystem::path& out_dir, const std::string& subcommand,
                    const ojson& options) {
    ojson j;
    j["subcommand"] = subcommand;
    j["options"] = options;
    atomic_write_file(out_dir / "run.json", j.dump(2) + "\n");
}

TrainingContext context_from_history(const std::filesystem::path& csv,
                                     const std::filesystem::path& sidecar) {
    const LoadedHistory lh = load_history(csv, sidecar);
    if (lh.history.rows.empty()) throw ValidationError("history has no epochs: " + csv.string());
    const auto& row = lh.history.rows.at(static_cast<std::size_t>(lh.history.best_epoch - 1));
    TrainingContext ctx;
    ctx.val_accuracy = row.val_accuracy;
    ctx.val_loss = row.val_loss;
    ctx.config_ref = hex64(hash_file(sidecar));
    return ctx;
}

struct TrainFlags {
    std::string manifest_path;
    std::string synthetic_path;
    std::string real_path;
    std::string masks_dir;
    std::string model = "tiny";
    std::string optimizer = "adam";
    int side = 224;
    double lr = 1e-3;
    double lr_fine = kFinetuneLearningRate;
    int batch = 32;
    int max_epochs = 30;
    std::uint64_t seed = 0;
    std::string backbone_weights; // optional pretrained backbone file
    std::vector<int> mlp_hidden = {256};
    bool replicate_sil = false;
};

TrainConfig make_config(const TrainFlags& f, double lr) {
    TrainConfig cfg;
    cfg.optimizer = optimizer_from_string(f.optimizer);
    cfg.learning_rate = lr;
    cfg.batch_size = f.batch;
    cfg.max_epochs = f.max_epochs;
    cfg.seed = f.seed;
    return cfg;
}

BackboneSpec make_backbone_spec(const TrainFlags& f, int channels) {
    BackboneSpec spec;
    spec.kind = backbone_kind_from_string(f.model);
    spec.input_side = f.side;
    spec.input_channels = channels;
    spec.seed = f.seed;
    if (!f.backbone_weights.empty() && channels == 3) {
        spec.init = BackboneSpec::Init::File;
        spec.weights_file = f.backbone_weights;
    }
    return spec;
}

int cmd_dataset(CLI::App& app, const std::vector<std::string>&);

} // namespace

int run_cli(const std::vector<std::string>& args_in) {
    std::vector<std::string> args = args_in;
    CLI::App app{"fruit-shape grading pipeline"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string out_dir = "out";
    std::string config_path;
    std::uint64_t global_seed = 0;
    app.add_option("--out", out_dir, "output directory")->capture_default_str();
    app.add_option("--config", config_path, "flat JSON config file");
    app.add_option("--seed", global_seed, "default seed for subcommands")->capture_default_str();

    // ---- dataset ----
    auto* dataset = app.add_subcommand("dataset", "manifest construction and balancing");
    dataset->require_subcommand(1);
    dataset->fallthrough();

    auto* ingest = dataset->add_subcommand("ingest", "build a manifest from class directories");
    std::string ingest_root, ingest_fruit = "Apple", ingest_name = "dataset";
    ingest->add_option("--root", ingest_root, "directory with one subdirectory per class")->required();
    ingest->add_option("--fruit", ingest_fruit, "Apple|Mango|Strawberry|Procedural");
    ingest->add_option("--name", ingest_name, "manifest base name");

    auto* balance = dataset->add_subcommand("balance", "plan augmentation to a per-class target");
    std::string balance_manifest;
    std::int64_t balance_target = 5000;
    balance->add_option("--manifest", balance_manifest)->required();
    balance->add_option("--target", balance_target, "records per class")->capture_default_str();

    auto* augment = dataset->add_subcommand("augment", "apply a balancing plan");
    std::string augment_manifest, augment_plan, augment_name = "augmented";
    augment->add_option("--manifest", augment_manifest)->required();
    augment->add_option("--plan", augment_plan)->required();
    augment->add_option("--name", augment_name, "output manifest base name");

    auto* split_cmd = dataset->add_subcommand("split", "stratified train/val/test assignment");
    std::string split_manifest, split_ratios = "0.8,0.1,0.1", split_name = "split";
    std::uint64_t split_seed = 0;
    bool split_seed_set = false;
    split_cmd->add_option("--manifest", split_manifest)->required();
    split_cmd->add_option("--ratios", split_ratios)->capture_default_str();
    split_cmd->add_option("--seed", split_seed)->each([&](const std::string&) { split_seed_set = true; });
    split_cmd->add_option("--name", split_name, "output manifest base name");

    // ---- silhouette ----
    auto* sil = app.add_subcommand("silhouette", "produce or ingest binary fruit masks");
    std::string sil_manifest, sil_mode = "builtin", sil_masks_in, sil_report = "exclusions.csv";
    double sil_tol = 40.0;
    sil->add_option("--manifest", sil_manifest)->required();
    sil->add_option("--mode", sil_mode, "builtin|ingest")->check(CLI::IsMember({"builtin", "ingest"}));
    sil->add_option("--masks-in", sil_masks_in, "directory of external masks (ingest mode)");
    sil->add_option("--tol", sil_tol, "background color distance threshold")->capture_default_str();
    sil->add_option("--report", sil_report, "exclusion report file name")->capture_default_str();

    // ---- shapegen ----
    auto* shape = app.add_subcommand("shapegen", "generate the procedural dataset");
    std::int64_t shape_per_class = 50;
    int shape_side = 64;
    std::uint64_t shape_seed = 0;
    bool shape_seed_set = false;
    std::string shape_style = "uniform";
    GradeThresholds shape_thresholds;
    shape->add_option("--per-class", shape_per_class)->capture_default_str();
    shape->add_option("--side", shape_side)->capture_default_str();
    shape->add_option("--seed", shape_seed)->each([&](const std::string&) { shape_seed_set = true; });
    shape->add_option("--style", shape_style, "uniform|noisy")
        ->check(CLI::IsMember({"uniform", "noisy"}));
    shape->add_option("--t1", shape_thresholds.t1)->capture_default_str();
    shape->add_option("--t2", shape_thresholds.t2)->capture_default_str();
    shape->add_option("--t3", shape_thresholds.t3)->capture_default_str();

    // ---- train ----
    auto* train_cmd = app.add_subcommand("train", "train a classifier");
    train_cmd->require_subcommand(1);
    train_cmd->fallthrough();
    TrainFlags tf;
    auto add_common_train_flags = [&](CLI::App* cmd, bool with_seed = true) {
        cmd->add_option("--model", tf.model, "tiny|cidis|mobilenetv2|vgg16")
            ->check(CLI::IsMember({"tiny", "cidis", "mobilenetv2", "vgg16"}));
        cmd->add_option("--side", tf.side, "network input side")->capture_default_str();
        cmd->add_option("--optimizer", tf.optimizer, "adam|nadam|rmsprop")
            ->check(CLI::IsMember({"adam", "nadam", "rmsprop"}));
        cmd->add_option("--lr", tf.lr)->capture_default_str();
        cmd->add_option("--batch", tf.batch)->capture_default_str();
        cmd->add_option("--max-epochs", tf.max_epochs)->capture_default_str();
        cmd->add_option("--backbone-weights", tf.backbone_weights,
                        "weights file for backbone initialization");
        if (with_seed) cmd->add_option("--seed", tf.seed)->capture_default_str();
    };
    auto* train_single = train_cmd->add_subcommand("single", "RGB-only classifier");
    train_single->add_option("--manifest", tf.manifest_path)->required();
    add_common_train_flags(train_single);

    auto* train_ptft = train_cmd->add_subcommand("pretrain-finetune",
                                                 "synthetic pretrain, then real fine-tune");
    train_ptft->add_option("--synthetic", tf.synthetic_path)->required();
    train_ptft->add_option("--real", tf.real_path)->required();
    train_ptft->add_option("--lr-fine", tf.lr_fine)->capture_default_str();
    add_common_train_flags(train_ptft);

    auto* train_multi_cmd = train_cmd->add_subcommand("multi", "RGB + silhouette fusion classifier");
    train_multi_cmd->add_option("--manifest", tf.manifest_path)->required();
    train_multi_cmd->add_option("--masks", tf.masks_dir, "directory of <id>.mask.png files")->required();
    train_multi_cmd->add_option("--mlp-hidden", tf.mlp_hidden, "hidden layer widths");
    train_multi_cmd->add_flag("--replicate-sil", tf.replicate_sil,
                              "feed the mask as three identical channels");
    add_common_train_flags(train_multi_cmd);

    // ---- eval ----
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a trained model on a split");
    std::string eval_weights, eval_manifest, eval_split = "test", eval_masks, eval_history_csv,
                eval_history_json, eval_name;
    eval_cmd->add_option("--weights", eval_weights)->required();
    eval_cmd->add_option("--manifest", eval_manifest)->required();
    eval_cmd->add_option("--split", eval_split, "train|val|test")
        ->check(CLI::IsMember({"train", "val", "test"}));
    eval_cmd->add_option("--masks", eval_masks, "mask directory (multi-input models)");
    eval_cmd->add_option("--history-csv", eval_history_csv);
    eval_cmd->add_option("--history-json", eval_history_json);
    eval_cmd->add_option("--name", eval_name, "report base name (default fruit_model_regime)");

    // ---- report ----
    auto* report_cmd = app.add_subcommand("report", "comparison table over eval reports");
    std::string report_in;
    report_cmd->add_option("--in", report_in, "directory of *.report.json files")->required();

    try {
        inject_config_defaults(args);
        // CLI11 wants argv-style reversed vector
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) { // --help
            std::cout << app.help() << std::endl;
            return 0;
        }
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    const std::filesystem::path out(out_dir);
    try {
        std::filesystem::create_directories(out);

        if (*ingest) {
            write_run_json(out, "dataset ingest",
                           {{"root", ingest_root}, {"fruit", ingest_fruit}, {"name", ingest_name},
                            {"out", out_dir}});
            const auto result =
                ingest_directory(ingest_root, fruit_kind_from_string(ingest_fruit), default_labeling());
            for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
            const auto path = out / (ingest_name + ".manifest.jsonl");
            save_manifest(result.manifest, path);
            const auto counts = result.manifest.class_counts();
            std::cout << "wrote " << path.string() << " with " << result.manifest.records.size()
                      << " records (";
            for (int c = 0; c < kNumClasses; ++c)
                std::cout << counts[static_cast<std::size_t>(c)] << (c + 1 < kNumClasses ? "/" : ")\n");
            return 0;
        }

        if (*balance) {
            write_run_json(out, "dataset balance",
                           {{"manifest", balance_manifest}, {"target", balance_target}, {"out", out_dir}});
            const auto manifest = load_manifest(balance_manifest);
            const auto plan = plan_balancing(manifest, balance_target);
            const auto path = out / "plan.json";
            save_plan(plan, path);
            std::array<std::int64_t, kNumClasses> per_class{};
            std::map<std::string, DeformityClass> label_of;
            for (const auto& r : manifest.records) label_of[r.id] = r.label;
            for (const auto& [id, tags] : plan.variants)
                per_class[static_cast<std::size_t>(class_code(label_of.at(id)))] +=
                    static_cast<std::int64_t>(tags.size());
            std::cout << "plan sizes ";
            for (int c = 0; c < kNumClasses; ++c)
                std::cout << per_class[static_cast<std::size_t>(c)] << (c + 1 < kNumClasses ? "/" : "\n");
            std::cout << "wrote " << path.string() << "\n";
            return 0;
        }

        if (*augment) {
            write_run_json(out, "dataset augment",
                           {{"manifest", augment_manifest}, {"plan", augment_plan},
                            {"name", augment_name}, {"out", out_dir}});
            const auto manifest = load_manifest(augment_manifest);
            const auto plan = load_plan(augment_plan);
            const auto images_dir = cache_dir_or(out) / "augmented_images";
            const auto augmented = apply_augmentation(manifest, plan, images_dir);
            const auto path = out / (augment_name + ".manifest.jsonl");
            save_manifest(augmented, path);
            std::cout << "wrote " << path.string() << " with " << augmented.records.size()
                      << " records\n";
            return 0;
        }

        if (*split_cmd) {
            const std::uint64_t seed = split_seed_set ? split_seed : global_seed;
            write_run_json(out, "dataset split",
                           {{"manifest", split_manifest}, {"ratios", split_ratios},
                            {"seed", seed}, {"name", split_name}, {"out", out_dir}});
            const auto manifest = load_manifest(split_manifest);
            const auto split = stratified_split(manifest, parse_ratios(split_ratios), seed);
            const auto path = out / (split_name + ".manifest.jsonl");
            save_manifest(split, path);
            std::cout << "wrote " << path.string() << "\n";
            return 0;
        }

        if (*sil) {
            write_run_json(out, "silhouette",
                           {{"manifest", sil_manifest}, {"mode", sil_mode}, {"masks-in", sil_masks_in},
                            {"tol", sil_tol}, {"report", sil_report}, {"out", out_dir}});
            const auto manifest = load_manifest(sil_manifest);
            const auto masks_dir = out / "masks";
            std::filesystem::create_directories(masks_dir);
            std::vector<SilhouetteMask> masks;
            for (const auto& r : manifest.records) {
                if (sil_mode == "builtin") {
                    masks.push_back(segment_uniform_background(load_image(r.path), sil_tol, r.id));
                } else {
                    if (sil_masks_in.empty())
                        throw ValidationError("--masks-in is required in ingest mode");
                    masks.push_back(
                        ingest_external_mask(r, std::filesystem::path(sil_masks_in) / (r.id + ".mask.png")));
                }
            }
            auto filtered = quality_filter(std::move(masks));
            for (const auto& m : filtered.kept) save_mask_png(m, masks_dir);
            save_exclusion_report(filtered.excluded, out / sil_report);
            std::cout << "kept " << filtered.kept.size() << " masks, excluded "
                      << filtered.excluded.size() << "\n";
            return 0;
        }

        if (*shape) {
            const std::uint64_t seed = shape_seed_set ? shape_seed : global_seed;
            write_run_json(out, "shapegen",
                           {{"per-class", shape_per_class}, {"side", shape_side}, {"seed", seed},
                            {"style", shape_style}, {"t1", shape_thresholds.t1},
                            {"t2", shape_thresholds.t2}, {"t3", shape_thresholds.t3},
                            {"out", out_dir}});
            const auto result = build_procedural_dataset(
                shape_per_class, shape_side, shape_thresholds, seed,
                background_style_from_string(shape_style), out);
            const auto path = out / "procedural.manifest.jsonl";
            save_manifest(result.manifest, path);
            std::cout << "wrote " << path.string() << " with " << result.manifest.records.size()
                      << " records\n";
            return 0;
        }

        if (*train_single || *train_ptft || *train_multi_cmd) {
            const std::string regime = *train_single ? "single"
                                       : *train_ptft ? "pretrain-finetune"
                                                     : "multi";
            ojson opts = {{"model", tf.model},       {"side", tf.side},
                          {"optimizer", tf.optimizer}, {"lr", tf.lr},
                          {"batch", tf.batch},       {"max-epochs", tf.max_epochs},
                          {"seed", tf.seed},         {"out", out_dir}};
            if (*train_ptft) {
                opts["synthetic"] = tf.synthetic_path;
                opts["real"] = tf.real_path;
                opts["lr-fine"] = tf.lr_fine;
            } else {
                opts["manifest"] = tf.manifest_path;
            }
            if (*train_multi_cmd) {
                opts["masks"] = tf.masks_dir;
                opts["mlp-hidden"] = tf.mlp_hidden;
                opts["replicate-sil"] = tf.replicate_sil;
            }
            write_run_json(out, "train " + regime, opts);

            if (*train_multi_cmd) {
                MultiInputSpec spec;
                spec.rgb_branch = make_backbone_spec(tf, 3);
                spec.silhouette_branch = make_backbone_spec(tf, tf.replicate_sil ? 3 : 1);
                spec.silhouette_branch.init = BackboneSpec::Init::Random; // file init is rgb-only
                spec.silhouette_branch.weights_file.clear();
                spec.mlp_hidden = tf.mlp_hidden;
                spec.replicate_silhouette_channels = tf.replicate_sil;
                auto model = make_multi_model<float>(spec);
                const auto manifest = load_manifest(tf.manifest_path);
                const TrainConfig cfg = make_config(tf, tf.lr);
                const TrainHistory history = train_multi(model, manifest, tf.masks_dir, cfg);
                save_history(history, cfg, manifest_hash(manifest), out / "history.csv",
                             out / "history.json");
                WeightsFile w = snapshot_weights(model, "multi", multi_spec_to_json(spec));
                w.regime = regime;
                write_weights_file(out / "weights.ffw", w);
            } else if (*train_single) {
                SingleInputSpec spec;
                spec.backbone = make_backbone_spec(tf, 3);
                auto model = make_single_model<float>(spec);
                const auto manifest = load_manifest(tf.manifest_path);
                const TrainConfig cfg = make_config(tf, tf.lr);
                const TrainHistory history = train(model, manifest, cfg);
                save_history(history, cfg, manifest_hash(manifest), out / "history.csv",
                             out / "history.json");
                WeightsFile w = snapshot_weights(model, "single", single_spec_to_json(spec));
                w.regime = regime;
                write_weights_file(out / "weights.ffw", w);
            } else {
                SingleInputSpec spec;
                spec.backbone = make_backbone_spec(tf, 3);
                auto model = make_single_model<float>(spec);
                const auto synthetic = load_manifest(tf.synthetic_path);
                const auto real = load_manifest(tf.real_path);
                const TrainConfig cfg_pre = make_config(tf, tf.lr);
                TrainConfig cfg_fine = make_config(tf, tf.lr_fine);
                cfg_fine.seed = derive_seed(tf.seed, 0x66696e65ULL);
                const PretrainResult result =
                    pretrain_then_finetune(model, synthetic, real, cfg_pre, cfg_fine);
                save_history(result.pretrain, cfg_pre, manifest_hash(synthetic),
                             out / "history_pretrain.csv", out / "history_pretrain.json");
                save_history(result.finetune, cfg_fine, manifest_hash(real), out / "history.csv",
                             out / "history.json");
                WeightsFile w = snapshot_weights(model, "single", single_spec_to_json(spec));
                w.regime = regime;
                write_weights_file(out / "weights.ffw", w);
            }
            std::cout << "wrote " << (out / "weights.ffw").string() << " and history files\n";
            return 0;
        }

        if (*eval_cmd) {
            write_run_json(out, "eval",
                           {{"weights", eval_weights}, {"manifest", eval_manifest},
                            {"split", eval_split}, {"masks", eval_masks},
                            {"history-csv", eval_history_csv}, {"history-json", eval_history_json},
                            {"out", out_dir}});
            const WeightsFile w = read_weights_file(eval_weights);
            const auto manifest = load_manifest(eval_manifest);
            std::optional<TrainingContext> ctx;
            if (!eval_history_csv.empty() || !eval_history_json.empty()) {
                if (eval_history_csv.empty() || eval_history_json.empty())
                    throw ValidationError("--history-csv and --history-json go together");
                ctx = context_from_history(eval_history_csv, eval_history_json);
            }
            MetricsReport report;
            if (w.arch == "multi") {
                if (eval_masks.empty())
                    throw ValidationError("multi-input weights need --masks");
                auto model = make_multi_model<float>(multi_spec_from_json(w.meta_json));
                apply_weights(model, w);
                report = evaluate(model, manifest, split_from_string(eval_split), eval_masks, ctx);
            } else if (w.arch == "single") {
                auto model = make_single_model<float>(single_spec_from_json(w.meta_json));
                apply_weights(model, w);
                report = evaluate(model, manifest, split_from_string(eval_split), ctx);
            } else {
                throw ValidationError("weights file has unknown arch: " + w.arch);
            }
            if (!w.regime.empty()) report.regime = w.regime;
            const std::string name =
                eval_name.empty() ? report.fruit + "_" + report.model + "_" + report.regime
                                  : eval_name;
            save_report(report, out / (name + ".report.json"));
            save_report_csv(report, out / (name + ".report.csv"));
            std::cout << render_comparison({report}).text;
            return 0;
        }

        if (*report_cmd) {
            write_run_json(out, "report", {{"in", report_in}, {"out", out_dir}});
            std::vector<MetricsReport> reports;
            if (std::filesystem::is_directory(report_in)) {
                std::vector<std::filesystem::path> files;
                for (const auto& entry : std::filesystem::directory_iterator(report_in))
                    if (entry.is_regular_file() && entry.path().string().ends_with(".report.json"))
                        files.push_back(entry.path());
                std::sort(files.begin(), files.end());
                for (const auto& f : files) reports.push_back(load_report(f));
            }
            if (reports.empty())
                throw ValidationError("no *.report.json files found under " + report_in);
            const ComparisonArtifact artifact = render_comparison(reports);
            atomic_write_file(out / "comparison.txt", artifact.text);
            atomic_write_file(out / "comparison.csv", artifact.csv);
            atomic_write_file(out / "comparison.json", artifact.json);
            std::cout << artifact.text;
            return 0;
        }

        std::cerr << "error: no subcommand\n";
        return 2;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace fruitform
