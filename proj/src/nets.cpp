#include "fruitform/nets.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>

namespace fruitform {

using ojson = nlohmann::ordered_json;

std::string to_string(BackboneKind k) {
    switch (k) {
        case BackboneKind::Tiny: return "tiny";
        case BackboneKind::CidisLike: return "cidis";
        case BackboneKind::MobileNetV2Like: return "mobilenetv2";
        case BackboneKind::Vgg16Like: return "vgg16";
    }
    return "tiny";
}

BackboneKind backbone_kind_from_string(const std::string& name) {
    for (auto k : {BackboneKind::Tiny, BackboneKind::CidisLike, BackboneKind::MobileNetV2Like,
                   BackboneKind::Vgg16Like})
        if (to_string(k) == name) return k;
    throw ValidationError("unknown backbone kind: " + name);
}

int default_feature_dim(BackboneKind k) {
    switch (k) {
        case BackboneKind::Tiny: return 32;
        case BackboneKind::CidisLike: return 128;
        case BackboneKind::MobileNetV2Like: return 1280;
        case BackboneKind::Vgg16Like: return 512;
    }
    return 32;
}

namespace {

template <typename S>
void he_init(MatX<S>& w, Rng& rng, double fan_in) {
    const double std_dev = std::sqrt(2.0 / fan_in);
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = static_cast<S>(rng.normal(0.0, std_dev));
}

template <typename S>
void conv_block(Backbone<S>& net, const std::string& name, int in_ch, int out_ch) {
    net.stages.push_back(std::make_unique<Conv2d<S>>(name, in_ch, out_ch, 3, 1, 1));
    net.stages.push_back(std::make_unique<MaxPool2x2<S>>());
    net.stages.push_back(std::make_unique<ReluStage<S>>());
}

// He-normal weights (fan_in is the weight matrix row count for every layer
// type here), zero biases; a single pass in parameter order keeps Random(seed)
// bit-reproducible for every backbone kind.
template <typename S>
void randomize_backbone(Backbone<S>& net, std::uint64_t seed) {
    std::vector<ParamRef<S>> params;
    net.collect_params(params, "");
    Rng rng(seed);
    for (auto& p : params) {
        if (p.name.ends_with(".bias")) {
            p.value->setZero();
        } else {
            he_init(*p.value, rng, static_cast<double>(p.value->rows()));
        }
    }
}

} // namespace

template <typename S>
Backbone<S> build_backbone(const BackboneSpec& spec) {
    if (spec.input_channels != 1 && spec.input_channels != 3)
        throw ValidationError("backbone input_channels must be 1 or 3");
    if (spec.input_side < 8) throw ValidationError("backbone input_side too small");

    Backbone<S> net;
    net.input_channels = spec.input_channels;
    net.input_side = spec.input_side;
    const int feat = spec.effective_feature_dim();
    net.feature_dim = feat;

    switch (spec.kind) {
        case BackboneKind::Tiny:
            conv_block(net, "conv1", spec.input_channels, 8);
            conv_block(net, "conv2", 8, feat);
            break;
        case BackboneKind::CidisLike:
            conv_block(net, "conv1", spec.input_channels, 32);
            conv_block(net, "conv2", 32, 64);
            conv_block(net, "conv3", 64, 128);
            conv_block(net, "conv4", 128, feat);
            break;
        case BackboneKind::Vgg16Like: {
            std::vector<std::vector<int>> groups = {{64, 64}, {128, 128}, {256, 256, 256},
                                                    {512, 512, 512}, {512, 512, 512}};
            groups.back().back() = feat;
            int in_ch = spec.input_channels;
            for (std::size_t g = 0; g < groups.size(); ++g) {
                for (std::size_t l = 0; l < groups[g].size(); ++l) {
                    const int out_ch = groups[g][l];
                    const std::string name =
                        "conv" + std::to_string(g + 1) + "_" + std::to_string(l + 1);
                    net.stages.push_back(std::make_unique<Conv2d<S>>(name, in_ch, out_ch, 3, 1, 1));
                    net.stages.push_back(std::make_unique<ReluStage<S>>());
                    in_ch = out_ch;
                }
                net.stages.push_back(std::make_unique<MaxPool2x2<S>>());
            }
            break;
        }
        case BackboneKind::MobileNetV2Like: {
            struct Row {
                int expand, out, repeat, stride;
            };
            const Row rows[] = {{1, 16, 1, 1}, {6, 24, 2, 2}, {6, 32, 3, 2}, {6, 64, 4, 2},
                                {6, 96, 3, 1}, {6, 160, 3, 2}, {6, 320, 1, 1}};
            net.stages.push_back(std::make_unique<Conv2d<S>>("stem", spec.input_channels, 32, 3, 2, 1));
            net.stages.push_back(std::make_unique<ReluStage<S>>(S(6)));
            int in_ch = 32;
            int block = 0;
            for (const auto& row : rows)
                for (int r = 0; r < row.repeat; ++r) {
                    const int stride = r == 0 ? row.stride : 1;
                    net.stages.push_back(std::make_unique<InvertedResidual<S>>(
                        "ir" + std::to_string(++block), in_ch, row.out, stride, row.expand));
                    in_ch = row.out;
                }
            net.stages.push_back(std::make_unique<Conv2d<S>>("head1x1", in_ch, feat, 1, 1, 0));
            net.stages.push_back(std::make_unique<ReluStage<S>>(S(6)));
            break;
        }
    }
    randomize_backbone(net, derive_seed(spec.seed, 0x6e657473ULL));

    if (spec.init == BackboneSpec::Init::File) {
        if (spec.weights_file.empty())
            throw ValidationError("backbone init is File but weights_file is empty");
        Backbone<S>* self = &net;
        struct Adapter {
            Backbone<S>* b;
            std::vector<ParamRef<S>> params() {
                std::vector<ParamRef<S>> out;
                b->collect_params(out, "");
                return out;
            }
        } adapter{self};
        apply_weights(adapter, read_weights_file(spec.weights_file));
    }
    return net;
}

namespace {

template <typename S>
Mlp<S> make_head(int in_dim, const std::vector<int>& hidden, std::uint64_t seed) {
    Mlp<S> head;
    Rng rng(derive_seed(seed, 0x68656164ULL));
    int dim = in_dim;
    int idx = 0;
    for (int width : hidden) {
        if (width < 1) throw ValidationError("mlp hidden width must be >= 1");
        auto dense = std::make_unique<Dense<S>>("fc" + std::to_string(++idx), dim, width);
        he_init(dense->weight(), rng, dim);
        head.stages.push_back(std::move(dense));
        head.stages.push_back(std::make_unique<ReluVec<S>>());
        dim = width;
    }
    auto out = std::make_unique<Dense<S>>("out", dim, 4);
    he_init(out->weight(), rng, dim);
    head.stages.push_back(std::move(out));
    return head;
}

} // namespace

template <typename S>
SingleInputModel<S> make_single_model(const SingleInputSpec& spec) {
    SingleInputModel<S> model;
    model.spec = spec;
    model.backbone = build_backbone<S>(spec.backbone);
    model.head = make_head<S>(model.backbone.feature_dim, {}, spec.backbone.seed);
    return model;
}

template <typename S>
MultiInputModel<S> make_multi_model(const MultiInputSpec& spec) {
    if (spec.rgb_branch.input_channels != 3)
        throw ValidationError("multi-input rgb branch must take 3 channels");
    const int sil_ch = spec.replicate_silhouette_channels ? 3 : 1;
    if (spec.silhouette_branch.input_channels != sil_ch)
        throw ValidationError("silhouette branch must take " + std::to_string(sil_ch) +
                              " channel(s) given the replication flag");
    if (spec.rgb_branch.input_side != spec.silhouette_branch.input_side)
        throw ValidationError("multi-input branches must share the input side");

    MultiInputModel<S> model;
    model.spec = spec;
    model.rgb = build_backbone<S>(spec.rgb_branch);
    model.sil = build_backbone<S>(spec.silhouette_branch);
    model.head =
        make_head<S>(model.rgb.feature_dim + model.sil.feature_dim, spec.mlp_hidden,
                     derive_seed(spec.rgb_branch.seed, spec.silhouette_branch.seed));
    return model;
}

template Backbone<float> build_backbone<float>(const BackboneSpec&);
template Backbone<double> build_backbone<double>(const BackboneSpec&);
template SingleInputModel<float> make_single_model<float>(const SingleInputSpec&);
template SingleInputModel<double> make_single_model<double>(const SingleInputSpec&);
template MultiInputModel<float> make_multi_model<float>(const MultiInputSpec&);
template MultiInputModel<double> make_multi_model<double>(const MultiInputSpec&);

// --- gradient checking -----------------------------------------------------

GradCheckResult gradient_check(SingleInputModel<double>& model, const Batch<double>& batch,
                               const std::vector<int>& labels, int k_per_layer, std::uint64_t seed) {
    GradBuffer<double> grads = GradBuffer<double>::zeros_like(model);
    compute_gradients(model, batch, labels, grads);
    auto loss = [&] {
        double total = 0.0;
        for (std::size_t i = 0; i < batch.size(); ++i)
            total += cross_entropy<double>(model.logits(batch.x[i]), labels[i], nullptr);
        return total / static_cast<double>(batch.size());
    };
    return finite_difference_check(model, grads.slots, loss, k_per_layer, seed);
}

GradCheckResult gradient_check(MultiInputModel<double>& model, const Batch<double>& rgb,
                               const Batch<double>& sil, const std::vector<int>& labels,
                               int k_per_layer, std::uint64_t seed) {
    GradBuffer<double> grads = GradBuffer<double>::zeros_like(model);
    compute_gradients(model, rgb, sil, labels, grads);
    auto loss = [&] {
        double total = 0.0;
        for (std::size_t i = 0; i < rgb.size(); ++i)
            total += cross_entropy<double>(model.logits(rgb.x[i], sil.x[i]), labels[i], nullptr);
        return total / static_cast<double>(rgb.size());
    };
    return finite_difference_check(model, grads.slots, loss, k_per_layer, seed);
}

// --- weights files ----------------------------------------------------------

namespace {
constexpr char kWeightsMagic[8] = {'F', 'R', 'U', 'I', 'T', 'F', 'W', '1'};
}

void write_weights_file(const std::filesystem::path& path, const WeightsFile& w) {
    ojson meta;
    meta["format"] = 1;
    meta["arch"] = w.arch;
    meta["regime"] = w.regime;
    meta["spec"] = w.meta_json.empty() ? ojson::object() : ojson::parse(w.meta_json);
    ojson manifest = ojson::object();
    ojson order = ojson::array();
    for (const auto& name : w.order) {
        const auto& dims = w.tensors.at(name).first;
        manifest[name] = dims;
        order.push_back(name);
    }
    meta["manifest"] = std::move(manifest);
    meta["order"] = std::move(order);
    const std::string header = meta.dump();

    std::string blob;
    blob.reserve(16 + header.size());
    blob.append(kWeightsMagic, sizeof(kWeightsMagic));
    const std::uint64_t len = header.size();
    blob.append(reinterpret_cast<const char*>(&len), sizeof(len));
    blob.append(header);
    for (const auto& name : w.order) {
        const auto& flat = w.tensors.at(name).second;
        blob.append(reinterpret_cast<const char*>(flat.data()), flat.size() * sizeof(float));
    }
    atomic_write_file(path, blob);
}

WeightsFile read_weights_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open weights file: " + path.string());
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kWeightsMagic, sizeof(magic)) != 0)
        throw ValidationError("not a weights file: " + path.string());
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string header(len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(len));
    if (!in) throw IoError("truncated weights file: " + path.string());

    WeightsFile w;
    try {
        const auto meta = ojson::parse(header);
        w.arch = meta.value("arch", "");
        w.regime = meta.value("regime", "");
        if (meta.contains("spec")) w.meta_json = meta["spec"].dump();
        for (const auto& name : meta.at("order")) {
            const std::string n = name.get<std::string>();
            std::vector<std::int64_t> dims = meta.at("manifest").at(n).get<std::vector<std::int64_t>>();
            std::int64_t count = 1;
            for (auto d : dims) count *= d;
            std::vector<float> flat(static_cast<std::size_t>(count));
            in.read(reinterpret_cast<char*>(flat.data()),
                    static_cast<std::streamsize>(flat.size() * sizeof(float)));
            if (!in) throw IoError("truncated weights data in " + path.string() + " at " + n);
            w.order.push_back(n);
            w.tensors[n] = {std::move(dims), std::move(flat)};
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed weights header in " + path.string() + ": " + e.what());
    }
    return w;
}

// --- spec (de)serialization --------------------------------------------------

namespace {

ojson backbone_spec_to_json(const BackboneSpec& s) {
    ojson j;
    j["kind"] = to_string(s.kind);
    j["input_side"] = s.input_side;
    j["input_channels"] = s.input_channels;
    j["feature_dim"] = s.feature_dim;
    j["seed"] = s.seed;
    return j;
}

BackboneSpec backbone_spec_from_json(const ojson& j) {
    BackboneSpec s;
    s.kind = backbone_kind_from_string(j.at("kind").get<std::string>());
    s.input_side = j.at("input_side").get<int>();
    s.input_channels = j.at("input_channels").get<int>();
    s.feature_dim = j.at("feature_dim").get<int>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

} // namespace

std::string single_spec_to_json(const SingleInputSpec& spec) {
    ojson j;
    j["backbone"] = backbone_spec_to_json(spec.backbone);
    return j.dump();
}

std::string multi_spec_to_json(const MultiInputSpec& spec) {
    ojson j;
    j["rgb_branch"] = backbone_spec_to_json(spec.rgb_branch);
    j["silhouette_branch"] = backbone_spec_to_json(spec.silhouette_branch);
    j["mlp_hidden"] = spec.mlp_hidden;
    j["replicate_silhouette_channels"] = spec.replicate_silhouette_channels;
    return j.dump();
}

SingleInputSpec single_spec_from_json(const std::string& json_text) {
    try {
        const auto j = ojson::parse(json_text);
        SingleInputSpec s;
        s.backbone = backbone_spec_from_json(j.at("backbone"));
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed single-input spec: ") + e.what());
    }
}

MultiInputSpec multi_spec_from_json(const std::string& json_text) {
    try {
        const auto j = ojson::parse(json_text);
        MultiInputSpec s;
        s.rgb_branch = backbone_spec_from_json(j.at("rgb_branch"));
        s.silhouette_branch = backbone_spec_from_json(j.at("silhouette_branch"));
        s.mlp_hidden = j.at("mlp_hidden").get<std::vector<int>>();
        s.replicate_silhouette_channels = j.at("replicate_silhouette_channels").get<bool>();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed multi-input spec: ") + e.what());
    }
}

} // namespace fruitform
