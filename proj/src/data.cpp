#include "fruitform/data.hpp"

#include "fruitform/common.hpp"
#include "fruitform/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace fruitform {

using ojson = nlohmann::ordered_json;

// --- enum conversions ------------------------------------------------------

std::string to_string(DeformityClass c) {
    switch (c) {
        case DeformityClass::ExtraClass: return "ExtraClass";
        case DeformityClass::FirstClass: return "FirstClass";
        case DeformityClass::SecondClass: return "SecondClass";
        case DeformityClass::Ungraded: return "Ungraded";
    }
    return "Ungraded";
}

DeformityClass deformity_class_from_string(const std::string& name) {
    for (auto c : kAllClasses)
        if (to_string(c) == name) return c;
    throw ValidationError("unknown deformity class: " + name);
}

DeformityClass class_from_code(int code) {
    if (code < 0 || code >= kNumClasses)
        throw ValidationError("class code out of range: " + std::to_string(code));
    return static_cast<DeformityClass>(code);
}

std::string to_string(FruitKind k) {
    switch (k) {
        case FruitKind::Apple: return "Apple";
        case FruitKind::Mango: return "Mango";
        case FruitKind::Strawberry: return "Strawberry";
        case FruitKind::Procedural: return "Procedural";
    }
    return "Procedural";
}

FruitKind fruit_kind_from_string(const std::string& name) {
    for (auto k : {FruitKind::Apple, FruitKind::Mango, FruitKind::Strawberry, FruitKind::Procedural})
        if (to_string(k) == name) return k;
    throw ValidationError("unknown fruit kind: " + name);
}

std::string to_string(RecordSource s) {
    switch (s) {
        case RecordSource::Real: return "Real";
        case RecordSource::Synthetic: return "Synthetic";
        case RecordSource::Augmented: return "Augmented";
    }
    return "Real";
}

RecordSource record_source_from_string(const std::string& name) {
    for (auto s : {RecordSource::Real, RecordSource::Synthetic, RecordSource::Augmented})
        if (to_string(s) == name) return s;
    throw ValidationError("unknown record source: " + name);
}

std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "train";
}

Split split_from_string(const std::string& name) {
    for (auto s : {Split::Train, Split::Val, Split::Test})
        if (to_string(s) == name) return s;
    throw ValidationError("unknown split: " + name);
}

// --- manifest --------------------------------------------------------------

std::array<std::int64_t, kNumClasses> DatasetManifest::class_counts() const {
    std::array<std::int64_t, kNumClasses> counts{};
    for (const auto& r : records) ++counts[static_cast<std::size_t>(class_code(r.label))];
    return counts;
}

const ImageRecord* DatasetManifest::find(const std::string& id) const {
    for (const auto& r : records)
        if (r.id == id) return &r;
    return nullptr;
}

void DatasetManifest::validate() const {
    std::unordered_map<std::string, const ImageRecord*> by_id;
    by_id.reserve(records.size());
    for (const auto& r : records) {
        if (r.id.empty()) throw ValidationError("record with empty id");
        if (r.id.find('/') != std::string::npos || r.id.find('\\') != std::string::npos)
            throw ValidationError("record id contains a path separator: " + r.id);
        if (!by_id.emplace(r.id, &r).second) throw ValidationError("duplicate record id: " + r.id);
    }
    for (const auto& r : records) {
        const bool aug = r.source == RecordSource::Augmented;
        if (aug != (r.parent_id.has_value() && r.transform_tag.has_value()))
            throw ValidationError("record " + r.id +
                                  ": Augmented iff parent_id and transform_tag are present");
        if (r.parent_id) {
            auto it = by_id.find(*r.parent_id);
            if (it == by_id.end())
                throw ValidationError("record " + r.id + ": parent_id does not resolve: " + *r.parent_id);
            if (it->second->label != r.label)
                throw ValidationError("record " + r.id + ": label differs from parent " + *r.parent_id);
            dihedral_from_string(*r.transform_tag);
        }
    }
    for (const auto& [id, s] : splits) {
        (void)s;
        if (!by_id.count(id)) throw ValidationError("split assignment for unknown record id: " + id);
    }
}

namespace {

// Paths under `base` are stored relative to it, so a dataset directory is
// relocatable and rerun manifests are byte-identical.
std::string portable_path(const std::string& path, const std::filesystem::path& base) {
    if (base.empty()) return path;
    std::error_code ec;
    const auto rel = std::filesystem::relative(path, base, ec);
    if (ec || rel.empty() || rel.native().starts_with("..")) return path;
    return rel.generic_string();
}

ojson record_to_json(const ImageRecord& r, const DatasetManifest& m,
                     const std::filesystem::path& base) {
    ojson j;
    j["id"] = r.id;
    j["fruit"] = to_string(r.fruit);
    j["label"] = to_string(r.label);
    j["source"] = to_string(r.source);
    j["parent_id"] = r.parent_id ? ojson(*r.parent_id) : ojson(nullptr);
    j["transform_tag"] = r.transform_tag ? ojson(*r.transform_tag) : ojson(nullptr);
    j["path"] = portable_path(r.path, base);
    j["width"] = r.width;
    j["height"] = r.height;
    auto it = m.splits.find(r.id);
    j["split"] = it != m.splits.end() ? ojson(to_string(it->second)) : ojson(nullptr);
    return j;
}

std::string manifest_to_jsonl(const DatasetManifest& m, const std::filesystem::path& base) {
    ojson header;
    header["version"] = 1;
    header["fruit"] = to_string(m.fruit);
    header["classes"] = ojson::array();
    for (auto c : kAllClasses) header["classes"].push_back(to_string(c));
    std::ostringstream out;
    out << header.dump() << "\n";
    for (const auto& r : m.records) out << record_to_json(r, m, base).dump() << "\n";
    return std::move(out).str();
}

} // namespace

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    m.validate();
    atomic_write_file(path, manifest_to_jsonl(m, std::filesystem::absolute(path).parent_path()));
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest: " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("manifest is empty: " + path.string());

    DatasetManifest m;
    try {
        const auto header = ojson::parse(line);
        if (header.value("version", 0) != 1)
            throw ValidationError("unsupported manifest version in " + path.string());
        m.fruit = fruit_kind_from_string(header.at("fruit").get<std::string>());
        std::size_t lineno = 1;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            const auto j = ojson::parse(line);
            ImageRecord r;
            r.id = j.at("id").get<std::string>();
            r.fruit = fruit_kind_from_string(j.at("fruit").get<std::string>());
            r.label = deformity_class_from_string(j.at("label").get<std::string>());
            r.source = record_source_from_string(j.at("source").get<std::string>());
            if (!j.at("parent_id").is_null()) r.parent_id = j.at("parent_id").get<std::string>();
            if (!j.at("transform_tag").is_null()) r.transform_tag = j.at("transform_tag").get<std::string>();
            r.path = j.at("path").get<std::string>();
            if (std::filesystem::path(r.path).is_relative())
                r.path = (std::filesystem::absolute(path).parent_path() / r.path).string();
            r.width = j.at("width").get<int>();
            r.height = j.at("height").get<int>();
            if (!j.at("split").is_null()) m.splits[r.id] = split_from_string(j.at("split").get<std::string>());
            m.records.push_back(std::move(r));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed manifest " + path.string() + ": " + e.what());
    }
    m.validate();
    return m;
}

std::uint64_t manifest_hash(const DatasetManifest& m) { return fnv1a64(manifest_to_jsonl(m, {})); }

// --- ingestion -------------------------------------------------------------

std::map<std::string, DeformityClass> default_labeling() {
    std::map<std::string, DeformityClass> map;
    for (auto c : kAllClasses) map[to_string(c)] = c;
    return map;
}

IngestResult ingest_directory(const std::filesystem::path& root, FruitKind fruit,
                              const std::map<std::string, DeformityClass>& labeling) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw IoError("dataset root is not a directory: " + root.string());
    if (labeling.empty()) throw ValidationError("labeling map is empty");

    std::vector<std::string> missing;
    for (const auto& [dir, cls] : labeling) {
        (void)cls;
        if (!fs::is_directory(root / dir)) missing.push_back(dir);
    }
    if (!missing.empty()) {
        std::string msg = "missing class subdirectories under " + root.string() + ":";
        for (const auto& d : missing) msg += " " + d;
        throw ValidationError(msg);
    }

    IngestResult result;
    result.manifest.fruit = fruit;
    for (const auto& [dir, cls] : labeling) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(root / dir))
            if (entry.is_regular_file()) files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        for (const auto& file : files) {
            ImageRecord r;
            r.id = dir + "__" + file.filename().string();
            r.fruit = fruit;
            r.label = cls;
            r.source = RecordSource::Real;
            r.path = file.string();
            try {
                const ImageU8 img = load_image(file);
                r.width = img.width();
                r.height = img.height();
            } catch (const std::exception& e) {
                result.warnings.push_back("skipped " + file.string() + ": " + e.what());
                continue;
            }
            result.manifest.records.push_back(std::move(r));
        }
    }
    result.manifest.validate();
    return result;
}

// --- balancing -------------------------------------------------------------

std::int64_t AugmentationPlan::total_planned() const {
    std::int64_t n = 0;
    for (const auto& [id, tags] : variants) {
        (void)id;
        n += static_cast<std::int64_t>(tags.size());
    }
    return n;
}

AugmentationPlan plan_balancing(const DatasetManifest& manifest, std::int64_t target_per_class) {
    if (target_per_class < 1) throw ValidationError("target_per_class must be >= 1");
    manifest.validate();

    struct SourceState {
        const ImageRecord* rec;
        std::set<DihedralTag> used; // identity plus existing children
        std::vector<DihedralTag> assigned;
    };

    AugmentationPlan plan;
    plan.target_per_class = target_per_class;

    for (auto cls : kAllClasses) {
        std::vector<SourceState> sources;
        std::int64_t class_total = 0;
        for (const auto& r : manifest.records) {
            if (r.label != cls) continue;
            ++class_total;
            if (r.source != RecordSource::Augmented)
                sources.push_back({&r, {DihedralTag::Identity}, {}});
        }
        if (class_total == 0) continue;
        for (const auto& r : manifest.records)
            if (r.label == cls && r.parent_id)
                for (auto& s : sources)
                    if (s.rec->id == *r.parent_id) s.used.insert(dihedral_from_string(*r.transform_tag));

        std::int64_t needed = target_per_class - class_total;
        if (needed <= 0) continue;

        std::int64_t capacity = 0;
        for (const auto& s : sources) capacity += 8 - static_cast<std::int64_t>(s.used.size());
        if (capacity < needed)
            throw ValidationError("class " + to_string(cls) + " too small to balance: needs " +
                                  std::to_string(needed) + " variants but only " +
                                  std::to_string(capacity) + " are possible at 8x");

        // round-robin keeps per-source counts within one of each other
        while (needed > 0) {
            bool progressed = false;
            for (auto& s : sources) {
                if (needed == 0) break;
                DihedralTag next{};
                bool found = false;
                for (auto t : kDihedralTags) {
                    if (s.used.count(t)) continue;
                    bool already = false;
                    for (auto a : s.assigned) already |= (a == t);
                    if (already) continue;
                    next = t;
                    found = true;
                    break;
                }
                if (!found) continue;
                s.assigned.push_back(next);
                --needed;
                progressed = true;
            }
            if (!progressed) break;
        }
        for (auto& s : sources)
            if (!s.assigned.empty()) plan.variants.emplace_back(s.rec->id, std::move(s.assigned));
    }
    return plan;
}

void save_plan(const AugmentationPlan& plan, const std::filesystem::path& path) {
    ojson j;
    j["target_per_class"] = plan.target_per_class;
    j["variants"] = ojson::array();
    for (const auto& [id, tags] : plan.variants) {
        ojson v;
        v["id"] = id;
        v["tags"] = ojson::array();
        for (auto t : tags) v["tags"].push_back(to_string(t));
        j["variants"].push_back(std::move(v));
    }
    atomic_write_file(path, j.dump(2) + "\n");
}

AugmentationPlan load_plan(const std::filesystem::path& path) {
    AugmentationPlan plan;
    try {
        const auto j = ojson::parse(read_file(path));
        plan.target_per_class = j.at("target_per_class").get<std::int64_t>();
        for (const auto& v : j.at("variants")) {
            std::vector<DihedralTag> tags;
            for (const auto& t : v.at("tags")) tags.push_back(dihedral_from_string(t.get<std::string>()));
            plan.variants.emplace_back(v.at("id").get<std::string>(), std::move(tags));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed plan " + path.string() + ": " + e.what());
    }
    return plan;
}

DatasetManifest apply_augmentation(const DatasetManifest& manifest, const AugmentationPlan& plan,
                                   const std::filesystem::path& out_dir) {
    manifest.validate();
    std::unordered_map<std::string, const ImageRecord*> by_id;
    for (const auto& r : manifest.records) by_id[r.id] = &r;

    std::int64_t total = plan.total_planned();
    std::int64_t written = 0;

    DatasetManifest out = manifest;
    for (const auto& [source_id, tags] : plan.variants) {
        auto it = by_id.find(source_id);
        if (it == by_id.end()) throw ValidationError("plan names unknown record: " + source_id);
        const ImageRecord& parent = *it->second;
        if (parent.source == RecordSource::Augmented)
            throw ValidationError("plan would augment an already-augmented record: " + source_id);
        {
            std::set<DihedralTag> seen;
            for (auto t : tags) {
                if (t == DihedralTag::Identity)
                    throw ValidationError("plan assigns identity as a variant for " + source_id);
                if (!seen.insert(t).second)
                    throw ValidationError("duplicate transform tag for " + source_id);
            }
            if (tags.size() > 7)
                throw ValidationError("more than 8 total variants for " + source_id);
        }

        ImageU8 img;
        try {
            img = load_image(parent.path);
        } catch (const std::exception& e) {
            throw IoError("augmentation aborted after " + std::to_string(written) + "/" +
                          std::to_string(total) + " variants; cannot read " + parent.path + ": " +
                          e.what());
        }
        for (auto tag : tags) {
            const std::string child_id = parent.id + "__" + to_string(tag);
            if (out.find(child_id) != nullptr)
                throw ValidationError("augmented id already exists: " + child_id);
            const ImageU8 child_img = apply_dihedral(img, tag);
            const auto child_path = out_dir / (child_id + ".png");
            try {
                save_png(child_path, child_img);
            } catch (const std::exception& e) {
                throw IoError("augmentation aborted after " + std::to_string(written) + "/" +
                              std::to_string(total) + " variants: " + e.what());
            }
            ++written;
            ImageRecord child;
            child.id = child_id;
            child.fruit = parent.fruit;
            child.label = parent.label;
            child.source = RecordSource::Augmented;
            child.parent_id = parent.id;
            child.transform_tag = to_string(tag);
            child.path = child_path.string();
            child.width = child_img.width();
            child.height = child_img.height();
            auto split_it = out.splits.find(parent.id);
            if (split_it != out.splits.end()) out.splits[child.id] = split_it->second;
            out.records.push_back(std::move(child));
        }
    }
    out.validate();
    return out;
}

// --- splitting -------------------------------------------------------------

namespace {

std::array<std::int64_t, 3> largest_remainder(std::int64_t n, const SplitRatios& ratios) {
    const std::array<double, 3> r = {ratios.train, ratios.val, ratios.test};
    std::array<std::int64_t, 3> out{};
    std::array<double, 3> frac{};
    std::int64_t assigned = 0;
    for (int s = 0; s < 3; ++s) {
        const double q = static_cast<double>(n) * r[s];
        out[s] = static_cast<std::int64_t>(std::floor(q));
        frac[s] = q - std::floor(q);
        assigned += out[s];
    }
    std::array<int, 3> order = {0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
    for (std::int64_t k = 0; k < n - assigned; ++k) ++out[order[static_cast<std::size_t>(k % 3)]];
    return out;
}

// Exact subset-sum over family sizes; returns indices into `sizes` whose
// total is the achievable sum closest to `target` (ties favor the smaller).
std::vector<std::size_t> pick_families(const std::vector<std::int64_t>& sizes, std::int64_t target) {
    std::int64_t total = 0;
    for (auto s : sizes) total += s;
    const auto cap = static_cast<std::size_t>(total);
    const std::size_t words = cap / 64 + 1;
    const std::size_t m = sizes.size();

    std::vector<std::uint64_t> reach((m + 1) * words, 0);
    auto row = [&](std::size_t i) { return reach.data() + i * words; };
    auto get = [&](const std::uint64_t* r, std::size_t bit) { return (r[bit / 64] >> (bit % 64)) & 1u; };
    row(0)[0] = 1;
    for (std::size_t i = 0; i < m; ++i) {
        const auto s = static_cast<std::size_t>(sizes[i]);
        const std::uint64_t* prev = row(i);
        std::uint64_t* cur = row(i + 1);
        const std::size_t word_shift = s / 64;
        const std::size_t bit_shift = s % 64;
        for (std::size_t w = words; w-- > 0;) {
            std::uint64_t shifted = 0;
            if (w >= word_shift) {
                shifted = prev[w - word_shift] << bit_shift;
                if (bit_shift && w > word_shift) shifted |= prev[w - word_shift - 1] >> (64 - bit_shift);
            }
            cur[w] = prev[w] | shifted;
        }
    }

    std::size_t best = 0;
    std::int64_t best_dev = total + 1;
    const std::uint64_t* last = row(m);
    for (std::size_t t = 0; t <= cap; ++t) {
        if (!get(last, t)) continue;
        const std::int64_t dev = std::llabs(static_cast<std::int64_t>(t) - target);
        if (dev < best_dev) {
            best_dev = dev;
            best = t;
        }
    }

    std::vector<std::size_t> chosen;
    std::size_t t = best;
    for (std::size_t i = m; i-- > 0;) {
        if (get(row(i), t)) continue; // reachable without family i: skip it
        chosen.push_back(i);
        t -= static_cast<std::size_t>(sizes[i]);
    }
    return chosen;
}

} // namespace

DatasetManifest stratified_split(const DatasetManifest& manifest, const SplitRatios& ratios,
                                 std::uint64_t seed) {
    if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9)
        throw ValidationError("split ratios must sum to 1");
    if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0)
        throw ValidationError("split ratios must be nonnegative");
    manifest.validate();

    std::unordered_map<std::string, std::size_t> index_of;
    for (std::size_t i = 0; i < manifest.records.size(); ++i) index_of[manifest.records[i].id] = i;

    // family = root record plus its augmented descendants
    auto root_of = [&](std::size_t i) {
        std::size_t cur = i;
        int hops = 0;
        while (manifest.records[cur].parent_id) {
            cur = index_of.at(*manifest.records[cur].parent_id);
            if (++hops > 64) throw ValidationError("parent chain too deep at record " + manifest.records[i].id);
        }
        return cur;
    };
    std::unordered_map<std::size_t, std::vector<std::size_t>> members;
    std::vector<std::size_t> root_order;
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        const std::size_t root = root_of(i);
        auto [it, inserted] = members.try_emplace(root);
        if (inserted) root_order.push_back(root);
        it->second.push_back(i);
    }

    const auto counts = manifest.class_counts();
    for (auto cls : kAllClasses)
        if (counts[static_cast<std::size_t>(class_code(cls))] == 0)
            throw ValidationError("cannot split: class " + to_string(cls) + " is empty");

    DatasetManifest out = manifest;
    out.splits.clear();

    for (auto cls : kAllClasses) {
        std::vector<std::size_t> fams;
        std::int64_t n = 0;
        for (auto root : root_order) {
            if (manifest.records[root].label != cls) continue;
            fams.push_back(root);
            n += static_cast<std::int64_t>(members.at(root).size());
        }
        const auto targets = largest_remainder(n, ratios);

        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(class_code(cls))));
        rng.shuffle(fams);

        std::vector<std::int64_t> sizes;
        sizes.reserve(fams.size());
        for (auto root : fams) sizes.push_back(static_cast<std::int64_t>(members.at(root).size()));

        const auto val_pick = pick_families(sizes, targets[1]);
        std::vector<char> taken(fams.size(), 0);
        for (auto i : val_pick) taken[i] = 1;

        std::vector<std::int64_t> rest_sizes;
        std::vector<std::size_t> rest_index;
        for (std::size_t i = 0; i < fams.size(); ++i)
            if (!taken[i]) {
                rest_sizes.push_back(sizes[i]);
                rest_index.push_back(i);
            }
        const auto test_pick = pick_families(rest_sizes, targets[2]);
        for (auto i : test_pick) taken[rest_index[i]] = 2;

        for (std::size_t i = 0; i < fams.size(); ++i) {
            const Split s = taken[i] == 1 ? Split::Val : taken[i] == 2 ? Split::Test : Split::Train;
            for (auto rec : members.at(fams[i])) out.splits[manifest.records[rec].id] = s;
        }
    }
    return out;
}

// --- preprocessing ---------------------------------------------------------

Tensor3f preprocess_image(const ImageU8& img, int side) {
    if (side < 1) throw ValidationError("preprocess: side must be >= 1");
    if (img.empty()) throw ValidationError("preprocess: empty image");

    const int w = img.width();
    const int h = img.height();
    Tensor3f out(3, side, side);

    int out_w = side;
    int out_h = side;
    if (w != h || w != side) {
        const double scale = static_cast<double>(side) / std::max(w, h);
        out_w = std::max(1, static_cast<int>(std::lround(w * scale)));
        out_h = std::max(1, static_cast<int>(std::lround(h * scale)));
    }
    const int x0 = (side - out_w) / 2;
    const int y0 = (side - out_h) / 2;

    for (int c = 0; c < 3; ++c) {
        PlaneF plane = img.plane[c].cast<float>() / 255.0f;
        if (out_w != w || out_h != h) plane = area_resize(plane, out_w, out_h);
        for (int y = 0; y < out_h; ++y)
            for (int x = 0; x < out_w; ++x) out.at(c, y0 + y, x0 + x) = plane(y, x);
    }
    return out;
}

Tensor3f preprocess(const ImageRecord& record, int side) {
    ImageU8 img;
    try {
        img = load_image(record.path);
    } catch (const std::exception& e) {
        throw IoError("preprocess failed for record " + record.id + ": " + e.what());
    }
    return preprocess_image(img, side);
}

} // namespace fruitform
