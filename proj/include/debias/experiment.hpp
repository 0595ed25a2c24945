#pragma once

// Config-driven experiment: data preparation, the training stages, and the
// artifacts each stage reads and writes under the output directory.
//
//   pretrain       data/*.csv, anchor.ckpt.json
//   split          data/subset_<i>.csv, split.json
//   members        member_<i>.ckpt.json, scratch.ckpt.json
//   ensemble-eval  ensemble.json (manifest), metrics.json
//   distill        student.ckpt.json, distill_metrics.json
//   sweep          sweep.json, sweep_plot.tsv
//   report         report.md, report.csv (+ distill_report.md)

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "debias/checkpoint.hpp"
#include "debias/data.hpp"
#include "debias/distill.hpp"
#include "debias/ensemble.hpp"
#include "debias/error.hpp"
#include "debias/pipeline.hpp"
#include "debias/report.hpp"

namespace debias {

namespace fs = std::filesystem;
using nlohmann::json;

struct SyntheticSource {
    int class_count = 10;
    std::size_t dim = 20;
    double spread = 1.0;
    std::size_t pretrain_per_class = 500;
    std::size_t personal_per_class = 20;
    std::size_t test_per_class = 200;
};

struct FileRef {
    fs::path features;
    fs::path labels;  // idx_pair only
};

struct FileSource {
    DatasetFormat format = DatasetFormat::csv_labeled;
    FileRef pretrain;
    FileRef personal;
    FileRef test;
    LoadOptions options;
};

enum class DistillData { personal, pretrain, both };

struct ExperimentConfig {
    std::string name = "experiment";
    std::uint64_t seed = 1;
    fs::path output_dir = "runs/experiment";
    std::vector<std::string> class_names;

    bool synthetic = true;
    SyntheticSource synth;
    FileSource files;

    std::optional<BiasSpec> bias;
    std::set<ClassId> missing_classes;
    std::size_t k = 2;

    Architecture arch;
    TrainConfig pretrain_train;
    TrainConfig member_train;
    TrainConfig scratch_train;

    double lambda = 0.01;
    double beta = 0.0;
    bool include_biases = true;
    std::vector<MemberMode> members;

    EnsembleMode ensemble_mode = EnsembleMode::logit_sum;
    bool include_anchor = true;

    bool distill_enabled = true;
    DistillConfig distill;
    DistillData distill_data = DistillData::personal;

    bool sweep_enabled = true;
    std::vector<double> sweep_lambdas{0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0};
    std::size_t sweep_subset = 0;

    bool parameter_averaging = false;

    int class_count() const { return synthetic ? synth.class_count : static_cast<int>(arch.class_count()); }

    std::string class_name(ClassId c) const {
        const auto i = static_cast<std::size_t>(c);
        return i < class_names.size() ? class_names[i] : "class " + std::to_string(c);
    }
};

// ---------------------------------------------------------------------------
// Config parsing

namespace detail {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) {
        return fallback;
    }
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string("config key '") + key + "' has the wrong type");
    }
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
    if (!j.is_object()) {
        throw ConfigError(where + " must be an object");
    }
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* k : known) {
            ok = ok || key == k;
        }
        if (!ok) {
            throw ConfigError("unknown key '" + key + "' in " + where);
        }
    }
}

inline TrainConfig parse_train(const json& j, TrainConfig base, const std::string& where) {
    reject_unknown(j, {"epochs", "base_lr", "momentum", "step_every", "gamma", "batch_size"}, where);
    base.epochs = get_or(j, "epochs", base.epochs);
    base.base_lr = get_or(j, "base_lr", base.base_lr);
    base.momentum = get_or(j, "momentum", base.momentum);
    base.step_every = get_or(j, "step_every", base.step_every);
    base.gamma = get_or(j, "gamma", base.gamma);
    base.batch_size = get_or(j, "batch_size", base.batch_size);
    return base;
}

inline json train_to_json(const TrainConfig& t) {
    return {{"epochs", t.epochs},         {"base_lr", t.base_lr}, {"momentum", t.momentum},
            {"step_every", t.step_every}, {"gamma", t.gamma},     {"batch_size", t.batch_size}};
}

inline FileRef parse_file_ref(const json& j, const fs::path& base_dir) {
    FileRef ref;
    if (j.is_string()) {
        ref.features = base_dir / j.get<std::string>();
    } else if (j.is_object()) {
        reject_unknown(j, {"features", "labels"}, "file reference");
        ref.features = base_dir / get_or<std::string>(j, "features", "");
        ref.labels = base_dir / get_or<std::string>(j, "labels", "");
    } else {
        throw ConfigError("file reference must be a path or {features, labels}");
    }
    return ref;
}

template <typename F>
auto config_guard(F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    } catch (const json::exception& e) {
        throw ConfigError(e.what());
    }
}

} // namespace detail

/// Builds a config from JSON. Relative data paths resolve against base_dir.
inline ExperimentConfig parse_config(const json& j, const fs::path& base_dir = {}) {
    return detail::config_guard([&] {
        using detail::get_or;
        detail::reject_unknown(j,
                               {"name", "seed", "output_dir", "class_names", "data", "bias", "split", "architecture",
                                "train", "regularization", "members", "ensemble", "distill", "sweep", "baselines"},
                               "config");
        ExperimentConfig c;
        c.name = get_or<std::string>(j, "name", c.name);
        c.seed = get_or(j, "seed", c.seed);
        c.output_dir = get_or<std::string>(j, "output_dir", "runs/" + c.name);
        c.class_names = get_or(j, "class_names", c.class_names);

        const json data = j.value("data", json::object());
        const auto source = get_or<std::string>(data, "source", "synthetic");
        if (source == "synthetic") {
            detail::reject_unknown(data,
                                   {"source", "class_count", "dim", "spread", "pretrain_per_class",
                                    "personal_per_class", "test_per_class"},
                                   "data");
            c.synthetic = true;
            c.synth.class_count = get_or(data, "class_count", c.synth.class_count);
            c.synth.dim = get_or(data, "dim", c.synth.dim);
            c.synth.spread = get_or(data, "spread", c.synth.spread);
            c.synth.pretrain_per_class = get_or(data, "pretrain_per_class", c.synth.pretrain_per_class);
            c.synth.personal_per_class = get_or(data, "personal_per_class", c.synth.personal_per_class);
            c.synth.test_per_class = get_or(data, "test_per_class", c.synth.test_per_class);
        } else if (source == "files") {
            detail::reject_unknown(data, {"source", "format", "pretrain", "personal", "test", "header", "normalize"},
                                   "data");
            c.synthetic = false;
            const auto format = get_or<std::string>(data, "format", "csv_labeled");
            if (format == "csv_labeled") {
                c.files.format = DatasetFormat::csv_labeled;
            } else if (format == "idx_pair") {
                c.files.format = DatasetFormat::idx_pair;
            } else {
                throw ConfigError("unknown data format '" + format + "'");
            }
            for (const char* key : {"pretrain", "personal", "test"}) {
                if (!data.contains(key)) {
                    throw ConfigError(std::string("file data source needs '") + key + "'");
                }
            }
            c.files.pretrain = detail::parse_file_ref(data.at("pretrain"), base_dir);
            c.files.personal = detail::parse_file_ref(data.at("personal"), base_dir);
            c.files.test = detail::parse_file_ref(data.at("test"), base_dir);
            c.files.options.header = get_or(data, "header", false);
            c.files.options.normalize = get_or(data, "normalize", false);
        } else {
            throw ConfigError("unknown data source '" + source + "'");
        }

        if (j.contains("bias") && !j.at("bias").is_null()) {
            const json& b = j.at("bias");
            detail::reject_unknown(b, {"scarce_classes", "retention"}, "bias");
            BiasSpec spec;
            spec.scarce_classes = get_or(b, "scarce_classes", std::set<ClassId>{});
            spec.retention = get_or(b, "retention", 1.0);
            c.bias = spec;
        }

        const json split = j.value("split", json::object());
        detail::reject_unknown(split, {"missing_classes", "k"}, "split");
        c.missing_classes = get_or(split, "missing_classes", c.bias ? c.bias->scarce_classes : std::set<ClassId>{});
        c.k = get_or(split, "k", c.k);

        if (!j.contains("architecture")) {
            throw ConfigError("config needs an 'architecture'");
        }
        c.arch = architecture_from_json(j.at("architecture"));

        const json train = j.value("train", json::object());
        detail::reject_unknown(train, {"pretrain", "members", "scratch"}, "train");
        c.pretrain_train = detail::parse_train(train.value("pretrain", json::object()), {}, "train.pretrain");
        c.member_train = detail::parse_train(train.value("members", json::object()), c.pretrain_train, "train.members");
        c.scratch_train = detail::parse_train(train.value("scratch", json::object()), c.member_train, "train.scratch");

        const json reg = j.value("regularization", json::object());
        detail::reject_unknown(reg, {"lambda", "beta", "include_biases"}, "regularization");
        c.lambda = get_or(reg, "lambda", c.lambda);
        c.beta = get_or(reg, "beta", c.beta);
        c.include_biases = get_or(reg, "include_biases", c.include_biases);

        if (j.contains("members")) {
            for (const auto& m : j.at("members")) {
                c.members.push_back(parse_member_mode(m.get<std::string>()));
            }
        } else {
            c.members.assign(c.k, MemberMode::regularized_finetune);
        }

        const json ens = j.value("ensemble", json::object());
        detail::reject_unknown(ens, {"mode", "include_anchor"}, "ensemble");
        c.ensemble_mode = parse_ensemble_mode(get_or<std::string>(ens, "mode", "logit_sum"));
        c.include_anchor = get_or(ens, "include_anchor", true);

        const json dist = j.value("distill", json::object());
        detail::reject_unknown(dist,
                               {"enabled", "temperature", "alpha", "variant", "student_layer_sizes", "data", "train"},
                               "distill");
        c.distill_enabled = get_or(dist, "enabled", true);
        c.distill.temperature = get_or(dist, "temperature", c.distill.temperature);
        c.distill.alpha = get_or(dist, "alpha", c.distill.alpha);
        c.distill.variant = parse_distill_variant(get_or<std::string>(dist, "variant", "soft_kl"));
        c.distill.student_arch = c.arch;
        c.distill.student_arch.layer_sizes = get_or(dist, "student_layer_sizes", c.arch.layer_sizes);
        c.distill.train = detail::parse_train(dist.value("train", json::object()), c.member_train, "distill.train");
        const auto dd = get_or<std::string>(dist, "data", "personal");
        if (dd == "personal") {
            c.distill_data = DistillData::personal;
        } else if (dd == "pretrain") {
            c.distill_data = DistillData::pretrain;
        } else if (dd == "both") {
            c.distill_data = DistillData::both;
        } else {
            throw ConfigError("distill.data must be personal, pretrain or both");
        }

        const json sweep = j.value("sweep", json::object());
        detail::reject_unknown(sweep, {"enabled", "lambdas", "subset"}, "sweep");
        c.sweep_enabled = get_or(sweep, "enabled", c.sweep_enabled);
        c.sweep_lambdas = get_or(sweep, "lambdas", c.sweep_lambdas);
        c.sweep_subset = get_or(sweep, "subset", c.sweep_subset);

        const json base = j.value("baselines", json::object());
        detail::reject_unknown(base, {"parameter_averaging"}, "baselines");
        c.parameter_averaging = get_or(base, "parameter_averaging", false);
        return c;
    });
}

inline ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config '" + path.string() + "'");
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("'" + path.string() + "': " + e.what());
    }
    return parse_config(j, path.parent_path());
}

// Canonical form of the effective config; its hash is the config fingerprint.
inline json config_to_json(const ExperimentConfig& c) {
    json data;
    if (c.synthetic) {
        data = {{"source", "synthetic"},
                {"class_count", c.synth.class_count},
                {"dim", c.synth.dim},
                {"spread", c.synth.spread},
                {"pretrain_per_class", c.synth.pretrain_per_class},
                {"personal_per_class", c.synth.personal_per_class},
                {"test_per_class", c.synth.test_per_class}};
    } else {
        auto ref = [](const FileRef& r) { return json{{"features", r.features.string()}, {"labels", r.labels.string()}}; };
        data = {{"source", "files"},
                {"format", c.files.format == DatasetFormat::csv_labeled ? "csv_labeled" : "idx_pair"},
                {"pretrain", ref(c.files.pretrain)},
                {"personal", ref(c.files.personal)},
                {"test", ref(c.files.test)},
                {"header", c.files.options.header},
                {"normalize", c.files.options.normalize}};
    }
    json members = json::array();
    for (MemberMode m : c.members) {
        members.push_back(to_string(m));
    }
    const char* dd = c.distill_data == DistillData::personal ? "personal"
                     : c.distill_data == DistillData::pretrain ? "pretrain"
                                                               : "both";
    return {
        {"name", c.name},
        {"seed", c.seed},
        {"output_dir", c.output_dir.string()},
        {"class_names", c.class_names},
        {"data", data},
        {"bias", c.bias ? json{{"scarce_classes", c.bias->scarce_classes}, {"retention", c.bias->retention}} : json()},
        {"split", {{"missing_classes", c.missing_classes}, {"k", c.k}}},
        {"architecture", architecture_to_json(c.arch)},
        {"train",
         {{"pretrain", detail::train_to_json(c.pretrain_train)},
          {"members", detail::train_to_json(c.member_train)},
          {"scratch", detail::train_to_json(c.scratch_train)}}},
        {"regularization", {{"lambda", c.lambda}, {"beta", c.beta}, {"include_biases", c.include_biases}}},
        {"members", members},
        {"ensemble", {{"mode", to_string(c.ensemble_mode)}, {"include_anchor", c.include_anchor}}},
        {"distill",
         {{"enabled", c.distill_enabled},
          {"temperature", c.distill.temperature},
          {"alpha", c.distill.alpha},
          {"variant", to_string(c.distill.variant)},
          {"student_layer_sizes", c.distill.student_arch.layer_sizes},
          {"data", dd},
          {"train", detail::train_to_json(c.distill.train)}}},
        {"sweep", {{"enabled", c.sweep_enabled}, {"lambdas", c.sweep_lambdas}, {"subset", c.sweep_subset}}},
        {"baselines", {{"parameter_averaging", c.parameter_averaging}}},
    };
}

inline std::string hash_text(std::string_view text) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001B3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// The output location is not part of the experiment's identity.
inline std::string config_fingerprint(const ExperimentConfig& c) {
    json j = config_to_json(c);
    j.erase("output_dir");
    return hash_text(j.dump());
}

/// Cross-field checks, run before any stage touches the filesystem.
inline void validate_config(const ExperimentConfig& c) {
    detail::config_guard([&] {
        c.arch.validate();
        const int classes = c.class_count();
        if (c.synthetic) {
            const auto& s = c.synth;
            if (s.class_count <= 0 || s.dim == 0 || !(s.spread > 0.0) || s.pretrain_per_class == 0 ||
                s.personal_per_class == 0 || s.test_per_class == 0) {
                throw ConfigError("synthetic data sizes must be positive");
            }
            if (c.arch.input_dim() != s.dim) {
                throw ConfigError("architecture input size " + std::to_string(c.arch.input_dim()) +
                                  " does not match data dim " + std::to_string(s.dim));
            }
            if (c.arch.class_count() != static_cast<std::size_t>(s.class_count)) {
                throw ConfigError("architecture output size does not match the class count");
            }
        }
        if (c.bias) {
            c.bias->validate(classes);
        }
        SplitPlan{c.missing_classes, c.k, 0}.validate(classes);
        if (c.members.size() != c.k) {
            throw ConfigError("config lists " + std::to_string(c.members.size()) + " members but k = " +
                              std::to_string(c.k));
        }
        if (c.synthetic && c.synth.personal_per_class < c.k) {
            throw ConfigError("personal_per_class must be at least k");
        }
        c.pretrain_train.validate();
        c.member_train.validate();
        c.scratch_train.validate();
        RegConfig{c.lambda, c.beta, ParamVector::zeros(c.arch), c.include_biases}.validate();
        if (c.distill_enabled) {
            c.distill.validate();
            if (c.distill.student_arch.input_dim() != c.arch.input_dim() ||
                c.distill.student_arch.class_count() != c.arch.class_count()) {
                throw ConfigError("student architecture must match the input and class sizes");
            }
        }
        if (c.sweep_enabled) {
            if (c.sweep_lambdas.empty()) {
                throw ConfigError("sweep.lambdas is empty");
            }
            for (std::size_t i = 0; i < c.sweep_lambdas.size(); ++i) {
                if (!(c.sweep_lambdas[i] >= 0.0) || (i > 0 && !(c.sweep_lambdas[i] > c.sweep_lambdas[i - 1]))) {
                    throw ConfigError("sweep.lambdas must be nonnegative and strictly increasing");
                }
            }
            if (c.sweep_subset >= c.k) {
                throw ConfigError("sweep.subset must be below k");
            }
        }
        if (!c.class_names.empty() && c.class_names.size() != static_cast<std::size_t>(classes)) {
            throw ConfigError("class_names must name every class");
        }
    });
}

// ---------------------------------------------------------------------------
// Stages

// Stream tags for derive_seed(config.seed, tag).
enum SeedStream : std::uint64_t {
    seed_synth = 1,
    seed_test_split = 2,
    seed_personal_split = 3,
    seed_scarcity = 4,
    seed_counterbias = 5,
    seed_pretrain = 6,
    seed_members = 7,
    seed_scratch = 8,
    seed_distill = 9,
    seed_average = 10,
};

struct ExperimentData {
    Dataset pretrain;  // after scarcity injection
    Dataset personal;  // small balanced set
    Dataset test;      // balanced evaluation set
};

/// Produces the three datasets: synthetic blobs split by class-stratified
/// holdouts, or loaded from files. The bias spec, when set, thins the
/// pretraining set.
inline ExperimentData prepare_data(const ExperimentConfig& c) {
    ExperimentData d;
    if (c.synthetic) {
        const auto& s = c.synth;
        const std::size_t total = s.pretrain_per_class + s.personal_per_class + s.test_per_class;
        Dataset all = synth_gaussian(s.class_count, total, s.dim, s.spread, derive_seed(c.seed, seed_synth));
        auto outer = holdout_split(all, static_cast<double>(s.test_per_class) / static_cast<double>(total),
                                   derive_seed(c.seed, seed_test_split));
        auto inner = holdout_split(outer.train,
                                   static_cast<double>(s.personal_per_class) /
                                       static_cast<double>(s.pretrain_per_class + s.personal_per_class),
                                   derive_seed(c.seed, seed_personal_split));
        d.pretrain = std::move(inner.train);
        d.personal = std::move(inner.test);
        d.test = std::move(outer.test);
    } else {
        auto load = [&](const FileRef& ref) {
            return load_dataset(ref.features, c.files.format, c.files.options, ref.labels);
        };
        d.pretrain = load(c.files.pretrain);
        d.personal = load(c.files.personal);
        d.test = load(c.files.test);
        const int classes = static_cast<int>(c.arch.class_count());
        for (Dataset* ds : {&d.pretrain, &d.personal, &d.test}) {
            if (ds->class_count > classes || ds->dim() != c.arch.input_dim()) {
                throw ConfigError("dataset '" + ds->name + "' does not match the architecture");
            }
            ds->class_count = classes;
        }
    }
    if (c.bias) {
        d.pretrain = inject_scarcity(d.pretrain, *c.bias, derive_seed(c.seed, seed_scarcity));
    }
    d.pretrain.name = "pretrain";
    d.personal.name = "personal";
    d.test.name = "test";
    return d;
}

/// Paths of every artifact under the output directory.
struct Artifacts {
    fs::path root;

    fs::path data_dir() const { return root / "data"; }
    fs::path pretrain_data() const { return data_dir() / "pretrain.csv"; }
    fs::path personal_data() const { return data_dir() / "personal.csv"; }
    fs::path test_data() const { return data_dir() / "test.csv"; }
    fs::path subset(std::size_t i) const { return data_dir() / ("subset_" + std::to_string(i) + ".csv"); }
    fs::path anchor() const { return root / "anchor.ckpt.json"; }
    fs::path split() const { return root / "split.json"; }
    fs::path member(std::size_t i) const { return root / ("member_" + std::to_string(i) + ".ckpt.json"); }
    fs::path scratch() const { return root / "scratch.ckpt.json"; }
    fs::path regft() const { return root / "regft.ckpt.json"; }
    fs::path manifest() const { return root / "ensemble.json"; }
    fs::path metrics() const { return root / "metrics.json"; }
    fs::path student() const { return root / "student.ckpt.json"; }
    fs::path distill_metrics() const { return root / "distill_metrics.json"; }
    fs::path sweep() const { return root / "sweep.json"; }
    fs::path sweep_plot() const { return root / "sweep_plot.tsv"; }
    fs::path report_md() const { return root / "report.md"; }
    fs::path report_csv() const { return root / "report.csv"; }
    fs::path distill_report() const { return root / "distill_report.md"; }
};

namespace detail {

inline void require(const fs::path& p) {
    if (!fs::exists(p)) {
        throw MissingArtifactError(p.string());
    }
}

inline Dataset load_artifact_csv(const fs::path& p, int class_count, const char* name) {
    require(p);
    Dataset ds = load_csv(p);
    ds.class_count = class_count;
    ds.name = name;
    return ds;
}

inline json metrics_to_json(const ClassMetrics& m) {
    json per_class = json::object();
    json counts = json::object();
    for (const auto& [c, acc] : m.per_class) {
        per_class[std::to_string(c)] = acc;
        counts[std::to_string(c)] = m.n_per_class.at(c);
    }
    return {{"label", m.model_label}, {"overall", m.overall}, {"per_class", per_class}, {"n_per_class", counts}};
}

inline ClassMetrics metrics_from_json(const json& j) {
    ClassMetrics m;
    m.model_label = j.at("label").get<std::string>();
    m.overall = j.at("overall").get<double>();
    for (const auto& [k, v] : j.at("per_class").items()) {
        m.per_class[std::stoi(k)] = v.get<double>();
    }
    for (const auto& [k, v] : j.at("n_per_class").items()) {
        m.n_per_class[std::stoi(k)] = v.get<std::size_t>();
    }
    return m;
}

inline json metrics_rows_to_json(const std::vector<ClassMetrics>& rows) {
    json out = json::array();
    for (const auto& r : rows) {
        out.push_back(metrics_to_json(r));
    }
    return out;
}

inline std::vector<ClassMetrics> metrics_rows_from_json(const json& j) {
    std::vector<ClassMetrics> rows;
    for (const auto& r : j) {
        rows.push_back(metrics_from_json(r));
    }
    return rows;
}

inline json trace_to_json(const TrainResult& r) { return r.epoch_loss; }

} // namespace detail

/// Runs stages against one config and output directory.
class Experiment {
public:
    explicit Experiment(ExperimentConfig config)
        : config_(std::move(config)), fingerprint_(config_fingerprint(config_)), out_{config_.output_dir} {
        validate_config(config_);
    }

    const ExperimentConfig& config() const { return config_; }
    const std::string& config_print() const { return fingerprint_; }
    const Artifacts& artifacts() const { return out_; }

    void run_pretrain() {
        ExperimentData d = prepare_data(config_);
        fs::create_directories(out_.data_dir());
        save_csv(d.pretrain, out_.pretrain_data());
        save_csv(d.personal, out_.personal_data());
        save_csv(d.test, out_.test_data());
        TrainConfig tc = config_.pretrain_train;
        tc.seed = derive_seed(config_.seed, seed_pretrain);
        const TrainResult r = pretrain(d.pretrain, config_.arch, tc);
        json meta = metadata("pretrain", tc.seed);
        meta["data_fingerprint"] = debias::fingerprint(d.pretrain);
        meta["data"] = {{"pretrain", debias::fingerprint(d.pretrain)},
                        {"personal", debias::fingerprint(d.personal)},
                        {"test", debias::fingerprint(d.test)}};
        meta["train"] = detail::train_to_json(tc);
        meta["loss_trace"] = detail::trace_to_json(r);
        save_checkpoint(r.model, out_.anchor(), meta);
    }

    void run_split() {
        const Dataset personal = personal_data();
        const SplitPlan plan{config_.missing_classes, config_.k, derive_seed(config_.seed, seed_counterbias)};
        const auto subsets = counterbias_split(personal, plan);
        json sizes = json::array();
        json prints = json::array();
        for (std::size_t i = 0; i < subsets.size(); ++i) {
            save_csv(subsets[i], out_.subset(i));
            sizes.push_back(subsets[i].size());
            prints.push_back(debias::fingerprint(subsets[i]));
        }
        json meta = metadata("split", plan.seed);
        meta["data_fingerprint"] = debias::fingerprint(personal);
        meta["subset_sizes"] = sizes;
        meta["subset_fingerprints"] = prints;
        write_json(meta, out_.split());
    }

    void run_members() {
        const ParamVector anchor = load_checkpoint(require(out_.anchor()));
        const auto subsets = subset_data();
        std::vector<MemberSpec> specs;
        for (std::size_t i = 0; i < config_.k; ++i) {
            specs.push_back(member_spec(i, anchor));
        }
        const auto members = build_members(anchor, subsets, specs);
        for (std::size_t i = 0; i < members.size(); ++i) {
            json meta = metadata("members", derive_seed(specs[i].train.seed, i));
            meta["member_index"] = i;
            meta["mode"] = to_string(specs[i].mode);
            meta["lambda"] = config_.lambda;
            meta["beta"] = config_.beta;
            meta["data_fingerprint"] = debias::fingerprint(subsets[specs[i].subset_index]);
            save_checkpoint(members[i], out_.member(i), meta);
        }
        // Baseline rows: from-scratch on subset 0, and a regularized fine-tune
        // when no member provides one.
        TrainConfig sc = config_.scratch_train;
        sc.seed = derive_seed(config_.seed, seed_scratch);
        const TrainResult scratch = train_from_scratch(subsets.front(), config_.arch, sc);
        json meta = metadata("scratch", sc.seed);
        meta["data_fingerprint"] = debias::fingerprint(subsets.front());
        save_checkpoint(scratch.model, out_.scratch(), meta);
        if (regft_member_index() < 0) {
            MemberSpec spec = member_spec(0, anchor);
            spec.train.seed = derive_seed(spec.train.seed, 0);
            const TrainResult ft = finetune_regularized(anchor, subsets.front(), spec.reg, spec.train);
            json m = metadata("regft", spec.train.seed);
            m["data_fingerprint"] = debias::fingerprint(subsets.front());
            save_checkpoint(ft.model, out_.regft(), m);
        }
    }

    // mode_override replaces the configured ensemble mode for this stage.
    void run_ensemble_eval(std::optional<EnsembleMode> mode_override = std::nullopt) {
        const EnsembleMode mode = mode_override.value_or(config_.ensemble_mode);
        const ParamVector anchor = load_checkpoint(require(out_.anchor()));
        const ParamVector scratch = load_checkpoint(require(out_.scratch()));
        std::vector<ParamVector> members;
        json paths = json::array();
        if (config_.include_anchor) {
            paths.push_back(out_.anchor().filename().string());
        }
        for (std::size_t i = 0; i < config_.k; ++i) {
            members.push_back(load_checkpoint(require(out_.member(i))));
            paths.push_back(out_.member(i).filename().string());
        }
        const int idx = regft_member_index();
        const ParamVector regft =
            idx >= 0 ? members[static_cast<std::size_t>(idx)] : load_checkpoint(require(out_.regft()));
        const EnsembleModel ensemble = make_ensemble(anchor, members, mode, config_.include_anchor);

        json manifest = {{"checkpoints", paths}, {"mode", to_string(mode)}, {"include_anchor", config_.include_anchor}};
        const std::string manifest_print = hash_text(manifest.dump());
        manifest["fingerprint"] = manifest_print;
        manifest["config_fingerprint"] = fingerprint_;
        manifest["seed"] = config_.seed;
        write_json(manifest, out_.manifest());

        const Dataset test = test_data();
        std::vector<ClassMetrics> rows{
            evaluate_model(anchor, test, "Initial Model"),
            evaluate_model(scratch, test, "From Scratch"),
            evaluate_model(regft, test, "Reg. Fine-tuning"),
            evaluate([&](const Matrix& x) { return ensemble_predict(ensemble, x); }, test,
                     "Ensemble (" + std::string(to_string(mode)) + ")"),
        };
        if (config_.parameter_averaging) {
            rows.push_back(evaluate_model(average_parameters(members), test, "Averaged Members"));
            std::vector<ParamVector> all{anchor};
            all.insert(all.end(), members.begin(), members.end());
            TrainConfig tc = config_.member_train;
            tc.seed = derive_seed(config_.seed, seed_average);
            rows.push_back(evaluate_model(average_then_train(all, personal_data(), tc).model, test,
                                          "Average then Train"));
        }
        json out = metadata("ensemble-eval", config_.seed);
        out["mode"] = to_string(mode);
        out["manifest_fingerprint"] = manifest_print;
        out["data_fingerprint"] = debias::fingerprint(test);
        out["rows"] = detail::metrics_rows_to_json(rows);
        write_json(out, out_.metrics());
    }

    void run_distill() {
        const json manifest = read_json(require(out_.manifest()));
        EnsembleModel ensemble;
        ensemble.mode = parse_ensemble_mode(manifest.at("mode").get<std::string>());
        for (const auto& p : manifest.at("checkpoints")) {
            ensemble.members.push_back(load_checkpoint(require(out_.root / p.get<std::string>())));
        }
        Dataset train_set;
        switch (config_.distill_data) {
        case DistillData::personal: train_set = personal_data(); break;
        case DistillData::pretrain: train_set = pretrain_data(); break;
        case DistillData::both: {
            const Dataset a = pretrain_data();
            const Dataset b = personal_data();
            train_set = a;
            train_set.features.conservativeResize(a.features.rows() + b.features.rows(), Eigen::NoChange);
            train_set.features.bottomRows(b.features.rows()) = b.features;
            train_set.labels.insert(train_set.labels.end(), b.labels.begin(), b.labels.end());
            train_set.name = "pretrain+personal";
            break;
        }
        }
        DistillConfig dc = config_.distill;
        dc.train.seed = derive_seed(config_.seed, seed_distill);
        const TrainResult r = distill(ensemble, train_set, dc);
        json meta = metadata("distill", dc.train.seed);
        meta["teacher_manifest"] = manifest.at("fingerprint");
        meta["distill"] = {{"temperature", dc.temperature}, {"alpha", dc.alpha}, {"variant", to_string(dc.variant)}};
        meta["data_fingerprint"] = debias::fingerprint(train_set);
        meta["loss_trace"] = detail::trace_to_json(r);
        save_checkpoint(r.model, out_.student(), meta);

        const Dataset test = test_data();
        const ClassMetrics teacher = evaluate([&](const Matrix& x) { return ensemble_predict(ensemble, x); }, test,
                                              "Ensemble (" + std::string(to_string(ensemble.mode)) + ")");
        const ClassMetrics student =
            evaluate_model(r.model, test, "Distilled Student (" + std::string(to_string(dc.variant)) + ")");
        json out = metadata("distill", dc.train.seed);
        out["teacher_manifest"] = manifest.at("fingerprint");
        out["rows"] = detail::metrics_rows_to_json({teacher, student});
        write_json(out, out_.distill_metrics());
    }

    // lambda_grid replaces the configured sweep grid for this stage.
    void run_sweep(std::optional<std::vector<double>> lambda_grid = std::nullopt) {
        const std::vector<double> grid = lambda_grid.value_or(config_.sweep_lambdas);
        const ParamVector anchor = load_checkpoint(require(out_.anchor()));
        const auto subsets = subset_data();
        const Dataset test = test_data();
        TrainConfig tc = config_.member_train;
        tc.seed = derive_seed(derive_seed(config_.seed, seed_members), config_.sweep_subset);
        const SweepResult s = lambda_sweep(anchor, subsets.at(config_.sweep_subset), test, grid, tc, config_.beta);
        json out = metadata("sweep", tc.seed);
        out["lambdas"] = s.lambdas;
        out["anchor_distance"] = s.anchor_distance;
        out["rows"] = detail::metrics_rows_to_json(s.metrics);
        out["data_fingerprint"] = debias::fingerprint(subsets.at(config_.sweep_subset));
        write_json(out, out_.sweep());

        std::vector<ClassId> classes(config_.missing_classes.begin(), config_.missing_classes.end());
        std::vector<std::string> names;
        for (int c = 0; c < config_.class_count(); ++c) {
            names.push_back(config_.class_name(c));
        }
        const auto series = sweep_plot_data(s, classes, names);
        std::ofstream plot(out_.sweep_plot());
        plot << "# config " << fingerprint_ << " seed " << config_.seed << '\n' << render_plot_table(series);
    }

    void run_report() {
        const json metrics = read_json(require(out_.metrics()));
        const auto rows = detail::metrics_rows_from_json(metrics.at("rows"));
        std::vector<std::string> names;
        for (int c = 0; c < config_.class_count(); ++c) {
            names.push_back(config_.class_name(c));
        }
        const std::string mode = metrics.at("mode").get<std::string>();
        const std::string header_line = "config " + fingerprint_ + ", seed " + std::to_string(config_.seed) +
                                        ", ensemble mode " + mode;
        {
            std::ofstream md(out_.report_md());
            md << "# " << config_.name << "\n\n"
               << "<!-- " << header_line << " -->\n\n"
               << "Ensemble mode: `" << mode << "`\n\n"
               << render_report(rows, names, ReportFormat::markdown);
        }
        {
            std::ofstream csv(out_.report_csv());
            csv << "# " << header_line << '\n' << render_report(rows, names, ReportFormat::csv);
        }
        if (fs::exists(out_.distill_metrics())) {
            const json d = read_json(out_.distill_metrics());
            const auto drows = detail::metrics_rows_from_json(d.at("rows"));
            std::ofstream md(out_.distill_report());
            md << "# " << config_.name << " (distillation)\n\n"
               << "<!-- " << header_line << " -->\n\n"
               << render_report(drows, names, ReportFormat::markdown);
        }
    }

    void run_all() {
        run_pretrain();
        run_split();
        run_members();
        run_ensemble_eval();
        if (config_.distill_enabled) {
            run_distill();
        }
        if (config_.sweep_enabled) {
            run_sweep();
        }
        run_report();
    }

    Dataset pretrain_data() const {
        return detail::load_artifact_csv(out_.pretrain_data(), config_.class_count(), "pretrain");
    }
    Dataset personal_data() const {
        return detail::load_artifact_csv(out_.personal_data(), config_.class_count(), "personal");
    }
    Dataset test_data() const { return detail::load_artifact_csv(out_.test_data(), config_.class_count(), "test"); }

    std::vector<Dataset> subset_data() const {
        detail::require(out_.split());
        std::vector<Dataset> subsets;
        for (std::size_t i = 0; i < config_.k; ++i) {
            subsets.push_back(detail::load_artifact_csv(out_.subset(i), config_.class_count(), "subset"));
        }
        return subsets;
    }

private:
    static const fs::path& require(const fs::path& p) {
        detail::require(p);
        return p;
    }

    json metadata(const std::string& stage, std::uint64_t stage_seed) const {
        return {{"stage", stage},
                {"config_fingerprint", fingerprint_},
                {"seed", config_.seed},
                {"stage_seed", stage_seed},
                {"experiment", config_.name}};
    }

    MemberSpec member_spec(std::size_t i, const ParamVector& anchor) const {
        MemberSpec spec;
        spec.mode = config_.members.at(i);
        spec.reg.lambda = config_.lambda;
        spec.reg.beta = config_.beta;
        spec.reg.include_biases = config_.include_biases;
        spec.reg.anchor = anchor;
        spec.train = config_.member_train;
        spec.train.seed = derive_seed(config_.seed, seed_members);
        spec.subset_index = i;
        return spec;
    }

    int regft_member_index() const {
        for (std::size_t i = 0; i < config_.members.size(); ++i) {
            if (config_.members[i] == MemberMode::regularized_finetune) {
                return static_cast<int>(i);
            }
        }
        return -1;
    }

    ExperimentConfig config_;
    std::string fingerprint_;
    Artifacts out_;
};

} // namespace debias
