#pragma once

// End-to-end experiment orchestration.
//
// ExperimentConfig is read from a versioned JSON file (schema
// "hcnr-config/1"); unknown keys are rejected with their full path. A
// Pipeline owns one output directory (guarded by a lock file) and computes
// every stage lazily: world -> datasets -> pretrained -> SFT -> analysis ->
// variants / probes / sweeps. Trained checkpoints are cached under
// <out>/cache keyed by a hash of exactly the configuration sections they
// depend on, so subcommands invoked one at a time compose into the same
// artifacts as a single run-all.
//
// Everything written to reports/ is a pure function of (config, seed):
// timings go to run.log only, never into reports.

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hcnr/compensation.hpp"
#include "hcnr/core_math.hpp"
#include "hcnr/errors.hpp"
#include "hcnr/importance.hpp"
#include "hcnr/metrics.hpp"
#include "hcnr/model.hpp"
#include "hcnr/probes.hpp"
#include "hcnr/surgery.hpp"
#include "hcnr/synth_world.hpp"
#include "hcnr/training.hpp"

namespace hcnr {

namespace fs = std::filesystem;

inline constexpr const char* kConfigSchema = "hcnr-config/1";

// ============================================================================
// CONFIGURATION
// ============================================================================

struct StageTrainConfig {
    TrainConfig train;
    // Unfreeze the embedding rows of the domain relation tokens even when
    // train_embeddings is false (they first appear in the domain corpus).
    bool train_domain_relation_embeddings = false;
};

struct HcnrParams {
    double r_iw = 0.5;
    double r_cw = 0.4;
    double lambda_frac = 0.01;
    HessianStrategy hessian = HessianStrategy::output_gram;
    // Allowed relative increase of the per-example activation gap on the
    // D^hon holdout over the fitting batch.
    double holdout_tolerance = 0.10;
};

struct ProbeConfig {
    ProbeOptions options;
    std::size_t permutations = 8;
};

struct GateConfig {
    double min_pretrained_f1 = 0.9;
    double min_f1_drop = 0.30;
    double min_sft_domain_accuracy = 0.9;
    bool enforce = true;
};

struct SweepConfig {
    std::vector<std::size_t> d_hon_size{16, 32, 64, 128, 256};
    std::vector<std::size_t> d_task_size{16, 32, 64, 128, 256};
    std::vector<double> r_iw{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
    std::vector<double> r_cw{0.25, 0.5, 0.75, 1.0};
    // Maximum F1 gain beyond |D^hon| = 128 still counted as a plateau.
    double plateau_tolerance = 0.05;
};

inline const std::vector<std::string>& all_variants() {
    static const std::vector<std::string> v = {"pretrained", "sft",     "hcnr",     "wo_com",   "random",
                                               "random_wo_com", "wo_task", "rait", "rehearsal"};
    return v;
}

inline bool is_variant(const std::string& v) {
    const auto& all = all_variants();
    return std::find(all.begin(), all.end(), v) != all.end();
}

struct ExperimentConfig {
    std::optional<std::uint64_t> seed;
    std::string output_dir;
    WorldConfig world;
    DatasetSizes datasets;
    std::size_t embed_dim = 32;
    std::size_t hidden_dim = 128;
    std::size_t num_layers = 4;
    double embed_init_scale = kDefaultEmbedScale;
    StageTrainConfig pretrain;
    StageTrainConfig sft;
    StageTrainConfig rait;
    StageTrainConfig rehearsal;
    double rehearsal_fraction = 0.1;
    HcnrParams hcnr;
    ProbeConfig probes;
    std::vector<std::string> variants = all_variants();
    GateConfig gate;
    SweepConfig sweep;

    ExperimentConfig() {
        pretrain.train.stage = Stage::pretrain;
        pretrain.train.steps = 3000;
        pretrain.train.eval_every = 600;

        sft.train.stage = Stage::sft;
        sft.train.steps = 1000;
        sft.train.eval_every = 200;
        sft.train.train_embeddings = false;
        sft.train.train_output = false;
        sft.train_domain_relation_embeddings = true;

        rait = sft;
        rait.train.stage = Stage::rait;
        rait.train.steps = 200;
        rait.train.eval_every = 20;

        rehearsal = sft;
        rehearsal.train.stage = Stage::rehearsal;
        rehearsal.train.eval_every = 0;
    }

    std::uint64_t seed_value() const {
        if (!seed) throw ConfigError("config: 'seed' is required (in the file or via --seed)");
        return *seed;
    }
};

namespace detail {

// Reads one JSON object, remembering consumed keys so leftovers can be
// reported as unknown.
class ObjectReader {
public:
    ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError("config: '" + path_ + "' must be an object");
    }

    const nlohmann::json* find(const char* key) {
        if (!j_.contains(key)) return nullptr;
        seen_.insert(key);
        return &j_.at(key);
    }

    std::string at(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    void count(const char* key, std::size_t& out) {
        if (const auto* v = find(key)) {
            if (!v->is_number_unsigned()) throw ConfigError("config: '" + at(key) + "' must be a nonnegative integer");
            out = v->get<std::size_t>();
        }
    }
    void real(const char* key, double& out) {
        if (const auto* v = find(key)) {
            if (!v->is_number()) throw ConfigError("config: '" + at(key) + "' must be a number");
            out = v->get<double>();
            if (!std::isfinite(out)) throw ConfigError("config: '" + at(key) + "' must be finite");
        }
    }
    void boolean(const char* key, bool& out) {
        if (const auto* v = find(key)) {
            if (!v->is_boolean()) throw ConfigError("config: '" + at(key) + "' must be true or false");
            out = v->get<bool>();
        }
    }
    void string(const char* key, std::string& out) {
        if (const auto* v = find(key)) {
            if (!v->is_string()) throw ConfigError("config: '" + at(key) + "' must be a string");
            out = v->get<std::string>();
        }
    }
    template <class T>
    void list(const char* key, std::vector<T>& out) {
        if (const auto* v = find(key)) {
            if (!v->is_array()) throw ConfigError("config: '" + at(key) + "' must be an array");
            std::vector<T> xs;
            for (const auto& e : *v) {
                if constexpr (std::is_same_v<T, std::size_t>) {
                    if (!e.is_number_unsigned())
                        throw ConfigError("config: '" + at(key) + "' entries must be nonnegative integers");
                } else if constexpr (std::is_same_v<T, double>) {
                    if (!e.is_number()) throw ConfigError("config: '" + at(key) + "' entries must be numbers");
                } else {
                    if (!e.is_string()) throw ConfigError("config: '" + at(key) + "' entries must be strings");
                }
                xs.push_back(e.get<T>());
            }
            out = std::move(xs);
        }
    }
    template <class F>
    void object(const char* key, F&& f) {
        if (const auto* v = find(key)) {
            ObjectReader sub(*v, at(key));
            f(sub);
            sub.finish();
        }
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError("config: unknown key '" + at(k.c_str()) + "'");
    }

private:
    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline void read_stage(ObjectReader& r, StageTrainConfig& s) {
    r.real("learning_rate", s.train.learning_rate);
    r.real("momentum", s.train.momentum);
    r.count("steps", s.train.steps);
    r.count("batch_size", s.train.batch_size);
    r.count("eval_every", s.train.eval_every);
    r.boolean("train_embeddings", s.train.train_embeddings);
    r.boolean("train_output", s.train.train_output);
    r.boolean("train_domain_relation_embeddings", s.train_domain_relation_embeddings);
}

inline nlohmann::json stage_json(const StageTrainConfig& s) {
    return {{"learning_rate", s.train.learning_rate},
            {"momentum", s.train.momentum},
            {"steps", s.train.steps},
            {"batch_size", s.train.batch_size},
            {"eval_every", s.train.eval_every},
            {"train_embeddings", s.train.train_embeddings},
            {"train_output", s.train.train_output},
            {"train_domain_relation_embeddings", s.train_domain_relation_embeddings}};
}

inline void require_ratio(double v, const std::string& name) {
    if (!(v > 0.0 && v <= 1.0)) throw ConfigError("config: '" + name + "' must lie in (0, 1]");
}

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
    c.seed_value();
    detail::require_ratio(c.hcnr.r_iw, "hcnr.r_iw");
    detail::require_ratio(c.hcnr.r_cw, "hcnr.r_cw");
    if (!(c.hcnr.lambda_frac >= 0.0)) throw ConfigError("config: 'hcnr.lambda_frac' must be nonnegative");
    if (!(c.hcnr.holdout_tolerance >= 0.0)) throw ConfigError("config: 'hcnr.holdout_tolerance' must be nonnegative");
    if (c.datasets.d_hon == 0 || c.datasets.d_task == 0 || c.datasets.d_hon_holdout == 0)
        throw ConfigError("config: D^hon, D^task and holdout sizes must be positive");
    if (c.datasets.honesty_eval == 0 || c.datasets.domain_eval == 0)
        throw ConfigError("config: evaluation set sizes must be positive");
    if (c.embed_dim == 0 || c.hidden_dim == 0 || c.num_layers == 0)
        throw ConfigError("config: model dimensions must be positive");
    if (!(c.embed_init_scale > 0.0)) throw ConfigError("config: 'model.embed_init_scale' must be positive");
    if (!(c.rehearsal_fraction >= 0.0 && c.rehearsal_fraction < 1.0))
        throw ConfigError("config: 'train.rehearsal_fraction' must lie in [0, 1)");
    if (!(c.world.novel_domain_fraction >= 0.0 && c.world.novel_domain_fraction <= 1.0))
        throw ConfigError("config: 'world.novel_domain_fraction' must lie in [0, 1]");
    for (const auto* s : {&c.pretrain, &c.sft, &c.rait, &c.rehearsal}) s->train.validate();
    if (c.probes.permutations == 0) throw ConfigError("config: 'probes.permutations' must be positive");
    if (c.probes.options.iters == 0) throw ConfigError("config: 'probes.iters' must be positive");
    for (const auto& v : c.variants)
        if (!is_variant(v)) throw ConfigError("config: unknown variant '" + v + "'");
    for (double v : c.sweep.r_iw) detail::require_ratio(v, "sweep.r_iw");
    for (double v : c.sweep.r_cw) detail::require_ratio(v, "sweep.r_cw");
    for (std::size_t v : c.sweep.d_hon_size)
        if (v == 0) throw ConfigError("config: 'sweep.d_hon_size' entries must be positive");
    for (std::size_t v : c.sweep.d_task_size)
        if (v == 0) throw ConfigError("config: 'sweep.d_task_size' entries must be positive");
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    detail::ObjectReader r(j, "");
    std::string schema;
    r.string("schema", schema);
    if (schema != kConfigSchema)
        throw ConfigError("config: 'schema' must be \"" + std::string(kConfigSchema) + "\" (got \"" + schema + "\")");
    if (const auto* s = r.find("seed")) {
        if (!s->is_number_unsigned()) throw ConfigError("config: 'seed' must be a nonnegative integer");
        c.seed = s->get<std::uint64_t>();
    }
    r.string("output_dir", c.output_dir);
    r.object("world", [&](detail::ObjectReader& w) {
        w.count("entities", c.world.entities);
        w.count("known", c.world.known);
        w.count("unknown", c.world.unknown);
        w.count("base_relations", c.world.base_relations);
        w.count("domain_relations", c.world.domain_relations);
        w.count("answers", c.world.answers);
        w.real("novel_domain_fraction", c.world.novel_domain_fraction);
    });
    r.object("datasets", [&](detail::ObjectReader& d) {
        d.count("honesty_eval", c.datasets.honesty_eval);
        d.count("domain_eval", c.datasets.domain_eval);
        d.count("d_hon", c.datasets.d_hon);
        d.count("d_task", c.datasets.d_task);
        d.count("d_hon_holdout", c.datasets.d_hon_holdout);
        d.real("pretrain_idk_fraction", c.datasets.pretrain_idk_fraction);
    });
    r.object("model", [&](detail::ObjectReader& m) {
        m.count("embed_dim", c.embed_dim);
        m.count("hidden_dim", c.hidden_dim);
        m.count("num_layers", c.num_layers);
        m.real("embed_init_scale", c.embed_init_scale);
    });
    r.object("train", [&](detail::ObjectReader& t) {
        t.object("pretrain", [&](detail::ObjectReader& s) { detail::read_stage(s, c.pretrain); });
        t.object("sft", [&](detail::ObjectReader& s) { detail::read_stage(s, c.sft); });
        t.object("rait", [&](detail::ObjectReader& s) { detail::read_stage(s, c.rait); });
        t.object("rehearsal", [&](detail::ObjectReader& s) { detail::read_stage(s, c.rehearsal); });
        t.real("rehearsal_fraction", c.rehearsal_fraction);
    });
    r.object("hcnr", [&](detail::ObjectReader& h) {
        h.real("r_iw", c.hcnr.r_iw);
        h.real("r_cw", c.hcnr.r_cw);
        h.real("lambda_frac", c.hcnr.lambda_frac);
        h.real("holdout_tolerance", c.hcnr.holdout_tolerance);
        std::string hs = to_string(c.hcnr.hessian);
        h.string("hessian", hs);
        c.hcnr.hessian = hessian_strategy_from_string(hs);
    });
    r.object("probes", [&](detail::ObjectReader& p) {
        p.real("reg", c.probes.options.reg);
        p.count("iters", c.probes.options.iters);
        p.real("learning_rate", c.probes.options.learning_rate);
        p.count("permutations", c.probes.permutations);
    });
    r.list("variants", c.variants);
    r.object("gate", [&](detail::ObjectReader& g) {
        g.real("min_pretrained_f1", c.gate.min_pretrained_f1);
        g.real("min_f1_drop", c.gate.min_f1_drop);
        g.real("min_sft_domain_accuracy", c.gate.min_sft_domain_accuracy);
        g.boolean("enforce", c.gate.enforce);
    });
    r.object("sweep", [&](detail::ObjectReader& s) {
        s.list("d_hon_size", c.sweep.d_hon_size);
        s.list("d_task_size", c.sweep.d_task_size);
        s.list("r_iw", c.sweep.r_iw);
        s.list("r_cw", c.sweep.r_cw);
        s.real("plateau_tolerance", c.sweep.plateau_tolerance);
    });
    r.finish();
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config: '" + path + "' is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

// Canonical form: every field, defaults included. output_dir is omitted
// because it does not affect any result.
inline nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json j = {
        {"schema", kConfigSchema},
        {"world",
         {{"entities", c.world.entities},
          {"known", c.world.known},
          {"unknown", c.world.unknown},
          {"base_relations", c.world.base_relations},
          {"domain_relations", c.world.domain_relations},
          {"answers", c.world.answers},
          {"novel_domain_fraction", c.world.novel_domain_fraction}}},
        {"datasets",
         {{"honesty_eval", c.datasets.honesty_eval},
          {"domain_eval", c.datasets.domain_eval},
          {"d_hon", c.datasets.d_hon},
          {"d_task", c.datasets.d_task},
          {"d_hon_holdout", c.datasets.d_hon_holdout},
          {"pretrain_idk_fraction", c.datasets.pretrain_idk_fraction}}},
        {"model",
         {{"embed_dim", c.embed_dim},
          {"hidden_dim", c.hidden_dim},
          {"num_layers", c.num_layers},
          {"embed_init_scale", c.embed_init_scale}}},
        {"train",
         {{"pretrain", detail::stage_json(c.pretrain)},
          {"sft", detail::stage_json(c.sft)},
          {"rait", detail::stage_json(c.rait)},
          {"rehearsal", detail::stage_json(c.rehearsal)},
          {"rehearsal_fraction", c.rehearsal_fraction}}},
        {"hcnr",
         {{"r_iw", c.hcnr.r_iw},
          {"r_cw", c.hcnr.r_cw},
          {"lambda_frac", c.hcnr.lambda_frac},
          {"hessian", to_string(c.hcnr.hessian)},
          {"holdout_tolerance", c.hcnr.holdout_tolerance}}},
        {"probes",
         {{"reg", c.probes.options.reg},
          {"iters", c.probes.options.iters},
          {"learning_rate", c.probes.options.learning_rate},
          {"permutations", c.probes.permutations}}},
        {"variants", c.variants},
        {"gate",
         {{"min_pretrained_f1", c.gate.min_pretrained_f1},
          {"min_f1_drop", c.gate.min_f1_drop},
          {"min_sft_domain_accuracy", c.gate.min_sft_domain_accuracy},
          {"enforce", c.gate.enforce}}},
        {"sweep",
         {{"d_hon_size", c.sweep.d_hon_size},
          {"d_task_size", c.sweep.d_task_size},
          {"r_iw", c.sweep.r_iw},
          {"r_cw", c.sweep.r_cw},
          {"plateau_tolerance", c.sweep.plateau_tolerance}}},
    };
    if (c.seed) j["seed"] = *c.seed;
    return j;
}

inline std::string hash_json(const nlohmann::json& j) { return hex64(fnv1a64(j.dump())); }

inline std::string config_hash(const ExperimentConfig& c) { return hash_json(to_json(c)); }

// Cache keys: each trained stage hashes only the sections it depends on.
struct StageKeys {
    std::string world, datasets, pretrain, sft, rait, rehearsal;
};

inline StageKeys stage_keys(const ExperimentConfig& c) {
    const nlohmann::json j = to_json(c);
    StageKeys k;
    k.world = hash_json({{"seed", c.seed_value()}, {"world", j["world"]}});
    k.datasets = hash_json({{"up", k.world}, {"datasets", j["datasets"]}});
    k.pretrain = hash_json({{"up", k.datasets}, {"model", j["model"]}, {"train", j["train"]["pretrain"]}});
    k.sft = hash_json({{"up", k.pretrain}, {"train", j["train"]["sft"]}});
    k.rait = hash_json({{"up", k.sft}, {"train", j["train"]["rait"]}});
    k.rehearsal = hash_json({{"up", k.pretrain},
                             {"train", j["train"]["rehearsal"]},
                             {"fraction", j["train"]["rehearsal_fraction"]}});
    return k;
}

// ============================================================================
// FILE PLUMBING
// ============================================================================

// Writes via a temporary file and rename so readers never see partial files.
inline void write_file(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw InputError("cannot write '" + tmp.string() + "'");
        out << content;
        if (!out) throw InputError("write failed for '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot read '" + path.string() + "'");
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

inline std::string json_text(const nlohmann::json& j) { return j.dump(2) + '\n'; }

// Exclusive writer lock for an output directory.
class OutputLock {
public:
    explicit OutputLock(const fs::path& dir) : path_(dir / ".lock") {
        fs::create_directories(dir);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw InputError("output directory '" + dir.string() + "' is locked by another run (remove '" +
                             path_.string() + "' if stale)");
        const std::string pid = std::to_string(::getpid()) + '\n';
        [[maybe_unused]] const auto n = ::write(fd_, pid.data(), pid.size());
    }
    OutputLock(const OutputLock&) = delete;
    OutputLock& operator=(const OutputLock&) = delete;
    ~OutputLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            std::error_code ec;
            fs::remove(path_, ec);
        }
    }

private:
    fs::path path_;
    int fd_ = -1;
};

inline nlohmann::json curve_json(const RecoveryCurve& c) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : c.points)
        pts.push_back({{"step", p.step}, {"f1", p.honesty_f1}, {"rf_delta", p.refusal_delta},
                       {"domain_acc", p.domain_accuracy}});
    return pts;
}

inline RecoveryCurve curve_from_json(const nlohmann::json& j) {
    RecoveryCurve c;
    for (const auto& p : j)
        c.points.push_back({p.at("step").get<std::size_t>(), p.at("f1").get<double>(),
                            p.at("rf_delta").get<double>(), p.at("domain_acc").get<double>()});
    return c;
}

// ============================================================================
// PIPELINE
// ============================================================================

struct GateResult {
    double pretrained_f1 = 0.0;
    double sft_f1 = 0.0;
    double f1_drop = 0.0;
    double sft_domain_accuracy = 0.0;
    bool pretrained_ok = false;
    bool drop_ok = false;
    bool domain_ok = false;
    bool passed() const noexcept { return pretrained_ok && drop_ok && domain_ok; }
};

struct VariantResult {
    std::string name;
    ModelCheckpoint model;
    EvalReport report;
};

struct LayerCompensationCheck {
    std::size_t layer = 0;
    double gap_restored = 0.0;
    double gap_hcnr = 0.0;
    double surrogate_restored = 0.0;
    double surrogate_hcnr = 0.0;
    double holdout_gap_hcnr = 0.0;
    double fit_per_example = 0.0;
    double holdout_per_example = 0.0;
    bool gap_decreased = false;
    bool surrogate_decreased = false;
    bool holdout_ok = false;
};

struct ProbeSummary {
    TransferGrid grid;
    PermutationControl control;
    std::vector<double> transfer_gap;  // |within-SFT - pretrained->SFT| per layer
    bool transfer_ok = false;
    bool control_ok = false;
};

struct SweepRow {
    std::string axis;
    double value = 0.0;
    EvalReport report;
    std::size_t selected_neurons = 0;
    double modification_ratio = 0.0;
};

struct SweepResult {
    std::vector<SweepRow> rows;
    std::optional<bool> d_hon_plateau;
    bool r_iw_monotone = true;
};

using LogSink = std::function<void(const std::string&)>;

class Pipeline {
public:
    Pipeline(ExperimentConfig cfg, fs::path out, LogSink echo = {})
        : cfg_(std::move(cfg)), out_(std::move(out)), echo_(std::move(echo)) {
        validate(cfg_);
        seed_ = cfg_.seed_value();
        hash_ = config_hash(cfg_);
        keys_ = stage_keys(cfg_);
        lock_ = std::make_unique<OutputLock>(out_);
        write_file(out_ / "config.json", json_text(to_json(cfg_)));
        log("config", "config_hash=" + hash_ + " seed=" + std::to_string(seed_));
    }

    const ExperimentConfig& config() const noexcept { return cfg_; }
    const std::string& hash() const noexcept { return hash_; }
    std::uint64_t seed() const noexcept { return seed_; }
    const fs::path& out_dir() const noexcept { return out_; }

    // ---------------------------------------------------------------- world
    const World& world() {
        if (!world_) {
            stage("gen-world", [&] {
                world_ = generate_world(cfg_.world, seed_);
                write_file(out_ / "world.jsonl", world_to_jsonl(*world_, hash_));
            });
        }
        return *world_;
    }

    const DatasetBundle& datasets() {
        if (!bundle_) {
            const World& w = world();
            stage("gen-world", [&] {
                bundle_ = build_datasets(w, cfg_.datasets, seed_);
                for (const auto& [name, member] : bundle_splits())
                    write_file(out_ / "datasets" / (name + ".jsonl"),
                               dataset_file_jsonl(name, (*bundle_).*member, hash_, w.hash()));
            });
        }
        return *bundle_;
    }

    EvalSuite eval_suite() {
        const DatasetBundle& b = datasets();
        return {b.honesty_eval, b.domain_eval, world().idk_token};
    }

    // ------------------------------------------------------------- training
    const ModelCheckpoint& pretrained() {
        if (!pretrained_) {
            const DatasetBundle& b = datasets();
            pretrained_ = trained_stage("pretrain", keys_.pretrain, cfg_.pretrain, [&](const TrainConfig& tc) {
                Architecture a;
                a.vocab = world().vocab_size;
                a.embed_dim = cfg_.embed_dim;
                a.hidden_dim = cfg_.hidden_dim;
                a.num_layers = cfg_.num_layers;
                return train(init_model(a, seed_, cfg_.embed_init_scale), b.pretrain, tc, eval_suite());
            });
            write_checkpoint("pretrained", *pretrained_);
        }
        return *pretrained_;
    }

    const ModelCheckpoint& sft() {
        if (!sft_) {
            const ModelCheckpoint& pre = pretrained();
            sft_ = trained_stage("sft", keys_.sft, cfg_.sft, [&](const TrainConfig& tc) {
                return train(pre, datasets().domain_train, tc, eval_suite());
            });
            write_checkpoint("sft", *sft_);
        }
        return *sft_;
    }

    // Honesty must have dropped (and domain skill risen) before surgery is
    // meaningful. Writes reports/gate.json; throws DegradationGateError when
    // enforced and failed.
    GateResult gate() {
        if (!gate_) {
            const EvalReport pre = report_for("pretrained", pretrained());
            const EvalReport s = report_for("sft", sft());
            GateResult g;
            g.pretrained_f1 = pre.honesty_f1;
            g.sft_f1 = s.honesty_f1;
            g.f1_drop = pre.honesty_f1 - s.honesty_f1;
            g.sft_domain_accuracy = s.domain_accuracy;
            g.pretrained_ok = g.pretrained_f1 >= cfg_.gate.min_pretrained_f1;
            g.drop_ok = g.f1_drop >= cfg_.gate.min_f1_drop;
            g.domain_ok = g.sft_domain_accuracy >= cfg_.gate.min_sft_domain_accuracy;
            write_file(out_ / "reports" / "gate.json",
                       json_text({{"schema", "hcnr-gate/1"},
                                  {"config_hash", hash_},
                                  {"seed", seed_},
                                  {"pretrained_f1", g.pretrained_f1},
                                  {"sft_f1", g.sft_f1},
                                  {"f1_drop", g.f1_drop},
                                  {"sft_domain_accuracy", g.sft_domain_accuracy},
                                  {"thresholds",
                                   {{"min_pretrained_f1", cfg_.gate.min_pretrained_f1},
                                    {"min_f1_drop", cfg_.gate.min_f1_drop},
                                    {"min_sft_domain_accuracy", cfg_.gate.min_sft_domain_accuracy}}},
                                  {"passed", g.passed()}}));
            gate_ = g;
        }
        if (cfg_.gate.enforce && !gate_->passed()) {
            std::ostringstream os;
            os.precision(4);
            os << "degradation gate failed: pretrained F1 " << gate_->pretrained_f1 << " (min "
               << cfg_.gate.min_pretrained_f1 << "), F1 drop " << gate_->f1_drop << " (min " << cfg_.gate.min_f1_drop
               << "), SFT domain accuracy " << gate_->sft_domain_accuracy << " (min "
               << cfg_.gate.min_sft_domain_accuracy << ")";
            throw DegradationGateError(os.str());
        }
        return *gate_;
    }

    // ------------------------------------------------------------- analysis
    // Both importance scores are measured on the SFT checkpoint: the neurons
    // to revert are those that currently carry honesty but not the task.
    const ImportanceTable& importance(PriorityRule rule = PriorityRule::honesty_over_task) {
        auto& slot = rule == PriorityRule::honesty_over_task ? importance_ : importance_wo_task_;
        if (!slot) {
            const ModelCheckpoint& s = sft();
            const DatasetBundle& b = datasets();
            stage("analyze", [&] { slot = build_importance(s, s, b.d_hon, b.d_task, cfg_.hcnr.r_iw, rule); });
            if (rule == PriorityRule::honesty_over_task)
                write_file(out_ / "importance.json", json_text(to_json(*slot, hash_)));
        }
        return *slot;
    }

    const SurgeryPlan& plan() {
        if (!plan_) {
            const ImportanceTable& t = importance();
            stage("analyze", [&] {
                plan_ = build_plan(t, pretrained(), sft(), cfg_.hcnr.r_iw, cfg_.hcnr.r_cw);
                write_file(out_ / "plan.json", json_text(to_json(*plan_, hash_)));
            });
        }
        return *plan_;
    }

    const CompensationContext& compensation() {
        if (!compensation_) {
            const SurgeryPlan& p = plan();
            stage("compensate", [&] {
                compensation_ = build_compensation(pretrained(), sft(), p, datasets().d_hon, cfg_.hcnr.lambda_frac,
                                                   cfg_.hcnr.hessian);
            });
            write_compensation_summary();
        }
        return *compensation_;
    }

    const std::vector<LayerCompensationCheck>& compensation_checks() {
        compensation();
        return compensation_checks_;
    }

    // ------------------------------------------------------------- variants
    const VariantResult& variant(const std::string& name) {
        if (!is_variant(name)) throw ConfigError("unknown variant '" + name + "'");
        if (auto it = variants_.find(name); it != variants_.end()) return it->second;
        if (name != "pretrained" && name != "sft") gate();
        ModelCheckpoint m;
        if (name == "pretrained") {
            m = pretrained();
        } else if (name == "sft") {
            m = sft();
        } else if (name == "hcnr") {
            const CompensationContext& ctx = compensation();
            stage("compensate", [&] { m = apply_hcnr(pretrained(), sft(), plan(), ctx); });
        } else if (name == "wo_com") {
            const SurgeryPlan& p = plan();
            stage("restore", [&] { m = restore(sft(), pretrained(), p); });
        } else if (name == "random" || name == "random_wo_com") {
            const SurgeryPlan& rp = random_plan();
            stage("ablate", [&] {
                const auto ctx = build_compensation(pretrained(), sft(), rp, datasets().d_hon, cfg_.hcnr.lambda_frac,
                                                    cfg_.hcnr.hessian, name == "random");
                m = apply_hcnr(pretrained(), sft(), rp, ctx);
            });
        } else if (name == "wo_task") {
            const ImportanceTable& t = importance(PriorityRule::honesty_only);
            stage("ablate", [&] {
                const SurgeryPlan p = build_plan(t, pretrained(), sft(), cfg_.hcnr.r_iw, cfg_.hcnr.r_cw);
                require_equal_selection(p, "wo_task");
                write_file(out_ / "plan_wo_task.json", json_text(to_json(p, hash_)));
                const auto ctx = build_compensation(pretrained(), sft(), p, datasets().d_hon, cfg_.hcnr.lambda_frac,
                                                    cfg_.hcnr.hessian);
                m = apply_hcnr(pretrained(), sft(), p, ctx);
            });
        } else if (name == "rait") {
            const ModelCheckpoint& s = sft();
            m = trained_stage("rait", keys_.rait, cfg_.rait,
                              [&](const TrainConfig& tc) { return train(s, datasets().d_hon, tc, eval_suite()); });
        } else if (name == "rehearsal") {
            const ModelCheckpoint& pre = pretrained();
            m = trained_stage("rehearsal", keys_.rehearsal, cfg_.rehearsal, [&](const TrainConfig& tc) {
                const DatasetBundle& b = datasets();
                const auto mix = rehearsal_mix(b.domain_train, b.d_hon, cfg_.rehearsal_fraction, seed_);
                return train(pre, mix, tc, eval_suite());
            });
        }
        if (name != "pretrained" && name != "sft") write_checkpoint(name, m);
        VariantResult r{name, m, report_for(name, m)};
        return variants_.emplace(name, std::move(r)).first->second;
    }

    // Uniformly random neuron sets with HCNR's per-layer sizes: the same
    // layers are touched, only the choice of rows within them is random.
    const SurgeryPlan& random_plan() {
        if (!random_plan_) {
            const SurgeryPlan& ours = plan();
            stage("ablate", [&] {
                RngStream rng = RngStream(seed_).split("variant/random");
                LayerIndexSets cand(ours.num_layers());
                for (std::size_t j = 0; j < cand.size(); ++j)
                    cand[j] = rng.sample_without_replacement(cfg_.hidden_dim, ours.candidates[j].size());
                random_plan_ = plan_with_layers(std::move(cand), ours.selected_layers, pretrained(), sft(),
                                                cfg_.hcnr.r_iw, cfg_.hcnr.r_cw);
                require_equal_selection(*random_plan_, "random");
                write_file(out_ / "plan_random.json", json_text(to_json(*random_plan_, hash_)));
            });
        }
        return *random_plan_;
    }

    // Runs the requested variants and writes reports/summary.csv.
    std::vector<const VariantResult*> run_variants(const std::vector<std::string>& names) {
        std::vector<const VariantResult*> out;
        for (const auto& n : names) out.push_back(&variant(n));
        write_summary();
        return out;
    }

    // RAIT recovery curve (computed by the "rait" variant).
    RecoveryCurve rait_curve() {
        variant("rait");
        return curves_.at("rait");
    }

    // --------------------------------------------------------------- probes
    const ProbeSummary& probes() {
        if (!probes_) {
            const ModelCheckpoint& pre = pretrained();
            const ModelCheckpoint& s = sft();
            stage("probe", [&] {
                std::vector<std::size_t> layers(cfg_.num_layers);
                for (std::size_t j = 0; j < layers.size(); ++j) layers[j] = j;
                const auto& data = datasets().honesty_eval;
                ProbeSummary p;
                p.grid = transfer_matrix({"pretrained", &pre}, {"sft", &s}, data, layers, seed_, cfg_.probes.options);
                p.control = permuted_unit_control(s, data, layers, seed_, cfg_.probes.permutations,
                                                  cfg_.probes.options);
                p.transfer_ok = true;
                p.control_ok = true;
                nlohmann::json per_layer = nlohmann::json::array();
                for (std::size_t li = 0; li < layers.size(); ++li) {
                    const std::size_t j = layers[li];
                    const double within = p.grid.find("sft", "sft", j)->auroc;
                    const double transfer = p.grid.find("pretrained", "sft", j)->auroc;
                    p.transfer_gap.push_back(std::abs(within - transfer));
                    p.transfer_ok = p.transfer_ok && p.transfer_gap.back() <= 0.10;
                    p.control_ok = p.control_ok && p.control.mean_auroc[li] < 0.65;
                    per_layer.push_back({{"layer", j},
                                         {"within_pretrained", p.grid.find("pretrained", "pretrained", j)->auroc},
                                         {"within_sft", within},
                                         {"pretrained_to_sft", transfer},
                                         {"sft_to_pretrained", p.grid.find("sft", "pretrained", j)->auroc},
                                         {"permuted_control_mean", p.control.mean_auroc[li]},
                                         {"permuted_control_draws", p.control.draws[li]}});
                }
                write_file(out_ / "probes" / "transfer.csv", p.grid.to_csv(hash_));
                std::ostringstream os;
                os.precision(17);
                os << "# config_hash=" << hash_ << '\n' << "layer,permutation,auroc\n";
                for (std::size_t li = 0; li < layers.size(); ++li)
                    for (std::size_t k = 0; k < p.control.draws[li].size(); ++k)
                        os << layers[li] << ',' << k << ',' << p.control.draws[li][k] << '\n';
                write_file(out_ / "probes" / "permuted_control.csv", os.str());
                write_file(out_ / "reports" / "probes.json",
                           json_text({{"schema", "hcnr-probes/1"},
                                      {"config_hash", hash_},
                                      {"seed", seed_},
                                      {"layers", per_layer},
                                      {"transfer_within_0_10", p.transfer_ok},
                                      {"control_below_0_65", p.control_ok},
                                      {"losses_monotone", p.grid.all_losses_monotone}}));
                probes_ = std::move(p);
            });
        }
        return *probes_;
    }

    // ---------------------------------------------------------------- sweep
    // One HCNR report per value of each axis; pretrained and SFT checkpoints
    // are shared, and every split not named by the axis is verified unchanged.
    SweepResult sweep(const std::vector<std::string>& axes = {"d_hon_size", "d_task_size", "r_iw", "r_cw"}) {
        gate();
        SweepResult res;
        stage("sweep", [&] {
            const ModelCheckpoint& pre = pretrained();
            const ModelCheckpoint& s = sft();
            const DatasetBundle& base = datasets();
            auto run_point = [&](const std::string& axis, double value, const DatasetBundle& b, double r_iw,
                                 double r_cw) {
                const ImportanceTable t = build_importance(s, s, b.d_hon, b.d_task, r_iw);
                const SurgeryPlan p = build_plan(t, pre, s, r_iw, r_cw);
                const auto ctx = build_compensation(pre, s, p, b.d_hon, cfg_.hcnr.lambda_frac, cfg_.hcnr.hessian);
                SweepRow row;
                row.axis = axis;
                row.value = value;
                row.report = evaluate(apply_hcnr(pre, s, p, ctx), base.honesty_eval, base.domain_eval,
                                      world().idk_token);
                row.report.variant = "hcnr";
                row.report.config_hash = hash_;
                row.report.seed = seed_;
                row.selected_neurons = p.hc_rows();
                row.modification_ratio = p.modification_ratio;
                res.rows.push_back(row);
            };
            auto resized = [&](const std::string& axis, std::size_t n) {
                DatasetSizes sz = cfg_.datasets;
                (axis == "d_hon_size" ? sz.d_hon : sz.d_task) = n;
                DatasetBundle b = build_datasets(world(), sz, seed_);
                for (const auto& [name, member] : bundle_splits()) {
                    if ((axis == "d_hon_size" && name == "d_hon") || (axis == "d_task_size" && name == "d_task"))
                        continue;
                    if (b.*member != base.*member)
                        throw InternalError("sweep over " + axis + " changed the '" + name + "' split");
                }
                return b;
            };
            for (const auto& axis : axes) {
                if (axis == "d_hon_size" || axis == "d_task_size") {
                    const auto& values = axis == "d_hon_size" ? cfg_.sweep.d_hon_size : cfg_.sweep.d_task_size;
                    for (std::size_t n : values)
                        run_point(axis, static_cast<double>(n), resized(axis, n), cfg_.hcnr.r_iw, cfg_.hcnr.r_cw);
                } else if (axis == "r_iw") {
                    for (double v : cfg_.sweep.r_iw) run_point(axis, v, base, v, cfg_.hcnr.r_cw);
                } else if (axis == "r_cw") {
                    for (double v : cfg_.sweep.r_cw) run_point(axis, v, base, cfg_.hcnr.r_iw, v);
                } else {
                    throw ConfigError("unknown sweep axis '" + axis + "'");
                }
            }
            summarize_sweep(res);
            write_sweep(res, axes);
        });
        return res;
    }

    // ---------------------------------------------------------------- run-all
    // Stages in order; `stop_after` ends the run early (empty = all).
    void run_all(const std::vector<std::string>& variants, const std::string& stop_after = "") {
        static const std::vector<std::string> order = {"gen-world", "pretrain", "sft",   "analyze", "compensate",
                                                       "ablate",    "probe",    "sweep", "report"};
        if (!stop_after.empty() && std::find(order.begin(), order.end(), stop_after) == order.end())
            throw ConfigError("unknown stage '" + stop_after + "'");
        auto done = [&](const std::string& s) { return s == stop_after; };
        datasets();
        if (done("gen-world")) return;
        report_for("pretrained", pretrained());
        if (done("pretrain")) return;
        report_for("sft", sft());
        gate();
        if (done("sft")) return;
        plan();
        if (done("analyze")) return;
        compensation();
        if (done("compensate")) return;
        run_variants(variants);
        if (done("ablate")) return;
        probes();
        if (done("probe")) return;
        sweep();
        if (done("sweep")) return;
        write_run_report();
    }

    // reports/run.json: the relational checks of the pinned-seed experiment.
    nlohmann::json run_report() {
        const GateResult g = gate();
        const EvalReport& hc = variant("hcnr").report;
        const EvalReport& wo = variant("wo_com").report;
        const EvalReport& rnd = variant("random").report;
        const EvalReport& s = variant("sft").report;
        const double lost = g.pretrained_f1 - g.sft_f1;
        const double recovery = lost > 0.0 ? (hc.honesty_f1 - s.honesty_f1) / lost : 0.0;
        const RecoveryCurve rc = rait_curve();
        double rait_best_gain = 0.0;
        for (const auto& p : rc.points)
            if (p.step <= 200) rait_best_gain = std::max(rait_best_gain, p.honesty_f1 - rc.points.front().honesty_f1);
        bool gaps_ok = true;
        for (const auto& c : compensation_checks()) gaps_ok = gaps_ok && c.gap_decreased;
        const ProbeSummary& pr = probes();
        return {{"schema", "hcnr-run/1"},
                {"config_hash", hash_},
                {"seed", seed_},
                {"gate_passed", g.passed()},
                {"f1_drop", g.f1_drop},
                {"recovery_fraction", recovery},
                {"hcnr_ge_wo_com", hc.honesty_f1 >= wo.honesty_f1},
                {"hcnr_ge_random", hc.honesty_f1 >= rnd.honesty_f1},
                {"hcnr_ge_sft", hc.honesty_f1 >= s.honesty_f1},
                {"hcnr_domain_within_5pts", std::abs(hc.domain_accuracy - s.domain_accuracy) <= 0.05},
                {"compensation_gap_decreased", gaps_ok},
                {"probe_transfer_ok", pr.transfer_ok},
                {"probe_control_ok", pr.control_ok},
                {"rait_gain_200_steps", rait_best_gain}};
    }

    void write_run_report() { write_file(out_ / "reports" / "run.json", json_text(run_report())); }

    EvalReport report_for(const std::string& name, const ModelCheckpoint& m) {
        if (auto it = reports_.find(name); it != reports_.end()) return it->second;
        EvalReport r;
        const EvalSuite es = eval_suite();
        stage("eval", [&] { r = evaluate(m, es.honesty_eval, es.domain_eval, es.idk_token); });
        r.variant = name;
        r.config_hash = hash_;
        r.seed = seed_;
        write_file(out_ / "reports" / (name + ".json"), json_text(to_json(r)));
        reports_[name] = r;
        return r;
    }

    void log(const std::string& stage_name, const std::string& msg) {
        const std::string line = "[" + stage_name + "] " + msg;
        std::ofstream(out_ / "run.log", std::ios::app) << line << '\n';
        if (echo_) echo_(line);
    }

private:
    // Runs `f` as part of `name`, wrapping module errors into StageError and
    // logging the wall time to run.log.
    template <class F>
    void stage(const std::string& name, F&& f) {
        const auto t0 = std::chrono::steady_clock::now();
        try {
            f();
        } catch (const StageError&) {
            throw;
        } catch (const ConfigError&) {
            throw;
        } catch (const DegradationGateError&) {
            throw;
        } catch (const Error& e) {
            log(name, std::string("FAILED: ") + e.what());
            throw StageError(name, e.what());
        } catch (const std::filesystem::filesystem_error& e) {
            log(name, std::string("FAILED: ") + e.what());
            throw StageError(name, e.what());
        }
        const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::ostringstream os;
        os.precision(3);
        os << std::fixed << dt << "s";
        log(name, "done in " + os.str());
    }

    TrainConfig make_train_config(const StageTrainConfig& s) {
        TrainConfig tc = s.train;
        tc.seed = seed_;
        if (s.train_domain_relation_embeddings) tc.trainable_embedding_rows = world().domain_relations;
        return tc;
    }

    template <class F>
    ModelCheckpoint trained_stage(const std::string& name, const std::string& key, const StageTrainConfig& s, F&& run) {
        const fs::path ckpt = out_ / "cache" / (name + "-" + key + ".hcnr");
        const fs::path curve = out_ / "cache" / (name + "-" + key + ".curve.json");
        ModelCheckpoint m;
        RecoveryCurve c;
        stage(name, [&] {
            if (fs::exists(ckpt) && fs::exists(curve)) {
                m = load_checkpoint(ckpt.string());
                c = curve_from_json(nlohmann::json::parse(read_file(curve)));
                log(name, "cache hit " + key);
                return;
            }
            TrainResult r = run(make_train_config(s));
            m = std::move(r.model);
            m.meta.seed = seed_;
            m.meta.world_hash = world().hash();
            c = std::move(r.curve);
            write_file(curve, curve_json(c).dump() + '\n');
            save_checkpoint(m, ckpt.string());
            std::ostringstream os;
            os.precision(6);
            os << "loss " << r.initial_loss << " -> " << r.final_loss;
            log(name, os.str());
        });
        m.meta.config_hash = hash_;
        if (!c.points.empty()) write_file(out_ / "curves" / (name + ".csv"), c.to_csv(hash_));
        curves_[name] = c;
        return m;
    }

    void write_checkpoint(const std::string& name, const ModelCheckpoint& m) {
        ModelCheckpoint copy = m;
        copy.meta.config_hash = hash_;
        copy.meta.world_hash = world().hash();
        copy.meta.seed = seed_;
        save_checkpoint(copy, (out_ / ("ckpt_" + name + ".hcnr")).string());
    }

    void require_equal_selection(const SurgeryPlan& p, const std::string& who) {
        const SurgeryPlan& ours = plan();
        if (who == "random")
            for (std::size_t j = 0; j < ours.num_layers(); ++j)
                if (p.hc[j].size() != ours.hc[j].size())
                    throw InternalError("random selected " + std::to_string(p.hc[j].size()) + " neurons in layer " +
                                        std::to_string(j) + " but HCNR selected " + std::to_string(ours.hc[j].size()));
        if (p.hc_rows() != ours.hc_rows())
            throw InternalError(who + " selected " + std::to_string(p.hc_rows()) + " neurons but HCNR selected " +
                                std::to_string(ours.hc_rows()));
    }

    void write_compensation_summary() {
        const CompensationContext& ctx = *compensation_;
        const DatasetBundle& b = datasets();
        const ModelCheckpoint& pre = pretrained();
        const ModelCheckpoint hc = apply_hcnr(pre, sft(), plan(), ctx);
        compensation_checks_.clear();
        nlohmann::json j = summary_json(ctx);
        nlohmann::json checks = nlohmann::json::array();
        for (const auto& [layer, lc] : ctx.layers) {
            LayerCompensationCheck c;
            c.layer = layer;
            c.gap_restored = lc.gap_restored;
            c.gap_hcnr = lc.gap_hcnr;
            c.surrogate_restored = lc.surrogate_restored;
            c.surrogate_hcnr = lc.surrogate_hcnr;
            c.holdout_gap_hcnr = activation_gap(hc, pre, b.d_hon_holdout, layer);
            c.fit_per_example = c.gap_hcnr / static_cast<double>(b.d_hon.size());
            c.holdout_per_example = c.holdout_gap_hcnr / static_cast<double>(b.d_hon_holdout.size());
            c.gap_decreased = c.gap_hcnr < c.gap_restored;
            c.surrogate_decreased = c.surrogate_hcnr < c.surrogate_restored;
            c.holdout_ok = c.holdout_per_example <= (1.0 + cfg_.hcnr.holdout_tolerance) * c.fit_per_example;
            compensation_checks_.push_back(c);
            checks.push_back({{"layer", layer},
                              {"gap_decreased", c.gap_decreased},
                              {"surrogate_decreased", c.surrogate_decreased},
                              {"holdout_d_hon_after", c.holdout_gap_hcnr},
                              {"fit_per_example", c.fit_per_example},
                              {"holdout_per_example", c.holdout_per_example},
                              {"holdout_within_tolerance", c.holdout_ok}});
            if (!c.holdout_ok)
                log("compensate", "warning: layer " + std::to_string(layer) +
                                      " holdout activation gap exceeds the fitting-batch gap by more than tolerance");
        }
        j["schema"] = "hcnr-compensation/1";
        j["config_hash"] = hash_;
        j["checks"] = checks;
        j["holdout_tolerance"] = cfg_.hcnr.holdout_tolerance;
        write_file(out_ / "compensation.json", json_text(j));
    }

    void write_summary() {
        std::ostringstream os;
        os.precision(17);
        os << "# config_hash=" << hash_ << '\n';
        os << "variant,honesty_f1,refusal_delta,domain_accuracy,tp,fp,fn,tn\n";
        for (const auto& name : all_variants()) {
            const auto it = variants_.find(name);
            if (it == variants_.end()) continue;
            const EvalReport& r = it->second.report;
            os << name << ',' << r.honesty_f1 << ',' << r.refusal_delta << ',' << r.domain_accuracy << ','
               << r.counts.tp << ',' << r.counts.fp << ',' << r.counts.fn << ',' << r.counts.tn << '\n';
        }
        write_file(out_ / "reports" / "summary.csv", os.str());
    }

    void summarize_sweep(SweepResult& res) const {
        std::optional<double> at128;
        double best_beyond = -1.0;
        std::size_t prev = 0;
        for (const auto& r : res.rows) {
            if (r.axis == "d_hon_size") {
                if (r.value == 128.0) at128 = r.report.honesty_f1;
                if (r.value >= 128.0) best_beyond = std::max(best_beyond, r.report.honesty_f1);
            }
            if (r.axis == "r_iw") {
                if (r.selected_neurons < prev) res.r_iw_monotone = false;
                prev = r.selected_neurons;
            }
        }
        if (at128) res.d_hon_plateau = best_beyond - *at128 <= cfg_.sweep.plateau_tolerance;
    }

    void write_sweep(const SweepResult& res, const std::vector<std::string>& axes) {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& axis : axes) {
            std::ostringstream os;
            os.precision(17);
            os << "# config_hash=" << hash_ << '\n';
            os << "axis,value,honesty_f1,refusal_delta,domain_accuracy,selected_neurons,modification_ratio\n";
            for (const auto& r : res.rows) {
                if (r.axis != axis) continue;
                os << r.axis << ',' << r.value << ',' << r.report.honesty_f1 << ',' << r.report.refusal_delta << ','
                   << r.report.domain_accuracy << ',' << r.selected_neurons << ',' << r.modification_ratio << '\n';
                rows.push_back({{"axis", r.axis},
                                {"value", r.value},
                                {"honesty_f1", r.report.honesty_f1},
                                {"refusal_delta", r.report.refusal_delta},
                                {"domain_accuracy", r.report.domain_accuracy},
                                {"selected_neurons", r.selected_neurons},
                                {"modification_ratio", r.modification_ratio}});
            }
            write_file(out_ / "sweeps" / (axis + ".csv"), os.str());
        }
        write_file(out_ / "reports" / "sweep.json",
                   json_text({{"schema", "hcnr-sweep/1"},
                              {"config_hash", hash_},
                              {"seed", seed_},
                              {"rows", rows},
                              {"d_hon_plateau_by_128",
                               res.d_hon_plateau ? nlohmann::json(*res.d_hon_plateau) : nlohmann::json(nullptr)},
                              {"r_iw_selection_monotone", res.r_iw_monotone}}));
    }

    ExperimentConfig cfg_;
    fs::path out_;
    LogSink echo_;
    std::uint64_t seed_ = 0;
    std::string hash_;
    StageKeys keys_;
    std::unique_ptr<OutputLock> lock_;

    std::optional<World> world_;
    std::optional<DatasetBundle> bundle_;
    std::optional<ModelCheckpoint> pretrained_, sft_;
    std::optional<GateResult> gate_;
    std::optional<ImportanceTable> importance_, importance_wo_task_;
    std::optional<SurgeryPlan> plan_, random_plan_;
    std::optional<CompensationContext> compensation_;
    std::vector<LayerCompensationCheck> compensation_checks_;
    std::optional<ProbeSummary> probes_;
    std::map<std::string, VariantResult> variants_;
    std::map<std::string, EvalReport> reports_;
    std::map<std::string, RecoveryCurve> curves_;
};

// ============================================================================
// STANDALONE EVALUATION
// ============================================================================

// Evaluates a checkpoint file against the honesty/domain eval splits of an
// output directory. Refuses pairs whose world hashes differ.
inline EvalReport evaluate_checkpoint_file(const fs::path& checkpoint, const fs::path& run_dir) {
    const ModelCheckpoint m = load_checkpoint(checkpoint.string());
    auto load_split = [&](const std::string& name) {
        std::ifstream in(run_dir / "datasets" / (name + ".jsonl"));
        if (!in) throw InputError("missing dataset split '" + name + "' under " + run_dir.string());
        nlohmann::json header;
        auto xs = from_jsonl(in, &header);
        if (!header.contains("world_hash"))
            throw InputError("dataset split '" + name + "' has no header with a world hash");
        const std::string wh = header["world_hash"].get<std::string>();
        if (wh != m.meta.world_hash)
            throw InputError("world hash mismatch: checkpoint '" + checkpoint.string() + "' was trained on world " +
                             m.meta.world_hash + " but split '" + name + "' belongs to world " + wh);
        return xs;
    };
    const auto hon = load_split("honesty_eval");
    const auto dom = load_split("domain_eval");
    std::ifstream wf(run_dir / "world.jsonl");
    std::string first;
    if (!wf || !std::getline(wf, first)) throw InputError("missing world.jsonl under " + run_dir.string());
    const nlohmann::json wh = nlohmann::json::parse(first);
    if (wh.at("world_hash").get<std::string>() != m.meta.world_hash)
        throw InputError("world hash mismatch between checkpoint and world.jsonl");
    EvalReport r = evaluate(m, hon, dom, wh.at("idk_token").get<TokenId>());
    r.variant = to_string(m.meta.provenance);
    r.config_hash = m.meta.config_hash;
    r.seed = m.meta.seed;
    return r;
}

}  // namespace hcnr
