#pragma once

// Run configuration: JSON with an explicit schema version, strict keys, and a
// run manifest that can be fed back in as a config.

#include "darlc/data.hpp"
#include "darlc/metrics.hpp"
#include "darlc/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

namespace darlc {

using json = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;

/// Bumped whenever a module's numeric output for a fixed config changes.
inline const std::map<std::string, std::string>& module_versions() {
    static const std::map<std::string, std::string> v{
        {"diff_engine", "1"}, {"data_synth", "1"}, {"gat_denoiser", "1"}, {"repr_module", "1"},
        {"smm_cluster", "1"}, {"joint_trainer", "1"}, {"k_inference", "1"}, {"metrics", "1"}, {"cli", "1"}};
    return v;
}

struct RunConfig {
    std::uint64_t seed = 0;
    std::string out_dir = "run";
    SynthConfig synth;
    PipelineConfig pipeline;  // augment, vit, train (incl. em, priors), k inference
    Distance distance = Distance::euclidean;

    void validate() const {
        synth.validate();
        pipeline.validate();
        VitConfig v = pipeline.vit;
        v.channels = synth.channels;
        v.height = synth.height + (v.patch - synth.height % v.patch) % v.patch;
        v.width = synth.width + (v.patch - synth.width % v.patch) % v.patch;
        v.validate();
    }
};

namespace detail {

/// Reads one JSON object, tracking which keys were consumed so leftovers can be rejected.
class Section {
public:
    Section(const json& j, std::string path, std::string module)
        : j_(j), path_(std::move(path)), module_(std::move(module)) {
        if (!j_.is_object()) fail(path_.empty() ? "config" : path_, "expected an object");
    }

    template <class T>
    void get(const std::string& key, T& dst) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!it->is_boolean()) throw std::runtime_error("expected a boolean");
            } else if constexpr (std::is_arithmetic_v<T>) {
                if (!it->is_number()) throw std::runtime_error("expected a number");
                if constexpr (std::is_integral_v<T>) {
                    if (!it->is_number_integer()) throw std::runtime_error("expected an integer");
                    if constexpr (std::is_unsigned_v<T>) {
                        if (it->is_number_integer() && !it->is_number_unsigned() && it->template get<long long>() < 0)
                            throw std::runtime_error("expected a non-negative integer");
                    }
                }
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!it->is_string()) throw std::runtime_error("expected a string");
            }
            dst = it->template get<T>();
        } catch (const std::exception& e) {
            fail(key_path(key), e.what());
        }
    }

    Section child(const std::string& key, const std::string& module) {
        seen_.insert(key);
        auto it = j_.find(key);
        static const json empty = json::object();
        return Section(it == j_.end() ? empty : *it, key_path(key), module);
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) fail(key_path(it.key()), "unknown key");
    }

    [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
        throw Error(ErrorKind::config, module_, "config key '" + key + "': " + msg);
    }
    std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    const std::string& module() const { return module_; }

private:
    const json& j_;
    std::string path_, module_;
    std::set<std::string> seen_;
};

/// Re-raises a validation failure with the offending section named.
template <class F>
void validate_section(const std::string& section, F&& f) {
    try {
        f();
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::config) throw;
        std::string msg = e.what();
        const std::string prefix = e.module() + ": ";
        if (msg.rfind(prefix, 0) == 0) msg = msg.substr(prefix.size());
        throw Error(ErrorKind::config, e.module(), "config section '" + section + "': " + msg);
    }
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
    const PipelineConfig& p = c.pipeline;
    const TrainSchedule& t = p.train;
    json j;
    j["schema_version"] = kSchemaVersion;
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    j["synth"] = {{"n_images", c.synth.n_images}, {"height", c.synth.height},     {"width", c.synth.width},
                  {"channels", c.synth.channels}, {"n_patterns", c.synth.n_patterns}, {"sparsity", c.synth.sparsity},
                  {"noise_std", c.synth.noise_std}};
    j["augment"] = {{"method", p.augment.method},
                    {"gks_sigma", p.augment.gks_sigma},
                    {"gat",
                     {{"widths", p.augment.gat.widths},
                      {"radius", p.augment.gat.radius},
                      {"slope", p.augment.gat.slope},
                      {"epochs", p.augment.gat.epochs},
                      {"lr", p.augment.gat.lr},
                      {"batch_size", p.augment.gat.batch_size}}}};
    j["vit"] = {{"patch", p.vit.patch}, {"dim", p.vit.dim},           {"depth", p.vit.depth},
                {"heads", p.vit.heads}, {"mlp_ratio", p.vit.mlp_ratio}, {"mask_ratio", p.vit.mask_ratio}};
    j["train"] = {{"pretrain_epochs", t.pretrain_epochs},
                  {"joint_epochs", t.joint_epochs},
                  {"batch_size", t.batch_size},
                  {"pretrain_lr", t.pretrain_lr},
                  {"joint_lr", t.joint_lr},
                  {"smm_lr", t.smm_lr},
                  {"eta0", t.eta0},
                  {"upsilon", t.upsilon},
                  {"ema_momentum", t.ema_momentum},
                  {"tau", t.tau},
                  {"change_tol", t.change_tol},
                  {"proj_dim", t.proj_dim},
                  {"sigma_min", t.sigma_min},
                  {"sigma_max", t.sigma_max},
                  {"use_contrastive", t.use_contrastive}};
    j["em"] = {{"v_min", t.em.v_min}, {"v_max", t.em.v_max}, {"v_init", t.em.v_init},          {"ridge", t.em.ridge},
               {"tol", t.em.tol},     {"max_iter", t.em.max_iter}, {"update_dof", t.em.update_dof}};
    j["priors"] = {{"alpha", t.priors.alpha},
                   {"kappa", t.priors.kappa},
                   {"s0_scale", t.priors.s0_scale},
                   {"rho_extra", t.priors.rho_extra}};
    j["k_inference"] = {{"k", p.k}, {"seed_top_k", p.seed_top_k}, {"k_max", p.k_max}};
    j["metrics"] = {{"distance", to_string(c.distance)}};
    return j;
}

/// Parses a config object, or the "config" member of a run manifest.
inline RunConfig config_from_json(const json& root) {
    const json* src = &root;
    if (root.is_object() && root.contains("manifest_version")) {
        require(root.contains("config"), "cli", "manifest has no 'config' member", ErrorKind::config);
        src = &root.at("config");
    }
    RunConfig c;
    PipelineConfig& p = c.pipeline;
    TrainSchedule& t = p.train;
    detail::Section top(*src, "", "cli");
    int version = -1;
    top.get("schema_version", version);
    if (version != kSchemaVersion)
        top.fail("schema_version", "expected " + std::to_string(kSchemaVersion) +
                                       (version < 0 ? " (missing)" : ", got " + std::to_string(version)));
    top.get("seed", c.seed);
    top.get("out_dir", c.out_dir);

    auto s = top.child("synth", "data_synth");
    s.get("n_images", c.synth.n_images);
    s.get("height", c.synth.height);
    s.get("width", c.synth.width);
    s.get("channels", c.synth.channels);
    s.get("n_patterns", c.synth.n_patterns);
    s.get("sparsity", c.synth.sparsity);
    s.get("noise_std", c.synth.noise_std);
    s.finish();

    auto a = top.child("augment", "gat_denoiser");
    a.get("method", p.augment.method);
    a.get("gks_sigma", p.augment.gks_sigma);
    auto g = a.child("gat", "gat_denoiser");
    g.get("widths", p.augment.gat.widths);
    g.get("radius", p.augment.gat.radius);
    g.get("slope", p.augment.gat.slope);
    g.get("epochs", p.augment.gat.epochs);
    g.get("lr", p.augment.gat.lr);
    g.get("batch_size", p.augment.gat.batch_size);
    g.finish();
    a.finish();

    auto v = top.child("vit", "repr_module");
    v.get("patch", p.vit.patch);
    v.get("dim", p.vit.dim);
    v.get("depth", p.vit.depth);
    v.get("heads", p.vit.heads);
    v.get("mlp_ratio", p.vit.mlp_ratio);
    v.get("mask_ratio", p.vit.mask_ratio);
    v.finish();

    auto tr = top.child("train", "joint_trainer");
    tr.get("pretrain_epochs", t.pretrain_epochs);
    tr.get("joint_epochs", t.joint_epochs);
    tr.get("batch_size", t.batch_size);
    tr.get("pretrain_lr", t.pretrain_lr);
    tr.get("joint_lr", t.joint_lr);
    tr.get("smm_lr", t.smm_lr);
    tr.get("eta0", t.eta0);
    tr.get("upsilon", t.upsilon);
    tr.get("ema_momentum", t.ema_momentum);
    tr.get("tau", t.tau);
    tr.get("change_tol", t.change_tol);
    tr.get("proj_dim", t.proj_dim);
    tr.get("sigma_min", t.sigma_min);
    tr.get("sigma_max", t.sigma_max);
    tr.get("use_contrastive", t.use_contrastive);
    tr.finish();

    auto e = top.child("em", "smm_cluster");
    e.get("v_min", t.em.v_min);
    e.get("v_max", t.em.v_max);
    e.get("v_init", t.em.v_init);
    e.get("ridge", t.em.ridge);
    e.get("tol", t.em.tol);
    e.get("max_iter", t.em.max_iter);
    e.get("update_dof", t.em.update_dof);
    e.finish();

    auto pr = top.child("priors", "smm_cluster");
    pr.get("alpha", t.priors.alpha);
    pr.get("kappa", t.priors.kappa);
    pr.get("s0_scale", t.priors.s0_scale);
    pr.get("rho_extra", t.priors.rho_extra);
    pr.finish();

    auto k = top.child("k_inference", "k_inference");
    k.get("k", p.k);
    k.get("seed_top_k", p.seed_top_k);
    k.get("k_max", p.k_max);
    k.finish();

    auto m = top.child("metrics", "metrics");
    std::string dist = to_string(c.distance);
    m.get("distance", dist);
    m.finish();
    top.finish();

    try {
        c.distance = parse_distance(dist);
    } catch (const Error& err) {
        m.fail("metrics.distance", "must be 'euclidean' or 'pearson'");
    }
    c.synth.seed = c.seed;
    p.seed = c.seed;
    detail::validate_section("synth", [&] { c.synth.validate(); });
    detail::validate_section("augment", [&] { p.augment.validate(); });
    detail::validate_section("train", [&] { t.validate(); });
    detail::validate_section("k_inference", [&] { p.validate(); });
    detail::validate_section("vit", [&] { c.validate(); });
    return c;
}

inline RunConfig parse_config(const std::string& text, const std::string& origin = "config") {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::config, "cli", origin + ": not valid JSON (" + std::string(e.what()) + ")");
    }
    return config_from_json(j);
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), "cli", "cannot open config " + path, ErrorKind::io);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str(), path);
}

/// FNV-1a over the canonical serialization, as 16 hex digits.
inline std::string config_hash(const RunConfig& c) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(c).dump())));
    return buf;
}

inline json manifest(const RunConfig& c, const std::string& command) {
    json m;
    m["manifest_version"] = 1;
    m["command"] = command;
    m["config_hash"] = config_hash(c);
    m["seed"] = c.seed;
    m["modules"] = module_versions();
    m["config"] = to_json(c);
    return m;
}

}  // namespace darlc
