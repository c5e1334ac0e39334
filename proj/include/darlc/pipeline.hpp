#pragma once

// End-to-end orchestration shared by the CLI and the acceptance runner:
// smoothing -> seeding graph -> K -> pretraining -> joint training.

#include "darlc/data.hpp"
#include "darlc/gat.hpp"
#include "darlc/kinfer.hpp"
#include "darlc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

namespace darlc {

struct AugmentConfig {
    std::string method = "gat";  // gat | gks
    GatConfig gat;
    double gks_sigma = 1.5;

    void validate() const {
        require(method == "gat" || method == "gks", "gat_denoiser", "augment.method must be 'gat' or 'gks'",
                ErrorKind::config);
        gat.validate();
        require(gks_sigma > 0, "gat_denoiser", "augment.gks_sigma must be > 0", ErrorKind::config);
    }
};

struct PipelineConfig {
    std::uint64_t seed = 0;
    AugmentConfig augment;
    VitConfig vit;  // image shape fields are taken from the data
    TrainSchedule train;
    Index k = 0;  // 0: infer from the seeding graph
    Index seed_top_k = 15;
    Index k_max = 10;

    void validate() const {
        augment.validate();
        train.validate();
        require(k >= 0, "k_inference", "k must be >= 0", ErrorKind::config);
        require(seed_top_k >= 1 && k_max >= 1, "k_inference", "seed_top_k and k_max must be >= 1", ErrorKind::config);
    }
};

inline ImageTensor augment_images(const ImageTensor& imgs, const AugmentConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (cfg.method == "gks") return gks_smooth(imgs, cfg.gks_sigma);
    const PixelGraph graph = build_pixel_graph(imgs.height(), imgs.width(), cfg.gat.radius);
    DenoiserFit fit = train_denoiser(imgs, graph, cfg.gat, split_seed(seed, "gat"));
    return smooth(imgs, fit.params);
}

/// Rescales `view` so its mean intensity matches `reference`; the factor keeps its sign, so a
/// sign-flipped view comes back positive. Falls back to matching the root mean square when the view's
/// mean vanishes. The denoiser's reconstructions can come out orders of magnitude smaller than their
/// inputs (the per-pixel norm loss pulls a mostly-zero image toward 0); Gaussian smoothing preserves
/// the mean, so it is unaffected.
inline ImageTensor match_scale(const ImageTensor& view, const ImageTensor& reference) {
    auto moments = [](const ImageTensor& t) {
        double s = 0, ss = 0;
        for (float v : t.values()) {
            s += v;
            ss += static_cast<double>(v) * v;
        }
        const auto n = static_cast<double>(std::max<std::size_t>(1, t.values().size()));
        return std::pair{s / n, std::sqrt(ss / n)};
    };
    const auto [vm, vr] = moments(view);
    const auto [rm, rr] = moments(reference);
    const double factor = std::abs(vm) > 1e-12 * vr && rm > 0 ? rm / vm : (vr > 0 ? rr / vr : 1.0);
    ImageTensor out = view;
    for (float& v : out.values()) v = static_cast<float>(v * factor);
    return out;
}

inline VitConfig vit_for(const VitConfig& base, const ImageTensor& padded) {
    VitConfig v = base;
    v.channels = padded.channels();
    v.height = padded.height();
    v.width = padded.width();
    v.validate();
    return v;
}

/// Padded patch matrices of the raw and smoothed views plus the matching encoder shape.
struct PatchViews {
    VitConfig vit;
    Matrix raw, smooth;
};

inline PatchViews patch_views(const ImageTensor& images, const ImageTensor& smooth, const VitConfig& base) {
    require(smooth.count() == images.count() && smooth.image_size() == images.image_size(), "repr_module",
            "smoothed images do not match the input");
    ImageTensor raw_p = pad_to_multiple(images, base.patch);
    ImageTensor smooth_p = pad_to_multiple(match_scale(smooth, images), base.patch);
    PatchViews v{vit_for(base, raw_p), {}, {}};
    v.raw = patchify(raw_p, v.vit.patch);
    v.smooth = patchify(smooth_p, v.vit.patch);
    return v;
}

struct PipelineRun {
    ImageTensor smooth;
    Matrix S;
    EigengapResult eig;
    Index K = 0;
    Learner learner;
    std::vector<EpochLog> pretrain_logs;
    JointResult joint;
};

/// Runs every stage after data generation. `smooth` may be supplied to skip augmentation.
inline PipelineRun run_pipeline(const ImageTensor& images, const PipelineConfig& cfg,
                                const ImageTensor* smooth = nullptr, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    PipelineRun run;
    run.smooth = smooth ? *smooth : augment_images(images, cfg.augment, cfg.seed);
    run.S = seed_similarity(run.smooth.flat_matrix(), cfg.seed_top_k);
    run.eig = infer_k(run.S, cfg.k_max);
    run.K = cfg.k > 0 ? cfg.k : run.eig.k;

    PatchViews v = patch_views(images, run.smooth, cfg.vit);
    run.learner = init_learner(v.vit, cfg.train, cfg.seed);
    run.pretrain_logs = pretrain(run.learner, v.raw, v.smooth, cfg.train, split_seed(cfg.seed, "pretrain"), on_epoch);
    run.joint = joint_train(run.learner, v.raw, v.smooth, run.S, run.K, cfg.train, split_seed(cfg.seed, "joint"), on_epoch);
    return run;
}

}  // namespace darlc
