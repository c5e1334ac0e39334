// darlc: command-line driver for the clustering pipeline.
//
//   darlc synth      --out DIR                      images.snt, labels.txt
//   darlc augment    --images F --method gat|gks --out F.smooth
//   darlc infer-k    --smooth F [--out eig.csv]
//   darlc pretrain   --images F --smooth F --out model.vit
//   darlc train      --images F --smooth F [--init model.vit] --out DIR
//   darlc eval       --truth L (--pred L | --q Q.csv) [--z Z.csv] --out metrics.csv
//   darlc export-embeddings --model model.vit --images F --out Z.csv
//   darlc run        --out DIR                      all of the above in one go
//
// Every subcommand accepts --config (a config or a manifest.json) and --seed.
// Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 I/O error.

#include "darlc/config.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace darlc;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    bool quiet = false;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "JSON config or run manifest");
    sub->add_option("--seed", c.seed, "root seed (overrides the config)");
    sub->add_flag("--quiet", c.quiet, "no per-epoch progress on stderr");
}

RunConfig resolve(const Common& c) {
    RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
    if (c.seed) {
        cfg.seed = *c.seed;
        cfg.synth.seed = *c.seed;
        cfg.pipeline.seed = *c.seed;
    }
    cfg.validate();
    return cfg;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec && fs::is_directory(dir), "cli", "cannot create directory '" + dir + "'", ErrorKind::io);
}

void ensure_parent(const std::string& file) {
    const fs::path parent = fs::path(file).parent_path();
    if (!parent.empty()) ensure_dir(parent.string());
}

void write_text(const std::string& path, const std::string& text) {
    ensure_parent(path);
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), "cli", "cannot open '" + path + "' for writing", ErrorKind::io);
    os << text;
    require(static_cast<bool>(os), "cli", "write failed: " + path, ErrorKind::io);
}

void write_manifest(const std::string& path, const RunConfig& cfg, const std::string& command, const json& inputs) {
    json m = manifest(cfg, command);
    m["inputs"] = inputs;
    write_text(path, m.dump(2) + "\n");
}

EpochCallback progress(bool quiet) {
    if (quiet) return {};
    return [](const EpochLog& l) {
        std::fprintf(stderr, "%s epoch %lld", l.phase.c_str(), static_cast<long long>(l.epoch));
        if (!std::isnan(l.rec)) std::fprintf(stderr, " rec %.4g", l.rec);
        if (!std::isnan(l.clr)) std::fprintf(stderr, " clr %.4g", l.clr);
        if (!std::isnan(l.kl)) std::fprintf(stderr, " kl %.4g", l.kl);
        if (!std::isnan(l.change)) std::fprintf(stderr, " change %.4g", l.change);
        std::fprintf(stderr, "\n");
    };
}

EigengapResult eigengap_for(const ImageTensor& smooth, const PipelineConfig& p, Matrix* S_out = nullptr) {
    Matrix S = seed_similarity(smooth.flat_matrix(), p.seed_top_k);
    EigengapResult r = infer_k(S, p.k_max);
    if (S_out) *S_out = std::move(S);
    return r;
}

void write_eigenvalues(const std::string& path, const EigengapResult& r, Index count = 20) {
    std::ostringstream os;
    os << "index,eigenvalue\n";
    char buf[32];
    for (Index i = 0; i < std::min(count, r.eigenvalues.size()); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", r.eigenvalues(i));
        os << i + 1 << ',' << buf << '\n';
    }
    write_text(path, os.str());
}

void print_k(const EigengapResult& r) {
    std::cout << "K=" << r.k << "\n"
              << "gap_index=" << r.gap_index << "\n"
              << "zero_eigenvalues=" << r.zero_count << "\n"
              << "unrestricted_gap_index=" << r.literal_gap_index << "\n";
}

struct TrainOutputs {
    Learner learner;
    JointResult joint;
    std::vector<EpochLog> logs;
};

void write_train_outputs(const std::string& dir, const TrainOutputs& t) {
    ensure_dir(dir);
    write_vit(dir + "/model.vit", t.learner);
    write_smm(dir + "/smm.smm1", t.joint.theta);
    write_csv(dir + "/Q.csv", t.joint.Q);
    write_csv(dir + "/Z.csv", t.joint.Z);
    write_logs_csv(dir + "/logs.csv", t.logs);
    write_labels(dir + "/labels_pred.txt", t.joint.labels);
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

/// metric,distance,value rows; DBI rows only when embeddings are given, SAM split only with images.
std::string metrics_csv(const std::vector<int>& pred, const std::vector<int>& truth, const Matrix* Z,
                        const ImageTensor* images, Distance distance) {
    require(pred.size() == truth.size(), "metrics", "predicted and true labels differ in length");
    std::ostringstream os;
    os << "metric,distance,value\n";
    os << "nmi,," << fmt(nmi(pred, truth)) << '\n';
    os << "ari,," << fmt(ari(pred, truth)) << '\n';
    if (Z) {
        require(static_cast<std::size_t>(Z->rows()) == pred.size(), "metrics", "Z rows do not match the labels");
        os << "dbi," << to_string(distance) << ',' << fmt(dbi(*Z, pred, distance)) << '\n';
    }
    if (images) {
        QualitySplit q = cluster_quality_split(images->flat_matrix(), pred);
        for (const auto& [k, s] : q.mean_sam) os << "sam_cluster_" << k << ",," << fmt(s) << '\n';
        os << "sam_threshold,," << fmt(q.threshold) << '\n';
        os << "high_quality_clusters,," << q.high.size() << '\n';
    }
    return os.str();
}

int exit_code(ErrorKind k) {
    switch (k) {
        case ErrorKind::config:
        case ErrorKind::invalid_argument: return 2;
        case ErrorKind::numeric: return 3;
        case ErrorKind::io: return 4;
    }
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sparse noisy image clustering: denoising augmentation, self-supervised representation "
                 "learning and Student's-t mixture clustering"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "darlc 1.0");

    Common common;
    std::string out, images_path, smooth_path, method, init_path, truth_path, pred_path, q_path, z_path, model_path;
    std::optional<Index> k_flag, pretrain_epochs, joint_epochs, batch_size;
    std::optional<std::string> distance_flag;

    auto* synth = app.add_subcommand("synth", "generate the synthetic benchmark");
    add_common(synth, common);
    synth->add_option("--out", out, "output directory")->required();

    auto* augment = app.add_subcommand("augment", "smooth images (graph-attention denoiser or Gaussian kernel)");
    add_common(augment, common);
    augment->add_option("--images", images_path, "input SNT1 file")->required();
    augment->add_option("--method", method, "gat | gks (overrides augment.method)")
        ->check(CLI::IsMember({"gat", "gks"}));
    augment->add_option("--out", out, "output SNT1 file")->required();

    auto* inferk = app.add_subcommand("infer-k", "estimate the cluster count from the seeding graph");
    add_common(inferk, common);
    inferk->add_option("--smooth", smooth_path, "smoothed SNT1 file")->required();
    inferk->add_option("--out", out, "CSV of the first 20 eigenvalues");

    auto* pre = app.add_subcommand("pretrain", "self-supervised warm-up of the representation module");
    add_common(pre, common);
    pre->add_option("--images", images_path, "raw SNT1 file")->required();
    pre->add_option("--smooth", smooth_path, "smoothed SNT1 file")->required();
    pre->add_option("--epochs", pretrain_epochs, "overrides train.pretrain_epochs");
    pre->add_option("--batch-size", batch_size, "overrides train.batch_size");
    pre->add_option("--out", out, "output VIT1 checkpoint")->required();

    auto* train = app.add_subcommand("train", "joint representation learning and mixture clustering");
    add_common(train, common);
    train->add_option("--images", images_path, "raw SNT1 file")->required();
    train->add_option("--smooth", smooth_path, "smoothed SNT1 file")->required();
    train->add_option("--init", init_path, "pretrained VIT1 checkpoint (skips pretraining)");
    train->add_option("--k", k_flag, "cluster count (default: config, else eigengap)");
    train->add_option("--pretrain-epochs", pretrain_epochs, "overrides train.pretrain_epochs");
    train->add_option("--epochs", joint_epochs, "overrides train.joint_epochs");
    train->add_option("--batch-size", batch_size, "overrides train.batch_size");
    train->add_option("--out", out, "output directory")->required();

    auto* eval = app.add_subcommand("eval", "clustering metrics");
    add_common(eval, common);
    eval->add_option("--truth", truth_path, "reference labels")->required();
    auto* pred_opt = eval->add_option("--pred", pred_path, "predicted labels");
    auto* q_opt = eval->add_option("--q", q_path, "soft assignments Q.csv (argmax is used)");
    pred_opt->excludes(q_opt);
    eval->add_option("--z", z_path, "representation Z.csv for DBI");
    eval->add_option("--images", images_path, "SNT1 images for the SAM quality split");
    eval->add_option("--distance", distance_flag, "euclidean | pearson (overrides metrics.distance)")
        ->check(CLI::IsMember({"euclidean", "pearson"}));
    eval->add_option("--out", out, "output CSV (default: stdout)");

    auto* exporter = app.add_subcommand("export-embeddings", "final representation Z of a checkpoint");
    add_common(exporter, common);
    exporter->add_option("--model", model_path, "VIT1 checkpoint")->required();
    exporter->add_option("--images", images_path, "raw SNT1 file")->required();
    exporter->add_option("--out", out, "output Z.csv")->required();

    auto* run = app.add_subcommand("run", "synth, augment, infer-k, pretrain, train and eval in one directory");
    add_common(run, common);
    run->add_option("--k", k_flag, "cluster count (default: config, else eigengap)");
    run->add_option("--method", method, "gat | gks")->check(CLI::IsMember({"gat", "gks"}));
    run->add_option("--pretrain-epochs", pretrain_epochs, "overrides train.pretrain_epochs");
    run->add_option("--epochs", joint_epochs, "overrides train.joint_epochs");
    run->add_option("--out", out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        RunConfig cfg = resolve(common);
        PipelineConfig& p = cfg.pipeline;
        if (!method.empty()) p.augment.method = method;
        if (k_flag) p.k = *k_flag;
        if (pretrain_epochs) p.train.pretrain_epochs = *pretrain_epochs;
        if (joint_epochs) p.train.joint_epochs = *joint_epochs;
        if (batch_size) p.train.batch_size = *batch_size;
        if (distance_flag) cfg.distance = parse_distance(*distance_flag);
        cfg.validate();
        const EpochCallback cb = progress(common.quiet);

        if (*synth) {
            ensure_dir(out);
            SynthDataset ds = synth_dataset(cfg.synth);
            write_snt(out + "/images.snt", ds.images);
            write_labels(out + "/labels.txt", ds.labels);
            write_manifest(out + "/manifest.json", cfg, "synth", json::object());
        } else if (*augment) {
            ImageTensor imgs = read_snt(images_path);
            ensure_parent(out);
            write_snt(out, augment_images(imgs, p.augment, cfg.seed));
            write_manifest(out + ".manifest.json", cfg, "augment", {{"images", images_path}});
        } else if (*inferk) {
            EigengapResult r = eigengap_for(read_snt(smooth_path), p);
            print_k(r);
            if (!out.empty()) write_eigenvalues(out, r);
        } else if (*pre) {
            PatchViews v = patch_views(read_snt(images_path), read_snt(smooth_path), p.vit);
            Learner L = init_learner(v.vit, p.train, cfg.seed);
            pretrain(L, v.raw, v.smooth, p.train, split_seed(cfg.seed, "pretrain"), cb);
            ensure_parent(out);
            write_vit(out, L);
            write_manifest(out + ".manifest.json", cfg, "pretrain", {{"images", images_path}, {"smooth", smooth_path}});
        } else if (*train) {
            ImageTensor imgs = read_snt(images_path), sm = read_snt(smooth_path);
            Matrix S;
            EigengapResult eig = eigengap_for(sm, p, &S);
            const Index K = p.k > 0 ? p.k : eig.k;
            PatchViews v = patch_views(imgs, sm, p.vit);
            TrainOutputs t;
            if (!init_path.empty()) {
                t.learner = read_vit(init_path);
                const VitConfig& c = t.learner.model.cfg;
                require(c.channels == v.vit.channels && c.height == v.vit.height && c.width == v.vit.width &&
                            c.patch == v.vit.patch,
                        "repr_module", "checkpoint " + init_path + " does not match the image shape", ErrorKind::config);
                require(t.learner.head.out_dim() == p.train.proj_dim, "joint_trainer",
                        "checkpoint projection width differs from train.proj_dim", ErrorKind::config);
            } else {
                t.learner = init_learner(v.vit, p.train, cfg.seed);
                t.logs = pretrain(t.learner, v.raw, v.smooth, p.train, split_seed(cfg.seed, "pretrain"), cb);
            }
            t.joint = joint_train(t.learner, v.raw, v.smooth, S, K, p.train, split_seed(cfg.seed, "joint"), cb);
            t.logs.insert(t.logs.end(), t.joint.logs.begin(), t.joint.logs.end());
            write_train_outputs(out, t);
            write_manifest(out + "/manifest.json", cfg, "train",
                           {{"images", images_path}, {"smooth", smooth_path}, {"init", init_path}, {"k", K}});
            std::cout << "K=" << K << " epochs=" << t.joint.epochs_run << " converged=" << t.joint.converged << "\n";
        } else if (*eval) {
            std::vector<int> truth = read_labels(truth_path);
            std::vector<int> pred;
            if (!q_path.empty()) {
                Matrix Q = read_csv(q_path);
                pred = detail::argmax_rows(Q);
            } else {
                require(!pred_path.empty(), "cli", "eval needs --pred or --q", ErrorKind::config);
                pred = read_labels(pred_path);
            }
            std::optional<Matrix> Z;
            if (!z_path.empty()) Z = read_csv(z_path);
            std::optional<ImageTensor> imgs;
            if (!images_path.empty()) imgs = read_snt(images_path);
            const std::string csv = metrics_csv(pred, truth, Z ? &*Z : nullptr, imgs ? &*imgs : nullptr, cfg.distance);
            if (out.empty()) std::cout << csv;
            else write_text(out, csv);
        } else if (*exporter) {
            Learner L = read_vit(model_path);
            ImageTensor imgs = pad_to_multiple(read_snt(images_path), L.model.cfg.patch);
            require(imgs.channels() == L.model.cfg.channels && imgs.height() == L.model.cfg.height &&
                        imgs.width() == L.model.cfg.width,
                    "repr_module", "images do not match the checkpoint shape", ErrorKind::config);
            Matrix raw = patchify(imgs, L.model.cfg.patch);
            ensure_parent(out);
            write_csv(out, project(L.head, online_embeddings(L.model, raw), BnMode::eval));
        } else if (*run) {
            ensure_dir(out);
            SynthDataset ds = synth_dataset(cfg.synth);
            write_snt(out + "/images.snt", ds.images);
            write_labels(out + "/labels.txt", ds.labels);
            PipelineRun r = run_pipeline(ds.images, p, nullptr, cb);
            write_snt(out + "/images.smooth", r.smooth);
            write_eigenvalues(out + "/eigenvalues.csv", r.eig);
            TrainOutputs t{r.learner, r.joint, r.pretrain_logs};
            t.logs.insert(t.logs.end(), r.joint.logs.begin(), r.joint.logs.end());
            write_train_outputs(out, t);
            write_text(out + "/metrics.csv", metrics_csv(r.joint.labels, ds.labels, &r.joint.Z, &ds.images, cfg.distance));
            write_manifest(out + "/manifest.json", cfg, "run", {{"k", r.K}});
            std::cout << "K=" << r.K << " (eigengap " << r.eig.k << ") ARI=" << fmt(ari(r.joint.labels, ds.labels))
                      << " NMI=" << fmt(nmi(r.joint.labels, ds.labels)) << "\n";
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
