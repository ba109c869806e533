// Experiment runner: each verb reads one INI config, writes its artifacts and
// metric CSVs under an output directory, and finishes by atomically writing a
// run manifest that records inputs (with fingerprints), outputs, and metric
// summaries. Reruns with the same config and seed reproduce every metric file
// byte for byte.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "difflab/collapse.hpp"
#include "difflab/config.hpp"
#include "difflab/diffusion.hpp"
#include "difflab/edit.hpp"
#include "difflab/image_io.hpp"
#include "difflab/models.hpp"
#include "difflab/rng.hpp"
#include "difflab/schedule.hpp"
#include "difflab/serialize.hpp"
#include "difflab/synthdata.hpp"
#include "difflab/tensor.hpp"

namespace difflab {
namespace {

struct RunError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Run {
    Config cfg;
    std::string command;
    std::string out;
    std::uint64_t seed = 1;
    Config manifest;
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
};

std::string real_str(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string short_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

void require_file(const std::string& path, const char* what) {
    if (!std::filesystem::exists(path)) {
        throw RunError(std::string("missing ") + what + ": " + path);
    }
}

std::string record_input(Run& run, const std::string& key, const std::string& path) {
    require_file(path, "artifact");
    run.manifest.set_str("inputs", key, path);
    run.manifest.set_str("inputs", key + "_fingerprint",
                         fingerprint_hex(fingerprint_file(path)));
    return path;
}

void record_output(Run& run, const std::string& key, const std::string& path) {
    run.manifest.set_str("outputs", key, path);
}

// every number that enters the manifest goes through the finite check; a NaN
// anywhere fails the run before any manifest exists
void metric(Run& run, const std::string& key, double v) {
    if (!std::isfinite(v)) {
        throw RunError("metric " + key + " is not finite");
    }
    run.manifest.set_real("metrics", key, v);
}

void finish(Run& run) {
    for (const std::string& key : run.manifest.keys("outputs")) {
        const std::string path = run.manifest.get_str("outputs", key);
        if (!std::filesystem::exists(path)) {
            throw RunError("declared output does not exist: " + path);
        }
    }
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - run.t0)
            .count();
    run.manifest.set_real("run", "wall_seconds", wall);

    // the manifest appears only once everything else is in place
    const std::string tmp = run.out + "/run.ini.tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw RunError("cannot write " + tmp);
        f << run.manifest.serialize();
        if (!f.flush()) throw RunError("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, run.out + "/run.ini");
}

void echo_config(Run& run, const std::string& config_path) {
    std::ifstream in(config_path, std::ios::binary);
    std::ostringstream body;
    body << in.rdbuf();
    const std::string echo_path = run.out + "/config.ini";
    std::ofstream out(echo_path, std::ios::binary);
    if (!out) throw RunError("cannot write " + echo_path);
    out << body.str();
    run.manifest.set_str("run", "config_fingerprint",
                         fingerprint_hex(fingerprint_bytes(body.str().data(),
                                                           body.str().size())));
    record_output(run, "config_echo", echo_path);
}

// ---------------------------------------------------------------------------
// dataset plumbing
// ---------------------------------------------------------------------------

int attribute_classes(const std::string& attr) {
    if (attr == "shape" || attr == "stripe") return 2;
    if (attr == "combo") return 4;
    throw RunError("unknown attribute '" + attr +
                   "' (expected shape, stripe, or combo)");
}

std::vector<int> attribute_labels(const ShapesDataset& ds, const std::string& attr) {
    std::vector<int> out(static_cast<std::size_t>(ds.size()));
    for (long i = 0; i < ds.size(); ++i) {
        if (attr == "shape") {
            out[static_cast<std::size_t>(i)] = ds.shape_label[static_cast<std::size_t>(i)];
        } else if (attr == "stripe") {
            out[static_cast<std::size_t>(i)] = ds.stripe_label[static_cast<std::size_t>(i)];
        } else {
            out[static_cast<std::size_t>(i)] = ds.combo(i);
        }
    }
    return out;
}

ShapesDataset load_dataset(Run& run, std::string* fp_hex) {
    const std::string dir = run.cfg.get_str("data", "dir");
    require_file(dir + "/dataset.meta", "artifact");
    require_file(dir + "/labels.csv", "artifact");
    ShapesDataset ds = load_shapes(dir);  // verifies the recorded fingerprint
    const std::string fp = fingerprint_hex(shapes_fingerprint(ds));
    run.manifest.set_str("inputs", "dataset", dir);
    run.manifest.set_str("inputs", "dataset_fingerprint", fp);
    if (fp_hex) *fp_hex = fp;
    return ds;
}

// a model built against one dataset or codec must not silently run against
// another
void check_chain(const std::string& artifact, const std::string& key,
                 const std::string& current, const char* what) {
    const std::string recorded = manifest_value(artifact, key);
    if (recorded.empty()) {
        throw RunError(artifact + " records no " + key +
                       "; cannot verify provenance");
    }
    if (recorded != current) {
        throw RunError("fingerprint mismatch: " + artifact + " was built against " +
                       std::string(what) + " " + recorded + " but this run uses " +
                       current + "; refusing silent reuse");
    }
}

NoiseSchedule schedule_from_manifest(const std::string& den_path) {
    const std::string steps = manifest_value(den_path, "schedule_steps");
    if (steps.empty()) {
        throw RunError(den_path +
                       " records no noise schedule; cannot run diffusion with it");
    }
    return make_schedule(std::stoi(steps),
                         std::stod(manifest_value(den_path, "schedule_beta_min")),
                         std::stod(manifest_value(den_path, "schedule_beta_max")));
}

// the codec a denoiser trained with is the only codec its latents make sense
// under: "identity" means none, anything else is the codec file fingerprint
Codec resolve_codec(Run& run, const std::string& den_path) {
    const std::string recorded = manifest_value(den_path, "codec_fingerprint");
    if (recorded.empty()) {
        throw RunError(den_path + " records no codec_fingerprint; cannot verify provenance");
    }
    const std::string codec_path = run.cfg.get_str("codec", "path", "");
    if (recorded == "identity") {
        if (!codec_path.empty()) {
            throw RunError("fingerprint mismatch: " + den_path +
                           " was trained without a codec but this run supplies " +
                           codec_path + "; refusing silent reuse");
        }
        return make_identity_codec();
    }
    if (codec_path.empty()) {
        throw RunError(den_path + " was trained with codec " + recorded +
                       "; set [codec] path to the same artifact");
    }
    record_input(run, "codec", codec_path);
    check_chain(den_path, "codec_fingerprint",
                fingerprint_hex(fingerprint_file(codec_path)), "codec");
    return load_codec(codec_path);
}

Tensor first_rows(const Tensor& t, long n) {
    Tensor out = Tensor::zeros({n, t.cols()});
    std::copy(t.values().begin(), t.values().begin() + n * t.cols(),
              out.values().begin());
    return out;
}

std::vector<int> predict_classes(const ClassifierModel& cls, const Tensor& x) {
    Tape tape;
    Tensor logits = classifier_logits(cls, tape, x);
    std::vector<int> out(static_cast<std::size_t>(x.rows()));
    for (long i = 0; i < x.rows(); ++i) {
        int best = 0;
        for (int j = 1; j < cls.cfg.n_classes; ++j) {
            if (logits.at(i, j) > logits.at(i, best)) best = j;
        }
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

EditConfig edit_config_from(const Run& run) {
    EditConfig ec;
    ec.lambda = run.cfg.get_real("edit", "lambda", ec.lambda);
    ec.l_frac = run.cfg.get_real("edit", "l_frac", ec.l_frac);
    ec.gamma = run.cfg.get_real("edit", "gamma", ec.gamma);
    ec.window_start = run.cfg.get_real("edit", "window_start", ec.window_start);
    ec.window_stop = run.cfg.get_real("edit", "window_stop", ec.window_stop);
    ec.steps = static_cast<int>(run.cfg.get_int("edit", "steps", ec.steps));
    ec.n_tokens = static_cast<int>(run.cfg.get_int("edit", "n_tokens", ec.n_tokens));
    ec.lr = run.cfg.get_real("edit", "lr", ec.lr);
    ec.seed = run.seed;
    return ec;
}

// ---------------------------------------------------------------------------
// verbs
// ---------------------------------------------------------------------------

int cmd_gen_data(Run& run) {
    const long n = run.cfg.get_int("data", "n", 512);
    ShapesDataset ds = gen_shapes(n, run.seed);
    dump_shapes(ds, run.out);
    const long preview = std::min<long>(16, ds.size());
    write_image_strip(run.out + "/preview.pgm", first_rows(ds.images, preview),
                      kImageSide);
    record_output(run, "labels", run.out + "/labels.csv");
    record_output(run, "dataset_meta", run.out + "/dataset.meta");
    record_output(run, "preview", run.out + "/preview.pgm");
    run.manifest.set_str("run", "dataset_fingerprint",
                         fingerprint_hex(shapes_fingerprint(ds)));
    metric(run, "images", static_cast<double>(n));
    return 0;
}

int cmd_train_denoiser(Run& run) {
    std::string ds_fp;
    ShapesDataset ds = load_dataset(run, &ds_fp);
    const std::string attr = run.cfg.get_str("data", "attribute", "combo");
    std::vector<int> labels = attribute_labels(ds, attr);

    const std::string codec_path = run.cfg.get_str("codec", "path", "");
    Codec codec = make_identity_codec();
    std::string codec_fp = "identity";
    if (!codec_path.empty()) {
        record_input(run, "codec", codec_path);
        check_chain(codec_path, "data_fingerprint", ds_fp, "dataset");
        codec = load_codec(codec_path);
        codec_fp = fingerprint_hex(fingerprint_file(codec_path));
    }
    Tensor train_data = ds.images;
    if (codec.learned) {
        Tape tape;
        train_data = codec_encode(codec, tape, ds.images).detach();
    }

    DenoiserConfig dc;
    dc.latent_dim = static_cast<int>(train_data.cols());
    dc.hidden = static_cast<int>(run.cfg.get_int("denoiser", "hidden", 160));
    dc.blocks = static_cast<int>(run.cfg.get_int("denoiser", "blocks", 2));
    dc.time_dim = static_cast<int>(run.cfg.get_int("denoiser", "time_dim", 16));
    dc.condition_dim =
        static_cast<int>(run.cfg.get_int("denoiser", "condition_dim", 8));
    dc.n_classes = attribute_classes(attr);

    const int sched_steps =
        static_cast<int>(run.cfg.get_int("schedule", "steps", 1000));
    const double beta_min = run.cfg.get_real("schedule", "beta_min", 1e-4);
    const double beta_max = run.cfg.get_real("schedule", "beta_max", 2e-2);
    NoiseSchedule s = make_schedule(sched_steps, beta_min, beta_max);

    DenoiserTrainConfig tc;
    tc.epochs = static_cast<int>(run.cfg.get_int("train", "epochs", 30));
    tc.batch = static_cast<int>(run.cfg.get_int("train", "batch", 64));
    tc.lr = run.cfg.get_real("train", "lr", 2e-3);
    tc.weight_decay = run.cfg.get_real("train", "weight_decay", 0.0);
    tc.drop_prob = run.cfg.get_real("train", "drop_prob", 0.1);
    tc.seed = run.seed;

    Rng rng(run.seed);
    DenoiserModel m = make_denoiser(dc, rng);
    TrainReport report = train_denoiser(m, train_data, labels, s, tc);

    const std::string loss_path = run.out + "/loss.csv";
    {
        std::ofstream f(loss_path);
        if (!f) throw RunError("cannot write " + loss_path);
        f.precision(17);
        f << "epoch,loss\n";
        for (std::size_t i = 0; i < report.epoch_loss.size(); ++i) {
            f << i << ',' << report.epoch_loss[i] << '\n';
        }
        if (!f) throw RunError("write failed: " + loss_path);
    }
    record_output(run, "loss_curve", loss_path);

    const std::string model_path = run.out + "/denoiser.bin";
    save_denoiser(m, model_path,
                  {{"data_fingerprint", ds_fp},
                   {"data_dir", run.cfg.get_str("data", "dir")},
                   {"attribute", attr},
                   {"schedule_steps", std::to_string(sched_steps)},
                   {"schedule_beta_min", real_str(beta_min)},
                   {"schedule_beta_max", real_str(beta_max)},
                   {"codec_fingerprint", codec_fp},
                   {"seed", std::to_string(run.seed)}});
    record_output(run, "model", model_path);
    record_output(run, "model_meta", model_path + ".meta");
    metric(run, "final_loss", report.epoch_loss.back());
    return 0;
}

int cmd_train_classifier(Run& run) {
    std::string ds_fp;
    ShapesDataset ds = load_dataset(run, &ds_fp);
    const std::string attr = run.cfg.get_str("data", "attribute", "stripe");
    const double train_frac = run.cfg.get_real("data", "train_frac", 0.8);
    auto [tr, te] = split(ds, train_frac, run.seed);

    ClassifierConfig cc;
    cc.input_dim = kImageDim;
    cc.hidden = static_cast<int>(run.cfg.get_int("classifier", "hidden", 64));
    cc.feature_dim =
        static_cast<int>(run.cfg.get_int("classifier", "feature_dim", 16));
    cc.n_classes = attribute_classes(attr);

    ClassifierTrainConfig tc;
    tc.epochs = static_cast<int>(run.cfg.get_int("train", "epochs", 200));
    tc.batch = static_cast<int>(run.cfg.get_int("train", "batch", 64));
    tc.lr = run.cfg.get_real("train", "lr", 4e-3);
    tc.weight_decay = run.cfg.get_real("train", "weight_decay", 1e-3);
    tc.seed = run.seed;

    Rng rng(run.seed);
    ClassifierModel m = make_classifier(cc, rng);
    TrainReport report = train_classifier(m, tr.images, attribute_labels(tr, attr), tc);
    const double heldout = classifier_accuracy(m, te.images, attribute_labels(te, attr));

    const std::string acc_path = run.out + "/accuracy.csv";
    {
        std::ofstream f(acc_path);
        if (!f) throw RunError("cannot write " + acc_path);
        f.precision(17);
        f << "epoch,loss,accuracy\n";
        for (std::size_t i = 0; i < report.epoch_loss.size(); ++i) {
            f << i << ',' << report.epoch_loss[i] << ','
              << report.epoch_accuracy[i] << '\n';
        }
        if (!f) throw RunError("write failed: " + acc_path);
    }
    record_output(run, "accuracy_curve", acc_path);

    const std::string model_path = run.out + "/classifier.bin";
    save_classifier(m, model_path,
                    {{"data_fingerprint", ds_fp},
                     {"data_dir", run.cfg.get_str("data", "dir")},
                     {"attribute", attr},
                     {"train_frac", real_str(train_frac)},
                     {"seed", std::to_string(run.seed)}});
    record_output(run, "model", model_path);
    record_output(run, "model_meta", model_path + ".meta");
    metric(run, "final_loss", report.epoch_loss.back());
    metric(run, "train_accuracy", report.epoch_accuracy.back());
    metric(run, "heldout_accuracy", heldout);
    return 0;
}

int cmd_learn_embedding(Run& run) {
    std::string ds_fp;
    ShapesDataset ds = load_dataset(run, &ds_fp);
    const std::string attr = run.cfg.get_str("data", "attribute", "stripe");
    const double train_frac = run.cfg.get_real("data", "train_frac", 0.8);
    auto [tr, te] = split(ds, train_frac, run.seed);

    const std::string den_path =
        record_input(run, "denoiser", run.cfg.get_str("artifacts", "denoiser"));
    const std::string cls_path =
        record_input(run, "classifier", run.cfg.get_str("artifacts", "classifier"));
    check_chain(den_path, "data_fingerprint", ds_fp, "dataset");
    check_chain(cls_path, "data_fingerprint", ds_fp, "dataset");
    const std::string cls_attr = manifest_value(cls_path, "attribute");
    if (cls_attr != attr) {
        throw RunError(cls_path + " judges attribute '" + cls_attr +
                       "' but this run edits '" + attr + "'");
    }

    DenoiserModel den = load_denoiser(den_path);
    ClassifierModel cls = load_classifier(cls_path);
    Codec codec = resolve_codec(run, den_path);
    NoiseSchedule s = schedule_from_manifest(den_path);

    EditConfig ec = edit_config_from(run);
    const int iters = static_cast<int>(run.cfg.get_int("train", "iters", 200));
    const int batch = static_cast<int>(run.cfg.get_int("train", "batch", 16));

    LearnedEmbeddings le =
        learn_embeddings(attr, tr.images, te.images, attribute_labels(te, attr),
                         den, cls, codec, s, ec, iters, batch);

    const std::string loss_path = run.out + "/losses.csv";
    {
        std::ofstream f(loss_path);
        if (!f) throw RunError("cannot write " + loss_path);
        f.precision(17);
        f << "iter,edit_loss,rec_loss,combined_loss\n";
        for (std::size_t i = 0; i < le.report.combined_loss.size(); ++i) {
            f << i << ',' << le.report.edit_loss[i] << ',' << le.report.rec_loss[i]
              << ',' << le.report.combined_loss[i] << '\n';
        }
        if (!f) throw RunError("write failed: " + loss_path);
    }
    record_output(run, "loss_curve", loss_path);

    const std::string den_fp = fingerprint_hex(fingerprint_file(den_path));
    for (std::size_t a = 0; a < le.embeddings.size(); ++a) {
        const std::string path =
            run.out + "/embedding_c" + std::to_string(a) + ".bin";
        save_embedding(le.embeddings[a], path,
                       {{"data_fingerprint", ds_fp},
                        {"denoiser_fingerprint", den_fp},
                        {"attribute", attr},
                        {"seed", std::to_string(run.seed)}});
        record_output(run, "embedding_c" + std::to_string(a), path);
    }

    if (!le.report.combined_loss.empty()) {
        metric(run, "final_combined_loss", le.report.combined_loss.back());
        metric(run, "final_edit_loss", le.report.edit_loss.back());
        metric(run, "final_rec_loss", le.report.rec_loss.back());
    }
    metric(run, "heldout_success", le.report.heldout_success);
    return 0;
}

std::vector<double> parse_lambdas(const Run& run, double fallback) {
    const std::string list = run.cfg.get_str("edit", "lambdas", "");
    if (list.empty()) return {run.cfg.get_real("edit", "lambda", fallback)};
    std::vector<double> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stod(item));
    }
    if (out.empty()) throw RunError("[edit] lambdas parsed to an empty list");
    return out;
}

int cmd_edit(Run& run) {
    std::string ds_fp;
    ShapesDataset ds = load_dataset(run, &ds_fp);
    const double train_frac = run.cfg.get_real("data", "train_frac", 0.8);
    auto [tr, te] = split(ds, train_frac, run.seed);

    const std::string den_path =
        record_input(run, "denoiser", run.cfg.get_str("artifacts", "denoiser"));
    check_chain(den_path, "data_fingerprint", ds_fp, "dataset");
    DenoiserModel den = load_denoiser(den_path);
    Codec codec = resolve_codec(run, den_path);
    NoiseSchedule s = schedule_from_manifest(den_path);
    const std::string den_fp = fingerprint_hex(fingerprint_file(den_path));

    const std::string emb_path =
        record_input(run, "embedding", run.cfg.get_str("artifacts", "embedding"));
    check_chain(emb_path, "denoiser_fingerprint", den_fp, "denoiser");
    SemanticEmbedding emb = load_embedding(emb_path);
    const std::string emb_b_path = run.cfg.get_str("artifacts", "embedding_b", "");
    if (!emb_b_path.empty()) {
        record_input(run, "embedding_b", emb_b_path);
        check_chain(emb_b_path, "denoiser_fingerprint", den_fp, "denoiser");
        emb = concat_embeddings({emb, load_embedding(emb_b_path)});
    }

    const std::string cls_path = run.cfg.get_str("artifacts", "classifier", "");
    ClassifierModel cls;
    const bool scored = !cls_path.empty() && emb.class_id >= 0;
    if (!cls_path.empty()) {
        record_input(run, "classifier", cls_path);
        check_chain(cls_path, "data_fingerprint", ds_fp, "dataset");
        cls = load_classifier(cls_path);
    }

    EditConfig ec = edit_config_from(run);
    const std::string mode = run.cfg.get_str("edit", "mode", "multi");
    if (mode != "multi" && mode != "single") {
        throw RunError("[edit] mode must be 'multi' or 'single', got '" + mode + "'");
    }
    std::vector<double> lambdas = parse_lambdas(run, ec.lambda);

    const long n_images = std::min<long>(
        run.cfg.get_int("edit", "n_images", 8), te.size());
    if (n_images < 1) throw RunError("no held-out images to edit");
    Tensor x = first_rows(te.images, n_images);
    write_image_strip(run.out + "/original.pgm", x, kImageSide);
    record_output(run, "original", run.out + "/original.pgm");

    std::vector<Tensor> edited;
    if (mode == "multi") {
        edited = interpolate_scale(x, emb, lambdas, ec, den, codec, s);
    } else {
        for (double l : lambdas) {
            EditConfig one = ec;
            one.lambda = l;
            edited.push_back(edit_single_step(x, emb, one, den, codec, s));
        }
    }

    const std::string verdict_path = run.out + "/verdicts.csv";
    std::ofstream vf(verdict_path);
    if (!vf) throw RunError("cannot write " + verdict_path);
    vf.precision(17);
    vf << "image,lambda,mode,verdict,predicted,target,success\n";
    for (std::size_t li = 0; li < lambdas.size(); ++li) {
        const double l = lambdas[li];
        const Tensor& y = edited[li];
        std::vector<int> preds;
        if (scored) preds = predict_classes(cls, y);
        long flips = 0;
        double recon_mse = 0.0;
        for (long i = 0; i < n_images; ++i) {
            std::string verdict = "unscored";
            int predicted = -1;
            int success = -1;
            if (l == 0.0) {
                verdict = "reconstruction";
                double acc = 0.0;
                for (long j = 0; j < y.cols(); ++j) {
                    const double d = y.at(i, j) - x.at(i, j);
                    acc += d * d;
                }
                recon_mse += acc / static_cast<double>(y.cols());
            } else if (scored) {
                verdict = "edit";
                predicted = preds[static_cast<std::size_t>(i)];
                success = predicted == emb.class_id ? 1 : 0;
                flips += success;
            }
            vf << i << ',' << l << ',' << mode << ',' << verdict << ','
               << predicted << ',' << emb.class_id << ',' << success << '\n';
        }
        const std::string tag = short_real(l);
        write_image_strip(run.out + "/edited_" + mode + "_l" + tag + ".pgm",
                          edited[li], kImageSide);
        record_output(run, "grid_l" + tag,
                      run.out + "/edited_" + mode + "_l" + tag + ".pgm");
        if (l == 0.0) {
            metric(run, "recon_mse",
                   recon_mse / static_cast<double>(n_images));
        } else if (scored) {
            metric(run, "edit_success_l" + tag,
                   static_cast<double>(flips) / static_cast<double>(n_images));
        }
    }
    if (!vf.flush()) throw RunError("write failed: " + verdict_path);
    record_output(run, "verdicts", verdict_path);
    return 0;
}

int cmd_diagnose(Run& run) {
    std::string ds_fp;
    ShapesDataset ds = load_dataset(run, &ds_fp);
    const std::string attr = run.cfg.get_str("data", "attribute", "stripe");
    std::vector<int> labels = attribute_labels(ds, attr);

    const std::string cls_path =
        record_input(run, "classifier", run.cfg.get_str("artifacts", "classifier"));
    check_chain(cls_path, "data_fingerprint", ds_fp, "dataset");
    ClassifierModel cls = load_classifier(cls_path);

    Tape tape;
    Tensor feats = classifier_features(cls, tape, ds.images);
    CollapseReport report = build_collapse_report(cls, feats, labels);
    write_collapse_report(report, run.out + "/collapse");
    record_output(run, "collapse_summary", run.out + "/collapse.txt");
    record_output(run, "collapse_table", run.out + "/collapse.csv");
    metric(run, "collapse_ratio", report.collapse_ratio);
    double min_cos = 1.0;
    for (double c : report.wa_mu_cos) min_cos = std::min(min_cos, c);
    metric(run, "min_head_mean_cos", min_cos);
    metric(run, "beta_residual", report.fit.residual);
    metric(run, "accuracy", classifier_accuracy(cls, ds.images, labels));

    const std::string den_path = run.cfg.get_str("artifacts", "denoiser", "");
    if (den_path.empty()) return 0;

    record_input(run, "denoiser", den_path);
    check_chain(den_path, "data_fingerprint", ds_fp, "dataset");
    DenoiserModel den = load_denoiser(den_path);
    Codec codec = resolve_codec(run, den_path);
    NoiseSchedule s = schedule_from_manifest(den_path);
    const double l_frac = run.cfg.get_real("diagnose", "l_frac", 0.4);
    const int level = std::max(
        1, static_cast<int>(std::lround(l_frac * static_cast<double>(s.total_steps))));
    const double sigma2 = run.cfg.get_real("diagnose", "sigma2", 1.0);
    const int n_probe = static_cast<int>(run.cfg.get_int("diagnose", "n_probe", 32));

    JensenGapEstimate jg = jensen_gap_bound(cls, codec, den, ds.images, s, level,
                                            sigma2, n_probe, run.seed);
    write_jensen_report(jg, run.out + "/jensen_gap.txt");
    record_output(run, "jensen_gap", run.out + "/jensen_gap.txt");
    metric(run, "jensen_bound", jg.bound);
    metric(run, "grad_norm_max", jg.grad_norm_max);
    metric(run, "q_mc", jg.q_mc);

    const std::string emb_dir = run.cfg.get_str("artifacts", "embeddings", "");
    if (emb_dir.empty()) return 0;

    const std::string den_fp = fingerprint_hex(fingerprint_file(den_path));
    std::vector<SemanticEmbedding> embs;
    for (int a = 0; a < cls.cfg.n_classes; ++a) {
        const std::string path = emb_dir + "/embedding_c" + std::to_string(a) + ".bin";
        record_input(run, "embedding_c" + std::to_string(a), path);
        check_chain(path, "denoiser_fingerprint", den_fp, "denoiser");
        embs.push_back(load_embedding(path));
    }

    EditConfig ec = edit_config_from(run);
    const long n_images = std::min<long>(
        run.cfg.get_int("diagnose", "n_images", 32), ds.size());
    Tensor x = first_rows(ds.images, n_images);
    std::vector<int> sub(labels.begin(), labels.begin() + n_images);

    GeneratedAlignment single = generated_alignment(cls, embs, x, sub,
                                         single_step_pipeline(ec, den, codec, s));
    GeneratedAlignment multi = generated_alignment(cls, embs, x, sub,
                                        multi_step_pipeline(ec, den, codec, s));
    const std::string p2_path = run.out + "/generated_alignment.csv";
    {
        std::ofstream f(p2_path);
        if (!f) throw RunError("cannot write " + p2_path);
        f.precision(17);
        f << "class,cos_single,cos_multi\n";
        for (int a = 0; a < cls.cfg.n_classes; ++a) {
            f << a << ',' << single.cosines[static_cast<std::size_t>(a)] << ','
              << multi.cosines[static_cast<std::size_t>(a)] << '\n';
        }
        if (!f) throw RunError("write failed: " + p2_path);
    }
    record_output(run, "generated_alignment", p2_path);
    double mc_single = 1.0;
    double mc_multi = 1.0;
    for (double c : single.cosines) mc_single = std::min(mc_single, c);
    for (double c : multi.cosines) mc_multi = std::min(mc_multi, c);
    metric(run, "generated_min_cos_single", mc_single);
    metric(run, "generated_min_cos_multi", mc_multi);
    return 0;
}

}  // namespace
}  // namespace difflab

int main(int argc, char** argv) {
    using namespace difflab;

    CLI::App app{"diffusion editing laboratory"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_override;
    long long seed_override = -1;

    struct Verb {
        const char* name;
        const char* help;
        int (*fn)(Run&);
    };
    const Verb verbs[] = {
        {"gen-data", "generate a procedural shapes dataset", &cmd_gen_data},
        {"train-denoiser", "train the conditional noise predictor", &cmd_train_denoiser},
        {"train-classifier", "train an attribute classifier", &cmd_train_classifier},
        {"learn-embedding", "optimize per-class condition embeddings", &cmd_learn_embedding},
        {"edit", "apply a learned embedding to held-out images", &cmd_edit},
        {"diagnose", "feature-geometry and approximation-gap reports", &cmd_diagnose},
    };
    for (const Verb& v : verbs) {
        CLI::App* sub = app.add_subcommand(v.name, v.help);
        sub->add_option("--config", config_path, "run configuration file")->required();
        sub->add_option("--seed", seed_override, "override the [run] seed");
        sub->add_option("--out", out_override, "override the [run] out directory");
    }

    CLI11_PARSE(app, argc, argv);

    try {
        Run run;
        for (const Verb& v : verbs) {
            if (app.get_subcommand(v.name)->parsed()) run.command = v.name;
        }
        if (!std::filesystem::exists(config_path)) {
            throw RunError("missing config: " + config_path);
        }
        run.cfg = Config::load(config_path);
        run.seed = seed_override >= 0
                       ? static_cast<std::uint64_t>(seed_override)
                       : static_cast<std::uint64_t>(run.cfg.get_int("run", "seed", 1));
        run.out = !out_override.empty() ? out_override
                                        : run.cfg.get_str("run", "out", "");
        if (run.out.empty()) {
            throw RunError("no output directory: pass --out or set [run] out");
        }
        std::filesystem::create_directories(run.out);
        run.manifest.set_str("run", "command", run.command);
        run.manifest.set_int("run", "seed", static_cast<long>(run.seed));
        run.manifest.set_str("run", "out", run.out);
        echo_config(run, config_path);

        int rc = 0;
        for (const Verb& v : verbs) {
            if (run.command == v.name) rc = v.fn(run);
        }
        if (rc == 0) finish(run);
        return rc;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
