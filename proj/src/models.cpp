#include "difflab/models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <string>

#include "difflab/config.hpp"
#include "difflab/diffusion.hpp"
#include "difflab/optim.hpp"

namespace difflab {

namespace {

// probe the parameter container before touching the sidecar, so a missing
// artifact is reported by its own path
void require_artifact(const char* op, const std::string& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw TensorError(std::string(op) + ": cannot open " + path);
}

void check_labels(const char* op, const std::vector<int>& labels, long n_rows,
                  int n_classes) {
    if (static_cast<long>(labels.size()) != n_rows) {
        throw TensorError(std::string(op) + ": " + std::to_string(labels.size()) +
                          " labels for " + std::to_string(n_rows) + " rows");
    }
    for (int lab : labels) {
        if (lab < 0 || lab >= n_classes) {
            throw TensorError(std::string(op) + ": label " + std::to_string(lab) +
                              " outside [0, " + std::to_string(n_classes) + ")");
        }
    }
}

// rows of `data` selected by `idx`, as a constant tensor
Tensor gather_rows(const Tensor& data, const std::vector<long>& idx) {
    const long d = data.cols();
    Tensor out = Tensor::zeros({static_cast<long>(idx.size()), d});
    const std::vector<double>& src = data.values();
    std::vector<double>& dst = out.values();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy(src.begin() + idx[i] * d, src.begin() + (idx[i] + 1) * d,
                  dst.begin() + static_cast<long>(i) * d);
    }
    return out;
}

Tensor normal_tensor(Shape shape, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.values()) v = rng.normal();
    return t;
}

void check_finite_loss(const char* op, double loss, int epoch) {
    if (!std::isfinite(loss)) {
        throw TensorError(std::string(op) + ": loss diverged (not finite) at epoch " +
                          std::to_string(epoch));
    }
}

void write_manifest(const std::string& path, Config manifest,
                    const std::vector<std::pair<std::string, std::string>>& provenance) {
    for (const auto& kv : provenance) {
        manifest.set_str("provenance", kv.first, kv.second);
    }
    manifest.save(path + ".meta");
}

// copies file params into the freshly constructed model, by name
void fill_params(const char* op, const NamedParams& model_params,
                 const std::string& path) {
    NamedParams file_params = load_params(path);
    std::map<std::string, Tensor> by_name;
    for (const auto& np : file_params) by_name.emplace(np.first, np.second);
    for (const auto& np : model_params) {
        auto it = by_name.find(np.first);
        if (it == by_name.end()) {
            throw TensorError(std::string(op) + ": parameter '" + np.first +
                              "' missing from " + path);
        }
        if (it->second.shape() != np.second.shape()) {
            throw TensorError(std::string(op) + ": parameter '" + np.first +
                              "' has shape " + shape_str(it->second.shape()) +
                              " in file, expected " + shape_str(np.second.shape()));
        }
        Tensor dst = np.second;
        dst.values() = it->second.values();
        by_name.erase(it);
    }
    if (!by_name.empty()) {
        throw TensorError(std::string(op) + ": unexpected parameter '" +
                          by_name.begin()->first + "' in " + path);
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// denoiser
// ---------------------------------------------------------------------------

NamedParams DenoiserModel::named_params() const {
    NamedParams out;
    in_proj.collect(out, "in_proj");
    t_proj.collect(out, "t_proj");
    cond_proj.collect(out, "cond_proj");
    for (std::size_t i = 0; i < block_a.size(); ++i) {
        const std::string tag = "block" + std::to_string(i);
        block_a[i].collect(out, tag + ".a");
        block_b[i].collect(out, tag + ".b");
    }
    out_proj.collect(out, "out_proj");
    out.emplace_back("null_embedding", null_embedding);
    out.emplace_back("class_table", class_table);
    return out;
}

std::vector<Tensor> DenoiserModel::params() const {
    std::vector<Tensor> out;
    for (auto& np : named_params()) out.push_back(np.second);
    return out;
}

DenoiserModel make_denoiser(const DenoiserConfig& cfg, Rng& rng) {
    if (cfg.latent_dim < 1 || cfg.hidden < 1 || cfg.blocks < 1 ||
        cfg.condition_dim < 1 || cfg.n_classes < 1) {
        throw TensorError("make_denoiser: all dimensions must be positive");
    }
    if (cfg.time_dim < 2 || cfg.time_dim % 2 != 0) {
        throw TensorError("make_denoiser: time_dim must be even and >= 2, got " +
                          std::to_string(cfg.time_dim));
    }
    DenoiserModel m;
    m.cfg = cfg;
    m.in_proj = Linear(cfg.latent_dim, cfg.hidden, rng);
    m.t_proj = Linear(cfg.time_dim, cfg.hidden, rng);
    m.cond_proj = Linear(cfg.condition_dim, cfg.hidden, rng);
    for (int i = 0; i < cfg.blocks; ++i) {
        m.block_a.emplace_back(cfg.hidden, cfg.hidden, rng);
        m.block_b.emplace_back(cfg.hidden, cfg.hidden, rng);
    }
    m.out_proj = Linear(cfg.hidden, cfg.latent_dim, rng);
    // zero rows: every class and the null row start out indistinguishable and
    // drift apart only through training signal
    m.null_embedding = Tensor::zeros({1, cfg.condition_dim}, true);
    m.class_table = Tensor::zeros({cfg.n_classes, cfg.condition_dim}, true);
    return m;
}

Tensor time_features(int t, int time_dim) {
    if (t < 0) throw TensorError("time_features: negative timestep");
    if (time_dim < 2 || time_dim % 2 != 0) {
        throw TensorError("time_features: width must be even and >= 2, got " +
                          std::to_string(time_dim));
    }
    const int half = time_dim / 2;
    std::vector<double> vals(static_cast<std::size_t>(time_dim));
    for (int j = 0; j < half; ++j) {
        const double freq =
            std::exp(-std::log(10000.0) * static_cast<double>(j) /
                     static_cast<double>(half));
        vals[2 * j] = std::sin(t * freq);
        vals[2 * j + 1] = std::cos(t * freq);
    }
    return Tensor::from({1, time_dim}, std::move(vals));
}

Tensor denoiser_forward(const DenoiserModel& m, Tape& tape, const Tensor& z, int t,
                        const Tensor& cond_rows) {
    if (z.cols() != m.cfg.latent_dim) {
        throw TensorError("denoiser_forward: latent width " + std::to_string(z.cols()) +
                          " does not match latent_dim " +
                          std::to_string(m.cfg.latent_dim));
    }
    if (cond_rows.rows() != z.rows() || cond_rows.cols() != m.cfg.condition_dim) {
        throw TensorError("denoiser_forward: condition rows " +
                          shape_str(cond_rows.shape()) + " do not match batch " +
                          shape_str(z.shape()));
    }
    const long n = z.rows();
    Tensor h = m.in_proj(tape, z);
    Tensor temb = m.t_proj(tape, time_features(t, m.cfg.time_dim));
    Tensor cemb = m.cond_proj(tape, cond_rows);
    Tensor emb = tape.add(tape.broadcast(temb, {n, m.cfg.hidden}), cemb);
    for (std::size_t i = 0; i < m.block_a.size(); ++i) {
        Tensor u = tape.add(h, emb);
        h = tape.add(h, m.block_b[i](tape, tape.tanh(m.block_a[i](tape, u))));
    }
    return m.out_proj(tape, h);
}

Tensor denoiser_eval(const DenoiserModel& m, Tape& tape, const Tensor& z, int t,
                     const Tensor* cond) {
    Tensor pooled;
    if (cond == nullptr) {
        pooled = m.null_embedding;
    } else {
        if (cond->cols() != m.cfg.condition_dim) {
            throw TensorError("denoiser_eval: condition width " +
                              std::to_string(cond->cols()) +
                              " does not match condition_dim " +
                              std::to_string(m.cfg.condition_dim));
        }
        pooled = tape.mean_rows(*cond);
    }
    Tensor rows = tape.broadcast(pooled, {z.rows(), m.cfg.condition_dim});
    return denoiser_forward(m, tape, z, t, rows);
}

Tensor class_condition(const DenoiserModel& m, int class_id) {
    if (class_id < 0 || class_id >= m.cfg.n_classes) {
        throw TensorError("class_condition: class " + std::to_string(class_id) +
                          " outside [0, " + std::to_string(m.cfg.n_classes) + ")");
    }
    const long d = m.cfg.condition_dim;
    std::vector<double> row(static_cast<std::size_t>(d));
    for (long j = 0; j < d; ++j) row[j] = m.class_table.at(class_id, j);
    return Tensor::from({1, d}, std::move(row));
}

TrainReport train_denoiser(DenoiserModel& m, const Tensor& data,
                           const std::vector<int>& labels, const NoiseSchedule& s,
                           const DenoiserTrainConfig& tc) {
    if (data.rows() < 1) throw TensorError("train_denoiser: empty dataset");
    if (data.cols() != m.cfg.latent_dim) {
        throw TensorError("train_denoiser: data width " + std::to_string(data.cols()) +
                          " does not match latent_dim " +
                          std::to_string(m.cfg.latent_dim));
    }
    check_labels("train_denoiser", labels, data.rows(), m.cfg.n_classes);
    if (tc.drop_prob < 0.0 || tc.drop_prob > 1.0) {
        throw TensorError("train_denoiser: drop_prob must lie in [0, 1]");
    }
    if (tc.batch < 1) throw TensorError("train_denoiser: batch must be >= 1");

    Rng rng(tc.seed);
    AdamW opt(m.params(), {tc.lr, tc.weight_decay}, decay_mask(m.named_params()));
    const long n = data.rows();
    const long d = data.cols();
    std::vector<long> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0L);

    TrainReport report;
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        for (long start = 0; start < n; start += tc.batch) {
            const long stop = std::min(n, start + tc.batch);
            const std::vector<long> idx(order.begin() + start, order.begin() + stop);
            const long bsz = stop - start;

            Tensor z0 = gather_rows(data, idx);
            const int t = static_cast<int>(rng.randint(1, s.total_steps + 1));
            Tensor eps = normal_tensor({bsz, d}, rng);

            Tape tape;
            std::vector<Tensor> rows;
            rows.reserve(static_cast<std::size_t>(bsz));
            for (long i : idx) {
                if (rng.uniform() < tc.drop_prob) {
                    rows.push_back(m.null_embedding);
                } else {
                    rows.push_back(tape.slice(m.class_table, labels[static_cast<std::size_t>(i)],
                                              labels[static_cast<std::size_t>(i)] + 1));
                }
            }
            Tensor cond_rows = tape.concat(rows);
            Tensor z_t = forward_noise(tape, z0, t, eps, s);
            Tensor pred = denoiser_forward(m, tape, z_t, t, cond_rows);
            Tensor loss = tape.mse(pred, eps);
            check_finite_loss("train_denoiser", loss.value(), epoch);
            loss_sum += loss.value() * static_cast<double>(bsz);

            opt.zero_grad();
            tape.backward(loss);
            opt.step();
        }
        report.epoch_loss.push_back(loss_sum / static_cast<double>(n));
    }
    return report;
}

// ---------------------------------------------------------------------------
// classifier
// ---------------------------------------------------------------------------

NamedParams ClassifierModel::named_params() const {
    NamedParams out;
    l1.collect(out, "l1");
    l2.collect(out, "l2");
    head.collect(out, "head");
    return out;
}

std::vector<Tensor> ClassifierModel::params() const {
    std::vector<Tensor> out;
    for (auto& np : named_params()) out.push_back(np.second);
    return out;
}

ClassifierModel make_classifier(const ClassifierConfig& cfg, Rng& rng) {
    if (cfg.input_dim < 1 || cfg.hidden < 1 || cfg.feature_dim < 1 ||
        cfg.n_classes < 2) {
        throw TensorError("make_classifier: bad dimensions (need n_classes >= 2)");
    }
    ClassifierModel m;
    m.cfg = cfg;
    m.l1 = Linear(cfg.input_dim, cfg.hidden, rng);
    m.l2 = Linear(cfg.hidden, cfg.feature_dim, rng);
    m.head = Linear(cfg.feature_dim, cfg.n_classes, rng);
    return m;
}

Tensor classifier_features(const ClassifierModel& m, Tape& tape, const Tensor& x) {
    if (x.cols() != m.cfg.input_dim) {
        throw TensorError("classifier_features: input width " +
                          std::to_string(x.cols()) + " does not match input_dim " +
                          std::to_string(m.cfg.input_dim));
    }
    Tensor h = tape.tanh(m.l1(tape, x));
    return tape.tanh(m.l2(tape, h));
}

Tensor classifier_logits(const ClassifierModel& m, Tape& tape, const Tensor& x) {
    return m.head(tape, classifier_features(m, tape, x));
}

double classifier_accuracy(const ClassifierModel& m, const Tensor& x,
                           const std::vector<int>& labels) {
    check_labels("classifier_accuracy", labels, x.rows(), m.cfg.n_classes);
    Tape tape;
    Tensor logits = classifier_logits(m, tape, x);
    const int k = m.cfg.n_classes;
    long correct = 0;
    for (long i = 0; i < x.rows(); ++i) {
        int best = 0;
        for (int j = 1; j < k; ++j) {
            if (logits.at(i, j) > logits.at(i, best)) best = j;
        }
        if (best == labels[static_cast<std::size_t>(i)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(x.rows());
}

TrainReport train_classifier(ClassifierModel& m, const Tensor& data,
                             const std::vector<int>& labels,
                             const ClassifierTrainConfig& tc) {
    if (data.rows() < 1) throw TensorError("train_classifier: empty dataset");
    check_labels("train_classifier", labels, data.rows(), m.cfg.n_classes);
    if (tc.batch < 1) throw TensorError("train_classifier: batch must be >= 1");
    bool multiclass = false;
    for (int lab : labels) {
        if (lab != labels[0]) {
            multiclass = true;
            break;
        }
    }
    if (!multiclass) {
        throw TensorError(
            "train_classifier: all labels identical; covariance diagnostics need "
            "at least two classes");
    }

    Rng rng(tc.seed);
    AdamW opt(m.params(), {tc.lr, tc.weight_decay}, decay_mask(m.named_params()));
    const long n = data.rows();
    const int k = m.cfg.n_classes;
    std::vector<long> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0L);

    TrainReport report;
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        for (long start = 0; start < n; start += tc.batch) {
            const long stop = std::min(n, start + tc.batch);
            const std::vector<long> idx(order.begin() + start, order.begin() + stop);
            const long bsz = stop - start;

            Tensor x = gather_rows(data, idx);
            Tensor onehot = Tensor::zeros({bsz, k});
            for (long i = 0; i < bsz; ++i) {
                onehot.values()[static_cast<std::size_t>(
                    i * k + labels[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])])] = 1.0;
            }

            Tape tape;
            Tensor loss = tape.mse(classifier_logits(m, tape, x), onehot);
            check_finite_loss("train_classifier", loss.value(), epoch);
            loss_sum += loss.value() * static_cast<double>(bsz);

            opt.zero_grad();
            tape.backward(loss);
            opt.step();
        }
        report.epoch_loss.push_back(loss_sum / static_cast<double>(n));
        report.epoch_accuracy.push_back(classifier_accuracy(m, data, labels));
    }
    return report;
}

// ---------------------------------------------------------------------------
// codec
// ---------------------------------------------------------------------------

NamedParams Codec::named_params() const {
    NamedParams out;
    if (learned) {
        enc.collect(out, "enc");
        dec.collect(out, "dec");
    }
    return out;
}

std::vector<Tensor> Codec::params() const {
    std::vector<Tensor> out;
    for (auto& np : named_params()) out.push_back(np.second);
    return out;
}

Codec make_identity_codec() { return Codec{}; }

Codec make_learned_codec(int data_dim, int latent_dim, Rng& rng) {
    if (data_dim < 1 || latent_dim < 1) {
        throw TensorError("make_learned_codec: dimensions must be positive");
    }
    Codec c;
    c.learned = true;
    c.data_dim = data_dim;
    c.latent_dim = latent_dim;
    c.enc = Linear(data_dim, latent_dim, rng);
    c.dec = Linear(latent_dim, data_dim, rng);
    return c;
}

Tensor codec_encode(const Codec& c, Tape& tape, const Tensor& x) {
    if (!c.learned) return x;
    if (x.cols() != c.data_dim) {
        throw TensorError("codec_encode: input width " + std::to_string(x.cols()) +
                          " does not match data_dim " + std::to_string(c.data_dim));
    }
    return c.enc(tape, x);
}

Tensor codec_decode(const Codec& c, Tape& tape, const Tensor& z) {
    if (!c.learned) return z;
    if (z.cols() != c.latent_dim) {
        throw TensorError("codec_decode: input width " + std::to_string(z.cols()) +
                          " does not match latent_dim " + std::to_string(c.latent_dim));
    }
    return c.dec(tape, z);
}

TrainReport train_codec(Codec& c, const Tensor& data, const CodecTrainConfig& tc) {
    if (!c.learned) throw TensorError("train_codec: identity codec has no parameters");
    if (data.rows() < 1) throw TensorError("train_codec: empty dataset");
    if (tc.batch < 1) throw TensorError("train_codec: batch must be >= 1");

    Rng rng(tc.seed);
    AdamW opt(c.params(), {tc.lr});
    const long n = data.rows();
    std::vector<long> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0L);

    TrainReport report;
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        for (long start = 0; start < n; start += tc.batch) {
            const long stop = std::min(n, start + tc.batch);
            const std::vector<long> idx(order.begin() + start, order.begin() + stop);

            Tensor x = gather_rows(data, idx);
            Tape tape;
            Tensor recon = codec_decode(c, tape, codec_encode(c, tape, x));
            Tensor loss = tape.mse(recon, x);
            check_finite_loss("train_codec", loss.value(), epoch);
            loss_sum += loss.value() * static_cast<double>(stop - start);

            opt.zero_grad();
            tape.backward(loss);
            opt.step();
        }
        report.epoch_loss.push_back(loss_sum / static_cast<double>(n));
    }
    return report;
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

void save_denoiser(const DenoiserModel& m, const std::string& path,
                   const std::vector<std::pair<std::string, std::string>>& provenance) {
    save_params(path, m.named_params());
    Config manifest;
    manifest.set_str("model", "kind", "denoiser");
    manifest.set_int("model", "latent_dim", m.cfg.latent_dim);
    manifest.set_int("model", "hidden", m.cfg.hidden);
    manifest.set_int("model", "blocks", m.cfg.blocks);
    manifest.set_int("model", "time_dim", m.cfg.time_dim);
    manifest.set_int("model", "condition_dim", m.cfg.condition_dim);
    manifest.set_int("model", "n_classes", m.cfg.n_classes);
    write_manifest(path, manifest, provenance);
}

DenoiserModel load_denoiser(const std::string& path) {
    require_artifact("load_denoiser", path);
    Config meta = Config::load(path + ".meta");
    if (meta.get_str("model", "kind") != "denoiser") {
        throw TensorError("load_denoiser: " + path + " holds a " +
                          meta.get_str("model", "kind") + " model");
    }
    DenoiserConfig cfg;
    cfg.latent_dim = static_cast<int>(meta.get_int("model", "latent_dim"));
    cfg.hidden = static_cast<int>(meta.get_int("model", "hidden"));
    cfg.blocks = static_cast<int>(meta.get_int("model", "blocks"));
    cfg.time_dim = static_cast<int>(meta.get_int("model", "time_dim"));
    cfg.condition_dim = static_cast<int>(meta.get_int("model", "condition_dim"));
    cfg.n_classes = static_cast<int>(meta.get_int("model", "n_classes"));
    Rng rng(0);
    DenoiserModel m = make_denoiser(cfg, rng);
    fill_params("load_denoiser", m.named_params(), path);
    return m;
}

void save_classifier(const ClassifierModel& m, const std::string& path,
                     const std::vector<std::pair<std::string, std::string>>& provenance) {
    save_params(path, m.named_params());
    Config manifest;
    manifest.set_str("model", "kind", "classifier");
    manifest.set_int("model", "input_dim", m.cfg.input_dim);
    manifest.set_int("model", "hidden", m.cfg.hidden);
    manifest.set_int("model", "feature_dim", m.cfg.feature_dim);
    manifest.set_int("model", "n_classes", m.cfg.n_classes);
    write_manifest(path, manifest, provenance);
}

ClassifierModel load_classifier(const std::string& path) {
    require_artifact("load_classifier", path);
    Config meta = Config::load(path + ".meta");
    if (meta.get_str("model", "kind") != "classifier") {
        throw TensorError("load_classifier: " + path + " holds a " +
                          meta.get_str("model", "kind") + " model");
    }
    ClassifierConfig cfg;
    cfg.input_dim = static_cast<int>(meta.get_int("model", "input_dim"));
    cfg.hidden = static_cast<int>(meta.get_int("model", "hidden"));
    cfg.feature_dim = static_cast<int>(meta.get_int("model", "feature_dim"));
    cfg.n_classes = static_cast<int>(meta.get_int("model", "n_classes"));
    Rng rng(0);
    ClassifierModel m = make_classifier(cfg, rng);
    fill_params("load_classifier", m.named_params(), path);
    return m;
}

void save_codec(const Codec& c, const std::string& path,
                const std::vector<std::pair<std::string, std::string>>& provenance) {
    save_params(path, c.named_params());
    Config manifest;
    manifest.set_str("model", "kind", "codec");
    manifest.set_bool("model", "learned", c.learned);
    manifest.set_int("model", "data_dim", c.data_dim);
    manifest.set_int("model", "latent_dim", c.latent_dim);
    write_manifest(path, manifest, provenance);
}

Codec load_codec(const std::string& path) {
    require_artifact("load_codec", path);
    Config meta = Config::load(path + ".meta");
    if (meta.get_str("model", "kind") != "codec") {
        throw TensorError("load_codec: " + path + " holds a " +
                          meta.get_str("model", "kind") + " model");
    }
    Codec c;
    if (meta.get_bool("model", "learned")) {
        Rng rng(0);
        c = make_learned_codec(static_cast<int>(meta.get_int("model", "data_dim")),
                               static_cast<int>(meta.get_int("model", "latent_dim")),
                               rng);
        fill_params("load_codec", c.named_params(), path);
    }
    return c;
}

std::string manifest_value(const std::string& model_path, const std::string& key) {
    Config meta;
    try {
        meta = Config::load(model_path + ".meta");
    } catch (const ConfigError&) {
        return "";
    }
    for (const std::string& section : meta.sections()) {
        if (meta.has(section, key)) return meta.get_str(section, key);
    }
    return "";
}

}  // namespace difflab
