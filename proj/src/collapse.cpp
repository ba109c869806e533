#include "difflab/collapse.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "difflab/config.hpp"
#include "difflab/diffusion.hpp"
#include "difflab/rng.hpp"

#include <fstream>

namespace difflab {

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

double cosine(const char* op, const std::vector<double>& a,
              const std::vector<double>& b) {
    const double na = norm(a);
    const double nb = norm(b);
    if (na == 0.0 || nb == 0.0) {
        throw TensorError(std::string(op) + ": zero-norm vector, cosine undefined");
    }
    return dot(a, b) / (na * nb);
}

std::vector<long> class_counts(const char* op, const std::vector<int>& labels, int k) {
    std::vector<long> counts(static_cast<std::size_t>(k), 0);
    for (int lab : labels) {
        if (lab < 0 || lab >= k) {
            throw TensorError(std::string(op) + ": label " + std::to_string(lab) +
                              " outside [0, " + std::to_string(k) + ")");
        }
        ++counts[static_cast<std::size_t>(lab)];
    }
    for (int a = 0; a < k; ++a) {
        if (counts[static_cast<std::size_t>(a)] == 0) {
            throw TensorError(std::string(op) + ": class " + std::to_string(a) +
                              " has no samples");
        }
    }
    return counts;
}

// column a of the head weight matrix (p, k)
std::vector<double> head_column(const ClassifierModel& cls, int a) {
    const int p = cls.cfg.feature_dim;
    std::vector<double> w(static_cast<std::size_t>(p));
    for (int i = 0; i < p; ++i) w[static_cast<std::size_t>(i)] = cls.head.w.at(i, a);
    return w;
}

// raw (uncentered) per-class feature means
std::vector<std::vector<double>> raw_means(const Tensor& features,
                                           const std::vector<int>& labels, int k,
                                           const std::vector<long>& counts) {
    const long p = features.cols();
    std::vector<std::vector<double>> m(
        static_cast<std::size_t>(k), std::vector<double>(static_cast<std::size_t>(p), 0.0));
    for (long i = 0; i < features.rows(); ++i) {
        const std::size_t a = static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]);
        for (long j = 0; j < p; ++j) m[a][static_cast<std::size_t>(j)] += features.at(i, j);
    }
    for (int a = 0; a < k; ++a) {
        for (long j = 0; j < p; ++j) {
            m[static_cast<std::size_t>(a)][static_cast<std::size_t>(j)] /=
                static_cast<double>(counts[static_cast<std::size_t>(a)]);
        }
    }
    return m;
}

// center a list of vectors by their unweighted mean; returns the mean
std::vector<double> center_rows(std::vector<std::vector<double>>& rows) {
    const std::size_t p = rows[0].size();
    std::vector<double> g(p, 0.0);
    for (const auto& r : rows) {
        for (std::size_t j = 0; j < p; ++j) g[j] += r[j];
    }
    for (std::size_t j = 0; j < p; ++j) g[j] /= static_cast<double>(rows.size());
    for (auto& r : rows) {
        for (std::size_t j = 0; j < p; ++j) r[j] -= g[j];
    }
    return g;
}

BetaFit fit_rows(const char* op, const ClassifierModel& cls,
                 const std::vector<std::vector<double>>& mu) {
    const int k = cls.cfg.n_classes;
    double wm = 0.0;
    double mm = 0.0;
    double ww = 0.0;
    for (int a = 0; a < k; ++a) {
        const std::vector<double> w = head_column(cls, a);
        const std::vector<double>& m = mu[static_cast<std::size_t>(a)];
        wm += dot(w, m);
        mm += dot(m, m);
        ww += dot(w, w);
    }
    if (mm == 0.0 || ww == 0.0) {
        throw TensorError(std::string(op) + ": degenerate fit (zero norms)");
    }
    BetaFit fit;
    fit.beta = wm / mm;
    double dev = 0.0;
    for (int a = 0; a < k; ++a) {
        const std::vector<double> w = head_column(cls, a);
        const std::vector<double>& m = mu[static_cast<std::size_t>(a)];
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double r = w[j] - fit.beta * m[j];
            dev += r * r;
        }
    }
    fit.residual = std::sqrt(dev) / std::sqrt(ww);
    return fit;
}

}  // namespace

ClassMeans class_means(const Tensor& features, const std::vector<int>& labels, int k) {
    if (static_cast<long>(labels.size()) != features.rows()) {
        throw TensorError("class_means: labels do not match feature rows");
    }
    const std::vector<long> counts = class_counts("class_means", labels, k);
    ClassMeans out;
    out.mu = raw_means(features, labels, k, counts);
    out.global_mean = center_rows(out.mu);
    return out;
}

double Covariances::trace_b() const {
    double t = 0.0;
    for (int i = 0; i < p; ++i) t += sigma_b[static_cast<std::size_t>(i * p + i)];
    return t;
}

double Covariances::trace_w() const {
    double t = 0.0;
    for (int i = 0; i < p; ++i) t += sigma_w[static_cast<std::size_t>(i * p + i)];
    return t;
}

Covariances covariances(const Tensor& features, const std::vector<int>& labels, int k) {
    if (static_cast<long>(labels.size()) != features.rows()) {
        throw TensorError("covariances: labels do not match feature rows");
    }
    const std::vector<long> counts = class_counts("covariances", labels, k);
    for (int a = 1; a < k; ++a) {
        if (counts[static_cast<std::size_t>(a)] != counts[0]) {
            std::string msg = "covariances: unbalanced classes (counts";
            for (long c : counts) msg += " " + std::to_string(c);
            throw TensorError(msg + "); the total-covariance decomposition "
                                    "requires equal counts");
        }
    }

    const long n = features.rows();
    const long p = features.cols();
    std::vector<std::vector<double>> class_mean = raw_means(features, labels, k, counts);
    std::vector<std::vector<double>> mu = class_mean;  // centered below
    const std::vector<double> g = center_rows(mu);

    Covariances cov;
    cov.p = static_cast<int>(p);
    cov.sigma_b.assign(static_cast<std::size_t>(p * p), 0.0);
    cov.sigma_w.assign(static_cast<std::size_t>(p * p), 0.0);
    cov.sigma_t.assign(static_cast<std::size_t>(p * p), 0.0);

    for (int a = 0; a < k; ++a) {
        const std::vector<double>& m = mu[static_cast<std::size_t>(a)];
        for (long i = 0; i < p; ++i) {
            for (long j = 0; j < p; ++j) {
                cov.sigma_b[static_cast<std::size_t>(i * p + j)] +=
                    m[static_cast<std::size_t>(i)] * m[static_cast<std::size_t>(j)] /
                    static_cast<double>(k);
            }
        }
    }

    std::vector<double> dev(static_cast<std::size_t>(p));
    for (long r = 0; r < n; ++r) {
        const std::size_t a = static_cast<std::size_t>(labels[static_cast<std::size_t>(r)]);
        for (long j = 0; j < p; ++j) {
            dev[static_cast<std::size_t>(j)] =
                features.at(r, j) - class_mean[a][static_cast<std::size_t>(j)];
        }
        for (long i = 0; i < p; ++i) {
            for (long j = 0; j < p; ++j) {
                cov.sigma_w[static_cast<std::size_t>(i * p + j)] +=
                    dev[static_cast<std::size_t>(i)] * dev[static_cast<std::size_t>(j)] /
                    static_cast<double>(n);
            }
        }
        for (long j = 0; j < p; ++j) {
            dev[static_cast<std::size_t>(j)] =
                features.at(r, j) - g[static_cast<std::size_t>(j)];
        }
        for (long i = 0; i < p; ++i) {
            for (long j = 0; j < p; ++j) {
                cov.sigma_t[static_cast<std::size_t>(i * p + j)] +=
                    dev[static_cast<std::size_t>(i)] * dev[static_cast<std::size_t>(j)] /
                    static_cast<double>(n);
            }
        }
    }
    return cov;
}

EtfMetrics etf_metrics(const std::vector<std::vector<double>>& mu) {
    if (mu.empty()) throw TensorError("etf_metrics: no class means");
    const int k = static_cast<int>(mu.size());
    std::vector<double> norms(static_cast<std::size_t>(k));
    for (int a = 0; a < k; ++a) {
        norms[static_cast<std::size_t>(a)] = norm(mu[static_cast<std::size_t>(a)]);
        if (norms[static_cast<std::size_t>(a)] == 0.0) {
            throw TensorError("etf_metrics: class mean " + std::to_string(a) +
                              " has zero norm");
        }
    }
    EtfMetrics out;
    out.cos.assign(static_cast<std::size_t>(k) * static_cast<std::size_t>(k), 1.0);
    for (int a = 0; a < k; ++a) {
        for (int b = a + 1; b < k; ++b) {
            const double c = dot(mu[static_cast<std::size_t>(a)],
                                 mu[static_cast<std::size_t>(b)]) /
                             (norms[static_cast<std::size_t>(a)] *
                              norms[static_cast<std::size_t>(b)]);
            out.cos[static_cast<std::size_t>(a * k + b)] = c;
            out.cos[static_cast<std::size_t>(b * k + a)] = c;
        }
    }
    const double lo = *std::min_element(norms.begin(), norms.end());
    const double hi = *std::max_element(norms.begin(), norms.end());
    double mean_norm = 0.0;
    for (double v : norms) mean_norm += v;
    mean_norm /= static_cast<double>(k);
    out.norm_spread = (hi - lo) / mean_norm;
    return out;
}

std::vector<double> head_mean_alignment(const ClassifierModel& cls,
                                       const Tensor& features,
                                       const std::vector<int>& labels) {
    const int k = cls.cfg.n_classes;
    if (features.cols() != cls.cfg.feature_dim) {
        throw TensorError("head_mean_alignment: feature width " +
                          std::to_string(features.cols()) + " does not match head");
    }
    const ClassMeans means = class_means(features, labels, k);
    std::vector<double> out;
    for (int a = 0; a < k; ++a) {
        out.push_back(cosine("head_mean_alignment", head_column(cls, a),
                             means.mu[static_cast<std::size_t>(a)]));
    }
    return out;
}

BetaFit beta_fit(const ClassifierModel& cls,
                 const std::vector<std::vector<double>>& mu) {
    return fit_rows("beta_fit", cls, mu);
}

CollapseReport build_collapse_report(const ClassifierModel& cls, const Tensor& features,
                                     const std::vector<int>& labels) {
    CollapseReport r;
    r.k = cls.cfg.n_classes;
    r.p = static_cast<int>(features.cols());
    r.means = class_means(features, labels, r.k);
    r.cov = covariances(features, labels, r.k);
    r.etf = etf_metrics(r.means.mu);
    r.wa_mu_cos = head_mean_alignment(cls, features, labels);
    r.fit = beta_fit(cls, r.means.mu);
    const double tb = r.cov.trace_b();
    if (tb == 0.0) {
        throw TensorError("build_collapse_report: between-class covariance has "
                          "zero trace");
    }
    r.collapse_ratio = r.cov.trace_w() / tb;
    return r;
}

GeneratedAlignment generated_alignment(const ClassifierModel& cls,
                            const std::vector<SemanticEmbedding>& embeddings,
                            const Tensor& data, const std::vector<int>& labels,
                            const EditPipeline& pipeline, AlignmentSources sources) {
    const int k = cls.cfg.n_classes;
    if (static_cast<int>(embeddings.size()) != k) {
        throw TensorError("generated_alignment: need one embedding per class (" +
                          std::to_string(embeddings.size()) + " given, " +
                          std::to_string(k) + " classes)");
    }
    if (static_cast<long>(labels.size()) != data.rows()) {
        throw TensorError("generated_alignment: labels do not match data rows");
    }
    class_counts("generated_alignment", labels, k);

    GeneratedAlignment out;
    for (int a = 0; a < k; ++a) {
        std::vector<long> rows_idx;
        for (long i = 0; i < data.rows(); ++i) {
            if (sources == AlignmentSources::kAll ||
                labels[static_cast<std::size_t>(i)] == a) {
                rows_idx.push_back(i);
            }
        }
        Tensor batch = Tensor::zeros({static_cast<long>(rows_idx.size()), data.cols()});
        for (std::size_t i = 0; i < rows_idx.size(); ++i) {
            for (long j = 0; j < data.cols(); ++j) {
                batch.values()[i * static_cast<std::size_t>(data.cols()) +
                               static_cast<std::size_t>(j)] = data.at(rows_idx[i], j);
            }
        }
        Tensor generated = pipeline(batch, embeddings[static_cast<std::size_t>(a)]);
        Tape tape;
        Tensor feats = classifier_features(cls, tape, generated);
        std::vector<double> mean(static_cast<std::size_t>(feats.cols()), 0.0);
        for (long i = 0; i < feats.rows(); ++i) {
            for (long j = 0; j < feats.cols(); ++j) {
                mean[static_cast<std::size_t>(j)] += feats.at(i, j);
            }
        }
        for (double& v : mean) v /= static_cast<double>(feats.rows());
        out.mu_prime.push_back(std::move(mean));
    }
    center_rows(out.mu_prime);
    for (int a = 0; a < k; ++a) {
        out.cosines.push_back(cosine("generated_alignment", head_column(cls, a),
                                     out.mu_prime[static_cast<std::size_t>(a)]));
    }
    out.fit = fit_rows("generated_alignment", cls, out.mu_prime);
    return out;
}

EditPipeline single_step_pipeline(const EditConfig& cfg, const DenoiserModel& den,
                                  const Codec& codec, const NoiseSchedule& s) {
    return [cfg, den, codec, s](const Tensor& batch, const SemanticEmbedding& e) {
        return edit_single_step(batch, e, cfg, den, codec, s);
    };
}

EditPipeline multi_step_pipeline(const EditConfig& cfg, const DenoiserModel& den,
                                 const Codec& codec, const NoiseSchedule& s) {
    return [cfg, den, codec, s](const Tensor& batch, const SemanticEmbedding& e) {
        return edit(batch, e, cfg, den, codec, s);
    };
}

JensenGapEstimate jensen_gap_bound(const ClassifierModel& cls, const Codec& codec,
                                   const DenoiserModel& den, const Tensor& data,
                                   const NoiseSchedule& s, int level, double sigma2,
                                   int n_probe, std::uint64_t seed) {
    if (n_probe < 1) throw TensorError("jensen_gap_bound: n_probe must be >= 1");
    if (sigma2 <= 0.0) throw TensorError("jensen_gap_bound: sigma2 must be > 0");
    if (data.rows() < 1) throw TensorError("jensen_gap_bound: empty data");
    s.alpha(level);  // range check

    Rng rng(seed);
    Tensor latents;
    {
        Tape tape;
        latents = codec_encode(codec, tape, data).detach();
    }
    const long n = latents.rows();
    const long d = latents.cols();

    JensenGapEstimate est;
    est.d = static_cast<int>(d);
    est.sigma2 = sigma2;
    est.n_samples = n_probe;

    // max gradient norm of the predicted-class logit w.r.t. the latent; the
    // probe set alternates clean encodings and re-noised versions of them
    for (int j = 0; j < n_probe; ++j) {
        const long row = j % n;
        Tensor z = Tensor::zeros({1, d}, true);
        for (long c = 0; c < d; ++c) {
            z.values()[static_cast<std::size_t>(c)] = latents.at(row, c);
        }
        if (j >= n || j % 2 == 1) {
            Tape noise_tape;
            Tensor eps = Tensor::zeros({1, d});
            for (double& v : eps.values()) v = rng.normal();
            Tensor noisy = forward_noise(noise_tape, z.detach(), level, eps, s);
            z.values() = noisy.values();
        }
        Tape tape;
        Tensor x_hat = codec_decode(codec, tape, z);
        Tensor logits = classifier_logits(cls, tape, x_hat);
        int target = 0;
        for (int c = 1; c < cls.cfg.n_classes; ++c) {
            if (logits.at(0, c) > logits.at(0, target)) target = c;
        }
        Tensor pick = Tensor::zeros({1, static_cast<long>(cls.cfg.n_classes)});
        pick.values()[static_cast<std::size_t>(target)] = 1.0;
        Tensor scalar = tape.sum(tape.mul(logits, pick));
        z.zero_grad();
        tape.backward(scalar);
        double g2 = 0.0;
        for (double gv : z.grad()) g2 += gv * gv;
        if (!std::isfinite(g2)) {
            throw TensorError("jensen_gap_bound: non-finite gradient at probe " +
                              std::to_string(j));
        }
        est.grad_norm_max = std::max(est.grad_norm_max, std::sqrt(g2));
    }

    // E | z0 - single-step estimate | via re-noising known clean latents
    double q_sum = 0.0;
    for (int j = 0; j < n_probe; ++j) {
        const long row = j % n;
        Tensor z0 = Tensor::zeros({1, d});
        for (long c = 0; c < d; ++c) {
            z0.values()[static_cast<std::size_t>(c)] = latents.at(row, c);
        }
        Tensor eps = Tensor::zeros({1, d});
        for (double& v : eps.values()) v = rng.normal();
        Tape tape;
        Tensor z_l = forward_noise(tape, z0, level, eps, s);
        Tensor eps_u = denoiser_eval(den, tape, z_l, level, nullptr);
        Tensor z0_hat = predict_x0(tape, z_l, eps_u, level, s);
        double dist2 = 0.0;
        for (long c = 0; c < d; ++c) {
            const double diff = z0_hat.at(0, c) - z0.at(0, c);
            dist2 += diff * diff;
        }
        q_sum += std::sqrt(dist2);
    }
    est.q_mc = q_sum / static_cast<double>(n_probe);

    est.bound = (static_cast<double>(est.d) / std::sqrt(2.0 * M_PI * est.sigma2)) *
                std::exp(-1.0 / (2.0 * est.sigma2)) * est.grad_norm_max * est.q_mc;
    return est;
}

void write_collapse_report(const CollapseReport& r, const std::string& path_prefix) {
    double identity_dev = 0.0;
    for (std::size_t i = 0; i < r.cov.sigma_t.size(); ++i) {
        identity_dev = std::max(identity_dev,
                                std::abs(r.cov.sigma_t[i] - r.cov.sigma_b[i] -
                                         r.cov.sigma_w[i]));
    }
    double min_cos = 1.0;
    for (double c : r.wa_mu_cos) min_cos = std::min(min_cos, c);

    Config txt;
    txt.set_int("collapse", "classes", r.k);
    txt.set_int("collapse", "feature_dim", r.p);
    txt.set_real("collapse", "collapse_ratio", r.collapse_ratio);
    txt.set_real("collapse", "trace_between", r.cov.trace_b());
    txt.set_real("collapse", "trace_within", r.cov.trace_w());
    txt.set_real("collapse", "covariance_identity_dev", identity_dev);
    txt.set_real("collapse", "norm_spread", r.etf.norm_spread);
    txt.set_real("collapse", "min_head_mean_cos", min_cos);
    txt.set_real("collapse", "beta", r.fit.beta);
    txt.set_real("collapse", "beta_residual", r.fit.residual);
    txt.save(path_prefix + ".txt");

    std::ofstream csv(path_prefix + ".csv");
    if (!csv) throw TensorError("write_collapse_report: cannot write " +
                                path_prefix + ".csv");
    csv << "class,mu_norm,head_mean_cos";
    for (int b = 0; b < r.k; ++b) csv << ",etf_cos_" << b;
    csv << '\n';
    csv.precision(17);
    for (int a = 0; a < r.k; ++a) {
        csv << a << ',' << norm(r.means.mu[static_cast<std::size_t>(a)]) << ','
            << r.wa_mu_cos[static_cast<std::size_t>(a)];
        for (int b = 0; b < r.k; ++b) {
            csv << ',' << r.etf.cos[static_cast<std::size_t>(a * r.k + b)];
        }
        csv << '\n';
    }
    if (!csv) throw TensorError("write_collapse_report: write failed");
}

void write_jensen_report(const JensenGapEstimate& j, const std::string& path) {
    Config txt;
    txt.set_int("jensen_gap", "latent_dim", j.d);
    txt.set_real("jensen_gap", "sigma2", j.sigma2);
    txt.set_real("jensen_gap", "grad_norm_max", j.grad_norm_max);
    txt.set_str("jensen_gap", "grad_norm_note",
                "finite-probe lower bound of the supremum");
    txt.set_real("jensen_gap", "q_mc", j.q_mc);
    txt.set_real("jensen_gap", "bound", j.bound);
    txt.set_int("jensen_gap", "n_samples", j.n_samples);
    txt.save(path);
}

}  // namespace difflab
