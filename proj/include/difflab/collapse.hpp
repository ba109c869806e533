#pragma once

#include <functional>
#include <string>
#include <vector>

#include "difflab/edit.hpp"
#include "difflab/models.hpp"
#include "difflab/tensor.hpp"

namespace difflab {

// globally-centered class means: per-class feature mean minus the unweighted
// mean of the class means
struct ClassMeans {
    std::vector<std::vector<double>> mu;  // k rows of width p, centered
    std::vector<double> global_mean;      // width p
};

ClassMeans class_means(const Tensor& features, const std::vector<int>& labels, int k);

// Between/within/total covariance of features; requires balanced classes so
// that sigma_t decomposes exactly into sigma_b + sigma_w.
struct Covariances {
    int p = 0;
    std::vector<double> sigma_b;  // p*p row-major
    std::vector<double> sigma_w;
    std::vector<double> sigma_t;

    double trace_b() const;
    double trace_w() const;
};

Covariances covariances(const Tensor& features, const std::vector<int>& labels, int k);

struct EtfMetrics {
    std::vector<double> cos;  // k*k row-major, unit diagonal
    double norm_spread = 0.0; // max pairwise norm gap / mean norm
};

EtfMetrics etf_metrics(const std::vector<std::vector<double>>& mu);

// cosine(w_a, mu_a) per class, where w_a is column a of the classifier head
std::vector<double> head_mean_alignment(const ClassifierModel& cls,
                                       const Tensor& features,
                                       const std::vector<int>& labels);

// least-squares scalar fit of the head rows onto the class means:
// beta = <W, M>_F / <M, M>_F, residual = |W - beta M|_F / |W|_F
struct BetaFit {
    double beta = 0.0;
    double residual = 0.0;
};

BetaFit beta_fit(const ClassifierModel& cls, const std::vector<std::vector<double>>& mu);

// everything the feature-geometry diagnostics produce, for one feature set
struct CollapseReport {
    int k = 0;
    int p = 0;
    ClassMeans means;
    Covariances cov;
    EtfMetrics etf;
    std::vector<double> wa_mu_cos;
    BetaFit fit;
    double collapse_ratio = 0.0;  // trace(sigma_w) / trace(sigma_b)
};

CollapseReport build_collapse_report(const ClassifierModel& cls, const Tensor& features,
                                     const std::vector<int>& labels);

// generated-feature geometry: class means of edited images per target class
using EditPipeline =
    std::function<Tensor(const Tensor& batch, const SemanticEmbedding& e)>;

enum class AlignmentSources {
    kAll,       // mu'_a averages every image edited toward class a
    kOwnClass,  // mu'_a averages only source images of class a
};

struct GeneratedAlignment {
    std::vector<std::vector<double>> mu_prime;  // k rows of width p, centered
    std::vector<double> cosines;                // cos(w_a, mu'_a)
    BetaFit fit;
};

GeneratedAlignment generated_alignment(const ClassifierModel& cls,
                            const std::vector<SemanticEmbedding>& embeddings,
                            const Tensor& data, const std::vector<int>& labels,
                            const EditPipeline& pipeline,
                            AlignmentSources sources = AlignmentSources::kAll);

// ready-made pipelines for generated_alignment
EditPipeline single_step_pipeline(const EditConfig& cfg, const DenoiserModel& den,
                                  const Codec& codec, const NoiseSchedule& s);
EditPipeline multi_step_pipeline(const EditConfig& cfg, const DenoiserModel& den,
                                 const Codec& codec, const NoiseSchedule& s);

struct JensenGapEstimate {
    int d = 0;
    double sigma2 = 1.0;
    double grad_norm_max = 0.0;  // finite-probe lower bound of the supremum
    double q_mc = 0.0;           // Monte-Carlo posterior-distance estimate
    double bound = 0.0;          // (d / sqrt(2 pi s2)) e^{-1/(2 s2)} * grad * q
    int n_samples = 0;
};

// Probes classifier-logit gradients through the decoder and estimates the
// expected single-step prediction error at noise level L by re-noising known
// clean latents.
JensenGapEstimate jensen_gap_bound(const ClassifierModel& cls, const Codec& codec,
                                   const DenoiserModel& den, const Tensor& data,
                                   const NoiseSchedule& s, int level, double sigma2,
                                   int n_probe, std::uint64_t seed);

// structured-text (INI) summary plus one CSV row per class
void write_collapse_report(const CollapseReport& r, const std::string& path_prefix);
void write_jensen_report(const JensenGapEstimate& j, const std::string& path);

}  // namespace difflab
