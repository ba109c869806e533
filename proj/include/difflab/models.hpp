#pragma once

#include <string>
#include <vector>

#include "difflab/nn.hpp"
#include "difflab/rng.hpp"
#include "difflab/schedule.hpp"
#include "difflab/serialize.hpp"
#include "difflab/tensor.hpp"

namespace difflab {

// ---------------------------------------------------------------------------
// conditional denoiser
// ---------------------------------------------------------------------------

struct DenoiserConfig {
    int latent_dim = 144;
    int hidden = 160;
    int blocks = 2;
    int time_dim = 16;  // sinusoidal feature width, must be even
    int condition_dim = 8;
    int n_classes = 2;
};

// Residual MLP noise predictor. Timestep and condition information enter as a
// shared additive embedding at every residual block. The condition pathway
// accepts a pooled row per example; a learned null row stands for the
// unconditional branch, and a per-class row table provides the conditions seen
// during training.
struct DenoiserModel {
    DenoiserConfig cfg;
    Linear in_proj;    // latent -> hidden
    Linear t_proj;     // time features -> hidden
    Linear cond_proj;  // condition row -> hidden
    std::vector<Linear> block_a;  // hidden -> hidden
    std::vector<Linear> block_b;  // hidden -> hidden
    Linear out_proj;   // hidden -> latent
    Tensor null_embedding;  // (1, condition_dim), learned
    Tensor class_table;     // (n_classes, condition_dim), learned

    NamedParams named_params() const;
    std::vector<Tensor> params() const;
};

DenoiserModel make_denoiser(const DenoiserConfig& cfg, Rng& rng);

// sinusoidal features of a timestep, shape (1, time_dim)
Tensor time_features(int t, int time_dim);

// Core forward pass with one pooled condition row per example.
// z: (n, latent_dim), cond_rows: (n, condition_dim). Differentiable.
Tensor denoiser_forward(const DenoiserModel& m, Tape& tape, const Tensor& z, int t,
                        const Tensor& cond_rows);

// Evaluate with a shared condition token matrix (n_tokens, condition_dim),
// mean-pooled into one row; cond == nullptr selects the learned null row.
Tensor denoiser_eval(const DenoiserModel& m, Tape& tape, const Tensor& z, int t,
                     const Tensor* cond);

// detached copy of one class-condition row as a (1, condition_dim) token matrix
Tensor class_condition(const DenoiserModel& m, int class_id);

struct DenoiserTrainConfig {
    int epochs = 30;
    int batch = 64;
    double lr = 2e-3;
    double weight_decay = 0.0;
    double drop_prob = 0.1;  // probability of replacing the condition by null
    unsigned long long seed = 1;
};

struct TrainReport {
    std::vector<double> epoch_loss;
    std::vector<double> epoch_accuracy;  // classifier runs only
};

// Noise-prediction training with condition dropout. data: (N, latent_dim),
// labels: class ids in [0, n_classes). Same seed -> bit-identical parameters.
TrainReport train_denoiser(DenoiserModel& m, const Tensor& data,
                           const std::vector<int>& labels, const NoiseSchedule& s,
                           const DenoiserTrainConfig& tc);

// ---------------------------------------------------------------------------
// attribute classifier
// ---------------------------------------------------------------------------

struct ClassifierConfig {
    int input_dim = 144;
    int hidden = 64;
    int feature_dim = 16;  // penultimate width
    int n_classes = 2;
};

// Two hidden tanh layers expose a penultimate feature vector; a final linear
// head maps features to per-class logits.
struct ClassifierModel {
    ClassifierConfig cfg;
    Linear l1;    // input -> hidden
    Linear l2;    // hidden -> feature_dim
    Linear head;  // feature_dim -> n_classes

    NamedParams named_params() const;
    std::vector<Tensor> params() const;
};

ClassifierModel make_classifier(const ClassifierConfig& cfg, Rng& rng);

// penultimate features, shape (n, feature_dim)
Tensor classifier_features(const ClassifierModel& m, Tape& tape, const Tensor& x);

// logits = features @ head.w + head.b, shape (n, n_classes)
Tensor classifier_logits(const ClassifierModel& m, Tape& tape, const Tensor& x);

// fraction of argmax-correct predictions, evaluated without recording
double classifier_accuracy(const ClassifierModel& m, const Tensor& x,
                           const std::vector<int>& labels);

struct ClassifierTrainConfig {
    int epochs = 200;
    int batch = 64;
    double lr = 4e-3;
    double weight_decay = 1e-3;
    unsigned long long seed = 1;
};

// MSE against one-hot targets. Requires at least two distinct labels.
TrainReport train_classifier(ClassifierModel& m, const Tensor& data,
                             const std::vector<int>& labels,
                             const ClassifierTrainConfig& tc);

// ---------------------------------------------------------------------------
// latent codec
// ---------------------------------------------------------------------------

// Identity by default (diffusion directly in data space); the learned variant
// is a linear autoencoder so the decoder contributes a nontrivial Jacobian.
struct Codec {
    bool learned = false;
    int data_dim = 0;
    int latent_dim = 0;
    Linear enc;  // data -> latent
    Linear dec;  // latent -> data

    NamedParams named_params() const;
    std::vector<Tensor> params() const;
};

Codec make_identity_codec();
Codec make_learned_codec(int data_dim, int latent_dim, Rng& rng);

Tensor codec_encode(const Codec& c, Tape& tape, const Tensor& x);
Tensor codec_decode(const Codec& c, Tape& tape, const Tensor& z);

struct CodecTrainConfig {
    int epochs = 80;
    int batch = 64;
    double lr = 5e-3;
    unsigned long long seed = 1;
};

// reconstruction MSE training for the learned variant
TrainReport train_codec(Codec& c, const Tensor& data, const CodecTrainConfig& tc);

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

// Parameters go to `path`, a manifest with architecture hyperparameters and
// provenance keys goes to `path`.meta.
void save_denoiser(const DenoiserModel& m, const std::string& path,
                   const std::vector<std::pair<std::string, std::string>>& provenance);
DenoiserModel load_denoiser(const std::string& path);

void save_classifier(const ClassifierModel& m, const std::string& path,
                     const std::vector<std::pair<std::string, std::string>>& provenance);
ClassifierModel load_classifier(const std::string& path);

void save_codec(const Codec& c, const std::string& path,
                const std::vector<std::pair<std::string, std::string>>& provenance);
Codec load_codec(const std::string& path);

// read back arbitrary manifest keys (empty string when missing)
std::string manifest_value(const std::string& model_path, const std::string& key);

}  // namespace difflab
