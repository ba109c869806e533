#pragma once

#include <string>
#include <vector>

#include "difflab/diffusion.hpp"
#include "difflab/models.hpp"
#include "difflab/schedule.hpp"
#include "difflab/tensor.hpp"

namespace difflab {

// Learned condition tokens standing for one class of one attribute (or, after
// concatenation, a combination of attributes).
struct SemanticEmbedding {
    std::string name;     // e.g. "stripe:1" or "stripe:1+shape:0"
    int class_id = -1;    // -1 for composite embeddings
    Tensor tokens;        // (n_tokens, condition_dim)
};

struct EditConfig {
    double lambda = 10.0;      // guidance scale
    double l_frac = 0.4;       // noising depth as a fraction of total_steps
    double gamma = 0.1;        // latent reconstruction weight
    double window_start = 1.0; // guidance window, fractions of total_steps
    double window_stop = 0.0;
    int steps = 50;            // DDIM step count for inversion and sampling
    int n_tokens = 4;          // tokens per learned embedding
    double lr = 1e-2;          // embedding optimizer step size
    unsigned long long seed = 1;
};

struct EmbeddingTrainReport {
    // per-iteration means over the K class embeddings
    std::vector<double> edit_loss;
    std::vector<double> rec_loss;
    std::vector<double> combined_loss;
    double heldout_success = -1.0;  // -1 when no held-out data was given
    double wall_seconds = 0.0;
};

struct LearnedEmbeddings {
    std::vector<SemanticEmbedding> embeddings;  // one per class, index == class_id
    EmbeddingTrainReport report;
};

// integer noise level L = round(l_frac * T), at least 1
int noise_level(const EditConfig& cfg, const NoiseSchedule& s);

// Optimize one condition embedding per class of the attribute recognized by
// `cls`: noise clean latents to level L, form the guided single-step clean
// estimate, and descend the classifier loss toward the target class plus
// gamma times the latent reconstruction error. All model parameters stay
// frozen; embeddings are the only trainable state. When heldout_data is
// nonempty the report carries an edit-success rate measured with full edits
// toward each opposite class.
LearnedEmbeddings learn_embeddings(const std::string& attr_name, const Tensor& data,
                                   const Tensor& heldout_data,
                                   const std::vector<int>& heldout_labels,
                                   const DenoiserModel& den, const ClassifierModel& cls,
                                   const Codec& codec, const NoiseSchedule& s,
                                   const EditConfig& cfg, int iters, int batch);

// encode -> invert to L -> guided sampling back to 0 -> decode
Tensor edit(const Tensor& x, const SemanticEmbedding& e, const EditConfig& cfg,
            const DenoiserModel& den, const Codec& codec, const NoiseSchedule& s);

// as edit, but the condition is applied only at the first step after L
Tensor edit_single_step(const Tensor& x, const SemanticEmbedding& e,
                        const EditConfig& cfg, const DenoiserModel& den,
                        const Codec& codec, const NoiseSchedule& s);

// Token concatenation with a canonical part order, so any permutation of the
// inputs produces a bit-identical embedding (and therefore identical edits).
SemanticEmbedding concat_embeddings(const std::vector<SemanticEmbedding>& parts);

// one edit per lambda, sharing a single inversion trajectory
std::vector<Tensor> interpolate_scale(const Tensor& x, const SemanticEmbedding& e,
                                      const std::vector<double>& lambdas,
                                      const EditConfig& cfg, const DenoiserModel& den,
                                      const Codec& codec, const NoiseSchedule& s);

// parameter-container persistence with class metadata in the sidecar manifest
void save_embedding(const SemanticEmbedding& e, const std::string& path,
                    const std::vector<std::pair<std::string, std::string>>& provenance);
SemanticEmbedding load_embedding(const std::string& path);

}  // namespace difflab
