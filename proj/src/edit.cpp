#include "difflab/edit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <string>

#include "difflab/config.hpp"
#include "difflab/optim.hpp"
#include "difflab/rng.hpp"

namespace difflab {

namespace {

void check_edit_config(const EditConfig& cfg) {
    if (!(cfg.l_frac > 0.0 && cfg.l_frac <= 1.0)) {
        throw TensorError("EditConfig: l_frac must lie in (0, 1], got " +
                          std::to_string(cfg.l_frac));
    }
    if (cfg.gamma < 0.0) throw TensorError("EditConfig: gamma must be >= 0");
    if (cfg.steps < 1) throw TensorError("EditConfig: steps must be >= 1");
    if (cfg.n_tokens < 1) throw TensorError("EditConfig: n_tokens must be >= 1");
}

// Keeps every model parameter out of the optimization: gradients are switched
// off up front, and the destructor restores the original flags even when
// training throws. Value/gradient integrity is checked explicitly.
class FreezeGuard {
  public:
    explicit FreezeGuard(std::vector<Tensor> params) : params_(std::move(params)) {
        for (Tensor& p : params_) {
            flags_.push_back(p.requires_grad());
            values_.push_back(p.values());
            p.set_requires_grad(false);
            if (p.has_grad()) p.zero_grad();
        }
    }

    ~FreezeGuard() {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            params_[i].set_requires_grad(flags_[i]);
        }
    }

    void check_no_gradient() const {
        for (const Tensor& p : params_) {
            if (!p.has_grad()) continue;
            for (double g : p.grad()) {
                if (g != 0.0) {
                    throw TensorError(
                        "learn_embeddings: frozen model parameter received a "
                        "gradient");
                }
            }
        }
    }

    void check_unchanged() const {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (params_[i].values() != values_[i]) {
                throw TensorError(
                    "learn_embeddings: frozen model parameter value changed");
            }
        }
    }

  private:
    std::vector<Tensor> params_;
    std::vector<bool> flags_;
    std::vector<std::vector<double>> values_;
};

Tensor encode_batch(const Codec& codec, const Tensor& x) {
    Tape tape;
    return codec_encode(codec, tape, x).detach();
}

Tensor one_hot_rows(long n, int n_classes, int target) {
    Tensor t = Tensor::zeros({n, n_classes});
    for (long i = 0; i < n; ++i) {
        t.values()[static_cast<std::size_t>(i * n_classes + target)] = 1.0;
    }
    return t;
}

}  // namespace

int noise_level(const EditConfig& cfg, const NoiseSchedule& s) {
    check_edit_config(cfg);
    const int level = static_cast<int>(
        std::lround(cfg.l_frac * static_cast<double>(s.total_steps)));
    return std::max(1, level);
}

LearnedEmbeddings learn_embeddings(const std::string& attr_name, const Tensor& data,
                                   const Tensor& heldout_data,
                                   const std::vector<int>& heldout_labels,
                                   const DenoiserModel& den, const ClassifierModel& cls,
                                   const Codec& codec, const NoiseSchedule& s,
                                   const EditConfig& cfg, int iters, int batch) {
    check_edit_config(cfg);
    if (data.rows() < 1) throw TensorError("learn_embeddings: empty dataset");
    if (batch < 1 || batch > data.rows()) {
        throw TensorError("learn_embeddings: batch " + std::to_string(batch) +
                          " outside [1, " + std::to_string(data.rows()) + "]");
    }
    if (iters < 0) throw TensorError("learn_embeddings: iters must be >= 0");

    const auto start_time = std::chrono::steady_clock::now();
    const int k = cls.cfg.n_classes;
    const int cond_dim = den.cfg.condition_dim;
    const int level = noise_level(cfg, s);
    Rng rng(cfg.seed);

    // one token matrix per class, started as small jitter around the null row
    LearnedEmbeddings result;
    for (int a = 0; a < k; ++a) {
        Tensor tokens = Tensor::zeros({cfg.n_tokens, cond_dim}, true);
        for (int r = 0; r < cfg.n_tokens; ++r) {
            for (int c = 0; c < cond_dim; ++c) {
                tokens.values()[static_cast<std::size_t>(r * cond_dim + c)] =
                    den.null_embedding.at(0, c) + 0.02 * rng.normal();
            }
        }
        result.embeddings.push_back(
            {attr_name + ":" + std::to_string(a), a, tokens});
    }

    std::vector<Tensor> frozen = den.params();
    for (const Tensor& p : cls.params()) frozen.push_back(p);
    for (const Tensor& p : codec.params()) frozen.push_back(p);
    FreezeGuard guard(std::move(frozen));

    std::vector<AdamW> opts;
    opts.reserve(static_cast<std::size_t>(k));
    for (int a = 0; a < k; ++a) {
        opts.emplace_back(std::vector<Tensor>{result.embeddings[a].tokens},
                          AdamW::Options{cfg.lr});
    }

    Tensor latents = encode_batch(codec, data);
    const long d = latents.cols();
    std::vector<long> order(static_cast<std::size_t>(latents.rows()));
    std::iota(order.begin(), order.end(), 0L);

    for (int it = 0; it < iters; ++it) {
        rng.shuffle(order);
        std::vector<long> idx(order.begin(), order.begin() + batch);

        Tensor z0 = Tensor::zeros({static_cast<long>(batch), d});
        for (long i = 0; i < batch; ++i) {
            for (long j = 0; j < d; ++j) {
                z0.values()[static_cast<std::size_t>(i * d + j)] =
                    latents.at(idx[static_cast<std::size_t>(i)], j);
            }
        }
        Tensor eps = Tensor::zeros({static_cast<long>(batch), d});
        for (double& v : eps.values()) v = rng.normal();

        // the noisy latent and the unconditional prediction are shared by all
        // class embeddings; neither depends on the trainable tokens
        Tensor z_l;
        Tensor eps_u;
        {
            Tape pre;
            z_l = forward_noise(pre, z0, level, eps, s).detach();
            eps_u = denoiser_eval(den, pre, z_l, level, nullptr).detach();
        }

        double edit_sum = 0.0;
        double rec_sum = 0.0;
        double combined_sum = 0.0;
        for (int a = 0; a < k; ++a) {
            Tape tape;
            Tensor eps_c =
                denoiser_eval(den, tape, z_l, level, &result.embeddings[a].tokens);
            Tensor eps_tilde = cfg_combine(tape, eps_u, eps_c, cfg.lambda);
            Tensor z0_hat = predict_x0(tape, z_l, eps_tilde, level, s);
            Tensor x_hat = codec_decode(codec, tape, z0_hat);
            Tensor edit_l = tape.mse(classifier_logits(cls, tape, x_hat),
                                     one_hot_rows(batch, k, a));
            Tensor rec_l = tape.mse(z0_hat, z0);
            Tensor combined = tape.add_scaled(edit_l, rec_l, cfg.gamma);
            if (!std::isfinite(combined.value())) {
                throw TensorError("learn_embeddings: loss diverged (not finite) at "
                                  "iteration " + std::to_string(it));
            }
            edit_sum += edit_l.value();
            rec_sum += rec_l.value();
            combined_sum += combined.value();

            opts[static_cast<std::size_t>(a)].zero_grad();
            tape.backward(combined);
            opts[static_cast<std::size_t>(a)].step();
        }
        guard.check_no_gradient();
        result.report.edit_loss.push_back(edit_sum / k);
        result.report.rec_loss.push_back(rec_sum / k);
        result.report.combined_loss.push_back(combined_sum / k);
    }

    guard.check_unchanged();

    if (heldout_data.defined() && heldout_data.rows() > 0) {
        if (static_cast<long>(heldout_labels.size()) != heldout_data.rows()) {
            throw TensorError("learn_embeddings: held-out labels do not match rows");
        }
        long tried = 0;
        long flipped = 0;
        for (int target = 0; target < k; ++target) {
            // gather held-out rows whose class differs from the target
            std::vector<long> rows_idx;
            for (long i = 0; i < heldout_data.rows(); ++i) {
                if (heldout_labels[static_cast<std::size_t>(i)] != target) {
                    rows_idx.push_back(i);
                }
                if (rows_idx.size() == 32) break;
            }
            if (rows_idx.empty()) continue;
            Tensor src = Tensor::zeros({static_cast<long>(rows_idx.size()),
                                        heldout_data.cols()});
            for (std::size_t i = 0; i < rows_idx.size(); ++i) {
                for (long j = 0; j < heldout_data.cols(); ++j) {
                    src.values()[i * static_cast<std::size_t>(heldout_data.cols()) +
                                 static_cast<std::size_t>(j)] =
                        heldout_data.at(rows_idx[i], j);
                }
            }
            Tensor edited = edit(src, result.embeddings[static_cast<std::size_t>(target)],
                                 cfg, den, codec, s);
            Tape tape;
            Tensor logits = classifier_logits(cls, tape, edited);
            for (long i = 0; i < edited.rows(); ++i) {
                int best = 0;
                for (int j = 1; j < k; ++j) {
                    if (logits.at(i, j) > logits.at(i, best)) best = j;
                }
                ++tried;
                if (best == target) ++flipped;
            }
        }
        if (tried > 0) {
            result.report.heldout_success =
                static_cast<double>(flipped) / static_cast<double>(tried);
        }
    }

    result.report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time)
            .count();
    return result;
}

Tensor edit(const Tensor& x, const SemanticEmbedding& e, const EditConfig& cfg,
            const DenoiserModel& den, const Codec& codec, const NoiseSchedule& s) {
    check_edit_config(cfg);
    const int level = noise_level(cfg, s);
    Tensor z0 = encode_batch(codec, x);
    Tensor z_l = invert_loop({z0, 0}, den, level, cfg.steps, s);
    GuidanceSpec g{cfg.lambda, cfg.window_start, cfg.window_stop, &e.tokens};
    Tensor z0_hat = sample_loop({z_l, level}, den, g, cfg.steps, s);
    Tape tape;
    return codec_decode(codec, tape, z0_hat).detach();
}

Tensor edit_single_step(const Tensor& x, const SemanticEmbedding& e,
                        const EditConfig& cfg, const DenoiserModel& den,
                        const Codec& codec, const NoiseSchedule& s) {
    check_edit_config(cfg);
    const int level = noise_level(cfg, s);
    Tensor z0 = encode_batch(codec, x);
    Tensor z_l = invert_loop({z0, 0}, den, level, cfg.steps, s);
    GuidanceSpec g{cfg.lambda, cfg.window_start, cfg.window_stop, &e.tokens};
    Tensor z0_hat =
        sample_loop({z_l, level}, den, g, cfg.steps, s, GuidedSteps::kFirstOnly);
    Tape tape;
    return codec_decode(codec, tape, z0_hat).detach();
}

SemanticEmbedding concat_embeddings(const std::vector<SemanticEmbedding>& parts) {
    if (parts.empty()) throw TensorError("concat_embeddings: no embeddings given");
    const long cond_dim = parts[0].tokens.cols();
    for (const SemanticEmbedding& p : parts) {
        if (p.tokens.cols() != cond_dim) {
            throw TensorError("concat_embeddings: token width mismatch (" +
                              std::to_string(p.tokens.cols()) + " vs " +
                              std::to_string(cond_dim) + ")");
        }
    }
    if (parts.size() == 1) return parts[0];

    // canonical order makes the result independent of the caller's ordering,
    // so pooled conditioning is permutation-invariant bit for bit
    std::vector<const SemanticEmbedding*> sorted;
    for (const SemanticEmbedding& p : parts) sorted.push_back(&p);
    std::sort(sorted.begin(), sorted.end(),
              [](const SemanticEmbedding* a, const SemanticEmbedding* b) {
                  if (a->name != b->name) return a->name < b->name;
                  return a->class_id < b->class_id;
              });

    SemanticEmbedding out;
    long total_rows = 0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        out.name += (i == 0 ? "" : "+") + sorted[i]->name;
        total_rows += sorted[i]->tokens.rows();
    }
    out.class_id = -1;
    out.tokens = Tensor::zeros({total_rows, cond_dim});
    std::size_t at = 0;
    for (const SemanticEmbedding* p : sorted) {
        const std::vector<double>& src = p->tokens.values();
        std::copy(src.begin(), src.end(), out.tokens.values().begin() + at);
        at += src.size();
    }
    return out;
}

std::vector<Tensor> interpolate_scale(const Tensor& x, const SemanticEmbedding& e,
                                      const std::vector<double>& lambdas,
                                      const EditConfig& cfg, const DenoiserModel& den,
                                      const Codec& codec, const NoiseSchedule& s) {
    check_edit_config(cfg);
    if (lambdas.empty()) {
        throw TensorError("interpolate_scale: need at least one guidance scale");
    }
    for (double l : lambdas) {
        if (!std::isfinite(l)) {
            throw TensorError("interpolate_scale: non-finite guidance scale");
        }
    }
    const int level = noise_level(cfg, s);
    Tensor z0 = encode_batch(codec, x);
    Tensor z_l = invert_loop({z0, 0}, den, level, cfg.steps, s);

    std::vector<Tensor> out;
    out.reserve(lambdas.size());
    for (double l : lambdas) {
        GuidanceSpec g{l, cfg.window_start, cfg.window_stop, &e.tokens};
        Tensor z0_hat = sample_loop({z_l, level}, den, g, cfg.steps, s);
        Tape tape;
        out.push_back(codec_decode(codec, tape, z0_hat).detach());
    }
    return out;
}

void save_embedding(const SemanticEmbedding& e, const std::string& path,
                    const std::vector<std::pair<std::string, std::string>>& provenance) {
    save_params(path, {{"tokens", e.tokens}});
    Config manifest;
    manifest.set_str("embedding", "name", e.name);
    manifest.set_int("embedding", "class_id", e.class_id);
    manifest.set_int("embedding", "n_tokens", e.tokens.rows());
    manifest.set_int("embedding", "condition_dim", e.tokens.cols());
    for (const auto& kv : provenance) {
        manifest.set_str("provenance", kv.first, kv.second);
    }
    manifest.save(path + ".meta");
}

SemanticEmbedding load_embedding(const std::string& path) {
    // read the payload first so a missing artifact is reported by its own
    // path, not by the sidecar's
    NamedParams params = load_params(path);
    Config meta = Config::load(path + ".meta");
    if (params.size() != 1 || params[0].first != "tokens") {
        throw TensorError("load_embedding: " + path +
                          " is not an embedding container");
    }
    SemanticEmbedding e;
    e.name = meta.get_str("embedding", "name");
    e.class_id = static_cast<int>(meta.get_int("embedding", "class_id"));
    e.tokens = params[0].second;
    if (e.tokens.rows() != meta.get_int("embedding", "n_tokens") ||
        e.tokens.cols() != meta.get_int("embedding", "condition_dim")) {
        throw TensorError("load_embedding: manifest shape disagrees with payload");
    }
    return e;
}

}  // namespace difflab
