#pragma once

// Model variants and the experiment configuration.

#include "hmgp/common.hpp"
#include "hmgp/optimizer.hpp"

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

namespace hmgp {

enum class Variant { MGplvm, HmGplvm, MSimGp, HmSimGp, MRSimGp, HmRSimGp };

enum class HarmonizationKind {
    FNorm,
    L21,
    Trace,
    /// H_c = constant; an uninformative prior, kept for equivalence checks.
    Constant,
};

enum class InitMethod { Cca, Pca, Random };

inline const char *to_string(Variant v) {
    switch (v) {
        case Variant::MGplvm: return "mGPLVM";
        case Variant::HmGplvm: return "hmGPLVM";
        case Variant::MSimGp: return "m-SimGP";
        case Variant::HmSimGp: return "hm-SimGP";
        case Variant::MRSimGp: return "m-RSimGP";
        case Variant::HmRSimGp: return "hm-RSimGP";
    }
    return "?";
}

inline const char *to_string(HarmonizationKind k) {
    switch (k) {
        case HarmonizationKind::FNorm: return "fnorm";
        case HarmonizationKind::L21: return "l21";
        case HarmonizationKind::Trace: return "trace";
        case HarmonizationKind::Constant: return "constant";
    }
    return "?";
}

inline const char *to_string(InitMethod m) {
    switch (m) {
        case InitMethod::Cca: return "cca";
        case InitMethod::Pca: return "pca";
        case InitMethod::Random: return "random";
    }
    return "?";
}

inline std::string lowercase(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

inline Variant parse_variant(const std::string &s) {
    const std::string l = lowercase(s);
    if (l == "mgplvm") return Variant::MGplvm;
    if (l == "hmgplvm") return Variant::HmGplvm;
    if (l == "m-simgp") return Variant::MSimGp;
    if (l == "hm-simgp") return Variant::HmSimGp;
    if (l == "m-rsimgp") return Variant::MRSimGp;
    if (l == "hm-rsimgp") return Variant::HmRSimGp;
    throw ConfigError("unknown variant '" + s + "'");
}

inline HarmonizationKind parse_harmonization(const std::string &s) {
    const std::string l = lowercase(s);
    if (l == "fnorm" || l == "f-norm" || l == "f") return HarmonizationKind::FNorm;
    if (l == "l21" || l == "l21-norm" || l == "l2,1") return HarmonizationKind::L21;
    if (l == "trace" || l == "tr") return HarmonizationKind::Trace;
    throw ConfigError("unknown harmonization '" + s + "'");
}

inline InitMethod parse_init(const std::string &s) {
    const std::string l = lowercase(s);
    if (l == "cca") return InitMethod::Cca;
    if (l == "pca") return InitMethod::Pca;
    if (l == "random") return InitMethod::Random;
    throw ConfigError("unknown init '" + s + "'");
}

inline ActivePolicy parse_active_policy(const std::string &s) {
    const std::string l = lowercase(s);
    if (l == "random") return ActivePolicy::Random;
    if (l == "farthest" || l == "farthest-point") return ActivePolicy::FarthestPoint;
    throw ConfigError("unknown active_policy '" + s + "'");
}

inline bool is_harmonized(Variant v) {
    return v == Variant::HmGplvm || v == Variant::HmSimGp || v == Variant::HmRSimGp;
}
inline bool uses_similarity(Variant v) { return v != Variant::MGplvm && v != Variant::HmGplvm; }
inline bool uses_semantics(Variant v) { return v == Variant::MRSimGp || v == Variant::HmRSimGp; }
inline bool has_gaussian_prior_slot(Variant v) { return !is_harmonized(v); }

/// The baseline a harmonized variant extends.
inline Variant baseline_of(Variant v) {
    switch (v) {
        case Variant::HmGplvm: return Variant::MGplvm;
        case Variant::HmSimGp: return Variant::MSimGp;
        case Variant::HmRSimGp: return Variant::MRSimGp;
        default: return v;
    }
}

struct HarmonizationSpec {
    HarmonizationKind kind = HarmonizationKind::Trace;
    /// One weight per modality, or a single weight shared by all.
    std::vector<double> weights{1.0};
    double constant_value = 0.0;

    [[nodiscard]] double weight(std::size_t modality) const {
        return weights.size() == 1 ? weights.front() : weights.at(modality);
    }

    void validate() const {
        if (weights.empty()) throw ConfigError("mu: at least one harmonization weight is required");
        for (double w : weights) {
            // mu = 0 is accepted so that sweeps can include the trivial-prior end point.
            if (!std::isfinite(w) || w < 0.0) throw ConfigError("mu must be finite and >= 0");
        }
    }
};

struct ModelConfig {
    Variant variant = Variant::HmSimGp;
    std::optional<HarmonizationSpec> harmonization;

    double lambda_similar = 1.0;
    double lambda_dissimilar = 1.0;
    /// Upper bound on the number of similar (and separately dissimilar) pairs
    /// drawn from labels.
    std::size_t pair_budget = 20000;

    /// Gaussian prior 0.5 |X|_F^2 for the non-harmonized baselines.
    bool latent_prior = true;

    Index latent_dim = 8;          // q
    Index active_set_size = 100;   // M
    double gamma_x = 1.0;
    std::vector<double> feature_gammas;  // empty: median heuristic per modality
    InitMethod init = InitMethod::Cca;
    double initial_noise_variance = 0.01;

    OptimOptions optim{};  // max_iters: SCG iterations per active-set rotation
    int epochs = 5;
    ActivePolicy active_policy = ActivePolicy::Random;

    int infer_iters = 100;
    int infer_starts = 1;
    bool infer_full_set = false;

    [[nodiscard]] bool gaussian_prior_active() const { return has_gaussian_prior_slot(variant) && latent_prior; }

    void validate() const {
        if (latent_dim < 1) throw ConfigError("q must be >= 1");
        if (active_set_size < 1) throw ConfigError("M must be >= 1");
        if (!(gamma_x > 0.0)) throw ConfigError("gamma_x must be > 0");
        for (double g : feature_gammas) {
            if (!(g > 0.0)) throw ConfigError("feature gammas must be > 0");
        }
        if (!(lambda_similar >= 0.0) || !(lambda_dissimilar >= 0.0)) throw ConfigError("lambda must be >= 0");
        if (!(initial_noise_variance > 0.0)) throw ConfigError("initial_noise_variance must be > 0");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (infer_iters < 1 || infer_starts < 1) throw ConfigError("infer_iters and infer_starts must be >= 1");
        optim.validate();
        if (is_harmonized(variant)) {
            if (!harmonization) throw ConfigError("variant " + std::string(to_string(variant)) + " requires harmonization");
            harmonization->validate();
        } else if (harmonization) {
            throw ConfigError("variant " + std::string(to_string(variant)) + " takes no harmonization");
        }
    }
};

}  // namespace hmgp
