#pragma once

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hmgp/dataio.hpp"
#include "hmgp/evaluation.hpp"
#include "hmgp/model.hpp"

namespace hmgp {

enum ExitCode : int { ExitOk = 0, ExitUsage = 1, ExitData = 2, ExitNumerical = 3 };

// ---------------------------------------------------------------------------
// Reusable pipeline pieces (also used by the tests)

/// A random, well-conditioned objective instance for gradient checking.
struct GradcheckInstance {
    ModelConfig cfg;
    ObjectiveInputs inputs;
    Vector params;
};

inline GradcheckInstance make_gradcheck_instance(Variant variant, HarmonizationKind kind, Index n, Index q,
                                                 std::uint64_t seed, Index modalities = 2) {
    std::mt19937_64 rng(seed * 2654435761ULL + 11);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(-0.5, 0.5);
    auto randn = [&](Index r, Index c) {
        Matrix m(r, c);
        for (Index i = 0; i < r; ++i)
            for (Index j = 0; j < c; ++j) m(i, j) = normal(rng);
        return m;
    };

    GradcheckInstance g;
    g.cfg.variant = variant;
    g.cfg.latent_dim = q;
    if (is_harmonized(variant)) {
        HarmonizationSpec h;
        h.kind = kind;
        h.weights = {1.0 + unif(rng)};
        g.cfg.harmonization = h;
    }
    g.inputs.similarity_targets = uses_similarity(variant);
    for (Index c = 0; c < modalities; ++c) {
        const Matrix y = randn(n, 3 + c);
        if (g.inputs.similarity_targets) {
            g.inputs.targets.push_back(feature_similarity(y, median_sq_distance(y)).values);
        } else {
            g.inputs.targets.push_back(y);
        }
    }
    if (uses_semantics(variant)) {
        // Alternate pairs between the two relations; each pair is used once.
        for (Index i = 0; i + 1 < n; i += 2) {
            if ((i / 2) % 2 == 0) {
                g.inputs.semantics.similar.emplace_back(i, i + 1);
            } else {
                g.inputs.semantics.dissimilar.emplace_back(i, i + 1);
            }
        }
        // Close dissimilar pairs keep the hinge active.
        g.inputs.semantics.dissimilar.emplace_back(0, n - 1);
    }
    const LatentMatrix x = 0.7 * randn(n, q);
    std::vector<RbfHyperparams> thetas;
    for (Index c = 0; c < modalities; ++c) {
        RbfHyperparams h;
        h.log_signal_variance = unif(rng);
        h.log_lengthscale = unif(rng);
        h.log_bias_variance = std::log(0.1) + unif(rng);
        h.log_noise_variance = std::log(0.1) + unif(rng);
        thetas.push_back(h);
    }
    g.params = ParamLayout{n, q, modalities}.pack(x, thetas);
    return g;
}

/// Train on the bundle's training split, embed the test split of each modality
/// and evaluate cross-modal retrieval (modality 1 -> 2 and 2 -> 1).
struct PipelineResult {
    TrainResult trained;
    LatentMatrix latents_a;
    LatentMatrix latents_b;
    MetricReport metrics;
};

inline PipelineResult train_and_evaluate(const DatasetBundle &bundle, const ModelConfig &cfg, int threads = 1,
                                         const TrainOptions &opts = {}) {
    if (!bundle.labels) throw DataError("retrieval evaluation needs labels");
    if (bundle.split.test.empty()) throw DataError("retrieval evaluation needs a non-empty test split");
    PipelineResult r{train(bundle, cfg, opts), {}, {}, {}};
    r.latents_a = embed_test_set(select_rows(bundle.modalities[0], bundle.split.test), 0, r.trained.model, threads);
    r.latents_b = embed_test_set(select_rows(bundle.modalities[1], bundle.split.test), 1, r.trained.model, threads);
    r.metrics = evaluate_retrieval(r.latents_a, r.latents_b, select_labels(*bundle.labels, bundle.split.test));
    return r;
}

inline std::vector<double> parse_grid(const std::string &text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception &) {
            throw ConfigError("bad grid value '" + item + "'");
        }
        if (used != item.size()) throw ConfigError("bad grid value '" + item + "'");
        out.push_back(v);
    }
    if (out.empty()) throw ConfigError("empty grid");
    return out;
}

// ---------------------------------------------------------------------------
// Command implementations

namespace cli_detail {

inline std::string config_help() {
    std::ostringstream os;
    os << "Config keys (JSON object):\n";
    for (const auto &[key, doc] : config_key_docs()) os << "  " << key << ": " << doc << "\n";
    return os.str();
}

inline ModelConfig config_with_seed(const std::string &path, const std::optional<std::uint64_t> &seed) {
    ModelConfig cfg = load_config(path);
    if (seed) cfg.optim.seed = *seed;
    return cfg;
}

inline void write_json(const nlohmann::json &j, const std::filesystem::path &p) { write_file_atomic(p, j.dump(2) + "\n"); }

inline void ensure_dir(const std::filesystem::path &p) {
    std::error_code ec;
    std::filesystem::create_directories(p, ec);
    if (ec) throw DataError("cannot create directory " + p.string() + ": " + ec.message());
}

inline std::string csv_of(const std::vector<double> &v) {
    std::ostringstream os;
    os.precision(17);
    for (double x : v) os << x << "\n";
    return os.str();
}

inline std::string pr_csv(const PrCurve &c) {
    std::ostringstream os;
    write_pr_csv(c, os);
    return os.str();
}

inline std::string rank_csv(const RankSamples &s) {
    std::ostringstream os;
    os.precision(17);
    os << "rank,precision,recall\n";
    for (std::size_t r = 0; r < s.precision.size(); ++r) os << r + 1 << ',' << s.precision[r] << ',' << s.recall[r] << '\n';
    return os.str();
}

}  // namespace cli_detail

/// Entry point shared by the executable and the tests.
inline int run_cli(int argc, const char *const *argv, std::ostream &out = std::cout, std::ostream &err = std::cerr) {
    using namespace cli_detail;
    CLI::App app{"Harmonized multimodal GPLVM training, inference and retrieval evaluation"};
    app.require_subcommand(1);
    app.footer(config_help());

    int threads = 1;
    std::optional<std::uint64_t> seed;
    auto add_common = [&](CLI::App *sub) {
        sub->add_option("--seed", seed, "Seed for every random choice (overrides the config seed)");
        sub->add_option("--threads", threads, "Worker thread cap")->check(CLI::PositiveNumber);
        sub->footer(config_help());
    };

    // synth
    auto *synth = app.add_subcommand("synth", "Generate a synthetic two-modality dataset");
    SyntheticOptions so;
    std::string synth_out;
    synth->add_option("--out", synth_out, "Output dataset directory")->required();
    synth->add_option("--n", so.n, "Number of objects");
    synth->add_option("--q", so.q, "Ground-truth latent dimension");
    synth->add_option("--d1", so.d1, "Feature dimension of modality 1");
    synth->add_option("--d2", so.d2, "Feature dimension of modality 2");
    synth->add_option("--noise", so.noise, "Observation noise standard deviation");
    synth->add_option("--classes", so.num_classes, "Number of label classes");
    synth->add_option("--n-test", so.n_test, "Size of the held-out test split");
    synth->add_flag("--identical-maps", so.identical_maps, "Use the same map for both modalities");
    add_common(synth);

    // train
    auto *trn = app.add_subcommand("train", "Train a model on a dataset directory");
    std::string cfg_path, data_path, model_path, trace_path, pairs_path;
    trn->add_option("--config", cfg_path, "Config JSON")->required();
    trn->add_option("--data", data_path, "Dataset directory")->required();
    trn->add_option("--out", model_path, "Output model file")->required();
    trn->add_option("--trace", trace_path, "Optimization trace CSV (default: <out>.trace.csv)");
    trn->add_option("--pairs", pairs_path, "Semantic pairs file ('s i j' / 'd i j' per line)");
    add_common(trn);

    // embed
    auto *emb = app.add_subcommand("embed", "Infer latent positions for a feature matrix");
    std::string emb_model, emb_data, emb_out;
    int modality = 1;
    emb->add_option("--model", emb_model, "Model file")->required();
    emb->add_option("--data", emb_data, "Feature matrix (.mtxb or .csv)")->required();
    emb->add_option("--modality", modality, "Modality of the features (1-based)")->required();
    emb->add_option("--out", emb_out, "Output latent matrix")->required();
    add_common(emb);

    // retrieve-eval
    auto *ret = app.add_subcommand("retrieve-eval", "Cross-modal retrieval metrics for two paired latent sets");
    std::string lat_a, lat_b, labels_path, ret_out;
    ret->add_option("--latents-a", lat_a, "Latents of modality 1 queries (e.g. images)")->required();
    ret->add_option("--latents-b", lat_b, "Latents of modality 2 queries (e.g. texts)")->required();
    ret->add_option("--labels", labels_path, "Labels file, one line per row")->required();
    ret->add_option("--out", ret_out, "Output directory")->required();
    add_common(ret);

    // gradcheck
    auto *gc = app.add_subcommand("gradcheck", "Finite-difference check of the full objective gradient");
    std::string gc_variant = "hm-SimGP", gc_kind = "trace";
    Index gc_n = 12, gc_q = 2;
    double gc_step = 2e-5, gc_tol = 1e-5, gc_fault = 1.0;
    gc->add_option("--variant", gc_variant, "Model variant");
    gc->add_option("--harmonization", gc_kind, "fnorm | l21 | trace");
    gc->add_option("--n", gc_n, "Number of objects")->check(CLI::Range(Index{2}, Index{100000}));
    gc->add_option("--q", gc_q, "Latent dimension")->check(CLI::PositiveNumber);
    gc->add_option("--step", gc_step, "Finite-difference step")->check(CLI::PositiveNumber);
    gc->add_option("--tol", gc_tol, "Relative error threshold")->check(CLI::PositiveNumber);
    gc->add_option("--fault-scale", gc_fault, "Multiply the analytic gradient (fault injection)");
    add_common(gc);

    // sweep
    auto *sw = app.add_subcommand("sweep", "Retrieval mAP over a grid of mu and lambda");
    std::string sw_cfg, sw_data, sw_out, grid_mu = "", grid_lambda = "";
    sw->add_option("--config", sw_cfg, "Base config JSON")->required();
    sw->add_option("--data", sw_data, "Dataset directory with labels and a test split")->required();
    sw->add_option("--grid-mu", grid_mu, "Comma-separated mu values (default: config value)");
    sw->add_option("--grid-lambda", grid_lambda, "Comma-separated lambda values (default: config value)");
    sw->add_option("--out", sw_out, "Output CSV (mu,lambda,map_i2t,map_t2i,map_avg)")->required();
    add_common(sw);

    // diagnose
    auto *dg = app.add_subcommand("diagnose", "Kernel / latent-similarity divergence of a trained model");
    std::string dg_model, dg_baseline, dg_out;
    dg->add_option("--model", dg_model, "Model file")->required();
    dg->add_option("--baseline", dg_baseline, "Second model (e.g. mu = 0) for a paired comparison");
    dg->add_option("--out", dg_out, "Output directory")->required();
    add_common(dg);

    std::vector<std::string> args;
    for (int i = argc - 1; i > 0; --i) args.emplace_back(argv[i]);
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp &e) {
        out << app.help();
        return ExitOk;
    } catch (const CLI::CallForAllHelp &e) {
        out << app.help("", CLI::AppFormatMode::All);
        return ExitOk;
    } catch (const CLI::ParseError &e) {
        err << "error: " << e.what() << "\n\n";
        const auto subs = app.get_subcommands();
        err << (subs.empty() ? app.help() : subs.front()->help());
        return ExitUsage;
    }

    try {
        if (*synth) {
            if (seed) so.seed = *seed;
            const auto b = generate_synthetic(so);
            save_bundle(b, synth_out);
            out << "wrote " << synth_out << " (N = " << b.rows() << ", seed = " << so.seed << ")\n";
            return ExitOk;
        }

        if (*trn) {
            const ModelConfig cfg = config_with_seed(cfg_path, seed);
            const auto bundle = load_bundle(data_path);
            TrainOptions opts;
            if (!pairs_path.empty()) opts.pairs = decode_pairs(read_file(pairs_path));
            const auto res = train(bundle, cfg, opts);
            save_model(res.model, model_path);
            const std::string tp = trace_path.empty() ? model_path + ".trace.csv" : trace_path;
            std::ostringstream os;
            res.trace.write_csv(os);
            write_file_atomic(tp, os.str());
            out << "wrote " << model_path << " and " << tp << " (status " << to_string(res.trace.status)
                << ", seed " << cfg.optim.seed << ")\n";
            return ExitOk;
        }

        if (*emb) {
            const auto model = load_model(emb_model);
            if (modality < 1 || modality > model.modalities()) {
                throw DataError("modality must be in 1.." + std::to_string(model.modalities()));
            }
            const Matrix y = read_matrix(emb_data);
            LatentMatrix z;
            if (y.rows() == 0) {
                z = LatentMatrix(0, model.x.cols());
            } else {
                z = embed_test_set(y, modality - 1, model, threads);
            }
            write_matrix(z, emb_out);
            out << "wrote " << emb_out << " (" << z.rows() << " x " << z.cols() << ")\n";
            return ExitOk;
        }

        if (*ret) {
            const Matrix a = read_matrix(lat_a), b = read_matrix(lat_b);
            const auto labels = read_labels(labels_path);
            if (a.cols() != b.cols()) throw DataError("latent sets have different dimensions");
            const auto rep = evaluate_retrieval(a, b, labels);
            ensure_dir(ret_out);
            const std::filesystem::path dir(ret_out);
            auto j = rep.to_json();
            if (seed) j["seed"] = *seed;
            write_json(j, dir / "metrics.json");
            write_file_atomic(dir / "pr_i2t.csv", pr_csv(rep.a_to_b.pr));
            write_file_atomic(dir / "pr_t2i.csv", pr_csv(rep.b_to_a.pr));
            write_file_atomic(dir / "pr_raw_i2t.csv", rank_csv(rep.a_to_b.ranks));
            write_file_atomic(dir / "pr_raw_t2i.csv", rank_csv(rep.b_to_a.ranks));
            write_file_atomic(dir / "ap_i2t.csv", csv_of(rep.a_to_b.per_query_ap));
            write_file_atomic(dir / "ap_t2i.csv", csv_of(rep.b_to_a.per_query_ap));
            out << j.dump() << "\n";
            return ExitOk;
        }

        if (*gc) {
            const auto inst = make_gradcheck_instance(parse_variant(gc_variant), parse_harmonization(gc_kind), gc_n, gc_q,
                                                      seed.value_or(0));
            const ModelObjective obj(inst.cfg, inst.inputs);
            const auto chk = check_gradients([&](const Vector &p) { return obj.value(p).total; },
                                             [&](const Vector &p) { return Vector(gc_fault * obj.gradient(p)); },
                                             inst.params, gc_step);
            out << "max relative error " << chk.max_rel_error << " at coordinate " << chk.worst_index << " (analytic "
                << chk.analytic << ", numeric " << chk.numeric << ")\n";
            if (!(chk.max_rel_error < gc_tol)) {
                err << "gradient check failed: worst coordinate " << chk.worst_index << "\n";
                return ExitNumerical;
            }
            return ExitOk;
        }

        if (*sw) {
            const ModelConfig base = config_with_seed(sw_cfg, seed);
            const auto bundle = load_bundle(sw_data);
            std::vector<double> mus, lambdas;
            if (grid_mu.empty()) {
                mus.push_back(base.harmonization ? base.harmonization->weight(0) : 0.0);
            } else {
                mus = parse_grid(grid_mu);
            }
            lambdas = grid_lambda.empty() ? std::vector<double>{base.lambda_similar} : parse_grid(grid_lambda);
            std::ostringstream os;
            os.precision(17);
            os << "mu,lambda,map_i2t,map_t2i,map_avg\n";
            for (double mu : mus) {
                for (double lam : lambdas) {
                    ModelConfig cfg = base;
                    if (cfg.harmonization) {
                        cfg.harmonization->weights = {mu};
                    } else if (mu != 0.0) {
                        throw ConfigError("a non-zero mu grid needs a harmonized variant");
                    }
                    cfg.lambda_similar = cfg.lambda_dissimilar = lam;
                    const auto r = train_and_evaluate(bundle, cfg, threads);
                    os << mu << "," << lam << "," << r.metrics.a_to_b.map << "," << r.metrics.b_to_a.map << ","
                       << r.metrics.average() << "\n";
                    out << "mu " << mu << " lambda " << lam << " mAP " << r.metrics.average() << "\n";
                }
            }
            write_file_atomic(sw_out, os.str());
            return ExitOk;
        }

        if (*dg) {
            const auto model = load_model(dg_model);
            const auto rep = divergence_report(model);
            ensure_dir(dg_out);
            const std::filesystem::path dir(dg_out);
            auto j = rep.to_json();
            j["seed"] = model.seed;
            write_json(j, dir / "divergence.json");
            for (std::size_t c = 0; c < rep.modalities.size(); ++c) {
                write_matrix(rep.modalities[c].abs_difference, dir / ("absdiff" + std::to_string(c + 1) + ".mtxb"));
            }
            if (!dg_baseline.empty()) {
                const auto base = divergence_report(load_model(dg_baseline));
                if (base.modalities.size() != rep.modalities.size()) throw DataError("models have different modality counts");
                std::ostringstream os;
                os.precision(17);
                os << "modality,riemannian_model,riemannian_baseline,frobenius_model,frobenius_baseline\n";
                for (std::size_t c = 0; c < rep.modalities.size(); ++c) {
                    os << c + 1 << "," << rep.modalities[c].riemannian << "," << base.modalities[c].riemannian << ","
                       << rep.modalities[c].frobenius << "," << base.modalities[c].frobenius << "\n";
                }
                os << "total," << rep.total_riemannian() << "," << base.total_riemannian() << ","
                   << rep.total_frobenius() << "," << base.total_frobenius() << "\n";
                write_file_atomic(dir / "paired.csv", os.str());
            }
            out << j.dump() << "\n";
            return ExitOk;
        }
    } catch (const ConfigError &e) {
        err << "config error: " << e.what() << "\n";
        return ExitUsage;
    } catch (const NumericalError &e) {
        err << "numerical failure: " << e.what() << "\n";
        return ExitNumerical;
    } catch (const Error &e) {
        err << "data error: " << e.what() << "\n";
        return ExitData;
    } catch (const nlohmann::json::exception &e) {
        err << "data error: " << e.what() << "\n";
        return ExitData;
    } catch (const std::filesystem::filesystem_error &e) {
        err << "data error: " << e.what() << "\n";
        return ExitData;
    }
    return ExitUsage;
}

}  // namespace hmgp
