#pragma once

// Matrix and label files, experiment configuration, dataset bundles and the
// synthetic two-modality generator.

#include "hmgp/common.hpp"
#include "hmgp/config.hpp"

#include <json.hpp>

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace hmgp {

static_assert(std::endian::native == std::endian::little, "MTXB I/O assumes a little-endian host");

enum class MatrixFormat { Binary, Csv };

inline MatrixFormat format_from_path(const std::filesystem::path &p) {
    return p.extension() == ".csv" ? MatrixFormat::Csv : MatrixFormat::Binary;
}

namespace detail {

inline void put_u32(std::string &out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}

inline std::uint32_t get_u32(const char *p) {
    std::uint32_t v;
    std::memcpy(&v, p, 4);
    return v;
}

}  // namespace detail

/// Serializes to MTXB: "MTXB", u32 rows, u32 cols, rows*cols f64, all little-endian, row-major.
inline std::string encode_mtxb(const Eigen::Ref<const Matrix> &m) {
    if (m.rows() > 0xFFFFFFFFll || m.cols() > 0xFFFFFFFFll) throw DataError("matrix too large for MTXB");
    std::string out = "MTXB";
    detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
    out.reserve(out.size() + static_cast<std::size_t>(m.size()) * 8);
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) {
            const double v = m(i, j);
            char b[8];
            std::memcpy(b, &v, 8);
            out.append(b, 8);
        }
    }
    return out;
}

inline Matrix decode_mtxb(std::string_view bytes) {
    if (bytes.size() < 12) throw ParseError("MTXB: truncated header at byte " + std::to_string(bytes.size()));
    if (bytes.substr(0, 4) != "MTXB") throw ParseError("MTXB: bad magic at byte 0");
    const std::uint64_t rows = detail::get_u32(bytes.data() + 4);
    const std::uint64_t cols = detail::get_u32(bytes.data() + 8);
    const std::uint64_t expected = 12 + rows * cols * 8;
    if (bytes.size() != expected) {
        throw ParseError("MTXB: dimension mismatch, header " + std::to_string(rows) + "x" + std::to_string(cols) +
                         " needs " + std::to_string(expected) + " bytes, payload ends at byte " +
                         std::to_string(bytes.size()));
    }
    Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
    const char *p = bytes.data() + 12;
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) {
            double v;
            std::memcpy(&v, p, 8);
            if (!std::isfinite(v)) {
                throw ParseError("MTXB: non-finite entry at byte " + std::to_string(p - bytes.data()));
            }
            m(i, j) = v;
            p += 8;
        }
    }
    return m;
}

inline std::string read_file(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Writes via a temporary sibling and rename, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path &path, std::string_view bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            std::filesystem::remove(tmp);
            throw DataError("I/O failure writing " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

inline std::string encode_csv(const Eigen::Ref<const Matrix> &m) {
    std::string out;
    char buf[64];
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) {
            if (j) out.push_back(',');
            auto [end, ec] = std::to_chars(buf, buf + sizeof buf, m(i, j));
            out.append(buf, end);
        }
        out.push_back('\n');
    }
    return out;
}

inline Matrix decode_csv(std::string_view text) {
    std::vector<std::vector<double>> rows;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t eol = text.find('\n', pos);
        if (eol == std::string_view::npos) eol = text.size();
        std::string_view line = text.substr(pos, eol - pos);
        pos = eol + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) continue;
        std::vector<double> row;
        std::size_t f = 0;
        while (true) {
            std::size_t comma = line.find(',', f);
            std::string_view field = line.substr(f, comma == std::string_view::npos ? line.size() - f : comma - f);
            while (!field.empty() && field.front() == ' ') field.remove_prefix(1);
            while (!field.empty() && field.back() == ' ') field.remove_suffix(1);
            double v = 0.0;
            auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
            if (ec != std::errc() || ptr != field.data() + field.size() || field.empty()) {
                throw ParseError("CSV: cannot parse field '" + std::string(field) + "' on line " + std::to_string(line_no));
            }
            if (!std::isfinite(v)) throw ParseError("CSV: non-finite entry on line " + std::to_string(line_no));
            row.push_back(v);
            if (comma == std::string_view::npos) break;
            f = comma + 1;
        }
        if (!rows.empty() && row.size() != rows.front().size()) {
            throw ParseError("CSV: line " + std::to_string(line_no) + " has " + std::to_string(row.size()) +
                             " fields, expected " + std::to_string(rows.front().size()));
        }
        rows.push_back(std::move(row));
    }
    Matrix m(static_cast<Index>(rows.size()), rows.empty() ? 0 : static_cast<Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
    }
    return m;
}

inline Matrix read_matrix(const std::filesystem::path &path, MatrixFormat format) {
    const std::string bytes = read_file(path);
    return format == MatrixFormat::Binary ? decode_mtxb(bytes) : decode_csv(bytes);
}

inline Matrix read_matrix(const std::filesystem::path &path) { return read_matrix(path, format_from_path(path)); }

inline void write_matrix(const Eigen::Ref<const Matrix> &m, const std::filesystem::path &path, MatrixFormat format) {
    write_file_atomic(path, format == MatrixFormat::Binary ? encode_mtxb(m) : encode_csv(m));
}

inline void write_matrix(const Eigen::Ref<const Matrix> &m, const std::filesystem::path &path) {
    write_matrix(m, path, format_from_path(path));
}

// ---------------------------------------------------------------------------
// Labels

using LabelSet = std::vector<std::vector<int>>;

inline LabelSet decode_labels(std::string_view text) {
    LabelSet labels;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream ls(line);
        std::vector<int> ids;
        std::string tok;
        while (ls >> tok) {
            int v = -1;
            auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
            if (ec != std::errc() || ptr != tok.data() + tok.size() || v < 0) {
                throw ParseError("labels: bad label '" + tok + "' on line " + std::to_string(line_no));
            }
            ids.push_back(v);
        }
        if (ids.empty()) throw ParseError("labels: empty label set on line " + std::to_string(line_no));
        labels.push_back(std::move(ids));
    }
    return labels;
}

inline std::string encode_labels(const LabelSet &labels) {
    std::string out;
    for (const auto &ids : labels) {
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (k) out.push_back(' ');
            out += std::to_string(ids[k]);
        }
        out.push_back('\n');
    }
    return out;
}

inline LabelSet read_labels(const std::filesystem::path &p) { return decode_labels(read_file(p)); }
inline void write_labels(const LabelSet &l, const std::filesystem::path &p) { write_file_atomic(p, encode_labels(l)); }

inline LabelSet select_labels(const LabelSet &labels, const std::vector<Index> &idx) {
    LabelSet out;
    for (Index i : idx) out.push_back(labels.at(static_cast<std::size_t>(i)));
    return out;
}

// ---------------------------------------------------------------------------
// Dataset bundle

struct Split {
    std::vector<Index> train;
    std::vector<Index> test;
};

struct DatasetBundle {
    std::vector<FeatureMatrix> modalities;
    std::optional<LabelSet> labels;
    Split split;
    std::uint64_t split_seed = 0;
    /// Extra facts recorded by the generator (e.g. distance correlation).
    nlohmann::json meta = nlohmann::json::object();

    [[nodiscard]] Index rows() const { return modalities.empty() ? 0 : modalities.front().rows(); }

    /// Train indices, or every object when no split is defined.
    [[nodiscard]] std::vector<Index> train_indices() const {
        if (!split.train.empty()) return split.train;
        std::vector<Index> all(static_cast<std::size_t>(rows()));
        for (Index i = 0; i < rows(); ++i) all[static_cast<std::size_t>(i)] = i;
        return all;
    }

    void validate() const {
        if (modalities.size() < 2) throw DataError("a dataset needs at least two modalities");
        const Index n = rows();
        if (n < 2) throw DataError("a dataset needs at least two objects");
        for (std::size_t c = 0; c < modalities.size(); ++c) {
            if (modalities[c].rows() != n) {
                throw DataError("modality " + std::to_string(c + 1) + " has " + std::to_string(modalities[c].rows()) +
                                " rows, expected " + std::to_string(n));
            }
            if (modalities[c].cols() < 1) throw DataError("modality " + std::to_string(c + 1) + " has no columns");
            if (!modalities[c].allFinite()) throw DataError("modality " + std::to_string(c + 1) + " has non-finite values");
        }
        if (labels && static_cast<Index>(labels->size()) != n) {
            throw DataError("label count " + std::to_string(labels->size()) + " does not match N = " + std::to_string(n));
        }
        std::set<Index> seen;
        for (const auto *part : {&split.train, &split.test}) {
            for (Index i : *part) {
                if (i < 0 || i >= n) throw DataError("split index " + std::to_string(i) + " out of range");
                if (!seen.insert(i).second) throw DataError("split index " + std::to_string(i) + " appears twice");
            }
        }
    }
};

/// Seeded random partition of 0..n-1 into n - n_test train and n_test test indices (each sorted).
inline Split make_split(Index n, Index n_test, std::uint64_t seed) {
    if (n_test < 0 || n_test >= n) throw DataError("test size must be in [0, N)");
    std::vector<Index> perm(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
    std::mt19937_64 rng(seed ^ 0x5eed5eedULL);
    for (Index i = n - 1; i > 0; --i) {
        std::uniform_int_distribution<Index> pick(0, i);
        std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(pick(rng))]);
    }
    Split s;
    s.test.assign(perm.begin(), perm.begin() + n_test);
    s.train.assign(perm.begin() + n_test, perm.end());
    std::sort(s.test.begin(), s.test.end());
    std::sort(s.train.begin(), s.train.end());
    return s;
}

inline std::string encode_indices(const std::vector<Index> &idx) {
    std::string out;
    for (Index i : idx) out += std::to_string(i) + "\n";
    return out;
}

inline std::vector<Index> decode_indices(std::string_view text) {
    std::vector<Index> out;
    std::istringstream in{std::string(text)};
    long long v;
    while (in >> v) out.push_back(static_cast<Index>(v));
    if (!in.eof()) throw ParseError("index file: non-integer entry after " + std::to_string(out.size()) + " values");
    return out;
}

/// Bundle directory layout: bundle.json naming modality files (relative
/// paths), an optional labels file and optional train/test index files.
inline void save_bundle(const DatasetBundle &b, const std::filesystem::path &dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["schema_version"] = 1;
    manifest["modalities"] = nlohmann::json::array();
    for (std::size_t c = 0; c < b.modalities.size(); ++c) {
        const std::string name = "Y" + std::to_string(c + 1) + ".mtxb";
        write_matrix(b.modalities[c], dir / name, MatrixFormat::Binary);
        manifest["modalities"].push_back(name);
    }
    if (b.labels) {
        write_labels(*b.labels, dir / "labels.txt");
        manifest["labels"] = "labels.txt";
    }
    if (!b.split.train.empty() || !b.split.test.empty()) {
        write_file_atomic(dir / "train.txt", encode_indices(b.split.train));
        write_file_atomic(dir / "test.txt", encode_indices(b.split.test));
        manifest["train"] = "train.txt";
        manifest["test"] = "test.txt";
    }
    manifest["split_seed"] = b.split_seed;
    manifest["meta"] = b.meta;
    write_file_atomic(dir / "bundle.json", manifest.dump(2));
}

inline DatasetBundle load_bundle(const std::filesystem::path &dir) {
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_file(dir / "bundle.json"));
    } catch (const nlohmann::json::exception &e) {
        throw ParseError("bundle.json: " + std::string(e.what()));
    }
    DatasetBundle b;
    try {
        for (const auto &m : manifest.at("modalities")) b.modalities.push_back(read_matrix(dir / m.get<std::string>()));
        if (manifest.contains("labels")) b.labels = read_labels(dir / manifest["labels"].get<std::string>());
        if (manifest.contains("train")) b.split.train = decode_indices(read_file(dir / manifest["train"].get<std::string>()));
        if (manifest.contains("test")) b.split.test = decode_indices(read_file(dir / manifest["test"].get<std::string>()));
        b.split_seed = manifest.value("split_seed", std::uint64_t{0});
        b.meta = manifest.value("meta", nlohmann::json::object());
    } catch (const nlohmann::json::exception &e) {
        throw ParseError("bundle.json: " + std::string(e.what()));
    }
    b.validate();
    return b;
}

// ---------------------------------------------------------------------------
// Configuration

/// Every accepted config key with its default; shown by the CLI help.
inline const std::vector<std::pair<std::string, std::string>> &config_key_docs() {
    static const std::vector<std::pair<std::string, std::string>> docs = {
        {"schema_version", "1 (optional; must be 1)"},
        {"variant", "required: mGPLVM | hmGPLVM | m-SimGP | hm-SimGP | m-RSimGP | hm-RSimGP"},
        {"harmonization", "fnorm | l21 | trace (required for hm-* variants)"},
        {"mu", "1.0; number or per-modality array, >= 0"},
        {"lambda", "sets lambda_similar and lambda_dissimilar together"},
        {"lambda_similar", "1.0"},
        {"lambda_dissimilar", "1.0"},
        {"pair_budget", "20000 pairs per relation drawn from labels"},
        {"latent_prior", "true; Gaussian prior on X for the non-harmonized variants"},
        {"q", "8 (latent dimension; 7..10 is a good starting range)"},
        {"M", "100 (active-set size)"},
        {"gamma_x", "1.0 (latent similarity bandwidth)"},
        {"gamma_features", "null = median heuristic; or per-modality array"},
        {"init", "cca | pca | random (default cca)"},
        {"initial_noise_variance", "0.01"},
        {"epochs", "5"},
        {"inner_iters", "20 SCG iterations per active-set rotation"},
        {"active_policy", "random | farthest-point (default random)"},
        {"grad_tol", "1e-6"},
        {"obj_tol", "1e-10"},
        {"sigma0", "1e-4"},
        {"seed", "0"},
        {"infer_iters", "100"},
        {"infer_starts", "1"},
        {"infer_full_set", "false (infer against the active set)"},
    };
    return docs;
}

inline ModelConfig parse_config(const nlohmann::json &j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    std::set<std::string> known;
    for (const auto &[k, v] : config_key_docs()) known.insert(k);
    for (const auto &[k, v] : j.items()) {
        if (known.count(k) == 0) throw ConfigError("unknown config key '" + k + "'");
    }
    if (!j.contains("variant")) throw ConfigError("missing required config key 'variant'");

    ModelConfig cfg;
    try {
        if (j.contains("schema_version") && j["schema_version"].get<int>() != 1) {
            throw ConfigError("unsupported schema_version");
        }
        cfg.variant = parse_variant(j["variant"].get<std::string>());
        std::vector<double> mu{1.0};
        if (j.contains("mu")) {
            mu = j["mu"].is_array() ? j["mu"].get<std::vector<double>>() : std::vector<double>{j["mu"].get<double>()};
        }
        if (j.contains("harmonization")) {
            HarmonizationSpec hs;
            hs.kind = parse_harmonization(j["harmonization"].get<std::string>());
            hs.weights = mu;
            cfg.harmonization = hs;
        } else if (is_harmonized(cfg.variant)) {
            throw ConfigError("missing required config key 'harmonization' for variant " +
                              std::string(to_string(cfg.variant)));
        }
        for (double m : mu) {
            if (!(m >= 0.0)) throw ConfigError("mu must be >= 0, got " + std::to_string(m));
        }
        if (j.contains("lambda")) cfg.lambda_similar = cfg.lambda_dissimilar = j["lambda"].get<double>();
        cfg.lambda_similar = j.value("lambda_similar", cfg.lambda_similar);
        cfg.lambda_dissimilar = j.value("lambda_dissimilar", cfg.lambda_dissimilar);
        if (j.contains("pair_budget")) cfg.pair_budget = j["pair_budget"].get<std::size_t>();
        cfg.latent_prior = j.value("latent_prior", cfg.latent_prior);
        if (j.contains("q")) cfg.latent_dim = j["q"].get<long long>();
        if (j.contains("M")) cfg.active_set_size = j["M"].get<long long>();
        cfg.gamma_x = j.value("gamma_x", cfg.gamma_x);
        if (j.contains("gamma_features") && !j["gamma_features"].is_null()) {
            cfg.feature_gammas = j["gamma_features"].get<std::vector<double>>();
        }
        if (j.contains("init")) cfg.init = parse_init(j["init"].get<std::string>());
        cfg.initial_noise_variance = j.value("initial_noise_variance", cfg.initial_noise_variance);
        cfg.epochs = j.value("epochs", cfg.epochs);
        cfg.optim.max_iters = j.value("inner_iters", cfg.optim.max_iters);
        if (j.contains("active_policy")) cfg.active_policy = parse_active_policy(j["active_policy"].get<std::string>());
        cfg.optim.grad_tol = j.value("grad_tol", cfg.optim.grad_tol);
        cfg.optim.obj_tol = j.value("obj_tol", cfg.optim.obj_tol);
        cfg.optim.sigma0 = j.value("sigma0", cfg.optim.sigma0);
        cfg.optim.seed = j.value("seed", cfg.optim.seed);
        cfg.infer_iters = j.value("infer_iters", cfg.infer_iters);
        cfg.infer_starts = j.value("infer_starts", cfg.infer_starts);
        cfg.infer_full_set = j.value("infer_full_set", cfg.infer_full_set);
    } catch (const nlohmann::json::exception &e) {
        throw ConfigError(std::string("config type error: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

inline nlohmann::json config_to_json(const ModelConfig &cfg) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["variant"] = to_string(cfg.variant);
    if (cfg.harmonization) {
        j["harmonization"] = to_string(cfg.harmonization->kind);
        j["mu"] = cfg.harmonization->weights;
    }
    j["lambda_similar"] = cfg.lambda_similar;
    j["lambda_dissimilar"] = cfg.lambda_dissimilar;
    j["pair_budget"] = cfg.pair_budget;
    j["latent_prior"] = cfg.latent_prior;
    j["q"] = cfg.latent_dim;
    j["M"] = cfg.active_set_size;
    j["gamma_x"] = cfg.gamma_x;
    j["gamma_features"] = cfg.feature_gammas.empty() ? nlohmann::json(nullptr) : nlohmann::json(cfg.feature_gammas);
    j["init"] = to_string(cfg.init);
    j["initial_noise_variance"] = cfg.initial_noise_variance;
    j["epochs"] = cfg.epochs;
    j["inner_iters"] = cfg.optim.max_iters;
    j["active_policy"] = cfg.active_policy == ActivePolicy::Random ? "random" : "farthest-point";
    j["grad_tol"] = cfg.optim.grad_tol;
    j["obj_tol"] = cfg.optim.obj_tol;
    j["sigma0"] = cfg.optim.sigma0;
    j["seed"] = cfg.optim.seed;
    j["infer_iters"] = cfg.infer_iters;
    j["infer_starts"] = cfg.infer_starts;
    j["infer_full_set"] = cfg.infer_full_set;
    return j;
}

inline ModelConfig load_config(const std::filesystem::path &path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error &e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    return parse_config(j);
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticOptions {
    Index n = 200;
    Index q = 3;
    Index d1 = 20;
    Index d2 = 15;
    std::uint64_t seed = 0;
    double noise = 0.1;
    int num_classes = 10;
    /// Use modality 1's map for every modality (requires d1 == d2).
    bool identical_maps = false;
    /// Equal-size classes (capacity-constrained assignment to k-means centers).
    bool balanced = true;
    Index n_test = 0;
};

namespace detail {

/// Smooth nonlinear map of the latent rows: sin for family 0, tanh for family 1,
/// each after its own random affine projection.
inline Matrix smooth_map(const Matrix &z, Index d, int family, std::mt19937_64 &rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    const Index q = z.cols();
    Matrix w(q, d), w2(q, d);
    Vector b(d);
    for (Index i = 0; i < q; ++i) {
        for (Index j = 0; j < d; ++j) w(i, j) = normal(rng) / std::sqrt(static_cast<double>(q));
    }
    for (Index i = 0; i < q; ++i) {
        for (Index j = 0; j < d; ++j) w2(i, j) = normal(rng) / std::sqrt(static_cast<double>(q));
    }
    for (Index j = 0; j < d; ++j) b(j) = normal(rng);
    const Matrix h = (z * w).rowwise() + b.transpose();
    if (family == 0) return h.array().sin().matrix() + 0.5 * z * w2;
    return h.array().tanh().matrix() + 0.5 * z * w2;
}

/// Lloyd's k-means with k-means++ seeding; optionally rebalanced to equal sizes.
inline std::vector<int> partition_latents(const Matrix &z, int k, bool balanced, std::mt19937_64 &rng) {
    const Index n = z.rows();
    Matrix centers(k, z.cols());
    std::uniform_int_distribution<Index> pick(0, n - 1);
    centers.row(0) = z.row(pick(rng));
    Vector d2 = Vector::Constant(n, std::numeric_limits<double>::infinity());
    for (int c = 1; c < k; ++c) {
        for (Index i = 0; i < n; ++i) d2(i) = std::min(d2(i), (z.row(i) - centers.row(c - 1)).squaredNorm());
        std::uniform_real_distribution<double> u(0.0, d2.sum());
        double r = u(rng);
        Index chosen = n - 1;
        for (Index i = 0; i < n; ++i) {
            r -= d2(i);
            if (r <= 0.0) {
                chosen = i;
                break;
            }
        }
        centers.row(c) = z.row(chosen);
    }
    std::vector<int> assign(static_cast<std::size_t>(n), 0);
    for (int it = 0; it < 100; ++it) {
        bool changed = false;
        for (Index i = 0; i < n; ++i) {
            int best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (int c = 0; c < k; ++c) {
                const double d = (z.row(i) - centers.row(c)).squaredNorm();
                if (d < bd) {
                    bd = d;
                    best = c;
                }
            }
            if (assign[static_cast<std::size_t>(i)] != best) changed = true;
            assign[static_cast<std::size_t>(i)] = best;
        }
        Matrix sums = Matrix::Zero(k, z.cols());
        std::vector<int> counts(static_cast<std::size_t>(k), 0);
        for (Index i = 0; i < n; ++i) {
            sums.row(assign[static_cast<std::size_t>(i)]) += z.row(i);
            ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) centers.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
        }
        if (!changed && it > 0) break;
    }
    if (!balanced) return assign;
    // Greedy capacity-constrained assignment in order of increasing distance.
    std::vector<std::tuple<double, Index, int>> cand;
    cand.reserve(static_cast<std::size_t>(n * k));
    for (Index i = 0; i < n; ++i) {
        for (int c = 0; c < k; ++c) cand.emplace_back((z.row(i) - centers.row(c)).squaredNorm(), i, c);
    }
    std::sort(cand.begin(), cand.end());
    std::vector<Index> cap(static_cast<std::size_t>(k), n / k);
    for (Index r = 0; r < n % k; ++r) ++cap[static_cast<std::size_t>(r)];
    std::vector<bool> done(static_cast<std::size_t>(n), false);
    for (const auto &[d, i, c] : cand) {
        if (done[static_cast<std::size_t>(i)] || cap[static_cast<std::size_t>(c)] == 0) continue;
        assign[static_cast<std::size_t>(i)] = c;
        done[static_cast<std::size_t>(i)] = true;
        --cap[static_cast<std::size_t>(c)];
    }
    return assign;
}

inline double pearson(const std::vector<double> &a, const std::vector<double> &b) {
    const auto n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

}  // namespace detail

/// Two-modality data generated from a standard-normal latent Z. The bundle's
/// meta records Z, the seed and the correlation between pairwise distances in Z
/// and in Y^1.
inline DatasetBundle generate_synthetic(const SyntheticOptions &o) {
    if (o.n < 4) throw DataError("synthetic data needs n >= 4");
    if (o.q < 1 || o.d1 < 1 || o.d2 < 1) throw DataError("synthetic data needs q, d1, d2 >= 1");
    if (o.num_classes < 1 || o.num_classes > o.n) throw DataError("num_classes must be in [1, n]");
    if (o.identical_maps && o.d1 != o.d2) throw DataError("identical maps need d1 == d2");
    if (!(o.noise >= 0.0)) throw DataError("noise must be >= 0");

    std::mt19937_64 rng(o.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix z(o.n, o.q);
    for (Index i = 0; i < o.n; ++i) {
        for (Index j = 0; j < o.q; ++j) z(i, j) = normal(rng);
    }
    std::mt19937_64 map_rng1(o.seed * 0x9E3779B97F4A7C15ULL + 1);
    std::mt19937_64 map_rng2(o.seed * 0x9E3779B97F4A7C15ULL + 2);
    Matrix y1 = detail::smooth_map(z, o.d1, 0, map_rng1);
    Matrix y2 = o.identical_maps ? y1 : detail::smooth_map(z, o.d2, 1, map_rng2);
    if (o.noise > 0.0) {
        std::mt19937_64 noise_rng(o.seed * 0x9E3779B97F4A7C15ULL + 3);
        for (Index i = 0; i < y1.size(); ++i) y1.data()[i] += o.noise * normal(noise_rng);
        for (Index i = 0; i < y2.size(); ++i) y2.data()[i] += o.noise * normal(noise_rng);
    }

    std::mt19937_64 part_rng(o.seed * 0x9E3779B97F4A7C15ULL + 4);
    const auto assign = detail::partition_latents(z, o.num_classes, o.balanced, part_rng);

    DatasetBundle b;
    b.modalities = {std::move(y1), std::move(y2)};
    LabelSet labels;
    for (int a : assign) labels.push_back({a});
    b.labels = std::move(labels);
    if (o.n_test > 0) b.split = make_split(o.n, o.n_test, o.seed);
    b.split_seed = o.seed;

    std::vector<double> dz, dy;
    for (Index j = 0; j < o.n; ++j) {
        for (Index i = 0; i < j; ++i) {
            dz.push_back((z.row(i) - z.row(j)).norm());
            dy.push_back((b.modalities[0].row(i) - b.modalities[0].row(j)).norm());
        }
    }
    b.meta["generator"] = "synthetic";
    b.meta["seed"] = o.seed;
    b.meta["noise"] = o.noise;
    b.meta["distance_correlation"] = detail::pearson(dz, dy);
    b.meta["latent_truth"] = encode_csv(z);
    b.validate();
    return b;
}

/// Ground-truth latent recorded by generate_synthetic.
inline Matrix synthetic_truth(const DatasetBundle &b) {
    return decode_csv(b.meta.at("latent_truth").get<std::string>());
}

}  // namespace hmgp
