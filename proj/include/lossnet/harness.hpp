#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lossnet/ctmc.hpp"
#include "lossnet/largedev.hpp"
#include "lossnet/meanfield.hpp"
#include "lossnet/version.hpp"

namespace lossnet::harness {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// config validation

struct ConfigError : std::runtime_error {
    std::vector<std::string> issues;
    explicit ConfigError(std::vector<std::string> list)
        : std::runtime_error(join(list)), issues(std::move(list)) {}
    static std::string join(const std::vector<std::string>& list) {
        std::string s = "configuration invalid:";
        for (const auto& e : list) s += "\n  - " + e;
        return s;
    }
};

namespace detail {

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
    std::vector<std::size_t> row(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        std::size_t prev = row[0];
        row[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t cur = row[j];
            row[j] = std::min({row[j] + 1, row[j - 1] + 1, prev + (a[i - 1] == b[j - 1] ? 0 : 1)});
            prev = cur;
        }
    }
    return row[b.size()];
}

inline void check_keys(const json& obj, const std::vector<std::string>& allowed, const std::string& path,
                       std::vector<std::string>& issues) {
    if (!obj.is_object()) {
        issues.push_back(path + ": expected an object");
        return;
    }
    for (const auto& [key, value] : obj.items()) {
        (void)value;
        if (std::find(allowed.begin(), allowed.end(), key) != allowed.end()) continue;
        std::string best;
        std::size_t best_d = 3;  // suggest only close misses
        for (const auto& cand : allowed) {
            const std::size_t d = edit_distance(key, cand);
            if (d < best_d) {
                best_d = d;
                best = cand;
            }
        }
        std::string msg = path + ": unknown key \"" + key + "\"";
        if (!best.empty()) msg += " (did you mean \"" + best + "\"?)";
        issues.push_back(msg);
    }
}

inline double need_number(const json& obj, const std::string& key, const std::string& path,
                          std::vector<std::string>& issues, double fallback = 0.0) {
    if (!obj.contains(key)) {
        issues.push_back(path + "." + key + ": required");
        return fallback;
    }
    if (!obj[key].is_number()) {
        issues.push_back(path + "." + key + ": expected a number");
        return fallback;
    }
    return obj[key].get<double>();
}

inline Vec need_number_array(const json& obj, const std::string& key, const std::string& path,
                             std::vector<std::string>& issues) {
    if (!obj.contains(key)) {
        issues.push_back(path + "." + key + ": required");
        return {};
    }
    if (!obj[key].is_array()) {
        issues.push_back(path + "." + key + ": expected an array of numbers");
        return {};
    }
    Vec out;
    for (const auto& v : obj[key]) {
        if (!v.is_number()) {
            issues.push_back(path + "." + key + ": expected numbers");
            return {};
        }
        out.push_back(v.get<double>());
    }
    return out;
}

} // namespace detail

/** Parsed and fully validated experiment description. */
struct ExperimentConfig {
    json raw;
    std::string command;
    std::optional<ModelSpec> model;
    json block;                 // the command-specific sub-object
    std::uint64_t seed = 0;
    std::string output_dir = "out";
};

inline ModelSpec model_from_json(const json& m, std::vector<std::string>& issues) {
    static const std::vector<std::string> allowed = {"family", "capacity", "lambda", "mu", "gamma", "requirements"};
    detail::check_keys(m, allowed, "model", issues);
    std::string family = m.value("family", "");
    const int capacity = static_cast<int>(detail::need_number(m, "capacity", "model", issues, 1.0));
    if (capacity < 1) issues.push_back("model.capacity: must be >= 1");

    auto fail = [&]() -> ModelSpec {
        throw ConfigError(issues);
    };

    if (family == "rerouting" || family == "closed" || family == "open") {
        const double lambda = detail::need_number(m, "lambda", "model", issues);
        if (family == "rerouting" && !(lambda > 0.0)) issues.push_back("model.lambda: must be positive");
        if ((family == "closed" || family == "open") && !(lambda > 0.0 && lambda < capacity))
            issues.push_back("model.lambda: the " + family + " family requires 0 < lambda < capacity");
        if (m.contains("mu") || m.contains("gamma") || m.contains("requirements"))
            issues.push_back("model: mu/gamma/requirements apply to the mobile families only");
        if (!issues.empty()) return fail();
        if (family == "rerouting") return ModelSpec::rerouting(capacity, lambda);
        if (family == "closed") return ModelSpec::closed(capacity, lambda);
        return ModelSpec::open(capacity, lambda);
    }
    if (family == "mobile" || family == "mobile_split") {
        const Vec lambda = detail::need_number_array(m, "lambda", "model", issues);
        const Vec mu = detail::need_number_array(m, "mu", "model", issues);
        const Vec gamma = detail::need_number_array(m, "gamma", "model", issues);
        std::vector<int> req;
        if (!m.contains("requirements") || !m["requirements"].is_array()) {
            issues.push_back("model.requirements: required array for the mobile families");
        } else {
            for (const auto& v : m["requirements"]) req.push_back(v.get<int>());
        }
        const std::size_t K = req.size();
        if (lambda.size() != K || mu.size() != K || gamma.size() != K)
            issues.push_back("model: lambda/mu/gamma must each have one entry per class");
        for (std::size_t k = 0; k < K; ++k) {
            if (k < req.size() && (req[k] < 1 || req[k] > capacity))
                issues.push_back("model.requirements: each A_k must lie in [1, capacity]");
            if (k < lambda.size() && !(lambda[k] > 0.0)) issues.push_back("model.lambda: entries must be positive");
            if (k < mu.size() && !(mu[k] > 0.0)) issues.push_back("model.mu: entries must be positive");
            if (k < gamma.size() && gamma[k] < 0.0) issues.push_back("model.gamma: entries must be nonnegative");
        }
        if (!issues.empty()) return fail();
        return family == "mobile" ? ModelSpec::mobile(capacity, req, lambda, mu, gamma)
                                  : ModelSpec::mobile_split(capacity, req, lambda, mu, gamma);
    }
    issues.push_back("model.family: expected one of rerouting, mobile, mobile_split, closed, open");
    return fail();
}

inline json model_to_json(const ModelSpec& m) {
    json j;
    j["family"] = family_name(m.family());
    j["capacity"] = m.space().capacity();
    if (m.family() == Family::Mobile || m.family() == Family::MobileSplit) {
        j["requirements"] = m.space().requirements();
        j["lambda"] = m.lambda();
        j["mu"] = m.mu();
        j["gamma"] = m.gamma();
    } else {
        j["lambda"] = m.lambda()[0];
    }
    return j;
}

/** Parses config text for a given command; throws ConfigError listing every problem. */
inline ExperimentConfig parse_config(const std::string& text, const std::string& command) {
    std::vector<std::string> issues;
    json raw;
    try {
        raw = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError({std::string("syntax error: ") + e.what()});
    }

    static const std::vector<std::string> commands = {"integrate", "equilibria", "simulate",
                                                      "exit_times", "quasipotential", "verify", "sweep"};
    if (std::find(commands.begin(), commands.end(), command) == commands.end())
        throw ConfigError({"unknown command \"" + command + "\""});

    ExperimentConfig cfg;
    cfg.raw = raw;
    cfg.command = command;

    std::vector<std::string> top_allowed = {"model", "seed", "output_dir", command};
    if (command == "sweep") top_allowed = {"seed", "output_dir", "sweep"};
    detail::check_keys(raw, top_allowed, "config", issues);

    if (raw.contains("seed")) {
        if (raw["seed"].is_number_unsigned() || raw["seed"].is_number_integer())
            cfg.seed = raw["seed"].get<std::uint64_t>();
        else
            issues.push_back("seed: expected an unsigned integer");
    }
    if (raw.contains("output_dir")) {
        if (raw["output_dir"].is_string())
            cfg.output_dir = raw["output_dir"].get<std::string>();
        else
            issues.push_back("output_dir: expected a string");
    }

    if (command != "sweep") {
        if (!raw.contains("model"))
            issues.push_back("model: required");
        else
            cfg.model = model_from_json(raw["model"], issues);
    }

    if (!raw.contains(command)) {
        issues.push_back(command + ": required block");
        throw ConfigError(issues);
    }
    cfg.block = raw[command];

    const std::string path = command;
    if (command == "integrate") {
        detail::check_keys(cfg.block, {"y0", "horizon", "tolerance"}, path, issues);
        detail::need_number(cfg.block, "horizon", path, issues);
    } else if (command == "equilibria") {
        detail::check_keys(cfg.block, {"grid", "multistart", "rho_min", "rho_max", "merge_radius"}, path, issues);
    } else if (command == "simulate") {
        detail::check_keys(cfg.block, {"nodes", "horizon", "y0_counts", "event_log", "sample_points"}, path, issues);
        detail::need_number(cfg.block, "nodes", path, issues);
        detail::need_number(cfg.block, "horizon", path, issues);
    } else if (command == "exit_times") {
        detail::check_keys(cfg.block, {"region", "nodes", "replicas", "event_cap", "rho_star", "attraction_checks"},
                           path, issues);
        if (cfg.block.contains("region"))
            detail::check_keys(cfg.block["region"], {"type", "size"}, path + ".region", issues);
        if (!cfg.block.contains("nodes") || !cfg.block["nodes"].is_array())
            issues.push_back("exit_times.nodes: required array of node counts");
        detail::need_number(cfg.block, "replicas", path, issues);
    } else if (command == "quasipotential") {
        detail::check_keys(cfg.block, {"target", "segments", "max_iterations"}, path, issues);
        if (!cfg.block.contains("target") || !cfg.block["target"].is_array())
            issues.push_back("quasipotential.target: required array (a probability vector)");
        else if (cfg.model && cfg.block["target"].size() != cfg.model->space().size())
            issues.push_back("quasipotential.target: expected " + std::to_string(cfg.model->space().size()) +
                             " entries for this state space");
    } else if (command == "verify") {
        detail::check_keys(cfg.block, {"suite", "samples"}, path, issues);
    } else if (command == "sweep") {
        detail::check_keys(cfg.block,
                           {"family", "capacities", "lambda_grid", "lambda1", "lambda2", "gamma", "mu"}, path, issues);
        const std::string family = cfg.block.value("family", "");
        if (family != "rerouting" && family != "mobile")
            issues.push_back("sweep.family: expected rerouting or mobile");
    }

    if (!issues.empty()) throw ConfigError(issues);
    return cfg;
}

// ---------------------------------------------------------------------------
// result bundle

inline std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string format_double(double x) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

/** Output directory with a manifest accounting every file by content hash. */
class ResultBundle {
public:
    ResultBundle(fs::path dir, const json& config_echo, std::uint64_t seed) : dir_(std::move(dir)) {
        fs::create_directories(dir_);
        manifest_["tool"] = "lossnetlab";
        manifest_["version"] = kVersion;
        manifest_["rng"] = kRngName;
        manifest_["seed"] = seed;
        manifest_["config"] = config_echo;
        manifest_["files"] = json::array();
        start_ = std::chrono::steady_clock::now();
    }

    void write_file(const std::string& name, const std::string& bytes) {
        std::ofstream out(dir_ / name, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.close();
        char hash[17];
        std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
        manifest_["files"].push_back({{"name", name}, {"bytes", bytes.size()}, {"fnv1a64", hash}});
        names_.push_back(name);
    }

    json& extra() { return manifest_["results"]; }

    const std::vector<std::string>& file_names() const { return names_; }

    fs::path finish(const std::string& status, const std::string& error = "") {
        manifest_["status"] = status;
        if (!error.empty()) manifest_["error"] = error;
        manifest_["wall_time_seconds"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        const fs::path p = dir_ / "manifest.json";
        std::ofstream out(p);
        out << manifest_.dump(2) << "\n";
        return p;
    }

private:
    fs::path dir_;
    json manifest_;
    std::vector<std::string> names_;
    std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------
// verify suite

struct VerifyCheck {
    std::string name;
    double residual = 0.0;
    double tolerance = 0.0;
    std::string status;  // pass | fail | expected-fail | skipped
    std::string note;
};

inline std::vector<std::string> default_suite() {
    return {"erlang", "entropy", "hjb", "reversibility", "dirichlet", "conservation"};
}

/** Runs the structural identity checks against the configured model. */
inline std::vector<VerifyCheck> verify_suite(const ModelSpec& model, std::vector<std::string> names,
                                             std::size_t samples, std::uint64_t seed) {
    if (names.empty()) throw std::invalid_argument("verify_suite: empty suite selection");
    const StateSpace& ss = model.space();
    std::vector<VerifyCheck> out;
    Rng rng(seed);

    auto interior = [&](double floor = 0.01) {
        Vec w(ss.size());
        for (auto& x : w) x = floor + rng.uniform();
        return Simplex::normalized(std::move(w));
    };
    auto shell = [&](double level) {
        for (int attempt = 0; attempt < 10000; ++attempt) {
            Simplex a = interior(), b = interior();
            const double ma = marginal_mean(ss, a)[0], mb = marginal_mean(ss, b)[0];
            if ((ma - level) * (mb - level) > 0.0) continue;
            const double t = (level - ma) / (mb - ma);
            Vec w(ss.size());
            for (std::size_t i = 0; i < w.size(); ++i) w[i] = (1.0 - t) * a[i] + t * b[i];
            return Simplex::normalized(std::move(w));
        }
        throw std::runtime_error("verify_suite: shell sampling failed");
    };
    auto rho_sample = [&]() {
        Vec r(ss.num_classes());
        for (auto& x : r) x = 0.1 * std::pow(100.0, rng.uniform());
        return LoadVector(std::move(r));
    };
    const bool has_g = model.family() == Family::Mobile || model.family() == Family::MobileSplit;
    const bool shellish = model.family() == Family::Closed || model.family() == Family::Open;

    for (const auto& name : names) {
        VerifyCheck c;
        c.name = name;
        if (name == "erlang") {
            c.tolerance = 1e-10;
            for (std::size_t s = 0; s < samples; ++s) {
                const LoadVector rho = rho_sample();
                const Vec mean = marginal_mean(ss, erlang_measure(ss, rho));
                for (std::size_t k = 0; k < ss.num_classes(); ++k) {
                    const double expect = rho.rho[k] * (1.0 - blocking_probability(ss, rho, k));
                    c.residual = std::max(c.residual, std::abs(mean[k] - expect) / std::max(1.0, expect));
                }
            }
            c.status = c.residual <= c.tolerance ? "pass" : "fail";
        } else if (name == "entropy") {
            c.tolerance = 1e-10;
            ThetaBarOptions tight;
            tight.tolerance = 1e-12;  // solver error enters the identity directly
            for (std::size_t s = 0; s < samples; ++s) {
                const Simplex y = interior();
                const Vec theta = rho_sample().theta();
                const Vec theta_bar = solve_theta_bar(ss, marginal_mean(ss, y), tight);
                const Simplex nu_bar = erlang_measure(ss, LoadVector::from_theta(theta_bar));
                const Simplex nu = erlang_measure(ss, LoadVector::from_theta(theta));
                const double lhs = relative_entropy(y, nu);
                const double rhs = relative_entropy(y, nu_bar) + relative_entropy(nu_bar, nu);
                c.residual = std::max(c.residual, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
            }
            c.status = c.residual <= c.tolerance ? "pass" : "fail";
        } else if (name == "hjb") {
            c.tolerance = 1e-10;
            if (model.family() == Family::MobileSplit) {
                for (std::size_t s = 0; s < samples; ++s) c.residual = std::max(c.residual, verify_hjb(model, interior()));
                c.status = c.residual <= c.tolerance ? "pass" : "fail";
            } else if (model.family() == Family::Mobile) {
                for (std::size_t s = 0; s < samples; ++s)
                    c.residual = std::max(c.residual, hjb_residual_unsplit(model, interior()));
                c.status = "expected-fail";
                c.note = "composite move jumps break the Hamilton-Jacobi identity";
            } else {
                c.status = "skipped";
                c.note = "no Lyapunov function g for this family";
            }
        } else if (name == "reversibility") {
            c.tolerance = 1e-10;
            if (model.family() == Family::MobileSplit) {
                for (std::size_t s = 0; s < samples; ++s) {
                    const Simplex y = interior();
                    for (const auto& z : model.jumps())
                        c.residual = std::max(c.residual, std::abs(reversibility_residual(model, y, z)));
                }
                c.status = c.residual <= c.tolerance ? "pass" : "fail";
            } else if (model.family() == Family::Mobile) {
                c.status = "expected-fail";
                c.note = "asymptotic reversibility holds for the split dynamics only";
            } else {
                c.status = "skipped";
                c.note = "no Lyapunov function g for this family";
            }
        } else if (name == "dirichlet") {
            c.tolerance = 1e-10;
            if (has_g || shellish) {
                for (std::size_t s = 0; s < samples; ++s) {
                    const Simplex y = shellish ? shell(model.lambda()[0]) : interior();
                    const auto d = lyapunov_derivative(model, y);
                    c.residual =
                        std::max(c.residual, std::abs(d.direct - d.dirichlet) / std::max(1.0, std::abs(d.direct)));
                }
                c.status = c.residual <= c.tolerance ? "pass" : "fail";
            } else {
                c.status = "skipped";
                c.note = "no Lyapunov function for the rerouting family";
            }
        } else if (name == "conservation") {
            c.tolerance = 1e-12;
            for (std::size_t s = 0; s < samples; ++s) {
                const Simplex y = model.family() == Family::Closed ? shell(model.lambda()[0]) : interior();
                const Vec mf = mean_field(model, y);
                c.residual = std::max(c.residual, std::abs(sum(mf)));
                c.residual = std::max(c.residual, sup_dist(mf, flow_field(model, y)));
                if (model.family() == Family::Closed || model.family() == Family::Open) {
                    double drift = 0.0;
                    for (std::size_t n = 0; n < mf.size(); ++n) drift += static_cast<double>(n) * mf[n];
                    const double expect =
                        model.family() == Family::Closed ? 0.0 : model.lambda()[0] - marginal_mean(ss, y)[0];
                    c.residual = std::max(c.residual, std::abs(drift - expect));
                }
            }
            c.status = c.residual <= c.tolerance ? "pass" : "fail";
        } else {
            throw std::invalid_argument("verify_suite: unknown check \"" + name + "\"");
        }
        out.push_back(std::move(c));
    }
    return out;
}

// ---------------------------------------------------------------------------
// command execution

namespace detail {

inline std::string csv_row(const std::vector<std::string>& cells) {
    std::string row;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) row += ",";
        row += cells[i];
    }
    row += "\n";
    return row;
}

inline std::string state_label(const StateSpace& ss, std::size_t i) {
    std::string s = "y";
    for (std::size_t k = 0; k < ss.num_classes(); ++k) s += "_" + std::to_string(ss.state(i)[k]);
    return s;
}

inline std::string model_param_string(const ModelSpec& m) {
    std::string s = "C=" + std::to_string(m.space().capacity());
    auto join = [](const Vec& v) {
        std::string r;
        for (std::size_t i = 0; i < v.size(); ++i) r += (i ? ";" : "") + format_double(v[i]);
        return r;
    };
    s += " lambda=" + join(m.lambda());
    if (m.family() == Family::Mobile || m.family() == Family::MobileSplit) {
        s += " mu=" + join(m.mu()) + " gamma=" + join(m.gamma());
        s += " A=";
        const auto& req = m.space().requirements();
        for (std::size_t k = 0; k < req.size(); ++k) s += (k ? ";" : "") + std::to_string(req[k]);
    }
    return s;
}

inline Simplex initial_point(const json& block, const ModelSpec& model) {
    const StateSpace& ss = model.space();
    if (!block.contains("y0") || block["y0"] == "erlang") {
        // the Erlang measure at the bare offered load, a generic interior start
        Vec rho = model.lambda();
        for (std::size_t k = 0; k < rho.size(); ++k) rho[k] = std::max(rho[k], 1e-6) / model.mu()[k];
        if (model.family() == Family::Closed || model.family() == Family::Open)
            rho[0] = solve_rho_lambda(ss, model.lambda()[0]);
        return erlang_measure(ss, LoadVector(rho));
    }
    if (block["y0"] == "uniform") return Simplex::uniform(ss.size());
    if (block["y0"].is_array()) {
        Vec w;
        for (const auto& v : block["y0"]) w.push_back(v.get<double>());
        if (w.size() != ss.size())
            throw ConfigError({"integrate.y0: expected " + std::to_string(ss.size()) + " entries"});
        return Simplex::normalized(std::move(w));
    }
    throw ConfigError({"integrate.y0: expected an array, \"uniform\", or \"erlang\""});
}

inline std::string equilibria_csv(const ModelSpec& model, const EquilibriumReport& rep) {
    std::string csv = "family,params,rho,stability,leading_real,g_value,residual\n";
    for (const auto& eq : rep.equilibria) {
        std::string rho;
        for (std::size_t k = 0; k < eq.rho.size(); ++k) rho += (k ? ";" : "") + format_double(eq.rho.rho[k]);
        csv += csv_row({family_name(model.family()), model_param_string(model), rho, eq.stability.tag,
                        format_double(eq.stability.max_real), format_double(eq.g_value), format_double(eq.residual)});
    }
    return csv;
}

inline std::string event_log_bytes(const ModelSpec& model, const SamplePath& path) {
    std::string bytes;
    auto put_u32 = [&](std::uint32_t v) { bytes.append(reinterpret_cast<const char*>(&v), 4); };
    auto put_u64 = [&](std::uint64_t v) { bytes.append(reinterpret_cast<const char*>(&v), 8); };
    auto put_f64 = [&](double v) { bytes.append(reinterpret_cast<const char*>(&v), 8); };
    bytes += "LNEVLOG1";              // magic
    put_u32(0x01020304);              // byte-order probe
    put_u32(static_cast<std::uint32_t>(model.jumps().size()));
    put_u64(static_cast<std::uint64_t>(path.initial.N));
    put_u64(path.event_count());
    for (std::size_t e = 0; e < path.event_count(); ++e) {
        put_f64(path.times[e]);
        put_u32(path.jumps[e]);
    }
    return bytes;
}

} // namespace detail

struct RunResult {
    int exit_code = 0;
    fs::path manifest_path;
    std::vector<std::string> messages;
};

/**
 * Dispatches a validated config to the module operations and writes the
 * result bundle. Identical config and seed produce byte-identical data
 * files; the manifest carries wall time and is excluded from that promise.
 */
inline RunResult run(const ExperimentConfig& cfg, unsigned threads = 1, bool verbose = false) {
    RunResult result;
    ResultBundle bundle(cfg.output_dir, cfg.raw, cfg.seed);
    auto say = [&](const std::string& m) {
        if (verbose) result.messages.push_back(m);
    };

    try {
        if (cfg.command == "integrate") {
            const ModelSpec& model = *cfg.model;
            const double T = cfg.block["horizon"].get<double>();
            const double tol = cfg.block.value("tolerance", 1e-8);
            const Simplex y0 = detail::initial_point(cfg.block, model);
            Trajectory traj = integrate(model, y0, T, tol);

            std::string csv = "t";
            for (std::size_t i = 0; i < model.space().size(); ++i)
                csv += "," + detail::state_label(model.space(), i);
            csv += "\n";
            for (std::size_t r = 0; r < traj.times.size(); ++r) {
                csv += format_double(traj.times[r]);
                for (double v : traj.points[r]) csv += "," + format_double(v);
                csv += "\n";
            }
            bundle.write_file("trajectory.csv", csv);
            bundle.extra()["steps_accepted"] = traj.steps.size();
            say("wrote trajectory.csv");
        } else if (cfg.command == "equilibria") {
            const ModelSpec& model = *cfg.model;
            ScanOptions opt;
            opt.rerouting_grid = cfg.block.value("grid", opt.rerouting_grid);
            opt.multistart_per_class = cfg.block.value("multistart", opt.multistart_per_class);
            opt.rho_min = cfg.block.value("rho_min", opt.rho_min);
            opt.rho_max = cfg.block.value("rho_max", opt.rho_max);
            opt.merge_radius = cfg.block.value("merge_radius", opt.merge_radius);
            EquilibriumReport rep = find_equilibria(model, opt);
            bundle.write_file("equilibria.csv", detail::equilibria_csv(model, rep));
            bundle.extra()["equilibria_found"] = rep.equilibria.size();
            bundle.extra()["scan_points"] = rep.scan_points;
            bundle.extra()["merge_radius"] = rep.merge_radius;
            say("wrote equilibria.csv");
        } else if (cfg.command == "simulate") {
            const ModelSpec& model = *cfg.model;
            const long N = cfg.block["nodes"].get<long>();
            const double T = cfg.block["horizon"].get<double>();
            EmpiricalVector y0;
            if (cfg.block.contains("y0_counts")) {
                std::vector<long> counts;
                for (const auto& v : cfg.block["y0_counts"]) counts.push_back(v.get<long>());
                y0 = EmpiricalVector(counts, N);
            } else {
                y0 = EmpiricalVector::nearest(detail::initial_point(cfg.block, model), N);
            }
            SamplePath path = simulate(model, N, y0, T, cfg.seed);

            const std::size_t points = cfg.block.value("sample_points", 200);
            std::string csv = "t";
            for (std::size_t i = 0; i < model.space().size(); ++i)
                csv += "," + detail::state_label(model.space(), i);
            csv += "\n";
            std::vector<long> counts = y0.counts;
            std::size_t e = 0;
            for (std::size_t s = 0; s <= points; ++s) {
                const double t = T * static_cast<double>(s) / static_cast<double>(points);
                while (e < path.times.size() && path.times[e] <= t) {
                    lossnet::detail::apply_jump(model.jumps()[path.jumps[e]], counts);
                    ++e;
                }
                csv += format_double(t);
                for (long c : counts) csv += "," + format_double(static_cast<double>(c) / static_cast<double>(N));
                csv += "\n";
            }
            bundle.write_file("path.csv", csv);
            bundle.extra()["events"] = path.event_count();
            bundle.extra()["absorbed"] = path.absorbed;
            if (cfg.block.value("event_log", false)) {
                bundle.write_file("events.bin", detail::event_log_bytes(model, path));
                say("wrote events.bin");
            }
            say("wrote path.csv");
        } else if (cfg.command == "exit_times") {
            const ModelSpec& model = *cfg.model;
            EquilibriumReport rep = find_equilibria(model);
            const Equilibrium* pick = nullptr;
            if (cfg.block.contains("rho_star")) {
                const double want = cfg.block["rho_star"].get<double>();
                for (const auto& eq : rep.equilibria)
                    if (eq.stability.tag == "stable" &&
                        (!pick || std::abs(eq.rho.rho[0] - want) < std::abs(pick->rho.rho[0] - want)))
                        pick = &eq;
            } else {
                for (const auto& eq : rep.equilibria)
                    if (eq.stability.tag == "stable" && (!pick || eq.rho.rho[0] < pick->rho.rho[0])) pick = &eq;
            }
            if (!pick) throw std::runtime_error("exit_times: no stable equilibrium found");

            ExitRegion region;
            if (cfg.block.contains("region")) {
                const std::string type = cfg.block["region"].value("type", "ball");
                region.kind = type == "g_sublevel" ? ExitRegion::Kind::GSublevel : ExitRegion::Kind::Ball;
                region.size = cfg.block["region"].value("size", 0.1);
            } else {
                // default policy: half the distance to the nearest other
                // equilibrium, shrunk until the attraction check passes
                double dmin = std::numeric_limits<double>::infinity();
                for (const auto& eq : rep.equilibria)
                    if (&eq != pick) dmin = std::min(dmin, euclidean_dist(eq.y.values(), pick->y.values()));
                region.kind = ExitRegion::Kind::Ball;
                region.size = std::isfinite(dmin) ? 0.5 * dmin : 0.1;
                for (int shrink = 0; shrink < 8; ++shrink) {
                    try {
                        verify_region_attracted(model, pick->y, region, 20, cfg.seed);
                        break;
                    } catch (const std::runtime_error&) {
                        region.size *= 0.7;
                    }
                }
            }

            std::vector<long> Ns;
            for (const auto& v : cfg.block["nodes"]) Ns.push_back(v.get<long>());
            ExitOptions opt;
            opt.threads = threads;
            opt.event_cap = static_cast<std::uint64_t>(cfg.block.value("event_cap", 1.0e9));
            opt.attraction_checks = cfg.block.value("attraction_checks", 100);
            const std::size_t replicas = cfg.block["replicas"].get<std::size_t>();
            ExitExperiment exp = run_exit_times(model, pick->y, region, Ns, replicas, cfg.seed, opt);

            std::string csv = "N,replica,exit_time,censored\n";
            std::string summary = "N,replicas,censored,mean,median\n";
            for (const auto& s : exp.by_n) {
                std::size_t idx = 0;
                for (double t : s.exit_times)
                    csv += detail::csv_row({std::to_string(s.N), std::to_string(idx++), format_double(t), "0"});
                for (std::size_t c = 0; c < s.censored; ++c)
                    csv += detail::csv_row({std::to_string(s.N), std::to_string(idx++), "", "1"});
                summary += detail::csv_row({std::to_string(s.N), std::to_string(s.exit_times.size() + s.censored),
                                            std::to_string(s.censored), format_double(s.mean),
                                            format_double(s.median)});
            }
            bundle.write_file("exit_times.csv", csv);
            bundle.write_file("exit_summary.csv", summary);
            bundle.extra()["region_kind"] = region.kind == ExitRegion::Kind::Ball ? "ball" : "g_sublevel";
            bundle.extra()["region_size"] = region.size;
            bundle.extra()["rho_star"] = pick->rho.rho[0];
            if (exp.fit_valid) {
                bundle.extra()["fit"] = {{"slope", exp.fit.slope},
                                         {"intercept", exp.fit.intercept},
                                         {"r_squared", exp.fit.r_squared}};
            }
            std::size_t censored_total = 0;
            for (const auto& s : exp.by_n) censored_total += s.censored;
            if (censored_total > 0) bundle.extra()["warning"] = "censored replicas excluded from the fit";
            say("wrote exit_times.csv");
        } else if (cfg.command == "quasipotential") {
            const ModelSpec& model = *cfg.model;
            EquilibriumReport rep = find_equilibria(model);
            const Equilibrium* stable = nullptr;
            for (const auto& eq : rep.equilibria)
                if (eq.stability.tag == "stable") {
                    stable = &eq;
                    break;
                }
            if (!stable) throw std::runtime_error("quasipotential: no stable equilibrium found");
            Vec target;
            for (const auto& v : cfg.block["target"]) target.push_back(v.get<double>());
            const Simplex y1 = Simplex::normalized(target);
            QuasipotentialOptions opt;
            opt.max_iterations = cfg.block.value("max_iterations", opt.max_iterations);
            const std::size_t segments = cfg.block.value("segments", 24);
            QuasipotentialEstimate est = quasipotential(model, stable->y, y1, segments, opt);

            json doc;
            doc["action"] = est.action;
            doc["segments"] = est.segments;
            doc["iterations"] = est.iterations;
            doc["gradient_norm"] = est.gradient_norm;
            doc["converged"] = est.converged;
            doc["durations"] = est.path.durations;
            doc["points"] = json::array();
            for (const auto& p : est.path.points) doc["points"].push_back(p);
            bundle.write_file("quasipotential.json", doc.dump(2) + "\n");
            say("wrote quasipotential.json");
        } else if (cfg.command == "verify") {
            const ModelSpec& model = *cfg.model;
            std::vector<std::string> names;
            if (!cfg.block.contains("suite") || cfg.block["suite"] == "default") {
                names = default_suite();
            } else if (cfg.block["suite"].is_array()) {
                for (const auto& v : cfg.block["suite"]) names.push_back(v.get<std::string>());
            }
            const std::size_t samples = cfg.block.value("samples", 200);
            const auto checks = verify_suite(model, names, samples, cfg.seed);

            std::string csv = "check,residual,tolerance,status,note\n";
            bool failures = false;
            for (const auto& c : checks) {
                csv += detail::csv_row({c.name, format_double(c.residual), format_double(c.tolerance), c.status,
                                        c.note});
                if (c.status == "fail") failures = true;
            }
            bundle.write_file("verify_report.csv", csv);
            bundle.extra()["failures_present"] = failures;
            if (failures) result.exit_code = 3;
            say("wrote verify_report.csv");
        } else if (cfg.command == "sweep") {
            const std::string family = cfg.block["family"].get<std::string>();

            // grid points are independent; run them across the worker pool
            // and emit rows in grid order so the bytes stay deterministic
            std::vector<std::function<ModelSpec()>> grid;
            if (family == "rerouting") {
                const auto& gspec = cfg.block["lambda_grid"];
                const double lo = gspec.value("min", 0.8);
                const double hi = gspec.value("max", 1.0);
                const int count = gspec.value("count", 50);
                const bool rel = gspec.value("times_capacity", true);
                for (const auto& cv : cfg.block["capacities"]) {
                    const int C = cv.get<int>();
                    for (int i = 0; i < count; ++i) {
                        const double f = count == 1 ? lo : lo + (hi - lo) * i / (count - 1);
                        const double lambda = rel ? f * C : f;
                        grid.push_back([C, lambda]() { return ModelSpec::rerouting(C, lambda); });
                    }
                }
            } else {
                // mobile coexistence sweep with A = [1, C]
                const double mu = cfg.block.contains("mu") ? cfg.block["mu"].get<double>() : 1.0;
                for (const auto& cv : cfg.block["capacities"]) {
                    const int C = cv.get<int>();
                    for (const auto& l1 : cfg.block["lambda1"])
                        for (const auto& l2 : cfg.block["lambda2"])
                            for (const auto& g : cfg.block["gamma"]) {
                                const double v1 = l1.get<double>(), v2 = l2.get<double>(), vg = g.get<double>();
                                grid.push_back([C, v1, v2, vg, mu]() {
                                    return ModelSpec::mobile(C, {1, C}, {v1, v2}, {mu, mu}, {vg, vg});
                                });
                            }
                }
            }

            ScanOptions opt;
            if (family != "rerouting") opt.multistart_per_class = 16;
            std::vector<std::string> rows(grid.size());
            parallel_for(grid.size(), threads, [&](std::size_t i) {
                const ModelSpec m = grid[i]();
                const EquilibriumReport rep = find_equilibria(m, opt);
                std::string out;
                for (const auto& eq : rep.equilibria) {
                    std::string rho;
                    for (std::size_t k = 0; k < eq.rho.size(); ++k)
                        rho += (k ? ";" : "") + format_double(eq.rho.rho[k]);
                    out += detail::csv_row({family_name(m.family()), std::to_string(m.space().capacity()),
                                            detail::model_param_string(m), rho, eq.stability.tag,
                                            format_double(eq.stability.max_real), format_double(eq.g_value)});
                }
                rows[i] = std::move(out);
            });

            std::string csv = "family,capacity,params,rho,stability,leading_real,g_value\n";
            for (const auto& r : rows) csv += r;
            bundle.write_file("sweep.csv", csv);
            bundle.extra()["instances"] = grid.size();
            say("wrote sweep.csv");
        }
        result.manifest_path = bundle.finish(result.exit_code == 0 ? "ok" : "verification-failures");
    } catch (const ConfigError&) {
        bundle.finish("config-error");
        throw;
    } catch (const std::exception& e) {
        result.exit_code = 2;
        result.manifest_path = bundle.finish("error", e.what());
        result.messages.push_back(std::string("error: ") + e.what());
    }
    return result;
}

} // namespace lossnet::harness
