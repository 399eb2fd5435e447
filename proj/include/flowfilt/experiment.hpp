// Run configuration (flat `key = value` text), and the table/trace experiment
// drivers that write CSV.
//
// Config format: one `key = value` per line, `#` starts a comment, vectors are
// whitespace- or comma-separated. Keys:
//
//   seed, trials, output, threads
//   scenario.sensor_1, scenario.sensor_2            (x y, metres)
//   scenario.sigma_theta_deg, scenario.dt, scenario.n_steps
//   scenario.sine_amplitude, scenario.sine_period
//   scenario.prior_bias                              (dx dy)
//   scenario.p0_diag                                 (6 values)
//   scenario.process_noise_intensity
//   scenario.initial_state                           (6 values)
//   sweep.sigma_theta_deg                            (list of levels, degrees)
//   filter.<id>.name | .substeps | .particles | .delta_l
#pragma once

#include "flowfilt/bearings.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowfilt {

struct RunConfig {
    ScenarioConfig scenario;
    std::vector<double> sigma_levels_deg{0.001, 0.05, 1.0};
    std::vector<FilterSpec> filters;
    int n_trials = 100;
    std::string output_dir = "out";
    std::uint64_t seed = 1;
    /// Worker threads for Monte Carlo trials, 0 = hardware concurrency.
    unsigned threads = 1;

    bool operator==(const RunConfig&) const = default;
};

/// Filters compared in the benchmark table.
inline std::vector<FilterSpec> default_filters() {
    return {
        FilterSpec{FilterKind::naedh_lin, 10, 500, {}},   FilterSpec{FilterKind::naedh_ccr, 10, 500, {}},
        FilterSpec{FilterKind::edh_adaptive, 10, 500, {}}, FilterSpec{FilterKind::bootstrap_pf, 0, 10'000, {}},
        FilterSpec{FilterKind::bootstrap_pf, 0, 100'000, {}}, FilterSpec{FilterKind::ekf, 0, 0, {}},
    };
}

inline void validate(const RunConfig& cfg) {
    validate(cfg.scenario);
    if (cfg.filters.empty()) throw std::invalid_argument("config lists no filters");
    if (cfg.sigma_levels_deg.empty()) throw std::invalid_argument("config lists no sigma_theta levels");
    if (cfg.n_trials < 1) throw std::invalid_argument("trials must be at least 1");
    for (const auto& f : cfg.filters) {
        if (f.uses_substeps() && f.substeps < 1) throw std::invalid_argument(f.name() + ": substeps must be >= 1");
        if (f.uses_particles() && f.particles < 1) throw std::invalid_argument(f.name() + ": particles must be >= 1");
    }
}

/// "%.17g": round-trips every double.
inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<double> parse_numbers(const std::string& key, const std::string& value) {
    std::string v = value;
    for (char& c : v) {
        if (c == ',') c = ' ';
    }
    std::istringstream is(v);
    std::vector<double> out;
    std::string tok;
    while (is >> tok) {
        std::size_t used = 0;
        double d = 0.0;
        try {
            d = std::stod(tok, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != tok.size()) throw std::invalid_argument("config key '" + key + "': not a number: " + tok);
        out.push_back(d);
    }
    return out;
}

inline std::vector<double> numbers_exact(const std::string& key, const std::string& value, std::size_t n) {
    auto v = parse_numbers(key, value);
    if (v.size() != n) {
        throw std::invalid_argument("config key '" + key + "' expects " + std::to_string(n) + " value(s)");
    }
    return v;
}

inline long long parse_integer(const std::string& key, const std::string& value) {
    const std::string t = trim(value);
    std::size_t used = 0;
    long long v = 0;
    try {
        v = std::stoll(t, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (t.empty() || used != t.size()) throw std::invalid_argument("config key '" + key + "': not an integer: " + t);
    return v;
}

inline std::string join(const double* v, std::size_t n) {
    std::string out;
    for (std::size_t i = 0; i < n; ++i) {
        if (i) out += ' ';
        out += format_double(v[i]);
    }
    return out;
}

}  // namespace detail

/// Parses config text. Unknown keys are errors. When no `filter.*` key is
/// present the default filter set is used.
inline RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    std::vector<std::string> filter_order;
    std::map<std::string, std::map<std::string, std::string>> filter_fields;

    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        auto& sc = cfg.scenario;
        auto num = [&] { return detail::numbers_exact(key, value, 1)[0]; };

        if (key == "seed") {
            cfg.seed = static_cast<std::uint64_t>(detail::parse_integer(key, value));
        } else if (key == "trials") {
            cfg.n_trials = static_cast<int>(detail::parse_integer(key, value));
        } else if (key == "output") {
            cfg.output_dir = value;
        } else if (key == "threads") {
            cfg.threads = static_cast<unsigned>(detail::parse_integer(key, value));
        } else if (key == "scenario.sensor_1" || key == "scenario.sensor_2") {
            const auto v = detail::numbers_exact(key, value, 2);
            sc.sensor_positions[key.back() == '1' ? 0 : 1] = Eigen::Vector2d(v[0], v[1]);
        } else if (key == "scenario.sigma_theta_deg") {
            sc.sigma_theta_deg = num();
        } else if (key == "scenario.dt") {
            sc.dt = num();
        } else if (key == "scenario.n_steps") {
            sc.n_steps = static_cast<int>(detail::parse_integer(key, value));
        } else if (key == "scenario.sine_amplitude") {
            sc.sine_amplitude = num();
        } else if (key == "scenario.sine_period") {
            sc.sine_period = num();
        } else if (key == "scenario.prior_bias") {
            const auto v = detail::numbers_exact(key, value, 2);
            sc.prior_bias = Eigen::Vector2d(v[0], v[1]);
        } else if (key == "scenario.p0_diag") {
            const auto v = detail::numbers_exact(key, value, 6);
            std::copy(v.begin(), v.end(), sc.p0_diag.begin());
        } else if (key == "scenario.process_noise_intensity") {
            sc.process_noise_intensity = num();
        } else if (key == "scenario.initial_state") {
            const auto v = detail::numbers_exact(key, value, 6);
            std::copy(v.begin(), v.end(), sc.initial_state.begin());
        } else if (key == "sweep.sigma_theta_deg") {
            cfg.sigma_levels_deg = detail::parse_numbers(key, value);
        } else if (key.rfind("filter.", 0) == 0) {
            const auto dot = key.find('.', 7);
            if (dot == std::string::npos || dot == 7) {
                throw std::invalid_argument("config key '" + key + "': expected filter.<id>.<field>");
            }
            const std::string id = key.substr(7, dot - 7);
            if (!filter_fields.count(id)) filter_order.push_back(id);
            filter_fields[id][key.substr(dot + 1)] = value;
        } else {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        }
    }

    if (!filter_order.empty()) {
        cfg.filters.clear();
        for (const auto& id : filter_order) {
            const auto& fields = filter_fields[id];
            if (!fields.count("name")) throw std::invalid_argument("filter." + id + " has no name");
            FilterSpec spec;
            spec.kind = parse_filter_kind(fields.at("name"));
            spec.substeps = spec.uses_substeps() ? 10 : 0;
            spec.particles = spec.kind == FilterKind::bootstrap_pf ? 10'000 : (spec.uses_particles() ? 500 : 0);
            for (const auto& [field, value] : fields) {
                const std::string key = "filter." + id + "." + field;
                if (field == "name") continue;
                if (field == "substeps") {
                    spec.substeps = static_cast<int>(detail::parse_integer(key, value));
                } else if (field == "particles") {
                    spec.particles = static_cast<int>(detail::parse_integer(key, value));
                } else if (field == "delta_l") {
                    spec.delta_l = detail::numbers_exact(key, value, 1)[0];
                } else {
                    throw std::invalid_argument("config key '" + key + "': unknown filter field");
                }
            }
            cfg.filters.push_back(spec);
        }
    } else {
        cfg.filters = default_filters();
    }
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

inline std::string serialize_config(const RunConfig& cfg) {
    const auto& sc = cfg.scenario;
    std::ostringstream os;
    os << "seed = " << cfg.seed << "\n";
    os << "trials = " << cfg.n_trials << "\n";
    os << "output = " << cfg.output_dir << "\n";
    os << "threads = " << cfg.threads << "\n";
    for (int s = 0; s < 2; ++s) {
        os << "scenario.sensor_" << s + 1 << " = " << detail::join(sc.sensor_positions[s].data(), 2) << "\n";
    }
    os << "scenario.sigma_theta_deg = " << format_double(sc.sigma_theta_deg) << "\n";
    os << "scenario.dt = " << format_double(sc.dt) << "\n";
    os << "scenario.n_steps = " << sc.n_steps << "\n";
    os << "scenario.sine_amplitude = " << format_double(sc.sine_amplitude) << "\n";
    os << "scenario.sine_period = " << format_double(sc.sine_period) << "\n";
    os << "scenario.prior_bias = " << detail::join(sc.prior_bias.data(), 2) << "\n";
    os << "scenario.p0_diag = " << detail::join(sc.p0_diag.data(), 6) << "\n";
    os << "scenario.process_noise_intensity = " << format_double(sc.process_noise_intensity) << "\n";
    os << "scenario.initial_state = " << detail::join(sc.initial_state.data(), 6) << "\n";
    os << "sweep.sigma_theta_deg = " << detail::join(cfg.sigma_levels_deg.data(), cfg.sigma_levels_deg.size()) << "\n";
    for (std::size_t i = 0; i < cfg.filters.size(); ++i) {
        const auto& f = cfg.filters[i];
        const std::string p = "filter." + std::to_string(i + 1) + ".";
        os << p << "name = " << f.name() << "\n";
        os << p << "substeps = " << f.substeps << "\n";
        os << p << "particles = " << f.particles << "\n";
        if (f.delta_l) os << p << "delta_l = " << format_double(*f.delta_l) << "\n";
    }
    return os.str();
}

inline constexpr const char* table_header =
    "filter,n_substeps,n_particles,sigma_theta_deg,rmse_mean_m,rmse_std_m,ms_per_update,diverged_trials,n_trials,seed";
inline constexpr const char* trace_header = "filter,axis,coordinate,position_error_m";
inline constexpr const char* trials_header =
    "filter,n_substeps,n_particles,sigma_theta_deg,trial,diverged,step,position_error_m,update_ms";

/// All Monte Carlo summaries of a table run, in row order (filter-major).
struct TableResult {
    std::vector<MonteCarloSummary> rows;
    std::filesystem::path table_csv;
    std::filesystem::path trials_csv;
};

namespace detail {

inline std::filesystem::path prepare_output(const RunConfig& cfg) {
    std::filesystem::path dir(cfg.output_dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

inline std::string row_prefix(const MonteCarloSummary& s) {
    return s.spec.name() + "," + std::to_string(s.spec.uses_substeps() ? s.spec.substeps : 0) + "," +
           std::to_string(s.spec.uses_particles() ? s.spec.particles : 0) + "," + format_double(s.sigma_theta_deg);
}

inline void write_meta(const std::filesystem::path& dir, const RunConfig& cfg) {
    write_file(dir / "run_config.txt", serialize_config(cfg));
    write_file(dir / "run_meta.txt",
               "# ms_per_update / update_ms time the whole measurement-update call: linearization,\n"
               "# eigendecomposition, particle transport and the companion covariance update.\n"
               "# Prediction steps are not timed.\n");
}

}  // namespace detail

inline std::string table_csv(const std::vector<MonteCarloSummary>& rows) {
    std::string out = std::string(table_header) + "\n";
    for (const auto& s : rows) {
        out += detail::row_prefix(s) + "," + format_double(s.rmse_mean) + "," + format_double(s.rmse_std) + "," +
               format_double(s.ms_per_update) + "," + std::to_string(s.diverged_trials) + "," +
               std::to_string(s.n_trials) + "," + std::to_string(s.base_seed) + "\n";
    }
    return out;
}

inline std::string trials_csv(const std::vector<MonteCarloSummary>& rows) {
    std::string out = std::string(trials_header) + "\n";
    for (const auto& s : rows) {
        const std::string prefix = detail::row_prefix(s);
        for (std::size_t t = 0; t < s.trials.size(); ++t) {
            const auto& tr = s.trials[t];
            for (std::size_t k = 0; k < tr.position_errors.size(); ++k) {
                const double ms = k < tr.update_seconds.size() ? 1e3 * tr.update_seconds[k]
                                                               : std::numeric_limits<double>::quiet_NaN();
                out += prefix + "," + std::to_string(t) + "," + (tr.diverged ? "1" : "0") + "," + std::to_string(k) +
                       "," + format_double(tr.position_errors[k]) + "," + format_double(ms) + "\n";
            }
        }
    }
    return out;
}

/// One row per (filter, σθ) into <output>/table.csv, raw per-step errors into
/// <output>/trials.csv.
inline TableResult run_table(const RunConfig& cfg) {
    validate(cfg);
    TableResult res;
    for (const auto& spec : cfg.filters) {
        for (double sigma : cfg.sigma_levels_deg) {
            ScenarioConfig sc = cfg.scenario;
            sc.sigma_theta_deg = sigma;
            res.rows.push_back(run_monte_carlo(sc, spec, cfg.n_trials, cfg.seed, cfg.threads));
        }
    }
    const auto dir = detail::prepare_output(cfg);
    res.table_csv = dir / "table.csv";
    res.trials_csv = dir / "trials.csv";
    detail::write_file(res.table_csv, table_csv(res.rows));
    detail::write_file(res.trials_csv, trials_csv(res.rows));
    detail::write_meta(dir, cfg);
    return res;
}

/// Long-format trace CSV at scenario.sigma_theta_deg: the first-update
/// λ-trace of every flow filter and the per-update mean position error over
/// all trials of every filter.
inline std::filesystem::path run_trace(const RunConfig& cfg) {
    validate(cfg);
    std::string out = std::string(trace_header) + "\n";
    std::map<FilterKind, int> kind_count;
    for (const auto& f : cfg.filters) ++kind_count[f.kind];

    for (const auto& spec : cfg.filters) {
        const std::string label =
            kind_count[spec.kind] > 1 ? spec.name() + ":" + std::to_string(spec.particles) : spec.name();
        const MonteCarloSummary mc = run_monte_carlo(cfg.scenario, spec, cfg.n_trials, cfg.seed, cfg.threads);
        if (spec.uses_substeps()) {
            const LambdaTrace tr = convergence_trace(cfg.scenario, spec, trial_seed(cfg.seed, 0), mc.delta_l);
            for (std::size_t i = 0; i < tr.lambdas.size(); ++i) {
                out += label + ",lambda," + format_double(tr.lambdas[i]) + "," + format_double(tr.errors[i]) + "\n";
            }
        }
        for (int k = 0; k < cfg.scenario.n_steps; ++k) {
            double sum = 0.0;
            int count = 0;
            for (const auto& t : mc.trials) {
                if (t.diverged) continue;
                sum += t.position_errors[static_cast<std::size_t>(k)];
                ++count;
            }
            const double mean = count ? sum / count : std::numeric_limits<double>::quiet_NaN();
            out += label + ",time," + format_double(k * cfg.scenario.dt) + "," + format_double(mean) + "\n";
        }
    }
    const auto dir = detail::prepare_output(cfg);
    const auto path = dir / "trace.csv";
    detail::write_file(path, out);
    detail::write_meta(dir, cfg);
    return path;
}

}  // namespace flowfilt
