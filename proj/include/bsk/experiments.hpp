#pragma once

#include "core.hpp"
#include "kernel.hpp"
#include "lift.hpp"
#include "linear_solver.hpp"
#include "nonlinear_solver.hpp"
#include "path.hpp"
#include "signature.hpp"
#include "stochastic.hpp"
#include "streaming.hpp"

#include <algorithm>
#include <chrono>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace bsk {

// ---------------------------------------------------------------------------
// configuration

inline std::string trim(const std::string& s)
{
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s, char sep = ',')
{
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

inline const std::vector<std::string>& benchmark_names()
{
    static const std::vector<std::string> names{"elcentro", "solow", "fbm-linear", "duffing", "arias", "kuramoto"};
    return names;
}

// Flat key/value settings; every key has a default, unknown keys are rejected.
class ExperimentConfig {
public:
    ExperimentConfig() = default;

    static ExperimentConfig defaults(const std::string& benchmark)
    {
        const auto& names = benchmark_names();
        if (std::find(names.begin(), names.end(), benchmark) == names.end())
            throw InvalidInput("config: unknown benchmark '" + benchmark + "'");
        ExperimentConfig c;
        auto& v = c.values_;
        v = {{"benchmark", benchmark},
             {"method", "I"},
             {"kernel", "rbf"},
             {"sigma", "1"},
             {"depth", "3"},
             {"normalization", "robust"},
             {"lift", "none"},
             {"lift_alpha", "0.6"},
             {"extension_dim", "4"},
             {"hidden", "32,32,16"},
             {"lambda_shuffle", "0.1"},
             {"lambda_model", "1"},
             {"lift_iterations", "40"},
             {"lift_step", "0.01"},
             {"gradient", "tape"},
             {"mode", "stream"},
             {"train_fraction", "0.7"},
             {"cadence", "10"},
             {"window", "0"},
             {"ridge", "1e-10"},
             {"lbfgs_iterations", "500"},
             {"lbfgs_tolerance", "1e-10"},
             {"feature_budget", "20000"},
             {"samples", "1000"},
             {"horizon", "1"},
             {"hurst", "0.3"},
             {"seed", "0"},
             {"output_dir", "."},
             {"data", ""}};
        if (benchmark == "elcentro") {
            v["method"] = "II";
            v["kernel"] = "linear";
            v["depth"] = "12";
            v["lift"] = "time-power";
            v["lift_alpha"] = "0.3";
            v["window"] = "199";
            v["samples"] = "1000";
            v["horizon"] = "20";
            v["xi"] = "0.02";
            v["period"] = "5";
        } else if (benchmark == "solow") {
            v["method"] = "II";
            v["normalization"] = "none";
            v["kernel"] = "rbf";
            v["window"] = "50";
            v["samples"] = "300";
            v["delta"] = "0.05";
            v["savings"] = "0.3";
            v["y0"] = "3.1";
        } else if (benchmark == "fbm-linear") {
            v["lift"] = "nn";
            v["mass"] = "1";
            v["damping"] = "5";
            v["stiffness"] = "10";
            v["a"] = "0";
            v["b"] = "0";
        } else if (benchmark == "duffing") {
            v["lift"] = "nn";
            v["depth"] = "2";
            v["samples"] = "500";
            v["hurst"] = "0.4";
            v["lift_alpha"] = "0.8";
            v["extension_dim"] = "3";
            v["k0"] = "5";
            v["k1"] = "10";
            v["gamma"] = "10";
            v["a"] = "0";
            v["b"] = "1";
        } else if (benchmark == "arias") {
            v["lift"] = "nn";
            v["depth"] = "2";
            v["hurst"] = "0.2";
            v["lift_alpha"] = "0.4";
            v["extension_dim"] = "2";
            v["mode"] = "calibrate";
            v["train_fraction"] = "1";
            v["omega"] = "6.283185307179586";
            v["xi"] = "0.05";
            v["degradation"] = "5";
        } else if (benchmark == "kuramoto") {
            v["lift"] = "nn";
            v["depth"] = "2";
            v["hurst"] = "0.4";
            v["lift_alpha"] = "0.8";
            v["extension_dim"] = "3";
            v["mode"] = "calibrate";
            v["train_fraction"] = "1";
            v["frequencies"] = "-1,-0.3,1.5";
            v["coupling"] = "3";
            v["theta0"] = "random";
            v["lift_iterations"] = "15";
        }
        return c;
    }

    // key = value lines, '#' comments; the benchmark key selects the defaults.
    static ExperimentConfig parse(const std::string& text, const std::string& origin = "config")
    {
        std::vector<std::pair<std::string, std::string>> kv;
        std::stringstream ss(text);
        std::string line;
        int no = 0;
        std::string bench;
        while (std::getline(ss, line)) {
            ++no;
            auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = trim(line);
            if (line.empty()) continue;
            auto eq = line.find('=');
            if (eq == std::string::npos)
                throw InvalidInput(origin + ":" + std::to_string(no) + ": expected 'key = value', got '" + line + "'");
            std::string k = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
            if (k == "benchmark") bench = val;
            kv.emplace_back(k, val);
        }
        if (bench.empty()) throw InvalidInput(origin + ": missing 'benchmark' key");
        ExperimentConfig c = defaults(bench);
        for (auto& [k, val] : kv) c.set(k, val);
        return c;
    }

    static ExperimentConfig load(const std::string& file)
    {
        std::ifstream in(file);
        if (!in) throw Error("config: cannot open " + file);
        std::stringstream buf;
        buf << in.rdbuf();
        return parse(buf.str(), file);
    }

    void set(const std::string& key, const std::string& value)
    {
        auto it = values_.find(key);
        if (it == values_.end()) throw InvalidInput("config: unknown key '" + key + "' for benchmark " + benchmark());
        if (key == "benchmark" && value != benchmark())
            throw InvalidInput("config: benchmark cannot be changed by an override");
        it->second = value;
    }

    // "key=value"
    void apply_override(const std::string& kv)
    {
        auto eq = kv.find('=');
        if (eq == std::string::npos) throw InvalidInput("config: override '" + kv + "' is not key=value");
        set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    const std::string& str(const std::string& key) const
    {
        auto it = values_.find(key);
        if (it == values_.end()) throw InvalidInput("config: missing key '" + key + "'");
        return it->second;
    }

    double num(const std::string& key) const
    {
        const std::string& s = str(key);
        try {
            std::size_t used = 0;
            double v = std::stod(s, &used);
            if (used != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw InvalidInput("config: key '" + key + "' expects a number, got '" + s + "'");
        }
    }

    long long integer(const std::string& key) const
    {
        if (str(key) == "never") return std::numeric_limits<int>::max();
        double v = num(key);
        if (v != std::floor(v)) throw InvalidInput("config: key '" + key + "' expects an integer");
        return static_cast<long long>(v);
    }

    std::vector<double> numbers(const std::string& key) const
    {
        std::vector<double> out;
        for (const auto& s : split_list(str(key))) {
            try {
                out.push_back(std::stod(s));
            } catch (const std::exception&) {
                throw InvalidInput("config: key '" + key + "' expects a number list, got '" + str(key) + "'");
            }
        }
        return out;
    }

    const std::string& benchmark() const { return values_.at("benchmark"); }
    const std::map<std::string, std::string>& values() const { return values_; }

    // Sorted key = value lines; the basis of the hash.
    std::string canonical() const
    {
        std::string out;
        for (const auto& [k, v] : values_) {
            if (k == "output_dir") continue;
            out += k + " = " + v + "\n";
        }
        return out;
    }

    std::string hash() const
    {
        std::uint64_t h = 1469598103934665603ull;
        for (unsigned char ch : canonical()) {
            h ^= ch;
            h *= 1099511628211ull;
        }
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
        return buf;
    }

    void validate() const
    {
        double tf = num("train_fraction");
        require(tf > 0.0 && tf <= 1.0, "config: train_fraction must lie in (0, 1]");
        require(str("method") == "I" || str("method") == "II", "config: method must be I or II");
        require(str("kernel") == "linear" || str("kernel") == "rbf", "config: kernel must be linear or rbf");
        require(str("normalization") == "none" || str("normalization") == "robust",
                "config: normalization must be none or robust");
        const std::string& lift = str("lift");
        require(lift == "none" || lift == "time-power" || lift == "nn", "config: lift must be none, time-power or nn");
        require(str("mode") == "stream" || str("mode") == "calibrate", "config: mode must be stream or calibrate");
        require(str("gradient") == "tape" || str("gradient") == "fd", "config: gradient must be tape or fd");
        require(integer("cadence") >= 1, "config: cadence must be >= 1 (or 'never')");
        require(integer("samples") >= 4, "config: samples must be >= 4");
        require(num("ridge") >= 0.0, "config: ridge must be non-negative");
    }

private:
    std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// data ingestion

// Two numeric columns (t, value), optional header, strictly increasing t.
inline Path load_csv(const std::string& file)
{
    std::ifstream in(file);
    if (!in) throw Error("load_csv: cannot open " + file);
    std::vector<double> t, v;
    std::string line;
    int no = 0;
    while (std::getline(in, line)) {
        ++no;
        std::string s = trim(line);
        if (s.empty()) continue;
        auto cells = split_list(s, ',');
        if (cells.size() != 2)
            throw InvalidInput(file + ":" + std::to_string(no) + ": expected 2 columns, found " + std::to_string(cells.size()));
        double a = 0.0, b = 0.0;
        try {
            std::size_t ua = 0, ub = 0;
            a = std::stod(cells[0], &ua);
            b = std::stod(cells[1], &ub);
            if (ua != cells[0].size() || ub != cells[1].size()) throw std::invalid_argument(s);
        } catch (const std::exception&) {
            if (t.empty() && no == 1) continue;  // header
            throw InvalidInput(file + ":" + std::to_string(no) + ": non-numeric cell in '" + s + "'");
        }
        if (!t.empty() && !(a > t.back()))
            throw InvalidInput(file + ":" + std::to_string(no) + ": time " + cells[0] + " does not increase");
        t.push_back(a);
        v.push_back(b);
    }
    if (t.empty()) throw InvalidInput(file + ": no data rows");
    if (t.size() < 2) throw InvalidInput(file + ": need at least 2 samples");
    return Path::scalar(std::move(t), v);
}

// ---------------------------------------------------------------------------
// benchmark problems

struct Dataset {
    std::vector<double> grid;
    Mat forcing;    // n x d, right-hand side of the ODE
    Mat channels;   // observed path channels (time is added separately)
    Mat reference;  // u at the nodes
    Mat reference_derivative;  // u' at the nodes (may be empty)
    LinearODESpec spec;
    NonlinearTerm term;
    std::string data_source;
};

namespace detail {

inline std::vector<double> uniform_grid(Index n, double horizon)
{
    std::vector<double> g(static_cast<std::size_t>(n));
    for (Index k = 0; k < n; ++k) g[static_cast<std::size_t>(k)] = horizon * static_cast<double>(k) / static_cast<double>(n - 1);
    g.back() = horizon;
    return g;
}

// Sum of random sinusoids in a band, shaped by a rise-and-decay envelope, peak-normalized.
inline Vec band_limited_record(const std::vector<double>& grid, std::uint64_t seed)
{
    Rng rng(seed ^ 0x5eed5eedull);
    std::uniform_real_distribution<double> freq(0.5, 8.0), phase(0.0, 2.0 * std::numbers::pi);
    std::normal_distribution<double> amp;
    Vec a = Vec::Zero(static_cast<Index>(grid.size()));
    double horizon = grid.back() - grid.front();
    double rise = 0.1 * horizon;
    for (int c = 0; c < 40; ++c) {
        double f = freq(rng), ph = phase(rng), w = amp(rng) / std::sqrt(f);
        for (std::size_t k = 0; k < grid.size(); ++k) a(static_cast<Index>(k)) += w * std::sin(2.0 * std::numbers::pi * f * grid[k] + ph);
    }
    for (std::size_t k = 0; k < grid.size(); ++k) {
        double s = (grid[k] - grid.front()) / rise;
        a(static_cast<Index>(k)) *= s * std::exp(1.0 - s);
    }
    return a / a.cwiseAbs().maxCoeff();
}

// Logistic trend with small band-limited fluctuations (a GDP-like series).
inline Vec logistic_series(const std::vector<double>& grid, std::uint64_t seed)
{
    Vec noise = band_limited_record(grid, seed + 17);
    Vec out(static_cast<Index>(grid.size()));
    double t0 = grid.front(), span = grid.back() - grid.front();
    for (std::size_t k = 0; k < grid.size(); ++k) {
        double s = (grid[k] - t0) / span;
        out(static_cast<Index>(k)) = 2.0 + 18.0 / (1.0 + std::exp(-8.0 * (s - 0.55))) + 0.15 * noise(static_cast<Index>(k));
    }
    return out;
}

inline Mat integrate_reference(const LinearODESpec& spec, const std::vector<double>& grid, const Mat& forcing,
                               const NonlinearTerm& term, Mat* derivative)
{
    OdeRhs rhs = first_order_system(spec, linear_interpolant(grid, forcing), term);
    Mat traj = reference_integrate(rhs, stacked_initial(spec), grid, Integrator::adaptive);
    if (derivative) *derivative = traj.middleCols(spec.order > 1 ? spec.dim : 0, spec.dim);
    if (spec.order == 1 && derivative) {
        Mat d(traj.rows(), spec.dim);
        for (Index j = 0; j < traj.rows(); ++j) d.row(j) = rhs(grid[static_cast<std::size_t>(j)], traj.row(j).transpose()).transpose();
        *derivative = d;
    }
    return traj.leftCols(spec.dim);
}

}  // namespace detail

inline Dataset make_dataset(const ExperimentConfig& cfg)
{
    const std::string& b = cfg.benchmark();
    Dataset ds;
    auto seed = static_cast<std::uint64_t>(cfg.integer("seed"));
    Index n = static_cast<Index>(cfg.integer("samples"));
    double horizon = cfg.num("horizon");
    auto external = [&]() -> std::optional<Path> {
        if (cfg.str("data").empty()) return std::nullopt;
        return load_csv(cfg.str("data"));
    };
    if (b == "elcentro") {
        auto ext = external();
        Vec accel;
        if (ext) {
            ds.grid = ext->grid();
            accel = ext->values().col(0);
            ds.data_source = cfg.str("data");
        } else {
            ds.grid = detail::uniform_grid(n, horizon);
            accel = detail::band_limited_record(ds.grid, seed);
            ds.data_source = "synthetic band-limited record";
        }
        double wn = 2.0 * std::numbers::pi / cfg.num("period"), xi = cfg.num("xi");
        ds.spec = LinearODESpec::scalar({wn * wn, 2.0 * xi * wn, 1.0}, {0.0, 0.0});
        ds.forcing = -gravity * accel;
        ds.channels = ds.forcing;
    } else if (b == "solow") {
        auto ext = external();
        Vec gdp;
        if (ext) {
            ds.grid = ext->grid();
            gdp = ext->values().col(0);
            ds.data_source = cfg.str("data");
        } else {
            ds.grid = detail::uniform_grid(n, horizon);
            gdp = detail::logistic_series(ds.grid, seed);
            ds.data_source = "synthetic logistic series";
        }
        ds.spec = LinearODESpec::scalar({cfg.num("delta"), 1.0}, {cfg.num("y0")});
        ds.forcing = cfg.num("savings") * gdp;
        ds.channels = gdp;
    } else if (b == "fbm-linear" || b == "duffing" || b == "arias") {
        FbmConfig fc{n, cfg.num("hurst"), horizon, seed};
        Path bm = fbm_davies_harte(fc);
        ds.grid = bm.grid();
        ds.data_source = "Davies-Harte fBM";
        if (b == "fbm-linear") {
            ds.spec = LinearODESpec::scalar({cfg.num("stiffness"), cfg.num("damping"), cfg.num("mass")}, {cfg.num("a"), cfg.num("b")});
            ds.forcing = bm.values();
            ds.channels = ds.forcing;
        } else if (b == "duffing") {
            NonlinearODESpec d = duffing(cfg.num("k0"), cfg.num("k1"), cfg.num("gamma"), cfg.num("a"), cfg.num("b"));
            ds.spec = d.linear;
            ds.term = d.term;
            ds.forcing = bm.values();
            ds.channels = ds.forcing;
        } else {
            Vec accel = bm.values().col(0);
            Vec ia = arias_intensity(accel, ds.grid);
            double w = cfg.num("omega"), xi = cfg.num("xi"), deg = cfg.num("degradation");
            auto nodal = linear_interpolant(ds.grid, Mat(ia));
            auto stiffness = [nodal, w, deg](double t) {
                return Mat::Constant(1, 1, w * w * std::max(1.0 - deg * nodal(t)(0), 0.0));
            };
            ds.spec.order = 2;
            ds.spec.dim = 1;
            ds.spec.coefficients = {stiffness, [w, xi](double) { return Mat::Constant(1, 1, 2.0 * xi * w); },
                                    [](double) { return Mat::Constant(1, 1, 1.0); }};
            ds.spec.initial = {Vec::Zero(1), Vec::Zero(1)};
            ds.forcing = -gravity * bm.values();
            ds.channels = ds.forcing;
        }
    } else if (b == "kuramoto") {
        std::vector<double> w = cfg.numbers("frequencies");
        Index osc = static_cast<Index>(w.size());
        require(osc >= 1, "kuramoto: no frequencies");
        FbmConfig fc{n, cfg.num("hurst"), horizon, seed};
        Path noise = fbm_channels(fc, osc);
        KuramotoSpec ks;
        ks.omega = Eigen::Map<const Vec>(w.data(), osc);
        ks.coupling = cfg.num("coupling");
        ks.noise = noise.values();
        if (cfg.str("theta0") == "random") {
            Rng rng(seed ^ 0x7e7a0ull);
            std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
            ks.theta0 = Vec(osc);
            for (Index i = 0; i < osc; ++i) ks.theta0(i) = u(rng);
        } else {
            auto th = cfg.numbers("theta0");
            require(static_cast<Index>(th.size()) == osc, "kuramoto: theta0 length must equal the oscillator count");
            ks.theta0 = Eigen::Map<const Vec>(th.data(), osc);
        }
        Mat theta = euler_kuramoto(ks, noise.grid());
        Mat eta = fgn(noise);  // n - 1 rows, aligned with t_0..t_{n-2}
        Index m = eta.rows();
        ds.grid.assign(noise.grid().begin(), noise.grid().begin() + m);
        ds.forcing = eta;
        ds.channels = eta;
        ds.reference = theta.topRows(m);
        ds.reference_derivative = Mat(m, osc);
        for (Index k = 0; k < m; ++k)
            ds.reference_derivative.row(k) = (kuramoto_drift(ks.omega, ks.coupling, ds.reference.row(k).transpose()) + eta.row(k).transpose()).transpose();
        std::vector<Mat> a{Mat::Zero(osc, osc), Mat::Identity(osc, osc)};
        ds.spec = LinearODESpec::constant(a, {ks.theta0});
        ds.term = kuramoto_term(ks.omega, ks.coupling);
        ds.data_source = "Euler scheme with Davies-Harte fBM noise";
        return ds;
    }
    ds.reference = detail::integrate_reference(ds.spec, ds.grid, ds.forcing, ds.term, &ds.reference_derivative);
    return ds;
}

// ---------------------------------------------------------------------------
// reports

struct Trace {
    std::vector<std::string> columns;
    Mat rows;
};

struct Report {
    std::string benchmark;
    std::string config_hash;
    std::map<std::string, std::string> config;
    std::map<std::string, double> metrics;
    std::map<std::string, std::string> notes;
    double runtime_seconds = 0.0;
    Trace trace;
};

inline std::string format_double(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string report_body(const Report& r)
{
    std::string out = "# bsk report v1\n";
    out += "benchmark = " + r.benchmark + "\n";
    out += "config_hash = " + r.config_hash + "\n";
    for (const auto& [k, v] : r.config) out += "config." + k + " = " + v + "\n";
    for (const auto& [k, v] : r.notes) out += "note." + k + " = " + v + "\n";
    for (const auto& [k, v] : r.metrics) out += "metric." + k + " = " + format_double(v) + "\n";
    return out;
}

inline std::string report_text(const Report& r)
{
    return report_body(r) + "runtime_seconds = " + format_double(r.runtime_seconds) + "\n";
}

inline Report parse_report(const std::string& text)
{
    Report r;
    std::stringstream ss(text);
    std::string line;
    int no = 0;
    while (std::getline(ss, line)) {
        ++no;
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find(" = ");
        if (eq == std::string::npos) throw InvalidInput("report:" + std::to_string(no) + ": malformed line");
        std::string k = line.substr(0, eq), v = line.substr(eq + 3);
        if (k == "benchmark") r.benchmark = v;
        else if (k == "config_hash") r.config_hash = v;
        else if (k == "runtime_seconds") r.runtime_seconds = std::stod(v);
        else if (k.rfind("config.", 0) == 0) r.config[k.substr(7)] = v;
        else if (k.rfind("note.", 0) == 0) r.notes[k.substr(5)] = v;
        else if (k.rfind("metric.", 0) == 0) r.metrics[k.substr(7)] = std::stod(v);
        else throw InvalidInput("report:" + std::to_string(no) + ": unknown key '" + k + "'");
    }
    return r;
}

inline Report read_report(const std::string& file)
{
    std::ifstream in(file);
    if (!in) throw Error("read_report: cannot open " + file);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_report(buf.str());
}

inline std::string trace_csv(const Trace& t)
{
    std::string out;
    for (std::size_t c = 0; c < t.columns.size(); ++c) out += (c ? "," : "") + t.columns[c];
    out += "\n";
    for (Index r = 0; r < t.rows.rows(); ++r) {
        for (Index c = 0; c < t.rows.cols(); ++c) out += (c ? "," : "") + format_double(t.rows(r, c));
        out += "\n";
    }
    return out;
}

struct ReportFiles {
    std::string report;
    std::string trace;
};

inline ReportFiles write_report(const Report& r, const std::string& dir)
{
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error("write_report: cannot create " + dir + ": " + ec.message());
    std::string stem = r.benchmark + "-" + r.config_hash;
    ReportFiles files{(fs::path(dir) / (stem + ".report.txt")).string(), (fs::path(dir) / (stem + ".trace.csv")).string()};
    auto put = [](const std::string& file, const std::string& body) {
        std::ofstream out(file, std::ios::binary);
        if (!out) throw Error("write_report: cannot open " + file + " for writing");
        out << body;
        if (!out) throw Error("write_report: write failed for " + file);
    };
    put(files.report, report_text(r));
    put(files.trace, trace_csv(r.trace));
    return files;
}

// ---------------------------------------------------------------------------
// pipeline

namespace detail {

inline KernelSpec kernel_from(const ExperimentConfig& cfg)
{
    KernelSpec k;
    k.flavor = cfg.str("kernel") == "linear" ? KernelFlavor::linear : KernelFlavor::rbf;
    k.sigma = cfg.num("sigma");
    k.depth = static_cast<int>(cfg.integer("depth"));
    k.normalization = cfg.str("normalization") == "robust" ? Normalization::robust : Normalization::none;
    return k;
}

inline Mat time_augmented(const std::vector<double>& grid, const Mat& channels)
{
    Mat v(channels.rows(), channels.cols() + 1);
    for (Index j = 0; j < channels.rows(); ++j) v(j, 0) = grid[static_cast<std::size_t>(j)];
    v.rightCols(channels.cols()) = channels;
    return v;
}

inline Mat time_power_augmented(const std::vector<double>& grid, const Mat& channels, double alpha)
{
    Path p = augment_time_power(Path(grid, time_augmented(grid, channels)), alpha);
    return p.values();
}

// Per-split metrics; forcing targets are integrated for Method II.
inline void add_metrics(Report& rep, const std::string& split, const Mat& f_hat, const Mat& f_true, const Mat& u_hat,
                        const Mat& u_ref, const Mat* du_hat = nullptr, const Mat* du_ref = nullptr)
{
    if (f_hat.rows() == 0) return;
    rep.metrics[split + ".forcing"] = rel_mse(f_hat, f_true);
    rep.metrics[split + ".solution"] = rel_mse(u_hat, u_ref);
    if (du_hat && du_ref && du_ref->size() && du_hat->size()) rep.metrics[split + ".derivative"] = rel_mse(*du_hat, *du_ref);
}

inline void fill_trace(Report& rep, const std::vector<double>& t, const Mat& f_true, const Mat& f_hat, const Mat& u_ref,
                       const Mat& u_hat, const std::vector<int>& split)
{
    Index d = f_true.cols();
    Trace& tr = rep.trace;
    tr.columns = {"t", "split"};
    for (const char* name : {"f_true", "f_hat", "u_ref", "u_hat"})
        for (Index c = 0; c < d; ++c) tr.columns.push_back(d == 1 ? std::string(name) : std::string(name) + "_" + std::to_string(c + 1));
    tr.rows = Mat(static_cast<Index>(t.size()), 2 + 4 * d);
    for (Index j = 0; j < tr.rows.rows(); ++j) {
        tr.rows(j, 0) = t[static_cast<std::size_t>(j)];
        tr.rows(j, 1) = split[static_cast<std::size_t>(j)];
        tr.rows.row(j).segment(2, d) = f_true.row(j);
        tr.rows.row(j).segment(2 + d, d) = f_hat.row(j);
        tr.rows.row(j).segment(2 + 2 * d, d) = u_ref.row(j);
        tr.rows.row(j).segment(2 + 3 * d, d) = u_hat.row(j);
    }
}

}  // namespace detail

struct ExperimentResult {
    Report report;
    Mat path;       // final (possibly lifted) path rows
    Mlp lift;       // trained lift when lift = nn
    std::vector<double> lift_history;
};

// Lifted path rows and the trained network (if any), fitted on the first `train_nodes` rows.
inline Mat build_path(const ExperimentConfig& cfg, const Dataset& ds, Method method, Index train_nodes, Report& rep,
                      Mlp* trained = nullptr, std::vector<double>* history = nullptr)
{
    const std::string& lift = cfg.str("lift");
    Mat base = detail::time_augmented(ds.grid, ds.channels);
    if (lift == "none") return base;
    if (lift == "time-power") return detail::time_power_augmented(ds.grid, ds.channels, cfg.num("lift_alpha"));
    // neural lift trained on the training rows
    LiftProblem lp;
    lp.method = method;
    lp.spec = ds.spec;
    lp.term = ds.term;
    lp.kernel = detail::kernel_from(cfg);
    lp.grid.assign(ds.grid.begin(), ds.grid.begin() + train_nodes);
    lp.path = base.topRows(train_nodes);
    lp.forcing = ds.forcing.topRows(train_nodes);
    lp.ridge = cfg.num("ridge") / static_cast<double>(train_nodes);
    lp.lbfgs.max_iterations = static_cast<int>(cfg.integer("lbfgs_iterations"));
    lp.lbfgs.gradient_tolerance = cfg.num("lbfgs_tolerance");
    lp.lbfgs.ridge = lp.ridge;
    LiftTrainConfig tc;
    tc.lambda_shuffle = cfg.num("lambda_shuffle");
    tc.lambda_model = cfg.num("lambda_model");
    tc.iterations = static_cast<int>(cfg.integer("lift_iterations"));
    tc.step_size = cfg.num("lift_step");
    tc.gradient = cfg.str("gradient") == "tape" ? GradientStrategy::tape : GradientStrategy::finite_difference;
    tc.extension_dim = static_cast<Index>(cfg.integer("extension_dim"));
    tc.hidden.clear();
    for (double h : cfg.numbers("hidden")) tc.hidden.push_back(static_cast<Index>(h));
    tc.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
    Mlp net = Mlp::glorot(base.cols(), tc.hidden, tc.extension_dim, tc.seed);
    LiftResult lr = train_lift(lp, tc, net);
    rep.metrics["lift.initial_loss"] = lr.history.front();
    rep.metrics["lift.final_loss"] = lr.history.back();
    rep.metrics["lift.accepted_steps"] = static_cast<double>(lr.history.size() - 1);
    if (lr.degraded) rep.notes["lift_status"] = "degraded: " + lr.message;
    if (trained) *trained = lr.net;
    if (history) *history = lr.history;
    return lifted_path(base, lr.net.forward_batch(base));
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg)
{
    cfg.validate();
    auto start = std::chrono::steady_clock::now();
    ExperimentResult res;
    Report& rep = res.report;
    rep.benchmark = cfg.benchmark();
    rep.config_hash = cfg.hash();
    for (const auto& [k, v] : cfg.values())
        if (k != "output_dir") rep.config[k] = v;
    auto stage = [](const char* name, auto&& fn) {
        try {
            return fn();
        } catch (const std::exception& e) {
            throw Error(std::string(name) + ": " + e.what());
        }
    };

    Dataset ds = stage("data", [&] { return make_dataset(cfg); });
    rep.notes["data_source"] = ds.data_source;
    Method method = cfg.str("method") == "I" ? Method::derivative_ansatz : Method::volterra;
    require(!ds.term.value || method == Method::derivative_ansatz, "solve: nonlinear benchmarks need method I");
    Index n = static_cast<Index>(ds.grid.size());
    bool stream = cfg.str("mode") == "stream";
    Index n0 = cfg.integer("window");
    if (n0 <= 0) n0 = static_cast<Index>(std::llround(cfg.num("train_fraction") * static_cast<double>(n))) - 1;
    Index train_nodes = stream ? n0 + 1 : n;
    require(train_nodes >= ds.spec.order + 1 && train_nodes <= n, "config: training window out of range");

    KernelSpec ks = detail::kernel_from(cfg);
    Mat path = stage("lift", [&] { return build_path(cfg, ds, method, train_nodes, rep, &res.lift, &res.lift_history); });
    // feature budget caps the depth for wide paths
    int depth = ks.depth;
    auto budget = static_cast<Index>(cfg.integer("feature_budget"));
    while (depth > 1 && sig_size(path.cols(), depth) > budget) --depth;
    if (depth != ks.depth) rep.notes["depth_capped"] = std::to_string(ks.depth) + " -> " + std::to_string(depth);
    ks.depth = depth;
    rep.metrics["effective_depth"] = depth;
    res.path = path;

    double ridge = cfg.num("ridge");
    LbfgsConfig lb;
    lb.max_iterations = static_cast<int>(cfg.integer("lbfgs_iterations"));
    lb.gradient_tolerance = cfg.num("lbfgs_tolerance");

    Mat f_hat(n, ds.spec.dim), f_true(n, ds.spec.dim), u_hat(n, ds.spec.dim), du_hat;
    std::vector<int> split(static_cast<std::size_t>(n), 0);
    if (!stream) {
        stage("solve", [&] {
            auto gram = std::make_shared<GramStack>(ds.grid, bsk::gram(build_features(path, ks).normalized, ks), ds.spec.order);
            SolverFit fit;
            Mat fh;
            if (ds.term.value) {
                lb.ridge = ridge / static_cast<double>(n);
                NonlinearProblem prob({ds.spec, ds.term}, gram, ds.forcing, lb.ridge);
                NonlinearFit nf = fit_nonlinear(prob, lb);
                fit = nf.fit;
                fh = reconstruct_forcing(prob, fit.alpha);
                rep.metrics["lbfgs.iterations"] = nf.optimizer.iterations;
                rep.metrics["lbfgs.converged"] = nf.optimizer.converged ? 1.0 : 0.0;
            } else {
                SolveOptions opt;
                opt.ridge = ridge;
                fit = fit_linear(method, ds.spec, gram, ds.forcing, opt);
                fh = reconstruct_forcing(fit);
            }
            f_hat = fh;
            f_true = forcing_target(fit);
            u_hat = reconstruct_derivative(fit, 0);
            if (method == Method::derivative_ansatz) du_hat = reconstruct_derivative(fit, 1);
            return 0;
        });
        detail::add_metrics(rep, "calibration", f_hat, f_true, u_hat, ds.reference, &du_hat, &ds.reference_derivative);
    } else {
        stage("stream", [&] {
            std::vector<StreamSample> samples;
            for (Index j = 0; j < n; ++j)
                samples.push_back({ds.grid[static_cast<std::size_t>(j)], ds.forcing.row(j).transpose(), path.row(j).transpose()});
            StreamConfig sc;
            sc.method = method;
            sc.kernel = ks;
            sc.window = n0;
            long long cad = cfg.integer("cadence");
            sc.cadence = cad >= std::numeric_limits<int>::max() ? StreamConfig::never : static_cast<int>(cad);
            sc.solve.ridge = ridge;
            sc.lbfgs = lb;
            sc.lbfgs.ridge = ridge / static_cast<double>(n0 + 1);
            StreamRun run = run_stream(samples, ds.spec, sc, ds.term);
            Index tn = n0 + 1;
            f_hat.topRows(tn) = run.train_forcing;
            f_true.topRows(tn) = run.train_target;
            u_hat.topRows(tn) = run.train_solution;
            int newton_ok = 0;
            double max_row = 0.0;
            for (std::size_t k = 0; k < run.steps.size(); ++k) {
                Index j = tn + static_cast<Index>(k);
                const StepRecord& rec = run.steps[k];
                f_hat.row(j) = rec.forcing_hat.transpose();
                f_true.row(j) = rec.forcing_target.transpose();
                u_hat.row(j) = rec.u.transpose();
                split[static_cast<std::size_t>(j)] = 1;
                if (rec.newton_iterations <= 3) ++newton_ok;
                max_row = std::max(max_row, rec.row_residual);
            }
            rep.metrics["stream.max_row_residual"] = max_row;
            rep.metrics["stream.retrains"] = run.retrains;
            rep.metrics["stream.newton_fallbacks"] = run.fallbacks;
            if (ds.term.value && !run.steps.empty())
                rep.metrics["stream.newton_le3_fraction"] = static_cast<double>(newton_ok) / static_cast<double>(run.steps.size());
            return 0;
        });
        Index tn = n0 + 1, te = n - tn;
        detail::add_metrics(rep, "train", f_hat.topRows(tn), f_true.topRows(tn), u_hat.topRows(tn), ds.reference.topRows(tn));
        if (te > 0)
            detail::add_metrics(rep, "test", f_hat.bottomRows(te), f_true.bottomRows(te), u_hat.bottomRows(te),
                                ds.reference.bottomRows(te));
        if (method == Method::derivative_ansatz) detail::add_metrics(rep, "full", f_hat, f_true, u_hat, ds.reference);
    }

    if (cfg.benchmark() == "arias") {
        // pointwise RBF on the time coordinate alone
        stage("baseline", [&] {
            KernelSpec bk;
            bk.flavor = KernelFlavor::rbf;
            bk.sigma = cfg.num("sigma");
            bk.normalization = Normalization::none;
            Mat tcol(n, 1);
            for (Index j = 0; j < n; ++j) tcol(j, 0) = ds.grid[static_cast<std::size_t>(j)];
            auto gram = std::make_shared<GramStack>(ds.grid, bsk::gram(tcol, bk), ds.spec.order);
            SolveOptions opt;
            opt.ridge = std::max(ridge, 1e-10);
            SolverFit fit = fit_linear(method, ds.spec, gram, ds.forcing, opt);
            rep.metrics["baseline.forcing"] = rel_mse(reconstruct_forcing(fit), forcing_target(fit));
            rep.metrics["baseline.solution"] = rel_mse(reconstruct_derivative(fit, 0), ds.reference);
            return 0;
        });
    }

    detail::fill_trace(rep, ds.grid, f_true, f_hat, ds.reference, u_hat, split);
    rep.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return res;
}

// ---------------------------------------------------------------------------
// prefix-signature timing

struct SpeedupRow {
    Index samples = 0;
    double naive_seconds = 0.0;
    double streamed_seconds = 0.0;
    double ratio = 0.0;
};

inline std::vector<SpeedupRow> bench_speedup(const std::vector<Index>& sizes, Index dim, int depth, int repeats = 3,
                                             std::uint64_t seed = 0)
{
    std::vector<SpeedupRow> rows;
    Rng rng(seed);
    std::normal_distribution<double> normal;
    for (Index n : sizes) {
        require(n >= 2, "bench_speedup: sample counts must be >= 2");
        Mat v(n, dim);
        for (Index i = 0; i < n; ++i)
            for (Index c = 0; c < dim; ++c) v(i, c) = (i ? v(i - 1, c) : 0.0) + normal(rng) / std::sqrt(static_cast<double>(n));
        SignatureMatrix fast = stream_prefix_signatures(v, depth);
        SignatureMatrix slow = naive_prefix_signatures(v, depth);
        double gap = (fast.rows - slow.rows).cwiseAbs().maxCoeff();
        if (gap > 1e-12 * std::max(1.0, slow.rows.cwiseAbs().maxCoeff()))
            throw NumericError("bench_speedup: streamed prefixes differ from the naive computation by " + std::to_string(gap));
        auto best = [&](auto&& fn) {
            double t = std::numeric_limits<double>::infinity();
            for (int r = 0; r < repeats; ++r) {
                auto a = std::chrono::steady_clock::now();
                fn();
                t = std::min(t, std::chrono::duration<double>(std::chrono::steady_clock::now() - a).count());
            }
            return t;
        };
        volatile double sink = 0.0;
        SpeedupRow row;
        row.samples = n;
        row.naive_seconds = best([&] { sink = sink + naive_prefix_signatures(v, depth).rows(n - 1, 1); });
        row.streamed_seconds = best([&] { sink = sink + stream_prefix_signatures(v, depth).rows(n - 1, 1); });
        row.ratio = row.naive_seconds / row.streamed_seconds;
        rows.push_back(row);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// gradient checks on small random instances

struct GradCheckSummary {
    std::vector<double> solver_errors;
    std::vector<double> lift_errors;
    double worst_solver = 0.0;
    double worst_lift = 0.0;
};

inline GradCheckSummary run_grad_checks(int instances, std::uint64_t seed, Index nodes = 10)
{
    GradCheckSummary out;
    Rng rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal;
    for (int i = 0; i < instances; ++i) {
        std::uint64_t s = rng();
        FbmConfig fc{nodes, 0.2 + 0.3 * unit(rng), 1.0, s};
        Path bm = fbm_davies_harte(fc);
        Mat path = detail::time_augmented(bm.grid(), bm.values());
        KernelSpec ks;
        ks.depth = 2;
        ks.sigma = 0.5 + unit(rng);
        ks.normalization = i % 3 == 2 ? Normalization::none : Normalization::robust;
        ks.flavor = i % 4 == 3 ? KernelFlavor::linear : KernelFlavor::rbf;
        NonlinearODESpec duff = duffing(1.0 + 5.0 * unit(rng), 2.0 * unit(rng), 0.5 + unit(rng), normal(rng), normal(rng));

        auto gram = std::make_shared<GramStack>(bm.grid(), bsk::gram(build_features(path, ks).normalized, ks), 2);
        NonlinearProblem prob(duff, gram, bm.values(), 1e-3 * unit(rng));
        Vec a0(nodes);
        for (Index k = 0; k < nodes; ++k) a0(k) = 0.3 * normal(rng);
        Vec g;
        prob.loss_and_grad(a0, g);
        auto fn = [&](const Vec& a) {
            Vec tmp;
            return prob.loss_and_grad(a, tmp);
        };
        out.solver_errors.push_back(grad_check(fn, a0, g).max_relative_error);

        LiftProblem lp;
        lp.method = i % 2 ? Method::derivative_ansatz : Method::volterra;
        lp.spec = duff.linear;
        if (i % 2) lp.term = duff.term;
        lp.kernel = ks;
        lp.grid = bm.grid();
        lp.path = path;
        lp.forcing = bm.values();
        lp.ridge = 1e-4;
        LiftTrainConfig tc;
        tc.gradient = GradientStrategy::tape;
        tc.hidden = {6};
        tc.extension_dim = 2;
        tc.lambda_shuffle = 0.1 + unit(rng);
        Mlp net = Mlp::glorot(path.cols(), tc.hidden, tc.extension_dim, s);
        Mat alpha(nodes, 1);
        for (Index k = 0; k < nodes; ++k) alpha(k, 0) = 0.3 * normal(rng);
        out.lift_errors.push_back(grad_check(lp, tc, net, alpha).max_relative_error);
    }
    for (double e : out.solver_errors) out.worst_solver = std::max(out.worst_solver, e);
    for (double e : out.lift_errors) out.worst_lift = std::max(out.worst_lift, e);
    return out;
}

}  // namespace bsk
