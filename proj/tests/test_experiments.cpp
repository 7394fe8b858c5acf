#include "bsk/experiments.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace bsk;

namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name)
{
    fs::path p = fs::temp_directory_path() / ("bsk_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string write_file(const fs::path& p, const std::string& body)
{
    std::ofstream out(p);
    out << body;
    return p.string();
}

std::string slurp(const std::string& file)
{
    std::ifstream in(file);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Index column(const Trace& t, const std::string& name)
{
    for (std::size_t c = 0; c < t.columns.size(); ++c)
        if (t.columns[c] == name) return static_cast<Index>(c);
    return -1;
}

}  // namespace

TEST(Config, DefaultsPerBenchmark)
{
    for (const auto& name : benchmark_names()) {
        ExperimentConfig c = ExperimentConfig::defaults(name);
        EXPECT_NO_THROW(c.validate()) << name;
        EXPECT_EQ(c.benchmark(), name);
    }
    EXPECT_EQ(ExperimentConfig::defaults("elcentro").integer("depth"), 12);
    EXPECT_EQ(ExperimentConfig::defaults("solow").integer("depth"), 3);
    EXPECT_EQ(ExperimentConfig::defaults("fbm-linear").integer("depth"), 3);
    EXPECT_EQ(ExperimentConfig::defaults("duffing").integer("depth"), 2);
    EXPECT_EQ(ExperimentConfig::defaults("arias").integer("depth"), 2);
    EXPECT_EQ(ExperimentConfig::defaults("kuramoto").integer("depth"), 2);
    EXPECT_THROW(ExperimentConfig::defaults("lorenz"), InvalidInput);
}

TEST(Config, ParseAndOverride)
{
    ExperimentConfig c = ExperimentConfig::parse("# comment\nbenchmark = solow\ndepth = 4  # inline\n\ncadence = never\n");
    EXPECT_EQ(c.integer("depth"), 4);
    EXPECT_EQ(c.integer("cadence"), std::numeric_limits<int>::max());
    c.apply_override("ridge=1e-8");
    EXPECT_EQ(c.num("ridge"), 1e-8);
    EXPECT_THROW(c.apply_override("nonsense=1"), InvalidInput);
    EXPECT_THROW(c.apply_override("depth"), InvalidInput);
    EXPECT_THROW(c.set("benchmark", "duffing"), InvalidInput);
}

TEST(Config, ParseErrorsNameLines)
{
    try {
        ExperimentConfig::parse("benchmark = solow\nthis line is broken\n", "x.cfg");
        FAIL();
    } catch (const InvalidInput& e) {
        EXPECT_NE(std::string(e.what()).find("x.cfg:2"), std::string::npos) << e.what();
    }
    EXPECT_THROW(ExperimentConfig::parse("depth = 3\n"), InvalidInput);
    EXPECT_THROW(ExperimentConfig::load("/nonexistent/file.cfg"), Error);
}

TEST(Config, ValidateRanges)
{
    ExperimentConfig c = ExperimentConfig::defaults("solow");
    c.set("train_fraction", "0");
    EXPECT_THROW(c.validate(), InvalidInput);
    c.set("train_fraction", "1.5");
    EXPECT_THROW(c.validate(), InvalidInput);
    c.set("train_fraction", "1");
    EXPECT_NO_THROW(c.validate());
    c.set("method", "III");
    EXPECT_THROW(c.validate(), InvalidInput);
}

TEST(Config, HashDeterministicAndSensitive)
{
    ExperimentConfig a = ExperimentConfig::defaults("duffing"), b = ExperimentConfig::defaults("duffing");
    EXPECT_EQ(a.hash(), b.hash());
    EXPECT_EQ(a.hash().size(), 16u);
    b.set("output_dir", "/elsewhere");
    EXPECT_EQ(a.hash(), b.hash());
    b.set("seed", "1");
    EXPECT_NE(a.hash(), b.hash());
}

TEST(Csv, Examples)
{
    fs::path dir = scratch_dir("csv");
    Path p = load_csv(write_file(dir / "ok.csv", "0,1.5\n0.02,2.0"));
    EXPECT_EQ(p.samples(), 2);
    EXPECT_EQ(p.dim(), 1);
    EXPECT_EQ(p.values()(1, 0), 2.0);
    Path h = load_csv(write_file(dir / "header.csv", "t,value\n0,1\n1,2\n2,3\n"));
    EXPECT_EQ(h.samples(), 3);
}

TEST(Csv, ErrorsNameLines)
{
    fs::path dir = scratch_dir("csv_bad");
    auto expect_line = [&](const std::string& body, const std::string& where) {
        try {
            load_csv(write_file(dir / "bad.csv", body));
            FAIL() << body;
        } catch (const InvalidInput& e) {
            EXPECT_NE(std::string(e.what()).find(where), std::string::npos) << e.what();
        }
    };
    expect_line("0,1\n1,2\n1,3\n", "bad.csv:3");
    expect_line("0,1\n1,x\n", "bad.csv:2");
    expect_line("0,1\n1,2,3\n", "bad.csv:2");
    expect_line("", "no data rows");
    EXPECT_THROW(load_csv((dir / "missing.csv").string()), Error);
}

TEST(Reports, RoundTripAndHeaderOnlyTrace)
{
    Report r;
    r.benchmark = "solow";
    r.config_hash = "0123456789abcdef";
    r.config = {{"depth", "3"}, {"method", "II"}};
    r.metrics = {{"calibration.forcing", 1.2345678901234567e-9}, {"stream.retrains", 3}};
    r.notes = {{"data_source", "synthetic"}};
    r.runtime_seconds = 0.25;
    Report back = parse_report(report_text(r));
    EXPECT_EQ(back.benchmark, r.benchmark);
    EXPECT_EQ(back.config_hash, r.config_hash);
    EXPECT_EQ(back.config, r.config);
    EXPECT_EQ(back.metrics, r.metrics);
    EXPECT_EQ(back.notes, r.notes);
    EXPECT_EQ(back.runtime_seconds, r.runtime_seconds);

    r.trace.columns = {"t", "u_hat"};
    r.trace.rows.resize(0, 2);
    fs::path dir = scratch_dir("report");
    ReportFiles files = write_report(r, dir.string());
    EXPECT_NE(files.report.find("solow-0123456789abcdef"), std::string::npos);
    EXPECT_EQ(slurp(files.trace), "t,u_hat\n");
    EXPECT_EQ(read_report(files.report).metrics, r.metrics);
    EXPECT_THROW(parse_report("garbage\n"), InvalidInput);
}

TEST(Experiment, SolowDeterministicReport)
{
    ExperimentConfig c = ExperimentConfig::defaults("solow");
    c.set("mode", "calibrate");
    c.set("samples", "120");
    ExperimentResult a = run_experiment(c), b = run_experiment(c);
    EXPECT_EQ(report_body(a.report), report_body(b.report));
    EXPECT_EQ(trace_csv(a.report.trace), trace_csv(b.report.trace));
    for (const char* key : {"calibration.forcing", "calibration.solution"}) {
        ASSERT_TRUE(a.report.metrics.count(key)) << key;
        EXPECT_GE(a.report.metrics.at(key), 0.0);
    }
}

TEST(Experiment, StreamSplitsAndStageErrors)
{
    ExperimentConfig c = ExperimentConfig::defaults("fbm-linear");
    c.set("lift", "none");
    c.set("samples", "200");
    ExperimentResult r = run_experiment(c);
    for (const char* key : {"train.forcing", "train.solution", "test.solution", "test.forcing", "stream.retrains"})
        EXPECT_TRUE(r.report.metrics.count(key)) << key;
    const Trace& t = r.report.trace;
    Index sc = column(t, "split");
    ASSERT_GE(sc, 0);
    EXPECT_EQ(t.rows.rows(), 200);
    EXPECT_EQ(t.rows(139, sc), 0.0);
    EXPECT_EQ(t.rows(140, sc), 1.0);

    c.set("window", "500");
    try {
        run_experiment(c);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("config"), std::string::npos) << e.what();
    }
    ExperimentConfig bad = ExperimentConfig::defaults("solow");
    bad.set("data", "/nonexistent/gdp.csv");
    try {
        run_experiment(bad);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(std::string(e.what()).rfind("data:", 0), 0u) << e.what();
    }
}

TEST(Experiment, KuramotoTraceHasThreeOscillators)
{
    ExperimentConfig c = ExperimentConfig::defaults("kuramoto");
    c.set("lift", "none");
    c.set("samples", "150");
    ExperimentResult r = run_experiment(c);
    for (const char* name : {"u_hat_1", "u_hat_2", "u_hat_3", "u_ref_1", "u_ref_3", "f_hat_2"})
        EXPECT_GE(column(r.report.trace, name), 0) << name;
    EXPECT_LT(column(r.report.trace, "u_hat_4"), 0);
}

TEST(Experiment, DuffingGammaZeroMatchesLinear)
{
    ExperimentConfig c = ExperimentConfig::defaults("duffing");
    c.set("gamma", "0");
    c.set("lift", "none");
    c.set("mode", "calibrate");
    c.set("samples", "120");
    c.set("lbfgs_tolerance", "1e-14");
    c.set("lbfgs_iterations", "2000");
    ExperimentResult r = run_experiment(c);

    Dataset ds = make_dataset(c);
    KernelSpec ks = detail::kernel_from(c);
    Mat path = detail::time_augmented(ds.grid, ds.channels);
    auto g = std::make_shared<GramStack>(ds.grid, gram(build_features(path, ks).normalized, ks), 2);
    SolveOptions opt;
    opt.ridge = c.num("ridge");
    Mat lin = reconstruct_derivative(fit_linear(Method::derivative_ansatz, ds.spec, g, ds.forcing, opt), 0);
    Index uc = column(r.report.trace, "u_hat");
    ASSERT_GE(uc, 0);
    Vec nl = r.report.trace.rows.col(uc);
    EXPECT_LE((nl - lin.col(0)).cwiseAbs().maxCoeff(), 1e-6 * lin.cwiseAbs().maxCoeff());
}

TEST(Experiment, CsvDataFeedsSolow)
{
    fs::path dir = scratch_dir("solow_csv");
    std::string body = "year,gdp\n";
    for (int i = 0; i < 60; ++i) body += std::to_string(i) + "," + std::to_string(3.0 + 0.1 * i + 0.01 * i * i) + "\n";
    ExperimentConfig c = ExperimentConfig::defaults("solow");
    c.set("data", write_file(dir / "gdp.csv", body));
    c.set("mode", "calibrate");
    ExperimentResult r = run_experiment(c);
    EXPECT_EQ(r.report.notes.at("data_source").find("synthetic"), std::string::npos);
    EXPECT_EQ(r.report.trace.rows.rows(), 60);
}

TEST(Speedup, TrivialSizesAndGate)
{
    auto rows = bench_speedup({2, 50}, 2, 3, 1);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].samples, 2);
    EXPECT_GT(rows[0].ratio, 0.0);
    EXPECT_LT(rows[0].ratio, 3.0);
    EXPECT_GT(rows[1].ratio, 1.0);
    EXPECT_THROW(bench_speedup({1}, 2, 3, 1), InvalidInput);
}
