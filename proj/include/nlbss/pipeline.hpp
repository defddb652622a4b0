#pragma once

// Pipeline configuration (INI), versioned on-disk artifacts and the stage
// runners behind the command-line tool.

#include "nlbss/analysis.hpp"
#include "nlbss/core.hpp"

#include "json.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace nlbss {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int artifact_version = 1;

namespace artifact {
inline constexpr const char* sources = "sources.csv";
inline constexpr const char* mixtures = "mixtures.csv";
inline constexpr const char* measurements = "measurements.csv";
inline constexpr const char* pca = "pca.json";
inline constexpr const char* grid = "grid.json";
inline constexpr const char* frames = "frames.json";
inline constexpr const char* quiver = "quiver.csv";
inline constexpr const char* weights = "weights.csv";
inline constexpr const char* partitions = "partitions.json";
inline constexpr const char* map = "map.json";
inline constexpr const char* map_grid = "map_grid.csv";
inline constexpr const char* map_curves = "map_curves.csv";
inline constexpr const char* verdict = "verdict.json";
inline constexpr const char* report = "report.txt";
inline constexpr const char* report_table = "report.csv";
inline constexpr const char* summary = "summary.txt";
} // namespace artifact

// ---------------------------------------------------------------------------
// Configuration

struct PipelineConfig {
    SourceSpec source;
    MixingParams mixing;
    AnalysisConfig analysis;
    fs::path output_dir = "nlbss_out";
    std::optional<fs::path> mixtures_input; // external recording instead of gen + mix
    SeriesFormat recover_format = SeriesFormat::wav16;
    std::size_t curves_per_family = 9;

    void validate() const {
        auto positive = [](double v, const char* key) {
            if (!(v > 0.0) || !std::isfinite(v)) throw Error(Errc::config, std::string(key) + " must be positive");
        };
        if (source.samples < 3) throw Error(Errc::config, "source.samples must be at least 3");
        if (source.channels < 1) throw Error(Errc::config, "source.channels must be at least 1");
        positive(source.rate, "source.rate");
        for (auto b : analysis.grid.bins_per_dim)
            if (b < 2) throw Error(Errc::config, "grid.bins must be at least 2");
        if (!(analysis.grid.margin >= 0.0)) throw Error(Errc::config, "grid.margin must be non-negative");
        positive(analysis.frames.degeneracy_tol, "frames.degeneracy_tol");
        positive(analysis.frames.pd_rel_tol, "frames.pd_tol");
        positive(analysis.partition_threshold, "partition.threshold");
        positive(analysis.map.step_fraction, "map.step");
        positive(analysis.map.cross_tol, "map.cross_tol");
        positive(analysis.map.length_fraction, "map.max_length");
        if (analysis.map.max_steps < 1) throw Error(Errc::config, "map.max_steps must be at least 1");
        positive(analysis.separability_threshold, "separability.threshold");
        try {
            mixing.validate();
        } catch (const Error& e) {
            throw Error(Errc::config, std::string("mixing: ") + e.what());
        }
    }
};

/// Reads an INI file with sections source, mixing, grid, frames, partition,
/// map, separability, input and output. Missing keys keep their defaults;
/// malformed values and unknown keys are configuration errors.
inline PipelineConfig load_config(const fs::path& path) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
        pt::read_ini(path.string(), tree);
    } catch (const pt::ini_parser_error& e) {
        throw Error(Errc::config, e.what());
    }
    PipelineConfig cfg;
    auto& c = cfg;
    const std::vector<std::pair<std::string, std::vector<std::string>>> known{
        {"source", {"kind", "channels", "samples", "rate", "seed", "coupling"}},
        {"mixing", {"a1", "b1", "c1", "p1", "a2", "b2", "c2", "d2", "p2", "lo1", "hi1", "lo2", "hi2"}},
        {"grid", {"bins", "min_count", "margin"}},
        {"frames", {"degeneracy_tol", "pd_tol"}},
        {"partition", {"threshold"}},
        {"map", {"step", "cross_tol", "max_steps", "max_length", "curves"}},
        {"separability", {"threshold"}},
        {"input", {"mixtures"}},
        {"output", {"dir", "recover_format"}},
        {"run", {"threads"}},
    };
    for (const auto& [section, body] : tree) {
        const auto it = std::find_if(known.begin(), known.end(), [&](const auto& k) { return k.first == section; });
        if (it == known.end()) throw Error(Errc::config, "unknown section [" + section + "]");
        for (const auto& [key, _] : body)
            if (std::find(it->second.begin(), it->second.end(), key) == it->second.end())
                throw Error(Errc::config, "unknown key " + section + "." + key);
    }
    auto num = [&](const std::string& key, double& out) {
        if (auto v = tree.get_optional<std::string>(key)) {
            try {
                std::size_t used = 0;
                out = std::stod(*v, &used);
                if (used != v->size()) throw std::invalid_argument(*v);
            } catch (const std::exception&) {
                throw Error(Errc::config, key + ": not a number '" + *v + "'");
            }
        }
    };
    auto count = [&](const std::string& key, auto& out) {
        if (auto v = tree.get_optional<std::string>(key)) {
            unsigned long long parsed = 0;
            const auto res = std::from_chars(v->data(), v->data() + v->size(), parsed);
            if (res.ec != std::errc{} || res.ptr != v->data() + v->size())
                throw Error(Errc::config, key + ": expected a non-negative integer, got '" + *v + "'");
            out = static_cast<std::remove_reference_t<decltype(out)>>(parsed);
        }
    };
    if (auto k = tree.get_optional<std::string>("source.kind")) {
        try {
            c.source.kind = parse_source_kind(*k);
        } catch (const Error& e) {
            throw Error(Errc::config, e.what());
        }
    }
    count("source.channels", c.source.channels);
    count("source.samples", c.source.samples);
    num("source.rate", c.source.rate);
    count("source.seed", c.source.seed);
    num("source.coupling", c.source.coupling);
    auto& m = c.mixing;
    num("mixing.a1", m.a1), num("mixing.b1", m.b1), num("mixing.c1", m.c1), num("mixing.p1", m.p1);
    num("mixing.a2", m.a2), num("mixing.b2", m.b2), num("mixing.c2", m.c2), num("mixing.d2", m.d2);
    num("mixing.p2", m.p2);
    num("mixing.lo1", m.lo[0]), num("mixing.hi1", m.hi[0]), num("mixing.lo2", m.lo[1]), num("mixing.hi2", m.hi[1]);
    std::size_t bins = c.analysis.grid.bins_per_dim[0];
    count("grid.bins", bins);
    c.analysis.grid.bins_per_dim = {bins};
    count("grid.min_count", c.analysis.grid.min_count);
    num("grid.margin", c.analysis.grid.margin);
    num("frames.degeneracy_tol", c.analysis.frames.degeneracy_tol);
    num("frames.pd_tol", c.analysis.frames.pd_rel_tol);
    num("partition.threshold", c.analysis.partition_threshold);
    num("map.step", c.analysis.map.step_fraction);
    num("map.cross_tol", c.analysis.map.cross_tol);
    count("map.max_steps", c.analysis.map.max_steps);
    num("map.max_length", c.analysis.map.length_fraction);
    count("map.curves", c.curves_per_family);
    num("separability.threshold", c.analysis.separability_threshold);
    count("run.threads", c.analysis.threads);
    if (auto p = tree.get_optional<std::string>("input.mixtures"); p && !p->empty()) c.mixtures_input = *p;
    if (auto p = tree.get_optional<std::string>("output.dir"); p && !p->empty()) c.output_dir = *p;
    if (auto f = tree.get_optional<std::string>("output.recover_format")) {
        try {
            c.recover_format = parse_series_format(*f);
        } catch (const Error& e) {
            throw Error(Errc::config, e.what());
        }
    }
    cfg.validate();
    return cfg;
}

/// The configuration as INI text; load_config(dump) reproduces it.
inline std::string dump_config(const PipelineConfig& c) {
    std::ostringstream os;
    const auto& m = c.mixing;
    const auto& a = c.analysis;
    auto d = [](double v) { return format_double(v); };
    os << "[source]\nkind=" << to_string(c.source.kind) << "\nchannels=" << c.source.channels
       << "\nsamples=" << c.source.samples << "\nrate=" << d(c.source.rate) << "\nseed=" << c.source.seed
       << "\ncoupling=" << d(c.source.coupling) << "\n\n";
    os << "[mixing]\na1=" << d(m.a1) << "\nb1=" << d(m.b1) << "\nc1=" << d(m.c1) << "\np1=" << d(m.p1)
       << "\na2=" << d(m.a2) << "\nb2=" << d(m.b2) << "\nc2=" << d(m.c2) << "\nd2=" << d(m.d2) << "\np2=" << d(m.p2)
       << "\nlo1=" << d(m.lo[0]) << "\nhi1=" << d(m.hi[0]) << "\nlo2=" << d(m.lo[1]) << "\nhi2=" << d(m.hi[1])
       << "\n\n";
    os << "[grid]\nbins=" << a.grid.bins_per_dim[0] << "\nmin_count=" << a.grid.min_count
       << "\nmargin=" << d(a.grid.margin) << "\n\n";
    os << "[frames]\ndegeneracy_tol=" << d(a.frames.degeneracy_tol) << "\npd_tol=" << d(a.frames.pd_rel_tol)
       << "\n\n";
    os << "[partition]\nthreshold=" << d(a.partition_threshold) << "\n\n";
    os << "[map]\nstep=" << d(a.map.step_fraction) << "\ncross_tol=" << d(a.map.cross_tol)
       << "\nmax_steps=" << a.map.max_steps << "\nmax_length=" << d(a.map.length_fraction)
       << "\ncurves=" << c.curves_per_family << "\n\n";
    os << "[separability]\nthreshold=" << d(a.separability_threshold) << "\n\n";
    if (c.mixtures_input) os << "[input]\nmixtures=" << c.mixtures_input->string() << "\n\n";
    os << "[output]\ndir=" << c.output_dir.string()
       << "\nrecover_format=" << (c.recover_format == SeriesFormat::wav16 ? "wav16" : "csv") << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// JSON helpers

namespace detail {

inline json to_json(const Vector& v) {
    json j = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) j.push_back(v(i));
    return j;
}
inline json to_json(const Matrix& m) {
    json j = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        j.push_back(row);
    }
    return j;
}
inline Vector vector_from(const json& j) {
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
    return v;
}
inline Matrix matrix_from(const json& j) {
    const auto rows = j.size(), cols = rows ? j[0].size() : 0;
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < rows; ++r) {
        if (j[r].size() != cols) throw Error(Errc::malformed_file, "ragged matrix in artifact");
        for (std::size_t c = 0; c < cols; ++c)
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = j[r][c].get<double>();
    }
    return m;
}
inline json nullable(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
inline double from_nullable(const json& j) {
    return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline json geometry_json(const GridGeometry& g) {
    return {{"bins", g.bins()}, {"lo", g.lower()}, {"hi", g.upper()}};
}
inline GridGeometry geometry_from(const json& j) {
    return {j.at("bins").get<std::vector<std::size_t>>(), j.at("lo").get<std::vector<double>>(),
            j.at("hi").get<std::vector<double>>()};
}

inline json streamline_json(const Streamline& s) {
    json pts = json::array();
    for (const auto& p : s.points) pts.push_back(to_json(p));
    return {{"points", pts}, {"param", s.param}};
}
inline Streamline streamline_from(const json& j) {
    Streamline s;
    for (const auto& p : j.at("points")) s.points.push_back(vector_from(p));
    s.param = j.at("param").get<std::vector<double>>();
    return s;
}

inline json partition_json(const Partition& p) {
    return {{"first", p.first}, {"second", p.second}, {"score", p.score}};
}
inline Partition partition_from(const json& j) {
    return {j.at("first").get<IndexSet>(), j.at("second").get<IndexSet>(), j.at("score").get<double>()};
}

} // namespace detail

// ---------------------------------------------------------------------------
// Artifact store

class ArtifactStore {
public:
    explicit ArtifactStore(fs::path dir) : dir_(std::move(dir)) {}

    const fs::path& dir() const noexcept { return dir_; }
    fs::path path(const std::string& name) const { return dir_ / name; }
    bool has(const std::string& name) const { return fs::exists(path(name)); }

    void ensure_dir() const {
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) throw Error(Errc::io, "cannot create output directory " + dir_.string() + ": " + ec.message());
    }

    void require(const std::string& name) const {
        if (!has(name)) throw Error(Errc::missing_artifact, "missing artifact " + path(name).string());
    }

    void write_json(const std::string& name, const std::string& schema, json body) const {
        ensure_dir();
        body["schema"] = "nlbss." + schema;
        body["version"] = artifact_version;
        std::ofstream out(path(name));
        if (!out) throw Error(Errc::io, "cannot write " + path(name).string());
        out << body.dump(1) << '\n';
    }

    json read_json(const std::string& name, const std::string& schema) const {
        require(name);
        std::ifstream in(path(name));
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw Error(Errc::malformed_file, path(name).string() + ": " + e.what());
        }
        check_version(name, j.value("schema", std::string{}), j.value("version", -1), schema);
        return j;
    }

    void write_series(const std::string& name, const TimeSeries& s) const {
        ensure_dir();
        store_series(s, path(name), SeriesFormat::csv, series_tag());
    }

    TimeSeries read_series(const std::string& name) const {
        require(name);
        std::ifstream in(path(name));
        std::string first;
        std::getline(in, first);
        if (first.rfind("# nlbss.", 0) != 0)
            throw Error(Errc::version_mismatch, path(name).string() + ": not a versioned series artifact");
        std::istringstream tag(first.substr(2));
        std::string schema, version;
        tag >> schema >> version;
        const int v = version.size() > 1 && version[0] == 'v' ? std::atoi(version.c_str() + 1) : -1;
        check_version(name, schema, v, "series");
        return load_series(path(name), SeriesFormat::csv);
    }

    template <class Writer>
    void write_text(const std::string& name, Writer&& writer) const {
        ensure_dir();
        std::ofstream out(path(name));
        if (!out) throw Error(Errc::io, "cannot write " + path(name).string());
        writer(out);
        if (!out) throw Error(Errc::io, "write failed for " + path(name).string());
    }

private:
    static std::string series_tag() { return "nlbss.series v" + std::to_string(artifact_version); }

    void check_version(const std::string& name, const std::string& got_schema, int got_version,
                       const std::string& schema) const {
        if (got_schema != "nlbss." + schema || got_version != artifact_version)
            throw Error(Errc::version_mismatch, path(name).string() + ": expected nlbss." + schema + " v" +
                                                    std::to_string(artifact_version) + ", found " +
                                                    (got_schema.empty() ? "unversioned" : got_schema) + " v" +
                                                    std::to_string(got_version));
    }

    fs::path dir_;
};

// ---------------------------------------------------------------------------
// (De)serialization of stage results

inline json pca_json(const PcaRecord& p) {
    return {{"mean", detail::to_json(p.mean)}, {"rotation", detail::to_json(p.rotation)},
            {"scales", detail::to_json(p.scales)}};
}
inline PcaRecord pca_from(const json& j) {
    return {detail::vector_from(j.at("mean")), detail::matrix_from(j.at("rotation")),
            detail::vector_from(j.at("scales"))};
}

inline json grid_json(const BinGrid& g) {
    json bins = json::array();
    for (const auto& b : g.bins)
        bins.push_back({{"count", b.count},
                        {"valid", b.valid},
                        {"mean", detail::to_json(b.mean)},
                        {"c2", detail::to_json(b.c2)},
                        {"c4", b.c4.values()},
                        {"centered_first", b.centered_first}});
    return {{"geometry", detail::geometry_json(g.geometry)},
            {"min_count", g.min_count},
            {"in_bounds", g.in_bounds},
            {"bins", bins}};
}

inline BinGrid grid_from(const json& j) {
    BinGrid g;
    g.geometry = detail::geometry_from(j.at("geometry"));
    g.min_count = j.at("min_count").get<std::size_t>();
    g.in_bounds = j.at("in_bounds").get<std::size_t>();
    const auto& bins = j.at("bins");
    if (bins.size() != g.geometry.total()) throw Error(Errc::malformed_file, "grid artifact has wrong bin count");
    for (const auto& b : bins) {
        BinStats s;
        s.count = b.at("count").get<std::size_t>();
        s.valid = b.at("valid").get<bool>();
        s.mean = detail::vector_from(b.at("mean"));
        s.c2 = detail::matrix_from(b.at("c2"));
        s.c4 = SymmetricTensor4(g.dims());
        const auto vals = b.at("c4").get<std::vector<double>>();
        if (vals.size() != s.c4.size()) throw Error(Errc::malformed_file, "grid artifact has wrong quartic size");
        for (std::size_t m = 0; m < vals.size(); ++m) s.c4.value(m) = vals[m];
        s.centered_first = b.at("centered_first").get<double>();
        g.bins.push_back(std::move(s));
    }
    return g;
}

inline json frames_json(const FrameField& f) {
    json frames = json::array();
    for (std::size_t i = 0; i < f.frames.size(); ++i) {
        const auto& fr = f.frames[i];
        json e = {{"valid", fr.valid},
                  {"degenerate", fr.degenerate},
                  {"filled", fr.filled},
                  {"count", f.counts[i]},
                  {"perm", f.alignment[i].perm},
                  {"sign", f.alignment[i].sign}};
        if (fr.M.size() > 0) {
            e["M"] = detail::to_json(fr.M);
            e["D"] = detail::to_json(fr.D);
        }
        frames.push_back(std::move(e));
    }
    return {{"geometry", detail::geometry_json(f.geometry)}, {"root", f.root}, {"frames", frames}};
}

inline FrameField frames_from(const json& j) {
    FrameField f;
    f.geometry = detail::geometry_from(j.at("geometry"));
    f.root = j.at("root").get<std::size_t>();
    const auto& frames = j.at("frames");
    if (frames.size() != f.geometry.total()) throw Error(Errc::malformed_file, "frames artifact has wrong bin count");
    for (const auto& e : frames) {
        LocalFrame fr;
        fr.valid = e.at("valid").get<bool>();
        fr.degenerate = e.at("degenerate").get<bool>();
        fr.filled = e.at("filled").get<bool>();
        if (e.contains("M")) {
            fr.M = detail::matrix_from(e.at("M"));
            fr.D = detail::vector_from(e.at("D"));
        } else if (fr.valid) {
            throw Error(Errc::malformed_file, "valid frame without a matrix");
        }
        f.frames.push_back(std::move(fr));
        f.counts.push_back(e.at("count").get<std::size_t>());
        f.alignment.push_back({e.at("perm").get<std::vector<std::size_t>>(), e.at("sign").get<std::vector<int>>()});
    }
    f.finalize();
    return f;
}

inline json partitions_json(const PartitionResult& p, const WeightSeries& w, double threshold) {
    json acc = json::array();
    for (const auto& q : p.accepted) acc.push_back(detail::partition_json(q));
    json cand = json::array();
    for (const auto& q : p.candidates()) cand.push_back(detail::partition_json(q));
    return {{"correlation", detail::to_json(p.corr)},
            {"threshold", threshold},
            {"accepted", acc},
            {"candidates", cand},
            {"forced", p.forced},
            {"samples", w.size()},
            {"dropped", w.dropped}};
}

inline PartitionResult partitions_from(const json& j) {
    PartitionResult p;
    p.corr = detail::matrix_from(j.at("correlation"));
    for (const auto& q : j.at("accepted")) p.accepted.push_back(detail::partition_from(q));
    p.forced = j.at("forced").get<bool>();
    return p;
}

inline json map_json(const CoordinateMap& m) {
    json u = json::array();
    for (double v : m.u) u.push_back(detail::nullable(v));
    std::vector<int> support(m.in_support.begin(), m.in_support.end());
    return {{"nodes_per_dim", m.nodes_per_dim},
            {"lo", m.lo},
            {"hi", m.hi},
            {"bin_width", m.bin_width},
            {"step", m.step},
            {"x0", detail::to_json(m.x0)},
            {"partition", detail::partition_json(m.partition)},
            {"columns", m.columns},
            {"gamma1", detail::streamline_json(m.gamma1)},
            {"gamma2", detail::streamline_json(m.gamma2)},
            {"u", u},
            {"in_support", support}};
}

inline CoordinateMap map_from(const json& j) {
    CoordinateMap m;
    m.nodes_per_dim = j.at("nodes_per_dim").get<std::vector<std::size_t>>();
    m.lo = j.at("lo").get<std::vector<double>>();
    m.hi = j.at("hi").get<std::vector<double>>();
    if (m.nodes_per_dim.size() != 2 || m.lo.size() != 2 || m.hi.size() != 2)
        throw Error(Errc::malformed_file, "map artifact must be two-dimensional");
    m.bin_width = j.at("bin_width").get<double>();
    m.step = j.at("step").get<double>();
    m.x0 = detail::vector_from(j.at("x0"));
    m.partition = detail::partition_from(j.at("partition"));
    m.columns = j.at("columns").get<std::array<std::size_t, 2>>();
    m.gamma1 = detail::streamline_from(j.at("gamma1"));
    m.gamma2 = detail::streamline_from(j.at("gamma2"));
    for (const auto& v : j.at("u")) m.u.push_back(detail::from_nullable(v));
    for (int s : j.at("in_support").get<std::vector<int>>()) m.in_support.push_back(s != 0);
    if (m.u.size() != 2 * m.nodes_per_dim[0] * m.nodes_per_dim[1] || m.in_support.size() * 2 != m.u.size())
        throw Error(Errc::malformed_file, "map artifact has wrong node count");
    return m;
}

// ---------------------------------------------------------------------------
// Stages. Each reads its inputs from the store and writes its outputs.

struct StageContext {
    PipelineConfig cfg;
    ArtifactStore store;
    std::size_t threads = 0;
    std::optional<fs::path> quiver_out;

    explicit StageContext(PipelineConfig c) : cfg(std::move(c)), store(cfg.output_dir) {
        cfg.analysis.propagate_threads();
        threads = cfg.analysis.threads;
    }
};

inline void stage_gen(StageContext& ctx) {
    run_stage("gen", [&] { ctx.store.write_series(artifact::sources, generate_sources(ctx.cfg.source)); });
}

inline void stage_mix(StageContext& ctx) {
    run_stage("mix", [&] {
        if (ctx.cfg.mixtures_input) {
            const auto& p = *ctx.cfg.mixtures_input;
            ctx.store.write_series(artifact::mixtures, load_series(p, format_for_path(p)));
            return;
        }
        ctx.store.write_series(artifact::mixtures,
                               mix_sources(ctx.store.read_series(artifact::sources), ctx.cfg.mixing));
    });
}

inline void stage_bin(StageContext& ctx) {
    run_stage("bin", [&] {
        const auto [normalized, pca] = pca_normalize(ctx.store.read_series(artifact::mixtures));
        ctx.store.write_series(artifact::measurements, normalized);
        ctx.store.write_json(artifact::pca, "pca", pca_json(pca));
        const auto grid = build_grid(estimate_velocity(normalized), ctx.cfg.analysis.grid);
        ctx.store.write_json(artifact::grid, "grid", grid_json(grid));
    });
}

inline void stage_frames(StageContext& ctx) {
    run_stage("frames", [&] {
        const auto grid = grid_from(ctx.store.read_json(artifact::grid, "grid"));
        const auto field = make_frame_field(grid, ctx.cfg.analysis.frames);
        ctx.store.write_json(artifact::frames, "frames", frames_json(field));
        ctx.store.write_text(artifact::quiver, [&](std::ostream& os) { write_quiver(os, field); });
        if (ctx.quiver_out) {
            std::ofstream out(*ctx.quiver_out);
            if (!out) throw Error(Errc::io, "cannot write " + ctx.quiver_out->string());
            write_quiver(out, field);
        }
    });
}

inline void stage_weights(StageContext& ctx) {
    run_stage("weights", [&] {
        const auto field = frames_from(ctx.store.read_json(artifact::frames, "frames"));
        const auto phase = estimate_velocity(ctx.store.read_series(artifact::measurements));
        const auto w = compute_weights(phase, field, ctx.threads);
        ctx.store.write_text(artifact::weights, [&](std::ostream& os) { write_weights(os, w); });
        const auto parts = partition_stage(w, ctx.cfg.analysis.partition_threshold);
        ctx.store.write_json(artifact::partitions, "partitions",
                             partitions_json(parts, w, ctx.cfg.analysis.partition_threshold));
    });
}

inline void stage_map(StageContext& ctx) {
    run_stage("map", [&] {
        const auto field = frames_from(ctx.store.read_json(artifact::frames, "frames"));
        const auto parts = partitions_from(ctx.store.read_json(artifact::partitions, "partitions"));
        const auto maps = map_stage(field, parts, ctx.cfg.analysis.map);
        json list = json::array();
        for (const auto& m : maps) list.push_back(map_json(m));
        ctx.store.write_json(artifact::map, "map", {{"candidates", list}, {"forced", parts.forced}});
        ctx.store.write_text(artifact::map_grid, [&](std::ostream& os) { write_map_grid(os, maps.front()); });
        const auto curves = constant_u_curves(maps.front(), field, ctx.cfg.curves_per_family, ctx.cfg.analysis.map);
        ctx.store.write_text(artifact::map_curves, [&](std::ostream& os) { write_map_curves(os, curves); });
    });
}

struct StoredMaps {
    std::vector<CoordinateMap> candidates;
    bool forced = false;
};

inline StoredMaps read_maps(const ArtifactStore& store) {
    const auto j = store.read_json(artifact::map, "map");
    StoredMaps s;
    for (const auto& m : j.at("candidates")) s.candidates.push_back(map_from(m));
    s.forced = j.at("forced").get<bool>();
    return s;
}

inline Verdict stage_verify(StageContext& ctx) {
    return run_stage("verify", [&] {
        const auto maps = read_maps(ctx.store);
        const auto x = ctx.store.read_series(artifact::measurements);
        auto v = verdict_pipeline(x, maps.candidates, ctx.cfg.analysis.separability_threshold, ctx.threads);
        if (maps.forced) v.separable = false;
        ctx.store.write_text(artifact::report, [&](std::ostream& os) {
            write_report_text(os, v.report);
            os << "candidates=" << maps.candidates.size() << '\n'
               << "partition_forced=" << (maps.forced ? 1 : 0) << '\n'
               << "overall=" << (v.separable ? "separable" : "inseparable") << '\n';
        });
        ctx.store.write_text(artifact::report_table, [&](std::ostream& os) { write_report_csv(os, v.report); });
        ctx.store.write_json(artifact::verdict, "verdict",
                             {{"separable", v.separable},
                              {"best", v.best},
                              {"max_stat", detail::nullable(v.report.max_stat)},
                              {"threshold", v.report.threshold}});
        return v;
    });
}

struct RecoveryResult {
    std::vector<fs::path> outputs;
    std::size_t filled = 0; // samples with no defined map value, held from the previous one
    std::optional<Matrix> spearman; // recovered x true sources, when sources are available
    std::optional<SignedPermutation> matching;
};

/// Best signed permutation of a square correlation matrix (max sum |r|).
inline SignedPermutation match_correlations(const Matrix& r) {
    const auto n = static_cast<std::size_t>(r.rows());
    std::vector<std::size_t> perm(n), best;
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    double top = -1.0;
    do {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += std::abs(r(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(perm[i])));
        if (s > top) {
            top = s;
            best = perm;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    SignedPermutation p{best, std::vector<int>(n, 1)};
    for (std::size_t i = 0; i < n; ++i)
        if (r(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(best[i])) < 0.0) p.sign[i] = -1;
    return p;
}

inline RecoveryResult stage_recover(StageContext& ctx) {
    return run_stage("recover", [&] {
        const auto verdict = ctx.store.read_json(artifact::verdict, "verdict");
        if (!verdict.at("separable").get<bool>())
            throw Error(Errc::precondition, "verify did not find a separable coordinate map");
        const auto maps = read_maps(ctx.store);
        const auto& map = maps.candidates.at(verdict.at("best").get<std::size_t>());
        const auto x = ctx.store.read_series(artifact::measurements);
        const auto u = evaluate_map(map, x, ctx.threads);
        RecoveryResult r;
        std::vector<std::vector<double>> comps(2);
        for (std::size_t k = 0; k < 2; ++k) {
            auto col = u.column(k);
            double last = std::numeric_limits<double>::quiet_NaN();
            for (double v : col)
                if (std::isfinite(v)) {
                    last = v;
                    break;
                }
            for (double& v : col) {
                if (std::isfinite(v)) {
                    last = v;
                } else {
                    v = last;
                    if (k == 0) ++r.filled;
                }
            }
            comps[k] = std::move(col);
        }
        const bool wav = ctx.cfg.recover_format == SeriesFormat::wav16;
        for (std::size_t k = 0; k < 2; ++k) {
            std::vector<double> out = comps[k];
            if (wav) {
                const double mid = mean(out);
                double peak = 0.0;
                for (double v : out) peak = std::max(peak, std::abs(v - mid));
                for (double& v : out) v = peak > 0.0 ? (v - mid) * source_amplitude / peak : 0.0;
            }
            const fs::path p = ctx.store.path("recovered_" + std::to_string(k + 1) + (wav ? ".wav" : ".csv"));
            ctx.store.ensure_dir();
            store_series(TimeSeries(1, x.rate(), std::move(out)), p, ctx.cfg.recover_format);
            r.outputs.push_back(p);
        }
        if (!ctx.cfg.mixtures_input && ctx.store.has(artifact::sources)) {
            const auto s = ctx.store.read_series(artifact::sources);
            if (s.channels() == 2 && s.size() == x.size()) {
                Matrix rho(2, 2);
                for (std::size_t a = 0; a < 2; ++a)
                    for (std::size_t b = 0; b < 2; ++b)
                        rho(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
                            spearman(comps[a], s.channel(b));
                r.spearman = rho;
                r.matching = match_correlations(rho);
            }
        }
        return r;
    });
}

/// Full run: every stage in order, then summary.txt. The summary holds
/// only deterministic quantities (no timings or paths).
inline int run_pipeline(StageContext& ctx) {
    ctx.store.ensure_dir();
    ctx.store.write_text("config.ini", [&](std::ostream& os) { os << dump_config(ctx.cfg); });
    if (!ctx.cfg.mixtures_input) stage_gen(ctx);
    stage_mix(ctx);
    stage_bin(ctx);
    stage_frames(ctx);
    stage_weights(ctx);
    stage_map(ctx);
    const auto verdict = stage_verify(ctx);
    std::optional<RecoveryResult> rec;
    if (verdict.separable) rec = stage_recover(ctx);

    const auto grid = grid_from(ctx.store.read_json(artifact::grid, "grid"));
    const auto field = frames_from(ctx.store.read_json(artifact::frames, "frames"));
    const auto parts = ctx.store.read_json(artifact::partitions, "partitions");
    const auto maps = read_maps(ctx.store);
    ctx.store.write_text(artifact::summary, [&](std::ostream& os) {
        auto d = [](double v) { return format_double(v); };
        os << "samples=" << grid.in_bounds << '\n'
           << "bins=" << grid.bins.size() << '\n'
           << "valid_bins=" << field.valid_count() << '\n'
           << "degenerate_bins=" << field.degenerate_count() << '\n'
           << "filled_bins=" << field.filled_count() << '\n';
        const auto corr = detail::matrix_from(parts.at("correlation"));
        for (Eigen::Index a = 0; a < corr.rows(); ++a)
            for (Eigen::Index b = a + 1; b < corr.cols(); ++b)
                os << "weight_corr_" << a + 1 << "_" << b + 1 << "=" << d(corr(a, b)) << '\n';
        os << "partitions_accepted=" << parts.at("accepted").size() << '\n'
           << "partition_forced=" << (maps.forced ? 1 : 0) << '\n'
           << "map_defined_fraction=" << d(maps.candidates[verdict.best].defined_fraction()) << '\n'
           << "max_stat=" << d(verdict.report.max_stat) << '\n'
           << "max_entry=" << verdict.report.max_entry << '\n'
           << "threshold=" << d(verdict.report.threshold) << '\n'
           << "fluctuation_scale=" << d(verdict.report.fluctuation) << '\n'
           << "verdict=" << (verdict.separable ? "separable" : "inseparable") << '\n';
        if (rec) {
            os << "recovered_filled=" << rec->filled << '\n';
            if (rec->spearman) {
                const auto& p = *rec->matching;
                for (std::size_t i = 0; i < p.size(); ++i)
                    os << "recovery_spearman_u" << i + 1 << "_s" << p.perm[i] + 1 << "="
                       << d((*rec->spearman)(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p.perm[i])))
                       << '\n';
            }
        }
    });
    return 0;
}

} // namespace nlbss
