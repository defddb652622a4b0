#pragma once

// Time-series containers, synthetic sources, the two-channel nonlinear
// mixing map, PCA whitening and CSV / 16-bit WAV file access.

#include "nlbss/core.hpp"
#include "nlbss/linalg.hpp"
#include "nlbss/numeric.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace nlbss {

/// Uniformly sampled N-channel real signal, stored row-major (time-major).
class TimeSeries {
public:
    TimeSeries(std::size_t channels, double rate, std::vector<double> data)
        : channels_(channels), rate_(rate), data_(std::move(data)) {
        if (channels_ == 0) throw Error(Errc::invalid_argument, "time series needs at least one channel");
        if (!(rate_ > 0.0) || !std::isfinite(rate_))
            throw Error(Errc::invalid_argument, "sample rate must be positive");
        if (data_.size() % channels_ != 0)
            throw Error(Errc::shape_mismatch, "sample buffer is not a whole number of frames");
        if (size() < 3) throw Error(Errc::invalid_argument, "time series needs at least 3 samples");
        for (std::size_t i = 0; i < data_.size(); ++i)
            if (!std::isfinite(data_[i]))
                throw Error(Errc::invalid_argument,
                            "non-finite value at sample " + std::to_string(i / channels_) + ", channel " +
                                std::to_string(i % channels_));
    }

    std::size_t channels() const noexcept { return channels_; }
    std::size_t size() const noexcept { return data_.size() / channels_; }
    double rate() const noexcept { return rate_; }

    double operator()(std::size_t t, std::size_t k) const { return data_[t * channels_ + k]; }
    std::span<const double> sample(std::size_t t) const { return {data_.data() + t * channels_, channels_}; }
    Eigen::Map<const Vector> vec(std::size_t t) const {
        return {data_.data() + t * channels_, static_cast<Eigen::Index>(channels_)};
    }
    const std::vector<double>& data() const noexcept { return data_; }

    std::vector<double> channel(std::size_t k) const {
        std::vector<double> out(size());
        for (std::size_t t = 0; t < out.size(); ++t) out[t] = (*this)(t, k);
        return out;
    }

    /// New series holding the listed channels, in order.
    TimeSeries select(const IndexSet& ks) const {
        std::vector<double> out;
        out.reserve(size() * ks.size());
        for (std::size_t t = 0; t < size(); ++t)
            for (std::size_t k : ks) {
                if (k >= channels_) throw Error(Errc::invalid_argument, "channel index out of range");
                out.push_back((*this)(t, k));
            }
        return {ks.size(), rate_, std::move(out)};
    }

private:
    std::size_t channels_;
    double rate_;
    std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Sources

enum class SourceKind { constant_zero, ar2_noise, ar2_coupled };

inline SourceKind parse_source_kind(std::string_view name) {
    if (name == "constant-zero") return SourceKind::constant_zero;
    if (name == "ar2-noise") return SourceKind::ar2_noise;
    if (name == "ar2-coupled") return SourceKind::ar2_coupled;
    throw Error(Errc::invalid_argument, "unknown source kind '" + std::string(name) + "'");
}

inline std::string_view to_string(SourceKind kind) {
    switch (kind) {
    case SourceKind::constant_zero: return "constant-zero";
    case SourceKind::ar2_noise: return "ar2-noise";
    case SourceKind::ar2_coupled: return "ar2-coupled";
    }
    return "?";
}

struct SourceSpec {
    SourceKind kind = SourceKind::ar2_noise;
    std::size_t channels = 2;
    std::size_t samples = 500000;
    double rate = 16000.0;
    std::uint64_t seed = 7;
    /// ar2-coupled only: every channel k > 0 receives coupling * e_0 in its
    /// innovation sequence.
    double coupling = 1.5;
};

/// Largest amplitude of a generated channel (2^15 - 1, fits wav16).
inline constexpr double source_amplitude = 32767.0;

namespace detail {

enum class Drive { laplace, uniform };

struct ChannelProfile {
    Drive drive;
    double a1; // y[n] = e[n] - a1*y[n-1] - a2*y[n-2]
    double a2;
};

inline ChannelProfile real_poles(Drive d, double p, double q) { return {d, -(p + q), p * q}; }
inline ChannelProfile resonant(Drive d, double r, double theta) { return {d, -2.0 * r * std::cos(theta), r * r}; }

/// Per-channel AR(2) designs. Channel 0 is low-pass with heavy-tailed
/// innovations; channel 1 is a narrow resonance with light-tailed
/// innovations. Their local velocity kurtoses differ and their spectra
/// barely overlap.
inline ChannelProfile channel_profile(std::size_t k) {
    switch (k) {
    case 0: return real_poles(Drive::laplace, 0.99, 0.5);
    case 1: return resonant(Drive::uniform, 0.995, 0.10);
    case 2: return resonant(Drive::laplace, 0.98, 0.35);
    case 3: return real_poles(Drive::uniform, 0.98, 0.3);
    default:
        return resonant(k % 2 == 0 ? Drive::laplace : Drive::uniform, 0.98,
                        0.35 + 0.15 * static_cast<double>(k - 3));
    }
}

/// Uniform double in [0, 1) from the top 53 bits; portable across
/// standard libraries, unlike std:: distributions.
inline double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Unit-variance innovation.
inline double innovation(Drive d, std::mt19937_64& rng) {
    const double u = unit_uniform(rng);
    if (d == Drive::uniform) return std::sqrt(3.0) * (2.0 * u - 1.0);
    const double c = u - 0.5;
    const double mag = -std::log1p(-2.0 * std::abs(c)) / std::sqrt(2.0);
    return c < 0.0 ? -mag : mag;
}

} // namespace detail

inline TimeSeries generate_sources(const SourceSpec& spec) {
    if (spec.samples < 3) throw Error(Errc::invalid_argument, "source length must be at least 3");
    if (!(spec.rate > 0.0)) throw Error(Errc::invalid_argument, "source rate must be positive");
    if (spec.channels == 0) throw Error(Errc::invalid_argument, "source needs at least one channel");
    const std::size_t n = spec.channels, total = spec.samples;
    std::vector<double> data(n * total, 0.0);
    if (spec.kind == SourceKind::constant_zero) return {n, spec.rate, std::move(data)};

    constexpr std::size_t burn_in = 2000;
    std::mt19937_64 rng(spec.seed);
    std::vector<detail::ChannelProfile> profiles;
    for (std::size_t k = 0; k < n; ++k) profiles.push_back(detail::channel_profile(k));
    std::vector<double> y1(n, 0.0), y2(n, 0.0), e(n, 0.0);
    const double coupling = spec.kind == SourceKind::ar2_coupled ? spec.coupling : 0.0;
    for (std::size_t t = 0; t < burn_in + total; ++t) {
        for (std::size_t k = 0; k < n; ++k) e[k] = detail::innovation(profiles[k].drive, rng);
        for (std::size_t k = 1; k < n; ++k) e[k] += coupling * e[0];
        for (std::size_t k = 0; k < n; ++k) {
            const double y = e[k] - profiles[k].a1 * y1[k] - profiles[k].a2 * y2[k];
            y2[k] = y1[k];
            y1[k] = y;
            if (t >= burn_in) data[(t - burn_in) * n + k] = y;
        }
    }
    for (std::size_t k = 0; k < n; ++k) {
        double peak = 0.0;
        for (std::size_t t = 0; t < total; ++t) peak = std::max(peak, std::abs(data[t * n + k]));
        if (peak > 0.0)
            for (std::size_t t = 0; t < total; ++t) data[t * n + k] *= source_amplitude / peak;
    }
    return {n, spec.rate, std::move(data)};
}

// ---------------------------------------------------------------------------
// Mixing

/// Two-channel nonlinear mixing map
///   f1(s) = a1*s1 + (b1 - c1*s2)^p1
///   f2(s) = a2*s2 + (b2 - c2*s1 - d2*s2)^p2
/// on the box [lo1, hi1] x [lo2, hi2]. Defaults give the reference mixture.
struct MixingParams {
    double a1 = 0.763, b1 = 958.0, c1 = 0.0225, p1 = 1.5;
    double a2 = 0.153, b2 = 3.75e7, c2 = 763.0, d2 = 229.0, p2 = 0.5;
    std::array<double, 2> lo{-32768.0, -32768.0};
    std::array<double, 2> hi{32768.0, 32768.0};

    /// Throws Errc::domain unless both radicands are strictly positive over
    /// the whole box. They are affine in s, so checking corners suffices.
    void validate() const {
        for (int k = 0; k < 2; ++k)
            if (!(lo[k] < hi[k])) throw Error(Errc::invalid_argument, "mixing domain box is empty");
        for (double s1 : {lo[0], hi[0]})
            for (double s2 : {lo[1], hi[1]}) {
                if (!(radicand1(s2) > 0.0))
                    throw Error(Errc::domain, "first radicand is not positive over the domain box");
                if (!(radicand2(s1, s2) > 0.0))
                    throw Error(Errc::domain, "second radicand is not positive over the domain box");
            }
    }

    double radicand1(double s2) const { return b1 - c1 * s2; }
    double radicand2(double s1, double s2) const { return b2 - c2 * s1 - d2 * s2; }

    std::array<double, 2> apply(double s1, double s2) const {
        const double r1 = radicand1(s2), r2 = radicand2(s1, s2);
        if (!(r1 > 0.0) || !(r2 > 0.0)) throw Error(Errc::domain, "radicand is not positive");
        return {a1 * s1 + std::pow(r1, p1), a2 * s2 + std::pow(r2, p2)};
    }
};

inline TimeSeries mix_sources(const TimeSeries& s, const MixingParams& params) {
    if (s.channels() != 2) throw Error(Errc::invalid_argument, "mixing needs exactly two source channels");
    params.validate();
    std::vector<double> out(s.data().size());
    for (std::size_t t = 0; t < s.size(); ++t) {
        for (std::size_t k = 0; k < 2; ++k) {
            const double v = s(t, k);
            if (v < params.lo[k] || v > params.hi[k])
                throw Error(Errc::domain, "sample " + std::to_string(t) + ", channel " + std::to_string(k) +
                                              " lies outside the mixing domain box");
        }
        const auto f = params.apply(s(t, 0), s(t, 1));
        out[2 * t] = f[0];
        out[2 * t + 1] = f[1];
    }
    return {2, s.rate(), std::move(out)};
}

// ---------------------------------------------------------------------------
// PCA whitening

struct PcaRecord {
    Vector mean;
    Matrix rotation; // orthogonal, columns are principal axes (descending variance)
    Vector scales;   // standard deviation along each axis
};

/// y = diag(1/scales) * rotation^T * (x - mean), so the output has zero mean
/// and identity covariance (1/T normalization).
inline std::pair<TimeSeries, PcaRecord> pca_normalize(const TimeSeries& mix) {
    const std::size_t n = mix.channels(), total = mix.size();
    Vector mu(static_cast<Eigen::Index>(n));
    for (std::size_t k = 0; k < n; ++k) {
        NeumaierSum s;
        for (std::size_t t = 0; t < total; ++t) s.add(mix(t, k));
        mu(static_cast<Eigen::Index>(k)) = s.value() / static_cast<double>(total);
    }
    Matrix cov(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = a; b < n; ++b) {
            NeumaierSum s;
            const double ma = mu(static_cast<Eigen::Index>(a)), mb = mu(static_cast<Eigen::Index>(b));
            for (std::size_t t = 0; t < total; ++t) s.add((mix(t, a) - ma) * (mix(t, b) - mb));
            const double c = s.value() / static_cast<double>(total);
            cov(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = c;
            cov(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)) = c;
        }
    const auto eig = sorted_eigen(cov);
    const double largest = eig.values(0);
    if (!(largest > 0.0) || !(eig.values(eig.values.size() - 1) > 1e-12 * largest))
        throw Error(Errc::singular, "mixture covariance is rank deficient");

    PcaRecord rec{mu, eig.vectors, eig.values.cwiseSqrt()};
    const Matrix proj = rec.scales.cwiseInverse().asDiagonal() * rec.rotation.transpose();
    std::vector<double> out(mix.data().size());
    for (std::size_t t = 0; t < total; ++t) {
        const Vector y = proj * (mix.vec(t) - mu);
        for (std::size_t k = 0; k < n; ++k) out[t * n + k] = y(static_cast<Eigen::Index>(k));
    }
    return {TimeSeries(n, mix.rate(), std::move(out)), std::move(rec)};
}

inline TimeSeries pca_invert(const TimeSeries& normalized, const PcaRecord& rec) {
    const std::size_t n = normalized.channels();
    if (static_cast<std::size_t>(rec.mean.size()) != n)
        throw Error(Errc::shape_mismatch, "PCA record width does not match series");
    const Matrix back = rec.rotation * rec.scales.asDiagonal();
    std::vector<double> out(normalized.data().size());
    for (std::size_t t = 0; t < normalized.size(); ++t) {
        const Vector x = back * normalized.vec(t) + rec.mean;
        for (std::size_t k = 0; k < n; ++k) out[t * n + k] = x(static_cast<Eigen::Index>(k));
    }
    return {n, normalized.rate(), std::move(out)};
}

// ---------------------------------------------------------------------------
// Files

enum class SeriesFormat { wav16, csv };

inline SeriesFormat parse_series_format(std::string_view name) {
    if (name == "wav16" || name == "wav") return SeriesFormat::wav16;
    if (name == "csv") return SeriesFormat::csv;
    throw Error(Errc::invalid_argument, "unknown series format '" + std::string(name) + "'");
}

/// Infers the format from the file extension (.wav -> wav16, else csv).
inline SeriesFormat format_for_path(const std::filesystem::path& p) {
    return p.extension() == ".wav" ? SeriesFormat::wav16 : SeriesFormat::csv;
}

inline std::string format_double(double v) {
    std::array<char, 32> buf{};
    const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return {buf.data(), res.ptr};
}

inline double parse_double(std::string_view text, const std::string& where) {
    while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) text.remove_prefix(1);
    while (!text.empty() && (text.back() == ' ' || text.back() == '\t' || text.back() == '\r'))
        text.remove_suffix(1);
    double v = 0.0;
    const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc{} || res.ptr != text.data() + text.size())
        throw Error(Errc::malformed_file, where + ": cannot parse number '" + std::string(text) + "'");
    return v;
}

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> cells;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        cells.push_back(line.substr(start, comma == std::string_view::npos ? comma : comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return cells;
}

inline void put_u16(std::ostream& os, std::uint16_t v) {
    const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
    os.write(b, 2);
}
inline void put_u32(std::ostream& os, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                       static_cast<char>((v >> 16) & 0xff), static_cast<char>(v >> 24)};
    os.write(b, 4);
}
inline std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline std::uint16_t get_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline TimeSeries load_csv(const std::filesystem::path& path, double default_rate) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::io, "cannot open " + path.string());
    std::string line;
    double rate = default_rate;
    std::size_t line_no = 0;
    std::optional<std::size_t> width;
    std::vector<double> data;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::string where = path.string() + ":" + std::to_string(line_no);
        if (line.front() == '#') {
            const auto eq = line.find("rate=");
            if (eq != std::string::npos) rate = parse_double(std::string_view(line).substr(eq + 5), where);
            continue;
        }
        const auto cells = split_csv(line);
        if (!header_seen) {
            header_seen = true;
            width = cells.size();
            continue;
        }
        if (cells.size() != *width)
            throw Error(Errc::malformed_file, where + ": expected " + std::to_string(*width) + " columns, found " +
                                                  std::to_string(cells.size()));
        for (auto c : cells) data.push_back(parse_double(c, where));
    }
    if (!header_seen) throw Error(Errc::malformed_file, path.string() + ": missing header row");
    try {
        return {*width, rate, std::move(data)};
    } catch (const Error& e) {
        throw Error(Errc::malformed_file, path.string() + ": " + e.what());
    }
}

inline TimeSeries load_wav16(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::io, "cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto bad = [&](const std::string& why) { return Error(Errc::malformed_file, path.string() + ": " + why); };
    if (bytes.size() < 12 || std::string(bytes.begin(), bytes.begin() + 4) != "RIFF" ||
        std::string(bytes.begin() + 8, bytes.begin() + 12) != "WAVE")
        throw bad("not a RIFF/WAVE file");
    std::size_t pos = 12;
    std::optional<std::uint16_t> channels;
    std::uint32_t rate = 0;
    std::vector<double> data;
    bool have_data = false;
    while (pos + 8 <= bytes.size()) {
        const std::string id(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                             bytes.begin() + static_cast<std::ptrdiff_t>(pos + 4));
        const std::uint32_t len = get_u32(&bytes[pos + 4]);
        const std::size_t body = pos + 8;
        if (body + len > bytes.size()) throw bad("chunk '" + id + "' overruns file");
        if (id == "fmt ") {
            if (len < 16) throw bad("short fmt chunk");
            if (get_u16(&bytes[body]) != 1) throw bad("only PCM is supported");
            channels = get_u16(&bytes[body + 2]);
            rate = get_u32(&bytes[body + 4]);
            if (get_u16(&bytes[body + 14]) != 16) throw bad("only 16-bit samples are supported");
            if (*channels == 0) throw bad("zero channels");
        } else if (id == "data") {
            if (!channels) throw bad("data chunk before fmt chunk");
            if (len % (2u * *channels) != 0) throw bad("data chunk is not a whole number of frames");
            data.reserve(len / 2);
            for (std::size_t i = 0; i < len; i += 2)
                data.push_back(static_cast<double>(static_cast<std::int16_t>(get_u16(&bytes[body + i]))));
            have_data = true;
        }
        pos = body + len + (len & 1u);
    }
    if (!channels || !have_data) throw bad("missing fmt or data chunk");
    try {
        return {*channels, static_cast<double>(rate), std::move(data)};
    } catch (const Error& e) {
        throw bad(e.what());
    }
}

} // namespace detail

/// Reads a series. CSV files may carry a leading "# rate=<hz>" comment;
/// otherwise `default_rate` is used. When `expected_channels` is given, a
/// different width is reported as Errc::channel_mismatch.
inline TimeSeries load_series(const std::filesystem::path& path, SeriesFormat format,
                              std::optional<std::size_t> expected_channels = std::nullopt,
                              double default_rate = 16000.0) {
    if (!std::filesystem::exists(path)) throw Error(Errc::io, "no such file: " + path.string());
    TimeSeries s = format == SeriesFormat::csv ? detail::load_csv(path, default_rate) : detail::load_wav16(path);
    if (expected_channels && s.channels() != *expected_channels)
        throw Error(Errc::channel_mismatch, path.string() + " has " + std::to_string(s.channels()) +
                                                " channels, expected " + std::to_string(*expected_channels));
    return s;
}

/// Writes a series. CSV is lossless (shortest round-trip decimal). wav16
/// rounds to the nearest integer and clamps to [-32768, 32767]; the return
/// value is the number of clamped values (always 0 for CSV). A non-empty
/// `comment` becomes a leading "# " line in CSV output.
inline std::size_t store_series(const TimeSeries& series, const std::filesystem::path& path, SeriesFormat format,
                                std::string_view comment = {}) {
    std::ofstream out(path, format == SeriesFormat::wav16 ? std::ios::binary : std::ios::out);
    if (!out) throw Error(Errc::io, "cannot write " + path.string());
    const std::size_t n = series.channels();
    std::size_t clamped = 0;
    if (format == SeriesFormat::csv) {
        if (!comment.empty()) out << "# " << comment << '\n';
        out << "# rate=" << format_double(series.rate()) << '\n';
        for (std::size_t k = 0; k < n; ++k) out << (k ? "," : "") << "ch" << (k + 1);
        out << '\n';
        std::string row;
        for (std::size_t t = 0; t < series.size(); ++t) {
            row.clear();
            for (std::size_t k = 0; k < n; ++k) {
                if (k) row += ',';
                row += format_double(series(t, k));
            }
            row += '\n';
            out << row;
        }
    } else {
        const auto frames = series.size();
        const std::uint64_t bytes = static_cast<std::uint64_t>(frames) * n * 2;
        if (bytes > 0xFFFFFFF0ull) throw Error(Errc::invalid_argument, "series too long for a WAV file");
        const auto rate = static_cast<std::uint32_t>(std::lround(series.rate()));
        out.write("RIFF", 4);
        detail::put_u32(out, static_cast<std::uint32_t>(36 + bytes));
        out.write("WAVEfmt ", 8);
        detail::put_u32(out, 16);
        detail::put_u16(out, 1);
        detail::put_u16(out, static_cast<std::uint16_t>(n));
        detail::put_u32(out, rate);
        detail::put_u32(out, rate * static_cast<std::uint32_t>(n) * 2);
        detail::put_u16(out, static_cast<std::uint16_t>(n * 2));
        detail::put_u16(out, 16);
        out.write("data", 4);
        detail::put_u32(out, static_cast<std::uint32_t>(bytes));
        for (double v : series.data()) {
            double r = std::nearbyint(v);
            if (r < -32768.0 || r > 32767.0) {
                ++clamped;
                r = std::clamp(r, -32768.0, 32767.0);
            }
            detail::put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(r)));
        }
    }
    if (!out) throw Error(Errc::io, "write failed for " + path.string());
    return clamped;
}

} // namespace nlbss
