#pragma once

// In-memory separation chain: normalize, bin, frames, weights, partitions,
// coordinate map and verdict, plus the per-subsystem recursion.

#include "nlbss/coordinate_map.hpp"
#include "nlbss/core.hpp"
#include "nlbss/local_frames.hpp"
#include "nlbss/phase_binning.hpp"
#include "nlbss/separability.hpp"
#include "nlbss/signal_io.hpp"
#include "nlbss/weights.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace nlbss {

/// Error raised by a pipeline stage; keeps the underlying code.
class StageError : public Error {
public:
    StageError(std::string stage, const Error& cause)
        : Error(cause.code(), "stage '" + stage + "' failed: " + cause.what(), verbatim_t{}), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

template <class Fn>
auto run_stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const Error& e) {
        throw StageError(name, e);
    }
}

struct AnalysisConfig {
    GridSpec grid;
    FrameOptions frames;
    double partition_threshold = 0.05;
    MapOptions map;
    double separability_threshold = 0.05;
    std::size_t threads = 0;

    void propagate_threads() {
        grid.threads = threads;
        frames.threads = threads;
        map.threads = threads;
    }
};

struct PartitionResult {
    Matrix corr;
    std::vector<Partition> accepted;
    /// When nothing passes the threshold, the lowest-scoring bipartition is
    /// still mapped so the verdict stage can report statistics.
    bool forced = false;
    std::vector<Partition> candidates() const;
};

inline std::vector<Partition> PartitionResult::candidates() const {
    if (!accepted.empty()) return accepted;
    return {all_partitions(corr).front()};
}

inline PartitionResult partition_stage(const WeightSeries& w, double threshold) {
    PartitionResult r;
    r.corr = weight_correlation(w);
    r.accepted = enumerate_partitions(r.corr, threshold);
    r.forced = r.accepted.empty();
    return r;
}

inline std::vector<CoordinateMap> map_stage(const FrameField& field, const PartitionResult& parts,
                                            const MapOptions& opts) {
    const Vector x0 = field.geometry.center(field.densest_valid());
    std::vector<CoordinateMap> maps;
    for (const auto& p : parts.candidates()) maps.push_back(build_map(field, p, x0, opts));
    return maps;
}

struct Analysis {
    TimeSeries normalized;
    PcaRecord pca;
    PhaseSeries phase;
    BinGrid grid;
    FrameField field;
    WeightSeries weights;
    PartitionResult partitions;
    std::vector<CoordinateMap> maps;
    Verdict verdict;
    USeries u;

    bool separable() const { return verdict.separable && !partitions.forced; }
};

/// Runs every stage on raw mixtures. Each failure is rethrown as a
/// StageError naming the stage.
inline Analysis analyze(const TimeSeries& mixtures, AnalysisConfig cfg) {
    cfg.propagate_threads();
    auto [normalized, pca] = run_stage("normalize", [&] { return pca_normalize(mixtures); });
    Analysis a{std::move(normalized), std::move(pca), {}, {}, {}, {}, {}, {}, {}, {}};
    a.phase = run_stage("bin", [&] { return estimate_velocity(a.normalized); });
    a.grid = run_stage("bin", [&] { return build_grid(a.phase, cfg.grid); });
    a.field = run_stage("frames", [&] { return make_frame_field(a.grid, cfg.frames); });
    a.weights = run_stage("weights", [&] { return compute_weights(a.phase, a.field, cfg.threads); });
    a.partitions = run_stage("partitions", [&] { return partition_stage(a.weights, cfg.partition_threshold); });
    a.maps = run_stage("map", [&] { return map_stage(a.field, a.partitions, cfg.map); });
    a.verdict = run_stage("verify", [&] {
        return verdict_pipeline(a.normalized, a.maps, cfg.separability_threshold, cfg.threads);
    });
    a.u = run_stage("verify", [&] { return evaluate_map(a.maps[a.verdict.best], a.normalized, cfg.threads); });
    return a;
}

/// Weights computed separately on each block of channels of the unmixed
/// sources (own grid and frames per block), stacked in block order on their
/// common time indices.
inline WeightSeries block_weights(const TimeSeries& sources, const std::vector<IndexSet>& blocks,
                                  const GridSpec& grid, const FrameOptions& frames, std::size_t threads = 0) {
    std::vector<WeightSeries> parts;
    for (const auto& blk : blocks) {
        const auto phase = estimate_velocity(sources.select(blk));
        GridSpec g = grid;
        g.threads = threads;
        const auto bins = build_grid(phase, g);
        FrameOptions f = frames;
        f.threads = threads;
        parts.push_back(compute_weights(phase, make_frame_field(bins, f), threads));
    }
    return stack_blocks(parts);
}

struct SeparationNode {
    std::size_t dims = 1;
    bool leaf = true;
    bool inseparable = false; // leaf because the verdict rejected every split
    std::optional<IndependenceReport> report;
    std::vector<SeparationNode> children;
};

/// One-dimensional blocks are leaves. Two-dimensional blocks go through the
/// whole chain: a passing verdict splits them into two one-dimensional
/// leaves, otherwise the block is returned as a single inseparable leaf.
inline SeparationNode recurse(const TimeSeries& block, const AnalysisConfig& cfg) {
    SeparationNode node;
    node.dims = block.channels();
    if (node.dims == 1) return node;
    if (node.dims > 2) throw Error(Errc::unsupported, "recursion supports blocks of at most two dimensions");
    const auto a = analyze(block, cfg);
    node.report = a.verdict.report;
    if (!a.separable()) {
        node.inseparable = true;
        return node;
    }
    node.leaf = false;
    node.children.resize(2);
    return node;
}

} // namespace nlbss
