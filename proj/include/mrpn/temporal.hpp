#pragma once

#include <string>
#include <vector>

#include "mrpn/units.hpp"

namespace mrpn {

// A variable-length per-modality input: one feature row per frame (video)
// or per segment (audio), with the nominal frame rate kept as metadata so
// time-based slicing can reason in seconds.
struct FrameSequence {
    Tensor frames;        // [T, D_raw]
    std::string modality;
    real frames_per_sec = real(25);

    int length() const { return frames.rows(); }
    real duration() const { return static_cast<real>(length()) / frames_per_sec; }
};

// Frame-wise two-layer perceptron: the same weights map every frame, so the
// whole sequence goes through as one [T, D_raw] batch.
class FrameExtractor {
public:
    FrameExtractor() = default;

    FrameExtractor(ParamStore& store, const std::string& path, int d_raw, int hidden, int d_out,
                   RngStream& rng) {
        d1_ = DenseUnit(store, path + ".d1", d_raw, hidden, rng);
        d2_ = DenseUnit(store, path + ".d2", hidden, d_out, rng);
    }

    Tensor forward(Graph& g, const Tensor& frames) const {
        if (frames.cols() != d1_.in_dim())
            throw ShapeError("frame extractor expects raw width " +
                             std::to_string(d1_.in_dim()) + ", got " +
                             shape_str(frames.shape()));
        return d2_.forward(g, g.relu(d1_.forward(g, frames)));
    }

    int d_raw() const { return d1_.in_dim(); }
    int d_out() const { return d2_.out_dim(); }

    DenseUnit d1_, d2_;
};

enum class AggregatorKind { mean_pool, simple_recurrent };

inline const char* aggregator_name(AggregatorKind k) {
    return k == AggregatorKind::mean_pool ? "mean_pool" : "simple_recurrent";
}

inline AggregatorKind aggregator_from_name(const std::string& s) {
    if (s == "mean_pool") return AggregatorKind::mean_pool;
    if (s == "simple_recurrent") return AggregatorKind::simple_recurrent;
    throw ConfigError("unknown aggregator '" + s + "'");
}

// Collapses a [T, D] feature sequence to one [1, D_out] vector.
//   mean_pool:        arithmetic mean over frames (D_out == D, no parameters).
//   simple_recurrent: h_t = tanh(W_h h_{t-1} + W_x z_t + b), h_0 = 0,
//                     output is h_T projected back to D_out.
class Aggregator {
public:
    Aggregator() = default;

    static Aggregator mean_pool() {
        Aggregator a;
        a.kind_ = AggregatorKind::mean_pool;
        return a;
    }

    static Aggregator simple_recurrent(ParamStore& store, const std::string& path, int d_in,
                                       int hidden, int d_out, RngStream& rng) {
        Aggregator a;
        a.kind_ = AggregatorKind::simple_recurrent;
        a.hidden_ = hidden;
        a.Wx_ = store.create(path + ".Wx", {d_in, hidden});
        a.Wh_ = store.create(path + ".Wh", {hidden, hidden});
        a.b_ = store.create(path + ".b", {hidden});
        init_uniform_fan_in(a.Wx_, d_in, rng);
        init_uniform_fan_in(a.Wh_, hidden, rng);
        a.proj_ = DenseUnit(store, path + ".proj", hidden, d_out, rng);
        return a;
    }

    AggregatorKind kind() const { return kind_; }
    int hidden() const { return hidden_; }

    Tensor forward(Graph& g, const Tensor& feats) const {
        if (feats.rows() < 1) throw ContractError("aggregate: empty sequence");
        if (kind_ == AggregatorKind::mean_pool) return g.mean_rows(feats);

        const int T = feats.rows();
        Tensor h = Tensor::zeros({1, hidden_});
        for (int t = 0; t < T; ++t) {
            Tensor z = g.slice_rows(feats, t, t + 1);
            h = g.tanh(g.add(g.matmul(h, Wh_), g.affine(z, Wx_, b_)));
        }
        return proj_.forward(g, h);
    }

    Tensor Wx_, Wh_, b_;
    DenseUnit proj_;

private:
    AggregatorKind kind_ = AggregatorKind::mean_pool;
    int hidden_ = 0;
};

struct TrunkConfig {
    int d_raw = 12;
    int d_m = 32;
    int extractor_hidden = 0; // 0 -> d_m
    AggregatorKind aggregator = AggregatorKind::mean_pool;
    int aggregator_hidden = 32;
};

// Per-modality trunk: frame extractor followed by sequence aggregation,
// producing the fixed-width temporal feature vector regardless of T.
class Trunk {
public:
    Trunk() = default;

    Trunk(ParamStore& store, const std::string& path, const TrunkConfig& cfg, RngStream& rng)
        : cfg_(cfg) {
        const int hidden = cfg.extractor_hidden > 0 ? cfg.extractor_hidden : cfg.d_m;
        extractor_ = FrameExtractor(store, path + ".extract", cfg.d_raw, hidden, cfg.d_m, rng);
        if (cfg.aggregator == AggregatorKind::mean_pool)
            aggregator_ = Aggregator::mean_pool();
        else
            aggregator_ = Aggregator::simple_recurrent(store, path + ".agg", cfg.d_m,
                                                       cfg.aggregator_hidden, cfg.d_m, rng);
    }

    // [T, D_raw] -> [1, D_m]
    Tensor forward(Graph& g, const Tensor& frames) const {
        return aggregator_.forward(g, extractor_.forward(g, frames));
    }

    const TrunkConfig& config() const { return cfg_; }
    FrameExtractor& extractor() { return extractor_; }
    Aggregator& aggregator() { return aggregator_; }

private:
    TrunkConfig cfg_;
    FrameExtractor extractor_;
    Aggregator aggregator_;
};

} // namespace mrpn
