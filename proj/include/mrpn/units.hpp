#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "mrpn/graph.hpp"
#include "mrpn/rng.hpp"
#include "mrpn/tensor.hpp"

namespace mrpn {

// Registry of named state tensors. Trainable entries feed the optimizer;
// non-trainable entries (running statistics) only travel through
// checkpoints. Paths are unique and iteration follows insertion order, so
// init, updates and serialization are all deterministic.
class ParamStore {
public:
    struct Entry {
        std::string path;
        Tensor tensor;
        bool trainable;
        bool frozen = false; // excluded from optimization even if trainable
    };

    Tensor create(const std::string& path, Shape shape, bool trainable = true) {
        if (index_.count(path))
            throw ConfigError("duplicate parameter path '" + path + "'");
        Tensor t = Tensor::zeros(std::move(shape), trainable);
        index_[path] = entries_.size();
        entries_.push_back({path, t, trainable});
        return t;
    }

    Tensor track(const std::string& path, Tensor t, bool trainable = false) {
        if (index_.count(path))
            throw ConfigError("duplicate parameter path '" + path + "'");
        index_[path] = entries_.size();
        entries_.push_back({path, t, trainable});
        return t;
    }

    bool has(const std::string& path) const { return index_.count(path) != 0; }

    Tensor get(const std::string& path) const {
        auto it = index_.find(path);
        if (it == index_.end()) throw ConfigError("unknown parameter path '" + path + "'");
        return entries_[it->second].tensor;
    }

    const std::vector<Entry>& entries() const { return entries_; }

    void set_frozen(const std::string& path, bool frozen) {
        auto it = index_.find(path);
        if (it == index_.end()) throw ConfigError("unknown parameter path '" + path + "'");
        entries_[it->second].frozen = frozen;
    }

    // Freezes every entry whose path starts with the prefix.
    void freeze_prefix(const std::string& prefix) {
        for (auto& e : entries_)
            if (e.path.rfind(prefix, 0) == 0) e.frozen = true;
    }

    std::vector<Entry> trainable_entries() const {
        std::vector<Entry> out;
        for (const auto& e : entries_)
            if (e.trainable && !e.frozen) out.push_back(e);
        return out;
    }

    // Number of trainable scalars (frozen ones included; freezing is a
    // training-strategy property, not an architecture property).
    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_)
            if (e.trainable) n += e.tensor.size();
        return n;
    }

    void zero_grad() const {
        for (const auto& e : entries_)
            if (e.trainable) e.tensor.zero_grad();
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

inline void init_uniform_fan_in(Tensor& W, int fan_in, RngStream& rng) {
    const real bound = real(1) / std::sqrt(static_cast<real>(fan_in));
    for (auto& v : W.values()) v = rng.uniform(-bound, bound);
}

// Affine map with bias.
class DenseUnit {
public:
    DenseUnit() = default;

    DenseUnit(ParamStore& store, const std::string& path, int in_dim, int out_dim,
              RngStream& rng) {
        W_ = store.create(path + ".W", {in_dim, out_dim});
        b_ = store.create(path + ".b", {out_dim});
        init_uniform_fan_in(W_, in_dim, rng);
    }

    Tensor forward(Graph& g, const Tensor& x) const { return g.affine(x, W_, b_); }

    int in_dim() const { return W_.dim(0); }
    int out_dim() const { return W_.dim(1); }

    Tensor W_, b_;
};

// Batch normalization with learned scale/shift and tracked running
// statistics. A frozen unit always normalizes by its running statistics and
// never updates them, which keeps a pretrained trunk bitwise static.
class FeatureNorm {
public:
    FeatureNorm() = default;

    FeatureNorm(ParamStore& store, const std::string& path, int dim) : path_(path) {
        gamma_ = store.create(path + ".gamma", {dim});
        beta_ = store.create(path + ".beta", {dim});
        for (auto& v : gamma_.values()) v = real(1);
        stats_.mean = store.track(path + ".running_mean", Tensor::zeros({dim}));
        stats_.var = store.track(path + ".running_var", Tensor::full({dim}, real(1)));
    }

    Tensor forward(Graph& g, const Tensor& x, Mode mode) {
        const Mode effective = frozen_ ? Mode::test : mode;
        return g.batchnorm(x, gamma_, beta_, stats_, effective);
    }

    void set_frozen(bool f) { frozen_ = f; }
    bool frozen() const { return frozen_; }
    int dim() const { return static_cast<int>(gamma_.size()); }
    RunningStats& stats() { return stats_; }
    const std::string& path() const { return path_; }

    Tensor gamma_, beta_;

private:
    std::string path_;
    RunningStats stats_;
    bool frozen_ = false;
};

inline int default_scoring_hidden(int in_dim, int classes) {
    return std::max(classes, in_dim / 2);
}

// Feature vector -> class scores: dense, ReLU, dropout, feature norm, dense.
class Scoring {
public:
    Scoring() = default;

    Scoring(ParamStore& store, const std::string& path, int in_dim, int classes, int hidden,
            real dropout_rate, RngStream& rng)
        : rate_(dropout_rate) {
        if (hidden <= 0) hidden = default_scoring_hidden(in_dim, classes);
        d1_ = DenseUnit(store, path + ".d1", in_dim, hidden, rng);
        norm_ = FeatureNorm(store, path + ".fn", hidden);
        d2_ = DenseUnit(store, path + ".d2", hidden, classes, rng);
    }

    Tensor forward(Graph& g, const Tensor& f, Mode mode, RngStream& dropout_rng) {
        Tensor h = g.relu(d1_.forward(g, f));
        h = g.dropout(h, rate_, mode, dropout_rng);
        h = norm_.forward(g, h, mode);
        return d2_.forward(g, h);
    }

    int in_dim() const { return d1_.in_dim(); }
    int classes() const { return d2_.out_dim(); }
    real dropout_rate() const { return rate_; }
    void set_dropout_rate(real r) { rate_ = r; }

    DenseUnit d1_, d2_;
    FeatureNorm norm_;

private:
    real rate_ = real(0.3);
};

// Concatenates per-modality features, normalizes, and scores the joint
// vector.
class FusionComponent {
public:
    FusionComponent() = default;

    FusionComponent(ParamStore& store, const std::string& path, const std::vector<int>& in_dims,
                    int classes, int hidden, real dropout_rate, RngStream& rng) {
        int total = 0;
        for (int d : in_dims) total += d;
        norm_ = FeatureNorm(store, path + ".fn", total);
        scoring_ = Scoring(store, path + ".scoring", total, classes, hidden, dropout_rate, rng);
    }

    Tensor forward(Graph& g, const std::vector<Tensor>& inputs, Mode mode,
                   RngStream& dropout_rng) {
        Tensor joint = g.concat(inputs);
        Tensor normed = norm_.forward(g, joint, mode);
        return scoring_.forward(g, normed, mode, dropout_rng);
    }

    FeatureNorm norm_;
    Scoring scoring_;
};

// Residual update of an already-normalized feature vector:
//   out = f + FeatureNorm(Sigmoid(Dense(f)))
// The dense unit is square so the residual addition is well-formed. With
// zero dense parameters the sigmoid emits a batch constant, its feature
// norm collapses to zero, and the unit is the identity.
class ResPerceptron {
public:
    ResPerceptron() = default;

    ResPerceptron(ParamStore& store, const std::string& path, int dim, RngStream& rng) {
        dense_ = DenseUnit(store, path + ".dense", dim, dim, rng);
        norm_ = FeatureNorm(store, path + ".fn", dim);
    }

    Tensor forward(Graph& g, const Tensor& f, Mode mode) {
        if (f.cols() != dense_.in_dim())
            throw ShapeError("res_perceptron: input width " + std::to_string(f.cols()) +
                             " does not match configured dim " + std::to_string(dense_.in_dim()));
        Tensor r = norm_.forward(g, g.sigmoid(dense_.forward(g, f)), mode);
        return g.add(f, r);
    }

    int dim() const { return dense_.in_dim(); }

    DenseUnit dense_;
    FeatureNorm norm_;
};

} // namespace mrpn
