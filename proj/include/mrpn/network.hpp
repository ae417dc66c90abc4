#pragma once

#include <string>
#include <vector>

#include "mrpn/units.hpp"

namespace mrpn {

// Fusion-network family over per-modality feature vectors.
//   N0: modality norms -> fusion component; single fusion loss.
//   N1: N0 plus one dense side branch per modality; one loss term each.
//   N2: N1 plus a residual perceptron per modality on the fusion path;
//       side branches keep reading the pre-residual normalized features.
//   UniModal: one modality norm -> scoring head; the uni-modal baseline.
enum class Variant { N0, N1, N2, UniModal };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::N0: return "n0";
        case Variant::N1: return "n1";
        case Variant::N2: return "n2";
        case Variant::UniModal: return "uni";
    }
    return "?";
}

inline Variant variant_from_name(const std::string& s) {
    if (s == "n0") return Variant::N0;
    if (s == "n1") return Variant::N1;
    if (s == "n2") return Variant::N2;
    if (s == "uni") return Variant::UniModal;
    throw ConfigError("unknown network variant '" + s + "'");
}

struct NetworkConfig {
    Variant variant = Variant::N2;
    std::vector<int> feature_dims;           // per-modality feature width
    int classes = 0;
    std::vector<std::string> modality_names; // defaults to video/audio for k=2
    int scoring_hidden = 0;                  // 0 -> max(classes, width/2)
    real dropout_rate = real(0.3);
    std::vector<real> term_weights;          // per-term loss weights, default all 1
};

inline std::vector<std::string> default_modality_names(std::size_t k) {
    if (k == 2) return {"video", "audio"};
    std::vector<std::string> names;
    for (std::size_t i = 0; i < k; ++i) names.push_back("m" + std::to_string(i));
    return names;
}

// Per-batch multi-term loss. total is always the exact sum of the terms in
// one fixed accumulation order (modalities first, fusion last).
struct LossBundle {
    std::vector<Tensor> modality_terms;
    Tensor fusion_term;
    Tensor total;
};

class Network {
public:
    static Network build(ParamStore& store, const NetworkConfig& cfg, const RngHub& rng) {
        if (cfg.feature_dims.empty()) throw ConfigError("network needs at least one modality");
        if (cfg.classes < 2) throw ConfigError("network needs at least two classes");
        if (cfg.variant == Variant::UniModal && cfg.feature_dims.size() != 1)
            throw ConfigError("uni-modal network takes exactly one modality");

        Network net;
        net.cfg_ = cfg;
        if (net.cfg_.modality_names.empty())
            net.cfg_.modality_names = default_modality_names(cfg.feature_dims.size());
        if (net.cfg_.modality_names.size() != cfg.feature_dims.size())
            throw ConfigError("modality name count does not match feature dims");
        const std::size_t k = cfg.feature_dims.size();
        if (net.cfg_.term_weights.empty())
            net.cfg_.term_weights.assign(k + 1, real(1));
        net.dropout_rng_ = rng.stream("dropout");
        RngStream init = rng.stream("init");

        for (std::size_t m = 0; m < k; ++m) {
            const std::string& name = net.cfg_.modality_names[m];
            net.norms_.emplace_back(store, name + ".fn", cfg.feature_dims[m]);
        }
        if (cfg.variant == Variant::UniModal) {
            net.uni_scoring_ = Scoring(store, net.cfg_.modality_names[0] + ".scoring",
                                       cfg.feature_dims[0], cfg.classes, cfg.scoring_hidden,
                                       cfg.dropout_rate, init);
            return net;
        }
        if (cfg.variant == Variant::N1 || cfg.variant == Variant::N2) {
            for (std::size_t m = 0; m < k; ++m)
                net.side_.emplace_back(store, net.cfg_.modality_names[m] + ".side",
                                       cfg.feature_dims[m], cfg.classes, init);
        }
        if (cfg.variant == Variant::N2) {
            for (std::size_t m = 0; m < k; ++m)
                net.rps_.emplace_back(store, net.cfg_.modality_names[m] + ".rp",
                                      cfg.feature_dims[m], init);
        }
        net.fusion_ = FusionComponent(store, "fusion", cfg.feature_dims, cfg.classes,
                                      cfg.scoring_hidden, cfg.dropout_rate, init);
        return net;
    }

    Mode mode() const { return mode_; }
    void set_mode(Mode m) { mode_ = m; }
    Variant variant() const { return cfg_.variant; }
    int classes() const { return cfg_.classes; }
    std::size_t modality_count() const { return cfg_.feature_dims.size(); }
    const NetworkConfig& config() const { return cfg_; }
    RngStream& dropout_rng() { return dropout_rng_; }

    void disable_dropout() {
        if (cfg_.variant == Variant::UniModal)
            uni_scoring_.set_dropout_rate(0);
        else
            fusion_.scoring_.set_dropout_rate(0);
    }

    // Training-mode forward: computes every branch and the blended loss.
    LossBundle forward_train(Graph& g, const std::vector<Tensor>& features,
                             const Tensor& target) {
        if (mode_ != Mode::train)
            throw ContractError("forward_train called while network is in test mode");
        check_features(features);

        LossBundle bundle;
        if (cfg_.variant == Variant::UniModal) {
            Tensor fhat = norms_[0].forward(g, features[0], mode_);
            Tensor scores = uni_scoring_.forward(g, fhat, mode_, dropout_rng_);
            bundle.fusion_term = g.cross_entropy(target, g.softmax_rows(scores));
            bundle.total = bundle.fusion_term;
            return bundle;
        }

        std::vector<Tensor> fhat;
        for (std::size_t m = 0; m < norms_.size(); ++m)
            fhat.push_back(norms_[m].forward(g, features[m], mode_));

        if (cfg_.variant == Variant::N1 || cfg_.variant == Variant::N2) {
            for (std::size_t m = 0; m < side_.size(); ++m) {
                Tensor s_m = side_[m].forward(g, fhat[m]);
                bundle.modality_terms.push_back(
                    g.cross_entropy(target, g.softmax_rows(s_m)));
            }
        }

        std::vector<Tensor> fused_inputs = fhat;
        if (cfg_.variant == Variant::N2)
            for (std::size_t m = 0; m < rps_.size(); ++m)
                fused_inputs[m] = rps_[m].forward(g, fhat[m], mode_);

        Tensor s_va = fusion_.forward(g, fused_inputs, mode_, dropout_rng_);
        bundle.fusion_term = g.cross_entropy(target, g.softmax_rows(s_va));

        Tensor total;
        for (std::size_t m = 0; m < bundle.modality_terms.size(); ++m) {
            Tensor term = weighted(g, bundle.modality_terms[m], cfg_.term_weights[m]);
            total = total.defined() ? g.add(total, term) : term;
        }
        Tensor fuse = weighted(g, bundle.fusion_term, cfg_.term_weights.back());
        bundle.total = total.defined() ? g.add(total, fuse) : fuse;
        return bundle;
    }

    // Test-mode forward: only the central branch runs; side branches exist
    // solely for the extra training loss terms.
    Tensor forward_test(Graph& g, const std::vector<Tensor>& features) {
        if (mode_ != Mode::test)
            throw ContractError("forward_test called while network is in train mode");
        check_features(features);

        if (cfg_.variant == Variant::UniModal) {
            Tensor fhat = norms_[0].forward(g, features[0], mode_);
            return g.softmax_rows(uni_scoring_.forward(g, fhat, mode_, dropout_rng_));
        }
        std::vector<Tensor> fused_inputs;
        for (std::size_t m = 0; m < norms_.size(); ++m) {
            Tensor fhat = norms_[m].forward(g, features[m], mode_);
            fused_inputs.push_back(cfg_.variant == Variant::N2
                                       ? rps_[m].forward(g, fhat, mode_)
                                       : fhat);
        }
        return g.softmax_rows(fusion_.forward(g, fused_inputs, mode_, dropout_rng_));
    }

    std::vector<FeatureNorm>& modality_norms() { return norms_; }
    std::vector<DenseUnit>& side_branches() { return side_; }
    std::vector<ResPerceptron>& res_perceptrons() { return rps_; }
    FusionComponent& fusion() { return fusion_; }
    Scoring& uni_scoring() { return uni_scoring_; }

private:
    static Tensor weighted(Graph& g, const Tensor& term, real w) {
        return w == real(1) ? term : g.scale(term, w);
    }

    void check_features(const std::vector<Tensor>& features) const {
        if (features.size() != cfg_.feature_dims.size())
            throw ContractError("expected " + std::to_string(cfg_.feature_dims.size()) +
                                " modality feature tensors, got " +
                                std::to_string(features.size()));
        for (std::size_t m = 0; m < features.size(); ++m)
            if (features[m].cols() != cfg_.feature_dims[m])
                throw ShapeError("modality '" + cfg_.modality_names[m] + "' expects width " +
                                 std::to_string(cfg_.feature_dims[m]) + ", got " +
                                 shape_str(features[m].shape()));
    }

    NetworkConfig cfg_;
    Mode mode_ = Mode::train;
    RngStream dropout_rng_;
    std::vector<FeatureNorm> norms_;
    std::vector<DenseUnit> side_;
    std::vector<ResPerceptron> rps_;
    FusionComponent fusion_;
    Scoring uni_scoring_;
};

// The generalization to k modalities is the same construction: k residual
// branches, k side losses, one fusion component over the concatenation.
inline Network build_k_modal(ParamStore& store, const std::vector<int>& dims, int classes,
                             const RngHub& rng) {
    NetworkConfig cfg;
    cfg.variant = Variant::N2;
    cfg.feature_dims = dims;
    cfg.classes = classes;
    return Network::build(store, cfg, rng);
}

// Closed-form trainable-parameter counts, used to cross-check the registry.
inline std::size_t expected_parameter_count(const NetworkConfig& cfg) {
    const int C = cfg.classes;
    auto scoring_params = [&](int in) {
        const int h = cfg.scoring_hidden > 0 ? cfg.scoring_hidden
                                             : default_scoring_hidden(in, C);
        return static_cast<std::size_t>(in * h + h) + 2u * h +
               static_cast<std::size_t>(h * C + C);
    };
    std::size_t n = 0;
    for (int d : cfg.feature_dims) n += 2u * static_cast<std::size_t>(d); // modality norm
    if (cfg.variant == Variant::UniModal) return n + scoring_params(cfg.feature_dims[0]);
    if (cfg.variant == Variant::N1 || cfg.variant == Variant::N2)
        for (int d : cfg.feature_dims) n += static_cast<std::size_t>(d * C + C);
    if (cfg.variant == Variant::N2)
        for (int d : cfg.feature_dims)
            n += static_cast<std::size_t>(d) * d + d + 2u * static_cast<std::size_t>(d);
    int total = 0;
    for (int d : cfg.feature_dims) total += d;
    n += 2u * static_cast<std::size_t>(total) + scoring_params(total);
    return n;
}

// ---------------------------------------------------------------------------
// Per-term gradient decomposition
// ---------------------------------------------------------------------------

// For every parameter, compares the gradient of the summed loss against the
// elementwise sum of per-term gradients from separate backward passes.
// Requires a deterministic forward, i.e. dropout disabled.
struct DecompositionReport {
    struct Row {
        std::string path;
        std::vector<std::vector<real>> term_grads; // one per loss term
        std::vector<real> combined;
        real max_deviation = 0;
    };
    std::vector<std::string> term_names;
    std::vector<Row> rows;
    real max_deviation = 0;

    const Row& row(const std::string& path) const {
        for (const auto& r : rows)
            if (r.path == path) return r;
        throw ConfigError("no decomposition row for '" + path + "'");
    }
};

inline DecompositionReport trunk_gradient_decomposition(Network& net, ParamStore& store,
                                                        const std::vector<Tensor>& features,
                                                        const Tensor& target) {
    if (net.variant() != Variant::N1 && net.variant() != Variant::N2)
        throw ContractError("gradient decomposition applies to multi-term networks only");
    if (net.fusion().scoring_.dropout_rate() != real(0))
        throw ContractError("gradient decomposition needs dropout disabled");

    const auto params = store.trainable_entries();
    auto snapshot = [&]() {
        std::vector<std::vector<real>> grads;
        grads.reserve(params.size());
        for (const auto& e : params) grads.push_back(e.tensor.grad());
        return grads;
    };

    DecompositionReport report;
    store.zero_grad();
    std::vector<std::vector<real>> combined;
    std::size_t term_count = 0;
    {
        Graph g;
        LossBundle bundle = net.forward_train(g, features, target);
        term_count = bundle.modality_terms.size() + 1;
        g.backward(bundle.total);
        combined = snapshot();
    }

    std::vector<std::vector<std::vector<real>>> per_term;
    for (std::size_t t = 0; t < term_count; ++t) {
        store.zero_grad();
        Graph g;
        LossBundle bundle = net.forward_train(g, features, target);
        Tensor term = t + 1 < term_count ? bundle.modality_terms[t] : bundle.fusion_term;
        g.backward(term);
        per_term.push_back(snapshot());
        report.term_names.push_back(t + 1 < term_count
                                        ? "L_" + net.config().modality_names[t]
                                        : "L_fusion");
    }
    store.zero_grad();

    for (std::size_t p = 0; p < params.size(); ++p) {
        DecompositionReport::Row row;
        row.path = params[p].path;
        row.combined = combined[p];
        for (std::size_t t = 0; t < term_count; ++t)
            row.term_grads.push_back(per_term[t][p]);
        for (std::size_t i = 0; i < combined[p].size(); ++i) {
            real sum = 0;
            for (std::size_t t = 0; t < term_count; ++t) sum += per_term[t][p][i];
            row.max_deviation = std::max(row.max_deviation, std::abs(sum - combined[p][i]));
        }
        report.max_deviation = std::max(report.max_deviation, row.max_deviation);
        report.rows.push_back(std::move(row));
    }
    return report;
}

} // namespace mrpn
