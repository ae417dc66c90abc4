#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mrpn/errors.hpp"
#include "mrpn/rng.hpp"
#include "mrpn/tensor.hpp"

namespace mrpn {

enum class Mode { train, test };

// Per-feature running statistics owned by a feature-norm unit. Stored as
// plain tensors so they travel through checkpoints like any other state.
struct RunningStats {
    Tensor mean; // [D], starts at 0
    Tensor var;  // [D], starts at 1
    long updates = 0;
    bool warned_uninitialized = false; // test-mode read happened before any update
    real momentum = real(0.1);

    static RunningStats make(int dim) {
        RunningStats s;
        s.mean = Tensor::zeros({dim});
        s.var = Tensor::full({dim}, real(1));
        return s;
    }
};

// Reverse-mode tape. Every op appends one node; inputs of a node always
// precede it, so one reverse sweep visits each node exactly once. Gradients
// accumulate additively, which makes multi-term losses blend automatically.
class Graph {
public:
    static constexpr real kBnEps = real(1e-5);
    static constexpr real kProbFloor = real(1e-12);

    std::size_t node_count() const { return nodes_.size(); }

    // ---- arithmetic -------------------------------------------------------

    // out[i,j] = sum_k x[i,k] W[k,j] + b[j]
    Tensor affine(const Tensor& x, const Tensor& W, const Tensor& b) {
        check_matmul_shapes(x, W, "affine");
        if (b.size() != static_cast<std::size_t>(W.cols()))
            throw ShapeError("affine: bias " + shape_str(b.shape()) + " does not match weight " +
                             shape_str(W.shape()));
        Tensor out = matmul_forward(x, W);
        const int B = out.rows(), D = out.cols();
        for (int i = 0; i < B; ++i)
            for (int j = 0; j < D; ++j) out.at(i, j) += b.at(j);
        finish_forward(out, x.requires_grad() || W.requires_grad() || b.requires_grad(), "affine");
        push([x, W, b, out]() {
            matmul_backward(x, W, out);
            if (b.requires_grad()) {
                auto& gb = b.grad();
                const auto& go = out.grad();
                const int B2 = out.rows(), D2 = out.cols();
                for (int i = 0; i < B2; ++i)
                    for (int j = 0; j < D2; ++j) gb[static_cast<std::size_t>(j)] += go[static_cast<std::size_t>(i) * D2 + j];
            }
        });
        return out;
    }

    // affine without bias
    Tensor matmul(const Tensor& x, const Tensor& W) {
        check_matmul_shapes(x, W, "matmul");
        Tensor out = matmul_forward(x, W);
        finish_forward(out, x.requires_grad() || W.requires_grad(), "matmul");
        push([x, W, out]() { matmul_backward(x, W, out); });
        return out;
    }

    Tensor add(const Tensor& a, const Tensor& b) {
        if (a.shape() != b.shape())
            throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
        Tensor out = Tensor::zeros(a.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = a.values()[i] + b.values()[i];
        finish_forward(out, a.requires_grad() || b.requires_grad(), "add");
        push([a, b, out]() {
            const auto& go = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
            }
        });
        return out;
    }

    Tensor scale(const Tensor& x, real c) {
        Tensor out = Tensor::zeros(x.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = c * x.values()[i];
        finish_forward(out, x.requires_grad(), "scale");
        push([x, out, c]() {
            if (!x.requires_grad()) return;
            auto& gx = x.grad();
            const auto& go = out.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += c * go[i];
        });
        return out;
    }

    Tensor sum_all(const Tensor& x) {
        real s = 0;
        for (real v : x.values()) s += v;
        Tensor out = Tensor::scalar(s);
        finish_forward(out, x.requires_grad(), "sum_all");
        push([x, out]() {
            if (!x.requires_grad()) return;
            auto& gx = x.grad();
            const real g = out.grad()[0];
            for (auto& v : gx) v += g;
        });
        return out;
    }

    // ---- activations ------------------------------------------------------

    Tensor relu(const Tensor& x) {
        Tensor out = Tensor::zeros(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i)
            out.values()[i] = x.values()[i] > 0 ? x.values()[i] : real(0);
        finish_forward(out, x.requires_grad(), "relu");
        push([x, out]() {
            if (!x.requires_grad()) return;
            auto& gx = x.grad();
            const auto& go = out.grad();
            for (std::size_t i = 0; i < go.size(); ++i)
                if (x.values()[i] > 0) gx[i] += go[i];
        });
        return out;
    }

    Tensor sigmoid(const Tensor& x) {
        Tensor out = Tensor::zeros(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
            const real v = x.values()[i];
            // evaluate on the negative side only; stable for |v| large
            out.values()[i] = v >= 0 ? real(1) / (real(1) + std::exp(-v))
                                     : std::exp(v) / (real(1) + std::exp(v));
        }
        finish_forward(out, x.requires_grad(), "sigmoid");
        push([x, out]() {
            if (!x.requires_grad()) return;
            auto& gx = x.grad();
            const auto& go = out.grad();
            for (std::size_t i = 0; i < go.size(); ++i) {
                const real s = out.values()[i];
                gx[i] += go[i] * s * (real(1) - s);
            }
        });
        return out;
    }

    Tensor tanh(const Tensor& x) {
        Tensor out = Tensor::zeros(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) out.values()[i] = std::tanh(x.values()[i]);
        finish_forward(out, x.requires_grad(), "tanh");
        push([x, out]() {
            if (!x.requires_grad()) return;
            auto& gx = x.grad();
            const auto& go = out.grad();
            for (std::size_t i = 0; i < go.size(); ++i) {
                const real t = out.values()[i];
                gx[i] += go[i] * (real(1) - t * t);
            }
        });
        return out;
    }

    // ---- structure --------------------------------------------------------

    // Joins feature maps along the feature axis: [B,D_1] ++ ... -> [B, sum D_i].
    Tensor concat(const std::vector<Tensor>& xs) {
        if (xs.empty()) throw ContractError("concat: no inputs");
        const int B = xs.front().rows();
        int D = 0;
        bool rg = false;
        for (const auto& x : xs) {
            if (x.rows() != B)
                throw ShapeError("concat: batch mismatch " + shape_str(xs.front().shape()) +
                                 " vs " + shape_str(x.shape()));
            D += x.cols();
            rg = rg || x.requires_grad();
        }
        Tensor out = Tensor::zeros({B, D});
        int off = 0;
        for (const auto& x : xs) {
            const int d = x.cols();
            for (int i = 0; i < B; ++i)
                for (int j = 0; j < d; ++j) out.at(i, off + j) = x.at(i, j);
            off += d;
        }
        finish_forward(out, rg, "concat");
        push([xs, out]() {
            const int B2 = out.rows();
            int off2 = 0;
            for (const auto& x : xs) {
                const int d = x.cols();
                if (x.requires_grad()) {
                    auto& gx = x.grad();
                    for (int i = 0; i < B2; ++i)
                        for (int j = 0; j < d; ++j)
                            gx[static_cast<std::size_t>(i) * d + j] += out.grad()[static_cast<std::size_t>(i) * out.cols() + off2 + j];
                }
                off2 += d;
            }
        });
        return out;
    }

    // Stacks k row vectors [1,D] (or equal-width matrices) along the batch axis.
    Tensor stack_rows(const std::vector<Tensor>& xs) {
        if (xs.empty()) throw ContractError("stack_rows: no inputs");
        const int D = xs.front().cols();
        int B = 0;
        bool rg = false;
        for (const auto& x : xs) {
            if (x.cols() != D)
                throw ShapeError("stack_rows: width mismatch " + shape_str(xs.front().shape()) +
                                 " vs " + shape_str(x.shape()));
            B += x.rows();
            rg = rg || x.requires_grad();
        }
        Tensor out = Tensor::zeros({B, D});
        std::size_t off = 0;
        for (const auto& x : xs) {
            std::copy(x.values().begin(), x.values().end(), out.values().begin() + off);
            off += x.size();
        }
        finish_forward(out, rg, "stack_rows");
        push([xs, out]() {
            std::size_t off2 = 0;
            for (const auto& x : xs) {
                if (x.requires_grad()) {
                    auto& gx = x.grad();
                    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += out.grad()[off2 + i];
                }
                off2 += x.size();
            }
        });
        return out;
    }

    // Rows [r0, r1) of x.
    Tensor slice_rows(const Tensor& x, int r0, int r1) {
        if (r0 < 0 || r1 > x.rows() || r0 >= r1)
            throw ContractError("slice_rows: bad range [" + std::to_string(r0) + "," +
                                std::to_string(r1) + ") for " + shape_str(x.shape()));
        const int D = x.cols();
        Tensor out = Tensor::zeros({r1 - r0, D});
        std::copy(x.values().begin() + static_cast<std::size_t>(r0) * D,
                  x.values().begin() + static_cast<std::size_t>(r1) * D, out.values().begin());
        finish_forward(out, x.requires_grad(), "slice_rows");
        push([x, out, r0]() {
            if (!x.requires_grad()) return;
            auto& gx = x.grad();
            const int D2 = x.cols();
            for (std::size_t i = 0; i < out.size(); ++i)
                gx[static_cast<std::size_t>(r0) * D2 + i] += out.grad()[i];
        });
        return out;
    }

    // Arithmetic mean over rows: [T,D] -> [1,D].
    Tensor mean_rows(const Tensor& x) {
        const int T = x.rows(), D = x.cols();
        Tensor out = Tensor::zeros({1, D});
        for (int t = 0; t < T; ++t)
            for (int j = 0; j < D; ++j) out.at(0, j) += x.at(t, j);
        for (int j = 0; j < D; ++j) out.at(0, j) /= static_cast<real>(T);
        finish_forward(out, x.requires_grad(), "mean_rows");
        push([x, out]() {
            if (!x.requires_grad()) return;
            auto& gx = x.grad();
            const int T2 = x.rows(), D2 = x.cols();
            const real inv = real(1) / static_cast<real>(T2);
            for (int t = 0; t < T2; ++t)
                for (int j = 0; j < D2; ++j)
                    gx[static_cast<std::size_t>(t) * D2 + j] += inv * out.grad()[static_cast<std::size_t>(j)];
        });
        return out;
    }

    // ---- probability ------------------------------------------------------

    // Row-wise softmax with per-row max subtraction.
    Tensor softmax_rows(const Tensor& s) {
        const int B = s.rows(), C = s.cols();
        if (C < 1) throw ContractError("softmax_rows: empty rows");
        Tensor out = Tensor::zeros(s.shape());
        for (int i = 0; i < B; ++i) {
            real mx = s.at(i, 0);
            for (int j = 1; j < C; ++j) mx = std::max(mx, s.at(i, j));
            real z = 0;
            for (int j = 0; j < C; ++j) {
                const real e = std::exp(s.at(i, j) - mx);
                out.at(i, j) = e;
                z += e;
            }
            for (int j = 0; j < C; ++j) out.at(i, j) /= z;
        }
        finish_forward(out, s.requires_grad(), "softmax_rows");
        softmax_scores_[out.id()] = s;
        push([s, out]() {
            if (!s.requires_grad()) return;
            auto& gs = s.grad();
            const auto& go = out.grad();
            const int B2 = out.rows(), C2 = out.cols();
            for (int i = 0; i < B2; ++i) {
                real dot = 0;
                for (int j = 0; j < C2; ++j)
                    dot += go[static_cast<std::size_t>(i) * C2 + j] * out.at(i, j);
                for (int j = 0; j < C2; ++j)
                    gs[static_cast<std::size_t>(i) * C2 + j] +=
                        out.at(i, j) * (go[static_cast<std::size_t>(i) * C2 + j] - dot);
            }
        });
        return out;
    }

    // Mean over the batch of -sum_c target*log(pred). When pred came from
    // softmax_rows in this graph, the backward path is fused: the gradient
    // lands directly on the scores as (pred - target)/B.
    Tensor cross_entropy(const Tensor& target, const Tensor& pred) {
        if (target.shape() != pred.shape())
            throw ShapeError("cross_entropy: target " + shape_str(target.shape()) +
                             " vs prediction " + shape_str(pred.shape()));
        const int B = pred.rows(), C = pred.cols();
        for (int i = 0; i < B; ++i) {
            real rowsum = 0;
            for (int j = 0; j < C; ++j) rowsum += target.at(i, j);
            if (std::abs(rowsum - real(1)) > real(1e-6))
                throw ContractError("cross_entropy: target row " + std::to_string(i) +
                                    " sums to " + std::to_string(rowsum));
        }
        real loss = 0;
        for (int i = 0; i < B; ++i)
            for (int j = 0; j < C; ++j)
                loss -= target.at(i, j) * std::log(std::max(pred.at(i, j), kProbFloor));
        loss /= static_cast<real>(B);
        Tensor out = Tensor::scalar(loss);
        finish_forward(out, pred.requires_grad(), "cross_entropy");

        auto it = softmax_scores_.find(pred.id());
        if (it != softmax_scores_.end()) {
            Tensor scores = it->second;
            push([target, pred, scores, out]() {
                if (!scores.requires_grad()) return;
                auto& gs = scores.grad();
                const real g = out.grad()[0];
                const int B2 = pred.rows(), C2 = pred.cols();
                const real invB = real(1) / static_cast<real>(B2);
                for (int i = 0; i < B2; ++i)
                    for (int j = 0; j < C2; ++j)
                        gs[static_cast<std::size_t>(i) * C2 + j] +=
                            g * invB * (pred.at(i, j) - target.at(i, j));
            });
        } else {
            push([target, pred, out]() {
                if (!pred.requires_grad()) return;
                auto& gp = pred.grad();
                const real g = out.grad()[0];
                const int B2 = pred.rows(), C2 = pred.cols();
                const real invB = real(1) / static_cast<real>(B2);
                for (int i = 0; i < B2; ++i)
                    for (int j = 0; j < C2; ++j) {
                        const real p = std::max(pred.at(i, j), kProbFloor);
                        gp[static_cast<std::size_t>(i) * C2 + j] -=
                            g * invB * target.at(i, j) / p;
                    }
            });
        }
        return out;
    }

    // ---- regularizing units ------------------------------------------------

    // Train: normalize by batch statistics (biased variance) and update the
    // running estimates; test: normalize by running estimates. Backward in
    // train mode differentiates through mean and variance.
    Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     RunningStats& stats, Mode mode) {
        const int B = x.rows(), D = x.cols();
        if (static_cast<int>(gamma.size()) != D || static_cast<int>(beta.size()) != D)
            throw ShapeError("batchnorm: parameter width does not match input " +
                             shape_str(x.shape()));
        if (mode == Mode::train && B < 2)
            throw ContractError("batchnorm: train mode needs a batch of at least 2 rows, got " +
                                std::to_string(B));

        Tensor out = Tensor::zeros(x.shape());
        const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();

        if (mode == Mode::train) {
            std::vector<real> mu(static_cast<std::size_t>(D)), var(static_cast<std::size_t>(D));
            for (int j = 0; j < D; ++j) {
                real m = 0;
                for (int i = 0; i < B; ++i) m += x.at(i, j);
                m /= static_cast<real>(B);
                real v = 0;
                for (int i = 0; i < B; ++i) {
                    const real d = x.at(i, j) - m;
                    v += d * d;
                }
                v /= static_cast<real>(B);
                mu[static_cast<std::size_t>(j)] = m;
                var[static_cast<std::size_t>(j)] = v;
            }
            Tensor xhat = Tensor::zeros(x.shape());
            for (int i = 0; i < B; ++i)
                for (int j = 0; j < D; ++j) {
                    const real h = (x.at(i, j) - mu[static_cast<std::size_t>(j)]) /
                                   std::sqrt(var[static_cast<std::size_t>(j)] + kBnEps);
                    xhat.at(i, j) = h;
                    out.at(i, j) = gamma.at(j) * h + beta.at(j);
                }
            for (int j = 0; j < D; ++j) {
                stats.mean.at(j) = (real(1) - stats.momentum) * stats.mean.at(j) +
                                   stats.momentum * mu[static_cast<std::size_t>(j)];
                stats.var.at(j) = (real(1) - stats.momentum) * stats.var.at(j) +
                                  stats.momentum * var[static_cast<std::size_t>(j)];
            }
            ++stats.updates;
            finish_forward(out, rg, "batchnorm");
            push([x, gamma, beta, out, xhat, mu, var]() {
                const int B2 = x.rows(), D2 = x.cols();
                const auto& go = out.grad();
                if (gamma.requires_grad()) {
                    auto& gg = gamma.grad();
                    for (int i = 0; i < B2; ++i)
                        for (int j = 0; j < D2; ++j)
                            gg[static_cast<std::size_t>(j)] += go[static_cast<std::size_t>(i) * D2 + j] * xhat.at(i, j);
                }
                if (beta.requires_grad()) {
                    auto& gb = beta.grad();
                    for (int i = 0; i < B2; ++i)
                        for (int j = 0; j < D2; ++j)
                            gb[static_cast<std::size_t>(j)] += go[static_cast<std::size_t>(i) * D2 + j];
                }
                if (x.requires_grad()) {
                    auto& gx = x.grad();
                    const real invB = real(1) / static_cast<real>(B2);
                    for (int j = 0; j < D2; ++j) {
                        const real istd = real(1) / std::sqrt(var[static_cast<std::size_t>(j)] + kBnEps);
                        // dxhat_i = go_i * gamma; reduce to the two batch sums
                        real sum_dxhat = 0, sum_dxhat_xhat = 0;
                        for (int i = 0; i < B2; ++i) {
                            const real dxh = go[static_cast<std::size_t>(i) * D2 + j] * gamma.at(j);
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat.at(i, j);
                        }
                        for (int i = 0; i < B2; ++i) {
                            const real dxh = go[static_cast<std::size_t>(i) * D2 + j] * gamma.at(j);
                            gx[static_cast<std::size_t>(i) * D2 + j] +=
                                istd * (dxh - invB * sum_dxhat - invB * xhat.at(i, j) * sum_dxhat_xhat);
                        }
                    }
                }
            });
        } else {
            if (stats.updates == 0) stats.warned_uninitialized = true;
            Tensor xhat = Tensor::zeros(x.shape());
            for (int i = 0; i < B; ++i)
                for (int j = 0; j < D; ++j) {
                    const real h = (x.at(i, j) - stats.mean.at(j)) /
                                   std::sqrt(stats.var.at(j) + kBnEps);
                    xhat.at(i, j) = h;
                    out.at(i, j) = gamma.at(j) * h + beta.at(j);
                }
            finish_forward(out, rg, "batchnorm");
            Tensor rmean = stats.mean, rvar = stats.var;
            push([x, gamma, beta, out, xhat, rmean, rvar]() {
                const int B2 = x.rows(), D2 = x.cols();
                const auto& go = out.grad();
                if (gamma.requires_grad()) {
                    auto& gg = gamma.grad();
                    for (int i = 0; i < B2; ++i)
                        for (int j = 0; j < D2; ++j)
                            gg[static_cast<std::size_t>(j)] += go[static_cast<std::size_t>(i) * D2 + j] * xhat.at(i, j);
                }
                if (beta.requires_grad()) {
                    auto& gb = beta.grad();
                    for (int i = 0; i < B2; ++i)
                        for (int j = 0; j < D2; ++j)
                            gb[static_cast<std::size_t>(j)] += go[static_cast<std::size_t>(i) * D2 + j];
                }
                if (x.requires_grad()) {
                    auto& gx = x.grad();
                    for (int i = 0; i < B2; ++i)
                        for (int j = 0; j < D2; ++j)
                            gx[static_cast<std::size_t>(i) * D2 + j] +=
                                go[static_cast<std::size_t>(i) * D2 + j] * gamma.at(j) /
                                std::sqrt(rvar.at(j) + kBnEps);
                }
            });
        }
        return out;
    }

    // Inverted dropout: survivors are scaled by 1/(1-rate) at train time so
    // test mode is a literal identity.
    Tensor dropout(const Tensor& x, real rate, Mode mode, RngStream& rng) {
        if (rate >= real(1) || rate < real(0))
            throw ConfigError("dropout rate must lie in [0,1), got " + std::to_string(rate));
        if (mode == Mode::test || rate == real(0)) return x;
        Tensor out = Tensor::zeros(x.shape());
        std::vector<real> mask(x.size());
        const real keep = real(1) - rate;
        const real inv_keep = real(1) / keep;
        for (std::size_t i = 0; i < x.size(); ++i) {
            mask[i] = (rng.u01() < rate) ? real(0) : inv_keep;
            out.values()[i] = x.values()[i] * mask[i];
        }
        finish_forward(out, x.requires_grad(), "dropout");
        push([x, out, mask = std::move(mask)]() {
            if (!x.requires_grad()) return;
            auto& gx = x.grad();
            const auto& go = out.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * mask[i];
        });
        return out;
    }

    // ---- reverse sweep ----------------------------------------------------

    void backward(const Tensor& loss) {
        if (!loss.is_scalar())
            throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        loss.grad()[0] += real(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    using BackFn = std::function<void()>;

    void push(BackFn fn) { nodes_.push_back(std::move(fn)); }

    static void check_matmul_shapes(const Tensor& x, const Tensor& W, const char* op) {
        if (x.ndim() != 2 || W.ndim() != 2 || x.cols() != W.rows())
            throw ShapeError(std::string(op) + ": inner dimensions disagree, " +
                             shape_str(x.shape()) + " vs " + shape_str(W.shape()));
    }

    static Tensor matmul_forward(const Tensor& x, const Tensor& W) {
        const int B = x.rows(), K = x.cols(), D = W.cols();
        Tensor out = Tensor::zeros({B, D});
        for (int i = 0; i < B; ++i)
            for (int k = 0; k < K; ++k) {
                const real xv = x.at(i, k);
                if (xv == real(0)) continue;
                for (int j = 0; j < D; ++j) out.at(i, j) += xv * W.at(k, j);
            }
        return out;
    }

    static void matmul_backward(const Tensor& x, const Tensor& W, const Tensor& out) {
        const int B = x.rows(), K = x.cols(), D = W.cols();
        const auto& go = out.grad();
        if (x.requires_grad()) {
            auto& gx = x.grad();
            for (int i = 0; i < B; ++i)
                for (int j = 0; j < D; ++j) {
                    const real g = go[static_cast<std::size_t>(i) * D + j];
                    if (g == real(0)) continue;
                    for (int k = 0; k < K; ++k)
                        gx[static_cast<std::size_t>(i) * K + k] += g * W.at(k, j);
                }
        }
        if (W.requires_grad()) {
            auto& gW = W.grad();
            for (int i = 0; i < B; ++i)
                for (int k = 0; k < K; ++k) {
                    const real xv = x.at(i, k);
                    if (xv == real(0)) continue;
                    for (int j = 0; j < D; ++j)
                        gW[static_cast<std::size_t>(k) * D + j] += xv * go[static_cast<std::size_t>(i) * D + j];
                }
        }
    }

    void finish_forward(Tensor& out, bool requires_grad, const char* op) {
        out.set_requires_grad(requires_grad);
#ifndef NDEBUG
        for (real v : out.values())
            if (!std::isfinite(v))
                throw ContractError(std::string("non-finite value produced by op '") + op + "'");
#else
        (void)op;
#endif
    }

    std::vector<BackFn> nodes_;
    // softmax output buffer -> score tensor, for the fused loss backward
    std::unordered_map<const void*, Tensor> softmax_scores_;
};

} // namespace mrpn
