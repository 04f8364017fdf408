#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dygfm/matrix.hpp"
#include "dygfm/param_store.hpp"

namespace dygfm {

enum class OpKind {
    Input,
    MatMul,
    Add,
    Sub,
    MulElem,
    Scale,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Neg,
    ConcatCols,
    ConcatRows,
    MeanRows,
    SumAll,
    SoftmaxRows,
    LayerNormRows,
    Transpose,
    RowGather,
    BroadcastRowAdd,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Input: return "input";
        case OpKind::MatMul: return "matmul";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::MulElem: return "mul-elementwise";
        case OpKind::Scale: return "scale";
        case OpKind::Relu: return "relu";
        case OpKind::Tanh: return "tanh";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::Exp: return "exp";
        case OpKind::Log: return "log";
        case OpKind::Neg: return "neg";
        case OpKind::ConcatCols: return "concat-cols";
        case OpKind::ConcatRows: return "concat-rows";
        case OpKind::MeanRows: return "mean-rows";
        case OpKind::SumAll: return "sum-all";
        case OpKind::SoftmaxRows: return "softmax-rows";
        case OpKind::LayerNormRows: return "layer-norm-rows";
        case OpKind::Transpose: return "transpose";
        case OpKind::RowGather: return "row-gather";
        case OpKind::BroadcastRowAdd: return "broadcast-row-add";
    }
    return "?";
}

class TapeError : public std::runtime_error {
public:
    explicit TapeError(const std::string& what) : std::runtime_error(what) {}
};

// Reverse-mode tape over dense matrices. The tape is rebuilt per training
// step; nodes are appended in topological order, so backward is a single
// reverse sweep. Parameter leaves are bound to ParamStore entries; frozen
// entries enter as plain inputs and never receive gradient.
class Tape {
public:
    using NodeRef = std::size_t;

    struct Node {
        OpKind kind;
        std::vector<NodeRef> inputs;
        Matrix value;
        double scalar_arg = 0.0;            // Scale factor
        std::vector<std::size_t> indices;   // RowGather indices
        std::ptrdiff_t param = -1;          // ParamStore entry index, or -1
    };

    explicit Tape(ParamStore* store = nullptr) : store_(store) {}

    ParamStore* store() const { return store_; }

    const Matrix& value(NodeRef n) const { return nodes_[n].value; }
    std::size_t size() const { return nodes_.size(); }

    NodeRef input(Matrix m) {
        Node n{OpKind::Input, {}, std::move(m)};
        return push(std::move(n));
    }

    // Parameter leaf. Frozen entries are recorded without a param link, so
    // backward sees them as constants.
    NodeRef param(const std::string& name) {
        if (!store_) throw TapeError("tape has no parameter store attached");
        const std::size_t idx = store_->index_of(name);
        Node n{OpKind::Input, {}, store_->entry(idx).value};
        if (!store_->entry(idx).frozen) n.param = static_cast<std::ptrdiff_t>(idx);
        return push(std::move(n));
    }

    NodeRef matmul(NodeRef a, NodeRef b) {
        const Matrix& A = nodes_[a].value;
        const Matrix& B = nodes_[b].value;
        if (A.cols() != B.rows())
            throw TapeError(shape_msg(OpKind::MatMul, A, B));
        Matrix out(A.rows(), B.cols());
        for (std::size_t i = 0; i < A.rows(); ++i)
            for (std::size_t k = 0; k < A.cols(); ++k) {
                const double av = A(i, k);
                if (av == 0.0) continue;
                for (std::size_t j = 0; j < B.cols(); ++j) out(i, j) += av * B(k, j);
            }
        return push({OpKind::MatMul, {a, b}, std::move(out)});
    }

    NodeRef add(NodeRef a, NodeRef b) { return binary_elem(OpKind::Add, a, b); }
    NodeRef sub(NodeRef a, NodeRef b) { return binary_elem(OpKind::Sub, a, b); }
    NodeRef mul(NodeRef a, NodeRef b) { return binary_elem(OpKind::MulElem, a, b); }

    NodeRef scale(NodeRef a, double c) {
        Matrix out = nodes_[a].value;
        for (double& v : out.values()) v *= c;
        Node n{OpKind::Scale, {a}, std::move(out)};
        n.scalar_arg = c;
        return push(std::move(n));
    }

    NodeRef relu(NodeRef a) { return unary(OpKind::Relu, a, [](double x) { return x > 0.0 ? x : 0.0; }); }
    NodeRef tanh(NodeRef a) { return unary(OpKind::Tanh, a, [](double x) { return std::tanh(x); }); }
    NodeRef sigmoid(NodeRef a) {
        return unary(OpKind::Sigmoid, a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    }
    NodeRef exp(NodeRef a) { return unary(OpKind::Exp, a, [](double x) { return std::exp(x); }); }
    NodeRef neg(NodeRef a) { return unary(OpKind::Neg, a, [](double x) { return -x; }); }

    NodeRef log(NodeRef a) {
        for (double v : nodes_[a].value.values())
            if (v <= 0.0)
                throw TapeError("log: non-positive argument " + std::to_string(v));
        return unary(OpKind::Log, a, [](double x) { return std::log(x); });
    }

    NodeRef concat_cols(const std::vector<NodeRef>& parts) {
        if (parts.empty()) throw TapeError("concat-cols: no inputs");
        const std::size_t rows = nodes_[parts[0]].value.rows();
        std::size_t cols = 0;
        for (NodeRef p : parts) {
            if (nodes_[p].value.rows() != rows)
                throw TapeError(shape_msg(OpKind::ConcatCols, nodes_[parts[0]].value, nodes_[p].value));
            cols += nodes_[p].value.cols();
        }
        Matrix out(rows, cols);
        std::size_t off = 0;
        for (NodeRef p : parts) {
            const Matrix& m = nodes_[p].value;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < m.cols(); ++c) out(r, off + c) = m(r, c);
            off += m.cols();
        }
        return push({OpKind::ConcatCols, parts, std::move(out)});
    }

    NodeRef concat_rows(const std::vector<NodeRef>& parts) {
        if (parts.empty()) throw TapeError("concat-rows: no inputs");
        const std::size_t cols = nodes_[parts[0]].value.cols();
        std::size_t rows = 0;
        for (NodeRef p : parts) {
            if (nodes_[p].value.cols() != cols)
                throw TapeError(shape_msg(OpKind::ConcatRows, nodes_[parts[0]].value, nodes_[p].value));
            rows += nodes_[p].value.rows();
        }
        Matrix out(rows, cols);
        std::size_t off = 0;
        for (NodeRef p : parts) {
            const Matrix& m = nodes_[p].value;
            for (std::size_t r = 0; r < m.rows(); ++r)
                for (std::size_t c = 0; c < cols; ++c) out(off + r, c) = m(r, c);
            off += m.rows();
        }
        return push({OpKind::ConcatRows, parts, std::move(out)});
    }

    // Column-wise mean over rows: (r x c) -> (1 x c).
    NodeRef mean_rows(NodeRef a) {
        const Matrix& A = nodes_[a].value;
        if (A.rows() == 0) throw TapeError("mean-rows: empty matrix");
        Matrix out(1, A.cols());
        for (std::size_t r = 0; r < A.rows(); ++r)
            for (std::size_t c = 0; c < A.cols(); ++c) out(0, c) += A(r, c);
        for (double& v : out.values()) v /= static_cast<double>(A.rows());
        return push({OpKind::MeanRows, {a}, std::move(out)});
    }

    NodeRef sum_all(NodeRef a) {
        const Matrix& A = nodes_[a].value;
        double s = 0.0;
        for (double v : A.values()) s += v;
        return push({OpKind::SumAll, {a}, Matrix(1, 1, {s})});
    }

    NodeRef softmax_rows(NodeRef a) {
        const Matrix& A = nodes_[a].value;
        Matrix out(A.rows(), A.cols());
        for (std::size_t r = 0; r < A.rows(); ++r) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < A.cols(); ++c) mx = std::max(mx, A(r, c));
            double denom = 0.0;
            for (std::size_t c = 0; c < A.cols(); ++c) denom += std::exp(A(r, c) - mx);
            for (std::size_t c = 0; c < A.cols(); ++c) out(r, c) = std::exp(A(r, c) - mx) / denom;
        }
        return push({OpKind::SoftmaxRows, {a}, std::move(out)});
    }

    // Row-wise normalization with population variance and eps=1e-5 inside the
    // square root. No affine part; compose with mul/broadcast-row-add for that.
    NodeRef layer_norm_rows(NodeRef a) {
        const Matrix& A = nodes_[a].value;
        Matrix out(A.rows(), A.cols());
        for (std::size_t r = 0; r < A.rows(); ++r) {
            const std::size_t d = A.cols();
            double mean = 0.0;
            for (std::size_t c = 0; c < d; ++c) mean += A(r, c);
            mean /= static_cast<double>(d);
            double var = 0.0;
            for (std::size_t c = 0; c < d; ++c) var += (A(r, c) - mean) * (A(r, c) - mean);
            var /= static_cast<double>(d);
            const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
            for (std::size_t c = 0; c < d; ++c) out(r, c) = (A(r, c) - mean) * inv;
        }
        return push({OpKind::LayerNormRows, {a}, std::move(out)});
    }

    NodeRef transpose(NodeRef a) {
        const Matrix& A = nodes_[a].value;
        Matrix out(A.cols(), A.rows());
        for (std::size_t r = 0; r < A.rows(); ++r)
            for (std::size_t c = 0; c < A.cols(); ++c) out(c, r) = A(r, c);
        return push({OpKind::Transpose, {a}, std::move(out)});
    }

    // Select rows by index (repeats allowed). Gradient scatters with
    // accumulation.
    NodeRef row_gather(NodeRef a, std::vector<std::size_t> rows) {
        const Matrix& A = nodes_[a].value;
        Matrix out(rows.size(), A.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i] >= A.rows())
                throw TapeError("row-gather: index " + std::to_string(rows[i]) + " out of " +
                                std::to_string(A.rows()) + " rows");
            for (std::size_t c = 0; c < A.cols(); ++c) out(i, c) = A(rows[i], c);
        }
        Node n{OpKind::RowGather, {a}, std::move(out)};
        n.indices = std::move(rows);
        return push(std::move(n));
    }

    // X (r x c) + row b (1 x c) added to every row.
    NodeRef broadcast_row_add(NodeRef x, NodeRef b) {
        const Matrix& X = nodes_[x].value;
        const Matrix& B = nodes_[b].value;
        if (B.rows() != 1 || B.cols() != X.cols())
            throw TapeError(shape_msg(OpKind::BroadcastRowAdd, X, B));
        Matrix out = X;
        for (std::size_t r = 0; r < X.rows(); ++r)
            for (std::size_t c = 0; c < X.cols(); ++c) out(r, c) += B(0, c);
        return push({OpKind::BroadcastRowAdd, {x, b}, std::move(out)});
    }

    // Reverse sweep from a scalar loss. Gradients are assigned fresh: every
    // entry in the store is zeroed first, then reachable unfrozen parameters
    // accumulate dLoss/dParam.
    void backward(NodeRef loss) {
        const Matrix& L = nodes_[loss].value;
        if (L.rows() != 1 || L.cols() != 1)
            throw TapeError("backward: loss must be scalar 1x1, got " + L.shape_str());
        if (store_) store_->zero_grads();

        std::vector<Matrix> grad(nodes_.size());
        std::vector<bool> live(nodes_.size(), false);
        grad[loss] = Matrix(1, 1, {1.0});
        live[loss] = true;

        for (std::size_t i = loss + 1; i-- > 0;) {
            if (!live[i]) continue;
            const Node& n = nodes_[i];
            const Matrix& g = grad[i];
            switch (n.kind) {
                case OpKind::Input:
                    if (n.param >= 0 && store_) {
                        Matrix& pg = store_->entry(static_cast<std::size_t>(n.param)).grad;
                        for (std::size_t k = 0; k < pg.size(); ++k) pg.at(k) += g.at(k);
                    }
                    break;
                case OpKind::MatMul: {
                    const Matrix& A = nodes_[n.inputs[0]].value;
                    const Matrix& B = nodes_[n.inputs[1]].value;
                    Matrix& ga = ensure(grad, live, n.inputs[0], A);
                    Matrix& gb = ensure(grad, live, n.inputs[1], B);
                    // dA += g * B^T
                    for (std::size_t i2 = 0; i2 < A.rows(); ++i2)
                        for (std::size_t j = 0; j < B.cols(); ++j) {
                            const double gv = g(i2, j);
                            if (gv == 0.0) continue;
                            for (std::size_t k = 0; k < A.cols(); ++k) ga(i2, k) += gv * B(k, j);
                        }
                    // dB += A^T * g
                    for (std::size_t k = 0; k < A.cols(); ++k)
                        for (std::size_t i2 = 0; i2 < A.rows(); ++i2) {
                            const double av = A(i2, k);
                            if (av == 0.0) continue;
                            for (std::size_t j = 0; j < B.cols(); ++j) gb(k, j) += av * g(i2, j);
                        }
                    break;
                }
                case OpKind::Add: {
                    accumulate(grad, live, n.inputs[0], g, 1.0);
                    accumulate(grad, live, n.inputs[1], g, 1.0);
                    break;
                }
                case OpKind::Sub: {
                    accumulate(grad, live, n.inputs[0], g, 1.0);
                    accumulate(grad, live, n.inputs[1], g, -1.0);
                    break;
                }
                case OpKind::MulElem: {
                    const Matrix& A = nodes_[n.inputs[0]].value;
                    const Matrix& B = nodes_[n.inputs[1]].value;
                    Matrix& ga = ensure(grad, live, n.inputs[0], A);
                    Matrix& gb = ensure(grad, live, n.inputs[1], B);
                    for (std::size_t k = 0; k < A.size(); ++k) {
                        ga.at(k) += g.at(k) * B.at(k);
                        gb.at(k) += g.at(k) * A.at(k);
                    }
                    break;
                }
                case OpKind::Scale:
                    accumulate(grad, live, n.inputs[0], g, n.scalar_arg);
                    break;
                case OpKind::Relu: {
                    const Matrix& A = nodes_[n.inputs[0]].value;
                    Matrix& ga = ensure(grad, live, n.inputs[0], A);
                    for (std::size_t k = 0; k < A.size(); ++k)
                        if (A.at(k) > 0.0) ga.at(k) += g.at(k);
                    break;
                }
                case OpKind::Tanh: {
                    Matrix& ga = ensure(grad, live, n.inputs[0], nodes_[n.inputs[0]].value);
                    for (std::size_t k = 0; k < n.value.size(); ++k)
                        ga.at(k) += g.at(k) * (1.0 - n.value.at(k) * n.value.at(k));
                    break;
                }
                case OpKind::Sigmoid: {
                    Matrix& ga = ensure(grad, live, n.inputs[0], nodes_[n.inputs[0]].value);
                    for (std::size_t k = 0; k < n.value.size(); ++k)
                        ga.at(k) += g.at(k) * n.value.at(k) * (1.0 - n.value.at(k));
                    break;
                }
                case OpKind::Exp: {
                    Matrix& ga = ensure(grad, live, n.inputs[0], nodes_[n.inputs[0]].value);
                    for (std::size_t k = 0; k < n.value.size(); ++k)
                        ga.at(k) += g.at(k) * n.value.at(k);
                    break;
                }
                case OpKind::Log: {
                    const Matrix& A = nodes_[n.inputs[0]].value;
                    Matrix& ga = ensure(grad, live, n.inputs[0], A);
                    for (std::size_t k = 0; k < A.size(); ++k) ga.at(k) += g.at(k) / A.at(k);
                    break;
                }
                case OpKind::Neg:
                    accumulate(grad, live, n.inputs[0], g, -1.0);
                    break;
                case OpKind::ConcatCols: {
                    std::size_t off = 0;
                    for (NodeRef p : n.inputs) {
                        const Matrix& P = nodes_[p].value;
                        Matrix& gp = ensure(grad, live, p, P);
                        for (std::size_t r = 0; r < P.rows(); ++r)
                            for (std::size_t c = 0; c < P.cols(); ++c) gp(r, c) += g(r, off + c);
                        off += P.cols();
                    }
                    break;
                }
                case OpKind::ConcatRows: {
                    std::size_t off = 0;
                    for (NodeRef p : n.inputs) {
                        const Matrix& P = nodes_[p].value;
                        Matrix& gp = ensure(grad, live, p, P);
                        for (std::size_t r = 0; r < P.rows(); ++r)
                            for (std::size_t c = 0; c < P.cols(); ++c) gp(r, c) += g(off + r, c);
                        off += P.rows();
                    }
                    break;
                }
                case OpKind::MeanRows: {
                    const Matrix& A = nodes_[n.inputs[0]].value;
                    Matrix& ga = ensure(grad, live, n.inputs[0], A);
                    const double inv = 1.0 / static_cast<double>(A.rows());
                    for (std::size_t r = 0; r < A.rows(); ++r)
                        for (std::size_t c = 0; c < A.cols(); ++c) ga(r, c) += g(0, c) * inv;
                    break;
                }
                case OpKind::SumAll: {
                    const Matrix& A = nodes_[n.inputs[0]].value;
                    Matrix& ga = ensure(grad, live, n.inputs[0], A);
                    for (std::size_t k = 0; k < A.size(); ++k) ga.at(k) += g.at(0);
                    break;
                }
                case OpKind::SoftmaxRows: {
                    const Matrix& S = n.value;
                    Matrix& ga = ensure(grad, live, n.inputs[0], S);
                    for (std::size_t r = 0; r < S.rows(); ++r) {
                        double dot = 0.0;
                        for (std::size_t c = 0; c < S.cols(); ++c) dot += g(r, c) * S(r, c);
                        for (std::size_t c = 0; c < S.cols(); ++c)
                            ga(r, c) += S(r, c) * (g(r, c) - dot);
                    }
                    break;
                }
                case OpKind::LayerNormRows: {
                    const Matrix& A = nodes_[n.inputs[0]].value;
                    const Matrix& Y = n.value;
                    Matrix& ga = ensure(grad, live, n.inputs[0], A);
                    const std::size_t d = A.cols();
                    for (std::size_t r = 0; r < A.rows(); ++r) {
                        double mean = 0.0;
                        for (std::size_t c = 0; c < d; ++c) mean += A(r, c);
                        mean /= static_cast<double>(d);
                        double var = 0.0;
                        for (std::size_t c = 0; c < d; ++c) var += (A(r, c) - mean) * (A(r, c) - mean);
                        var /= static_cast<double>(d);
                        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                        double gsum = 0.0, gysum = 0.0;
                        for (std::size_t c = 0; c < d; ++c) {
                            gsum += g(r, c);
                            gysum += g(r, c) * Y(r, c);
                        }
                        const double dn = static_cast<double>(d);
                        for (std::size_t c = 0; c < d; ++c)
                            ga(r, c) += inv * (g(r, c) - gsum / dn - Y(r, c) * gysum / dn);
                    }
                    break;
                }
                case OpKind::Transpose: {
                    const Matrix& A = nodes_[n.inputs[0]].value;
                    Matrix& ga = ensure(grad, live, n.inputs[0], A);
                    for (std::size_t r = 0; r < A.rows(); ++r)
                        for (std::size_t c = 0; c < A.cols(); ++c) ga(r, c) += g(c, r);
                    break;
                }
                case OpKind::RowGather: {
                    const Matrix& A = nodes_[n.inputs[0]].value;
                    Matrix& ga = ensure(grad, live, n.inputs[0], A);
                    for (std::size_t i2 = 0; i2 < n.indices.size(); ++i2)
                        for (std::size_t c = 0; c < A.cols(); ++c)
                            ga(n.indices[i2], c) += g(i2, c);
                    break;
                }
                case OpKind::BroadcastRowAdd: {
                    accumulate(grad, live, n.inputs[0], g, 1.0);
                    const Matrix& B = nodes_[n.inputs[1]].value;
                    Matrix& gb = ensure(grad, live, n.inputs[1], B);
                    for (std::size_t r = 0; r < g.rows(); ++r)
                        for (std::size_t c = 0; c < g.cols(); ++c) gb(0, c) += g(r, c);
                    break;
                }
            }
        }
    }

    static constexpr double kLayerNormEps = 1e-5;

private:
    NodeRef push(Node n) {
        if (!n.value.all_finite())
            throw TapeError(std::string("non-finite value produced by ") + op_name(n.kind));
        nodes_.push_back(std::move(n));
        return nodes_.size() - 1;
    }

    NodeRef binary_elem(OpKind k, NodeRef a, NodeRef b) {
        const Matrix& A = nodes_[a].value;
        const Matrix& B = nodes_[b].value;
        if (!A.same_shape(B)) throw TapeError(shape_msg(k, A, B));
        Matrix out(A.rows(), A.cols());
        for (std::size_t i = 0; i < A.size(); ++i) {
            switch (k) {
                case OpKind::Add: out.at(i) = A.at(i) + B.at(i); break;
                case OpKind::Sub: out.at(i) = A.at(i) - B.at(i); break;
                default: out.at(i) = A.at(i) * B.at(i); break;
            }
        }
        return push({k, {a, b}, std::move(out)});
    }

    template <typename F>
    NodeRef unary(OpKind k, NodeRef a, F f) {
        Matrix out = nodes_[a].value;
        for (double& v : out.values()) v = f(v);
        return push({k, {a}, std::move(out)});
    }

    static std::string shape_msg(OpKind k, const Matrix& a, const Matrix& b) {
        return std::string(op_name(k)) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str();
    }

    Matrix& ensure(std::vector<Matrix>& grad, std::vector<bool>& live, NodeRef i, const Matrix& like) {
        if (!live[i]) {
            grad[i] = Matrix(like.rows(), like.cols());
            live[i] = true;
        }
        return grad[i];
    }

    void accumulate(std::vector<Matrix>& grad, std::vector<bool>& live, NodeRef i, const Matrix& g,
                    double factor) {
        Matrix& ga = ensure(grad, live, i, nodes_[i].value);
        for (std::size_t k = 0; k < g.size(); ++k) ga.at(k) += factor * g.at(k);
    }

    ParamStore* store_;
    std::vector<Node> nodes_;
};

// Composite helpers built from the primitive ops. These live here because
// several modules share them.
namespace ops {

// elementwise 1/sqrt(x) for strictly positive x, via exp(-0.5*log(x)).
inline Tape::NodeRef rsqrt_positive(Tape& t, Tape::NodeRef x) {
    return t.exp(t.scale(t.log(x), -0.5));
}

// Row-wise L2 normalization; throws on a zero row (log of zero norm).
inline Tape::NodeRef normalize_rows(Tape& t, Tape::NodeRef x) {
    const std::size_t d = t.value(x).cols();
    Tape::NodeRef sq = t.mul(x, x);
    Tape::NodeRef norm2 = t.matmul(sq, t.input(Matrix(d, 1, 1.0)));  // (r x 1)
    Tape::NodeRef inv = rsqrt_positive(t, norm2);
    Tape::NodeRef spread = t.matmul(inv, t.input(Matrix(1, d, 1.0)));  // (r x d)
    return t.mul(x, spread);
}

// Row-wise dot products of equally-shaped matrices: (r x d),(r x d) -> (r x 1).
inline Tape::NodeRef rowwise_dot(Tape& t, Tape::NodeRef a, Tape::NodeRef b) {
    const std::size_t d = t.value(a).cols();
    return t.matmul(t.mul(a, b), t.input(Matrix(d, 1, 1.0)));
}

// LeakyReLU with the given negative slope, composed from relu and scale.
inline Tape::NodeRef leaky_relu(Tape& t, Tape::NodeRef x, double slope) {
    return t.add(t.scale(x, slope), t.scale(t.relu(x), 1.0 - slope));
}

// Mean over batch of -log softmax(scores)[, picked_col] where scores is
// (B x C) and picked is one column index per row. The softmax is computed
// over each whole row.
inline Tape::NodeRef softmax_cross_entropy(Tape& t, Tape::NodeRef scores,
                                           const std::vector<std::size_t>& picked, bool mean = true) {
    const Matrix& S = t.value(scores);
    Matrix mask(S.rows(), S.cols());
    for (std::size_t r = 0; r < S.rows(); ++r) mask(r, picked[r]) = 1.0;
    Tape::NodeRef logp = t.log(t.softmax_rows(scores));
    Tape::NodeRef picked_sum = t.sum_all(t.mul(logp, t.input(std::move(mask))));
    Tape::NodeRef loss = t.neg(picked_sum);
    if (mean) loss = t.scale(loss, 1.0 / static_cast<double>(S.rows()));
    return loss;
}

}  // namespace ops

// Max relative error between analytic gradients and central finite
// differences over sampled unfrozen coordinates. `build_loss` must be
// deterministic for fixed store values.
inline double grad_check(const std::function<double(Tape&)>& build_loss, ParamStore& store,
                         double eps = 1e-5, std::size_t max_coords_per_param = 24,
                         std::uint64_t seed = 0) {
    // Analytic pass.
    {
        Tape t(&store);
        Tape::NodeRef loss = [&] {
            Tape::NodeRef dummy = 0;
            (void)dummy;
            double v = build_loss(t);
            (void)v;
            return t.size() - 1;
        }();
        t.backward(loss);
    }
    std::vector<Matrix> analytic;
    analytic.reserve(store.count());
    for (const auto& e : store) analytic.push_back(e.grad);

    Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
    double worst = 0.0;
    for (std::size_t pi = 0; pi < store.count(); ++pi) {
        auto& e = store.entry(pi);
        if (e.frozen || e.value.size() == 0) continue;
        std::vector<std::size_t> coords;
        if (e.value.size() <= max_coords_per_param) {
            for (std::size_t k = 0; k < e.value.size(); ++k) coords.push_back(k);
        } else {
            for (std::size_t k = 0; k < max_coords_per_param; ++k)
                coords.push_back(rng.uniform_index(e.value.size()));
        }
        for (std::size_t k : coords) {
            const double orig = e.value.at(k);
            e.value.at(k) = orig + eps;
            Tape tp(&store);
            const double fp = build_loss(tp);
            e.value.at(k) = orig - eps;
            Tape tm(&store);
            const double fm = build_loss(tm);
            e.value.at(k) = orig;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[pi].at(k);
            const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
            worst = std::max(worst, rel);
        }
    }
    store.zero_grads();
    return worst;
}

}  // namespace dygfm
