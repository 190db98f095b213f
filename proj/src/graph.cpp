#include "sparsevd/graph.hpp"

#include "sparsevd/sparsity.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace sparsevd {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

ECMap mat(const Tensor& t) { return ECMap(t.data(), t.rows(), t.cols()); }
EMap mat(Tensor& t) { return EMap(t.data(), t.rows(), t.cols()); }

constexpr double kLogAlphaClamp = 20.0;

}  // namespace

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus(double x) {
    // log(1 + e^x) without overflow
    return std::log1p(std::exp(-std::fabs(x))) + (x > 0.0 ? x : 0.0);
}

int Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

int Graph::input(Tensor v) {
    Node n;
    n.op = Op::kInput;
    n.value = std::move(v);
    return push(std::move(n));
}

int Graph::param(const Tensor& v) {
    Node n;
    n.op = Op::kParam;
    n.value = v;
    n.needs_grad = true;
    return push(std::move(n));
}

int Graph::matmul(int a, int b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.ndim() != 2 || tb.ndim() != 2 || ta.cols() != tb.rows())
        throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(ta.shape) +
                                    " vs " + shape_str(tb.shape));
    Node n;
    n.op = Op::kMatmul;
    n.a = a;
    n.b = b;
    n.value = Tensor::uninit({ta.rows(), tb.cols()});
    mat(n.value).noalias() = mat(ta) * mat(tb);
    n.needs_grad = at(a).needs_grad || at(b).needs_grad;
    return push(std::move(n));
}

int Graph::gather_rows(int a, std::vector<int> rows) {
    const Tensor& ta = value(a);
    if (ta.ndim() != 2) throw std::invalid_argument("gather_rows: need a matrix");
    for (int r : rows)
        if (r < 0 || r >= ta.rows())
            throw std::invalid_argument("gather_rows: row " + std::to_string(r) +
                                        " out of range for " + shape_str(ta.shape));
    Node n;
    n.op = Op::kGatherRows;
    n.a = a;
    n.itab = std::move(rows);
    int c = ta.cols();
    n.value = Tensor::uninit({static_cast<int>(n.itab.size()), c});
    for (std::size_t i = 0; i < n.itab.size(); ++i)
        std::copy(ta.data() + static_cast<std::size_t>(n.itab[i]) * c,
                  ta.data() + static_cast<std::size_t>(n.itab[i] + 1) * c,
                  n.value.data() + i * static_cast<std::size_t>(c));
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

int Graph::add(int a, int b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require_same_shape(ta, tb, "add");
    Node n;
    n.op = Op::kAdd;
    n.a = a;
    n.b = b;
    n.value = Tensor::uninit(ta.shape);
    for (std::int64_t i = 0; i < ta.size(); ++i) n.value[i] = ta[i] + tb[i];
    n.needs_grad = at(a).needs_grad || at(b).needs_grad;
    return push(std::move(n));
}

int Graph::add_row(int a, int bias) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(bias);
    if (tb.size() != ta.cols())
        throw std::invalid_argument("add_row: bias " + shape_str(tb.shape) +
                                    " does not match columns of " + shape_str(ta.shape));
    Node n;
    n.op = Op::kAddRow;
    n.a = a;
    n.b = bias;
    n.value = Tensor::uninit(ta.shape);
    int c = ta.cols();
    for (int r = 0; r < ta.rows(); ++r)
        for (int j = 0; j < c; ++j)
            n.value[static_cast<std::int64_t>(r) * c + j] =
                ta[static_cast<std::int64_t>(r) * c + j] + tb[j];
    n.needs_grad = at(a).needs_grad || at(bias).needs_grad;
    return push(std::move(n));
}

int Graph::broadcast_row(int v, int nrows) {
    const Tensor& tv = value(v);
    if (nrows < 1) throw std::invalid_argument("broadcast_row: nrows must be positive");
    Node n;
    n.op = Op::kBroadcastRow;
    n.a = v;
    n.itab = {nrows};
    int c = static_cast<int>(tv.size());
    n.value = Tensor::uninit({nrows, c});
    for (int r = 0; r < nrows; ++r)
        std::copy(tv.data(), tv.data() + c, n.value.data() + static_cast<std::size_t>(r) * c);
    n.needs_grad = at(v).needs_grad;
    return push(std::move(n));
}

int Graph::mul(int a, int b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require_same_shape(ta, tb, "mul");
    Node n;
    n.op = Op::kMul;
    n.a = a;
    n.b = b;
    n.value = Tensor::uninit(ta.shape);
    for (std::int64_t i = 0; i < ta.size(); ++i) n.value[i] = ta[i] * tb[i];
    n.needs_grad = at(a).needs_grad || at(b).needs_grad;
    return push(std::move(n));
}

int Graph::row_scale(int a, int s) {
    const Tensor& ta = value(a);
    const Tensor& ts = value(s);
    if (ts.size() != ta.rows())
        throw std::invalid_argument("row_scale: scale " + shape_str(ts.shape) +
                                    " does not match rows of " + shape_str(ta.shape));
    Node n;
    n.op = Op::kRowScale;
    n.a = a;
    n.b = s;
    n.value = Tensor::uninit(ta.shape);
    int c = ta.cols();
    for (int r = 0; r < ta.rows(); ++r)
        for (int j = 0; j < c; ++j)
            n.value[static_cast<std::int64_t>(r) * c + j] =
                ta[static_cast<std::int64_t>(r) * c + j] * ts[r];
    n.needs_grad = at(a).needs_grad || at(s).needs_grad;
    return push(std::move(n));
}

int Graph::scale(int a, double c) {
    const Tensor& ta = value(a);
    Node n;
    n.op = Op::kScale;
    n.a = a;
    n.cscalar = c;
    n.value = Tensor::uninit(ta.shape);
    for (std::int64_t i = 0; i < ta.size(); ++i) n.value[i] = c * ta[i];
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

int Graph::sigmoid(int a) {
    const Tensor& ta = value(a);
    Node n;
    n.op = Op::kSigmoid;
    n.a = a;
    n.value = Tensor::uninit(ta.shape);
    for (std::int64_t i = 0; i < ta.size(); ++i) n.value[i] = stable_sigmoid(ta[i]);
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

int Graph::tanh(int a) {
    const Tensor& ta = value(a);
    Node n;
    n.op = Op::kTanh;
    n.a = a;
    n.value = Tensor::uninit(ta.shape);
    for (std::int64_t i = 0; i < ta.size(); ++i) n.value[i] = std::tanh(ta[i]);
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

int Graph::exp(int a) {
    const Tensor& ta = value(a);
    Node n;
    n.op = Op::kExp;
    n.a = a;
    n.value = Tensor::uninit(ta.shape);
    for (std::int64_t i = 0; i < ta.size(); ++i) n.value[i] = std::exp(ta[i]);
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

int Graph::square(int a) {
    const Tensor& ta = value(a);
    Node n;
    n.op = Op::kSquare;
    n.a = a;
    n.value = Tensor::uninit(ta.shape);
    for (std::int64_t i = 0; i < ta.size(); ++i) n.value[i] = ta[i] * ta[i];
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

int Graph::sqrt_gate(int a, double floor_val) {
    const Tensor& ta = value(a);
    Node n;
    n.op = Op::kSqrtGate;
    n.a = a;
    n.cscalar = floor_val;
    n.value = Tensor::uninit(ta.shape);
    for (std::int64_t i = 0; i < ta.size(); ++i)
        n.value[i] = ta[i] < floor_val ? 0.0 : std::sqrt(ta[i]);
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

int Graph::sum(int a) {
    const Tensor& ta = value(a);
    double acc = 0.0;
    for (std::int64_t i = 0; i < ta.size(); ++i) acc += ta[i];
    Node n;
    n.op = Op::kSum;
    n.a = a;
    n.value = Tensor::scalar(acc);
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

int Graph::sum_sq(int a) {
    const Tensor& ta = value(a);
    double acc = 0.0;
    for (std::int64_t i = 0; i < ta.size(); ++i) acc += ta[i] * ta[i];
    Node n;
    n.op = Op::kSumSq;
    n.a = a;
    n.value = Tensor::scalar(acc);
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

int Graph::log_alpha(int m, int logs2) {
    const Tensor& tm = value(m);
    const Tensor& ts = value(logs2);
    require_same_shape(tm, ts, "log_alpha");
    Node n;
    n.op = Op::kLogAlpha;
    n.a = m;
    n.b = logs2;
    n.value = Tensor::uninit(tm.shape);
    for (std::int64_t i = 0; i < tm.size(); ++i) n.value[i] = log_alpha_of(tm[i], ts[i]);
    n.needs_grad = at(m).needs_grad || at(logs2).needs_grad;
    return push(std::move(n));
}

int Graph::kl_log_uniform(int log_alpha_node) {
    const Tensor& ta = value(log_alpha_node);
    Node n;
    n.op = Op::kKlLogUniform;
    n.a = log_alpha_node;
    n.value = Tensor::uninit(ta.shape);
    for (std::int64_t i = 0; i < ta.size(); ++i) n.value[i] = kl_per_weight(ta[i]);
    n.needs_grad = at(log_alpha_node).needs_grad;
    return push(std::move(n));
}

int Graph::softmax_ce_sum(int logits, std::vector<int> targets) {
    const Tensor& tl = value(logits);
    if (tl.ndim() != 2 || static_cast<int>(targets.size()) != tl.rows())
        throw std::invalid_argument("softmax_ce_sum: need one target per logits row");
    int vcount = tl.cols();
    for (int t : targets)
        if (t < 0 || t >= vcount) throw std::invalid_argument("softmax_ce_sum: target out of range");
    Node n;
    n.op = Op::kSoftmaxCeSum;
    n.a = logits;
    n.itab = std::move(targets);
    n.aux = Tensor::uninit(tl.shape);
    double total = 0.0;
    for (int r = 0; r < tl.rows(); ++r) {
        const double* row = tl.data() + static_cast<std::size_t>(r) * vcount;
        double mx = row[0];
        for (int j = 1; j < vcount; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < vcount; ++j) z += std::exp(row[j] - mx);
        double logz = std::log(z) + mx;
        for (int j = 0; j < vcount; ++j)
            n.aux[static_cast<std::int64_t>(r) * vcount + j] = std::exp(row[j] - logz);
        total += logz - row[n.itab[static_cast<std::size_t>(r)]];
    }
    n.value = Tensor::scalar(total);
    n.needs_grad = at(logits).needs_grad;
    return push(std::move(n));
}

int Graph::sq_err_sum(int pred, const std::vector<double>& targets) {
    const Tensor& tp = value(pred);
    if (tp.size() != static_cast<std::int64_t>(targets.size()))
        throw std::invalid_argument("sq_err_sum: need one target per prediction");
    Node n;
    n.op = Op::kSqErrSum;
    n.a = pred;
    n.aux = Tensor({static_cast<int>(targets.size())}, targets);
    double total = 0.0;
    for (std::int64_t i = 0; i < tp.size(); ++i) {
        double d = tp[i] - n.aux[i];
        total += d * d;
    }
    n.value = Tensor::scalar(total);
    n.needs_grad = at(pred).needs_grad;
    return push(std::move(n));
}

int Graph::concat_cols(int a, int b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.ndim() != tb.ndim() || ta.rows() != tb.rows())
        throw std::invalid_argument("concat_cols: row counts differ: " + shape_str(ta.shape) +
                                    " vs " + shape_str(tb.shape));
    int r = ta.rows(), ca = ta.cols(), cb = tb.cols();
    Node n;
    n.op = Op::kConcatCols;
    n.a = a;
    n.b = b;
    n.value = ta.ndim() == 1 ? Tensor::uninit({ca + cb}) : Tensor::uninit({r, ca + cb});
    for (int i = 0; i < r; ++i) {
        std::copy(ta.data() + static_cast<std::size_t>(i) * ca,
                  ta.data() + static_cast<std::size_t>(i + 1) * ca,
                  n.value.data() + static_cast<std::size_t>(i) * (ca + cb));
        std::copy(tb.data() + static_cast<std::size_t>(i) * cb,
                  tb.data() + static_cast<std::size_t>(i + 1) * cb,
                  n.value.data() + static_cast<std::size_t>(i) * (ca + cb) + ca);
    }
    n.needs_grad = at(a).needs_grad || at(b).needs_grad;
    return push(std::move(n));
}

int Graph::lstm_cell_c(int pre, int c_prev) {
    const Tensor& tp = value(pre);
    const Tensor& tc = value(c_prev);
    if (tp.ndim() != 2 || tc.ndim() != 2 || tp.rows() != tc.rows() ||
        tp.cols() != 4 * tc.cols())
        throw std::invalid_argument("lstm_cell_c: preactivations " + shape_str(tp.shape) +
                                    " do not match cell state " + shape_str(tc.shape));
    int m = tc.cols();
    Node n;
    n.op = Op::kLstmCellC;
    n.a = pre;
    n.b = c_prev;
    n.aux = Tensor::uninit(tp.shape);  // activated gates, same block layout
    n.value = Tensor::uninit(tc.shape);
    ECMap P = mat(tp);
    EMap A = mat(n.aux);
    // i, o, f share the sigmoid; the modulation block is tanh written as
    // 2 sigmoid(2x) - 1 so the whole thing rides the vectorized exp
    A.leftCols(3 * m).array() = 1.0 / (1.0 + (-P.leftCols(3 * m).array()).exp());
    A.rightCols(m).array() = 2.0 / (1.0 + (-2.0 * P.rightCols(m).array()).exp()) - 1.0;
    EMap C = mat(n.value);
    C.array() = A.middleCols(2 * m, m).array() * mat(tc).array() +
                A.leftCols(m).array() * A.rightCols(m).array();
    n.needs_grad = at(pre).needs_grad || at(c_prev).needs_grad;
    return push(std::move(n));
}

int Graph::lstm_cell_h(int cell, int pre) {
    const Node& cn = at(cell);
    if (cn.op != Op::kLstmCellC || cn.a != pre)
        throw std::invalid_argument(
            "lstm_cell_h: cell input must be the lstm_cell_c of the same preactivations");
    int m = cn.value.cols();
    Node n;
    n.op = Op::kLstmCellH;
    n.a = cell;
    n.b = pre;
    n.aux = Tensor::uninit(cn.value.shape);  // tanh(c)
    n.value = Tensor::uninit(cn.value.shape);
    ECMap C = mat(cn.value);
    ECMap A = mat(cn.aux);
    EMap T = mat(n.aux);
    T.array() = 2.0 / (1.0 + (-2.0 * C.array()).exp()) - 1.0;
    EMap H = mat(n.value);
    H.array() = A.middleCols(m, m).array() * T.array();
    n.needs_grad = cn.needs_grad || at(pre).needs_grad;
    return push(std::move(n));
}

const Tensor& Graph::grad(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.grad_ready) throw std::logic_error("grad: node has no gradient (run backward first)");
    return n.grad;
}

void Graph::ensure_grad(int id) {
    Node& n = at(id);
    if (!n.grad_ready) {
        n.grad = Tensor::uninit(n.value.shape);
        n.grad_ready = true;
        n.grad_fresh = true;  // first contribution must assign, not accumulate
    }
}

void Graph::backward(int loss) {
    if (loss < 0 || loss >= size()) throw std::invalid_argument("backward: bad loss node");
    if (value(loss).size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " +
                                    shape_str(value(loss).shape));
    ensure_grad(loss);
    at(loss).grad[0] = 1.0;
    at(loss).grad_fresh = false;
    for (int id = loss; id >= 0; --id) {
        Node& n = at(id);
        if (!n.needs_grad || !n.grad_ready) continue;
        backward_node(id);
    }
}

void Graph::backward_node(int id) {
    Node& n = at(id);
    const Tensor& g = n.grad;
    auto want = [&](int op) { return op >= 0 && at(op).needs_grad; };
    // Hands out the grad buffer plus whether this is its first contribution.
    // A fresh buffer holds garbage: the caller must assign every element, or
    // zero it before a write that skips elements.
    auto dst = [&](int op, bool& fresh) -> Tensor& {
        ensure_grad(op);
        Node& d = at(op);
        fresh = d.grad_fresh;
        d.grad_fresh = false;
        return d.grad;
    };

    switch (n.op) {
        case Op::kInput:
        case Op::kParam:
            break;
        case Op::kMatmul: {
            const Tensor& va = value(n.a);
            const Tensor& vb = value(n.b);
            if (want(n.a)) {
                bool f;
                Tensor& da = dst(n.a, f);
                if (f)
                    mat(da).noalias() = mat(g) * mat(vb).transpose();
                else
                    mat(da).noalias() += mat(g) * mat(vb).transpose();
            }
            if (want(n.b)) {
                bool f;
                Tensor& db = dst(n.b, f);
                if (f)
                    mat(db).noalias() = mat(va).transpose() * mat(g);
                else
                    mat(db).noalias() += mat(va).transpose() * mat(g);
            }
            break;
        }
        case Op::kGatherRows: {
            if (want(n.a)) {
                bool f;
                Tensor& da = dst(n.a, f);
                if (f) da.fill(0.0);  // the scatter below only touches gathered rows
                int c = da.cols();
                for (std::size_t i = 0; i < n.itab.size(); ++i) {
                    double* drow = da.data() + static_cast<std::size_t>(n.itab[i]) * c;
                    const double* srow = g.data() + i * static_cast<std::size_t>(c);
                    for (int j = 0; j < c; ++j) drow[j] += srow[j];
                }
            }
            break;
        }
        case Op::kAdd: {
            for (int op : {n.a, n.b})
                if (want(op)) {
                    bool f;
                    Tensor& d = dst(op, f);
                    if (f)
                        std::copy(g.v.begin(), g.v.end(), d.v.begin());
                    else
                        for (std::int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
                }
            break;
        }
        case Op::kAddRow: {
            if (want(n.a)) {
                bool f;
                Tensor& d = dst(n.a, f);
                if (f)
                    std::copy(g.v.begin(), g.v.end(), d.v.begin());
                else
                    for (std::int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
            }
            if (want(n.b)) {
                bool f;
                Tensor& d = dst(n.b, f);
                int c = g.cols();
                int r0 = 0;
                if (f) {  // seed the column sums with the first row
                    std::copy(g.data(), g.data() + c, d.data());
                    r0 = 1;
                }
                for (int r = r0; r < g.rows(); ++r)
                    for (int j = 0; j < c; ++j) d[j] += g[static_cast<std::int64_t>(r) * c + j];
            }
            break;
        }
        case Op::kBroadcastRow: {
            if (want(n.a)) {
                bool f;
                Tensor& d = dst(n.a, f);
                int c = static_cast<int>(d.size());
                int r0 = 0;
                if (f) {
                    std::copy(g.data(), g.data() + c, d.data());
                    r0 = 1;
                }
                for (int r = r0; r < g.rows(); ++r)
                    for (int j = 0; j < c; ++j) d[j] += g[static_cast<std::int64_t>(r) * c + j];
            }
            break;
        }
        case Op::kMul: {
            const Tensor& va = value(n.a);
            const Tensor& vb = value(n.b);
            if (want(n.a)) {
                bool f;
                Tensor& d = dst(n.a, f);
                if (f)
                    for (std::int64_t i = 0; i < g.size(); ++i) d[i] = g[i] * vb[i];
                else
                    for (std::int64_t i = 0; i < g.size(); ++i) d[i] += g[i] * vb[i];
            }
            if (want(n.b)) {
                bool f;
                Tensor& d = dst(n.b, f);
                if (f)
                    for (std::int64_t i = 0; i < g.size(); ++i) d[i] = g[i] * va[i];
                else
                    for (std::int64_t i = 0; i < g.size(); ++i) d[i] += g[i] * va[i];
            }
            break;
        }
        case Op::kRowScale: {
            const Tensor& va = value(n.a);
            const Tensor& vs = value(n.b);
            int c = g.cols();
            if (want(n.a)) {
                bool f;
                Tensor& d = dst(n.a, f);
                for (int r = 0; r < g.rows(); ++r)
                    for (int j = 0; j < c; ++j) {
                        std::int64_t k = static_cast<std::int64_t>(r) * c + j;
                        if (f)
                            d[k] = g[k] * vs[r];
                        else
                            d[k] += g[k] * vs[r];
                    }
            }
            if (want(n.b)) {
                bool f;
                Tensor& d = dst(n.b, f);
                for (int r = 0; r < g.rows(); ++r) {
                    double acc = 0.0;
                    for (int j = 0; j < c; ++j)
                        acc += g[static_cast<std::int64_t>(r) * c + j] *
                               va[static_cast<std::int64_t>(r) * c + j];
                    if (f)
                        d[r] = acc;
                    else
                        d[r] += acc;
                }
            }
            break;
        }
        case Op::kScale: {
            if (want(n.a)) {
                bool f;
                Tensor& d = dst(n.a, f);
                if (f)
                    for (std::int64_t i = 0; i < g.size(); ++i) d[i] = n.cscalar * g[i];
                else
                    for (std::int64_t i = 0; i < g.size(); ++i) d[i] += n.cscalar * g[i];
            }
            break;
        }
        case Op::kSigmoid: {
            if (want(n.a)) {
                bool f;
                Tensor& d = dst(n.a, f);
                for (std::int64_t i = 0; i < g.size(); ++i) {
                    double s = n.value[i];
                    double dv = g[i] * s * (1.0 - s);
                    if (f)
                        d[i] = dv;
                    else
                        d[i] += dv;
                }
            }
            break;
        }
        case Op::kTanh: {
            if (want(n.a)) {
                bool f;
                Tensor& d = dst(n.a, f);
                for (std::int64_t i = 0; i < g.size(); ++i) {
                    double t = n.value[i];
                    double dv = g[i] * (1.0 - t * t);
                    if (f)
                        d[i] = dv;
                    else
                        d[i] += dv;
                }
            }
            break;
        }
        case Op::kExp: {
            if (want(n.a)) {
                bool f;
                Tensor& d = dst(n.a, f);
                if (f)
                    for (std::int64_t i = 0; i < g.size(); ++i) d[i] = g[i] * n.value[i];
                else
                    for (std::int64_t i = 0; i < g.size(); ++i) d[i] += g[i] * n.value[i];
            }
            break;
        }
        case Op::kSquare: {
            if (want(n.a)) {
                const Tensor& va = value(n.a);
                bool f;
                Tensor& d = dst(n.a, f);
                if (f)
                    for (std::int64_t i = 0; i < g.size(); ++i) d[i] = 2.0 * va[i] * g[i];
                else
                    for (std::int64_t i = 0; i < g.size(); ++i) d[i] += 2.0 * va[i] * g[i];
            }
            break;
        }
        case Op::kSqrtGate: {
            if (want(n.a)) {
                const Tensor& va = value(n.a);
                bool f;
                Tensor& d = dst(n.a, f);
                if (f) d.fill(0.0);  // entries under the floor get no gradient
                for (std::int64_t i = 0; i < g.size(); ++i)
                    if (va[i] >= n.cscalar) d[i] += g[i] * 0.5 / n.value[i];
            }
            break;
        }
        case Op::kSum: {
            if (want(n.a)) {
                bool f;
                Tensor& d = dst(n.a, f);
                double go = g[0];
                if (f)
                    for (std::int64_t i = 0; i < d.size(); ++i) d[i] = go;
                else
                    for (std::int64_t i = 0; i < d.size(); ++i) d[i] += go;
            }
            break;
        }
        case Op::kSumSq: {
            if (want(n.a)) {
                const Tensor& va = value(n.a);
                bool f;
                Tensor& d = dst(n.a, f);
                double go = g[0];
                if (f)
                    for (std::int64_t i = 0; i < d.size(); ++i) d[i] = 2.0 * va[i] * go;
                else
                    for (std::int64_t i = 0; i < d.size(); ++i) d[i] += 2.0 * va[i] * go;
            }
            break;
        }
        case Op::kLogAlpha: {
            const Tensor& vm = value(n.a);
            const Tensor& vs = value(n.b);
            bool wm = want(n.a), ws = want(n.b);
            if (wm || ws) {
                // Clamped entries are skipped, so fresh buffers need zeroing.
                Tensor* dm = nullptr;
                Tensor* ds = nullptr;
                if (wm) {
                    bool f;
                    dm = &dst(n.a, f);
                    if (f) dm->fill(0.0);
                }
                if (ws) {
                    bool f;
                    ds = &dst(n.b, f);
                    if (f) ds->fill(0.0);
                }
                for (std::int64_t i = 0; i < g.size(); ++i) {
                    if (vm[i] == 0.0) continue;  // at the clamp
                    double raw = vs[i] - 2.0 * std::log(std::fabs(vm[i]));
                    if (raw >= kLogAlphaClamp || raw <= -kLogAlphaClamp) continue;
                    if (ds) (*ds)[i] += g[i];
                    if (dm) (*dm)[i] += g[i] * (-2.0 / vm[i]);
                }
            }
            break;
        }
        case Op::kKlLogUniform: {
            if (want(n.a)) {
                const Tensor& la = value(n.a);
                bool f;
                Tensor& d = dst(n.a, f);
                for (std::int64_t i = 0; i < g.size(); ++i) {
                    double z = 1.87 + 1.49 * la[i];
                    double s = stable_sigmoid(z);
                    double dv = g[i] * (-0.5 * stable_sigmoid(-la[i]) - 0.64 * 1.49 * s * (1.0 - s));
                    if (f)
                        d[i] = dv;
                    else
                        d[i] += dv;
                }
            }
            break;
        }
        case Op::kSoftmaxCeSum: {
            if (want(n.a)) {
                bool f;
                Tensor& d = dst(n.a, f);
                double go = g[0];
                int c = d.cols();
                for (int r = 0; r < d.rows(); ++r) {
                    const double* p = n.aux.data() + static_cast<std::size_t>(r) * c;
                    double* dr = d.data() + static_cast<std::size_t>(r) * c;
                    if (f)
                        for (int j = 0; j < c; ++j) dr[j] = go * p[j];
                    else
                        for (int j = 0; j < c; ++j) dr[j] += go * p[j];
                    dr[n.itab[static_cast<std::size_t>(r)]] -= go;
                }
            }
            break;
        }
        case Op::kSqErrSum: {
            if (want(n.a)) {
                const Tensor& vp = value(n.a);
                bool f;
                Tensor& d = dst(n.a, f);
                double go = g[0];
                if (f)
                    for (std::int64_t i = 0; i < d.size(); ++i) d[i] = 2.0 * (vp[i] - n.aux[i]) * go;
                else
                    for (std::int64_t i = 0; i < d.size(); ++i) d[i] += 2.0 * (vp[i] - n.aux[i]) * go;
            }
            break;
        }
        case Op::kConcatCols: {
            int ca = value(n.a).cols();
            int cb = value(n.b).cols();
            ECMap G = mat(g);
            if (want(n.a)) {
                bool f;
                Tensor& d = dst(n.a, f);
                if (f)
                    mat(d) = G.leftCols(ca);
                else
                    mat(d) += G.leftCols(ca);
            }
            if (want(n.b)) {
                bool f;
                Tensor& d = dst(n.b, f);
                if (f)
                    mat(d) = G.rightCols(cb);
                else
                    mat(d) += G.rightCols(cb);
            }
            break;
        }
        case Op::kLstmCellC: {
            const Tensor& vc = value(n.b);  // previous cell state
            const Tensor& ax = n.aux;
            int m = vc.cols();
            ECMap A = mat(ax);
            ECMap G = mat(g);
            if (want(n.a)) {
                bool f;
                Tensor& dp = dst(n.a, f);
                EMap D = mat(dp);
                auto si = A.leftCols(m).array();
                auto sf = A.middleCols(2 * m, m).array();
                auto tg = A.rightCols(m).array();
                if (f) {
                    // the o block belongs to lstm_cell_h; left zero here
                    D.middleCols(m, m).setZero();
                    D.leftCols(m).array() = G.array() * tg * si * (1.0 - si);
                    D.middleCols(2 * m, m).array() = G.array() * mat(vc).array() * sf * (1.0 - sf);
                    D.rightCols(m).array() = G.array() * si * (1.0 - tg * tg);
                } else {
                    D.leftCols(m).array() += G.array() * tg * si * (1.0 - si);
                    D.middleCols(2 * m, m).array() += G.array() * mat(vc).array() * sf * (1.0 - sf);
                    D.rightCols(m).array() += G.array() * si * (1.0 - tg * tg);
                }
            }
            if (want(n.b)) {
                bool f;
                Tensor& d = dst(n.b, f);
                if (f)
                    mat(d).array() = G.array() * A.middleCols(2 * m, m).array();
                else
                    mat(d).array() += G.array() * A.middleCols(2 * m, m).array();
            }
            break;
        }
        case Op::kLstmCellH: {
            const Node& cn = at(n.a);
            const Tensor& ax = n.aux;
            int m = cn.value.cols();
            ECMap T = mat(ax);                    // tanh(c)
            ECMap A = mat(cn.aux);                // activated gates of the cell node
            ECMap G = mat(g);
            auto so = A.middleCols(m, m).array();
            if (want(n.a)) {
                bool f;
                Tensor& d = dst(n.a, f);
                if (f)
                    mat(d).array() = G.array() * so * (1.0 - T.array() * T.array());
                else
                    mat(d).array() += G.array() * so * (1.0 - T.array() * T.array());
            }
            if (want(n.b)) {
                bool f;
                Tensor& dp = dst(n.b, f);
                EMap D = mat(dp);
                if (f) {
                    // only the o block is ours; lstm_cell_c fills the rest
                    D.leftCols(m).setZero();
                    D.rightCols(2 * m).setZero();
                    D.middleCols(m, m).array() = G.array() * T.array() * so * (1.0 - so);
                } else {
                    D.middleCols(m, m).array() += G.array() * T.array() * so * (1.0 - so);
                }
            }
            break;
        }
    }
}

}  // namespace sparsevd
