#include "spurgen/autograd.hpp"

#include "spurgen/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace spurgen::ag {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ConfigError("tensor dimensions must be positive: " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '{';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << '}';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
        throw ConfigError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                          shape_str(shape_));
    }
}

double Tensor::item() const {
    if (data_.size() != 1) throw ConfigError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void Node::ensure_grad() {
    if (grad.numel() != value.numel()) grad = Tensor(value.shape(), 0.0);
}

void Var::zero_grad() {
    if (node_) node_->grad = Tensor(node_->value.shape(), 0.0);
}

Var constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    return Var(n);
}

Var parameter(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = true;
    n->ensure_grad();
    return Var(n);
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    }
}

// Creates the output node; the backward closure is only attached when some
// input needs a gradient.
Var make_node(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool needs = false;
    if (!g_grad_enabled) return Var(n);
    for (const auto& v : inputs) needs = needs || v.requires_grad();
    if (needs) {
        n->requires_grad = true;
        for (auto& v : inputs) n->parents.push_back(v.node());
        n->backward_fn = std::move(bw);
    }
    return Var(n);
}

// Gradient sink for input i of a node, or nullptr when that input is frozen.
double* grad_of(Node& self, std::size_t i) {
    Node& p = *self.parents[i];
    if (!p.requires_grad) return nullptr;
    p.ensure_grad();
    return p.grad.data().data();
}

}  // namespace

void backward(const Var& root) {
    if (root.numel() != 1) throw ConfigError("backward() requires a scalar root");
    if (!root.requires_grad()) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root.node()->ensure_grad();
    root.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) {
            n->ensure_grad();
            n->backward_fn(*n);
        }
    }
}

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
    return make_node(std::move(out), {a, b}, [](Node& s) {
        const auto& g = s.grad.data();
        for (std::size_t k = 0; k < 2; ++k)
            if (double* d = grad_of(s, k))
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
    return make_node(std::move(out), {a, b}, [](Node& s) {
        const auto& g = s.grad.data();
        if (double* d = grad_of(s, 0))
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        if (double* d = grad_of(s, 1))
            for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
    return make_node(std::move(out), {a, b}, [](Node& s) {
        const auto& g = s.grad.data();
        const auto& av = s.parents[0]->value.data();
        const auto& bv = s.parents[1]->value.data();
        if (double* d = grad_of(s, 0))
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
        if (double* d = grad_of(s, 1))
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
    });
}

Var affine(const Var& a, double s, double shift) {
    Tensor out = a.value();
    for (auto& v : out.data()) v = s * v + shift;
    return make_node(std::move(out), {a}, [s](Node& self) {
        const auto& g = self.grad.data();
        if (double* d = grad_of(self, 0))
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += s * g[i];
    });
}

Var scale(const Var& a, double s) { return affine(a, s, 0.0); }
Var add_scalar(const Var& a, double s) { return affine(a, 1.0, s); }

Var silu(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.data()) v = v / (1.0 + std::exp(-v));
    return make_node(std::move(out), {a}, [](Node& s) {
        const auto& g = s.grad.data();
        const auto& x = s.parents[0]->value.data();
        if (double* d = grad_of(s, 0)) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double sig = 1.0 / (1.0 + std::exp(-x[i]));
                d[i] += g[i] * sig * (1.0 + x[i] * (1.0 - sig));
            }
        }
    });
}

Var tanh(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.data()) v = std::tanh(v);
    return make_node(std::move(out), {a}, [](Node& s) {
        const auto& g = s.grad.data();
        const auto& y = s.value.data();
        if (double* d = grad_of(s, 0))
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * (1.0 - y[i] * y[i]);
    });
}

Var reshape(const Var& a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    return make_node(std::move(out), {a}, [](Node& s) {
        const auto& g = s.grad.data();
        if (double* d = grad_of(s, 0))
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    });
}

Var sum(const Var& a) {
    const auto& v = a.value().data();
    const double total = std::accumulate(v.begin(), v.end(), 0.0);
    return make_node(Tensor::scalar(total), {a}, [](Node& s) {
        const double g = s.grad[0];
        if (double* d = grad_of(s, 0)) {
            const std::size_t n = s.parents[0]->value.numel();
            for (std::size_t i = 0; i < n; ++i) d[i] += g;
        }
    });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Var mse(const Var& pred, const Var& target) {
    require_same_shape(pred, target, "mse");
    const auto& p = pred.value().data();
    const auto& t = target.value().data();
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double e = p[i] - t[i];
        acc += e * e;
    }
    const double n = static_cast<double>(p.size());
    return make_node(Tensor::scalar(acc / n), {pred, target}, [n](Node& s) {
        const double g = s.grad[0];
        const auto& p = s.parents[0]->value.data();
        const auto& t = s.parents[1]->value.data();
        double* dp = grad_of(s, 0);
        double* dt = grad_of(s, 1);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double e = 2.0 * (p[i] - t[i]) / n * g;
            if (dp) dp[i] += e;
            if (dt) dt[i] -= e;
        }
    });
}

Var concat(const Var& a, const Var& b) {
    std::vector<double> out = a.value().data();
    out.insert(out.end(), b.value().data().begin(), b.value().data().end());
    const std::size_t na = a.numel();
    const int n = static_cast<int>(out.size());
    Tensor t({n}, std::move(out));
    return make_node(std::move(t), {a, b}, [na](Node& s) {
        const auto& g = s.grad.data();
        if (double* d = grad_of(s, 0))
            for (std::size_t i = 0; i < na; ++i) d[i] += g[i];
        if (double* d = grad_of(s, 1))
            for (std::size_t i = na; i < g.size(); ++i) d[i - na] += g[i];
    });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
    if (weight.value().rank() != 2) throw ConfigError("linear: weight must be rank 2");
    const int m = weight.value().dim(0);
    const int n = weight.value().dim(1);
    if (static_cast<int>(x.numel()) != n || static_cast<int>(bias.numel()) != m) {
        throw ConfigError("linear: expected input " + std::to_string(n) + " and bias " + std::to_string(m) +
                          ", got " + shape_str(x.shape()) + " and " + shape_str(bias.shape()));
    }
    const auto& w = weight.value().data();
    const auto& xv = x.value().data();
    Tensor out({m});
    for (int i = 0; i < m; ++i) {
        double acc = bias.value()[i];
        for (int j = 0; j < n; ++j) acc += w[i * n + j] * xv[j];
        out[i] = acc;
    }
    return make_node(std::move(out), {x, weight, bias}, [m, n](Node& s) {
        const auto& g = s.grad.data();
        const auto& xv = s.parents[0]->value.data();
        const auto& w = s.parents[1]->value.data();
        if (double* dx = grad_of(s, 0))
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) dx[j] += w[i * n + j] * g[i];
        if (double* dw = grad_of(s, 1))
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) dw[i * n + j] += g[i] * xv[j];
        if (double* db = grad_of(s, 2))
            for (int i = 0; i < m; ++i) db[i] += g[i];
    });
}

Var cosine(const Var& a, const Var& b, double eps_norm) {
    require_same_shape(a, b, "cosine");
    const auto& av = a.value().data();
    const auto& bv = b.value().data();
    double dot = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        dot += av[i] * bv[i];
        aa += av[i] * av[i];
        bb += bv[i] * bv[i];
    }
    const double na = std::sqrt(aa);
    const double nb = std::sqrt(bb);
    if (!(na > eps_norm) || !(nb > eps_norm)) {
        throw DegenerateInputError("cosine similarity of a near-zero-norm vector");
    }
    const double c = std::clamp(dot / (na * nb), -1.0, 1.0);
    return make_node(Tensor::scalar(c), {a, b}, [na, nb, c](Node& s) {
        const double g = s.grad[0];
        const auto& av = s.parents[0]->value.data();
        const auto& bv = s.parents[1]->value.data();
        // d c / d a = b / (|a||b|) - c a / |a|^2
        if (double* d = grad_of(s, 0))
            for (std::size_t i = 0; i < av.size(); ++i) d[i] += g * (bv[i] / (na * nb) - c * av[i] / (na * na));
        if (double* d = grad_of(s, 1))
            for (std::size_t i = 0; i < bv.size(); ++i) d[i] += g * (av[i] / (na * nb) - c * bv[i] / (nb * nb));
    });
}

namespace {

struct MapDims {
    int c, h, w;
};

MapDims map_dims(const Var& x, const char* op) {
    if (x.value().rank() != 3) throw ConfigError(std::string(op) + ": expected {C,H,W}, got " + shape_str(x.shape()));
    return {x.value().dim(0), x.value().dim(1), x.value().dim(2)};
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias) {
    const auto [ci, h, w] = map_dims(x, "conv2d");
    const auto& ws = weight.shape();
    if (ws.size() != 4 || ws[1] != ci || ws[2] != ws[3] || ws[2] % 2 == 0) {
        throw ConfigError("conv2d: weight " + shape_str(ws) + " incompatible with input " + shape_str(x.shape()));
    }
    const int co = ws[0];
    const int k = ws[2];
    const int pad = k / 2;
    if (static_cast<int>(bias.numel()) != co) throw ConfigError("conv2d: bias size mismatch");

    Tensor out({co, h, w});
    auto* o = out.data().data();
    const auto* in = x.value().data().data();
    const auto* wt = weight.value().data().data();
    for (int oc = 0; oc < co; ++oc) {
        double* op = o + static_cast<std::size_t>(oc) * h * w;
        std::fill(op, op + h * w, bias.value()[oc]);
        for (int c = 0; c < ci; ++c) {
            const double* ip = in + static_cast<std::size_t>(c) * h * w;
            for (int ky = 0; ky < k; ++ky) {
                const int dy = ky - pad;
                const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                for (int kx = 0; kx < k; ++kx) {
                    const int dx = kx - pad;
                    const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
                    const double wv = wt[((oc * ci + c) * k + ky) * k + kx];
                    for (int y = y0; y < y1; ++y) {
                        double* orow = op + y * w;
                        const double* irow = ip + (y + dy) * w + dx;
                        for (int xx = x0; xx < x1; ++xx) orow[xx] += wv * irow[xx];
                    }
                }
            }
        }
    }
    return make_node(std::move(out), {x, weight, bias}, [ci, h, w, co, k, pad](Node& s) {
        const double* g = s.grad.data().data();
        const double* in = s.parents[0]->value.data().data();
        const double* wt = s.parents[1]->value.data().data();
        double* dx = grad_of(s, 0);
        double* dw = grad_of(s, 1);
        double* db = grad_of(s, 2);
        for (int oc = 0; oc < co; ++oc) {
            const double* gp = g + static_cast<std::size_t>(oc) * h * w;
            if (db) {
                double acc = 0.0;
                for (int i = 0; i < h * w; ++i) acc += gp[i];
                db[oc] += acc;
            }
            for (int c = 0; c < ci; ++c) {
                const double* ip = in + static_cast<std::size_t>(c) * h * w;
                double* dxp = dx ? dx + static_cast<std::size_t>(c) * h * w : nullptr;
                for (int ky = 0; ky < k; ++ky) {
                    const int dy = ky - pad;
                    const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                    for (int kx = 0; kx < k; ++kx) {
                        const int ddx = kx - pad;
                        const int x0 = std::max(0, -ddx), x1 = std::min(w, w - ddx);
                        const std::size_t widx = ((oc * ci + c) * k + ky) * k + kx;
                        const double wv = wt[widx];
                        double acc = 0.0;
                        for (int y = y0; y < y1; ++y) {
                            const double* grow = gp + y * w;
                            const double* irow = ip + (y + dy) * w + ddx;
                            for (int xx = x0; xx < x1; ++xx) acc += grow[xx] * irow[xx];
                            if (dxp) {
                                double* drow = dxp + (y + dy) * w + ddx;
                                for (int xx = x0; xx < x1; ++xx) drow[xx] += wv * grow[xx];
                            }
                        }
                        if (dw) dw[widx] += acc;
                    }
                }
            }
        }
    });
}

Var add_channel_bias(const Var& x, const Var& bias) {
    const auto [c, h, w] = map_dims(x, "add_channel_bias");
    if (static_cast<int>(bias.numel()) != c) throw ConfigError("add_channel_bias: bias size mismatch");
    Tensor out = x.value();
    const int hw = h * w;
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < hw; ++i) out[ch * hw + i] += bias.value()[ch];
    return make_node(std::move(out), {x, bias}, [c, hw](Node& s) {
        const auto& g = s.grad.data();
        if (double* d = grad_of(s, 0))
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        if (double* d = grad_of(s, 1))
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < hw; ++i) d[ch] += g[ch * hw + i];
    });
}

Var concat_channels(const Var& a, const Var& b) {
    const auto da = map_dims(a, "concat_channels");
    const auto db = map_dims(b, "concat_channels");
    if (da.h != db.h || da.w != db.w) throw ConfigError("concat_channels: spatial size mismatch");
    std::vector<double> out = a.value().data();
    out.insert(out.end(), b.value().data().begin(), b.value().data().end());
    const std::size_t na = a.numel();
    Tensor t({da.c + db.c, da.h, da.w}, std::move(out));
    return make_node(std::move(t), {a, b}, [na](Node& s) {
        const auto& g = s.grad.data();
        if (double* d = grad_of(s, 0))
            for (std::size_t i = 0; i < na; ++i) d[i] += g[i];
        if (double* d = grad_of(s, 1))
            for (std::size_t i = na; i < g.size(); ++i) d[i - na] += g[i];
    });
}

Var avg_pool2(const Var& x) {
    const auto [c, h, w] = map_dims(x, "avg_pool2");
    if (h % 2 || w % 2) throw ConfigError("avg_pool2: spatial size must be even, got " + shape_str(x.shape()));
    const int ho = h / 2, wo = w / 2;
    Tensor out({c, ho, wo});
    const auto& in = x.value().data();
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < ho; ++y)
            for (int xx = 0; xx < wo; ++xx) {
                const std::size_t base = (static_cast<std::size_t>(ch) * h + 2 * y) * w + 2 * xx;
                out[(ch * ho + y) * wo + xx] = 0.25 * (in[base] + in[base + 1] + in[base + w] + in[base + w + 1]);
            }
    return make_node(std::move(out), {x}, [c, h, w](Node& s) {
        double* d = grad_of(s, 0);
        if (!d) return;
        const auto& g = s.grad.data();
        const int ho = h / 2, wo = w / 2;
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < ho; ++y)
                for (int xx = 0; xx < wo; ++xx) {
                    const double gv = 0.25 * g[(ch * ho + y) * wo + xx];
                    const std::size_t base = (static_cast<std::size_t>(ch) * h + 2 * y) * w + 2 * xx;
                    d[base] += gv;
                    d[base + 1] += gv;
                    d[base + w] += gv;
                    d[base + w + 1] += gv;
                }
    });
}

Var upsample2(const Var& x) {
    const auto [c, h, w] = map_dims(x, "upsample2");
    const int ho = 2 * h, wo = 2 * w;
    Tensor out({c, ho, wo});
    const auto& in = x.value().data();
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < ho; ++y)
            for (int xx = 0; xx < wo; ++xx) out[(ch * ho + y) * wo + xx] = in[(ch * h + y / 2) * w + xx / 2];
    return make_node(std::move(out), {x}, [c, h, w](Node& s) {
        double* d = grad_of(s, 0);
        if (!d) return;
        const auto& g = s.grad.data();
        const int ho = 2 * h, wo = 2 * w;
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < ho; ++y)
                for (int xx = 0; xx < wo; ++xx) d[(ch * h + y / 2) * w + xx / 2] += g[(ch * ho + y) * wo + xx];
    });
}

Var global_mean_pool(const Var& x) {
    const auto [c, h, w] = map_dims(x, "global_mean_pool");
    const int hw = h * w;
    Tensor out({c});
    const auto& in = x.value().data();
    for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int i = 0; i < hw; ++i) acc += in[ch * hw + i];
        out[ch] = acc / hw;
    }
    return make_node(std::move(out), {x}, [c, hw](Node& s) {
        double* d = grad_of(s, 0);
        if (!d) return;
        const auto& g = s.grad.data();
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < hw; ++i) d[ch * hw + i] += g[ch] / hw;
    });
}

Var embedding(const Var& table, std::span<const int> ids) {
    if (table.value().rank() != 2) throw ConfigError("embedding: table must be rank 2");
    if (ids.empty()) throw ConfigError("embedding: empty id sequence");
    const int vocab = table.value().dim(0);
    const int e = table.value().dim(1);
    std::vector<int> idv(ids.begin(), ids.end());
    Tensor out({static_cast<int>(idv.size()), e});
    for (std::size_t r = 0; r < idv.size(); ++r) {
        if (idv[r] < 0 || idv[r] >= vocab) throw ConfigError("embedding: token id out of range");
        std::copy_n(table.value().data().begin() + static_cast<std::ptrdiff_t>(idv[r]) * e, e,
                    out.data().begin() + static_cast<std::ptrdiff_t>(r) * e);
    }
    return make_node(std::move(out), {table}, [idv, e](Node& s) {
        double* d = grad_of(s, 0);
        if (!d) return;
        const auto& g = s.grad.data();
        for (std::size_t r = 0; r < idv.size(); ++r)
            for (int j = 0; j < e; ++j) d[static_cast<std::size_t>(idv[r]) * e + j] += g[r * e + j];
    });
}

Var mean_rows(const Var& x) {
    if (x.value().rank() != 2) throw ConfigError("mean_rows: expected rank 2");
    const int l = x.value().dim(0), e = x.value().dim(1);
    Tensor out({e});
    for (int r = 0; r < l; ++r)
        for (int j = 0; j < e; ++j) out[j] += x.value()[r * e + j];
    for (auto& v : out.data()) v /= l;
    return make_node(std::move(out), {x}, [l, e](Node& s) {
        double* d = grad_of(s, 0);
        if (!d) return;
        const auto& g = s.grad.data();
        for (int r = 0; r < l; ++r)
            for (int j = 0; j < e; ++j) d[r * e + j] += g[j] / l;
    });
}

Var softmax_cross_entropy(const Var& logits, int label) {
    const auto& z = logits.value().data();
    if (label < 0 || label >= static_cast<int>(z.size())) throw ConfigError("softmax_cross_entropy: label out of range");
    const double zmax = *std::max_element(z.begin(), z.end());
    std::vector<double> p(z.size());
    double denom = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) denom += (p[i] = std::exp(z[i] - zmax));
    for (auto& v : p) v /= denom;
    const double loss = -(z[label] - zmax - std::log(denom));
    return make_node(Tensor::scalar(loss), {logits}, [p, label](Node& s) {
        double* d = grad_of(s, 0);
        if (!d) return;
        const double g = s.grad[0];
        for (std::size_t i = 0; i < p.size(); ++i) d[i] += g * (p[i] - (static_cast<int>(i) == label ? 1.0 : 0.0));
    });
}

}  // namespace spurgen::ag
