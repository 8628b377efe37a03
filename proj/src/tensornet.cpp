#include "hexfed/tensornet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace hexfed {

namespace {

constexpr double kLayerNormEps = 1e-5;

void check_finite(const Matrix& m, std::size_t layer_index, LayerKind kind) {
    for (double v : m.data) {
        if (!std::isfinite(v)) {
            std::ostringstream msg;
            msg << "non-finite value in layer " << layer_index << " ("
                << layer_kind_name(kind) << ")";
            throw NumericError(msg.str());
        }
    }
}

}  // namespace

const char* layer_kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::Dense: return "dense";
        case LayerKind::Relu: return "relu";
        case LayerKind::Conv1d: return "conv1d";
        case LayerKind::SelfAttention: return "self_attention";
        case LayerKind::LayerNorm: return "layer_norm";
        case LayerKind::MeanPool: return "mean_pool";
        case LayerKind::ConcatTail: return "concat_tail";
    }
    return "unknown";
}

Matrix softmax_rows(const Matrix& logits) {
    Matrix out(logits.rows, logits.cols);
    for (std::size_t r = 0; r < logits.rows; ++r) {
        const auto row = logits.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (std::size_t c = 0; c < logits.cols; ++c) {
            const double e = std::exp(row[c] - mx);
            out.at(r, c) = e;
            sum += e;
        }
        for (std::size_t c = 0; c < logits.cols; ++c) out.at(r, c) /= sum;
    }
    return out;
}

std::optional<double> try_cosine(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) throw InvalidInputError("cosine: length mismatch");
    double uu = 0.0, vv = 0.0, uv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        uu += u[i] * u[i];
        vv += v[i] * v[i];
        uv += u[i] * v[i];
    }
    if (uu == 0.0 || vv == 0.0) return std::nullopt;
    return std::clamp(uv / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

double cosine(std::span<const double> u, std::span<const double> v) {
    const auto c = try_cosine(u, v);
    if (!c) throw InvalidInputError("cosine: undefined for zero-norm vector");
    return *c;
}

std::size_t param_count(const LayerDesc& layer) {
    switch (layer.kind) {
        case LayerKind::Dense:
            return static_cast<std::size_t>(layer.out) * layer.in + layer.out;
        case LayerKind::Conv1d:
            return static_cast<std::size_t>(layer.out_ch) * layer.in_ch * layer.kernel + layer.out_ch;
        case LayerKind::SelfAttention:
            return 3 * (static_cast<std::size_t>(layer.out_ch) * layer.out_ch + layer.out_ch);
        case LayerKind::LayerNorm:
            return 2 * static_cast<std::size_t>(layer.out_ch);
        case LayerKind::Relu:
        case LayerKind::MeanPool:
        case LayerKind::ConcatTail:
            return 0;
    }
    return 0;
}

std::size_t param_count(const ModelSpec& spec) {
    std::size_t n = 0;
    for (const auto& layer : spec.layers) n += param_count(layer);
    return n;
}

void validate(const ModelSpec& spec) {
    if (spec.input_dim <= 0) throw ConfigError("ModelSpec: input_dim must be positive");
    if (spec.seq_len < 0 || spec.tail_dim < 0) throw ConfigError("ModelSpec: negative dims");
    if (spec.seq_len + spec.tail_dim != 0 && spec.seq_len + spec.tail_dim != spec.input_dim &&
        spec.seq_len != 0)
        throw ConfigError("ModelSpec: seq_len + tail_dim must equal input_dim");

    bool seq_mode = spec.seq_len > 0;
    int cur_len = spec.seq_len;
    int cur_ch = 1;
    int cur_w = seq_mode ? spec.seq_len : spec.input_dim;
    bool tail_used = false;

    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& layer = spec.layers[i];
        const auto fail = [&](const char* what) {
            std::ostringstream msg;
            msg << "ModelSpec: layer " << i << " (" << layer_kind_name(layer.kind) << "): " << what;
            throw ConfigError(msg.str());
        };
        switch (layer.kind) {
            case LayerKind::Dense:
                if (seq_mode) fail("dense inside sequence stage");
                if (layer.in != cur_w) fail("input width mismatch");
                if (layer.out <= 0) fail("output width must be positive");
                cur_w = layer.out;
                break;
            case LayerKind::Relu:
                if (layer.in != cur_w) fail("width mismatch");
                break;
            case LayerKind::Conv1d:
                if (!seq_mode) fail("conv1d outside sequence stage");
                if (layer.length != cur_len || layer.in_ch != cur_ch) fail("shape mismatch");
                if (layer.kernel <= 0 || layer.kernel % 2 == 0) fail("kernel must be odd");
                cur_ch = layer.out_ch;
                cur_w = cur_len * cur_ch;
                break;
            case LayerKind::SelfAttention:
            case LayerKind::LayerNorm:
                if (!seq_mode) fail("sequence layer outside sequence stage");
                if (layer.length != cur_len || layer.out_ch != cur_ch) fail("shape mismatch");
                break;
            case LayerKind::MeanPool:
                if (!seq_mode) fail("mean_pool outside sequence stage");
                if (layer.length != cur_len || layer.out_ch != cur_ch) fail("shape mismatch");
                seq_mode = false;
                cur_w = cur_ch;
                break;
            case LayerKind::ConcatTail:
                if (seq_mode) fail("concat_tail inside sequence stage");
                if (tail_used) fail("tail already consumed");
                if (spec.tail_dim <= 0) fail("spec has no tail block");
                tail_used = true;
                cur_w += spec.tail_dim;
                break;
        }
    }
    if (seq_mode) throw ConfigError("ModelSpec: sequence stage never pooled");
    if (spec.tail_dim > 0 && !tail_used) throw ConfigError("ModelSpec: tail block never consumed");
    if (cur_w != spec.output_dim) throw ConfigError("ModelSpec: output_dim mismatch");
}

std::uint64_t spec_hash(const ModelSpec& spec) {
    std::ostringstream ss;
    ss << spec.input_dim << '|' << spec.seq_len << '|' << spec.tail_dim << '|' << spec.output_dim;
    for (const auto& l : spec.layers) {
        ss << '|' << static_cast<int>(l.kind) << ',' << l.in << ',' << l.out << ',' << l.length
           << ',' << l.in_ch << ',' << l.out_ch << ',' << l.kernel;
    }
    const std::string s = ss.str();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

ModelSpec concat_specs(const ModelSpec& base, const ModelSpec& top) {
    validate(base);
    validate(top);
    if (top.seq_len != 0 || top.tail_dim != 0)
        throw ConfigError("concat_specs: top stack must be dense-only");
    if (base.output_dim != top.input_dim)
        throw ConfigError("concat_specs: dimension mismatch at the seam");
    ModelSpec joined = base;
    joined.layers.insert(joined.layers.end(), top.layers.begin(), top.layers.end());
    joined.output_dim = top.output_dim;
    validate(joined);
    return joined;
}

std::size_t LayoutEntry::size() const {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::span<double> ParamVector::tensor(std::size_t layout_index) {
    const auto& e = layout[layout_index];
    return {values.data() + e.offset, e.size()};
}

std::span<const double> ParamVector::tensor(std::size_t layout_index) const {
    const auto& e = layout[layout_index];
    return {values.data() + e.offset, e.size()};
}

void validate(const ParamVector& params) {
    std::size_t n = 0;
    for (const auto& e : params.layout) n += e.size();
    if (n != params.values.size())
        throw InvalidInputError("ParamVector: layout size does not match value count");
    for (double v : params.values)
        if (!std::isfinite(v)) throw NumericError("ParamVector: non-finite value");
}

ParamVector zeros_like(const ParamVector& params) {
    ParamVector z;
    z.values.assign(params.values.size(), 0.0);
    z.layout = params.layout;
    return z;
}

void axpy(double a, const ParamVector& x, ParamVector& y) {
    if (x.values.size() != y.values.size()) throw InvalidInputError("axpy: size mismatch");
    for (std::size_t i = 0; i < x.values.size(); ++i) y.values[i] += a * x.values[i];
}

void scale(ParamVector& x, double a) {
    for (double& v : x.values) v *= a;
}

double l2_norm(const ParamVector& x) {
    double s = 0.0;
    for (double v : x.values) s += v * v;
    return std::sqrt(s);
}

double l2_distance(const ParamVector& a, const ParamVector& b) {
    if (a.values.size() != b.values.size()) throw InvalidInputError("l2_distance: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        const double d = a.values[i] - b.values[i];
        s += d * d;
    }
    return std::sqrt(s);
}

Model::Model(ModelSpec spec) : spec_(std::move(spec)) {
    validate(spec_);
    offsets_.reserve(spec_.layers.size());
    std::size_t off = 0;
    for (const auto& layer : spec_.layers) {
        offsets_.push_back(off);
        off += hexfed::param_count(layer);
    }
    total_params_ = off;
}

ParamVector Model::make_layout() const {
    ParamVector p;
    p.values.assign(total_params_, 0.0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
        const auto& layer = spec_.layers[i];
        const std::string prefix = "L" + std::to_string(i) + "." + layer_kind_name(layer.kind);
        const auto add = [&](const char* name, std::vector<std::size_t> shape) {
            LayoutEntry e;
            e.name = prefix + "." + name;
            e.offset = off;
            e.shape = std::move(shape);
            off += e.size();
            p.layout.push_back(std::move(e));
        };
        switch (layer.kind) {
            case LayerKind::Dense:
                add("W", {static_cast<std::size_t>(layer.out), static_cast<std::size_t>(layer.in)});
                add("b", {static_cast<std::size_t>(layer.out)});
                break;
            case LayerKind::Conv1d:
                add("W", {static_cast<std::size_t>(layer.out_ch), static_cast<std::size_t>(layer.in_ch),
                          static_cast<std::size_t>(layer.kernel)});
                add("b", {static_cast<std::size_t>(layer.out_ch)});
                break;
            case LayerKind::SelfAttention: {
                const auto c = static_cast<std::size_t>(layer.out_ch);
                add("Wq", {c, c});
                add("bq", {c});
                add("Wk", {c, c});
                add("bk", {c});
                add("Wv", {c, c});
                add("bv", {c});
                break;
            }
            case LayerKind::LayerNorm:
                add("gain", {static_cast<std::size_t>(layer.out_ch)});
                add("bias", {static_cast<std::size_t>(layer.out_ch)});
                break;
            case LayerKind::Relu:
            case LayerKind::MeanPool:
            case LayerKind::ConcatTail:
                break;
        }
    }
    return p;
}

ParamVector Model::init(std::uint64_t seed) const {
    ParamVector p = make_layout();
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
        const auto& layer = spec_.layers[i];
        Rng rng = make_rng(seed, 0x1217u, i);
        double* w = p.values.data() + offsets_[i];
        const auto fill_uniform = [&](std::size_t n, double bound) {
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (std::size_t k = 0; k < n; ++k) w[k] = dist(rng);
            w += n;
        };
        const auto fill_const = [&](std::size_t n, double v) {
            std::fill_n(w, n, v);
            w += n;
        };
        switch (layer.kind) {
            case LayerKind::Dense:
                fill_uniform(static_cast<std::size_t>(layer.out) * layer.in,
                             1.0 / std::sqrt(static_cast<double>(layer.in)));
                fill_const(layer.out, 0.0);
                break;
            case LayerKind::Conv1d:
                fill_uniform(static_cast<std::size_t>(layer.out_ch) * layer.in_ch * layer.kernel,
                             1.0 / std::sqrt(static_cast<double>(layer.in_ch) * layer.kernel));
                fill_const(layer.out_ch, 0.0);
                break;
            case LayerKind::SelfAttention: {
                const double bound = 1.0 / std::sqrt(static_cast<double>(layer.out_ch));
                for (int t = 0; t < 3; ++t) {
                    fill_uniform(static_cast<std::size_t>(layer.out_ch) * layer.out_ch, bound);
                    fill_const(layer.out_ch, 0.0);
                }
                break;
            }
            case LayerKind::LayerNorm:
                fill_const(layer.out_ch, 1.0);
                fill_const(layer.out_ch, 0.0);
                break;
            case LayerKind::Relu:
            case LayerKind::MeanPool:
            case LayerKind::ConcatTail:
                break;
        }
    }
    return p;
}

namespace {

// y = x W^T + b over a batch; W is (out x in) row-major.
Matrix dense_forward(const Matrix& x, const double* w, const double* b, int in, int out) {
    Matrix y(x.rows, static_cast<std::size_t>(out));
    for (std::size_t r = 0; r < x.rows; ++r) {
        const double* xr = x.data.data() + r * x.cols;
        double* yr = y.data.data() + r * y.cols;
        for (int o = 0; o < out; ++o) {
            const double* wrow = w + static_cast<std::size_t>(o) * in;
            double acc = b[o];
            for (int k = 0; k < in; ++k) acc += wrow[k] * xr[k];
            yr[o] = acc;
        }
    }
    return y;
}

void dense_backward(const Matrix& x, const Matrix& dy, const double* w, int in, int out,
                    double* dw, double* db, Matrix& dx) {
    for (std::size_t r = 0; r < x.rows; ++r) {
        const double* xr = x.data.data() + r * x.cols;
        const double* dyr = dy.data.data() + r * dy.cols;
        double* dxr = dx.data.data() + r * dx.cols;
        for (int o = 0; o < out; ++o) {
            const double g = dyr[o];
            db[o] += g;
            const double* wrow = w + static_cast<std::size_t>(o) * in;
            double* dwrow = dw + static_cast<std::size_t>(o) * in;
            for (int k = 0; k < in; ++k) {
                dwrow[k] += g * xr[k];
                dxr[k] += g * wrow[k];
            }
        }
    }
}

}  // namespace

Matrix Model::forward(const ParamVector& params, const Matrix& batch, ForwardCache* cache) const {
    if (params.values.size() != total_params_)
        throw InvalidInputError("forward: parameter vector size mismatch");
    if (batch.cols != static_cast<std::size_t>(spec_.input_dim))
        throw InvalidInputError("forward: batch width does not match spec input_dim");
    const std::size_t bsz = batch.rows;
    if (bsz == 0) throw InvalidInputError("forward: empty batch");

    Matrix cur;
    Matrix tail;
    if (spec_.seq_len > 0) {
        cur = Matrix(bsz, static_cast<std::size_t>(spec_.seq_len));
        tail = Matrix(bsz, static_cast<std::size_t>(spec_.tail_dim));
        for (std::size_t r = 0; r < bsz; ++r) {
            const auto src = batch.row(r);
            std::copy_n(src.begin(), spec_.seq_len, cur.row(r).begin());
            std::copy_n(src.begin() + spec_.seq_len, spec_.tail_dim, tail.row(r).begin());
        }
    } else {
        cur = batch;
    }
    if (cache) {
        cache->per_layer.assign(spec_.layers.size(), {});
        cache->tail = tail;
    }

    int cur_len = spec_.seq_len;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
        const auto& layer = spec_.layers[i];
        const double* w = params.values.data() + offsets_[i];
        Matrix next;
        std::vector<Matrix> saved;
        switch (layer.kind) {
            case LayerKind::Dense: {
                next = dense_forward(cur, w, w + static_cast<std::size_t>(layer.out) * layer.in,
                                     layer.in, layer.out);
                saved.push_back(cur);
                break;
            }
            case LayerKind::Relu: {
                next = cur;
                for (double& v : next.data) v = v > 0.0 ? v : 0.0;
                saved.push_back(cur);
                break;
            }
            case LayerKind::Conv1d: {
                const int L = layer.length, ic = layer.in_ch, oc = layer.out_ch, k = layer.kernel;
                const int h = k / 2;
                const double* bias = w + static_cast<std::size_t>(oc) * ic * k;
                next = Matrix(bsz, static_cast<std::size_t>(L) * oc);
                for (std::size_t r = 0; r < bsz; ++r) {
                    const double* xr = cur.data.data() + r * cur.cols;
                    double* yr = next.data.data() + r * next.cols;
                    for (int p = 0; p < L; ++p) {
                        for (int o = 0; o < oc; ++o) {
                            double acc = bias[o];
                            for (int t = 0; t < k; ++t) {
                                const int src = p + t - h;
                                if (src < 0 || src >= L) continue;
                                const double* wrow = w + (static_cast<std::size_t>(o) * ic) * k;
                                for (int c = 0; c < ic; ++c)
                                    acc += xr[src * ic + c] * wrow[static_cast<std::size_t>(c) * k + t];
                            }
                            yr[p * oc + o] = acc;
                        }
                    }
                }
                saved.push_back(cur);
                break;
            }
            case LayerKind::SelfAttention: {
                const int L = layer.length, C = layer.out_ch;
                const std::size_t wsz = static_cast<std::size_t>(C) * C;
                const double* wq = w;
                const double* bq = wq + wsz;
                const double* wk = bq + C;
                const double* bk = wk + wsz;
                const double* wv = bk + C;
                const double* bv = wv + wsz;
                const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(C));
                Matrix q(bsz, static_cast<std::size_t>(L) * C), kk(bsz, static_cast<std::size_t>(L) * C),
                    vv(bsz, static_cast<std::size_t>(L) * C), att(bsz, static_cast<std::size_t>(L) * L);
                next = Matrix(bsz, static_cast<std::size_t>(L) * C);
                std::vector<double> scores(static_cast<std::size_t>(L));
                for (std::size_t r = 0; r < bsz; ++r) {
                    const double* xr = cur.data.data() + r * cur.cols;
                    double* qr = q.data.data() + r * q.cols;
                    double* kr = kk.data.data() + r * kk.cols;
                    double* vr = vv.data.data() + r * vv.cols;
                    double* ar = att.data.data() + r * att.cols;
                    double* yr = next.data.data() + r * next.cols;
                    for (int p = 0; p < L; ++p) {
                        for (int c = 0; c < C; ++c) {
                            double aq = bq[c], ak = bk[c], av = bv[c];
                            const double* wq_row = wq + static_cast<std::size_t>(c) * C;
                            const double* wk_row = wk + static_cast<std::size_t>(c) * C;
                            const double* wv_row = wv + static_cast<std::size_t>(c) * C;
                            for (int e = 0; e < C; ++e) {
                                const double x = xr[p * C + e];
                                aq += x * wq_row[e];
                                ak += x * wk_row[e];
                                av += x * wv_row[e];
                            }
                            qr[p * C + c] = aq;
                            kr[p * C + c] = ak;
                            vr[p * C + c] = av;
                        }
                    }
                    for (int p = 0; p < L; ++p) {
                        double mx = -1e300;
                        for (int t = 0; t < L; ++t) {
                            double s = 0.0;
                            for (int c = 0; c < C; ++c) s += qr[p * C + c] * kr[t * C + c];
                            s *= inv_sqrt;
                            scores[t] = s;
                            mx = std::max(mx, s);
                        }
                        double sum = 0.0;
                        for (int t = 0; t < L; ++t) {
                            const double e = std::exp(scores[t] - mx);
                            ar[p * L + t] = e;
                            sum += e;
                        }
                        for (int t = 0; t < L; ++t) ar[p * L + t] /= sum;
                        for (int c = 0; c < C; ++c) {
                            double acc = 0.0;
                            for (int t = 0; t < L; ++t) acc += ar[p * L + t] * vr[t * C + c];
                            yr[p * C + c] = acc;
                        }
                    }
                }
                saved.push_back(cur);
                saved.push_back(std::move(q));
                saved.push_back(std::move(kk));
                saved.push_back(std::move(vv));
                saved.push_back(std::move(att));
                break;
            }
            case LayerKind::LayerNorm: {
                const int L = layer.length, C = layer.out_ch;
                const double* gain = w;
                const double* bias = w + C;
                next = Matrix(bsz, cur.cols);
                Matrix stats(bsz, static_cast<std::size_t>(L) * 2);  // mean, rstd per position
                for (std::size_t r = 0; r < bsz; ++r) {
                    const double* xr = cur.data.data() + r * cur.cols;
                    double* yr = next.data.data() + r * next.cols;
                    double* st = stats.data.data() + r * stats.cols;
                    for (int p = 0; p < L; ++p) {
                        double mean = 0.0;
                        for (int c = 0; c < C; ++c) mean += xr[p * C + c];
                        mean /= C;
                        double var = 0.0;
                        for (int c = 0; c < C; ++c) {
                            const double d = xr[p * C + c] - mean;
                            var += d * d;
                        }
                        var /= C;
                        const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
                        st[p * 2] = mean;
                        st[p * 2 + 1] = rstd;
                        for (int c = 0; c < C; ++c)
                            yr[p * C + c] = gain[c] * (xr[p * C + c] - mean) * rstd + bias[c];
                    }
                }
                saved.push_back(cur);
                saved.push_back(std::move(stats));
                break;
            }
            case LayerKind::MeanPool: {
                const int L = layer.length, C = layer.out_ch;
                next = Matrix(bsz, static_cast<std::size_t>(C));
                for (std::size_t r = 0; r < bsz; ++r) {
                    const double* xr = cur.data.data() + r * cur.cols;
                    double* yr = next.data.data() + r * next.cols;
                    for (int c = 0; c < C; ++c) {
                        double acc = 0.0;
                        for (int p = 0; p < L; ++p) acc += xr[p * C + c];
                        yr[c] = acc / L;
                    }
                }
                cur_len = 0;
                break;
            }
            case LayerKind::ConcatTail: {
                next = Matrix(bsz, cur.cols + tail.cols);
                for (std::size_t r = 0; r < bsz; ++r) {
                    std::copy_n(cur.row(r).begin(), cur.cols, next.row(r).begin());
                    std::copy_n(tail.row(r).begin(), tail.cols, next.row(r).begin() + cur.cols);
                }
                break;
            }
        }
        check_finite(next, i, layer.kind);
        if (cache) cache->per_layer[i] = std::move(saved);
        cur = std::move(next);
    }
    (void)cur_len;
    if (cache) cache->output = cur;
    return cur;
}

void Model::backward(const ParamVector& params, const ForwardCache& cache, const Matrix& d_output,
                     ParamVector& grad) const {
    if (grad.values.size() != total_params_)
        throw InvalidInputError("backward: gradient vector size mismatch");
    Matrix d_cur = d_output;
    for (std::size_t ii = spec_.layers.size(); ii-- > 0;) {
        const auto& layer = spec_.layers[ii];
        const double* w = params.values.data() + offsets_[ii];
        double* gw = grad.values.data() + offsets_[ii];
        const auto& saved = cache.per_layer[ii];
        Matrix d_prev;
        switch (layer.kind) {
            case LayerKind::Dense: {
                const Matrix& x = saved[0];
                d_prev = Matrix(x.rows, x.cols);
                dense_backward(x, d_cur, w, layer.in, layer.out, gw,
                               gw + static_cast<std::size_t>(layer.out) * layer.in, d_prev);
                break;
            }
            case LayerKind::Relu: {
                const Matrix& x = saved[0];
                d_prev = d_cur;
                for (std::size_t k = 0; k < x.data.size(); ++k)
                    if (x.data[k] <= 0.0) d_prev.data[k] = 0.0;
                break;
            }
            case LayerKind::Conv1d: {
                const Matrix& x = saved[0];
                const int L = layer.length, ic = layer.in_ch, oc = layer.out_ch, k = layer.kernel;
                const int h = k / 2;
                double* gb = gw + static_cast<std::size_t>(oc) * ic * k;
                d_prev = Matrix(x.rows, x.cols);
                for (std::size_t r = 0; r < x.rows; ++r) {
                    const double* xr = x.data.data() + r * x.cols;
                    const double* dyr = d_cur.data.data() + r * d_cur.cols;
                    double* dxr = d_prev.data.data() + r * d_prev.cols;
                    for (int p = 0; p < L; ++p) {
                        for (int o = 0; o < oc; ++o) {
                            const double g = dyr[p * oc + o];
                            gb[o] += g;
                            for (int t = 0; t < k; ++t) {
                                const int src = p + t - h;
                                if (src < 0 || src >= L) continue;
                                double* gw_row = gw + (static_cast<std::size_t>(o) * ic) * k;
                                const double* w_row = w + (static_cast<std::size_t>(o) * ic) * k;
                                for (int c = 0; c < ic; ++c) {
                                    gw_row[static_cast<std::size_t>(c) * k + t] += g * xr[src * ic + c];
                                    dxr[src * ic + c] += g * w_row[static_cast<std::size_t>(c) * k + t];
                                }
                            }
                        }
                    }
                }
                break;
            }
            case LayerKind::SelfAttention: {
                const Matrix& x = saved[0];
                const Matrix& q = saved[1];
                const Matrix& kk = saved[2];
                const Matrix& vv = saved[3];
                const Matrix& att = saved[4];
                const int L = layer.length, C = layer.out_ch;
                const std::size_t wsz = static_cast<std::size_t>(C) * C;
                const double* wq = w;
                const double* wk = wq + wsz + C;
                const double* wv = wk + wsz + C;
                double* gwq = gw;
                double* gbq = gwq + wsz;
                double* gwk = gbq + C;
                double* gbk = gwk + wsz;
                double* gwv = gbk + C;
                double* gbv = gwv + wsz;
                const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(C));
                d_prev = Matrix(x.rows, x.cols);
                std::vector<double> d_att(static_cast<std::size_t>(L) * L);
                std::vector<double> d_q(static_cast<std::size_t>(L) * C);
                std::vector<double> d_k(static_cast<std::size_t>(L) * C);
                std::vector<double> d_v(static_cast<std::size_t>(L) * C);
                for (std::size_t r = 0; r < x.rows; ++r) {
                    const double* xr = x.data.data() + r * x.cols;
                    const double* qr = q.data.data() + r * q.cols;
                    const double* kr = kk.data.data() + r * kk.cols;
                    const double* vr = vv.data.data() + r * vv.cols;
                    const double* ar = att.data.data() + r * att.cols;
                    const double* dyr = d_cur.data.data() + r * d_cur.cols;
                    double* dxr = d_prev.data.data() + r * d_prev.cols;
                    std::fill(d_q.begin(), d_q.end(), 0.0);
                    std::fill(d_k.begin(), d_k.end(), 0.0);
                    std::fill(d_v.begin(), d_v.end(), 0.0);
                    // dV and dA
                    for (int t = 0; t < L; ++t)
                        for (int c = 0; c < C; ++c) {
                            double acc = 0.0;
                            for (int p = 0; p < L; ++p) acc += ar[p * L + t] * dyr[p * C + c];
                            d_v[t * C + c] = acc;
                        }
                    for (int p = 0; p < L; ++p)
                        for (int t = 0; t < L; ++t) {
                            double acc = 0.0;
                            for (int c = 0; c < C; ++c) acc += dyr[p * C + c] * vr[t * C + c];
                            d_att[p * L + t] = acc;
                        }
                    // softmax backward into dS (reuse d_att)
                    for (int p = 0; p < L; ++p) {
                        double dot = 0.0;
                        for (int t = 0; t < L; ++t) dot += d_att[p * L + t] * ar[p * L + t];
                        for (int t = 0; t < L; ++t)
                            d_att[p * L + t] = ar[p * L + t] * (d_att[p * L + t] - dot);
                    }
                    // dQ, dK
                    for (int p = 0; p < L; ++p)
                        for (int c = 0; c < C; ++c) {
                            double acc = 0.0;
                            for (int t = 0; t < L; ++t) acc += d_att[p * L + t] * kr[t * C + c];
                            d_q[p * C + c] = acc * inv_sqrt;
                        }
                    for (int t = 0; t < L; ++t)
                        for (int c = 0; c < C; ++c) {
                            double acc = 0.0;
                            for (int p = 0; p < L; ++p) acc += d_att[p * L + t] * qr[p * C + c];
                            d_k[t * C + c] = acc * inv_sqrt;
                        }
                    // projection backward for q/k/v
                    for (int p = 0; p < L; ++p) {
                        for (int c = 0; c < C; ++c) {
                            const double gq = d_q[p * C + c];
                            const double gk = d_k[p * C + c];
                            const double gv = d_v[p * C + c];
                            gbq[c] += gq;
                            gbk[c] += gk;
                            gbv[c] += gv;
                            double* gwq_row = gwq + static_cast<std::size_t>(c) * C;
                            double* gwk_row = gwk + static_cast<std::size_t>(c) * C;
                            double* gwv_row = gwv + static_cast<std::size_t>(c) * C;
                            const double* wq_row = wq + static_cast<std::size_t>(c) * C;
                            const double* wk_row = wk + static_cast<std::size_t>(c) * C;
                            const double* wv_row = wv + static_cast<std::size_t>(c) * C;
                            for (int e = 0; e < C; ++e) {
                                const double xv = xr[p * C + e];
                                gwq_row[e] += gq * xv;
                                gwk_row[e] += gk * xv;
                                gwv_row[e] += gv * xv;
                                dxr[p * C + e] += gq * wq_row[e] + gk * wk_row[e] + gv * wv_row[e];
                            }
                        }
                    }
                }
                break;
            }
            case LayerKind::LayerNorm: {
                const Matrix& x = saved[0];
                const Matrix& stats = saved[1];
                const int L = layer.length, C = layer.out_ch;
                const double* gain = w;
                double* ggain = gw;
                double* gbias = gw + C;
                d_prev = Matrix(x.rows, x.cols);
                for (std::size_t r = 0; r < x.rows; ++r) {
                    const double* xr = x.data.data() + r * x.cols;
                    const double* st = stats.data.data() + r * stats.cols;
                    const double* dyr = d_cur.data.data() + r * d_cur.cols;
                    double* dxr = d_prev.data.data() + r * d_prev.cols;
                    for (int p = 0; p < L; ++p) {
                        const double mean = st[p * 2];
                        const double rstd = st[p * 2 + 1];
                        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                        for (int c = 0; c < C; ++c) {
                            const double xhat = (xr[p * C + c] - mean) * rstd;
                            const double dy = dyr[p * C + c];
                            ggain[c] += dy * xhat;
                            gbias[c] += dy;
                            const double dxhat = dy * gain[c];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for (int c = 0; c < C; ++c) {
                            const double xhat = (xr[p * C + c] - mean) * rstd;
                            const double dxhat = dyr[p * C + c] * gain[c];
                            dxr[p * C + c] =
                                rstd * (dxhat - sum_dxhat / C - xhat * sum_dxhat_xhat / C);
                        }
                    }
                }
                break;
            }
            case LayerKind::MeanPool: {
                const int L = layer.length, C = layer.out_ch;
                d_prev = Matrix(d_cur.rows, static_cast<std::size_t>(L) * C);
                for (std::size_t r = 0; r < d_cur.rows; ++r) {
                    const double* dyr = d_cur.data.data() + r * d_cur.cols;
                    double* dxr = d_prev.data.data() + r * d_prev.cols;
                    for (int p = 0; p < L; ++p)
                        for (int c = 0; c < C; ++c) dxr[p * C + c] = dyr[c] / L;
                }
                break;
            }
            case LayerKind::ConcatTail: {
                const std::size_t head_w = d_cur.cols - cache.tail.cols;
                d_prev = Matrix(d_cur.rows, head_w);
                for (std::size_t r = 0; r < d_cur.rows; ++r)
                    std::copy_n(d_cur.row(r).begin(), head_w, d_prev.row(r).begin());
                break;
            }
        }
        d_cur = std::move(d_prev);
    }
}

double loss_weighted_ce(const Matrix& probs, const Matrix& onehot,
                        const std::array<double, 3>& ratios) {
    if (probs.rows != onehot.rows || probs.cols != onehot.cols)
        throw InvalidInputError("loss_weighted_ce: shape mismatch");
    if (probs.cols != 3) throw InvalidInputError("loss_weighted_ce: expected 3 classes");
    for (double wx : ratios)
        if (!(wx > 0.0)) throw ConfigError("loss_weighted_ce: class ratios must be positive");
    double total = 0.0;
    for (std::size_t r = 0; r < probs.rows; ++r) {
        double row_sum = 0.0;
        for (std::size_t c = 0; c < probs.cols; ++c) row_sum += probs.at(r, c);
        if (std::abs(row_sum - 1.0) > 1e-6)
            throw InvalidInputError("loss_weighted_ce: probability row does not sum to 1");
        for (std::size_t c = 0; c < probs.cols; ++c) {
            const double p = onehot.at(r, c);
            if (p != 0.0) total -= p / ratios[c] * std::log(probs.at(r, c));
        }
    }
    return total / static_cast<double>(probs.rows);
}

LossGrad weighted_ce_from_logits(const Matrix& logits, const Matrix& onehot,
                                 const std::array<double, 3>& ratios) {
    if (logits.rows != onehot.rows || logits.cols != onehot.cols)
        throw InvalidInputError("weighted_ce_from_logits: shape mismatch");
    for (double wx : ratios)
        if (!(wx > 0.0)) throw ConfigError("weighted_ce_from_logits: ratios must be positive");
    const std::size_t bsz = logits.rows;
    const std::size_t classes = logits.cols;
    LossGrad out;
    out.d_input = Matrix(bsz, classes);
    const Matrix probs = softmax_rows(logits);
    double total = 0.0;
    for (std::size_t r = 0; r < bsz; ++r) {
        // log-softmax computed from shifted logits for stability
        const auto row = logits.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double lse = 0.0;
        for (std::size_t c = 0; c < classes; ++c) lse += std::exp(row[c] - mx);
        lse = std::log(lse);
        double a_sum = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            const double a = onehot.at(r, c) / ratios[c];
            a_sum += a;
            if (a != 0.0) total -= a * (row[c] - mx - lse);
        }
        for (std::size_t c = 0; c < classes; ++c) {
            out.d_input.at(r, c) =
                (probs.at(r, c) * a_sum - onehot.at(r, c) / ratios[c]) / static_cast<double>(bsz);
        }
    }
    out.loss = total / static_cast<double>(bsz);
    if (!std::isfinite(out.loss)) throw NumericError("weighted_ce_from_logits: non-finite loss");
    return out;
}

void sgd_step(ParamVector& params, const ParamVector& grad, double lr) {
    if (!(lr > 0.0)) throw ConfigError("sgd_step: learning rate must be positive");
    if (params.values.size() != grad.values.size())
        throw InvalidInputError("sgd_step: size mismatch");
    for (std::size_t i = 0; i < params.values.size(); ++i)
        params.values[i] -= lr * grad.values[i];
}

void adam_step(ParamVector& params, const ParamVector& grad, AdamState& state) {
    if (!(state.lr > 0.0)) throw ConfigError("adam_step: learning rate must be positive");
    if (params.values.size() != grad.values.size())
        throw InvalidInputError("adam_step: size mismatch");
    if (state.m.empty()) {
        state.m.assign(params.values.size(), 0.0);
        state.v.assign(params.values.size(), 0.0);
    }
    if (state.m.size() != params.values.size())
        throw InvalidInputError("adam_step: state size mismatch");
    ++state.t;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.values.size(); ++i) {
        const double g = grad.values[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        params.values[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
}

ModelSpec make_encoder_spec(const EncoderPreset& p) {
    ModelSpec spec;
    spec.input_dim = p.input_dim();
    spec.output_dim = p.repr_dim;
    if (p.mlp_fallback) {
        spec.seq_len = 0;
        spec.tail_dim = 0;
        spec.layers = {
            LayerDesc{.kind = LayerKind::Dense, .in = spec.input_dim, .out = p.mlp_hidden},
            LayerDesc{.kind = LayerKind::Relu, .in = p.mlp_hidden},
            LayerDesc{.kind = LayerKind::Dense, .in = p.mlp_hidden, .out = p.repr_dim},
        };
        validate(spec);
        return spec;
    }
    const int L = p.history_len;
    const int C = p.conv_channels;
    const int tail = p.time_dim + p.cell_dim;
    spec.seq_len = L;
    spec.tail_dim = tail;
    spec.layers = {
        LayerDesc{.kind = LayerKind::Conv1d, .length = L, .in_ch = 1, .out_ch = C, .kernel = 3},
        LayerDesc{.kind = LayerKind::Relu, .in = L * C},
        LayerDesc{.kind = LayerKind::SelfAttention, .length = L, .out_ch = C},
        LayerDesc{.kind = LayerKind::LayerNorm, .length = L, .out_ch = C},
        LayerDesc{.kind = LayerKind::MeanPool, .length = L, .out_ch = C},
        LayerDesc{.kind = LayerKind::ConcatTail},
        LayerDesc{.kind = LayerKind::Dense, .in = C + tail, .out = p.dense_hidden},
        LayerDesc{.kind = LayerKind::Relu, .in = p.dense_hidden},
        LayerDesc{.kind = LayerKind::Dense, .in = p.dense_hidden, .out = p.repr_dim},
    };
    validate(spec);
    return spec;
}

ModelSpec make_projection_head_spec(int repr_dim, int hidden, int projection_dim) {
    ModelSpec spec;
    spec.input_dim = repr_dim;
    spec.output_dim = projection_dim;
    spec.layers = {
        LayerDesc{.kind = LayerKind::Dense, .in = repr_dim, .out = hidden},
        LayerDesc{.kind = LayerKind::Relu, .in = hidden},
        LayerDesc{.kind = LayerKind::Dense, .in = hidden, .out = projection_dim},
    };
    validate(spec);
    return spec;
}

ModelSpec make_classifier_spec(int repr_dim, int hidden, int classes) {
    ModelSpec spec;
    spec.input_dim = repr_dim;
    spec.output_dim = classes;
    spec.layers = {
        LayerDesc{.kind = LayerKind::Dense, .in = repr_dim, .out = hidden},
        LayerDesc{.kind = LayerKind::Relu, .in = hidden},
        LayerDesc{.kind = LayerKind::Dense, .in = hidden, .out = classes},
    };
    validate(spec);
    return spec;
}

EncoderPreset paper_scale_preset() {
    EncoderPreset p;
    p.conv_channels = 256;
    p.dense_hidden = 768;
    p.repr_dim = 256;
    return p;
}

namespace {

constexpr char kCheckpointMagic[8] = {'H', 'X', 'F', 'D', 'C', 'K', 'P', '1'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::istream& is, T& v) {
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelSpec& spec, const ParamVector& params) {
    validate(params);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InvalidInputError("save_checkpoint: cannot open " + path);
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    write_pod(os, spec_hash(spec));
    write_pod(os, static_cast<std::uint64_t>(params.layout.size()));
    for (const auto& e : params.layout) {
        write_pod(os, static_cast<std::uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        write_pod(os, static_cast<std::uint64_t>(e.offset));
        write_pod(os, static_cast<std::uint32_t>(e.shape.size()));
        for (std::size_t d : e.shape) write_pod(os, static_cast<std::uint64_t>(d));
    }
    write_pod(os, static_cast<std::uint64_t>(params.values.size()));
    os.write(reinterpret_cast<const char*>(params.values.data()),
             static_cast<std::streamsize>(params.values.size() * sizeof(double)));
    if (!os) throw InvalidInputError("save_checkpoint: write failed for " + path);
}

ParamVector load_checkpoint(const std::string& path, const ModelSpec& expected_spec) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InvalidInputError("load_checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw ParseError("load_checkpoint: bad magic in " + path);
    std::uint64_t hash = 0;
    read_pod(is, hash);
    if (hash != spec_hash(expected_spec))
        throw InvalidInputError("load_checkpoint: checkpoint spec hash does not match");
    std::uint64_t n_layout = 0;
    read_pod(is, n_layout);
    ParamVector p;
    p.layout.resize(n_layout);
    for (auto& e : p.layout) {
        std::uint32_t name_len = 0;
        read_pod(is, name_len);
        e.name.resize(name_len);
        is.read(e.name.data(), name_len);
        std::uint64_t off = 0;
        read_pod(is, off);
        e.offset = off;
        std::uint32_t ndims = 0;
        read_pod(is, ndims);
        e.shape.resize(ndims);
        for (auto& d : e.shape) {
            std::uint64_t dv = 0;
            read_pod(is, dv);
            d = dv;
        }
    }
    std::uint64_t n_values = 0;
    read_pod(is, n_values);
    p.values.resize(n_values);
    is.read(reinterpret_cast<char*>(p.values.data()),
            static_cast<std::streamsize>(n_values * sizeof(double)));
    if (!is) throw ParseError("load_checkpoint: truncated file " + path);
    validate(p);
    return p;
}

}  // namespace hexfed
