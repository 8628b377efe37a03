#include "hexfed/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hexfed {

const char* aug_kind_name(AugKind kind) {
    switch (kind) {
        case AugKind::Noise: return "noise";
        case AugKind::Crop: return "crop";
        case AugKind::Mask: return "mask";
        case AugKind::Flip: return "flip";
        case AugKind::Reverse: return "reverse";
    }
    return "unknown";
}

AugKind aug_kind_from_name(const std::string& name) {
    if (name == "noise") return AugKind::Noise;
    if (name == "crop") return AugKind::Crop;
    if (name == "mask") return AugKind::Mask;
    if (name == "flip") return AugKind::Flip;
    if (name == "reverse") return AugKind::Reverse;
    throw ConfigError("unknown augmentation: " + name);
}

void validate(const AugSpec& spec) {
    if (spec.noise_sigma < 0.0) throw ConfigError("augment: noise sigma must be >= 0");
    if (!(spec.crop_lo > 0.0 && spec.crop_lo <= spec.crop_hi && spec.crop_hi <= 1.0))
        throw ConfigError("augment: crop ratio range must satisfy 0 < lo <= hi <= 1");
    if (!(spec.mask_fraction > 0.0 && spec.mask_fraction < 1.0))
        throw ConfigError("augment: mask fraction must be in (0, 1)");
    if (spec.flip_swaps < 0) throw ConfigError("augment: swap count must be >= 0");
}

std::vector<double> augment(std::span<const double> history, const AugSpec& spec, Rng& rng) {
    validate(spec);
    const std::size_t len = history.size();
    if (len < 4) throw InvalidInputError("augment: series too short");
    std::vector<double> out(history.begin(), history.end());
    switch (spec.kind) {
        case AugKind::Noise: {
            double mean = std::accumulate(out.begin(), out.end(), 0.0) / static_cast<double>(len);
            double var = 0.0;
            for (double v : out) var += (v - mean) * (v - mean);
            var /= static_cast<double>(len);
            const double scale = spec.noise_sigma * std::sqrt(var);
            if (scale > 0.0) {
                std::normal_distribution<double> dist(0.0, scale);
                for (double& v : out) v += dist(rng);
            }
            break;
        }
        case AugKind::Crop: {
            std::uniform_real_distribution<double> ratio_dist(spec.crop_lo, spec.crop_hi);
            const double ratio = ratio_dist(rng);
            const auto window =
                std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(
                                            ratio * static_cast<double>(len))),
                                        2, len);
            std::uniform_int_distribution<std::size_t> start_dist(0, len - window);
            const std::size_t start = start_dist(rng);
            // Linear resample of the window back to full length; endpoints of
            // the window map to the endpoints of the output.
            std::vector<double> resampled(len);
            for (std::size_t i = 0; i < len; ++i) {
                const double t = static_cast<double>(i) * static_cast<double>(window - 1) /
                                 static_cast<double>(len - 1);
                const auto lo = static_cast<std::size_t>(std::floor(t));
                const std::size_t hi = std::min(lo + 1, window - 1);
                const double frac = t - static_cast<double>(lo);
                resampled[i] = (1.0 - frac) * out[start + lo] + frac * out[start + hi];
            }
            out = std::move(resampled);
            break;
        }
        case AugKind::Mask: {
            const auto n_mask = static_cast<std::size_t>(
                std::ceil(spec.mask_fraction * static_cast<double>(len)));
            std::vector<std::size_t> idx(len);
            std::iota(idx.begin(), idx.end(), 0);
            std::shuffle(idx.begin(), idx.end(), rng);
            for (std::size_t k = 0; k < n_mask; ++k) out[idx[k]] = 0.0;
            break;
        }
        case AugKind::Flip: {
            std::uniform_int_distribution<std::size_t> pick(0, len - 1);
            for (int s = 0; s < spec.flip_swaps; ++s) {
                const std::size_t i = pick(rng);
                const std::size_t j = pick(rng);
                std::swap(out[i], out[j]);
            }
            break;
        }
        case AugKind::Reverse:
            std::reverse(out.begin(), out.end());
            break;
    }
    for (double v : out)
        if (!std::isfinite(v)) throw NumericError("augment: produced non-finite value");
    return out;
}

Matrix make_pairs(const Matrix& batch, int history_len, const AugSpec& first,
                  const AugSpec& second, Rng& rng) {
    if (batch.rows < 2) throw InvalidInputError("make_pairs: need at least 2 samples");
    if (history_len <= 0 || static_cast<std::size_t>(history_len) > batch.cols)
        throw InvalidInputError("make_pairs: bad history length");
    Matrix views(batch.rows * 2, batch.cols);
    for (std::size_t k = 0; k < batch.rows; ++k) {
        const auto src = batch.row(k);
        const std::span<const double> hist(src.data(), static_cast<std::size_t>(history_len));
        for (int v = 0; v < 2; ++v) {
            auto dst = views.row(2 * k + static_cast<std::size_t>(v));
            const std::vector<double> once = augment(hist, first, rng);
            const std::vector<double> twice = augment(once, second, rng);
            std::copy(twice.begin(), twice.end(), dst.begin());
            std::copy(src.begin() + history_len, src.end(), dst.begin() + history_len);
        }
    }
    return views;
}

NtXentResult ntxent(const Matrix& z, double tau, bool printed_denominator) {
    if (!(tau > 0.0)) throw ConfigError("ntxent: temperature must be positive");
    if (z.rows < 4 || z.rows % 2 != 0)
        throw InvalidInputError("ntxent: need an even number of rows (>= 4)");
    const std::size_t n = z.rows;
    const std::size_t dim = z.cols;

    std::vector<double> norms(n);
    Matrix unit(n, dim);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < dim; ++c) s += z.at(i, c) * z.at(i, c);
        if (s == 0.0) throw NumericError("ntxent: zero-norm projection row");
        norms[i] = std::sqrt(s);
        for (std::size_t c = 0; c < dim; ++c) unit.at(i, c) = z.at(i, c) / norms[i];
    }

    Matrix sim(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < dim; ++c) s += unit.at(i, c) * unit.at(j, c);
            sim.at(i, j) = s;
        }

    // g(i, j) accumulates dTotal/dsim(i, j); each ordered anchor contributes
    // its own row so both directions of a pair are counted once.
    Matrix g(n, n);
    double total = 0.0;
    std::vector<double> weights(n);
    for (std::size_t anchor = 0; anchor < n; ++anchor) {
        const std::size_t positive = anchor ^ 1;  // pair rows are (2k, 2k+1)
        // Denominator terms: standard form scores candidates against the
        // anchor; the printed variant scores them against the positive view.
        double mx = -1e300;
        for (std::size_t k = 0; k < n; ++k) {
            if (k == anchor) continue;
            const double s = printed_denominator ? sim.at(k, positive) : sim.at(anchor, k);
            weights[k] = s / tau;
            mx = std::max(mx, weights[k]);
        }
        double denom = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            if (k == anchor) continue;
            weights[k] = std::exp(weights[k] - mx);
            denom += weights[k];
        }
        total += -(sim.at(anchor, positive) / tau) + mx + std::log(denom);
        g.at(anchor, positive) -= 1.0 / tau;
        for (std::size_t k = 0; k < n; ++k) {
            if (k == anchor) continue;
            const double p = weights[k] / denom;
            if (printed_denominator)
                g.at(k, positive) += p / tau;
            else
                g.at(anchor, k) += p / tau;
        }
    }

    const double inv_n = 1.0 / static_cast<double>(n);
    NtXentResult out;
    out.loss = total * inv_n;
    out.d_z = Matrix(n, dim);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double gij = g.at(i, j) * inv_n;
            if (gij == 0.0 || i == j) continue;
            // d sim(i,j)/dz_i = (u_j - sim * u_i) / ||z_i|| and symmetrically for z_j.
            for (std::size_t c = 0; c < dim; ++c) {
                out.d_z.at(i, c) += gij * (unit.at(j, c) - sim.at(i, j) * unit.at(i, c)) / norms[i];
                out.d_z.at(j, c) += gij * (unit.at(i, c) - sim.at(i, j) * unit.at(j, c)) / norms[j];
            }
        }
    if (!std::isfinite(out.loss)) throw NumericError("ntxent: non-finite loss");
    return out;
}

double contrastive_grad(const Model& encoder_head, const ParamVector& params,
                        const Matrix& pair_batch, double tau, bool printed_denominator,
                        ParamVector& grad_out) {
    ForwardCache cache;
    const Matrix z = encoder_head.forward(params, pair_batch, &cache);
    const NtXentResult nt = ntxent(z, tau, printed_denominator);
    encoder_head.backward(params, cache, nt.d_z, grad_out);
    return nt.loss;
}

ParamVector pretrain_local(const Model& encoder_head, ParamVector params, const Matrix& inputs,
                           int history_len, const PretrainConfig& config, std::uint64_t seed,
                           AdamState* adam, int* steps_out, double* last_loss_out) {
    if (inputs.rows < static_cast<std::size_t>(config.batch_size))
        throw InvalidInputError("pretrain_local: dataset smaller than one batch");
    if (config.epochs < 0) throw ConfigError("pretrain_local: negative epochs");
    AdamState local_state;
    AdamState& state = adam ? *adam : local_state;
    state.lr = config.lr;

    const std::size_t n = inputs.rows;
    const auto bsz = static_cast<std::size_t>(config.batch_size);
    const std::size_t steps_per_epoch = (n + bsz - 1) / bsz;
    int steps = 0;
    double last_loss = 0.0;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        Rng shuffle_rng = make_rng(seed, 0xa76u, static_cast<std::uint64_t>(epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        for (std::size_t step = 0; step < steps_per_epoch; ++step) {
            std::vector<std::size_t> take;
            take.reserve(bsz);
            for (std::size_t k = step * bsz; k < std::min(n, (step + 1) * bsz); ++k)
                take.push_back(order[k]);
            // NT-Xent needs at least one negative pair; top up a degenerate
            // trailing batch from the start of the permutation.
            for (std::size_t k = 0; take.size() < 2; ++k) take.push_back(order[k]);
            Matrix batch(take.size(), inputs.cols);
            for (std::size_t k = 0; k < take.size(); ++k)
                std::copy_n(inputs.row(take[k]).begin(), inputs.cols, batch.row(k).begin());
            Rng aug_rng = make_rng(seed, 0xa77u, static_cast<std::uint64_t>(epoch), step);
            const Matrix pairs =
                make_pairs(batch, history_len, config.aug_first, config.aug_second, aug_rng);
            ParamVector grad = zeros_like(params);
            last_loss = contrastive_grad(encoder_head, params, pairs, config.tau,
                                         config.printed_denominator, grad);
            adam_step(params, grad, state);
            ++steps;
        }
    }
    if (steps_out) *steps_out = steps;
    if (last_loss_out) *last_loss_out = last_loss;
    return params;
}

}  // namespace hexfed
