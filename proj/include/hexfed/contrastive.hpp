#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hexfed/common.hpp"
#include "hexfed/tensornet.hpp"

namespace hexfed {

enum class AugKind { Noise, Crop, Mask, Flip, Reverse };

const char* aug_kind_name(AugKind kind);
AugKind aug_kind_from_name(const std::string& name);

struct AugSpec {
    AugKind kind = AugKind::Noise;
    double noise_sigma = 0.5;    // relative to the series std
    double crop_lo = 0.5;        // crop ratio range
    double crop_hi = 0.9;
    double mask_fraction = 0.1;
    int flip_swaps = 2;
};

void validate(const AugSpec& spec);

// Augments one demand-history series in place semantics (returns a copy).
// Output length always equals input length.
std::vector<double> augment(std::span<const double> history, const AugSpec& spec, Rng& rng);

// Builds the 2B-row positive-pair batch: rows 2k and 2k+1 are two
// independently augmented views of source row k. Only the leading
// history_len columns are augmented; the rest pass through unchanged.
Matrix make_pairs(const Matrix& batch, int history_len, const AugSpec& first,
                  const AugSpec& second, Rng& rng);

struct NtXentResult {
    double loss = 0.0;
    Matrix d_z;  // gradient wrt the projections
};

// Normalized temperature-scaled cross entropy over rows of z (2B x p),
// pairs (2k, 2k+1), averaged over both directions of every pair.
// printed_denominator switches to the variant whose negatives are scored
// against the positive view instead of the anchor (self-similarity included).
NtXentResult ntxent(const Matrix& z, double tau, bool printed_denominator = false);

struct PretrainConfig {
    int epochs = 1;
    int batch_size = 128;
    double tau = 0.5;
    double lr = 1e-3;
    AugSpec aug_first{.kind = AugKind::Noise};
    AugSpec aug_second{.kind = AugKind::Crop};
    bool printed_denominator = false;
};

// Runs epochs x ceil(N / batch_size) adam steps of NT-Xent on the
// encoder+projection model. Self-supervised: inputs only, no labels.
// Returns the final parameters; *steps_out and *last_loss_out are optional taps.
ParamVector pretrain_local(const Model& encoder_head, ParamVector params, const Matrix& inputs,
                           int history_len, const PretrainConfig& config, std::uint64_t seed,
                           AdamState* adam = nullptr, int* steps_out = nullptr,
                           double* last_loss_out = nullptr);

// One contrastive grad evaluation on a 2B-row pair batch (used by the
// federated loops, which manage their own batching and optimizer state).
double contrastive_grad(const Model& encoder_head, const ParamVector& params,
                        const Matrix& pair_batch, double tau, bool printed_denominator,
                        ParamVector& grad_out);

}  // namespace hexfed
