#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hexfed/common.hpp"

namespace hexfed {

// Row-major dense matrix of 64-bit reals.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

// Softmax over each row, shifted by the row max.
Matrix softmax_rows(const Matrix& logits);

double cosine(std::span<const double> u, std::span<const double> v);
// Returns nullopt instead of throwing when either vector has zero norm.
std::optional<double> try_cosine(std::span<const double> u, std::span<const double> v);

enum class LayerKind {
    Dense,          // in -> out, y = x W^T + b
    Relu,
    Conv1d,         // seq (L x in_ch) -> (L x out_ch), same padding
    SelfAttention,  // seq (L x ch) -> (L x ch), single head, full window
    LayerNorm,      // per-position normalization over channels
    MeanPool,       // seq (L x ch) -> ch
    ConcatTail,     // append the passthrough feature block to the activation
};

const char* layer_kind_name(LayerKind kind);

struct LayerDesc {
    LayerKind kind = LayerKind::Dense;
    int in = 0;      // Dense input width; Relu width
    int out = 0;     // Dense output width
    int length = 0;  // sequence layers: positions L
    int in_ch = 0;   // Conv1d input channels
    int out_ch = 0;  // Conv1d output channels; SelfAttention/LayerNorm/MeanPool channels
    int kernel = 0;  // Conv1d kernel size (odd)
};

// An ordered layer stack. When seq_len > 0 the first seq_len input columns
// form the temporal block fed to the sequence layers and the remaining
// tail_dim columns bypass until a ConcatTail layer splices them back in.
struct ModelSpec {
    std::vector<LayerDesc> layers;
    int input_dim = 0;
    int seq_len = 0;
    int tail_dim = 0;
    int output_dim = 0;
};

void validate(const ModelSpec& spec);
std::size_t param_count(const LayerDesc& layer);
std::size_t param_count(const ModelSpec& spec);
std::uint64_t spec_hash(const ModelSpec& spec);
// Appends a dense-only stack onto a base spec (base output feeds b's input).
ModelSpec concat_specs(const ModelSpec& base, const ModelSpec& top);

struct LayoutEntry {
    std::string name;
    std::size_t offset = 0;
    std::vector<std::size_t> shape;

    std::size_t size() const;
};

// Flat parameter vector plus the per-tensor layout that addresses into it.
struct ParamVector {
    std::vector<double> values;
    std::vector<LayoutEntry> layout;

    std::size_t size() const { return values.size(); }
    std::span<double> tensor(std::size_t layout_index);
    std::span<const double> tensor(std::size_t layout_index) const;
};

void validate(const ParamVector& params);
ParamVector zeros_like(const ParamVector& params);

// Element-wise helpers used by the federated aggregation paths.
void axpy(double a, const ParamVector& x, ParamVector& y);  // y += a*x
void scale(ParamVector& x, double a);
double l2_norm(const ParamVector& x);
double l2_distance(const ParamVector& a, const ParamVector& b);

struct Batch {
    Matrix inputs;  // B x input_dim
    Matrix labels;  // B x classes one-hot, or rows == 0 when unlabeled
};

// Per-layer tensors saved by forward for the backward pass.
struct ForwardCache {
    std::vector<std::vector<Matrix>> per_layer;
    Matrix tail;
    Matrix output;
};

class Model {
  public:
    explicit Model(ModelSpec spec);

    const ModelSpec& spec() const { return spec_; }
    std::size_t param_count() const { return total_params_; }

    // Fan-in scaled uniform initialization, deterministic per seed.
    ParamVector init(std::uint64_t seed) const;
    ParamVector make_layout() const;  // zero-valued vector with the layout

    // Forward pass; pass a cache to enable backward afterwards.
    Matrix forward(const ParamVector& params, const Matrix& batch, ForwardCache* cache = nullptr) const;

    // Accumulates parameter gradients for dLoss/dOutput into grad.
    void backward(const ParamVector& params, const ForwardCache& cache, const Matrix& d_output,
                  ParamVector& grad) const;

  private:
    ModelSpec spec_;
    std::vector<std::size_t> offsets_;  // flat offset of each layer's first parameter
    std::size_t total_params_ = 0;
};

// Cost-sensitive cross entropy: mean over the batch of
// -sum_x (1/w_x) p(x) log q(x), with q given as probabilities.
double loss_weighted_ce(const Matrix& probs, const Matrix& onehot,
                        const std::array<double, 3>& ratios);

// Same loss evaluated from logits, fused with softmax; also yields dLoss/dlogits.
struct LossGrad {
    double loss = 0.0;
    Matrix d_input;
};
LossGrad weighted_ce_from_logits(const Matrix& logits, const Matrix& onehot,
                                 const std::array<double, 3>& ratios);

struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t t = 0;
    std::vector<double> m;
    std::vector<double> v;
};

void sgd_step(ParamVector& params, const ParamVector& grad, double lr);
void adam_step(ParamVector& params, const ParamVector& grad, AdamState& state);

// Model presets. Defaults are desk-scale; the paper_scale flag widens the
// network to the published parameter budget.
struct EncoderPreset {
    int history_len = 24;
    int time_dim = 31;  // hour-of-day one-hot 24 + day-of-week one-hot 7
    int cell_dim = 2;
    int conv_channels = 8;
    int dense_hidden = 32;
    int repr_dim = 16;
    bool mlp_fallback = false;  // plain MLP encoder instead of conv+attention
    int mlp_hidden = 64;

    int input_dim() const { return history_len + time_dim + cell_dim; }
};

ModelSpec make_encoder_spec(const EncoderPreset& preset);
ModelSpec make_projection_head_spec(int repr_dim, int hidden = 64, int projection_dim = 32);
ModelSpec make_classifier_spec(int repr_dim, int hidden = 16, int classes = 3);
EncoderPreset paper_scale_preset();

// Versioned binary checkpoint: header with spec hash and layout, then raw
// little-endian doubles. Round-trips bit-exactly.
void save_checkpoint(const std::string& path, const ModelSpec& spec, const ParamVector& params);
ParamVector load_checkpoint(const std::string& path, const ModelSpec& expected_spec);

}  // namespace hexfed
