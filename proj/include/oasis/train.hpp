#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "oasis/common.hpp"
#include "oasis/synth.hpp"

namespace oasis {

enum class Pooling : std::uint32_t { mean = 0, last = 1 };

/// Reference encoder: hashed token buckets -> embedding rows -> pooled ->
/// linear projection -> L2 normalisation.
struct EncoderModel {
  int hash_dim = 4096;
  int embed_dim = 64;
  Pooling pooling = Pooling::mean;
  Mat table;       // hash_dim x embed_dim
  Mat projection;  // embed_dim x embed_dim

  /// Table entries ~ N(0, 1/embed_dim), projection = identity.
  static EncoderModel initialise(int hash_dim, int embed_dim, Pooling pooling, std::uint64_t seed);

  /// Throws Error("empty_token_stream") when the text has no tokens.
  Vec encode(std::string_view text) const;

  bool operator==(const EncoderModel& o) const;
};

/// Forward state kept for backpropagation.
struct Encoded {
  std::vector<int> buckets;
  Vec pooled;
  Vec z;       // projection * pooled
  double norm = 0;
  Vec v;       // z / norm
};

std::vector<int> token_buckets(std::string_view text, int hash_dim);
Encoded encode_with_state(const EncoderModel& model, std::string_view text);

struct ModelGrad {
  Mat table;
  Mat projection;
  static ModelGrad zeros_like(const EncoderModel& m);
};

/// Accumulates dL/dparams into `grad` given dL/dv for one encoded text.
void backprop_encoding(const EncoderModel& model, const Encoded& enc, const Vec& dv, ModelGrad& grad);

enum class Optimizer { adam, sgd };

struct TrainConfig {
  double tau = 0.05;
  double w1 = 0.98;
  double w2 = 0.02;
  double lr = 5e-4;
  int batch_groups = 8;
  int K = 5;
  double delta_s = 0.1;
  int epochs = 1;
  std::uint64_t seed = 0;
  Optimizer optimizer = Optimizer::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;  // throws Error("invalid_config")
};

/// One training batch: m groups, each one query and its records.
/// Embeddings are rows: q is m x d (one per group), c is N x d (one per
/// record). Both are expected to be unit rows; cosines are dot products.
struct Batch {
  std::vector<std::string> groups;
  std::vector<PairRecord> records;
  std::vector<int> group_of;      // record -> group row
  std::vector<int> positive;      // group row -> record
  std::vector<std::string> query_text;  // per group
  std::vector<std::string> code_text;   // per record
  Mat q;
  Mat c;

  std::size_t m() const noexcept { return groups.size(); }
  std::size_t n() const noexcept { return records.size(); }
  std::vector<double> labels() const;
};

/// Builds a batch from whole groups (contiguous records sharing group_id).
/// Throws Error("invalid_batch") when a group lacks exactly one positive
/// and Error("missing_text") when a text is unavailable.
Batch assemble_batch(const std::vector<PairRecord>& records, const TextSources& texts);

struct LossGrad {
  double value = 0;
  Mat dq;  // dL/dq
  Mat dc;  // dL/dc
};

/// Mean over groups of -log softmax of the positive among all in-batch
/// codes, logits cos/tau. Throws Error("no_positives") when m = 0.
LossGrad loss_infonce(const Batch& b, double tau);

/// log(1 + sum over record pairs (a, b) with label_a > label_b of
/// exp((cos_b - cos_a) / tau)); cos_r pairs record r with its own query.
LossGrad loss_cosent(const Batch& b, double tau);

struct HybridLoss {
  double ibn = 0;
  double cos = 0;
  LossGrad total;  // w1 * ibn + w2 * cos
};

HybridLoss loss_hybrid(const Batch& b, const TrainConfig& cfg);

/// Encodes every text of the batch with `model` into b.q / b.c and returns
/// the per-text forward states (queries first, then codes).
std::vector<Encoded> embed_batch(const EncoderModel& model, Batch& b);

/// Loss of the batch under `model`; when `grad` is set, the gradient of
/// w_ibn * L_ibn + w_cos * L_cos with respect to the model is added to it.
HybridLoss model_loss(const EncoderModel& model, Batch& b, const TrainConfig& cfg,
                      ModelGrad* grad = nullptr, double w_ibn = -1, double w_cos = -1);

struct GradCheckOptions {
  double h = 1e-5;
  std::size_t max_coords = 2000;  // check all active coordinates up to this many, else sample
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double infonce = 0;  // max relative error per objective
  double cosent = 0;
  double hybrid = 0;
  std::size_t coords = 0;
};

/// Central finite differences against analytic gradients over the
/// parameters the batch touches (projection plus the table rows of its
/// tokens). Relative error uses max(|analytic|, 1e-8) as denominator.
/// Throws Error("nonfinite") on a non-finite loss.
GradCheckReport grad_check(const EncoderModel& model, const Batch& batch, const TrainConfig& cfg,
                           const GradCheckOptions& options = {});

struct LossRow {
  int step = 0;
  double l_ibn = 0;
  double l_cos = 0;
  double l = 0;
};

struct TrainResult {
  EncoderModel model;
  std::vector<LossRow> curve;
};

/// Adam / SGD state for the two parameter blocks.
class OptimizerState {
 public:
  explicit OptimizerState(const EncoderModel& model);
  void step(EncoderModel& model, const ModelGrad& grad, const TrainConfig& cfg);
  int steps() const noexcept { return t_; }

 private:
  ModelGrad m_, v_;
  int t_ = 0;
};

/// Shuffles groups with cfg.seed each epoch, forms batches of
/// cfg.batch_groups groups, steps the optimizer once per batch. Groups that
/// cannot be batched (missing text, no tokens, not exactly one positive)
/// are skipped and logged. Throws Error("nonfinite") if a loss diverges.
TrainResult train(const std::vector<PairRecord>& records, const TextSources& texts,
                  EncoderModel model, const TrainConfig& cfg);

std::string loss_curve_csv(const std::vector<LossRow>& curve);

/// Little-endian binary: "OASISCK1", u32 hash_dim, u32 embed_dim,
/// u32 pooling, then table and projection as row-major f64.
void save_checkpoint(const EncoderModel& model, const std::filesystem::path& path);
EncoderModel load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_bytes(const EncoderModel& model);
EncoderModel checkpoint_from_bytes(std::string_view bytes);

}  // namespace oasis
