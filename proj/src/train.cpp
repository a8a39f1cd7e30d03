#include "oasis/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include <spdlog/spdlog.h>

namespace oasis {

// ---- encoder ----

EncoderModel EncoderModel::initialise(int hash_dim, int embed_dim, Pooling pooling, std::uint64_t seed) {
  if (hash_dim < 1 || embed_dim < 1) throw Error("invalid_config", "model dimensions must be positive");
  EncoderModel m;
  m.hash_dim = hash_dim;
  m.embed_dim = embed_dim;
  m.pooling = pooling;
  m.table.resize(hash_dim, embed_dim);
  std::mt19937_64 rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(embed_dim));
  // Box-Muller on our own uniform draws keeps the stream library-independent.
  for (Eigen::Index i = 0; i < m.table.size(); i += 2) {
    const double u1 = 1.0 - uniform_unit(rng), u2 = uniform_unit(rng);
    const double r = std::sqrt(-2.0 * std::log(u1));
    m.table.data()[i] = scale * r * std::cos(2 * M_PI * u2);
    if (i + 1 < m.table.size()) m.table.data()[i + 1] = scale * r * std::sin(2 * M_PI * u2);
  }
  m.projection = Mat::Identity(embed_dim, embed_dim);
  return m;
}

bool EncoderModel::operator==(const EncoderModel& o) const {
  return hash_dim == o.hash_dim && embed_dim == o.embed_dim && pooling == o.pooling &&
         table == o.table && projection == o.projection;
}

std::vector<int> token_buckets(std::string_view text, int hash_dim) {
  std::vector<int> out;
  for (const auto& tok : alnum_tokens(text))
    out.push_back(static_cast<int>(fnv1a64(tok) % static_cast<std::uint64_t>(hash_dim)));
  return out;
}

Encoded encode_with_state(const EncoderModel& model, std::string_view text) {
  Encoded e;
  e.buckets = token_buckets(text, model.hash_dim);
  if (e.buckets.empty()) throw Error("empty_token_stream", "text has no tokens");
  if (model.pooling == Pooling::mean) {
    e.pooled = Vec::Zero(model.embed_dim);
    for (int b : e.buckets) e.pooled += model.table.row(b).transpose();
    e.pooled /= static_cast<double>(e.buckets.size());
  } else {
    e.pooled = model.table.row(e.buckets.back()).transpose();
  }
  e.z = model.projection * e.pooled;
  e.norm = e.z.norm();
  if (!(e.norm > 0) || !std::isfinite(e.norm)) throw Error("nonfinite", "degenerate text embedding");
  e.v = e.z / e.norm;
  return e;
}

Vec EncoderModel::encode(std::string_view text) const { return encode_with_state(*this, text).v; }

ModelGrad ModelGrad::zeros_like(const EncoderModel& m) {
  return {Mat::Zero(m.hash_dim, m.embed_dim), Mat::Zero(m.embed_dim, m.embed_dim)};
}

void backprop_encoding(const EncoderModel& model, const Encoded& enc, const Vec& dv, ModelGrad& grad) {
  const Vec dz = (dv - enc.v * enc.v.dot(dv)) / enc.norm;
  grad.projection.noalias() += dz * enc.pooled.transpose();
  const Vec dp = model.projection.transpose() * dz;
  if (model.pooling == Pooling::mean) {
    const double inv = 1.0 / static_cast<double>(enc.buckets.size());
    for (int b : enc.buckets) grad.table.row(b) += inv * dp.transpose();
  } else {
    grad.table.row(enc.buckets.back()) += dp.transpose();
  }
}

void TrainConfig::validate() const {
  if (!(tau > 0)) throw Error("invalid_config", "tau must be positive");
  if (w1 < 0 || w2 < 0) throw Error("invalid_config", "loss weights must be non-negative");
  if (batch_groups < 1) throw Error("invalid_config", "batch_groups must be >= 1");
  if (lr < 0) throw Error("invalid_config", "lr must be non-negative");
  if (epochs < 0) throw Error("invalid_config", "epochs must be non-negative");
  if (K < 1) throw Error("invalid_config", "K must be >= 1");
}

// ---- batches and losses ----

std::vector<double> Batch::labels() const {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.sim_train);
  return out;
}

Batch assemble_batch(const std::vector<PairRecord>& records, const TextSources& texts) {
  Batch b;
  b.records = records;
  for (auto [lo, hi] : group_ranges(records)) {
    const int g = static_cast<int>(b.groups.size());
    b.groups.push_back(records[lo].group_id);
    auto q = texts.query_text.find(records[lo].query_id);
    if (q == texts.query_text.end()) throw Error("missing_text", records[lo].query_id);
    b.query_text.push_back(q->second);
    int pos = -1;
    for (auto i = lo; i < hi; ++i) {
      b.group_of.push_back(g);
      if (records[i].role == Role::positive) {
        if (pos >= 0) throw Error("invalid_batch", records[i].group_id + " has several positives");
        pos = static_cast<int>(i);
      }
      auto u = texts.units.find(records[i].code_id);
      if (u == texts.units.end()) throw Error("missing_text", records[i].code_id);
      b.code_text.push_back(u->second->source);
    }
    if (pos < 0) throw Error("invalid_batch", records[lo].group_id + " has no positive");
    b.positive.push_back(pos);
  }
  return b;
}

LossGrad loss_infonce(const Batch& b, double tau) {
  const auto m = static_cast<Eigen::Index>(b.m());
  if (m == 0) throw Error("no_positives", "batch has no groups");
  const Mat S = (b.q * b.c.transpose()) / tau;  // m x N logits
  Mat A(S.rows(), S.cols());
  double loss = 0;
  for (Eigen::Index g = 0; g < m; ++g) {
    const double mx = S.row(g).maxCoeff();
    const Eigen::RowVectorXd e = (S.row(g).array() - mx).exp().matrix();
    const double z = e.sum();
    const auto p = b.positive[static_cast<std::size_t>(g)];
    loss += mx + std::log(z) - S(g, p);
    A.row(g) = e / z;
    A(g, p) -= 1.0;
  }
  A /= static_cast<double>(m);
  return {loss / static_cast<double>(m), A * b.c / tau, A.transpose() * b.q / tau};
}

LossGrad loss_cosent(const Batch& b, double tau) {
  const std::size_t n = b.n();
  LossGrad out{0.0, Mat::Zero(b.q.rows(), b.q.cols()), Mat::Zero(b.c.rows(), b.c.cols())};
  if (n == 0) return out;
  Vec cos(static_cast<Eigen::Index>(n));
  for (std::size_t r = 0; r < n; ++r)
    cos[static_cast<Eigen::Index>(r)] = b.q.row(b.group_of[r]).dot(b.c.row(static_cast<Eigen::Index>(r)));
  const auto label = b.labels();

  double mx = 0;
  bool any = false;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t c = 0; c < n; ++c)
      if (label[a] > label[c]) {
        mx = std::max(mx, (cos[static_cast<Eigen::Index>(c)] - cos[static_cast<Eigen::Index>(a)]) / tau);
        any = true;
      }
  if (!any) return out;

  double sum = std::exp(-mx);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t c = 0; c < n; ++c)
      if (label[a] > label[c])
        sum += std::exp((cos[static_cast<Eigen::Index>(c)] - cos[static_cast<Eigen::Index>(a)]) / tau - mx);
  out.value = mx + std::log(sum);

  Vec dcos = Vec::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t c = 0; c < n; ++c)
      if (label[a] > label[c]) {
        const auto ia = static_cast<Eigen::Index>(a), ic = static_cast<Eigen::Index>(c);
        const double w = std::exp((cos[ic] - cos[ia]) / tau - out.value) / tau;
        dcos[ia] -= w;
        dcos[ic] += w;
      }
  for (std::size_t r = 0; r < n; ++r) {
    const auto ir = static_cast<Eigen::Index>(r);
    out.dq.row(b.group_of[r]) += dcos[ir] * b.c.row(ir);
    out.dc.row(ir) += dcos[ir] * b.q.row(b.group_of[r]);
  }
  return out;
}

HybridLoss loss_hybrid(const Batch& b, const TrainConfig& cfg) {
  const auto ibn = loss_infonce(b, cfg.tau);
  const auto cs = loss_cosent(b, cfg.tau);
  HybridLoss h;
  h.ibn = ibn.value;
  h.cos = cs.value;
  h.total.value = cfg.w1 * ibn.value + cfg.w2 * cs.value;
  h.total.dq = cfg.w1 * ibn.dq + cfg.w2 * cs.dq;
  h.total.dc = cfg.w1 * ibn.dc + cfg.w2 * cs.dc;
  return h;
}

std::vector<Encoded> embed_batch(const EncoderModel& model, Batch& b) {
  std::vector<Encoded> enc;
  enc.reserve(b.m() + b.n());
  b.q.resize(static_cast<Eigen::Index>(b.m()), model.embed_dim);
  b.c.resize(static_cast<Eigen::Index>(b.n()), model.embed_dim);
  for (std::size_t g = 0; g < b.m(); ++g) {
    enc.push_back(encode_with_state(model, b.query_text[g]));
    b.q.row(static_cast<Eigen::Index>(g)) = enc.back().v.transpose();
  }
  for (std::size_t r = 0; r < b.n(); ++r) {
    enc.push_back(encode_with_state(model, b.code_text[r]));
    b.c.row(static_cast<Eigen::Index>(r)) = enc.back().v.transpose();
  }
  return enc;
}

namespace {

void backprop_batch(const EncoderModel& model, const Batch& b, const std::vector<Encoded>& enc,
                    const Mat& dq, const Mat& dc, ModelGrad& grad) {
  for (std::size_t g = 0; g < b.m(); ++g)
    backprop_encoding(model, enc[g], dq.row(static_cast<Eigen::Index>(g)).transpose(), grad);
  for (std::size_t r = 0; r < b.n(); ++r)
    backprop_encoding(model, enc[b.m() + r], dc.row(static_cast<Eigen::Index>(r)).transpose(), grad);
}

}  // namespace

HybridLoss model_loss(const EncoderModel& model, Batch& b, const TrainConfig& cfg, ModelGrad* grad,
                      double w_ibn, double w_cos) {
  const auto enc = embed_batch(model, b);
  auto h = loss_hybrid(b, cfg);
  if (grad) {
    if (w_ibn < 0) w_ibn = cfg.w1;
    if (w_cos < 0) w_cos = cfg.w2;
    if (w_ibn == cfg.w1 && w_cos == cfg.w2) {
      backprop_batch(model, b, enc, h.total.dq, h.total.dc, *grad);
    } else {
      const auto ibn = loss_infonce(b, cfg.tau);
      const auto cs = loss_cosent(b, cfg.tau);
      backprop_batch(model, b, enc, w_ibn * ibn.dq + w_cos * cs.dq, w_ibn * ibn.dc + w_cos * cs.dc, *grad);
    }
  }
  return h;
}

// ---- gradient check ----

GradCheckReport grad_check(const EncoderModel& model, const Batch& batch, const TrainConfig& cfg,
                           const GradCheckOptions& opt) {
  if (!(opt.h > 0 && opt.h <= 1e-3)) throw Error("invalid_argument", "h must lie in (0, 1e-3]");
  if (opt.max_coords < 200) throw Error("invalid_argument", "at least 200 coordinates are checked");
  Batch b = batch;
  EncoderModel work = model;

  auto g_ibn = ModelGrad::zeros_like(model), g_cos = ModelGrad::zeros_like(model),
       g_hyb = ModelGrad::zeros_like(model);
  const auto base = model_loss(work, b, cfg, &g_ibn, 1.0, 0.0);
  model_loss(work, b, cfg, &g_cos, 0.0, 1.0);
  model_loss(work, b, cfg, &g_hyb);
  if (!std::isfinite(base.total.value)) throw Error("nonfinite", "loss is not finite");

  // (block, row, col): block 0 = table, 1 = projection
  struct Coord {
    int block, row, col;
  };
  std::vector<Coord> coords;
  std::set<int> rows;
  for (const auto& t : b.query_text)
    for (int k : token_buckets(t, model.hash_dim)) rows.insert(k);
  for (const auto& t : b.code_text)
    for (int k : token_buckets(t, model.hash_dim)) rows.insert(k);
  for (int r : rows)
    for (int c = 0; c < model.embed_dim; ++c) coords.push_back({0, r, c});
  for (int r = 0; r < model.embed_dim; ++r)
    for (int c = 0; c < model.embed_dim; ++c) coords.push_back({1, r, c});
  if (coords.size() > opt.max_coords) {
    std::mt19937_64 rng(opt.seed);
    for (std::size_t i = 0; i < opt.max_coords; ++i)
      std::swap(coords[i], coords[i + uniform_index(rng, coords.size() - i)]);
    coords.resize(opt.max_coords);
  }

  auto rel = [](double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(std::abs(analytic), 1e-8);
  };
  GradCheckReport rep;
  rep.coords = coords.size();
  for (const auto& k : coords) {
    double& p = k.block == 0 ? work.table(k.row, k.col) : work.projection(k.row, k.col);
    const double saved = p;
    p = saved + opt.h;
    const auto up = model_loss(work, b, cfg);
    p = saved - opt.h;
    const auto dn = model_loss(work, b, cfg);
    p = saved;
    if (!std::isfinite(up.total.value) || !std::isfinite(dn.total.value))
      throw Error("nonfinite", "loss is not finite under perturbation");
    const auto pick = [&](const ModelGrad& g) {
      return k.block == 0 ? g.table(k.row, k.col) : g.projection(k.row, k.col);
    };
    const double inv = 1.0 / (2 * opt.h);
    rep.infonce = std::max(rep.infonce, rel(pick(g_ibn), (up.ibn - dn.ibn) * inv));
    rep.cosent = std::max(rep.cosent, rel(pick(g_cos), (up.cos - dn.cos) * inv));
    rep.hybrid = std::max(rep.hybrid, rel(pick(g_hyb), (up.total.value - dn.total.value) * inv));
  }
  return rep;
}

// ---- optimisation ----

OptimizerState::OptimizerState(const EncoderModel& model)
    : m_(ModelGrad::zeros_like(model)), v_(ModelGrad::zeros_like(model)) {}

void OptimizerState::step(EncoderModel& model, const ModelGrad& grad, const TrainConfig& cfg) {
  ++t_;
  if (cfg.optimizer == Optimizer::sgd) {
    model.table -= cfg.lr * grad.table;
    model.projection -= cfg.lr * grad.projection;
    return;
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, t_);
  const double c2 = 1.0 - std::pow(cfg.beta2, t_);
  auto update = [&](Mat& p, const Mat& g, Mat& m, Mat& v) {
    m = cfg.beta1 * m + (1 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1 - cfg.beta2) * g.cwiseProduct(g);
    p.array() -= cfg.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.eps);
  };
  update(model.table, grad.table, m_.table, v_.table);
  update(model.projection, grad.projection, m_.projection, v_.projection);
}

TrainResult train(const std::vector<PairRecord>& records, const TextSources& texts, EncoderModel model,
                  const TrainConfig& cfg) {
  cfg.validate();
  // Keep only groups that form a valid single-group batch.
  std::vector<std::vector<PairRecord>> groups;
  for (auto [lo, hi] : group_ranges(records)) {
    std::vector<PairRecord> g(records.begin() + static_cast<std::ptrdiff_t>(lo),
                              records.begin() + static_cast<std::ptrdiff_t>(hi));
    try {
      Batch probe = assemble_batch(g, texts);
      embed_batch(model, probe);
    } catch (const Error& e) {
      spdlog::warn("{}: excluded from training ({})", g.front().group_id, e.what());
      continue;
    }
    groups.push_back(std::move(g));
  }

  TrainResult out{std::move(model), {}};
  OptimizerState opt(out.model);
  std::vector<std::size_t> order(groups.size());
  std::mt19937_64 rng(derive_seed(cfg.seed, "shuffle"));
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch_groups)) {
      std::vector<PairRecord> recs;
      const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(cfg.batch_groups));
      for (std::size_t k = s; k < e; ++k) recs.insert(recs.end(), groups[order[k]].begin(), groups[order[k]].end());
      Batch b = assemble_batch(recs, texts);
      auto grad = ModelGrad::zeros_like(out.model);
      const auto h = model_loss(out.model, b, cfg, &grad);
      ++step;
      if (!std::isfinite(h.total.value) || !grad.table.allFinite() || !grad.projection.allFinite()) {
        std::string ids;
        for (const auto& g : b.groups) ids += (ids.empty() ? "" : ", ") + g;
        spdlog::error("non-finite loss at step {} (epoch {}): L_ibn={} L_cos={} groups=[{}]", step, epoch,
                      h.ibn, h.cos, ids);
        throw Error("nonfinite", "training diverged at step " + std::to_string(step));
      }
      opt.step(out.model, grad, cfg);
      out.curve.push_back({step, h.ibn, h.cos, h.total.value});
    }
  }
  spdlog::info("trained {} steps over {} groups", step, groups.size());
  return out;
}

std::string loss_curve_csv(const std::vector<LossRow>& curve) {
  std::string out = "step,L_ibn,L_cos,L\n";
  for (const auto& r : curve) out += fmt::format("{},{:.17g},{:.17g},{:.17g}\n", r.step, r.l_ibn, r.l_cos, r.l);
  return out;
}

// ---- checkpoints ----

namespace {

constexpr std::string_view kMagic = "OASISCK1";

void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& s, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  std::string_view s;
  std::size_t at = 0;
  std::uint64_t take(int bytes) {
    if (at + static_cast<std::size_t>(bytes) > s.size()) throw Error("corrupt_checkpoint", "truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[at++])) << (8 * i);
    return v;
  }
};

}  // namespace

std::string checkpoint_bytes(const EncoderModel& m) {
  std::string s(kMagic);
  put_u32(s, static_cast<std::uint32_t>(m.hash_dim));
  put_u32(s, static_cast<std::uint32_t>(m.embed_dim));
  put_u32(s, static_cast<std::uint32_t>(m.pooling));
  for (Eigen::Index r = 0; r < m.table.rows(); ++r)
    for (Eigen::Index c = 0; c < m.table.cols(); ++c) put_f64(s, m.table(r, c));
  for (Eigen::Index r = 0; r < m.projection.rows(); ++r)
    for (Eigen::Index c = 0; c < m.projection.cols(); ++c) put_f64(s, m.projection(r, c));
  return s;
}

EncoderModel checkpoint_from_bytes(std::string_view bytes) {
  if (bytes.substr(0, kMagic.size()) != kMagic) throw Error("corrupt_checkpoint", "bad magic");
  Reader rd{bytes, kMagic.size()};
  EncoderModel m;
  m.hash_dim = static_cast<int>(rd.take(4));
  m.embed_dim = static_cast<int>(rd.take(4));
  const auto pool = rd.take(4);
  if (pool > 1 || m.hash_dim < 1 || m.embed_dim < 1) throw Error("corrupt_checkpoint", "bad header");
  m.pooling = static_cast<Pooling>(pool);
  const std::size_t expect = kMagic.size() + 12 +
                             8 * static_cast<std::size_t>(m.embed_dim) *
                                 (static_cast<std::size_t>(m.hash_dim) + static_cast<std::size_t>(m.embed_dim));
  if (bytes.size() != expect) throw Error("corrupt_checkpoint", "size does not match header");
  m.table.resize(m.hash_dim, m.embed_dim);
  m.projection.resize(m.embed_dim, m.embed_dim);
  for (Eigen::Index r = 0; r < m.table.rows(); ++r)
    for (Eigen::Index c = 0; c < m.table.cols(); ++c) m.table(r, c) = std::bit_cast<double>(rd.take(8));
  for (Eigen::Index r = 0; r < m.projection.rows(); ++r)
    for (Eigen::Index c = 0; c < m.projection.cols(); ++c) m.projection(r, c) = std::bit_cast<double>(rd.take(8));
  return m;
}

void save_checkpoint(const EncoderModel& model, const std::filesystem::path& path) {
  write_file_atomic(path, checkpoint_bytes(model));
}

EncoderModel load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_bytes(read_file(path)); }

}  // namespace oasis
