#include "paln/toy_encoder.hpp"

#include <cmath>
#include <memory>

namespace paln {

namespace {

constexpr double kLayerNormEps = 1e-6;
const double kGeluC = std::sqrt(2.0 / 3.14159265358979323846);

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  return m;
}

struct LayerNormOut {
  Matrix y;
  Vector inv_sigma;
};

LayerNormOut layer_norm(const Matrix& x) {
  LayerNormOut out;
  const Vector mean = x.rowwise().mean();
  out.y = x.colwise() - mean;
  const Vector var = out.y.rowwise().squaredNorm() / static_cast<double>(x.cols());
  out.inv_sigma = (var.array() + kLayerNormEps).rsqrt();
  out.y = out.inv_sigma.asDiagonal() * out.y;
  return out;
}

Matrix layer_norm_backward(const LayerNormOut& ln, const Matrix& dy) {
  const double n = static_cast<double>(dy.cols());
  const Vector mean_dy = dy.rowwise().sum() / n;
  const Vector mean_dy_y = dy.cwiseProduct(ln.y).rowwise().sum() / n;
  Matrix dx = dy.colwise() - mean_dy;
  dx -= mean_dy_y.asDiagonal() * ln.y;
  return ln.inv_sigma.asDiagonal() * dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

void softmax_rows(Matrix& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    auto row = s.row(i);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

// Input to a LoRA branch after (optional) dropout.
struct LoraBranch {
  Matrix input;   // dropped-out copy of the layer input
  Matrix mask;    // 0 or 1/(1-p) per entry; empty when dropout is off
  Matrix hidden;  // input * A^T
};

LoraBranch lora_branch(const Matrix& x, const LoraAdapter& ad, Rng* rng) {
  LoraBranch br;
  if (rng != nullptr && ad.dropout > 0.0) {
    std::bernoulli_distribution keep(1.0 - ad.dropout);
    br.mask.resize(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      for (Eigen::Index i = 0; i < x.rows(); ++i) br.mask(i, j) = keep(*rng) ? 1.0 / (1.0 - ad.dropout) : 0.0;
    br.input = x.cwiseProduct(br.mask);
  } else {
    br.input = x;
  }
  br.hidden = br.input * ad.a.transpose();
  return br;
}

// Projection through a frozen weight plus its LoRA branch.
Matrix adapted_projection(const Matrix& x, const Matrix& w, const LoraAdapter& ad, const LoraBranch& br) {
  Matrix out = x * w.transpose();
  out.noalias() += ad.scale() * (br.hidden * ad.b.transpose());
  return out;
}

// Accumulates adapter grads for an adapted projection and returns d(input).
Matrix adapted_projection_backward(const Matrix& dout, const Matrix& w, const LoraAdapter& ad, const LoraBranch& br,
                                   AdapterGrad& grad) {
  const double s = ad.scale();
  const Matrix dhidden = dout * ad.b;  // T x r
  grad.b.noalias() += s * (dout.transpose() * br.hidden);
  grad.a.noalias() += s * (dhidden.transpose() * br.input);
  Matrix dbranch = s * (dhidden * ad.a);
  if (br.mask.size() > 0) dbranch = dbranch.cwiseProduct(br.mask);
  Matrix dx = dout * w;
  dx += dbranch;
  return dx;
}

struct LayerCache {
  Matrix x_in;
  LayerNormOut ln1;
  LoraBranch q_branch, v_branch;
  Matrix q, k, v;
  std::vector<Matrix> probs;
  Matrix attn;
  Matrix x_mid;
  LayerNormOut ln2;
  Matrix z1;
  Matrix act;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  LayerNormOut final_ln;
};

Matrix embed(const ToyEncoderParams& p, const Matrix& input) {
  const auto cells = static_cast<Eigen::Index>(p.side) * p.side;
  if (input.rows() != cells || input.cols() != p.patch_dim())
    throw ShapeError("encoder input must be " + std::to_string(cells) + " x " + std::to_string(p.patch_dim()));
  Matrix x(1 + cells, p.dim());
  x.row(0) = p.cls_token.transpose();
  x.bottomRows(cells) = input * p.patch_embed.transpose();
  x += p.pos_embed;
  return x;
}

ForwardCache forward(const ToyEncoderParams& p, const Matrix& input, Rng* rng) {
  ForwardCache cache;
  Matrix x = embed(p, input);
  const int dh = p.dim() / p.heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  cache.layers.reserve(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& w = p.layers[l];
    const auto& qa = p.adapters[2 * l].adapter;
    const auto& va = p.adapters[2 * l + 1].adapter;
    LayerCache c;
    c.x_in = x;
    c.ln1 = layer_norm(x);
    c.q_branch = lora_branch(c.ln1.y, qa, rng);
    c.v_branch = lora_branch(c.ln1.y, va, rng);
    c.q = adapted_projection(c.ln1.y, w.wq, qa, c.q_branch);
    c.k = c.ln1.y * w.wk.transpose();
    c.v = adapted_projection(c.ln1.y, w.wv, va, c.v_branch);
    c.attn.resize(x.rows(), x.cols());
    for (int h = 0; h < p.heads; ++h) {
      Matrix scores = att_scale * (c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose());
      softmax_rows(scores);
      c.attn.middleCols(h * dh, dh) = scores * c.v.middleCols(h * dh, dh);
      c.probs.push_back(std::move(scores));
    }
    c.x_mid = x + c.attn * w.wo.transpose();
    c.ln2 = layer_norm(c.x_mid);
    c.z1 = (c.ln2.y * w.w1.transpose()).rowwise() + w.b1.transpose();
    c.act = c.z1.unaryExpr([](double v) { return gelu(v); });
    Matrix mlp_out = c.act * w.w2.transpose();
    mlp_out.rowwise() += w.b2.transpose();
    x = c.x_mid + mlp_out;
    cache.layers.push_back(std::move(c));
  }
  cache.final_ln = layer_norm(x);
  return cache;
}

FeatureBundle bundle_from(const ToyEncoderParams& p, const Matrix& tokens) {
  FeatureBundle b;
  b.side = static_cast<std::uint32_t>(p.side);
  b.cls = tokens.row(0).transpose();
  b.patch = tokens.bottomRows(tokens.rows() - 1);
  return b;
}

void backward(const ToyEncoderParams& p, const ForwardCache& cache, const FeatureBundle& cot, GradSet& grads) {
  Matrix dy(cache.final_ln.y.rows(), cache.final_ln.y.cols());
  dy.row(0) = cot.cls.transpose();
  dy.bottomRows(dy.rows() - 1) = cot.patch;
  Matrix dx = layer_norm_backward(cache.final_ln, dy);

  const int dh = p.dim() / p.heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& w = p.layers[li];
    const auto& c = cache.layers[li];

    // MLP block.
    const Matrix dact = dx * w.w2;
    const Matrix dz1 = dact.cwiseProduct(c.z1.unaryExpr([](double v) { return gelu_grad(v); }));
    Matrix dx_mid = dx + layer_norm_backward(c.ln2, dz1 * w.w1);

    // Attention block.
    const Matrix dattn = dx_mid * w.wo;
    Matrix dq(c.q.rows(), c.q.cols()), dk(c.k.rows(), c.k.cols()), dv(c.v.rows(), c.v.cols());
    for (int h = 0; h < p.heads; ++h) {
      const auto& prob = c.probs[static_cast<std::size_t>(h)];
      const Matrix d_out = dattn.middleCols(h * dh, dh);
      const Matrix dprob = d_out * c.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh) = prob.transpose() * d_out;
      const Vector row_dot = dprob.cwiseProduct(prob).rowwise().sum();
      const Matrix dscores = att_scale * prob.cwiseProduct(dprob.colwise() - row_dot);
      dq.middleCols(h * dh, dh) = dscores * c.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh) = dscores.transpose() * c.q.middleCols(h * dh, dh);
    }
    Matrix dln1 = dk * w.wk;
    dln1 += adapted_projection_backward(dq, w.wq, p.adapters[2 * li].adapter, c.q_branch, grads[2 * li]);
    dln1 += adapted_projection_backward(dv, w.wv, p.adapters[2 * li + 1].adapter, c.v_branch, grads[2 * li + 1]);
    dx = dx_mid + layer_norm_backward(c.ln1, dln1);
  }
}

}  // namespace

void ToyEncoderParams::validate() const {
  const auto d = cls_token.size();
  if (d < 1 || heads < 1 || d % heads != 0) throw ShapeError("encoder dim must be a positive multiple of heads");
  if (patch_embed.rows() != d) throw ShapeError("patch_embed must have d rows");
  if (pos_embed.rows() != 1 + static_cast<Eigen::Index>(side) * side || pos_embed.cols() != d)
    throw ShapeError("pos_embed must be (1 + s*s) x d");
  if (adapters.size() != 2 * layers.size()) throw ShapeError("encoder needs one q and one v adapter per layer");
  for (const auto& l : layers) {
    if (l.wq.rows() != d || l.wq.cols() != d || l.wk.rows() != d || l.wk.cols() != d || l.wv.rows() != d ||
        l.wv.cols() != d || l.wo.rows() != d || l.wo.cols() != d)
      throw ShapeError("attention weights must be d x d");
    if (l.w1.cols() != d || l.w2.rows() != d || l.w2.cols() != l.w1.rows() || l.b1.size() != l.w1.rows() ||
        l.b2.size() != d)
      throw ShapeError("MLP weights are inconsistent");
  }
  for (const auto& na : adapters) {
    na.adapter.validate();
    if (na.adapter.a.cols() != d || na.adapter.b.rows() != d) throw ShapeError("adapter " + na.name + " is not d x d");
  }
}

ToyEncoderParams init_toy_encoder(const ToyEncoderConfig& cfg, std::uint64_t seed) {
  auto rng = make_rng(seed, 0x746f79ULL);
  const Eigen::Index d = cfg.dim;
  const double wstd = 1.0 / std::sqrt(static_cast<double>(d));
  ToyEncoderParams p;
  p.side = cfg.side;
  p.heads = cfg.heads;
  p.patch_embed = gaussian(d, cfg.patch_dim, 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim)), rng);
  p.cls_token = gaussian(d, 1, 1.0, rng);
  p.pos_embed = gaussian(1 + static_cast<Eigen::Index>(cfg.side) * cfg.side, d, 0.5, rng);
  for (int l = 0; l < cfg.layers; ++l) {
    EncoderLayer layer;
    layer.wq = gaussian(d, d, wstd, rng);
    layer.wk = gaussian(d, d, wstd, rng);
    layer.wv = gaussian(d, d, wstd, rng);
    layer.wo = gaussian(d, d, wstd, rng);
    layer.w1 = gaussian(cfg.mlp_hidden, d, wstd, rng);
    layer.b1 = gaussian(cfg.mlp_hidden, 1, 0.1, rng);
    layer.w2 = gaussian(d, cfg.mlp_hidden, 1.0 / std::sqrt(static_cast<double>(cfg.mlp_hidden)), rng);
    layer.b2 = gaussian(d, 1, 0.1, rng);
    p.layers.push_back(std::move(layer));
    const auto prefix = "layer" + std::to_string(l);
    p.adapters.push_back(
        {prefix + ".q", LoraAdapter::init(d, d, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout, rng)});
    p.adapters.push_back(
        {prefix + ".v", LoraAdapter::init(d, d, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout, rng)});
  }
  p.validate();
  return p;
}

FeatureBundle encode(const ToyEncoderParams& params, const Matrix& input) {
  return bundle_from(params, forward(params, input, nullptr).final_ln.y);
}

Traced encode_traced(const ToyEncoderParams& params, const Matrix& input, Rng* dropout_rng) {
  auto cache = std::make_shared<ForwardCache>(forward(params, input, dropout_rng));
  Traced t;
  t.features = bundle_from(params, cache->final_ln.y);
  t.pullback = [&params, cache](const FeatureBundle& cot, GradSet& grads) { backward(params, *cache, cot, grads); };
  return t;
}

EncoderBackbone::EncoderBackbone(ToyEncoderParams params, const EmbeddingStore& inputs)
    : params_(std::move(params)), inputs_(&inputs) {
  params_.validate();
  if (inputs.patch_side() != static_cast<std::uint32_t>(params_.side) ||
      inputs.dim() != static_cast<std::uint32_t>(params_.patch_dim()))
    throw ShapeError("input store (d, s) must match the encoder's (patch_dim, side)");
}

FeatureBundle EncoderBackbone::extract(const std::string& id) const {
  return encode(params_, inputs_->at(id).patch.cast<double>());
}

Traced EncoderBackbone::trace(const std::string& id, Rng* dropout_rng) const {
  return encode_traced(params_, inputs_->at(id).patch.cast<double>(), dropout_rng);
}

}  // namespace paln
