#include "paln/alignment.hpp"

#include "paln/parallel.hpp"

#include <json.hpp>

#include <limits>
#include <numeric>
#include <optional>
#include <unordered_map>

namespace paln {

namespace {

void require_ids(const Backbone& backbone, const TripletManifest& manifest) {
  for (const auto& t : manifest.entries)
    for (const auto* id : {&t.ref, &t.x0, &t.x1})
      if (!backbone.has_id(*id)) throw UnknownId(*id);
}

std::vector<Matrix*> flatten(AdapterSet& adapters) {
  std::vector<Matrix*> out;
  for (auto& na : adapters) {
    out.push_back(&na.adapter.a);
    out.push_back(&na.adapter.b);
  }
  return out;
}

}  // namespace

void AlignmentConfig::validate() const {
  if (!(margin > 0.0)) throw InvalidArgument("margin must be > 0");
  if (!(lr > 0.0)) throw InvalidArgument("learning rate must be > 0");
  if (batch_size < 1) throw InvalidArgument("batch size must be >= 1");
}

CosineGrad cosine_distance_grad(const Vector& u, const Vector& v) {
  const double nu = u.norm();
  const double nv = v.norm();
  if (nu == 0.0 || nv == 0.0) throw DegenerateInput("cosine distance of a zero-norm vector");
  const double dot = u.dot(v);
  const double inv = 1.0 / (nu * nv);
  // d = 1 - dot / (|u||v|)
  CosineGrad g;
  g.du = -(v * inv - u * (dot * inv / (nu * nu)));
  g.dv = -(u * inv - v * (dot * inv / (nv * nv)));
  return g;
}

BatchResult batch_loss_and_grads(const Backbone& backbone, std::span<const Triplet> batch,
                                 const AlignmentConfig& config, Rng* dropout_rng) {
  config.validate();
  if (batch.empty()) throw InvalidArgument("empty batch");
  for (const auto& t : batch)
    for (const auto* id : {&t.ref, &t.x0, &t.x1})
      if (!backbone.has_id(*id)) throw UnknownId(*id);

  const std::size_t n = batch.size();
  const double weight = 1.0 / static_cast<double>(n);

  // Per-slot dropout streams keep results independent of the thread count.
  std::vector<std::optional<Rng>> slot_rng(n);
  if (dropout_rng != nullptr)
    for (auto& r : slot_rng) r.emplace((*dropout_rng)());

  std::vector<double> losses(n, 0.0);
  std::vector<std::optional<GradSet>> slot_grads(n);
  const auto mode = config.feature_mode;

  parallel_for(n, config.threads, [&](std::size_t i) {
    const auto& t = batch[i];
    Rng* rng = slot_rng[i] ? &*slot_rng[i] : nullptr;
    const Traced ref = backbone.trace(t.ref, rng);
    const Traced v0 = backbone.trace(t.x0, rng);
    const Traced v1 = backbone.trace(t.x1, rng);
    const Vector fr = assemble_features(ref.features, mode);
    const Vector f0 = assemble_features(v0.features, mode);
    const Vector f1 = assemble_features(v1.features, mode);
    const double d0 = cosine_distance(fr, f0);
    const double d1 = cosine_distance(fr, f1);
    losses[i] = alignment_loss(d0, d1, t.y, config.margin);
    if (losses[i] <= 0.0) return;

    // loss = m - (d0 - d1) * sign on the active side of the hinge.
    const double sign = judgment_sign(t.y);
    const auto g0 = cosine_distance_grad(fr, f0);
    const auto g1 = cosine_distance_grad(fr, f1);
    const Vector grad_ref = weight * sign * (g1.du - g0.du);
    const Vector grad_x0 = -weight * sign * g0.dv;
    const Vector grad_x1 = weight * sign * g1.dv;

    GradSet grads = zero_grads(backbone.adapters());
    ref.pullback(assemble_features_pullback(grad_ref, ref.features, mode), grads);
    v0.pullback(assemble_features_pullback(grad_x0, v0.features, mode), grads);
    v1.pullback(assemble_features_pullback(grad_x1, v1.features, mode), grads);
    slot_grads[i] = std::move(grads);
  });

  BatchResult out;
  out.grads = zero_grads(backbone.adapters());
  for (std::size_t i = 0; i < n; ++i) {
    out.loss += losses[i];
    if (!slot_grads[i]) continue;
    for (std::size_t k = 0; k < out.grads.size(); ++k) {
      out.grads[k].a += (*slot_grads[i])[k].a;
      out.grads[k].b += (*slot_grads[i])[k].b;
    }
  }
  out.loss *= weight;
  return out;
}

AdamState make_adam_state(AdapterSet& adapters) {
  const auto params = flatten(adapters);
  return make_adam_state(std::span<Matrix* const>(params));
}

void adam_step(AdapterSet& adapters, AdamState& state, const GradSet& grads, double lr, const AdamConfig& config) {
  if (grads.size() != adapters.size()) throw ShapeError("gradient set does not match adapters");
  const auto params = flatten(adapters);
  std::vector<const Matrix*> g;
  for (const auto& ag : grads) {
    g.push_back(&ag.a);
    g.push_back(&ag.b);
  }
  adam_update(params, g, state, lr, config);
}

TripletEval evaluate_triplets(const Backbone& backbone, const TripletManifest& manifest, FeatureMode mode,
                              double margin, unsigned threads) {
  if (manifest.empty()) throw InvalidArgument("cannot evaluate an empty manifest");
  require_ids(backbone, manifest);

  std::unordered_map<std::string, std::size_t> slot;
  std::vector<const std::string*> ids;
  for (const auto& t : manifest.entries)
    for (const auto* id : {&t.ref, &t.x0, &t.x1})
      if (slot.emplace(*id, ids.size()).second) ids.push_back(id);

  std::vector<Vector> features(ids.size());
  parallel_for(ids.size(), threads,
               [&](std::size_t i) { features[i] = assemble_features(backbone.extract(*ids[i]), mode); });

  TripletEval out;
  for (const auto& t : manifest.entries) {
    const auto& fr = features[slot.at(t.ref)];
    const double d0 = cosine_distance(fr, features[slot.at(t.x0)]);
    const double d1 = cosine_distance(fr, features[slot.at(t.x1)]);
    out.mean_loss += alignment_loss(d0, d1, t.y, margin);
    if (d0 == d1) out.two_afc += 0.5;
    else if ((d0 < d1) == (t.y == 0)) out.two_afc += 1.0;
  }
  const double n = static_cast<double>(manifest.size());
  out.mean_loss /= n;
  out.two_afc /= n;
  return out;
}

double two_afc_accuracy(const Backbone& backbone, const TripletManifest& manifest, FeatureMode mode,
                        unsigned threads) {
  return evaluate_triplets(backbone, manifest, mode, 1.0, threads).two_afc;
}

TrainResult train_alignment(Backbone& backbone, const TripletManifest& train, const TripletManifest& val,
                            const AlignmentConfig& config) {
  config.validate();
  if (train.empty() || val.empty()) throw InvalidArgument("training and validation manifests must be non-empty");
  require_ids(backbone, train);

  TrainResult result;
  const auto initial = evaluate_triplets(backbone, val, config.feature_mode, config.margin, config.threads);
  result.initial_val_loss = initial.mean_loss;
  result.initial_val_2afc = initial.two_afc;
  result.best = backbone.adapters();
  result.best_val_loss = std::numeric_limits<double>::infinity();

  const std::size_t n = train.size();
  const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t epochs =
      config.max_steps > 0 ? (config.max_steps + steps_per_epoch - 1) / steps_per_epoch : config.epochs;
  if (epochs == 0) {
    result.best_val_loss = initial.mean_loss;
    return result;
  }

  auto& adapters = backbone.adapters();
  auto state = make_adam_state(adapters);
  auto dropout_rng = make_rng(config.seed, 0x64726f70ULL);
  std::vector<std::size_t> order(n);
  std::vector<Triplet> batch;

  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    auto shuffle_rng = make_rng(config.seed, epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      if (config.max_steps > 0 && result.steps == config.max_steps) break;
      const std::size_t end = std::min(n, start + config.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(train.entries[order[i]]);
      const auto br = batch_loss_and_grads(backbone, batch, config, &dropout_rng);
      loss_sum += br.loss * static_cast<double>(batch.size());
      seen += batch.size();
      adam_step(adapters, state, br.grads, config.lr, config.adam);
      ++result.steps;
    }

    const auto ev = evaluate_triplets(backbone, val, config.feature_mode, config.margin, config.threads);
    result.history.push_back({epoch, loss_sum / static_cast<double>(seen), ev.mean_loss, ev.two_afc});
    if (ev.mean_loss < result.best_val_loss) {
      result.best_val_loss = ev.mean_loss;
      result.best_epoch = epoch;
      result.best = adapters;
    }
  }
  adapters = result.best;
  return result;
}

std::string history_to_jsonl(const std::vector<EpochRecord>& history) {
  std::string out;
  for (const auto& r : history) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["train_loss"] = r.train_loss;
    j["val_loss"] = r.val_loss;
    j["val_2afc"] = r.val_2afc;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace paln
