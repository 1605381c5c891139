#include "magnifier/losses.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <string>

#include "magnifier/errors.hpp"

namespace magnifier::losses {

void LossWeights::validate() const {
  if (!(gamma >= 0)) throw ConfigError("loss.gamma must be >= 0");
  if (!(lambda_mask >= 0)) throw ConfigError("loss.lambda_mask must be >= 0");
  if (!(sd_epsilon > 0)) throw ConfigError("loss.sd_epsilon must be > 0");
  if (!(margin >= 0)) throw ConfigError("loss.margin must be >= 0");
}

template <typename T>
NeckOutput<T> bnneck_cls(Var<T> embedding, const NeckVars<T>& neck,
                         std::span<const std::size_t> labels, BnMode mode) {
  if (!neck.stats) throw ContractError("bnneck_cls: missing batchnorm statistics");
  NeckOutput<T> out;
  out.feature = batchnorm(embedding, neck.bn_scale, neck.bn_shift, *neck.stats, mode,
                          static_cast<T>(kNeckMomentum), static_cast<T>(kNeckEps));
  out.logits = linear(out.feature, neck.classifier);
  if (!labels.empty()) {
    out.cls_loss = softmax_cross_entropy(out.logits, labels);
    out.has_loss = true;
  }
  return out;
}

template <typename T>
Var<T> batch_hard_triplet(Var<T> embeddings, std::span<const std::size_t> labels, T margin) {
  require_rank(embeddings.shape(), 2, "batch_hard_triplet embeddings");
  const std::size_t b = embeddings.shape()[0], d = embeddings.shape()[1];
  if (labels.size() != b)
    throw DimensionError("batch_hard_triplet: label count does not match batch axis 0");
  const T* e = embeddings.value().data().data();
  std::vector<T> dist(b * b, T{0});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = i + 1; j < b; ++j) {
      T s{0};
      for (std::size_t k = 0; k < d; ++k) {
        const T diff = e[i * d + k] - e[j * d + k];
        s += diff * diff;
      }
      dist[i * b + j] = dist[j * b + i] = std::sqrt(s);
    }

  struct Triplet {
    std::size_t anchor, pos, neg;
    bool active;
  };
  std::vector<Triplet> triplets;
  double kink = std::numeric_limits<double>::infinity();
  T loss{0};
  for (std::size_t a = 0; a < b; ++a) {
    std::size_t pos = b, neg = b;
    T pos_d{0}, neg_d{0}, pos_2nd = -1, neg_2nd = std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < b; ++j) {
      if (j == a) continue;
      const T dj = dist[a * b + j];
      if (labels[j] == labels[a]) {
        if (pos == b || dj > pos_d) {
          if (pos != b) pos_2nd = pos_d;
          pos = j;
          pos_d = dj;
        } else {
          pos_2nd = std::max(pos_2nd, dj);
        }
      } else {
        if (neg == b || dj < neg_d) {
          if (neg != b) neg_2nd = neg_d;
          neg = j;
          neg_d = dj;
        } else {
          neg_2nd = std::min(neg_2nd, dj);
        }
      }
    }
    if (pos == b || neg == b) continue;
    const T hinge = pos_d - neg_d + margin;
    triplets.push_back({a, pos, neg, hinge > T{0}});
    if (hinge > T{0}) loss += hinge;
    kink = std::min(kink, static_cast<double>(std::abs(hinge)));
    if (pos_2nd >= T{0}) kink = std::min(kink, static_cast<double>(pos_d - pos_2nd));
    if (std::isfinite(neg_2nd)) kink = std::min(kink, static_cast<double>(neg_2nd - neg_d));
  }
  if (triplets.empty())
    throw ContractError(
        "batch_hard_triplet: no anchor has both a positive and a negative in the batch");
  embeddings.tape->note_kink(kink);
  const auto count = static_cast<T>(triplets.size());
  loss /= count;

  return embeddings.tape->record(
      Tensor<T>::scalar(loss), {embeddings},
      [ie = embeddings.id, b, d, count, triplets = std::move(triplets),
       dist = std::move(dist)](Tape<T>& t, std::size_t self) {
        const T g = (*t.grad_of(self))[0] / count;
        const T* e = t.value(ie).data().data();
        T* de = t.grad_buffer(ie).data().data();
        auto pull = [&](std::size_t a, std::size_t o, T coef) {
          const T dd = dist[a * b + o];
          if (dd <= T{0}) return;
          for (std::size_t k = 0; k < d; ++k) {
            const T u = (e[a * d + k] - e[o * d + k]) / dd;
            de[a * d + k] += coef * u;
            de[o * d + k] -= coef * u;
          }
        };
        for (const auto& tr : triplets) {
          if (!tr.active) continue;
          pull(tr.anchor, tr.pos, g);
          pull(tr.anchor, tr.neg, -g);
        }
      });
}

template <typename T>
Var<T> sd_loss(std::span<const Var<T>> pooled, T epsilon) {
  const std::size_t k = pooled.size();
  if (k < 2) throw ContractError("sd_loss: needs at least two regions");
  if (!(epsilon > T{0})) throw ConfigError("sd_loss: epsilon must be positive");
  require_rank(pooled[0].shape(), 2, "sd_loss pooled");
  const Shape shape = pooled[0].shape();
  for (std::size_t i = 1; i < k; ++i) require_same_shape(pooled[i].shape(), shape, "sd_loss");
  const std::size_t n = shape[0], c = shape[1];
  const std::size_t pairs = k * (k - 1) / 2;
  const T norm = T{1} / static_cast<T>(n * pairs);

  std::vector<T> lens(k * n);
  for (std::size_t r = 0; r < k; ++r) {
    const T* p = pooled[r].value().data().data();
    for (std::size_t s = 0; s < n; ++s) {
      T acc{0};
      for (std::size_t q = 0; q < c; ++q) acc += p[s * c + q] * p[s * c + q];
      lens[r * n + s] = std::sqrt(acc);
    }
  }
  T total{0};
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t i = j + 1; i < k; ++i) {
        const T* a = pooled[i].value().data().data() + s * c;
        const T* bb = pooled[j].value().data().data() + s * c;
        T dotv{0};
        for (std::size_t q = 0; q < c; ++q) dotv += a[q] * bb[q];
        total += dotv / std::max(lens[i * n + s] * lens[j * n + s], epsilon);
      }

  std::vector<std::size_t> ids;
  for (const auto& p : pooled) ids.push_back(p.id);
  return pooled[0].tape->record(
      Tensor<T>::scalar(total * norm), pooled,
      [ids, n, c, k, norm, epsilon, lens = std::move(lens)](Tape<T>& t, std::size_t self) {
        const T g = (*t.grad_of(self))[0] * norm;
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t j = 0; j < k; ++j)
            for (std::size_t i = j + 1; i < k; ++i) {
              const T* a = t.value(ids[i]).data().data() + s * c;
              const T* bb = t.value(ids[j]).data().data() + s * c;
              const T la = lens[i * n + s], lb = lens[j * n + s];
              const T prod = la * lb;
              T dotv{0};
              for (std::size_t q = 0; q < c; ++q) dotv += a[q] * bb[q];
              // Above the floor: d cos/da = b/(|a||b|) - cos * a/|a|^2.
              // At the floor the denominator is the constant epsilon.
              const bool floored = !(prod > epsilon);
              const T denom = floored ? epsilon : prod;
              const T cosv = dotv / denom;
              if (t.requires_grad(ids[i])) {
                T* da = t.grad_buffer(ids[i]).data().data() + s * c;
                for (std::size_t q = 0; q < c; ++q)
                  da[q] += g * (bb[q] / denom - (floored ? T{0} : cosv * a[q] / (la * la)));
              }
              if (t.requires_grad(ids[j])) {
                T* db = t.grad_buffer(ids[j]).data().data() + s * c;
                for (std::size_t q = 0; q < c; ++q)
                  db[q] += g * (a[q] / denom - (floored ? T{0} : cosv * bb[q] / (lb * lb)));
              }
            }
      });
}

template <typename T>
TotalLoss<T> total_loss(Var<T> l_cls, Var<T> l_tri, Var<T> l_sd, Var<T> l_mask,
                        const LossWeights& weights) {
  weights.validate();
  const std::array<Var<T>, 4> terms{l_cls, l_tri, l_sd, l_mask};
  const std::array<const char*, 4> names{"l_cls", "l_tri", "l_sd", "l_mask"};
  for (std::size_t i = 0; i < 4; ++i) {
    const double v = static_cast<double>(terms[i].value().item());
    if (!std::isfinite(v))
      throw TrainingAbort(names[i], std::string("non-finite loss component ") + names[i]);
  }
  const std::array<T, 4> coef{T{1}, T{1}, static_cast<T>(weights.gamma),
                              static_cast<T>(weights.lambda_mask)};
  TotalLoss<T> out;
  out.total = weighted_sum<T>(terms, coef);
  out.report.l_cls = static_cast<double>(l_cls.value().item());
  out.report.l_tri = static_cast<double>(l_tri.value().item());
  out.report.l_sd = static_cast<double>(l_sd.value().item());
  out.report.l_mask = static_cast<double>(l_mask.value().item());
  out.report.l_total = static_cast<double>(out.total.value().item());
  if (!std::isfinite(out.report.l_total))
    throw TrainingAbort("l_total", "non-finite total loss");
  return out;
}

#define MAGNIFIER_INSTANTIATE_LOSSES(T)                                                      \
  template NeckOutput<T> bnneck_cls(Var<T>, const NeckVars<T>&, std::span<const std::size_t>, \
                                    BnMode);                                                 \
  template Var<T> batch_hard_triplet(Var<T>, std::span<const std::size_t>, T);               \
  template Var<T> sd_loss(std::span<const Var<T>>, T);                                       \
  template TotalLoss<T> total_loss(Var<T>, Var<T>, Var<T>, Var<T>, const LossWeights&);

MAGNIFIER_INSTANTIATE_LOSSES(float)
MAGNIFIER_INSTANTIATE_LOSSES(double)

}  // namespace magnifier::losses
