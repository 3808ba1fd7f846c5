#include "kermit/train.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kermit/ctc.h"
#include "kermit/encoder.h"
#include "kermit/errors.h"
#include "kermit/insertion.h"

namespace kermit {

void TrainSpec::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be at least 1");
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  if (!(clip_norm > 0.0)) throw ConfigError("clip norm must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) {
    throw ConfigError("warmup fraction must lie in [0, 1]");
  }
  if (optimizer != "sgd" && optimizer != "adam") {
    throw ConfigError("optimizer must be 'sgd' or 'adam', got '" + optimizer + "'");
  }
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0) ||
      !(adam_epsilon > 0.0)) {
    throw ConfigError("bad Adam hyperparameters");
  }
}

TrainSpec train_spec_from(const KeyValues& kv, TrainSpec s) {
  s.epochs = kv.get_size("epochs", s.epochs);
  s.batch_size = kv.get_size("batch_size", s.batch_size);
  s.learning_rate = kv.get_double("lr", s.learning_rate);
  s.lambda = kv.get_double("lambda", s.lambda);
  s.clip_norm = kv.get_double("clip", s.clip_norm);
  s.warmup_fraction = kv.get_double("warmup", s.warmup_fraction);
  s.optimizer = kv.get_string("optimizer", s.optimizer);
  s.adam_beta1 = kv.get_double("adam_beta1", s.adam_beta1);
  s.adam_beta2 = kv.get_double("adam_beta2", s.adam_beta2);
  s.adam_epsilon = kv.get_double("adam_epsilon", s.adam_epsilon);
  s.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<std::int64_t>(s.seed)));
  s.validate();
  return s;
}

JointLoss joint_loss(Tape& tape, const Model& model, const FeatureSequence& x,
                     const std::vector<int>& reference, std::size_t level, double lambda) {
  const Vocabulary& vocab = model.vocab();
  auto [hyp, targets] = bbt_partial(reference, level);
  Var x_emb = embed_audio(tape, model, x);
  Var c_emb = embed_tokens(tape, model, hyp.tokens);
  EncoderOutput out = forward_joint(tape, model, x_emb, c_emb);

  JointLoss loss;
  Var ins = insertion_loss(slot_posteriors(out.h_tok, tape.param(model.param("head.token")),
                                           tape.param(model.param("head.pos"))),
                           targets, vocab);
  loss.insertion = scalar(ins);
  loss.total = scale(ins, 1.0 - lambda);

  const std::vector<int> labels = vocab.to_classes(reference);
  if (!ctc_feasible(x_emb.rows(), labels)) {
    loss.ctc_feasible = false;
    return loss;
  }
  Var lp = ctc_log_prob(ctc_head(out.h_feat, tape.param(model.param("head.ctc"))), labels);
  loss.ctc_nll = -scalar(lp);
  loss.total = add(loss.total, scale(lp, -lambda));
  return loss;
}

namespace {

double global_norm(const ParamSet& params) {
  double s = 0.0;
  for (const auto& [_, p] : params)
    for (double g : p.gradient.values()) s += g * g;
  return std::sqrt(s);
}

}  // namespace

TrainReport train(Model& model, const std::vector<Utterance>& data, const TrainSpec& spec,
                  const EpochCallback& on_epoch) {
  spec.validate();
  if (data.empty()) throw ConfigError("train: empty dataset");
  ParamSet& params = model.params();
  Rng rng(spec.seed);
  TrainReport report;
  const std::size_t steps_per_epoch = (data.size() + spec.batch_size - 1) / spec.batch_size;
  const double warmup_steps =
      std::max(1.0, spec.warmup_fraction * static_cast<double>(steps_per_epoch * spec.epochs));
  NamedArrays last_good = param_values(params);
  const bool adam = spec.optimizer == "adam";
  NamedArrays first_moment, second_moment;
  if (adam) {
    for (const auto& [name, p] : params) {
      first_moment.emplace(name, Matrix(p.value.rows(), p.value.cols()));
      second_moment.emplace(name, Matrix(p.value.rows(), p.value.cols()));
    }
  }

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(0, i - 1)]);
    double sum_loss = 0.0, sum_ctc = 0.0, sum_ins = 0.0;
    std::size_t n_ctc = 0;
    for (std::size_t first = 0; first < order.size(); first += spec.batch_size) {
      const std::size_t last = std::min(order.size(), first + spec.batch_size);
      zero_grads(params);
      for (std::size_t i = first; i < last; ++i) {
        const Utterance& u = data[order[i]];
        const std::size_t level = rng.uniform_int(0, bbt_depth(u.tokens.size()));
        Tape tape;
        JointLoss jl = joint_loss(tape, model, u.features, u.tokens, level, spec.lambda);
        const double total = scalar(jl.total);
        if (!std::isfinite(total)) {
          for (auto& [name, m] : last_good) params.at(name).value = m;
          if (!spec.checkpoint_path.empty()) model.save(spec.checkpoint_path);
          throw NumericError("training diverged in epoch " + std::to_string(epoch + 1) +
                             " (loss " + format_double(total) + ")");
        }
        tape.backward(jl.total);
        tape.accumulate_param_grads(params);
        sum_loss += total;
        sum_ins += jl.insertion;
        if (jl.ctc_feasible) {
          sum_ctc += jl.ctc_nll;
          ++n_ctc;
        } else {
          ++report.skipped_ctc;
        }
      }
      const double inv_batch = 1.0 / static_cast<double>(last - first);
      for (auto& [_, p] : params)
        for (double& g : p.gradient.values()) g *= inv_batch;
      const double norm = global_norm(params);
      const double clip = norm > spec.clip_norm ? spec.clip_norm / norm : 1.0;
      const double lr = spec.learning_rate *
                        std::min(1.0, static_cast<double>(report.steps + 1) / warmup_steps);
      if (adam) {
        const double t = static_cast<double>(report.steps + 1);
        const double c1 = 1.0 - std::pow(spec.adam_beta1, t);
        const double c2 = 1.0 - std::pow(spec.adam_beta2, t);
        for (auto& [name, p] : params) {
          double* m = first_moment.at(name).data();
          double* v = second_moment.at(name).data();
          double* w = p.value.data();
          const double* g = p.gradient.data();
          for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double gi = g[i] * clip;
            m[i] = spec.adam_beta1 * m[i] + (1.0 - spec.adam_beta1) * gi;
            v[i] = spec.adam_beta2 * v[i] + (1.0 - spec.adam_beta2) * gi * gi;
            w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + spec.adam_epsilon);
          }
        }
      } else {
        for (auto& [_, p] : params) axpy(-lr * clip, p.gradient, p.value);
      }
      ++report.steps;
    }
    const double n = static_cast<double>(data.size());
    report.epoch_loss.push_back(sum_loss / n);
    report.epoch_insertion.push_back(sum_ins / n);
    report.epoch_ctc.push_back(n_ctc ? sum_ctc / static_cast<double>(n_ctc) : 0.0);
    last_good = param_values(params);
    if (on_epoch) on_epoch(epoch + 1, report);
  }
  zero_grads(params);
  if (!spec.checkpoint_path.empty()) model.save(spec.checkpoint_path);
  return report;
}

}  // namespace kermit
