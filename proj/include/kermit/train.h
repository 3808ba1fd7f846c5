#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "kermit/config.h"
#include "kermit/model.h"
#include "kermit/synth.h"
#include "kermit/tape.h"

namespace kermit {

struct TrainSpec {
  std::size_t epochs = 50;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  double lambda = 0.5;  // weight of the CTC term
  double clip_norm = 1.0;
  double warmup_fraction = 0.1;
  std::string optimizer = "adam";  // "adam" or "sgd"
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_epsilon = 1e-9;
  std::uint64_t seed = 1;
  std::string checkpoint_path;  // written after training, or on divergence

  void validate() const;
};

TrainSpec train_spec_from(const KeyValues& kv, TrainSpec base = {});

struct JointLoss {
  Var total;
  double ctc_nll = 0.0;
  double insertion = 0.0;
  bool ctc_feasible = true;
};

// lambda * (-log p_ctc(ref | frames, hypothesis)) + (1 - lambda) * insertion
// loss, with the hypothesis and slot targets taken from BBT level `level`
// of the reference. An infeasible CTC target contributes nothing.
JointLoss joint_loss(Tape& tape, const Model& model, const FeatureSequence& x,
                     const std::vector<int>& reference, std::size_t level, double lambda);

struct TrainReport {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_ctc;
  std::vector<double> epoch_insertion;
  std::size_t steps = 0;
  std::size_t skipped_ctc = 0;  // utterances whose CTC target was infeasible
};

using EpochCallback = std::function<void(std::size_t epoch, const TrainReport&)>;

// Minibatch SGD (or Adam) with global-norm clipping and linear warmup. Throws
// NumericError on a non-finite loss after restoring (and, if a checkpoint
// path is set, writing) the parameters of the last completed epoch.
TrainReport train(Model& model, const std::vector<Utterance>& data, const TrainSpec& spec,
                  const EpochCallback& on_epoch = {});

}  // namespace kermit
