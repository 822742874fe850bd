#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "lmap/codec.hpp"
#include "lmap/nn.hpp"
#include "lmap/rng.hpp"
#include "lmap/trajectory.hpp"

namespace lmap {

// p(z | s) for an empty prefix, p(z' | z, s) for prefix [z]. States are in
// raw environment units; each model normalizes internally.
class PriorModel {
 public:
  virtual ~PriorModel() = default;
  virtual int codebook_size() const = 0;
  virtual int state_dim() const = 0;
  virtual Vec logits(std::span<const double> state, std::span<const int> prefix) const = 0;
  virtual void write(std::ostream& out) const = 0;
  void save(const std::filesystem::path& path) const;

 protected:
  void check_query(std::span<const double> state, std::span<const int> prefix) const;
};

struct SampleConfig {
  double temperature = 1.0;
  int top_k = 0;  // 0 means K
};

// softmax(logits / tau), summing to 1.
Vec softmax(std::span<const double> logits, double temperature = 1.0);
// Sampling distribution after top-k restriction (ties to the lower index).
Vec sample_probabilities(std::span<const double> logits, const SampleConfig& cfg);
int sample_code(std::span<const double> logits, const SampleConfig& cfg, Rng& rng);

// A chunk rendered as codes: the first token's state and its code prefix.
struct CodeSequence {
  Vec state;
  std::vector<int> codes;
};

std::vector<CodeSequence> encode_code_sequences(const Dataset& data, const CodecParams& codec);

class TabularPrior : public PriorModel {
 public:
  TabularPrior(int state_dim, int K, NormStats norm, double smoothing = 1.0, int bins = 8,
               double lo = -3.0, double hi = 3.0);

  int codebook_size() const override { return K_; }
  int state_dim() const override { return n_; }
  Vec logits(std::span<const double> state, std::span<const int> prefix) const override;
  Vec probabilities(std::span<const double> state, std::span<const int> prefix) const;

  uint64_t bucket(std::span<const double> state) const;
  void observe(const CodeSequence& seq);

  double smoothing() const { return lambda_; }
  int bins() const { return bins_; }
  // Raw counts; all zero for unseen contexts.
  Vec first_counts(uint64_t bucket) const;
  Vec successor_counts(uint64_t bucket, int code) const;

  void write(std::ostream& out) const override;
  static TabularPrior load(const std::filesystem::path& path);

 private:
  Vec row_probs(const Vec* counts) const;

  int n_, K_;
  NormStats norm_;
  double lambda_;
  int bins_;
  double lo_, hi_;
  std::unordered_map<uint64_t, Vec> first_;
  std::unordered_map<uint64_t, Vec> next_;  // key = bucket * K + z
};

// Warns and returns the smoothing-only model when `data` is empty.
TabularPrior fit_tabular(std::span<const CodeSequence> data, int state_dim, int K,
                         const NormStats& norm, double smoothing = 1.0);

struct NeuralPriorConfig {
  int embed_dim = 16;
  int hidden = 64;
  double lr = 3e-3;
  int batch_size = 64;
  int epochs = 30;
  uint64_t seed = 0;
};

// Token j of the sequence is bos (j = 0) or Emb[z_j], plus the state
// feature Ws s + bs added at every position. The logits after position j are
//   H tanh(A t_j + C mean_{i<j} t_i + c) + hb
// with H zero at init so an untrained model is uniform.
class NeuralPrior : public PriorModel {
 public:
  NeuralPrior(int state_dim, int K, NormStats norm, const NeuralPriorConfig& cfg);

  int codebook_size() const override { return K_; }
  int state_dim() const override { return n_; }
  Vec logits(std::span<const double> state, std::span<const int> prefix) const override;

  // Mean cross-entropy over every code of every sequence, with gradient.
  double loss(std::span<const CodeSequence> batch, ParamSet* grad) const;

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  const NormStats& norm() const { return norm_; }

  void write(std::ostream& out) const override;
  static NeuralPrior load(const std::filesystem::path& path);

 private:
  VecX state_feature(std::span<const double> state) const;

  int n_, K_;
  NormStats norm_;
  NeuralPriorConfig cfg_;
  ParamSet params_;
  int state_w_, state_b_, bos_, embed_, mix_self_, mix_ctx_, mix_b_, head_w_, head_b_;
};

struct PriorTrainReport {
  std::vector<double> perplexity;  // per epoch, on the training stream
  double final_cross_entropy = 0.0;
  double uniform_cross_entropy = 0.0;
};

struct NeuralPriorTrainResult {
  NeuralPrior model;
  PriorTrainReport report;
};

// Throws NumericError on divergence, InputError on an empty corpus.
NeuralPriorTrainResult train_neural_prior(std::span<const CodeSequence> data, int state_dim, int K,
                                          const NormStats& norm, const NeuralPriorConfig& cfg);

// Dispatches on the file magic.
std::unique_ptr<PriorModel> load_prior(const std::filesystem::path& path);

}  // namespace lmap
