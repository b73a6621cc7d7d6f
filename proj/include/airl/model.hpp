#pragma once
//
// AIRL networks.
//
//   encoder    Enc: stack of affine layers with ReLU in between (g_t path)
//   attention  Trans: causal attention across the domain index for each
//              sample slot, followed by affine -> batchnorm -> leaky ReLU
//              (Enc followed by Trans is the f_t path)
//   generator  LSTM hypernetwork: input projection -> LSTM cell -> output
//              projection, consuming one vectorized classifier per domain
//   h1         trainable first classifier
//
// A classifier is affine -> ReLU -> affine. Its flat vector layout is
// [hidden weights (d x hidden, row-major), hidden bias, output weights
// (hidden x n_output, row-major), output bias].
//

#include "airl/checkpoint.hpp"
#include "airl/tensor.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace airl {

struct AirlConfig {
  std::size_t input_dim = 2;
  std::size_t repr_dim = 32;
  int n_classes = 2;
  std::size_t encoder_layers = 4;
  std::size_t lstm_hidden = 128;
  std::size_t classifier_hidden = 32;
  // Scores are used as printed (raw scaled dot products) unless set.
  bool attention_softmax = false;

  // Binary tasks use a single logit.
  std::size_t n_output() const { return n_classes == 2 ? 1 : static_cast<std::size_t>(n_classes); }
  std::size_t classifier_size() const {
    return repr_dim * classifier_hidden + classifier_hidden + classifier_hidden * n_output() + n_output();
  }
  void validate() const;
};

void to_json(nlohmann::json& j, const AirlConfig& c);
void from_json(const nlohmann::json& j, AirlConfig& c);

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // out

  Tensor operator()(const Tensor& x) const { return affine(x, weight, bias); }
};

struct Classifier {
  Tensor w1;  // d x hidden
  Tensor b1;  // hidden
  Tensor w2;  // hidden x n_output
  Tensor b2;  // n_output
};

struct AirlState {
  AirlConfig config;
  std::vector<Linear> encoder;
  Linear query;
  Linear key;
  Linear value;
  Linear skip;  // U
  Linear post;
  Tensor bn_gamma;
  Tensor bn_beta;
  BatchNormBuffers bn;
  Linear gen_in;
  Tensor lstm_w_ih;
  Tensor lstm_w_hh;
  Tensor lstm_bias;
  Linear gen_out;
  Tensor h1;  // 1 x classifier_size

  // Affine weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0, LSTM
  // forget-gate bias 1. h1 follows the affine rule for each of its layers.
  static AirlState init(const AirlConfig& config, std::uint64_t seed);

  std::vector<Tensor> encoder_parameters() const;
  std::vector<Tensor> attention_parameters() const;
  std::vector<Tensor> generator_parameters() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;

  // Deep copy with fresh tensors (no shared storage, no tape history).
  AirlState clone() const;

  // Parameters plus batchnorm running statistics.
  std::vector<NamedArray> to_arrays() const;
  static AirlState from_arrays(const AirlConfig& config, const std::vector<NamedArray>& arrays);
};

// z = Enc(x); x: n x input_dim -> n x d.
Tensor encode(const AirlState& state, const Tensor& x);

// Pre-projection attention output for one slot block:
// sum_s a_s * values[s] + skip_t with a_s = <keys[s], query_t> / sqrt(d),
// taken over positions s = 1..t only.
Tensor causal_attention(const Tensor& query_t, std::span<const Tensor> keys, std::span<const Tensor> values,
                        const Tensor& skip_t, bool softmax_scores);

// post affine -> batchnorm -> leaky ReLU.
Tensor attention_post(AirlState& state, const Tensor& mixed, bool training);

// zhat_t from z_1..z_t (each n x d). Training mode updates batchnorm buffers.
Tensor attend(AirlState& state, std::span<const Tensor> z_seq, bool training);

// Q, K, V, U projections of a whole stacked sequence, each positions x n x d.
struct AttentionProjections {
  Tensor query;
  Tensor key;
  Tensor value;
  Tensor skip;
  std::size_t positions() const { return key.dim(0); }
};

// z_stack holds `positions` blocks of n rows each, block s being z_{s+1}.
AttentionProjections project_sequence(const AirlState& state, const Tensor& z_stack, std::size_t positions);

// zhat_t (1-based t) using only positions 1..t of the projections.
Tensor attend_at(AirlState& state, const AttentionProjections& proj, std::size_t t, bool training);

// Flat classifier vectors are 1 x classifier_size tensors.
Tensor vectorize_classifier(const Classifier& h);
Classifier devectorize_classifier(const Tensor& flat, const AirlConfig& config);
Classifier init_classifier(const AirlConfig& config, std::uint64_t seed);

Tensor classify(const Classifier& h, const Tensor& z);
Tensor classify(const Tensor& flat, const AirlConfig& config, const Tensor& z);

// Running LSTM state for the classifier generator.
struct GeneratorCarry {
  Tensor h;
  Tensor c;
};

GeneratorCarry initial_carry(const AirlState& state);
// Feeds one classifier vector and returns the generated next classifier.
Tensor generator_step(const AirlState& state, GeneratorCarry& carry, const Tensor& classifier);

// h_t = LSTM(h_1..h_{t-1}): feeds the whole history from a fresh carry and
// returns the projection of the final step.
Tensor generate_classifier(const AirlState& state, std::span<const Tensor> history);

// Extends `history` by feeding generated classifiers back until it holds
// `count` entries.
std::vector<Tensor> roll_classifiers(const AirlState& state, std::vector<Tensor> history, std::size_t count);

// argmax over logits (lowest index on ties); single logit -> class 1 iff > 0.
std::vector<int> predict_labels(const Tensor& logits);

}  // namespace airl
