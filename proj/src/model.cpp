#include "airl/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace airl {

namespace {

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (auto& v : t.mutable_data()) v = dist(rng);
  return t;
}

Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  return {uniform({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng), Tensor::zeros({out}, true)};
}

Tensor copy_param(const Tensor& t) {
  Tensor c = t.detach();
  c.set_requires_grad(true);
  return c;
}

Linear copy_linear(const Linear& l) { return {copy_param(l.weight), copy_param(l.bias)}; }

}  // namespace

void AirlConfig::validate() const {
  if (input_dim == 0 || repr_dim == 0 || classifier_hidden == 0 || lstm_hidden == 0) {
    throw DimensionError("AirlConfig: dimensions must be positive");
  }
  if (encoder_layers == 0) throw DimensionError("AirlConfig: encoder needs at least one layer");
  if (n_classes < 2) throw DimensionError("AirlConfig: need at least two classes");
}

void to_json(nlohmann::json& j, const AirlConfig& c) {
  j = {{"input_dim", c.input_dim},
       {"repr_dim", c.repr_dim},
       {"n_classes", c.n_classes},
       {"encoder_layers", c.encoder_layers},
       {"lstm_hidden", c.lstm_hidden},
       {"classifier_hidden", c.classifier_hidden},
       {"attention_softmax", c.attention_softmax}};
}

void from_json(const nlohmann::json& j, AirlConfig& c) {
  for (const auto& [key, _] : j.items()) {
    if (key != "input_dim" && key != "repr_dim" && key != "n_classes" && key != "encoder_layers" &&
        key != "lstm_hidden" && key != "classifier_hidden" && key != "attention_softmax") {
      throw std::invalid_argument("model config: unknown key '" + key + "'");
    }
  }
  c.input_dim = j.value("input_dim", c.input_dim);
  c.repr_dim = j.value("repr_dim", c.repr_dim);
  c.n_classes = j.value("n_classes", c.n_classes);
  c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
  c.lstm_hidden = j.value("lstm_hidden", c.lstm_hidden);
  c.classifier_hidden = j.value("classifier_hidden", c.classifier_hidden);
  c.attention_softmax = j.value("attention_softmax", c.attention_softmax);
}

// ---- state ------------------------------------------------------------------

AirlState AirlState::init(const AirlConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  AirlState s;
  s.config = config;
  const std::size_t d = config.repr_dim;
  for (std::size_t i = 0; i < config.encoder_layers; ++i) {
    s.encoder.push_back(make_linear(i == 0 ? config.input_dim : d, d, rng));
  }
  s.query = make_linear(d, d, rng);
  s.key = make_linear(d, d, rng);
  s.value = make_linear(d, d, rng);
  s.skip = make_linear(d, d, rng);
  s.post = make_linear(d, d, rng);
  s.bn_gamma = Tensor::full({d}, 1.0, true);
  s.bn_beta = Tensor::zeros({d}, true);
  s.bn = BatchNormBuffers(d);

  const std::size_t p = config.classifier_size();
  const std::size_t hid = config.lstm_hidden;
  s.gen_in = make_linear(p, hid, rng);
  s.lstm_w_ih = uniform({hid, 4 * hid}, 1.0 / std::sqrt(static_cast<double>(hid)), rng);
  s.lstm_w_hh = uniform({hid, 4 * hid}, 1.0 / std::sqrt(static_cast<double>(hid)), rng);
  s.lstm_bias = Tensor::zeros({4 * hid}, true);
  for (std::size_t j = hid; j < 2 * hid; ++j) s.lstm_bias.mutable_data()[j] = 1.0;
  s.gen_out = make_linear(hid, p, rng);
  {
    NoGradGuard guard;
    s.h1 = vectorize_classifier(init_classifier(config, rng())).detach();
  }
  s.h1.set_requires_grad(true);
  return s;
}

std::vector<Tensor> AirlState::encoder_parameters() const {
  std::vector<Tensor> out;
  for (const auto& l : encoder) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  return out;
}

std::vector<Tensor> AirlState::attention_parameters() const {
  return {query.weight, query.bias, key.weight, key.bias, value.weight, value.bias, skip.weight,
          skip.bias,    post.weight, post.bias, bn_gamma,  bn_beta};
}

std::vector<Tensor> AirlState::generator_parameters() const {
  return {gen_in.weight, gen_in.bias, lstm_w_ih, lstm_w_hh, lstm_bias, gen_out.weight, gen_out.bias};
}

std::vector<std::pair<std::string, Tensor>> AirlState::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    out.emplace_back("encoder." + std::to_string(i) + ".weight", encoder[i].weight);
    out.emplace_back("encoder." + std::to_string(i) + ".bias", encoder[i].bias);
  }
  const auto lin = [&out](const std::string& name, const Linear& l) {
    out.emplace_back(name + ".weight", l.weight);
    out.emplace_back(name + ".bias", l.bias);
  };
  lin("attention.query", query);
  lin("attention.key", key);
  lin("attention.value", value);
  lin("attention.skip", skip);
  lin("attention.post", post);
  out.emplace_back("attention.bn.gamma", bn_gamma);
  out.emplace_back("attention.bn.beta", bn_beta);
  lin("generator.in", gen_in);
  out.emplace_back("generator.lstm.w_ih", lstm_w_ih);
  out.emplace_back("generator.lstm.w_hh", lstm_w_hh);
  out.emplace_back("generator.lstm.bias", lstm_bias);
  lin("generator.out", gen_out);
  out.emplace_back("h1", h1);
  return out;
}

AirlState AirlState::clone() const {
  AirlState s;
  s.config = config;
  for (const auto& l : encoder) s.encoder.push_back(copy_linear(l));
  s.query = copy_linear(query);
  s.key = copy_linear(key);
  s.value = copy_linear(value);
  s.skip = copy_linear(skip);
  s.post = copy_linear(post);
  s.bn_gamma = copy_param(bn_gamma);
  s.bn_beta = copy_param(bn_beta);
  s.bn = bn;
  s.gen_in = copy_linear(gen_in);
  s.lstm_w_ih = copy_param(lstm_w_ih);
  s.lstm_w_hh = copy_param(lstm_w_hh);
  s.lstm_bias = copy_param(lstm_bias);
  s.gen_out = copy_linear(gen_out);
  s.h1 = copy_param(h1);
  return s;
}

std::vector<NamedArray> AirlState::to_arrays() const {
  std::vector<NamedArray> out;
  for (const auto& [name, t] : named_parameters()) {
    out.push_back({name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  }
  out.push_back({"attention.bn.running_mean", {bn.running_mean.size()}, bn.running_mean});
  out.push_back({"attention.bn.running_var", {bn.running_var.size()}, bn.running_var});
  return out;
}

AirlState AirlState::from_arrays(const AirlConfig& config, const std::vector<NamedArray>& arrays) {
  AirlState s = init(config, 0);
  auto params = s.named_parameters();
  if (arrays.size() != params.size() + 2) {
    throw CheckpointError("model checkpoint: expected " + std::to_string(params.size() + 2) + " arrays, found " +
                          std::to_string(arrays.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params[i];
    if (arrays[i].name != name || arrays[i].shape != t.shape()) {
      throw CheckpointError("model checkpoint: array " + std::to_string(i) + " is '" + arrays[i].name +
                            "' " + shape_str(arrays[i].shape) + ", expected '" + name + "' " + shape_str(t.shape()));
    }
    std::copy(arrays[i].values.begin(), arrays[i].values.end(), t.mutable_data().begin());
  }
  const auto& rm = arrays[params.size()];
  const auto& rv = arrays[params.size() + 1];
  if (rm.name != "attention.bn.running_mean" || rv.name != "attention.bn.running_var" ||
      rm.values.size() != config.repr_dim || rv.values.size() != config.repr_dim) {
    throw CheckpointError("model checkpoint: missing batchnorm running statistics");
  }
  s.bn.running_mean = rm.values;
  s.bn.running_var = rv.values;
  return s;
}

// ---- forward passes ---------------------------------------------------------

Tensor encode(const AirlState& state, const Tensor& x) {
  if (x.rank() != 2 || x.dim(1) != state.config.input_dim) {
    throw DimensionError("encode: expected n x " + std::to_string(state.config.input_dim) + " input, got " +
                         shape_str(x.shape()));
  }
  Tensor z = x;
  for (std::size_t i = 0; i < state.encoder.size(); ++i) {
    z = state.encoder[i](z);
    if (i + 1 < state.encoder.size()) z = relu(z);
  }
  return z;
}

Tensor causal_attention(const Tensor& query_t, std::span<const Tensor> keys, std::span<const Tensor> values,
                        const Tensor& skip_t, bool softmax_scores) {
  if (keys.empty() || keys.size() != values.size()) {
    throw DimensionError("attend: empty or mismatched key/value sequence");
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(query_t.dim(1)));
  std::vector<Tensor> scores;
  scores.reserve(keys.size());
  for (const auto& k : keys) scores.push_back(scale(reduce_sum(mul(k, query_t), 1), inv_sqrt_d));
  if (softmax_scores) {
    Tensor weights = softmax(concat(scores, 1), 1);
    for (std::size_t s = 0; s < scores.size(); ++s) scores[s] = slice(weights, 1, s, s + 1);
  }
  Tensor out = skip_t;
  for (std::size_t s = 0; s < values.size(); ++s) out = add(out, mul(scores[s], values[s]));
  return out;
}

Tensor attention_post(AirlState& state, const Tensor& mixed, bool training) {
  Tensor h = state.post(mixed);
  h = batchnorm_1d(h, state.bn_gamma, state.bn_beta, state.bn, training);
  return leaky_relu(h, 0.01);
}

Tensor attend(AirlState& state, std::span<const Tensor> z_seq, bool training) {
  if (z_seq.empty()) throw DimensionError("attend: empty sequence");
  const Shape& shape = z_seq.front().shape();
  for (const auto& z : z_seq) {
    if (z.shape() != shape || z.rank() != 2) throw DimensionError("attend: all positions must share n x d");
  }
  const Tensor stack = concat(std::vector<Tensor>(z_seq.begin(), z_seq.end()), 0);
  return attend_at(state, project_sequence(state, stack, z_seq.size()), z_seq.size(), training);
}

AttentionProjections project_sequence(const AirlState& state, const Tensor& z_stack, std::size_t positions) {
  if (positions == 0 || z_stack.rank() != 2 || z_stack.rows() % positions != 0) {
    throw DimensionError("attend: cannot split " + shape_str(z_stack.shape()) + " into " + std::to_string(positions) +
                         " positions");
  }
  const Shape cube{positions, z_stack.rows() / positions, z_stack.cols()};
  return {reshape(state.query(z_stack), cube), reshape(state.key(z_stack), cube), reshape(state.value(z_stack), cube),
          reshape(state.skip(z_stack), cube)};
}

Tensor attend_at(AirlState& state, const AttentionProjections& proj, std::size_t t, bool training) {
  if (t == 0 || t > proj.positions()) {
    throw DimensionError("attend: position " + std::to_string(t) + " outside 1.." + std::to_string(proj.positions()));
  }
  const std::size_t n = proj.key.dim(1);
  const std::size_t d = proj.key.dim(2);
  const Tensor keys = slice(proj.key, 0, 0, t);
  const Tensor values = slice(proj.value, 0, 0, t);
  const Tensor query_t = slice(proj.query, 0, t - 1, t);
  // scores: t x n x 1, one per (position, slot)
  Tensor scores = scale(reduce_sum(mul(keys, query_t), 2), 1.0 / std::sqrt(static_cast<double>(d)));
  if (state.config.attention_softmax) scores = softmax(scores, 0);
  Tensor mixed = reshape(reduce_sum(mul(scores, values), 0), {n, d});
  mixed = add(mixed, reshape(slice(proj.skip, 0, t - 1, t), {n, d}));
  return attention_post(state, mixed, training);
}

// ---- classifiers ------------------------------------------------------------

Tensor vectorize_classifier(const Classifier& h) {
  const auto flat = [](const Tensor& t) { return reshape(t, {1, t.size()}); };
  return concat({flat(h.w1), flat(h.b1), flat(h.w2), flat(h.b2)}, 1);
}

Classifier devectorize_classifier(const Tensor& flat, const AirlConfig& config) {
  const std::size_t d = config.repr_dim;
  const std::size_t hid = config.classifier_hidden;
  const std::size_t out = config.n_output();
  if (flat.size() != config.classifier_size()) {
    throw DimensionError("devectorize_classifier: expected " + std::to_string(config.classifier_size()) +
                         " values, got " + std::to_string(flat.size()));
  }
  Tensor row = flat.rank() == 2 && flat.dim(0) == 1 ? flat : reshape(flat, {1, flat.size()});
  std::size_t at = 0;
  const auto take = [&](std::size_t n, Shape shape) {
    Tensor part = reshape(slice(row, 1, at, at + n), std::move(shape));
    at += n;
    return part;
  };
  Classifier h;
  h.w1 = take(d * hid, {d, hid});
  h.b1 = take(hid, {hid});
  h.w2 = take(hid * out, {hid, out});
  h.b2 = take(out, {out});
  return h;
}

Classifier init_classifier(const AirlConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Linear hidden = make_linear(config.repr_dim, config.classifier_hidden, rng);
  const Linear output = make_linear(config.classifier_hidden, config.n_output(), rng);
  return {hidden.weight, hidden.bias, output.weight, output.bias};
}

Tensor classify(const Classifier& h, const Tensor& z) {
  if (z.rank() != 2 || z.dim(1) != h.w1.dim(0)) {
    throw DimensionError("classify: representation width " + shape_str(z.shape()) + " does not match classifier");
  }
  return affine(relu(affine(z, h.w1, h.b1)), h.w2, h.b2);
}

Tensor classify(const Tensor& flat, const AirlConfig& config, const Tensor& z) {
  return classify(devectorize_classifier(flat, config), z);
}

// ---- generator --------------------------------------------------------------

GeneratorCarry initial_carry(const AirlState& state) {
  const std::size_t hid = state.config.lstm_hidden;
  return {Tensor::zeros({1, hid}), Tensor::zeros({1, hid})};
}

Tensor generator_step(const AirlState& state, GeneratorCarry& carry, const Tensor& classifier) {
  if (classifier.size() != state.config.classifier_size()) {
    throw DimensionError("generator: classifier vector has " + std::to_string(classifier.size()) +
                         " values, expected " + std::to_string(state.config.classifier_size()));
  }
  Tensor x = classifier.rank() == 2 ? classifier : reshape(classifier, {1, classifier.size()});
  auto next = lstm_cell(state.gen_in(x), carry.h, carry.c, state.lstm_w_ih, state.lstm_w_hh, state.lstm_bias);
  carry = {next.h, next.c};
  return state.gen_out(next.h);
}

Tensor generate_classifier(const AirlState& state, std::span<const Tensor> history) {
  if (history.empty()) throw UsageError("generate_classifier: empty history");
  GeneratorCarry carry = initial_carry(state);
  Tensor out;
  for (const auto& h : history) out = generator_step(state, carry, h);
  return out;
}

std::vector<Tensor> roll_classifiers(const AirlState& state, std::vector<Tensor> history, std::size_t count) {
  if (history.empty()) throw UsageError("roll_classifiers: empty history");
  if (history.size() >= count) return history;
  GeneratorCarry carry = initial_carry(state);
  Tensor next;
  for (const auto& h : history) next = generator_step(state, carry, h);
  while (history.size() < count) {
    history.push_back(next);
    if (history.size() < count) next = generator_step(state, carry, next);
  }
  return history;
}

std::vector<int> predict_labels(const Tensor& logits) {
  const std::size_t n = logits.rows();
  const std::size_t k = logits.cols();
  std::vector<int> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (k == 1) {
      out[i] = logits.at(i, 0) > 0.0 ? 1 : 0;
      continue;
    }
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace airl
