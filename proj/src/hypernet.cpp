#include "evonas/hypernet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "evonas/checkpoint.hpp"
#include "evonas/errors.hpp"
#include "evonas/ops.hpp"

namespace evonas {

namespace {

std::string block_prefix(std::size_t i) { return "block" + std::to_string(i) + "."; }

std::string op_param(std::size_t block, OpKind op) { return block_prefix(block) + std::string(op_name(op)); }

std::string ctx_param(std::size_t layer, ContextWindow w) {
  return block_prefix(layer) + std::string(window_name(w));
}

// Output channels of the last choice block.
std::size_t final_channels(const HyperNetConfig& cfg) {
  return cfg.filters << cfg.reductions().size();
}

std::size_t tail_input(const HyperNetConfig& cfg) {
  return cfg.mode == SpaceMode::AutoVector ? final_channels(cfg) : 2 * cfg.tdnn_widths.back();
}

Tensor kaiming(Shape shape, std::size_t fan_in, Rng& rng) {
  std::normal_distribution<double> g(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = g(rng);
  return Tensor::parameter(std::move(shape), std::move(data));
}

Tensor zeros(Shape shape) { return Tensor::parameter(shape, std::vector<double>(shape_numel(shape), 0.0)); }

void add_layer(ParameterStore& p, const std::string& name, Shape weight, std::size_t fan_in, Rng& rng) {
  const std::size_t out = weight[0];
  p.add(name + ".weight", kaiming(std::move(weight), fan_in, rng));
  p.add(name + ".bias", zeros({out}));
}

void copy_into(Tensor& dst, const Tensor& src, const std::string& name) {
  if (dst.shape() != src.shape())
    throw ContractError("parameter '" + name + "' has shape " + shape_str(src.shape()) + ", expected " +
                        shape_str(dst.shape()));
  auto s = src.data();
  std::copy(s.begin(), s.end(), dst.mutable_data().begin());
}

Tensor apply_op(OpKind op, const Tensor& h, const ParameterStore& params, std::size_t block) {
  switch (op) {
    case OpKind::Identity: return h;
    case OpKind::MaxPool: return max_pool2d(h, 3, 1, 1);
    default: {
      const std::string name = op_param(block, op);
      return relu(conv2d(h, params.at(name + ".weight"), params.at(name + ".bias"), 1, conv_kernel(op) / 2));
    }
  }
}

std::vector<OpKind> canonical_ops(const BlockGene& gene) { return gene.canonical().ops; }

Tensor choice_block_embedding(const HyperNetConfig& cfg, const ParameterStore& params, const Genome& g,
                              const Tensor& input, const PathScales* scales) {
  Tensor h = relu(conv2d(input, params.at("stem.weight"), params.at("stem.bias"), 1, 1));
  const std::vector<std::size_t> reductions = cfg.reductions();
  for (std::size_t i = 0; i < g.blocks.size(); ++i) {
    if (std::binary_search(reductions.begin(), reductions.end(), i)) {
      const std::string name = block_prefix(i) + "reduce";
      h = relu(conv2d(h, params.at(name + ".weight"), params.at(name + ".bias"), 2, 1));
    }
    const std::vector<OpKind> ops = canonical_ops(g.blocks[i]);
    std::vector<Tensor> outs;
    for (std::size_t j = 0; j < ops.size(); ++j) {
      const double scale = scales ? (*scales)[i][j] : 1.0;
      if (scale == 0.0) continue;
      Tensor y = apply_op(ops[j], h, params, i);
      outs.push_back(scale == 1.0 ? y : affine(y, scale));
    }
    h = outs.size() == 1 ? outs[0] : add(outs[0], outs[1]);
  }
  Tensor pooled = reshape(adaptive_avg_pool2d(h, 1, 1), {h.dim(0)});
  return dense(pooled, params.at("tail.dense1.weight"), params.at("tail.dense1.bias"));
}

Tensor tdnn_embedding(const ParameterStore& params, const Genome& g, const Tensor& input) {
  Tensor h = input;
  for (std::size_t l = 0; l < g.windows.size(); ++l) {
    const std::vector<int> offsets = window_offsets(g.windows[l]);
    Tensor spliced = offsets.size() == 1 ? h : splice(h, offsets);
    const std::string name = ctx_param(l, g.windows[l]);
    h = relu(frame_affine(spliced, params.at(name + ".weight"), params.at(name + ".bias")));
  }
  return dense(stats_pool(h), params.at("tail.dense1.weight"), params.at("tail.dense1.bias"));
}

}  // namespace

std::vector<std::size_t> HyperNetConfig::reductions() const {
  std::set<std::size_t> r;
  if (reduction_positions) r.insert(reduction_positions->begin(), reduction_positions->end());
  else r = {blocks / 3, 2 * blocks / 3};
  return {r.begin(), r.end()};
}

SpaceConfig HyperNetConfig::space() const { return SpaceConfig{mode, blocks}; }

void HyperNetConfig::validate() const {
  if (embedding_dim == 0) throw ConfigError("embedding_dim must be positive");
  if (!(path_dropout >= 0.0 && path_dropout < 1.0))
    throw ConfigError("path_dropout must be in [0, 1), got " + std::to_string(path_dropout));
  if (mode == SpaceMode::AutoVector) {
    if (filters == 0) throw ConfigError("F (filters) must be at least 1");
    if (blocks == 0) throw ConfigError("B (blocks) must be at least 1");
    if (reduction_positions)
      for (std::size_t r : *reduction_positions)
        if (r >= blocks)
          throw ConfigError("reduction position " + std::to_string(r) + " outside [0, " + std::to_string(blocks) + ")");
  } else {
    if (tdnn_widths.size() != kTdnnLayers)
      throw ConfigError("tdnn_widths needs " + std::to_string(kTdnnLayers) + " entries, got " +
                        std::to_string(tdnn_widths.size()));
    for (std::size_t w : tdnn_widths)
      if (w == 0) throw ConfigError("tdnn widths must be positive");
    if (input_pool_frames && input_pool_frames <= 2 * 3 * kTdnnLayers)
      throw ConfigError("TDNN input needs more than " + std::to_string(2 * 3 * kTdnnLayers) +
                        " frames after pooling for the widest windows");
  }
}

PathScales sample_path_dropout(const Genome& g, double p, Rng& rng) {
  PathScales scales(g.blocks.size());
  std::bernoulli_distribution drop(p);
  for (std::size_t i = 0; i < g.blocks.size(); ++i) {
    const std::size_t n = g.blocks[i].ops.size();
    if (n < 2 || p == 0.0) {
      scales[i].assign(n, 1.0);
      continue;
    }
    bool d0 = false, d1 = false;
    do {
      d0 = drop(rng);
      d1 = drop(rng);
    } while (d0 && d1);
    const double keep = 1.0 / (1.0 - p);
    scales[i] = {d0 ? 0.0 : keep, d1 ? 0.0 : keep};
  }
  return scales;
}

Tensor prepare_input(const HyperNetConfig& cfg, const FeatureMatrix& x) {
  NoGradGuard no_grad;
  if (x.rows() != kNumCepstra)
    throw ShapeError("network input needs " + std::to_string(kNumCepstra) + " rows, got " + std::to_string(x.rows()));
  if (cfg.mode == SpaceMode::AutoVector) {
    Tensor image = x.as_image();
    if (!cfg.input_pool_rows && !cfg.input_pool_frames) return image;
    return adaptive_avg_pool2d(image, cfg.input_pool_rows ? cfg.input_pool_rows : x.rows(),
                               cfg.input_pool_frames ? cfg.input_pool_frames : x.frames());
  }
  if (!cfg.input_pool_frames) return x.as_tensor();
  return reshape(adaptive_avg_pool2d(x.as_image(), x.rows(), cfg.input_pool_frames), {x.rows(), cfg.input_pool_frames});
}

Tensor network_embedding(const HyperNetConfig& cfg, const ParameterStore& params, const Genome& g,
                         const Tensor& input, const PathScales* scales) {
  return cfg.mode == SpaceMode::AutoVector ? choice_block_embedding(cfg, params, g, input, scales)
                                           : tdnn_embedding(params, g, input);
}

Tensor network_logits(const ParameterStore& params, const Tensor& embedding) {
  if (!params.contains("head.weight")) throw ContractError("network has no softmax head (n_train_speakers = 0)");
  Tensor h = relu(dense(relu(embedding), params.at("tail.dense2.weight"), params.at("tail.dense2.bias")));
  return dense(h, params.at("head.weight"), params.at("head.bias"));
}

ScoreParams score_params(const ParameterStore& params) {
  return {params.at("head.score_w").item(), params.at("head.score_b").item()};
}

HyperNet HyperNet::build(const HyperNetConfig& cfg) {
  cfg.validate();
  HyperNet net;
  net.config_ = cfg;
  Rng rng(cfg.seed);
  ParameterStore& p = net.params_;
  if (cfg.mode == SpaceMode::AutoVector) {
    add_layer(p, "stem", {cfg.filters, 1, 3, 3}, 9, rng);
    const std::vector<std::size_t> reductions = cfg.reductions();
    std::size_t c = cfg.filters;
    for (std::size_t i = 0; i < cfg.blocks; ++i) {
      if (std::binary_search(reductions.begin(), reductions.end(), i)) {
        add_layer(p, block_prefix(i) + "reduce", {2 * c, c, 3, 3}, 9 * c, rng);
        c *= 2;
      }
      for (OpKind op : kAllOps)
        if (std::size_t k = conv_kernel(op)) add_layer(p, op_param(i, op), {c, c, k, k}, c * k * k, rng);
    }
  } else {
    std::size_t in = kNumCepstra;
    for (std::size_t l = 0; l < kTdnnLayers; ++l) {
      for (ContextWindow w : kAllWindows) {
        const std::size_t fan_in = in * window_offsets(w).size();
        add_layer(p, ctx_param(l, w), {cfg.tdnn_widths[l], fan_in}, fan_in, rng);
      }
      in = cfg.tdnn_widths[l];
    }
  }
  const std::size_t e = cfg.embedding_dim;
  add_layer(p, "tail.dense1", {e, tail_input(cfg)}, tail_input(cfg), rng);
  add_layer(p, "tail.dense2", {e, e}, e, rng);
  if (cfg.n_train_speakers) add_layer(p, "head", {cfg.n_train_speakers, e}, e, rng);
  p.add("head.score_w", Tensor::parameter({1}, {10.0}));
  p.add("head.score_b", Tensor::parameter({1}, {-5.0}));
  return net;
}

void HyperNet::check_genome(const Genome& g) const {
  const auto problems = validate(g, config_.space());
  if (!problems.empty()) throw ContractError("genome does not fit the hyper-network: " + problems.front());
}

Tensor HyperNet::forward(const Genome& g, const FeatureMatrix& x, const PathScales* scales) const {
  check_genome(g);
  return network_embedding(config_, params_, g, prepare_input(config_, x), scales);
}

void HyperNet::load_params(const ParameterStore& loaded) {
  for (auto [name, tensor] : params_.items()) {
    if (!loaded.contains(name)) throw ContractError("checkpoint is missing parameter '" + name + "'");
    copy_into(tensor, loaded.at(name), name);
  }
}

Tensor SubNet::forward(const FeatureMatrix& x) const {
  return network_embedding(config, params, genome, prepare_input(config, x));
}

std::vector<std::string> path_parameter_names(const HyperNetConfig& cfg, const Genome& g) {
  std::vector<std::string> layers;
  if (cfg.mode == SpaceMode::AutoVector) {
    layers.push_back("stem");
    const std::vector<std::size_t> reductions = cfg.reductions();
    for (std::size_t i = 0; i < g.blocks.size(); ++i) {
      if (std::binary_search(reductions.begin(), reductions.end(), i)) layers.push_back(block_prefix(i) + "reduce");
      for (OpKind op : canonical_ops(g.blocks[i]))
        if (conv_kernel(op)) layers.push_back(op_param(i, op));
    }
  } else {
    for (std::size_t l = 0; l < g.windows.size(); ++l) layers.push_back(ctx_param(l, g.windows[l]));
  }
  layers.push_back("tail.dense1");
  layers.push_back("tail.dense2");
  std::vector<std::string> names;
  for (const std::string& layer : layers) {
    names.push_back(layer + ".weight");
    names.push_back(layer + ".bias");
  }
  return names;
}

SubNet extract_subnet(const HyperNet& h, const Genome& g) {
  h.check_genome(g);
  SubNet net{h.config(), g, {}};
  std::vector<std::string> names = path_parameter_names(h.config(), g);
  for (const char* extra : {"head.weight", "head.bias", "head.score_w", "head.score_b"})
    if (h.params().contains(extra)) names.emplace_back(extra);
  for (const std::string& name : names) net.params.add(name, h.params().at(name).clone());
  return net;
}

SubNet load_subnet(const HyperNetConfig& cfg, const Genome& g, const ParameterStore& params) {
  const auto problems = validate(g, cfg.space());
  if (!problems.empty()) throw ContractError("genome does not fit the network config: " + problems.front());
  SubNet net{cfg, g, {}};
  std::vector<std::string> names = path_parameter_names(cfg, g);
  for (const char* extra : {"head.weight", "head.bias", "head.score_w", "head.score_b"})
    if (params.contains(extra)) names.emplace_back(extra);
  for (const std::string& name : names) {
    if (!params.contains(name)) throw ContractError("sub-network checkpoint is missing '" + name + "'");
    Tensor t = params.at(name).clone();
    t.set_requires_grad(true);
    net.params.add(name, t);
  }
  return net;
}

double TrainConfig::lr_at(std::size_t step) const {
  const std::size_t n = total_steps();
  if (n <= 1) return base_lr;
  return base_lr * static_cast<double>(n - 1 - std::min(step, n - 1)) / static_cast<double>(n - 1);
}

TrainData TrainData::from_corpus(const Corpus& corpus, const HyperNetConfig& cfg) {
  TrainData data;
  for (std::size_t s : corpus.train_speakers()) {
    data.by_speaker.emplace_back();
    for (std::size_t u : corpus.utterances_of(s, Split::Train))
      data.by_speaker.back().push_back(prepare_input(cfg, corpus.utterances[u].features));
  }
  if (data.by_speaker.empty()) throw ConfigError("corpus has no training speakers");
  return data;
}

namespace {

Rng step_rng(std::uint64_t seed, std::size_t step) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(static_cast<std::uint64_t>(step) >> 32)};
  return Rng(seq);
}

// k distinct indices out of [0, n), in draw order.
std::vector<std::size_t> sample_distinct(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[std::uniform_int_distribution<std::size_t>(i, n - 1)(rng)]);
  idx.resize(k);
  return idx;
}

void check_train_setup(const HyperNetConfig& net, const ParameterStore& params, const TrainData& data,
                       const TrainConfig& cfg) {
  if (cfg.batch_speakers < 2 || cfg.batch_utterances < 2)
    throw ConfigError("batches need at least 2 speakers x 2 utterances");
  if (data.by_speaker.size() < cfg.batch_speakers)
    throw ConfigError("batch needs " + std::to_string(cfg.batch_speakers) + " training speakers, corpus has " +
                      std::to_string(data.by_speaker.size()));
  for (std::size_t s = 0; s < data.by_speaker.size(); ++s)
    if (data.by_speaker[s].size() < cfg.batch_utterances)
      throw ConfigError("training speaker " + std::to_string(s) + " has " + std::to_string(data.by_speaker[s].size()) +
                        " utterances, batch needs " + std::to_string(cfg.batch_utterances));
  if (cfg.softmax_steps > 0) {
    if (!params.contains("head.weight")) throw ConfigError("softmax warm-up needs n_train_speakers > 0");
    if (net.n_train_speakers != data.by_speaker.size())
      throw ConfigError("softmax head has " + std::to_string(net.n_train_speakers) + " rows but the corpus has " +
                        std::to_string(data.by_speaker.size()) + " training speakers");
  }
  if (!(cfg.base_lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
}

void run_training(const HyperNetConfig& net, ParameterStore& params, const TrainData& data, const TrainConfig& cfg,
                  TrainState& state, const std::function<Genome(Rng&)>& genome_for, double dropout,
                  const StepCallback& after_step) {
  check_train_setup(net, params, data, cfg);
  for (std::size_t s = state.step; s < cfg.total_steps(); ++s) {
    Rng rng = step_rng(cfg.seed, s);
    const Genome g = genome_for(rng);
    std::optional<PathScales> scales;
    if (dropout > 0.0 && g.mode == SpaceMode::AutoVector) scales = sample_path_dropout(g, dropout, rng);
    const LossMode mode = cfg.mode_at(s);

    params.zero_grad();
    const auto speakers = sample_distinct(data.by_speaker.size(), cfg.batch_speakers, rng);
    Tensor loss;
    if (mode == LossMode::Softmax) {
      std::vector<Tensor> losses;
      for (std::size_t spk : speakers)
        for (std::size_t u : sample_distinct(data.by_speaker[spk].size(), cfg.batch_utterances, rng)) {
          Tensor e = network_embedding(net, params, g, data.by_speaker[spk][u], scales ? &*scales : nullptr);
          losses.push_back(softmax_xent_loss(network_logits(params, e), spk));
        }
      loss = mean_of(losses);
    } else {
      EmbeddingBatch batch;
      for (std::size_t spk : speakers) {
        batch.embeddings.emplace_back();
        for (std::size_t u : sample_distinct(data.by_speaker[spk].size(), cfg.batch_utterances, rng))
          batch.embeddings.back().push_back(
              network_embedding(net, params, g, data.by_speaker[spk][u], scales ? &*scales : nullptr));
      }
      loss = ge2e_style_loss(batch, params.at("head.score_w"), params.at("head.score_b"));
    }
    backward(loss);

    std::vector<std::pair<std::string, Tensor>> touched;
    for (const auto& [name, t] : params.items())
      if (t.has_grad()) touched.emplace_back(name, t);
    const double lr = cfg.lr_at(s);
    state.adam.step(touched, lr);
    Tensor& w = params.at("head.score_w");
    if (w.item() < kMinScoreScale) w.mutable_data()[0] = kMinScoreScale;

    state.trace.push_back({s, mode, lr, loss.item()});
    state.step = s + 1;
    if (after_step) after_step(state);
  }
  params.zero_grad();
}

}  // namespace

void train_hypernet(HyperNet& h, const TrainData& data, const TrainConfig& cfg, TrainState& state,
                    const GenomeSampler& sampler, const StepCallback& after_step) {
  const SpaceConfig space = h.config().space();
  auto genome_for = [&](Rng& rng) {
    Genome g = sampler ? sampler(rng) : uniform_sample(space, rng);
    h.check_genome(g);
    return g;
  };
  run_training(h.config(), h.params(), data, cfg, state, genome_for, h.config().path_dropout, after_step);
}

void retrain(SubNet& net, const TrainData& data, const TrainConfig& cfg, TrainState& state,
             const StepCallback& after_step) {
  auto genome_for = [&](Rng&) { return net.genome; };
  run_training(net.config, net.params, data, cfg, state, genome_for, 0.0, after_step);
}

void save_training_checkpoint(const std::filesystem::path& path, const ParameterStore& params, const TrainState& state) {
  ParameterStore out;
  for (const auto& [name, t] : params.items()) out.add(name, t.detach());
  state.adam.save_state(out);
  out.add("train.step", Tensor::scalar(static_cast<double>(state.step)));
  save_checkpoint(path, out);
}

TrainState load_training_checkpoint(const std::filesystem::path& path, ParameterStore& params) {
  const ParameterStore in = load_checkpoint(path);
  for (auto [name, tensor] : params.items()) {
    if (!in.contains(name)) throw ContractError("checkpoint " + path.string() + " is missing parameter '" + name + "'");
    copy_into(tensor, in.at(name), name);
  }
  TrainState state;
  state.adam.load_state(in);
  if (in.contains("train.step")) state.step = static_cast<std::size_t>(in.at("train.step").item());
  return state;
}

EvalData EvalData::from_corpus(const Corpus& corpus, const HyperNetConfig& cfg) {
  EvalData data;
  data.trials = corpus.trials();
  if (data.trials.trials.empty()) throw ConfigError("corpus yields no verification trials");
  data.ids = data.trials.utterances();
  for (const std::string& id : data.ids) data.inputs.push_back(prepare_input(cfg, corpus.utterance(id).features));
  return data;
}

EmbeddingTable embed_all(const HyperNetConfig& cfg, const ParameterStore& params, const Genome& g, const EvalData& data) {
  NoGradGuard no_grad;
  EmbeddingTable table;
  for (std::size_t i = 0; i < data.ids.size(); ++i) {
    Tensor e = network_embedding(cfg, params, g, data.inputs[i]);
    auto d = e.data();
    table.emplace(data.ids[i], std::vector<double>(d.begin(), d.end()));
  }
  return table;
}

namespace {

EvalResult score_eval(const EmbeddingTable& table, const ParameterStore& params, const EvalData& data) {
  EvalResult r;
  r.scores = score_trials(table, data.trials, score_params(params));
  r.eer_unfolded = eer_unfolded(r.scores);
  r.eer = std::min(r.eer_unfolded, 1.0 - r.eer_unfolded);
  return r;
}

}  // namespace

EvalResult evaluate_candidate(const HyperNet& h, const Genome& g, const EvalData& data) {
  h.check_genome(g);
  return score_eval(embed_all(h.config(), h.params(), g, data), h.params(), data);
}

EvalResult evaluate_subnet(const SubNet& net, const EvalData& data) {
  return score_eval(embed_all(net.config, net.params, net.genome, data), net.params, data);
}

}  // namespace evonas
