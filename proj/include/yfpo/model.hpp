#pragma once

// Small decoder-only transformer with gated MLP blocks. The MLP intermediate
// channels (the post-gate product feeding the down projection) are the
// "neurons" every other module addresses by (layer, channel).
//
// Architecture: learned absolute position embeddings, pre-norm blocks with
// rmsnorm, multi-head causal self-attention without biases, silu-gated MLP,
// untied output projection.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "yfpo/tensor.hpp"

namespace yfpo {

struct ModelConfig {
  std::size_t vocab_size = 32;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ff = 128;
  std::size_t max_seq_len = 128;
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 ||
        max_seq_len < 1) {
      throw ConfigError("model config: all extents must be >= 1");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("model config: d_model (" + std::to_string(d_model) +
                        ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
    }
  }

  bool operator==(const ModelConfig&) const = default;

  // Stable identity used to tie neuron sets and relevance tables to the
  // model they were computed on.
  std::string fingerprint() const {
    std::ostringstream os;
    os << "v" << vocab_size << "d" << d_model << "l" << n_layers << "h" << n_heads << "f" << d_ff
       << "m" << max_seq_len << "s" << seed;
    std::uint64_t h = fnv1a64(os.str());
    std::ostringstream hex;
    hex << std::hex << std::setw(16) << std::setfill('0') << h;
    return hex.str();
  }
};

/// Address of one MLP intermediate channel.
struct NeuronId {
  std::size_t layer = 0;
  std::size_t channel = 0;

  auto operator<=>(const NeuronId&) const = default;
};

namespace detail {

inline void validate_neurons(std::span<const NeuronId> neurons, const ModelConfig& cfg) {
  for (const NeuronId& n : neurons) {
    if (n.layer >= cfg.n_layers || n.channel >= cfg.d_ff) {
      throw IndexError("neuron (" + std::to_string(n.layer) + ", " + std::to_string(n.channel) +
                       ") out of range for " + std::to_string(cfg.n_layers) + " layers x " +
                       std::to_string(cfg.d_ff) + " channels");
    }
  }
}

// Additive causal mask: 0 on and below the diagonal, a large negative
// constant above. Large enough that masked probabilities underflow to
// exactly 0.0, keeping earlier positions bit-independent of later tokens;
// finite so the tensor layer's finiteness checks stay meaningful.
inline Tensor causal_mask(std::size_t t) {
  std::vector<double> m(t * t, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = i + 1; j < t; ++j) m[i * t + j] = -1e9;
  }
  return Tensor::from_data({t, t}, std::move(m));
}

}  // namespace detail

class Model {
 public:
  struct LayerParams {
    Tensor attn_norm_w;  // [d]
    Tensor wq, wk, wv, wo;  // [d x d]
    Tensor mlp_norm_w;   // [d]
    Tensor w_gate, w_up;  // [d x d_ff]
    Tensor w_down;       // [d_ff x d]
  };

  struct TapResult {
    Tensor logits;
    // Ordered by NeuronId so iteration is deterministic.
    std::map<NeuronId, Tensor> taps;  // each [T]
  };

  explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    NormalSampler sampler(cfg_.seed);
    auto init_matrix = [&](std::size_t r, std::size_t c) {
      std::vector<double> data(r * c);
      for (double& v : data) v = sampler.next(0.02);
      return Tensor::from_data({r, c}, std::move(data), true);
    };
    tok_embed_ = init_matrix(cfg_.vocab_size, cfg_.d_model);
    pos_embed_ = init_matrix(cfg_.max_seq_len, cfg_.d_model);
    layers_.reserve(cfg_.n_layers);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      LayerParams p;
      p.attn_norm_w = Tensor::full({cfg_.d_model}, 1.0, true);
      p.wq = init_matrix(cfg_.d_model, cfg_.d_model);
      p.wk = init_matrix(cfg_.d_model, cfg_.d_model);
      p.wv = init_matrix(cfg_.d_model, cfg_.d_model);
      p.wo = init_matrix(cfg_.d_model, cfg_.d_model);
      p.mlp_norm_w = Tensor::full({cfg_.d_model}, 1.0, true);
      p.w_gate = init_matrix(cfg_.d_model, cfg_.d_ff);
      p.w_up = init_matrix(cfg_.d_model, cfg_.d_ff);
      p.w_down = init_matrix(cfg_.d_ff, cfg_.d_model);
      layers_.push_back(std::move(p));
    }
    final_norm_w_ = Tensor::full({cfg_.d_model}, 1.0, true);
    lm_head_ = init_matrix(cfg_.d_model, cfg_.vocab_size);
  }

  const ModelConfig& config() const { return cfg_; }
  std::size_t head_dim() const { return cfg_.d_model / cfg_.n_heads; }

  const Tensor& token_embedding() const { return tok_embed_; }
  const Tensor& position_embedding() const { return pos_embed_; }
  const LayerParams& layer(std::size_t l) const { return layers_.at(l); }
  const Tensor& final_norm_weight() const { return final_norm_w_; }
  const Tensor& lm_head() const { return lm_head_; }

  std::uint64_t train_step() const { return train_step_; }
  void set_train_step(std::uint64_t s) { train_step_ = s; }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("tok_embed", tok_embed_);
    out.emplace_back("pos_embed", pos_embed_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      out.emplace_back(p + "attn_norm_w", layers_[l].attn_norm_w);
      out.emplace_back(p + "wq", layers_[l].wq);
      out.emplace_back(p + "wk", layers_[l].wk);
      out.emplace_back(p + "wv", layers_[l].wv);
      out.emplace_back(p + "wo", layers_[l].wo);
      out.emplace_back(p + "mlp_norm_w", layers_[l].mlp_norm_w);
      out.emplace_back(p + "w_gate", layers_[l].w_gate);
      out.emplace_back(p + "w_up", layers_[l].w_up);
      out.emplace_back(p + "w_down", layers_[l].w_down);
    }
    out.emplace_back("final_norm_w", final_norm_w_);
    out.emplace_back("lm_head", lm_head_);
    return out;
  }

  void set_requires_grad(bool rg) {
    for (auto& [name, t] : named_parameters()) {
      Tensor tensor = t;
      tensor.set_requires_grad(rg);
    }
  }

  void zero_grad() {
    for (auto& [name, t] : named_parameters()) {
      Tensor tensor = t;
      tensor.zero_grad();
    }
  }

  /// FNV hash over all parameter bytes, in named_parameters() order.
  std::uint64_t parameter_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : named_parameters()) {
      h = fnv1a64_bytes(name.data(), name.size(), h);
      h = fnv1a64_bytes(t.data().data(), t.data().size_bytes(), h);
    }
    return h;
  }

  Tensor forward(Tape& tape, const TokenSeq& tokens) const {
    return forward_impl(tape, tokens, {}, nullptr);
  }

  /// Forward pass that additionally exposes the requested MLP intermediate
  /// channels (the input activations of the down projection, one value per
  /// position). Taps stay on the tape, so losses built from them
  /// backpropagate into the model parameters.
  TapResult forward_with_taps(Tape& tape, const TokenSeq& tokens,
                              std::span<const NeuronId> neurons) const {
    detail::validate_neurons(neurons, cfg_);
    TapResult result;
    result.logits = forward_impl(tape, tokens, neurons, &result.taps);
    return result;
  }

  /// log pi(response | prompt): masked sum of per-token log-probabilities
  /// over response positions only. The prompt conditions the distribution
  /// but contributes no terms.
  Tensor sequence_log_prob(Tape& tape, const TokenSeq& prompt, const TokenSeq& response) const {
    if (response.empty()) throw EmptyResponseError("sequence_log_prob: empty response");
    if (prompt.empty()) {
      // The first response token would have no conditioning position.
      throw ContractError("sequence_log_prob: empty prompt");
    }
    TokenSeq tokens = prompt;
    tokens.insert(tokens.end(), response.begin(), response.end());
    Tensor logits = forward(tape, tokens);
    return response_log_prob_from_logits(tape, logits, prompt.size(), response);
  }

  /// Same reduction applied to logits that are already available (e.g. from
  /// forward_with_taps over prompt++response).
  static Tensor response_log_prob_from_logits(Tape& tape, const Tensor& logits,
                                              std::size_t prompt_len, const TokenSeq& response) {
    if (response.empty()) throw EmptyResponseError("response_log_prob: empty response");
    if (prompt_len == 0) throw ContractError("response_log_prob: empty prompt");
    const std::size_t t_len = logits.rows();
    if (t_len != prompt_len + response.size()) {
      throw DimensionError("response_log_prob: logits rows do not match prompt+response length");
    }
    TokenSeq targets(t_len, 0);
    BoolSeq mask(t_len, false);
    // Position t predicts token t+1; response token i lives at prompt_len+i.
    for (std::size_t i = 0; i < response.size(); ++i) {
      targets[prompt_len + i - 1] = response[i];
      mask[prompt_len + i - 1] = true;
    }
    return log_prob_of_sequence(tape, logits, targets, mask);
  }

  /// Deep copy with requires_grad off everywhere; shares no buffers with the
  /// source, receives no gradients, and is never touched by optimizers.
  Model clone_frozen_reference() const {
    Model copy = clone();
    copy.set_requires_grad(false);
    return copy;
  }

  Model clone() const {
    Model copy(*this);
    auto detach = [](Tensor& t) { t = t.detached_copy(t.requires_grad()); };
    detach(copy.tok_embed_);
    detach(copy.pos_embed_);
    for (auto& layer : copy.layers_) {
      detach(layer.attn_norm_w);
      detach(layer.wq);
      detach(layer.wk);
      detach(layer.wv);
      detach(layer.wo);
      detach(layer.mlp_norm_w);
      detach(layer.w_gate);
      detach(layer.w_up);
      detach(layer.w_down);
    }
    detach(copy.final_norm_w_);
    detach(copy.lm_head_);
    return copy;
  }

  /// Greedy decoding: argmax at each step (ties break toward the lowest
  /// token id), stopping after emitting EOS, after max_new tokens, or at the
  /// context limit. Returns only the generated continuation, including the
  /// terminating EOS when one was emitted.
  TokenSeq greedy_decode(const TokenSeq& prompt, std::size_t max_new) const {
    if (prompt.empty()) throw ContractError("greedy_decode: empty prompt");
    TokenSeq tokens = prompt;
    TokenSeq generated;
    while (generated.size() < max_new && tokens.size() < cfg_.max_seq_len) {
      Tape tape;
      Tensor logits = forward(tape, tokens);
      const std::size_t last = logits.rows() - 1;
      std::size_t best = 0;
      double best_v = logits.at(last, 0);
      for (std::size_t v = 1; v < cfg_.vocab_size; ++v) {
        const double x = logits.at(last, v);
        if (x > best_v) {
          best_v = x;
          best = v;
        }
      }
      const Token tok = static_cast<Token>(best);
      generated.push_back(tok);
      tokens.push_back(tok);
      if (tok == kEosToken) break;
    }
    return generated;
  }

  // -------------------------------------------------------------------------
  // Checkpoint persistence: versioned binary container of named fp64 tensors
  // with a textual header (name, shape, byte offset into the data section).
  // Round trips are bit-exact.
  // -------------------------------------------------------------------------

  static constexpr int kCheckpointVersion = 1;

  void save_checkpoint(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw PersistenceError("cannot open checkpoint for writing: " + path.string());
    auto params = named_parameters();
    std::ostringstream header;
    header << "YFPOCKPT " << kCheckpointVersion << "\n";
    header << "config " << cfg_.vocab_size << " " << cfg_.d_model << " " << cfg_.n_layers << " "
           << cfg_.n_heads << " " << cfg_.d_ff << " " << cfg_.max_seq_len << " " << cfg_.seed
           << "\n";
    header << "step " << train_step_ << "\n";
    header << "tensors " << params.size() << "\n";
    std::size_t offset = 0;
    for (const auto& [name, t] : params) {
      header << name << " " << t.rank();
      for (std::size_t d : t.shape()) header << " " << d;
      header << " " << offset << "\n";
      offset += t.data().size_bytes();
    }
    header << "data\n";
    const std::string h = header.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& [name, t] : params) {
      out.write(reinterpret_cast<const char*>(t.data().data()),
                static_cast<std::streamsize>(t.data().size_bytes()));
    }
    if (!out) throw PersistenceError("short write while saving checkpoint: " + path.string());
  }

  static Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PersistenceError("cannot open checkpoint: " + path.string());
    std::string magic;
    int version = -1;
    if (!(in >> magic >> version) || magic != "YFPOCKPT") {
      throw FormatError("not a checkpoint file: " + path.string());
    }
    if (version != kCheckpointVersion) {
      throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    std::string key;
    ModelConfig cfg;
    if (!(in >> key >> cfg.vocab_size >> cfg.d_model >> cfg.n_layers >> cfg.n_heads >> cfg.d_ff >>
          cfg.max_seq_len >> cfg.seed) ||
        key != "config") {
      throw FormatError("malformed checkpoint config line");
    }
    std::uint64_t step = 0;
    if (!(in >> key >> step) || key != "step") throw FormatError("malformed checkpoint step line");
    std::size_t n_tensors = 0;
    if (!(in >> key >> n_tensors) || key != "tensors") {
      throw FormatError("malformed checkpoint tensor count");
    }
    struct Entry {
      std::string name;
      Shape shape;
      std::size_t offset;
    };
    std::vector<Entry> entries(n_tensors);
    for (auto& e : entries) {
      std::size_t rank = 0;
      if (!(in >> e.name >> rank)) throw FormatError("malformed checkpoint tensor header");
      e.shape.resize(rank);
      for (auto& d : e.shape) {
        if (!(in >> d)) throw FormatError("malformed checkpoint tensor shape");
      }
      if (!(in >> e.offset)) throw FormatError("malformed checkpoint tensor offset");
    }
    if (!(in >> key) || key != "data") throw FormatError("missing checkpoint data marker");
    in.get();  // consume the newline before the blob

    Model model(cfg);
    model.train_step_ = step;
    auto params = model.named_parameters();
    if (params.size() != entries.size()) {
      throw FormatError("checkpoint tensor count does not match model layout");
    }
    const std::streampos data_start = in.tellg();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto& [name, tensor] = params[i];
      const Entry& e = entries[i];
      if (e.name != name || e.shape != tensor.shape()) {
        throw FormatError("checkpoint tensor '" + e.name + "' does not match model layout");
      }
      Tensor t = tensor;
      in.seekg(data_start + static_cast<std::streamoff>(e.offset));
      in.read(reinterpret_cast<char*>(t.mutable_data().data()),
              static_cast<std::streamsize>(t.mutable_data().size_bytes()));
      if (!in) throw FormatError("checkpoint data section truncated at tensor '" + name + "'");
    }
    return model;
  }

 private:
  Tensor forward_impl(Tape& tape, const TokenSeq& tokens, std::span<const NeuronId> neurons,
                      std::map<NeuronId, Tensor>* taps) const {
    const std::size_t t_len = tokens.size();
    if (t_len == 0) throw ContractError("forward: empty token sequence");
    if (t_len > cfg_.max_seq_len) {
      throw LengthError("forward: sequence length " + std::to_string(t_len) +
                        " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    }
    TokenSeq positions(t_len);
    for (std::size_t i = 0; i < t_len; ++i) positions[i] = static_cast<Token>(i);

    Tensor x = add(tape, embed(tape, tok_embed_, tokens), embed(tape, pos_embed_, positions));
    const Tensor mask = detail::causal_mask(t_len);
    const std::size_t dh = head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const LayerParams& p = layers_[l];
      // Attention sublayer.
      Tensor h = rmsnorm(tape, x, p.attn_norm_w);
      Tensor q = matmul(tape, h, p.wq);
      Tensor k = matmul(tape, h, p.wk);
      Tensor v = matmul(tape, h, p.wv);
      std::vector<Tensor> heads;
      heads.reserve(cfg_.n_heads);
      for (std::size_t hd = 0; hd < cfg_.n_heads; ++hd) {
        Tensor qs = slice_cols(tape, q, hd * dh, dh);
        Tensor ks = slice_cols(tape, k, hd * dh, dh);
        Tensor vs = slice_cols(tape, v, hd * dh, dh);
        Tensor scores = scale(tape, matmul(tape, qs, transpose(tape, ks)), inv_sqrt_dh);
        Tensor probs = softmax_lastdim(tape, add(tape, scores, mask));
        heads.push_back(matmul(tape, probs, vs));
      }
      Tensor attn_out = matmul(tape, concat_cols(tape, heads), p.wo);
      x = add(tape, x, attn_out);

      // Gated MLP sublayer; `hidden` is the tap site.
      Tensor h2 = rmsnorm(tape, x, p.mlp_norm_w);
      Tensor hidden =
          mul(tape, silu(tape, matmul(tape, h2, p.w_gate)), matmul(tape, h2, p.w_up));
      if (taps != nullptr) {
        for (const NeuronId& n : neurons) {
          if (n.layer == l) (*taps)[n] = select_column(tape, hidden, n.channel);
        }
      }
      Tensor mlp_out = matmul(tape, hidden, p.w_down);
      x = add(tape, x, mlp_out);
    }
    return matmul(tape, rmsnorm(tape, x, final_norm_w_), lm_head_);
  }

  ModelConfig cfg_;
  Tensor tok_embed_;
  Tensor pos_embed_;
  std::vector<LayerParams> layers_;
  Tensor final_norm_w_;
  Tensor lm_head_;
  std::uint64_t train_step_ = 0;
};

}  // namespace yfpo
