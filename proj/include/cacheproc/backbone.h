#pragma once

#include <functional>
#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cacheproc/ops.h"
#include "cacheproc/rng.h"
#include "cacheproc/tensor.h"

namespace cacheproc {

struct BackboneConfig {
    size_t layers = 4;
    size_t heads = 4;
    size_t d_model = 128;
    size_t d_ff = 384;
    size_t vocab = 32;
    size_t max_positions = 512;
    double rope_base = 10000.0;
    double norm_eps = 1e-5;

    size_t head_dim() const { return d_model / heads; }
    size_t kv_width() const { return d_model; }  // heads * head_dim, per K or V
    void validate() const;

    nlohmann::json to_json() const;
    static BackboneConfig from_json(const nlohmann::json& j);
};

struct LayerParams {
    Tensor attn_gain;  // [d]
    Tensor wq, wk, wv, wo;  // [d, d]
    Tensor mlp_gain;   // [d]
    Tensor w_up;       // [d, d_ff]
    Tensor w_down;     // [d_ff, d]
};

struct BackboneParams {
    BackboneConfig config;
    Tensor embedding;  // [V, d]
    std::vector<LayerParams> layers;
    Tensor final_gain;  // [d]
    Tensor lm_head;     // [d, V]
    bool frozen = false;

    static BackboneParams init(const BackboneConfig& cfg, Rng& rng, DType dt = DType::F32);
    // Stable name -> tensor listing used by checkpoints and the optimizer.
    std::vector<std::pair<std::string, Tensor>> named_tensors() const;
    std::vector<Tensor> trainable() const;
    void set_frozen(bool frozen_now);  // toggles requires_grad on every tensor
    DType dtype() const { return embedding.dtype(); }
    size_t param_count() const;
};

// One attention row captured during the forward pass: probabilities of the
// query at query_pos over key positions [0, query_pos], laid out head-major.
struct AttnRow {
    size_t query_pos = 0;
    std::vector<double> probs;  // heads * (query_pos + 1)
};

// Optional capture of every attention row (tests and instrumentation).
using AttnLogger = std::function<void(size_t layer, size_t head, size_t query_pos,
                                      const std::vector<double>& row)>;

// The model's memory state: per-layer keys/values of every processed token,
// plus bookkeeping for the in-flight reasoning step.
struct CacheState {
    BackboneConfig config;
    std::vector<Tensor> k;  // per layer [len, heads*head_dim]
    std::vector<Tensor> v;
    size_t len = 0;
    Tensor last_hidden;       // [1, d_model]; the o_t of the latest processed token
    size_t last_boundary = 0;  // start of the tokens since the last rewrite
    std::vector<std::vector<AttnRow>> step_attn;  // [layer][rows since boundary]
    bool capture_attn = true;  // off for plain SFT/eval where no rewrite selection runs
    size_t head_calls = 0;     // LM head invocation counter for this session
    AttnLogger debug_attn;     // not cloned

    explicit CacheState(const BackboneConfig& cfg);
    std::pair<size_t, size_t> current_step_span() const { return {last_boundary, len}; }
    void mark_boundary();  // releases step attention rows, advances last_boundary
    void detach_all();     // severs k/v/last_hidden from any tape
    CacheState clone() const;
};

struct GenHooks {
    std::function<void(CacheState&)> on_prompt_end;            // fired once after prefill
    std::function<void(CacheState&, int token)> on_token;      // after the token's KVs land
};

class Backbone {
  public:
    explicit Backbone(BackboneParams params);

    const BackboneConfig& config() const { return params_.config; }
    const BackboneParams& params() const { return params_; }
    BackboneParams& params() { return params_; }

    // Teacher-forced forward of a token chunk on top of the existing cache.
    // Appends one KV row per token at every layer and returns logits [m, V].
    Tensor forward_chunk(CacheState& cache, std::span<const int> tokens) const;

    // Latent path: consumes pre-built embedding rows instead of token ids and
    // never touches the LM head. Returns the final hidden rows [m, d].
    Tensor forward_embedding(CacheState& cache, const Tensor& emb_rows) const;

    std::pair<CacheState, Tensor> prefill(std::span<const int> tokens) const;
    Tensor decode_step(CacheState& cache, int token) const;  // logits [1, V]

    // Argmax decoding; stops at EOS or max_new. Returns prompt + generated.
    std::vector<int> greedy_generate(std::span<const int> prompt, size_t max_new,
                                     const GenHooks& hooks = {}) const;

  private:
    Tensor forward_hidden(CacheState& cache, const Tensor& x0) const;

    BackboneParams params_;
};

}  // namespace cacheproc
