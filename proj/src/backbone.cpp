#include "cacheproc/backbone.h"

#include <cmath>

#include "cacheproc/common.h"
#include "cacheproc/tape.h"
#include "cacheproc/vocab.h"

namespace cacheproc {

namespace op = ops;

void BackboneConfig::validate() const {
    check(layers > 0 && heads > 0 && d_model > 0 && d_ff > 0 && vocab > 0 && max_positions > 0,
          "backbone config: all dimensions must be positive");
    check(d_model % heads == 0, "backbone config: d_model " + std::to_string(d_model) +
                                    " not divisible by " + std::to_string(heads) + " heads");
    check(head_dim() % 2 == 0, "backbone config: head dim " + std::to_string(head_dim()) +
                                   " must be even for rotary encoding");
}

nlohmann::json BackboneConfig::to_json() const {
    return {{"layers", layers},     {"heads", heads},
            {"d_model", d_model},   {"d_ff", d_ff},
            {"vocab", vocab},       {"max_positions", max_positions},
            {"rope_base", rope_base}, {"norm_eps", norm_eps}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
    BackboneConfig c;
    c.layers = j.at("layers").get<size_t>();
    c.heads = j.at("heads").get<size_t>();
    c.d_model = j.at("d_model").get<size_t>();
    c.d_ff = j.at("d_ff").get<size_t>();
    c.vocab = j.at("vocab").get<size_t>();
    c.max_positions = j.at("max_positions").get<size_t>();
    c.rope_base = j.at("rope_base").get<double>();
    c.norm_eps = j.at("norm_eps").get<double>();
    c.validate();
    return c;
}

BackboneParams BackboneParams::init(const BackboneConfig& cfg, Rng& rng, DType dt) {
    cfg.validate();
    const double std = 0.02;
    BackboneParams p;
    p.config = cfg;
    p.embedding = Tensor::randn({cfg.vocab, cfg.d_model}, rng, std, dt);
    for (size_t l = 0; l < cfg.layers; ++l) {
        LayerParams lp;
        lp.attn_gain = Tensor::full({cfg.d_model}, 1.0, dt);
        lp.wq = Tensor::randn({cfg.d_model, cfg.d_model}, rng, std, dt);
        lp.wk = Tensor::randn({cfg.d_model, cfg.d_model}, rng, std, dt);
        lp.wv = Tensor::randn({cfg.d_model, cfg.d_model}, rng, std, dt);
        lp.wo = Tensor::randn({cfg.d_model, cfg.d_model}, rng, std, dt);
        lp.mlp_gain = Tensor::full({cfg.d_model}, 1.0, dt);
        lp.w_up = Tensor::randn({cfg.d_model, cfg.d_ff}, rng, std, dt);
        lp.w_down = Tensor::randn({cfg.d_ff, cfg.d_model}, rng, std, dt);
        p.layers.push_back(std::move(lp));
    }
    p.final_gain = Tensor::full({cfg.d_model}, 1.0, dt);
    p.lm_head = Tensor::randn({cfg.d_model, cfg.vocab}, rng, std, dt);
    p.set_frozen(false);
    return p;
}

std::vector<std::pair<std::string, Tensor>> BackboneParams::named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("embedding", embedding);
    for (size_t l = 0; l < layers.size(); ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        out.emplace_back(pre + "attn_gain", layers[l].attn_gain);
        out.emplace_back(pre + "wq", layers[l].wq);
        out.emplace_back(pre + "wk", layers[l].wk);
        out.emplace_back(pre + "wv", layers[l].wv);
        out.emplace_back(pre + "wo", layers[l].wo);
        out.emplace_back(pre + "mlp_gain", layers[l].mlp_gain);
        out.emplace_back(pre + "w_up", layers[l].w_up);
        out.emplace_back(pre + "w_down", layers[l].w_down);
    }
    out.emplace_back("final_gain", final_gain);
    out.emplace_back("lm_head", lm_head);
    return out;
}

std::vector<Tensor> BackboneParams::trainable() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_tensors()) out.push_back(t);
    return out;
}

void BackboneParams::set_frozen(bool frozen_now) {
    frozen = frozen_now;
    for (auto& [name, t] : named_tensors()) {
        Tensor handle = t;
        handle.set_requires_grad(!frozen_now);
    }
}

size_t BackboneParams::param_count() const {
    size_t n = 0;
    for (auto& [name, t] : named_tensors()) n += t.numel();
    return n;
}

CacheState::CacheState(const BackboneConfig& cfg) : config(cfg) {
    config.validate();
    k.resize(cfg.layers);
    v.resize(cfg.layers);
    step_attn.resize(cfg.layers);
}

void CacheState::mark_boundary() {
    for (auto& rows : step_attn) rows.clear();
    last_boundary = len;
}

void CacheState::detach_all() {
    for (size_t l = 0; l < k.size(); ++l) {
        if (k[l].defined()) k[l] = op::detach(k[l]);
        if (v[l].defined()) v[l] = op::detach(v[l]);
    }
    if (last_hidden.defined()) last_hidden = op::detach(last_hidden);
}

CacheState CacheState::clone() const {
    CacheState c(config);
    for (size_t l = 0; l < k.size(); ++l) {
        if (k[l].defined()) c.k[l] = k[l].clone();
        if (v[l].defined()) c.v[l] = v[l].clone();
    }
    c.len = len;
    if (last_hidden.defined()) c.last_hidden = last_hidden.clone();
    c.last_boundary = last_boundary;
    c.step_attn = step_attn;
    c.head_calls = head_calls;
    return c;
}

Backbone::Backbone(BackboneParams params) : params_(std::move(params)) {
    params_.config.validate();
}

Tensor Backbone::forward_hidden(CacheState& cache, const Tensor& x0) const {
    const BackboneConfig& cfg = params_.config;
    check(cache.config.to_json() == cfg.to_json(), "cache/backbone config mismatch");
    const size_t m = x0.dim(0);
    const size_t t0 = cache.len;
    check(t0 + m <= cfg.max_positions,
          "cache overflow: " + std::to_string(t0 + m) + " tokens exceed max positions " +
              std::to_string(cfg.max_positions));
    const size_t t = t0 + m;
    const size_t dk = cfg.head_dim();
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

    // Chunk-internal causal mask; row i may see cache plus chunk rows <= i.
    Tensor mask;
    if (m > 1) {
        mask = Tensor::zeros({m, t}, x0.dtype());
        for (size_t i = 0; i < m; ++i) {
            for (size_t j = t0 + i + 1; j < t; ++j) mask.set(i * t + j, -1e30);
        }
    }

    Tensor x = x0;
    for (size_t l = 0; l < cfg.layers; ++l) {
        const LayerParams& lp = params_.layers[l];
        Tensor h = op::rms_norm(x, lp.attn_gain, cfg.norm_eps);
        Tensor q = op::rope(op::matmul(h, lp.wq), t0, cfg.heads, cfg.rope_base);
        Tensor k_new = op::rope(op::matmul(h, lp.wk), t0, cfg.heads, cfg.rope_base);
        Tensor v_new = op::matmul(h, lp.wv);
        Tensor k_all = cache.k[l].defined() ? op::concat_rows({cache.k[l], k_new}) : k_new;
        Tensor v_all = cache.v[l].defined() ? op::concat_rows({cache.v[l], v_new}) : v_new;

        // Stage per-row capture across heads, then append to the step buffer.
        std::vector<AttnRow> captured(m);
        for (size_t i = 0; i < m; ++i) {
            captured[i].query_pos = t0 + i;
            captured[i].probs.assign(cfg.heads * (t0 + i + 1), 0.0);
        }

        std::vector<Tensor> head_outs;
        head_outs.reserve(cfg.heads);
        for (size_t hd = 0; hd < cfg.heads; ++hd) {
            Tensor qh = op::slice_cols(q, hd * dk, (hd + 1) * dk);
            Tensor kh = op::slice_cols(k_all, hd * dk, (hd + 1) * dk);
            Tensor vh = op::slice_cols(v_all, hd * dk, (hd + 1) * dk);
            Tensor scores = op::scale(op::matmul(qh, op::transpose(kh)), inv_sqrt_dk);
            if (mask.defined()) scores = op::add(scores, mask);
            Tensor probs = op::row_softmax(scores);
            for (size_t i = 0; i < m; ++i) {
                const size_t valid = t0 + i + 1;
                double* dst = captured[i].probs.data() + hd * valid;
                for (size_t j = 0; j < valid; ++j) dst[j] = probs.at2(i, j);
                if (cache.debug_attn) {
                    std::vector<double> row(dst, dst + valid);
                    cache.debug_attn(l, hd, t0 + i, row);
                }
            }
            head_outs.push_back(op::matmul(probs, vh));
        }
        Tensor attn = op::matmul(op::concat_cols(head_outs), lp.wo);
        x = op::add(x, attn);

        Tensor h2 = op::rms_norm(x, lp.mlp_gain, cfg.norm_eps);
        x = op::add(x, op::matmul(op::silu(op::matmul(h2, lp.w_up)), lp.w_down));

        cache.k[l] = k_all;
        cache.v[l] = v_all;
        for (auto& row : captured) cache.step_attn[l].push_back(std::move(row));
    }

    Tensor xf = op::rms_norm(x, params_.final_gain, cfg.norm_eps);
    cache.last_hidden = op::slice_rows(xf, m - 1, m);
    cache.len = t;
    return xf;
}

Tensor Backbone::forward_chunk(CacheState& cache, std::span<const int> tokens) const {
    check(!tokens.empty(), "forward_chunk: empty token chunk");
    Tensor x0 = op::embedding(params_.embedding, {tokens.begin(), tokens.end()});
    Tensor xf = forward_hidden(cache, x0);
    cache.head_calls += 1;
    return op::matmul(xf, params_.lm_head);
}

Tensor Backbone::forward_embedding(CacheState& cache, const Tensor& emb_rows) const {
    check(emb_rows.rank() == 2 && emb_rows.dim(1) == params_.config.d_model,
          "forward_embedding: rows must be [m, d_model]");
    return forward_hidden(cache, emb_rows);
}

std::pair<CacheState, Tensor> Backbone::prefill(std::span<const int> tokens) const {
    check(!tokens.empty(), "prefill: empty input");
    CacheState cache(params_.config);
    Tensor logits = forward_chunk(cache, tokens);
    Tensor last = op::slice_rows(logits, tokens.size() - 1, tokens.size());
    return {std::move(cache), std::move(last)};
}

Tensor Backbone::decode_step(CacheState& cache, int token) const {
    const int toks[1] = {token};
    return forward_chunk(cache, std::span<const int>(toks, 1));
}

std::vector<int> Backbone::greedy_generate(std::span<const int> prompt, size_t max_new,
                                           const GenHooks& hooks) const {
    check(!prompt.empty(), "greedy_generate: empty prompt");
    NoGradScope no_grad;
    std::vector<int> out(prompt.begin(), prompt.end());
    auto [cache, logits] = prefill(prompt);
    if (hooks.on_prompt_end) hooks.on_prompt_end(cache);
    for (size_t i = 0; i < max_new; ++i) {
        const int token = static_cast<int>(op::argmax_row(logits, 0));
        out.push_back(token);
        if (token == Vocab::kEos) break;
        logits = decode_step(cache, token);
        if (hooks.on_token) hooks.on_token(cache, token);
    }
    return out;
}

}  // namespace cacheproc
