#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dot/common.hpp"
#include "dot/optim.hpp"
#include "dot/serialize.hpp"
#include "dot/tensor.hpp"

namespace dot {

struct DotVitConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t in_channels = 1;
  std::size_t embed_dim = 32;   // D
  std::size_t head_dim = 8;     // d
  std::size_t num_heads = 4;
  std::size_t depth = 2;
  std::size_t num_classes = 4;  // K
  std::size_t num_domain_tokens = 2;
  double mlp_ratio = 2.0;

  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t num_patches() const {  // M
    return patches_per_side() * patches_per_side();
  }
  std::size_t seq_len() const { return num_patches() + num_domain_tokens; }  // N
  std::size_t patch_dim() const {
    return in_channels * patch_size * patch_size;
  }
  std::size_t mlp_hidden() const {
    return static_cast<std::size_t>(mlp_ratio * static_cast<double>(embed_dim));
  }

  // Domain token j sits at sequence position 0 (j = 0) or after the patches.
  // For two tokens this is the [src; patches; tgt] layout.
  std::size_t token_position(std::size_t domain) const {
    return domain == 0 ? 0 : num_patches() + domain;
  }

  void validate() const {
    if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0)
      throw std::invalid_argument(
          "DotVitConfig: image_size must be a positive multiple of patch_size");
    if (num_heads * head_dim != embed_dim)
      throw std::invalid_argument(
          "DotVitConfig: num_heads * head_dim must equal embed_dim");
    if (in_channels == 0 || embed_dim == 0 || num_classes == 0)
      throw std::invalid_argument("DotVitConfig: zero-sized field");
    if (num_domain_tokens < 2)
      throw std::invalid_argument(
          "DotVitConfig: at least two domain tokens required");
    if (mlp_ratio <= 0.0)
      throw std::invalid_argument("DotVitConfig: mlp_ratio must be positive");
  }
};

inline nlohmann::json to_json(const DotVitConfig& c) {
  return {{"image_size", c.image_size},   {"patch_size", c.patch_size},
          {"in_channels", c.in_channels}, {"embed_dim", c.embed_dim},
          {"head_dim", c.head_dim},       {"num_heads", c.num_heads},
          {"depth", c.depth},             {"num_classes", c.num_classes},
          {"num_domain_tokens", c.num_domain_tokens},
          {"mlp_ratio", c.mlp_ratio}};
}

inline DotVitConfig vit_config_from_json(const nlohmann::json& j) {
  DotVitConfig c;
  c.image_size = j.at("image_size").get<std::size_t>();
  c.patch_size = j.at("patch_size").get<std::size_t>();
  c.in_channels = j.at("in_channels").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.head_dim = j.at("head_dim").get<std::size_t>();
  c.num_heads = j.at("num_heads").get<std::size_t>();
  c.depth = j.at("depth").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.num_domain_tokens = j.at("num_domain_tokens").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<double>();
  c.validate();
  return c;
}

// Per-image representations read off the domain token positions after the
// final layer norm.
struct EncoderOutput {
  Tensor fs;  // B x D, token position 0
  Tensor ft;  // B x D, token position N-1
  std::vector<Tensor> domain_features;  // one B x D entry per domain token
  Tensor patch_embeddings;              // B x M x D, only if retained
};

struct EncoderBlock {
  Parameter ln1_gain, ln1_bias;
  std::vector<Parameter> wq, wk, wv;  // per head, D x d
  Parameter wo, wo_bias;              // D x D, D
  Parameter ln2_gain, ln2_bias;
  Parameter mlp_w1, mlp_b1;  // D x H, H
  Parameter mlp_w2, mlp_b2;  // H x D, D
};

class DotVitModel {
 public:
  DotVitModel() = default;

  static DotVitModel init(const DotVitConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    DotVitModel m;
    m.cfg_ = cfg;
    const double sigma = 0.02;
    auto weight = [&](const std::string& name, Shape shape) {
      Rng rng(tag_seed(seed, name));
      return Parameter(name, Tensor::trunc_normal(std::move(shape), rng, sigma));
    };
    auto zeros = [&](const std::string& name, Shape shape, double scale = 1.0) {
      return Parameter(name, Tensor::zeros(std::move(shape)), scale);
    };
    auto ones = [&](const std::string& name, Shape shape) {
      return Parameter(name, Tensor::full(std::move(shape), 1.0));
    };

    const std::size_t d_model = cfg.embed_dim, d_head = cfg.head_dim;
    m.patch_proj_ = weight("patch_proj.weight", {cfg.patch_dim(), d_model});
    m.patch_bias_ = zeros("patch_proj.bias", {d_model});
    m.pos_embed_ = weight("pos_embed", {cfg.seq_len(), d_model});
    // Each domain token is its own draw, so the tokens differ from step 0.
    m.domain_tokens_ =
        weight("domain_tokens", {cfg.num_domain_tokens, d_model});
    for (std::size_t b = 0; b < cfg.depth; ++b) {
      const std::string pre = "blocks." + std::to_string(b) + ".";
      EncoderBlock blk;
      blk.ln1_gain = ones(pre + "ln1.gain", {d_model});
      blk.ln1_bias = zeros(pre + "ln1.bias", {d_model});
      for (std::size_t h = 0; h < cfg.num_heads; ++h) {
        const std::string hp = pre + "attn.head" + std::to_string(h) + ".";
        blk.wq.push_back(weight(hp + "wq", {d_model, d_head}));
        blk.wk.push_back(weight(hp + "wk", {d_model, d_head}));
        blk.wv.push_back(weight(hp + "wv", {d_model, d_head}));
      }
      blk.wo = weight(pre + "attn.wo", {d_model, d_model});
      blk.wo_bias = zeros(pre + "attn.wo_bias", {d_model});
      blk.ln2_gain = ones(pre + "ln2.gain", {d_model});
      blk.ln2_bias = zeros(pre + "ln2.bias", {d_model});
      blk.mlp_w1 = weight(pre + "mlp.w1", {d_model, cfg.mlp_hidden()});
      blk.mlp_b1 = zeros(pre + "mlp.b1", {cfg.mlp_hidden()});
      blk.mlp_w2 = weight(pre + "mlp.w2", {cfg.mlp_hidden(), d_model});
      blk.mlp_b2 = zeros(pre + "mlp.b2", {d_model});
      m.blocks_.push_back(std::move(blk));
    }
    m.final_ln_gain_ = ones("final_ln.gain", {d_model});
    m.final_ln_bias_ = zeros("final_ln.bias", {d_model});
    for (std::size_t t = 0; t < cfg.num_domain_tokens; ++t) {
      const std::string hp = "heads." + std::to_string(t) + ".";
      Rng rng(tag_seed(seed, hp + "weight"));
      m.head_weights_.emplace_back(
          hp + "weight",
          Tensor::trunc_normal({d_model, cfg.num_classes}, rng, sigma), 10.0);
      m.head_biases_.push_back(zeros(hp + "bias", {cfg.num_classes}, 10.0));
    }
    return m;
  }

  const DotVitConfig& config() const { return cfg_; }

  // Non-overlapping patches, row-major patch order, each patch flattened
  // channel-major. Returns B x M x D.
  Tensor patch_embed(const Tensor& images) const {
    check_images(images);
    const std::size_t b = images.dim(0);
    std::vector<Tensor> per_image;
    per_image.reserve(b);
    for (std::size_t i = 0; i < b; ++i)
      per_image.push_back(embed_one(images, i));
    Tensor flat = concat_rows(per_image);
    return reshape(flat, {b, cfg_.num_patches(), cfg_.embed_dim});
  }

  // Pre-norm multi-head self-attention with residual. Accepts N x D or
  // B x N x D.
  Tensor self_attention(const Tensor& x, std::size_t block_index) const {
    const EncoderBlock& blk = blocks_.at(block_index);
    if (x.rank() == 2) return attention_2d(x, blk);
    if (x.rank() != 3)
      throw std::invalid_argument("self_attention: expected rank 2 or 3");
    std::vector<Tensor> out;
    const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    for (std::size_t i = 0; i < b; ++i) {
      Tensor xi = reshape(slice_rows(reshape(x, {b * n, d}), i * n, n), {n, d});
      out.push_back(attention_2d(xi, blk));
    }
    return reshape(concat_rows(out), {b, n, d});
  }

  EncoderOutput encode(const Tensor& images, bool keep_patches = false) const {
    check_images(images);
    const std::size_t b = images.dim(0);
    const std::size_t n = cfg_.seq_len(), d = cfg_.embed_dim;
    const std::size_t t = cfg_.num_domain_tokens;
    std::vector<std::vector<Tensor>> feats(t);
    std::vector<Tensor> patch_parts;
    for (std::size_t i = 0; i < b; ++i) {
      Tensor pe = embed_one(images, i);  // M x D
      if (keep_patches) patch_parts.push_back(pe);
      std::vector<Tensor> seq;
      seq.push_back(slice_rows(domain_tokens_.tensor, 0, 1));
      seq.push_back(pe);
      if (t > 1) seq.push_back(slice_rows(domain_tokens_.tensor, 1, t - 1));
      Tensor x = add(concat_rows(seq), pos_embed_.tensor);
      for (std::size_t blk = 0; blk < blocks_.size(); ++blk) {
        x = attention_2d(x, blocks_[blk]);
        x = mlp_2d(x, blocks_[blk]);
      }
      x = layer_norm(x, final_ln_gain_.tensor, final_ln_bias_.tensor);
      for (std::size_t dom = 0; dom < t; ++dom)
        feats[dom].push_back(slice_rows(x, cfg_.token_position(dom), 1));
    }
    EncoderOutput out;
    out.domain_features.reserve(t);
    for (std::size_t dom = 0; dom < t; ++dom)
      out.domain_features.push_back(concat_rows(feats[dom]));
    out.fs = out.domain_features.front();
    out.ft = out.domain_features.back();
    if (keep_patches)
      out.patch_embeddings =
          reshape(concat_rows(patch_parts), {b, cfg_.num_patches(), d});
    return out;
  }

  // Affine head for one domain token; no softmax.
  Tensor classify(const Tensor& features, std::size_t domain) const {
    if (domain >= cfg_.num_domain_tokens)
      throw std::invalid_argument("classify: domain index " +
                                  std::to_string(domain) + " out of range");
    return add_row_bias(matmul(features, head_weights_[domain].tensor),
                        head_biases_[domain].tensor);
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    out.push_back(&patch_proj_);
    out.push_back(&patch_bias_);
    out.push_back(&pos_embed_);
    out.push_back(&domain_tokens_);
    for (auto& blk : blocks_) {
      out.push_back(&blk.ln1_gain);
      out.push_back(&blk.ln1_bias);
      for (auto& p : blk.wq) out.push_back(&p);
      for (auto& p : blk.wk) out.push_back(&p);
      for (auto& p : blk.wv) out.push_back(&p);
      out.push_back(&blk.wo);
      out.push_back(&blk.wo_bias);
      out.push_back(&blk.ln2_gain);
      out.push_back(&blk.ln2_bias);
      out.push_back(&blk.mlp_w1);
      out.push_back(&blk.mlp_b1);
      out.push_back(&blk.mlp_w2);
      out.push_back(&blk.mlp_b2);
    }
    out.push_back(&final_ln_gain_);
    out.push_back(&final_ln_bias_);
    for (auto& p : head_weights_) out.push_back(&p);
    for (auto& p : head_biases_) out.push_back(&p);
    return out;
  }

  void zero_grad() {
    for (Parameter* p : parameters()) p->tensor.zero_grad();
  }

  Parameter& domain_tokens() { return domain_tokens_; }
  Parameter& head_weight(std::size_t domain) { return head_weights_.at(domain); }
  Parameter& head_bias(std::size_t domain) { return head_biases_.at(domain); }

  std::vector<std::pair<std::string, Tensor>> to_blobs() {
    std::vector<std::pair<std::string, Tensor>> out;
    for (Parameter* p : parameters()) out.emplace_back(p->name, p->tensor);
    return out;
  }

  static DotVitModel from_blobs(const DotVitConfig& cfg, const NamedBlobs& c) {
    DotVitModel m = init(cfg, 0);
    for (Parameter* p : m.parameters()) {
      const Tensor& stored = c.find(p->name);
      if (stored.shape() != p->tensor.shape())
        throw FormatError("checkpoint blob \"" + p->name +
                          "\" has shape " + shape_str(stored.shape()) +
                          ", expected " + shape_str(p->tensor.shape()));
      p->tensor.data() = stored.data();
    }
    return m;
  }

 private:
  void check_images(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != cfg_.in_channels ||
        images.dim(2) != cfg_.image_size || images.dim(3) != cfg_.image_size)
      throw std::invalid_argument("expected images [Bx" +
                                  std::to_string(cfg_.in_channels) + "x" +
                                  std::to_string(cfg_.image_size) + "x" +
                                  std::to_string(cfg_.image_size) + "], got " +
                                  shape_str(images.shape()));
  }

  // Patches of image i as a constant M x (C*p*p) matrix, then projected.
  Tensor embed_one(const Tensor& images, std::size_t index) const {
    const std::size_t s = cfg_.image_size, p = cfg_.patch_size;
    const std::size_t side = cfg_.patches_per_side(), c = cfg_.in_channels;
    const std::size_t pd = cfg_.patch_dim();
    std::vector<double> patches(cfg_.num_patches() * pd);
    const double* img = images.data().data() + index * c * s * s;
    for (std::size_t py = 0; py < side; ++py)
      for (std::size_t px = 0; px < side; ++px) {
        double* dst = patches.data() + (py * side + px) * pd;
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x)
              *dst++ = img[ch * s * s + (py * p + y) * s + (px * p + x)];
      }
    Tensor pm({cfg_.num_patches(), pd}, std::move(patches));
    return add_row_bias(matmul(pm, patch_proj_.tensor), patch_bias_.tensor);
  }

  Tensor attention_2d(const Tensor& x, const EncoderBlock& blk) const {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg_.head_dim));
    Tensor h = layer_norm(x, blk.ln1_gain.tensor, blk.ln1_bias.tensor);
    std::vector<Tensor> heads;
    heads.reserve(cfg_.num_heads);
    for (std::size_t hd = 0; hd < cfg_.num_heads; ++hd) {
      Tensor q = matmul(h, blk.wq[hd].tensor);
      Tensor k = matmul(h, blk.wk[hd].tensor);
      Tensor v = matmul(h, blk.wv[hd].tensor);
      Tensor attn = softmax(scale(matmul(q, transpose(k)), inv_sqrt_d));
      heads.push_back(matmul(attn, v));
    }
    Tensor merged = cfg_.num_heads == 1 ? heads[0] : concat_cols(heads);
    Tensor proj = add_row_bias(matmul(merged, blk.wo.tensor), blk.wo_bias.tensor);
    return add(x, proj);
  }

  Tensor mlp_2d(const Tensor& x, const EncoderBlock& blk) const {
    Tensor h = layer_norm(x, blk.ln2_gain.tensor, blk.ln2_bias.tensor);
    Tensor a = gelu(add_row_bias(matmul(h, blk.mlp_w1.tensor), blk.mlp_b1.tensor));
    Tensor o = add_row_bias(matmul(a, blk.mlp_w2.tensor), blk.mlp_b2.tensor);
    return add(x, o);
  }

  DotVitConfig cfg_;
  Parameter patch_proj_, patch_bias_;
  Parameter pos_embed_;
  Parameter domain_tokens_;
  std::vector<EncoderBlock> blocks_;
  Parameter final_ln_gain_, final_ln_bias_;
  std::vector<Parameter> head_weights_, head_biases_;
};

}  // namespace dot
