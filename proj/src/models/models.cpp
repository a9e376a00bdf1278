#include "mllmreid/models.hpp"

#include <algorithm>
#include <cmath>

#include "mllmreid/error.hpp"
#include "mllmreid/ops.hpp"

namespace mllmreid::model {
namespace {

Tensor gaussian(ad::Shape shape, double std, std::mt19937_64& rng, std::string name) {
  std::normal_distribution<double> nd(0.0, std);
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = nd(rng);
  return Tensor::parameter(std::move(shape), std::move(v), std::move(name));
}

Tensor filled(ad::Shape shape, double value, std::string name) {
  std::vector<double> v(ad::numel(shape), value);
  return Tensor::parameter(std::move(shape), std::move(v), std::move(name));
}

std::size_t encoder_blocks_used(const VisualEncoderConfig& c) {
  return c.tap == TapPoint::post_last_layer ? c.layers : c.layers - 1;
}

}  // namespace

std::string tap_point_name(TapPoint t) { return t == TapPoint::pre_last_layer ? "pre" : "post"; }

TapPoint parse_tap_point(std::string_view s) {
  if (s == "pre" || s == "pre_last_layer") return TapPoint::pre_last_layer;
  if (s == "post" || s == "post_last_layer") return TapPoint::post_last_layer;
  throw ValueError("invalid tap point '" + std::string(s) + "' (expected pre or post)");
}

std::string pooling_name(Pooling p) { return p == Pooling::mean ? "mean" : "last_slot"; }

Pooling parse_pooling(std::string_view s) {
  if (s == "mean") return Pooling::mean;
  if (s == "last_slot") return Pooling::last_slot;
  throw ValueError("invalid pooling '" + std::string(s) + "' (expected mean or last_slot)");
}

void VisualEncoderConfig::validate() const {
  if (patch == 0 || height == 0 || width == 0 || channels == 0 || dim == 0 || heads == 0 || layers == 0 ||
      mlp_ratio == 0)
    throw ValueError("visual encoder sizes must be positive");
  if (height % patch != 0 || width % patch != 0) {
    throw ValueError("image " + std::to_string(height) + "x" + std::to_string(width) +
                     " is not divisible by patch size " + std::to_string(patch));
  }
  if (dim % heads != 0) throw ValueError("encoder heads must divide dim");
}

void CausalLMConfig::validate() const {
  if (vocab == 0 || dim == 0 || heads == 0 || layers == 0 || max_len == 0 || mlp_ratio == 0)
    throw ValueError("language model sizes must be positive");
  if (dim % heads != 0) throw ValueError("LM heads must divide dim");
}

Linear Linear::init(std::size_t in, std::size_t out, std::mt19937_64& rng, const std::string& name) {
  return {gaussian({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng, name + ".w"),
          filled({out}, 0.0, name + ".b")};
}

Tensor Linear::operator()(const Tensor& x) const { return ad::linear(x, w, b); }

Block Block::init(std::size_t dim, std::size_t heads, std::size_t mlp_ratio, std::mt19937_64& rng,
                  const std::string& name) {
  Block blk;
  blk.ln1_g = filled({dim}, 1.0, name + ".ln1.g");
  blk.ln1_b = filled({dim}, 0.0, name + ".ln1.b");
  blk.ln2_g = filled({dim}, 1.0, name + ".ln2.g");
  blk.ln2_b = filled({dim}, 0.0, name + ".ln2.b");
  blk.qkv = Linear::init(dim, 3 * dim, rng, name + ".qkv");
  blk.proj = Linear::init(dim, dim, rng, name + ".proj");
  blk.fc1 = Linear::init(dim, mlp_ratio * dim, rng, name + ".fc1");
  blk.fc2 = Linear::init(mlp_ratio * dim, dim, rng, name + ".fc2");
  blk.heads = heads;
  return blk;
}

Tensor Block::forward(const Tensor& x, std::size_t seq_len, bool causal) const {
  const Tensor a = ad::attention(qkv(ad::layer_norm(x, ln1_g, ln1_b)), seq_len, heads, causal);
  const Tensor h = ad::add(x, proj(a));
  return ad::add(h, fc2(ad::gelu(fc1(ad::layer_norm(h, ln2_g, ln2_b)))));
}

std::vector<Tensor> Block::parameters() const {
  std::vector<Tensor> p{ln1_g, ln1_b};
  for (const Linear* l : {&qkv, &proj}) p.insert(p.end(), {l->w, l->b});
  p.insert(p.end(), {ln2_g, ln2_b});
  for (const Linear* l : {&fc1, &fc2}) p.insert(p.end(), {l->w, l->b});
  return p;
}

VisualEncoder VisualEncoder::init(const VisualEncoderConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  VisualEncoder e;
  e.config = config;
  e.patch_embed = Linear::init(config.patch_dim(), config.dim, rng, "encoder.patch_embed");
  e.pos_embed = gaussian({config.num_patches(), config.dim}, 1.0 / std::sqrt(static_cast<double>(config.dim)), rng,
                         "encoder.pos_embed");
  for (std::size_t l = 0; l < config.layers; ++l)
    e.blocks.push_back(Block::init(config.dim, config.heads, config.mlp_ratio, rng, "encoder.block" + std::to_string(l)));
  e.ln_g = filled({config.dim}, 1.0, "encoder.ln.g");
  e.ln_b = filled({config.dim}, 0.0, "encoder.ln.b");
  return e;
}

std::vector<Tensor> VisualEncoder::parameters() const {
  std::vector<Tensor> p = patch_embed.parameters();
  p.push_back(pos_embed);
  for (const Block& b : blocks) {
    const auto bp = b.parameters();
    p.insert(p.end(), bp.begin(), bp.end());
  }
  p.insert(p.end(), {ln_g, ln_b});
  return p;
}

std::vector<Tensor> VisualEncoder::active_parameters() const {
  std::vector<Tensor> p = patch_embed.parameters();
  p.push_back(pos_embed);
  for (std::size_t l = 0; l < encoder_blocks_used(config); ++l) {
    const auto bp = blocks[l].parameters();
    p.insert(p.end(), bp.begin(), bp.end());
  }
  p.insert(p.end(), {ln_g, ln_b});
  return p;
}

Projection Projection::init(std::size_t d_v, std::size_t d_lm, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return {Linear::init(d_v, d_lm, rng, "projection")};
}

CausalLM CausalLM::init(const CausalLMConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  CausalLM lm;
  lm.config = config;
  const double s = 1.0 / std::sqrt(static_cast<double>(config.dim));
  lm.tok_embed = gaussian({config.vocab, config.dim}, s, rng, "lm.tok_embed");
  lm.pos_embed = gaussian({config.max_len, config.dim}, s, rng, "lm.pos_embed");
  for (std::size_t l = 0; l < config.layers; ++l)
    lm.blocks.push_back(Block::init(config.dim, config.heads, config.mlp_ratio, rng, "lm.block" + std::to_string(l)));
  lm.ln_g = filled({config.dim}, 1.0, "lm.ln.g");
  lm.ln_b = filled({config.dim}, 0.0, "lm.ln.b");
  lm.head = Linear::init(config.dim, config.vocab, rng, "lm.head");
  return lm;
}

std::vector<Tensor> CausalLM::parameters() const {
  std::vector<Tensor> p{tok_embed, pos_embed};
  for (const Block& b : blocks) {
    const auto bp = b.parameters();
    p.insert(p.end(), bp.begin(), bp.end());
  }
  p.insert(p.end(), {ln_g, ln_b, head.w, head.b});
  return p;
}

IdHead IdHead::init(std::size_t dim, std::size_t classes, std::uint64_t seed, const std::string& name) {
  if (classes == 0) throw ValueError("ID head needs at least one class");
  std::mt19937_64 rng(seed);
  return {Linear::init(dim, classes, rng, name)};
}

Tensor encode_images(const VisualEncoder& enc, std::span<const std::vector<double>> images) {
  const VisualEncoderConfig& c = enc.config;
  if (images.empty()) throw ValueError("encode_images: empty batch");
  const std::size_t P = c.num_patches(), pd = c.patch_dim(), gw = c.width / c.patch;
  std::vector<double> patches(images.size() * P * pd);
  for (std::size_t b = 0; b < images.size(); ++b) {
    const std::vector<double>& img = images[b];
    if (img.size() != c.image_size()) {
      throw ShapeError("image has " + std::to_string(img.size()) + " values, encoder expects " +
                       std::to_string(c.height) + "x" + std::to_string(c.width) + "x" + std::to_string(c.channels));
    }
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t gy = p / gw, gx = p % gw;
      double* row = &patches[(b * P + p) * pd];
      for (std::size_t py = 0; py < c.patch; ++py)
        for (std::size_t px = 0; px < c.patch; ++px)
          for (std::size_t ch = 0; ch < c.channels; ++ch)
            row[(py * c.patch + px) * c.channels + ch] =
                img[((gy * c.patch + py) * c.width + gx * c.patch + px) * c.channels + ch];
    }
  }
  Tensor x = enc.patch_embed(Tensor::constant({images.size() * P, pd}, std::move(patches)));
  x = ad::add_tiled(x, enc.pos_embed);
  for (std::size_t l = 0; l < encoder_blocks_used(c); ++l) x = enc.blocks[l].forward(x, P, false);
  return ad::layer_norm(x, enc.ln_g, enc.ln_b);
}

Tensor encode_image(const VisualEncoder& enc, const std::vector<double>& image) {
  return encode_images(enc, std::span<const std::vector<double>>(&image, 1));
}

Tensor project(const Tensor& features, const Projection& proj) {
  if (features.ndim() != 2 || features.dim(1) != proj.linear.w.dim(0)) {
    throw ShapeError("project: features " + ad::shape_str(features.shape()) + " do not match projection input " +
                     std::to_string(proj.linear.w.dim(0)));
  }
  return proj.linear(features);
}

LMOutput lm_forward(const CausalLM& lm, std::span<const text::TokenSequence> seqs, const Tensor& image_embeds) {
  const CausalLMConfig& c = lm.config;
  if (seqs.empty()) throw ValueError("lm_forward: empty batch");
  LMOutput out;
  out.batch = seqs.size();
  for (const auto& s : seqs) out.seq_len = std::max(out.seq_len, s.size());
  if (out.seq_len > c.max_len) {
    throw ValueError("sequence of " + std::to_string(out.seq_len) + " tokens exceeds max length " +
                     std::to_string(c.max_len));
  }
  const std::size_t L = out.seq_len;
  std::vector<std::size_t> ids(out.batch * L, text::kPad);
  std::vector<std::size_t> all_slots;
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    for (std::size_t i = 0; i < seqs[b].size(); ++i) {
      if (seqs[b].ids[i] >= c.vocab) {
        throw ValueError("token id " + std::to_string(seqs[b].ids[i]) + " exceeds LM vocabulary " +
                         std::to_string(c.vocab));
      }
      ids[b * L + i] = seqs[b].ids[i];
    }
    std::vector<std::size_t> rows;
    for (std::size_t p : seqs[b].image_slots) rows.push_back(b * L + p);
    all_slots.insert(all_slots.end(), rows.begin(), rows.end());
    out.slot_rows.push_back(std::move(rows));
  }
  const std::size_t provided = image_embeds.defined() ? image_embeds.dim(0) : 0;
  if (provided != all_slots.size()) {
    throw ShapeError("lm_forward: " + std::to_string(all_slots.size()) + " image slots but " +
                     std::to_string(provided) + " image embeddings");
  }
  Tensor x = ad::embedding(lm.tok_embed, ids);
  if (!all_slots.empty()) x = ad::replace_rows(x, all_slots, image_embeds);
  x = ad::add_tiled(x, ad::slice_rows(lm.pos_embed, 0, L));
  for (const Block& blk : lm.blocks) x = blk.forward(x, L, true);
  out.hidden = ad::layer_norm(x, lm.ln_g, lm.ln_b);
  out.logits = lm.head(out.hidden);
  return out;
}

Tensor pool_image_latents(const Tensor& hidden, const std::vector<std::vector<std::size_t>>& slot_rows,
                          Pooling pooling) {
  for (const auto& rows : slot_rows)
    if (rows.empty()) throw ValueError("pool_image_latents: sequence has no image slots");
  if (slot_rows.empty()) throw ValueError("pool_image_latents: no sequences");
  if (pooling == Pooling::mean) return ad::mean_rows_grouped(hidden, slot_rows);
  std::vector<std::size_t> last;
  for (const auto& rows : slot_rows) last.push_back(rows.back());
  return ad::gather_rows(hidden, last);
}

Tensor reid_embed(const VisualEncoder& enc, std::span<const std::vector<double>> images) {
  const Tensor f = encode_images(enc, images);
  const std::size_t P = enc.config.num_patches();
  std::vector<std::vector<std::size_t>> groups(images.size());
  for (std::size_t b = 0; b < images.size(); ++b)
    for (std::size_t p = 0; p < P; ++p) groups[b].push_back(b * P + p);
  return ad::mean_rows_grouped(f, groups);
}

std::vector<std::size_t> greedy_decode(const CausalLM& lm, const text::TokenSequence& prompt,
                                       const Tensor& image_embeds, std::size_t max_new) {
  ad::NoGradGuard guard;
  text::TokenSequence seq = prompt;
  std::vector<std::size_t> generated;
  const std::size_t V = lm.config.vocab;
  while (generated.size() < max_new && seq.size() < lm.config.max_len) {
    const LMOutput out = lm_forward(lm, std::span<const text::TokenSequence>(&seq, 1), image_embeds);
    const auto logits = out.logits.data().subspan((seq.size() - 1) * V, V);
    const std::size_t next = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    generated.push_back(next);
    if (next == text::kEos) break;
    seq.ids.push_back(next);
    seq.loss_mask.push_back(0);
  }
  return generated;
}

std::vector<Tensor> ModelSet::parameters() const {
  std::vector<Tensor> p = encoder.parameters();
  auto append = [&](const std::vector<Tensor>& q) { p.insert(p.end(), q.begin(), q.end()); };
  if (projection) append(projection->parameters());
  if (lm) append(lm->parameters());
  if (id_head) append(id_head->parameters());
  return p;
}

}  // namespace mllmreid::model
