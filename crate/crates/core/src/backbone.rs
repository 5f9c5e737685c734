//! A frozen toy vision-transformer encoder.
//!
//! Pre-norm blocks (LN -> MHSA -> residual, LN -> FFN -> residual) with a
//! class token prepended at position 0, learned positional embeddings, and a
//! final layer norm whose class-token row is the sample feature. Inputs are
//! token sequences; a minimal patchifier covers the raw-image path.
//!
//! All parameters are frozen in the adapter-tuning mode. An
//! `unfreeze_last_block` switch exists solely for the partial-tuning
//! baseline comparison.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mea::MeaStack;
use crate::tensor::{Graph, Param, ParamRef, ParamStore, Tensor};

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    /// Number of transformer blocks `L`.
    pub num_blocks: usize,
    /// Embedding width `d`.
    pub embed_dim: usize,
    pub num_heads: usize,
    /// Input tokens per sample, before the class token is prepended.
    pub token_count: usize,
    /// Feature width of the raw input tokens.
    pub input_dim: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
    /// Partial-tuning baseline: marks the last block trainable.
    pub unfreeze_last_block: bool,
}

impl BackboneConfig {
    /// Small test backbone: 6 blocks of width 48 with 4 heads.
    pub fn small(seed: u64) -> Self {
        BackboneConfig {
            num_blocks: 6,
            embed_dim: 48,
            num_heads: 4,
            token_count: 6,
            input_dim: 24,
            mlp_hidden: 96,
            seed,
            unfreeze_last_block: false,
        }
    }

    /// Paper-scale shape (ViT-B/16): 12 blocks of width 768, 12 heads,
    /// 196 patch tokens. Constructible for parameter accounting; far too
    /// large to train here.
    pub fn paper_scale(seed: u64) -> Self {
        BackboneConfig {
            num_blocks: 12,
            embed_dim: 768,
            num_heads: 12,
            token_count: 196,
            input_dim: 768,
            mlp_hidden: 3072,
            seed,
            unfreeze_last_block: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        if self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.token_count == 0 || self.input_dim == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config(
                "token_count, input_dim and mlp_hidden must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Tokens flowing through the blocks: inputs plus the class token.
    pub fn seq_len(&self) -> usize {
        self.token_count + 1
    }
}

#[derive(Clone)]
pub struct LayerNormParams {
    pub gain: ParamRef,
    pub bias: ParamRef,
}

#[derive(Clone)]
pub struct FfnParams {
    pub w1: ParamRef,
    pub b1: ParamRef,
    pub w2: ParamRef,
    pub b2: ParamRef,
}

#[derive(Clone)]
pub struct AttentionParams {
    pub w_q: ParamRef,
    pub b_q: ParamRef,
    pub w_k: ParamRef,
    pub b_k: ParamRef,
    pub w_v: ParamRef,
    pub b_v: ParamRef,
    pub w_o: ParamRef,
    pub b_o: ParamRef,
}

#[derive(Clone)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

pub struct Backbone {
    pub cfg: BackboneConfig,
    pub embed_w: ParamRef,
    pub embed_b: ParamRef,
    pub cls_token: ParamRef,
    pub pos_embed: ParamRef,
    pub blocks: Vec<BlockParams>,
    pub final_norm: LayerNormParams,
}

/// Per-sample record of the forward pass: the pre-FFN token tensors of each
/// block, the per-token route weights of adapted blocks, and the class-token
/// feature after the final norm.
pub struct ForwardTrace {
    pub pre_ffn: Vec<Tensor>,
    /// `route_weights[l]` is `Some([V, T])` when block `l` ran its adapter.
    pub route_weights: Vec<Option<Tensor>>,
    /// `[1, d]` class-token feature.
    pub class_feature: Tensor,
}

/// Deterministically initialize all backbone parameters from the config
/// seed: Gaussian(0, 0.02) weights, zero biases, unit norm gains. Everything
/// is frozen unless `unfreeze_last_block` is set, which unfreezes the last
/// block only.
pub fn init_backbone(cfg: &BackboneConfig, store: &mut ParamStore) -> Result<Backbone> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.embed_dim;
    let std = 0.02;

    let embed_w = store.register(Param::gaussian("embed.w", d, cfg.input_dim, std, &mut rng, false));
    let embed_b = store.register(Param::zeros("embed.b", 1, d, false));
    let cls_token = store.register(Param::gaussian("embed.cls", 1, d, std, &mut rng, false));
    let pos_embed = store.register(Param::gaussian(
        "embed.pos",
        cfg.seq_len(),
        d,
        std,
        &mut rng,
        false,
    ));

    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    for l in 0..cfg.num_blocks {
        let trainable = cfg.unfreeze_last_block && l == cfg.num_blocks - 1;
        let p = |name: String, rows, cols, rng: &mut ChaCha8Rng| {
            Param::gaussian(&name, rows, cols, std, rng, trainable)
        };
        let ln1 = LayerNormParams {
            gain: store.register(Param::ones(&format!("block{l}.ln1.g"), 1, d, trainable)),
            bias: store.register(Param::zeros(&format!("block{l}.ln1.b"), 1, d, trainable)),
        };
        let attn = AttentionParams {
            w_q: store.register(p(format!("block{l}.attn.wq"), d, d, &mut rng)),
            b_q: store.register(Param::zeros(&format!("block{l}.attn.bq"), 1, d, trainable)),
            w_k: store.register(p(format!("block{l}.attn.wk"), d, d, &mut rng)),
            b_k: store.register(Param::zeros(&format!("block{l}.attn.bk"), 1, d, trainable)),
            w_v: store.register(p(format!("block{l}.attn.wv"), d, d, &mut rng)),
            b_v: store.register(Param::zeros(&format!("block{l}.attn.bv"), 1, d, trainable)),
            w_o: store.register(p(format!("block{l}.attn.wo"), d, d, &mut rng)),
            b_o: store.register(Param::zeros(&format!("block{l}.attn.bo"), 1, d, trainable)),
        };
        let ln2 = LayerNormParams {
            gain: store.register(Param::ones(&format!("block{l}.ln2.g"), 1, d, trainable)),
            bias: store.register(Param::zeros(&format!("block{l}.ln2.b"), 1, d, trainable)),
        };
        let ffn = FfnParams {
            w1: store.register(p(format!("block{l}.ffn.w1"), cfg.mlp_hidden, d, &mut rng)),
            b1: store.register(Param::zeros(&format!("block{l}.ffn.b1"), 1, cfg.mlp_hidden, trainable)),
            w2: store.register(p(format!("block{l}.ffn.w2"), d, cfg.mlp_hidden, &mut rng)),
            b2: store.register(Param::zeros(&format!("block{l}.ffn.b2"), 1, d, trainable)),
        };
        blocks.push(BlockParams { ln1, attn, ln2, ffn });
    }
    let final_norm = LayerNormParams {
        gain: store.register(Param::ones("final.g", 1, d, false)),
        bias: store.register(Param::zeros("final.b", 1, d, false)),
    };
    Ok(Backbone {
        cfg: cfg.clone(),
        embed_w,
        embed_b,
        cls_token,
        pos_embed,
        blocks,
        final_norm,
    })
}

/// Linear layer in the row-vector convention: `x . W^T + b`.
pub fn linear(graph: &Graph, x: &Tensor, w: &ParamRef, b: &ParamRef) -> Result<Tensor> {
    let wt = graph.param(w).transpose();
    Ok(x.matmul(&wt)?.add_bias(&graph.param(b))?)
}

pub fn layer_norm(graph: &Graph, x: &Tensor, ln: &LayerNormParams) -> Result<Tensor> {
    Ok(x.layer_norm_rows(&graph.param(&ln.gain), &graph.param(&ln.bias))?)
}

/// The frozen FFN branch on an already-normalized input.
pub fn ffn_forward(graph: &Graph, u: &Tensor, ffn: &FfnParams) -> Result<Tensor> {
    let hidden = linear(graph, u, &ffn.w1, &ffn.b1)?.relu();
    linear(graph, &hidden, &ffn.w2, &ffn.b2)
}

fn attention(graph: &Graph, u: &Tensor, attn: &AttentionParams, num_heads: usize) -> Result<Tensor> {
    let (_, d) = u.shape();
    let dh = d / num_heads;
    let q = linear(graph, u, &attn.w_q, &attn.b_q)?;
    let k = linear(graph, u, &attn.w_k, &attn.b_k)?;
    let v = linear(graph, u, &attn.w_v, &attn.b_v)?;
    let mut heads = Vec::with_capacity(num_heads);
    let scale = 1.0 / (dh as f64).sqrt();
    for h in 0..num_heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let scores = qh.matmul(&kh.transpose())?.scale(scale);
        let weights = scores.softmax_rows(1.0)?;
        heads.push(weights.matmul(&vh)?);
    }
    let merged = graph.concat_cols(&heads)?;
    linear(graph, &merged, &attn.w_o, &attn.b_o)
}

/// Encode one sample (`token_count x input_dim` raw tokens) through the
/// backbone. When `adapters` is supplied, each of the last `P` blocks routes
/// its FFN input through the multi-expert adapter.
pub fn encode(
    graph: &Graph,
    backbone: &Backbone,
    tokens: &Tensor,
    adapters: Option<&MeaStack>,
) -> Result<ForwardTrace> {
    let cfg = &backbone.cfg;
    let (v, in_dim) = tokens.shape();
    if v != cfg.token_count || in_dim != cfg.input_dim {
        return Err(Error::Config(format!(
            "input tokens are {v}x{in_dim}, config expects {}x{}",
            cfg.token_count, cfg.input_dim
        )));
    }
    if let Some(mea) = adapters {
        if mea.cfg.adapted_blocks > cfg.num_blocks {
            return Err(Error::Config(format!(
                "adapter covers {} blocks but the backbone has only {}",
                mea.cfg.adapted_blocks, cfg.num_blocks
            )));
        }
    }

    let embedded = linear(graph, tokens, &backbone.embed_w, &backbone.embed_b)?;
    let with_cls = graph.concat_rows(&[graph.param(&backbone.cls_token), embedded])?;
    let mut x = with_cls.add(&graph.param(&backbone.pos_embed))?;

    let first_adapted = adapters
        .map(|m| cfg.num_blocks - m.cfg.adapted_blocks)
        .unwrap_or(usize::MAX);

    let mut pre_ffn = Vec::with_capacity(cfg.num_blocks);
    let mut route_weights = Vec::with_capacity(cfg.num_blocks);
    for (l, block) in backbone.blocks.iter().enumerate() {
        let attn_in = layer_norm(graph, &x, &block.ln1)?;
        let attn_out = attention(graph, &attn_in, &block.attn, cfg.num_heads)?;
        let x_tilde = x.add(&attn_out)?;
        pre_ffn.push(x_tilde.clone());

        if let Some(mea) = adapters.filter(|_| l >= first_adapted) {
            let (out, omega) =
                mea.blocks[l - first_adapted].adapted_ffn(graph, &x_tilde, &block.ln2, &block.ffn, &mea.cfg)?;
            route_weights.push(Some(omega));
            x = out;
        } else {
            let u = layer_norm(graph, &x_tilde, &block.ln2)?;
            let ffn_out = ffn_forward(graph, &u, &block.ffn)?;
            x = ffn_out.add(&x_tilde)?;
            route_weights.push(None);
        }
    }
    let normed = layer_norm(graph, &x, &backbone.final_norm)?;
    let class_feature = normed.slice_rows(0, 1)?;
    Ok(ForwardTrace {
        pre_ffn,
        route_weights,
        class_feature,
    })
}

/// Cut a single-channel image into non-overlapping `patch x patch` tokens
/// (row-major); the optional raw-array input path.
pub fn patchify(image: &[f64], height: usize, width: usize, patch: usize) -> Result<Vec<Vec<f64>>> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::Config(format!(
            "patch size {patch} must evenly divide image {height}x{width}"
        )));
    }
    if image.len() != height * width {
        return Err(Error::Config(format!(
            "image byte count {} does not match {height}x{width}",
            image.len()
        )));
    }
    let mut tokens = Vec::new();
    for py in (0..height).step_by(patch) {
        for px in (0..width).step_by(patch) {
            let mut tok = Vec::with_capacity(patch * patch);
            for dy in 0..patch {
                for dx in 0..patch {
                    tok.push(image[(py + dy) * width + (px + dx)]);
                }
            }
            tokens.push(tok);
        }
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mea::{init_mea, MeaConfig};
    use rand::{Rng, SeedableRng};

    fn tiny_cfg(seed: u64) -> BackboneConfig {
        BackboneConfig {
            num_blocks: 2,
            embed_dim: 8,
            num_heads: 2,
            token_count: 3,
            input_dim: 5,
            mlp_hidden: 8,
            seed,
            unfreeze_last_block: false,
        }
    }

    fn random_tokens(cfg: &BackboneConfig, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..cfg.token_count * cfg.input_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect()
    }

    #[test]
    fn same_seed_gives_bit_identical_parameters() {
        let cfg = tiny_cfg(5);
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        init_backbone(&cfg, &mut s1).unwrap();
        init_backbone(&cfg, &mut s2).unwrap();
        for (a, b) in s1.iter().zip(s2.iter()) {
            let (a, b) = (a.borrow(), b.borrow());
            assert_eq!(a.name, b.name);
            let bits_a: Vec<u64> = a.values.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{}", a.name);
        }
    }

    #[test]
    fn config_shapes_are_respected() {
        let cfg = BackboneConfig {
            num_blocks: 6,
            embed_dim: 64,
            num_heads: 4,
            token_count: 4,
            input_dim: 16,
            mlp_hidden: 128,
            seed: 0,
            unfreeze_last_block: false,
        };
        let mut store = ParamStore::new();
        let bb = init_backbone(&cfg, &mut store).unwrap();
        assert_eq!(bb.blocks.len(), 6);
        let g = Graph::new();
        let tokens = g.constant(random_tokens(&cfg, 1), cfg.token_count, cfg.input_dim);
        let trace = encode(&g, &bb, &tokens, None).unwrap();
        assert_eq!(trace.class_feature.shape(), (1, 64));
        assert_eq!(trace.pre_ffn.len(), 6);
    }

    #[test]
    fn indivisible_heads_are_rejected() {
        let mut cfg = tiny_cfg(0);
        cfg.embed_dim = 9;
        let mut store = ParamStore::new();
        assert!(init_backbone(&cfg, &mut store).is_err());
    }

    #[test]
    fn backbone_stays_frozen_through_backward() {
        let cfg = tiny_cfg(1);
        let mut store = ParamStore::new();
        let bb = init_backbone(&cfg, &mut store).unwrap();
        let g = Graph::new();
        let tokens = g.constant(random_tokens(&cfg, 2), cfg.token_count, cfg.input_dim);
        let trace = encode(&g, &bb, &tokens, None).unwrap();
        trace.class_feature.sum().backward().unwrap();
        for p in store.iter() {
            let p = p.borrow();
            assert!(!p.trainable);
            assert!(p.grad.iter().all(|g| *g == 0.0), "{} received grad", p.name);
        }
    }

    #[test]
    fn unfreeze_last_block_marks_only_the_last_block() {
        let mut cfg = tiny_cfg(2);
        cfg.unfreeze_last_block = true;
        let mut store = ParamStore::new();
        init_backbone(&cfg, &mut store).unwrap();
        for p in store.iter() {
            let p = p.borrow();
            let expect = p.name.starts_with("block1.");
            assert_eq!(p.trainable, expect, "{}", p.name);
        }
    }

    #[test]
    fn encode_outputs_are_finite_and_bounded() {
        let cfg = BackboneConfig::small(3);
        let mut store = ParamStore::new();
        let bb = init_backbone(&cfg, &mut store).unwrap();
        let g = Graph::new();
        let tokens = g.constant(random_tokens(&cfg, 4), cfg.token_count, cfg.input_dim);
        let trace = encode(&g, &bb, &tokens, None).unwrap();
        let h = trace.class_feature.values();
        assert!(h.iter().all(|v| v.is_finite()));
        let norm: f64 = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0 && norm < 1e3, "norm {norm}");
    }

    #[test]
    fn encode_is_a_pure_function_of_its_inputs() {
        let cfg = tiny_cfg(6);
        let mut store = ParamStore::new();
        let bb = init_backbone(&cfg, &mut store).unwrap();
        let toks = random_tokens(&cfg, 7);
        let run = || {
            let g = Graph::new();
            let t = g.constant(toks.clone(), cfg.token_count, cfg.input_dim);
            encode(&g, &bb, &t, None).unwrap().class_feature.values()
        };
        let a = run();
        let b = run();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn token_count_is_conserved_through_blocks() {
        let cfg = tiny_cfg(8);
        let mut store = ParamStore::new();
        let bb = init_backbone(&cfg, &mut store).unwrap();
        let g = Graph::new();
        let tokens = g.constant(random_tokens(&cfg, 9), cfg.token_count, cfg.input_dim);
        let trace = encode(&g, &bb, &tokens, None).unwrap();
        for pre in &trace.pre_ffn {
            assert_eq!(pre.shape(), (cfg.seq_len(), cfg.embed_dim));
        }
    }

    #[test]
    fn adapter_with_too_many_blocks_is_rejected() {
        let cfg = tiny_cfg(10);
        let mut store = ParamStore::new();
        let bb = init_backbone(&cfg, &mut store).unwrap();
        let mea_cfg = MeaConfig::new(2, 4, 0.1, cfg.num_blocks + 1, 1.0).unwrap();
        let mea = init_mea(&mea_cfg, cfg.embed_dim, &mut store, 99).unwrap();
        let g = Graph::new();
        let tokens = g.constant(random_tokens(&cfg, 11), cfg.token_count, cfg.input_dim);
        assert!(encode(&g, &bb, &tokens, Some(&mea)).is_err());
    }

    #[test]
    fn zero_scale_adapter_matches_plain_forward_bitwise() {
        let cfg = tiny_cfg(12);
        let mut store = ParamStore::new();
        let bb = init_backbone(&cfg, &mut store).unwrap();
        let mea_cfg = MeaConfig::new(2, 4, 0.0, 2, 1.0).unwrap();
        let mea = init_mea(&mea_cfg, cfg.embed_dim, &mut store, 100).unwrap();
        let toks = random_tokens(&cfg, 13);
        let g = Graph::new();
        let t = g.constant(toks.clone(), cfg.token_count, cfg.input_dim);
        let plain = encode(&g, &bb, &t, None).unwrap();
        let adapted = encode(&g, &bb, &t, Some(&mea)).unwrap();
        let pv = plain.class_feature.values();
        let av = adapted.class_feature.values();
        assert_eq!(
            pv.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            av.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        // Route weights are still recorded for the adapted blocks.
        assert!(adapted.route_weights.iter().filter(|w| w.is_some()).count() == 2);
    }

    #[test]
    fn patchify_produces_row_major_patches() {
        // 4x4 image, 2x2 patches -> 4 tokens of 4 values.
        let img: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let toks = patchify(&img, 4, 4, 2).unwrap();
        assert_eq!(toks.len(), 4);
        assert_eq!(toks[0], vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(toks[3], vec![10.0, 11.0, 14.0, 15.0]);
        assert!(patchify(&img, 4, 4, 3).is_err());
    }
}
