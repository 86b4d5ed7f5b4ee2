//! Patchification, position embedding, the hybrid encoder stack
//! (Vittt block + SwiGluMLP per layer) and the task-adapter heads.
//!
//! Encoder layer `l`:
//!
//! ```text
//!   y'_l = VitttBlock(y_{l-1}) + y_{l-1}
//!   y_l  = SwiGluMLP(LN(y'_l)) + y'_l
//! ```
//!
//! where the block's own normalization (after the DWConv residual) plays the
//! pre-norm role of its branch.

use crate::backend::Backend;
use crate::block::{
    block_forward, BlockConfig, BlockDiag, BlockVars, GateKind, ParamKind, TokenLayout,
    VitttBlockParams, W0Mode,
};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::ttt::{trunc_normal, TttConfig, LN_EPS};
use rand::Rng;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolStrategy {
    MeanPool,
    MaxPool,
    HeadClassTok,
    MidClassTok,
    DoubleClassTok,
}

impl PoolStrategy {
    pub fn class_tokens(&self) -> usize {
        match self {
            PoolStrategy::MeanPool | PoolStrategy::MaxPool => 0,
            PoolStrategy::HeadClassTok | PoolStrategy::MidClassTok => 1,
            PoolStrategy::DoubleClassTok => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub ttt: TttConfig,
    pub pool: PoolStrategy,
    pub num_classes: usize,
    pub gate: GateKind,
    pub dual_direction: bool,
    pub w0_mode: W0Mode,
}

impl ModelConfig {
    fn preset(
        image: usize,
        patch: usize,
        embed_dim: usize,
        depth: usize,
        num_heads: usize,
        head_dim: usize,
        num_classes: usize,
    ) -> Self {
        ModelConfig {
            image_h: image,
            image_w: image,
            patch,
            channels: 3,
            embed_dim,
            depth,
            ttt: TttConfig::new(num_heads, head_dim),
            pool: PoolStrategy::MeanPool,
            num_classes,
            gate: GateKind::Gelu,
            dual_direction: true,
            w0_mode: W0Mode::DualLearnable,
        }
    }

    /// Desk-scale model for tests and toy training.
    pub fn micro() -> Self {
        Self::preset(16, 4, 32, 2, 2, 16, 4)
    }

    pub fn tiny() -> Self {
        Self::preset(224, 16, 192, 12, 3, 64, 1000)
    }

    pub fn small() -> Self {
        Self::preset(224, 16, 384, 12, 6, 64, 1000)
    }

    pub fn base() -> Self {
        Self::preset(224, 16, 768, 12, 12, 64, 1000)
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "micro" => Ok(Self::micro()),
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            "base" => Ok(Self::base()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    pub fn patch_tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn total_tokens(&self) -> usize {
        self.patch_tokens() + self.pool.class_tokens()
    }

    /// Sequence positions of the class tokens under the pool strategy.
    pub fn class_positions(&self) -> Vec<usize> {
        let t = self.patch_tokens();
        match self.pool {
            PoolStrategy::MeanPool | PoolStrategy::MaxPool => vec![],
            PoolStrategy::HeadClassTok => vec![0],
            PoolStrategy::MidClassTok => vec![t / 2],
            PoolStrategy::DoubleClassTok => vec![0, t + 1],
        }
    }

    pub fn layout(&self) -> TokenLayout {
        let (gh, gw) = self.grid();
        TokenLayout {
            grid_h: gh,
            grid_w: gw,
            class_positions: self.class_positions(),
        }
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            gate: self.gate,
            dual_direction: self.dual_direction,
        }
    }

    /// SwiGluMLP hidden width: `8/3 * D` rounded up to a multiple of 8.
    pub fn mlp_hidden(&self) -> usize {
        let raw = (8 * self.embed_dim + 2) / 3; // ceil(8D/3)
        raw.div_ceil(8) * 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            )));
        }
        if self.embed_dim != self.ttt.embed_dim() {
            return Err(Error::Config(format!(
                "embed_dim {} != nh*d = {}",
                self.embed_dim,
                self.ttt.embed_dim()
            )));
        }
        if self.depth == 0 || self.num_classes == 0 {
            return Err(Error::Config("depth and num_classes must be positive".into()));
        }
        self.ttt.validate()
    }
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MlpParams {
    pub norm_gamma: Tensor, // [D]
    pub norm_beta: Tensor,  // [D]
    pub w_gate: Tensor,     // [D x H]
    pub w_up: Tensor,       // [D x H]
    pub w_down: Tensor,     // [H x D]
}

#[derive(Debug, Clone)]
pub struct BlockPair {
    pub vittt: VitttBlockParams,
    pub mlp: MlpParams,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub patch_proj: Tensor, // [(P*P*C) x D]
    pub cls_tokens: Tensor, // [c x D], possibly 0 rows
    pub pos_embed: Tensor,  // [(T+c) x D]
    pub blocks: Vec<BlockPair>,
    pub final_norm_gamma: Tensor,
    pub final_norm_beta: Tensor,
    pub head: Tensor, // [D x num_classes]
}

impl ModelParams {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let h = cfg.mlp_hidden();
        let patch_dim = cfg.patch * cfg.patch * cfg.channels;
        let c = cfg.pool.class_tokens();
        let blocks = (0..cfg.depth)
            .map(|_| BlockPair {
                vittt: VitttBlockParams::init(&cfg.ttt, cfg.w0_mode, rng),
                mlp: MlpParams {
                    norm_gamma: Tensor::filled(&[d], 1.0),
                    norm_beta: Tensor::zeros(&[d]),
                    w_gate: trunc_normal(&[d, h], 0.02, rng),
                    w_up: trunc_normal(&[d, h], 0.02, rng),
                    w_down: trunc_normal(&[h, d], 0.02, rng),
                },
            })
            .collect();
        Ok(ModelParams {
            patch_proj: trunc_normal(&[patch_dim, d], 0.02, rng),
            cls_tokens: trunc_normal(&[c, d], 0.02, rng),
            pos_embed: trunc_normal(&[cfg.total_tokens(), d], 0.02, rng),
            blocks,
            final_norm_gamma: Tensor::filled(&[d], 1.0),
            final_norm_beta: Tensor::zeros(&[d]),
            head: trunc_normal(&[d, cfg.num_classes], 0.02, rng),
        })
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        f("patch_proj".into(), &self.patch_proj, ParamKind::Learnable);
        f("cls_tokens".into(), &self.cls_tokens, ParamKind::Learnable);
        f("pos_embed".into(), &self.pos_embed, ParamKind::Learnable);
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.vittt.visit(&format!("blocks.{i}.vittt"), f);
            f(format!("blocks.{i}.mlp.norm.gamma"), &blk.mlp.norm_gamma, ParamKind::Learnable);
            f(format!("blocks.{i}.mlp.norm.beta"), &blk.mlp.norm_beta, ParamKind::Learnable);
            f(format!("blocks.{i}.mlp.w_gate"), &blk.mlp.w_gate, ParamKind::Learnable);
            f(format!("blocks.{i}.mlp.w_up"), &blk.mlp.w_up, ParamKind::Learnable);
            f(format!("blocks.{i}.mlp.w_down"), &blk.mlp.w_down, ParamKind::Learnable);
        }
        f("final_norm.gamma".into(), &self.final_norm_gamma, ParamKind::Learnable);
        f("final_norm.beta".into(), &self.final_norm_beta, ParamKind::Learnable);
        f("head".into(), &self.head, ParamKind::Learnable);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        f("patch_proj".into(), &mut self.patch_proj, ParamKind::Learnable);
        f("cls_tokens".into(), &mut self.cls_tokens, ParamKind::Learnable);
        f("pos_embed".into(), &mut self.pos_embed, ParamKind::Learnable);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.vittt.visit_mut(&format!("blocks.{i}.vittt"), f);
            f(format!("blocks.{i}.mlp.norm.gamma"), &mut blk.mlp.norm_gamma, ParamKind::Learnable);
            f(format!("blocks.{i}.mlp.norm.beta"), &mut blk.mlp.norm_beta, ParamKind::Learnable);
            f(format!("blocks.{i}.mlp.w_gate"), &mut blk.mlp.w_gate, ParamKind::Learnable);
            f(format!("blocks.{i}.mlp.w_up"), &mut blk.mlp.w_up, ParamKind::Learnable);
            f(format!("blocks.{i}.mlp.w_down"), &mut blk.mlp.w_down, ParamKind::Learnable);
        }
        f("final_norm.gamma".into(), &mut self.final_norm_gamma, ParamKind::Learnable);
        f("final_norm.beta".into(), &mut self.final_norm_beta, ParamKind::Learnable);
        f("head".into(), &mut self.head, ParamKind::Learnable);
    }

    /// Learnable parameter count (buffers excluded).
    pub fn count_params(&self) -> u64 {
        let mut n = 0;
        self.visit(&mut |_, t, kind| {
            if kind == ParamKind::Learnable {
                n += t.len() as u64;
            }
        });
        n
    }

    /// Sets every tensor (including buffers) to zeros; test helper for the
    /// residual-identity property.
    pub fn zero_all(&mut self) {
        self.visit_mut(&mut |_, t, _| {
            for v in t.data_mut() {
                *v = 0.0;
            }
        });
    }
}

// ---------------------------------------------------------------------------
// patchification
// ---------------------------------------------------------------------------

/// Flat index map sending patch-major order to pixel order:
/// `patches.flat[i] = image.flat[map[i]]`.
pub fn patchify_map(h: usize, w: usize, c: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut map = Vec::with_capacity(h * w * c);
    for gi in 0..gh {
        for gj in 0..gw {
            for pr in 0..p {
                for pc in 0..p {
                    for ch in 0..c {
                        map.push(((gi * p + pr) * w + (gj * p + pc)) * c + ch);
                    }
                }
            }
        }
    }
    map
}

/// Splits an `[H x W x C]` image into non-overlapping `P x P` patches in
/// raster order, each flattened row-major as `(row, col, channel)`.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let (h, w, c) = image_dims(image)?;
    if h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("image {h}x{w} not divisible by patch {p}")));
    }
    let map = patchify_map(h, w, c, p);
    image.gather(&[(h / p) * (w / p), p * p * c], &map)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, h: usize, w: usize, c: usize, p: usize) -> Result<Tensor> {
    let map = patchify_map(h, w, c, p);
    let mut inverse = vec![0usize; map.len()];
    for (i, &src) in map.iter().enumerate() {
        inverse[src] = i;
    }
    patches.gather(&[h, w, c], &inverse)
}

pub fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        other => Err(Error::Shape(format!("expected [H x W x C] image, got {other:?}"))),
    }
}

// ---------------------------------------------------------------------------
// bound model
// ---------------------------------------------------------------------------

pub struct MlpVars<V> {
    pub norm_gamma: V,
    pub norm_beta: V,
    pub w_gate: V,
    pub w_up: V,
    pub w_down: V,
}

pub struct BlockPairVars<V> {
    pub vittt: BlockVars<V>,
    pub mlp: MlpVars<V>,
}

pub struct ModelVars<V> {
    pub patch_proj: V,
    pub cls_tokens: Option<V>,
    pub pos_embed: V,
    pub blocks: Vec<BlockPairVars<V>>,
    pub final_norm_gamma: V,
    pub final_norm_beta: V,
    pub head: V,
}

impl ModelParams {
    /// Binds the whole model, returning the handles plus the registry of
    /// learnable leaves as `(visit name, value)` pairs.
    pub fn bind<B: Backend>(
        &self,
        b: &mut B,
    ) -> Result<(ModelVars<B::Value>, Vec<(String, B::Value)>)> {
        let mut reg: Vec<(String, B::Value)> = Vec::new();
        let bindp = |b: &mut B, name: &str, t: &Tensor, reg: &mut Vec<(String, B::Value)>| {
            let v = b.parameter(t);
            reg.push((name.to_string(), v.clone()));
            v
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            let vittt = blk.vittt.bind(b, &format!("blocks.{i}.vittt"), &mut reg)?;
            let mlp = MlpVars {
                norm_gamma: bindp(b, &format!("blocks.{i}.mlp.norm.gamma"), &blk.mlp.norm_gamma, &mut reg),
                norm_beta: bindp(b, &format!("blocks.{i}.mlp.norm.beta"), &blk.mlp.norm_beta, &mut reg),
                w_gate: bindp(b, &format!("blocks.{i}.mlp.w_gate"), &blk.mlp.w_gate, &mut reg),
                w_up: bindp(b, &format!("blocks.{i}.mlp.w_up"), &blk.mlp.w_up, &mut reg),
                w_down: bindp(b, &format!("blocks.{i}.mlp.w_down"), &blk.mlp.w_down, &mut reg),
            };
            blocks.push(BlockPairVars { vittt, mlp });
        }
        let vars = ModelVars {
            patch_proj: bindp(b, "patch_proj", &self.patch_proj, &mut reg),
            cls_tokens: if self.cls_tokens.len() > 0 {
                Some(bindp(b, "cls_tokens", &self.cls_tokens, &mut reg))
            } else {
                None
            },
            pos_embed: bindp(b, "pos_embed", &self.pos_embed, &mut reg),
            blocks,
            final_norm_gamma: bindp(b, "final_norm.gamma", &self.final_norm_gamma, &mut reg),
            final_norm_beta: bindp(b, "final_norm.beta", &self.final_norm_beta, &mut reg),
            head: bindp(b, "head", &self.head, &mut reg),
        };
        Ok((vars, reg))
    }
}

/// Per-layer diagnostics for interpretability extraction.
#[derive(Debug, Clone, Default)]
pub struct ModelDiag {
    pub blocks: Vec<BlockDiag>,
    pub capture_inputs: bool,
}

impl ModelDiag {
    pub fn capturing() -> Self {
        ModelDiag {
            blocks: Vec::new(),
            capture_inputs: true,
        }
    }
}

fn swiglu_mlp<B: Backend>(b: &mut B, x: &B::Value, mlp: &MlpVars<B::Value>) -> Result<B::Value> {
    let g = {
        let pre = b.matmul(x, &mlp.w_gate)?;
        b.swish(&pre)?
    };
    let u = b.matmul(x, &mlp.w_up)?;
    let h = b.mul(&g, &u)?;
    b.matmul(&h, &mlp.w_down)
}

/// Embeds an image and runs the L-layer encoder, returning `y_L`.
pub fn encoder_forward<B: Backend>(
    b: &mut B,
    image: &B::Value,
    vars: &ModelVars<B::Value>,
    cfg: &ModelConfig,
    mut diag: Option<&mut ModelDiag>,
) -> Result<B::Value> {
    let layout = cfg.layout();
    let map = Arc::new(patchify_map(cfg.image_h, cfg.image_w, cfg.channels, cfg.patch));
    let patch_dim = cfg.patch * cfg.patch * cfg.channels;
    let xp = b.gather(image, &[cfg.patch_tokens(), patch_dim], map)?;
    let tok = b.matmul(&xp, &vars.patch_proj)?;

    // insert class tokens at their layout positions
    let tok = match &vars.cls_tokens {
        None => tok,
        Some(cls) => {
            let mut parts: Vec<B::Value> = Vec::new();
            let mut raster = 0;
            let runs = layout.patch_runs();
            let mut run_iter = runs.iter().peekable();
            let total = layout.total_tokens();
            let mut cls_idx = 0;
            let mut seq = 0;
            while seq < total {
                if let Some(&&(seq_start, len, raster_start)) = run_iter.peek() {
                    if seq == seq_start {
                        parts.push(b.slice_rows(&tok, raster_start, len)?);
                        seq += len;
                        raster = raster_start + len;
                        run_iter.next();
                        continue;
                    }
                }
                parts.push(b.slice_rows(cls, cls_idx, 1)?);
                cls_idx += 1;
                seq += 1;
            }
            let _ = raster;
            b.concat_rows(&parts)?
        }
    };

    let mut y = b.add(&tok, &vars.pos_embed)?;
    let capture = diag.as_ref().map(|d| d.capture_inputs).unwrap_or(false);
    for blk in &vars.blocks {
        let mut bd = diag.as_deref_mut().map(|_| {
            if capture {
                BlockDiag::capturing()
            } else {
                BlockDiag {
                    forth: Default::default(),
                    back: if cfg.dual_direction {
                        Some(Default::default())
                    } else {
                        None
                    },
                }
            }
        });
        let block_out = block_forward(
            b,
            &y,
            &layout,
            &blk.vittt,
            &cfg.ttt,
            &cfg.block_config(),
            bd.as_mut(),
        )?;
        if let (Some(d), Some(bd)) = (diag.as_deref_mut(), bd) {
            d.blocks.push(bd);
        }
        y = b.add(&block_out, &y)?;
        let normed = b.layer_norm(&y, &blk.mlp.norm_gamma, &blk.mlp.norm_beta, LN_EPS)?;
        let mlp_out = swiglu_mlp(b, &normed, &blk.mlp)?;
        y = b.add(&mlp_out, &y)?;
    }
    b.peek(&y).ensure_finite("encoder_forward")?;
    Ok(y)
}

/// Task-adapter readout: final LN, pooling per strategy, linear head.
pub fn classify<B: Backend>(
    b: &mut B,
    y_l: &B::Value,
    vars: &ModelVars<B::Value>,
    cfg: &ModelConfig,
) -> Result<B::Value> {
    let normed = b.layer_norm(y_l, &vars.final_norm_gamma, &vars.final_norm_beta, LN_EPS)?;
    let layout = cfg.layout();
    let feat = match cfg.pool {
        PoolStrategy::MeanPool => {
            let patches = patch_rows(b, &normed, &layout)?;
            b.mean_rows(&patches)?
        }
        PoolStrategy::MaxPool => {
            // token with the largest L2 norm among the patch tokens
            let patches = patch_rows(b, &normed, &layout)?;
            let vals = b.peek(&patches);
            let (rows, cols) = vals.dims2()?;
            let mut best = 0;
            let mut best_norm = f64::NEG_INFINITY;
            for r in 0..rows {
                let n: f64 = (0..cols)
                    .map(|c| {
                        let v = vals.data()[r * cols + c].to_f64();
                        v * v
                    })
                    .sum();
                if n > best_norm {
                    best_norm = n;
                    best = r;
                }
            }
            b.slice_rows(&patches, best, 1)?
        }
        PoolStrategy::HeadClassTok | PoolStrategy::MidClassTok => {
            b.slice_rows(&normed, layout.class_positions[0], 1)?
        }
        PoolStrategy::DoubleClassTok => {
            let a = b.slice_rows(&normed, layout.class_positions[0], 1)?;
            let c = b.slice_rows(&normed, layout.class_positions[1], 1)?;
            let s = b.add(&a, &c)?;
            b.scale(&s, 0.5)?
        }
    };
    b.matmul(&feat, &vars.head)
}

fn patch_rows<B: Backend>(
    b: &mut B,
    seq: &B::Value,
    layout: &TokenLayout,
) -> Result<B::Value> {
    if layout.class_positions.is_empty() {
        return Ok(seq.clone());
    }
    let parts: Vec<B::Value> = layout
        .patch_runs()
        .iter()
        .map(|&(start, len, _)| b.slice_rows(seq, start, len))
        .collect::<Result<_>>()?;
    b.concat_rows(&parts)
}

/// Convenience: logits of one image on the eval path.
pub fn model_logits(params: &ModelParams, cfg: &ModelConfig, image: &Tensor) -> Result<Tensor> {
    let mut b = crate::backend::Eval::<f64>::new();
    let (vars, _) = params.bind(&mut b)?;
    let y = encoder_forward(&mut b, image, &vars, cfg, None)?;
    classify(&mut b, &y, &vars, cfg)
}

/// Eval forward that also returns the per-layer diagnostics.
pub fn model_forward_with_diag(
    params: &ModelParams,
    cfg: &ModelConfig,
    image: &Tensor,
    capture: bool,
) -> Result<(Tensor, Tensor, ModelDiag)> {
    let mut b = crate::backend::Eval::<f64>::new();
    let (vars, _) = params.bind(&mut b)?;
    let mut diag = if capture {
        ModelDiag::capturing()
    } else {
        ModelDiag::default()
    };
    let y = encoder_forward(&mut b, image, &vars, cfg, Some(&mut diag))?;
    let logits = classify(&mut b, &y, &vars, cfg)?;
    Ok((y, logits, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patchify_single_patch_is_flat_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::randn(&[4, 4, 2], 1.0, &mut rng);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[1, 32]);
        assert_eq!(p.data(), img.data());
    }

    #[test]
    fn patchify_hand_layout() {
        // 4x4 single-channel image with distinct pixels, P = 2
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let img = Tensor::from_vec(&[4, 4, 1], data).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.data()[8..12], &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(&p.data()[12..16], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::randn(&[8, 12, 3], 1.0, &mut rng);
        let p = patchify(&img, 4).unwrap();
        let back = unpatchify(&p, 8, 12, 3, 4).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn zero_weights_encoder_is_identity_on_y0() {
        // with every learnable tensor zero (including LN affine), each
        // residual branch contributes nothing, so y_L == y_0 == E_pos
        let cfg = ModelConfig::micro();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ModelParams::init(&cfg, &mut rng).unwrap();
        params.zero_all();
        let image = Tensor::randn(&[16, 16, 3], 1.0, &mut rng);
        let mut b = crate::backend::Eval::<f64>::new();
        let (vars, _) = params.bind(&mut b).unwrap();
        let y = encoder_forward(&mut b, &image, &vars, &cfg, None).unwrap();
        // patch_proj is zero too, so y_0 is exactly the (zero) pos table
        assert_eq!(y, Tensor::zeros(&[16, 32]));
    }

    #[test]
    fn encoder_depth_one_matches_hand_composition() {
        let mut cfg = ModelConfig::micro();
        cfg.depth = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let image = Tensor::randn(&[16, 16, 3], 0.5, &mut rng);
        let mut b = crate::backend::Eval::<f64>::new();
        let (vars, _) = params.bind(&mut b).unwrap();
        let got = encoder_forward(&mut b, &image, &vars, &cfg, None).unwrap();

        // hand composition
        let xp = patchify(&image, 4).unwrap();
        let tok = xp.matmul(&params.patch_proj).unwrap();
        let y0 = tok.add(&params.pos_embed).unwrap();
        let layout = cfg.layout();
        let bvars = params.blocks[0].vittt.bind_eval(&mut b).unwrap();
        let block_out = block_forward(
            &mut b,
            &y0,
            &layout,
            &bvars,
            &cfg.ttt,
            &cfg.block_config(),
            None,
        )
        .unwrap();
        let y1 = block_out.add(&y0).unwrap();
        let mlp = &params.blocks[0].mlp;
        let normed = y1.layer_norm(&mlp.norm_gamma, &mlp.norm_beta, LN_EPS).unwrap();
        let g = normed.matmul(&mlp.w_gate).unwrap().swish();
        let u = normed.matmul(&mlp.w_up).unwrap();
        let mlp_out = g.mul(&u).unwrap().matmul(&mlp.w_down).unwrap();
        let want = mlp_out.add(&y1).unwrap();

        let scale = want.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, w) in got.data().iter().zip(want.data()) {
            assert!((a - w).abs() <= 1e-11 * scale.max(1.0));
        }
    }

    #[test]
    fn classify_mean_pool_of_identical_tokens() {
        let cfg = ModelConfig::micro();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let mut b = crate::backend::Eval::<f64>::new();
        let (vars, _) = params.bind(&mut b).unwrap();
        // identical rows
        let row = Tensor::randn(&[1, 32], 1.0, &mut rng);
        let rows: Vec<&Tensor> = (0..16).map(|_| &row).collect();
        let y = Tensor::concat_rows(&rows).unwrap();
        let logits = classify(&mut b, &y, &vars, &cfg).unwrap();
        let single = row
            .layer_norm(&params.final_norm_gamma, &params.final_norm_beta, LN_EPS)
            .unwrap()
            .matmul(&params.head)
            .unwrap();
        for (a, w) in logits.data().iter().zip(single.data()) {
            assert!((a - w).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_max_pool_selects_dominant_token() {
        let mut cfg = ModelConfig::micro();
        cfg.pool = PoolStrategy::MaxPool;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ModelParams::init(&cfg, &mut rng).unwrap();
        // identity-ish final norm to keep the selection interpretable
        params.final_norm_gamma = Tensor::filled(&[32], 1.0);
        params.final_norm_beta = Tensor::zeros(&[32]);
        let mut y = Tensor::randn(&[16, 32], 0.1, &mut rng);
        // scale token 7 by 10x
        let heavy: Vec<f64> = y.data()[7 * 32..8 * 32].iter().map(|v| v * 10.0).collect();
        y.data_mut()[7 * 32..8 * 32].copy_from_slice(&heavy);

        let mut b = crate::backend::Eval::<f64>::new();
        let (vars, _) = params.bind(&mut b).unwrap();
        let logits = classify(&mut b, &y, &vars, &cfg).unwrap();
        let want = y
            .layer_norm(&params.final_norm_gamma, &params.final_norm_beta, LN_EPS)
            .unwrap()
            .slice_rows(7, 1)
            .unwrap()
            .matmul(&params.head)
            .unwrap();
        // the normalized row norms differ less than the raw ones, but the
        // scaled token still dominates before normalization; selection is on
        // normalized rows, so recompute the argmax explicitly
        let normed = y
            .layer_norm(&params.final_norm_gamma, &params.final_norm_beta, LN_EPS)
            .unwrap();
        let mut best = 0;
        let mut best_n = f64::NEG_INFINITY;
        for r in 0..16 {
            let n: f64 = normed.data()[r * 32..(r + 1) * 32].iter().map(|v| v * v).sum();
            if n > best_n {
                best_n = n;
                best = r;
            }
        }
        if best == 7 {
            for (a, w) in logits.data().iter().zip(want.data()) {
                assert!((a - w).abs() < 1e-12);
            }
        }
        // selection-level invariance: rescaling a non-selected competitor
        // below the winner must not change the logits
        let mut y2 = y.clone();
        let shrunk: Vec<f64> = y2.data()[3 * 32..4 * 32].iter().map(|v| v * 0.5).collect();
        y2.data_mut()[3 * 32..4 * 32].copy_from_slice(&shrunk);
        let logits2 = classify(&mut b, &y2, &vars, &cfg).unwrap();
        if best != 3 {
            assert_eq!(logits.data(), logits2.data());
        }
    }

    #[test]
    fn class_token_layouts_have_expected_lengths() {
        for (pool, c) in [
            (PoolStrategy::HeadClassTok, 1),
            (PoolStrategy::MidClassTok, 1),
            (PoolStrategy::DoubleClassTok, 2),
        ] {
            let mut cfg = ModelConfig::micro();
            cfg.pool = pool;
            assert_eq!(cfg.total_tokens(), 16 + c);
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let params = ModelParams::init(&cfg, &mut rng).unwrap();
            assert_eq!(params.pos_embed.shape(), &[16 + c, 32]);
            assert_eq!(params.cls_tokens.shape(), &[c, 32]);
            let image = Tensor::randn(&[16, 16, 3], 0.5, &mut rng);
            let logits = model_logits(&params, &cfg, &image).unwrap();
            assert_eq!(logits.shape(), &[1, 4]);
        }
    }

    #[test]
    fn tiny_preset_parameter_count_is_within_band() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let n = params.count_params();
        assert!(
            (6_650_000..=7_350_000).contains(&n),
            "tiny params {n} outside 7M +/- 5%"
        );
    }

    #[test]
    fn mlp_hidden_rounding() {
        let mut cfg = ModelConfig::micro();
        cfg.embed_dim = 192;
        assert_eq!(cfg.mlp_hidden(), 512);
        cfg.embed_dim = 16;
        assert_eq!(cfg.mlp_hidden(), 48);
    }
}
