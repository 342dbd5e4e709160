//! Temporal fusion: CLS averaging, pairwise CLS differences across the
//! boundary, attentional pooling and the TSN projection, assembled into the
//! cross-attention context of the multimodal decoder.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::{Side, TSN_DIM};
use crate::error::{bail_config, bail_data, Result};
use crate::nn::{join, Attention, Ctx, LayerNorm, Linear, Param, ParamFactory, Parameters, MASKED};
use crate::vision::FrameFeatures;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub d: usize,
    pub queries: usize,
    pub heads: usize,
    pub tsn_dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d: 64,
            queries: 16,
            heads: 4,
            tsn_dim: TSN_DIM,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 {
            bail_config!("fusion.queries must be positive");
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            bail_config!("fusion.d ({}) must be divisible by fusion.heads ({})", self.d, self.heads);
        }
        if self.tsn_dim == 0 {
            bail_config!("fusion.tsn_dim must be positive");
        }
        Ok(())
    }

    /// Context length: two pooled blocks plus the two TSN tokens.
    pub fn context_len(&self) -> usize {
        2 * self.queries + 2
    }
}

/// Number of TPD tokens for the given side counts.
pub fn tpd_count(n_before: usize, n_after: usize) -> usize {
    n_before * n_after + n_before + n_after
}

/// Mean over the frame axis of `[N_f, d]`.
pub fn average_cls(cls: &Tensor) -> Result<Tensor> {
    let n = cls.dim(0)?;
    if n == 0 {
        bail_data!("cannot average CLS over zero frames");
    }
    Ok(cls.mean(0)?)
}

/// `[N_pairs, d]`: before−after differences (before-major), then
/// before−boundary, then boundary−after.
pub fn compute_tpd(cls: &Tensor, sides: &[Side]) -> Result<Tensor> {
    let n = cls.dim(0)?;
    if n != sides.len() {
        bail_data!("{n} CLS rows for {} side labels", sides.len());
    }
    let idx = |side: Side| -> Vec<u32> {
        sides
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == side)
            .map(|(i, _)| i as u32)
            .collect()
    };
    let (before, boundary, after) = (idx(Side::Before), idx(Side::Boundary), idx(Side::After));
    if boundary.len() != 1 {
        bail_data!("expected exactly one boundary frame, found {}", boundary.len());
    }
    if before.is_empty() || after.is_empty() {
        bail_data!("pairwise differences need frames on both sides ({} before, {} after)", before.len(), after.len());
    }
    let b = boundary[0];
    let mut lhs = Vec::with_capacity(tpd_count(before.len(), after.len()));
    let mut rhs = Vec::with_capacity(lhs.capacity());
    for &i in &before {
        for &j in &after {
            lhs.push(i);
            rhs.push(j);
        }
    }
    for &i in &before {
        lhs.push(i);
        rhs.push(b);
    }
    for &j in &after {
        lhs.push(b);
        rhs.push(j);
    }
    let dev = cls.device();
    let l = cls.index_select(&Tensor::new(lhs.as_slice(), dev)?, 0)?;
    let r = cls.index_select(&Tensor::new(rhs.as_slice(), dev)?, 0)?;
    Ok((l - r)?)
}

/// Learned queries cross-attending over a token set, then layer norm.
pub struct AttnPool {
    pub queries: Param,
    pub attn: Attention,
    pub ln: LayerNorm,
}

impl AttnPool {
    pub fn new(f: &mut ParamFactory, n_q: usize, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            queries: f.normal(&[n_q, d], 0.02)?,
            attn: Attention::new(f, d, heads)?,
            ln: LayerNorm::new(f, d)?,
        })
    }

    pub fn n_queries(&self) -> usize {
        self.queries.dims()[0]
    }

    /// Pooled tokens before the layer norm. `tokens: [B, T, d]`, `key_mask`
    /// an additive bias broadcastable to `[B, heads, n_q, T]`.
    pub fn pool_pre_norm(&self, tokens: &Tensor, key_mask: Option<&Tensor>, ctx: &Ctx) -> Result<Tensor> {
        let (b, t, d) = tokens.dims3()?;
        if t == 0 {
            bail_data!("attentional pooling over an empty token set");
        }
        let q = self.queries.t().unsqueeze(0)?.broadcast_as((b, self.n_queries(), d))?.contiguous()?;
        self.attn.forward(&q, tokens, key_mask, ctx)
    }

    /// `[B, T, d] → [B, n_q, d]`.
    pub fn forward_batch(&self, tokens: &Tensor, key_mask: Option<&Tensor>, ctx: &Ctx) -> Result<Tensor> {
        self.ln.forward(&self.pool_pre_norm(tokens, key_mask, ctx)?)
    }

    /// `[T, d] → [n_q, d]`.
    pub fn forward(&self, tokens: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        Ok(self.forward_batch(&tokens.unsqueeze(0)?, None, ctx)?.squeeze(0)?)
    }
}

impl Parameters for AttnPool {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        f(join(prefix, "queries"), &self.queries);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln.visit(&join(prefix, "ln"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "queries"), &mut self.queries);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln.visit_mut(&join(prefix, "ln"), f);
    }
}

/// Shared linear map from TSN features to the embedding dimension.
pub struct TsnProjection {
    pub proj: Linear,
}

impl TsnProjection {
    pub fn new(f: &mut ParamFactory, tsn_dim: usize, d: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(f, tsn_dim, d, true)?,
        })
    }

    fn tsn_dim(&self) -> usize {
        self.proj.weight.dims()[1]
    }

    /// `[B, 2, tsn_dim] → [B, 2, d]`.
    pub fn forward_batch(&self, tsn: &Tensor) -> Result<Tensor> {
        self.proj.forward(tsn)
    }

    /// Rows: before, after.
    pub fn forward(&self, before: &[f32], after: &[f32]) -> Result<Tensor> {
        let dim = self.tsn_dim();
        if before.len() != dim || after.len() != dim {
            bail_data!("TSN features must have length {dim}, got {} and {}", before.len(), after.len());
        }
        let dtype = self.proj.weight.var().dtype();
        let dev = self.proj.weight.var().device();
        let x = Tensor::cat(
            &[Tensor::from_slice(before, (1, dim), dev)?, Tensor::from_slice(after, (1, dim), dev)?],
            0,
        )?
        .to_dtype(dtype)?;
        self.proj.forward(&x)
    }
}

impl Parameters for TsnProjection {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.proj.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.proj.visit_mut(prefix, f);
    }
}

/// Cross-attention context `[B, T_ctx, d]` and averaged CLS `[B, d]`.
#[derive(Debug, Clone)]
pub struct FusedContext {
    pub tokens: Tensor,
    pub pooled_cls: Tensor,
}

impl FusedContext {
    pub fn batch_size(&self) -> usize {
        self.tokens.dims()[0]
    }

    /// The `i`-th element as a batch of one.
    pub fn select(&self, i: usize) -> Result<FusedContext> {
        Ok(FusedContext {
            tokens: self.tokens.narrow(0, i, 1)?,
            pooled_cls: self.pooled_cls.narrow(0, i, 1)?,
        })
    }
}

/// One record's inputs to [`TemporalFusion::fuse_batch`].
pub struct FuseInput<'a> {
    pub features: &'a FrameFeatures,
    pub sides: &'a [Side],
    pub tsn_before: &'a [f32],
    pub tsn_after: &'a [f32],
}

pub struct TemporalFusion {
    pub config: FusionConfig,
    pub pool_frames: AttnPool,
    pub pool_tpd: AttnPool,
    pub tsn_proj: TsnProjection,
}

/// Right-pads `[T_i, d]` tensors to a `[B, T_max, d]` batch and returns the
/// additive key mask `[B, 1, 1, T_max]`.
fn pad_stack(parts: &[Tensor], d: usize, device: &Device) -> Result<(Tensor, Option<Tensor>)> {
    let lens: Vec<usize> = parts.iter().map(|p| p.dims()[0]).collect();
    let t_max = lens.iter().copied().max().unwrap_or(0);
    if lens.iter().all(|&l| l == t_max) {
        return Ok((Tensor::stack(parts, 0)?, None));
    }
    let dtype = parts[0].dtype();
    let mut padded = Vec::with_capacity(parts.len());
    let mut mask = Vec::with_capacity(parts.len() * t_max);
    for (p, &l) in parts.iter().zip(&lens) {
        padded.push(if l < t_max {
            Tensor::cat(&[p, &Tensor::zeros((t_max - l, d), dtype, device)?], 0)?
        } else {
            p.clone()
        });
        mask.extend((0..t_max).map(|k| if k < l { 0.0 } else { MASKED }));
    }
    let mask = Tensor::from_vec(mask, (parts.len(), 1, 1, t_max), device)?.to_dtype(dtype)?;
    Ok((Tensor::stack(&padded, 0)?, Some(mask)))
}

impl TemporalFusion {
    pub fn new(f: &mut ParamFactory, config: &FusionConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            pool_frames: AttnPool::new(f, config.queries, config.d, config.heads)?,
            pool_tpd: AttnPool::new(f, config.queries, config.d, config.heads)?,
            tsn_proj: TsnProjection::new(f, config.tsn_dim, config.d)?,
        })
    }

    /// Fuses a batch of records; shorter token sets are padded and masked.
    pub fn fuse_batch(&self, inputs: &[FuseInput<'_>], ctx: &Ctx) -> Result<FusedContext> {
        if inputs.is_empty() {
            bail_data!("cannot fuse an empty batch");
        }
        let d = self.config.d;
        let dim = self.config.tsn_dim;
        let device = self.tsn_proj.proj.weight.var().device().clone();
        let mut frame_sets = Vec::with_capacity(inputs.len());
        let mut tpd_sets = Vec::with_capacity(inputs.len());
        let mut cls_means = Vec::with_capacity(inputs.len());
        let mut tsn = Vec::with_capacity(inputs.len() * 2 * dim);
        for inp in inputs {
            let (nf, p, _) = inp.features.patch_tokens.dims3()?;
            if inp.tsn_before.len() != dim || inp.tsn_after.len() != dim {
                bail_data!("TSN features must have length {dim}, got {} and {}", inp.tsn_before.len(), inp.tsn_after.len());
            }
            frame_sets.push(inp.features.patch_tokens.reshape((nf * p, d))?);
            tpd_sets.push(compute_tpd(&inp.features.cls, inp.sides)?);
            cls_means.push(average_cls(&inp.features.cls)?);
            tsn.extend_from_slice(inp.tsn_before);
            tsn.extend_from_slice(inp.tsn_after);
        }
        let (frames, frame_mask) = pad_stack(&frame_sets, d, &device)?;
        let (tpd, tpd_mask) = pad_stack(&tpd_sets, d, &device)?;
        let pooled_frames = self.pool_frames.forward_batch(&frames, frame_mask.as_ref(), ctx)?;
        let pooled_tpd = self.pool_tpd.forward_batch(&tpd, tpd_mask.as_ref(), ctx)?;
        let dtype = frames.dtype();
        let tsn = Tensor::from_vec(tsn, (inputs.len(), 2, dim), &device)?.to_dtype(dtype)?;
        let tsn = self.tsn_proj.forward_batch(&tsn)?;
        Ok(FusedContext {
            tokens: Tensor::cat(&[&pooled_frames, &pooled_tpd, &tsn], 1)?,
            pooled_cls: Tensor::stack(&cls_means, 0)?,
        })
    }

    /// Single-record fusion: `tokens [T_ctx, d]`, `pooled_cls [d]` (batch
    /// axis kept at size 1).
    pub fn fuse(&self, features: &FrameFeatures, sides: &[Side], tsn_before: &[f32], tsn_after: &[f32], ctx: &Ctx) -> Result<FusedContext> {
        self.fuse_batch(
            &[FuseInput {
                features,
                sides,
                tsn_before,
                tsn_after,
            }],
            ctx,
        )
    }
}

impl Parameters for TemporalFusion {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.pool_frames.visit(&join(prefix, "pool_frames"), f);
        self.pool_tpd.visit(&join(prefix, "pool_tpd"), f);
        self.tsn_proj.visit(&join(prefix, "tsn_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.pool_frames.visit_mut(&join(prefix, "pool_frames"), f);
        self.pool_tpd.visit_mut(&join(prefix, "pool_tpd"), f);
        self.tsn_proj.visit_mut(&join(prefix, "tsn_proj"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use Side::*;

    fn rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    fn tensor(rows: &[Vec<f64>]) -> Tensor {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu).unwrap()
    }

    fn sides(nb: usize, na: usize) -> Vec<Side> {
        let mut s = vec![Before; nb];
        s.push(Boundary);
        s.extend(vec![After; na]);
        s
    }

    fn small() -> FusionConfig {
        FusionConfig {
            d: 8,
            queries: 4,
            heads: 2,
            tsn_dim: 6,
        }
    }

    #[test]
    fn average_matches_loop() {
        let r = rows(3, 5, 1);
        let got = average_cls(&tensor(&r)).unwrap().to_vec1::<f64>().unwrap();
        for j in 0..5 {
            let mut s = 0.0;
            for row in &r {
                s += row[j];
            }
            assert!((got[j] - s / 3.0).abs() < 1e-6);
        }
        let sym = tensor(&[vec![1.0, -2.0], vec![-1.0, 2.0]]);
        assert_eq!(average_cls(&sym).unwrap().to_vec1::<f64>().unwrap(), vec![0.0, 0.0]);
        assert!(average_cls(&Tensor::zeros((0, 4), DType::F64, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn tpd_hand_enumerated() {
        // Rows: before 0, before 1, boundary 2, after 3.
        let r = rows(4, 3, 2);
        let got = compute_tpd(&tensor(&r), &sides(2, 1)).unwrap().to_vec2::<f64>().unwrap();
        let diff = |a: usize, b: usize| -> Vec<f64> { r[a].iter().zip(&r[b]).map(|(x, y)| x - y).collect() };
        let want = vec![diff(0, 3), diff(1, 3), diff(0, 2), diff(1, 2), diff(2, 3)];
        assert_eq!(got.len(), 5);
        for (g, w) in got.iter().zip(&want) {
            for (a, b) in g.iter().zip(w) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tpd_identical_rows_are_zero() {
        let r = vec![vec![0.5, -1.0, 2.0]; 21];
        let got = compute_tpd(&tensor(&r), &sides(10, 10)).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(got.len(), 120);
        assert!(got.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn tpd_rejects_degenerate_sides() {
        let r = rows(3, 2, 3);
        assert!(compute_tpd(&tensor(&r[..2]), &[Boundary, After]).is_err());
        assert!(compute_tpd(&tensor(&r[..2]), &[Before, Boundary]).is_err());
        assert!(compute_tpd(&tensor(&r), &[Before, After, After]).is_err());
    }

    #[test]
    fn tpd_antisymmetry_under_side_swap() {
        // Frames 0,1 before, 2 boundary, 3,4 after; swapping labels reverses time.
        let r = rows(5, 4, 4);
        let fwd = compute_tpd(&tensor(&r), &sides(2, 2)).unwrap().to_vec2::<f64>().unwrap();
        let rev: Vec<Vec<f64>> = r.iter().rev().cloned().collect();
        let bwd = compute_tpd(&tensor(&rev), &sides(2, 2)).unwrap().to_vec2::<f64>().unwrap();
        // Reversed before = original after (reversed order), and vice versa.
        let neg = |v: &Vec<f64>| v.iter().map(|x| -x).collect::<Vec<f64>>();
        let close = |a: &Vec<f64>, b: &Vec<f64>| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        for i in 0..2 {
            for j in 0..2 {
                // bwd pair (i, j): rev[i] - rev[3 + j] = r[4 - i] - r[1 - j]
                // fwd pair (1 - j, 4 - i - 3): r[1 - j] - r[4 - i]
                let f = &fwd[(1 - j) * 2 + (1 - i)];
                assert!(close(&bwd[i * 2 + j], &neg(f)));
            }
        }
        // Boundary blocks swap and negate.
        for i in 0..2 {
            // bwd before-boundary i: r[4 - i] - r[2]; fwd boundary-after (1 - i): r[2] - r[4 - i]
            assert!(close(&bwd[4 + i], &neg(&fwd[6 + (1 - i)])));
            assert!(close(&bwd[6 + i], &neg(&fwd[4 + (1 - i)])));
        }
    }

    proptest::proptest! {
        #[test]
        fn tpd_count_formula(nb in 1usize..=10, na in 1usize..=10) {
            let r = vec![vec![0.0f64; 2]; nb + na + 1];
            let t = compute_tpd(&tensor(&r), &sides(nb, na)).unwrap();
            proptest::prop_assert_eq!(t.dims()[0], nb * na + nb + na);
            proptest::prop_assert_eq!(t.dims()[0], tpd_count(nb, na));
        }
    }

    fn pool(seed: u64, cfg: &FusionConfig) -> AttnPool {
        AttnPool::new(&mut ParamFactory::new(seed, DType::F64), cfg.queries, cfg.d, cfg.heads).unwrap()
    }

    #[test]
    fn pool_shape_and_permutation_invariance() {
        let p = pool(5, &FusionConfig::default());
        let r = rows(7, 64, 6);
        let a = p.forward(&tensor(&r), &Ctx::eval()).unwrap();
        assert_eq!(a.dims(), &[16, 64]);
        let mut perm = r.clone();
        perm.rotate_left(3);
        perm.swap(0, 4);
        let b = p.forward(&tensor(&perm), &Ctx::eval()).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-6);
    }

    #[test]
    fn pool_single_token_rows_depend_only_on_it() {
        let cfg = small();
        let p = pool(7, &cfg);
        let v = rows(1, 8, 8);
        let out = p.pool_pre_norm(&tensor(&v).unsqueeze(0).unwrap(), None, &Ctx::eval()).unwrap();
        let out = out.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        // With a single key every query puts weight 1 on it: all rows equal o(v(x)).
        for row in &out[1..] {
            for (a, b) in row.iter().zip(&out[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(p.forward(&Tensor::zeros((0, 8), DType::F64, &Device::Cpu).unwrap(), &Ctx::eval()).is_err());
    }

    fn set_identity(lin: &Linear, d: usize) {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        lin.weight.set_f64(&w).unwrap();
        lin.bias.as_ref().unwrap().set_f64(&vec![0.0; d]).unwrap();
    }

    #[test]
    fn pool_rows_in_convex_hull() {
        let cfg = small();
        let p = pool(9, &cfg);
        set_identity(&p.attn.v.base, 8);
        set_identity(&p.attn.o.base, 8);
        let r = rows(5, 8, 10);
        let out = p.pool_pre_norm(&tensor(&r).unsqueeze(0).unwrap(), None, &Ctx::eval()).unwrap();
        let out = out.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        // Each head mixes its own slice; per coordinate the value must lie in
        // the range spanned by the inputs.
        for row in &out {
            for j in 0..8 {
                let lo = r.iter().map(|x| x[j]).fold(f64::INFINITY, f64::min);
                let hi = r.iter().map(|x| x[j]).fold(f64::NEG_INFINITY, f64::max);
                assert!(row[j] >= lo - 1e-12 && row[j] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn tsn_projection_oracle() {
        let cfg = small();
        let t = TsnProjection::new(&mut ParamFactory::new(11, DType::F64), cfg.tsn_dim, cfg.d).unwrap();
        t.proj.bias.as_ref().unwrap().set_f64(&(0..8).map(|i| i as f64 * 0.1).collect::<Vec<_>>()).unwrap();
        let before: Vec<f32> = (0..6).map(|i| i as f32 * 0.5 - 1.0).collect();
        let after = vec![0.0f32; 6];
        let out = t.forward(&before, &after).unwrap().to_vec2::<f64>().unwrap();
        let w = t.proj.weight.to_f64_vec().unwrap();
        let b = t.proj.bias.as_ref().unwrap().to_f64_vec().unwrap();
        for o in 0..8 {
            let mut s = b[o];
            for i in 0..6 {
                s += w[o * 6 + i] * before[i] as f64;
            }
            assert!((out[0][o] - s).abs() < 1e-6);
            assert!((out[1][o] - b[o]).abs() < 1e-12);
        }
        let same = t.forward(&before, &before).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(same[0], same[1]);
        assert!(t.forward(&before[..5], &after).is_err());
        t.proj.bias.as_ref().unwrap().set_f64(&[0.0; 8]).unwrap();
        let zero = t.forward(&after, &after).unwrap().to_vec2::<f64>().unwrap();
        assert!(zero.iter().flatten().all(|&x| x == 0.0));
    }

    fn features(nf: usize, p: usize, d: usize, seed: u64) -> FrameFeatures {
        let patch = rows(nf * p, d, seed);
        FrameFeatures {
            patch_tokens: tensor(&patch).reshape((nf, p, d)).unwrap(),
            cls: tensor(&rows(nf, d, seed + 100)),
        }
    }

    #[test]
    fn fuse_layout_and_isolation() {
        let fusion = TemporalFusion::new(&mut ParamFactory::new(12, DType::F64), &FusionConfig { tsn_dim: 2048, ..FusionConfig::default() }).unwrap();
        let feats = features(5, 3, 64, 13);
        let s = sides(2, 2);
        let tb = vec![0.3f32; 2048];
        let ta = vec![-0.1f32; 2048];
        let a = fusion.fuse(&feats, &s, &tb, &ta, &Ctx::eval()).unwrap();
        assert_eq!(a.tokens.dims(), &[1, 34, 64]);
        assert_eq!(a.pooled_cls.dims(), &[1, 64]);
        let b = fusion.fuse(&feats, &s, &tb, &ta, &Ctx::eval()).unwrap();
        assert_eq!(a.tokens.to_vec3::<f64>().unwrap(), b.tokens.to_vec3::<f64>().unwrap());

        let mut zeroed = fusion;
        zeroed.pool_tpd.visit_mut("", &mut |_, p| {
            let n = p.elem_count();
            p.set_f64(&vec![0.0; n]).unwrap();
        });
        let z = zeroed.fuse(&feats, &s, &tb, &ta, &Ctx::eval()).unwrap();
        let (za, aa) = (z.tokens.to_vec3::<f64>().unwrap(), a.tokens.to_vec3::<f64>().unwrap());
        for k in 0..34 {
            if (16..32).contains(&k) {
                assert!(za[0][k].iter().all(|&x| x == 0.0));
            } else {
                assert_eq!(za[0][k], aa[0][k]);
            }
        }
    }

    #[test]
    fn batched_fuse_matches_single() {
        let cfg = small();
        let fusion = TemporalFusion::new(&mut ParamFactory::new(14, DType::F64), &cfg).unwrap();
        let f1 = features(3, 2, 8, 15);
        let f2 = features(6, 2, 8, 16);
        let (s1, s2) = (sides(1, 1), sides(2, 3));
        let t1 = vec![0.5f32; 6];
        let t2 = vec![-0.5f32; 6];
        let batch = fusion
            .fuse_batch(
                &[
                    FuseInput { features: &f1, sides: &s1, tsn_before: &t1, tsn_after: &t2 },
                    FuseInput { features: &f2, sides: &s2, tsn_before: &t2, tsn_after: &t1 },
                ],
                &Ctx::eval(),
            )
            .unwrap();
        let one = fusion.fuse(&f1, &s1, &t1, &t2, &Ctx::eval()).unwrap();
        let two = fusion.fuse(&f2, &s2, &t2, &t1, &Ctx::eval()).unwrap();
        for (i, single) in [one, two].iter().enumerate() {
            let got = batch.select(i).unwrap();
            let diff = (got.tokens - &single.tokens).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-10, "{diff}");
            let diff = (got.pooled_cls - &single.pooled_cls).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-12);
        }
    }
}
