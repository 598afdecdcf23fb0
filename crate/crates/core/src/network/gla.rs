//! Global-local self-attention.
//!
//! Local path: channel attention `S = σ(W₂ W₁ avgpool(E²))` recalibrates E²,
//! which is tiled into non-overlapping `b × b` blocks `R_k` (row-major).
//! Global path: `G = S_s ⊗ S_c ⊗ E⁴` with channel attention as above and a
//! spatial score `σ(W_s * [max_c E⁴, mean_c E⁴])` from a 1×1 convolution.
//! `G̃` is a bias-free 1×1 projection of `G` to the local channel count; each
//! block is weighted by `Φ_k = cos(R_k, G̃)`, the weighted blocks are mixed
//! by a learned projection over the block axis into `groups` slabs, and the
//! slabs are stacked along channels to give `L` with the shape of E⁴.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::nn::{kaiming_uniform, Bound, Conv2d, Linear, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

/// Shapes of the attention module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlaConfig {
    /// Channels of E².
    pub local_channels: usize,
    /// Spatial extent of the (square) E² map.
    pub local_extent: usize,
    /// Channels of E⁴.
    pub global_channels: usize,
    /// Block side; also the spatial extent of E⁴.
    pub block_extent: usize,
    /// Channel reduction of the attention MLPs.
    pub mlp_reduction: usize,
}

impl GlaConfig {
    pub fn validate(&self) -> Result<()> {
        let b = self.block_extent;
        if self.local_channels == 0 || self.global_channels == 0 || b == 0 {
            return Err(Error::invalid("attention sizes must be positive"));
        }
        if self.mlp_reduction == 0 {
            return Err(Error::invalid("MLP reduction must be positive"));
        }
        if !self.local_extent.is_multiple_of(b) {
            return Err(Error::invalid(format!(
                "local extent {} is not divisible into {b}x{b} blocks",
                self.local_extent
            )));
        }
        if !self.global_channels.is_multiple_of(self.local_channels) {
            return Err(Error::invalid(format!(
                "global channels {} are not a multiple of local channels {}",
                self.global_channels, self.local_channels
            )));
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        (self.local_extent / self.block_extent).pow(2)
    }

    /// Slabs of the block-axis projection (global / local channels).
    pub fn groups(&self) -> usize {
        self.global_channels / self.local_channels
    }

    fn hidden(&self, channels: usize) -> usize {
        (channels / self.mlp_reduction).max(1)
    }
}

/// Outputs of one attention pass over N items.
#[derive(Clone, Copy, Debug)]
pub struct GlaOutput<'t> {
    /// Aggregated local feature L, (N, global_channels, b, b).
    pub local: Var<'t>,
    /// Recalibrated global feature G, (N, global_channels, b, b).
    pub global: Var<'t>,
    /// Cosine score of every block, (N, n_blocks).
    pub scores: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct Gla {
    pub cfg: GlaConfig,
    pub local_fc1: Linear,
    pub local_fc2: Linear,
    pub global_fc1: Linear,
    pub global_fc2: Linear,
    pub spatial: Conv2d,
    /// G → G̃ projection, (local, global, 1, 1), no bias.
    pub project_global: ParamId,
    /// Block-axis projection weight (groups, n_blocks) and bias (groups, 1).
    pub project_blocks: ParamId,
    pub project_bias: ParamId,
}

fn check_map(op: &'static str, x: &Var<'_>, channels: usize, extent: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != channels || s[2] != extent || s[3] != extent {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![0, channels, extent, extent],
            rhs: s,
        });
    }
    Ok(())
}

/// Two-layer channel MLP on the spatially averaged map, sigmoid-bounded.
fn channel_score<'t>(p: &Bound<'t>, fc1: &Linear, fc2: &Linear, x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let pooled = x.adaptive_avg_pool2d(1, 1)?.reshape(&[s[0], s[1]])?;
    Ok(fc2.forward(p, fc1.forward(p, pooled)?)?.sigmoid())
}

/// Splits (N, C, H, W) into row-major `b × b` blocks, flattened to
/// (N, n_blocks, C·b·b) in (channel, row, col) order.
pub fn tile_blocks(x: Var<'_>, b: usize) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 4 || b == 0 || !s[2].is_multiple_of(b) || !s[3].is_multiple_of(b) {
        return Err(Error::invalid(format!("cannot tile {s:?} into {b}x{b} blocks")));
    }
    let (n, c, nr, nc) = (s[0], s[1], s[2] / b, s[3] / b);
    x.reshape(&[n, c, nr, b, nc, b])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[n, nr * nc, c * b * b])
}

/// Inverse of [`tile_blocks`] for an `h × w` map with `c` channels.
pub fn untile_blocks(blocks: Var<'_>, c: usize, h: usize, w: usize, b: usize) -> Result<Var<'_>> {
    let n = blocks.shape()[0];
    let (nr, nc) = (h / b, w / b);
    blocks
        .reshape(&[n, nr, nc, c, b, b])?
        .permute(&[0, 3, 1, 4, 2, 5])?
        .reshape(&[n, c, h, w])
}

impl Gla {
    pub fn new(store: &mut ParamStore, name: &str, cfg: GlaConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (cl, cg) = (cfg.local_channels, cfg.global_channels);
        let local_fc1 = Linear::new(store, &format!("{name}.local_fc1"), cl, cfg.hidden(cl), rng)?;
        let local_fc2 = Linear::new(store, &format!("{name}.local_fc2"), cfg.hidden(cl), cl, rng)?;
        let global_fc1 = Linear::new(store, &format!("{name}.global_fc1"), cg, cfg.hidden(cg), rng)?;
        let global_fc2 = Linear::new(store, &format!("{name}.global_fc2"), cfg.hidden(cg), cg, rng)?;
        let spatial = Conv2d::new(store, &format!("{name}.spatial"), 2, 1, 1, 1, rng)?;
        let project_global = store.add(
            format!("{name}.project_global.w"),
            kaiming_uniform(&[cl, cg, 1, 1], cg, rng),
        )?;
        let nb = cfg.n_blocks();
        let project_blocks = store.add(
            format!("{name}.project_blocks.w"),
            kaiming_uniform(&[cfg.groups(), nb], nb, rng),
        )?;
        let project_bias = store.add(
            format!("{name}.project_blocks.b"),
            Tensor::zeros(&[cfg.groups(), 1]),
        )?;
        Ok(Self {
            cfg,
            local_fc1,
            local_fc2,
            global_fc1,
            global_fc2,
            spatial,
            project_global,
            project_blocks,
            project_bias,
        })
    }

    /// `S_c^L` for E² (N, C_l, H, W): (N, C_l) in (0, 1).
    pub fn local_channel_attention<'t>(&self, p: &Bound<'t>, e2: Var<'t>) -> Result<Var<'t>> {
        check_map(
            "local attention",
            &e2,
            self.cfg.local_channels,
            self.cfg.local_extent,
        )?;
        channel_score(p, &self.local_fc1, &self.local_fc2, e2)
    }

    /// Blocks `R_k = S ⊗ E²_k`, (N, n_blocks, C·b·b).
    pub fn recalibrate_local<'t>(&self, e2: Var<'t>, score: Var<'t>) -> Result<Var<'t>> {
        let s = e2.shape();
        if s.len() != 4 || score.shape() != [s[0], s[1]] {
            return Err(Error::ShapeMismatch {
                op: "recalibrate_local",
                lhs: s,
                rhs: score.shape(),
            });
        }
        let weighted = e2.mul(score.reshape(&[s[0], s[1], 1, 1])?)?;
        tile_blocks(weighted, self.cfg.block_extent)
    }

    /// Spatial score `S_s^G`, (N, 1, b, b).
    pub fn global_spatial_attention<'t>(&self, p: &Bound<'t>, e4: Var<'t>) -> Result<Var<'t>> {
        let pooled = e4
            .tape()
            .concat(&[e4.max_axis(1, true)?, e4.mean_axis(1, true)?], 1)?;
        Ok(self.spatial.forward(p, pooled)?.sigmoid())
    }

    /// `G = S_s ⊗ S_c ⊗ E⁴`.
    pub fn global_attention<'t>(&self, p: &Bound<'t>, e4: Var<'t>) -> Result<Var<'t>> {
        let b = self.cfg.block_extent;
        check_map("global attention", &e4, self.cfg.global_channels, b)?;
        let n = e4.shape()[0];
        let sc = channel_score(p, &self.global_fc1, &self.global_fc2, e4)?.reshape(&[
            n,
            self.cfg.global_channels,
            1,
            1,
        ])?;
        let ss = self.global_spatial_attention(p, e4)?;
        e4.mul(sc)?.mul(ss)
    }

    /// `G̃`: (N, C_l, b, b).
    pub fn project_global<'t>(&self, p: &Bound<'t>, g: Var<'t>) -> Result<Var<'t>> {
        g.tape().conv2d(g, p.var(self.project_global), None, 1, 0)
    }

    /// Cosine weighting of blocks against `G̃`; returns (weighted blocks, scores).
    pub fn weight_blocks<'t>(&self, blocks: Var<'t>, g_tilde: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let tape = blocks.tape();
        let (n, nb, d) = {
            let s = blocks.shape();
            (s[0], s[1], s[2])
        };
        let target = tape
            .constant(Tensor::full(&[1, nb, 1], 1.0))
            .mul(g_tilde.reshape(&[n, 1, d])?)?;
        let scores = tape.cosine_similarity(blocks, target)?;
        let weighted = blocks.mul(scores.reshape(&[n, nb, 1])?)?;
        Ok((weighted, scores))
    }

    /// Block-axis projection of the weighted blocks to `L`, (N, C_g, b, b).
    pub fn aggregate<'t>(&self, p: &Bound<'t>, weighted: Var<'t>) -> Result<Var<'t>> {
        let s = weighted.shape();
        let (n, nb, d) = (s[0], s[1], s[2]);
        let groups = self.cfg.groups();
        let b = self.cfg.block_extent;
        let mixed = p
            .var(self.project_blocks)
            .matmul(weighted.permute(&[1, 0, 2])?.reshape(&[nb, n * d])?)?
            .add(p.var(self.project_bias))?;
        mixed
            .reshape(&[groups, n, d])?
            .permute(&[1, 0, 2])?
            .reshape(&[n, self.cfg.global_channels, b, b])
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, e2: Var<'t>, e4: Var<'t>) -> Result<GlaOutput<'t>> {
        let score = self.local_channel_attention(p, e2)?;
        let blocks = self.recalibrate_local(e2, score)?;
        let global = self.global_attention(p, e4)?;
        if e4.shape()[0] != e2.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "gla batch",
                lhs: e2.shape(),
                rhs: e4.shape(),
            });
        }
        let g_tilde = self.project_global(p, global)?;
        let (weighted, scores) = self.weight_blocks(blocks, g_tilde)?;
        let local = self.aggregate(p, weighted)?;
        Ok(GlaOutput {
            local,
            global,
            scores,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, probe, random_tensor};
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> GlaConfig {
        GlaConfig {
            local_channels: 4,
            local_extent: 8,
            global_channels: 8,
            block_extent: 2,
            mlp_reduction: 2,
        }
    }

    fn module(cfg: GlaConfig) -> (ParamStore, Gla) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gla = Gla::new(&mut store, "gla", cfg, &mut rng).unwrap();
        (store, gla)
    }

    #[test]
    fn zero_input_gives_half_scores() {
        let (store, gla) = module(cfg());
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let e2 = tape.constant(Tensor::zeros(&[2, 4, 8, 8]));
        let s = gla.local_channel_attention(&p, e2).unwrap().value();
        assert!(s.data().iter().all(|v| *v == 0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e2 = tape.constant(
            random_tensor(&[2, 4, 8, 8], &mut rng)
                .reshaped(&[2, 4, 8, 8])
                .unwrap(),
        );
        let s = gla.local_channel_attention(&p, e2).unwrap().value();
        assert!(s.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        let bad = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
        assert!(gla.local_channel_attention(&p, bad).is_err());
    }

    #[test]
    fn channel_attention_matches_hand_product() {
        let (mut store, gla) = module(cfg());
        // W1 (4 → 2), W2 (2 → 4), zero biases: S = σ(P W1 W2) in row-vector form.
        let w1 = [0.5, -1.0, 0.25, 0.0, -0.5, 2.0, 1.0, 1.0];
        let w2 = [1.0, 0.0, -1.0, 0.5, 0.3, 0.2, 0.1, -0.4];
        store
            .set("gla.local_fc1.w", Tensor::new(vec![4, 2], w1.to_vec()).unwrap())
            .unwrap();
        store
            .set("gla.local_fc2.w", Tensor::new(vec![2, 4], w2.to_vec()).unwrap())
            .unwrap();
        let pooled = [0.1, -0.2, 0.3, 0.4];
        let mut e2 = vec![0.0; 4 * 64];
        for c in 0..4 {
            e2[c * 64..(c + 1) * 64].iter_mut().for_each(|v| *v = pooled[c]);
        }
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let e2 = tape.constant(Tensor::new(vec![1, 4, 8, 8], e2).unwrap());
        let s = gla.local_channel_attention(&p, e2).unwrap().value();
        let hidden: Vec<f64> = (0..2)
            .map(|j| (0..4).map(|i| pooled[i] * w1[i * 2 + j]).sum())
            .collect();
        for k in 0..4 {
            let z: f64 = (0..2).map(|j| hidden[j] * w2[j * 4 + k]).sum();
            let want = 1.0 / (1.0 + (-z).exp());
            assert!((s.data()[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn recalibration_tiling() {
        let (_, gla) = module(cfg());
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e2v = random_tensor(&[2, 4, 8, 8], &mut rng);
        let e2 = tape.constant(e2v.clone());
        let ones = tape.constant(Tensor::full(&[2, 4], 1.0));
        let blocks = gla.recalibrate_local(e2, ones).unwrap();
        assert_eq!(blocks.shape(), vec![2, 16, 16]);
        // Block k = (kr, kc) row-major holds E2[c, 2kr + i, 2kc + j] at c·4 + i·2 + j.
        let bv = blocks.value();
        for n in 0..2 {
            for k in 0..16 {
                let (kr, kc) = (k / 4, k % 4);
                for c in 0..4 {
                    for i in 0..2 {
                        for j in 0..2 {
                            let want = e2v.data()[((n * 4 + c) * 8 + 2 * kr + i) * 8 + 2 * kc + j];
                            assert_eq!(bv.data()[(n * 16 + k) * 16 + c * 4 + i * 2 + j], want);
                        }
                    }
                }
            }
        }
        let back = untile_blocks(blocks, 4, 8, 8, 2).unwrap().value();
        assert_eq!(back, e2v);
        let zeros = tape.constant(Tensor::zeros(&[2, 4]));
        let z = gla.recalibrate_local(e2, zeros).unwrap().value();
        assert!(z.data().iter().all(|v| *v == 0.0));
        assert!(tile_blocks(tape.constant(Tensor::zeros(&[1, 1, 6, 6])), 4).is_err());
    }

    #[test]
    fn uniform_global_scores_scale_uniformly() {
        let (mut store, gla) = module(cfg());
        store.set("gla.global_fc1.w", Tensor::full(&[8, 4], 0.3)).unwrap();
        store
            .set("gla.global_fc2.w", Tensor::full(&[4, 8], -0.2))
            .unwrap();
        store.set("gla.spatial.w", Tensor::zeros(&[1, 2, 1, 1])).unwrap();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e4v = random_tensor(&[1, 8, 2, 2], &mut rng);
        let g = gla
            .global_attention(&p, tape.constant(e4v.clone()))
            .unwrap()
            .value();
        let k = g.data()[0] / e4v.data()[0];
        assert!(k > 0.0 && k < 1.0);
        for (a, b) in g.data().iter().zip(e4v.data()) {
            assert!((a - k * b).abs() < 1e-14);
        }
    }

    #[test]
    fn global_attention_bounded_by_input() {
        let (store, gla) = module(cfg());
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e4v = random_tensor(&[3, 8, 2, 2], &mut rng);
        let g = gla
            .global_attention(&p, tape.constant(e4v.clone()))
            .unwrap()
            .value();
        for (a, b) in g.data().iter().zip(e4v.data()) {
            assert!(a.abs() <= b.abs());
        }
    }

    #[test]
    fn single_channel_global_by_hand() {
        let c = GlaConfig {
            local_channels: 1,
            local_extent: 4,
            global_channels: 1,
            block_extent: 2,
            mlp_reduction: 1,
        };
        let (mut store, gla) = module(c);
        store.set("gla.global_fc1.w", Tensor::full(&[1, 1], 2.0)).unwrap();
        store.set("gla.global_fc2.w", Tensor::full(&[1, 1], 0.5)).unwrap();
        store
            .set(
                "gla.spatial.w",
                Tensor::new(vec![1, 2, 1, 1], vec![1.0, -1.0]).unwrap(),
            )
            .unwrap();
        store.set("gla.spatial.b", Tensor::full(&[1], 0.25)).unwrap();
        let e4 = [1.0, -2.0, 3.0, 0.5];
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let g = gla
            .global_attention(
                &p,
                tape.constant(Tensor::new(vec![1, 1, 2, 2], e4.to_vec()).unwrap()),
            )
            .unwrap()
            .value();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mean = e4.iter().sum::<f64>() / 4.0;
        let sc = sig(mean * 2.0 * 0.5);
        for (i, x) in e4.iter().enumerate() {
            // One channel: max and mean over channels are both the value itself.
            let ss = sig(x - x + 0.25);
            assert!((g.data()[i] - ss * sc * x).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_weighting_cases() {
        let (store, gla) = module(cfg());
        let tape = Tape::new();
        let _p = store.bind_frozen(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = random_tensor(&[1, 4, 2, 2], &mut rng);
        // All blocks equal G̃ up to a positive scale → all scores 1.
        let mut blocks = Vec::new();
        for k in 0..16 {
            blocks.extend(gt.data().iter().map(|v| v * (1.0 + k as f64)));
        }
        let bv = tape.constant(Tensor::new(vec![1, 16, 16], blocks).unwrap());
        let (w, s) = gla.weight_blocks(bv, tape.constant(gt.clone())).unwrap();
        assert!(s.value().data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(w.value().max_abs_diff(&bv.value()) < 1e-12);
        // A block orthogonal to G̃ gets zero weight.
        let g1 = Tensor::new(vec![1, 4, 2, 2], {
            let mut v = vec![0.0; 16];
            v[0] = 1.0;
            v
        })
        .unwrap();
        let mut blocks = vec![0.5; 16 * 16];
        blocks[3 * 16] = 0.0; // block 3 has no component along G̃
        let bv = tape.constant(Tensor::new(vec![1, 16, 16], blocks).unwrap());
        let (w, s) = gla.weight_blocks(bv, tape.constant(g1)).unwrap();
        assert_eq!(s.value().data()[3], 0.0);
        assert!(w.value().data()[3 * 16..4 * 16].iter().all(|v| *v == 0.0));
        assert!(s.value().data()[0] > 0.0);
    }

    #[test]
    fn scaling_g_tilde_leaves_local_unchanged() {
        let (store, gla) = module(cfg());
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let blocks = tape.constant(random_tensor(&[2, 16, 16], &mut rng));
        let gt = random_tensor(&[2, 4, 2, 2], &mut rng);
        let p = store.bind_frozen(&tape);
        let (w1, _) = gla.weight_blocks(blocks, tape.constant(gt.clone())).unwrap();
        let scaled = Tensor::new(gt.shape().to_vec(), gt.data().iter().map(|v| v * 37.5).collect()).unwrap();
        let (w2, _) = gla.weight_blocks(blocks, tape.constant(scaled)).unwrap();
        assert!(w1.value().max_abs_diff(&w2.value()) < 1e-12);
        let l1 = gla.aggregate(&p, w1).unwrap().value();
        let l2 = gla.aggregate(&p, w2).unwrap().value();
        assert!(l1.max_abs_diff(&l2) < 1e-12);
    }

    #[test]
    fn forward_shapes_and_score_range() {
        let (store, gla) = module(cfg());
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e2 = tape.constant(random_tensor(&[3, 4, 8, 8], &mut rng));
        let e4 = tape.constant(random_tensor(&[3, 8, 2, 2], &mut rng));
        let out = gla.forward(&p, e2, e4).unwrap();
        assert_eq!(out.local.shape(), vec![3, 8, 2, 2]);
        assert_eq!(out.global.shape(), vec![3, 8, 2, 2]);
        assert_eq!(out.scores.shape(), vec![3, 16]);
        assert!(out.scores.value().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn gradient_check_whole_module() {
        let (store, gla) = module(cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
        // Perturb zero-initialized biases so every path is exercised.
        for t in inputs.iter_mut() {
            let noise = random_tensor(t.shape(), &mut rng);
            for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *v += 0.1 * n;
            }
        }
        let np = inputs.len();
        inputs.push(random_tensor(&[2, 4, 8, 8], &mut rng));
        inputs.push(random_tensor(&[2, 8, 2, 2], &mut rng));
        let err = check_gradients(&inputs, 1e-5, |_, vars| {
            let p = Bound::from_vars(&store, vars[..np].to_vec())?;
            let out = gla.forward(&p, vars[np], vars[np + 1])?;
            let a = probe(out.local, 1)?;
            let b = probe(out.global, 2)?;
            let c = probe(out.scores, 3)?;
            a.add(b)?.add(c)
        })
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
