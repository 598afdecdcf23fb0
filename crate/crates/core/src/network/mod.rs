//! Motion-estimation network: residual encoder blocks with a correlation
//! volume inserted before the last block, global-local attention, two LSTM
//! motion estimators (global and local path) and mean fusion.
//!
//! Data flow for `B` sequences of `L` steps (`N = B·L` frame pairs):
//!
//! 1. Block 1 (shared weights) encodes every frame → E¹.
//! 2. `C = correlate(E¹_i, E¹_{i+1})`, laid out as `d²` channels on the RoI grid.
//! 3. Block 2 on `concat(E¹_i, E¹_{i+1})` → E², Block 3 → E³.
//! 4. Block 4 on `concat(C, E³)` → E⁴.
//! 5. Attention (or plain pooling in the ablation) → global `G` and local `L`.
//! 6. One LSTM per path over the `L` steps, a linear head to 6 motion values
//!    each; the fused motion is their elementwise mean.

pub mod gla;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{join, render, KeyValues};
use crate::correlation::{CorrConfig, Normalization};
use crate::error::{Error, Result};
use crate::io::write_pgm16;
use crate::pose::PoseVector;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::nn::{Bound, Conv2d, Linear, LstmCell, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub use gla::{Gla, GlaConfig, GlaOutput};

/// Named size presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    /// 8×8 frames, minimal widths: gradient checks.
    Tiny,
    /// 64×64 frames, reference widths divided by 8: trainable on a CPU.
    Toy,
    /// 256×256 frames, reference widths: shape checks only.
    Paper,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "toy" => Ok(Self::Toy),
            "paper" | "paper-shape" => Ok(Self::Paper),
            _ => Err(Error::invalid(format!("unknown scale {s:?} (tiny, toy, paper)"))),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tiny => "tiny",
            Self::Toy => "toy",
            Self::Paper => "paper",
        })
    }
}

fn parse_norm(s: &str) -> Result<Normalization> {
    match s {
        "ncc" => Ok(Normalization::Ncc),
        "dot" => Ok(Normalization::Dot),
        _ => Err(Error::invalid(format!(
            "unknown correlation normalization {s:?} (ncc, dot)"
        ))),
    }
}

fn norm_name(n: Normalization) -> &'static str {
    match n {
        Normalization::Ncc => "ncc",
        Normalization::Dot => "dot",
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub scale: Scale,
    /// Side of the square input frames.
    pub image_extent: usize,
    /// Output channels of encoder blocks 1–4.
    pub widths: [usize; 4],
    /// Downsampling of encoder blocks 1–4.
    pub strides: [usize; 4],
    pub corr_roi: usize,
    pub corr_patch: usize,
    pub corr_normalization: Normalization,
    pub block_extent: usize,
    pub mlp_reduction: usize,
    pub lstm_hidden: usize,
    /// Sequence length `s`: a window holds `s + 2` frames, i.e. the pair
    /// sequences `n..=n+s` and `n+1..=n+s+1` with `s + 1` motion steps.
    pub seq_len: usize,
    /// `false` replaces attention with plain pooling (ablation).
    pub use_gla: bool,
}

impl ModelConfig {
    pub fn preset(scale: Scale) -> Self {
        match scale {
            Scale::Tiny => Self {
                scale,
                image_extent: 8,
                seq_len: 2,
                widths: [2, 2, 3, 4],
                strides: [1, 1, 2, 2],
                corr_roi: 5,
                corr_patch: 3,
                corr_normalization: Normalization::Ncc,
                block_extent: 2,
                mlp_reduction: 16,
                lstm_hidden: 3,
                use_gla: true,
            },
            Scale::Toy => Self {
                scale,
                image_extent: 64,
                seq_len: 8,
                widths: [8, 16, 32, 64],
                strides: [2, 2, 2, 2],
                corr_roi: 9,
                corr_patch: 5,
                corr_normalization: Normalization::Ncc,
                block_extent: 4,
                mlp_reduction: 16,
                lstm_hidden: 32,
                use_gla: true,
            },
            Scale::Paper => Self {
                scale,
                image_extent: 256,
                seq_len: 8,
                widths: [64, 128, 256, 512],
                strides: [2, 2, 4, 4],
                corr_roi: 17,
                corr_patch: 9,
                corr_normalization: Normalization::Ncc,
                block_extent: 4,
                mlp_reduction: 16,
                lstm_hidden: 128,
                use_gla: true,
            },
        }
    }

    pub fn toy() -> Self {
        Self::preset(Scale::Toy)
    }

    pub fn tiny() -> Self {
        Self::preset(Scale::Tiny)
    }

    /// Spatial extents of E¹…E⁴.
    pub fn extents(&self) -> [usize; 4] {
        let mut e = self.image_extent;
        self.strides.map(|s| {
            e /= s.max(1);
            e
        })
    }

    pub fn corr_config(&self) -> Result<CorrConfig> {
        let [e1, _, e3, _] = self.extents();
        let mut c = CorrConfig::for_grid(e1, e3, self.corr_roi, self.corr_patch)?;
        c.normalization = self.corr_normalization;
        Ok(c)
    }

    pub fn gla_config(&self) -> GlaConfig {
        GlaConfig {
            local_channels: self.widths[1],
            local_extent: self.extents()[1],
            global_channels: self.widths[3],
            block_extent: self.block_extent,
            mlp_reduction: self.mlp_reduction,
        }
    }

    /// Motion steps per window (`s + 1`).
    pub fn window_steps(&self) -> usize {
        self.seq_len + 1
    }

    pub fn n_blocks(&self) -> usize {
        self.gla_config().n_blocks()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.strides.contains(&0) || self.lstm_hidden == 0 {
            return Err(Error::invalid("widths, strides and hidden size must be positive"));
        }
        let mut e = self.image_extent;
        for s in self.strides {
            if !e.is_multiple_of(s) {
                return Err(Error::invalid(format!(
                    "image extent {} does not divide through strides {:?}",
                    self.image_extent, self.strides
                )));
            }
            e /= s;
        }
        if e != self.block_extent {
            return Err(Error::invalid(format!(
                "E4 extent {e} must equal the block extent {}",
                self.block_extent
            )));
        }
        self.gla_config().validate()?;
        let cc = self.corr_config()?;
        let [e1, _, e3, _] = self.extents();
        let layout = cc.layout(e1, e1)?;
        if layout.rows != e3 || layout.cols != e3 {
            return Err(Error::invalid("correlation grid does not match E3"));
        }
        Ok(())
    }

    /// Flat `key=value` rendering (embedded in checkpoints).
    pub fn to_kv(&self) -> String {
        render(&[
            ("scale", self.scale.to_string()),
            ("image_extent", self.image_extent.to_string()),
            ("widths", join(&self.widths)),
            ("strides", join(&self.strides)),
            ("corr_roi", self.corr_roi.to_string()),
            ("corr_patch", self.corr_patch.to_string()),
            ("corr_norm", norm_name(self.corr_normalization).to_string()),
            ("block_extent", self.block_extent.to_string()),
            ("mlp_reduction", self.mlp_reduction.to_string()),
            ("lstm_hidden", self.lstm_hidden.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("use_gla", self.use_gla.to_string()),
        ])
    }

    /// Takes the model keys from `kv`, starting from the preset named by
    /// `scale` (default toy).
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let scale: Scale = kv.take_or("scale", Scale::Toy)?;
        let mut c = Self::preset(scale);
        c.image_extent = kv.take_or("image_extent", c.image_extent)?;
        c.widths = kv.take_array("widths")?.unwrap_or(c.widths);
        c.strides = kv.take_array("strides")?.unwrap_or(c.strides);
        c.corr_roi = kv.take_or("corr_roi", c.corr_roi)?;
        c.corr_patch = kv.take_or("corr_patch", c.corr_patch)?;
        if let Some(n) = kv.take::<String>("corr_norm")? {
            c.corr_normalization = parse_norm(&n)?;
        }
        c.block_extent = kv.take_or("block_extent", c.block_extent)?;
        c.mlp_reduction = kv.take_or("mlp_reduction", c.mlp_reduction)?;
        c.lstm_hidden = kv.take_or("lstm_hidden", c.lstm_hidden)?;
        c.seq_len = kv.take_or("seq_len", c.seq_len)?;
        c.use_gla = kv.take_or("use_gla", c.use_gla)?;
        c.validate()?;
        Ok(c)
    }
}

/// Residual stage: `relu(conv3(relu(conv3_s(x))) + conv1_s(x))`.
#[derive(Clone, Debug)]
pub struct ResStage {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub skip: Conv2d,
}

impl ResStage {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, rng)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, rng)?,
            skip: Conv2d::new(store, &format!("{name}.skip"), in_ch, out_ch, 1, stride, rng)?,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.conv1.forward(p, x)?.relu();
        let y = self.conv2.forward(p, y)?;
        Ok(y.add(self.skip.forward(p, x)?)?.relu())
    }
}

/// Per-step motion estimates of one sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionEstimate {
    pub global: PoseVector,
    pub local: PoseVector,
    pub fused: PoseVector,
}

/// Differentiable outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput<'t> {
    /// (B, L, 6) global-path motion.
    pub global: Var<'t>,
    /// (B, L, 6) local-path motion.
    pub local: Var<'t>,
    /// (B, L, 6) fused motion (mean of the two paths).
    pub fused: Var<'t>,
    /// (B·L, D) pooled `(G, L)` features used by the triplet loss.
    pub embeddings: Var<'t>,
    /// (B·L, n_blocks) block cosine scores; absent without attention.
    pub scores: Option<Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    corr: CorrConfig,
    blocks: [ResStage; 4],
    gla: Option<Gla>,
    lstm_global: LstmCell,
    lstm_local: LstmCell,
    head_global: Linear,
    head_local: Linear,
}

impl Model {
    /// Builds and initializes a model deterministically from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let corr = cfg.corr_config()?;
        let d2 = corr.displacement_extent().pow(2);
        let [w1, w2, w3, w4] = cfg.widths;
        let [s1, s2, s3, s4] = cfg.strides;
        let blocks = [
            ResStage::new(&mut store, "enc1", 1, w1, s1, &mut rng)?,
            ResStage::new(&mut store, "enc2", 2 * w1, w2, s2, &mut rng)?,
            ResStage::new(&mut store, "enc3", w2, w3, s3, &mut rng)?,
            ResStage::new(&mut store, "enc4", w3 + d2, w4, s4, &mut rng)?,
        ];
        let gla = if cfg.use_gla {
            Some(Gla::new(&mut store, "gla", cfg.gla_config(), &mut rng)?)
        } else {
            None
        };
        let b2 = cfg.block_extent * cfg.block_extent;
        let local_dim = if cfg.use_gla { w4 } else { w2 } * b2;
        let h = cfg.lstm_hidden;
        let lstm_global = LstmCell::new(&mut store, "lstm_global", w4 * b2, h, &mut rng)?;
        let lstm_local = LstmCell::new(&mut store, "lstm_local", local_dim, h, &mut rng)?;
        let head_global = Linear::new(&mut store, "head_global", h, 6, &mut rng)?;
        let head_local = Linear::new(&mut store, "head_local", h, 6, &mut rng)?;
        Ok(Self {
            cfg,
            store,
            corr,
            blocks,
            gla,
            lstm_global,
            lstm_local,
            head_global,
            head_local,
        })
    }

    /// Rebuilds a model from a checkpoint written by [`Model::checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut kv = KeyValues::parse(&ckpt.config)?;
        let cfg = ModelConfig::from_kv(&mut kv)?;
        let mut model = Self::new(cfg, 0)?;
        model.load_params(ckpt)?;
        Ok(model)
    }

    /// Copies every parameter from `ckpt` (extra records are ignored).
    pub fn load_params(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let names: Vec<String> = self.store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = ckpt
                .get(&name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing parameter {name}")))?;
            self.store.set(&name, t.clone())?;
        }
        Ok(())
    }

    /// Checkpoint holding the config and all parameters.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.to_kv(),
            records: self
                .store
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn has_attention(&self) -> bool {
        self.gla.is_some()
    }

    /// Block 1 on (N, 1, H, W) frames.
    pub fn encode_block1<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.blocks[0].forward(p, x)
    }

    fn check_frames(&self, s: &[usize], min_t: usize) -> Result<()> {
        let e = self.cfg.image_extent;
        if s.len() != 4 || s[1] < min_t || s[0] == 0 {
            return Err(Error::invalid(format!(
                "expected (B, T≥{min_t}, H, W) frames, got {s:?}"
            )));
        }
        if s[2] != s[3] {
            return Err(Error::invalid(format!(
                "frames must be square, got {}x{}",
                s[2], s[3]
            )));
        }
        if s[2] != e {
            return Err(Error::Precondition(format!(
                "model expects {e}x{e} frames, got {}x{}",
                s[2], s[3]
            )));
        }
        Ok(())
    }

    /// Forward pass over `B` sequences of `T = L + 1` consecutive frames,
    /// given as a (B, T, H, W) tensor; each frame goes through Block 1 once.
    pub fn forward<'t>(&self, p: &Bound<'t>, tape: &'t Tape, frames: &Tensor) -> Result<ForwardOutput<'t>> {
        let s = frames.shape().to_vec();
        self.check_frames(&s, 2)?;
        let (b, t, e) = (s[0], s[1], s[2]);
        let l = t - 1;
        let x = tape.constant(frames.clone().reshaped(&[b * t, 1, e, e])?);
        let e1 = self.encode_block1(p, x)?;
        let gather = |offset: usize| -> Result<Var<'t>> {
            let parts = (0..b)
                .map(|i| e1.narrow(0, i * t + offset, l))
                .collect::<Result<Vec<_>>>()?;
            if parts.len() == 1 {
                Ok(parts[0])
            } else {
                tape.concat(&parts, 0)
            }
        };
        let (a, bb) = (gather(0)?, gather(1)?);
        self.forward_encoded(p, a, bb, b, l)
    }

    /// Forward pass over explicit aligned pair sequences `seq_a`, `seq_b`,
    /// each (B, L, H, W); Block 1 runs on both with shared weights.
    pub fn forward_pairs<'t>(
        &self,
        p: &Bound<'t>,
        tape: &'t Tape,
        seq_a: &Tensor,
        seq_b: &Tensor,
    ) -> Result<ForwardOutput<'t>> {
        let (sa, sb) = (seq_a.shape().to_vec(), seq_b.shape().to_vec());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "model sequences",
                lhs: sa,
                rhs: sb,
            });
        }
        self.check_frames(&sa, 1)?;
        let (b, l, e) = (sa[0], sa[1], sa[2]);
        let n = b * l;
        let x = tape.concat(
            &[
                tape.constant(seq_a.clone().reshaped(&[n, 1, e, e])?),
                tape.constant(seq_b.clone().reshaped(&[n, 1, e, e])?),
            ],
            0,
        )?;
        let e1 = self.encode_block1(p, x)?;
        self.forward_encoded(p, e1.narrow(0, 0, n)?, e1.narrow(0, n, n)?, b, l)
    }

    fn forward_encoded<'t>(
        &self,
        p: &Bound<'t>,
        e1_a: Var<'t>,
        e1_b: Var<'t>,
        b: usize,
        l: usize,
    ) -> Result<ForwardOutput<'t>> {
        let tape = e1_a.tape();
        let n = b * l;
        let [_, _, e3, e4] = self.cfg.extents();
        let d2 = self.corr.displacement_extent().pow(2);
        let c = tape
            .correlate(e1_a, e1_b, &self.corr)?
            .reshape(&[n, e3 * e3, d2])?
            .permute(&[0, 2, 1])?
            .reshape(&[n, d2, e3, e3])?;
        let x2 = self.blocks[1].forward(p, tape.concat(&[e1_a, e1_b], 1)?)?;
        let x3 = self.blocks[2].forward(p, x2)?;
        let x4 = self.blocks[3].forward(p, tape.concat(&[c, x3], 1)?)?;
        let (g, lf, scores) = match &self.gla {
            Some(gla) => {
                let o = gla.forward(p, x2, x4)?;
                (o.global, o.local, Some(o.scores))
            }
            None => (x4, x2.adaptive_avg_pool2d(e4, e4)?, None),
        };
        let pooled = |v: Var<'t>| -> Result<Var<'t>> {
            let s = v.shape();
            v.reshape(&[s[0], s[1], s[2] * s[3]])?.mean_axis(2, false)
        };
        let embeddings = tape.concat(&[pooled(g)?, pooled(lf)?], 1)?;
        let run = |feat: Var<'t>, cell: &LstmCell, head: &Linear| -> Result<Var<'t>> {
            let d: usize = feat.shape()[1..].iter().product();
            let seq = feat.reshape(&[b, l, d])?;
            let mut state = cell.zero_state(tape, b);
            let mut outs = Vec::with_capacity(l);
            for t in 0..l {
                let x = seq.narrow(1, t, 1)?.reshape(&[b, d])?;
                state = cell.step(p, x, state)?;
                outs.push(head.forward(p, state.h)?.reshape(&[b, 1, 6])?);
            }
            if outs.len() == 1 {
                Ok(outs[0])
            } else {
                tape.concat(&outs, 1)
            }
        };
        let global = run(g, &self.lstm_global, &self.head_global)?;
        let local = run(lf, &self.lstm_local, &self.head_local)?;
        let fused = global.add(local)?.scale(0.5);
        Ok(ForwardOutput {
            global,
            local,
            fused,
            embeddings,
            scores,
        })
    }

    /// Inference on one window of consecutive frames (row-major, already
    /// standardized or not — see [`standardize`]): `frames.len() − 1` estimates.
    pub fn predict_window(&self, frames: &[&[f32]]) -> Result<(Vec<MotionEstimate>, Option<Tensor>)> {
        let e = self.cfg.image_extent;
        let t = frames.len();
        if t < 2 {
            return Err(Error::invalid("a window needs at least two frames"));
        }
        let input = frames_tensor(frames, e)?.reshaped(&[1, t, e, e])?;
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let out = self.forward(&p, &tape, &input)?;
        let rows = |v: Var<'_>| -> Vec<PoseVector> {
            v.value()
                .data()
                .chunks(6)
                .map(|c| PoseVector::from_array(c.try_into().expect("6 values")))
                .collect()
        };
        let (g, l, f) = (rows(out.global), rows(out.local), rows(out.fused));
        let est = (0..t - 1)
            .map(|i| MotionEstimate {
                global: g[i],
                local: l[i],
                fused: f[i],
            })
            .collect();
        Ok((est, out.scores.map(|s| s.value())))
    }
}

/// Per-frame standardization (zero mean, unit variance; constant frames map
/// to zeros), stacked into a (T, H, W) tensor.
pub fn frames_tensor(frames: &[&[f32]], extent: usize) -> Result<Tensor> {
    let px = extent * extent;
    let mut data = Vec::with_capacity(frames.len() * px);
    for f in frames {
        if f.len() != px {
            return Err(Error::Precondition(format!(
                "frame has {} pixels, model expects {extent}x{extent}",
                f.len()
            )));
        }
        data.extend(standardize(f));
    }
    Tensor::new(vec![frames.len(), extent, extent], data)
}

pub fn standardize(frame: &[f32]) -> Vec<f64> {
    let n = frame.len() as f64;
    let mean = frame.iter().map(|v| *v as f64).sum::<f64>() / n;
    let var = frame.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return vec![0.0; frame.len()];
    }
    let sd = var.sqrt();
    frame.iter().map(|v| (*v as f64 - mean) / sd).collect()
}

/// Writes one frame's block scores as a `√n × √n` PGM over [−1, 1].
pub fn write_attention_pgm<W: Write>(w: W, scores: &[f64]) -> Result<()> {
    let g = (scores.len() as f64).sqrt().round() as usize;
    if g == 0 || g * g != scores.len() {
        return Err(Error::invalid(format!(
            "{} block scores do not form a square grid",
            scores.len()
        )));
    }
    write_pgm16(w, g, g, scores, -1.0, 1.0)
}

/// Score grids of every step from a (steps, n_blocks) tensor; errors when the
/// model ran without attention diagnostics.
pub fn attention_grids(scores: Option<&Tensor>) -> Result<Vec<Vec<f64>>> {
    let s = scores.ok_or_else(|| {
        Error::Precondition("attention scores are only available with the attention module".into())
    })?;
    let nb = *s.shape().last().expect("scores are 2-D");
    Ok(s.data().chunks(nb).map(<[f64]>::to_vec).collect())
}
