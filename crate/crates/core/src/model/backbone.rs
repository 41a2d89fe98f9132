//! Multi-scale transformer encoder.
//!
//! A convolutional embedding lifts the fused features to `d_model`
//! channels. Each block then computes
//!
//! ```text
//! z̄ = α ⊙ MSA(LN(z))             (+ z when `msa_residual` is set)
//! ẑ = ᾱ ⊙ MLP(LN(z̄)) + z̄
//! z' = ↓(ẑ)
//! ```
//!
//! where MSA is windowed multi-head self-attention, α and ᾱ are learnable
//! per-channel scales and ↓ is a stride-2 convolution on downsampling
//! blocks (identity otherwise). The outputs of the last full-resolution
//! block and of every downsampling block form the feature pyramid.

use serde::{Deserialize, Serialize};

use super::params::{Bound, Init, ParamSpec};
use crate::error::{Result, TslError};
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub num_blocks: usize,
    pub window: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Per-block downsampling factor, 1 or 2; all 1s must precede all 2s.
    pub stride_schedule: Vec<usize>,
    pub layerscale_init: f64,
    /// Adds the skip connection `+ z` around the attention branch.
    pub msa_residual: bool,
    pub ln_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_model: 512,
            num_blocks: 9,
            window: 11,
            num_heads: 4,
            mlp_ratio: 4,
            stride_schedule: vec![1, 1, 1, 2, 2, 2, 2, 2, 2],
            layerscale_init: 1e-4,
            msa_residual: false,
            ln_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    /// Small configuration sized for CPU experiments on synthetic data.
    pub fn desk() -> Self {
        BackboneConfig {
            d_model: 64,
            num_blocks: 5,
            stride_schedule: vec![1, 2, 2, 2, 2],
            msa_residual: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(TslError::Config(m));
        if self.num_blocks == 0 {
            return err("num_blocks must be at least 1".into());
        }
        if self.window.is_multiple_of(2) {
            return err(format!("window {} must be odd", self.window));
        }
        if self.num_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.num_heads)
        {
            return err(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.mlp_ratio == 0 {
            return err("mlp_ratio must be positive".into());
        }
        if self.stride_schedule.len() != self.num_blocks {
            return err(format!(
                "stride_schedule has {} entries for {} blocks",
                self.stride_schedule.len(),
                self.num_blocks
            ));
        }
        if self.stride_schedule.iter().any(|s| !(1..=2).contains(s)) {
            return err("stride_schedule entries must be 1 or 2".into());
        }
        if self.stride_schedule.windows(2).any(|w| w[0] > w[1]) {
            return err("stride_schedule must list stride-1 blocks before stride-2 blocks".into());
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return err("ln_eps must be positive".into());
        }
        Ok(())
    }

    pub fn num_downsamples(&self) -> usize {
        self.stride_schedule.iter().filter(|&&s| s == 2).count()
    }

    pub fn num_levels(&self) -> usize {
        self.num_downsamples() + 1
    }

    pub fn param_specs(&self, input_dim: usize) -> Vec<ParamSpec> {
        let d = self.d_model;
        let hidden = self.mlp_ratio * d;
        let mut specs = Vec::new();
        conv_specs(&mut specs, "embed.conv0", 3, input_dim, d);
        conv_specs(&mut specs, "embed.conv1", 3, d, d);
        for (i, &stride) in self.stride_schedule.iter().enumerate() {
            let b = format!("blocks.{i}");
            ln_specs(&mut specs, &format!("{b}.ln1"), d);
            for proj in ["q", "k", "v", "o"] {
                linear_specs(&mut specs, &format!("{b}.attn.{proj}"), d, d);
            }
            specs.push(ParamSpec::new(
                format!("{b}.ls_attn"),
                &[d],
                Init::Const(self.layerscale_init),
            ));
            ln_specs(&mut specs, &format!("{b}.ln2"), d);
            linear_specs(&mut specs, &format!("{b}.mlp.fc1"), d, hidden);
            linear_specs(&mut specs, &format!("{b}.mlp.fc2"), hidden, d);
            specs.push(ParamSpec::new(
                format!("{b}.ls_mlp"),
                &[d],
                Init::Const(self.layerscale_init),
            ));
            if stride == 2 {
                conv_specs(&mut specs, &format!("{b}.down"), 3, d, d);
            }
        }
        specs
    }
}

pub(crate) fn conv_specs(
    specs: &mut Vec<ParamSpec>,
    prefix: &str,
    k: usize,
    cin: usize,
    cout: usize,
) {
    let bound = 1.0 / ((k * cin) as f64).sqrt();
    specs.push(ParamSpec::new(
        format!("{prefix}.weight"),
        &[k, cin, cout],
        Init::Uniform(bound),
    ));
    specs.push(ParamSpec::new(
        format!("{prefix}.bias"),
        &[cout],
        Init::Const(0.0),
    ));
}

pub(crate) fn linear_specs(specs: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize) {
    let bound = 1.0 / (cin as f64).sqrt();
    specs.push(ParamSpec::new(
        format!("{prefix}.weight"),
        &[cin, cout],
        Init::Uniform(bound),
    ));
    specs.push(ParamSpec::new(
        format!("{prefix}.bias"),
        &[cout],
        Init::Const(0.0),
    ));
}

pub(crate) fn ln_specs(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    specs.push(ParamSpec::new(
        format!("{prefix}.gamma"),
        &[d],
        Init::Const(1.0),
    ));
    specs.push(ParamSpec::new(
        format!("{prefix}.beta"),
        &[d],
        Init::Const(0.0),
    ));
}

pub(crate) fn conv(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let y = tape.conv1d(x, p.get(&format!("{prefix}.weight")), stride)?;
    tape.add_row(y, p.get(&format!("{prefix}.bias")))
}

pub(crate) fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.get(&format!("{prefix}.weight")))?;
    tape.add_row(y, p.get(&format!("{prefix}.bias")))
}

pub(crate) fn layer_norm(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    x: Var,
    eps: f64,
) -> Result<Var> {
    tape.layer_norm(
        x,
        p.get(&format!("{prefix}.gamma")),
        p.get(&format!("{prefix}.beta")),
        eps,
    )
}

/// One resolution of the pyramid.
#[derive(Clone, Debug)]
pub struct Level {
    pub features: Var,
    /// Input timesteps per position.
    pub stride: usize,
    /// `false` marks zero-padded tail positions.
    pub mask: Vec<bool>,
}

impl Level {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Pyramid {
    pub levels: Vec<Level>,
    /// Set when the input is shorter than the total downsampling factor, so
    /// the coarsest levels repeat length 1.
    pub degenerate: bool,
}

impl Pyramid {
    pub fn lengths(&self) -> Vec<usize> {
        self.levels.iter().map(Level::len).collect()
    }

    pub fn strides(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.stride).collect()
    }
}

/// Two kernel-3 convolutions with ReLU, `D_in → d_model`, length preserved.
pub fn embed(tape: &mut Tape, p: &Bound, x: Var, mask: &[bool]) -> Result<Var> {
    let mut h = tape.mask_rows(x, mask)?;
    for name in ["embed.conv0", "embed.conv1"] {
        h = conv(tape, p, name, h, 1)?;
        h = tape.mask_rows(h, mask)?;
        h = tape.relu(h);
    }
    Ok(h)
}

/// Attention mask of shape `heads × T × window`: key `t + j − ⌊w/2⌋` is
/// visible to query `t` iff it lies in `[0, T)` and is valid, or is `t`
/// itself.
pub fn window_mask(valid: &[bool], window: usize, heads: usize) -> Vec<bool> {
    let t = valid.len();
    let r = window / 2;
    let mut one_head = Vec::with_capacity(t * window);
    for i in 0..t {
        for j in 0..window {
            let visible = (i + j)
                .checked_sub(r)
                .is_some_and(|key| key < t && (valid[key] || key == i));
            one_head.push(visible);
        }
    }
    one_head.repeat(heads)
}

/// Windowed multi-head self-attention over `x` (`T × d_model`).
pub fn windowed_msa(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    x: Var,
    cfg: &BackboneConfig,
    mask: &[bool],
) -> Result<Var> {
    let q = linear(tape, p, &format!("{prefix}.q"), x)?;
    let k = linear(tape, p, &format!("{prefix}.k"), x)?;
    let v = linear(tape, p, &format!("{prefix}.v"), x)?;
    let head_dim = cfg.d_model / cfg.num_heads;
    let scores = tape.window_scores(
        q,
        k,
        cfg.num_heads,
        cfg.window,
        1.0 / (head_dim as f64).sqrt(),
    )?;
    let attn_mask = window_mask(mask, cfg.window, cfg.num_heads);
    let attn = tape.softmax_lastdim(scores, Some(&attn_mask))?;
    let mixed = tape.window_mix(attn, v)?;
    linear(tape, p, &format!("{prefix}.o"), mixed)
}

/// One encoder block; returns the (possibly downsampled) output and mask.
pub fn transformer_block(
    tape: &mut Tape,
    p: &Bound,
    cfg: &BackboneConfig,
    index: usize,
    z: Var,
    mask: &[bool],
) -> Result<(Var, Vec<bool>)> {
    let b = format!("blocks.{index}");
    let eps = cfg.ln_eps;

    let h = layer_norm(tape, p, &format!("{b}.ln1"), z, eps)?;
    let h = windowed_msa(tape, p, &format!("{b}.attn"), h, cfg, mask)?;
    let mut zbar = tape.mul_row(h, p.get(&format!("{b}.ls_attn")))?;
    if cfg.msa_residual {
        zbar = tape.add(zbar, z)?;
    }
    let zbar = tape.mask_rows(zbar, mask)?;

    let h = layer_norm(tape, p, &format!("{b}.ln2"), zbar, eps)?;
    let h = linear(tape, p, &format!("{b}.mlp.fc1"), h)?;
    let h = tape.gelu(h);
    let h = linear(tape, p, &format!("{b}.mlp.fc2"), h)?;
    let h = tape.mul_row(h, p.get(&format!("{b}.ls_mlp")))?;
    let zhat = tape.add(h, zbar)?;
    let zhat = tape.mask_rows(zhat, mask)?;

    if cfg.stride_schedule[index] == 2 {
        let down = conv(tape, p, &format!("{b}.down"), zhat, 2)?;
        let down_mask: Vec<bool> = mask.iter().step_by(2).copied().collect();
        let down = tape.mask_rows(down, &down_mask)?;
        Ok((down, down_mask))
    } else {
        Ok((zhat, mask.to_vec()))
    }
}

/// Runs the embedding and every block, collecting pyramid levels.
pub fn build_pyramid(
    tape: &mut Tape,
    p: &Bound,
    cfg: &BackboneConfig,
    x: Var,
    mask: &[bool],
) -> Result<Pyramid> {
    cfg.validate()?;
    let t = tape.shape(x)[0];
    if t == 0 || mask.len() != t {
        return Err(TslError::InputTooShort(format!(
            "{t} timesteps (mask of {}) cannot feed {} downsampling blocks",
            mask.len(),
            cfg.num_downsamples()
        )));
    }
    let degenerate = t < 1usize << cfg.num_downsamples().min(63);

    let mut z = embed(tape, p, x, mask)?;
    let mut m = mask.to_vec();
    let mut stride = 1;
    let mut levels = Vec::with_capacity(cfg.num_levels());
    if cfg.stride_schedule[0] == 2 {
        levels.push(Level {
            features: z,
            stride,
            mask: m.clone(),
        });
    }
    for i in 0..cfg.num_blocks {
        (z, m) = transformer_block(tape, p, cfg, i, z, &m)?;
        let downsampled = cfg.stride_schedule[i] == 2;
        if downsampled {
            stride *= 2;
        }
        let last_full_res = !downsampled && cfg.stride_schedule.get(i + 1).is_none_or(|&s| s == 2);
        if downsampled || last_full_res {
            levels.push(Level {
                features: z,
                stride,
                mask: m.clone(),
            });
        }
    }
    Ok(Pyramid { levels, degenerate })
}
