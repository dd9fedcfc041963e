//! Visual front-ends: linear projection, ViT-style 3-D patching, and a
//! (2+1)-D VGG. All map a [`VideoClip`] to one embedding row per time step
//! (per time slab for the ViT).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::conformer;
use crate::error::{Error, Result};
use crate::kernels::{self, Padding};
use crate::nn::{self, Init, Scope, SpecBuilder};
use crate::tensor::Tensor;

/// Frames `T×H×W×C` in `[0, 1]` with a per-frame presence mask.
///
/// Masked-out frames always hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Tensor,
    pub frame_rate_hz: f64,
    mask: Vec<bool>,
}

impl VideoClip {
    pub fn new(frames: Tensor, frame_rate_hz: f64) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::Input(format!("video frames must be T×H×W×3, got {s:?}")));
        }
        if !(frame_rate_hz > 0.0) {
            return Err(Error::Input("frame rate must be positive".into()));
        }
        let t = s[0];
        Ok(VideoClip {
            frames,
            frame_rate_hz,
            mask: vec![true; t],
        })
    }

    pub fn with_mask(frames: Tensor, frame_rate_hz: f64, mask: Vec<bool>) -> Result<Self> {
        let mut clip = Self::new(frames, frame_rate_hz)?;
        clip.apply_mask(&mask)?;
        Ok(clip)
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.frames.shape()[1], self.frames.shape()[2])
    }

    pub fn frame_len(&self) -> usize {
        let s = self.frames.shape();
        s[1] * s[2] * s[3]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.frames.data()[t * n..(t + 1) * n]
    }

    /// Drops frames where `mask` is false (zeroing them); already-dropped
    /// frames stay dropped.
    pub fn apply_mask(&mut self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.len() {
            return Err(Error::Input(format!(
                "mask length {} does not match {} frames",
                mask.len(),
                self.len()
            )));
        }
        let n = self.frame_len();
        for (t, &keep) in mask.iter().enumerate() {
            if !keep {
                self.frames.data_mut()[t * n..(t + 1) * n].fill(0.0);
                self.mask[t] = false;
            }
        }
        Ok(())
    }

    pub fn masked(&self, mask: &[bool]) -> Result<Self> {
        let mut c = self.clone();
        c.apply_mask(mask)?;
        Ok(c)
    }

    /// Frames flattened to `[T × H·W·C]`.
    pub fn flat(&self) -> Result<Tensor> {
        let t = self.len();
        self.frames.clone().reshape(&[t, self.frame_len()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrontEndKind {
    Lp,
    Vit,
    Vgg21d,
}

impl std::str::FromStr for FrontEndKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lp" => Ok(FrontEndKind::Lp),
            "vit" => Ok(FrontEndKind::Vit),
            "vgg" | "vgg21d" => Ok(FrontEndKind::Vgg21d),
            other => Err(Error::Config(format!("unknown front-end {other:?}"))),
        }
    }
}

impl FrontEndKind {
    pub fn tag(self) -> &'static str {
        match self {
            FrontEndKind::Lp => "lp",
            FrontEndKind::Vit => "vit",
            FrontEndKind::Vgg21d => "vgg21d",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    /// `(pt, ph, pw)`
    pub patch: [usize; 3],
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_vit_expansion")]
    pub ffn_expansion: usize,
}

fn default_vit_expansion() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VggConfig {
    pub channels: Vec<usize>,
    #[serde(default = "default_spatial_kernel")]
    pub spatial_kernel: usize,
    #[serde(default = "default_temporal_kernel")]
    pub temporal_kernel: usize,
}

fn default_spatial_kernel() -> usize {
    3
}

fn default_temporal_kernel() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontEndConfig {
    pub kind: FrontEndKind,
    /// Spatial size `(H, W)` of the frames the front-end consumes.
    pub input_hw: [usize; 2],
    pub out_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vit: Option<VitConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vgg21d: Option<VggConfig>,
}

pub const CHANNELS: usize = 3;

impl FrontEndConfig {
    pub fn lp(input_hw: [usize; 2], out_dim: usize) -> Self {
        FrontEndConfig {
            kind: FrontEndKind::Lp,
            input_hw,
            out_dim,
            vit: None,
            vgg21d: None,
        }
    }

    pub fn vit(input_hw: [usize; 2], out_dim: usize, vit: VitConfig) -> Self {
        FrontEndConfig {
            kind: FrontEndKind::Vit,
            vit: Some(vit),
            ..Self::lp(input_hw, out_dim)
        }
    }

    pub fn vgg21d(input_hw: [usize; 2], out_dim: usize, vgg: VggConfig) -> Self {
        FrontEndConfig {
            kind: FrontEndKind::Vgg21d,
            vgg21d: Some(vgg),
            ..Self::lp(input_hw, out_dim)
        }
    }

    fn vit_cfg(&self) -> Result<&VitConfig> {
        self.vit
            .as_ref()
            .ok_or_else(|| Error::Config("vit front-end needs a `vit` section".into()))
    }

    fn vgg_cfg(&self) -> Result<&VggConfig> {
        self.vgg21d
            .as_ref()
            .ok_or_else(|| Error::Config("vgg21d front-end needs a `vgg21d` section".into()))
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_hw;
        if h == 0 || w == 0 || self.out_dim == 0 {
            return Err(Error::Config("input_hw and out_dim must be positive".into()));
        }
        match self.kind {
            FrontEndKind::Lp => Ok(()),
            FrontEndKind::Vit => {
                let v = self.vit_cfg()?;
                let [pt, ph, pw] = v.patch;
                if pt == 0 || ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
                    return Err(Error::Config(format!(
                        "patch {:?} must divide the {h}×{w} frame spatially",
                        v.patch
                    )));
                }
                if v.depth > 0 && (v.heads == 0 || self.out_dim % v.heads != 0) {
                    return Err(Error::Config(format!(
                        "vit out_dim {} not divisible by {} heads",
                        self.out_dim, v.heads
                    )));
                }
                Ok(())
            }
            FrontEndKind::Vgg21d => {
                let v = self.vgg_cfg()?;
                if v.channels.is_empty() || v.channels.contains(&0) {
                    return Err(Error::Config("vgg21d channel list must be non-empty and positive".into()));
                }
                kernels::check_odd_kernel(v.spatial_kernel)?;
                kernels::check_odd_kernel(v.temporal_kernel)?;
                let pools = v.channels.len() - 1;
                if (h >> pools) == 0 || (w >> pools) == 0 {
                    return Err(Error::Config(format!(
                        "{h}×{w} frame too small for {pools} pooling stages"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Number of frames of temporal context on each side that can influence
    /// one output step.
    pub fn temporal_radius(&self) -> Option<usize> {
        match self.kind {
            FrontEndKind::Lp => Some(0),
            FrontEndKind::Vit => self.vit.as_ref().map(|v| v.patch[0].saturating_sub(1)),
            FrontEndKind::Vgg21d => self
                .vgg21d
                .as_ref()
                .map(|v| v.channels.len() * (v.temporal_kernel - 1) / 2),
        }
    }

    pub fn specs(&self, b: &mut SpecBuilder) -> Result<()> {
        self.validate()?;
        let [h, w] = self.input_hw;
        let d = self.out_dim;
        match self.kind {
            FrontEndKind::Lp => {
                b.linear("proj", h * w * CHANNELS, d, true);
            }
            FrontEndKind::Vit => {
                let v = self.vit_cfg()?;
                let [pt, ph, pw] = v.patch;
                b.linear("proj", pt * ph * pw * CHANNELS, d, true);
                for i in 0..v.depth {
                    b.scope(&format!("layer{i}"), |s| {
                        s.scope("mhsa", |m| conformer::mhsa_specs(m, d));
                        s.scope("ffn", |f| {
                            f.layer_norm("ln", d)
                                .linear("l1", d, d * v.ffn_expansion, true)
                                .linear("l2", d * v.ffn_expansion, d, true);
                        });
                    });
                }
            }
            FrontEndKind::Vgg21d => {
                let v = self.vgg_cfg()?;
                let mut cin = CHANNELS;
                for (i, &c) in v.channels.iter().enumerate() {
                    b.scope(&format!("block{i}"), |s| {
                        s.add("spatial.w", &[v.spatial_kernel, v.spatial_kernel, cin, c], Init::Xavier)
                            .add("spatial.b", &[c], Init::Zeros)
                            .add("temporal.w", &[v.temporal_kernel, c], Init::Xavier);
                    });
                    cin = c;
                }
                b.linear("proj", cin, d, true);
            }
        }
        Ok(())
    }

    pub fn param_specs(&self, prefix: &str) -> Result<Vec<nn::ParamSpec>> {
        let mut b = SpecBuilder::new(prefix);
        self.specs(&mut b)?;
        Ok(b.finish())
    }

    /// Length of the output sequence for a `t`-frame clip.
    pub fn output_len(&self, t: usize) -> usize {
        match (self.kind, &self.vit) {
            (FrontEndKind::Vit, Some(v)) => t.div_ceil(v.patch[0]),
            _ => t,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, clip: &VideoClip, p: &Scope<'_, 'g>) -> Result<Var<'g>> {
        let (h, w) = clip.hw();
        if [h, w] != self.input_hw {
            return Err(Error::shape("front-end input", &[h, w], &self.input_hw));
        }
        match self.kind {
            FrontEndKind::Lp => lp_forward(g, clip, p.get("proj.w")?, p.get("proj.b")?),
            FrontEndKind::Vit => vit_forward(g, clip, self, p),
            FrontEndKind::Vgg21d => vgg21d_forward(g, clip, self, p),
        }
    }
}

/// Scalar parameter count of a front-end, computed from its spec list.
pub fn count_params(cfg: &FrontEndConfig) -> Result<usize> {
    Ok(nn::count(&cfg.param_specs("")?))
}

/// `out[t] = flatten(frame_t) · W + b`. No temporal mixing.
pub fn lp_forward<'g>(g: &'g Graph, clip: &VideoClip, weights: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
    let rows = weights.shape()[0];
    if rows != clip.frame_len() {
        return Err(Error::shape("lp_forward", &[clip.frame_len()], &weights.shape()));
    }
    g.constant(clip.flat()?).linear(weights, Some(bias))
}

/// Cuts a clip into `pt×ph×pw` tubelets.
///
/// The time axis is tail-padded with zero (masked) frames to a multiple of
/// `pt`. Tokens are ordered by time slab, then row-major over the spatial
/// grid; each token is flattened in `(dt, dy, dx, c)` order.
pub fn vit_patchify(clip: &VideoClip, patch: [usize; 3]) -> Result<Tensor> {
    let [pt, ph, pw] = patch;
    let (h, w) = clip.hw();
    if pt == 0 || ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
        return Err(Error::Config(format!(
            "patch {patch:?} does not tile a {h}×{w} frame"
        )));
    }
    let c = CHANNELS;
    let (gy, gx) = (h / ph, w / pw);
    let slabs = clip.len().div_ceil(pt);
    let tok_dim = pt * ph * pw * c;
    let mut out = Vec::with_capacity(slabs * gy * gx * tok_dim);
    for s in 0..slabs {
        for by in 0..gy {
            for bx in 0..gx {
                for dt in 0..pt {
                    let t = s * pt + dt;
                    for dy in 0..ph {
                        if t >= clip.len() {
                            out.extend(std::iter::repeat_n(0.0, pw * c));
                            continue;
                        }
                        let y = by * ph + dy;
                        let start = (y * w + bx * pw) * c;
                        out.extend_from_slice(&clip.frame(t)[start..start + pw * c]);
                    }
                }
            }
        }
    }
    Tensor::new(&[slabs * gy * gx, tok_dim], out)
}

/// Patchify → linear projection → pre-norm transformer layers applied within
/// each time slab → mean over the slab's spatial tokens.
pub fn vit_forward<'g>(g: &'g Graph, clip: &VideoClip, cfg: &FrontEndConfig, p: &Scope<'_, 'g>) -> Result<Var<'g>> {
    let v = cfg.vit_cfg()?;
    let tokens = vit_patchify(clip, v.patch)?;
    let slabs = clip.len().div_ceil(v.patch[0]);
    let per_slab = tokens.shape()[0] / slabs;
    let emb = p.linear("proj", g.constant(tokens))?;
    if v.depth == 0 {
        return emb.mean_mid(slabs, per_slab);
    }
    let mut pooled = Vec::with_capacity(slabs);
    for s in 0..slabs {
        let idx: Vec<usize> = (s * per_slab..(s + 1) * per_slab).collect();
        let mut x = emb.gather_rows(&idx)?;
        for i in 0..v.depth {
            let layer = p.sub(&format!("layer{i}"));
            x = conformer::mhsa(x, &layer.sub("mhsa"), v.heads)?;
            x = x.add(conformer::feed_forward(x, &layer.sub("ffn"), true)?)?;
        }
        pooled.push(x.mean_mid(1, per_slab)?);
    }
    Var::concat_rows(&pooled)
}

/// (2+1)-D VGG: per block, a spatial conv applied to every frame, swish, and
/// a per-channel temporal conv; 2×2 max pooling between blocks; spatial
/// average pooling and a linear map to the output dimension.
pub fn vgg21d_forward<'g>(g: &'g Graph, clip: &VideoClip, cfg: &FrontEndConfig, p: &Scope<'_, 'g>) -> Result<Var<'g>> {
    let v = cfg.vgg_cfg()?;
    if v.channels.is_empty() {
        return Err(Error::Config("vgg21d channel list is empty".into()));
    }
    let t = clip.len();
    let mut x = g.constant(clip.frames().clone());
    for (i, &c) in v.channels.iter().enumerate() {
        let blk = p.sub(&format!("block{i}"));
        x = x.conv2d(blk.get("spatial.w")?, 1, Padding::Same)?;
        x = x.add_bias(blk.get("spatial.b")?)?.swish()?;
        let s = x.shape();
        let (h, w) = (s[1], s[2]);
        let kernel = blk.get("temporal.w")?.tile_cols(h * w)?;
        x = x
            .reshape(&[t, h * w * c])?
            .depthwise_conv1d(kernel)?
            .reshape(&[t, h, w, c])?;
        if i + 1 < v.channels.len() {
            x = x.max_pool2()?;
        }
    }
    let s = x.shape();
    let pooled = x.reshape(&[t, s[1] * s[2], s[3]])?.mean_mid(t, s[1] * s[2])?;
    p.linear("proj", pooled)
}
