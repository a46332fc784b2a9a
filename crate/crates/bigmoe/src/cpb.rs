//! Convolutional Prompt Bypass: turns the multimodal input into prompt
//! tokens (clue prompts via central-difference convolution, mask prompts
//! from modality-dropout indicators, learned task prompts), and refines the
//! prompt block per encoder layer with a small self-attention plus efficient
//! channel attention.
//!
//! Prompts feed the gating path only; nothing here ever writes into the
//! encoder token stream.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which prompt components form the merged prompt `[P_t; P_c; P_m]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptSetting {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "t")]
    TaskOnly,
    #[serde(rename = "t+c")]
    TaskClue,
    #[serde(rename = "t+c+m")]
    Full,
}

impl PromptSetting {
    pub fn uses_clue(self) -> bool {
        matches!(self, PromptSetting::TaskClue | PromptSetting::Full)
    }

    pub fn uses_mask(self) -> bool {
        matches!(self, PromptSetting::Full)
    }

    pub fn uses_task(self) -> bool {
        !matches!(self, PromptSetting::None)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CpbConfig {
    /// Prompt token width d_p.
    pub prompt_dim: usize,
    /// Number of learned task prompt tokens.
    pub n_task_prompts: usize,
    /// Central-difference mixing factor, in [0, 1].
    pub theta: f64,
    /// ECA 1-D kernel size (odd, <= prompt_dim).
    pub eca_kernel: usize,
    /// Intermediate channel width of the clue CDC stack.
    pub clue_channels: usize,
    /// Strides of the two CDC layers; they set the clue token grid.
    pub clue_stride1: usize,
    pub clue_stride2: usize,
    /// Probability of zeroing each modality during training.
    pub mask_rate: f64,
}

impl CpbConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.prompt_dim == 0 {
            return Err(Error::Config(format!("{path}.prompt_dim: must be >= 1")));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!(
                "{path}.theta: {} outside [0, 1]",
                self.theta
            )));
        }
        if self.eca_kernel % 2 == 0 || self.eca_kernel == 0 {
            return Err(Error::Config(format!(
                "{path}.eca_kernel: {} must be odd",
                self.eca_kernel
            )));
        }
        if self.eca_kernel > self.prompt_dim {
            return Err(Error::Config(format!(
                "{path}.eca_kernel: {} exceeds prompt_dim {}",
                self.eca_kernel, self.prompt_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!(
                "{path}.mask_rate: {} outside [0, 1]",
                self.mask_rate
            )));
        }
        if self.clue_channels == 0 || self.clue_stride1 == 0 || self.clue_stride2 == 0 {
            return Err(Error::Config(format!(
                "{path}: clue_channels and clue strides must be >= 1"
            )));
        }
        Ok(())
    }

    /// Spatial grid side after the two stride-reducing CDC layers.
    pub fn clue_grid(&self, image_size: usize) -> Result<usize> {
        let s1 = crate::tensor::conv2d_out_extent(image_size, 3, self.clue_stride1, 1)
            .ok_or_else(|| Error::Config("cpb.clue_stride1: image too small".into()))?;
        let s2 = crate::tensor::conv2d_out_extent(s1, 3, self.clue_stride2, 1)
            .ok_or_else(|| Error::Config("cpb.clue_stride2: image too small".into()))?;
        Ok(s2)
    }
}

/// The three aligned modality planes of one sample.
#[derive(Clone)]
pub struct ModalityTensors {
    pub rgb: Tensor,   // [3, H, W]
    pub depth: Tensor, // [1, H, W]
    pub ir: Tensor,    // [1, H, W]
}

impl ModalityTensors {
    pub fn spatial(&self) -> Result<(usize, usize)> {
        let (r, d, i) = (self.rgb.shape(), self.depth.shape(), self.ir.shape());
        if r.len() != 3 || d.len() != 3 || i.len() != 3 || r[0] != 3 || d[0] != 1 || i[0] != 1 {
            return Err(Error::Input(format!(
                "modalities must be rgb [3,H,W], depth [1,H,W], ir [1,H,W]; got {r:?}/{d:?}/{i:?}"
            )));
        }
        if r[1..] != d[1..] || r[1..] != i[1..] {
            return Err(Error::Input(format!(
                "modalities are not spatially aligned: {r:?}/{d:?}/{i:?}"
            )));
        }
        Ok((r[1], r[2]))
    }

    /// Channel concatenation `[5, H, W]`.
    pub fn channel_concat(&self) -> Result<Tensor> {
        let (h, w) = self.spatial()?;
        let flat = |t: &Tensor, c: usize| t.reshape(&[c, h * w]);
        let cat = Tensor::concat(
            &[&flat(&self.rgb, 3)?, &flat(&self.depth, 1)?, &flat(&self.ir, 1)?],
            0,
        )?;
        cat.reshape(&[5, h, w])
    }
}

/// 3x3 central-difference convolution kernel:
/// `y = conv(x, w) + bias - theta * (x_center x tap_sums)`.
/// `theta = 0` reduces to vanilla convolution.
pub struct CdcKernel {
    pub weights: Tensor, // [Co, Ci, 3, 3]
    pub bias: Tensor,    // [Co]
    pub theta: f64,
}

impl CdcKernel {
    pub fn new(weights: Tensor, bias: Tensor, theta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::Config(format!("cdc theta {theta} outside [0, 1]")));
        }
        let ws = weights.shape();
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::Config(format!(
                "cdc kernels are [Co, Ci, 3, 3], got {ws:?}"
            )));
        }
        if bias.shape() != [ws[0]] {
            return Err(Error::Config(format!(
                "cdc bias shape {:?} != [{}]",
                bias.shape(),
                ws[0]
            )));
        }
        Ok(CdcKernel { weights, bias, theta })
    }

    pub fn init(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, theta: f64) -> Result<Self> {
        let std = (2.0 / (c_in as f64 * 9.0)).sqrt();
        Self::new(
            Tensor::randn(rng, &[c_out, c_in, 3, 3], std).param(),
            Tensor::zeros(&[c_out]).param(),
            theta,
        )
    }

    pub fn forward(&self, x: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        cdc_forward(x, self, stride, padding)
    }
}

/// Central-difference convolution: vanilla cross-correlation minus theta
/// times (center pixel x per-channel-pair kernel tap sum).
pub fn cdc_forward(x: &Tensor, k: &CdcKernel, stride: usize, padding: usize) -> Result<Tensor> {
    let vanilla = x.conv2d(&k.weights, Some(&k.bias), stride, padding)?;
    if k.theta == 0.0 {
        return Ok(vanilla);
    }
    let ws = k.weights.shape();
    let (co, ci) = (ws[0], ws[1]);
    let centers = x.center_sample(stride, padding, 3, 3)?; // [Ci, Ho, Wo]
    let cs = centers.shape();
    let (ho, wo) = (cs[1], cs[2]);
    let diff = k
        .weights
        .tap_sum()? // [Co, Ci]
        .matmul(&centers.reshape(&[ci, ho * wo])?)? // [Co, Ho*Wo]
        .reshape(&[co, ho, wo])?;
    vanilla.sub(&diff.scale(k.theta))
}

/// Efficient channel attention over `[n, d_p]` tokens: pool tokens to a
/// channel descriptor, run a small 1-D convolution across channels, squash,
/// and rescale every channel of the input.
pub fn eca_forward(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 2 {
        return Err(Error::Dim(format!("eca expects [n, d_p], got {xs:?}")));
    }
    let ks = kernel.shape();
    if ks.len() != 1 || ks[0] > xs[1] {
        return Err(Error::Config(format!(
            "eca kernel shape {ks:?} invalid for channel width {}",
            xs[1]
        )));
    }
    let descriptor = x.mean_rows()?; // [d_p]
    let scale = descriptor.conv1d_same(kernel)?.sigmoid(); // [d_p]
    x.mul(&scale.broadcast_rows(xs[0])?)
}

/// Two-layer CDC stack turning the channel-concatenated modalities into
/// clue prompt tokens `[n_c, d_p]`.
pub struct CluePipeline {
    pub layer1: CdcKernel, // 5 -> clue_channels
    pub layer2: CdcKernel, // clue_channels -> prompt_dim
    stride1: usize,
    stride2: usize,
    n_clue: usize,
}

impl CluePipeline {
    pub fn init(rng: &mut ChaCha8Rng, cfg: &CpbConfig, image_size: usize) -> Result<Self> {
        let grid = cfg.clue_grid(image_size)?;
        Ok(CluePipeline {
            layer1: CdcKernel::init(rng, 5, cfg.clue_channels, cfg.theta)?,
            layer2: CdcKernel::init(rng, cfg.clue_channels, cfg.prompt_dim, cfg.theta)?,
            stride1: cfg.clue_stride1,
            stride2: cfg.clue_stride2,
            n_clue: grid * grid,
        })
    }

    pub fn n_clue(&self) -> usize {
        self.n_clue
    }

    /// Clue prompts P_c from (possibly masked) modalities.
    pub fn generate(&self, mods: &ModalityTensors) -> Result<Tensor> {
        let stacked = mods.channel_concat()?;
        let h1 = self.layer1.forward(&stacked, self.stride1, 1)?.gelu();
        let h2 = self.layer2.forward(&h1, self.stride2, 1)?;
        let tokens = h2.spatial_to_tokens()?;
        debug_assert_eq!(tokens.shape()[0], self.n_clue);
        Ok(tokens)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.cdc1.w"), self.layer1.weights.clone()));
        out.push((format!("{prefix}.cdc1.b"), self.layer1.bias.clone()));
        out.push((format!("{prefix}.cdc2.w"), self.layer2.weights.clone()));
        out.push((format!("{prefix}.cdc2.b"), self.layer2.bias.clone()));
    }
}

/// Independently zero each modality with probability `rate`; if the draw
/// masks all three, one uniformly chosen modality is kept so at least one
/// survives. Returns the masked planes and the indicator bits (1 = masked).
pub fn apply_modality_mask(
    mods: &ModalityTensors,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(ModalityTensors, [bool; 3])> {
    use rand::Rng;
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("mask rate {rate} outside [0, 1]")));
    }
    mods.spatial()?;
    let mut masked = [false; 3];
    for m in &mut masked {
        *m = rng.gen_range(0.0..1.0) < rate;
    }
    if masked.iter().all(|&m| m) {
        let keep = rng.gen_range(0..3usize);
        masked[keep] = false;
    }
    let zero_like = |t: &Tensor| Tensor::zeros(&t.shape());
    let out = ModalityTensors {
        rgb: if masked[0] { zero_like(&mods.rgb) } else { mods.rgb.clone() },
        depth: if masked[1] { zero_like(&mods.depth) } else { mods.depth.clone() },
        ir: if masked[2] { zero_like(&mods.ir) } else { mods.ir.clone() },
    };
    Ok((out, masked))
}

/// Learned present/masked embeddings per modality; the indicator bit selects
/// the row, so gradient reaches only the selected embedding.
pub struct MaskPromptTable {
    pub tables: Vec<Tensor>, // 3 tables of [2, d_p]
}

impl MaskPromptTable {
    pub fn init(rng: &mut ChaCha8Rng, prompt_dim: usize) -> Self {
        MaskPromptTable {
            tables: (0..3)
                .map(|_| Tensor::randn(rng, &[2, prompt_dim], 0.1).param())
                .collect(),
        }
    }

    /// P_m: one token per modality.
    pub fn build(&self, indicator: &[bool; 3]) -> Result<Tensor> {
        let rows = indicator
            .iter()
            .zip(&self.tables)
            .map(|(&bit, table)| table.slice_rows(bit as usize, 1))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = rows.iter().collect();
        Tensor::concat(&refs, 0)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, t) in self.tables.iter().enumerate() {
            out.push((format!("{prefix}.modality{i}"), t.clone()));
        }
    }
}

/// Per-layer prompt refinement: single-head self-attention over
/// `Cat(P_i, x_c)`, output taken at the prompt positions, ECA across the
/// channel axis, residual add. The value projection starts at zero, so a
/// fresh refiner is an exact identity.
pub struct PromptRefiner {
    pub wq: Tensor,       // [d_p, d_p]
    pub wk: Tensor,       // [d_p, d_p]
    pub wv: Tensor,       // [d_p, d_p] zero-initialized
    pub token_proj: Tensor, // [d, d_p] gating-side token projection for x_c
    pub eca_kernel: Tensor, // [ks]
}

impl PromptRefiner {
    pub fn init(rng: &mut ChaCha8Rng, token_dim: usize, cfg: &CpbConfig) -> Self {
        let dp = cfg.prompt_dim;
        PromptRefiner {
            wq: Tensor::randn(rng, &[dp, dp], 1.0 / (dp as f64).sqrt()).param(),
            wk: Tensor::randn(rng, &[dp, dp], 1.0 / (dp as f64).sqrt()).param(),
            wv: Tensor::zeros(&[dp, dp]).param(),
            token_proj: Tensor::randn(rng, &[token_dim, dp], 1.0 / (token_dim as f64).sqrt())
                .param(),
            eca_kernel: Tensor::randn(rng, &[cfg.eca_kernel], 0.1).param(),
        }
    }

    /// Project encoder tokens into the prompt width (x_c).
    pub fn project_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        tokens.matmul(&self.token_proj)
    }

    /// `P_{i+1} = P_i + ECA(Attn(Cat(P_i, x_c))[prompt positions])`.
    pub fn prompt_update(&self, prompts: &Tensor, x_c: &Tensor) -> Result<Tensor> {
        let ps = prompts.shape();
        if ps.len() != 2 || ps[0] == 0 {
            return Err(Error::Config(format!(
                "prompt_update requires a non-empty [n_p, d_p] block, got {ps:?}"
            )));
        }
        let dp = ps[1];
        if x_c.shape().len() != 2 || x_c.shape()[1] != dp {
            return Err(Error::Dim(format!(
                "x_c width {:?} does not match prompt width {dp}",
                x_c.shape()
            )));
        }
        let n_p = ps[0];
        let z = Tensor::concat(&[prompts, x_c], 0)?;
        let q = z.matmul(&self.wq)?;
        let k = z.matmul(&self.wk)?;
        let v = z.matmul(&self.wv)?;
        let attn = q
            .matmul(&k.transpose()?)?
            .scale(1.0 / (dp as f64).sqrt())
            .softmax(1)?;
        let out = attn.matmul(&v)?;
        let increment = eca_forward(&out.slice_rows(0, n_p)?, &self.eca_kernel)?;
        prompts.add(&increment)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.wq"), self.wq.clone()));
        out.push((format!("{prefix}.wk"), self.wk.clone()));
        out.push((format!("{prefix}.wv"), self.wv.clone()));
        out.push((format!("{prefix}.token_proj"), self.token_proj.clone()));
        out.push((format!("{prefix}.eca"), self.eca_kernel.clone()));
    }
}

/// The static prompt sources: learned task prompts, the clue pipeline, and
/// the mask prompt table. Which parts contribute follows the prompt setting.
pub struct PromptGenerator {
    pub setting: PromptSetting,
    pub p_task: Option<Tensor>, // [n_t, d_p]
    pub clue: Option<CluePipeline>,
    pub mask_table: Option<MaskPromptTable>,
}

/// Per-layer prompt blocks P_0 .. P_depth (the residual refinement chain).
pub struct PromptState {
    pub per_layer: Vec<Tensor>,
}

impl PromptGenerator {
    pub fn init(
        rng: &mut ChaCha8Rng,
        cfg: &CpbConfig,
        setting: PromptSetting,
        image_size: usize,
    ) -> Result<Self> {
        Ok(PromptGenerator {
            setting,
            p_task: setting
                .uses_task()
                .then(|| Tensor::randn(rng, &[cfg.n_task_prompts, cfg.prompt_dim], 0.1).param()),
            clue: if setting.uses_clue() {
                Some(CluePipeline::init(rng, cfg, image_size)?)
            } else {
                None
            },
            mask_table: setting.uses_mask().then(|| MaskPromptTable::init(rng, cfg.prompt_dim)),
        })
    }

    /// Merged initial prompt `[P_t; P_c; P_m]`, or `None` when the setting
    /// contributes nothing.
    pub fn initial_prompt(
        &self,
        mods: &ModalityTensors,
        indicator: &[bool; 3],
    ) -> Result<Option<Tensor>> {
        let mut parts: Vec<Tensor> = Vec::new();
        if let Some(p_task) = &self.p_task {
            parts.push(p_task.clone());
        }
        if let Some(clue) = &self.clue {
            parts.push(clue.generate(mods)?);
        }
        if let Some(table) = &self.mask_table {
            parts.push(table.build(indicator)?);
        }
        if parts.is_empty() {
            return Ok(None);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Some(Tensor::concat(&refs, 0)?))
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        if let Some(t) = &self.p_task {
            out.push((format!("{prefix}.task"), t.clone()));
        }
        if let Some(c) = &self.clue {
            c.params(&format!("{prefix}.clue"), out);
        }
        if let Some(m) = &self.mask_table {
            m.params(&format!("{prefix}.mask"), out);
        }
    }
}
