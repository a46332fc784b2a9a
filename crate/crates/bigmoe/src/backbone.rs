//! Desk-scale vision transformer carrying the expert adapters and the prompt
//! bypass: patch embedding with a class token, pre-norm encoder blocks, one
//! adapter per block, per-block prompt refinement, and a linear two-class
//! head on the class token.
//!
//! The encoder stream is fed the RGB modality; depth and IR reach the model
//! only through the clue prompts of the bypass, and modality masking only
//! through the mask prompts. Adapter up-projections and prompt value
//! projections start at zero, so a freshly initialized model computes
//! exactly the plain backbone forward.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::cpb::{
    apply_modality_mask, ModalityTensors, PromptGenerator, PromptRefiner, PromptState,
};
use crate::error::{Error, Result};
use crate::igma::{AdapterTrace, CoarseMoe, IgmaAdapter, RoutingCtx};
use crate::rng::{derive_rng, derive_rng_indexed, mix_seed};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub token_dim: usize,
    pub depth: usize,
    pub attn_heads: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
}

impl BackboneConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "{path}.image_size: {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.token_dim == 0 || self.attn_heads == 0 || self.token_dim % self.attn_heads != 0 {
            return Err(Error::Config(format!(
                "{path}.token_dim: {} must be a positive multiple of attn_heads {}",
                self.token_dim, self.attn_heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config(format!("{path}.depth: must be >= 1")));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config(format!("{path}.mlp_ratio: must be >= 1")));
        }
        if self.n_classes != 2 {
            return Err(Error::Config(format!(
                "{path}.n_classes: {} (this artifact is binary live/spoof)",
                self.n_classes
            )));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    /// Token count including the class token.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Patch projection, learned class token, learned positional embeddings.
pub struct PatchEmbed {
    pub proj: Tensor, // [patch_dim, d]
    pub bias: Tensor, // [d]
    pub cls: Tensor,  // [1, d]
    pub pos: Tensor,  // [T, d]
    cfg: BackboneConfig,
}

impl PatchEmbed {
    pub fn init(rng: &mut ChaCha8Rng, cfg: &BackboneConfig) -> Self {
        let d = cfg.token_dim;
        PatchEmbed {
            proj: Tensor::randn(rng, &[cfg.patch_dim(), d], 0.02).param(),
            bias: Tensor::zeros(&[d]).param(),
            cls: Tensor::randn(rng, &[1, d], 0.02).param(),
            pos: Tensor::randn(rng, &[cfg.n_tokens(), d], 0.02).param(),
        cfg: cfg.clone(),
        }
    }

    /// Non-overlapping patches, linear projection, class token prepended,
    /// positional embeddings added: `[3,S,S] -> [T, d]`.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape();
        let (size, p) = (self.cfg.image_size, self.cfg.patch_size);
        if s != [3, size, size] {
            return Err(Error::Config(format!(
                "patchify expects [3,{size},{size}], got {s:?}"
            )));
        }
        let grid = size / p;
        let pd = self.cfg.patch_dim();
        let data = image.data();
        let mut patches = vec![0.0; grid * grid * pd];
        for gy in 0..grid {
            for gx in 0..grid {
                let row = gy * grid + gx;
                let mut col = 0;
                for c in 0..3 {
                    for py in 0..p {
                        for px in 0..p {
                            let y = gy * p + py;
                            let x = gx * p + px;
                            patches[row * pd + col] = data[c * size * size + y * size + x];
                            col += 1;
                        }
                    }
                }
            }
        }
        drop(data);
        // the image is an input, not a parameter: no gradient path is needed
        let patch_mat = Tensor::from_vec(patches, &[grid * grid, pd])?;
        let tokens = patch_mat.matmul(&self.proj)?.add_bias(&self.bias)?;
        let with_cls = Tensor::concat(&[&self.cls, &tokens], 0)?;
        with_cls.add(&self.pos)
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor)>) {
        out.push(("patch.proj".into(), self.proj.clone()));
        out.push(("patch.bias".into(), self.bias.clone()));
        out.push(("patch.cls".into(), self.cls.clone()));
        out.push(("patch.pos".into(), self.pos.clone()));
    }
}

pub struct AttnHead {
    pub wq: Tensor, // [d, dh]
    pub wk: Tensor,
    pub wv: Tensor,
}

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `+ MLP(LN(.))`.
/// The per-block adapter residual is applied by the model on top.
pub struct EncoderBlock {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub heads: Vec<AttnHead>,
    pub wo: Tensor, // [d, d]
    pub bo: Tensor, // [d]
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor, // [d, d*ratio]
    pub b1: Tensor,
    pub w2: Tensor, // [d*ratio, d]
    pub b2: Tensor,
    head_dim: usize,
}

impl EncoderBlock {
    pub fn init(rng: &mut ChaCha8Rng, cfg: &BackboneConfig) -> Self {
        let d = cfg.token_dim;
        let dh = d / cfg.attn_heads;
        let dm = d * cfg.mlp_ratio;
        let std = 0.02;
        EncoderBlock {
            ln1_g: Tensor::full(&[d], 1.0).param(),
            ln1_b: Tensor::zeros(&[d]).param(),
            heads: (0..cfg.attn_heads)
                .map(|_| AttnHead {
                    wq: Tensor::randn(rng, &[d, dh], std).param(),
                    wk: Tensor::randn(rng, &[d, dh], std).param(),
                    wv: Tensor::randn(rng, &[d, dh], std).param(),
                })
                .collect(),
            wo: Tensor::randn(rng, &[d, d], std).param(),
            bo: Tensor::zeros(&[d]).param(),
            ln2_g: Tensor::full(&[d], 1.0).param(),
            ln2_b: Tensor::zeros(&[d]).param(),
            w1: Tensor::randn(rng, &[d, dm], std).param(),
            b1: Tensor::zeros(&[dm]).param(),
            w2: Tensor::randn(rng, &[dm, d], std).param(),
            b2: Tensor::zeros(&[d]).param(),
            head_dim: dh,
        }
    }

    fn attention(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let normed = x.layer_norm(&self.ln1_g, &self.ln1_b, 1e-6)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut attns = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = normed.matmul(&head.wq)?;
            let k = normed.matmul(&head.wk)?;
            let v = normed.matmul(&head.wv)?;
            let attn = q.matmul(&k.transpose()?)?.scale(scale).softmax(1)?;
            outs.push(attn.matmul(&v)?);
            attns.push(attn);
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        let merged = Tensor::concat(&refs, 1)?;
        Ok((merged.matmul(&self.wo)?.add_bias(&self.bo)?, attns))
    }

    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let (attn_out, _) = self.attention(tokens)?;
        let h = tokens.add(&attn_out)?;
        let normed = h.layer_norm(&self.ln2_g, &self.ln2_b, 1e-6)?;
        let mlp = normed
            .matmul(&self.w1)?
            .add_bias(&self.b1)?
            .gelu()
            .matmul(&self.w2)?
            .add_bias(&self.b2)?;
        h.add(&mlp)
    }

    /// Attention probability matrices per head (for inspection/tests).
    pub fn attention_weights(&self, tokens: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.attention(tokens)?.1)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.ln1.g"), self.ln1_g.clone()));
        out.push((format!("{prefix}.ln1.b"), self.ln1_b.clone()));
        for (h, head) in self.heads.iter().enumerate() {
            out.push((format!("{prefix}.attn{h}.wq"), head.wq.clone()));
            out.push((format!("{prefix}.attn{h}.wk"), head.wk.clone()));
            out.push((format!("{prefix}.attn{h}.wv"), head.wv.clone()));
        }
        out.push((format!("{prefix}.attn.wo"), self.wo.clone()));
        out.push((format!("{prefix}.attn.bo"), self.bo.clone()));
        out.push((format!("{prefix}.ln2.g"), self.ln2_g.clone()));
        out.push((format!("{prefix}.ln2.b"), self.ln2_b.clone()));
        out.push((format!("{prefix}.mlp.w1"), self.w1.clone()));
        out.push((format!("{prefix}.mlp.b1"), self.b1.clone()));
        out.push((format!("{prefix}.mlp.w2"), self.w2.clone()));
        out.push((format!("{prefix}.mlp.b2"), self.b2.clone()));
    }
}

pub enum Adapter {
    Igma(Box<IgmaAdapter>),
    Coarse(CoarseMoe),
    None,
}

pub struct ModelBlock {
    pub encoder: EncoderBlock,
    pub adapter: Adapter,
    pub refiner: Option<PromptRefiner>,
}

/// Forward execution mode. Training applies gating noise and modality
/// masking, both derived deterministically from the given seed.
#[derive(Clone, Copy)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

/// Captured gating decisions per block (None for blocks without an IGMA
/// adapter).
pub type ModelTrace = Vec<Option<AdapterTrace>>;

/// How to perturb the initial prompt block (bypass-property tests).
#[derive(Clone, Copy)]
pub enum PromptPerturb {
    Zero,
    Noise(u64),
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub capture: bool,
    pub replay: Option<&'a ModelTrace>,
    pub prompt_perturb: Option<PromptPerturb>,
}

pub struct ModelOutput {
    /// Logits `[1, 2]` (index 1 = live).
    pub logits: Tensor,
    pub trace: Option<ModelTrace>,
    /// Prompt blocks P_0 .. P_depth when prompts are active.
    pub prompts: Option<PromptState>,
    /// Which modalities were masked this forward.
    pub mask_indicator: [bool; 3],
}

pub struct BigMoeModel {
    pub cfg: RunConfig,
    pub patch: PatchEmbed,
    pub blocks: Vec<ModelBlock>,
    pub prompt_gen: Option<PromptGenerator>,
    pub classifier_w: Tensor, // [d, 2]
    pub classifier_b: Tensor, // [2]
}

impl BigMoeModel {
    /// Build and initialize from a validated config; deterministic in
    /// `cfg.seed`.
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive_rng(cfg.seed, "model-init");
        let b = &cfg.backbone;
        let patch = PatchEmbed::init(&mut rng, b);

        let use_igma = !cfg.mode.disable_igma && !cfg.mode.coarse_moe;
        let prompts_active = use_igma
            && !cfg.mode.disable_cpb
            && cfg.mode.prompts.uses_task();

        let mut blocks = Vec::with_capacity(b.depth);
        for _ in 0..b.depth {
            let encoder = EncoderBlock::init(&mut rng, b);
            let adapter = if cfg.mode.coarse_moe {
                Adapter::Coarse(CoarseMoe::init(
                    &mut rng,
                    cfg.mode.coarse_experts,
                    b.token_dim,
                    cfg.mode.coarse_hidden,
                ))
            } else if cfg.mode.disable_igma {
                Adapter::None
            } else {
                Adapter::Igma(Box::new(IgmaAdapter::init(
                    &mut rng,
                    &cfg.igma,
                    b.token_dim,
                    cfg.cpb.prompt_dim,
                )?))
            };
            let refiner = prompts_active
                .then(|| PromptRefiner::init(&mut rng, b.token_dim, &cfg.cpb));
            blocks.push(ModelBlock {
                encoder,
                adapter,
                refiner,
            });
        }
        let prompt_gen = if prompts_active {
            Some(PromptGenerator::init(
                &mut rng,
                &cfg.cpb,
                cfg.mode.prompts,
                b.image_size,
            )?)
        } else {
            None
        };
        Ok(BigMoeModel {
            cfg: cfg.clone(),
            patch,
            blocks,
            prompt_gen,
            classifier_w: Tensor::randn(&mut rng, &[b.token_dim, 2], 0.02).param(),
            classifier_b: Tensor::zeros(&[2]).param(),
        })
    }

    pub fn forward(&self, mods: &ModalityTensors, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_ext(mods, mode, ForwardOptions::default())?.logits)
    }

    pub fn forward_ext(
        &self,
        mods: &ModalityTensors,
        mode: Mode,
        opts: ForwardOptions<'_>,
    ) -> Result<ModelOutput> {
        let (h, w) = mods.spatial()?;
        let size = self.cfg.backbone.image_size;
        if (h, w) != (size, size) {
            return Err(Error::Config(format!(
                "input is {h}x{w}, config expects {size}x{size}"
            )));
        }
        if let Some(trace) = opts.replay {
            if trace.len() != self.blocks.len() {
                return Err(Error::Usage(format!(
                    "replay trace covers {} blocks, model has {}",
                    trace.len(),
                    self.blocks.len()
                )));
            }
            if matches!(mode, Mode::Train { .. }) {
                return Err(Error::Usage(
                    "replayed routing is an evaluation-mode operation".into(),
                ));
            }
        }

        // Modality masking simulates missing sensors on the prompt path:
        // the masked planes feed the clue prompts and the indicator feeds
        // the mask prompts, while the encoder keeps its RGB stream.
        let (cpb_mods, mask_indicator) = match mode {
            Mode::Train { seed } if self.cfg.cpb.mask_rate > 0.0 => {
                let mut mrng = derive_rng_indexed(seed, "modality-mask", &[]);
                apply_modality_mask(mods, self.cfg.cpb.mask_rate, &mut mrng)?
            }
            _ => (mods.clone(), [false; 3]),
        };

        // initial prompt block P_0
        let mut prompt: Option<Tensor> = match &self.prompt_gen {
            Some(g) => g.initial_prompt(&cpb_mods, &mask_indicator)?,
            None => None,
        };
        if let (Some(p), Some(perturb)) = (&prompt, opts.prompt_perturb) {
            prompt = Some(match perturb {
                PromptPerturb::Zero => Tensor::zeros(&p.shape()),
                PromptPerturb::Noise(seed) => {
                    let mut prng = derive_rng(seed, "prompt-perturb");
                    p.add(&Tensor::randn(&mut prng, &p.shape(), 1.0))?
                }
            });
        }

        let mut per_layer: Vec<Tensor> = Vec::new();
        let mut tokens = self.patch.patchify(&mods.rgb)?;
        let mut trace: ModelTrace = Vec::with_capacity(self.blocks.len());
        let dp = self.cfg.cpb.prompt_dim;
        let noise_scale = match mode {
            Mode::Train { .. } => self.cfg.igma.noise_scale,
            Mode::Eval => 0.0,
        };
        let base_seed = match mode {
            Mode::Train { seed } => seed,
            Mode::Eval => 0,
        };

        for (bi, block) in self.blocks.iter().enumerate() {
            // gating summary from the current layer's prompt block
            let summary = match &prompt {
                Some(p) => p.mean_rows()?,
                None => Tensor::zeros(&[dp]),
            };
            if let Some(p) = &prompt {
                per_layer.push(p.clone());
            }
            // refine prompts for the next layer from this layer's tokens
            if let (Some(refiner), Some(p)) = (&block.refiner, &prompt) {
                let x_c = refiner.project_tokens(&tokens)?;
                prompt = Some(refiner.prompt_update(p, &x_c)?);
            }

            let h2 = block.encoder.forward(&tokens)?;
            tokens = match &block.adapter {
                Adapter::Igma(adapter) => {
                    let routing = match opts.replay {
                        Some(model_trace) => {
                            let block_trace = model_trace[bi].as_ref().ok_or_else(|| {
                                Error::Usage(format!("replay trace missing block {bi}"))
                            })?;
                            RoutingCtx::Replay(block_trace)
                        }
                        None => RoutingCtx::Online {
                            noise_scale,
                            seed: mix_seed(base_seed, bi as u64),
                            capture: opts.capture,
                        },
                    };
                    let out = adapter.forward(&h2, &summary, routing)?;
                    trace.push(out.trace);
                    h2.add(&out.residual)?
                }
                Adapter::Coarse(moe) => {
                    trace.push(None);
                    h2.add(&moe.forward(&h2)?)?
                }
                Adapter::None => {
                    trace.push(None);
                    h2
                }
            };
        }
        if let Some(p) = prompt {
            per_layer.push(p);
        }

        let cls = tokens.slice_rows(0, 1)?;
        let logits = cls.matmul(&self.classifier_w)?.add_bias(&self.classifier_b)?;
        Ok(ModelOutput {
            logits,
            trace: opts.capture.then_some(trace),
            prompts: (!per_layer.is_empty()).then_some(PromptState { per_layer }),
            mask_indicator,
        })
    }

    /// Plain backbone forward (patchify, encoder blocks, classifier) with no
    /// adapter or prompt machinery; the reference for adapter transparency.
    pub fn forward_backbone_only(&self, mods: &ModalityTensors) -> Result<Tensor> {
        let mut tokens = self.patch.patchify(&mods.rgb)?;
        for block in &self.blocks {
            tokens = block.encoder.forward(&tokens)?;
        }
        let cls = tokens.slice_rows(0, 1)?;
        cls.matmul(&self.classifier_w)?.add_bias(&self.classifier_b)
    }

    /// Stable-ordered named parameters.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.patch.params(&mut out);
        for (i, block) in self.blocks.iter().enumerate() {
            block.encoder.params(&format!("block{i}"), &mut out);
            match &block.adapter {
                Adapter::Igma(a) => a.params(&format!("block{i}.igma"), &mut out),
                Adapter::Coarse(c) => c.params(&format!("block{i}.coarse"), &mut out),
                Adapter::None => {}
            }
            if let Some(r) = &block.refiner {
                r.params(&format!("block{i}.refiner"), &mut out);
            }
        }
        if let Some(g) = &self.prompt_gen {
            g.params("prompt", &mut out);
        }
        out.push(("classifier.w".into(), self.classifier_w.clone()));
        out.push(("classifier.b".into(), self.classifier_b.clone()));
        out
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params().into_iter().map(|(_, t)| t).collect()
    }

    /// Gating-side parameters of all IGMA adapters.
    pub fn gating_params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for block in &self.blocks {
            if let Adapter::Igma(a) = &block.adapter {
                out.extend(a.gating_params());
            }
        }
        out
    }

    /// Expert-path parameters (down/up projections) of all IGMA adapters.
    pub fn expert_params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for block in &self.blocks {
            if let Adapter::Igma(a) = &block.adapter {
                out.extend(a.pool.down.iter().cloned());
                out.extend(a.pool.up.iter().cloned());
            }
        }
        out
    }
}
