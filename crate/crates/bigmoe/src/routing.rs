//! Product-key retrieval over N = m^2 experts and noisy top-k gating.
//!
//! A query of dimension `d_q` splits into halves `(q_a, q_b)`; the score of
//! expert `e = i*m + j` is `dot(q_a, a_i) + dot(q_b, b_j)`. Because the score
//! is separable, the global top-k lies inside the k x k grid built from the
//! per-half top-k, so retrieval is exact, not approximate.
//!
//! Selection is plain f64 arithmetic; gradient flow through the selected
//! score paths is rebuilt on the graph by the `igma` module.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::tensor::Tensor;

/// Two learnable sub-key tables `[m, d_q/2]` whose Cartesian composition
/// defines `m^2` expert keys.
pub struct ProductKeyIndex {
    pub sub_keys_a: Tensor,
    pub sub_keys_b: Tensor,
    side: usize,
    half_dim: usize,
}

impl ProductKeyIndex {
    pub fn new(sub_keys_a: Tensor, sub_keys_b: Tensor) -> Result<Self> {
        let (sa, sb) = (sub_keys_a.shape(), sub_keys_b.shape());
        if sa.len() != 2 || sa != sb {
            return Err(Error::Config(format!(
                "sub-key tables must share a 2-D shape, got {sa:?} / {sb:?}"
            )));
        }
        Ok(ProductKeyIndex {
            side: sa[0],
            half_dim: sa[1],
            sub_keys_a,
            sub_keys_b,
        })
    }

    /// Random Gaussian sub-keys for `n_experts` (a perfect square) and an
    /// even query dimension.
    pub fn random(rng: &mut ChaCha8Rng, n_experts: usize, query_dim: usize) -> Result<Self> {
        let side = (n_experts as f64).sqrt().round() as usize;
        if side * side != n_experts || n_experts == 0 {
            return Err(Error::Config(format!(
                "n_experts {n_experts} is not a positive perfect square"
            )));
        }
        if query_dim % 2 != 0 || query_dim == 0 {
            return Err(Error::Config(format!("query_dim {query_dim} must be even")));
        }
        let half = query_dim / 2;
        let std = 1.0 / (half as f64).sqrt();
        let a = Tensor::randn(rng, &[side, half], std).param();
        let b = Tensor::randn(rng, &[side, half], std).param();
        Self::new(a, b)
    }

    pub fn n_experts(&self) -> usize {
        self.side * self.side
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn query_dim(&self) -> usize {
        2 * self.half_dim
    }

    /// Decompose an expert id into its (a-row, b-row) pair.
    pub fn split_id(&self, expert: usize) -> (usize, usize) {
        (expert / self.side, expert % self.side)
    }

    fn check_query(&self, q: &Tensor) -> Result<()> {
        let qs = q.shape();
        if qs.len() != 1 || qs[0] != self.query_dim() {
            return Err(Error::Config(format!(
                "query shape {qs:?} does not match index query_dim {}",
                self.query_dim()
            )));
        }
        Ok(())
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.n_experts() {
            return Err(Error::Usage(format!(
                "k = {k} outside [1, {}]",
                self.n_experts()
            )));
        }
        Ok(())
    }

    /// Per-half inner-product scores of the query halves against both tables.
    pub fn half_scores(&self, q: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let half = self.half_dim;
        let (qa, qb) = q.split_at(half);
        let ad = self.sub_keys_a.data();
        let bd = self.sub_keys_b.data();
        let dot = |keys: &[f64], row: usize, v: &[f64]| -> f64 {
            keys[row * half..(row + 1) * half]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum()
        };
        let sa: Vec<f64> = (0..self.side).map(|i| dot(&ad, i, qa)).collect();
        let sb: Vec<f64> = (0..self.side).map(|j| dot(&bd, j, qb)).collect();
        (sa, sb)
    }
}

/// Output of a gating / retrieval call. `expert_ids` are sorted strictly
/// descending by `raw_scores` with ties broken by ascending id. Retrieval-only
/// results (`pkr_scores`, `brute_force_topk`) carry empty `weights`;
/// `noisy_topk_gate` fills them with the softmax over `raw_scores`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub expert_ids: Vec<usize>,
    pub weights: Vec<f64>,
    pub raw_scores: Vec<f64>,
}

/// Learned affine-plus-tanh transform applied to retrieved scores before
/// top-k (the gating transform f_g), viewed as plain scalars.
#[derive(Debug, Clone, Copy)]
pub struct GatingTransform {
    pub weight: f64,
    pub bias: f64,
}

impl GatingTransform {
    pub fn identity_like() -> Self {
        GatingTransform { weight: 1.0, bias: 0.0 }
    }

    pub fn apply(&self, s: f64) -> f64 {
        (self.weight * s + self.bias).tanh()
    }
}

/// Indices `0..scores.len()` ordered by (score desc, index asc), truncated
/// to `width`.
pub(crate) fn top_indices(scores: &[f64], width: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]).then(x.cmp(&y)));
    idx.truncate(width);
    idx
}

/// One retrieved grid candidate, with enough provenance to rebuild its score
/// differentiably: `score = sa[a_idx] + sb[b_idx] + noise`, then f_g.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SelectedCandidate {
    pub expert_id: usize,
    pub a_idx: usize,
    pub b_idx: usize,
    pub noise: f64,
    /// f_g(raw + noise): the pre-softmax value top-k orders on.
    pub transformed: f64,
}

/// Shared selection core: per-half top-k, k x k candidate grid, optional
/// per-candidate Gaussian noise, gating transform, global top-k.
pub(crate) fn select_topk(
    sa: &[f64],
    sb: &[f64],
    side: usize,
    k: usize,
    noise_scale: f64,
    rng: Option<&mut ChaCha8Rng>,
    fg: GatingTransform,
) -> Vec<SelectedCandidate> {
    let width = k.min(side);
    let top_a = top_indices(sa, width);
    let top_b = top_indices(sb, width);
    let mut noise_draws: Vec<f64> = Vec::new();
    if noise_scale > 0.0 {
        if let Some(r) = rng {
            let normal = Normal::new(0.0, noise_scale).expect("valid noise scale");
            noise_draws = (0..width * width).map(|_| normal.sample(r)).collect();
        }
    }
    let mut candidates = Vec::with_capacity(width * width);
    for (ar, &i) in top_a.iter().enumerate() {
        for (br, &j) in top_b.iter().enumerate() {
            let noise = noise_draws.get(ar * width + br).copied().unwrap_or(0.0);
            let raw = sa[i] + sb[j] + noise;
            candidates.push(SelectedCandidate {
                expert_id: i * side + j,
                a_idx: i,
                b_idx: j,
                noise,
                transformed: fg.apply(raw),
            });
        }
    }
    candidates.sort_by(|x, y| {
        y.transformed
            .total_cmp(&x.transformed)
            .then(x.expert_id.cmp(&y.expert_id))
    });
    candidates.truncate(k);
    candidates
}

fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Exact top-k retrieval via the product-key grid; returns raw composed
/// scores (pre-softmax, no gating transform).
pub fn pkr_scores(q: &Tensor, index: &ProductKeyIndex, k: usize) -> Result<GateDecision> {
    index.check_query(q)?;
    index.check_k(k)?;
    let (sa, sb) = index.half_scores(&q.data());
    let width = k.min(index.side);
    let top_a = top_indices(&sa, width);
    let top_b = top_indices(&sb, width);
    let mut cand: Vec<(usize, f64)> = Vec::with_capacity(width * width);
    for &i in &top_a {
        for &j in &top_b {
            cand.push((i * index.side + j, sa[i] + sb[j]));
        }
    }
    cand.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    cand.truncate(k);
    Ok(GateDecision {
        expert_ids: cand.iter().map(|c| c.0).collect(),
        weights: Vec::new(),
        raw_scores: cand.iter().map(|c| c.1).collect(),
    })
}

/// Oracle: materialize all N composed scores, sort with the same tie-break
/// rule, return the top-k.
pub fn brute_force_topk(q: &Tensor, index: &ProductKeyIndex, k: usize) -> Result<GateDecision> {
    index.check_query(q)?;
    index.check_k(k)?;
    let (sa, sb) = index.half_scores(&q.data());
    let mut all: Vec<(usize, f64)> = (0..index.n_experts())
        .map(|e| {
            let (i, j) = index.split_id(e);
            (e, sa[i] + sb[j])
        })
        .collect();
    all.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    all.truncate(k);
    Ok(GateDecision {
        expert_ids: all.iter().map(|c| c.0).collect(),
        weights: Vec::new(),
        raw_scores: all.iter().map(|c| c.1).collect(),
    })
}

/// Full gating decision: PKR candidates perturbed by per-candidate Gaussian
/// noise (training only; `noise_scale = 0` is the deterministic path),
/// transformed by f_g, top-k selected, softmax over the survivors.
pub fn noisy_topk_gate(
    q: &Tensor,
    index: &ProductKeyIndex,
    k: usize,
    noise_scale: f64,
    rng_seed: u64,
    fg: GatingTransform,
) -> Result<GateDecision> {
    index.check_query(q)?;
    index.check_k(k)?;
    if noise_scale < 0.0 {
        return Err(Error::Usage(format!("noise_scale {noise_scale} < 0")));
    }
    let (sa, sb) = index.half_scores(&q.data());
    let mut rng = derive_rng(rng_seed, "gate-noise");
    let selected = select_topk(&sa, &sb, index.side, k, noise_scale, Some(&mut rng), fg);
    let raw: Vec<f64> = selected.iter().map(|c| c.transformed).collect();
    Ok(GateDecision {
        expert_ids: selected.iter().map(|c| c.expert_id).collect(),
        weights: softmax_slice(&raw),
        raw_scores: raw,
    })
}
