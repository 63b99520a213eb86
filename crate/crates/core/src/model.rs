//! Class-token vision transformer: patch embedding, learned positional
//! embeddings, pre-norm attention/MLP blocks and a linear head on the final
//! class token.
//!
//! The forward pass optionally drops or attention-masks patch tokens
//! according to a [`MaskPlan`], or prunes them hierarchically under a
//! [`PruneSchedule`]. Positional embeddings are added before any selection
//! so kept tokens keep their positional identity. The class token at index
//! 0 is never masked or pruned.

use mft_tensor::{Index, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::masking::MaskPlan;
use crate::schedule::{random_subset, top_k, AttentionSource, PruneSchedule, Selector};

pub const LN_EPS: f32 = 1e-6;
const MASKED_SCORE: f32 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norm1: Norm<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: Norm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// The full parameter set, generic over what is stored per parameter
/// (tensors, tape handles, gradients, optimizer moments).
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub patch_embed: Linear<T>,
    pub cls_token: T,
    pub pos_embed: T,
    pub blocks: Vec<Block<T>>,
    pub norm: Norm<T>,
    pub head: Linear<T>,
}

macro_rules! walk {
    ($params:expr, $out:ident, [$($r:tt)*], $iter:ident) => {{
        let p = $params;
        $out.push(("patch_embed.weight".into(), $($r)* p.patch_embed.weight));
        $out.push(("patch_embed.bias".into(), $($r)* p.patch_embed.bias));
        $out.push(("cls_token".into(), $($r)* p.cls_token));
        $out.push(("pos_embed".into(), $($r)* p.pos_embed));
        for (i, b) in p.blocks.$iter().enumerate() {
            let pre = format!("blocks.{i}");
            $out.push((format!("{pre}.norm1.gamma"), $($r)* b.norm1.gamma));
            $out.push((format!("{pre}.norm1.beta"), $($r)* b.norm1.beta));
            for (name, l) in [
                ("attn.query", $($r)* b.query),
                ("attn.key", $($r)* b.key),
                ("attn.value", $($r)* b.value),
                ("attn.proj", $($r)* b.proj),
            ] {
                $out.push((format!("{pre}.{name}.weight"), $($r)* l.weight));
                $out.push((format!("{pre}.{name}.bias"), $($r)* l.bias));
            }
            $out.push((format!("{pre}.norm2.gamma"), $($r)* b.norm2.gamma));
            $out.push((format!("{pre}.norm2.beta"), $($r)* b.norm2.beta));
            for (name, l) in [("mlp.fc1", $($r)* b.fc1), ("mlp.fc2", $($r)* b.fc2)] {
                $out.push((format!("{pre}.{name}.weight"), $($r)* l.weight));
                $out.push((format!("{pre}.{name}.bias"), $($r)* l.bias));
            }
        }
        $out.push(("norm.gamma".into(), $($r)* p.norm.gamma));
        $out.push(("norm.beta".into(), $($r)* p.norm.beta));
        $out.push(("head.weight".into(), $($r)* p.head.weight));
        $out.push(("head.bias".into(), $($r)* p.head.bias));
    }};
}

impl<T> Params<T> {
    /// Every parameter with its name, in canonical order.
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        walk!(self, out, [&], iter);
        out
    }

    /// Mutable entries in the same canonical order as [`Params::entries`].
    pub fn entries_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        walk!(self, out, [&mut], iter_mut);
        out
    }

    pub fn for_each(&self, mut f: impl FnMut(String, &T)) {
        for (n, t) in self.entries() {
            f(n, t);
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(String, &mut T)) {
        for (n, t) in self.entries_mut() {
            f(n, t);
        }
    }

    /// Builds a parameter set of the same structure from a per-parameter
    /// function.
    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &T) -> std::result::Result<U, E>) -> std::result::Result<Params<U>, E> {
        let patch_embed = map_linear(&mut f, "patch_embed", &self.patch_embed)?;
        let cls_token = f("cls_token", &self.cls_token)?;
        let pos_embed = f("pos_embed", &self.pos_embed)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            let norm1 = map_norm(&mut f, &format!("{p}.norm1"), &b.norm1)?;
            let query = map_linear(&mut f, &format!("{p}.attn.query"), &b.query)?;
            let key = map_linear(&mut f, &format!("{p}.attn.key"), &b.key)?;
            let value = map_linear(&mut f, &format!("{p}.attn.value"), &b.value)?;
            let proj = map_linear(&mut f, &format!("{p}.attn.proj"), &b.proj)?;
            let norm2 = map_norm(&mut f, &format!("{p}.norm2"), &b.norm2)?;
            let fc1 = map_linear(&mut f, &format!("{p}.mlp.fc1"), &b.fc1)?;
            let fc2 = map_linear(&mut f, &format!("{p}.mlp.fc2"), &b.fc2)?;
            blocks.push(Block {
                norm1,
                query,
                key,
                value,
                proj,
                norm2,
                fc1,
                fc2,
            });
        }
        let norm = map_norm(&mut f, "norm", &self.norm)?;
        let head = map_linear(&mut f, "head", &self.head)?;
        Ok(Params {
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        match self.try_map::<U, std::convert::Infallible>(|n, t| Ok(f(n, t))) {
            Ok(p) => p,
            Err(e) => match e {},
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(|n, _| out.push(n));
        out
    }
}

fn map_linear<T, U, E>(
    f: &mut impl FnMut(&str, &T) -> std::result::Result<U, E>,
    p: &str,
    l: &Linear<T>,
) -> std::result::Result<Linear<U>, E> {
    Ok(Linear {
        weight: f(&format!("{p}.weight"), &l.weight)?,
        bias: f(&format!("{p}.bias"), &l.bias)?,
    })
}

fn map_norm<T, U, E>(
    f: &mut impl FnMut(&str, &T) -> std::result::Result<U, E>,
    p: &str,
    n: &Norm<T>,
) -> std::result::Result<Norm<U>, E> {
    Ok(Norm {
        gamma: f(&format!("{p}.gamma"), &n.gamma)?,
        beta: f(&format!("{p}.beta"), &n.beta)?,
    })
}

/// Shapes every parameter must have under `config`.
pub fn param_shapes(config: &ModelConfig) -> Params<Vec<usize>> {
    let d = config.embed_dim;
    let h = config.hidden_dim();
    let lin = |i: usize, o: usize| Linear {
        weight: vec![i, o],
        bias: vec![o],
    };
    let norm = || Norm {
        gamma: vec![d],
        beta: vec![d],
    };
    Params {
        patch_embed: lin(config.patch_dim(), d),
        cls_token: vec![1, 1, d],
        pos_embed: vec![1, config.num_patches() + 1, d],
        blocks: (0..config.depth)
            .map(|_| Block {
                norm1: norm(),
                query: lin(d, d),
                key: lin(d, d),
                value: lin(d, d),
                proj: lin(d, d),
                norm2: norm(),
                fc1: lin(d, h),
                fc2: lin(h, d),
            })
            .collect(),
        norm: norm(),
        head: lin(d, config.num_classes),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskMode {
    /// Excluded tokens are physically removed.
    #[default]
    Drop,
    /// All tokens flow; excluded keys get zero attention weight.
    AttentionMask,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub mask: Option<&'a MaskPlan>,
    pub mode: MaskMode,
    pub prune: Option<&'a PruneSchedule>,
    /// Seeds the random selector.
    pub seed: u64,
}

impl<'a> ForwardOptions<'a> {
    pub fn masked(plan: &'a MaskPlan, mode: MaskMode) -> Self {
        Self {
            mask: Some(plan),
            mode,
            ..Self::default()
        }
    }

    pub fn pruned(schedule: &'a PruneSchedule, seed: u64) -> Self {
        Self {
            prune: Some(schedule),
            seed,
            ..Self::default()
        }
    }
}

/// Result of a forward pass recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapeForward {
    pub logits: Var,
    /// `[block][sample]` head-averaged class-token attention over the
    /// tokens the block attended to (class token first).
    pub cls_attention: Vec<Vec<Vec<f32>>>,
    /// `[stage][sample]` original patch indices alive at each stage; stage
    /// 0 is the input to the first block, then one entry per prune stage.
    pub token_ids: Vec<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `batch × num_classes`
    pub logits: Tensor,
    pub cls_attention: Vec<Vec<Vec<f32>>>,
    pub token_ids: Vec<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel {
    pub config: ModelConfig,
    pub params: Params<Tensor>,
}

/// Rearranges `batch × C × H × W` images into `batch × L × (C·p·p)` patch
/// vectors, patches row-major over the grid, each vector channel-major.
pub fn patchify(images: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] != config.channels {
        return Err(CoreError::Config(format!(
            "expected batch × {} × H × W images, got {s:?}",
            config.channels
        )));
    }
    if s[2] != config.image_size || s[3] != config.image_size {
        return Err(CoreError::ImageSize {
            expected: config.image_size,
            height: s[2],
            width: s[3],
        });
    }
    let (n, c, hw, p, g) = (s[0], s[1], s[2], config.patch_size, config.grid());
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for b in 0..n {
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..c {
                    for py in 0..p {
                        let row = ((b * c + ch) * hw + gy * p + py) * hw + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![n, g * g, c * p * p], out)?)
}

struct Group {
    samples: Vec<usize>,
    /// `n × T × D`, class token first
    x: Var,
    /// `n × 1 × 1 × T` additive key mask
    bias: Option<Var>,
    ids: Vec<Vec<usize>>,
}

impl ViTModel {
    /// Truncated-normal (σ = 0.02) weights, zero biases, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        let params = param_shapes(&config).map(|name, shape| {
            let fill = |v: f32| Tensor::full(shape.clone(), v);
            if name.ends_with(".bias") || name.ends_with(".beta") {
                fill(0.0)
            } else if name.ends_with(".gamma") {
                fill(1.0)
            } else {
                Tensor::from_fn(shape.clone(), |_| loop {
                    let v = normal.sample(&mut rng);
                    if v.abs() <= 0.04 {
                        break v;
                    }
                })
            }
        });
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.params.for_each(|_, t| n += t.numel());
        n
    }

    /// Records every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Params<Var> {
        self.params.map(|_, t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// Gradient-free forward pass.
    pub fn forward(&self, images: &Tensor, opts: ForwardOptions<'_>) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward_on_tape(&mut tape, &bound, images, opts)?;
        Ok(ForwardOutput {
            logits: tape.value(out.logits).clone(),
            cls_attention: out.cls_attention,
            token_ids: out.token_ids,
        })
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        p: &Params<Var>,
        images: &Tensor,
        opts: ForwardOptions<'_>,
    ) -> Result<TapeForward> {
        let cfg = &self.config;
        if opts.mask.is_some() && opts.prune.is_some() {
            return Err(CoreError::Config("supply a mask plan or a prune schedule, not both".into()));
        }
        if let Some(s) = opts.prune {
            s.validate(cfg)?;
        }
        let patches = patchify(images, cfg)?;
        let n = patches.shape()[0];
        let l = cfg.num_patches();
        let d = cfg.embed_dim;
        if let Some(plan) = opts.mask {
            plan.check_dims(n, l)?;
        }

        let patches = tape.constant(patches);
        let x = self.linear(tape, patches, &p.patch_embed)?;
        let pos_patch = tape.gather(p.pos_embed, 1, &Index::vector((1..=l).collect()))?;
        let pos_cls = tape.gather(p.pos_embed, 1, &Index::vector(vec![0]))?;
        let x = tape.add(x, pos_patch)?;
        let cls = tape.add(p.cls_token, pos_cls)?;

        let all: Vec<usize> = (0..l).collect();
        let mut groups = Vec::new();
        match (opts.mask, opts.mode) {
            (Some(plan), MaskMode::Drop) if !plan.is_all_keep() => {
                // samples sharing a kept count run as one batch
                let mut counts: Vec<usize> = plan.kept_counts.clone();
                counts.sort_unstable_by(|a, b| b.cmp(a));
                counts.dedup();
                for k in counts {
                    let samples: Vec<usize> = (0..n).filter(|&i| plan.kept_counts[i] == k).collect();
                    let ids: Vec<Vec<usize>> = samples.iter().map(|&i| plan.kept_indices(i)).collect();
                    let sub = tape.gather(x, 0, &Index::vector(samples.clone()))?;
                    let sub = tape.gather(sub, 1, &Index::rows(&ids)?)?;
                    groups.push((samples, sub, None, ids));
                }
            }
            (Some(plan), MaskMode::AttentionMask) => {
                let mut bias = vec![0.0f32; n * (l + 1)];
                for i in 0..n {
                    for (j, &m) in plan.row(i).iter().enumerate() {
                        if m == 0 {
                            bias[i * (l + 1) + 1 + j] = MASKED_SCORE;
                        }
                    }
                }
                let bias = tape.constant(Tensor::new(vec![n, 1, 1, l + 1], bias)?);
                groups.push(((0..n).collect(), x, Some(bias), vec![all.clone(); n]));
            }
            _ => groups.push(((0..n).collect(), x, None, vec![all.clone(); n])),
        }

        let depth = cfg.depth;
        let dense_attn = match opts.prune {
            Some(s) if s.selector == Selector::Attention && s.source == AttentionSource::Last => {
                let mut dense = self.forward(images, ForwardOptions::default())?.cls_attention;
                dense.pop()
            }
            _ => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let num_stages = opts.prune.map_or(0, |s| s.stages.len());
        let mut cls_attention = vec![vec![Vec::new(); n]; depth];
        let mut token_ids = vec![vec![Vec::new(); n]; 1 + num_stages];
        let mut group_logits = Vec::new();
        let mut order = Vec::with_capacity(n);

        for (samples, tokens, bias, ids) in groups {
            let count = samples.len();
            let cls_b = tape.expand(cls, &[count, 1, d])?;
            let x = tape.concat(&[cls_b, tokens], 1)?;
            let mut g = Group { samples, x, bias, ids };
            for (si, &s) in g.samples.iter().enumerate() {
                token_ids[0][s] = g.ids[si].clone();
            }
            let mut stage = 0;
            let mut last_attn: Vec<Vec<f32>> = Vec::new();
            for b in 0..depth {
                if let Some(st) = opts.prune.and_then(|s| s.stage_at(b).map(|st| (s.selector, *st))) {
                    let (selector, st) = st;
                    stage += 1;
                    let scores = match &dense_attn {
                        Some(dense) => g
                            .samples
                            .iter()
                            .zip(&g.ids)
                            .map(|(&s, ids)| std::iter::once(0.0).chain(ids.iter().map(|&j| dense[s][j + 1])).collect())
                            .collect(),
                        None => std::mem::take(&mut last_attn),
                    };
                    self.prune_group(tape, &mut g, selector, st.keep, &scores, &mut rng)?;
                    for (si, &s) in g.samples.iter().enumerate() {
                        token_ids[stage][s] = g.ids[si].clone();
                    }
                }
                let (next, attn) = self.block(tape, &p.blocks[b], g.x, g.bias)?;
                g.x = next;
                for (si, &s) in g.samples.iter().enumerate() {
                    cls_attention[b][s] = attn[si].clone();
                }
                last_attn = attn;
            }
            let cls_out = tape.gather(g.x, 1, &Index::vector(vec![0]))?;
            let cls_out = tape.reshape(cls_out, &[count, d])?;
            let h = tape.layer_norm(cls_out, p.norm.gamma, p.norm.beta, LN_EPS)?;
            group_logits.push(self.linear(tape, h, &p.head)?);
            order.extend(g.samples);
        }

        let logits = if group_logits.len() == 1 && order.iter().enumerate().all(|(i, &s)| i == s) {
            group_logits[0]
        } else {
            let stacked = tape.concat(&group_logits, 0)?;
            let mut restore = vec![0; n];
            for (pos, &s) in order.iter().enumerate() {
                restore[s] = pos;
            }
            tape.gather(stacked, 0, &Index::vector(restore))?
        };
        Ok(TapeForward {
            logits,
            cls_attention,
            token_ids,
        })
    }

    fn prune_group(
        &self,
        tape: &mut Tape,
        g: &mut Group,
        selector: Selector,
        keep: usize,
        last_attn: &[Vec<f32>],
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let current = g.ids[0].len();
        if keep >= current {
            return Ok(());
        }
        let mut rows = Vec::with_capacity(g.samples.len());
        for (si, ids) in g.ids.iter_mut().enumerate() {
            let picked = match selector {
                Selector::Attention => top_k(&last_attn[si][1..], keep),
                Selector::Random => random_subset(rng, current, keep),
            };
            *ids = picked.iter().map(|&j| ids[j]).collect();
            let mut row = Vec::with_capacity(keep + 1);
            row.push(0);
            row.extend(picked.iter().map(|&j| j + 1));
            rows.push(row);
        }
        g.x = tape.gather(g.x, 1, &Index::rows(&rows)?)?;
        Ok(())
    }

    fn linear(&self, tape: &mut Tape, x: Var, l: &Linear<Var>) -> Result<Var> {
        let y = tape.matmul(x, l.weight)?;
        Ok(tape.add(y, l.bias)?)
    }

    /// One pre-norm block. Returns the new tokens and, per sample, the
    /// head-averaged attention row of the class-token query.
    fn block(&self, tape: &mut Tape, p: &Block<Var>, x: Var, bias: Option<Var>) -> Result<(Var, Vec<Vec<f32>>)> {
        let shape = tape.shape(x).to_vec();
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        let heads = self.config.heads;
        let dh = self.config.head_dim();

        let h = tape.layer_norm(x, p.norm1.gamma, p.norm1.beta, LN_EPS)?;
        let split = |tape: &mut Tape, v: Var, axes: &[usize]| -> Result<Var> {
            let r = tape.reshape(v, &[n, t, heads, dh])?;
            Ok(tape.permute(r, axes)?)
        };
        let q = self.linear(tape, h, &p.query)?;
        let q = split(tape, q, &[0, 2, 1, 3])?;
        let k = self.linear(tape, h, &p.key)?;
        let k_t = split(tape, k, &[0, 2, 3, 1])?;
        let v = self.linear(tape, h, &p.value)?;
        let v = split(tape, v, &[0, 2, 1, 3])?;

        let scores = tape.matmul(q, k_t)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f32).sqrt());
        if let Some(b) = bias {
            scores = tape.add(scores, b)?;
        }
        let attn = tape.softmax(scores, 3)?;

        let probs = tape.value(attn).data();
        let cls_rows = (0..n)
            .map(|i| {
                let mut row = vec![0.0f64; t];
                for hh in 0..heads {
                    let base = ((i * heads + hh) * t) * t;
                    for (r, &pv) in row.iter_mut().zip(&probs[base..base + t]) {
                        *r += pv as f64;
                    }
                }
                row.into_iter().map(|v| (v / heads as f64) as f32).collect()
            })
            .collect();

        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[n, t, d])?;
        let out = self.linear(tape, ctx, &p.proj)?;
        let x = tape.add(x, out)?;

        let h = tape.layer_norm(x, p.norm2.gamma, p.norm2.beta, LN_EPS)?;
        let h = self.linear(tape, h, &p.fc1)?;
        let h = tape.gelu(h);
        let h = self.linear(tape, h, &p.fc2)?;
        Ok((tape.add(x, h)?, cls_rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{hybrid_mask, DEFAULT_RATIO_SET};
    use crate::schedule::make_schedule;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 2,
            channels: 3,
            embed_dim: 12,
            depth: 4,
            heads: 3,
            mlp_ratio: 2,
            num_classes: 5,
        }
    }

    fn images(n: usize, cfg: &ModelConfig, salt: f32) -> Tensor {
        let s = cfg.image_size;
        Tensor::from_fn(vec![n, cfg.channels, s, s], |i| ((i as f32) * 0.731 + salt).sin())
    }

    #[test]
    fn canonical_orders_agree() {
        let m = ViTModel::init(tiny(), 0).unwrap();
        let names = m.params.names();
        let mut mut_names = Vec::new();
        let mut copy = m.params.clone();
        copy.for_each_mut(|n, _| mut_names.push(n));
        let mut mapped = Vec::new();
        m.params.map(|n, _| mapped.push(n.to_string()));
        assert_eq!(names, mut_names);
        assert_eq!(names, mapped);
        assert_eq!(names.len(), 2 + 2 + 4 * 16 + 2 + 2);
    }

    #[test]
    fn param_count_depends_only_on_config() {
        let a = ViTModel::init(tiny(), 1).unwrap();
        let b = ViTModel::init(tiny(), 2).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_ne!(a.params, b.params);
        assert_eq!(a.params.pos_embed.shape(), &[1, 17, 12]);
    }

    #[test]
    fn patch_counts() {
        let toy = ModelConfig::toy();
        assert_eq!(patchify(&Tensor::zeros(vec![1, 3, 32, 32]), &toy).unwrap().shape(), &[1, 64, 48]);
        let base = ModelConfig::vit_base();
        assert_eq!(patchify(&Tensor::zeros(vec![1, 3, 224, 224]), &base).unwrap().shape(), &[1, 196, 768]);
        assert!(matches!(
            patchify(&Tensor::zeros(vec![1, 3, 30, 32]), &toy),
            Err(CoreError::ImageSize { .. })
        ));
    }

    #[test]
    fn zero_image_embeds_to_bias() {
        let cfg = tiny();
        let mut m = ViTModel::init(cfg.clone(), 3).unwrap();
        m.params.patch_embed.bias = Tensor::from_fn(vec![12], |i| i as f32);
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false);
        let patches = tape.constant(patchify(&Tensor::zeros(vec![2, 3, 8, 8]), &cfg).unwrap());
        let y = m.linear(&mut tape, patches, &p.patch_embed).unwrap();
        for row in tape.value(y).data().chunks(12) {
            assert_eq!(row, m.params.patch_embed.bias.data());
        }
    }

    #[test]
    fn all_keep_plan_is_bitwise_plain() {
        let cfg = tiny();
        let m = ViTModel::init(cfg.clone(), 4).unwrap();
        let x = images(3, &cfg, 0.2);
        let plain = m.forward(&x, ForwardOptions::default()).unwrap();
        let plan = MaskPlan::all_keep(3, 16);
        let masked = m.forward(&x, ForwardOptions::masked(&plan, MaskMode::Drop)).unwrap();
        assert_eq!(plain.logits, masked.logits);
    }

    #[test]
    fn drop_and_attention_mask_agree() {
        let cfg = tiny();
        let m = ViTModel::init(cfg.clone(), 5).unwrap();
        let x = images(6, &cfg, 1.0);
        let plan = hybrid_mask(6, 16, &DEFAULT_RATIO_SET, 9).unwrap();
        let a = m.forward(&x, ForwardOptions::masked(&plan, MaskMode::Drop)).unwrap();
        let b = m.forward(&x, ForwardOptions::masked(&plan, MaskMode::AttentionMask)).unwrap();
        for (u, v) in a.logits.data().iter().zip(b.logits.data()) {
            assert!((u - v).abs() < 1e-4, "{u} vs {v}");
        }
    }

    #[test]
    fn single_patch_forward_is_finite() {
        let cfg = tiny();
        let m = ViTModel::init(cfg.clone(), 6).unwrap();
        let mut row = vec![0u8; 16];
        row[7] = 1;
        let plan = MaskPlan::from_rows(&[row]).unwrap();
        let out = m.forward(&images(1, &cfg, 0.0), ForwardOptions::masked(&plan, MaskMode::Drop)).unwrap();
        assert!(out.logits.is_finite());
        assert_eq!(out.token_ids[0][0], vec![7]);
        assert_eq!(out.cls_attention[0][0].len(), 2);
    }

    #[test]
    fn no_patch_forward_runs_on_class_token() {
        let cfg = tiny();
        let m = ViTModel::init(cfg.clone(), 6).unwrap();
        let plan = hybrid_mask(2, 16, &[1.0], 0).unwrap();
        let out = m.forward(&images(2, &cfg, 0.0), ForwardOptions::masked(&plan, MaskMode::Drop)).unwrap();
        assert!(out.logits.is_finite());
        assert_eq!(out.cls_attention[0][1], vec![1.0]);
    }

    #[test]
    fn mask_shape_mismatch_fails() {
        let cfg = tiny();
        let m = ViTModel::init(cfg.clone(), 6).unwrap();
        let plan = MaskPlan::all_keep(2, 15);
        let err = m.forward(&images(2, &cfg, 0.0), ForwardOptions::masked(&plan, MaskMode::Drop)).unwrap_err();
        assert!(matches!(err, CoreError::MaskShape { .. }));
    }

    #[test]
    fn mask_and_prune_are_exclusive() {
        let cfg = tiny();
        let m = ViTModel::init(cfg.clone(), 6).unwrap();
        let plan = MaskPlan::all_keep(1, 16);
        let sched = make_schedule(&cfg, 0.5, 2, Selector::Random).unwrap();
        let opts = ForwardOptions {
            mask: Some(&plan),
            prune: Some(&sched),
            ..Default::default()
        };
        assert!(m.forward(&images(1, &cfg, 0.0), opts).is_err());
    }

    #[test]
    fn cls_attention_rows_are_distributions() {
        let cfg = tiny();
        let m = ViTModel::init(cfg.clone(), 7).unwrap();
        let sched = make_schedule(&cfg, 0.5, 2, Selector::Attention).unwrap();
        let out = m.forward(&images(3, &cfg, 0.4), ForwardOptions::pruned(&sched, 0)).unwrap();
        for block in &out.cls_attention {
            for row in block {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                assert!((s - 1.0).abs() < 1e-5);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
        // blocks [1, 2] with keeps [8, 4]
        assert_eq!(out.cls_attention[0][0].len(), 17);
        assert_eq!(out.cls_attention[1][0].len(), 9);
        assert_eq!(out.cls_attention[3][0].len(), 5);
    }
}
