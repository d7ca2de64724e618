//! Vision transformer whose self-attention heads can be masked per subnet.
//!
//! Each block computes
//!
//! ```text
//! z' = MSA(LN0(z)) + z
//! z_next = MLP(LN1(z')) + z'
//! ```
//!
//! and the MSA output is a sum of independent per-head terms
//! `softmax(q kᵀ / sqrt(D_h)) v · U_proj[k]`, so dropping a head drops exactly
//! its term. Personalized heads are the lowest `P_l` indices of layer `l`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{ParamRole, ParamStore, PartitionSpec};
use crate::tensor::{Real, Tape, Tensor, Var, LN_EPS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            embed_dim: 48,
            num_heads: 6,
            num_layers: 4,
            mlp_hidden: 192,
            num_classes: 2,
        }
    }
}

impl ViTConfig {
    /// Config with `mlp_hidden = 4 * embed_dim` and two classes.
    pub fn new(image_size: usize, patch_size: usize, embed_dim: usize, num_heads: usize, num_layers: usize) -> Self {
        Self {
            image_size,
            patch_size,
            channels: 1,
            embed_dim,
            num_heads,
            num_layers,
            mlp_hidden: 4 * embed_dim,
            num_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("mlp_hidden", self.mlp_hidden),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch_size {} does not divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "num_heads {} does not divide embed_dim {}",
                self.num_heads, self.embed_dim
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("model.num_classes must be at least 2".into()));
        }
        Ok(())
    }

    /// `N = (D / P)^2`.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn pixels_per_image(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    /// Canonical parameter names and shapes, in lexicographic order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let dh = self.head_dim();
        let mut out = vec![
            ("embed.W".to_string(), vec![self.patch_dim(), d]),
            ("embed.pos".to_string(), vec![self.num_patches() + 1, d]),
            ("embed.cls".to_string(), vec![d]),
            ("norm.gain".to_string(), vec![d]),
            ("norm.bias".to_string(), vec![d]),
            ("head.W".to_string(), vec![d, self.num_classes]),
            ("head.b".to_string(), vec![self.num_classes]),
        ];
        for l in 0..self.num_layers {
            for k in 0..self.num_heads {
                out.push((format!("block{l}.head{k}.qkv"), vec![d, 3 * dh]));
                out.push((format!("block{l}.head{k}.proj"), vec![dh, d]));
            }
            for ln in ["ln0", "ln1"] {
                out.push((format!("block{l}.{ln}.gain"), vec![d]));
                out.push((format!("block{l}.{ln}.bias"), vec![d]));
            }
            out.push((format!("block{l}.mlp.w1"), vec![d, self.mlp_hidden]));
            out.push((format!("block{l}.mlp.b1"), vec![self.mlp_hidden]));
            out.push((format!("block{l}.mlp.w2"), vec![self.mlp_hidden, d]));
            out.push((format!("block{l}.mlp.b2"), vec![d]));
        }
        out.sort();
        out
    }
}

/// Which attention heads take part in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SubnetMode {
    Full,
    /// Only heads `P_l..K`: the globally shared subnet.
    SharedOnly,
    /// Only heads `0..P_l`: the client's personalized subnet.
    PersonalizedOnly,
}

impl SubnetMode {
    pub fn head_active(self, head: usize, personalized: usize) -> bool {
        match self {
            SubnetMode::Full => true,
            SubnetMode::SharedOnly => head >= personalized,
            SubnetMode::PersonalizedOnly => head < personalized,
        }
    }
}

/// Flattened non-overlapping patches, `[B, N, P*P*ch]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence<S: Real = f32> {
    pub tokens: Tensor<S>,
}

/// Splits `[B, D, D, ch]` images into row-major patches, each flattened
/// row-major over `(row, col, channel)`.
pub fn patchify<S: Real>(images: &Tensor<S>, cfg: &ViTConfig) -> Result<PatchSequence<S>> {
    let s = images.shape();
    let want = [cfg.image_size, cfg.image_size, cfg.channels];
    if s.len() != 4 || s[1..] != want {
        return Err(Error::Data(format!(
            "images have shape {s:?}, model expects [B, {}, {}, {}]",
            want[0], want[1], want[2]
        )));
    }
    let (b, dim, p, ch) = (s[0], cfg.image_size, cfg.patch_size, cfg.channels);
    let side = dim / p;
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        let img = &src[bi * dim * dim * ch..(bi + 1) * dim * dim * ch];
        for pr in 0..side {
            for pc in 0..side {
                for y in 0..p {
                    let row = pr * p + y;
                    let start = (row * dim + pc * p) * ch;
                    out.extend_from_slice(&img[start..start + p * ch]);
                }
            }
        }
    }
    Ok(PatchSequence {
        tokens: Tensor::new(vec![b, side * side, cfg.patch_dim()], out)?,
    })
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub qkv: Vec<Var>,
    pub proj: Vec<Var>,
    pub ln0: (Var, Var),
    pub ln1: (Var, Var),
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Model parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embed_w: Var,
    pub pos: Var,
    pub cls: Var,
    pub blocks: Vec<BlockVars>,
    pub norm: (Var, Var),
    pub head_w: Var,
    pub head_b: Var,
    /// Every registered parameter in store (lexicographic) order.
    pub by_name: Vec<(String, Var)>,
}

impl ModelVars {
    pub fn get(&self, name: &str) -> Option<Var> {
        lookup(&self.by_name, name)
    }

    /// Rebinds parameter `name` to `v` everywhere it is referenced.
    /// Returns false when `name` is unknown.
    pub fn replace(&mut self, name: &str, v: Var) -> bool {
        let Some(old) = self.get(name) else {
            return false;
        };
        let fix = |x: &mut Var| {
            if *x == old {
                *x = v;
            }
        };
        let mut all: Vec<&mut Var> = vec![&mut self.embed_w, &mut self.pos, &mut self.cls, &mut self.head_w, &mut self.head_b];
        all.push(&mut self.norm.0);
        all.push(&mut self.norm.1);
        for b in self.blocks.iter_mut() {
            all.extend(b.qkv.iter_mut());
            all.extend(b.proj.iter_mut());
            all.extend([&mut b.ln0.0, &mut b.ln0.1, &mut b.ln1.0, &mut b.ln1.1, &mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2]);
        }
        for x in all {
            fix(x);
        }
        for (_, x) in self.by_name.iter_mut() {
            fix(x);
        }
        true
    }
}

fn lookup(by_name: &[(String, Var)], name: &str) -> Option<Var> {
    by_name
        .binary_search_by(|(n, _)| n.as_str().cmp(name))
        .ok()
        .map(|i| by_name[i].1)
}

/// Architecture plus head partition. Parameters live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct VisionTransformer {
    cfg: ViTConfig,
    partition: PartitionSpec,
}

const INIT_STD: f64 = 0.02;

impl VisionTransformer {
    pub fn new(cfg: ViTConfig, ratio: f64) -> Result<Self> {
        cfg.validate()?;
        let partition = PartitionSpec::uniform(ratio, cfg.num_heads, cfg.num_layers)?;
        Ok(Self { cfg, partition })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    pub fn partition(&self) -> &PartitionSpec {
        &self.partition
    }

    /// Seeded init: truncated normal (std 0.02, cut at 2 std) for matrices,
    /// embeddings and the cls token, zeros for biases, ones for LN gains.
    /// Roles are assigned from the partition.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
        let mut store = ParamStore::new();
        for (name, shape) in self.cfg.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") || name == "head.b" {
                vec![0.0; n]
            } else {
                (0..n)
                    .map(|_| loop {
                        let v = normal.sample(&mut rng);
                        if v.abs() <= 2.0 * INIT_STD {
                            break v as f32;
                        }
                    })
                    .collect()
            };
            store.insert(name, Tensor::new(shape, data)?, ParamRole::Shared)?;
        }
        store.assign_roles(&self.partition)?;
        Ok(store)
    }

    /// Registers every parameter of `store` on `tape` (as trainable leaves
    /// when `trainable`), checking names and shapes against the config.
    pub fn bind<S: Real>(&self, tape: &mut Tape<S>, store: &ParamStore, trainable: bool) -> Result<ModelVars> {
        let mut by_name = Vec::with_capacity(store.len());
        for (name, p) in store.iter() {
            let t = p.tensor.cast::<S>();
            let v = if trainable { tape.param(t) } else { tape.constant(t) };
            by_name.push((name.to_string(), v));
        }
        let shapes = self.cfg.param_shapes();
        for (name, shape) in &shapes {
            let v = lookup(&by_name, name)
                .ok_or_else(|| Error::State(format!("parameter `{name}` is not initialized")))?;
            if tape.shape(v) != shape.as_slice() {
                return Err(Error::State(format!(
                    "parameter `{name}` has shape {:?}, model expects {shape:?}",
                    tape.shape(v)
                )));
            }
        }
        if store.len() != shapes.len() {
            return Err(Error::State(format!(
                "store holds {} parameters, model defines {}",
                store.len(),
                shapes.len()
            )));
        }
        let g = |n: &str| lookup(&by_name, n).expect("checked above");
        let blocks = (0..self.cfg.num_layers)
            .map(|l| BlockVars {
                qkv: (0..self.cfg.num_heads).map(|k| g(&format!("block{l}.head{k}.qkv"))).collect(),
                proj: (0..self.cfg.num_heads).map(|k| g(&format!("block{l}.head{k}.proj"))).collect(),
                ln0: (g(&format!("block{l}.ln0.gain")), g(&format!("block{l}.ln0.bias"))),
                ln1: (g(&format!("block{l}.ln1.gain")), g(&format!("block{l}.ln1.bias"))),
                w1: g(&format!("block{l}.mlp.w1")),
                b1: g(&format!("block{l}.mlp.b1")),
                w2: g(&format!("block{l}.mlp.w2")),
                b2: g(&format!("block{l}.mlp.b2")),
            })
            .collect();
        Ok(ModelVars {
            embed_w: g("embed.W"),
            pos: g("embed.pos"),
            cls: g("embed.cls"),
            blocks,
            norm: (g("norm.gain"), g("norm.bias")),
            head_w: g("head.W"),
            head_b: g("head.b"),
            by_name,
        })
    }

    /// `z0 = [cls; patches · W] + pos`, shape `[B, N+1, d]`.
    pub fn embed<S: Real>(&self, tape: &mut Tape<S>, vars: &ModelVars, patches: &PatchSequence<S>) -> Result<Var> {
        let s = patches.tokens.shape().to_vec();
        if s.len() != 3 || s[1] != self.cfg.num_patches() || s[2] != self.cfg.patch_dim() {
            return Err(Error::Data(format!(
                "patch tokens have shape {s:?}, model expects [B, {}, {}]",
                self.cfg.num_patches(),
                self.cfg.patch_dim()
            )));
        }
        let (b, n, d) = (s[0], s[1], self.cfg.embed_dim);
        let flat = tape.constant(patches.tokens.clone().reshaped(vec![b * n, s[2]])?);
        let e = tape.matmul(flat, vars.embed_w)?;
        let e = tape.reshape(e, &[b, n, d])?;
        let z = tape.prepend_token(vars.cls, e)?;
        Ok(tape.add_broadcast(z, vars.pos)?)
    }

    /// Multi-head self-attention of layer `layer` on `z: [B, n, d]`, summing
    /// only the heads active under `mode`. With no active head the output is
    /// an exact zero tensor.
    pub fn msa_forward<S: Real>(
        &self,
        tape: &mut Tape<S>,
        vars: &ModelVars,
        z: Var,
        layer: usize,
        mode: SubnetMode,
    ) -> Result<Var> {
        let personalized = self.personalized_heads(layer)?;
        let s = tape.shape(z).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let dh = self.cfg.head_dim();
        let inv_sqrt = S::one() / S::from_usize(dh).unwrap().sqrt();
        let flat = tape.reshape(z, &[b * n, d])?;
        let block = &vars.blocks[layer];
        let mut acc: Option<Var> = None;
        for k in 0..self.cfg.num_heads {
            if !mode.head_active(k, personalized) {
                continue;
            }
            let qkv = tape.matmul(flat, block.qkv[k])?;
            let q = tape.slice_last(qkv, 0, dh)?;
            let kk = tape.slice_last(qkv, dh, dh)?;
            let v = tape.slice_last(qkv, 2 * dh, dh)?;
            let q = tape.reshape(q, &[b, n, dh])?;
            let kk = tape.reshape(kk, &[b, n, dh])?;
            let v = tape.reshape(v, &[b, n, dh])?;
            let kt = tape.transpose_last2(kk)?;
            let scores = tape.bmm(q, kt)?;
            let scores = tape.scale(scores, inv_sqrt);
            let attn = tape.softmax(scores, S::one())?;
            let sa = tape.bmm(attn, v)?;
            let sa = tape.reshape(sa, &[b * n, dh])?;
            let out = tape.matmul(sa, block.proj[k])?;
            acc = Some(match acc {
                Some(a) => tape.add(a, out)?,
                None => out,
            });
        }
        let out = match acc {
            Some(a) => a,
            None => tape.constant(Tensor::zeros(&[b * n, d])),
        };
        Ok(tape.reshape(out, &[b, n, d])?)
    }

    /// Pre-norm residual block `layer`.
    pub fn block_forward<S: Real>(
        &self,
        tape: &mut Tape<S>,
        vars: &ModelVars,
        z: Var,
        layer: usize,
        mode: SubnetMode,
    ) -> Result<Var> {
        if layer >= self.cfg.num_layers {
            return Err(Error::Config(format!(
                "layer {layer} out of range for {} layers",
                self.cfg.num_layers
            )));
        }
        let block = &vars.blocks[layer];
        let eps = S::lit(LN_EPS);
        let h = tape.layer_norm(z, block.ln0.0, block.ln0.1, eps)?;
        let a = self.msa_forward(tape, vars, h, layer, mode)?;
        let z1 = tape.add(a, z)?;

        let s = tape.shape(z1).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let h = tape.layer_norm(z1, block.ln1.0, block.ln1.1, eps)?;
        let h = tape.reshape(h, &[b * n, d])?;
        let h = tape.matmul(h, block.w1)?;
        let h = tape.add_broadcast(h, block.b1)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, block.w2)?;
        let h = tape.add_broadcast(h, block.b2)?;
        let h = tape.reshape(h, &[b, n, d])?;
        Ok(tape.add(h, z1)?)
    }

    /// Patchify, embed, run all blocks under `mode`, then LN and the linear
    /// classifier on the cls token. Returns logits `[B, classes]`.
    pub fn forward<S: Real>(
        &self,
        tape: &mut Tape<S>,
        vars: &ModelVars,
        images: &Tensor<S>,
        mode: SubnetMode,
    ) -> Result<Var> {
        let patches = patchify(images, &self.cfg)?;
        let mut z = self.embed(tape, vars, &patches)?;
        for l in 0..self.cfg.num_layers {
            z = self.block_forward(tape, vars, z, l, mode)?;
        }
        let cls = tape.select_token(z, 0)?;
        let h = tape.layer_norm(cls, vars.norm.0, vars.norm.1, S::lit(LN_EPS))?;
        let logits = tape.matmul(h, vars.head_w)?;
        Ok(tape.add_broadcast(logits, vars.head_b)?)
    }

    /// Softmax class probabilities without recording gradients.
    pub fn predict_proba(&self, store: &ParamStore, images: &Tensor<f32>, mode: SubnetMode) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let vars = self.bind(&mut tape, store, false)?;
        let logits = self.forward(&mut tape, &vars, images, mode)?;
        let probs = tape.softmax(logits, 1.0)?;
        Ok(tape.value(probs).clone())
    }

    fn personalized_heads(&self, layer: usize) -> Result<usize> {
        if layer >= self.cfg.num_layers {
            return Err(Error::Config(format!("layer {layer} out of range")));
        }
        let p = self.partition.personalized_heads(layer);
        if p > self.cfg.num_heads {
            return Err(Error::Config(format!(
                "{p} personalized heads exceed {} heads",
                self.cfg.num_heads
            )));
        }
        Ok(p)
    }
}
