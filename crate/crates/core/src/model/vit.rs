use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{LoraConfig, ModelConfig, Region};
use super::layers::{softmax_last, take, Dense, Init, LayerNorm, ParamMap};
use crate::error::{Error, Result};

/// Per-image outputs for a batch. Token vectors are `(batch, D)`; the fused
/// feature is `(batch, 2D)`.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub z_global: Tensor,
    pub z_face: Tensor,
    pub z_torso: Tensor,
    pub z_lower: Tensor,
    pub z_local: Tensor,
    pub z_final: Tensor,
}

impl FeatureBundle {
    pub fn region(&self, r: Region) -> &Tensor {
        match r {
            Region::Face => &self.z_face,
            Region::Torso => &self.z_torso,
            Region::Lower => &self.z_lower,
        }
    }
}

fn check_same_dims(parts: &[&Tensor]) -> Result<()> {
    let first = parts[0].dims();
    for p in &parts[1..] {
        if p.dims() != first {
            return Err(Error::DimensionMismatch {
                expected: format!("{first:?}"),
                actual: format!("{:?}", p.dims()),
            });
        }
    }
    Ok(())
}

/// Elementwise mean of region features, summed left to right and divided
/// by the count.
pub fn average_regions(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::invalid("no region features to average"));
    }
    check_same_dims(parts)?;
    let mut sum = parts[0].clone();
    for p in &parts[1..] {
        sum = (sum + *p)?;
    }
    let n = Tensor::new(parts.len() as f64, sum.device())?.to_dtype(sum.dtype())?;
    Ok(sum.broadcast_div(&n)?)
}

/// `(face + torso + lower) / 3`.
pub fn average_local(face: &Tensor, torso: &Tensor, lower: &Tensor) -> Result<Tensor> {
    average_regions(&[face, torso, lower])
}

/// Concatenation followed by a residual two-layer feed-forward map.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub fc1: Dense,
    pub fc2: Dense,
}

impl Fusion {
    pub fn forward(&self, z_global: &Tensor, z_local: &Tensor) -> Result<Tensor> {
        check_same_dims(&[z_global, z_local])?;
        let cat = Tensor::cat(&[z_global, z_local], D::Minus1)?;
        if cat.dim(D::Minus1)? != self.fc1.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: format!("fused width {}", self.fc1.in_dim()),
                actual: format!("{:?}", cat.dims()),
            });
        }
        let h = self.fc1.forward(&cat)?.gelu()?;
        Ok((cat + self.fc2.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    heads: usize,
}

impl Attention {
    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let dh = d / self.heads;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, self.heads, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        let attn = softmax_last(&scores.broadcast_add(mask)?)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, t, d))?;
        self.o.forward(&out)
    }

    fn projections_mut(&mut self) -> [&mut Dense; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }

    fn projections(&self) -> [&Dense; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    fc1: Dense,
    fc2: Dense,
}

impl Block {
    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, mask)?)?;
        let h = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

/// Patch-token transformer with one global token and three region tokens.
///
/// Token layout is `[global, face, torso, lower, patch_0 .. patch_{N-1}]`.
/// The global token attends to every token. A region token attends to
/// itself and its region's patches. A patch token attends to the patches of
/// its own region and, when `patches_attend_global` is set, the global token.
#[derive(Debug, Clone)]
pub struct BodyTransformer {
    cfg: ModelConfig,
    lora_cfg: Option<LoraConfig>,
    dtype: DType,
    device: Device,
    patch_embed: Dense,
    global_token: Var,
    local_tokens: Var,
    pos_embed: Var,
    blocks: Vec<Block>,
    norm: LayerNorm,
    fusion: Fusion,
    head: Dense,
    mask: Tensor,
}

impl BodyTransformer {
    /// Freshly initialised model; the same `(cfg, dtype, seed)` always gives
    /// the same weights.
    pub fn new(cfg: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let device = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            rng: &mut rng,
            dtype,
            device: &device,
        };
        let d = cfg.embed_dim;
        let mut p = ParamMap::new();
        init.dense(&mut p, "patch_embed", cfg.patch_dim(), d)?;
        p.insert("tokens.global".into(), init.normal(&[1, d], 0.02)?);
        p.insert("tokens.local".into(), init.normal(&[3, d], 0.02)?);
        p.insert("pos_embed".into(), init.normal(&[cfg.n_tokens(), d], 0.02)?);
        for i in 0..cfg.depth {
            let b = format!("blocks.{i}");
            init.layer_norm(&mut p, &format!("{b}.norm1"), d)?;
            for proj in ["q", "k", "v", "o"] {
                init.dense(&mut p, &format!("{b}.attn.{proj}"), d, d)?;
            }
            init.layer_norm(&mut p, &format!("{b}.norm2"), d)?;
            init.dense(&mut p, &format!("{b}.mlp.fc1"), d, cfg.mlp_dim)?;
            init.dense(&mut p, &format!("{b}.mlp.fc2"), cfg.mlp_dim, d)?;
        }
        init.layer_norm(&mut p, "norm", d)?;
        init.dense(&mut p, "fusion.fc1", 2 * d, cfg.fusion_hidden)?;
        // zero second layer: the fused feature starts as the plain concatenation
        init.dense_zero(&mut p, "fusion.fc2", cfg.fusion_hidden, 2 * d)?;
        init.dense(&mut p, "head", 2 * d, cfg.n_classes)?;
        Self::from_params(cfg, &p)
    }

    /// Builds a model around existing parameter tensors (copied).
    pub fn from_params(cfg: &ModelConfig, p: &ParamMap) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let first = p
            .get("pos_embed")
            .ok_or_else(|| Error::invalid("missing parameter `pos_embed`"))?;
        let (dtype, device) = (first.dtype(), first.device().clone());
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let b = format!("blocks.{i}");
            let eps = cfg.layer_norm_eps;
            blocks.push(Block {
                norm1: LayerNorm::load(p, &format!("{b}.norm1"), d, eps)?,
                attn: Attention {
                    q: Dense::load(p, &format!("{b}.attn.q"), d, d)?,
                    k: Dense::load(p, &format!("{b}.attn.k"), d, d)?,
                    v: Dense::load(p, &format!("{b}.attn.v"), d, d)?,
                    o: Dense::load(p, &format!("{b}.attn.o"), d, d)?,
                    heads: cfg.heads,
                },
                norm2: LayerNorm::load(p, &format!("{b}.norm2"), d, eps)?,
                fc1: Dense::load(p, &format!("{b}.mlp.fc1"), d, cfg.mlp_dim)?,
                fc2: Dense::load(p, &format!("{b}.mlp.fc2"), cfg.mlp_dim, d)?,
            });
        }
        let mask = attention_mask(cfg)?.to_dtype(dtype)?;
        Ok(Self {
            cfg: cfg.clone(),
            lora_cfg: None,
            dtype,
            patch_embed: Dense::load(p, "patch_embed", cfg.patch_dim(), d)?,
            global_token: take(p, "tokens.global", &[1, d])?,
            local_tokens: take(p, "tokens.local", &[3, d])?,
            pos_embed: take(p, "pos_embed", &[cfg.n_tokens(), d])?,
            blocks,
            norm: LayerNorm::load(p, "norm", d, cfg.layer_norm_eps)?,
            fusion: Fusion {
                fc1: Dense::load(p, "fusion.fc1", 2 * d, cfg.fusion_hidden)?,
                fc2: Dense::load(p, "fusion.fc2", cfg.fusion_hidden, 2 * d)?,
            },
            head: Dense::load(p, "head", 2 * d, cfg.n_classes)?,
            mask: mask.to_device(&device)?,
            device,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora_cfg.as_ref()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn dense_layers(&self) -> Vec<&Dense> {
        let mut out = vec![&self.patch_embed];
        for b in &self.blocks {
            out.extend(b.attn.projections());
            out.push(&b.fc1);
            out.push(&b.fc2);
        }
        out.extend([&self.fusion.fc1, &self.fusion.fc2, &self.head]);
        out
    }

    /// Base (non-adapter) parameters by name.
    pub fn base_vars(&self) -> Vec<(String, Var)> {
        let mut out = vec![
            (
                "patch_embed.weight".to_string(),
                self.patch_embed.weight.clone(),
            ),
            (
                "patch_embed.bias".to_string(),
                self.patch_embed.bias.clone(),
            ),
            ("tokens.global".to_string(), self.global_token.clone()),
            ("tokens.local".to_string(), self.local_tokens.clone()),
            ("pos_embed".to_string(), self.pos_embed.clone()),
        ];
        let mut dense = |name: &str, l: &Dense| {
            out.push((format!("{name}.weight"), l.weight.clone()));
            out.push((format!("{name}.bias"), l.bias.clone()));
        };
        for (i, b) in self.blocks.iter().enumerate() {
            let n = format!("blocks.{i}");
            dense(&format!("{n}.attn.q"), &b.attn.q);
            dense(&format!("{n}.attn.k"), &b.attn.k);
            dense(&format!("{n}.attn.v"), &b.attn.v);
            dense(&format!("{n}.attn.o"), &b.attn.o);
            dense(&format!("{n}.mlp.fc1"), &b.fc1);
            dense(&format!("{n}.mlp.fc2"), &b.fc2);
        }
        dense("fusion.fc1", &self.fusion.fc1);
        dense("fusion.fc2", &self.fusion.fc2);
        dense("head", &self.head);
        for (i, b) in self.blocks.iter().enumerate() {
            for (which, ln) in [("norm1", &b.norm1), ("norm2", &b.norm2)] {
                out.push((format!("blocks.{i}.{which}.weight"), ln.weight.clone()));
                out.push((format!("blocks.{i}.{which}.bias"), ln.bias.clone()));
            }
        }
        out.push(("norm.weight".to_string(), self.norm.weight.clone()));
        out.push(("norm.bias".to_string(), self.norm.bias.clone()));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Adapter parameters by name; empty without LoRA.
    pub fn lora_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for l in self.dense_layers() {
            if let Some(a) = &l.lora {
                out.push((format!("{}.lora_down", l.name), a.down.clone()));
                out.push((format!("{}.lora_up", l.name), a.up.clone()));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Parameters the optimiser should update: adapters only under LoRA,
    /// everything otherwise.
    pub fn trainable_vars(&self) -> Vec<Var> {
        let named = if self.lora_cfg.is_some() {
            self.lora_vars()
        } else {
            self.base_vars()
        };
        named.into_iter().map(|(_, v)| v).collect()
    }

    pub fn parameter_count(vars: &[Var]) -> usize {
        vars.iter().map(|v| v.elem_count()).sum()
    }

    /// Snapshot of every parameter tensor, base and adapter.
    pub fn state(&self) -> Result<ParamMap> {
        let mut out = ParamMap::new();
        for (n, v) in self.base_vars().into_iter().chain(self.lora_vars()) {
            out.insert(n, v.as_tensor().copy()?);
        }
        Ok(out)
    }

    /// Adds adapters to the query, key, value and output projection of every
    /// attention layer and freezes the base weights.
    pub fn apply_lora(&mut self, lora: &LoraConfig) -> Result<()> {
        if self.lora_cfg.is_some() {
            return Err(Error::config("LoRA adapters already applied"));
        }
        lora.validate(self.cfg.embed_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(lora.seed);
        let mut init = Init {
            rng: &mut rng,
            dtype: self.dtype,
            device: &self.device,
        };
        for b in &mut self.blocks {
            for l in b.attn.projections_mut() {
                l.attach_lora(lora.rank, lora.scale(), &mut init)?;
            }
        }
        self.lora_cfg = Some(lora.clone());
        Ok(())
    }

    /// Overwrites adapter tensors (e.g. from a checkpoint).
    pub(crate) fn set_lora_state(&mut self, p: &ParamMap) -> Result<()> {
        for (name, var) in self.lora_vars() {
            let t = p
                .get(&name)
                .ok_or_else(|| Error::invalid(format!("missing adapter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::DimensionMismatch {
                    expected: format!("{name}: {:?}", var.dims()),
                    actual: format!("{:?}", t.dims()),
                });
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Folds every adapter into its base weight and returns a plain model.
    pub fn merge_lora(&self) -> Result<Self> {
        let mut p = ParamMap::new();
        for (n, v) in self.base_vars() {
            p.insert(n, v.as_tensor().copy()?);
        }
        for l in self.dense_layers() {
            if l.lora.is_some() {
                p.insert(format!("{}.weight", l.name), l.merged_weight()?);
            }
        }
        Self::from_params(&self.cfg, &p)
    }

    fn check_patches(&self, patches: &Tensor) -> Result<usize> {
        let dims = patches.dims();
        let ok =
            dims.len() == 3 && dims[1] == self.cfg.n_patches() && dims[2] == self.cfg.patch_dim();
        if !ok {
            return Err(Error::DimensionMismatch {
                expected: format!(
                    "(batch, {}, {}) patches for a {}x{} image",
                    self.cfg.n_patches(),
                    self.cfg.patch_dim(),
                    self.cfg.image_height,
                    self.cfg.image_width
                ),
                actual: format!("{dims:?}"),
            });
        }
        Ok(dims[0])
    }

    /// Token sequence `(batch, N + 4, D)` including position embeddings.
    pub fn embed_tokens(&self, patches: &Tensor) -> Result<Tensor> {
        let b = self.check_patches(patches)?;
        let patches = patches.to_dtype(self.dtype)?;
        let d = self.cfg.embed_dim;
        let pe = self.patch_embed.forward(&patches)?;
        let special = Tensor::cat(
            &[self.global_token.as_tensor(), self.local_tokens.as_tensor()],
            0,
        )?
        .unsqueeze(0)?
        .broadcast_as((b, 4, d))?;
        let tokens = Tensor::cat(&[&special, &pe], 1)?;
        Ok(tokens.broadcast_add(&self.pos_embed.as_tensor().unsqueeze(0)?)?)
    }

    /// Final-normalised token states `(batch, N + 4, D)`.
    pub fn encode(&self, patches: &Tensor) -> Result<Tensor> {
        let mut x = self.embed_tokens(patches)?;
        for block in &self.blocks {
            x = block.forward(&x, &self.mask)?;
        }
        self.norm.forward(&x)
    }

    pub fn forward(&self, patches: &Tensor) -> Result<FeatureBundle> {
        let x = self.encode(patches)?;
        let z_global = x.narrow(1, 0, 1)?.squeeze(1)?;
        let z_face = x.narrow(1, 1, 1)?.squeeze(1)?;
        let z_torso = x.narrow(1, 2, 1)?.squeeze(1)?;
        let z_lower = x.narrow(1, 3, 1)?.squeeze(1)?;
        let z_local = average_local(&z_face, &z_torso, &z_lower)?;
        let z_final = self.fusion.forward(&z_global, &z_local)?;
        Ok(FeatureBundle {
            z_global,
            z_face,
            z_torso,
            z_lower,
            z_local,
            z_final,
        })
    }

    pub fn fuse(&self, z_global: &Tensor, z_local: &Tensor) -> Result<Tensor> {
        self.fusion.forward(z_global, z_local)
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    /// Identity logits `(batch, n_classes)` from fused features.
    pub fn classify(&self, z_final: &Tensor) -> Result<Tensor> {
        self.head.forward(z_final)
    }
}

/// Additive attention mask `(T, T)`: 0 where a query token may attend to a
/// key token, `-inf` otherwise.
pub fn attention_mask(cfg: &ModelConfig) -> Result<Tensor> {
    let n = cfg.n_patches();
    let t = n + 4;
    let mut m = vec![f32::NEG_INFINITY; t * t];
    let mut allow = |q: usize, k: usize| m[q * t + k] = 0.0;
    for k in 0..t {
        allow(0, k);
    }
    let region_of: Vec<Region> = (0..n).map(|p| cfg.patch_region(p)).collect();
    for r in Region::ALL {
        let tok = 1 + r.index();
        allow(tok, tok);
        for (p, pr) in region_of.iter().enumerate() {
            if *pr == r {
                allow(tok, 4 + p);
            }
        }
    }
    for (p, pr) in region_of.iter().enumerate() {
        if cfg.patches_attend_global {
            allow(4 + p, 0);
        }
        for (k, kr) in region_of.iter().enumerate() {
            if kr == pr {
                allow(4 + p, 4 + k);
            }
        }
    }
    Ok(Tensor::from_vec(m, (t, t), &Device::Cpu)?)
}
