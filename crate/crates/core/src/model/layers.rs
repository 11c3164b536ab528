use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Named parameter tensors, ordered by name.
pub type ParamMap = BTreeMap<String, Tensor>;

pub(crate) fn take(params: &ParamMap, name: &str, shape: &[usize]) -> Result<Var> {
    let t = params
        .get(name)
        .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
    if t.dims() != shape {
        return Err(Error::DimensionMismatch {
            expected: format!("{name}: {shape:?}"),
            actual: format!("{:?}", t.dims()),
        });
    }
    // Copy so that every model owns its storage.
    Ok(Var::from_tensor(&t.copy()?)?)
}

/// Deterministic parameter initialisation.
pub(crate) struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub dtype: DType,
    pub device: &'a Device,
}

impl Init<'_> {
    fn tensor(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(data, shape, self.device)?.to_dtype(self.dtype)?)
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(shape, self.dtype, self.device)?)
    }

    pub fn ones(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::ones(shape, self.dtype, self.device)?)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(&mut *self.rng)).collect();
        self.tensor(data, shape)
    }

    pub fn uniform(&mut self, shape: &[usize], limit: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-limit..limit))
            .collect();
        self.tensor(data, shape)
    }

    /// Glorot uniform for an `(out, in)` weight.
    pub fn xavier(&mut self, out_dim: usize, in_dim: usize) -> Result<Tensor> {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        self.uniform(&[out_dim, in_dim], limit)
    }

    pub fn dense(
        &mut self,
        params: &mut ParamMap,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<()> {
        params.insert(format!("{name}.weight"), self.xavier(out_dim, in_dim)?);
        params.insert(format!("{name}.bias"), self.zeros(&[out_dim])?);
        Ok(())
    }

    pub fn dense_zero(
        &mut self,
        params: &mut ParamMap,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<()> {
        params.insert(format!("{name}.weight"), self.zeros(&[out_dim, in_dim])?);
        params.insert(format!("{name}.bias"), self.zeros(&[out_dim])?);
        Ok(())
    }

    pub fn layer_norm(&mut self, params: &mut ParamMap, name: &str, dim: usize) -> Result<()> {
        params.insert(format!("{name}.weight"), self.ones(&[dim])?);
        params.insert(format!("{name}.bias"), self.zeros(&[dim])?);
        Ok(())
    }
}

/// Low-rank update `scale · up · down` added to a frozen weight.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// `(rank, in)`
    pub down: Var,
    /// `(out, rank)`, zero at creation.
    pub up: Var,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn delta_weight(&self) -> Result<Tensor> {
        Ok((self.up.as_tensor().matmul(self.down.as_tensor())? * self.scale)?)
    }
}

/// Affine map `x Wᵀ + b` over the last axis with an optional LoRA branch.
#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub weight: Var,
    pub bias: Var,
    pub lora: Option<LoraAdapter>,
}

impl Dense {
    pub fn load(params: &ParamMap, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            weight: take(params, &format!("{name}.weight"), &[out_dim, in_dim])?,
            bias: take(params, &format!("{name}.bias"), &[out_dim])?,
            lora: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims
            .last()
            .ok_or_else(|| Error::invalid("scalar input to dense layer"))?;
        if in_dim != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: format!("{}: last axis {}", self.name, self.in_dim()),
                actual: format!("{dims:?}"),
            });
        }
        let rows = x.elem_count() / in_dim;
        let x2 = x.reshape((rows, in_dim))?;
        let mut y = x2
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?;
        if let Some(l) = &self.lora {
            let low = x2.matmul(&l.down.as_tensor().t()?)?;
            let up = low.matmul(&l.up.as_tensor().t()?)?;
            y = (y + (up * l.scale)?)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }

    pub(crate) fn attach_lora(
        &mut self,
        rank: usize,
        scale: f64,
        init: &mut Init<'_>,
    ) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::config(format!(
                "{} already has an adapter",
                self.name
            )));
        }
        let limit = (1.0 / self.in_dim() as f64).sqrt();
        let down = Var::from_tensor(&init.uniform(&[rank, self.in_dim()], limit)?)?;
        let up = Var::from_tensor(&init.zeros(&[self.out_dim(), rank])?)?;
        self.lora = Some(LoraAdapter { down, up, scale });
        Ok(())
    }

    pub fn merged_weight(&self) -> Result<Tensor> {
        match &self.lora {
            Some(l) => Ok((self.weight.as_tensor() + l.delta_weight()?)?),
            None => Ok(self.weight.as_tensor().copy()?),
        }
    }
}

/// Layer normalisation over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Var,
    pub bias: Var,
    pub eps: f64,
}

impl LayerNorm {
    pub fn load(params: &ParamMap, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: take(params, &format!("{name}.weight"), &[dim])?,
            bias: take(params, &format!("{name}.bias"), &[dim])?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

/// Softmax over the last axis. Rows may contain `-inf` entries but must
/// hold at least one finite value.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}
