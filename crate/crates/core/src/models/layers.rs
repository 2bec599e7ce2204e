use super::{Exec, Init, ParamSource};
use crate::error::Result;
use crate::tensor::{self, Scratch, Tensor, DEFAULT_EPS};

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn build(src: &mut dyn ParamSource, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = src.take(&format!("{name}.weight"), &[d_out, d_in], Init::Normal)?;
        let bias = if bias {
            Some(src.take(&format!("{name}.bias"), &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
        })
    }

    pub fn forward(&self, x: &Tensor, exec: &Exec) -> Result<Tensor> {
        match exec.delta.and_then(|d| d.effective_weight(&self.name, &self.weight)) {
            Some(w) => tensor::linear(x, &w, self.bias.as_ref()),
            None => tensor::linear(x, &self.weight, self.bias.as_ref()),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.weight", self.name), &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{}.bias", self.name), b);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.weight", self.name), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{}.bias", self.name), b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn build(
        src: &mut dyn ParamSource,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            weight: src.take(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], init)?,
            bias: src.take(&format!("{name}.bias"), &[c_out], Init::Zeros)?,
            stride,
            padding: (kernel - 1) / 2,
        })
    }

    pub fn forward(&self, x: &Tensor, exec: &mut Exec) -> Result<Tensor> {
        if exec.reuse_buffers {
            tensor::conv2d_tiled(
                x,
                &self.weight,
                Some(&self.bias),
                self.stride,
                self.padding,
                &mut exec.scratch,
                tensor::CONV_TILE_FLOATS,
            )
        } else {
            tensor::conv2d_scratch(x, &self.weight, Some(&self.bias), self.stride, self.padding, &mut Scratch::new())
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.weight", self.name), &self.weight);
        f(&format!("{}.bias", self.name), &self.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.weight", self.name), &mut self.weight);
        f(&format!("{}.bias", self.name), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub name: String,
    pub groups: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl GroupNorm {
    pub fn build(src: &mut dyn ParamSource, name: &str, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            groups,
            gamma: src.take(&format!("{name}.gamma"), &[channels], Init::Ones)?,
            beta: src.take(&format!("{name}.beta"), &[channels], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::group_norm(x, self.groups, &self.gamma, &self.beta, DEFAULT_EPS)
    }

    pub fn forward_inplace(&self, x: &mut Tensor) -> Result<()> {
        tensor::group_norm_inplace(x, self.groups, &self.gamma, &self.beta, DEFAULT_EPS)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.gamma", self.name), &self.gamma);
        f(&format!("{}.beta", self.name), &self.beta);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.gamma", self.name), &mut self.gamma);
        f(&format!("{}.beta", self.name), &mut self.beta);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn build(src: &mut dyn ParamSource, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            gamma: src.take(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: src.take(&format!("{name}.beta"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::layer_norm(x, &self.gamma, &self.beta, DEFAULT_EPS)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.gamma", self.name), &self.gamma);
        f(&format!("{}.beta", self.name), &self.beta);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.gamma", self.name), &mut self.gamma);
        f(&format!("{}.beta", self.name), &mut self.beta);
    }
}

/// Multi-head attention over row-major token matrices `[n, heads * head_dim]`.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, d) = q.dims2()?;
    if heads == 1 {
        return tensor::attention(q, k, v);
    }
    let hd = d / heads;
    let mut out = Tensor::zeros(&[n, d]);
    for h in 0..heads {
        let qh = tensor::column_slice(q, h * hd, hd)?;
        let kh = tensor::column_slice(k, h * hd, hd)?;
        let vh = tensor::column_slice(v, h * hd, hd)?;
        let oh = tensor::attention(&qh, &kh, &vh)?;
        tensor::write_columns(&mut out, &oh, h * hd)?;
    }
    Ok(out)
}
