use serde::{Deserialize, Serialize};

use super::layers::{multi_head_attention, Conv2d, GroupNorm, LayerNorm, Linear};
use super::{Exec, Init, ParamSource, Params};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub const NORM_GROUPS: usize = 8;
pub const ATTN_HEADS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub time_embed_dim: usize,
    pub cross_attn_dim: usize,
    /// Levels (0 = full latent resolution) that carry a transformer block.
    /// `None` means the deepest level only.
    pub attn_levels: Option<Vec<usize>>,
    pub train_timesteps: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            base_channels: 32,
            channel_mults: vec![1, 2],
            time_embed_dim: 128,
            cross_attn_dim: 64,
            attn_levels: None,
            train_timesteps: 1000,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    pub fn has_attention(&self, level: usize) -> bool {
        match &self.attn_levels {
            Some(levels) => levels.contains(&level),
            None => level + 1 == self.levels(),
        }
    }

    /// Skip connections (one per level) plus the mid block.
    pub fn injection_points(&self) -> usize {
        self.levels() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() {
            return Err(Error::InvalidArgument("channel_mults must not be empty".into()));
        }
        for l in 0..self.levels() {
            let c = self.level_channels(l);
            if c % NORM_GROUPS != 0 || c % ATTN_HEADS != 0 {
                return Err(Error::InvalidArgument(format!(
                    "level {l} width {c} must be divisible by {NORM_GROUPS} groups and {ATTN_HEADS} heads"
                )));
            }
        }
        if self.base_channels % 2 != 0 {
            return Err(Error::InvalidArgument("base_channels must be even".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding: first half `sin(t f_i)`, second half `cos(t f_i)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[1, dim], |i| {
        let k = i % half;
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        if i < half {
            arg.sin() as f32
        } else {
            arg.cos() as f32
        }
    })
}

#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub(crate) fn build(src: &mut dyn ParamSource, name: &str, c_in: usize, c_out: usize, t_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::build(src, &format!("{name}.norm1"), c_in, NORM_GROUPS)?,
            conv1: Conv2d::build(src, &format!("{name}.conv1"), c_in, c_out, 3, 1, Init::Normal)?,
            time_proj: Linear::build(src, &format!("{name}.time_proj"), t_dim, c_out, true)?,
            norm2: GroupNorm::build(src, &format!("{name}.norm2"), c_out, NORM_GROUPS)?,
            conv2: Conv2d::build(src, &format!("{name}.conv2"), c_out, c_out, 3, 1, Init::Normal)?,
            skip: if c_in != c_out {
                Some(Conv2d::build(src, &format!("{name}.skip"), c_in, c_out, 1, 1, Init::Normal)?)
            } else {
                None
            },
        })
    }

    /// `temb_act` is `silu(time embedding)`, shape `[1, t_dim]`.
    pub(crate) fn forward(&self, x: &Tensor, temb_act: &Tensor, exec: &mut Exec) -> Result<Tensor> {
        let tp = self.time_proj.forward(temb_act, exec)?;
        if exec.reuse_buffers {
            let mut h = self.norm1.forward(x)?;
            tensor::silu_inplace(&mut h);
            let mut h = self.conv1.forward(&h, exec)?;
            tensor::add_channel_bias_inplace(&mut h, tp.data())?;
            self.norm2.forward_inplace(&mut h)?;
            tensor::silu_inplace(&mut h);
            let mut h = self.conv2.forward(&h, exec)?;
            match &self.skip {
                Some(s) => tensor::add_inplace(&mut h, &s.forward(x, exec)?)?,
                None => tensor::add_inplace(&mut h, x)?,
            }
            Ok(h)
        } else {
            let h = self.norm1.forward(x)?;
            let h = tensor::silu(&h);
            let mut h = self.conv1.forward(&h, exec)?;
            tensor::add_channel_bias_inplace(&mut h, tp.data())?;
            let h = self.norm2.forward(&h)?;
            let h = tensor::silu(&h);
            let h = self.conv2.forward(&h, exec)?;
            let skip = match &self.skip {
                Some(s) => s.forward(x, exec)?,
                None => x.clone(),
            };
            tensor::add(&h, &skip)
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norm1.visit(f);
        self.conv1.visit(f);
        self.time_proj.visit(f);
        self.norm2.visit(f);
        self.conv2.visit(f);
        if let Some(s) = &self.skip {
            s.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.norm1.visit_mut(f);
        self.conv1.visit_mut(f);
        self.time_proj.visit_mut(f);
        self.norm2.visit_mut(f);
        self.conv2.visit_mut(f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(f);
        }
    }
}

/// Self-attention, text cross-attention and feed-forward over spatial tokens.
#[derive(Debug, Clone)]
pub(crate) struct TransformerBlock {
    name: String,
    norm: GroupNorm,
    proj_in: Linear,
    ln1: LayerNorm,
    self_q: Linear,
    self_k: Linear,
    self_v: Linear,
    self_out: Linear,
    ln2: LayerNorm,
    cross_q: Linear,
    cross_k: Linear,
    cross_v: Linear,
    cross_out: Linear,
    ln3: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    proj_out: Linear,
}

impl TransformerBlock {
    pub(crate) fn build(src: &mut dyn ParamSource, name: &str, c: usize, ctx_dim: usize) -> Result<Self> {
        let l = |src: &mut dyn ParamSource, s: &str, i: usize, o: usize, b: bool| {
            Linear::build(src, &format!("{name}.{s}"), i, o, b)
        };
        Ok(Self {
            name: name.to_string(),
            norm: GroupNorm::build(src, &format!("{name}.norm"), c, NORM_GROUPS)?,
            proj_in: l(src, "proj_in", c, c, true)?,
            ln1: LayerNorm::build(src, &format!("{name}.ln1"), c)?,
            self_q: l(src, "self_q", c, c, false)?,
            self_k: l(src, "self_k", c, c, false)?,
            self_v: l(src, "self_v", c, c, false)?,
            self_out: l(src, "self_out", c, c, true)?,
            ln2: LayerNorm::build(src, &format!("{name}.ln2"), c)?,
            cross_q: l(src, "cross_q", c, c, false)?,
            cross_k: l(src, "cross_k", ctx_dim, c, false)?,
            cross_v: l(src, "cross_v", ctx_dim, c, false)?,
            cross_out: l(src, "cross_out", c, c, true)?,
            ln3: LayerNorm::build(src, &format!("{name}.ln3"), c)?,
            ff1: l(src, "ff1", c, 4 * c, true)?,
            ff2: l(src, "ff2", 4 * c, c, true)?,
            proj_out: l(src, "proj_out", c, c, true)?,
        })
    }

    fn text_kv(&self, ctx: &Tensor, exec: &mut Exec) -> Result<(Tensor, Tensor)> {
        let key = (exec.branch, self.name.clone());
        if let Some(cache) = &exec.kv_cache {
            if let Some((k, v)) = cache.entries.get(&key) {
                return Ok((k.clone(), v.clone()));
            }
        }
        let k = self.cross_k.forward(ctx, exec)?;
        let v = self.cross_v.forward(ctx, exec)?;
        if let Some(cache) = &mut exec.kv_cache {
            cache.entries.insert(key, (k.clone(), v.clone()));
        }
        Ok((k, v))
    }

    pub(crate) fn forward(&self, x: &Tensor, ctx: &Tensor, exec: &mut Exec) -> Result<Tensor> {
        let (c, h, w) = x.dims3()?;
        let normed = self.norm.forward(x)?;
        let tokens = tensor::transpose2d(&normed.reshape(&[c, h * w])?)?;
        let mut t = self.proj_in.forward(&tokens, exec)?;

        let n = self.ln1.forward(&t)?;
        let q = self.self_q.forward(&n, exec)?;
        let k = self.self_k.forward(&n, exec)?;
        let v = self.self_v.forward(&n, exec)?;
        let a = multi_head_attention(&q, &k, &v, ATTN_HEADS)?;
        tensor::add_inplace(&mut t, &self.self_out.forward(&a, exec)?)?;

        let n = self.ln2.forward(&t)?;
        let q = self.cross_q.forward(&n, exec)?;
        let (k, v) = self.text_kv(ctx, exec)?;
        let a = multi_head_attention(&q, &k, &v, ATTN_HEADS)?;
        tensor::add_inplace(&mut t, &self.cross_out.forward(&a, exec)?)?;

        let n = self.ln3.forward(&t)?;
        let mut f = self.ff1.forward(&n, exec)?;
        tensor::gelu_inplace(&mut f);
        tensor::add_inplace(&mut t, &self.ff2.forward(&f, exec)?)?;

        let t = self.proj_out.forward(&t, exec)?;
        let mut out = tensor::transpose2d(&t)?.reshape(&[c, h, w])?;
        tensor::add_inplace(&mut out, x)?;
        Ok(out)
    }

    fn linears(&self) -> [&Linear; 11] {
        [
            &self.proj_in, &self.self_q, &self.self_k, &self.self_v, &self.self_out, &self.cross_q,
            &self.cross_k, &self.cross_v, &self.cross_out, &self.ff1, &self.ff2,
        ]
    }

    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norm.visit(f);
        self.ln1.visit(f);
        self.ln2.visit(f);
        self.ln3.visit(f);
        for l in self.linears() {
            l.visit(f);
        }
        self.proj_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.norm.visit_mut(f);
        self.ln1.visit_mut(f);
        self.ln2.visit_mut(f);
        self.ln3.visit_mut(f);
        for l in [
            &mut self.proj_in, &mut self.self_q, &mut self.self_k, &mut self.self_v, &mut self.self_out,
            &mut self.cross_q, &mut self.cross_k, &mut self.cross_v, &mut self.cross_out, &mut self.ff1,
            &mut self.ff2, &mut self.proj_out,
        ] {
            l.visit_mut(f);
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct DownLevel {
    pub(crate) res: ResBlock,
    pub(crate) attn: Option<TransformerBlock>,
    pub(crate) down: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub(crate) struct MidBlock {
    pub(crate) res1: ResBlock,
    pub(crate) attn: TransformerBlock,
    pub(crate) res2: ResBlock,
}

#[derive(Debug, Clone)]
struct UpLevel {
    up: Option<Conv2d>,
    res: ResBlock,
    attn: Option<TransformerBlock>,
}

/// Encoder half of the U-Net: the part a ControlNet branch copies.
#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    pub(crate) time_fc1: Linear,
    pub(crate) time_fc2: Linear,
    pub(crate) conv_in: Conv2d,
    pub(crate) down: Vec<DownLevel>,
    pub(crate) mid: MidBlock,
}

impl Encoder {
    pub(crate) fn build(cfg: &UNetConfig, src: &mut dyn ParamSource, prefix: &str) -> Result<Self> {
        let td = cfg.time_embed_dim;
        let time_fc1 = Linear::build(src, &format!("{prefix}time.fc1"), cfg.base_channels, td, true)?;
        let time_fc2 = Linear::build(src, &format!("{prefix}time.fc2"), td, td, true)?;
        let conv_in = Conv2d::build(src, &format!("{prefix}conv_in"), cfg.in_channels, cfg.base_channels, 3, 1, Init::Normal)?;
        let mut down = Vec::new();
        let mut ch = cfg.base_channels;
        for l in 0..cfg.levels() {
            let out = cfg.level_channels(l);
            let p = format!("{prefix}down.{l}");
            down.push(DownLevel {
                res: ResBlock::build(src, &format!("{p}.res"), ch, out, td)?,
                attn: if cfg.has_attention(l) {
                    Some(TransformerBlock::build(src, &format!("{p}.attn"), out, cfg.cross_attn_dim)?)
                } else {
                    None
                },
                down: if l + 1 < cfg.levels() {
                    Some(Conv2d::build(src, &format!("{p}.down"), out, out, 3, 2, Init::Normal)?)
                } else {
                    None
                },
            });
            ch = out;
        }
        let mid = MidBlock {
            res1: ResBlock::build(src, &format!("{prefix}mid.res1"), ch, ch, td)?,
            attn: TransformerBlock::build(src, &format!("{prefix}mid.attn"), ch, cfg.cross_attn_dim)?,
            res2: ResBlock::build(src, &format!("{prefix}mid.res2"), ch, ch, td)?,
        };
        Ok(Self {
            time_fc1,
            time_fc2,
            conv_in,
            down,
            mid,
        })
    }

    /// `silu(time_mlp(sinusoid(t)))`, the form every ResBlock consumes.
    pub(crate) fn time_activation(&self, t: usize, dim: usize, exec: &mut Exec) -> Result<Tensor> {
        let e = timestep_embedding(t, dim);
        let mut h = self.time_fc1.forward(&e, exec)?;
        tensor::silu_inplace(&mut h);
        let mut h = self.time_fc2.forward(&h, exec)?;
        tensor::silu_inplace(&mut h);
        Ok(h)
    }

    /// Runs the encoder from the post-`conv_in` feature map; returns (skips, mid).
    pub(crate) fn run_from(
        &self,
        mut h: Tensor,
        temb: &Tensor,
        ctx: &Tensor,
        exec: &mut Exec,
    ) -> Result<(Vec<Tensor>, Tensor)> {
        let mut skips = Vec::with_capacity(self.down.len());
        for level in &self.down {
            h = level.res.forward(&h, temb, exec)?;
            if let Some(a) = &level.attn {
                h = a.forward(&h, ctx, exec)?;
            }
            let next = match &level.down {
                Some(d) => Some(d.forward(&h, exec)?),
                None => None,
            };
            skips.push(h);
            if let Some(n) = next {
                h = n;
            } else {
                h = skips.last().expect("pushed").clone();
            }
        }
        let h = self.mid.res1.forward(&h, temb, exec)?;
        let h = self.mid.attn.forward(&h, ctx, exec)?;
        let h = self.mid.res2.forward(&h, temb, exec)?;
        Ok((skips, h))
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.time_fc1.visit(f);
        self.time_fc2.visit(f);
        self.conv_in.visit(f);
        for l in &self.down {
            l.res.visit(f);
            if let Some(a) = &l.attn {
                a.visit(f);
            }
            if let Some(d) = &l.down {
                d.visit(f);
            }
        }
        self.mid.res1.visit(f);
        self.mid.attn.visit(f);
        self.mid.res2.visit(f);
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.time_fc1.visit_mut(f);
        self.time_fc2.visit_mut(f);
        self.conv_in.visit_mut(f);
        for l in &mut self.down {
            l.res.visit_mut(f);
            if let Some(a) = &mut l.attn {
                a.visit_mut(f);
            }
            if let Some(d) = &mut l.down {
                d.visit_mut(f);
            }
        }
        self.mid.res1.visit_mut(f);
        self.mid.attn.visit_mut(f);
        self.mid.res2.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    pub(crate) encoder: Encoder,
    up: Vec<UpLevel>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl UNet {
    pub fn build(config: UNetConfig, src: &mut dyn ParamSource) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::build(&config, src, "")?;
        let td = config.time_embed_dim;
        let levels = config.levels();
        let mut ch = config.level_channels(levels - 1);
        let mut up = Vec::new();
        for l in (0..levels).rev() {
            let skip_ch = config.level_channels(l);
            let p = format!("up.{l}");
            let upconv = if l + 1 < levels {
                Some(Conv2d::build(src, &format!("{p}.up"), ch, ch, 3, 1, Init::Normal)?)
            } else {
                None
            };
            let res = ResBlock::build(src, &format!("{p}.res"), ch + skip_ch, skip_ch, td)?;
            let attn = if config.has_attention(l) {
                Some(TransformerBlock::build(src, &format!("{p}.attn"), skip_ch, config.cross_attn_dim)?)
            } else {
                None
            };
            up.push(UpLevel { up: upconv, res, attn });
            ch = skip_ch;
        }
        let out_norm = GroupNorm::build(src, "out.norm", ch, NORM_GROUPS)?;
        let out_conv = Conv2d::build(src, "out.conv", ch, config.in_channels, 3, 1, Init::Normal)?;
        Ok(Self {
            config,
            encoder,
            up,
            out_norm,
            out_conv,
        })
    }

    pub fn injection_points(&self) -> usize {
        self.config.injection_points()
    }

    pub fn check_latent(&self, latent: &Tensor) -> Result<(usize, usize)> {
        let (c, h, w) = latent.dims3()?;
        let div = 1usize << (self.config.levels() - 1);
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "latent has {c} channels, U-Net expects {}",
                self.config.in_channels
            )));
        }
        if h < 4 || w < 4 || h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "latent spatial size {h}x{w} must be >= 4 and divisible by {div}"
            )));
        }
        Ok((h, w))
    }

    /// Noise prediction for `latent [4, h, w]` at `timestep`, conditioned on
    /// `text_emb [tokens, cross_attn_dim]`. Control residuals, when given,
    /// are added to each skip feature and finally to the mid output.
    pub fn forward(
        &self,
        latent: &Tensor,
        timestep: usize,
        text_emb: &Tensor,
        control: Option<&[Tensor]>,
        exec: &mut Exec,
    ) -> Result<Tensor> {
        self.check_latent(latent)?;
        if timestep >= self.config.train_timesteps {
            return Err(Error::InvalidArgument(format!(
                "timestep {timestep} outside [0, {})",
                self.config.train_timesteps
            )));
        }
        if text_emb.rank() != 2 || text_emb.shape()[1] != self.config.cross_attn_dim {
            return Err(Error::Shape(format!(
                "text embedding {:?} does not match cross_attn_dim {}",
                text_emb.shape(),
                self.config.cross_attn_dim
            )));
        }
        if let Some(res) = control {
            if res.len() != self.injection_points() {
                return Err(Error::Shape(format!(
                    "{} control residuals for {} injection points",
                    res.len(),
                    self.injection_points()
                )));
            }
        }
        let enc = &self.encoder;
        let temb = enc.time_activation(timestep, self.config.base_channels, exec)?;
        let h = enc.conv_in.forward(latent, exec)?;
        let (mut skips, mut h) = enc.run_from(h, &temb, text_emb, exec)?;
        if let Some(res) = control {
            for (s, r) in skips.iter_mut().zip(res) {
                tensor::add_inplace(s, r)?;
            }
            tensor::add_inplace(&mut h, &res[res.len() - 1])?;
        }
        for level in &self.up {
            if let Some(u) = &level.up {
                h = u.forward(&tensor::resize_nearest(&h, 2)?, exec)?;
            }
            let skip = skips.pop().expect("one skip per level");
            h = tensor::concat_channels(&h, &skip)?;
            h = level.res.forward(&h, &temb, exec)?;
            if let Some(a) = &level.attn {
                h = a.forward(&h, text_emb, exec)?;
            }
        }
        if exec.reuse_buffers {
            self.out_norm.forward_inplace(&mut h)?;
            tensor::silu_inplace(&mut h);
        } else {
            h = tensor::silu(&self.out_norm.forward(&h)?);
        }
        self.out_conv.forward(&h, exec)
    }
}

impl Params for UNet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit(f);
        for l in &self.up {
            if let Some(u) = &l.up {
                u.visit(f);
            }
            l.res.visit(f);
            if let Some(a) = &l.attn {
                a.visit(f);
            }
        }
        self.out_norm.visit(f);
        self.out_conv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut(f);
        for l in &mut self.up {
            if let Some(u) = &mut l.up {
                u.visit_mut(f);
            }
            l.res.visit_mut(f);
            if let Some(a) = &mut l.attn {
                a.visit_mut(f);
            }
        }
        self.out_norm.visit_mut(f);
        self.out_conv.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::SeededInit;
    use crate::tensor::Rng;

    fn unet() -> UNet {
        UNet::build(UNetConfig::default(), &mut SeededInit::new(42)).unwrap()
    }

    #[test]
    fn time_embedding_at_zero() {
        let e = timestep_embedding(0, 32);
        assert!(e.data()[..16].iter().all(|&v| v == 0.0));
        assert!(e.data()[16..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn output_shape_and_zero_control() {
        let net = unet();
        let mut rng = Rng::new(5);
        let x = rng.gaussian_tensor(&[4, 8, 8]);
        let ctx = rng.gaussian_tensor(&[32, 64]);
        let plain = net.forward(&x, 500, &ctx, None, &mut Exec::default()).unwrap();
        assert_eq!(plain.shape(), x.shape());
        let zeros = vec![
            Tensor::zeros(&[32, 8, 8]),
            Tensor::zeros(&[64, 4, 4]),
            Tensor::zeros(&[64, 4, 4]),
        ];
        let ctrl = net.forward(&x, 500, &ctx, Some(&zeros), &mut Exec::default()).unwrap();
        assert!(plain.bit_eq(&ctrl));
    }

    #[test]
    fn reuse_buffers_and_kv_cache_are_bit_identical() {
        let net = unet();
        let mut rng = Rng::new(6);
        let x = rng.gaussian_tensor(&[4, 8, 8]);
        let ctx = rng.gaussian_tensor(&[32, 64]);
        let base = net.forward(&x, 10, &ctx, None, &mut Exec::default()).unwrap();
        let mut exec = Exec {
            reuse_buffers: true,
            kv_cache: Some(Default::default()),
            ..Default::default()
        };
        for _ in 0..2 {
            let y = net.forward(&x, 10, &ctx, None, &mut exec).unwrap();
            assert!(base.bit_eq(&y));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = unet();
        let ctx = Tensor::zeros(&[32, 64]);
        let mut exec = Exec::default();
        assert!(net.forward(&Tensor::zeros(&[3, 8, 8]), 0, &ctx, None, &mut exec).is_err());
        assert!(net.forward(&Tensor::zeros(&[4, 5, 8]), 0, &ctx, None, &mut exec).is_err());
        assert!(net.forward(&Tensor::zeros(&[4, 8, 8]), 1000, &ctx, None, &mut exec).is_err());
        let one = vec![Tensor::zeros(&[32, 8, 8])];
        assert!(net.forward(&Tensor::zeros(&[4, 8, 8]), 0, &ctx, Some(&one), &mut exec).is_err());
    }
}
