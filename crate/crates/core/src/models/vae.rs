use serde::{Deserialize, Serialize};

use super::layers::Conv2d;
use super::{Exec, Init, ParamSource, Params};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub latent_channels: usize,
    pub downsample_factor: usize,
    pub scaling_factor: f32,
    /// Width of the full-resolution stage; deeper stages use twice this.
    pub base_channels: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            downsample_factor: 8,
            scaling_factor: 0.18215,
            base_channels: 16,
        }
    }
}

impl VaeConfig {
    pub fn stages(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    /// Channel width at stage `s` (0 = image resolution).
    fn width(&self, s: usize) -> usize {
        if s == 0 {
            self.base_channels
        } else {
            2 * self.base_channels
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.downsample_factor.is_power_of_two() || self.downsample_factor < 2 {
            return Err(Error::InvalidArgument(format!(
                "downsample_factor {} must be a power of two >= 2",
                self.downsample_factor
            )));
        }
        Ok(())
    }
}

/// Plain convolutional autoencoder; no sampling at inference.
#[derive(Debug, Clone)]
pub struct Vae {
    pub config: VaeConfig,
    enc_in: Conv2d,
    enc_down: Vec<Conv2d>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
}

impl Vae {
    pub fn build(config: VaeConfig, src: &mut dyn ParamSource) -> Result<Self> {
        config.validate()?;
        let stages = config.stages();
        let enc_in = Conv2d::build(src, "encoder.conv_in", 3, config.width(0), 3, 1, Init::Normal)?;
        let enc_down = (0..stages)
            .map(|s| {
                Conv2d::build(
                    src,
                    &format!("encoder.down.{s}"),
                    config.width(s),
                    config.width(s + 1),
                    3,
                    2,
                    Init::Normal,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let enc_out = Conv2d::build(
            src,
            "encoder.conv_out",
            config.width(stages),
            config.latent_channels,
            3,
            1,
            Init::Normal,
        )?;
        let dec_in = Conv2d::build(
            src,
            "decoder.conv_in",
            config.latent_channels,
            config.width(stages),
            3,
            1,
            Init::Normal,
        )?;
        let dec_up = (0..stages)
            .map(|i| {
                let s = stages - i;
                Conv2d::build(
                    src,
                    &format!("decoder.up.{i}"),
                    config.width(s),
                    config.width(s - 1),
                    3,
                    1,
                    Init::Normal,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let dec_out = Conv2d::build(src, "decoder.conv_out", config.width(0), 3, 3, 1, Init::Normal)?;
        Ok(Self {
            config,
            enc_in,
            enc_down,
            enc_out,
            dec_in,
            dec_up,
            dec_out,
        })
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = image.dims3()?;
        let f = self.config.downsample_factor;
        if c != 3 || h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!(
                "image {:?} must be 3 channels with sides divisible by {f}",
                image.shape()
            )));
        }
        Ok(())
    }

    /// Encoder output before latent scaling.
    pub fn encode_raw(&self, image: &Tensor) -> Result<Tensor> {
        self.encode_raw_with(image, false)
    }

    fn encode_raw_with(&self, image: &Tensor, reuse_buffers: bool) -> Result<Tensor> {
        self.check_image(image)?;
        let mut exec = Exec {
            reuse_buffers,
            ..Exec::default()
        };
        let mut h = self.enc_in.forward(image, &mut exec)?;
        tensor::silu_inplace(&mut h);
        for conv in &self.enc_down {
            h = conv.forward(&h, &mut exec)?;
            tensor::silu_inplace(&mut h);
        }
        self.enc_out.forward(&h, &mut exec)
    }

    /// `[3, H, W]` in `[-1, 1]` to a scaled `[latent_channels, H/f, W/f]` latent.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        self.encode_with(image, false)
    }

    /// [`Vae::encode`] with an explicit buffer-reuse switch; same result either way.
    pub fn encode_with(&self, image: &Tensor, reuse_buffers: bool) -> Result<Tensor> {
        let s = self.config.scaling_factor;
        Ok(self.encode_raw_with(image, reuse_buffers)?.map(|v| v * s))
    }

    /// Inverse scaling, decoder, then clamp to `[-1, 1]`.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        self.decode_with(latent, false)
    }

    /// [`Vae::decode`] with an explicit buffer-reuse switch; same result either way.
    pub fn decode_with(&self, latent: &Tensor, reuse_buffers: bool) -> Result<Tensor> {
        let (c, _, _) = latent.dims3()?;
        if c != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "latent {:?} does not have {} channels",
                latent.shape(),
                self.config.latent_channels
            )));
        }
        let s = self.config.scaling_factor;
        let z = latent.map(|v| v / s);
        let mut exec = Exec {
            reuse_buffers,
            ..Exec::default()
        };
        let mut h = self.dec_in.forward(&z, &mut exec)?;
        tensor::silu_inplace(&mut h);
        for conv in &self.dec_up {
            h = conv.forward(&tensor::resize_nearest(&h, 2)?, &mut exec)?;
            tensor::silu_inplace(&mut h);
        }
        let mut out = self.dec_out.forward(&h, &mut exec)?;
        out.map_inplace(|v| v.clamp(-1.0, 1.0));
        Ok(out)
    }
}

impl Params for Vae {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.enc_in.visit(f);
        self.enc_down.iter().for_each(|c| c.visit(f));
        self.enc_out.visit(f);
        self.dec_in.visit(f);
        self.dec_up.iter().for_each(|c| c.visit(f));
        self.dec_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.enc_in.visit_mut(f);
        self.enc_down.iter_mut().for_each(|c| c.visit_mut(f));
        self.enc_out.visit_mut(f);
        self.dec_in.visit_mut(f);
        self.dec_up.iter_mut().for_each(|c| c.visit_mut(f));
        self.dec_out.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::SeededInit;
    use crate::tensor::Rng;

    fn vae() -> Vae {
        Vae::build(VaeConfig::default(), &mut SeededInit::new(42)).unwrap()
    }

    #[test]
    fn shapes_round_trip() {
        let v = vae();
        let img = Rng::new(1).uniform_tensor(&[3, 64, 64], -1.0, 1.0);
        let z = v.encode(&img).unwrap();
        assert_eq!(z.shape(), &[4, 8, 8]);
        let back = v.decode(&z).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(back.min_value() >= -1.0 && back.max_value() <= 1.0);
    }

    #[test]
    fn scaling_factor_applied() {
        let v = vae();
        let img = Rng::new(2).uniform_tensor(&[3, 64, 64], -1.0, 1.0);
        let raw = v.encode_raw(&img).unwrap();
        let scaled = v.encode(&img).unwrap();
        let ratio = scaled.std() / raw.std();
        assert!((ratio - 0.18215).abs() < 1e-5, "ratio {ratio}");
    }

    #[test]
    fn rejects_bad_dims() {
        let v = vae();
        assert!(v.encode(&Tensor::zeros(&[3, 60, 64])).is_err());
        assert!(v.encode(&Tensor::zeros(&[1, 64, 64])).is_err());
        assert!(VaeConfig {
            downsample_factor: 6,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
