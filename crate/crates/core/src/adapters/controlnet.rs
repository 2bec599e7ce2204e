use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::layers::Conv2d;
use crate::models::{
    Exec, Init, LoadedParams, ModelKind, ParamSource, Params, SeededInit, UNet, UNetConfig, WeightFile,
};
use crate::models::unet::Encoder;
use crate::tensor::{self, Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlNetConfig {
    /// 1 for edge or depth maps.
    pub conditioning_channels: usize,
    /// Image-to-latent factor of the paired VAE.
    pub downsample_factor: usize,
    /// Width of the conditioning embedder's conv stack.
    pub embed_channels: usize,
    /// Architecture of the U-Net whose encoder the branch copies.
    pub unet: UNetConfig,
}

impl ControlNetConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.conditioning_channels == 0 || self.embed_channels == 0 {
            return Err(Error::InvalidArgument("controlnet channel counts must be positive".into()));
        }
        if !self.downsample_factor.is_power_of_two() || self.downsample_factor < 2 {
            return Err(Error::InvalidArgument(format!(
                "downsample_factor {} must be a power of two >= 2",
                self.downsample_factor
            )));
        }
        Ok(())
    }
}

/// Copy of the U-Net encoder + mid block fed by an embedded condition image;
/// each tap leaves through a 1x1 conv that starts at zero.
#[derive(Debug, Clone)]
pub struct ControlNetAdapter {
    pub name: String,
    pub config: ControlNetConfig,
    cond_in: Conv2d,
    cond_down: Vec<Conv2d>,
    cond_out: Conv2d,
    branch: Encoder,
    zero_convs: Vec<Conv2d>,
}

const BRANCH_PREFIX: &str = "branch.";

/// Branch tensors come from the base U-Net; everything else from the fallback.
struct CopySource<'a> {
    copied: IndexMap<String, Tensor>,
    fallback: &'a mut dyn ParamSource,
}

impl ParamSource for CopySource<'_> {
    fn take(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        match self.copied.shift_remove(name) {
            Some(t) if t.shape() == shape => Ok(t),
            Some(t) => Err(Error::Shape(format!(
                "copied tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            ))),
            None => self.fallback.take(name, shape, init),
        }
    }
}

impl ControlNetAdapter {
    fn build(name: &str, config: ControlNetConfig, src: &mut dyn ParamSource) -> Result<Self> {
        config.validate()?;
        let e = config.embed_channels;
        let cond_in = Conv2d::build(src, "cond_embed.conv_in", config.conditioning_channels, e, 3, 1, Init::Normal)?;
        let stages = config.downsample_factor.trailing_zeros() as usize;
        let cond_down = (0..stages)
            .map(|s| Conv2d::build(src, &format!("cond_embed.down.{s}"), e, e, 3, 2, Init::Normal))
            .collect::<Result<Vec<_>>>()?;
        let cond_out = Conv2d::build(src, "cond_embed.conv_out", e, config.unet.base_channels, 3, 1, Init::Normal)?;
        let branch = Encoder::build(&config.unet, src, BRANCH_PREFIX)?;
        let levels = config.unet.levels();
        let zero_convs = (0..config.unet.injection_points())
            .map(|i| {
                let c = config.unet.level_channels(i.min(levels - 1));
                Conv2d::build(src, &format!("zero_convs.{i}"), c, c, 1, 1, Init::Zeros)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.to_string(),
            config,
            cond_in,
            cond_down,
            cond_out,
            branch,
            zero_convs,
        })
    }

    /// Fresh adapter for `unet`: the branch starts as an exact copy of its
    /// encoder, the embedder is seeded, the zero convs are zero.
    pub fn from_unet(
        name: &str,
        unet: &UNet,
        conditioning_channels: usize,
        downsample_factor: usize,
        seed: u64,
    ) -> Result<Self> {
        let config = ControlNetConfig {
            conditioning_channels,
            downsample_factor,
            embed_channels: 16,
            unet: unet.config.clone(),
        };
        let mut copied = IndexMap::new();
        unet.encoder.visit(&mut |n, t| {
            copied.insert(format!("{BRANCH_PREFIX}{n}"), t.clone());
        });
        let mut seeded = SeededInit::component(seed, name);
        let mut src = CopySource {
            copied,
            fallback: &mut seeded,
        };
        Self::build(name, config, &mut src)
    }

    pub fn injection_points(&self) -> usize {
        self.zero_convs.len()
    }

    /// Stand-in for a trained adapter: gives every zero conv small random weights.
    pub fn randomize_zero_convs(&mut self, seed: u64, std: f32) {
        let root = Rng::new(seed).split_named(&self.name);
        for conv in &mut self.zero_convs {
            let mut r = root.split_named(&conv.name);
            conv.weight.data_mut().iter_mut().for_each(|v| *v = r.truncated_normal(std));
        }
    }

    /// Mutable access to one zero conv's weight (tests and fixtures).
    pub fn zero_conv_weight_mut(&mut self, index: usize) -> Option<&mut Tensor> {
        self.zero_convs.get_mut(index).map(|c| &mut c.weight)
    }

    pub fn check_compatible(&self, unet: &UNet) -> Result<()> {
        if self.config.unet != unet.config {
            return Err(Error::InvalidArgument(format!(
                "controlnet `{}` was built for a different U-Net architecture",
                self.name
            )));
        }
        Ok(())
    }

    fn embed_condition(&self, condition: &Tensor, latent_hw: (usize, usize), exec: &mut Exec) -> Result<Tensor> {
        let (c, h, w) = condition.dims3()?;
        let f = self.config.downsample_factor;
        if c != self.config.conditioning_channels || h != latent_hw.0 * f || w != latent_hw.1 * f {
            return Err(Error::Shape(format!(
                "condition {:?} must be [{}, {}, {}] for a {}x{} latent",
                condition.shape(),
                self.config.conditioning_channels,
                latent_hw.0 * f,
                latent_hw.1 * f,
                latent_hw.0,
                latent_hw.1
            )));
        }
        if condition.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("condition values must lie in [0, 1]".into()));
        }
        let mut h = self.cond_in.forward(condition, exec)?;
        tensor::silu_inplace(&mut h);
        for conv in &self.cond_down {
            h = conv.forward(&h, exec)?;
            tensor::silu_inplace(&mut h);
        }
        self.cond_out.forward(&h, exec)
    }

    /// Residuals for every U-Net injection point, in the order `UNet::forward` expects.
    pub fn forward(
        &self,
        latent: &Tensor,
        timestep: usize,
        text_emb: &Tensor,
        condition: &Tensor,
        exec: &mut Exec,
    ) -> Result<Vec<Tensor>> {
        let (_, lh, lw) = latent.dims3()?;
        let cond = self.embed_condition(condition, (lh, lw), exec)?;
        if timestep >= self.config.unet.train_timesteps {
            return Err(Error::InvalidArgument(format!("timestep {timestep} out of range")));
        }
        let temb = self.branch.time_activation(timestep, self.config.unet.base_channels, exec)?;
        let mut h = self.branch.conv_in.forward(latent, exec)?;
        tensor::add_inplace(&mut h, &cond)?;
        let (skips, mid) = self.branch.run_from(h, &temb, text_emb, exec)?;
        skips
            .iter()
            .chain(std::iter::once(&mid))
            .zip(&self.zero_convs)
            .map(|(t, z)| z.forward(t, exec))
            .collect()
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        WeightFile {
            kind: ModelKind::Controlnet,
            config: serde_json::to_value(&self.config)?,
            tensors: self.named_tensors(),
        }
        .save(manifest_path)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let wf = WeightFile::load(manifest_path)?;
        wf.expect_kind(ModelKind::Controlnet)?;
        let config: ControlNetConfig = serde_json::from_value(wf.config)?;
        let name = manifest_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("controlnet")
            .to_string();
        let mut src = LoadedParams::new(wf.tensors);
        let adapter = Self::build(&name, config, &mut src)?;
        src.finish()?;
        Ok(adapter)
    }
}

impl Params for ControlNetAdapter {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.cond_in.visit(f);
        self.cond_down.iter().for_each(|c| c.visit(f));
        self.cond_out.visit(f);
        self.branch.visit(f);
        self.zero_convs.iter().for_each(|c| c.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.cond_in.visit_mut(f);
        self.cond_down.iter_mut().for_each(|c| c.visit_mut(f));
        self.cond_out.visit_mut(f);
        self.branch.visit_mut(f);
        self.zero_convs.iter_mut().for_each(|c| c.visit_mut(f));
    }
}

/// Scales every residual by `s >= 0`. `s = 1` returns the input values unchanged.
pub fn conditioning_scale(residuals: Vec<Tensor>, s: f32) -> Result<Vec<Tensor>> {
    if !(s >= 0.0 && s.is_finite()) {
        return Err(Error::InvalidArgument(format!("conditioning scale must be >= 0, got {s}")));
    }
    if s == 1.0 {
        return Ok(residuals);
    }
    Ok(residuals.into_iter().map(|r| tensor::scale(&r, s)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BundleConfig, ModelBundle};

    fn setup() -> (ModelBundle, ControlNetAdapter) {
        let b = ModelBundle::init_seeded("toy", &BundleConfig::default(), 42).unwrap();
        let cn = ControlNetAdapter::from_unet("canny", &b.unet, 1, 8, 7).unwrap();
        (b, cn)
    }

    fn inputs() -> (Tensor, Tensor, Tensor) {
        let mut rng = Rng::new(3);
        (
            rng.gaussian_tensor(&[4, 8, 8]),
            rng.gaussian_tensor(&[32, 64]),
            rng.uniform_tensor(&[1, 64, 64], 0.0, 1.0),
        )
    }

    #[test]
    fn fresh_adapter_emits_zero_residuals() {
        let (b, cn) = setup();
        let (x, ctx, cond) = inputs();
        let res = cn.forward(&x, 400, &ctx, &cond, &mut Exec::default()).unwrap();
        assert_eq!(res.len(), b.unet.injection_points());
        assert!(res.iter().all(|r| r.data().iter().all(|&v| v == 0.0)));
        let shapes: Vec<_> = res.iter().map(|r| r.shape().to_vec()).collect();
        assert_eq!(shapes, [vec![32, 8, 8], vec![64, 4, 4], vec![64, 4, 4]]);
    }

    #[test]
    fn perturbed_zero_conv_changes_residuals() {
        let (_, mut cn) = setup();
        let (x, ctx, cond) = inputs();
        cn.zero_conv_weight_mut(1).unwrap().data_mut()[0] = 0.5;
        let res = cn.forward(&x, 400, &ctx, &cond, &mut Exec::default()).unwrap();
        assert!(res[1].l2_norm() > 0.0);
    }

    #[test]
    fn branch_is_an_exact_copy() {
        let (b, cn) = setup();
        let base = b.unet.named_tensors();
        let mut n = 0;
        cn.visit(&mut |name, t| {
            if let Some(orig) = name.strip_prefix(BRANCH_PREFIX) {
                assert!(t.bit_eq(&base[orig]), "{name}");
                n += 1;
            }
        });
        assert!(n > 0);
    }

    #[test]
    fn condition_shape_checked() {
        let (_, cn) = setup();
        let (x, ctx, _) = inputs();
        assert!(cn.forward(&x, 1, &ctx, &Tensor::zeros(&[1, 32, 32]), &mut Exec::default()).is_err());
        assert!(cn.forward(&x, 1, &ctx, &Tensor::zeros(&[3, 64, 64]), &mut Exec::default()).is_err());
        assert!(cn.forward(&x, 1, &ctx, &Tensor::full(&[1, 64, 64], 2.0), &mut Exec::default()).is_err());
    }

    #[test]
    fn scale_contract() {
        let r = vec![Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        assert_eq!(conditioning_scale(r.clone(), 2.0).unwrap()[0].data(), &[2.0, -4.0, 1.0]);
        assert!(conditioning_scale(r.clone(), 1.0).unwrap()[0].bit_eq(&r[0]));
        assert!(conditioning_scale(r.clone(), 0.0).unwrap()[0].data().iter().all(|&v| v == 0.0));
        assert!(conditioning_scale(r, -1.0).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (_, mut cn) = setup();
        cn.randomize_zero_convs(5, 0.02);
        let path = dir.path().join("canny.json");
        cn.save(&path).unwrap();
        let back = ControlNetAdapter::load(&path).unwrap();
        assert_eq!(back.name, "canny");
        let (a, b) = (cn.named_tensors(), back.named_tensors());
        assert!(a.iter().all(|(k, v)| v.bit_eq(&b[k])));
        assert_eq!(a.len(), b.len());
    }
}
