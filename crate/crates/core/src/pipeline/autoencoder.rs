//! Residual autoencoder `f_AE`: conv, 2x average pool, conv bottleneck, 2x upsample, conv.

use serde::{Deserialize, Serialize};

use made_tensor::{Checkpoint, Eager, Ops, ParamSet, Tensor};

use crate::error::{CoreError, Result};

use super::detector::{check_manifest, conv_layer, init_params};

pub const AUTOENCODER_KIND: &str = "made-autoencoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderArch {
    pub height: usize,
    pub width: usize,
    /// Residual channels, equal to the detector's `C_f`.
    pub channels: usize,
    pub hidden_channels: usize,
    pub bottleneck_channels: usize,
}

impl AutoencoderArch {
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let (c, a, b) = (self.channels, self.hidden_channels, self.bottleneck_channels);
        let mut m = vec![
            ("ae.conv1.w".to_string(), vec![3, 3, c, a]),
            ("ae.conv1.b".to_string(), vec![a]),
            ("ae.conv2.w".to_string(), vec![3, 3, a, b]),
            ("ae.conv2.b".to_string(), vec![b]),
            ("ae.conv3.w".to_string(), vec![3, 3, b, c]),
            ("ae.conv3.b".to_string(), vec![c]),
        ];
        m.sort();
        m
    }

    fn validate(&self) -> Result<()> {
        if self.height % 2 != 0 || self.width % 2 != 0 || self.height == 0 || self.width == 0 {
            return Err(CoreError::Invalid("autoencoder needs even, positive spatial size".into()));
        }
        if self.channels == 0 || self.hidden_channels == 0 || self.bottleneck_channels == 0 {
            return Err(CoreError::Invalid("autoencoder channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub arch: AutoencoderArch,
    pub params: ParamSet,
}

impl Autoencoder {
    pub fn new(arch: AutoencoderArch, params: ParamSet) -> Result<Self> {
        arch.validate()?;
        check_manifest(&params, &arch.manifest())?;
        Ok(Self { arch, params })
    }

    pub fn init(arch: AutoencoderArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let params = init_params(&arch.manifest(), seed, "autoencoder-init");
        Self::new(arch, params)
    }

    pub fn forward_with<O: Ops>(&self, ops: &mut O, p: &ParamSet, r: &Tensor) -> Result<Tensor> {
        let want = [self.arch.height, self.arch.width, self.arch.channels];
        if r.shape() != want {
            return Err(CoreError::Invalid(format!(
                "residual shape {:?} does not match autoencoder input {want:?}",
                r.shape()
            )));
        }
        let h = conv_layer(ops, p, "ae.conv1", r)?;
        let h = ops.relu(&h)?;
        let h = ops.avg_pool2(&h)?;
        let h = conv_layer(ops, p, "ae.conv2", &h)?;
        let h = ops.relu(&h)?;
        let h = ops.upsample2(&h)?;
        conv_layer(ops, p, "ae.conv3", &h)
    }

    pub fn forward(&self, r: &Tensor) -> Result<Tensor> {
        self.forward_with(&mut Eager, &self.params, r)
    }

    /// `L_r`: mean over elements of `(r - f_AE(r))^2`.
    pub fn recon_loss(&self, r: &Tensor) -> Result<f64> {
        let out = self.forward(r)?;
        Ok(Eager.mean_sq(r, &out)?.data()[0])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "arch": self.arch,
            "manifest": self.arch.manifest(),
        });
        Checkpoint::new(AUTOENCODER_KIND, meta, self.params.clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != AUTOENCODER_KIND {
            return Err(CoreError::Invalid(format!("checkpoint kind {} is not an autoencoder", ckpt.kind)));
        }
        let arch: AutoencoderArch = serde_json::from_value(ckpt.metadata["arch"].clone())
            .map_err(|e| CoreError::Invalid(format!("autoencoder arch: {e}")))?;
        Self::new(arch, ckpt.tensors.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> AutoencoderArch {
        AutoencoderArch {
            height: 8,
            width: 6,
            channels: 3,
            hidden_channels: 4,
            bottleneck_channels: 2,
        }
    }

    #[test]
    fn shape_preserved_and_finite_on_zero() {
        let ae = Autoencoder::init(arch(), 1).unwrap();
        let out = ae.forward(&Tensor::zeros(&[8, 6, 3])).unwrap();
        assert_eq!(out.shape(), &[8, 6, 3]);
        assert!(out.data().iter().all(|v| v.is_finite()));
        assert!(ae.recon_loss(&Tensor::zeros(&[8, 6, 3])).unwrap() >= 0.0);
    }

    #[test]
    fn odd_size_rejected() {
        let mut a = arch();
        a.height = 7;
        assert!(Autoencoder::init(a, 1).is_err());
    }

    #[test]
    fn zero_weights_reconstruct_constant_bias() {
        let mut ae = Autoencoder::init(arch(), 2).unwrap();
        for (k, v) in ae.params.iter_mut() {
            *v = if k == "ae.conv3.b" {
                Tensor::full(v.shape(), 1.0)
            } else {
                Tensor::zeros(v.shape())
            };
        }
        let r = Tensor::full(&[8, 6, 3], 1.0);
        assert_eq!(ae.recon_loss(&r).unwrap(), 0.0);
        assert_eq!(ae.recon_loss(&Tensor::zeros(&[8, 6, 3])).unwrap(), 1.0);
    }
}
