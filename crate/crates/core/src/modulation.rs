//! Learnable modulation of SR-unit features by a guidance map:
//! `F_out = g ⊙ LN(F) + b`, with `g` and `b` predicted from the map by a
//! shared conv + ReLU followed by two conv heads.

use candle_core::Tensor;

use crate::error::{bail_shape, Result};
use crate::nn::{self, Conv2d};
use crate::params::{Init, ParamStore};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Trunk {
    Shared(Conv2d),
    Separate { gain: Conv2d, bias: Conv2d },
}

#[derive(Debug, Clone)]
pub struct ModulationParams {
    trunk: Trunk,
    pub gain_head: Conv2d,
    pub bias_head: Conv2d,
    pub eps: f64,
}

impl ModulationParams {
    /// Fresh modulator: the gain head starts at weights 0 / bias 1 and the
    /// bias head at all zeros, so the initial output is exactly `LN(F)`.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        map_channels: usize,
        feature_channels: usize,
        kernel: usize,
        shared_trunk: bool,
    ) -> Result<Self> {
        let hidden = feature_channels;
        let trunk = if shared_trunk {
            Trunk::Shared(Conv2d::new(ps, &format!("{name}.shared"), map_channels, hidden, kernel, true)?)
        } else {
            Trunk::Separate {
                gain: Conv2d::new(ps, &format!("{name}.gain_trunk"), map_channels, hidden, kernel, true)?,
                bias: Conv2d::new(ps, &format!("{name}.bias_trunk"), map_channels, hidden, kernel, true)?,
            }
        };
        let gain_head = Conv2d::with_init(
            ps,
            &format!("{name}.gain"),
            hidden,
            feature_channels,
            kernel,
            Init::Zeros,
            Some(Init::Const(1.0)),
        )?;
        let bias_head = Conv2d::with_init(
            ps,
            &format!("{name}.bias"),
            hidden,
            feature_channels,
            kernel,
            Init::Zeros,
            Some(Init::Zeros),
        )?;
        Ok(Self {
            trunk,
            gain_head,
            bias_head,
            eps: LN_EPS,
        })
    }

    pub fn map_channels(&self) -> usize {
        let conv = match &self.trunk {
            Trunk::Shared(c) => c,
            Trunk::Separate { gain, .. } => gain,
        };
        conv.weight.dim(1).unwrap_or(0)
    }

    /// Spatial gain and bias fields predicted from `map`.
    pub fn fields(&self, map: &Tensor) -> Result<(Tensor, Tensor)> {
        match &self.trunk {
            Trunk::Shared(conv) => {
                let h = nn::relu(&conv.forward(map)?)?;
                Ok((self.gain_head.forward(&h)?, self.bias_head.forward(&h)?))
            }
            Trunk::Separate { gain, bias } => Ok((
                self.gain_head.forward(&nn::relu(&gain.forward(map)?)?)?,
                self.bias_head.forward(&nn::relu(&bias.forward(map)?)?)?,
            )),
        }
    }

    pub fn forward(&self, feature: &Tensor, map: &Tensor) -> Result<Tensor> {
        let (fb, fc, fh, fw) = feature.dims4()?;
        let (mb, _, mh, mw) = map.dims4()?;
        if (fb, fh, fw) != (mb, mh, mw) {
            bail_shape!(
                "modulation feature {:?} and guidance map {:?} differ in batch or spatial size",
                feature.dims(),
                map.dims()
            );
        }
        if fc != self.gain_head.out_channels() {
            bail_shape!(
                "modulation expects {} feature channels, got {:?}",
                self.gain_head.out_channels(),
                feature.dims()
            );
        }
        let (g, b) = self.fields(map)?;
        let normed = nn::channel_layer_norm(feature, self.eps)?;
        Ok((g * normed)?.add(&b)?)
    }
}

pub fn modulate(feature: &Tensor, map: &Tensor, params: &ModulationParams) -> Result<Tensor> {
    params.forward(feature, map)
}
