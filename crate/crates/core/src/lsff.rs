//! Gated fusion of an encoder skip feature with the decoder feature at the
//! same resolution, plus the plain concatenation fallback.

use irdet_tensor::{channel_max, channel_mean, mul_channel_broadcast, ConvGeometry, Real, Var};

use crate::error::{invalid, Result};
use crate::params::{Conv2d, ParamBuilder, Session};
use crate::registry::SkipFusion;

/// Per-pixel mean and max across channels, each `N×1×H×W`.
pub fn channel_pool<'t, T: Real>(u: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    Ok((channel_mean(u)?, channel_max(u)?))
}

#[derive(Clone, Debug)]
pub struct LsffBlock {
    /// `2 → n_maps` spatial attention conv.
    pub attn: Conv2d,
    pub n_maps: usize,
    pub kernel: usize,
}

impl LsffBlock {
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(invalid("LsffBlock::build", format!("kernel {kernel} is not odd")));
        }
        let mut b = b.scope("lsff");
        let attn = b.conv("attn", 2, 1, kernel, ConvGeometry::same(kernel, 1), true)?;
        Ok(Self {
            attn,
            n_maps: 1,
            kernel,
        })
    }

    /// Sigmoid gate `N×1×H×W` given to the encoder feature.
    pub fn gate<'t, T: Real>(&self, s: &Session<'t, T>, enc: Var<'t, T>, dec: Var<'t, T>) -> Result<Var<'t, T>> {
        if enc.shape() != dec.shape() {
            return Err(invalid(
                "lsff",
                format!("encoder {:?} and decoder {:?} differ", enc.shape(), dec.shape()),
            ));
        }
        let u = Var::concat(&[enc, dec], 1)?;
        let (avg, max) = channel_pool(u)?;
        let logits = self.attn.forward(s, Var::concat(&[avg, max], 1)?)?;
        Ok(logits.sigmoid())
    }

    /// `enc ⊙ σ + dec ⊙ (1 − σ)`, evaluated as `dec + (enc − dec) ⊙ σ` so
    /// that equal inputs come back unchanged.
    pub fn forward<'t, T: Real>(&self, s: &Session<'t, T>, enc: Var<'t, T>, dec: Var<'t, T>) -> Result<Var<'t, T>> {
        let gate = self.gate(s, enc, dec)?;
        Ok(dec.add(mul_channel_broadcast(enc.sub(dec)?, gate)?)?)
    }
}

impl<T: Real> SkipFusion<T> for LsffBlock {
    fn fuse<'t>(&self, s: &Session<'t, T>, enc: Var<'t, T>, dec: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward(s, enc, dec)
    }
}

/// Concatenation followed by a 1×1 conv back to the stage width.
#[derive(Clone, Debug)]
pub struct ConcatFusion {
    pub merge: Conv2d,
}

impl ConcatFusion {
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        let mut b = b.scope("concat");
        Ok(Self {
            merge: b.conv("merge", 2 * channels, channels, 1, ConvGeometry::default(), true)?,
        })
    }
}

impl<T: Real> SkipFusion<T> for ConcatFusion {
    fn fuse<'t>(&self, s: &Session<'t, T>, enc: Var<'t, T>, dec: Var<'t, T>) -> Result<Var<'t, T>> {
        self.merge.forward(s, Var::concat(&[enc, dec], 1)?)
    }
}
