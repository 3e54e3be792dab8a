//! Channel attention, spatial attention and their sequential composition.
//!
//! Parameter structs are generic over the parameter handle: they hold
//! [`Tensor`]s when stored in a model and [`Var`]s once bound to a tape.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Which attention masks a stage applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    None,
    ChannelOnly,
    SpatialOnly,
    Both,
}

impl AttentionMode {
    pub fn from_flags(channel: bool, spatial: bool) -> Self {
        match (channel, spatial) {
            (false, false) => AttentionMode::None,
            (true, false) => AttentionMode::ChannelOnly,
            (false, true) => AttentionMode::SpatialOnly,
            (true, true) => AttentionMode::Both,
        }
    }

    pub fn uses_channel(self) -> bool {
        matches!(self, AttentionMode::ChannelOnly | AttentionMode::Both)
    }

    pub fn uses_spatial(self) -> bool {
        matches!(self, AttentionMode::SpatialOnly | AttentionMode::Both)
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::None => "none",
            AttentionMode::ChannelOnly => "ca",
            AttentionMode::SpatialOnly => "sa",
            AttentionMode::Both => "both",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(AttentionMode::None),
            "ca" => Ok(AttentionMode::ChannelOnly),
            "sa" => Ok(AttentionMode::SpatialOnly),
            "both" => Ok(AttentionMode::Both),
            other => Err(Error::invalid(
                "attention mode",
                format!("unknown mode {other:?} (expected none, ca, sa or both)"),
            )),
        }
    }
}

/// Shared bottleneck MLP `C → C/r → C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttention<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

/// Convolution over the stacked channel-mean and channel-max maps.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttention<P> {
    pub weight: P,
    pub bias: P,
}

impl<T: Real> ChannelAttention<Tensor<T>> {
    /// All-zero parameters for `channels` channels and reduction `ratio`.
    pub fn zeros(channels: usize, ratio: usize) -> Result<Self> {
        let hidden = channel_hidden(channels, ratio)?;
        Ok(ChannelAttention {
            w1: Tensor::zeros(&[hidden, channels])?,
            b1: Tensor::zeros(&[hidden])?,
            w2: Tensor::zeros(&[channels, hidden])?,
            b2: Tensor::zeros(&[channels])?,
        })
    }

    /// Checks the shapes against each other and returns `C`.
    pub fn channels(&self) -> Result<usize> {
        let (w1, w2) = (self.w1.shape(), self.w2.shape());
        match (w1, w2) {
            ([h, c], [c2, h2]) if h == h2 && c == c2 => {
                if self.b1.shape() != [*h] || self.b2.shape() != [*c] {
                    return Err(Error::shape("channel_attention", w1, self.b1.shape()));
                }
                Ok(*c)
            }
            _ => Err(Error::shape("channel_attention", w1, w2)),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ChannelAttention<Var> {
        ChannelAttention {
            w1: tape.param(self.w1.clone()),
            b1: tape.param(self.b1.clone()),
            w2: tape.param(self.w2.clone()),
            b2: tape.param(self.b2.clone()),
        }
    }
}

impl<T: Real> SpatialAttention<Tensor<T>> {
    pub fn zeros(kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::invalid(
                "spatial_attention",
                format!("kernel must be odd, got {kernel}"),
            ));
        }
        Ok(SpatialAttention {
            weight: Tensor::zeros(&[1, 2, kernel, kernel])?,
            bias: Tensor::zeros(&[1])?,
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> SpatialAttention<Var> {
        SpatialAttention {
            weight: tape.param(self.weight.clone()),
            bias: tape.param(self.bias.clone()),
        }
    }
}

/// Hidden width `C / r` of the channel MLP; `r` must divide `C`.
pub fn channel_hidden(channels: usize, ratio: usize) -> Result<usize> {
    if ratio == 0 || channels % ratio != 0 {
        return Err(Error::invalid(
            "channel_attention",
            format!("reduction ratio {ratio} does not divide {channels} channels"),
        ));
    }
    Ok(channels / ratio)
}

/// Per-channel mask `sigmoid(MLP(avgpool F) + MLP(maxpool F))`, shape `N,C,1,1`.
pub fn channel_attention<T: Real>(
    tape: &mut Tape<T>,
    feature: Var,
    p: &ChannelAttention<Var>,
) -> Result<Var> {
    let [n, c, _, _] = tape.value(feature).dims4()?;
    let expected = tape.shape(p.w1)[1];
    if expected != c {
        return Err(Error::invalid(
            "channel_attention",
            format!("feature has {c} channels, parameters expect {expected}"),
        ));
    }
    let avg = tape.global_avgpool(feature)?;
    let avg = tape.reshape(avg, &[n, c])?;
    let max = tape.global_maxpool(feature)?;
    let max = tape.reshape(max, &[n, c])?;
    let a = shared_mlp(tape, avg, p)?;
    let m = shared_mlp(tape, max, p)?;
    let logits = tape.add(a, m)?;
    let mask = tape.sigmoid(logits);
    tape.reshape(mask, &[n, c, 1, 1])
}

fn shared_mlp<T: Real>(tape: &mut Tape<T>, x: Var, p: &ChannelAttention<Var>) -> Result<Var> {
    let hidden = tape.linear(x, p.w1, p.b1)?;
    let hidden = tape.relu(hidden);
    tape.linear(hidden, p.w2, p.b2)
}

/// Per-position mask from the channel-mean and channel-max maps, shape
/// `N,1,H,W`. The convolution is shape preserving.
pub fn spatial_attention<T: Real>(
    tape: &mut Tape<T>,
    feature: Var,
    p: &SpatialAttention<Var>,
) -> Result<Var> {
    let k = tape.shape(p.weight)[2];
    let mean = tape.channel_mean(feature)?;
    let max = tape.channel_max(feature)?;
    let stacked = tape.concat_channels(mean, max)?;
    let logits = tape.conv2d(stacked, p.weight, p.bias, 1, (k - 1) / 2)?;
    Ok(tape.sigmoid(logits))
}

/// Applies the masks selected by `mode`. With both, the channel mask is
/// applied first and the spatial mask is computed from the refined map.
pub fn apply_hybrid<T: Real>(
    tape: &mut Tape<T>,
    feature: Var,
    ca: &ChannelAttention<Var>,
    sa: &SpatialAttention<Var>,
    mode: AttentionMode,
) -> Result<Var> {
    let mut out = feature;
    if mode.uses_channel() {
        let mask = channel_attention(tape, out, ca)?;
        out = tape.mul_broadcast(out, mask)?;
    }
    if mode.uses_spatial() {
        let mask = spatial_attention(tape, out, sa)?;
        out = tape.mul_broadcast(out, mask)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        Tensor::from_f64(shape, &v).unwrap()
    }

    #[test]
    fn zero_params_give_half_masks() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(ramp(&[2, 8, 5, 5]));
        let ca = ChannelAttention::zeros(8, 4).unwrap().bind(&mut tape);
        let sa = SpatialAttention::zeros(7).unwrap().bind(&mut tape);
        let cm = channel_attention(&mut tape, f, &ca).unwrap();
        assert_eq!(tape.shape(cm), &[2, 8, 1, 1]);
        assert!(tape.value(cm).data().iter().all(|&v| v == 0.5));
        let sm = spatial_attention(&mut tape, f, &sa).unwrap();
        assert_eq!(tape.shape(sm), &[2, 1, 5, 5]);
        assert!(tape.value(sm).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn mode_none_returns_input_var() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(ramp(&[1, 8, 4, 4]));
        let ca = ChannelAttention::zeros(8, 8).unwrap().bind(&mut tape);
        let sa = SpatialAttention::zeros(3).unwrap().bind(&mut tape);
        let out = apply_hybrid(&mut tape, f, &ca, &sa, AttentionMode::None).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(ramp(&[1, 4, 4, 4]));
        let ca = ChannelAttention::zeros(8, 8).unwrap().bind(&mut tape);
        assert!(channel_attention(&mut tape, f, &ca).is_err());
    }

    #[test]
    fn ratio_must_divide_channels() {
        assert!(ChannelAttention::<Tensor<f32>>::zeros(12, 8).is_err());
        assert!(ChannelAttention::<Tensor<f32>>::zeros(16, 8).is_ok());
        assert!(SpatialAttention::<Tensor<f32>>::zeros(4).is_err());
    }

    #[test]
    fn mode_strings_round_trip() {
        for m in [
            AttentionMode::None,
            AttentionMode::ChannelOnly,
            AttentionMode::SpatialOnly,
            AttentionMode::Both,
        ] {
            assert_eq!(m.to_string().parse::<AttentionMode>().unwrap(), m);
        }
        assert!("cbam".parse::<AttentionMode>().is_err());
    }
}
