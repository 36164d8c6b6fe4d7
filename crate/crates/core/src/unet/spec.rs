use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One convolution (or transpose convolution) layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvSpec {
    pub const fn new(cin: usize, cout: usize, k: usize) -> Self {
        Self { cin, cout, k }
    }

    /// Weights plus bias.
    pub fn param_count(&self) -> usize {
        self.cin * self.cout * self.k + self.cout
    }
}

/// Additive long skip: the pre-pool activation of encoder block `encoder`
/// is added to the post-upsample input of decoder block `decoder`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipSpec {
    pub encoder: usize,
    pub decoder: usize,
}

/// Architecture of the U-net.
///
/// Encoder blocks are conv → BN → ReLU → avg-pool; the bridge is
/// conv → BN → ReLU → tconv → BN → ReLU; decoder blocks are
/// upsample → (+ skip) → tconv → BN → ReLU, with the ReLU of the last
/// block controlled by `final_relu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: Vec<ConvSpec>,
    pub bridge_conv: ConvSpec,
    pub bridge_tconv: ConvSpec,
    pub decoder: Vec<ConvSpec>,
    pub skips: Vec<SkipSpec>,
    pub resample_factor: usize,
    pub final_relu: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

pub const ALLOWED_KERNELS: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            encoder: vec![
                ConvSpec::new(1, 16, 1),
                ConvSpec::new(16, 32, 2),
                ConvSpec::new(32, 64, 4),
                ConvSpec::new(64, 128, 8),
            ],
            bridge_conv: ConvSpec::new(128, 256, 16),
            bridge_tconv: ConvSpec::new(256, 128, 16),
            decoder: vec![
                ConvSpec::new(128, 64, 8),
                ConvSpec::new(64, 32, 16),
                ConvSpec::new(32, 16, 32),
                ConvSpec::new(16, 1, 64),
            ],
            skips: vec![
                SkipSpec { encoder: 3, decoder: 0 },
                SkipSpec { encoder: 2, decoder: 1 },
                SkipSpec { encoder: 1, decoder: 2 },
                SkipSpec { encoder: 0, decoder: 3 },
            ],
            resample_factor: 2,
            final_relu: false,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelSpec {
    /// Every conv layer in execution order.
    pub fn layers(&self) -> Vec<ConvSpec> {
        let mut v = self.encoder.clone();
        v.push(self.bridge_conv);
        v.push(self.bridge_tconv);
        v.extend(self.decoder.iter().copied());
        v
    }

    /// Channel count after the input and after every layer.
    pub fn channel_trace(&self) -> Vec<usize> {
        let mut t = vec![self.encoder[0].cin];
        t.extend(self.layers().iter().map(|l| l.cout));
        t
    }

    /// Input length must be a multiple of this.
    pub fn length_multiple(&self) -> usize {
        self.resample_factor.pow(self.encoder.len() as u32)
    }

    /// Scalar parameter count: conv weights and biases plus BN γ, β.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count() + 2 * l.cout).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.encoder.is_empty() || self.decoder.len() != self.encoder.len() {
            return bad("encoder and decoder need the same, non-zero number of blocks".into());
        }
        if self.resample_factor != 2 {
            return bad("only factor-2 pooling and upsampling are supported".into());
        }
        let layers = self.layers();
        for w in layers.windows(2) {
            if w[0].cout != w[1].cin {
                return bad(format!("channel mismatch between layers {:?} and {:?}", w[0], w[1]));
            }
        }
        if let Some(l) = layers.iter().find(|l| !ALLOWED_KERNELS.contains(&l.k)) {
            return bad(format!("kernel size {} not in {ALLOWED_KERNELS:?}", l.k));
        }
        let depth = self.encoder.len();
        for s in &self.skips {
            if s.encoder >= depth || s.decoder >= depth {
                return bad(format!("skip {s:?} out of range"));
            }
            // decoder block d runs at the resolution of encoder block depth-1-d
            if s.encoder != depth - 1 - s.decoder {
                return bad(format!("skip {s:?} joins tensors of different lengths"));
            }
            let enc_channels = self.encoder[s.encoder].cout;
            if enc_channels != self.decoder[s.decoder].cin {
                return bad(format!("skip {s:?} joins {enc_channels} and {} channels", self.decoder[s.decoder].cin));
            }
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0 && self.bn_eps > 0.0) {
            return bad("batch norm momentum must be in (0, 1] and eps positive".into());
        }
        Ok(())
    }

    pub fn canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("spec serialises")
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_json()).into()
    }

    /// Receptive-field half width of the network in input samples.
    pub fn receptive_radius(&self) -> usize {
        let mut radius = 0usize;
        let mut stride = 1usize;
        for l in &self.encoder {
            radius += (l.k / 2) * stride;
            stride *= self.resample_factor;
            radius += stride;
        }
        radius += (self.bridge_conv.k / 2 + self.bridge_tconv.k / 2) * stride;
        for l in &self.decoder {
            stride /= self.resample_factor;
            radius += stride + (l.k / 2) * stride;
        }
        radius
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid() {
        let s = ModelSpec::default();
        s.validate().unwrap();
        assert_eq!(s.channel_trace(), vec![1, 16, 32, 64, 128, 256, 128, 64, 32, 16, 1]);
        assert_eq!(s.length_multiple(), 16);
        let mut kernels: Vec<usize> = s.layers().iter().map(|l| l.k).collect();
        kernels.sort_unstable();
        kernels.dedup();
        assert_eq!(kernels, ALLOWED_KERNELS.to_vec());
    }

    #[test]
    fn invalid_specs() {
        let mut s = ModelSpec::default();
        s.decoder[1].k = 3;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::default();
        s.skips[0] = SkipSpec { encoder: 0, decoder: 0 };
        assert!(s.validate().is_err());
        let mut s = ModelSpec::default();
        s.bridge_tconv.cout = 64;
        assert!(s.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ModelSpec::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.final_relu = true;
        assert_ne!(a.hash(), b.hash());
    }
}
