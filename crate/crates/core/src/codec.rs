//! Convolutional autoencoder between RGB images and spatial latents.
//!
//! The encoder downsamples by a total factor of 4 (two stride-2 stages)
//! into a 4-channel latent map; the decoder mirrors it with nearest
//! upsampling and ends in a sigmoid, so every decoded pixel lies in
//! [0, 1] by construction. Trained with plain reconstruction MSE and then
//! frozen before the denoiser ever sees a latent.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, GroupNormLayer, Params};
use crate::tensor::Tensor;

pub const IMG_CHANNELS: usize = 3;
pub const IMG_SIZE: usize = 32;
pub const LATENT_CHANNELS: usize = 4;
pub const LATENT_SIZE: usize = IMG_SIZE / 4;
/// Total spatial downsampling factor between image and latent.
pub const DOWN_FACTOR: usize = 4;

pub struct LatentCodec {
    e1: Conv2dLayer,
    en1: GroupNormLayer,
    e2: Conv2dLayer,
    en2: GroupNormLayer,
    e3: Conv2dLayer,
    en3: GroupNormLayer,
    e4: Conv2dLayer,
    d1: Conv2dLayer,
    dn1: GroupNormLayer,
    d2: Conv2dLayer,
    dn2: GroupNormLayer,
    d3: Conv2dLayer,
    dn3: GroupNormLayer,
    d4: Conv2dLayer,
}

impl LatentCodec {
    pub fn new(rng: &mut ChaCha8Rng, trainable: bool) -> LatentCodec {
        LatentCodec {
            e1: Conv2dLayer::new(IMG_CHANNELS, 16, 3, 1, 1, rng, trainable),
            en1: GroupNormLayer::new(16, 4, trainable),
            e2: Conv2dLayer::new(16, 32, 3, 2, 1, rng, trainable),
            en2: GroupNormLayer::new(32, 8, trainable),
            e3: Conv2dLayer::new(32, 32, 3, 2, 1, rng, trainable),
            en3: GroupNormLayer::new(32, 8, trainable),
            e4: Conv2dLayer::new(32, LATENT_CHANNELS, 3, 1, 1, rng, trainable),
            d1: Conv2dLayer::new(LATENT_CHANNELS, 32, 3, 1, 1, rng, trainable),
            dn1: GroupNormLayer::new(32, 8, trainable),
            d2: Conv2dLayer::new(32, 16, 3, 1, 1, rng, trainable),
            dn2: GroupNormLayer::new(16, 4, trainable),
            d3: Conv2dLayer::new(16, 16, 3, 1, 1, rng, trainable),
            dn3: GroupNormLayer::new(16, 4, trainable),
            d4: Conv2dLayer::new(16, IMG_CHANNELS, 3, 1, 1, rng, trainable),
        }
    }

    /// [B, 3, H, W] image (H, W divisible by 4) -> [B, 4, H/4, W/4] latent.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape();
        if s.len() != 4 || s[1] != IMG_CHANNELS {
            return Err(Error::ShapeMismatch {
                op: "codec.encode",
                detail: format!("{s:?} vs [B, {IMG_CHANNELS}, H, W]"),
            });
        }
        if s[2] % DOWN_FACTOR != 0 || s[3] % DOWN_FACTOR != 0 {
            return Err(Error::invalid(format!(
                "codec.encode: dims {}x{} not divisible by {DOWN_FACTOR}",
                s[2], s[3]
            )));
        }
        let x = self.en1.forward(&self.e1.forward(image)?)?.silu()?;
        let x = self.en2.forward(&self.e2.forward(&x)?)?.silu()?;
        let x = self.en3.forward(&self.e3.forward(&x)?)?.silu()?;
        self.e4.forward(&x)
    }

    /// [B, 4, h, w] latent -> [B, 3, 4h, 4w] image with pixels in [0, 1].
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let s = latent.shape();
        if s.len() != 4 || s[1] != LATENT_CHANNELS {
            return Err(Error::ShapeMismatch {
                op: "codec.decode",
                detail: format!("{s:?} vs [B, {LATENT_CHANNELS}, h, w]"),
            });
        }
        let x = self.dn1.forward(&self.d1.forward(latent)?)?.silu()?;
        let x = x.upsample_nearest2x()?;
        let x = self.dn2.forward(&self.d2.forward(&x)?)?.silu()?;
        let x = x.upsample_nearest2x()?;
        let x = self.dn3.forward(&self.d3.forward(&x)?)?.silu()?;
        self.d4.forward(&x)?.sigmoid()
    }
}

impl Params for LatentCodec {
    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.e1.named_params(&format!("{prefix}.e1"), out);
        self.en1.named_params(&format!("{prefix}.en1"), out);
        self.e2.named_params(&format!("{prefix}.e2"), out);
        self.en2.named_params(&format!("{prefix}.en2"), out);
        self.e3.named_params(&format!("{prefix}.e3"), out);
        self.en3.named_params(&format!("{prefix}.en3"), out);
        self.e4.named_params(&format!("{prefix}.e4"), out);
        self.d1.named_params(&format!("{prefix}.d1"), out);
        self.dn1.named_params(&format!("{prefix}.dn1"), out);
        self.d2.named_params(&format!("{prefix}.d2"), out);
        self.dn2.named_params(&format!("{prefix}.dn2"), out);
        self.d3.named_params(&format!("{prefix}.d3"), out);
        self.dn3.named_params(&format!("{prefix}.dn3"), out);
        self.d4.named_params(&format!("{prefix}.d4"), out);
    }
}

/// Peak signal-to-noise ratio in dB between two same-shaped image tensors
/// on the [0, 1] scale, accumulated in f64.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let av = a.to_vec();
    let bv = b.to_vec();
    let mse: f64 = av
        .iter()
        .zip(&bv)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / av.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn shapes_round_trip() {
        let mut r = rng::stream(31, "codec", 0);
        let codec = LatentCodec::new(&mut r, false);
        let img = Tensor::rand_uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut r);
        let z = codec.encode(&img).unwrap();
        assert_eq!(z.shape(), &[2, 4, 8, 8]);
        let back = codec.decode(&z).unwrap();
        assert_eq!(back.shape(), &[2, 3, 32, 32]);
    }

    #[test]
    fn decode_output_always_in_unit_range() {
        let mut r = rng::stream(31, "codec_range", 0);
        let codec = LatentCodec::new(&mut r, false);
        for z in [
            Tensor::zeros(&[1, 4, 8, 8]),
            Tensor::randn(&[1, 4, 8, 8], &mut r).mul_scalar(10.0).unwrap(),
        ] {
            let img = codec.decode(&z).unwrap().to_vec();
            assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
        }
    }

    #[test]
    fn encode_rejects_bad_dims() {
        let mut r = rng::stream(31, "codec_err", 0);
        let codec = LatentCodec::new(&mut r, false);
        assert!(codec.encode(&Tensor::zeros(&[1, 3, 30, 32])).is_err());
        assert!(codec.encode(&Tensor::zeros(&[1, 4, 32, 32])).is_err());
        assert!(codec.decode(&Tensor::zeros(&[1, 3, 8, 8])).is_err());
    }

    #[test]
    fn codec_is_deterministic() {
        let mut r = rng::stream(31, "codec_det", 0);
        let codec = LatentCodec::new(&mut r, false);
        let img = Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut r);
        let a = codec.encode(&img).unwrap().to_vec();
        let b = codec.encode(&img).unwrap().to_vec();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let mut r = rng::stream(31, "psnr", 0);
        let img = Tensor::rand_uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut r);
        assert!(psnr(&img, &img).unwrap().is_infinite());
        let noisy = img.add_scalar(0.1).unwrap();
        let db = psnr(&img, &noisy).unwrap();
        assert!((db - 20.0).abs() < 1e-4, "uniform 0.1 offset is exactly 20 dB, got {db}");
    }
}
