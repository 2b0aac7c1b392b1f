use std::fmt;

use crate::conv::{conv_output_size, conv_transpose_output_size};
use crate::error::{Result, SvaeError};
use crate::latent::{param_count, VariantKind};

/// One convolution (encoder) or transposed-convolution (decoder) stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel,
            stride,
            padding,
        }
    }
}

impl fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}:{}",
            self.out_channels, self.kernel, self.stride, self.padding
        )
    }
}

/// Dense projection of the vector latent onto a `channels×height×width` map.
/// Only the vector-latent decoder has one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Projection {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: VariantKind,
    /// Feature-map side length.
    pub d: usize,
    /// Number of latent feature maps.
    pub n_maps: usize,
    /// Latent dimension C. Equals `d²N` for the naive spatial variant.
    pub latent_dim: usize,
    /// (channels, height, width)
    pub image_shape: [usize; 3],
    /// σ of the Gaussian likelihood `p(x|z) = N(x; f(z), σ²I)`.
    pub likelihood_sigma: f64,
    pub encoder: Vec<ConvSpec>,
    pub decoder_projection: Option<Projection>,
    pub decoder: Vec<ConvSpec>,
}

/// Kernel for a stride-2, unpadded transposed conv taking `d` to `target`.
fn first_stage_kernel(d: usize, target: usize) -> Result<(usize, usize)> {
    if d == 1 {
        return Ok((target, 1));
    }
    let grown = 2 * (d - 1);
    if d == 0 || grown >= target {
        return Err(SvaeError::contract(format!(
            "preset decoders support 1 <= d <= {} for this image size (got d={d})",
            target.div_ceil(2)
        )));
    }
    Ok((target - grown, 2))
}

impl ModelConfig {
    /// Desk-scale MNIST (1×28×28) networks.
    ///
    /// Encoder: three stride-2 3×3 convolutions (32/64/128 channels). The
    /// spatial decoders take the `N×d×d` latent through three transposed
    /// convolutions (`d -> 7 -> 14 -> 28`); the vector decoder first projects
    /// `C -> 20×4×4` and then runs `4 -> 7 -> 14 -> 28`.
    pub fn mnist(variant: VariantKind, d: usize, n_maps: usize, latent_dim: usize) -> Result<Self> {
        let encoder = vec![
            ConvSpec::new(32, 3, 2, 1),
            ConvSpec::new(64, 3, 2, 1),
            ConvSpec::new(128, 3, 2, 1),
        ];
        let tail = [ConvSpec::new(32, 4, 2, 1), ConvSpec::new(1, 4, 2, 1)];
        let (decoder_projection, first) = if variant.is_spatial() {
            let (k, s) = first_stage_kernel(d, 7)?;
            (None, ConvSpec::new(64, k, s, 0))
        } else {
            let proj = Projection {
                channels: 20,
                height: 4,
                width: 4,
            };
            (Some(proj), ConvSpec::new(64, 3, 2, 1))
        };
        let mut decoder = vec![first];
        decoder.extend(tail);
        Self::assemble(
            variant,
            d,
            n_maps,
            latent_dim,
            [1, 28, 28],
            encoder,
            decoder_projection,
            decoder,
        )
    }

    /// Desk-scale CIFAR-10 (3×32×32) networks: four encoder convolutions,
    /// three transposed-conv stages (`d -> 8 -> 16 -> 32`, or `4 -> 8 -> ..`
    /// after a `C -> 24×4×4` projection).
    pub fn cifar10(variant: VariantKind, d: usize, n_maps: usize, latent_dim: usize) -> Result<Self> {
        let encoder = vec![
            ConvSpec::new(32, 3, 2, 1),
            ConvSpec::new(64, 3, 2, 1),
            ConvSpec::new(128, 3, 2, 1),
            ConvSpec::new(128, 3, 1, 1),
        ];
        let tail = [ConvSpec::new(32, 4, 2, 1), ConvSpec::new(3, 4, 2, 1)];
        let (decoder_projection, first) = if variant.is_spatial() {
            let (k, s) = first_stage_kernel(d, 8)?;
            (None, ConvSpec::new(64, k, s, 0))
        } else {
            let proj = Projection {
                channels: 24,
                height: 4,
                width: 4,
            };
            (Some(proj), ConvSpec::new(64, 4, 2, 1))
        };
        let mut decoder = vec![first];
        decoder.extend(tail);
        Self::assemble(
            variant,
            d,
            n_maps,
            latent_dim,
            [3, 32, 32],
            encoder,
            decoder_projection,
            decoder,
        )
    }

    /// 3×64×64 networks for image folders (face-crop analog).
    pub fn folder64(variant: VariantKind, d: usize, n_maps: usize, latent_dim: usize) -> Result<Self> {
        let encoder = vec![
            ConvSpec::new(32, 4, 2, 1),
            ConvSpec::new(64, 4, 2, 1),
            ConvSpec::new(128, 4, 2, 1),
        ];
        let tail = [
            ConvSpec::new(64, 4, 2, 1),
            ConvSpec::new(32, 4, 2, 1),
            ConvSpec::new(3, 4, 2, 1),
        ];
        let (decoder_projection, first) = if variant.is_spatial() {
            let (k, s) = first_stage_kernel(d, 8)?;
            (None, ConvSpec::new(128, k, s, 0))
        } else {
            let proj = Projection {
                channels: 24,
                height: 4,
                width: 4,
            };
            (Some(proj), ConvSpec::new(128, 4, 2, 1))
        };
        let mut decoder = vec![first];
        decoder.extend(tail);
        Self::assemble(
            variant,
            d,
            n_maps,
            latent_dim,
            [3, 64, 64],
            encoder,
            decoder_projection,
            decoder,
        )
    }

    /// A very small 1×4×4 model with `d = 2`, `N = 2` (`C = 8` for the vector
    /// latent), used for gradient checks.
    pub fn tiny(variant: VariantKind) -> Self {
        let (d, n) = (2, 2);
        let encoder = vec![ConvSpec::new(3, 3, 2, 1)];
        let tail = ConvSpec::new(1, 3, 1, 1);
        let (decoder_projection, first) = if variant.is_spatial() {
            (None, ConvSpec::new(3, 4, 2, 1))
        } else {
            let proj = Projection {
                channels: 2,
                height: 2,
                width: 2,
            };
            (Some(proj), ConvSpec::new(3, 4, 2, 1))
        };
        Self::assemble(
            variant,
            d,
            n,
            d * d * n,
            [1, 4, 4],
            encoder,
            decoder_projection,
            vec![first, tail],
        )
        .expect("tiny config is valid")
    }

    /// Two-pixel image, two-dimensional vector latent, no hidden layers: the
    /// encoder is a single dense layer and the decoder is
    /// `sigmoid(W z + b)`. Small enough for exact likelihoods by quadrature.
    pub fn toy_two_pixel() -> Self {
        let proj = Projection {
            channels: 1,
            height: 1,
            width: 2,
        };
        Self::assemble(VariantKind::Original, 1, 2, 2, [1, 1, 2], vec![], Some(proj), vec![])
            .expect("toy config is valid")
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        variant: VariantKind,
        d: usize,
        n_maps: usize,
        latent_dim: usize,
        image_shape: [usize; 3],
        encoder: Vec<ConvSpec>,
        decoder_projection: Option<Projection>,
        decoder: Vec<ConvSpec>,
    ) -> Result<Self> {
        let latent_dim = if variant == VariantKind::NaiveSpatial {
            d * d * n_maps
        } else {
            latent_dim
        };
        let cfg = ModelConfig {
            variant,
            d,
            n_maps,
            latent_dim,
            image_shape,
            likelihood_sigma: 1.0,
            encoder,
            decoder_projection,
            decoder,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Width of the encoder's fully connected output layer.
    pub fn head_width(&self) -> usize {
        param_count(self.variant, self.d, self.n_maps, self.latent_dim).expect("validated config")
    }

    /// Shape of one latent draw: `[C]` or `[N, d, d]`.
    pub fn latent_shape(&self) -> Vec<usize> {
        if self.variant.is_spatial() {
            vec![self.n_maps, self.d, self.d]
        } else {
            vec![self.latent_dim]
        }
    }

    pub fn latent_numel(&self) -> usize {
        self.latent_shape().iter().product()
    }

    pub fn image_numel(&self) -> usize {
        self.image_shape.iter().product()
    }

    /// Flattened encoder feature size feeding the head.
    pub fn encoder_features(&self) -> Result<usize> {
        let [mut c, mut h, mut w] = self.image_shape;
        for s in &self.encoder {
            h = conv_output_size(h, s.kernel, s.stride, s.padding)?;
            w = conv_output_size(w, s.kernel, s.stride, s.padding)?;
            c = s.out_channels;
        }
        Ok(c * h * w)
    }

    /// Shape entering the first decoder stage.
    pub fn decoder_input_shape(&self) -> [usize; 3] {
        match (self.variant.is_spatial(), self.decoder_projection) {
            (true, _) => [self.n_maps, self.d, self.d],
            (false, Some(p)) => [p.channels, p.height, p.width],
            (false, None) => [self.latent_dim, 1, 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant.is_spatial() && (self.d == 0 || self.n_maps == 0) {
            return Err(SvaeError::contract("spatial variants need d >= 1 and N >= 1"));
        }
        if !self.variant.is_spatial() && self.latent_dim == 0 {
            return Err(SvaeError::contract("vector latent needs C >= 1"));
        }
        if self.variant == VariantKind::NaiveSpatial && self.latent_dim != self.d * self.d * self.n_maps {
            return Err(SvaeError::dim(
                "ModelConfig",
                "naive latent C = d²N",
                self.d * self.d * self.n_maps,
                self.latent_dim,
            ));
        }
        if self.variant.is_spatial() && self.decoder_projection.is_some() {
            return Err(SvaeError::contract(
                "spatial decoders consume the d×d maps directly; no projection",
            ));
        }
        if !self.likelihood_sigma.is_finite() || self.likelihood_sigma <= 0.0 {
            return Err(SvaeError::contract(format!(
                "likelihood_sigma must be > 0, got {}",
                self.likelihood_sigma
            )));
        }
        if self.image_shape.contains(&0) {
            return Err(SvaeError::contract("image_shape entries must be >= 1"));
        }
        self.encoder_features()?;
        let [mut c, mut h, mut w] = self.decoder_input_shape();
        for s in &self.decoder {
            h = conv_transpose_output_size(h, s.kernel, s.stride, s.padding)?;
            w = conv_transpose_output_size(w, s.kernel, s.stride, s.padding)?;
            c = s.out_channels;
        }
        for (axis, (&got, &want)) in ["channels", "height", "width"]
            .iter()
            .zip([c, h, w].iter().zip(&self.image_shape))
        {
            if got != want {
                return Err(SvaeError::dim("ModelConfig decoder output", *axis, want, got));
            }
        }
        Ok(())
    }
}
