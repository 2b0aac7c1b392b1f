use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Result, SvaeError};
use crate::latent::VariantKind;
use crate::rng::{seeded, standard_normals};
use crate::tape::{OuterKind, Tape, Var};
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::params::VariantParams;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
}

/// The two terms of the variational lower bound, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    /// `E_q[log p(x|z)]`, single-draw estimate.
    pub reconstruction: f64,
    /// `KL(q(z|x) || N(0, I))`, closed form.
    pub kl: f64,
    /// `reconstruction - kl`
    pub elbo: f64,
}

impl ElboBreakdown {
    pub fn new(reconstruction: f64, kl: f64) -> Self {
        ElboBreakdown {
            reconstruction,
            kl,
            elbo: reconstruction - kl,
        }
    }
}

/// Parameters bound to a tape for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps tape variables laid out like [`Model::params`].
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Flattened posterior statistics on the tape, both `[B, L]`.
#[derive(Debug, Clone, Copy)]
pub struct LatentStats {
    pub mean: Var,
    pub log_var: Var,
}

/// Tape handles produced by [`Model::elbo_on_tape`].
#[derive(Debug, Clone, Copy)]
pub struct ElboVars {
    pub loss: Var,
    pub reconstruction: Var,
    pub kl: Var,
    pub z: Var,
    pub x_hat: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Vec<NamedParam>,
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape matches")
        .with_grad()
}

impl Model {
    /// Builds a model with fan-in scaled uniform weights
    /// (`U(-sqrt(1/fan_in), sqrt(1/fan_in))`), deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut params = Vec::new();
        let mut push = |name: String, w_shape: Vec<usize>, fan_in: usize, bias_len: usize, rng: &mut _| {
            let bound = (1.0 / fan_in as f64).sqrt();
            params.push(NamedParam {
                name: format!("{name}.weight"),
                tensor: uniform_tensor(&w_shape, bound, rng),
            });
            params.push(NamedParam {
                name: format!("{name}.bias"),
                tensor: uniform_tensor(&[bias_len], bound, rng),
            });
        };

        let mut c = config.image_shape[0];
        for (i, s) in config.encoder.iter().enumerate() {
            push(
                format!("enc.{i}"),
                vec![s.out_channels, c, s.kernel, s.kernel],
                c * s.kernel * s.kernel,
                s.out_channels,
                &mut rng,
            );
            c = s.out_channels;
        }
        let features = config.encoder_features()?;
        let width = config.head_width();
        push("head".into(), vec![width, features], features, width, &mut rng);

        let [mut c, _, _] = config.decoder_input_shape();
        if let Some(p) = config.decoder_projection {
            let out = p.channels * p.height * p.width;
            push(
                "dec.proj".into(),
                vec![out, config.latent_dim],
                config.latent_dim,
                out,
                &mut rng,
            );
        }
        for (i, s) in config.decoder.iter().enumerate() {
            // Transposed conv weight is [in, out, k, k]; each output pixel
            // gathers from in * k² / stride² inputs.
            let fan_in = (c * s.kernel * s.kernel / (s.stride * s.stride)).max(1);
            push(
                format!("dec.{i}"),
                vec![c, s.out_channels, s.kernel, s.kernel],
                fan_in,
                s.out_channels,
                &mut rng,
            );
            c = s.out_channels;
        }
        Ok(Model { config, params })
    }

    /// Rebuilds a model from named parameters; names and shapes must match
    /// those [`Model::new`] would create for `config`.
    pub fn from_params(config: ModelConfig, params: Vec<NamedParam>) -> Result<Self> {
        let template = Model::new(config, 0)?;
        if template.params.len() != params.len() {
            return Err(SvaeError::dim(
                "Model::from_params",
                "parameter count",
                template.params.len(),
                params.len(),
            ));
        }
        for (want, got) in template.params.iter().zip(&params) {
            if want.name != got.name || want.tensor.shape() != got.tensor.shape() {
                return Err(SvaeError::contract(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.tensor.shape(),
                    want.name,
                    want.tensor.shape()
                )));
            }
        }
        let params = params
            .into_iter()
            .map(|mut p| {
                p.tensor.requires_grad = true;
                p
            })
            .collect();
        Ok(Model {
            config: template.config,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> VariantKind {
        self.config.variant
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn decoder_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with("dec."))
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.param_count() - self.decoder_param_count()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(&p.tensor)).collect(),
        }
    }

    /// Binds the parameters as constants (no gradient tracking).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect(),
        }
    }

    fn check_images(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(SvaeError::contract(format!("expected images [B, C, H, W], got {s:?}")));
        }
        for (axis, (&got, &want)) in ["channels", "height", "width"]
            .iter()
            .zip(s[1..].iter().zip(&self.config.image_shape))
        {
            if got != want {
                return Err(SvaeError::dim("encode", *axis, want, got));
            }
        }
        Ok(s[0])
    }

    /// Encoder trunk and head: images `[B, C, H, W]` -> raw head `[B, width]`.
    pub fn encoder_forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        let mut k = 0;
        for s in &self.config.encoder {
            h = tape.conv2d(h, bound.vars[k], bound.vars[k + 1], s.stride, s.padding)?;
            h = tape.relu(h);
            k += 2;
        }
        let batch = tape.shape(h)[0];
        let features = tape.value(h).numel() / batch.max(1);
        let h = tape.reshape(h, &[batch, features])?;
        tape.dense(h, bound.vars[k], bound.vars[k + 1])
    }

    /// Splits the raw head into flattened posterior mean and log-variance.
    pub fn latent_stats(&self, tape: &mut Tape, head: Var) -> Result<LatentStats> {
        let cfg = &self.config;
        let batch = tape.shape(head)[0];
        let l = cfg.latent_numel();
        let (d, n) = (cfg.d, cfg.n_maps);
        let maps = |tape: &mut Tape, start: usize| -> Result<Var> {
            let v = tape.narrow(head, start, n * d)?;
            tape.reshape(v, &[batch, n, d])
        };
        let flat = |tape: &mut Tape, v: Var| tape.reshape(v, &[batch, l]);
        match cfg.variant {
            VariantKind::Original | VariantKind::NaiveSpatial => Ok(LatentStats {
                mean: tape.narrow(head, 0, l)?,
                log_var: tape.narrow(head, l, l)?,
            }),
            VariantKind::MvnSpatial => {
                let mean = tape.narrow(head, 0, n * d * d)?;
                let omega = maps(tape, n * d * d)?;
                let psi = maps(tape, n * d * d + n * d)?;
                // log diag(Ω ⊗ Ψ) = log Ω_i + log Ψ_j
                let lv = tape.outer(omega, psi, OuterKind::Sum)?;
                Ok(LatentStats {
                    mean,
                    log_var: flat(tape, lv)?,
                })
            }
            VariantKind::LowRankMvnSpatial => {
                let mu = maps(tape, 0)?;
                let nu = maps(tape, n * d)?;
                let omega = maps(tape, 2 * n * d)?;
                let psi = maps(tape, 3 * n * d)?;
                let m = tape.outer(mu, nu, OuterKind::Product)?;
                let lv = tape.outer(omega, psi, OuterKind::Sum)?;
                Ok(LatentStats {
                    mean: flat(tape, m)?,
                    log_var: flat(tape, lv)?,
                })
            }
        }
    }

    /// `z = mean + exp(log_var / 2) * eps`, all `[B, L]`.
    pub fn sample_on_tape(&self, tape: &mut Tape, stats: LatentStats, eps: Var) -> Result<Var> {
        let half = tape.scale(stats.log_var, 0.5);
        let std = tape.exp(half);
        let noise = tape.mul(std, eps)?;
        tape.add(stats.mean, noise)
    }

    /// Closed-form KL to `N(0, I)`, summed over latents and averaged over the batch.
    pub fn kl_on_tape(&self, tape: &mut Tape, stats: LatentStats) -> Result<Var> {
        let batch = tape.shape(stats.mean)[0] as f64;
        let var = tape.exp(stats.log_var);
        let m2 = tape.mul(stats.mean, stats.mean)?;
        let a = tape.add(var, m2)?;
        let b = tape.sub(a, stats.log_var)?;
        let c = tape.add_scalar(b, -1.0);
        let s = tape.sum(c);
        Ok(tape.scale(s, 0.5 / batch))
    }

    /// Decoder: latents `[B, L]` -> images `[B, C, H, W]` in `[0, 1]`.
    pub fn decoder_forward(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        let cfg = &self.config;
        let batch = tape.shape(z)[0];
        let mut k = bound.vars.len() - 2 * cfg.decoder.len();
        let n_stages = cfg.decoder.len();
        let mut h = match cfg.decoder_projection {
            Some(p) => {
                let pv = k - 2;
                let flat = tape.reshape(z, &[batch, cfg.latent_dim])?;
                let h = tape.dense(flat, bound.vars[pv], bound.vars[pv + 1])?;
                let h = if n_stages == 0 { tape.sigmoid(h) } else { tape.relu(h) };
                tape.reshape(h, &[batch, p.channels, p.height, p.width])?
            }
            None => {
                let [c, hh, ww] = cfg.decoder_input_shape();
                tape.reshape(z, &[batch, c, hh, ww])?
            }
        };
        for (i, s) in cfg.decoder.iter().enumerate() {
            h = tape.conv2d_transpose(h, bound.vars[k], bound.vars[k + 1], s.stride, s.padding)?;
            h = if i + 1 == n_stages {
                tape.sigmoid(h)
            } else {
                tape.relu(h)
            };
            k += 2;
        }
        let [c, hh, ww] = cfg.image_shape;
        tape.reshape(h, &[batch, c, hh, ww])
    }

    /// Builds the negative-ELBO graph for images `x` and noise `eps [B, L]`.
    pub fn elbo_on_tape(&self, tape: &mut Tape, bound: &Bound, x: &Tensor, eps: &Tensor) -> Result<ElboVars> {
        let batch = self.check_images(x)?;
        if bound.vars.len() != self.params.len() {
            return Err(SvaeError::dim(
                "elbo",
                "bound parameters",
                self.params.len(),
                bound.vars.len(),
            ));
        }
        let l = self.config.latent_numel();
        if eps.numel() != batch * l {
            return Err(SvaeError::dim("elbo", "noise numel", batch * l, eps.numel()));
        }
        let xv = tape.constant(x.clone());
        let ev = tape.constant(eps.clone().reshape(&[batch, l])?);
        let head = self.encoder_forward(tape, bound, xv)?;
        let stats = self.latent_stats(tape, head)?;
        let z = self.sample_on_tape(tape, stats, ev)?;
        let x_hat = self.decoder_forward(tape, bound, z)?;

        let sigma2 = self.config.likelihood_sigma.powi(2);
        let dim = self.config.image_numel() as f64;
        let diff = tape.sub(xv, x_hat)?;
        let sq = tape.mul(diff, diff)?;
        let sse = tape.sum(sq);
        let scaled = tape.scale(sse, -1.0 / (2.0 * sigma2 * batch as f64));
        let reconstruction = tape.add_scalar(scaled, -0.5 * dim * (2.0 * std::f64::consts::PI * sigma2).ln());
        let kl = self.kl_on_tape(tape, stats)?;
        let loss = tape.sub(kl, reconstruction)?;
        Ok(ElboVars {
            loss,
            reconstruction,
            kl,
            z,
            x_hat,
        })
    }

    fn breakdown(tape: &Tape, vars: &ElboVars) -> Result<ElboBreakdown> {
        let recon = tape.value(vars.reconstruction).item()?;
        let kl = tape.value(vars.kl).item()?;
        if !recon.is_finite() || !kl.is_finite() {
            return Err(SvaeError::numeric(format!(
                "non-finite ELBO terms: reconstruction={recon}, kl={kl}"
            )));
        }
        Ok(ElboBreakdown::new(recon, kl))
    }

    pub fn draw_noise(&self, batch: usize, rng: &mut impl Rng) -> Tensor {
        let l = self.config.latent_numel();
        Tensor::new(&[batch, l], standard_normals(rng, batch * l)).expect("shape matches")
    }

    /// Single-draw ELBO estimate, no gradients.
    pub fn elbo(&self, x: &Tensor, rng: &mut impl Rng) -> Result<ElboBreakdown> {
        let batch = self.check_images(x)?;
        let eps = self.draw_noise(batch, rng);
        self.elbo_with_noise(x, &eps)
    }

    pub fn elbo_with_noise(&self, x: &Tensor, eps: &Tensor) -> Result<ElboBreakdown> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let vars = self.elbo_on_tape(&mut tape, &bound, x, eps)?;
        Self::breakdown(&tape, &vars)
    }

    /// Computes the ELBO and stores `∂(−ELBO)/∂θ` in every parameter's `grad`.
    pub fn elbo_and_grad(&mut self, x: &Tensor, eps: &Tensor) -> Result<ElboBreakdown> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let vars = self.elbo_on_tape(&mut tape, &bound, x, eps)?;
        let out = Self::breakdown(&tape, &vars)?;
        let grads = tape.backward(vars.loss)?;
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            p.tensor.zero_grad();
            grads.accumulate_into(v, &mut p.tensor);
        }
        Ok(out)
    }

    /// Posterior parameters for each image in the batch.
    pub fn encode(&self, x: &Tensor) -> Result<Vec<VariantParams>> {
        self.check_images(x)?;
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let head = self.encoder_forward(&mut tape, &bound, xv)?;
        let width = self.config.head_width();
        tape.value(head)
            .data()
            .chunks(width)
            .map(|raw| VariantParams::from_raw(&self.config, raw))
            .collect()
    }

    /// Decodes latents shaped `[B, ..latent_shape]` (or `[B, L]`).
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let l = self.config.latent_numel();
        let batch = z.shape().first().copied().unwrap_or(0);
        if batch == 0 || z.numel() != batch * l {
            return Err(SvaeError::dim(
                "decode",
                "latent numel per datum",
                l,
                z.numel() / batch.max(1),
            ));
        }
        let per: usize = z.shape()[1..].iter().product();
        if per != l {
            return Err(SvaeError::dim("decode", "latent numel per datum", l, per));
        }
        let mut tape = Tape::new();
        let unused = tape.constant(Tensor::zeros(&[0]));
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.name.starts_with("dec.") {
                    tape.constant(p.tensor.clone())
                } else {
                    unused
                }
            })
            .collect();
        let bound = Bound::from_vars(vars);
        let zv = tape.constant(z.clone().reshape(&[batch, l])?);
        let out = self.decoder_forward(&mut tape, &bound, zv)?;
        Ok(tape.value(out).clone())
    }

    /// Draws `count` latents from the prior and decodes them. Only the
    /// decoder runs; latents are decoded in chunks of `chunk` images.
    pub fn generate(&self, count: usize, chunk: usize, rng: &mut impl Rng) -> Result<Tensor> {
        let l = self.config.latent_numel();
        let chunk = chunk.max(1);
        let mut out = Vec::with_capacity(count * self.config.image_numel());
        let mut done = 0;
        while done < count {
            let b = chunk.min(count - done);
            let mut shape = vec![b];
            shape.extend(self.config.latent_shape());
            let z = Tensor::new(&shape, standard_normals(rng, b * l))?;
            out.extend_from_slice(self.decode(&z)?.data());
            done += b;
        }
        let [c, h, w] = self.config.image_shape;
        Tensor::new(&[count, c, h, w], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::kl_to_standard_normal;

    fn images(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let n = batch * cfg.image_numel();
        let [c, h, w] = cfg.image_shape;
        Tensor::new(&[batch, c, h, w], (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn head_widths_follow_param_count() {
        let w: Vec<usize> = VariantKind::ALL
            .iter()
            .map(|&v| {
                let m = Model::new(ModelConfig::mnist(v, 3, 64, 81).unwrap(), 0).unwrap();
                m.config().head_width()
            })
            .collect();
        assert_eq!(w, vec![162, 1152, 960, 768]);
    }

    #[test]
    fn decode_shape_and_range() {
        for v in VariantKind::ALL {
            let m = Model::new(ModelConfig::mnist(v, 3, 8, 72).unwrap(), 1).unwrap();
            let x = m.generate(3, 2, &mut seeded(2)).unwrap();
            assert_eq!(x.shape(), &[3, 1, 28, 28]);
            assert!(x.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn decode_rejects_wrong_latent() {
        let m = Model::new(ModelConfig::tiny(VariantKind::MvnSpatial), 0).unwrap();
        assert!(m.decode(&Tensor::zeros(&[1, 7])).is_err());
    }

    #[test]
    fn encode_rejects_wrong_image_axis() {
        let m = Model::new(ModelConfig::tiny(VariantKind::Original), 0).unwrap();
        let err = m.encode(&Tensor::zeros(&[1, 1, 4, 5])).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn zero_head_matches_prior() {
        for v in VariantKind::ALL {
            let mut m = Model::new(ModelConfig::tiny(v), 3).unwrap();
            for p in m.params_mut().iter_mut().filter(|p| p.name.starts_with("head")) {
                p.tensor.data_mut().fill(0.0);
            }
            let x = images(m.config(), 2, 4);
            let e = m.elbo(&x, &mut seeded(5)).unwrap();
            assert_eq!(e.kl, 0.0, "{v}");
            for p in m.encode(&x).unwrap() {
                assert!(p.to_raw().iter().all(|&r| r == 0.0));
            }
        }
    }

    #[test]
    fn tape_kl_matches_closed_form_on_flattened_params() {
        for v in VariantKind::ALL {
            let m = Model::new(ModelConfig::tiny(v), 6).unwrap();
            let x = images(m.config(), 3, 7);
            let e = m.elbo(&x, &mut seeded(8)).unwrap();
            let per: f64 = m
                .encode(&x)
                .unwrap()
                .iter()
                .map(|p| {
                    let dg = p.to_diagonal();
                    kl_to_standard_normal(&dg.mean, &dg.log_var).unwrap()
                })
                .sum::<f64>()
                / 3.0;
            assert!((e.kl - per).abs() < 1e-12 * per.max(1.0), "{v}: {} vs {per}", e.kl);
            assert_eq!(e.elbo, e.reconstruction - e.kl);
        }
    }

    #[test]
    fn tape_sampling_matches_variant_samplers() {
        for v in VariantKind::ALL {
            let m = Model::new(ModelConfig::tiny(v), 10).unwrap();
            let x = images(m.config(), 2, 11);
            let eps = m.draw_noise(2, &mut seeded(12));
            let mut tape = Tape::new();
            let bound = m.bind_frozen(&mut tape);
            let vars = m.elbo_on_tape(&mut tape, &bound, &x, &eps).unwrap();
            let z_tape = tape.value(vars.z).data().to_vec();

            let mut rng = seeded(12);
            let mut z_direct = Vec::new();
            for p in m.encode(&x).unwrap() {
                z_direct.extend_from_slice(p.reparameterize(&mut rng).unwrap().z.data());
            }
            for (a, b) in z_tape.iter().zip(&z_direct) {
                assert!((a - b).abs() < 1e-12, "{v}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn perfect_reconstruction_zero_kl() {
        // Decoder output equals the image when the images are the decoder's
        // own output for the sampled z and the head is zeroed.
        let mut m = Model::new(ModelConfig::tiny(VariantKind::NaiveSpatial), 13).unwrap();
        for p in m.params_mut().iter_mut().filter(|p| p.name.starts_with("head")) {
            p.tensor.data_mut().fill(0.0);
        }
        let eps = m.draw_noise(1, &mut seeded(14));
        let x = m.decode(&eps).unwrap();
        let e = m.elbo_with_noise(&x, &eps).unwrap();
        let d = m.config().image_numel() as f64;
        let expected = -0.5 * d * (2.0 * std::f64::consts::PI).ln();
        assert!((e.elbo - expected).abs() < 1e-12, "{} vs {expected}", e.elbo);
        assert_eq!(e.kl, 0.0);
    }

    #[test]
    fn same_seed_same_weights_and_outputs() {
        let cfg = ModelConfig::tiny(VariantKind::LowRankMvnSpatial);
        let a = Model::new(cfg.clone(), 77).unwrap();
        let b = Model::new(cfg, 77).unwrap();
        assert_eq!(a.params(), b.params());
        let x = images(a.config(), 2, 1);
        let ea = a.elbo(&x, &mut seeded(3)).unwrap();
        let eb = b.elbo(&x, &mut seeded(3)).unwrap();
        assert_eq!(ea.elbo.to_bits(), eb.elbo.to_bits());
    }

    #[test]
    fn gradients_populated_for_all_params() {
        let mut m = Model::new(ModelConfig::tiny(VariantKind::MvnSpatial), 4).unwrap();
        let x = images(m.config(), 2, 5);
        let eps = m.draw_noise(2, &mut seeded(6));
        m.elbo_and_grad(&x, &eps).unwrap();
        for p in m.params() {
            let g = p
                .tensor
                .grad
                .as_ref()
                .unwrap_or_else(|| panic!("{} has no grad", p.name));
            assert_eq!(g.len(), p.tensor.numel());
        }
    }
}
