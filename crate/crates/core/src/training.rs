//! Rate–distortion training of the VAE codec.
//!
//! The primary objective is `MSE + lambda * bits / pixel`, with the rate
//! measured on the uniformly-noised latent. A beta-VAE objective (Gaussian
//! posterior, KL to a unit Gaussian) is kept as a diagnostic mode.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::entropy::{self, PriorVars};
use crate::io::checkpoint::{ModelCheckpoint, TrainingMetadata};
use crate::io::codec::{self, CodecError};
use crate::model::{ArchitectureSpec, ModelError, PosteriorHead, VaeModel};
use crate::tensor::{adam_step, AdamConfig, Real, Tape, Tensor, TensorError, Var};

pub const DEFAULT_LAMBDA: f64 = 0.001;
pub const DEFAULT_LATENT_GRID: [usize; 6] = [4, 8, 16, 32, 64, 128];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: loss={loss} mse={mse} rate_bpp={rate_bpp}")]
    NonFinite {
        step: usize,
        loss: f64,
        mse: f64,
        rate_bpp: f64,
    },
    #[error("objective not available in {0} mode")]
    WrongMode(LossMode),
    #[error("grid point latent_channels={latent_channels}: {source}")]
    GridPoint {
        latent_channels: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossMode {
    #[default]
    RateDistortion,
    BetaVae,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::RateDistortion => "rate_distortion",
            LossMode::BetaVae => "beta_vae",
        })
    }
}

impl FromStr for LossMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rate_distortion" | "rd" => Ok(LossMode::RateDistortion),
            "beta_vae" => Ok(LossMode::BetaVae),
            other => Err(format!("unknown loss mode `{other}` (rate_distortion | beta_vae)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub latent_channels: usize,
    pub hidden_channels: usize,
    pub patch_size: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            latent_channels: 128,
            hidden_channels: 256,
            patch_size: 64,
            batch_size: 16,
            steps: 2000,
            learning_rate: 1e-3,
            seed: 0,
            loss_mode: LossMode::RateDistortion,
        }
    }
}

impl TrainConfig {
    pub fn architecture(&self) -> Result<ArchitectureSpec, TrainError> {
        Ok(ArchitectureSpec::new(self.latent_channels, self.hidden_channels)?)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let spec = self.architecture()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TrainError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(spec.downsample_factor) {
            return Err(TrainError::Config(format!(
                "patch_size {} must be a positive multiple of {}",
                self.patch_size, spec.downsample_factor
            )));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(TrainError::Config("batch_size and steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Sets one field from its textual `key = value` form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, String> {
            value
                .parse()
                .map_err(|_| format!("invalid value `{value}` for `{key}`"))
        }
        match key.replace('-', "_").as_str() {
            "lambda" => self.lambda = parse(key, value)?,
            "latent_channels" => self.latent_channels = parse(key, value)?,
            "hidden_channels" => self.hidden_channels = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "loss_mode" => self.loss_mode = value.parse()?,
            _ => return Err(format!("unknown configuration key `{key}`")),
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// One point of a rate–distortion curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub latent_channels: usize,
    pub bpp: f64,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// The three scalars of the rate–distortion objective.
#[derive(Clone, Copy, Debug)]
pub struct RdTerms {
    pub loss: Var,
    pub mse: Var,
    pub rate_bits: Var,
}

fn pixel_count<T: Real>(tape: &Tape<T>, image: Var) -> Result<usize, TensorError> {
    let (n, _, h, w) = tape.value(image).dims4().ok_or_else(|| TensorError::InvalidArgument {
        op: "rd_loss",
        reason: format!("expected NCHW image, got {:?}", tape.value(image).shape()),
    })?;
    Ok(n * h * w)
}

/// `MSE(x, x_hat) + lambda * rate_bits(z_noisy) / pixels`.
pub fn rd_loss<T: Real>(
    tape: &mut Tape<T>,
    original: Var,
    reconstruction: Var,
    noisy_latent: Var,
    prior: PriorVars,
    lambda: f64,
) -> Result<RdTerms, TensorError> {
    let pixels = pixel_count(tape, original)?;
    let mse = tape.mse(reconstruction, original)?;
    let rate_bits = entropy::rate_bits(tape, noisy_latent, prior)?;
    let weighted = tape.scale(rate_bits, T::lit(lambda / pixels as f64));
    let loss = tape.add(mse, weighted)?;
    Ok(RdTerms {
        loss,
        mse,
        rate_bits,
    })
}

/// Diagonal Gaussian posterior produced by the log-variance head.
#[derive(Clone, Copy, Debug)]
pub struct GaussianPosterior {
    pub mean: Var,
    pub log_var: Var,
}

/// `MSE(x, x_hat) + lambda * KL(q || N(0, I)) / pixels`, KL in nats.
///
/// Only meaningful for a model trained in [`LossMode::BetaVae`].
pub fn beta_vae_loss<T: Real>(
    tape: &mut Tape<T>,
    mode: LossMode,
    original: Var,
    reconstruction: Var,
    posterior: GaussianPosterior,
    lambda: f64,
) -> Result<(Var, Var, Var), TrainError> {
    if mode != LossMode::BetaVae {
        return Err(TrainError::WrongMode(mode));
    }
    let pixels = pixel_count(tape, original)?;
    let mse = tape.mse(reconstruction, original)?;
    let kl = tape.gaussian_kl(posterior.mean, posterior.log_var)?;
    let weighted = tape.scale(kl, T::lit(lambda / pixels as f64));
    let loss = tape.add(mse, weighted)?;
    Ok((loss, mse, kl))
}

/// Source of training batches.
pub trait BatchSampler {
    /// `batch x 3 x patch x patch` with values in [0, 1].
    fn sample_batch(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32>;
    fn patch_size(&self) -> usize;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepTelemetry {
    pub step: usize,
    pub loss: f64,
    pub mse: f64,
    pub rate_bpp: f64,
}

pub const TELEMETRY_HEADER: &str = "step,loss,mse,rate_bpp";

impl StepTelemetry {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.loss, self.mse, self.rate_bpp)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub telemetry: Vec<StepTelemetry>,
}

/// Fresh, seeded model for `config`.
pub fn initial_model(config: &TrainConfig) -> Result<VaeModel<f32>, TrainError> {
    let head = match config.loss_mode {
        LossMode::RateDistortion => PosteriorHead::Uniform,
        LossMode::BetaVae => PosteriorHead::Gaussian,
    };
    Ok(VaeModel::new(config.architecture()?, head, config.seed)?)
}

/// Trains from scratch; reproducible from `config.seed`.
pub fn train(config: &TrainConfig, dataset: &dyn BatchSampler) -> Result<TrainOutcome, TrainError> {
    train_with(config, dataset, |_| {})
}

/// [`train`] with a per-step telemetry callback.
pub fn train_with(
    config: &TrainConfig,
    dataset: &dyn BatchSampler,
    mut observe: impl FnMut(&StepTelemetry),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if dataset.patch_size() != config.patch_size {
        return Err(TrainError::Config(format!(
            "dataset patch size {} differs from configured {}",
            dataset.patch_size(),
            config.patch_size
        )));
    }
    let mut model = initial_model(config)?;
    let adam = config.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut telemetry = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let batch = dataset.sample_batch(config.batch_size, &mut rng);
        let noise_seed = rng.next_u64();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let x = tape.constant(batch);
        let pixels = pixel_count(&tape, x)? as f64;

        let (loss, mse, rate) = match config.loss_mode {
            LossMode::RateDistortion => {
                let z = model.encode_on(&mut tape, &bound, x)?;
                let noise = entropy::uniform_noise::<f32>(tape.value(z).shape(), noise_seed);
                let u = tape.constant(noise);
                let z_noisy = tape.add(z, u)?;
                let x_hat = model.decode_on(&mut tape, &bound, z_noisy)?;
                let terms = rd_loss(&mut tape, x, x_hat, z_noisy, model.prior_vars(&bound), config.lambda)?;
                (terms.loss, terms.mse, terms.rate_bits)
            }
            LossMode::BetaVae => {
                let (mean, log_var) = model.posterior_on(&mut tape, &bound, x)?;
                let shape = tape.value(mean).shape().to_vec();
                let eps = tape.constant(standard_normal(&shape, noise_seed));
                let half_lv = tape.scale(log_var, 0.5);
                let std = tape.exp(half_lv);
                let spread = tape.mul(std, eps)?;
                let z = tape.add(mean, spread)?;
                let x_hat = model.decode_on(&mut tape, &bound, z)?;
                let posterior = GaussianPosterior { mean, log_var };
                let (loss, mse, kl) = beta_vae_loss(&mut tape, config.loss_mode, x, x_hat, posterior, config.lambda)?;
                let kl_bits = tape.scale(kl, std::f32::consts::LOG2_E);
                (loss, mse, kl_bits)
            }
        };

        let record = StepTelemetry {
            step,
            loss: tape.value(loss).item() as f64,
            mse: tape.value(mse).item() as f64,
            rate_bpp: tape.value(rate).item() as f64 / pixels,
        };
        if !(record.loss.is_finite() && record.mse.is_finite() && record.rate_bpp.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                loss: record.loss,
                mse: record.mse,
                rate_bpp: record.rate_bpp,
            });
        }
        let grads = tape.backward(loss)?;
        drop(tape);
        let params = model.params_mut();
        params.zero_grad();
        params.accumulate(&grads)?;
        if config.loss_mode == LossMode::BetaVae {
            // The logistic prior is not part of this objective.
            for p in params.iter_mut().filter(|p| p.grad.is_none() && p.name.starts_with("prior.")) {
                p.grad = Some(Tensor::zeros(p.tensor.shape().to_vec()));
            }
        }
        adam_step(params.as_mut_slice(), &adam)?;
        observe(&record);
        telemetry.push(record);
    }

    let metadata = TrainingMetadata {
        lambda: config.lambda,
        steps: config.steps as u64,
        seed: config.seed,
        loss_mode: config.loss_mode,
        learning_rate: config.learning_rate,
        batch_size: config.batch_size as u32,
        patch_size: config.patch_size as u32,
    };
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint::new(model, metadata),
        telemetry,
    })
}

fn standard_normal(shape: &[usize], seed: u64) -> Tensor<f32> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        // Box–Muller; u1 in (0, 1].
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random();
        ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
    })
}

/// Codes every image of `eval_set` (each `3 x H x W`) for real and averages
/// bpp, MSE, PSNR and SSIM of the 8-bit reconstructions.
pub fn evaluate_checkpoint(checkpoint: &ModelCheckpoint, eval_set: &[Tensor<f32>]) -> Result<RdPoint, TrainError> {
    if eval_set.is_empty() {
        return Err(TrainError::EmptyEvalSet);
    }
    let rows = eval_set
        .iter()
        .enumerate()
        .map(|(i, image)| codec::evaluate_image(&i.to_string(), image, checkpoint))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = codec::mean_row(&rows);
    Ok(RdPoint {
        latent_channels: checkpoint.model.spec().latent_channels,
        bpp: mean.bpp,
        mse: mean.mse,
        psnr: mean.psnr,
        ssim: mean.ssim,
    })
}

/// Trains one model per latent width with the same seed and budget, and
/// evaluates each on `eval_set` with real coded bitstreams.
pub fn sweep(
    base: &TrainConfig,
    latent_grid: &[usize],
    dataset: &dyn BatchSampler,
    eval_set: &[Tensor<f32>],
) -> Result<Vec<RdPoint>, TrainError> {
    sweep_with(base, latent_grid, dataset, eval_set, |_, _| {})
}

/// [`sweep`] with a callback receiving each finished point and its model.
pub fn sweep_with(
    base: &TrainConfig,
    latent_grid: &[usize],
    dataset: &dyn BatchSampler,
    eval_set: &[Tensor<f32>],
    mut on_point: impl FnMut(&RdPoint, &ModelCheckpoint),
) -> Result<Vec<RdPoint>, TrainError> {
    if latent_grid.is_empty() {
        return Err(TrainError::Config("latent grid is empty".into()));
    }
    if eval_set.is_empty() {
        return Err(TrainError::EmptyEvalSet);
    }
    let mut points = Vec::with_capacity(latent_grid.len());
    for &latent_channels in latent_grid {
        let label = |e: TrainError| TrainError::GridPoint {
            latent_channels,
            source: Box::new(e),
        };
        let config = TrainConfig {
            latent_channels,
            ..base.clone()
        };
        let outcome = train(&config, dataset).map_err(label)?;
        let point = evaluate_checkpoint(&outcome.checkpoint, eval_set).map_err(label)?;
        on_point(&point, &outcome.checkpoint);
        points.push(point);
    }
    Ok(points)
}

pub const SWEEP_HEADER: &str = "latent_channels,bpp,mse,psnr,ssim";

/// Header plus one row per point, ordered by latent width.
pub fn write_sweep_csv(points: &[RdPoint], mut out: impl Write) -> std::io::Result<()> {
    let mut sorted = points.to_vec();
    sorted.sort_by_key(|p| p.latent_channels);
    writeln!(out, "{SWEEP_HEADER}")?;
    for p in sorted {
        let psnr = if p.psnr.is_finite() { p.psnr.to_string() } else { "inf".into() };
        writeln!(out, "{},{},{},{},{}", p.latent_channels, p.bpp, p.mse, psnr, p.ssim)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::{prior_constants, FactorizedPrior};
    use crate::io::patches::PatchSource;
    use crate::synth;
    use crate::tensor::gradcheck;
    use proptest::prelude::*;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            latent_channels: 4,
            hidden_channels: 8,
            patch_size: 16,
            batch_size: 2,
            steps: 6,
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> PatchSource {
        PatchSource::from_images(synth::corpus(0, 4, 32, 32), 16).unwrap()
    }

    fn constant(tape: &mut Tape<f64>, shape: Vec<usize>, v: f64) -> Var {
        let len = shape.iter().product();
        tape.constant(Tensor::new(shape, vec![v; len]).unwrap())
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.lambda, 0.001);
        assert_eq!(c.loss_mode, LossMode::RateDistortion);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn linear_combination_example() {
        // One pixel, one latent symbol at probability 1/4, MSE 0.01.
        let scale = 0.25 / 0.25f64.atanh();
        let prior = FactorizedPrior::new(vec![0.0], vec![scale.ln()]);
        let mut tape = Tape::new();
        let pv = prior_constants(&mut tape, &prior);
        let x = constant(&mut tape, vec![1, 3, 1, 1], 0.0);
        let y = constant(&mut tape, vec![1, 3, 1, 1], 0.1);
        let z = constant(&mut tape, vec![1, 1, 1, 1], 0.0);
        let terms = rd_loss(&mut tape, x, y, z, pv, 0.001).unwrap();
        assert!((tape.value(terms.rate_bits).item() - 2.0).abs() < 1e-12);
        assert!((tape.value(terms.loss).item() - 0.012).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_is_pure_mse() {
        let mut tape = Tape::new();
        let pv = prior_constants(&mut tape, &FactorizedPrior::standard(2));
        let x = tape.constant(synth::scene(1, 8, 8).cast::<f64>().reshape(vec![1, 3, 8, 8]).unwrap());
        let y = constant(&mut tape, vec![1, 3, 8, 8], 0.5);
        let z = constant(&mut tape, vec![1, 2, 1, 1], 3.0);
        let t = rd_loss(&mut tape, x, y, z, pv, 0.0).unwrap();
        assert_eq!(tape.value(t.loss).item(), tape.value(t.mse).item());
        let (loss, mse, _) = beta_vae_loss(
            &mut tape,
            LossMode::BetaVae,
            x,
            y,
            GaussianPosterior { mean: z, log_var: z },
            0.0,
        )
        .unwrap();
        assert_eq!(tape.value(loss).item(), tape.value(mse).item());
    }

    #[test]
    fn kl_closed_form_values() {
        let mut tape = Tape::new();
        let x = constant(&mut tape, vec![1, 3, 1, 1], 0.0);
        let zero = constant(&mut tape, vec![1, 1, 1, 1], 0.0);
        let one = constant(&mut tape, vec![1, 1, 1, 1], 1.0);
        let prior = GaussianPosterior { mean: zero, log_var: zero };
        let (_, _, kl) = beta_vae_loss(&mut tape, LossMode::BetaVae, x, x, prior, 1.0).unwrap();
        assert_eq!(tape.value(kl).item(), 0.0);
        let shifted = GaussianPosterior { mean: one, log_var: zero };
        let (loss, _, kl) = beta_vae_loss(&mut tape, LossMode::BetaVae, x, x, shifted, 2.0).unwrap();
        assert!((tape.value(kl).item() - 0.5).abs() < 1e-15);
        assert!((tape.value(loss).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn beta_vae_loss_refuses_other_modes() {
        let mut tape = Tape::<f64>::new();
        let x = constant(&mut tape, vec![1, 3, 1, 1], 0.0);
        let z = constant(&mut tape, vec![1, 1, 1, 1], 0.0);
        let p = GaussianPosterior { mean: z, log_var: z };
        let err = beta_vae_loss(&mut tape, LossMode::RateDistortion, x, x, p, 1.0).unwrap_err();
        assert!(matches!(err, TrainError::WrongMode(LossMode::RateDistortion)));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rand = |shape: Vec<usize>, lo: f64, hi: f64| Tensor::from_fn(shape, |_| rng.random_range(lo..hi));
            let inputs = [
                rand(vec![2, 3, 4, 4], 0.0, 1.0),
                rand(vec![2, 3, 4, 4], 0.0, 1.0),
                rand(vec![2, 3, 2, 2], -3.0, 3.0),
                rand(vec![3], -1.0, 1.0),
                rand(vec![3], -0.5, 0.5),
            ];
            let rd = gradcheck::check(&inputs, |tape, v| {
                let prior = PriorVars { location: v[3], log_scale: v[4] };
                Ok(rd_loss(tape, v[0], v[1], v[2], prior, 0.01)?.loss)
            })
            .unwrap();
            assert!(gradcheck::max_relative_error(&rd) < 1e-4, "rd seed {seed}: {rd:?}");
            let kl = gradcheck::check(&inputs[..4], |tape, v| {
                let log_var = tape.slice_channels(v[2], 0, 1)?;
                let mean = tape.slice_channels(v[2], 1, 1)?;
                let p = GaussianPosterior { mean, log_var };
                beta_vae_loss(tape, LossMode::BetaVae, v[0], v[1], p, 0.01)
                    .map(|(loss, _, _)| loss)
                    .map_err(|e| match e {
                        TrainError::Tensor(t) => t,
                        other => panic!("{other}"),
                    })
            })
            .unwrap();
            assert!(gradcheck::max_relative_error(&kl) < 1e-4, "kl seed {seed}: {kl:?}");
        }
    }

    #[test]
    fn training_is_reproducible_from_the_seed() {
        let data = tiny_data();
        let a = train(&tiny_config(), &data).unwrap();
        let b = train(&tiny_config(), &data).unwrap();
        assert_eq!(a.telemetry, b.telemetry);
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        let other = TrainConfig { seed: 1, ..tiny_config() };
        assert_ne!(train(&other, &data).unwrap().checkpoint.model_id(), a.checkpoint.model_id());
        assert_eq!(a.telemetry.len(), 6);
        assert_eq!(a.checkpoint.metadata.steps, 6);
    }

    #[test]
    fn beta_vae_mode_trains() {
        let config = TrainConfig { loss_mode: LossMode::BetaVae, ..tiny_config() };
        let out = train(&config, &tiny_data()).unwrap();
        assert!(out.telemetry.iter().all(|t| t.rate_bpp >= 0.0 && t.loss.is_finite()));
        assert_eq!(out.checkpoint.model.head(), PosteriorHead::Gaussian);
        assert_eq!(out.checkpoint.model.prior(), FactorizedPrior::standard(4));
    }

    struct Poisoned;

    impl BatchSampler for Poisoned {
        fn sample_batch(&self, batch_size: usize, _: &mut ChaCha8Rng) -> Tensor<f32> {
            Tensor::new(vec![batch_size, 3, 16, 16], vec![f32::NAN; batch_size * 768]).unwrap()
        }

        fn patch_size(&self) -> usize {
            16
        }
    }

    #[test]
    fn non_finite_loss_aborts() {
        let err = train(&tiny_config(), &Poisoned).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { step: 0, .. }), "{err}");
    }

    #[test]
    fn config_errors() {
        let data = tiny_data();
        for bad in [
            TrainConfig { lambda: -1.0, ..tiny_config() },
            TrainConfig { patch_size: 12, ..tiny_config() },
            TrainConfig { steps: 0, ..tiny_config() },
            TrainConfig { learning_rate: 0.0, ..tiny_config() },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::Config(_))), "{bad:?}");
        }
        let mismatched = TrainConfig { patch_size: 8, ..tiny_config() };
        assert!(matches!(train(&mismatched, &data), Err(TrainError::Config(_))));
        let narrow = TrainConfig { hidden_channels: 2, ..tiny_config() };
        assert!(matches!(narrow.validate(), Err(TrainError::Model(_))));
    }

    #[test]
    fn set_parses_each_key() {
        let mut c = TrainConfig::default();
        for (k, v) in [
            ("lambda", "0.01"),
            ("latent-channels", "8"),
            ("hidden_channels", "16"),
            ("patch_size", "32"),
            ("batch_size", "4"),
            ("steps", "10"),
            ("learning_rate", "0.002"),
            ("seed", "7"),
            ("loss_mode", "beta_vae"),
        ] {
            c.set(k, v).unwrap();
        }
        let expected = TrainConfig {
            lambda: 0.01,
            latent_channels: 8,
            hidden_channels: 16,
            patch_size: 32,
            batch_size: 4,
            steps: 10,
            learning_rate: 0.002,
            seed: 7,
            loss_mode: LossMode::BetaVae,
        };
        assert_eq!(c, expected);
        assert!(c.set("nope", "1").unwrap_err().contains("nope"));
        assert!(c.set("steps", "many").is_err());
        assert!(c.set("loss_mode", "l1").is_err());
        assert_eq!("rd".parse::<LossMode>().unwrap(), LossMode::RateDistortion);
        assert_eq!(LossMode::BetaVae.to_string(), "beta_vae");
    }

    #[test]
    fn sweep_reports_each_grid_point() {
        let eval = synth::corpus(3, 2, 16, 16);
        let base = TrainConfig { steps: 2, ..tiny_config() };
        let mut seen = Vec::new();
        let points = sweep_with(&base, &[2, 4], &tiny_data(), &eval, |p, ck| {
            seen.push((p.latent_channels, ck.model.spec().latent_channels))
        })
        .unwrap();
        assert_eq!(seen, vec![(2, 2), (4, 4)]);
        assert!(points.iter().all(|p| p.bpp > 0.0 && p.ssim <= 1.0));
        assert!(matches!(sweep(&base, &[], &tiny_data(), &eval), Err(TrainError::Config(_))));
        assert!(matches!(sweep(&base, &[2], &tiny_data(), &[]), Err(TrainError::EmptyEvalSet)));
        let bad = sweep(&base, &[64], &tiny_data(), &eval).unwrap_err();
        assert!(matches!(bad, TrainError::GridPoint { latent_channels: 64, .. }));
    }

    #[test]
    fn sweep_csv_is_sorted() {
        let p = |latent_channels, psnr| RdPoint { latent_channels, bpp: 1.5, mse: 0.0, psnr, ssim: 1.0 };
        let mut out = Vec::new();
        write_sweep_csv(&[p(16, f64::INFINITY), p(4, 30.0)], &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "latent_channels,bpp,mse,psnr,ssim\n4,1.5,0,30,1\n16,1.5,0,inf,1\n"
        );
    }

    #[test]
    fn telemetry_row_format() {
        let t = StepTelemetry { step: 3, loss: 0.5, mse: 0.25, rate_bpp: 1.0 };
        assert_eq!(t.csv_row(), "3,0.5,0.25,1");
        assert_eq!(TELEMETRY_HEADER.split(',').count(), 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn rd_loss_is_monotone_in_lambda(seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let pv = prior_constants(&mut tape, &FactorizedPrior::standard(2));
            let mut v = |shape: Vec<usize>, s: f64| tape.constant(Tensor::from_fn(shape, |_| rng.random_range(0.0..s)));
            let (x, y, z) = (v(vec![1, 3, 4, 4], 1.0), v(vec![1, 3, 4, 4], 1.0), v(vec![1, 2, 2, 2], 4.0));
            let (lo, hi) = (a.min(b), a.max(b));
            let l_lo = rd_loss(&mut tape, x, y, z, pv, lo).unwrap().loss;
            let l_hi = rd_loss(&mut tape, x, y, z, pv, hi).unwrap().loss;
            prop_assert!(tape.value(l_lo).item() <= tape.value(l_hi).item());
        }
    }
}
