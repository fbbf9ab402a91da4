//! Fully convolutional encoder/decoder pair around the entropy bottleneck.
//!
//! Encoder: three 5x5 stride-2 convolutions, `input -> hidden/2 -> hidden ->
//! latent`, leaky ReLU between layers and nothing after the last. The decoder
//! mirrors it with transposed convolutions and ends in a sigmoid. No
//! normalization layers, no hyperprior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::entropy::{FactorizedPrior, PriorVars};
use crate::tensor::{ParamStore, Real, Tape, Tensor, TensorError, Var};

pub const KERNEL_SIZE: usize = 5;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 2;
pub const OUTPUT_PADDING: usize = 1;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const DOWNSAMPLE_FACTOR: usize = 8;
const LAYERS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("image extent {extent} is not divisible by the downsample factor {factor}")]
    Divisibility { extent: usize, factor: usize },
    #[error("pixel values must lie in [0, 1] (found {0})")]
    PixelRange(f64),
    #[error("latent shape {got:?} does not match the model (expected {expected})")]
    LatentShape { got: Vec<usize>, expected: String },
    #[error("model has no Gaussian posterior head")]
    NoGaussianHead,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ArchitectureSpec {
    pub latent_channels: usize,
    pub hidden_channels: usize,
    pub input_channels: usize,
    pub downsample_factor: usize,
}

impl ArchitectureSpec {
    /// RGB input, the fixed downsample factor of the three stride-2 layers.
    pub fn new(latent_channels: usize, hidden_channels: usize) -> Result<Self, ModelError> {
        let spec = Self {
            latent_channels,
            hidden_channels,
            input_channels: 3,
            downsample_factor: DOWNSAMPLE_FACTOR,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.latent_channels == 0 || self.input_channels == 0 {
            return Err(ModelError::InvalidSpec("channel counts must be positive".into()));
        }
        if self.hidden_channels < self.latent_channels {
            return Err(ModelError::InvalidSpec(format!(
                "hidden_channels {} < latent_channels {}",
                self.hidden_channels, self.latent_channels
            )));
        }
        if self.hidden_channels < 2 {
            return Err(ModelError::InvalidSpec("hidden_channels must be at least 2".into()));
        }
        if self.downsample_factor != DOWNSAMPLE_FACTOR {
            return Err(ModelError::InvalidSpec(format!(
                "downsample_factor must be {DOWNSAMPLE_FACTOR}"
            )));
        }
        Ok(())
    }

    /// Channel counts at each encoder stage boundary, input first.
    fn encoder_channels(&self) -> [usize; LAYERS + 1] {
        [
            self.input_channels,
            self.hidden_channels / 2,
            self.hidden_channels,
            self.latent_channels,
        ]
    }

    pub fn check_extents(&self, height: usize, width: usize) -> Result<(), ModelError> {
        for extent in [height, width] {
            if extent == 0 || extent % self.downsample_factor != 0 {
                return Err(ModelError::Divisibility {
                    extent,
                    factor: self.downsample_factor,
                });
            }
        }
        Ok(())
    }
}

/// How the encoder output is turned into a latent sample during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PosteriorHead {
    /// Deterministic latent plus Uniform(-1/2, 1/2) noise.
    #[default]
    Uniform,
    /// Extra log-variance head for the Gaussian (beta-VAE) objective.
    Gaussian,
}

/// Latent values on the `h x w` grid, optionally rounded.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor<T> {
    pub values: Tensor<T>,
    pub quantized: bool,
}

impl<T: Real> LatentTensor<T> {
    pub fn continuous(values: Tensor<T>) -> Self {
        Self {
            values,
            quantized: false,
        }
    }

    /// Integer symbols in storage order (channel-major within each image).
    pub fn symbols(&self) -> Vec<i64> {
        self.values
            .data()
            .iter()
            .map(|v| v.to_f64().unwrap() as i64)
            .collect()
    }

    pub fn from_symbols(shape: Vec<usize>, symbols: &[i64]) -> Result<Self, ModelError> {
        let values = Tensor::new(shape, symbols.iter().map(|&s| T::from_i64(s).unwrap()).collect())?;
        Ok(Self {
            values,
            quantized: true,
        })
    }
}

/// Round half away from zero, elementwise. Idempotent.
pub fn quantize<T: Real>(latent: &LatentTensor<T>) -> LatentTensor<T> {
    LatentTensor {
        values: latent.values.map(T::round),
        quantized: true,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerSlots {
    weight: usize,
    bias: usize,
}

/// Parameter slots recorded on a tape for one forward pass.
#[derive(Clone, Debug)]
pub struct BoundModel {
    vars: Vec<Var>,
}

impl BoundModel {
    pub fn var(&self, slot: usize) -> Var {
        self.vars[slot]
    }
}

#[derive(Clone, Debug)]
pub struct VaeModel<T> {
    spec: ArchitectureSpec,
    head: PosteriorHead,
    params: ParamStore<T>,
    encoder: Vec<LayerSlots>,
    decoder: Vec<LayerSlots>,
    log_var: Option<LayerSlots>,
    prior_location: usize,
    prior_log_scale: usize,
}

fn layer_names(prefix: &str, index: usize) -> (String, String) {
    (format!("{prefix}.{index}.weight"), format!("{prefix}.{index}.bias"))
}

impl<T: Real> VaeModel<T> {
    /// Fresh model: weights uniform in `+-sqrt(1 / fan_in)`, zero biases,
    /// standard logistic prior.
    pub fn new(spec: ArchitectureSpec, head: PosteriorHead, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let k = KERNEL_SIZE;
        let mut init = |params: &mut ParamStore<T>, name: String, shape: Vec<usize>, fan_in: usize| {
            let bound = (1.0 / fan_in as f64).sqrt();
            let t = Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)));
            params.insert(name, t)
        };
        let ch = spec.encoder_channels();

        let mut encoder = Vec::with_capacity(LAYERS);
        for i in 0..LAYERS {
            let (wn, bn) = layer_names("encoder", i);
            let weight = init(&mut params, wn, vec![ch[i + 1], ch[i], k, k], ch[i] * k * k);
            let bias = params.insert(bn, Tensor::zeros(vec![ch[i + 1]]));
            encoder.push(LayerSlots { weight, bias });
        }
        let log_var = match head {
            PosteriorHead::Uniform => None,
            PosteriorHead::Gaussian => {
                let weight = init(
                    &mut params,
                    "posterior.log_var.weight".into(),
                    vec![ch[LAYERS], ch[LAYERS - 1], k, k],
                    ch[LAYERS - 1] * k * k,
                );
                let bias = params.insert("posterior.log_var.bias", Tensor::zeros(vec![ch[LAYERS]]));
                Some(LayerSlots { weight, bias })
            }
        };
        // Decoder layer i maps ch[LAYERS - i] -> ch[LAYERS - i - 1]; transposed
        // kernels are laid out (in, out, k, k).
        let mut decoder = Vec::with_capacity(LAYERS);
        for i in 0..LAYERS {
            let (cin, cout) = (ch[LAYERS - i], ch[LAYERS - i - 1]);
            let (wn, bn) = layer_names("decoder", i);
            let weight = init(&mut params, wn, vec![cin, cout, k, k], cin * k * k);
            let bias = params.insert(bn, Tensor::zeros(vec![cout]));
            decoder.push(LayerSlots { weight, bias });
        }
        let prior_location = params.insert("prior.location", Tensor::zeros(vec![spec.latent_channels]));
        let prior_log_scale = params.insert("prior.log_scale", Tensor::zeros(vec![spec.latent_channels]));
        Ok(Self {
            spec,
            head,
            params,
            encoder,
            decoder,
            log_var,
            prior_location,
            prior_log_scale,
        })
    }

    /// Rebuilds a model from named tensors, checking every name and shape.
    pub fn from_tensors(
        spec: ArchitectureSpec,
        head: PosteriorHead,
        tensors: Vec<(String, Tensor<T>)>,
    ) -> Result<Self, ModelError> {
        let mut model = Self::new(spec, head, 0)?;
        if tensors.len() != model.params.len() {
            return Err(ModelError::InvalidSpec(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (name, tensor) in tensors {
            let slot = model
                .params
                .slot_of(&name)
                .ok_or_else(|| ModelError::InvalidSpec(format!("unknown parameter `{name}`")))?;
            let p = model.params.get_mut(slot);
            if p.tensor.shape() != tensor.shape() {
                return Err(ModelError::InvalidSpec(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    tensor.shape(),
                    p.tensor.shape()
                )));
            }
            *p = crate::tensor::Parameter::new(name, tensor);
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn head(&self) -> PosteriorHead {
        self.head
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> VaeModel<U> {
        let tensors = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.cast::<U>()))
            .collect();
        VaeModel::from_tensors(self.spec, self.head, tensors).expect("same layout")
    }

    /// Current prior as plain `f64` values.
    pub fn prior(&self) -> FactorizedPrior {
        let to_vec = |slot: usize| -> Vec<f64> {
            self.params
                .get(slot)
                .tensor
                .data()
                .iter()
                .map(|v| v.to_f64().unwrap())
                .collect()
        };
        FactorizedPrior::new(to_vec(self.prior_location), to_vec(self.prior_log_scale))
    }

    /// Records the parameters on `tape`; `trainable` decides whether they
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundModel {
        let vars = if trainable {
            self.params.bind(tape)
        } else {
            self.params.bind_frozen(tape)
        };
        BoundModel { vars }
    }

    pub fn prior_vars(&self, bound: &BoundModel) -> PriorVars {
        PriorVars {
            location: bound.var(self.prior_location),
            log_scale: bound.var(self.prior_log_scale),
        }
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<(), ModelError> {
        let (_, c, h, w) = image.dims4().ok_or_else(|| ModelError::InvalidSpec(format!(
            "image must be NCHW, got {:?}",
            image.shape()
        )))?;
        if c != self.spec.input_channels {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                lhs: image.shape().to_vec(),
                rhs: vec![self.spec.input_channels],
            }
            .into());
        }
        self.spec.check_extents(h, w)
    }

    fn encoder_trunk(&self, tape: &mut Tape<T>, bound: &BoundModel, image: Var) -> Result<Var, ModelError> {
        let slope = T::lit(LEAKY_SLOPE);
        let mut h = image;
        for layer in &self.encoder[..LAYERS - 1] {
            h = tape.conv2d(h, bound.var(layer.weight), STRIDE, PADDING)?;
            h = tape.bias_add(h, bound.var(layer.bias))?;
            h = tape.leaky_relu(h, slope);
        }
        Ok(h)
    }

    fn conv_layer(&self, tape: &mut Tape<T>, bound: &BoundModel, input: Var, layer: LayerSlots) -> Result<Var, ModelError> {
        let h = tape.conv2d(input, bound.var(layer.weight), STRIDE, PADDING)?;
        Ok(tape.bias_add(h, bound.var(layer.bias))?)
    }

    /// `z = f(x)` on the tape.
    pub fn encode_on(&self, tape: &mut Tape<T>, bound: &BoundModel, image: Var) -> Result<Var, ModelError> {
        self.check_image(tape.value(image))?;
        let h = self.encoder_trunk(tape, bound, image)?;
        self.conv_layer(tape, bound, h, self.encoder[LAYERS - 1])
    }

    /// Gaussian posterior `(mean, log_var)` on the tape.
    pub fn posterior_on(&self, tape: &mut Tape<T>, bound: &BoundModel, image: Var) -> Result<(Var, Var), ModelError> {
        let log_var_layer = self.log_var.ok_or(ModelError::NoGaussianHead)?;
        self.check_image(tape.value(image))?;
        let h = self.encoder_trunk(tape, bound, image)?;
        let mean = self.conv_layer(tape, bound, h, self.encoder[LAYERS - 1])?;
        let log_var = self.conv_layer(tape, bound, h, log_var_layer)?;
        Ok((mean, log_var))
    }

    /// `x_hat = g(z)` on the tape.
    pub fn decode_on(&self, tape: &mut Tape<T>, bound: &BoundModel, latent: Var) -> Result<Var, ModelError> {
        let shape = tape.value(latent).shape().to_vec();
        match shape[..] {
            [_, c, h, w] if c == self.spec.latent_channels && h > 0 && w > 0 => {}
            _ => {
                return Err(ModelError::LatentShape {
                    got: shape,
                    expected: format!("N x {} x h x w", self.spec.latent_channels),
                })
            }
        }
        let slope = T::lit(LEAKY_SLOPE);
        let mut h = latent;
        for (i, layer) in self.decoder.iter().enumerate() {
            h = tape.transposed_conv2d(h, bound.var(layer.weight), STRIDE, PADDING, OUTPUT_PADDING)?;
            h = tape.bias_add(h, bound.var(layer.bias))?;
            h = if i + 1 < LAYERS {
                tape.leaky_relu(h, slope)
            } else {
                tape.sigmoid(h)
            };
        }
        Ok(h)
    }

    /// Continuous latent of an NCHW image batch with pixels in [0, 1].
    pub fn encode(&self, image: &Tensor<T>) -> Result<LatentTensor<T>, ModelError> {
        if let Some(bad) = image
            .data()
            .iter()
            .map(|v| v.to_f64().unwrap())
            .find(|v| !(0.0..=1.0).contains(v))
        {
            return Err(ModelError::PixelRange(bad));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let z = self.encode_on(&mut tape, &bound, x)?;
        Ok(LatentTensor::continuous(tape.value(z).clone()))
    }

    /// Reconstruction in (0, 1) from a quantized or continuous latent.
    pub fn decode(&self, latent: &LatentTensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let z = tape.constant(latent.values.clone());
        let x = self.decode_on(&mut tape, &bound, z)?;
        Ok(tape.value(x).clone())
    }

    /// Latent grid extents for an image of `height x width`.
    pub fn latent_extents(&self, height: usize, width: usize) -> (usize, usize) {
        (height / self.spec.downsample_factor, width / self.spec.downsample_factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use proptest::prelude::*;
    use rand::Rng;

    fn model(latent: usize, hidden: usize, seed: u64) -> VaeModel<f64> {
        VaeModel::new(ArchitectureSpec::new(latent, hidden).unwrap(), PosteriorHead::Uniform, seed).unwrap()
    }

    fn image(seed: u64, n: usize, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![n, 3, h, w], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn spec_validation() {
        assert!(ArchitectureSpec::new(128, 256).is_ok());
        assert!(matches!(ArchitectureSpec::new(16, 8), Err(ModelError::InvalidSpec(_))));
        assert!(matches!(ArchitectureSpec::new(0, 8), Err(ModelError::InvalidSpec(_))));
        let spec = ArchitectureSpec::new(4, 8).unwrap();
        assert!(spec.check_extents(64, 24).is_ok());
        assert_eq!(
            spec.check_extents(64, 20),
            Err(ModelError::Divisibility { extent: 20, factor: 8 })
        );
    }

    #[test]
    fn latent_shape_for_a_64px_image() {
        let m = model(16, 32, 0);
        let z = m.encode(&image(1, 2, 64, 64)).unwrap();
        assert_eq!(z.values.shape(), &[2, 16, 8, 8]);
        assert!(!z.quantized);
        assert_eq!(m.latent_extents(64, 64), (8, 8));
    }

    #[test]
    fn encode_is_deterministic_and_checks_inputs() {
        let m = model(4, 8, 1);
        let x = image(2, 1, 16, 24);
        assert_eq!(m.encode(&x).unwrap(), m.encode(&x).unwrap());
        let odd = image(2, 1, 16, 20);
        assert!(m.encode(&odd).unwrap_err().to_string().contains('8'));
        let bright = x.map(|v| v + 1.0);
        assert!(matches!(m.encode(&bright), Err(ModelError::PixelRange(_))));
    }

    #[test]
    fn decode_restores_the_image_shape() {
        let m = model(8, 16, 3);
        for (h, w) in [(8, 8), (16, 40), (32, 24)] {
            let x = image(4, 2, h, w);
            let y = m.decode(&m.encode(&x).unwrap()).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let wrong = LatentTensor::continuous(Tensor::zeros(vec![1, 7, 2, 2]));
        assert!(matches!(m.decode(&wrong), Err(ModelError::LatentShape { .. })));
    }

    #[test]
    fn zero_latent_decodes_to_a_constant_image() {
        let m = model(4, 8, 5);
        let y = m.decode(&LatentTensor::continuous(Tensor::zeros(vec![1, 4, 3, 3]))).unwrap();
        let first = y.data()[0];
        assert!(y.data().iter().all(|&v| v == first));
        assert_eq!(first, 0.5);
    }

    #[test]
    fn random_init_latents_stay_bounded() {
        for seed in 0..100 {
            let m = model(8, 16, seed);
            let z = m.encode(&image(seed + 1000, 1, 16, 16)).unwrap();
            assert!(z.values.data().iter().all(|v| v.is_finite() && v.abs() < 1e4));
        }
    }

    #[test]
    fn single_latent_perturbation_is_finite() {
        let m = model(4, 8, 7);
        let z = m.encode(&image(8, 1, 16, 16)).unwrap();
        let base = m.decode(&z).unwrap();
        for i in 0..z.values.len() {
            let mut p = z.clone();
            p.values.data_mut()[i] += 1.0;
            let y = m.decode(&p).unwrap();
            let d: f64 = y.data().iter().zip(base.data()).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(d.is_finite());
        }
    }

    #[test]
    fn quantize_rounds_half_away_from_zero() {
        let z = LatentTensor::continuous(Tensor::new(vec![6], vec![0.4, -1.7, 1.5, -0.5, 2.5, -2.49]).unwrap());
        let q = quantize(&z);
        assert!(q.quantized);
        assert_eq!(q.values.data(), &[0.0, -2.0, 2.0, -1.0, 3.0, -2.0]);
        assert_eq!(quantize(&q), q);
        assert_eq!(q.symbols(), vec![0, -2, 2, -1, 3, -2]);
    }

    #[test]
    fn symbols_round_trip_through_from_symbols() {
        let l = LatentTensor::<f32>::from_symbols(vec![1, 2, 1, 2], &[3, -4, 0, 7]).unwrap();
        assert_eq!(l.symbols(), vec![3, -4, 0, 7]);
        assert!(LatentTensor::<f32>::from_symbols(vec![1, 2, 1, 2], &[1]).is_err());
    }

    #[test]
    fn from_tensors_checks_names_and_shapes() {
        let m = model(4, 8, 9);
        let tensors: Vec<_> = m.params().iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
        let back = VaeModel::from_tensors(*m.spec(), m.head(), tensors.clone()).unwrap();
        let x = image(1, 1, 8, 8);
        assert_eq!(back.encode(&x).unwrap(), m.encode(&x).unwrap());
        let mut renamed = tensors.clone();
        renamed[0].0 = "bogus".into();
        assert!(VaeModel::from_tensors(*m.spec(), m.head(), renamed).is_err());
        let mut reshaped = tensors;
        reshaped[0].1 = Tensor::zeros(vec![1]);
        assert!(VaeModel::from_tensors(*m.spec(), m.head(), reshaped).is_err());
    }

    #[test]
    fn gaussian_head_only_when_requested() {
        let spec = ArchitectureSpec::new(4, 8).unwrap();
        let plain = VaeModel::<f64>::new(spec, PosteriorHead::Uniform, 0).unwrap();
        let gauss = VaeModel::<f64>::new(spec, PosteriorHead::Gaussian, 0).unwrap();
        assert_eq!(gauss.params().len(), plain.params().len() + 2);
        let mut tape = Tape::new();
        let b = plain.bind(&mut tape, false);
        let x = tape.constant(image(0, 1, 8, 8));
        assert!(matches!(plain.posterior_on(&mut tape, &b, x), Err(ModelError::NoGaussianHead)));
    }

    #[test]
    fn init_is_bounded_by_fan_in() {
        let m = model(8, 16, 11);
        for p in m.params().iter() {
            if p.name.ends_with(".bias") {
                assert!(p.tensor.data().iter().all(|&v| v == 0.0), "{}", p.name);
            } else if p.name.ends_with(".weight") {
                let s = p.tensor.shape();
                let bound = (1.0 / (s[1] * s[2] * s[3]) as f64).sqrt();
                let fan_in_t = (1.0 / (s[0] * s[2] * s[3]) as f64).sqrt();
                let b = if p.name.starts_with("decoder") { fan_in_t } else { bound };
                assert!(p.tensor.data().iter().all(|v| v.abs() <= b), "{}", p.name);
            }
        }
        assert_eq!(m.prior(), crate::entropy::FactorizedPrior::standard(8));
    }

    #[test]
    fn model_parameter_gradients() {
        // Seed 1 puts a pre-activation within STEP of the leaky ReLU kink.
        for seed in [0, 2, 3] {
            let m = model(2, 4, seed);
            let names: Vec<String> = m.params().iter().map(|p| p.name.clone()).collect();
            let inputs: Vec<Tensor<f64>> = m.params().iter().map(|p| p.tensor.clone()).collect();
            let x = image(seed, 1, 8, 8);
            let reports = gradcheck::check(&inputs, |tape, vars| {
                let bound = BoundModel { vars: vars.to_vec() };
                let xv = tape.constant(x.clone());
                let z = m.encode_on(tape, &bound, xv).map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
                let y = m.decode_on(tape, &bound, z).map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
                let mse = tape.mse(y, xv)?;
                let rate = crate::entropy::rate_bits(tape, z, m.prior_vars(&bound))?;
                let r = tape.scale(rate, 0.01);
                tape.add(mse, r)
            })
            .unwrap();
            for (name, r) in names.iter().zip(&reports) {
                // Near-zero gradients are dominated by finite-difference noise.
                let abs_err = r.relative_error * r.analytic_norm;
                assert!(r.relative_error < 1e-4 || abs_err < 1e-9, "seed {seed} {name}: {r:?}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn quantization_error_is_at_most_half(values in prop::collection::vec(-1e4f64..1e4, 1..64)) {
            let z = LatentTensor::continuous(Tensor::new(vec![values.len()], values.clone()).unwrap());
            let q = quantize(&z);
            for (a, b) in q.values.data().iter().zip(&values) {
                prop_assert!((a - b).abs() <= 0.5);
                prop_assert_eq!(a.fract(), 0.0);
            }
        }

        #[test]
        fn shape_round_trip(hb in 1usize..4, wb in 1usize..4, latent in 1usize..6) {
            let m = model(latent, latent.max(2) + 1, 0);
            let x = image(1, 1, hb * 8, wb * 8);
            let y = m.decode(&m.encode(&x).unwrap()).unwrap();
            prop_assert_eq!(y.shape(), x.shape());
        }
    }
}
