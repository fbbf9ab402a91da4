//! Factorized logistic prior over integer latents.
//!
//! Training uses the differentiable bin likelihood on the tape; compression
//! freezes each channel into a 16-bit cumulative table with an escape symbol.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

/// Probabilities below this are clamped before taking logs.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;
pub const PRECISION_BITS: u32 = 16;
pub const TOTAL_COUNT: u32 = 1 << PRECISION_BITS;
pub const DEFAULT_TAIL_MASS: f64 = 1e-4;
/// Widest in-support range a frozen table may have; anything outside escapes.
pub const MAX_SUPPORT: usize = 4096;
/// Width of the raw value that follows an escape symbol.
pub const ESCAPE_RAW_BITS: u32 = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EntropyError {
    #[error("histogram has no observations")]
    EmptyHistogram,
    #[error("invalid table: {0}")]
    InvalidTable(String),
    #[error("tail mass {0} outside (0, 0.01]")]
    TailMass(f64),
    #[error("prior has {prior} channels, latent has {latent}")]
    ChannelMismatch { prior: usize, latent: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One logistic density per latent channel, shared across spatial positions.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedPrior {
    pub location: Vec<f64>,
    pub log_scale: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    libm::log(p / (1.0 - p))
}

impl FactorizedPrior {
    pub fn new(location: Vec<f64>, log_scale: Vec<f64>) -> Self {
        assert_eq!(location.len(), log_scale.len());
        Self {
            location,
            log_scale,
        }
    }

    /// Zero location, unit scale.
    pub fn standard(channels: usize) -> Self {
        Self::new(vec![0.0; channels], vec![0.0; channels])
    }

    pub fn channels(&self) -> usize {
        self.location.len()
    }

    pub fn scale(&self, channel: usize) -> f64 {
        libm::exp(self.log_scale[channel])
    }

    /// Mass of `[z - 1/2, z + 1/2]` under channel `channel` (no floor).
    pub fn bin_mass(&self, channel: usize, z: f64) -> f64 {
        bin_mass(z, self.location[channel], self.scale(channel))
    }

    /// `P(k)` for an integer symbol, floored like the training likelihood.
    pub fn pmf(&self, channel: usize, k: i64) -> f64 {
        self.bin_mass(channel, k as f64).max(LIKELIHOOD_FLOOR)
    }

    /// A single channel viewed as a symbol model.
    pub fn channel(&self, channel: usize) -> PriorChannel<'_> {
        PriorChannel {
            prior: self,
            channel,
        }
    }
}

/// Logistic bin mass, evaluated on the side of the mode where it does not
/// cancel.
pub fn bin_mass(z: f64, loc: f64, scale: f64) -> f64 {
    let d = -(z - loc).abs();
    sigmoid((d + 0.5) / scale) - sigmoid((d - 0.5) / scale)
}

/// Tape handles for the two prior parameter vectors.
#[derive(Clone, Copy, Debug)]
pub struct PriorVars {
    pub location: Var,
    pub log_scale: Var,
}

/// Per-element bin probability of `latent` (channel axis 1), floored at
/// [`LIKELIHOOD_FLOOR`].
pub fn likelihood<T: Real>(tape: &mut Tape<T>, latent: Var, prior: PriorVars) -> Result<Var, TensorError> {
    tape.logistic_likelihood(latent, prior.location, prior.log_scale, T::lit(LIKELIHOOD_FLOOR))
}

/// Total bits `sum(-log2 P)` over every latent element.
pub fn rate_bits<T: Real>(tape: &mut Tape<T>, latent: Var, prior: PriorVars) -> Result<Var, TensorError> {
    let p = likelihood(tape, latent, prior)?;
    let ln_p = tape.ln(p);
    let total = tape.sum(ln_p);
    Ok(tape.scale(total, T::lit(-std::f64::consts::LOG2_E)))
}

/// Records `prior` as constants on `tape`.
pub fn prior_constants<T: Real>(tape: &mut Tape<T>, prior: &FactorizedPrior) -> PriorVars {
    let c = prior.channels();
    let loc = Tensor::from_fn(vec![c], |i| T::lit(prior.location[i]));
    let ls = Tensor::from_fn(vec![c], |i| T::lit(prior.log_scale[i]));
    PriorVars {
        location: tape.constant(loc),
        log_scale: tape.constant(ls),
    }
}

/// Likelihood values without gradients.
pub fn likelihood_values<T: Real>(latent: &Tensor<T>, prior: &FactorizedPrior) -> Result<Tensor<T>, EntropyError> {
    check_channels(latent, prior)?;
    let mut tape = Tape::new();
    let pv = prior_constants(&mut tape, prior);
    let z = tape.constant(latent.clone());
    let p = likelihood(&mut tape, z, pv)?;
    Ok(tape.value(p).clone())
}

/// Total estimated bits without gradients.
pub fn rate_bits_value<T: Real>(latent: &Tensor<T>, prior: &FactorizedPrior) -> Result<f64, EntropyError> {
    check_channels(latent, prior)?;
    let mut tape = Tape::new();
    let pv = prior_constants(&mut tape, prior);
    let z = tape.constant(latent.clone());
    let r = rate_bits(&mut tape, z, pv)?;
    Ok(tape.value(r).item().to_f64().unwrap())
}

fn check_channels<T: Real>(latent: &Tensor<T>, prior: &FactorizedPrior) -> Result<(), EntropyError> {
    let c = latent.shape().get(1).copied().unwrap_or(0);
    if c != prior.channels() {
        return Err(EntropyError::ChannelMismatch {
            prior: prior.channels(),
            latent: c,
        });
    }
    Ok(())
}

/// Uniform(-1/2, 1/2) noise of the given shape, reproducible from `seed`.
pub fn uniform_noise<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.random::<f64>() - 0.5))
}

/// `latent + u`, `u ~ Uniform(-1/2, 1/2)` i.i.d.
pub fn add_uniform_noise<T: Real>(latent: &Tensor<T>, seed: u64) -> Tensor<T> {
    let noise = uniform_noise::<T>(latent.shape(), seed);
    let data = latent
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&z, &u)| z + u)
        .collect();
    Tensor::new(latent.shape().to_vec(), data).expect("same shape")
}

/// Anything that assigns a probability to integer symbols.
pub trait SymbolModel {
    fn probability(&self, symbol: i64) -> f64;
}

/// Empirical symbol counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SymbolHistogram {
    counts: BTreeMap<i64, u64>,
    total: u64,
}

impl SymbolHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_symbols(symbols: impl IntoIterator<Item = i64>) -> Self {
        let mut h = Self::new();
        for s in symbols {
            h.add(s, 1);
        }
        h
    }

    /// Counts for symbols `0, 1, 2, ...`.
    pub fn from_counts(counts: &[u64]) -> Self {
        let mut h = Self::new();
        for (s, &c) in counts.iter().enumerate() {
            h.add(s as i64, c);
        }
        h
    }

    pub fn add(&mut self, symbol: i64, count: u64) {
        if count > 0 {
            *self.counts.entry(symbol).or_default() += count;
            self.total += count;
        }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, u64)> + '_ {
        self.counts.iter().map(|(&s, &c)| (s, c))
    }
}

impl SymbolModel for SymbolHistogram {
    fn probability(&self, symbol: i64) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.counts.get(&symbol).copied().unwrap_or(0) as f64 / self.total as f64
    }
}

/// One channel of a [`FactorizedPrior`].
#[derive(Clone, Copy, Debug)]
pub struct PriorChannel<'a> {
    prior: &'a FactorizedPrior,
    channel: usize,
}

impl SymbolModel for PriorChannel<'_> {
    fn probability(&self, symbol: i64) -> f64 {
        self.prior.pmf(self.channel, symbol)
    }
}

/// `-sum p log2 p` in bits per symbol.
pub fn entropy_of_source(histogram: &SymbolHistogram) -> Result<f64, EntropyError> {
    if histogram.total() == 0 {
        return Err(EntropyError::EmptyHistogram);
    }
    let n = histogram.total() as f64;
    Ok(histogram
        .iter()
        .map(|(_, c)| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum())
}

/// `E_{x~P}[-log2 Q(x)]` in bits per symbol.
pub fn cross_entropy(histogram: &SymbolHistogram, model: &impl SymbolModel) -> Result<f64, EntropyError> {
    if histogram.total() == 0 {
        return Err(EntropyError::EmptyHistogram);
    }
    let n = histogram.total() as f64;
    Ok(histogram
        .iter()
        .map(|(s, c)| {
            let q = model.probability(s).max(f64::MIN_POSITIVE);
            -(c as f64 / n) * q.log2()
        })
        .sum())
}

/// A frozen 16-bit coding distribution for one channel.
///
/// Symbols `support_min..=support_max` occupy indices `0..n`; index `n` is
/// the escape, followed in the stream by a raw 32-bit value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CmfTable {
    pub channel: usize,
    pub support_min: i32,
    pub support_max: i32,
    /// `n + 2` entries from 0 to [`TOTAL_COUNT`], strictly increasing.
    pub cumulative_counts: Vec<u32>,
}

impl CmfTable {
    /// Builds a table from integer frequencies; the last entry of `counts` is
    /// the escape. The counts must be positive and sum to [`TOTAL_COUNT`].
    pub fn from_counts(channel: usize, support_min: i32, counts: &[u32]) -> Result<Self, EntropyError> {
        if counts.len() < 2 {
            return Err(EntropyError::InvalidTable(
                "need at least one symbol and the escape".into(),
            ));
        }
        if counts.contains(&0) {
            return Err(EntropyError::InvalidTable("zero-frequency symbol".into()));
        }
        let sum: u64 = counts.iter().map(|&c| c as u64).sum();
        if sum != TOTAL_COUNT as u64 {
            return Err(EntropyError::InvalidTable(format!(
                "counts sum to {sum}, expected {TOTAL_COUNT}"
            )));
        }
        let n = counts.len() - 1;
        let support_max = support_min as i64 + n as i64 - 1;
        let support_max = i32::try_from(support_max)
            .map_err(|_| EntropyError::InvalidTable("support exceeds i32".into()))?;
        let mut cumulative_counts = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0u32;
        cumulative_counts.push(0);
        for &c in counts {
            acc += c;
            cumulative_counts.push(acc);
        }
        Ok(Self {
            channel,
            support_min,
            support_max,
            cumulative_counts,
        })
    }

    /// Quantizes non-negative masses (last entry = escape) to a valid table.
    pub fn from_masses(channel: usize, support_min: i32, masses: &[f64]) -> Result<Self, EntropyError> {
        if masses.len() > (TOTAL_COUNT / 2) as usize {
            return Err(EntropyError::InvalidTable(format!(
                "{} symbols exceed the table capacity",
                masses.len()
            )));
        }
        let counts = quantize_masses(masses)?;
        Self::from_counts(channel, support_min, &counts)
    }

    /// Number of in-support symbols (excluding the escape).
    pub fn symbol_count(&self) -> usize {
        self.cumulative_counts.len() - 2
    }

    pub fn escape_index(&self) -> usize {
        self.symbol_count()
    }

    /// Table index for `symbol`, or `None` when it must escape.
    pub fn index_of(&self, symbol: i64) -> Option<usize> {
        if symbol >= self.support_min as i64 && symbol <= self.support_max as i64 {
            Some((symbol - self.support_min as i64) as usize)
        } else {
            None
        }
    }

    pub fn symbol_at(&self, index: usize) -> i64 {
        self.support_min as i64 + index as i64
    }

    /// `(cumulative, frequency)` of table index `index`.
    pub fn interval(&self, index: usize) -> (u32, u32) {
        let lo = self.cumulative_counts[index];
        (lo, self.cumulative_counts[index + 1] - lo)
    }

    pub fn frequency(&self, index: usize) -> u32 {
        self.interval(index).1
    }

    /// Largest index whose cumulative count is `<= target`.
    pub fn lookup(&self, target: u32) -> usize {
        self.cumulative_counts.partition_point(|&c| c <= target) - 1
    }

    /// Quantized probability of an in-support symbol or of the escape index.
    pub fn index_probability(&self, index: usize) -> f64 {
        self.frequency(index) as f64 / TOTAL_COUNT as f64
    }

    /// Ideal code length of `symbol` in bits, escape cost included.
    pub fn code_length_bits(&self, symbol: i64) -> f64 {
        match self.index_of(symbol) {
            Some(i) => -self.index_probability(i).log2(),
            None => -self.index_probability(self.escape_index()).log2() + ESCAPE_RAW_BITS as f64,
        }
    }
}

impl SymbolModel for CmfTable {
    fn probability(&self, symbol: i64) -> f64 {
        (-self.code_length_bits(symbol)).exp2()
    }
}

/// Integer counts summing to [`TOTAL_COUNT`], each at least one, close to
/// `masses / sum(masses) * TOTAL_COUNT`.
fn quantize_masses(masses: &[f64]) -> Result<Vec<u32>, EntropyError> {
    let total: f64 = masses.iter().sum();
    if masses.is_empty() || !total.is_finite() || total <= 0.0 || masses.iter().any(|m| *m < 0.0 || !m.is_finite()) {
        return Err(EntropyError::InvalidTable(
            "masses must be finite, non-negative, with a positive sum".into(),
        ));
    }
    let scale = TOTAL_COUNT as f64 / total;
    let mut counts: Vec<i64> = masses
        .iter()
        .map(|&m| ((m * scale).round() as i64).max(1))
        .collect();
    let mut diff = TOTAL_COUNT as i64 - counts.iter().sum::<i64>();
    // Spread the rounding residue over the largest bins, one count each.
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    while diff != 0 {
        let mut progressed = false;
        for &i in &order {
            if diff > 0 {
                counts[i] += 1;
                diff -= 1;
                progressed = true;
            } else if diff < 0 && counts[i] > 1 {
                counts[i] -= 1;
                diff += 1;
                progressed = true;
            }
            if diff == 0 {
                break;
            }
        }
        if !progressed {
            return Err(EntropyError::InvalidTable("too many symbols for precision".into()));
        }
    }
    Ok(counts.into_iter().map(|c| c as u32).collect())
}

/// Freezes every channel of `prior` into a coding table whose support leaves
/// at most `tail_mass` outside it.
pub fn freeze_cmf(prior: &FactorizedPrior, tail_mass: f64) -> Result<Vec<CmfTable>, EntropyError> {
    if !(tail_mass > 0.0 && tail_mass <= 0.01) {
        return Err(EntropyError::TailMass(tail_mass));
    }
    (0..prior.channels())
        .map(|c| freeze_channel(prior, c, tail_mass))
        .collect()
}

fn freeze_channel(prior: &FactorizedPrior, channel: usize, tail_mass: f64) -> Result<CmfTable, EntropyError> {
    let loc = prior.location[channel];
    let scale = prior.scale(channel);
    let half_width = -scale * logit(tail_mass / 2.0);
    let clamp = |x: f64| x.clamp(i32::MIN as f64 / 2.0, i32::MAX as f64 / 2.0);
    let mut lo = clamp(libm::floor(loc - half_width + 0.5)) as i64;
    let mut hi = clamp(libm::ceil(loc + half_width - 0.5)) as i64;
    if hi < lo {
        hi = lo;
    }
    if (hi - lo + 1) as usize > MAX_SUPPORT {
        let centre = clamp(libm::round(loc)) as i64;
        lo = centre - (MAX_SUPPORT as i64) / 2;
        hi = lo + MAX_SUPPORT as i64 - 1;
    }
    let mut masses: Vec<f64> = (lo..=hi).map(|k| bin_mass(k as f64, loc, scale)).collect();
    let below = sigmoid((lo as f64 - 0.5 - loc) / scale);
    let above = sigmoid((loc - hi as f64 - 0.5) / scale);
    masses.push(below + above);
    CmfTable::from_masses(channel, lo as i32, &masses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use proptest::prelude::*;
    use rand::Rng;

    fn logistic_cdf(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn standard_logistic_bin_at_zero() {
        let expected = logistic_cdf(0.5) - logistic_cdf(-0.5);
        assert!((expected - 0.244919).abs() < 1e-6);
        let prior = FactorizedPrior::standard(1);
        assert!((prior.bin_mass(0, 0.0) - expected).abs() < 1e-15);
        let z = Tensor::<f64>::zeros(vec![1, 1, 1, 1]);
        let p = likelihood_values(&z, &prior).unwrap();
        assert!((p.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn pmf_sums_to_one_over_a_wide_grid() {
        for &mu in &[-5.0, -1.3, 0.0, 2.7, 5.0] {
            for &s in &[0.1, 0.5, 1.0, 3.0, 10.0] {
                let total: f64 = (-2000..=2000).map(|k| bin_mass(k as f64, mu, s)).sum();
                assert!((total - 1.0).abs() < 1e-6, "mu {mu} s {s}: {total}");
            }
        }
    }

    #[test]
    fn likelihood_is_symmetric_about_the_location() {
        for &(z, mu, s) in &[(0.3, 1.0, 0.7), (-4.2, 0.5, 2.0), (7.0, -1.0, 0.3)] {
            let a = bin_mass(z, mu, s);
            let b = bin_mass(2.0 * mu - z, mu, s);
            assert!((a - b).abs() <= 1e-15 * a.max(1e-300), "{a} vs {b}");
        }
    }

    #[test]
    fn tail_masses_do_not_cancel() {
        // Far in the upper tail both CDFs round to 1 without the reflection.
        let p = bin_mass(60.0, 0.0, 1.0);
        let expected = (-59.5f64).exp() - (-60.5f64).exp();
        assert!((p - expected).abs() / expected < 1e-10, "{p} vs {expected}");
    }

    #[test]
    fn rate_of_half_probability_elements_is_the_count() {
        // Choose a scale where the bin at the mode holds exactly 1/2:
        // 2 sigma(1/(2s)) - 1 = 1/2  =>  1/(2s) = ln 3.
        let s = 1.0 / (2.0 * 3f64.ln());
        let prior = FactorizedPrior::new(vec![0.0; 2], vec![s.ln(); 2]);
        let z = Tensor::<f64>::zeros(vec![3, 2, 4, 5]);
        let bits = rate_bits_value(&z, &prior).unwrap();
        assert!((bits - 120.0).abs() < 1e-9, "{bits}");
    }

    #[test]
    fn rate_is_positive_and_floor_bounds_it() {
        let prior = FactorizedPrior::standard(1);
        let z = Tensor::new(vec![1, 1, 1, 3], vec![0.0, 3.3, 1e4]).unwrap();
        let p = likelihood_values(&z, &prior).unwrap();
        assert_eq!(p.data()[2], LIKELIHOOD_FLOOR);
        let bits = rate_bits_value(&z, &prior).unwrap();
        assert!(bits > 0.0 && bits.is_finite());
        assert!(bits <= 3.0 * -LIKELIHOOD_FLOOR.log2() + 1e-9);
    }

    #[test]
    fn wider_prior_lowers_mass_at_the_mode() {
        let mut last = f64::INFINITY;
        for i in 0..40 {
            let s = 0.05 * 1.2f64.powi(i);
            let p = bin_mass(0.7, 0.7, s);
            assert!(p < last, "mass at mode must fall as scale grows");
            last = p;
        }
        // ...and raises it far in the tail.
        assert!(bin_mass(20.0, 0.0, 3.0) > bin_mass(20.0, 0.0, 1.0));
    }

    #[test]
    fn rate_bits_gradients_match_finite_differences() {
        use rand::Rng;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Tensor::from_fn(vec![2, 3, 2, 2], |_| rng.random_range(-3.0..3.0));
            let loc = Tensor::from_fn(vec![3], |_| rng.random_range(-1.0..1.0));
            let ls = Tensor::from_fn(vec![3], |_| rng.random_range(-0.5..1.0));
            let reports = gradcheck::check(&[z, loc, ls], |t, v| {
                rate_bits(
                    t,
                    v[0],
                    PriorVars {
                        location: v[1],
                        log_scale: v[2],
                    },
                )
            })
            .unwrap();
            let err = gradcheck::max_relative_error(&reports);
            assert!(err < 1e-4, "seed {seed}: {err:e}");
        }
    }

    #[test]
    fn noise_is_bounded_reproducible_and_centred() {
        let z = Tensor::<f64>::from_fn(vec![1_000_000], |i| (i % 17) as f64 - 8.0);
        let noisy = add_uniform_noise(&z, 42);
        assert_eq!(noisy, add_uniform_noise(&z, 42));
        assert_ne!(noisy, add_uniform_noise(&z, 43));
        let mut sum = 0.0;
        for (a, b) in noisy.data().iter().zip(z.data()) {
            let d = a - b;
            assert!((-0.5..=0.5).contains(&d));
            sum += d;
        }
        let mean = sum / 1e6;
        let sigma = 1.0 / (12e6f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy_of_source(&SymbolHistogram::from_counts(&[1; 256])).unwrap() - 8.0).abs() < 1e-12);
        assert!((entropy_of_source(&SymbolHistogram::from_counts(&[5, 5])).unwrap() - 1.0).abs() < 1e-12);
        let h = entropy_of_source(&SymbolHistogram::from_counts(&[9, 1])).unwrap();
        let oracle = -(0.9f64 * 0.9f64.log2() + 0.1 * 0.1f64.log2());
        assert!((h - oracle).abs() < 1e-12);
        assert!((h - 0.468996).abs() < 1e-6);
        assert_eq!(entropy_of_source(&SymbolHistogram::new()), Err(EntropyError::EmptyHistogram));
    }

    #[test]
    fn gibbs_equality_and_inequality() {
        let hist = SymbolHistogram::from_counts(&[3, 7, 1, 9]);
        let h = entropy_of_source(&hist).unwrap();
        assert!((cross_entropy(&hist, &hist).unwrap() - h).abs() < 1e-9);
        let other = SymbolHistogram::from_counts(&[1, 1, 1, 1]);
        assert!(cross_entropy(&hist, &other).unwrap() >= h);
        let prior = FactorizedPrior::new(vec![1.5], vec![0.3]);
        assert!(cross_entropy(&hist, &prior.channel(0)).unwrap() >= h);
    }

    #[test]
    fn cross_entropy_of_rounded_gaussians_against_logistic() {
        // Oracle: sum_k P_N(k) * -log2 Q(k) with P_N from the normal CDF.
        let phi = |x: f64| 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
        let prior = FactorizedPrior::standard(1);
        let oracle: f64 = (-40..=40)
            .map(|k| {
                let p = phi(k as f64 + 0.5) - phi(k as f64 - 0.5);
                -p * prior.pmf(0, k).log2()
            })
            .sum();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = (0..200_000).map(|_| {
            let (u1, u2): (f64, f64) = (1.0 - rng.random::<f64>(), rng.random());
            let g = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            g.round() as i64
        });
        let hist = SymbolHistogram::from_symbols(draws);
        let ce = cross_entropy(&hist, &prior.channel(0)).unwrap();
        assert!((ce - oracle).abs() < 0.1, "{ce} vs {oracle}");
    }

    #[test]
    fn frozen_tables_are_valid_and_deterministic() {
        let prior = FactorizedPrior::new(vec![0.0, 3.7, -12.2, 0.4], vec![0.0, 2.0, -3.0, 5.0]);
        let a = freeze_cmf(&prior, DEFAULT_TAIL_MASS).unwrap();
        assert_eq!(a, freeze_cmf(&prior, DEFAULT_TAIL_MASS).unwrap());
        for t in &a {
            assert_eq!(*t.cumulative_counts.last().unwrap(), TOTAL_COUNT);
            assert_eq!(t.cumulative_counts[0], 0);
            assert!(t.cumulative_counts.windows(2).all(|w| w[1] > w[0]));
            assert!(t.symbol_count() <= MAX_SUPPORT);
        }
    }

    #[test]
    fn support_leaves_at_most_the_tail_mass_outside() {
        for &(mu, ls) in &[(0.0, 0.0), (2.3, 1.0), (-0.5, -2.0), (10.0, 3.0)] {
            let prior = FactorizedPrior::new(vec![mu], vec![ls]);
            let t = &freeze_cmf(&prior, 1e-4).unwrap()[0];
            let s = prior.scale(0);
            let outside = logistic_cdf((t.support_min as f64 - 0.5 - mu) / s)
                + (1.0 - logistic_cdf((t.support_max as f64 + 0.5 - mu) / s));
            assert!(outside <= 1e-4 * (1.0 + 1e-9), "mu {mu} ls {ls}: {outside}");
        }
    }

    #[test]
    fn quantized_probabilities_track_the_analytic_masses() {
        let prior = FactorizedPrior::new(vec![0.3], vec![0.8]);
        let t = &freeze_cmf(&prior, 1e-4).unwrap()[0];
        // Every bin is within one count of its share, plus the residue that
        // was spread to keep the total exact.
        let residue = t.symbol_count() as f64 / TOTAL_COUNT as f64;
        for i in 0..t.symbol_count() {
            let k = t.symbol_at(i);
            let q = t.index_probability(i);
            let p = prior.bin_mass(0, k as f64);
            assert!((q - p).abs() <= 2f64.powi(-16) + residue + 1e-4, "k {k}: {q} vs {p}");
        }
    }

    #[test]
    fn tiny_probability_costs_about_sixteen_bits() {
        let mut counts = vec![1u32; 3];
        counts[1] = TOTAL_COUNT - 2;
        let t = CmfTable::from_counts(0, 0, &counts).unwrap();
        assert!((t.code_length_bits(0) - 16.0).abs() < 1e-9);
        assert!((t.code_length_bits(99) - 48.0).abs() < 1e-9);
    }

    #[test]
    fn table_construction_errors() {
        assert!(CmfTable::from_counts(0, 0, &[TOTAL_COUNT]).is_err());
        assert!(CmfTable::from_counts(0, 0, &[TOTAL_COUNT, 0]).is_err());
        assert!(CmfTable::from_counts(0, 0, &[5, 5]).is_err());
        assert!(CmfTable::from_masses(0, 0, &[1.0, f64::NAN]).is_err());
        assert_eq!(
            freeze_cmf(&FactorizedPrior::standard(1), 0.5),
            Err(EntropyError::TailMass(0.5))
        );
    }

    #[test]
    fn lookup_inverts_intervals() {
        let t = CmfTable::from_masses(0, -3, &[0.1, 0.2, 0.3, 0.25, 0.1, 0.05]).unwrap();
        for i in 0..=t.escape_index() {
            let (cum, freq) = t.interval(i);
            assert_eq!(t.lookup(cum), i);
            assert_eq!(t.lookup(cum + freq - 1), i);
        }
    }

    proptest! {
        #[test]
        fn prior_pmf_normalises(mu in -5.0f64..5.0, log_s in (0.1f64).ln()..(10.0f64).ln()) {
            let total: f64 = (-2000..=2000).map(|k| bin_mass(k as f64, mu, log_s.exp())).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }

        #[test]
        fn quantized_counts_are_valid(masses in prop::collection::vec(0.0f64..1.0, 1..300), escape in 1e-6f64..1e-2) {
            let mut m = masses;
            m.push(escape);
            let t = CmfTable::from_masses(0, -10, &m).unwrap();
            prop_assert_eq!(*t.cumulative_counts.last().unwrap(), TOTAL_COUNT);
            prop_assert!(t.cumulative_counts.windows(2).all(|w| w[1] > w[0]));
        }

        #[test]
        fn frozen_tables_valid_for_any_prior(mu in -50.0f64..50.0, ls in -4.0f64..8.0) {
            let prior = FactorizedPrior::new(vec![mu], vec![ls]);
            let t = &freeze_cmf(&prior, DEFAULT_TAIL_MASS).unwrap()[0];
            prop_assert_eq!(*t.cumulative_counts.last().unwrap(), TOTAL_COUNT);
            prop_assert!(t.cumulative_counts.windows(2).all(|w| w[1] > w[0]));
        }
    }
}
