use super::{Gradients, Real, Result, Tape, Tensor, TensorError, Var};

/// A trainable tensor with its accumulated gradient and Adam moments.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(tensor.shape().to_vec());
        Self {
            name: name.into(),
            grad: None,
            adam_m: zeros.clone(),
            adam_v: zeros,
            tensor,
            step_count: 0,
        }
    }

    /// Adds `grad` into the stored gradient.
    pub fn accumulate_grad(&mut self, grad: &Tensor<T>) -> Result<()> {
        if grad.shape() != self.tensor.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.tensor.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        match &mut self.grad {
            Some(existing) => existing.add_assign(grad),
            slot => *slot = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Ordered, named collection of parameters. Slot indices are stable.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Registers a parameter and returns its slot.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.params.push(Parameter::new(name, tensor));
        self.params.len() - 1
    }

    pub fn get(&self, slot: usize) -> &Parameter<T> {
        &self.params[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Parameter<T> {
        &mut self.params[slot]
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Records every parameter on `tape`; the result is indexed by slot.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(slot, p)| tape.param(p.tensor.clone(), slot))
            .collect()
    }

    /// Records every parameter as a constant (inference, no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.constant(p.tensor.clone()))
            .collect()
    }

    /// Accumulates the parameter gradients of one backward pass.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (slot, g) in grads.params() {
            self.params[slot].accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn as_mut_slice(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter. Gradients are left in
/// place; the caller resets them.
pub fn adam_step<T: Real>(params: &mut [Parameter<T>], config: &AdamConfig) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(TensorError::MissingGradient(p.name.clone()));
    }
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let eps = T::lit(config.eps);
    let one = T::one();
    for p in params.iter_mut() {
        p.step_count += 1;
        let t = p.step_count as i32;
        let lr_t = T::lit(config.lr * (1.0 - config.beta2.powi(t)).sqrt() / (1.0 - config.beta1.powi(t)));
        // eps is applied to the bias-corrected second moment, which rescales
        // to eps_hat = eps * sqrt(1 - beta2^t) in this form.
        let eps_t = eps * T::lit((1.0 - config.beta2.powi(t)).sqrt());
        let grad = p.grad.as_ref().expect("checked above");
        let iter = p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(p.adam_m.data_mut().iter_mut())
            .zip(p.adam_v.data_mut().iter_mut())
            .zip(grad.data());
        for (((w, m), v), &g) in iter {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *w -= lr_t * *m / (v.sqrt() + eps_t);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(value: f64, grad: f64) -> Parameter<f64> {
        let mut p = Parameter::new("w", Tensor::scalar(value));
        p.accumulate_grad(&Tensor::scalar(grad)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut p = [scalar_param(1.25, 0.0)];
        adam_step(&mut p, &AdamConfig::default()).unwrap();
        assert_eq!(p[0].tensor.item(), 1.25);
        assert_eq!(p[0].step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = [scalar_param(0.0, 1.0)];
        adam_step(&mut p, &AdamConfig::default()).unwrap();
        // m_hat = 1, v_hat = 1: the step is lr / (1 + eps).
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p[0].tensor.item() - expected).abs() < 1e-12, "{}", p[0].tensor.item());
        assert!(p[0].grad.is_some(), "gradients are left for the caller to reset");
    }

    #[test]
    fn converges_on_a_quadratic() {
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut p = [Parameter::new("w", Tensor::scalar(0.0f64))];
        for _ in 0..2000 {
            let w = p[0].tensor.item();
            p[0].zero_grad();
            p[0].accumulate_grad(&Tensor::scalar(2.0 * (w - 3.0))).unwrap();
            adam_step(&mut p, &cfg).unwrap();
        }
        assert!((p[0].tensor.item() - 3.0).abs() < 1e-2, "{}", p[0].tensor.item());
        assert!(p[0].adam_v.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = [Parameter::new("lonely", Tensor::<f64>::zeros(vec![2]))];
        assert!(matches!(
            adam_step(&mut p, &AdamConfig::default()),
            Err(TensorError::MissingGradient(name)) if name == "lonely"
        ));
    }

    #[test]
    fn repeated_backward_passes_accumulate() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::full(vec![2], 2.0));
        for _ in 0..2 {
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let sq = tape.mul(vars[0], vars[0]).unwrap();
            let loss = tape.sum(sq);
            let grads = tape.backward(loss).unwrap();
            store.accumulate(&grads).unwrap();
        }
        assert_eq!(store.get(0).grad.as_ref().unwrap().data(), &[8.0, 8.0]);
        store.zero_grad();
        assert!(store.get(0).grad.is_none());
    }

    #[test]
    fn moments_keep_parameter_shape() {
        let p = Parameter::new("k", Tensor::<f32>::zeros(vec![2, 3, 5, 5]));
        assert_eq!(p.adam_m.shape(), p.tensor.shape());
        assert_eq!(p.adam_v.shape(), p.tensor.shape());
    }
}
