use super::{NumError, Scalar};

/// First/second moment buffers for every optimized tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub step: u64,
}

/// Adam with bias correction. Holds state only for the tensors it was
/// built for; frozen parameters are never handed to it.
#[derive(Clone, Debug)]
pub struct Adam<T = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(sizes: &[usize]) -> Self {
        Self::with_hyper(sizes, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(sizes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            state: AdamState {
                first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
                second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
                step: 0,
            },
        }
    }

    pub fn state(&self) -> &AdamState<T> {
        &self.state
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    /// One update of every parameter slice with its gradient.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr: f64) -> Result<(), NumError> {
        if !(lr >= 0.0) {
            return Err(NumError::LearningRate);
        }
        if params.len() != self.state.first.len() || grads.len() != params.len() {
            return Err(NumError::Shape(format!(
                "adam built for {} tensors, got {} params / {} grads",
                self.state.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.state.first) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(NumError::Shape(format!(
                    "adam tensor of {} with grad of {}",
                    m.len(),
                    g.len()
                )));
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let c1 = T::one() - b1;
        let c2 = T::one() - b2;
        let bc1 = T::lit(1.0 - self.beta1.powi(t));
        let bc2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(lr);
        let eps = T::lit(self.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.state.first[i];
            let v = &mut self.state.second[i];
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + c1 * gj;
                v[j] = b2 * v[j] + c2 * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] = p[j] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
