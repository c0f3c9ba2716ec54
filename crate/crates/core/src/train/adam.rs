use crate::error::{Error, Result};
use crate::layers::Module;
use crate::scalar::Scalar;

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, first: Vec::new(), second: Vec::new() }
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, index: usize) -> Option<(&[T], &[T])> {
        Some((self.first.get(index)?.as_slice(), self.second.get(index)?.as_slice()))
    }

    fn check(i: usize, v: usize, g: &[T]) -> Result<()> {
        if v != g.len() {
            return Err(Error::config(format!("adam: parameter {i} has {v} values but {} gradients", g.len())));
        }
        if let Some(j) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::numeric(format!("adam: non-finite gradient in parameter {i} at element {j}")));
        }
        Ok(())
    }

    fn begin(&mut self, sizes: &[usize]) -> Result<()> {
        if self.first.is_empty() {
            self.first = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != sizes.len() || self.first.iter().zip(sizes).any(|(m, &n)| m.len() != n) {
            return Err(Error::config("adam: parameter list changed between steps"));
        }
        self.t += 1;
        Ok(())
    }

    fn update(&mut self, index: usize, v: &mut [T], g: &[T]) {
        let b1 = T::from_f64c(self.beta1);
        let b2 = T::from_f64c(self.beta2);
        let c1 = T::from_f64c(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::from_f64c(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::from_f64c(self.lr);
        let eps = T::from_f64c(self.eps);
        let one = T::one();
        let (m, s) = (&mut self.first[index], &mut self.second[index]);
        for i in 0..v.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            s[i] = b2 * s[i] + (one - b2) * gi * gi;
            v[i] -= lr * (m[i] / c1) / ((s[i] / c2).sqrt() + eps);
        }
    }

    /// One update over `(value, grad)` pairs; the pairing order must stay fixed
    /// between calls. Nothing is modified if any gradient is non-finite.
    pub fn step_slices(&mut self, params: &mut [(&mut [T], &[T])]) -> Result<()> {
        for (i, (v, g)) in params.iter().enumerate() {
            Self::check(i, v.len(), g)?;
        }
        self.begin(&params.iter().map(|(v, _)| v.len()).collect::<Vec<_>>())?;
        for (i, (v, g)) in params.iter_mut().enumerate() {
            self.update(i, v, g);
        }
        Ok(())
    }

    /// Updates every parameter of `module` from its stored `grad`.
    pub fn step<M: Module<T>>(&mut self, module: &mut M) -> Result<()> {
        let mut sizes = Vec::new();
        let mut failure = Ok(());
        module.visit_params("", &mut |name, p| {
            if failure.is_ok() {
                failure = Self::check(sizes.len(), p.numel(), p.grad.data())
                    .map_err(|e| Error::numeric(format!("{name}: {e}")));
            }
            sizes.push(p.numel());
        });
        failure?;
        self.begin(&sizes)?;
        let mut index = 0;
        module.visit_params_mut("", &mut |_, p| {
            let crate::layers::Param { value, grad, .. } = p;
            self.update(index, value.data_mut(), grad.data());
            index += 1;
        });
        Ok(())
    }
}
