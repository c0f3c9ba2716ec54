/// Halves the learning rate when the epoch loss stops improving.
///
/// An epoch improves if its loss is below `best * (1 - min_delta)`. After
/// `patience` consecutive epochs without improvement the rate is halved,
/// never below `floor`, and the counter restarts.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    pub floor: f64,
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, floor: f64, patience: usize) -> Self {
        PlateauScheduler { lr, floor, patience: patience.max(1), min_delta: 1e-6, best: f64::INFINITY, stale: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's mean loss and returns the rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - self.min_delta) {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr = (self.lr * 0.5).max(self.floor).min(self.lr);
                self.stale = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decreasing_losses_keep_rate() {
        let mut s = PlateauScheduler::new(5e-4, 1e-4, 5);
        for i in 0..50 {
            assert_eq!(s.observe(1.0 / (i + 1) as f64), 5e-4);
        }
    }

    #[test]
    fn one_plateau_halves() {
        let mut s = PlateauScheduler::new(5e-4, 1e-4, 5);
        s.observe(1.0);
        let rates: Vec<f64> = (0..5).map(|_| s.observe(1.0)).collect();
        assert_eq!(rates, [5e-4, 5e-4, 5e-4, 5e-4, 2.5e-4]);
    }

    #[test]
    fn tiny_relative_gains_count_as_flat() {
        let mut s = PlateauScheduler::new(1.0, 0.1, 2);
        s.observe(1.0);
        s.observe(1.0 - 1e-7);
        assert_eq!(s.observe(1.0 - 2e-7), 0.5);
    }
}
