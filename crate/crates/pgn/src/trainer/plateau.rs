//! Plateau detection for surrogate resets.

/// Watches a stream of reconstruction losses and reports when the best value
/// has not improved (by a relative margin) for a full window of batches.
///
/// The first recorded value initializes the best without counting as an
/// improvement, so a constant stream triggers exactly at the `window`-th
/// record.
#[derive(Debug, Clone)]
pub struct PlateauTracker {
    window: usize,
    epsilon: f64,
    best: Option<f64>,
    since_improvement: usize,
}

impl PlateauTracker {
    pub fn new(window: usize, epsilon: f64) -> Self {
        assert!(window >= 1, "plateau window must be at least 1");
        PlateauTracker {
            window,
            epsilon,
            best: None,
            since_improvement: 0,
        }
    }

    pub fn record(&mut self, loss: f64) {
        match self.best {
            None => {
                self.best = Some(loss);
                self.since_improvement = 1;
            }
            Some(best) if loss < best * (1.0 - self.epsilon) => {
                self.best = Some(loss);
                self.since_improvement = 1;
            }
            Some(_) => {
                self.since_improvement += 1;
            }
        }
    }

    /// True when `window` consecutive records brought no relative
    /// improvement over the running best.
    pub fn plateaued(&self) -> bool {
        self.since_improvement >= self.window
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Clears all history (after the surrogate is re-initialized).
    pub fn clear(&mut self) {
        self.best = None;
        self.since_improvement = 0;
    }
}
