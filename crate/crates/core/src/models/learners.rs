//! Reference online learners.

use serde::{Deserialize, Serialize};

pub const DEFAULT_LEARNING_RATE: f64 = 0.05;
pub const DEFAULT_ALPHA: f64 = 0.1;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logistic regression trained by one SGD step on log-loss per observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineLogistic {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub learning_rate: f64,
    pub count: u64,
}

impl OnlineLogistic {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        OnlineLogistic {
            weights: vec![0.0; dim],
            bias: 0.0,
            learning_rate,
            count: 0,
        }
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    /// Gradient of the log-loss at (x, y) with respect to (weights, bias).
    pub fn gradient(&self, x: &[f64], y: f64) -> (Vec<f64>, f64) {
        let r = self.predict(x) - y;
        (x.iter().map(|v| r * v).collect(), r)
    }

    pub fn update(&mut self, x: &[f64], y: f64) {
        let (gw, gb) = self.gradient(x, y);
        for (w, g) in self.weights.iter_mut().zip(gw) {
            *w -= self.learning_rate * g;
        }
        self.bias -= self.learning_rate * gb;
        self.count += 1;
    }

    /// Per-feature contributions w_i · x_i.
    pub fn contributions(&self, x: &[f64]) -> Vec<f64> {
        self.weights.iter().zip(x).map(|(w, v)| w * v).collect()
    }
}

/// Log-loss of a logistic model with parameters (w, b) at (x, y).
pub fn log_loss(w: &[f64], b: f64, x: &[f64], y: f64) -> f64 {
    let z = b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    // log(1 + e^z) - y z, computed stably.
    let softplus = if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    softplus - y * z
}

/// Exponentially weighted mean and variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwMeanVar {
    pub alpha: f64,
    pub mean: f64,
    pub var: f64,
    pub count: u64,
}

impl EwMeanVar {
    pub fn new(alpha: f64) -> Self {
        EwMeanVar {
            alpha,
            mean: 0.0,
            var: 0.0,
            count: 0,
        }
    }

    /// A learner that already holds a prior state.
    pub fn with_prior(alpha: f64, mean: f64, var: f64) -> Self {
        EwMeanVar {
            alpha,
            mean,
            var,
            count: 1,
        }
    }

    /// m ← (1−α)·m + α·x and v ← (1−α)·(v + α·(x − m_prev)²); the first
    /// observation initializes m = x, v = 0.
    pub fn update(&mut self, x: f64) {
        if self.count == 0 {
            self.mean = x;
            self.var = 0.0;
        } else {
            let d = x - self.mean;
            self.mean = (1.0 - self.alpha) * self.mean + self.alpha * x;
            self.var = (1.0 - self.alpha) * (self.var + self.alpha * d * d);
        }
        self.count += 1;
    }

    pub fn std_dev(&self) -> f64 {
        self.var.max(0.0).sqrt()
    }
}
