use super::param::Param;

/// Adaptive-moment gradient descent; updated parameters are rounded to `f32`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update to the trainable params; the list must keep the same
    /// order across calls.
    pub fn step(&mut self, params: Vec<&mut Param>) {
        let params: Vec<&mut Param> = params.into_iter().filter(|p| p.trainable).collect();
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        assert_eq!(params.len(), self.first.len(), "parameter list changed between steps");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in params.into_iter().zip(&mut self.first).zip(&mut self.second) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p.value[i] = (p.value[i] - update) as f32 as f64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut p = Param::filled("x", vec![2], 3.0);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            p.zero_grad();
            let g: Vec<f64> = p.value.iter().map(|v| 2.0 * (v - 1.0)).collect();
            p.grad.copy_from_slice(&g);
            opt.step(vec![&mut p]);
        }
        assert!(p.value.iter().all(|v| (v - 1.0).abs() < 1e-2));
    }
}
