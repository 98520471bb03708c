use super::{NumericError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one update. `names` is only used for error messages.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        names: &[&str],
    ) -> Result<(), NumericError> {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.first.len());
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(NumericError::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(NumericError::NonFiniteGradient {
                    name: names.get(i).map_or_else(|| i.to_string(), |n| n.to_string()),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for _ in 0..3 {
            adam.step(&mut p, &[Tensor::zeros(&[2])], &["w"]).unwrap();
        }
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(adam.steps(), 3);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m1 = 0.1 g, v1 = 0.001 g^2; bias correction restores g and g^2,
        // so the update is lr * g / (|g| + eps).
        let g = 0.4;
        let lr = 1e-3;
        let eps = 1e-8;
        let expected = 1.5 - lr * g / (g + eps);
        let mut p = vec![Tensor::vector(vec![1.5])];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[Tensor::vector(vec![g])], &["w"]).unwrap();
        assert!((p[0].data()[0] - expected).abs() < 1e-15);

        // second step with gradient -0.2, computed by hand
        let g2 = -0.2;
        let m2 = 0.9 * 0.1 * g + 0.1 * g2;
        let v2 = 0.999 * 0.001 * g * g + 0.001 * g2 * g2;
        let m_hat = m2 / (1.0 - 0.9f64.powi(2));
        let v_hat = v2 / (1.0 - 0.999f64.powi(2));
        let expected2 = expected - lr * m_hat / (v_hat.sqrt() + eps);
        adam.step(&mut p, &[Tensor::vector(vec![g2])], &["w"]).unwrap();
        assert!((p[0].data()[0] - expected2).abs() < 1e-15);
    }

    #[test]
    fn equal_gradients_equal_updates() {
        let mut p = vec![Tensor::vector(vec![0.0]), Tensor::vector(vec![0.0])];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let g = vec![Tensor::vector(vec![0.7]), Tensor::vector(vec![0.7])];
        adam.step(&mut p, &g, &["a", "b"]).unwrap();
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = vec![Tensor::vector(vec![0.0])];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let err = adam
            .step(&mut p, &[Tensor::vector(vec![f64::NAN])], &["enc.w"])
            .unwrap_err();
        assert!(err.to_string().contains("enc.w"));
        assert_eq!(adam.steps(), 0);
        assert_eq!(p[0].data(), &[0.0]);
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut g = vec![Tensor::vector(vec![3.0]), Tensor::vector(vec![4.0])];
        let norm = clip_global_norm(&mut g, 1.0);
        assert_eq!(norm, 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-15);
        let mut small = vec![Tensor::vector(vec![0.1])];
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small[0].data(), &[0.1]);
    }
}
