use super::config::OptimizerConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    cfg: OptimizerConfig,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    /// One moment pair per parameter, shaped like `shapes`.
    pub fn new(cfg: OptimizerConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            cfg,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Advances the step counter; call once per batch before `update`.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, k: usize, param: &mut Tensor<T>, grad: &Tensor<T>) {
        let lit = T::lit;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = lit(1.0 - b1.powi(self.step));
        let c2 = lit(1.0 - b2.powi(self.step));
        let (lr, wd, eps) = (lit(self.cfg.lr), lit(self.cfg.weight_decay), lit(self.cfg.eps));
        let (b1, b2) = (lit(b1), lit(b2));
        let one = T::one();
        let m = self.m[k].data_mut();
        let v = self.v[k].data_mut();
        for (((p, &g), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            let g = g + wd * *p;
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *p = *p - lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar reference of one Adam step from zero moments.
    #[test]
    fn first_step_moves_by_lr() {
        let cfg = OptimizerConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = Adam::<f64>::new(cfg, &[(1, 2)]);
        let mut p = Tensor::from_vec(1, 2, vec![1.0, -1.0]);
        opt.begin_step();
        opt.update(0, &mut p, &Tensor::from_vec(1, 2, vec![3.0, -0.5]));
        assert!((p.get(0, 0) - 0.9).abs() < 1e-7);
        assert!((p.get(0, 1) + 0.9).abs() < 1e-7);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = OptimizerConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = Adam::<f64>::new(cfg, &[(1, 1)]);
        let mut p = Tensor::from_vec(1, 1, vec![3.0]);
        for _ in 0..2000 {
            opt.begin_step();
            let g = p.scale(2.0);
            opt.update(0, &mut p, &g);
        }
        assert!(p.get(0, 0).abs() < 1e-3);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let cfg = OptimizerConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..OptimizerConfig::default()
        };
        let mut opt = Adam::<f64>::new(cfg, &[(1, 1)]);
        let mut p = Tensor::from_vec(1, 1, vec![1.0]);
        opt.begin_step();
        opt.update(0, &mut p, &Tensor::zeros(1, 1));
        assert!(p.get(0, 0) < 1.0);
    }
}
