use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with classic momentum; the L2 term is added to the gradient before the
/// momentum buffer. Parameters without a gradient are left untouched.
pub fn sgd_step<T: Real>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    cfg: SgdConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::Shape {
            op: "sgd_step",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    let lr = T::of(cfg.lr);
    let mu = T::of(cfg.momentum);
    let wd = T::of(cfg.weight_decay);
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut().iter_mut())
    {
        let d = g + wd * *p;
        *v = mu * *v + d;
        *p -= lr * *v;
    }
    Ok(())
}

/// Cosine annealing without restart.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Range { what: "lr step", value: step, bound: total_steps + 1 });
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = v(&[1.0, -2.0]);
        let mut m = v(&[0.0, 0.0]);
        let cfg = SgdConfig { lr: 0.0, momentum: 0.9, weight_decay: 4e-5 };
        sgd_step(&mut p, &v(&[3.0, 4.0]), &mut m, cfg).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn vanilla_step() {
        let mut p = v(&[1.0, -2.0]);
        let mut m = v(&[0.0, 0.0]);
        let cfg = SgdConfig { lr: 0.5, momentum: 0.0, weight_decay: 0.0 };
        sgd_step(&mut p, &v(&[3.0, 4.0]), &mut m, cfg).unwrap();
        assert_eq!(p.data(), &[1.0 - 1.5, -2.0 - 2.0]);
    }

    #[test]
    fn momentum_two_steps_closed_form() {
        // v1 = g, v2 = 0.9 g + g: displacement lr * g * (1 + 1.9).
        let (lr, g) = (0.1, 2.0);
        let mut p = v(&[0.0]);
        let mut m = v(&[0.0]);
        let cfg = SgdConfig { lr, momentum: 0.9, weight_decay: 0.0 };
        sgd_step(&mut p, &v(&[g]), &mut m, cfg).unwrap();
        sgd_step(&mut p, &v(&[g]), &mut m, cfg).unwrap();
        assert!((p.data()[0] + lr * g * 2.9).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = v(&[0.0, 1.0]);
        let mut m = v(&[0.0, 0.0]);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        assert!(sgd_step(&mut p, &v(&[1.0]), &mut m, cfg).is_err());
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 0.12).unwrap(), 0.12);
        assert!(cosine_lr(100, 100, 0.12).unwrap().abs() < 1e-17);
        assert!((cosine_lr(50, 100, 0.12).unwrap() - 0.06).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 0.12).is_err());
    }
}
