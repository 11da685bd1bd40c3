//! SGD with momentum and decoupled-from-schedule weight decay, plus the
//! linear-warmup / cosine-decay learning-rate curve.

use crate::config::OptimizerConfig;
use crate::tensor::{Gradients, ParamStore, Scalar, Var};

/// Learning rate at `step` (0-based): linear warmup from `lr / 10` to `lr`
/// over `warmup_steps`, then cosine decay to zero at `total_steps`.
pub fn lr_at(cfg: &OptimizerConfig, step: usize) -> f64 {
    let base = cfg.lr;
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        let t = step as f64 / cfg.warmup_steps as f64;
        return base / 10.0 + (base - base / 10.0) * t;
    }
    if step >= cfg.total_steps {
        return 0.0;
    }
    let span = (cfg.total_steps - cfg.warmup_steps).max(1) as f64;
    let t = (step - cfg.warmup_steps) as f64 / span;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One SGD step: `v <- mu * v + (g + wd * w)`, `w <- w - lr * v`, with the
/// raw gradient first rescaled if its global L2 norm exceeds
/// `clip_grad_norm`. Parameters without a gradient this step are untouched.
pub fn sgd_step<F: Scalar>(
    store: &mut ParamStore<F>,
    bind: &[Var],
    grads: &Gradients<F>,
    cfg: &OptimizerConfig,
    step: usize,
) {
    let lr = F::from_f64(lr_at(cfg, step));
    let mu = F::from_f64(cfg.momentum);
    let wd = F::from_f64(cfg.weight_decay);
    let ids: Vec<_> = store.ids().collect();
    let mut clip = F::from_f64(1.0);
    if let Some(max_norm) = cfg.clip_grad_norm {
        let mut sq = 0.0;
        for &id in &ids {
            if let Some(grad) = grads.get(bind[id.0]) {
                sq += grad.data().iter().map(|&g| g.to_f64() * g.to_f64()).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        if norm > max_norm {
            clip = F::from_f64(max_norm / norm);
        }
    }
    for id in ids {
        let Some(grad) = grads.get(bind[id.0]) else {
            continue;
        };
        let grad = grad.data().to_vec();
        let (w, v) = store.param_and_momentum_mut(id);
        let (w, v) = (w.data_mut(), v.data_mut());
        for i in 0..w.len() {
            v[i] = mu * v[i] + clip * grad[i] + wd * w[i];
            w[i] = w[i] - lr * v[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Array, Tape};

    fn cfg() -> OptimizerConfig {
        OptimizerConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            warmup_steps: 10,
            total_steps: 100,
            clip_grad_norm: None,
        }
    }

    #[test]
    fn schedule_shape() {
        let c = cfg();
        assert!((lr_at(&c, 0) - 0.01).abs() < 1e-12);
        assert!((lr_at(&c, 10) - 0.1).abs() < 1e-12);
        // midpoint of the cosine span: half the peak
        assert!((lr_at(&c, 55) - 0.05).abs() < 1e-12);
        assert_eq!(lr_at(&c, 100), 0.0);
        assert_eq!(lr_at(&c, 500), 0.0);
        // monotone up during warmup, monotone down after
        for s in 0..10 {
            assert!(lr_at(&c, s) < lr_at(&c, s + 1));
        }
        for s in 10..99 {
            assert!(lr_at(&c, s) >= lr_at(&c, s + 1));
        }
    }

    #[test]
    fn sgd_descends_a_quadratic() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.add("w", Array::row(vec![3.0, -2.0]));
        let c = OptimizerConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            warmup_steps: 0,
            total_steps: 1000,
            clip_grad_norm: None,
        };
        let mut last = f64::INFINITY;
        for step in 0..120 {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let sq = tape.mul(bind[w.0], bind[w.0]).unwrap();
            let loss = tape.sum(sq);
            last = tape.value(loss).item();
            let grads = tape.backward(loss).unwrap();
            sgd_step(&mut store, &bind, &grads, &c, step);
        }
        assert!(last < 1e-3, "final loss {last}");
    }

    #[test]
    fn weight_decay_shrinks_unused_params() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.add("w", Array::row(vec![1.0]));
        let u = store.add("u", Array::row(vec![1.0]));
        let c = OptimizerConfig {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.1,
            warmup_steps: 0,
            total_steps: 10,
            clip_grad_norm: None,
        };
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let sq = tape.mul(bind[w.0], bind[w.0]).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        sgd_step(&mut store, &bind, &grads, &c, 0);
        // w: grad 2.0 + wd 0.1 -> 1 - 0.5*2.1 = -0.05
        assert!((store.get(w).data()[0] + 0.05).abs() < 1e-12);
        // u had no gradient: untouched
        assert_eq!(store.get(u).data()[0], 1.0);
    }

    #[test]
    fn clip_rescales_to_the_ceiling() {
        // w = [3, 4]: loss = sum(w*w) has gradient [6, 8], norm 10.
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.add("w", Array::row(vec![3.0, 4.0]));
        let c = OptimizerConfig {
            lr: 1.0,
            momentum: 0.0,
            weight_decay: 0.0,
            warmup_steps: 0,
            total_steps: 10,
            clip_grad_norm: Some(5.0),
        };
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let sq = tape.mul(bind[w.0], bind[w.0]).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        sgd_step(&mut store, &bind, &grads, &c, 0);
        // gradient scaled by 5/10: step is [3, 4] -> w = [0, 0]
        assert!((store.get(w).data()[0]).abs() < 1e-12);
        assert!((store.get(w).data()[1]).abs() < 1e-12);

        // below the ceiling the step is unchanged
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.add("w", Array::row(vec![0.3, 0.4]));
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let sq = tape.mul(bind[w.0], bind[w.0]).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        sgd_step(&mut store, &bind, &grads, &c, 0);
        assert!((store.get(w).data()[0] + 0.3).abs() < 1e-12);
        assert!((store.get(w).data()[1] + 0.4).abs() < 1e-12);
    }
}
