use super::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{round_to_f32, ParamKind, ParamStore, Tensor};

/// First and second moments, aligned with the entries of a [`ParamStore`].
/// Buffers carry empty moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |kind, t: &Tensor| match kind {
            ParamKind::Trainable => Tensor::zeros(t.shape()),
            ParamKind::Buffer => Tensor::zeros(&[0]),
        };
        AdamState {
            step: 0,
            m: store.iter().map(|p| zeros(p.kind, &p.value)).collect(),
            v: store.iter().map(|p| zeros(p.kind, &p.value)).collect(),
        }
    }
}

/// Bias-corrected Adam update at the configured learning rate.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    adam_step_with_lr(store, state, cfg, cfg.lr)
}

/// Adam update at an explicit learning rate; gradients are zeroed after.
///
/// Parameters and moments are kept at `f32` precision so a checkpoint
/// round-trip is exact. A non-finite gradient aborts the step before any
/// value changes.
pub fn adam_step_with_lr(store: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig, lr: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::invalid("optimizer state does not match the parameter store"));
    }
    let mut sq_norm = 0.0;
    for p in store.iter().filter(|p| p.kind == ParamKind::Trainable) {
        if !p.grad.is_finite() {
            return Err(Error::NonFiniteGradient { name: p.name.clone() });
        }
        sq_norm += p.grad.data().iter().map(|g| g * g).sum::<f64>();
    }
    let clip = match cfg.clip_norm {
        Some(max) if sq_norm.sqrt() > max => max / sq_norm.sqrt(),
        _ => 1.0,
    };

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        if p.kind != ParamKind::Trainable {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for ((w, &g), (mi, vi)) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g = g * clip;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        round_to_f32(&mut p.value);
        round_to_f32(&mut state.m[i]);
        round_to_f32(&mut state.v[i]);
    }
    store.zero_grads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(value), ParamKind::Trainable).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = single(0.5);
        let before = s.clone();
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, &TrainConfig::default()).unwrap();
        assert_eq!(s.value(s.id("w").unwrap()), before.value(before.id("w").unwrap()));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g² after one step, so the move is lr·g/(|g| + ε).
        for g in [3.0, -0.02] {
            let mut s = single(1.0);
            let id = s.id("w").unwrap();
            s.accumulate(id, &Tensor::scalar(g));
            let mut st = AdamState::new(&s);
            let cfg = TrainConfig::default();
            adam_step(&mut s, &mut st, &cfg).unwrap();
            let expected = 1.0 - cfg.lr * g / (g.abs() + cfg.eps);
            assert!((s.value(id).data()[0] - expected).abs() < 1e-7);
            assert_eq!(s.grad(id).data()[0], 0.0);
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = single(1.0);
        let id = s.id("w").unwrap();
        s.accumulate(id, &Tensor::scalar(f64::NAN));
        let mut st = AdamState::new(&s);
        match adam_step(&mut s, &mut st, &TrainConfig::default()) {
            Err(Error::NonFiniteGradient { name }) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.value(id).data()[0], 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut s = ParamStore::new();
        let b = s.add("stat", Tensor::scalar(2.0), ParamKind::Buffer).unwrap();
        s.accumulate(b, &Tensor::scalar(1.0));
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, &TrainConfig::default()).unwrap();
        assert_eq!(s.value(b).data()[0], 2.0);
    }

    #[test]
    fn clipping_scales_gradient() {
        let mut s = single(0.0);
        let id = s.id("w").unwrap();
        s.accumulate(id, &Tensor::scalar(100.0));
        let mut st = AdamState::new(&s);
        let cfg = TrainConfig {
            clip_norm: Some(1.0),
            ..Default::default()
        };
        adam_step(&mut s, &mut st, &cfg).unwrap();
        // first moment stores the clipped gradient (1.0), scaled by 1 − β1
        assert!((st.m[0].data()[0] - 0.1).abs() < 1e-7);
    }
}
