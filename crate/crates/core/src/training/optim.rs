use crate::model::ModelParams;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// First and second moments, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams<Tensor>,
    pub v: ModelParams<Tensor>,
    /// Completed updates.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams<Tensor>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update over flat slices.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Returns `false`, leaving everything untouched, when any gradient is
/// non-finite.
pub fn adam_step(
    params: &mut ModelParams<Tensor>,
    state: &mut AdamState,
    grads: &ModelParams<Tensor>,
    lr: f64,
    cfg: &AdamConfig,
) -> bool {
    let mut finite = true;
    grads.visit(&mut |_, g| finite &= g.all_finite());
    if !finite {
        return false;
    }
    state.t += 1;
    let t = state.t;
    let gs = grads.flatten();
    let ms = state.m.leaves_mut();
    let vs = state.v.leaves_mut();
    for (((p, (_, g)), m), v) in params.leaves_mut().into_iter().zip(gs).zip(ms).zip(vs) {
        adam_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), t, lr, cfg);
    }
    true
}

/// Global L2 norm over all tensors.
pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    grads.into_iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_tensors(grads: &mut [Tensor], clip_norm: f64) -> f64 {
    assert!(clip_norm > 0.0, "clip_norm must be positive");
    let norm = global_norm(grads.iter());
    if norm > clip_norm {
        let s = clip_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    norm
}

pub fn clip_gradients(grads: &mut ModelParams<Tensor>, clip_norm: f64) -> f64 {
    assert!(clip_norm > 0.0, "clip_norm must be positive");
    let mut norm_sq = 0.0;
    grads.visit(&mut |_, g| norm_sq += g.sum_sq());
    let norm = norm_sq.sqrt();
    if norm > clip_norm {
        let s = clip_norm / norm;
        grads.visit_mut(&mut |_, g| g.scale(s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_identity_below_threshold() {
        let mut g = vec![Tensor::from_vec(vec![0.3, 0.4])];
        let n = clip_tensors(&mut g, 1.0);
        assert!((n - 0.5).abs() < 1e-15);
        assert_eq!(g[0].data(), &[0.3, 0.4]);
    }

    #[test]
    fn clip_hundred_ones() {
        let mut g = vec![Tensor::ones(&[100])];
        let n = clip_tensors(&mut g, 1.0);
        assert_eq!(n, 10.0);
        assert!(g[0].data().iter().all(|&x| (x - 0.1).abs() < 1e-15));
        assert!((global_norm(g.iter()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let cfg = AdamConfig::default();
        let mut p = [1.0, -2.0];
        let mut m = [0.5, -0.5];
        let mut v = [0.25, 0.25];
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 3, 0.0, &cfg);
        assert_eq!(p, [1.0, -2.0]);
        assert_eq!(m, [0.45, -0.45]);
        assert_eq!(v, [0.245, 0.245]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // with m = v = 0 the first bias-corrected step is lr·g/(|g| + eps)
        let cfg = AdamConfig::default();
        for g in [2.5, -0.75] {
            let mut p = [0.0];
            let (mut m, mut v) = ([0.0], [0.0]);
            adam_update(&mut p, &[g], &mut m, &mut v, 1, 1e-3, &cfg);
            let expected = -1e-3 * g / (g.abs() + cfg.eps);
            assert!((p[0] - expected).abs() < 1e-15);
        }
    }
}
