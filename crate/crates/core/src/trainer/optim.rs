use crate::ndcore::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One bias-corrected Adam step with decoupled weight decay
/// (`p -= lr * (m̂ / (√v̂ + ε) + wd * p)`). Returns new parameters and state;
/// the inputs are left untouched.
pub fn adam_step(
    params: &[Tensor],
    grads: &[Tensor],
    state: &AdamState,
    lr: f64,
    weight_decay: f64,
) -> (Vec<Tensor>, AdamState) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    let t = state.t + 1;
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);

    let mut new_params = Vec::with_capacity(params.len());
    let mut new_m = Vec::with_capacity(params.len());
    let mut new_v = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let (p, g) = (&params[i], &grads[i]);
        assert_eq!(p.shape(), g.shape());
        let m = state.m[i].zip_map(g, |m, g| ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g);
        let v = state.v[i].zip_map(g, |v, g| ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g);
        let mut out = p.clone();
        for (j, x) in out.data_mut().iter_mut().enumerate() {
            let m_hat = m.data()[j] / c1;
            let v_hat = v.data()[j] / c2;
            *x -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * *x);
        }
        new_params.push(out);
        new_m.push(m);
        new_v.push(v);
    }
    (
        new_params,
        AdamState {
            m: new_m,
            v: new_v,
            t,
        },
    )
}

/// `lr0 * (1 - epoch / max_epoch)^power`.
pub fn poly_lr(lr0: f64, epoch: usize, max_epoch: usize, power: f64) -> f64 {
    if max_epoch == 0 {
        return lr0;
    }
    let frac = 1.0 - (epoch.min(max_epoch) as f64) / max_epoch as f64;
    lr0 * frac.powf(power)
}
