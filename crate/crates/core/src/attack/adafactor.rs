//! Adafactor with a fixed learning rate: factored second moments for
//! matrices, full second moments for vectors, no momentum and update
//! clipping at RMS 1.

use ndarray::{Array1, Array2, Axis, Zip};

use super::net::Linear;
use super::AttackError;

pub const EPS: f64 = 1e-30;
pub const CLIP_THRESHOLD: f64 = 1.0;
pub const DECAY_RATE: f64 = -0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixState {
    pub row: Array1<f64>,
    pub col: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdafactorState {
    pub step: u64,
    pub matrices: Vec<MatrixState>,
    pub vectors: Vec<Array1<f64>>,
}

impl AdafactorState {
    pub fn new(layers: &[Linear]) -> Self {
        Self {
            step: 0,
            matrices: layers
                .iter()
                .map(|l| MatrixState {
                    row: Array1::zeros(l.w.nrows()),
                    col: Array1::zeros(l.w.ncols()),
                })
                .collect(),
            vectors: layers.iter().map(|l| Array1::zeros(l.b.len())).collect(),
        }
    }
}

fn rms(a: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in a {
        s += v * v;
        n += 1;
    }
    (s / n.max(1) as f64).sqrt()
}

/// Second-moment decay for 1-based step `t`.
pub fn beta2(step: u64) -> f64 {
    1.0 - (step as f64).powf(DECAY_RATE)
}

fn clip_factor(u_rms: f64) -> f64 {
    (u_rms / CLIP_THRESHOLD).max(1.0)
}

/// Factored update of one matrix; returns the (scaled) update subtracted.
pub fn matrix_step(p: &mut Array2<f64>, g: &Array2<f64>, st: &mut MatrixState, lr: f64, step: u64) {
    let b2 = beta2(step);
    let sq = g.mapv(|v| v * v + EPS);
    let row_mean = sq.mean_axis(Axis(1)).expect("non-empty");
    let col_mean = sq.mean_axis(Axis(0)).expect("non-empty");
    st.row.zip_mut_with(&row_mean, |r, &m| *r = b2 * *r + (1.0 - b2) * m);
    st.col.zip_mut_with(&col_mean, |c, &m| *c = b2 * *c + (1.0 - b2) * m);
    let r_mean = st.row.mean().expect("non-empty");
    let r_fac = st.row.mapv(|r| (r / r_mean).sqrt().recip());
    let c_fac = st.col.mapv(|c| c.sqrt().recip());
    let mut u = g.clone();
    Zip::indexed(&mut u).for_each(|(i, j), v| *v *= r_fac[i] * c_fac[j]);
    let scale = lr / clip_factor(rms(u.iter().copied()));
    p.zip_mut_with(&u, |w, d| *w -= scale * d);
}

pub fn vector_step(p: &mut Array1<f64>, g: &Array1<f64>, v: &mut Array1<f64>, lr: f64, step: u64) {
    let b2 = beta2(step);
    v.zip_mut_with(g, |s, &gi| *s = b2 * *s + (1.0 - b2) * (gi * gi + EPS));
    let u: Vec<f64> = g.iter().zip(v.iter()).map(|(gi, s)| gi / s.sqrt()).collect();
    let scale = lr / clip_factor(rms(u.iter().copied()));
    p.iter_mut().zip(&u).for_each(|(w, d)| *w -= scale * d);
}

/// One optimizer step over every layer.
pub fn adafactor_step(
    layers: &mut [Linear],
    grads: &[Linear],
    state: &mut AdafactorState,
    lr: f64,
) -> Result<(), AttackError> {
    if layers.len() != grads.len() || layers.len() != state.matrices.len() {
        return Err(AttackError::Shape("layer count".into()));
    }
    for ((l, g), (m, v)) in layers.iter().zip(grads).zip(state.matrices.iter().zip(&state.vectors)) {
        if l.w.dim() != g.w.dim() || l.b.len() != g.b.len() || m.row.len() != l.w.nrows() || v.len() != l.b.len() {
            return Err(AttackError::Shape(format!("layer {:?} vs gradient {:?}", l.w.dim(), g.w.dim())));
        }
    }
    state.step += 1;
    let step = state.step;
    for (i, (l, g)) in layers.iter_mut().zip(grads).enumerate() {
        matrix_step(&mut l.w, &g.w, &mut state.matrices[i], lr, step);
        vector_step(&mut l.b, &g.b, &mut state.vectors[i], lr, step);
    }
    Ok(())
}
