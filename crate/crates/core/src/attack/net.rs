//! The detector MLP with hand-written reverse mode.
//!
//! Layout (weights are `out x in`):
//! loss branch `1 -> P`, embedding branch `E -> E/2 -> 512`, concatenation
//! to `P + 512`, encoder `-> 512 -> 256 -> 128 -> 64 -> 32 -> 2`. Every
//! hidden layer is followed by dropout and ReLU; the logits pass through a
//! final ReLU unless disabled.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use super::AttackError;
use crate::rng::Prng;

pub const PROJECTION: usize = 512;
pub const EMBED_OUT: usize = 512;
pub const ENCODER_WIDTHS: [usize; 6] = [512, 256, 128, 64, 32, 2];
pub const DROPOUT: f64 = 0.2;

// layer indices
const LOSS: usize = 0;
const EMB_A: usize = 1;
const EMB_B: usize = 2;
const ENC: usize = 3;
pub const N_LAYERS: usize = 3 + ENCODER_WIDTHS.len();

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn uniform(out: usize, inp: usize, rng: &mut Prng) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = Array2::from_shape_simple_fn((out, inp), || rng.uniform(-bound, bound));
        let b = Array1::from_shape_simple_fn(out, || rng.uniform(-bound, bound));
        Self { w, b }
    }

    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            w: Array2::zeros((out, inp)),
            b: Array1::zeros(out),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.w.dim()
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackNet {
    pub embedding_dim: usize,
    pub final_relu: bool,
    pub layers: Vec<Linear>,
}

/// Parameter-shaped gradients.
pub type Grads = Vec<Linear>;

pub enum Mode<'a> {
    Eval,
    Train(&'a mut Prng),
}

struct Block {
    input: Array2<f64>,
    /// Pre-activation after the dropout mask.
    z: Array2<f64>,
    mask: Option<Array2<f64>>,
}

struct Tape {
    loss: Block,
    emb_a: Block,
    emb_b: Block,
    enc: Vec<Block>,
    logits_pre: Array2<f64>,
}

pub fn layer_shapes(embedding_dim: usize) -> Vec<(usize, usize)> {
    let half = embedding_dim / 2;
    let mut shapes = vec![(PROJECTION, 1), (half, embedding_dim), (EMBED_OUT, half)];
    let mut prev = PROJECTION + EMBED_OUT;
    for &w in &ENCODER_WIDTHS {
        shapes.push((w, prev));
        prev = w;
    }
    shapes
}

fn relu(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|v| v.max(0.0))
}

impl AttackNet {
    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn new(embedding_dim: usize, seed: u64) -> Result<Self, AttackError> {
        if embedding_dim < 2 {
            return Err(AttackError::Dimension {
                expected: 2,
                got: embedding_dim,
            });
        }
        let mut rng = Prng::derived(seed, &[b"attacknet-init"]);
        let layers = layer_shapes(embedding_dim)
            .into_iter()
            .map(|(o, i)| Linear::uniform(o, i, &mut rng))
            .collect();
        Ok(Self {
            embedding_dim,
            final_relu: true,
            layers,
        })
    }

    pub fn zeros(embedding_dim: usize) -> Self {
        Self {
            embedding_dim,
            final_relu: true,
            layers: layer_shapes(embedding_dim)
                .into_iter()
                .map(|(o, i)| Linear::zeros(o, i))
                .collect(),
        }
    }

    pub fn zero_grads(&self) -> Grads {
        self.layers.iter().map(|l| Linear::zeros(l.w.nrows(), l.w.ncols())).collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Same network with the two output units swapped, so `p' = 1 - p`.
    pub fn mirrored(&self) -> Self {
        let mut m = self.clone();
        let last = m.layers.last_mut().expect("layers");
        last.w = concatenate![Axis(0), last.w.slice(s![1..2, ..]), last.w.slice(s![0..1, ..])];
        last.b = Array1::from(vec![last.b[1], last.b[0]]);
        m
    }

    fn block(&self, idx: usize, x: Array2<f64>, mode: &mut Mode) -> Block {
        let mut z = self.layers[idx].apply(x.view());
        let mask = match mode {
            Mode::Eval => None,
            Mode::Train(rng) => {
                let keep = 1.0 - DROPOUT;
                let m = Array2::from_shape_simple_fn(z.dim(), || if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 });
                z *= &m;
                Some(m)
            }
        };
        Block { input: x, z, mask }
    }

    fn check_batch(&self, dl: &[f64], de: ArrayView2<f64>) -> Result<(), AttackError> {
        if de.ncols() != self.embedding_dim {
            return Err(AttackError::Dimension {
                expected: self.embedding_dim,
                got: de.ncols(),
            });
        }
        if de.nrows() != dl.len() {
            return Err(AttackError::Dimension {
                expected: dl.len(),
                got: de.nrows(),
            });
        }
        if dl.is_empty() {
            return Err(AttackError::EmptyBatch);
        }
        Ok(())
    }

    fn forward_tape(&self, dl: &[f64], de: ArrayView2<f64>, mut mode: Mode) -> (Array2<f64>, Tape) {
        let x_loss = Array2::from_shape_vec((dl.len(), 1), dl.to_vec()).expect("column");
        let loss = self.block(LOSS, x_loss, &mut mode);
        let emb_a = self.block(EMB_A, de.to_owned(), &mut mode);
        let emb_b = self.block(EMB_B, relu(&emb_a.z), &mut mode);
        let mut h = concatenate![Axis(1), relu(&loss.z), relu(&emb_b.z)];
        let mut enc = Vec::with_capacity(ENCODER_WIDTHS.len() - 1);
        for i in 0..ENCODER_WIDTHS.len() - 1 {
            let b = self.block(ENC + i, h, &mut mode);
            h = relu(&b.z);
            enc.push(b);
        }
        let logits_pre = self.layers[N_LAYERS - 1].apply(h.view());
        let logits = if self.final_relu { relu(&logits_pre) } else { logits_pre.clone() };
        enc.push(Block {
            input: h,
            z: Array2::zeros((0, 0)),
            mask: None,
        });
        (
            logits,
            Tape {
                loss,
                emb_a,
                emb_b,
                enc,
                logits_pre,
            },
        )
    }

    /// Logits for a batch of `(ΔL_norm, Δe)` rows.
    pub fn logits(&self, dl: &[f64], de: ArrayView2<f64>, mode: Mode) -> Result<Array2<f64>, AttackError> {
        self.check_batch(dl, de)?;
        Ok(self.forward_tape(dl, de, mode).0)
    }

    /// `softmax(logits)[1]` per row.
    pub fn predict(&self, dl: &[f64], de: ArrayView2<f64>) -> Result<Vec<f64>, AttackError> {
        let logits = self.logits(dl, de, Mode::Eval)?;
        Ok(logits.outer_iter().map(|r| prob_one(r[0], r[1])).collect())
    }

    /// Single-example forward pass: `(logits, p)`.
    pub fn forward(&self, dl: f64, de: &[f64], mode: Mode) -> Result<([f64; 2], f64), AttackError> {
        let de = ArrayView2::from_shape((1, de.len()), de).expect("row");
        let l = self.logits(&[dl], de, mode)?;
        let (a, b) = (l[[0, 0]], l[[0, 1]]);
        Ok(([a, b], prob_one(a, b)))
    }

    /// Mean cross-entropy and its gradient for a batch; labels are 0/1.
    pub fn loss_grad(
        &self,
        dl: &[f64],
        de: ArrayView2<f64>,
        labels: &[u8],
        mode: Mode,
    ) -> Result<(f64, Grads), AttackError> {
        self.check_batch(dl, de)?;
        let n = dl.len() as f64;
        let (logits, tape) = self.forward_tape(dl, de, mode);
        let mut loss = 0.0;
        let mut d = Array2::zeros(logits.dim());
        for (i, row) in logits.outer_iter().enumerate() {
            let (a, b) = (row[0], row[1]);
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            let y = labels[i] as usize;
            loss += lse - row[y];
            let p1 = prob_one(a, b);
            d[[i, 0]] = (1.0 - p1 - if y == 0 { 1.0 } else { 0.0 }) / n;
            d[[i, 1]] = (p1 - if y == 1 { 1.0 } else { 0.0 }) / n;
        }
        if self.final_relu {
            d.zip_mut_with(&tape.logits_pre, |g, &z| {
                if z <= 0.0 {
                    *g = 0.0
                }
            });
        }
        let mut grads = self.zero_grads();

        // encoder, last layer first
        let last = N_LAYERS - 1;
        let mut dh = self.linear_back(last, &tape.enc[ENCODER_WIDTHS.len() - 1].input, &d, &mut grads);
        for i in (0..ENCODER_WIDTHS.len() - 1).rev() {
            let dz = act_back(&tape.enc[i], dh);
            dh = self.linear_back(ENC + i, &tape.enc[i].input, &dz, &mut grads);
        }
        let d_loss = dh.slice(s![.., ..PROJECTION]).to_owned();
        let d_emb = dh.slice(s![.., PROJECTION..]).to_owned();

        let dz = act_back(&tape.loss, d_loss);
        self.linear_back(LOSS, &tape.loss.input, &dz, &mut grads);
        let dz = act_back(&tape.emb_b, d_emb);
        let dh = self.linear_back(EMB_B, &tape.emb_b.input, &dz, &mut grads);
        let dz = act_back(&tape.emb_a, dh);
        self.linear_back(EMB_A, &tape.emb_a.input, &dz, &mut grads);
        Ok((loss / n, grads))
    }

    fn linear_back(&self, idx: usize, input: &Array2<f64>, dz: &Array2<f64>, grads: &mut Grads) -> Array2<f64> {
        grads[idx].w = dz.t().dot(input);
        grads[idx].b = dz.sum_axis(Axis(0));
        dz.dot(&self.layers[idx].w)
    }
}

/// Back through `relu(z * mask)`.
fn act_back(b: &Block, mut dh: Array2<f64>) -> Array2<f64> {
    dh.zip_mut_with(&b.z, |g, &z| {
        if z <= 0.0 {
            *g = 0.0
        }
    });
    if let Some(m) = &b.mask {
        dh *= m;
    }
    dh
}

/// Second softmax component, computed stably.
pub fn prob_one(a: f64, b: f64) -> f64 {
    let d = a - b;
    if d >= 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, e: usize, seed: u64) -> (Vec<f64>, Array2<f64>, Vec<u8>) {
        let mut r = Prng::new(seed);
        let dl = (0..n).map(|_| 2.0 * r.normal()).collect();
        let de = Array2::from_shape_simple_fn((n, e), || r.normal());
        let y = (0..n).map(|i| (i % 2) as u8).collect();
        (dl, de, y)
    }

    #[test]
    fn shapes_follow_the_architecture() {
        let net = AttackNet::new(16, 0).unwrap();
        let shapes: Vec<_> = net.layers.iter().map(Linear::shape).collect();
        assert_eq!(
            shapes,
            vec![
                (512, 1),
                (8, 16),
                (512, 8),
                (512, 1024),
                (256, 512),
                (128, 256),
                (64, 128),
                (32, 64),
                (2, 32)
            ]
        );
    }

    #[test]
    fn zero_params_give_half_and_ln2() {
        let net = AttackNet::zeros(6);
        let (logits, p) = net.forward(1.5, &[0.3; 6], Mode::Eval).unwrap();
        assert_eq!(logits, [0.0, 0.0]);
        assert_eq!(p, 0.5);
        let (dl, de, y) = batch(5, 6, 1);
        let (loss, _) = net.loss_grad(&dl, de.view(), &y, Mode::Eval).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn eval_is_deterministic_and_train_uses_dropout() {
        let net = AttackNet::new(8, 3).unwrap();
        let de = [0.5, -1.0, 0.2, 0.0, 1.0, 2.0, -0.3, 0.7];
        let a = net.forward(0.4, &de, Mode::Eval).unwrap();
        let b = net.forward(0.4, &de, Mode::Eval).unwrap();
        assert_eq!(a.0[0].to_bits(), b.0[0].to_bits());
        assert_eq!(a.1.to_bits(), b.1.to_bits());
        let mut rng = Prng::new(1);
        let (dl, m, _) = batch(64, 8, 2);
        let t = net.logits(&dl, m.view(), Mode::Train(&mut rng)).unwrap();
        let e = net.logits(&dl, m.view(), Mode::Eval).unwrap();
        assert_ne!(t, e);
    }

    fn oracle_forward(net: &AttackNet, dl: f64, de: &[f64]) -> [f64; 2] {
        fn affine(l: &Linear, x: &[f64]) -> Vec<f64> {
            (0..l.w.nrows())
                .map(|o| l.b[o] + (0..x.len()).map(|i| l.w[[o, i]] * x[i]).sum::<f64>())
                .collect()
        }
        fn relu(v: Vec<f64>) -> Vec<f64> {
            v.into_iter().map(|x| if x > 0.0 { x } else { 0.0 }).collect()
        }
        let l = relu(affine(&net.layers[0], &[dl]));
        let e = relu(affine(&net.layers[2], &relu(affine(&net.layers[1], de))));
        let mut h: Vec<f64> = l.into_iter().chain(e).collect();
        for layer in &net.layers[3..8] {
            h = relu(affine(layer, &h));
        }
        let out = affine(&net.layers[8], &h);
        [out[0].max(0.0), out[1].max(0.0)]
    }

    #[test]
    fn matches_layer_by_layer_oracle() {
        let mut r = Prng::new(42);
        for seed in 0..5 {
            let mut net = AttackNet::new(10, seed).unwrap();
            // larger output weights keep the final ReLU from zeroing everything
            net.layers[8].w.mapv_inplace(|w| w * 50.0);
            let de: Vec<f64> = (0..10).map(|_| r.normal()).collect();
            let dl = r.normal();
            let (logits, p) = net.forward(dl, &de, Mode::Eval).unwrap();
            let o = oracle_forward(&net, dl, &de);
            assert!((logits[0] - o[0]).abs() < 1e-10 && (logits[1] - o[1]).abs() < 1e-10);
            let expected = o[1].exp() / (o[0].exp() + o[1].exp());
            assert!((p - expected).abs() < 1e-10);
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn mirrored_net_complements_probability() {
        let mut net = AttackNet::new(4, 9).unwrap();
        net.layers[8].w.mapv_inplace(|w| w * 50.0);
        let m = net.mirrored();
        let (_, p) = net.forward(0.7, &[1.0, 0.0, -1.0, 2.0], Mode::Eval).unwrap();
        let (_, q) = m.forward(0.7, &[1.0, 0.0, -1.0, 2.0], Mode::Eval).unwrap();
        assert!((p + q - 1.0).abs() < 1e-15);
    }

    #[test]
    fn duplicated_batch_keeps_loss_and_gradient() {
        let net = AttackNet::new(6, 5).unwrap();
        let (dl, de, y) = batch(7, 6, 3);
        let (l1, g1) = net.loss_grad(&dl, de.view(), &y, Mode::Eval).unwrap();
        let dl2: Vec<f64> = dl.iter().chain(&dl).copied().collect();
        let de2 = concatenate![Axis(0), de, de];
        let y2: Vec<u8> = y.iter().chain(&y).copied().collect();
        let (l2, g2) = net.loss_grad(&dl2, de2.view(), &y2, Mode::Eval).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.iter().zip(&g2) {
            assert!(a.w.iter().zip(&b.w).all(|(x, y)| (x - y).abs() < 1e-14));
            assert!(a.b.iter().zip(&b.b).all(|(x, y)| (x - y).abs() < 1e-14));
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut r = Prng::new(99);
        let mut checked = 0;
        for draw in 0..6 {
            let mut net = AttackNet::new(6, draw).unwrap();
            net.final_relu = draw % 2 == 0;
            net.layers[8].w.mapv_inplace(|w| w * 20.0);
            let (dl, de, y) = batch(4, 6, 50 + draw);
            let (l0, g) = net.loss_grad(&dl, de.view(), &y, Mode::Eval).unwrap();
            let h = 1e-4;
            let (mut diff, mut norm) = (0.0, 0.0);
            for _ in 0..40 {
                let li = r.below(N_LAYERS);
                let (o, i) = net.layers[li].shape();
                let (oi, ii) = (r.below(o), r.below(i));
                let mut plus = net.clone();
                plus.layers[li].w[[oi, ii]] += h;
                let mut minus = net.clone();
                minus.layers[li].w[[oi, ii]] -= h;
                let lp = plus.loss_grad(&dl, de.view(), &y, Mode::Eval).unwrap().0;
                let lm = minus.loss_grad(&dl, de.view(), &y, Mode::Eval).unwrap().0;
                let num = (lp - lm) / (2.0 * h);
                let ana = g[li].w[[oi, ii]];
                let (fwd, bwd) = ((lp - l0) / h, (l0 - lm) / h);
                if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()) + 1e-8 {
                    // probe straddles a ReLU kink
                    continue;
                }
                checked += 1;
                diff += (num - ana).powi(2);
                norm += num.abs().max(ana.abs()).powi(2);
            }
            if norm > 0.0 {
                assert!((diff / norm).sqrt() <= 1e-3, "draw {draw}: rel err {}", (diff / norm).sqrt());
            }
        }
        assert!(checked >= 150, "only {checked} smooth probes");
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = AttackNet::new(4, 0).unwrap();
        assert!(matches!(net.forward(0.0, &[1.0; 3], Mode::Eval), Err(AttackError::Dimension { .. })));
        let empty = Array2::<f64>::zeros((0, 4));
        assert!(matches!(
            net.loss_grad(&[], empty.view(), &[], Mode::Eval),
            Err(AttackError::EmptyBatch)
        ));
    }
}
