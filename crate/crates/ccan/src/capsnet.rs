//! Capsule layers and dynamic routing.
//!
//! A capsule is a vector whose direction encodes pose and whose norm encodes
//! presence. Prediction vectors are formed per (input, output) capsule pair
//! through trainable weight matrices; routing-by-agreement then iterates
//! coupling softmax, weighted sum, squash, and agreement updates. The class
//! capsule norms are the deep embedding handed to the clustering layer.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{kernels, NodeId, Parameter, Real, SquashKind, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerTag {
    Primary,
    Class,
}

/// A set of capsule vectors: M capsules of dimension d.
#[derive(Debug, Clone)]
pub struct CapsuleBank<T: Real> {
    pub vectors: Tensor<T>,
    pub layer_tag: LayerTag,
}

impl<T: Real> CapsuleBank<T> {
    pub fn new(vectors: Tensor<T>, layer_tag: LayerTag) -> Result<Self> {
        if vectors.shape().len() != 2 {
            return Err(Error::shape(
                "capsule_bank",
                format!("expected [capsules, dim], got {:?}", vectors.shape()),
            ));
        }
        Ok(CapsuleBank { vectors, layer_tag })
    }

    pub fn count(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn capsule(&self, m: usize) -> &[T] {
        let d = self.dim();
        &self.vectors.data()[m * d..(m + 1) * d]
    }

    /// 2-norm of every capsule vector.
    pub fn norms(&self) -> Vec<T> {
        kernels::row_norms_forward(self.vectors.data(), self.dim())
    }
}

/// Trainable prediction weights between two capsule layers:
/// one d_in x d_out matrix per (input capsule, output capsule) pair.
#[derive(Debug, Clone)]
pub struct CapsuleWeights<T: Real> {
    pub param: Parameter<T>,
}

const CAPSULE_INIT_BOUND: f64 = 0.05;

impl<T: Real> CapsuleWeights<T> {
    pub fn init(
        name: impl Into<String>,
        k_in: usize,
        k_out: usize,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let data: Vec<T> = (0..k_in * k_out * d_in * d_out)
            .map(|_| T::from_f64(rng::uniform(rng, -CAPSULE_INIT_BOUND, CAPSULE_INIT_BOUND)))
            .collect();
        let tensor = Tensor::new(vec![k_in, k_out, d_in, d_out], data).expect("consistent shape");
        CapsuleWeights {
            param: Parameter::new(name, tensor),
        }
    }
}

/// Applies the squash nonlinearity to a single vector.
pub fn squash_vector<T: Real>(s: &[T], kind: SquashKind) -> Vec<T> {
    kernels::squash_rows_forward(s, s.len().max(1), kind)
}

/// Prediction vectors on the tape: u[n,k,d_in] x W[k,l,d_in,d_out]
/// -> u_hat[n,k,l,d_out].
pub fn predict<T: Real>(tape: &mut Tape<T>, u: NodeId, w: NodeId) -> Result<NodeId> {
    tape.capsule_predict(u, w)
}

/// Tape nodes produced by one routing pass.
pub struct RoutingNodes {
    /// Output capsules v, shape [n, k_out, d_out].
    pub output: NodeId,
    /// Couplings c from the final iteration, shape [n, k_in, k_out].
    pub couplings: NodeId,
    /// Routing logits b after the final update, shape [n, k_in, k_out].
    pub logits: NodeId,
}

/// Routing-by-agreement between two capsule layers.
///
/// Logits start at zero on every forward pass (they are never trained);
/// each iteration computes c = softmax(b) over output capsules, the
/// coupling-weighted prediction sum, the squashed output, and the agreement
/// update b += u_hat . v. Gradients flow through all iterations.
pub fn dynamic_routing<T: Real>(
    tape: &mut Tape<T>,
    u_hat: NodeId,
    max_iterations: usize,
    squash: SquashKind,
) -> Result<RoutingNodes> {
    if max_iterations == 0 {
        return Err(Error::Config("routing needs at least one iteration".into()));
    }
    let shape = tape.shape(u_hat).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(
            "dynamic_routing",
            format!("predictions must be [n,k,l,d], got {shape:?}"),
        ));
    }
    let (n, k, l) = (shape[0], shape[1], shape[2]);
    let mut b = tape.zeros(vec![n, k, l]);
    let mut output = None;
    let mut couplings = None;
    for _ in 0..max_iterations {
        let c = tape.softmax(b, 2)?;
        let s = tape.route_weighted_sum(c, u_hat)?;
        let v = tape.squash_rows(s, squash)?;
        let agreement = tape.route_agreement(u_hat, v)?;
        b = tape.add(b, agreement)?;
        output = Some(v);
        couplings = Some(c);
    }
    Ok(RoutingNodes {
        output: output.unwrap(),
        couplings: couplings.unwrap(),
        logits: b,
    })
}

/// Deep embedding: the norm of every class capsule, shape [n, k_out].
pub fn embedding<T: Real>(tape: &mut Tape<T>, class_capsules: NodeId) -> Result<NodeId> {
    tape.row_norms(class_capsules)
}

/// Routing state retained for inspection after a forward pass.
#[derive(Debug, Clone)]
pub struct RoutingState<T: Real> {
    pub logits: Tensor<T>,
    pub couplings: Tensor<T>,
    pub predictions: Tensor<T>,
    pub max_iterations: usize,
}

impl<T: Real> RoutingState<T> {
    pub fn capture(
        tape: &Tape<T>,
        nodes: &RoutingNodes,
        u_hat: NodeId,
        max_iterations: usize,
    ) -> Self {
        RoutingState {
            logits: tape.value(nodes.logits),
            couplings: tape.value(nodes.couplings),
            predictions: tape.value(u_hat),
            max_iterations,
        }
    }
}

/// Routes a single primary bank to a class bank outside any training graph.
pub fn route_bank<T: Real>(
    bank: &CapsuleBank<T>,
    weights: &CapsuleWeights<T>,
    max_iterations: usize,
    squash: SquashKind,
) -> Result<(CapsuleBank<T>, RoutingState<T>)> {
    let (m, d) = (bank.count(), bank.dim());
    let mut tape = Tape::<T>::new();
    let u = tape.constant(vec![1, m, d], bank.vectors.data().to_vec())?;
    let w = tape.leaf(&weights.param.value);
    let u_hat = predict(&mut tape, u, w)?;
    let nodes = dynamic_routing(&mut tape, u_hat, max_iterations, squash)?;
    let state = RoutingState::capture(&tape, &nodes, u_hat, max_iterations);
    let out_shape = tape.shape(nodes.output).to_vec();
    let vectors = Tensor::new(
        vec![out_shape[1], out_shape[2]],
        tape.data(nodes.output).to_vec(),
    )?;
    Ok((CapsuleBank::new(vectors, LayerTag::Class)?, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn splitmix(state: &mut u64) -> f64 {
        *state = state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = *state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n).map(|_| splitmix(&mut s)).collect()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Straight-line transcription of the routing algorithm, sharing no
    /// code with the implementation. Returns (v, final couplings).
    fn routing_oracle(
        u_hat: &[f64],
        k: usize,
        l: usize,
        d: usize,
        iters: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut b = vec![0.0f64; k * l];
        let mut v = vec![0.0f64; l * d];
        let mut c = vec![0.0f64; k * l];
        for _ in 0..iters {
            for ki in 0..k {
                let row = &b[ki * l..(ki + 1) * l];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for li in 0..l {
                    c[ki * l + li] = exps[li] / sum;
                }
            }
            let mut s = vec![0.0f64; l * d];
            for ki in 0..k {
                for li in 0..l {
                    for di in 0..d {
                        s[li * d + di] += c[ki * l + li] * u_hat[(ki * l + li) * d + di];
                    }
                }
            }
            for li in 0..l {
                let row = &s[li * d..(li + 1) * d];
                let n2: f64 = row.iter().map(|x| x * x).sum();
                let n = n2.sqrt();
                let gain = if n > 0.0 { n / (1.0 + n2) } else { 0.0 };
                for di in 0..d {
                    v[li * d + di] = row[di] * gain;
                }
            }
            for ki in 0..k {
                for li in 0..l {
                    let mut dot = 0.0;
                    for di in 0..d {
                        dot += u_hat[(ki * l + li) * d + di] * v[li * d + di];
                    }
                    b[ki * l + li] += dot;
                }
            }
        }
        (v, c)
    }

    #[test]
    fn squash_of_zero_is_zero() {
        let v = squash_vector(&[0.0f64, 0.0, 0.0], SquashKind::Standard);
        assert_eq!(v, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn squash_of_unit_vector_has_norm_half() {
        // closed form: |v| = 1/(1+1) = 0.5
        let v = squash_vector(&[1.0f64, 0.0], SquashKind::Standard);
        assert!((norm(&v) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn squash_preserves_direction() {
        let e = [0.6f64, 0.8];
        for &alpha in &[0.1, 1.0, 7.5] {
            let s: Vec<f64> = e.iter().map(|x| x * alpha).collect();
            let v = squash_vector(&s, SquashKind::Standard);
            let cos = v.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / norm(&v);
            assert!((cos - 1.0).abs() < 1e-12, "alpha {alpha}");
        }
    }

    #[test]
    fn squash_norm_is_bounded_and_increasing() {
        let mut last = 0.0;
        for i in 0..60 {
            let n = 10f64.powf(-6.0 + i as f64 * 0.25);
            let v = squash_vector(&[n, 0.0], SquashKind::Standard);
            let vn = norm(&v);
            assert!(vn < 1.0, "norm {n} gave {vn}");
            assert!(vn > last, "not increasing at {n}");
            last = vn;
        }
    }

    #[test]
    fn printed_squash_variant_matches_its_formula() {
        // |v| = n^3 / (1+n)^2, which exceeds 1 for large n
        for &n in &[0.5f64, 1.0, 3.0, 10.0] {
            let v = squash_vector(&[n, 0.0], SquashKind::PaperPrinted);
            let want = n.powi(3) / (1.0 + n).powi(2);
            assert!((norm(&v) - want).abs() < 1e-12);
        }
        let big = squash_vector(&[10.0f64, 0.0], SquashKind::PaperPrinted);
        assert!(norm(&big) > 1.0);
    }

    #[test]
    fn predict_with_identity_weights_passes_through() {
        let mut tape = Tape::<f64>::new();
        let u = tape.leaf(&t(&[1, 1, 3], &[1.0, 0.0, 0.0]));
        // identity 3x3 for the single (k,l) pair
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = tape.leaf(&t(&[1, 1, 3, 3], &eye));
        let u_hat = predict(&mut tape, u, w).unwrap();
        assert_eq!(tape.data(u_hat), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn predict_of_zero_bank_is_zero() {
        let mut tape = Tape::<f64>::new();
        let u = tape.leaf(&Tensor::zeros(vec![2, 4, 3]));
        let w = tape.leaf(&t(&[4, 2, 3, 5], &rand_vec(4 * 2 * 3 * 5, 5)));
        let u_hat = predict(&mut tape, u, w).unwrap();
        assert!(tape.data(u_hat).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predict_matches_explicit_matrix_vector_oracle() {
        let (k, l, di, dout) = (2, 2, 3, 2);
        let u0 = rand_vec(k * di, 11);
        let w0 = rand_vec(k * l * di * dout, 13);
        let mut tape = Tape::<f64>::new();
        let u = tape.leaf(&t(&[1, k, di], &u0));
        let w = tape.leaf(&t(&[k, l, di, dout], &w0));
        let u_hat = predict(&mut tape, u, w).unwrap();
        for ki in 0..k {
            for li in 0..l {
                for o in 0..dout {
                    let mut want = 0.0;
                    for i in 0..di {
                        want += u0[ki * di + i] * w0[((ki * l + li) * di + i) * dout + o];
                    }
                    let got = tape.data(u_hat)[(ki * l + li) * dout + o];
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_pair_routing_is_squash_of_prediction() {
        // one input, one output capsule: b=0 gives c=1, so v = squash(u_hat)
        let u_hat0 = [0.3f64, -0.4, 0.5];
        let mut tape = Tape::<f64>::new();
        let u_hat = tape.leaf(&t(&[1, 1, 1, 3], &u_hat0));
        let nodes = dynamic_routing(&mut tape, u_hat, 1, SquashKind::Standard).unwrap();
        let want = squash_vector(&u_hat0, SquashKind::Standard);
        for (g, w) in tape.data(nodes.output).iter().zip(&want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn coupling_rows_sum_to_one_at_every_iteration() {
        let (k, l, d) = (5, 3, 4);
        let u_hat0 = rand_vec(k * l * d, 21);
        for iters in 1..=3 {
            let mut tape = Tape::<f64>::new();
            let u_hat = tape.leaf(&t(&[1, k, l, d], &u_hat0));
            let nodes = dynamic_routing(&mut tape, u_hat, iters, SquashKind::Standard).unwrap();
            for row in tape.data(nodes.couplings).chunks(l) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-10, "iters {iters}");
            }
        }
    }

    #[test]
    fn routing_matches_straight_line_oracle() {
        for seed in 0..20u64 {
            let (k, l, d) = (4, 3, 5);
            let u_hat0 = rand_vec(k * l * d, 100 + seed);
            for iters in 1..=3 {
                let mut tape = Tape::<f64>::new();
                let u_hat = tape.leaf(&t(&[1, k, l, d], &u_hat0));
                let nodes =
                    dynamic_routing(&mut tape, u_hat, iters, SquashKind::Standard).unwrap();
                let (want_v, want_c) = routing_oracle(&u_hat0, k, l, d, iters);
                for (g, w) in tape.data(nodes.output).iter().zip(&want_v) {
                    assert!((g - w).abs() < 1e-10);
                }
                for (g, w) in tape.data(nodes.couplings).iter().zip(&want_c) {
                    assert!((g - w).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn identical_capsules_agree_per_scripted_trace() {
        // two identical input capsules predicting the same vector
        let (k, l, d) = (2, 1, 3);
        let one = [0.5f64, 0.1, -0.2];
        let mut u_hat0 = Vec::new();
        u_hat0.extend_from_slice(&one);
        u_hat0.extend_from_slice(&one);
        let mut tape = Tape::<f64>::new();
        let u_hat = tape.leaf(&t(&[1, k, l, d], &u_hat0));
        let nodes = dynamic_routing(&mut tape, u_hat, 3, SquashKind::Standard).unwrap();
        let (want_v, _) = routing_oracle(&u_hat0, k, l, d, 3);
        for (g, w) in tape.data(nodes.output).iter().zip(&want_v) {
            assert!((g - w).abs() < 1e-12);
        }
        // both capsules couple equally, so s = 2 * c * u_hat with c = 1
        let s_scale = tape.data(nodes.output)[0] / squash_vector(&one, SquashKind::Standard)[0];
        assert!(s_scale.is_finite());
    }

    #[test]
    fn embedding_is_capsule_norms_below_one() {
        let bank = CapsuleBank::<f64>::new(Tensor::zeros(vec![4, 3]), LayerTag::Class).unwrap();
        assert!(bank.norms().iter().all(|&n| n == 0.0));

        let mut data = vec![0.0; 12];
        data[0] = 0.5;
        let bank = CapsuleBank::new(t(&[4, 3], &data), LayerTag::Class).unwrap();
        let norms = bank.norms();
        assert_eq!(norms[0], 0.5);
        assert!(norms[1..].iter().all(|&n| n == 0.0));

        // post-squash norms stay strictly below 1 for any input
        for seed in 0..50u64 {
            let scale = 10f64.powf((seed % 10) as f64 - 4.0);
            let raw: Vec<f64> = rand_vec(12, 300 + seed).iter().map(|v| v * scale).collect();
            let squashed = kernels::squash_rows_forward(&raw, 3, SquashKind::Standard);
            for row in squashed.chunks(3) {
                assert!(norm(row) < 1.0);
            }
        }
    }

    #[test]
    fn routing_gradients_match_finite_differences() {
        let (k, l, di, dout) = (3, 2, 3, 2);
        let u0 = rand_vec(k * di, 55);
        let w0 = rand_vec(k * l * di * dout, 57);
        let run = |wd: &[f64]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let u = tape.leaf(&t(&[1, k, di], &u0));
            let w = tape.leaf(&t(&[k, l, di, dout], wd));
            let u_hat = predict(&mut tape, u, w).unwrap();
            let nodes = dynamic_routing(&mut tape, u_hat, 3, SquashKind::Standard).unwrap();
            let z = embedding(&mut tape, nodes.output).unwrap();
            let sq = tape.mul(z, z).unwrap();
            let loss = tape.sum_all(sq);
            tape.scalar(loss)
        };
        let mut params = [Parameter::new("w", t(&[k, l, di, dout], &w0))];
        let mut tape = Tape::<f64>::new();
        let binding = tape.bind_params(&params);
        let u = tape.leaf(&t(&[1, k, di], &u0));
        let u_hat = predict(&mut tape, u, binding.id(0)).unwrap();
        let nodes = dynamic_routing(&mut tape, u_hat, 3, SquashKind::Standard).unwrap();
        let z = embedding(&mut tape, nodes.output).unwrap();
        let sq = tape.mul(z, z).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward_into(loss, &binding, &mut params).unwrap();

        let g = params[0].grad().unwrap();
        for i in 0..w0.len() {
            let h = 1e-5;
            let mut wp = w0.clone();
            wp[i] += h;
            let mut wm = w0.clone();
            wm[i] -= h;
            let fd = (run(&wp) - run(&wm)) / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-5, "element {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn route_bank_produces_class_bank_with_state() {
        let mut r = rng::seeded(1);
        let weights = CapsuleWeights::<f64>::init("caps.w", 6, 3, 4, 5, &mut r);
        let bank = CapsuleBank::new(
            t(&[6, 4], &rand_vec(24, 71)),
            LayerTag::Primary,
        )
        .unwrap();
        let (class, state) = route_bank(&bank, &weights, 3, SquashKind::Standard).unwrap();
        assert_eq!(class.count(), 3);
        assert_eq!(class.dim(), 5);
        assert_eq!(state.couplings.shape(), &[1, 6, 3]);
        assert_eq!(state.predictions.shape(), &[1, 6, 3, 5]);
        assert_eq!(state.max_iterations, 3);
        assert!(class.norms().iter().all(|&n| n < 1.0));
    }
}
