//! Intra-modal reasoning over fully connected node graphs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::numkit::{ParamId, ParamSet, Tape, Var};

/// Multiplier on the glorot init of φ.
pub const PHI_INIT_GAIN: f64 = 4.0;

/// One graph layer of one modality.
#[derive(Clone, Copy, Debug)]
pub struct GraphLayer {
    /// Projection into the interaction space, followed by tanh.
    pub phi: Linear,
    /// Graph-convolution matrix (`d × d`, applied as `X W`).
    pub weight: ParamId,
    pub norm: LayerNorm,
    pub dim: usize,
}

impl GraphLayer {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        dim: usize,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let phi = Linear::new(
            params,
            &format!("{prefix}.phi.w"),
            Some(&format!("{prefix}.phi.b")),
            dim,
            dim,
            rng,
        )?;
        for w in params.value_mut(phi.weight).data_mut() {
            *w *= PHI_INIT_GAIN;
        }
        let weight = params.add_glorot(format!("{prefix}.w"), dim, dim, rng)?;
        let norm = LayerNorm::new(params, &format!("{prefix}.ln"), dim, eps)?;
        Ok(Self {
            phi,
            weight,
            norm,
            dim,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.phi.ids();
        ids.extend([self.weight, self.norm.gain, self.norm.bias]);
        ids
    }

    /// Pre-softmax similarity logits `φ(X) φ(X)ᵀ`.
    pub fn adjacency_logits(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        self.check_width(tape, x)?;
        let p = self.phi.apply(tape, params, x)?;
        let p = tape.tanh(p)?;
        tape.matmul_nt(p, p)
    }

    /// Row-stochastic `N × N` adjacency.
    pub fn adjacency(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let logits = self.adjacency_logits(tape, params, x)?;
        tape.softmax_rows(logits)
    }

    /// `relu(layer_norm(G X W))`.
    pub fn gcn_update(&self, tape: &mut Tape, params: &ParamSet, x: Var, g: Var) -> Result<Var> {
        self.check_width(tape, x)?;
        let n = tape.value(x).rows();
        let gs = tape.shape(g).to_vec();
        if gs != [n, n] {
            return Err(Error::shape("gcn_update", &gs, &[n, n]));
        }
        let gx = tape.matmul(g, x)?;
        let w = tape.param(params, self.weight);
        let gxw = tape.matmul(gx, w)?;
        let normed = self.norm.apply(tape, params, gxw)?;
        tape.relu(normed)
    }

    pub fn reason(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let g = self.adjacency(tape, params, x)?;
        self.gcn_update(tape, params, x, g)
    }

    fn check_width(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::shape("graph layer input", shape, &[self.dim]));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numkit::{gradcheck, Tensor, LAYER_NORM_EPS};

    fn layer(dim: usize, seed: u64) -> (ParamSet, GraphLayer) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = GraphLayer::new(&mut ps, "g", dim, LAYER_NORM_EPS, &mut rng).unwrap();
        (ps, l)
    }

    fn eval(ps: &ParamSet, f: impl FnOnce(&mut Tape, &ParamSet) -> Result<Var>) -> Tensor {
        let mut t = Tape::new();
        let v = f(&mut t, ps).unwrap();
        t.value(v).clone()
    }

    #[test]
    fn identical_rows_give_uniform_adjacency() {
        let (ps, l) = layer(4, 1);
        let x = Tensor::from_rows(&vec![vec![0.3, -0.7, 1.1, 0.2]; 5]).unwrap();
        let g = eval(&ps, |t, ps| {
            let x = t.constant(x);
            l.adjacency(t, ps, x)
        });
        for v in g.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn single_node_adjacency_is_one() {
        let (ps, l) = layer(3, 2);
        let g = eval(&ps, |t, ps| {
            let x = t.constant(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
            l.adjacency(t, ps, x)
        });
        assert_eq!(g.data(), &[1.0]);
    }

    #[test]
    fn identical_rows_identity_weight() {
        let (mut ps, l) = layer(4, 3);
        ps.set_value(l.weight, Tensor::identity(4)).unwrap();
        let v = [0.5, -1.0, 2.0, 0.0];
        let x = Tensor::from_rows(&vec![v.to_vec(); 3]).unwrap();
        let out = eval(&ps, |t, ps| {
            let x = t.constant(x);
            l.reason(t, ps, x)
        });
        // Hand composition of layer_norm with unit gain, zero bias, then relu.
        let mean = v.iter().sum::<f64>() / 4.0;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0;
        let expected: Vec<f64> = v
            .iter()
            .map(|a| ((a - mean) / (var + LAYER_NORM_EPS).sqrt()).max(0.0))
            .collect();
        for i in 0..3 {
            for (a, b) in out.row(i).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_nonnegative_and_composition_matches_two_steps() {
        let (ps, l) = layer(5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::uniform(&[7, 5], 2.0, &mut rng);
        let composed = eval(&ps, |t, ps| {
            let x = t.constant(x.clone());
            l.reason(t, ps, x)
        });
        let two_step = eval(&ps, |t, ps| {
            let x = t.constant(x.clone());
            let g = l.adjacency(t, ps, x)?;
            l.gcn_update(t, ps, x, g)
        });
        assert_eq!(composed, two_step);
        assert!(composed.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn gcn_update_rejects_mismatched_adjacency() {
        let (ps, l) = layer(3, 5);
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones(&[4, 3]));
        let g = t.constant(Tensor::ones(&[3, 3]));
        assert!(matches!(
            l.gcn_update(&mut t, &ps, x, g),
            Err(Error::Shape { .. })
        ));
        let wide = t.constant(Tensor::ones(&[4, 5]));
        assert!(l.reason(&mut t, &ps, wide).is_err());
    }

    #[test]
    fn gradient_wrt_graph_weight() {
        let (mut ps, l) = layer(4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::uniform(&[5, 4], 1.0, &mut rng);
        let mix = Tensor::uniform(&[5, 4], 1.0, &mut rng);
        let coords = gradcheck::all_coords(&ps, &[l.weight]);
        let report = gradcheck::grad_check(&mut ps, &coords, |t, ps| {
            let x = t.constant(x.clone());
            let y = l.reason(t, ps, x)?;
            let m = t.constant(mix.clone());
            let y = t.mul(y, m)?;
            t.sum(y)
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-5, "{:?}", report.worst());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn adjacency_rows_are_stochastic(seed in any::<u64>(), n in 1usize..9) {
            let (ps, l) = layer(4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5);
            let x = Tensor::uniform(&[n, 4], 3.0, &mut rng);
            let g = eval(&ps, |t, ps| { let x = t.constant(x); l.adjacency(t, ps, x) });
            for i in 0..n {
                let row = g.row(i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
            }
        }

        #[test]
        fn reasoning_is_permutation_equivariant(seed in any::<u64>()) {
            let (ps, l) = layer(5, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let x = Tensor::uniform(&[6, 5], 2.0, &mut rng);
            let mut perm: Vec<usize> = (0..6).collect();
            perm.shuffle(&mut rng);
            let base = eval(&ps, |t, ps| { let x = t.constant(x.clone()); l.reason(t, ps, x) });
            let permuted = eval(&ps, |t, ps| {
                let x = t.constant(x.select_rows(&perm));
                l.reason(t, ps, x)
            });
            let expected = base.select_rows(&perm);
            for (a, b) in permuted.data().iter().zip(expected.data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn adjacency_ignores_rowwise_logit_shift(seed in any::<u64>(), shift in -5.0f64..5.0) {
            let (ps, l) = layer(3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
            let x = Tensor::uniform(&[4, 3], 1.0, &mut rng);
            let (plain, shifted) = {
                let mut t = Tape::new();
                let xv = t.constant(x);
                let logits = l.adjacency_logits(&mut t, &ps, xv).unwrap();
                let plain = t.softmax_rows(logits).unwrap();
                let moved = t.add_scalar(logits, shift).unwrap();
                let shifted = t.softmax_rows(moved).unwrap();
                (t.value(plain).clone(), t.value(shifted).clone())
            };
            for (a, b) in plain.data().iter().zip(shifted.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
