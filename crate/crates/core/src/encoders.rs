//! Contextual encoders: GRUs over each modality, the caption sentence
//! encoder, the shared word embedding and the visual projection.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numkit::{ParamId, ParamSet, Tape, Var};

/// Gated recurrent unit with the candidate computed as
/// `tanh(W_n x + U_n (r ⊙ h) + b_n)`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_z: Linear,
    pub w_r: Linear,
    pub w_n: Linear,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_n: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut input = |gate: &str, rng: &mut R| {
            Linear::new(
                params,
                &format!("{prefix}.w_{gate}"),
                Some(&format!("{prefix}.b_{gate}")),
                hidden_dim,
                input_dim,
                rng,
            )
        };
        let w_z = input("z", rng)?;
        let w_r = input("r", rng)?;
        let w_n = input("n", rng)?;
        let u_z = params.add_glorot(format!("{prefix}.u_z"), hidden_dim, hidden_dim, rng)?;
        let u_r = params.add_glorot(format!("{prefix}.u_r"), hidden_dim, hidden_dim, rng)?;
        let u_n = params.add_glorot(format!("{prefix}.u_n"), hidden_dim, hidden_dim, rng)?;
        Ok(Self {
            w_z,
            w_r,
            w_n,
            u_z,
            u_r,
            u_n,
            input_dim,
            hidden_dim,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in [&self.w_z, &self.w_r, &self.w_n] {
            ids.extend(l.ids());
        }
        ids.extend([self.u_z, self.u_r, self.u_n]);
        ids
    }

    /// Runs the recurrence over the rows of `seq` (`T × input_dim`).
    ///
    /// Returns all states (`T × hidden_dim`) and the last one (`1 × hidden_dim`).
    /// `h0` defaults to zeros.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        seq: Var,
        h0: Option<Var>,
    ) -> Result<(Var, Var)> {
        let shape = tape.shape(seq).to_vec();
        if tape.value(seq).cols() != self.input_dim || shape.len() != 2 {
            return Err(Error::shape("gru input", &shape, &[self.input_dim]));
        }
        let steps = shape[0];
        // Input projections for all steps at once.
        let xz = self.w_z.apply(tape, params, seq)?;
        let xr = self.w_r.apply(tape, params, seq)?;
        let xn = self.w_n.apply(tape, params, seq)?;
        let u_z = tape.param(params, self.u_z);
        let u_r = tape.param(params, self.u_r);
        let u_n = tape.param(params, self.u_n);

        let mut h = match h0 {
            Some(h) => h,
            None => tape.constant(crate::numkit::Tensor::zeros(&[1, self.hidden_dim])),
        };
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let hz = tape.affine(h, u_z, None)?;
            let xz_t = tape.row(xz, t)?;
            let z_pre = tape.add(xz_t, hz)?;
            let z = tape.sigmoid(z_pre)?;

            let hr = tape.affine(h, u_r, None)?;
            let xr_t = tape.row(xr, t)?;
            let r_pre = tape.add(xr_t, hr)?;
            let r = tape.sigmoid(r_pre)?;

            let rh = tape.mul(r, h)?;
            let hn = tape.affine(rh, u_n, None)?;
            let xn_t = tape.row(xn, t)?;
            let n_pre = tape.add(xn_t, hn)?;
            let n = tape.tanh(n_pre)?;

            // h' = (1 − z) ⊙ n + z ⊙ h = n + z ⊙ (h − n)
            let diff = tape.sub(h, n)?;
            let gated = tape.mul(z, diff)?;
            h = tape.add(n, gated)?;
            states.push(h);
        }
        let all = tape.concat(&states, 0)?;
        Ok((all, h))
    }
}

/// Word embedding table shared by question and caption tokens.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let table = params.add_glorot(name, vocab, dim, rng)?;
        Ok(Self { table, vocab, dim })
    }

    /// `tokens.len() × dim` matrix of embeddings.
    pub fn lookup(&self, tape: &mut Tape, params: &ParamSet, tokens: &[u32]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of size {}",
                self.vocab
            )));
        }
        let rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = tape.param(params, self.table);
        tape.gather_rows(table, &rows)
    }
}

/// Encodes each caption's word sequence with `gru` and stacks the final
/// hidden states into an `N_c × d_c` matrix.
pub fn encode_caption_set(
    tape: &mut Tape,
    params: &ParamSet,
    captions: &[Vec<u32>],
    embedding: &EmbeddingTable,
    gru: &Gru,
) -> Result<Var> {
    if captions.is_empty() {
        return Err(Error::Input("caption set is empty".into()));
    }
    let mut rows = Vec::with_capacity(captions.len());
    for (i, caption) in captions.iter().enumerate() {
        if caption.is_empty() {
            return Err(Error::Input(format!("caption {i} is empty")));
        }
        let words = embedding.lookup(tape, params, caption)?;
        let (_, last) = gru.encode(tape, params, words, None)?;
        rows.push(last);
    }
    tape.concat(&rows, 0)
}

/// Two fully connected layers with a relu between them, mapping per-frame
/// `[appearance ‖ motion]` to the common visual space.
#[derive(Clone, Copy, Debug)]
pub struct VisualProjection {
    pub hidden: Linear,
    pub output: Linear,
    pub appearance_dim: usize,
    pub motion_dim: usize,
}

impl VisualProjection {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        appearance_dim: usize,
        motion_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = Linear::new(
            params,
            &format!("{prefix}.fc1.w"),
            Some(&format!("{prefix}.fc1.b")),
            hidden_dim,
            appearance_dim + motion_dim,
            rng,
        )?;
        let output = Linear::new(
            params,
            &format!("{prefix}.fc2.w"),
            Some(&format!("{prefix}.fc2.b")),
            out_dim,
            hidden_dim,
            rng,
        )?;
        Ok(Self {
            hidden,
            output,
            appearance_dim,
            motion_dim,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.hidden.ids(), self.output.ids()].concat()
    }

    pub fn project(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        appearance: Var,
        motion: Var,
    ) -> Result<Var> {
        let (a, m) = (tape.shape(appearance).to_vec(), tape.shape(motion).to_vec());
        if tape.value(appearance).rows() != tape.value(motion).rows() {
            return Err(Error::shape("visual_project rows", &a, &m));
        }
        let joint = tape.concat(&[appearance, motion], 1)?;
        let h = self.hidden.apply(tape, params, joint)?;
        let h = tape.relu(h)?;
        self.output.apply(tape, params, h)
    }
}

/// Outputs of the three contextual encoders.
#[derive(Clone, Copy, Debug)]
pub struct ContextualFeatures {
    pub captions: Var,
    pub video: Var,
    pub question: Var,
    pub caption_last: Var,
    pub video_last: Var,
    pub question_last: Var,
}

/// One independent GRU per modality.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub caption: Gru,
    pub video: Gru,
    pub question: Gru,
}

impl ContextEncoder {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        dims: [usize; 3],
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            caption: Gru::new(params, "context.caption_gru", dims[0], hidden, rng)?,
            video: Gru::new(params, "context.video_gru", dims[1], hidden, rng)?,
            question: Gru::new(params, "context.question_gru", dims[2], hidden, rng)?,
        })
    }

    pub fn contextualize(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        captions: Var,
        video: Var,
        question: Var,
    ) -> Result<ContextualFeatures> {
        let (c1, c_last) = self.caption.encode(tape, params, captions, None)?;
        let (v1, v_last) = self.video.encode(tape, params, video, None)?;
        let (q1, q_last) = self.question.encode(tape, params, question, None)?;
        Ok(ContextualFeatures {
            captions: c1,
            video: v1,
            question: q1,
            caption_last: c_last,
            video_last: v_last,
            question_last: q_last,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numkit::{gradcheck, Tensor};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn zero_all(params: &mut ParamSet) {
        for id in params.ids().collect::<Vec<_>>() {
            params.value_mut(id).data_mut().fill(0.0);
        }
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::uniform(&[rows, cols], 1.0, rng)
    }

    #[test]
    fn zero_params_zero_state_stays_zero() {
        let mut ps = ParamSet::new();
        let gru = Gru::new(&mut ps, "g", 3, 4, &mut rng()).unwrap();
        zero_all(&mut ps);
        let mut t = Tape::new();
        let x = t.constant(random_matrix(5, 3, &mut rng()));
        let (states, last) = gru.encode(&mut t, &ps, x, None).unwrap();
        assert_eq!(t.shape(states), &[5, 4]);
        assert_eq!(t.value(states).max_abs(), 0.0);
        assert_eq!(t.value(last).max_abs(), 0.0);
    }

    #[test]
    fn zero_params_halve_the_state_each_step() {
        let mut ps = ParamSet::new();
        let gru = Gru::new(&mut ps, "g", 2, 3, &mut rng()).unwrap();
        zero_all(&mut ps);
        let v = [0.8, -1.6, 3.2];
        let mut t = Tape::new();
        let x = t.constant(random_matrix(4, 2, &mut rng()));
        let h0 = t.constant(Tensor::row_vector(v.to_vec()));
        let (states, _) = gru.encode(&mut t, &ps, x, Some(h0)).unwrap();
        for step in 0..4 {
            let scale = 0.5f64.powi(step as i32 + 1);
            for j in 0..3 {
                assert_eq!(t.value(states).get2(step, j), v[j] * scale);
            }
        }
    }

    #[test]
    fn state_bounded_by_initial_state_or_one() {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let gru = Gru::new(&mut ps, "g", 3, 5, &mut r).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::uniform(&[20, 3], 5.0, &mut r));
        let h0 = t.constant(Tensor::uniform(&[1, 5], 2.0, &mut r));
        let bound = t.value(h0).max_abs().max(1.0);
        let (states, _) = gru.encode(&mut t, &ps, x, Some(h0)).unwrap();
        assert!(t.value(states).max_abs() <= bound);
    }

    #[test]
    fn gradient_wrt_candidate_recurrence() {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let gru = Gru::new(&mut ps, "g", 3, 4, &mut r).unwrap();
        let seq = Tensor::uniform(&[4, 3], 1.0, &mut r);
        let weights = Tensor::uniform(&[4, 4], 1.0, &mut r);
        let coords = gradcheck::all_coords(&ps, &[gru.u_n]);
        let report = gradcheck::grad_check(&mut ps, &coords, |t, ps| {
            let x = t.constant(seq.clone());
            let (states, _) = gru.encode(t, ps, x, None)?;
            let w = t.constant(weights.clone());
            let y = t.mul(states, w)?;
            t.sum(y)
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-5, "{:?}", report.worst());
    }

    #[test]
    fn caption_set_rows_are_independent() {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let emb = EmbeddingTable::new(&mut ps, "emb", 10, 3, &mut r).unwrap();
        let gru = Gru::new(&mut ps, "cap", 3, 4, &mut r).unwrap();
        let caps = vec![vec![1, 2, 3], vec![4, 5], vec![1, 2, 3], vec![9]];
        let mut t = Tape::new();
        let f = encode_caption_set(&mut t, &ps, &caps, &emb, &gru).unwrap();
        let f = t.value(f).clone();
        assert_eq!(f.shape(), &[4, 4]);
        assert_eq!(f.row(0), f.row(2));

        let permuted = vec![caps[3].clone(), caps[0].clone(), caps[1].clone(), caps[2].clone()];
        let mut t = Tape::new();
        let g = encode_caption_set(&mut t, &ps, &permuted, &emb, &gru).unwrap();
        let g = t.value(g);
        assert_eq!(g.row(0), f.row(3));
        assert_eq!(g.row(1), f.row(0));
        assert_eq!(g.row(2), f.row(1));
    }

    #[test]
    fn single_word_caption_with_zero_params_is_zero() {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let emb = EmbeddingTable::new(&mut ps, "emb", 5, 3, &mut r).unwrap();
        let gru = Gru::new(&mut ps, "cap", 3, 4, &mut r).unwrap();
        zero_all(&mut ps);
        let mut t = Tape::new();
        let f = encode_caption_set(&mut t, &ps, &[vec![2]], &emb, &gru).unwrap();
        assert_eq!(t.value(f).max_abs(), 0.0);
    }

    #[test]
    fn empty_caption_and_bad_tokens_rejected() {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let emb = EmbeddingTable::new(&mut ps, "emb", 5, 3, &mut r).unwrap();
        let gru = Gru::new(&mut ps, "cap", 3, 4, &mut r).unwrap();
        let mut t = Tape::new();
        let err = encode_caption_set(&mut t, &ps, &[vec![1], vec![]], &emb, &gru).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        let err = encode_caption_set(&mut t, &ps, &[vec![7]], &emb, &gru).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn visual_projection_zero_weights_yield_bias() {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let vp = VisualProjection::new(&mut ps, "vis", 3, 2, 4, 4, &mut r).unwrap();
        zero_all(&mut ps);
        let b = Tensor::vector(vec![0.5, -1.0, 2.0, 0.25]);
        ps.set_value(vp.output.bias.unwrap(), b.clone()).unwrap();
        let mut t = Tape::new();
        let fa = t.constant(random_matrix(6, 3, &mut r));
        let fm = t.constant(random_matrix(6, 2, &mut r));
        let fv = vp.project(&mut t, &ps, fa, fm).unwrap();
        for i in 0..6 {
            assert_eq!(t.value(fv).row(i), b.data());
        }
        let short = t.constant(random_matrix(5, 2, &mut r));
        assert!(vp.project(&mut t, &ps, fa, short).is_err());
    }

    #[test]
    fn visual_projection_first_layer_gradient() {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let vp = VisualProjection::new(&mut ps, "vis", 3, 2, 4, 3, &mut r).unwrap();
        let fa = Tensor::uniform(&[5, 3], 1.0, &mut r);
        let fm = Tensor::uniform(&[5, 2], 1.0, &mut r);
        let w = Tensor::uniform(&[5, 3], 1.0, &mut r);
        let coords = gradcheck::all_coords(&ps, &[vp.hidden.weight]);
        let report = gradcheck::grad_check(&mut ps, &coords, |t, ps| {
            let a = t.constant(fa.clone());
            let m = t.constant(fm.clone());
            let y = vp.project(t, ps, a, m)?;
            let w = t.constant(w.clone());
            let y = t.mul(y, w)?;
            t.sum(y)
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-5, "{:?}", report.worst());
    }

    fn encoder_fixture() -> (ParamSet, ContextEncoder, [Tensor; 3]) {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let enc = ContextEncoder::new(&mut ps, [3, 4, 2], 5, &mut r).unwrap();
        let inputs = [
            Tensor::uniform(&[4, 3], 1.0, &mut r),
            Tensor::uniform(&[6, 4], 1.0, &mut r),
            Tensor::uniform(&[5, 2], 1.0, &mut r),
        ];
        (ps, enc, inputs)
    }

    fn run(enc: &ContextEncoder, ps: &ParamSet, inputs: &[Tensor; 3]) -> [Tensor; 4] {
        let mut t = Tape::new();
        let c = t.constant(inputs[0].clone());
        let v = t.constant(inputs[1].clone());
        let q = t.constant(inputs[2].clone());
        let out = enc.contextualize(&mut t, ps, c, v, q).unwrap();
        [
            t.value(out.captions).clone(),
            t.value(out.video).clone(),
            t.value(out.question).clone(),
            t.value(out.question_last).clone(),
        ]
    }

    #[test]
    fn modalities_are_encoded_independently() {
        let (ps, enc, mut inputs) = encoder_fixture();
        let before = run(&enc, &ps, &inputs);
        inputs[2].data_mut()[0] += 0.5;
        let after = run(&enc, &ps, &inputs);
        assert_eq!(before[0], after[0]);
        assert_eq!(before[1], after[1]);
        assert_ne!(before[2], after[2]);
    }

    #[test]
    fn single_caption_last_state_is_the_only_row() {
        let (ps, enc, mut inputs) = encoder_fixture();
        inputs[0] = Tensor::matrix(1, 3, vec![0.3, -0.2, 0.9]).unwrap();
        let mut t = Tape::new();
        let c = t.constant(inputs[0].clone());
        let v = t.constant(inputs[1].clone());
        let q = t.constant(inputs[2].clone());
        let out = enc.contextualize(&mut t, &ps, c, v, q).unwrap();
        assert_eq!(t.value(out.captions).data(), t.value(out.caption_last).data());
    }

    #[test]
    fn not_time_reversal_invariant() {
        let (ps, enc, inputs) = encoder_fixture();
        let forward = run(&enc, &ps, &inputs);
        let rows: Vec<usize> = (0..inputs[1].rows()).rev().collect();
        let reversed = [
            inputs[0].clone(),
            inputs[1].select_rows(&rows),
            inputs[2].clone(),
        ];
        let backward = run(&enc, &ps, &reversed);
        let last_fwd = forward[1].row(forward[1].rows() - 1).to_vec();
        let last_bwd = backward[1].row(backward[1].rows() - 1).to_vec();
        assert_ne!(last_fwd, last_bwd);
    }
}
