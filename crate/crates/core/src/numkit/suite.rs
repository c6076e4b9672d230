//! Gradient check of every tape primitive at random points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::gradcheck::{all_coords, grad_check, GradCheckEntry, GradCheckReport};
use super::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::Result;

/// Worst relative error seen for one operation.
#[derive(Clone, Debug, Serialize)]
pub struct OpReport {
    pub op: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
}

impl OpReport {
    pub fn from_report(op: impl Into<String>, report: &GradCheckReport) -> Self {
        Self {
            op: op.into(),
            coords: report.entries.len(),
            max_rel_error: report.max_rel_error(),
            worst_param: report.worst().map(|e: &GradCheckEntry| e.param.clone()),
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

struct Case {
    op: &'static str,
    inputs: &'static [&'static [usize]],
    build: Build,
}

/// Every primitive, each wrapped so it reads its inputs from parameters.
const CASES: &[Case] = &[
    Case { op: "matmul", inputs: &[&[3, 4], &[4, 2]], build: |t, v| t.matmul(v[0], v[1]) },
    Case { op: "matmul_nt", inputs: &[&[3, 4], &[2, 4]], build: |t, v| t.matmul_nt(v[0], v[1]) },
    Case { op: "transpose", inputs: &[&[3, 4]], build: |t, v| t.transpose(v[0]) },
    Case { op: "add", inputs: &[&[3, 4], &[3, 4]], build: |t, v| t.add(v[0], v[1]) },
    Case { op: "sub", inputs: &[&[3, 4], &[3, 4]], build: |t, v| t.sub(v[0], v[1]) },
    Case { op: "mul", inputs: &[&[3, 4], &[3, 4]], build: |t, v| t.mul(v[0], v[1]) },
    Case { op: "add_row", inputs: &[&[3, 4], &[1, 4]], build: |t, v| t.add_row(v[0], v[1]) },
    Case { op: "scale", inputs: &[&[3, 4]], build: |t, v| t.scale(v[0], -1.7) },
    Case { op: "add_scalar", inputs: &[&[3, 4]], build: |t, v| t.add_scalar(v[0], 0.3) },
    Case { op: "scale_by", inputs: &[&[3, 4], &[1]], build: |t, v| t.scale_by(v[0], v[1]) },
    Case { op: "relu", inputs: &[&[3, 4]], build: |t, v| t.relu(v[0]) },
    Case { op: "tanh", inputs: &[&[3, 4]], build: |t, v| t.tanh(v[0]) },
    Case { op: "sigmoid", inputs: &[&[3, 4]], build: |t, v| t.sigmoid(v[0]) },
    Case { op: "softmax_rows", inputs: &[&[3, 5]], build: |t, v| t.softmax_rows(v[0]) },
    Case {
        op: "layer_norm",
        inputs: &[&[3, 5], &[5], &[5]],
        build: |t, v| t.layer_norm(v[0], v[1], v[2], super::LAYER_NORM_EPS),
    },
    Case {
        op: "affine",
        inputs: &[&[3, 4], &[2, 4], &[2]],
        build: |t, v| t.affine(v[0], v[1], Some(v[2])),
    },
    Case { op: "concat_rows", inputs: &[&[2, 3], &[1, 3]], build: |t, v| t.concat(&[v[0], v[1]], 0) },
    Case { op: "concat_cols", inputs: &[&[2, 3], &[2, 2]], build: |t, v| t.concat(&[v[0], v[1]], 1) },
    Case { op: "slice_rows", inputs: &[&[4, 3]], build: |t, v| t.slice_rows(v[0], 1, 2) },
    Case { op: "slice_cols", inputs: &[&[3, 5]], build: |t, v| t.slice_cols(v[0], 1, 3) },
    Case { op: "gather_rows", inputs: &[&[4, 3]], build: |t, v| t.gather_rows(v[0], &[2, 0, 2]) },
    Case { op: "element", inputs: &[&[6]], build: |t, v| t.element(v[0], 4) },
    Case { op: "reshape", inputs: &[&[3, 4]], build: |t, v| t.reshape(v[0], &[2, 6]) },
    Case { op: "sum", inputs: &[&[3, 4]], build: |t, v| t.sum(v[0]) },
    Case { op: "mean_rows", inputs: &[&[4, 3]], build: |t, v| t.mean_rows(v[0]) },
    Case {
        op: "softmax_cross_entropy",
        inputs: &[&[1, 10]],
        build: |t, v| t.softmax_cross_entropy(v[0], 7),
    },
];

pub fn primitive_names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.op).collect()
}

/// Values in `[-2, 2]` kept away from zero, where relu has its kink.
fn point(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, 2.0, rng);
    for v in t.data_mut() {
        if v.abs() < 1e-3 {
            *v = 0.5;
        }
    }
    t
}

fn check_case(case: &Case, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut ps = ParamSet::new();
    let ids: Vec<ParamId> = case
        .inputs
        .iter()
        .enumerate()
        .map(|(i, shape)| ps.add(format!("{}.in{i}", case.op), point(shape, rng)))
        .collect::<Result<_>>()?;
    let out_shape = {
        let mut t = Tape::new();
        let vars: Vec<Var> = ids.iter().map(|&id| t.param(&ps, id)).collect();
        let out = (case.build)(&mut t, &vars)?;
        t.shape(out).to_vec()
    };
    let mix = Tensor::uniform(&out_shape, 1.0, rng);
    let coords = all_coords(&ps, &ids);
    grad_check(&mut ps, &coords, |t, ps| {
        let vars: Vec<Var> = ids.iter().map(|&id| t.param(ps, id)).collect();
        let out = (case.build)(t, &vars)?;
        let m = t.constant(mix.clone());
        let weighted = t.mul(out, m)?;
        t.sum(weighted)
    })
}

/// Checks every primitive at `points` random inputs. The loss is the sum of
/// the op's output weighted by a random tensor.
pub fn primitive_suite(seed: u64, points: usize) -> Result<Vec<OpReport>> {
    let mut out = Vec::with_capacity(CASES.len());
    for (k, case) in CASES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut report = GradCheckReport::default();
        for _ in 0..points {
            report.extend(check_case(case, &mut rng)?);
        }
        out.push(OpReport::from_report(case.op, &report));
    }
    Ok(out)
}
