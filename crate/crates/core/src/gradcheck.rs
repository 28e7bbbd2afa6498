//! Central finite-difference gradient checking in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::architecture::{Baseline, Model, ModelConfig, StageConfig, VariantMask};
use crate::error::Result;
use crate::kernels::{BatchNormState, BnMode, ConvParams, Mode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is (near) zero are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub input: usize,
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Coordinates excluded because a perturbation crossed a relu kink.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|c| c.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &InputCheck> {
        self.inputs.iter().filter(|c| {
            c.max_rel_error.partial_cmp(&self.tolerance) != Some(std::cmp::Ordering::Less)
        })
    }

    pub fn skipped(&self) -> usize {
        self.inputs.iter().map(|c| c.skipped).sum()
    }
}

fn evaluate<F>(f: &mut F, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<bool>)>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out)?.data()[0], tape.relu_pattern()))
}

/// Analytic gradients of scalar `f` at `inputs`, one per input.
pub fn analytic_gradients<F>(f: &mut F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect())
}

/// Compares supplied analytic gradients against `(f(x+h) − f(x−h)) / 2h`
/// for every coordinate of every input.
pub fn compare_with_finite_differences<F>(
    f: F,
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    compare(f, inputs, analytic, h, tol, false)
}

fn compare<F>(
    mut f: F,
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    h: f64,
    tol: f64,
    skip_kinks: bool,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let base = if skip_kinks {
        evaluate(&mut f, inputs)?.1
    } else {
        Vec::new()
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut checks = Vec::with_capacity(inputs.len());
    for (i, grad) in analytic.iter().enumerate() {
        let mut check = InputCheck {
            input: i,
            max_rel_error: 0.0,
            worst_coordinate: 0,
            analytic: 0.0,
            numeric: 0.0,
            skipped: 0,
        };
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let (plus, plus_pattern) = evaluate(&mut f, &work)?;
            work[i].data_mut()[j] = orig - h;
            let (minus, minus_pattern) = evaluate(&mut f, &work)?;
            work[i].data_mut()[j] = orig;
            if skip_kinks && (plus_pattern != base || minus_pattern != base) {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[j];
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || err.is_nan() {
                check = InputCheck {
                    max_rel_error: if err.is_nan() { f64::INFINITY } else { err },
                    worst_coordinate: j,
                    analytic: a,
                    numeric,
                    ..check
                };
            }
        }
        checks.push(check);
    }
    Ok(GradCheckReport {
        inputs: checks,
        tolerance: tol,
    })
}

/// Full check: analytic gradients from the tape versus central differences.
pub fn finite_diff_check<F>(
    mut f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&mut f, inputs)?;
    compare(f, inputs, &analytic, h, tol, false)
}

/// Like [`finite_diff_check`], but a coordinate whose `±h` evaluations
/// change the relu sign pattern is counted as skipped instead of compared:
/// its central difference straddles a kink.
pub fn finite_diff_check_smooth<F>(
    mut f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&mut f, inputs)?;
    compare(f, inputs, &analytic, h, tol, true)
}

/// Step and tolerance of the built-in suites.
pub const SUITE_STEP: f64 = 1e-3;
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Result of checking one differentiable operation on one input shape.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub shape: String,
    pub report: GradCheckReport,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Values in ±[0.1, 1], keeping relu inputs away from the kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn check_op<F>(
    out: &mut Vec<OpCheck>,
    op: &'static str,
    shape: String,
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor<f64>>,
    out_shape: &[usize],
    mut f: F,
) -> Result<()>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let probe = normal_tensor(rng, out_shape);
    let report = finite_diff_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = f(t, v)?;
            t.weighted_sum(y, probe.clone())
        },
        &inputs,
        SUITE_STEP,
        SUITE_TOLERANCE,
    )?;
    out.push(OpCheck { op, shape, report });
    Ok(())
}

/// Finite-difference checks of every differentiable operation, each on
/// three small random shapes. Every op output is contracted against a
/// random probe tensor so all upstream gradient entries differ.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    for shape in [vec![3], vec![2, 5], vec![2, 3, 2, 2]] {
        let a = normal_tensor(&mut rng, &shape);
        let b = normal_tensor(&mut rng, &shape);
        check_op(
            &mut out,
            "add",
            format!("{shape:?}"),
            &mut rng,
            vec![a, b],
            &shape,
            |t, v| t.add(v[0], v[1]),
        )?;
    }
    for shape in [vec![4], vec![3, 4], vec![2, 2, 3, 3]] {
        let a = away_from_zero(&mut rng, &shape);
        check_op(
            &mut out,
            "relu",
            format!("{shape:?}"),
            &mut rng,
            vec![a],
            &shape,
            |t, v| t.relu(v[0]),
        )?;
    }
    for (n, d, k) in [(1, 2, 1), (3, 4, 5), (2, 6, 3)] {
        let inputs = vec![
            normal_tensor(&mut rng, &[n, d]),
            normal_tensor(&mut rng, &[d, k]),
            normal_tensor(&mut rng, &[k]),
        ];
        check_op(
            &mut out,
            "linear",
            format!("x[{n},{d}] w[{d},{k}]"),
            &mut rng,
            inputs,
            &[n, k],
            |t, v| t.linear(v[0], v[1], v[2]),
        )?;
    }
    // (x shape, cout, kernel, stride, pad, groups, bias)
    type ConvCase = ([usize; 4], usize, usize, usize, usize, usize, bool);
    let conv_cases: [ConvCase; 4] = [
        ([1, 1, 4, 4], 2, 3, 1, 1, 1, true),
        ([2, 4, 5, 5], 4, 3, 2, 1, 2, false),
        ([2, 3, 4, 4], 2, 1, 1, 0, 1, false),
        ([1, 4, 6, 6], 8, 3, 2, 1, 4, true),
    ];
    for (xs, cout, k, stride, pad, groups, bias) in conv_cases {
        let params = ConvParams::new(stride, pad, groups);
        let mut inputs = vec![
            normal_tensor(&mut rng, &xs),
            normal_tensor(&mut rng, &[cout, xs[1] / groups, k, k]),
        ];
        if bias {
            inputs.push(normal_tensor(&mut rng, &[cout]));
        }
        let (probe_out, _) = crate::kernels::conv2d_forward(&inputs[0], &inputs[1], None, params)?;
        let label = format!("x{xs:?} k{k} s{stride} p{pad} g{groups}");
        check_op(
            &mut out,
            "conv2d",
            label,
            &mut rng,
            inputs,
            probe_out.shape(),
            |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), params),
        )?;
    }
    for (xs, k, s) in [
        ([1, 1, 2, 2], 2, 2),
        ([1, 2, 4, 4], 2, 2),
        ([2, 3, 5, 5], 3, 1),
    ] {
        let x = normal_tensor(&mut rng, &xs);
        let (y, _) = crate::kernels::avgpool2d_forward(&x, k, s)?;
        check_op(
            &mut out,
            "avgpool2d",
            format!("x{xs:?} k{k} s{s}"),
            &mut rng,
            vec![x],
            y.shape(),
            |t, v| t.avgpool2d(v[0], k, s),
        )?;
    }
    for xs in [[1, 1, 1, 1], [2, 3, 2, 2], [3, 2, 3, 4]] {
        let x = normal_tensor(&mut rng, &xs);
        check_op(
            &mut out,
            "global_avg_pool",
            format!("x{xs:?}"),
            &mut rng,
            vec![x],
            &xs[..2],
            |t, v| t.global_avg_pool(v[0]),
        )?;
    }
    for (xs, mode) in [
        ([2, 2, 2, 2], Mode::Train),
        ([3, 3, 2, 1], Mode::Train),
        ([4, 1, 3, 3], Mode::Train),
        ([2, 2, 2, 2], Mode::Eval),
        ([3, 3, 2, 1], Mode::Eval),
        ([1, 2, 3, 3], Mode::Eval),
    ] {
        let c = xs[1];
        let inputs = vec![
            normal_tensor(&mut rng, &xs),
            Tensor::from_fn(&[c], |_| rng.random_range(0.5..1.5)),
            normal_tensor(&mut rng, &[c]),
        ];
        let mut state = BatchNormState::new(c);
        state.running_mean = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        state.running_var = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
        let op = match mode {
            Mode::Train => "batchnorm2d(train)",
            Mode::Eval => "batchnorm2d(eval)",
        };
        check_op(
            &mut out,
            op,
            format!("x{xs:?}"),
            &mut rng,
            inputs,
            &xs,
            |t, v| {
                let mut st = state.clone();
                let bn = match mode {
                    Mode::Train => BnMode::Train(&mut st),
                    Mode::Eval => BnMode::Eval(&state),
                };
                t.batchnorm2d(v[0], v[1], v[2], bn)
            },
        )?;
    }
    for (n, k) in [(1, 2), (2, 3), (4, 10)] {
        let logits = normal_tensor(&mut rng, &[n, k]);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let report = finite_diff_check(
            |t: &mut Tape<f64>, v: &[Var]| t.softmax_cross_entropy(v[0], &labels),
            &[logits],
            SUITE_STEP,
            SUITE_TOLERANCE,
        )?;
        out.push(OpCheck {
            op: "softmax_cross_entropy",
            shape: format!("[{n},{k}]"),
            report,
        });
    }
    Ok(out)
}

/// The micro network of the end-to-end check: a resnet with all
/// hierarchical projections, a 4-channel stem and stages of 4 and 8
/// channels on 3×8×8 inputs.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        baseline: Baseline::Resnet,
        cardinality: 1,
        stem_channels: 4,
        stages: vec![
            StageConfig {
                channels: 4,
                num_blocks: 1,
                downsample: 1,
            },
            StageConfig {
                channels: 8,
                num_blocks: 1,
                downsample: 2,
            },
        ],
        num_classes: 10,
        mask: VariantMask::Full,
        input_shape: [3, 8, 8],
        seed: 0,
    }
}

/// Step of the kink-free end-to-end pass.
pub const FINE_STEP: f64 = 1e-6;

/// End-to-end checks of the micro network's training loss.
#[derive(Clone, Debug)]
pub struct ModelCheck {
    /// Every coordinate at [`FINE_STEP`]. This is the pass/fail result.
    pub fine: GradCheckReport,
    /// Diagnostic at the suite step, skipping coordinates whose
    /// perturbation crosses a relu kink. Its residual error is dominated
    /// by the `O(h²)` truncation term of the deep composition.
    pub coarse: GradCheckReport,
}

impl ModelCheck {
    pub fn passed(&self) -> bool {
        self.fine.passed()
    }
}

/// Checks the training loss of [`micro_config`] with respect to every
/// parameter and the input batch, in train mode.
pub fn model_check(seed: u64) -> Result<ModelCheck> {
    let mut config = micro_config();
    config.seed = seed;
    let mut model = Model::new(&config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let batch = 2;
    let x = normal_tensor(&mut rng, &[batch, 3, 8, 8]);
    let labels: Vec<usize> = (0..batch)
        .map(|_| rng.random_range(0..config.num_classes))
        .collect();
    let mut inputs: Vec<Tensor<f64>> = model.params().values().map(|t| t.cast()).collect();
    inputs.push(x);
    let mut f = |t: &mut Tape<f64>, v: &[Var]| {
        let (params, x) = v.split_at(v.len() - 1);
        let trace = model.forward_with(t, x[0], params, Mode::Train)?;
        t.softmax_cross_entropy(trace.logits, &labels)
    };
    let analytic = analytic_gradients(&mut f, &inputs)?;
    Ok(ModelCheck {
        fine: compare(
            &mut f,
            &inputs,
            &analytic,
            FINE_STEP,
            SUITE_TOLERANCE,
            false,
        )?,
        coarse: compare(
            &mut f,
            &inputs,
            &analytic,
            SUITE_STEP,
            SUITE_TOLERANCE,
            true,
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_of_squares(tape: &mut Tape<f64>, v: &[Var]) -> Result<Var> {
        let sq = tape.mul(v[0], v[0])?;
        tape.sum(sq)
    }

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let grads = analytic_gradients(&mut sum_of_squares, std::slice::from_ref(&x)).unwrap();
        assert_eq!(grads[0].data(), &[2.0, 4.0]);
        let report = finite_diff_check(sum_of_squares, &[x], 1e-3, 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let report = compare_with_finite_differences(
            sum_of_squares,
            &[x],
            &[Tensor::new(vec![2], vec![2.0, 4.5]).unwrap()],
            1e-3,
            1e-6,
        )
        .unwrap();
        assert!(!report.passed());
        let worst = report.failures().next().unwrap();
        assert_eq!(worst.worst_coordinate, 1);
    }

    #[test]
    fn every_op_passes_the_suite() {
        let checks = op_suite(7).unwrap();
        for c in &checks {
            assert!(c.report.passed(), "{} {}: {:?}", c.op, c.shape, c.report);
        }
        for op in [
            "add",
            "relu",
            "linear",
            "conv2d",
            "avgpool2d",
            "global_avg_pool",
            "batchnorm2d(train)",
            "batchnorm2d(eval)",
            "softmax_cross_entropy",
        ] {
            assert!(checks.iter().filter(|c| c.op == op).count() >= 3, "{op}");
        }
    }

    #[test]
    fn relu_of_sum_checks_clean() {
        let x = Tensor::new(vec![3], vec![0.7, -0.4, 1.3]).unwrap();
        let report = finite_diff_check(
            |t: &mut Tape<f64>, v: &[Var]| {
                let s = t.add(v[0], v[0])?;
                let r = t.relu(s)?;
                t.sum(r)
            },
            &[x],
            1e-3,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
