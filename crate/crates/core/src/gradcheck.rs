//! The finite-difference gradient-check suite run by `geosal gradcheck`:
//! every differentiable op, the losses, the enhancement module and the full
//! training loss on a 32-point scene.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ad::{grad_check, GradCheckReport, Graph, OpKind, Tensor, Var};
use crate::losses::{cross_entropy, final_loss, pull_loss, push_loss, LossConfig};
use crate::model::{cross_attention, forward, forward_on, geometry_enhance, ForwardOptions, ModelConfig, ModelParams, ParamVars};
use crate::pcio::{generate_scene, random_scene_spec, PointCloud};
use crate::spatial::{generate_local_areas, LocalAreaSet};
use crate::superpoint::SuperpointPartition;
use crate::Result;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
const TRIALS: u64 = 5;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.passes(TOLERANCE)
    }
}

/// 32 points (12 object, 20 background) taken from a generated scene.
pub fn small_scene(seed: u64) -> PointCloud {
    let full = generate_scene(&random_scene_spec(seed, 64)).expect("valid scene");
    let mask = full.gt_mask().expect("labelled");
    let mut rows: Vec<usize> = (0..64).filter(|&i| mask[i] == 1).take(12).collect();
    rows.extend((0..64).filter(|&i| mask[i] == 0).take(32 - rows.len()));
    full.select(&rows).expect("rows in range")
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Reduces any output to a scalar through fixed random weights.
fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let w = g.constant(rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape));
    let p = g.mul(v, w)?;
    Ok(g.sum_all(p))
}

fn op_inputs(kind: OpKind) -> Vec<Vec<usize>> {
    match kind {
        OpKind::MatMul => vec![vec![3, 4], vec![4, 5]],
        OpKind::MatMulNt => vec![vec![3, 4], vec![5, 4]],
        OpKind::Add | OpKind::Sub => vec![vec![4, 3], vec![1, 3]],
        OpKind::Mul => vec![vec![4, 3], vec![4, 3]],
        OpKind::ConcatRows => vec![vec![2, 3], vec![4, 3]],
        _ => vec![vec![5, 4]],
    }
}

fn apply(g: &mut Graph, kind: OpKind, v: &[Var]) -> Result<Var> {
    let x = v[0];
    Ok(match kind {
        OpKind::MatMul => g.matmul(x, v[1])?,
        OpKind::MatMulNt => g.matmul_nt(x, v[1], 0.7)?,
        OpKind::Add => g.add(x, v[1])?,
        OpKind::Sub => g.sub(x, v[1])?,
        OpKind::Mul => g.mul(x, v[1])?,
        OpKind::ScalarMul => g.scalar_mul(x, -2.5),
        OpKind::AddScalar => g.add_scalar(x, 0.3),
        OpKind::Transpose => g.transpose(x)?,
        OpKind::RowSoftmax => g.row_softmax(x)?,
        OpKind::LogSoftmaxRows => g.log_softmax_rows(x)?,
        OpKind::Relu => g.relu(x),
        OpKind::Hinge => g.hinge(x),
        OpKind::Square => g.square(x),
        OpKind::MeanRows => g.mean_rows(x)?,
        OpKind::MeanAll => g.mean_all(x)?,
        OpKind::SumAll => g.sum_all(x),
        OpKind::L2NormRows => g.l2_norm_rows(x)?,
        OpKind::NormalizeRows => g.normalize_rows(x)?,
        OpKind::ConcatRows => g.concat_rows(&[x, v[1]])?,
        OpKind::GatherRows => g.gather_rows(x, &[4, 0, 0, 2, 3])?,
        OpKind::ScatterMeanRows => g.scatter_mean_rows(x, &[0, 2, 2, 0, 3], 4)?,
        OpKind::Leaf => x,
    })
}

fn check_random<F>(name: &str, shapes: &[Vec<usize>], corrupt: Option<OpKind>, op: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut report = GradCheckReport::default();
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let r = grad_check(
            |g, vs| {
                if let Some(k) = corrupt {
                    g.corrupt_backward(k);
                }
                let out = op(g, vs)?;
                weighted_sum(g, out, trial)
            },
            &inputs,
            STEP,
        )?;
        report.merge(&r);
    }
    Ok(CheckOutcome {
        name: name.to_string(),
        report,
    })
}

fn check_params<F>(name: &str, params: &ModelParams, corrupt: Option<OpKind>, f: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    let cfg = params.config.clone();
    let report = grad_check(
        |g, leaves| {
            if let Some(k) = corrupt {
                g.corrupt_backward(k);
            }
            let vars = ParamVars::from_leaves(&cfg, leaves.to_vec());
            f(g, &vars)
        },
        &params.tensors(),
        STEP,
    )?;
    Ok(CheckOutcome {
        name: name.to_string(),
        report,
    })
}

fn feature_areas() -> LocalAreaSet {
    LocalAreaSet {
        areas: vec![vec![0, 1, 2], vec![2, 3, 4, 5]],
        background: vec![6, 7, 8, 9],
    }
}

/// Runs every check. With `corrupt`, that op's backward rule is scaled on
/// every tape, which must make at least one check fail.
pub fn run_suite(corrupt: Option<OpKind>) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for kind in OpKind::DIFFERENTIABLE {
        out.push(check_random(kind.name(), &op_inputs(kind), corrupt, |g, v| apply(g, kind, v))?);
    }

    let areas = feature_areas();
    out.push(check_random("pull_loss", &[vec![10, 3]], corrupt, |g, v| pull_loss(g, v[0], &areas, 0.01))?);
    out.push(check_random("push_loss", &[vec![10, 3]], corrupt, |g, v| {
        let f = g.scalar_mul(v[0], 0.1);
        push_loss(g, f, &areas, 0.2)
    })?);
    let mask = [1, 0, 0, 1, 1, 0];
    out.push(check_random("cross_entropy", &[vec![6, 2]], corrupt, |g, v| cross_entropy(g, v[0], &mask))?);

    let cfg = ModelConfig {
        channels: 4,
        layers: 2,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(cfg, 3)?;
    let part = SuperpointPartition::from_ids(vec![0, 1, 1, 0, 2, 2, 1])?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let f = rand_tensor(&mut rng, &[7, 4]);
    let u = rand_tensor(&mut rng, &[3, 4]);
    let attn = |g: &mut Graph, vars: &ParamVars| {
        let (f, u) = (g.constant(f.clone()), g.constant(u.clone()));
        let o = cross_attention(g, u, f, vars)?;
        weighted_sum(g, o, 1)
    };
    out.push(check_params("cross_attention", &params, corrupt, attn)?);
    let enhance = |g: &mut Graph, vars: &ParamVars| {
        let f = g.constant(f.clone());
        let e = geometry_enhance(g, f, &part, vars)?;
        weighted_sum(g, e.enhanced, 2)
    };
    out.push(check_params("geometry_enhance", &params, corrupt, enhance)?);

    out.push(final_loss_check(corrupt)?);
    Ok(out)
}

/// L_final on a 32-point scene with the default model, gradients taken
/// with respect to every parameter. The partition is held fixed.
pub fn final_loss_check(corrupt: Option<OpKind>) -> Result<CheckOutcome> {
    let cloud = small_scene(5);
    let params = ModelParams::init(ModelConfig::default(), 6)?;
    let mask = cloud.require_mask("gradcheck")?.to_vec();
    let probe = forward(
        &cloud,
        &params,
        ForwardOptions {
            seed: 1,
            ..Default::default()
        },
    )?;
    let part = probe.trace.partition.clone().expect("attention variant partitions");
    let areas = generate_local_areas(&probe.trace.reduced, 4, 4, 2)?;
    let loss_cfg = LossConfig::default();
    let cfg = params.config.clone();
    check_params("final_loss", &params, corrupt, |g, vars| {
        let opts = ForwardOptions {
            partition: Some(&part),
            seed: 1,
            requires_grad: true,
        };
        let trace = forward_on(g, vars, &cfg, &cloud, opts)?;
        Ok(final_loss(g, &trace, &mask, Some(&areas), &loss_cfg)?.total)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_covers_every_op() {
        let out = run_suite(None).unwrap();
        for kind in OpKind::DIFFERENTIABLE {
            assert!(out.iter().any(|c| c.name == kind.name()), "{}", kind.name());
        }
        for c in &out {
            assert!(c.passed(), "{}: {:?}", c.name, c.report);
        }
    }

    #[test]
    fn corrupting_any_op_fails_its_own_check() {
        for kind in OpKind::DIFFERENTIABLE {
            let out = run_suite(Some(kind)).unwrap();
            let own = out.iter().find(|c| c.name == kind.name()).unwrap();
            assert!(!own.passed(), "{} survived corruption", kind.name());
        }
    }

    #[test]
    fn small_scene_has_32_labelled_points() {
        let c = small_scene(5);
        assert_eq!(c.len(), 32);
        assert_eq!(c.gt_mask().unwrap().iter().filter(|&&m| m == 1).count(), 12);
    }
}
