//! Finite-difference verification of every registered adjoint, the full
//! head in all modes, both losses, and the backbone.
//!
//! Checks run in double precision with central differences. The relative
//! error of a component is |analytic − numeric| / max(|analytic|, |numeric|,
//! 1e-12); a check passes when the maximum over all components stays below
//! [`TOLERANCE`].

use crate::backbone::{BackboneBinding, BackboneConfig, StageSpec, TinyBackboneParams};
use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, PoolAxis, PoolKind, TensorId};
use crate::head::{
    head_forward, FeatureDims, HeadBinding, HeadMode, PdanetParams, EMOTION_DIMS,
};
use crate::loss::{mse_loss, pcr_loss, PcrConfig};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pass threshold on the max relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn pass(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compare the graph gradient of a scalar-valued function against central
/// finite differences, component by component. Returns the max relative
/// error over the components of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, TensorId) -> Result<TensorId>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!(
            "grad_check step must be positive, got {eps}"
        )));
    }
    let inputs = [x.clone()];
    grad_check_multi(
        |g, ids| f(g, ids[0]),
        &inputs,
        eps,
        0.0,
    )
}

/// Multi-input variant used by the suite; `tamper` is added to the first
/// analytic gradient component to let tests verify failure reporting.
pub fn grad_check_multi<F>(
    build: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tamper: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[TensorId]) -> Result<TensorId>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!(
            "grad_check step must be positive, got {eps}"
        )));
    }
    // analytic gradients from one taped pass
    let mut g = Graph::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|t| {
            let mut p = t.clone();
            p.requires_grad = true;
            g.leaf(p)
        })
        .collect();
    let out = build(&mut g, &ids)?;
    if !g.tensor(out).is_scalar() {
        return Err(Error::Contract(
            "grad_check requires a scalar-valued function".into(),
        ));
    }
    g.backward(out)?;
    let mut analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).expect("leaf gradient").to_vec())
        .collect();
    if tamper != 0.0 {
        analytic[0][0] += tamper;
    }

    let eval = |points: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = points.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok(g.values(out)[0])
    };

    let mut worst = 0.0f64;
    let mut points: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for i in 0..input.values.len() {
            let orig = input.values[i];
            points[which].values[i] = orig + eps;
            let plus = eval(&points)?;
            points[which].values[i] = orig - eps;
            let minus = eval(&points)?;
            points[which].values[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[which][i], numeric));
        }
    }
    Ok(worst)
}

fn random_tensor(shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    let values = (0..len)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
        .collect();
    Tensor::new(shape, values).unwrap()
}

// random positive weights the scalar reduction dots the output with; a plain
// sum would have an identically-zero gradient through softmax
fn weighted_sum(
    g: &mut Graph<f64>,
    out: TensorId,
    weights: &Tensor<f64>,
) -> Result<TensorId> {
    let len = g.values(out).len();
    let flat = g.reshape(out, vec![len])?;
    let w = g.leaf(weights.clone());
    let prod = g.mul_elem(flat, w)?;
    Ok(g.sum_all(prod))
}

fn reduction_weights(len: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let values = (0..len).map(|_| 0.25 + rng.gen::<f64>()).collect();
    Tensor::new(vec![len], values).unwrap()
}

struct Check {
    name: &'static str,
    run: Box<dyn Fn(f64) -> Result<f64>>,
}

fn op_checks(seed: u64) -> Vec<Check> {
    let mut checks: Vec<Check> = Vec::new();
    let mut push = |name: &'static str, run: Box<dyn Fn(f64) -> Result<f64>>| {
        checks.push(Check { name, run });
    };
    let rng = move |salt: u64| ChaCha8Rng::seed_from_u64(seed.wrapping_add(salt));

    push(
        "matmul",
        Box::new(move |tamper| {
            let mut r = rng(1);
            let a = random_tensor(vec![3, 4], 1.0, &mut r);
            let b = random_tensor(vec![4, 2], 1.0, &mut r);
            let w = reduction_weights(6, &mut r);
            grad_check_multi(
                |g, ids| {
                    let out = g.matmul(ids[0], ids[1])?;
                    weighted_sum(g, out, &w)
                },
                &[a, b],
                DEFAULT_EPS,
                tamper,
            )
        }),
    );
    push(
        "broadcast_add_cols",
        Box::new(move |tamper| {
            let mut r = rng(2);
            let m = random_tensor(vec![3, 5], 1.0, &mut r);
            let v = random_tensor(vec![3], 1.0, &mut r);
            let w = reduction_weights(15, &mut r);
            grad_check_multi(
                |g, ids| {
                    let out = g.broadcast_add_cols(ids[0], ids[1])?;
                    weighted_sum(g, out, &w)
                },
                &[m, v],
                DEFAULT_EPS,
                tamper,
            )
        }),
    );
    push(
        "scale_cols",
        Box::new(move |tamper| {
            let mut r = rng(3);
            let m = random_tensor(vec![4, 6], 1.0, &mut r);
            let v = random_tensor(vec![6], 1.0, &mut r);
            let w = reduction_weights(24, &mut r);
            grad_check_multi(
                |g, ids| {
                    let out = g.scale_cols(ids[0], ids[1])?;
                    weighted_sum(g, out, &w)
                },
                &[m, v],
                DEFAULT_EPS,
                tamper,
            )
        }),
    );
    push(
        "scale_rows",
        Box::new(move |tamper| {
            let mut r = rng(4);
            let m = random_tensor(vec![4, 6], 1.0, &mut r);
            let v = random_tensor(vec![4], 1.0, &mut r);
            let w = reduction_weights(24, &mut r);
            grad_check_multi(
                |g, ids| {
                    let out = g.scale_rows(ids[0], ids[1])?;
                    weighted_sum(g, out, &w)
                },
                &[m, v],
                DEFAULT_EPS,
                tamper,
            )
        }),
    );
    push(
        "tanh",
        Box::new(move |tamper| {
            let mut r = rng(5);
            let x = random_tensor(vec![7], 1.5, &mut r);
            let w = reduction_weights(7, &mut r);
            grad_check_multi(
                |g, ids| {
                    let out = g.activation(ids[0], Activation::Tanh);
                    weighted_sum(g, out, &w)
                },
                &[x],
                DEFAULT_EPS,
                tamper,
            )
        }),
    );
    push(
        "sigmoid",
        Box::new(move |tamper| {
            let mut r = rng(6);
            let x = random_tensor(vec![7], 2.0, &mut r);
            let w = reduction_weights(7, &mut r);
            grad_check_multi(
                |g, ids| {
                    let out = g.activation(ids[0], Activation::Sigmoid);
                    weighted_sum(g, out, &w)
                },
                &[x],
                DEFAULT_EPS,
                tamper,
            )
        }),
    );
    push(
        "softmax",
        Box::new(move |tamper| {
            let mut r = rng(7);
            let x = random_tensor(vec![6], 1.5, &mut r);
            let w = reduction_weights(6, &mut r);
            grad_check_multi(
                |g, ids| {
                    let out = g.softmax(ids[0])?;
                    weighted_sum(g, out, &w)
                },
                &[x],
                DEFAULT_EPS,
                tamper,
            )
        }),
    );
    for (name, axis, kind, salt) in [
        ("pool_sum_cols", PoolAxis::Cols, PoolKind::Sum, 8u64),
        ("pool_sum_rows", PoolAxis::Rows, PoolKind::Sum, 9),
        ("pool_avg_cols", PoolAxis::Cols, PoolKind::Avg, 10),
        ("pool_avg_rows", PoolAxis::Rows, PoolKind::Avg, 11),
    ] {
        push(
            name,
            Box::new(move |tamper| {
                let mut r = rng(salt);
                let m = random_tensor(vec![3, 5], 1.0, &mut r);
                let out_len = match axis {
                    PoolAxis::Cols => 3,
                    PoolAxis::Rows => 5,
                };
                let w = reduction_weights(out_len, &mut r);
                grad_check_multi(
                    |g, ids| {
                        let out = g.pool(ids[0], axis, kind)?;
                        weighted_sum(g, out, &w)
                    },
                    &[m],
                    DEFAULT_EPS,
                    tamper,
                )
            }),
        );
    }
    push(
        "concat",
        Box::new(move |tamper| {
            let mut r = rng(12);
            let a = random_tensor(vec![4], 1.0, &mut r);
            let b = random_tensor(vec![3], 1.0, &mut r);
            let w = reduction_weights(7, &mut r);
            grad_check_multi(
                |g, ids| {
                    let out = g.concat(ids[0], ids[1])?;
                    weighted_sum(g, out, &w)
                },
                &[a, b],
                DEFAULT_EPS,
                tamper,
            )
        }),
    );
    push(
        "transpose",
        Box::new(move |tamper| {
            let mut r = rng(13);
            let m = random_tensor(vec![3, 4], 1.0, &mut r);
            let w = reduction_weights(12, &mut r);
            grad_check_multi(
                |g, ids| {
                    let out = g.transpose(ids[0])?;
                    weighted_sum(g, out, &w)
                },
                &[m],
                DEFAULT_EPS,
                tamper,
            )
        }),
    );
    push(
        "reshape",
        Box::new(move |tamper| {
            let mut r = rng(14);
            let m = random_tensor(vec![3, 4], 1.0, &mut r);
            let w = reduction_weights(12, &mut r);
            grad_check_multi(
                |g, ids| {
                    let out = g.reshape(ids[0], vec![2, 6])?;
                    weighted_sum(g, out, &w)
                },
                &[m],
                DEFAULT_EPS,
                tamper,
            )
        }),
    );
    push(
        "add_elem",
        Box::new(move |tamper| {
            let mut r = rng(15);
            let a = random_tensor(vec![5], 1.0, &mut r);
            let b = random_tensor(vec![5], 1.0, &mut r);
            let w = reduction_weights(5, &mut r);
            grad_check_multi(
                |g, ids| {
                    let out = g.add_elem(ids[0], ids[1])?;
                    weighted_sum(g, out, &w)
                },
                &[a, b],
                DEFAULT_EPS,
                tamper,
            )
        }),
    );
    push(
        "sub_elem",
        Box::new(move |tamper| {
            let mut r = rng(16);
            let a = random_tensor(vec![5], 1.0, &mut r);
            let b = random_tensor(vec![5], 1.0, &mut r);
            let w = reduction_weights(5, &mut r);
            grad_check_multi(
                |g, ids| {
                    let out = g.sub_elem(ids[0], ids[1])?;
                    weighted_sum(g, out, &w)
                },
                &[a, b],
                DEFAULT_EPS,
                tamper,
            )
        }),
    );
    push(
        "mul_elem",
        Box::new(move |tamper| {
            let mut r = rng(17);
            let a = random_tensor(vec![5], 1.0, &mut r);
            let b = random_tensor(vec![5], 1.0, &mut r);
            let w = reduction_weights(5, &mut r);
            grad_check_multi(
                |g, ids| {
                    let out = g.mul_elem(ids[0], ids[1])?;
                    weighted_sum(g, out, &w)
                },
                &[a, b],
                DEFAULT_EPS,
                tamper,
            )
        }),
    );
    push(
        "scale_const",
        Box::new(move |tamper| {
            let mut r = rng(18);
            let a = random_tensor(vec![6], 1.0, &mut r);
            let w = reduction_weights(6, &mut r);
            grad_check_multi(
                |g, ids| {
                    let out = g.scale_const(ids[0], 1.7);
                    weighted_sum(g, out, &w)
                },
                &[a],
                DEFAULT_EPS,
                tamper,
            )
        }),
    );
    push(
        "sum_all",
        Box::new(move |tamper| {
            let mut r = rng(19);
            let a = random_tensor(vec![3, 3], 1.0, &mut r);
            grad_check_multi(
                |g, ids| Ok(g.sum_all(ids[0])),
                &[a],
                DEFAULT_EPS,
                tamper,
            )
        }),
    );
    push(
        "conv2d",
        Box::new(move |tamper| {
            let mut r = rng(20);
            let input = random_tensor(vec![2, 5, 5], 1.0, &mut r);
            let kernels = random_tensor(vec![3, 2, 3, 3], 0.5, &mut r);
            let w = reduction_weights(3 * 5 * 5, &mut r);
            grad_check_multi(
                |g, ids| {
                    let out = g.conv2d(ids[0], ids[1], 1, 1)?;
                    weighted_sum(g, out, &w)
                },
                &[input, kernels],
                DEFAULT_EPS,
                tamper,
            )
        }),
    );
    checks
}

fn head_inputs(
    dims: FeatureDims,
    seed: u64,
) -> (Tensor<f64>, PdanetParams<f64>, Vec<Tensor<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = PdanetParams::<f64>::init(dims, EMOTION_DIMS, &mut rng);
    // random biases keep every branch away from symmetric special cases
    for (_, t) in params.named_mut() {
        if t.values.iter().all(|&v| v == 0.0) {
            for v in t.values.iter_mut() {
                *v = (rng.gen::<f64>() * 2.0 - 1.0) * 0.1;
            }
        }
    }
    let feature = random_tensor(vec![dims.channels, dims.locations()], 1.0, &mut rng);
    let leafs: Vec<Tensor<f64>> = params.named().iter().map(|(_, t)| (*t).clone()).collect();
    (feature, params, leafs)
}

fn bind_from_ids(ids: &[TensorId]) -> HeadBinding {
    HeadBinding {
        spatial_proj: ids[0],
        spatial_bias: ids[1],
        spatial_score: ids[2],
        channel_proj: ids[3],
        channel_bias: ids[4],
        coupling_weight: ids[5],
        coupling_bias: ids[6],
        output_weight: ids[7],
        output_bias: ids[8],
    }
}

fn head_check(mode: HeadMode, seed: u64, tamper: f64, with_loss: bool) -> Result<f64> {
    let dims = FeatureDims::new(3, 3, 8)?;
    let (feature, _params, leafs) = head_inputs(dims, seed);
    let mut inputs = leafs;
    inputs.push(feature);
    let target = Tensor::new(vec![1, 3], vec![0.3, 0.6, 0.8])?;
    grad_check_multi(
        move |g, ids| {
            let binding = bind_from_ids(&ids[..9]);
            let f = ids[9];
            let out = head_forward(g, f, dims, &binding, mode)?;
            if with_loss {
                let n_out = g.values(out.prediction).len();
                let preds = g.reshape(out.prediction, vec![1, n_out])?;
                let t = g.leaf(target.clone());
                mse_loss(g, preds, t)
            } else {
                Ok(g.sum_all(out.prediction))
            }
        },
        &inputs,
        DEFAULT_EPS,
        tamper,
    )
}

fn loss_check(kind: &'static str, seed: u64, tamper: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = 4;
    // keep every component at least 0.05 away from the 0.5 dichotomization
    // point so finite differences never cross the indicator boundary
    let mut draw = || {
        let side: bool = rng.gen();
        let span: f64 = rng.gen();
        if side {
            0.55 + span * 0.4
        } else {
            0.05 + span * 0.4
        }
    };
    let preds_vals: Vec<f64> = (0..rows * 3).map(|_| draw()).collect();
    let target_vals: Vec<f64> = (0..rows * 3).map(|_| draw()).collect();
    let preds = Tensor::new(vec![rows, 3], preds_vals)?;
    let targets = Tensor::new(vec![rows, 3], target_vals)?;
    let cfg = PcrConfig::new(1.5, 0.5)?;
    grad_check_multi(
        move |g, ids| {
            let t = g.leaf(targets.clone());
            match kind {
                "mse" => mse_loss(g, ids[0], t),
                _ => pcr_loss(g, ids[0], t, &cfg),
            }
        },
        &[preds],
        DEFAULT_EPS,
        tamper,
    )
}

fn backbone_check(seed: u64, tamper: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = BackboneConfig {
        input_channels: 3,
        input_height: 16,
        input_width: 16,
        stages: vec![
            StageSpec {
                out_channels: 4,
                kernel: 4,
                stride: 2,
                pad: 1,
                activation: Activation::Tanh,
            },
            StageSpec {
                out_channels: 6,
                kernel: 4,
                stride: 2,
                pad: 1,
                activation: Activation::Tanh,
            },
            StageSpec {
                out_channels: 8,
                kernel: 4,
                stride: 2,
                pad: 1,
                activation: Activation::Tanh,
            },
            StageSpec {
                out_channels: 8,
                kernel: 4,
                stride: 2,
                pad: 1,
                activation: Activation::Tanh,
            },
        ],
    };
    let params = TinyBackboneParams::<f64>::init(config.clone(), &mut rng)?;
    let dims = params.output_dims()?;
    let image = random_tensor(vec![3, 16, 16], 0.5, &mut rng);
    let image = Tensor {
        values: image.values.iter().map(|v| (v + 0.5).clamp(0.0, 1.0)).collect(),
        ..image
    };
    let w = reduction_weights(dims.channels * dims.locations(), &mut rng);
    let mut inputs: Vec<Tensor<f64>> = Vec::new();
    for (_, t) in params.named() {
        inputs.push(t.clone());
    }
    inputs.push(image);
    let n_stage_tensors = params.stages.len() * 2;
    grad_check_multi(
        move |g, ids| {
            let binding = BackboneBinding {
                stages: (0..params.stages.len())
                    .map(|i| (ids[2 * i], ids[2 * i + 1]))
                    .collect(),
            };
            let img = ids[n_stage_tensors];
            let (feature, _) =
                crate::backbone::backbone_graph_forward(g, img, &params, &binding)?;
            weighted_sum(g, feature, &w)
        },
        &inputs,
        DEFAULT_EPS,
        tamper,
    )
}

/// Run the whole suite. Each operation appears exactly once. `inject_fault`
/// perturbs the named check's analytic gradient so failure reporting can be
/// verified end to end.
pub fn run_suite(seed: u64, inject_fault: Option<&str>) -> Vec<CheckResult> {
    let mut results = Vec::new();
    let tamper_for = |name: &str| {
        if inject_fault == Some(name) {
            0.5
        } else {
            0.0
        }
    };
    for check in op_checks(seed) {
        let max_rel_err = match (check.run)(tamper_for(check.name)) {
            Ok(err) => err,
            Err(_) => f64::INFINITY,
        };
        results.push(CheckResult {
            name: check.name.to_string(),
            max_rel_err,
        });
    }
    for (name, mode) in [
        ("head_spatial", HeadMode::Spatial),
        ("head_channel", HeadMode::Channel),
        ("head_coupled", HeadMode::Coupled),
    ] {
        let max_rel_err =
            head_check(mode, seed.wrapping_add(40), tamper_for(name), false)
                .unwrap_or(f64::INFINITY);
        results.push(CheckResult {
            name: name.to_string(),
            max_rel_err,
        });
    }
    let max_rel_err = head_check(
        HeadMode::Coupled,
        seed.wrapping_add(41),
        tamper_for("head_with_mse_loss"),
        true,
    )
    .unwrap_or(f64::INFINITY);
    results.push(CheckResult {
        name: "head_with_mse_loss".to_string(),
        max_rel_err,
    });
    for name in ["loss_mse", "loss_pcr"] {
        let kind = if name == "loss_mse" { "mse" } else { "pcr" };
        let max_rel_err =
            loss_check(kind, seed.wrapping_add(42), tamper_for(name)).unwrap_or(f64::INFINITY);
        results.push(CheckResult {
            name: name.to_string(),
            max_rel_err,
        });
    }
    let max_rel_err =
        backbone_check(seed.wrapping_add(43), tamper_for("backbone")).unwrap_or(f64::INFINITY);
    results.push(CheckResult {
        name: "backbone".to_string(),
        max_rel_err,
    });
    results
}
