//! Finite-difference verification suites.
//!
//! Three suites compare tape backward against central differences, all in
//! f64: one per primitive op, one through both weighted operations
//! (including through the weight matrices), and one end-to-end through the
//! assembled network's loss. The CLI `gradcheck` command runs them and
//! gates on the worst relative error.

use crate::error::Result;
use crate::gradcheck::{check_tape_gradient, max_rel_error, DEFAULT_FD_STEP};
use crate::network::{loss_on_tape, BackboneConfig, CfilModel, ModelConfig, WidthScale};
use crate::rng::SeededRng;
use crate::shape::Shape;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::weighted::{local_apply_on_tape, nonlocal_apply_on_tape, DistanceKernel, SignMode};

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub checks: usize,
    /// The op or case that produced the worst error.
    pub worst_case: String,
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Tensor<f64> {
    Tensor::uniform(Shape::of(shape), lo, hi, rng)
}

/// Keep elementwise kinks (relu at 0, pooling ties) away from the FD step.
fn separate_from_zero(t: &mut Tensor<f64>, margin: f64) {
    for v in t.values_mut() {
        if v.abs() < margin {
            *v = if *v >= 0.0 { margin } else { -margin };
        }
    }
}

/// Per-op finite-difference suite over `trials` seeded random inputs of at
/// most 64 elements each.
pub fn op_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = SeededRng::new(seed).derive("ops", 0);
    let mut worst = 0.0f64;
    let mut worst_case = String::new();
    let mut checks = 0usize;
    let record = |err: f64, case: &str, worst: &mut f64, worst_case: &mut String| {
        if err > *worst {
            *worst = err;
            *worst_case = case.to_string();
        }
    };

    for trial in 0..trials {
        // matmul: p x q by q x r with p*q, q*r <= 64.
        let p = 1 + rng.below(4) as usize;
        let q = 1 + rng.below(4) as usize;
        let r = 1 + rng.below(4) as usize;
        let a = random_tensor(&[p, q], -1.5, 1.5, &mut rng);
        let b = random_tensor(&[q, r], -1.5, 1.5, &mut rng);
        let err = check_tape_gradient(
            |t, vs| {
                let m = t.matmul(vs[0], vs[1])?;
                t.sum(m)
            },
            &[a, b],
            DEFAULT_FD_STEP,
        )?;
        record(err, "matmul", &mut worst, &mut worst_case);
        checks += 1;

        // linear with bias.
        let n = 1 + rng.below(3) as usize;
        let d = 1 + rng.below(4) as usize;
        let k = 1 + rng.below(3) as usize;
        let x = random_tensor(&[n, d], -1.5, 1.5, &mut rng);
        let w = random_tensor(&[d, k], -1.5, 1.5, &mut rng);
        let bias = random_tensor(&[k], -0.5, 0.5, &mut rng);
        let err = check_tape_gradient(
            |t, vs| {
                let m = t.linear(vs[0], vs[1], vs[2])?;
                t.sum(m)
            },
            &[x, w, bias],
            DEFAULT_FD_STEP,
        )?;
        record(err, "linear", &mut worst, &mut worst_case);
        checks += 1;

        // conv2d on a small map.
        let cin = 1 + rng.below(2) as usize;
        let cout = 1 + rng.below(2) as usize;
        let side = 3 + rng.below(3) as usize;
        let input = random_tensor(&[1, cin, side, side], -1.0, 1.0, &mut rng);
        let kernel = random_tensor(&[cout, cin, 3, 3], -1.0, 1.0, &mut rng);
        let cbias = random_tensor(&[cout], -0.5, 0.5, &mut rng);
        let stride = 1 + rng.below(2) as usize;
        let err = check_tape_gradient(
            |t, vs| {
                let c = t.conv2d(vs[0], vs[1], vs[2], stride, 1)?;
                t.sum(c)
            },
            &[input, kernel, cbias],
            DEFAULT_FD_STEP,
        )?;
        record(err, "conv2d", &mut worst, &mut worst_case);
        checks += 1;

        // maxpool2d; keep window values separated so the argmax is stable.
        let side = 4 + rng.below(3) as usize;
        let mut input = random_tensor(&[1, 1, side, side], -1.0, 1.0, &mut rng);
        spread_values(&mut input, 1e-3);
        let err = check_tape_gradient(
            |t, vs| {
                let m = t.maxpool2d(vs[0], 2, 2)?;
                t.sum(m)
            },
            &[input],
            DEFAULT_FD_STEP,
        )?;
        record(err, "maxpool2d", &mut worst, &mut worst_case);
        checks += 1;

        // Global pools (max needs separated values too).
        let c = 1 + rng.below(3) as usize;
        let mut input = random_tensor(&[1, c, 3, 3], -1.0, 1.0, &mut rng);
        spread_values(&mut input, 1e-3);
        let err = check_tape_gradient(
            |t, vs| {
                let a = t.global_avg_pool(vs[0])?;
                let m = t.global_max_pool(vs[0])?;
                let cat = t.concat(&[a, m], 1)?;
                t.sum(cat)
            },
            &[input],
            DEFAULT_FD_STEP,
        )?;
        record(err, "global pools", &mut worst, &mut worst_case);
        checks += 1;

        // softmax_rows; weight the sum so the gradient is not trivially 0.
        let rrows = 1 + rng.below(4) as usize;
        let cols = 1 + rng.below(8) as usize;
        let logits = random_tensor(&[rrows, cols], -2.0, 2.0, &mut rng);
        let coeffs = random_tensor(&[rrows, cols], -1.0, 1.0, &mut rng);
        let err = check_tape_gradient(
            |t, vs| {
                let s = t.softmax_rows(vs[0])?;
                let m = t.mul(s, vs[1])?;
                t.sum(m)
            },
            &[logits, coeffs],
            DEFAULT_FD_STEP,
        )?;
        record(err, "softmax_rows", &mut worst, &mut worst_case);
        checks += 1;

        // relu / add / mul / scale / reshape / concat composite.
        let len = 2 + rng.below(31) as usize;
        let mut a = random_tensor(&[1, len], -1.0, 1.0, &mut rng);
        separate_from_zero(&mut a, 1e-3);
        let b = random_tensor(&[1, len], -1.0, 1.0, &mut rng);
        let err = check_tape_gradient(
            |t, vs| {
                let r = t.relu(vs[0])?;
                let s = t.add(r, vs[1])?;
                let m = t.mul(s, vs[0])?;
                let sc = t.scale(m, 0.75)?;
                let rs = t.reshape(sc, Shape::of(&[len, 1]))?;
                let cat = t.concat(&[rs, rs], 1)?;
                t.sum(cat)
            },
            &[a, b],
            DEFAULT_FD_STEP,
        )?;
        record(err, "elementwise composite", &mut worst, &mut worst_case);
        checks += 1;

        // Cross-entropy from probabilities (through softmax).
        let n = 1 + rng.below(4) as usize;
        let logits = random_tensor(&[n, 2], -2.0, 2.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(2) as usize).collect();
        let err = check_tape_gradient(
            |t, vs| {
                let probs = t.softmax_rows(vs[0])?;
                t.nll_from_probs(probs, &labels)
            },
            &[logits],
            DEFAULT_FD_STEP,
        )?;
        record(err, "softmax + nll", &mut worst, &mut worst_case);
        checks += 1;

        // Pairwise distance kernel, alone and through a row softmax.
        let n = 1 + rng.below(8) as usize;
        let px = random_tensor(&[1, n], -1.5, 1.5, &mut rng);
        let py = random_tensor(&[1, n], -1.5, 1.5, &mut rng);
        let pc = random_tensor(&[n, n], -1.0, 1.0, &mut rng);
        for (case, through_softmax) in [("pairwise_psi", false), ("pairwise_psi + softmax", true)]
        {
            let err = check_tape_gradient(
                |t, vs| {
                    let d = t.pairwise_psi(vs[0], vs[1], 1.0)?;
                    let d = if through_softmax { t.softmax_rows(d)? } else { d };
                    let m = t.mul(d, vs[2])?;
                    t.sum(m)
                },
                &[px.clone(), py.clone(), pc.clone()],
                DEFAULT_FD_STEP,
            )?;
            record(err, case, &mut worst, &mut worst_case);
            checks += 1;
        }

        let _ = trial;
    }

    Ok(SuiteReport {
        name: "numerics ops",
        max_rel_err: worst,
        checks,
        worst_case,
    })
}

/// Nudge near-equal values apart so max-pooling argmax choices survive the
/// FD perturbation.
fn spread_values(t: &mut Tensor<f64>, min_gap: f64) {
    let len = t.len();
    for i in 0..len {
        let vi = t.values()[i];
        for j in (i + 1)..len {
            if (t.values()[j] - vi).abs() < min_gap {
                let bumped = t.values()[j] + min_gap * (1.0 + (i + j) as f64 * 0.1);
                t.values_mut()[j] = bumped;
            }
        }
    }
}

/// FD through both weighted operations, including through the weights.
pub fn weighted_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = SeededRng::new(seed).derive("weighted", 0);
    let mut worst = 0.0f64;
    let mut worst_case = String::new();
    let mut checks = 0usize;
    for _ in 0..trials {
        for sign_mode in [SignMode::AsAlgorithm, SignMode::Eq8NegatedFirstTerm] {
            let kernel = DistanceKernel::new(sign_mode);
            let n = 1 + rng.below(16) as usize;
            let x = random_tensor(&[1, n], -1.5, 1.5, &mut rng);
            let coeff = random_tensor(&[1, n], -1.0, 1.0, &mut rng);
            let err = check_tape_gradient(
                |t, vs| {
                    let f = nonlocal_apply_on_tape(t, vs[0], kernel)?;
                    let m = t.mul(f, vs[1])?;
                    t.sum(m)
                },
                &[x, coeff.clone()],
                DEFAULT_FD_STEP,
            )?;
            if err > worst {
                worst = err;
                worst_case = format!("nonlocal_apply ({sign_mode}, n={n})");
            }
            checks += 1;

            let x = random_tensor(&[1, n], -1.5, 1.5, &mut rng);
            let y = random_tensor(&[1, n], -1.5, 1.5, &mut rng);
            let err = check_tape_gradient(
                |t, vs| {
                    let (fx, fy) = local_apply_on_tape(t, vs[0], vs[1], kernel)?;
                    let mx = t.mul(fx, vs[2])?;
                    let my = t.mul(fy, vs[2])?;
                    let sx = t.sum(mx)?;
                    let sy = t.sum(my)?;
                    let sy = t.scale(sy, 0.6)?;
                    t.add(sx, sy)
                },
                &[x, y, coeff],
                DEFAULT_FD_STEP,
            )?;
            if err > worst {
                worst = err;
                worst_case = format!("local_apply ({sign_mode}, n={n})");
            }
            checks += 1;
        }
    }
    Ok(SuiteReport {
        name: "weighted ops",
        max_rel_err: worst,
        checks,
        worst_case,
    })
}

/// End-to-end FD through loss(softmax(model(pair))) at the given width
/// scale, batch 2, spot-checking seeded coordinates of every trainable
/// tensor and a few input pixels.
pub fn network_suite(width_scale: WidthScale, seed: u64) -> Result<SuiteReport> {
    let config = ModelConfig {
        width_scale,
        sign_mode: SignMode::AsAlgorithm,
        backbone: BackboneConfig::TinyConv { out_channels: 8 },
        input_side: 64,
        seed,
    };
    let model = CfilModel::<f64>::new(config)?;
    let mut rng = SeededRng::new(seed).derive("network-fd", 0);
    let parent = Tensor::<f64>::uniform(Shape::of(&[2, 3, 64, 64]), 0.0, 1.0, &mut rng);
    let child = Tensor::<f64>::uniform(Shape::of(&[2, 3, 64, 64]), 0.0, 1.0, &mut rng);
    let labels = [1usize, 0usize];

    let loss_for = |m: &CfilModel<f64>, p: &Tensor<f64>, c: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let pv = tape.leaf(p.clone());
        let cv = tape.leaf(c.clone());
        let probs = m.forward_probs(&mut tape, &bound, pv, cv)?;
        let l = loss_on_tape(&mut tape, probs, &labels)?;
        Ok(tape.value(l).values()[0])
    };

    // Analytic pass; the parent input itself is also checked, so it wants
    // gradients too.
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let pv = tape.leaf(parent.clone().with_requires_grad());
    let cv = tape.leaf(child.clone());
    let probs = model.forward_probs(&mut tape, &bound, pv, cv)?;
    let l = loss_on_tape(&mut tape, probs, &labels)?;
    tape.backward(l)?;

    let h = DEFAULT_FD_STEP;
    let mut worst = 0.0f64;
    let mut worst_case = String::new();
    let mut checks = 0usize;
    for (ti, (name, t)) in model.params.trainable().iter().enumerate() {
        let analytic = tape.grad(bound.trainable[ti]).expect("grads populated");
        for _ in 0..3 {
            let coord = rng.below(t.len() as u64) as usize;
            let mut plus = model.clone();
            plus.params.trainable_values_mut(ti)[coord] += h;
            let mut minus = model.clone();
            minus.params.trainable_values_mut(ti)[coord] -= h;
            let fd = (loss_for(&plus, &parent, &child)? - loss_for(&minus, &parent, &child)?)
                / (2.0 * h);
            let err = max_rel_error(&[analytic[coord]], &[fd]);
            if err > worst {
                worst = err;
                worst_case = format!("{name}[{coord}]");
            }
            checks += 1;
        }
    }
    let analytic_in = tape.grad(pv).expect("grads populated");
    for _ in 0..4 {
        let coord = rng.below(parent.len() as u64) as usize;
        let mut plus = parent.clone();
        plus.values_mut()[coord] += h;
        let mut minus = parent.clone();
        minus.values_mut()[coord] -= h;
        let fd =
            (loss_for(&model, &plus, &child)? - loss_for(&model, &minus, &child)?) / (2.0 * h);
        let err = max_rel_error(&[analytic_in[coord]], &[fd]);
        if err > worst {
            worst = err;
            worst_case = format!("pair input pixel {coord}");
        }
        checks += 1;
    }

    Ok(SuiteReport {
        name: "network end-to-end",
        max_rel_err: worst,
        checks,
        worst_case,
    })
}

/// All three suites in order.
pub fn run_all(width_scale: WidthScale, trials: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        op_suite(trials, seed)?,
        weighted_suite(trials.clamp(1, 40), seed)?,
        network_suite(width_scale, seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_passes_tightly() {
        let rep = op_suite(25, 42).unwrap();
        assert!(rep.max_rel_err < 1e-5, "{rep:?}");
        assert!(rep.checks >= 25 * 8);
    }

    #[test]
    fn weighted_suite_passes_tightly() {
        let rep = weighted_suite(10, 42).unwrap();
        assert!(rep.max_rel_err < 1e-5, "{rep:?}");
    }

    #[test]
    fn network_suite_passes() {
        let rep = network_suite(WidthScale::new(1, 8).unwrap(), 42).unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }
}
