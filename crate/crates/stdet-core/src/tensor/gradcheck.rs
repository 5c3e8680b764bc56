//! Central-difference gradient checker. Always runs at 64-bit.

use super::{Result, Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub nan_encounters: usize,
}

/// Checks analytic gradients of `f` against central differences for every
/// element of every input.
pub fn grad_check<F>(inputs: &[(Vec<usize>, Vec<f64>)], epsilon: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_subset(inputs, epsilon, usize::MAX, f)
}

/// Like [`grad_check`] but caps the number of checked elements per input,
/// picking a deterministic stride-spread subset for large tensors.
pub fn grad_check_subset<F>(
    inputs: &[(Vec<usize>, Vec<f64>)],
    epsilon: f64,
    max_per_input: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    // analytic pass
    let mut tape: Tape<f64> = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(shape, vals)| tape.leaf(shape, vals.clone(), true))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let eval = |bumped: &[(Vec<usize>, Vec<f64>)]| -> Result<f64> {
        let mut t: Tape<f64> = Tape::new();
        let vs: Vec<Var> = bumped
            .iter()
            .map(|(shape, vals)| t.leaf(shape, vals.clone(), true))
            .collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value_scalar(o))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        nan_encounters: 0,
    };
    let mut work: Vec<(Vec<usize>, Vec<f64>)> = inputs.to_vec();
    for (ii, (_, vals)) in inputs.iter().enumerate() {
        let n = vals.len();
        let indices: Vec<usize> = if n <= max_per_input {
            (0..n).collect()
        } else {
            // deterministic spread with a co-prime stride
            let stride = (n / max_per_input).max(1) | 1;
            (0..max_per_input).map(|k| (k * stride + k * k % 7) % n).collect()
        };
        for j in indices {
            let orig = work[ii].1[j];
            work[ii].1[j] = orig + epsilon;
            let fp = eval(&work)?;
            work[ii].1[j] = orig - epsilon;
            let fm = eval(&work)?;
            work[ii].1[j] = orig;
            let numeric = (fp - fm) / (2.0 * epsilon);
            let a = analytic[ii].get(j).copied().unwrap_or(0.0);
            if !numeric.is_finite() || !a.is_finite() {
                report.nan_encounters += 1;
                continue;
            }
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ResampleMode, ScaleFactor};

    /// Deterministic pseudo-random values in [-1, 1).
    pub(crate) fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        (0..n)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv2d_gradient_matches_finite_differences() {
        let inputs = vec![
            (vec![2, 3, 6, 6], pseudo(2 * 3 * 6 * 6, 11)),
            (vec![2, 3, 3, 3], pseudo(2 * 3 * 3 * 3, 12)),
            (vec![2], pseudo(2, 13)),
        ];
        let rep = grad_check(&inputs, 1e-5, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "max rel err {}", rep.max_rel_err);
        assert_eq!(rep.nan_encounters, 0);
    }

    #[test]
    fn conv2d_stride2_gradient() {
        let inputs = vec![
            (vec![1, 2, 4, 4], pseudo(32, 21)),
            (vec![3, 2, 3, 3], pseudo(54, 22)),
            (vec![3], pseudo(3, 23)),
        ];
        // weight the output so the gradient is not uniform
        let rep = grad_check(&inputs, 1e-5, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            let w = t.constant(&[1, 3, 2, 2], pseudo(12, 99));
            let p = t.mul(y, w)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn split_concat_gradient_routes_ones() {
        let inputs = vec![(vec![1, 4, 2, 2], pseudo(16, 31))];
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[1, 4, 2, 2], pseudo(16, 31), true);
        let parts = tape.split_channels(x, 2).unwrap();
        let mut acc = tape.sum(parts[0]);
        let s1 = tape.sum(parts[1]);
        acc = tape.add(acc, s1).unwrap();
        tape.backward(acc).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));

        let rep = grad_check(&inputs, 1e-6, |t, v| {
            let parts = t.split_channels(v[0], 4)?;
            let y = t.concat_channels(&parts)?;
            let w = t.constant(&[1, 4, 2, 2], pseudo(16, 77));
            let p = t.mul(y, w)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-7);
    }

    #[test]
    fn resample_gradients() {
        for mode in [ResampleMode::Nearest, ResampleMode::Bilinear] {
            for factor in [ScaleFactor::Down2, ScaleFactor::Up2] {
                let inputs = vec![(vec![1, 2, 4, 4], pseudo(32, 41))];
                let rep = grad_check(&inputs, 1e-5, move |t, v| {
                    let y = t.resample(v[0], factor, mode)?;
                    let n: usize = t.values(y).len();
                    let w = t.constant(&t.shape(y).to_vec(), pseudo(n, 55));
                    let p = t.mul(y, w)?;
                    Ok(t.sum(p))
                })
                .unwrap();
                assert!(rep.max_rel_err < 1e-6, "{mode:?} {factor:?}: {}", rep.max_rel_err);
            }
        }
    }

    #[test]
    fn mhsa_gradient() {
        let d = 6;
        let tn = 3;
        let mk = |seed| (vec![d, d], pseudo(d * d, seed));
        let inputs = vec![
            (vec![1, tn, d], pseudo(tn * d, 61)),
            mk(62),
            (vec![d], pseudo(d, 63)),
            mk(64),
            (vec![d], pseudo(d, 65)),
            mk(66),
            (vec![d], pseudo(d, 67)),
            mk(68),
            (vec![d], pseudo(d, 69)),
        ];
        let rep = grad_check(&inputs, 1e-5, |t, v| {
            let w = crate::tensor::AttentionWeights {
                wq: v[1],
                bq: v[2],
                wk: v[3],
                bk: v[4],
                wv: v[5],
                bv: v[6],
                wo: v[7],
                bo: v[8],
            };
            let y = t.mhsa(v[0], 2, &w)?;
            let wt = t.constant(&[1, tn, d], pseudo(tn * d, 70));
            let p = t.mul(y, wt)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn relu_checked_away_from_kink() {
        // only inputs with |x| > 1e-3, per the non-differentiable point policy
        let vals: Vec<f64> = pseudo(16, 71)
            .into_iter()
            .map(|v| if v.abs() < 1e-3 { v + 0.5 } else { v })
            .collect();
        let inputs = vec![(vec![16], vals)];
        let rep = grad_check(&inputs, 1e-6, |t, v| {
            let y = t.relu(v[0]);
            let w = t.constant(&[16], pseudo(16, 72));
            let p = t.mul(y, w)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-7);
    }
}
