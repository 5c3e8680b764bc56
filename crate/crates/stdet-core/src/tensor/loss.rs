//! Training losses: stable binary cross-entropy on logits and smooth L1.

use super::{check_same_shape, Elem, Op, Result, Tape, Var};

impl<S: Elem> Tape<S> {
    /// Mean binary cross-entropy computed from logits:
    /// max(z,0) - z*t + ln(1 + exp(-|z|)), averaged over all elements.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        check_same_shape("bce_with_logits", self, logits, targets)?;
        let n = self.values(logits).len();
        let mut acc = S::ZERO;
        for (&z, &t) in self.values(logits).iter().zip(self.values(targets).iter()) {
            acc += z.max_e(S::ZERO) - z * t + (S::ONE + (-z.abs_e()).exp_e()).ln_e();
        }
        let v = acc / S::from_f64(n as f64);
        Ok(self.push(
            vec![1],
            vec![v],
            Op::BceWithLogits {
                logits: logits.0,
                targets: targets.0,
            },
        ))
    }

    /// Mean smooth-L1 (Huber with beta=1): 0.5 d^2 for |d|<1 else |d|-0.5.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        check_same_shape("smooth_l1", self, pred, target)?;
        let n = self.values(pred).len();
        let half = S::from_f64(0.5);
        let mut acc = S::ZERO;
        for (&p, &t) in self.values(pred).iter().zip(self.values(target).iter()) {
            let d = (p - t).abs_e();
            acc += if d < S::ONE { half * d * d } else { d - half };
        }
        let v = acc / S::from_f64(n as f64);
        Ok(self.push(
            vec![1],
            vec![v],
            Op::SmoothL1 {
                pred: pred.0,
                target: target.0,
            },
        ))
    }

    /// Mean squared error, composed from primitive ops.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }
}

pub(crate) fn bce_with_logits_backward<S: Elem>(
    t: &mut Tape<S>,
    id: usize,
    logits: usize,
    targets: usize,
) {
    let g = t.nodes[id].grad.as_ref().unwrap()[0];
    let n = S::from_f64(t.nodes[logits].values.len() as f64);
    if t.nodes[logits].grad.is_some() {
        let dz: Vec<S> = t.nodes[logits]
            .values
            .iter()
            .zip(t.nodes[targets].values.iter())
            .map(|(&z, &tv)| {
                let sig = if z >= S::ZERO {
                    S::ONE / (S::ONE + (-z).exp_e())
                } else {
                    let e = z.exp_e();
                    e / (S::ONE + e)
                };
                g * (sig - tv) / n
            })
            .collect();
        t.accumulate(logits, &dz);
    }
}

pub(crate) fn smooth_l1_backward<S: Elem>(t: &mut Tape<S>, id: usize, pred: usize, target: usize) {
    let g = t.nodes[id].grad.as_ref().unwrap()[0];
    let n = S::from_f64(t.nodes[pred].values.len() as f64);
    let dp: Vec<S> = t.nodes[pred]
        .values
        .iter()
        .zip(t.nodes[target].values.iter())
        .map(|(&p, &tv)| {
            let d = p - tv;
            let dd = d.max_e(-S::ONE).min_e(S::ONE);
            g * dd / n
        })
        .collect();
    if t.nodes[pred].grad.is_some() {
        t.accumulate(pred, &dp);
    }
    if t.nodes[target].grad.is_some() {
        let dt: Vec<S> = dp.iter().map(|&v| -v).collect();
        t.accumulate(target, &dt);
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;

    #[test]
    fn smooth_l1_hand_computed_two_point_toy() {
        // d = 0.5 -> 0.125 ; d = 2 -> 1.5 ; mean = 0.8125
        let mut t: Tape<f64> = Tape::new();
        let p = t.constant(&[2], vec![1.0, 3.0]);
        let q = t.constant(&[2], vec![0.5, 1.0]);
        let l = t.smooth_l1(p, q).unwrap();
        assert!((t.value_scalar(l) - 0.8125).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_perfect_prediction_is_zero() {
        let mut t: Tape<f64> = Tape::new();
        let p = t.constant(&[3], vec![0.1, -2.0, 5.0]);
        let q = t.constant(&[3], vec![0.1, -2.0, 5.0]);
        let l = t.smooth_l1(p, q).unwrap();
        assert_eq!(t.value_scalar(l), 0.0);
    }

    #[test]
    fn smooth_l1_decreases_towards_target() {
        let mut t: Tape<f64> = Tape::new();
        let target = t.constant(&[1], vec![2.0]);
        let mut last = f64::INFINITY;
        for step in 0..5 {
            let p = t.constant(&[1], vec![step as f64 * 0.4]);
            let l = t.smooth_l1(p, target).unwrap();
            let v = t.value_scalar(l);
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn bce_matches_direct_formula() {
        let mut t: Tape<f64> = Tape::new();
        let z = t.constant(&[2], vec![0.7, -1.3]);
        let y = t.constant(&[2], vec![1.0, 0.0]);
        let l = t.bce_with_logits(z, y).unwrap();
        let expect = ((1.0 + (-0.7f64).exp()).ln() + (1.0 + (-1.3f64).exp()).ln()) / 2.0;
        assert!((t.value_scalar(l) - expect).abs() < 1e-12);
    }
}
