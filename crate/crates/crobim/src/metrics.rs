//! oIoU, mIoU and Pr@X evaluation: cumulative intersection over cumulative
//! union, per-sample IoU mean, and the fraction of samples at or above each
//! threshold.

use crate::error::{CrobimError, Result};
use ndarray::Array2;
use serde::Serialize;

pub const PR_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Threshold a logit map at a probability: pixel = 1 iff σ(logit) ≥ t.
pub fn binarize(logits: &Array2<f64>, threshold: f64) -> Array2<u8> {
    // σ(z) ≥ t  ⇔  z ≥ ln(t/(1−t)); at t = 0.5 this is z ≥ 0
    let cut = (threshold / (1.0 - threshold)).ln();
    logits.mapv(|z| (z >= cut) as u8)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricAccumulator {
    pub sum_intersection: u64,
    pub sum_union: u64,
    pub per_sample_iou: Vec<f64>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.per_sample_iou.len()
    }

    /// Add one sample. Empty-∪-empty counts as IoU 1 (correctly predicted
    /// absence).
    pub fn accumulate(&mut self, pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(CrobimError::shape(
                "metrics.accumulate",
                format!("{:?}", gt.shape()),
                format!("{:?}", pred.shape()),
            ));
        }
        let mut inter = 0u64;
        let mut union = 0u64;
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            let p = p != 0;
            let g = g != 0;
            inter += (p && g) as u64;
            union += (p || g) as u64;
        }
        self.sum_intersection += inter;
        self.sum_union += union;
        self.per_sample_iou.push(if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        });
        Ok(())
    }

    /// Field-wise union of two accumulators; order of `b`'s samples is
    /// preserved after `a`'s.
    pub fn merge(mut a: MetricAccumulator, b: MetricAccumulator) -> MetricAccumulator {
        a.sum_intersection += b.sum_intersection;
        a.sum_union += b.sum_union;
        a.per_sample_iou.extend(b.per_sample_iou);
        a
    }

    pub fn finalize(&self) -> Result<MetricReport> {
        if self.per_sample_iou.is_empty() {
            return Err(CrobimError::InvalidArgument(
                "cannot finalize an empty accumulator".into(),
            ));
        }
        let count = self.per_sample_iou.len();
        let oiou = if self.sum_union == 0 {
            1.0
        } else {
            self.sum_intersection as f64 / self.sum_union as f64
        };
        let miou = self.per_sample_iou.iter().sum::<f64>() / count as f64;
        let pr = PR_THRESHOLDS.map(|t| {
            self.per_sample_iou.iter().filter(|&&iou| iou >= t).count() as f64 / count as f64
        });
        Ok(MetricReport {
            oiou,
            miou,
            pr,
            count: count as u64,
        })
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricReport {
    pub oiou: f64,
    pub miou: f64,
    /// Pr@{0.5, 0.6, 0.7, 0.8, 0.9}
    pub pr: [f64; 5],
    pub count: u64,
}

impl MetricReport {
    /// Machine-readable rendering with the documented key names.
    pub fn to_json(&self) -> String {
        let mut map = serde_json::Map::new();
        map.insert("oIoU".into(), self.oiou.into());
        map.insert("mIoU".into(), self.miou.into());
        for (t, p) in PR_THRESHOLDS.iter().zip(self.pr.iter()) {
            map.insert(format!("Pr@{t}"), (*p).into());
        }
        map.insert("count".into(), self.count.into());
        serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("metric serialize")
    }

    /// Flat key-value text rendering.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("oIoU: {:.6}\n", self.oiou));
        out.push_str(&format!("mIoU: {:.6}\n", self.miou));
        for (t, p) in PR_THRESHOLDS.iter().zip(self.pr.iter()) {
            out.push_str(&format!("Pr@{t}: {p:.6}\n"));
        }
        out.push_str(&format!("count: {}\n", self.count));
        out
    }

    pub fn write(&self, dir: &std::path::Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.to_text())?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(h: usize, on: &[(usize, usize)]) -> Array2<u8> {
        let mut m = Array2::zeros((h, h));
        for &(r, c) in on {
            m[[r, c]] = 1;
        }
        m
    }

    #[test]
    fn binarize_sign_rule() {
        let z = Array2::from_shape_fn((2, 2), |(i, j)| if (i + j) % 2 == 0 { 1.0 } else { -1.0 });
        let b = binarize(&z, 0.5);
        assert_eq!(b[[0, 0]], 1);
        assert_eq!(b[[0, 1]], 0);
        // zero logits sit exactly on the inclusive threshold
        assert!(binarize(&Array2::zeros((3, 3)), 0.5)
            .iter()
            .all(|&v| v == 1));
        assert!(binarize(&Array2::from_elem((3, 3), -1.0), 0.5)
            .iter()
            .all(|&v| v == 0));
    }

    #[test]
    fn accumulate_examples() {
        let mut acc = MetricAccumulator::new();
        let ten: Vec<(usize, usize)> = (0..10).map(|i| (i / 4, i % 4)).collect();
        let m = square(4, &ten);
        acc.accumulate(&m, &m).unwrap();
        assert_eq!(acc.sum_intersection, 10);
        assert_eq!(acc.sum_union, 10);
        assert_eq!(acc.per_sample_iou[0], 1.0);

        let mut acc = MetricAccumulator::new();
        let a = square(4, &[(0, 0), (0, 1), (0, 2), (0, 3), (1, 0)]);
        let b = square(4, &[(2, 0), (2, 1), (2, 2), (2, 3), (3, 0)]);
        acc.accumulate(&a, &b).unwrap();
        assert_eq!(acc.sum_intersection, 0);
        assert_eq!(acc.sum_union, 10);
        assert_eq!(acc.per_sample_iou[0], 0.0);

        // overlapping 2x2 blocks sharing 2 pixels: I = 2, U = 6
        let mut acc = MetricAccumulator::new();
        let a = square(4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let b = square(4, &[(0, 1), (0, 2), (1, 1), (1, 2)]);
        acc.accumulate(&a, &b).unwrap();
        assert_eq!(acc.sum_intersection, 2);
        assert_eq!(acc.sum_union, 6);
        assert!((acc.per_sample_iou[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn finalize_examples() {
        // two samples with IoUs 1.0 and 0.0, equal areas
        let mut acc = MetricAccumulator::new();
        let ten: Vec<(usize, usize)> = (0..10).map(|i| (i / 4, i % 4)).collect();
        let m = square(4, &ten);
        acc.accumulate(&m, &m).unwrap();
        let empty = square(4, &[]);
        acc.accumulate(&empty, &m).unwrap();
        let r = acc.finalize().unwrap();
        assert_eq!(r.miou, 0.5);
        assert_eq!(r.oiou, 0.5);
        assert_eq!(r.pr[0], 0.5);

        // one large perfect sample and one tiny failure: oIoU near 1
        let mut acc = MetricAccumulator::new();
        let big: Vec<(usize, usize)> = (0..100).map(|i| (i / 10, i % 10)).collect();
        let bigm = square(10, &big);
        acc.accumulate(&bigm, &bigm).unwrap();
        let one = square(10, &[(5, 5)]);
        acc.accumulate(&square(10, &[]), &one).unwrap();
        let r = acc.finalize().unwrap();
        assert!((r.oiou - 100.0 / 101.0).abs() < 1e-12);
        assert_eq!(r.miou, 0.5);

        // perfect predictions everywhere
        let mut acc = MetricAccumulator::new();
        for _ in 0..3 {
            acc.accumulate(&bigm, &bigm).unwrap();
        }
        let r = acc.finalize().unwrap();
        assert_eq!(r.oiou, 1.0);
        assert_eq!(r.miou, 1.0);
        assert!(r.pr.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn empty_union_convention_and_errors() {
        let mut acc = MetricAccumulator::new();
        let empty = square(3, &[]);
        acc.accumulate(&empty, &empty).unwrap();
        assert_eq!(acc.per_sample_iou[0], 1.0);
        assert!(MetricAccumulator::new().finalize().is_err());
        let mut acc = MetricAccumulator::new();
        assert!(acc.accumulate(&square(3, &[]), &square(4, &[])).is_err());
    }

    #[test]
    fn all_zero_predictions_on_nonempty_masks() {
        let mut acc = MetricAccumulator::new();
        let empty = square(6, &[]);
        for k in 1..=4 {
            let gt = square(6, &(0..k * 3).map(|i| (i / 6, i % 6)).collect::<Vec<_>>());
            acc.accumulate(&empty, &gt).unwrap();
        }
        let r = acc.finalize().unwrap();
        assert_eq!(r.oiou, 0.0);
        assert_eq!(r.miou, 0.0);
        assert!(r.pr.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn merge_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sample =
            |rng: &mut ChaCha8Rng| Array2::from_shape_fn((8, 8), |_| rng.gen_bool(0.4) as u8);
        let pairs: Vec<(Array2<u8>, Array2<u8>)> = (0..20)
            .map(|_| (sample(&mut rng), sample(&mut rng)))
            .collect();
        // single pass
        let mut single = MetricAccumulator::new();
        for (p, g) in &pairs {
            single.accumulate(p, g).unwrap();
        }
        // sharded at a random split point, then merged
        let cut = 7;
        let mut a = MetricAccumulator::new();
        let mut b = MetricAccumulator::new();
        for (p, g) in &pairs[..cut] {
            a.accumulate(p, g).unwrap();
        }
        for (p, g) in &pairs[cut..] {
            b.accumulate(p, g).unwrap();
        }
        let merged = MetricAccumulator::merge(a.clone(), b.clone());
        assert_eq!(merged.finalize().unwrap(), single.finalize().unwrap());
        // merge with an empty accumulator is the identity
        let with_empty = MetricAccumulator::merge(MetricAccumulator::new(), single.clone());
        assert_eq!(with_empty, single);
        // commutative up to per-sample order; metrics identical
        let ba = MetricAccumulator::merge(b, a);
        assert_eq!(ba.finalize().unwrap().oiou, merged.finalize().unwrap().oiou);
        assert_eq!(ba.finalize().unwrap().miou, merged.finalize().unwrap().miou);
    }

    #[test]
    fn matches_pixel_count_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut acc = MetricAccumulator::new();
        let mut oracle_i = 0u64;
        let mut oracle_u = 0u64;
        for _ in 0..50 {
            let p = Array2::from_shape_fn((16, 16), |_| rng.gen_bool(0.3) as u8);
            let g = Array2::from_shape_fn((16, 16), |_| rng.gen_bool(0.3) as u8);
            let (i, u) = verify::oracle_iou(&p, &g);
            oracle_i += i;
            oracle_u += u;
            acc.accumulate(&p, &g).unwrap();
        }
        assert_eq!(acc.sum_intersection, oracle_i);
        assert_eq!(acc.sum_union, oracle_u);
    }

    #[test]
    fn pr_is_non_increasing_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut acc = MetricAccumulator::new();
        for _ in 0..30 {
            let p = Array2::from_shape_fn((8, 8), |_| rng.gen_bool(0.5) as u8);
            let g = Array2::from_shape_fn((8, 8), |_| rng.gen_bool(0.5) as u8);
            acc.accumulate(&p, &g).unwrap();
        }
        let r = acc.finalize().unwrap();
        assert!((0.0..=1.0).contains(&r.oiou));
        assert!((0.0..=1.0).contains(&r.miou));
        for w in r.pr.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn report_serialization() {
        let mut acc = MetricAccumulator::new();
        let m = square(4, &[(0, 0)]);
        acc.accumulate(&m, &m).unwrap();
        let r = acc.finalize().unwrap();
        let text = r.to_text();
        assert!(text.contains("oIoU: 1.000000"));
        assert!(text.contains("Pr@0.9: 1.000000"));
        let parsed: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(parsed["count"], 1);
        assert_eq!(parsed["oIoU"], 1.0);
        assert_eq!(parsed["Pr@0.5"], 1.0);
    }
}
