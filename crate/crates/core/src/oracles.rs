//! Independent reference implementations for tests.
//!
//! Nothing here shares code with the production paths it checks. The
//! softmax oracle works in double-double arithmetic (better than 27 significant
//! digits); the ranking-metric oracles are direct transcriptions of the
//! textbook definitions.

use std::collections::HashMap;

/// An unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

// Plain methods rather than operator traits keep call sites explicit about
// which arithmetic is extended precision.
#[allow(clippy::should_implement_trait)]
impl DoubleDouble {
    pub const ZERO: DoubleDouble = DoubleDouble { hi: 0.0, lo: 0.0 };
    pub const ONE: DoubleDouble = DoubleDouble { hi: 1.0, lo: 0.0 };
    const LN2: DoubleDouble = DoubleDouble {
        hi: std::f64::consts::LN_2,
        lo: 2.319_046_813_846_299_6e-17,
    };

    pub fn from_f64(x: f64) -> Self {
        DoubleDouble { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn add(self, o: Self) -> Self {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        DoubleDouble { hi, lo }
    }

    pub fn neg(self) -> Self {
        DoubleDouble {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    pub fn sub(self, o: Self) -> Self {
        self.add(o.neg())
    }

    pub fn mul(self, o: Self) -> Self {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        DoubleDouble { hi, lo }
    }

    pub fn mul_f64(self, x: f64) -> Self {
        self.mul(DoubleDouble::from_f64(x))
    }

    pub fn div(self, o: Self) -> Self {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul_f64(q1));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul_f64(q2));
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        DoubleDouble { hi, lo }.add(DoubleDouble::from_f64(q3))
    }

    /// `exp(x)` by range reduction `x = k ln2 + r`, a Taylor series on
    /// `r / 1024`, and ten squarings.
    pub fn exp(self) -> Self {
        let k = (self.hi / std::f64::consts::LN_2).round();
        let r = self.sub(Self::LN2.mul_f64(k));
        let r = r.mul_f64(1.0 / 1024.0);
        let mut term = Self::ONE;
        let mut sum = Self::ONE;
        for n in 1..=24 {
            term = term.mul(r).div(DoubleDouble::from_f64(n as f64));
            sum = sum.add(term);
        }
        for _ in 0..10 {
            sum = sum.mul(sum);
        }
        let scale = 2f64.powi(k as i32);
        DoubleDouble {
            hi: sum.hi * scale,
            lo: sum.lo * scale,
        }
    }
}

/// Softmax probabilities and expected score, computed without max
/// subtraction in double-double precision. Valid for |logit| <= 700.
pub fn softmax_expectation(logits: &[f64], scores: &[f64]) -> (Vec<f64>, f64) {
    let exps: Vec<DoubleDouble> = logits
        .iter()
        .map(|&l| DoubleDouble::from_f64(l).exp())
        .collect();
    let z = exps.iter().fold(DoubleDouble::ZERO, |a, e| a.add(*e));
    let probs: Vec<DoubleDouble> = exps.iter().map(|e| e.div(z)).collect();
    let expectation = probs
        .iter()
        .zip(scores)
        .fold(DoubleDouble::ZERO, |a, (p, s)| a.add(p.mul_f64(*s)));
    (
        probs.iter().map(|p| p.to_f64()).collect(),
        expectation.to_f64(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleGain {
    Exponential,
    Linear,
}

/// NDCG@k straight from the definition, with the ideal ordering found by
/// sorting the judged grades.
pub fn brute_force_ndcg(ranking: &[&str], qrels: &HashMap<String, i32>, k: usize, gain: OracleGain) -> f64 {
    let g = |r: i32| -> f64 {
        let r = r.max(0) as f64;
        match gain {
            OracleGain::Exponential => 2f64.powf(r) - 1.0,
            OracleGain::Linear => r,
        }
    };
    let discount = |pos: usize| 1.0 / ((pos as f64 + 2.0).ln() / 2f64.ln());
    let mut dcg = 0.0;
    for (pos, id) in ranking.iter().take(k).enumerate() {
        dcg += g(*qrels.get(*id).unwrap_or(&0)) * discount(pos);
    }
    let mut ideal: Vec<i32> = qrels.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let mut idcg = 0.0;
    for (pos, r) in ideal.iter().take(k).enumerate() {
        idcg += g(*r) * discount(pos);
    }
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Heap's algorithm: every permutation of `items`.
pub fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    fn rec<T: Clone>(k: usize, a: &mut Vec<T>, out: &mut Vec<Vec<T>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        rec(k - 1, a, out);
        for i in 0..k - 1 {
            if k.is_multiple_of(2) {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
            rec(k - 1, a, out);
        }
    }
    let mut a = items.to_vec();
    let mut out = Vec::new();
    rec(a.len(), &mut a, &mut out);
    out
}

/// Population standard deviation.
pub fn population_sd(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}
