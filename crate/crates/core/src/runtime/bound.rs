//! Attention output perturbation and its first-order bound.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::linalg::{dot, frobenius, norm, softmax};
use crate::rng::{stream, Stream};

/// One query row against `n` keys and values, with perturbations of each.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationCase {
    /// Length `d`.
    pub q: Vec<f64>,
    pub dq: Vec<f64>,
    /// `n × d`
    pub k: Vec<f64>,
    pub dk: Vec<f64>,
    /// `n × d_v`
    pub v: Vec<f64>,
    pub dv: Vec<f64>,
    pub d: usize,
    pub l_softmax: f64,
}

impl PerturbationCase {
    /// Unit-range `q`, `K`, `V` with perturbations uniform in `±scale`.
    pub fn random(seed: u64, d: usize, n: usize, d_v: usize, scale: f64) -> Self {
        let mut rng = stream(seed, Stream::Verification);
        let mut draw =
            |len: usize, s: f64| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-s..s)).collect() };
        let q = draw(d, 1.0);
        let k = draw(n * d, 1.0);
        let v = draw(n * d_v, 1.0);
        let dq = draw(d, scale);
        let dk = draw(n * d, scale);
        let dv = draw(n * d_v, scale);
        Self {
            q,
            dq,
            k,
            dk,
            v,
            dv,
            d,
            l_softmax: 1.0,
        }
    }

    fn n(&self) -> usize {
        self.k.len() / self.d
    }

    fn check(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Argument("head dimension d must be positive".into()));
        }
        if self.l_softmax.is_nan() || self.l_softmax <= 0.0 {
            return Err(Error::Argument(
                "softmax Lipschitz constant must be positive".into(),
            ));
        }
        let n = self.n();
        let ok = self.q.len() == self.d
            && self.dq.len() == self.d
            && n > 0
            && self.k.len() == n * self.d
            && self.dk.len() == self.k.len()
            && self.v.len().is_multiple_of(n)
            && self.dv.len() == self.v.len();
        if !ok {
            return Err(Error::Argument(
                "perturbation case shapes are inconsistent".into(),
            ));
        }
        Ok(())
    }
}

fn attend(q: &[f64], k: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    let n = k.len() / d;
    let d_v = v.len() / n;
    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f64> = (0..n)
        .map(|j| dot(q, &k[j * d..(j + 1) * d]) * scale)
        .collect();
    let a = softmax(&scores);
    let mut out = vec![0.0; d_v];
    for (j, aj) in a.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(&v[j * d_v..(j + 1) * d_v]) {
            *o += aj * x;
        }
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// `(‖E‖_F, bound)` where `E` is the change in attention output and the
/// bound is `L/√d (‖Δq‖‖K‖_F + ‖q‖‖ΔK‖_F) ‖V‖_F + ‖ΔV‖_F`.
pub fn error_bound(case: &PerturbationCase) -> Result<(f64, f64)> {
    case.check()?;
    let base = attend(&case.q, &case.k, &case.v, case.d);
    let pert = attend(
        &add(&case.q, &case.dq),
        &add(&case.k, &case.dk),
        &add(&case.v, &case.dv),
        case.d,
    );
    let diff: Vec<f64> = pert.iter().zip(&base).map(|(a, b)| a - b).collect();
    let empirical = norm(&diff);
    let attn_term = case.l_softmax / (case.d as f64).sqrt()
        * (norm(&case.dq) * frobenius(&case.k) + norm(&case.q) * frobenius(&case.dk))
        * frobenius(&case.v);
    Ok((empirical, attn_term + frobenius(&case.dv)))
}
