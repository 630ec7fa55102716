//! SI-SNR training loss with permutation search, and evaluation metrics.
//!
//! All arithmetic runs in f64 regardless of the waveform element type.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const EPS: f64 = 1e-8;

const DB: f64 = 10.0 / std::f64::consts::LN_10;

fn check_pair<T: Scalar>(est: &[T], reference: &[T]) -> Result<()> {
    if est.len() != reference.len() {
        return Err(Error::Usage(format!(
            "estimate has {} samples, reference has {}",
            est.len(),
            reference.len()
        )));
    }
    if est.is_empty() {
        return Err(Error::Usage("empty signal".into()));
    }
    Ok(())
}

fn f<T: Scalar>(v: T) -> f64 {
    Scalar::to_f64(v)
}

fn centered<T: Scalar>(x: &[T]) -> Vec<f64> {
    let mean = x.iter().map(|v| f(*v)).sum::<f64>() / x.len() as f64;
    x.iter().map(|v| f(*v) - mean).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projection terms shared by the value and its gradient.
struct Projection {
    target: Vec<f64>,
    noise: Vec<f64>,
    p: f64,
    q: f64,
}

fn project<T: Scalar>(est: &[T], reference: &[T]) -> Result<Projection> {
    check_pair(est, reference)?;
    let e = centered(est);
    let r = centered(reference);
    let rr = dot(&r, &r);
    if rr == 0.0 {
        return Err(Error::Usage("reference is identically zero after mean removal".into()));
    }
    let alpha = dot(&e, &r) / rr;
    let target: Vec<f64> = r.iter().map(|v| alpha * v).collect();
    let noise: Vec<f64> = e.iter().zip(&target).map(|(a, b)| a - b).collect();
    let p = dot(&target, &target);
    let q = dot(&noise, &noise);
    Ok(Projection { target, noise, p, q })
}

/// Scale-invariant SNR in dB. An epsilon in both terms of the ratio keeps the
/// value finite for perfect and for orthogonal estimates.
pub fn si_snr<T: Scalar>(est: &[T], reference: &[T]) -> Result<f64> {
    let pr = project(est, reference)?;
    Ok(DB * ((pr.p + EPS).ln() - (pr.q + EPS).ln()))
}

/// SI-SNR and its gradient with respect to `est`.
pub fn si_snr_grad<T: Scalar>(est: &[T], reference: &[T]) -> Result<(f64, Vec<f64>)> {
    let pr = project(est, reference)?;
    let value = DB * ((pr.p + EPS).ln() - (pr.q + EPS).ln());
    let a = 2.0 * DB / (pr.p + EPS);
    let b = 2.0 * DB / (pr.q + EPS);
    let mut g: Vec<f64> = pr.target.iter().zip(&pr.noise).map(|(s, n)| a * s - b * n).collect();
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    g.iter_mut().for_each(|v| *v -= mean);
    Ok((value, g))
}

pub fn sdr<T: Scalar>(est: &[T], reference: &[T]) -> Result<f64> {
    check_pair(est, reference)?;
    let signal: f64 = reference.iter().map(|v| f(*v).powi(2)).sum();
    let err: f64 = est
        .iter()
        .zip(reference)
        .map(|(e, r)| (f(*r) - f(*e)).powi(2))
        .sum();
    Ok(DB * ((signal + EPS).ln() - (err + EPS).ln()))
}

pub fn si_snri<T: Scalar>(est: &[T], reference: &[T], mix: &[T]) -> Result<f64> {
    Ok(si_snr(est, reference)? - si_snr(mix, reference)?)
}

pub fn sdri<T: Scalar>(est: &[T], reference: &[T], mix: &[T]) -> Result<f64> {
    Ok(sdr(est, reference)? - sdr(mix, reference)?)
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

/// Best speaker assignment. `perm[i]` is the estimate matched to reference `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pit {
    pub loss: f64,
    pub perm: Vec<usize>,
    /// SI-SNR of each reference under `perm`.
    pub scores: Vec<f64>,
}

fn check_counts<E, R>(ests: &[E], refs: &[R]) -> Result<()> {
    if ests.len() != refs.len() || ests.is_empty() {
        return Err(Error::Usage(format!(
            "{} estimates for {} references",
            ests.len(),
            refs.len()
        )));
    }
    Ok(())
}

/// Negative mean SI-SNR under the best permutation.
pub fn pit_loss<T: Scalar, E: AsRef<[T]>, R: AsRef<[T]>>(ests: &[E], refs: &[R]) -> Result<Pit> {
    check_counts(ests, refs)?;
    let n = refs.len();
    let mut table = vec![vec![0.0; n]; n];
    for (i, r) in refs.iter().enumerate() {
        for (j, e) in ests.iter().enumerate() {
            table[i][j] = si_snr(e.as_ref(), r.as_ref())?;
        }
    }
    let mut best: Option<Pit> = None;
    for perm in permutations(n) {
        let scores: Vec<f64> = (0..n).map(|i| table[i][perm[i]]).collect();
        let loss = -scores.iter().sum::<f64>() / n as f64;
        if best.as_ref().is_none_or(|b| loss < b.loss) {
            best = Some(Pit { loss, perm, scores });
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// [`pit_loss`] plus the gradient of the loss with respect to each estimate.
pub fn pit_loss_grad<T: Scalar, E: AsRef<[T]>, R: AsRef<[T]>>(ests: &[E], refs: &[R]) -> Result<(Pit, Vec<Vec<f64>>)> {
    let pit = pit_loss(ests, refs)?;
    let n = refs.len() as f64;
    let mut grads = vec![Vec::new(); ests.len()];
    for (i, &j) in pit.perm.iter().enumerate() {
        let (_, g) = si_snr_grad(ests[j].as_ref(), refs[i].as_ref())?;
        grads[j] = g.into_iter().map(|v| -v / n).collect();
    }
    Ok((pit, grads))
}

/// Scores of one utterance, averaged over speakers.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub id: String,
    pub si_snr: f64,
    pub si_snri: f64,
    pub sdr: f64,
    pub sdri: f64,
    pub permutation: Vec<usize>,
}

impl MetricReport {
    pub fn compute<T: Scalar, E: AsRef<[T]>, R: AsRef<[T]>>(
        id: impl Into<String>,
        ests: &[E],
        refs: &[R],
        mix: &[T],
    ) -> Result<Self> {
        let pit = pit_loss(ests, refs)?;
        let n = refs.len() as f64;
        let (mut a, mut b, mut c, mut d) = (0.0, 0.0, 0.0, 0.0);
        for (i, &j) in pit.perm.iter().enumerate() {
            let (e, r) = (ests[j].as_ref(), refs[i].as_ref());
            a += si_snr(e, r)?;
            b += si_snri(e, r, mix)?;
            c += sdr(e, r)?;
            d += sdri(e, r, mix)?;
        }
        Ok(MetricReport {
            id: id.into(),
            si_snr: a / n,
            si_snri: b / n,
            sdr: c / n,
            sdri: d / n,
            permutation: pit.perm,
        })
    }

    pub const HEADER: &'static str = "id\tsi_snr\tsi_snri\tsdr\tsdri\tpermutation";

    /// One tab-separated row. The permutation is written 1-based.
    pub fn row(&self) -> String {
        let perm: Vec<String> = self.permutation.iter().map(|p| (p + 1).to_string()).collect();
        format!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}",
            self.id,
            self.si_snr,
            self.si_snri,
            self.sdr,
            self.sdri,
            perm.join(",")
        )
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: impl IntoIterator<Item = f64>) -> Self {
        let xs: Vec<f64> = xs.into_iter().collect();
        if xs.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub count: usize,
    pub si_snr: MeanStd,
    pub si_snri: MeanStd,
    pub sdr: MeanStd,
    pub sdri: MeanStd,
}

impl Aggregate {
    pub fn of(rows: &[MetricReport]) -> Self {
        Aggregate {
            count: rows.len(),
            si_snr: MeanStd::of(rows.iter().map(|r| r.si_snr)),
            si_snri: MeanStd::of(rows.iter().map(|r| r.si_snri)),
            sdr: MeanStd::of(rows.iter().map(|r| r.sdr)),
            sdri: MeanStd::of(rows.iter().map(|r| r.sdri)),
        }
    }
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "utterances\t{}", self.count)?;
        writeln!(f, "si_snr\t{}", self.si_snr)?;
        writeln!(f, "si_snri\t{}", self.si_snri)?;
        writeln!(f, "sdr\t{}", self.sdr)?;
        write!(f, "sdri\t{}", self.sdri)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_value() {
        let v = si_snr(&[1.0f64, 3.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((v - 10.0 * (0.5f64 / 1.5).log10()).abs() < 1e-6, "{v}");
        assert!((v + 4.771).abs() < 1e-3);
    }

    #[test]
    fn perfect_and_scaled() {
        let r: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let s2: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        let a = si_snr(&r, &r).unwrap();
        assert!(a >= 80.0, "{a}");
        assert!(si_snr(&[0.0f64; 3], &[0.0; 3]).unwrap_err().is_usage());
        let b = si_snr(&s2, &r).unwrap();
        assert!(b >= 80.0);
    }

    #[test]
    fn gradient_matches_differences() {
        let r: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).sin()).collect();
        let e: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).sin() + 0.3 * (i as f64 * 1.9).cos()).collect();
        let (_, g) = si_snr_grad(&e, &r).unwrap();
        let h = 1e-6;
        for k in [0, 7, 39] {
            let mut p = e.clone();
            p[k] += h;
            let mut m = e.clone();
            m[k] -= h;
            let fd = (si_snr(&p, &r).unwrap() - si_snr(&m, &r).unwrap()) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-5 * (1.0 + fd.abs()), "{fd} vs {}", g[k]);
        }
    }

    #[test]
    fn permutation_found() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 1.1).cos()).collect();
        let same = pit_loss(&[&a, &b], &[&a, &b]).unwrap();
        let swapped = pit_loss(&[&b, &a], &[&a, &b]).unwrap();
        assert_eq!(same.perm, vec![0, 1]);
        assert_eq!(swapped.perm, vec![1, 0]);
        assert_eq!(same.loss, swapped.loss);
        assert!(pit_loss(&[&a], &[&a, &b]).unwrap_err().is_usage());
    }

    #[test]
    fn mixture_improvement_is_zero() {
        let r = [0.1f64, -0.4, 0.3, 0.9];
        let m = [0.5f64, 0.2, -0.1, 0.3];
        assert_eq!(si_snri(&m, &r, &m).unwrap(), 0.0);
        assert_eq!(permutations(3).len(), 6);
    }
}
