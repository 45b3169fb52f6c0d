//! Correlation statistics between searching and training performance.

use core::cmp::Ordering::{Greater, Less};

use crate::error::{Error, Result};

/// Sample Pearson correlation, accumulated in one pass with running means
/// and co-moments.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch { op: "pearson", dim: "length", expected: xs.len(), found: ys.len() });
    }
    if xs.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, found: xs.len() });
    }
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let n = (i + 1) as f64;
        let dx = x - mx;
        let dy = y - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (x - mx);
        syy += dy * (y - my);
        sxy += dx * (y - my);
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::DegenerateSample);
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KendallTau {
    pub tau: f64,
    pub concordant: usize,
    pub discordant: usize,
    /// Pairs tied in x or y, counted in neither.
    pub ties: usize,
}

/// Kendall tau-a: `(concordant − discordant) / C(n, 2)`.
pub fn kendall(xs: &[f64], ys: &[f64]) -> Result<KendallTau> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch { op: "kendall", dim: "length", expected: xs.len(), found: ys.len() });
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, found: n });
    }
    let (mut c, mut d, mut t) = (0, 0, 0);
    for i in 0..n {
        for j in i + 1..n {
            match (xs[i].partial_cmp(&xs[j]), ys[i].partial_cmp(&ys[j])) {
                (Some(Less), Some(Less)) | (Some(Greater), Some(Greater)) => c += 1,
                (Some(Less), Some(Greater)) | (Some(Greater), Some(Less)) => d += 1,
                _ => t += 1,
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(KendallTau { tau: (c as f64 - d as f64) / pairs, concordant: c, discordant: d, ties: t })
}
