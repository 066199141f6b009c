//! Small estimator toolbox: means with standard errors, weighted ratio
//! estimators, effective sample size, least-squares fits, and fixed-shape
//! pairwise reduction for long sums.

/// Sum `values` with a fixed pairwise tree, independent of chunking or
/// scheduling. More stable than a left fold for long sums.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Sample mean and its standard error.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Weighted mean `Σ w x / Σ w` with the linearized ratio-estimator SE
/// `sqrt(Σ w²(x - mean)²) / Σ w`.
pub fn weighted_mean_se(values: &[f64], weights: &[f64]) -> (f64, f64) {
    assert_eq!(values.len(), weights.len());
    let sw = pairwise_sum(weights);
    if sw <= 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let wx: Vec<f64> = values.iter().zip(weights).map(|(x, w)| w * x).collect();
    let mean = pairwise_sum(&wx) / sw;
    let dev: Vec<f64> = values
        .iter()
        .zip(weights)
        .map(|(x, w)| {
            let d = x - mean;
            w * w * d * d
        })
        .collect();
    (mean, pairwise_sum(&dev).sqrt() / sw)
}

/// Effective sample size `(Σw)² / Σw²` of an importance-weighted ensemble.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let sw = pairwise_sum(weights);
    let sq: Vec<f64> = weights.iter().map(|w| w * w).collect();
    let sw2 = pairwise_sum(&sq);
    if sw2 <= 0.0 {
        0.0
    } else {
        sw * sw / sw2
    }
}

/// Ordinary least-squares line fit.
#[derive(Clone, Copy, Debug)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope from the residual variance.
    pub slope_se: f64,
}

/// Fit `y = intercept + slope * x`; requires at least two points.
pub fn ols_fit(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let nf = n as f64;
    let xm = pairwise_sum(x) / nf;
    let ym = pairwise_sum(y) / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        sxx += (x[i] - xm) * (x[i] - xm);
        sxy += (x[i] - xm) * (y[i] - ym);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let mut rss = 0.0;
    for i in 0..n {
        let r = y[i] - intercept - slope * x[i];
        rss += r * r;
    }
    let slope_se = if n > 2 {
        (rss / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Some(LineFit {
        slope,
        intercept,
        slope_se,
    })
}

/// Fitted exponent of `err ~ C · dt^p` on a log-log grid. Entries with
/// non-positive error are skipped; returns `None` if fewer than two remain.
pub fn fit_order(dts: &[f64], errors: &[f64]) -> Option<LineFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&dt, &e) in dts.iter().zip(errors) {
        if dt > 0.0 && e > 0.0 && e.is_finite() {
            xs.push(dt.ln());
            ys.push(e.ln());
        }
    }
    if xs.len() < 2 {
        return None;
    }
    ols_fit(&xs, &ys)
}

/// Standard error of the mean via batch means: split into `batches` equal
/// blocks, take block means, and use their spread.
pub fn batch_means_se(values: &[f64], batches: usize) -> f64 {
    let n = values.len();
    if batches < 2 || n < 2 * batches {
        return f64::NAN;
    }
    let per = n / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| pairwise_sum(&values[b * per..(b + 1) * per]) / per as f64)
        .collect();
    let (_, se_of_batch_means) = mean_se(&means);
    // SE of the grand mean over `batches * per` samples.
    se_of_batch_means * (per as f64 * batches as f64 / n as f64).sqrt()
}
