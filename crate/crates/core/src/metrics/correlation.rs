use crate::error::{Error, Result};

/// Predicted and ground-truth scores for the same items.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorePairs {
    predicted: Vec<f64>,
    actual: Vec<f64>,
}

impl ScorePairs {
    pub fn new(predicted: Vec<f64>, actual: Vec<f64>) -> Result<Self> {
        if predicted.len() != actual.len() {
            return Err(Error::Argument(format!(
                "score lists differ in length ({} vs {})",
                predicted.len(),
                actual.len()
            )));
        }
        if predicted.len() < 3 {
            return Err(Error::Argument(format!(
                "need at least 3 score pairs, got {}",
                predicted.len()
            )));
        }
        if predicted.iter().chain(&actual).any(|v| !v.is_finite()) {
            return Err(Error::Argument("scores must be finite".into()));
        }
        Ok(Self { predicted, actual })
    }

    pub fn predicted(&self) -> &[f64] {
        &self.predicted
    }

    pub fn actual(&self) -> &[f64] {
        &self.actual
    }

    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedCorrelation("predicted"));
    }
    if syy == 0.0 {
        return Err(Error::UndefinedCorrelation("actual"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson linear correlation coefficient.
pub fn plcc(pairs: &ScorePairs) -> Result<f64> {
    pearson(&pairs.predicted, &pairs.actual)
}

/// Fractional (1-based) ranks; tied values share the mean of their rank range.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn srcc(pairs: &ScorePairs) -> Result<f64> {
    pearson(
        &average_ranks(&pairs.predicted),
        &average_ranks(&pairs.actual),
    )
}

/// `1 - 6 * sum(d^2) / (n (n^2 - 1))`; valid only without ties.
pub fn srcc_closed_form(pairs: &ScorePairs) -> Result<f64> {
    let rp = average_ranks(&pairs.predicted);
    let ra = average_ranks(&pairs.actual);
    if rp.iter().chain(&ra).any(|r| r.fract() != 0.0) {
        return Err(Error::Argument(
            "closed-form SRCC requires tie-free data".into(),
        ));
    }
    let n = pairs.len() as f64;
    let d2: f64 = rp.iter().zip(&ra).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}
