//! Ranking and summary statistics used by the evaluation commands.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn rmse(errors: &[f64]) -> Option<f64> {
    if errors.is_empty() {
        return None;
    }
    Some((errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid("AUC needs both classes".into()));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve via average ranks (ties count one half).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Quadratic pairwise definition of [`auc`].
pub fn auc_pairwise(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut wins = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Percentage of keypoints within `alpha * norm` of the target.
pub fn pck(errors: &[f64], norms: &[f64], alpha: f64) -> Result<f64> {
    if errors.len() != norms.len() || errors.is_empty() {
        return Err(Error::Shape(format!("{} errors for {} norms", errors.len(), norms.len())));
    }
    let hits = errors.iter().zip(norms).filter(|(e, n)| **e <= alpha * **n).count();
    Ok(hits as f64 / errors.len() as f64)
}

/// What the pipeline made of one labelled image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageOutcome {
    /// Some technician shows "okay".
    pub label: bool,
    pub hand_detected: bool,
    /// Highest gesture probability over the image's technician hands, 0
    /// when there are none.
    pub score: f64,
    /// "O" center errors, pixels, of ground-truth okay hands that were
    /// detected.
    pub center_errors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    /// Percent of images with at least one detected hand.
    pub det: f64,
    /// Percent of positive images scored at or above the threshold.
    pub tp: Option<f64>,
    /// Percent of negative images scored below the threshold.
    pub tn: Option<f64>,
    pub rmse_px: Option<f64>,
    pub rmse_count: usize,
    pub auc: Option<f64>,
    /// Median single-threaded frames per second, when timed.
    pub fps: Option<f64>,
}

impl EvalReport {
    pub fn summary_line(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.2}"));
        format!(
            "images {} | Det {:.2}% | TP {}% | TN {}% | RMSE {} px ({}) | AUC {} | FPS {}",
            self.images,
            self.det,
            pct(self.tp),
            pct(self.tn),
            self.rmse_px.map_or("n/a".to_string(), |v| format!("{v:.2}")),
            self.rmse_count,
            self.auc.map_or("n/a".to_string(), |v| format!("{v:.4}")),
            self.fps.map_or("n/a".to_string(), |v| format!("{v:.1}")),
        )
    }
}

pub fn summarize(outcomes: &[ImageOutcome], threshold: f64, fps: Option<f64>) -> Result<EvalReport> {
    if outcomes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = outcomes.len() as f64;
    let det = 100.0 * outcomes.iter().filter(|o| o.hand_detected).count() as f64 / n;
    let rate = |want: bool, hit: &dyn Fn(&ImageOutcome) -> bool| {
        let group: Vec<&ImageOutcome> = outcomes.iter().filter(|o| o.label == want).collect();
        (!group.is_empty()).then(|| 100.0 * group.iter().filter(|o| hit(o)).count() as f64 / group.len() as f64)
    };
    let tp = rate(true, &|o| o.score >= threshold);
    let tn = rate(false, &|o| o.score < threshold);
    let errors: Vec<f64> = outcomes.iter().flat_map(|o| o.center_errors.iter().copied()).collect();
    let scores: Vec<f64> = outcomes.iter().map(|o| o.score).collect();
    let labels: Vec<bool> = outcomes.iter().map(|o| o.label).collect();
    let auc = if tp.is_some() && tn.is_some() { Some(auc(&scores, &labels)?) } else { None };
    Ok(EvalReport {
        images: outcomes.len(),
        det,
        tp,
        tn,
        rmse_px: rmse(&errors),
        rmse_count: errors.len(),
        auc,
        fps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn auc_of_separated_scores_is_one() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [false, false, true, true];
        assert_eq!(auc(&s, &l).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(auc(&[0.5], &[true]).is_err());
    }
}
