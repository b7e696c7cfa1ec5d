use super::ensure;
use handcue::eval::{auc, auc_pairwise};
use handcue_tensor::{Rng, Stream};

/// Quadratic rank oracle: P(score_pos > score_neg) + 0.5 P(tie).
pub fn rank_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Both AUC implementations against the oracle; half the trials are
/// quantized to force ties. Returns the worst deviation.
pub fn auc_agreement(seed: u64, trials: usize) -> Result<f64, String> {
    let mut rng = Rng::new(seed, Stream::Custom(0));
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let n = 500;
        let labels: Vec<bool> = (0..n).map(|_| rng.chance(0.4)).collect();
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| {
                let s = rng.normal() + if l { 0.7 } else { 0.0 };
                if trial % 2 == 0 {
                    (s * 4.0).round() / 4.0
                } else {
                    s
                }
            })
            .collect();
        let want = rank_oracle(&scores, &labels);
        let a = auc(&scores, &labels).map_err(|e| e.to_string())?;
        let b = auc_pairwise(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((a - want).abs()).max((b - want).abs());
    }
    ensure(worst < 1e-9, || format!("AUC deviates from the rank oracle by {worst:e}"))?;
    Ok(worst)
}
