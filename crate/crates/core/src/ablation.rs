//! Runs variants over shared seeds and summarizes their final epochs.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::Variant;
use crate::trainer::{run_experiment, EpochRow, ExperimentConfig};

pub const ABLATION_HEADER: &str = "variant,seed,bleu1,bleu2,bleu3,bleu4,recall_at_1,recall_at_5,pseudo_acc,loss_cap";

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub last: EpochRow,
}

impl AblationRow {
    fn values(&self) -> [f64; 8] {
        let r = &self.last;
        [r.bleu[0], r.bleu[1], r.bleu[2], r.bleu[3], r.recall_at_1, r.recall_at_5, r.pseudo_acc, r.loss_cap]
    }
}

/// `lhs >= rhs` on mean BLEU-4, with `margin = lhs - rhs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderingCheck {
    pub lhs: Variant,
    pub rhs: Variant,
    pub margin: f64,
}

impl OrderingCheck {
    pub fn passed(&self) -> bool {
        self.margin >= 0.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn variants(&self) -> Vec<Variant> {
        let mut v: Vec<Variant> = Vec::new();
        for r in &self.rows {
            if !v.contains(&r.variant) {
                v.push(r.variant);
            }
        }
        v
    }

    fn mean_values(&self, v: Variant) -> Option<[f64; 8]> {
        let rows: Vec<_> = self.rows.iter().filter(|r| r.variant == v).collect();
        if rows.is_empty() {
            return None;
        }
        let mut m = [0.0; 8];
        for r in &rows {
            for (a, x) in m.iter_mut().zip(r.values()) {
                *a += x;
            }
        }
        Some(m.map(|a| a / rows.len() as f64))
    }

    pub fn mean_bleu4(&self, v: Variant) -> Option<f64> {
        self.mean_values(v).map(|m| m[3])
    }

    pub fn mean_pseudo_acc(&self, v: Variant) -> Option<f64> {
        self.mean_values(v).map(|m| m[6])
    }

    /// One row per run, then one `mean` row per variant.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ABLATION_HEADER}\n");
        let line = |s: &mut String, head: String, vals: [f64; 8]| {
            let _ = write!(s, "{head}");
            for v in vals {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        };
        for r in &self.rows {
            line(&mut s, format!("{},{}", r.variant, r.seed), r.values());
        }
        for v in self.variants() {
            line(&mut s, format!("{v},mean"), self.mean_values(v).expect("variant has rows"));
        }
        s
    }

    /// The chain `final >= ver2 >= ver1 >= paired-only` and
    /// `final >= cyclegan`, for whichever pairs were run.
    pub fn ordering_checks(&self) -> Vec<OrderingCheck> {
        use Variant::*;
        [(Final, Ver2), (Ver2, Ver1), (Ver1, PairedOnly), (Final, CycleGan)]
            .into_iter()
            .filter_map(|(lhs, rhs)| Some(OrderingCheck { lhs, rhs, margin: self.mean_bleu4(lhs)? - self.mean_bleu4(rhs)? }))
            .collect()
    }
}

/// Every variant on every seed; runs sharing a seed share the dataset.
pub fn run_ablation(base: &ExperimentConfig, variants: &[Variant], seeds: &[u64], mut progress: impl FnMut(&AblationRow)) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one variant and one seed".into()));
    }
    let mut report = AblationReport::default();
    for &variant in variants {
        for &seed in seeds {
            let cfg = ExperimentConfig { variant, seed, ..base.clone() };
            let out = run_experiment(&cfg)?;
            let last = *out.log.last().expect("at least one epoch");
            let row = AblationRow { variant, seed, last };
            progress(&row);
            report.rows.push(row);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: Variant, seed: u64, bleu4: f64) -> AblationRow {
        let last = EpochRow {
            epoch: 1,
            loss_cap: 1.0,
            loss_u: 0.0,
            loss_reg: 0.0,
            loss_triplet: 0.0,
            loss_concept: 0.0,
            bleu: [0.5, 0.4, 0.3, bleu4],
            recall_at_1: 0.0,
            recall_at_5: 0.0,
            pseudo_acc: 0.0,
            disc_evals: 0,
        };
        AblationRow { variant, seed, last }
    }

    #[test]
    fn summary_rows_and_checks() {
        let mut r = AblationReport::default();
        for (v, b) in [(Variant::PairedOnly, 0.1), (Variant::Ver1, 0.2), (Variant::Ver2, 0.2), (Variant::Final, 0.15), (Variant::CycleGan, 0.0)] {
            for s in 0..2 {
                r.rows.push(row(v, s, b + s as f64 * 0.01));
            }
        }
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 10 + 5);
        assert!(csv.contains("cyclegan,mean,"));
        let checks = r.ordering_checks();
        assert_eq!(checks.len(), 4);
        assert!(!checks[0].passed());
        assert!((checks[0].margin + 0.05).abs() < 1e-12);
        assert!(checks[1].passed() && checks[1].margin.abs() < 1e-12);
        assert!(checks[3].passed());
    }
}
