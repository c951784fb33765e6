use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::evaluate;
use super::foundation::Foundation;
use super::train::{train, TrainOptions};
use crate::error::Result;
use crate::evalmetrics::MapReport;
use crate::model::{BiasDestination, BiasSource, Supervision, Toggles, Variants};
use crate::par::Exec;
use crate::synthworld::Dataset;

/// Token weights `(noun, verb, other)` for the LSG loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenWeightRow {
    pub noun: f64,
    pub verb: f64,
    pub other: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: Toggles,
    #[serde(default)]
    pub variants: Variants,
    #[serde(default)]
    pub token_weights: Option<TokenWeightRow>,
}

impl AblationRow {
    pub fn new(name: &str, toggles: Toggles) -> Self {
        Self { name: name.to_string(), toggles, variants: Variants::default(), token_weights: None }
    }

    pub fn apply(&self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut c = base.clone();
        c.seed = seed;
        c.model.toggles = self.toggles;
        c.model.variants = self.variants;
        if let Some(w) = self.token_weights {
            c.model.lsg.alpha = w.noun;
            c.model.lsg.beta = w.verb;
            c.model.other_weight = w.other;
        }
        c
    }
}

/// Baseline, EF, EF+ABG, EF+LSG and the full model.
pub fn component_rows() -> Vec<AblationRow> {
    ["baseline", "ef", "ef+abg", "ef+lsg", "full"]
        .iter()
        .map(|n| AblationRow::new(n, Toggles::named(n).expect("known row")))
        .collect()
}

/// Variant axes, each on the full model.
pub fn variant_rows() -> Vec<AblationRow> {
    let full = Toggles::default();
    let with = |name: &str, f: &dyn Fn(&mut Variants)| {
        let mut r = AblationRow::new(name, full);
        f(&mut r.variants);
        r
    };
    let mut rows = vec![
        with("source=detection", &|v| v.bias_source = BiasSource::Detection),
        with("source=interaction", &|v| v.bias_source = BiasSource::Interaction),
        with("source=both", &|v| v.bias_source = BiasSource::Both),
        with("destination=vit", &|v| v.bias_destination = BiasDestination::Vit),
        with("destination=qformer", &|v| v.bias_destination = BiasDestination::Qformer),
        with("destination=both", &|v| v.bias_destination = BiasDestination::Both),
        with("plain-bias", &|v| v.plain_bias = true),
        with("caption-level", &|v| v.supervision = Supervision::Caption),
    ];
    for (noun, verb, other) in [(1.0, 1.0, 1.0), (1.5, 1.0, 1.0), (1.0, 2.0, 1.0), (1.5, 2.0, 1.0), (1.5, 2.0, 0.0)] {
        let mut r = AblationRow::new(&format!("weights={noun}/{verb}/{other}"), full);
        r.token_weights = Some(TokenWeightRow { noun, verb, other });
        rows.push(r);
    }
    rows
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Some(Self { mean, sd, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    pub seeds: Vec<u64>,
    pub full: Option<Stat>,
    pub seen: Option<Stat>,
    pub unseen: Option<Stat>,
    pub reports: Vec<MapReport>,
}

fn stat(reports: &[MapReport], f: impl Fn(&MapReport) -> Option<f64>) -> Option<Stat> {
    Stat::of(&reports.iter().filter_map(f).collect::<Vec<_>>())
}

/// Trains and evaluates every row once per seed on a shared dataset.
pub fn run_ablation(
    base: &RunConfig,
    rows: &[AblationRow],
    seeds: &[u64],
    data: &Dataset,
    foundation: &Foundation,
    exec: Exec,
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let mut reports = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = row.apply(base, seed);
            let trained = train(&cfg, data, foundation, TrainOptions { exec, max_steps: None })?;
            let ev = evaluate(&trained.store, &trained.model, data, &cfg.eval, exec)?;
            log::info!("{} seed {}: full {:?} unseen {:?}", row.name, seed, ev.report.full, ev.report.unseen);
            reports.push(ev.report);
        }
        out.push(AblationResult {
            name: row.name.clone(),
            seeds: seeds.to_vec(),
            full: stat(&reports, |r| r.full),
            seen: stat(&reports, |r| r.seen),
            unseen: stat(&reports, |r| r.unseen),
            reports,
        });
    }
    Ok(out)
}

/// Plain-text table, mAP in percent.
pub fn format_table(results: &[AblationResult]) -> String {
    let cell = |s: &Option<Stat>| s.map_or("-".to_string(), |s| format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.sd));
    let mut t = format!("{:<22} {:>16} {:>16} {:>16}\n", "row", "full", "unseen", "seen");
    for r in results {
        t.push_str(&format!("{:<22} {:>16} {:>16} {:>16}\n", r.name, cell(&r.full), cell(&r.unseen), cell(&r.seen)));
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_values() {
        let s = Stat::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.sd - 1.0).abs() < 1e-12);
        assert_eq!(Stat::of(&[4.0]).unwrap().sd, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn every_row_is_a_valid_config() {
        let base = RunConfig::default();
        for r in component_rows().iter().chain(&variant_rows()) {
            r.apply(&base, 0).validate().unwrap();
        }
        let b = &component_rows()[0];
        assert!(!b.toggles.early_fusion && !b.toggles.abg && !b.toggles.lsg);
    }
}
