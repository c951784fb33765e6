use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::catalog::{Catalog, Combo};
use super::scene::generate_scene;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitMode {
    /// Rare-first unseen combinations.
    #[serde(rename = "RF-UC")]
    RfUc,
    /// Non-rare-first unseen combinations.
    #[serde(rename = "NF-UC")]
    NfUc,
    /// Unseen objects.
    #[serde(rename = "UO")]
    Uo,
    /// Unseen verbs.
    #[serde(rename = "UV")]
    Uv,
    #[serde(rename = "CLOSED")]
    Closed,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('_', "-").as_str() {
            "RF-UC" | "RFUC" => Ok(Self::RfUc),
            "NF-UC" | "NFUC" => Ok(Self::NfUc),
            "UO" => Ok(Self::Uo),
            "UV" => Ok(Self::Uv),
            "CLOSED" => Ok(Self::Closed),
            other => Err(Error::Config(format!("unknown split mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub seen_combinations: BTreeSet<Combo>,
    pub unseen_combinations: BTreeSet<Combo>,
    pub unseen_objects: BTreeSet<usize>,
    pub unseen_verbs: BTreeSet<usize>,
}

impl SplitSpec {
    pub fn closed(catalog: &Catalog) -> Self {
        Self {
            mode: SplitMode::Closed,
            seen_combinations: catalog.valid_combos().into_iter().collect(),
            unseen_combinations: BTreeSet::new(),
            unseen_objects: BTreeSet::new(),
            unseen_verbs: BTreeSet::new(),
        }
    }

    pub fn is_seen(&self, c: Combo) -> bool {
        self.seen_combinations.contains(&c)
    }

    pub fn is_unseen(&self, c: Combo) -> bool {
        self.unseen_combinations.contains(&c)
    }

    /// Checks the structural invariants.
    pub fn validate(&self, catalog: &Catalog) -> Result<()> {
        if let Some(c) = self.seen_combinations.intersection(&self.unseen_combinations).next() {
            return Err(Error::InfeasibleSplit(format!("combination {c:?} is both seen and unseen")));
        }
        if self.seen_combinations.is_empty() {
            return Err(Error::InfeasibleSplit("no seen combination".into()));
        }
        if matches!(self.mode, SplitMode::RfUc | SplitMode::NfUc) {
            for v in 0..catalog.num_verbs() {
                if !self.seen_combinations.iter().any(|c| c.0 == v) {
                    return Err(Error::InfeasibleSplit(format!("verb {v} has no seen combination")));
                }
            }
            for o in 0..catalog.num_objects() {
                if !self.seen_combinations.iter().any(|c| c.1 == o) {
                    return Err(Error::InfeasibleSplit(format!("object {o} has no seen combination")));
                }
            }
        }
        Ok(())
    }
}

/// Triplet-combination counts over a corpus of closed-world training scenes.
pub fn probe_frequencies(catalog: &Catalog, scenes: usize, seed: u64) -> Result<BTreeMap<Combo, usize>> {
    let closed = SplitSpec::closed(catalog);
    let mut counts: BTreeMap<Combo, usize> = catalog.valid_combos().into_iter().map(|c| (c, 0)).collect();
    for i in 0..scenes {
        let s = generate_scene(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), catalog, &closed, true)?;
        for t in &s.triplets {
            let o = s.entities[t.object].class;
            *counts.entry((t.verb, o)).or_default() += 1;
        }
    }
    Ok(counts)
}

pub const PROBE_SCENES: usize = 400;

pub fn build_splits(catalog: &Catalog, mode: SplitMode, fraction: f64, seed: u64) -> Result<SplitSpec> {
    if mode == SplitMode::Closed {
        return Ok(SplitSpec::closed(catalog));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    match mode {
        SplitMode::RfUc | SplitMode::NfUc => {
            let freq = probe_frequencies(catalog, PROBE_SCENES, seed)?;
            split_combinations(catalog, mode, fraction, &freq)
        }
        SplitMode::Uo | SplitMode::Uv => {
            let n = if mode == SplitMode::Uo { catalog.num_objects() } else { catalog.num_verbs() };
            let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
            let mut ids: Vec<usize> = (0..n).collect();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0b1e));
            let removed: BTreeSet<usize> = ids[..k].iter().copied().collect();
            let (mut seen, mut unseen) = (BTreeSet::new(), BTreeSet::new());
            for c in catalog.valid_combos() {
                let hit = if mode == SplitMode::Uo { removed.contains(&c.1) } else { removed.contains(&c.0) };
                if hit {
                    unseen.insert(c);
                } else {
                    seen.insert(c);
                }
            }
            let spec = SplitSpec {
                mode,
                seen_combinations: seen,
                unseen_combinations: unseen,
                unseen_objects: if mode == SplitMode::Uo { removed.clone() } else { BTreeSet::new() },
                unseen_verbs: if mode == SplitMode::Uv { removed } else { BTreeSet::new() },
            };
            spec.validate(catalog)?;
            Ok(spec)
        }
        SplitMode::Closed => unreachable!(),
    }
}

/// Removes `fraction` of the combinations, least frequent first (RF-UC) or
/// most frequent first (NF-UC). A combination whose removal would leave its
/// verb or object without any seen combination is skipped.
pub fn split_combinations(
    catalog: &Catalog,
    mode: SplitMode,
    fraction: f64,
    freq: &BTreeMap<Combo, usize>,
) -> Result<SplitSpec> {
    let combos = catalog.valid_combos();
    let k = (fraction * combos.len() as f64).round() as usize;
    let mut ranked = combos.clone();
    // ties fall back to the catalog weight, then to the index
    ranked.sort_by(|a, b| {
        let fa = freq.get(a).copied().unwrap_or(0);
        let fb = freq.get(b).copied().unwrap_or(0);
        fa.cmp(&fb).then(catalog.weight(*a).total_cmp(&catalog.weight(*b))).then(a.cmp(b))
    });
    if mode == SplitMode::NfUc {
        ranked.reverse();
    }
    let mut seen: BTreeSet<Combo> = combos.iter().copied().collect();
    let mut unseen = BTreeSet::new();
    for c in ranked {
        if unseen.len() == k {
            break;
        }
        let verb_ok = seen.iter().any(|s| s.0 == c.0 && *s != c);
        let obj_ok = seen.iter().any(|s| s.1 == c.1 && *s != c);
        if verb_ok && obj_ok {
            seen.remove(&c);
            unseen.insert(c);
        }
    }
    if unseen.len() < k {
        return Err(Error::InfeasibleSplit(format!(
            "only {} of {k} combinations can be removed without orphaning a verb or object",
            unseen.len()
        )));
    }
    let spec = SplitSpec {
        mode,
        seen_combinations: seen,
        unseen_combinations: unseen,
        unseen_objects: BTreeSet::new(),
        unseen_verbs: BTreeSet::new(),
    };
    spec.validate(catalog)?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_has_no_unseen() {
        let cat = Catalog::toy(1);
        let s = build_splits(&cat, SplitMode::Closed, 0.5, 0).unwrap();
        assert!(s.unseen_combinations.is_empty() && s.unseen_objects.is_empty() && s.unseen_verbs.is_empty());
        assert_eq!(s.seen_combinations.len(), 48);
    }

    #[test]
    fn rare_first_and_non_rare_first_are_disjoint() {
        let cat = Catalog::toy(1);
        let freq = probe_frequencies(&cat, PROBE_SCENES, 9).unwrap();
        let rf = split_combinations(&cat, SplitMode::RfUc, 0.25, &freq).unwrap();
        let nf = split_combinations(&cat, SplitMode::NfUc, 0.25, &freq).unwrap();
        assert_eq!(rf.unseen_combinations.len(), 12);
        assert_eq!(nf.unseen_combinations.len(), 12);
        assert!(rf.unseen_combinations.is_disjoint(&nf.unseen_combinations));

        // oracle: every RF choice is no more frequent than every NF choice
        let max_rf = rf.unseen_combinations.iter().map(|c| freq[c]).max().unwrap();
        let min_nf = nf.unseen_combinations.iter().map(|c| freq[c]).min().unwrap();
        assert!(max_rf <= min_nf);
    }

    #[test]
    fn orphaning_removal_is_infeasible() {
        let cat = Catalog::new(vec!["a".into(), "b".into()], vec!["x".into()], 0).unwrap();
        let freq: BTreeMap<Combo, usize> = cat.valid_combos().into_iter().map(|c| (c, 1)).collect();
        let r = split_combinations(&cat, SplitMode::NfUc, 0.5, &freq);
        assert!(matches!(r, Err(Error::InfeasibleSplit(_))));
    }

    #[test]
    fn unseen_verbs_remove_exact_count() {
        let cat = Catalog::toy(1);
        let s = build_splits(&cat, SplitMode::Uv, 0.25, 4).unwrap();
        assert_eq!(s.unseen_verbs.len(), 2);
        assert_eq!(s.unseen_combinations.len(), 12);
    }

    #[test]
    fn mode_parses() {
        assert_eq!("nf-uc".parse::<SplitMode>().unwrap(), SplitMode::NfUc);
        assert_eq!(serde_json::to_string(&SplitMode::RfUc).unwrap(), "\"RF-UC\"");
    }
}
