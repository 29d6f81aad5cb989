//! Presentation-attack error rates over score sets.
//!
//! Scores are oriented so that higher means more bona fide, and a sample is
//! accepted as bona fide when `score >= threshold`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{Label, BONA_FIDE_SPECIES};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntry {
    pub score: f64,
    pub label: Label,
    pub species: String,
    pub group: Option<String>,
}

impl ScoreEntry {
    pub fn new(score: f64, label: Label, species: impl Into<String>, group: Option<String>) -> Self {
        Self {
            score,
            label,
            species: species.into(),
            group,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    pub entries: Vec<ScoreEntry>,
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoreEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn scores_of(&self, label: Label) -> impl Iterator<Item = &ScoreEntry> {
        self.entries.iter().filter(move |e| e.label == label)
    }

    fn check_classes(&self, op: &'static str) -> Result<()> {
        let bona = self.scores_of(Label::BonaFide).count();
        if bona == 0 || bona == self.len() {
            return Err(Error::invalid(
                op,
                format!("{bona} bona-fide and {} attack entries; both classes are required", self.len() - bona),
            ));
        }
        if let Some(e) = self.entries.iter().find(|e| !e.score.is_finite()) {
            return Err(Error::invalid(op, format!("non-finite score {}", e.score)));
        }
        Ok(())
    }

    /// The same scores with every label inverted.
    pub fn with_flipped_labels(&self) -> Self {
        Self::new(
            self.entries
                .iter()
                .map(|e| ScoreEntry {
                    label: e.label.flipped(),
                    ..e.clone()
                })
                .collect(),
        )
    }

    pub fn map_scores(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(
            self.entries
                .iter()
                .map(|e| ScoreEntry {
                    score: f(e.score),
                    ..e.clone()
                })
                .collect(),
        )
    }
}

/// Which attack error rate enters ACER.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApcerVariant {
    #[default]
    Pooled,
    Worst,
}

impl fmt::Display for ApcerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ApcerVariant::Pooled => "pooled",
            ApcerVariant::Worst => "worst",
        })
    }
}

impl FromStr for ApcerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pooled" => Ok(ApcerVariant::Pooled),
            "worst" => Ok(ApcerVariant::Worst),
            other => Err(Error::Config(format!("unknown APCER variant {other:?} (pooled | worst)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rates {
    pub apcer_pooled: f64,
    pub apcer_per_species: BTreeMap<String, f64>,
    pub apcer_worst: f64,
    pub bpcer: f64,
}

impl Rates {
    pub fn apcer(&self, variant: ApcerVariant) -> f64 {
        match variant {
            ApcerVariant::Pooled => self.apcer_pooled,
            ApcerVariant::Worst => self.apcer_worst,
        }
    }
}

pub fn rates_at_threshold(scores: &ScoreSet, threshold: f64) -> Result<Rates> {
    scores.check_classes("rates_at_threshold")?;
    let mut species: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let (mut accepted_attacks, mut attacks) = (0, 0);
    let (mut rejected_bona, mut bona) = (0, 0);
    for e in &scores.entries {
        let accepted = e.score >= threshold;
        match e.label {
            Label::BonaFide => {
                bona += 1;
                rejected_bona += usize::from(!accepted);
            }
            Label::Attack => {
                attacks += 1;
                accepted_attacks += usize::from(accepted);
                let slot = species.entry(e.species.clone()).or_default();
                slot.0 += usize::from(accepted);
                slot.1 += 1;
            }
        }
    }
    let apcer_per_species: BTreeMap<String, f64> = species
        .into_iter()
        .map(|(k, (hit, total))| (k, hit as f64 / total as f64))
        .collect();
    Ok(Rates {
        apcer_pooled: accepted_attacks as f64 / attacks as f64,
        apcer_worst: apcer_per_species.values().copied().fold(0.0, f64::max),
        apcer_per_species,
        bpcer: rejected_bona as f64 / bona as f64,
    })
}

/// Candidate thresholds: `-inf`, midpoints of adjacent distinct scores, `+inf`.
pub fn candidate_thresholds(scores: &ScoreSet) -> Vec<f64> {
    let mut sorted: Vec<f64> = scores.entries.iter().map(|e| e.score).collect();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut out = Vec::with_capacity(sorted.len() + 1);
    out.push(f64::NEG_INFINITY);
    out.extend(sorted.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(f64::INFINITY);
    out
}

/// `(threshold, FAR, FRR)` at every candidate, FAR being the pooled APCER.
pub fn sweep(scores: &ScoreSet) -> Result<Vec<(f64, f64, f64)>> {
    scores.check_classes("sweep")?;
    let mut bona: Vec<f64> = scores.scores_of(Label::BonaFide).map(|e| e.score).collect();
    let mut attacks: Vec<f64> = scores.scores_of(Label::Attack).map(|e| e.score).collect();
    bona.sort_by(f64::total_cmp);
    attacks.sort_by(f64::total_cmp);
    let (nb, na) = (bona.len() as f64, attacks.len() as f64);
    Ok(candidate_thresholds(scores)
        .into_iter()
        .map(|t| {
            let rejected = bona.partition_point(|&s| s < t) as f64;
            let accepted = attacks.len() - attacks.partition_point(|&s| s < t);
            (t, accepted as f64 / na, rejected / nb)
        })
        .collect())
}

/// Threshold where FAR and FRR are closest, preferring the lowest threshold
/// among ties; returns it with `(FAR + FRR) / 2` there.
pub fn eer_threshold(scores: &ScoreSet) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64, f64)> = None;
    for (t, far, frr) in sweep(scores)? {
        let gap = (far - frr).abs();
        if best.is_none_or(|(_, g, _)| gap < g) {
            best = Some((t, gap, (far + frr) / 2.0));
        }
    }
    let (t, _, eer) = best.expect("at least two candidates");
    Ok((t, eer))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Decision threshold fixed on the development set.
    pub threshold: f64,
    /// Equal error rate on the development set.
    pub eer: f64,
    pub apcer_variant: ApcerVariant,
    pub apcer_pooled: f64,
    pub apcer_per_species: BTreeMap<String, f64>,
    pub apcer_worst: f64,
    /// The variant selected by `apcer_variant`.
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub hter: f64,
    pub dev_count: usize,
    pub test_count: usize,
}

pub fn evaluate(dev: &ScoreSet, test: &ScoreSet, variant: ApcerVariant) -> Result<EvalReport> {
    let (threshold, eer) = eer_threshold(dev)?;
    let rates = rates_at_threshold(test, threshold)?;
    let apcer = rates.apcer(variant);
    Ok(EvalReport {
        threshold,
        eer,
        apcer_variant: variant,
        apcer,
        acer: (apcer + rates.bpcer) / 2.0,
        hter: (rates.apcer_pooled + rates.bpcer) / 2.0,
        apcer_pooled: rates.apcer_pooled,
        apcer_worst: rates.apcer_worst,
        apcer_per_species: rates.apcer_per_species,
        bpcer: rates.bpcer,
        dev_count: dev.len(),
        test_count: test.len(),
    })
}

impl EvalReport {
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("threshold", self.threshold.to_string());
        kv("eer", self.eer.to_string());
        kv("apcer_variant", self.apcer_variant.to_string());
        kv("apcer", self.apcer.to_string());
        kv("apcer_pooled", self.apcer_pooled.to_string());
        kv("apcer_worst", self.apcer_worst.to_string());
        for (species, v) in &self.apcer_per_species {
            kv(&format!("apcer_species.{species}"), v.to_string());
        }
        kv("bpcer", self.bpcer.to_string());
        kv("acer", self.acer.to_string());
        kv("hter", self.hter.to_string());
        kv("dev_count", self.dev_count.to_string());
        kv("test_count", self.test_count.to_string());
        out
    }

    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut species = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: "<report>".into(),
                line: i + 1,
                reason: format!("expected key=value, got {line:?}"),
            })?;
            match k.strip_prefix("apcer_species.") {
                Some(s) => {
                    species.insert(s.to_string(), parse_field::<f64>(k, v)?);
                }
                None => {
                    map.insert(k.to_string(), v.to_string());
                }
            }
        }
        let get = |k: &str| map.get(k).ok_or_else(|| Error::Config(format!("report is missing {k}")));
        Ok(Self {
            threshold: parse_field("threshold", get("threshold")?)?,
            eer: parse_field("eer", get("eer")?)?,
            apcer_variant: get("apcer_variant")?.parse()?,
            apcer: parse_field("apcer", get("apcer")?)?,
            apcer_pooled: parse_field("apcer_pooled", get("apcer_pooled")?)?,
            apcer_worst: parse_field("apcer_worst", get("apcer_worst")?)?,
            apcer_per_species: species,
            bpcer: parse_field("bpcer", get("bpcer")?)?,
            acer: parse_field("acer", get("acer")?)?,
            hter: parse_field("hter", get("hter")?)?,
            dev_count: parse_field("dev_count", get("dev_count")?)?,
            test_count: parse_field("test_count", get("test_count")?)?,
        })
    }

    pub fn to_text(&self) -> String {
        let pct = |v: f64| format!("{:6.2}%", 100.0 * v);
        let mut out = String::new();
        let _ = writeln!(out, "threshold (dev EER)   {}", self.threshold);
        let _ = writeln!(out, "EER (dev)             {}", pct(self.eer));
        let _ = writeln!(out, "APCER pooled (test)   {}", pct(self.apcer_pooled));
        for (species, v) in &self.apcer_per_species {
            let _ = writeln!(out, "  APCER {species:<14} {}", pct(*v));
        }
        let _ = writeln!(out, "APCER worst (test)    {}", pct(self.apcer_worst));
        let _ = writeln!(out, "BPCER (test)          {}", pct(self.bpcer));
        let _ = writeln!(out, "ACER [{}] (test)  {}", self.apcer_variant, pct(self.acer));
        let _ = writeln!(out, "HTER (test)           {}", pct(self.hter));
        out
    }
}

fn parse_field<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateRule {
    #[default]
    Mean,
    Median,
}

impl FromStr for AggregateRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mean" => Ok(AggregateRule::Mean),
            "median" => Ok(AggregateRule::Median),
            other => Err(Error::Config(format!("unknown aggregation {other:?} (mean | median)"))),
        }
    }
}

/// One entry per group, in order of first appearance.
pub fn group_aggregate(scores: &ScoreSet, rule: AggregateRule) -> Result<ScoreSet> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, (Vec<f64>, &ScoreEntry)> = BTreeMap::new();
    for (i, e) in scores.entries.iter().enumerate() {
        let g = e.group.as_deref().ok_or_else(|| {
            Error::invalid("group_aggregate", format!("entry {i} has no group id"))
        })?;
        match groups.get_mut(g) {
            Some((values, first)) => {
                if first.label != e.label || first.species != e.species {
                    return Err(Error::invalid(
                        "group_aggregate",
                        format!("group {g} mixes {}/{} with {}/{}", first.label, first.species, e.label, e.species),
                    ));
                }
                values.push(e.score);
            }
            None => {
                order.push(g);
                groups.insert(g, (vec![e.score], e));
            }
        }
    }
    Ok(ScoreSet::new(
        order
            .into_iter()
            .map(|g| {
                let (values, first) = &groups[g];
                ScoreEntry {
                    score: aggregate(values, rule),
                    ..(*first).clone()
                }
            })
            .collect(),
    ))
}

fn aggregate(values: &[f64], rule: AggregateRule) -> f64 {
    match rule {
        AggregateRule::Mean => values.iter().sum::<f64>() / values.len() as f64,
        AggregateRule::Median => {
            let mut v = values.to_vec();
            v.sort_by(f64::total_cmp);
            let mid = v.len() / 2;
            if v.len() % 2 == 1 {
                v[mid]
            } else {
                (v[mid - 1] + v[mid]) / 2.0
            }
        }
    }
}

/// One line per entry: `score<TAB>label<TAB>species<TAB>group_id`, `-` for
/// no group. Scores use the shortest round-trip decimal form.
pub fn format_scores(scores: &ScoreSet) -> String {
    let mut out = String::new();
    for e in &scores.entries {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            e.score,
            e.label,
            e.species,
            e.group.as_deref().unwrap_or("-")
        );
    }
    out
}

pub fn parse_scores(text: &str, source: &str) -> Result<ScoreSet> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: source.into(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let score: f64 = fields[0]
            .parse()
            .map_err(|_| err(format!("bad score {:?}", fields[0])))?;
        let label: Label = fields[1].parse().map_err(|e: Error| err(e.to_string()))?;
        let species = fields[2].to_string();
        if species.is_empty() {
            return Err(err("empty species".into()));
        }
        if label.is_bona_fide() && species != BONA_FIDE_SPECIES {
            return Err(err(format!("bona-fide entry with species {species:?}")));
        }
        let group = (fields[3] != "-").then(|| fields[3].to_string());
        entries.push(ScoreEntry {
            score,
            label,
            species,
            group,
        });
    }
    Ok(ScoreSet::new(entries))
}

pub fn write_scores(path: &Path, scores: &ScoreSet) -> Result<()> {
    std::fs::write(path, format_scores(scores))?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<ScoreSet> {
    parse_scores(&std::fs::read_to_string(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use Label::{Attack as A, BonaFide as B};

    fn entry(score: f64, label: Label, species: &str) -> ScoreEntry {
        ScoreEntry::new(score, label, species, None)
    }

    fn separated() -> ScoreSet {
        ScoreSet::new(vec![
            entry(1.0, B, "bonafide"),
            entry(1.0, B, "bonafide"),
            entry(0.0, A, "print"),
            entry(0.0, A, "replay"),
        ])
    }

    fn random_set(seed: u64, n: usize) -> ScoreSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries: Vec<ScoreEntry> = (0..n)
            .map(|_| {
                let s = (rng.random::<f64>() * 10.0).round() / 10.0;
                match rng.random_range(0..3) {
                    0 => entry(s + 0.2, B, "bonafide"),
                    1 => entry(s, A, "print"),
                    _ => entry(s, A, "replay"),
                }
            })
            .collect();
        entries[0].label = B;
        entries[0].species = "bonafide".into();
        entries[1].label = A;
        entries[1].species = "print".into();
        ScoreSet::new(entries)
    }

    #[test]
    fn perfect_separation() {
        let r = rates_at_threshold(&separated(), 0.5).unwrap();
        assert_eq!((r.apcer_pooled, r.bpcer, r.apcer_worst), (0.0, 0.0, 0.0));
        let low = rates_at_threshold(&separated(), -1.0).unwrap();
        assert_eq!((low.apcer_pooled, low.bpcer), (1.0, 0.0));
        assert_eq!(eer_threshold(&separated()).unwrap().1, 0.0);
        let rep = evaluate(&separated(), &separated(), ApcerVariant::Pooled).unwrap();
        assert_eq!((rep.acer, rep.hter), (0.0, 0.0));
    }

    #[test]
    fn rates_match_counting() {
        for seed in 0..20 {
            let set = random_set(seed, 20);
            let t = 0.45;
            let r = rates_at_threshold(&set, t).unwrap();
            let attacks: Vec<_> = set.entries.iter().filter(|e| e.label == A).collect();
            let bona: Vec<_> = set.entries.iter().filter(|e| e.label == B).collect();
            let acc = attacks.iter().filter(|e| e.score >= t).count() as f64 / attacks.len() as f64;
            let rej = bona.iter().filter(|e| e.score < t).count() as f64 / bona.len() as f64;
            assert_eq!((r.apcer_pooled, r.bpcer), (acc, rej));
        }
    }

    #[test]
    fn identical_distributions_give_half() {
        let mut entries = Vec::new();
        for i in 0..50 {
            entries.push(entry(i as f64, B, "bonafide"));
            entries.push(entry(i as f64, A, "print"));
        }
        let (_, eer) = eer_threshold(&ScoreSet::new(entries)).unwrap();
        assert!((eer - 0.5).abs() <= 1.0 / 50.0, "{eer}");
    }

    #[test]
    fn candidates_cover_sentinels_and_midpoints() {
        let c = candidate_thresholds(&ScoreSet::new(vec![entry(1.0, B, "bonafide"), entry(3.0, A, "x"), entry(1.0, A, "x")]));
        assert_eq!(c, [f64::NEG_INFINITY, 2.0, f64::INFINITY]);
    }

    #[test]
    fn single_class_rejected() {
        let set = ScoreSet::new(vec![entry(1.0, B, "bonafide")]);
        assert!(rates_at_threshold(&set, 0.0).is_err());
        assert!(eer_threshold(&set).is_err());
    }

    #[test]
    fn label_flip_complements_acer() {
        let dev = random_set(1, 60);
        let test = random_set(2, 60);
        let rep = evaluate(&dev, &test, ApcerVariant::Pooled).unwrap();
        let rates = rates_at_threshold(&test.with_flipped_labels(), rep.threshold).unwrap();
        let flipped = (rates.apcer_pooled + rates.bpcer) / 2.0;
        assert!((flipped - (1.0 - rep.acer)).abs() < 1e-12);
    }

    #[test]
    fn worst_variant_uses_worst_species() {
        let rep = evaluate(&random_set(3, 40), &random_set(4, 40), ApcerVariant::Worst).unwrap();
        assert_eq!(rep.apcer, rep.apcer_worst);
        assert_eq!(rep.acer, (rep.apcer_worst + rep.bpcer) / 2.0);
        assert!(rep.apcer_worst >= rep.apcer_pooled);
    }

    #[test]
    fn aggregation() {
        let g = |s: f64, id: &str| ScoreEntry::new(s, B, "bonafide", Some(id.into()));
        let set = ScoreSet::new(vec![g(0.2, "v1"), g(0.9, "v2"), g(0.4, "v1")]);
        let mean = group_aggregate(&set, AggregateRule::Mean).unwrap();
        assert_eq!(mean.len(), 2);
        assert!((mean.entries[0].score - 0.3).abs() < 1e-15);
        assert_eq!(mean.entries[1].score, 0.9);
        let singles = ScoreSet::new(vec![g(0.1, "a"), g(0.5, "b")]);
        assert_eq!(group_aggregate(&singles, AggregateRule::Median).unwrap(), singles);
        let mixed = ScoreSet::new(vec![g(0.1, "a"), ScoreEntry::new(0.5, A, "print", Some("a".into()))]);
        assert!(group_aggregate(&mixed, AggregateRule::Mean).is_err());
        assert!(group_aggregate(&separated(), AggregateRule::Mean).is_err());
    }

    #[test]
    fn median_of_even_group() {
        assert_eq!(aggregate(&[4.0, 1.0, 3.0, 2.0], AggregateRule::Median), 2.5);
    }

    #[test]
    fn score_file_round_trips() {
        let mut set = random_set(5, 30).map_scores(|s| s / 3.0 + 1e-17);
        set.entries[2].group = Some("video_7".into());
        let text = format_scores(&set);
        assert_eq!(parse_scores(&text, "mem").unwrap(), set);
    }

    #[test]
    fn score_parse_errors_name_line() {
        match parse_scores("0.5\tbonafide\tbonafide\t-\nx\tattack\tprint\t-\n", "s.tsv") {
            Err(Error::Parse { line, path, .. }) => assert_eq!((line, path.to_str().unwrap()), (2, "s.tsv")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_scores("0.5\tattack\tprint\n", "s").is_err());
    }

    #[test]
    fn report_key_values_round_trip() {
        let rep = evaluate(&random_set(6, 50), &random_set(7, 50), ApcerVariant::Pooled).unwrap();
        assert_eq!(EvalReport::from_key_values(&rep.to_key_values()).unwrap(), rep);
        assert!(rep.to_text().contains("ACER"));
    }
}
