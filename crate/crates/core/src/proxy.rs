//! BISG / BIFSG posterior race probabilities and the max-classification rule.
//!
//! Surname tables hold posteriors `P(r|s)`, first-name tables hold per-race
//! likelihoods `P(f|r)`, and geography tables hold raw counts from which both
//! `P(g|r)` (for Bayes' rule) and `P(r|g)` (for the geography-only fallback)
//! are derived.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-9;

/// Case-folds a name and drops every non-alphabetic character.
pub fn normalize_key(raw: &str) -> String {
    raw.chars().filter(|c| c.is_alphabetic()).flat_map(char::to_lowercase).collect()
}

/// Which evidence produced a posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PosteriorMode {
    Bifsg,
    Bisg,
    GeoOnly,
}

impl fmt::Display for PosteriorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosteriorMode::Bifsg => "BIFSG",
            PosteriorMode::Bisg => "BISG",
            PosteriorMode::GeoOnly => "GEO_ONLY",
        })
    }
}

impl FromStr for PosteriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "BIFSG" => Ok(PosteriorMode::Bifsg),
            "BISG" => Ok(PosteriorMode::Bisg),
            "GEO_ONLY" => Ok(PosteriorMode::GeoOnly),
            other => Err(Error::InvalidTable {
                key: other.to_string(),
                reason: "unknown posterior mode".into(),
            }),
        }
    }
}

/// Posterior probability vector for one individual.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyPosterior {
    pub probs: Vec<f64>,
    pub mode: PosteriorMode,
    pub argmax: usize,
    pub tie_broken: bool,
}

impl ProxyPosterior {
    /// Normalizes nonnegative weights into a posterior.
    pub fn from_weights(weights: Vec<f64>, mode: PosteriorMode) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::ZeroEvidence);
        }
        let probs: Vec<f64> = weights.into_iter().map(|w| w / total).collect();
        let (argmax, tie_broken) = argmax_lowest(&probs);
        Ok(Self { probs, mode, argmax, tie_broken })
    }
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax_lowest(probs: &[f64]) -> (usize, bool) {
    let mut best = 0;
    for (i, &v) in probs.iter().enumerate().skip(1) {
        if v > probs[best] {
            best = i;
        }
    }
    let tied = probs.iter().enumerate().any(|(i, &v)| i != best && v == probs[best]);
    (best, tied)
}

fn check_vector(v: &[f64], p: usize, what: &str) -> Result<()> {
    if v.len() != p {
        return Err(Error::DimensionMismatch { expected: p, found: v.len() });
    }
    if let Some(x) = v.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidTable {
            key: what.to_string(),
            reason: format!("entry {x} is negative or not finite"),
        });
    }
    Ok(())
}

/// `P(r|s,g) ∝ P(r|s) P(g|r)`.
pub fn bisg_posterior(surname_probs: &[f64], geo_given_race: &[f64]) -> Result<ProxyPosterior> {
    let p = surname_probs.len();
    check_vector(surname_probs, p, "surname")?;
    check_vector(geo_given_race, p, "geography")?;
    let w = surname_probs.iter().zip(geo_given_race).map(|(a, b)| a * b).collect();
    ProxyPosterior::from_weights(w, PosteriorMode::Bisg)
}

/// `P(r|s,f,g) ∝ P(r|s) P(f|r) P(g|r)`.
pub fn bifsg_posterior(
    surname_probs: &[f64],
    firstname_likelihood: &[f64],
    geo_given_race: &[f64],
) -> Result<ProxyPosterior> {
    let p = surname_probs.len();
    check_vector(surname_probs, p, "surname")?;
    check_vector(firstname_likelihood, p, "first name")?;
    check_vector(geo_given_race, p, "geography")?;
    let w = (0..p)
        .map(|r| surname_probs[r] * firstname_likelihood[r] * geo_given_race[r])
        .collect();
    ProxyPosterior::from_weights(w, PosteriorMode::Bifsg)
}

/// Max-classification: the most probable category, lowest index on ties.
pub fn max_classify(posterior: &ProxyPosterior) -> usize {
    argmax_lowest(&posterior.probs).0
}

#[derive(Debug, Clone, Default)]
struct KeyedRows {
    keys: Vec<String>,
    rows: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl KeyedRows {
    fn insert(&mut self, key: String, row: Vec<f64>) {
        match self.index.get(&key) {
            Some(&i) => self.rows[i] = row,
            None => {
                self.index.insert(key.clone(), self.keys.len());
                self.keys.push(key);
                self.rows.push(row);
            }
        }
    }

    fn get(&self, key: &str) -> Option<&[f64]> {
        self.index.get(key).map(|&i| self.rows[i].as_slice())
    }

    fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.keys.iter().map(String::as_str).zip(self.rows.iter().map(Vec::as_slice))
    }
}

/// Surname → `P(r|s)`.
#[derive(Debug, Clone)]
pub struct SurnameTable {
    p: usize,
    rows: KeyedRows,
}

impl SurnameTable {
    pub fn new(p: usize) -> Self {
        Self { p, rows: KeyedRows::default() }
    }

    pub fn width(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.rows.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.keys.is_empty()
    }

    /// Inserts a row under the normalized key. The row must be a probability
    /// vector summing to one within 1e-9.
    pub fn insert(&mut self, surname: &str, probs: Vec<f64>) -> Result<()> {
        check_vector(&probs, self.p, surname)?;
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidTable {
                key: surname.to_string(),
                reason: format!("probabilities sum to {sum}"),
            });
        }
        self.rows.insert(normalize_key(surname), probs);
        Ok(())
    }

    pub fn get(&self, surname: &str) -> Option<&[f64]> {
        self.rows.get(&normalize_key(surname))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.rows.iter()
    }

    /// Adds `eps` to every entry and renormalizes each row.
    pub fn smoothed(&self, eps: f64) -> Self {
        let mut out = Self::new(self.p);
        for (k, row) in self.iter() {
            let total: f64 = row.iter().map(|x| x + eps).sum();
            out.rows.insert(k.to_string(), row.iter().map(|x| (x + eps) / total).collect());
        }
        out
    }
}

/// First name → `P(f|r)` for each race. Rows are likelihoods, not posteriors,
/// so they carry no sum constraint.
#[derive(Debug, Clone)]
pub struct FirstNameTable {
    p: usize,
    rows: KeyedRows,
}

impl FirstNameTable {
    pub fn new(p: usize) -> Self {
        Self { p, rows: KeyedRows::default() }
    }

    pub fn width(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.rows.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.keys.is_empty()
    }

    pub fn insert(&mut self, first: &str, likelihood: Vec<f64>) -> Result<()> {
        check_vector(&likelihood, self.p, first)?;
        self.rows.insert(normalize_key(first), likelihood);
        Ok(())
    }

    pub fn get(&self, first: &str) -> Option<&[f64]> {
        self.rows.get(&normalize_key(first))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.rows.iter()
    }

    pub fn smoothed(&self, eps: f64) -> Self {
        let mut out = Self::new(self.p);
        for (k, row) in self.iter() {
            out.rows.insert(k.to_string(), row.iter().map(|x| x + eps).collect());
        }
        out
    }
}

/// Region → population count per race.
#[derive(Debug, Clone)]
pub struct GeoTable {
    p: usize,
    rows: KeyedRows,
    race_totals: Vec<f64>,
}

impl GeoTable {
    pub fn new(p: usize) -> Self {
        Self { p, rows: KeyedRows::default(), race_totals: vec![0.0; p] }
    }

    pub fn width(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.rows.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.keys.is_empty()
    }

    /// Region keys are matched verbatim (after trimming).
    pub fn insert(&mut self, region: &str, counts: Vec<f64>) -> Result<()> {
        check_vector(&counts, self.p, region)?;
        let key = region.trim().to_string();
        if let Some(old) = self.rows.get(&key) {
            for (t, c) in self.race_totals.iter_mut().zip(old) {
                *t -= c;
            }
        }
        for (t, c) in self.race_totals.iter_mut().zip(&counts) {
            *t += c;
        }
        self.rows.insert(key, counts);
        Ok(())
    }

    pub fn counts(&self, region: &str) -> Option<&[f64]> {
        self.rows.get(region.trim())
    }

    pub fn race_totals(&self) -> &[f64] {
        &self.race_totals
    }

    pub fn regions(&self) -> impl Iterator<Item = &str> {
        self.rows.keys.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.rows.iter()
    }

    /// `P(g|r) = n_{g,r} / Σ_g n_{g,r}`; every race needs a positive total.
    pub fn geo_given_race(&self, region: &str) -> Result<Vec<f64>> {
        let counts =
            self.counts(region).ok_or_else(|| Error::UnknownRegion(region.to_string()))?;
        counts
            .iter()
            .zip(&self.race_totals)
            .enumerate()
            .map(|(r, (c, t))| {
                if *t > 0.0 {
                    Ok(c / t)
                } else {
                    Err(Error::InvalidTable {
                        key: format!("race {r}"),
                        reason: "total population across regions is zero".into(),
                    })
                }
            })
            .collect()
    }

    /// `P(r|g) = n_{g,r} / Σ_r n_{g,r}`.
    pub fn race_given_geo(&self, region: &str) -> Result<Vec<f64>> {
        let counts =
            self.counts(region).ok_or_else(|| Error::UnknownRegion(region.to_string()))?;
        let total: f64 = counts.iter().sum();
        if !(total > 0.0) {
            return Err(Error::ZeroEvidence);
        }
        Ok(counts.iter().map(|c| c / total).collect())
    }

    pub fn smoothed(&self, eps: f64) -> Self {
        let mut out = Self::new(self.p);
        for (k, row) in self.iter() {
            out.insert(k, row.iter().map(|x| x + eps).collect()).expect("same width");
        }
        out
    }
}

/// The three lookup tables used together for inference.
#[derive(Debug, Clone)]
pub struct ProxyTables {
    pub surnames: SurnameTable,
    pub first_names: FirstNameTable,
    pub geo: GeoTable,
}

impl ProxyTables {
    pub fn new(surnames: SurnameTable, first_names: FirstNameTable, geo: GeoTable) -> Result<Self> {
        let p = geo.width();
        for w in [surnames.width(), first_names.width()] {
            if w != p {
                return Err(Error::DimensionMismatch { expected: p, found: w });
            }
        }
        Ok(Self { surnames, first_names, geo })
    }

    pub fn width(&self) -> usize {
        self.geo.width()
    }

    pub fn smoothed(&self, eps: f64) -> Self {
        Self {
            surnames: self.surnames.smoothed(eps),
            first_names: self.first_names.smoothed(eps),
            geo: self.geo.smoothed(eps),
        }
    }
}

/// What to do when the richest applicable estimator has no support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FallbackPolicy {
    /// Surface `ZeroEvidence` to the caller.
    #[default]
    Strict,
    /// Drop to the next poorer estimator (BIFSG → BISG → geography only).
    Degrade,
}

/// The lookup keys of one individual.
#[derive(Debug, Clone, Copy)]
pub struct NameKeys<'a> {
    pub surname: &'a str,
    pub first: &'a str,
    pub region: &'a str,
}

/// Runs BIFSG when both names resolve, BISG when only the surname resolves and
/// the geography-only prior `P(r|g)` otherwise.
pub fn infer_individual(
    keys: NameKeys<'_>,
    tables: &ProxyTables,
    policy: FallbackPolicy,
) -> Result<ProxyPosterior> {
    let geo_given_race = tables.geo.geo_given_race(keys.region)?;
    let geo_only = || {
        let prior = tables.geo.race_given_geo(keys.region)?;
        ProxyPosterior::from_weights(prior, PosteriorMode::GeoOnly)
    };
    let Some(surname) = tables.surnames.get(keys.surname) else {
        return geo_only();
    };
    let bisg = || bisg_posterior(surname, &geo_given_race);
    let result = match tables.first_names.get(keys.first) {
        Some(first) => match bifsg_posterior(surname, first, &geo_given_race) {
            Err(Error::ZeroEvidence) if policy == FallbackPolicy::Degrade => bisg(),
            other => other,
        },
        None => bisg(),
    };
    match result {
        Err(Error::ZeroEvidence) if policy == FallbackPolicy::Degrade => geo_only(),
        other => other,
    }
}

/// Infers every individual in parallel; output order matches input order.
pub fn infer_all<'a, I>(keys: I, tables: &ProxyTables, policy: FallbackPolicy) -> Vec<Result<ProxyPosterior>>
where
    I: IntoParallelIterator<Item = NameKeys<'a>>,
    I::Iter: IndexedParallelIterator,
{
    keys.into_par_iter().map(|k| infer_individual(k, tables, policy)).collect()
}
