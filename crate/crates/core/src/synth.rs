//! Seeded synthetic populations: regions of varying racial homogeneity, SES,
//! abstract name keys with tunable informativeness, and a premium outcome.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::CategorySet;
use crate::proxy::{FirstNameTable, GeoTable, ProxyTables, SurnameTable};

/// Age groups, youngest first.
pub const AGE_BANDS: [&str; 18] = [
    "18", "19", "20", "21", "22", "23", "24", "25-29", "30-34", "35-39", "40-44", "45-49", "50-54", "55-59",
    "60-64", "65-69", "70-74", "75+",
];
const AGE_WEIGHTS: [f64; 18] = [1., 1., 1., 1., 1., 1., 1., 5., 5., 5., 5., 5., 5., 5., 5., 5., 5., 5.];

/// Shares of the NC voter-file reference classes, in default label order.
pub const DEFAULT_SHARES: [f64; 5] = [0.017, 0.234, 0.051, 0.030, 0.668];

/// Surname key given to people the surname table does not cover.
pub const UNLISTED_SURNAME: &str = "unlisted";

const PREMIUM_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::F => "F",
            Gender::M => "M",
        })
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "F" | "f" => Ok(Gender::F),
            "M" | "m" => Ok(Gender::M),
            other => Err(Error::InvalidConfig { field: "gender_code".into(), reason: format!("`{other}` is not F or M") }),
        }
    }
}

pub fn age_band_index(label: &str) -> Option<usize> {
    AGE_BANDS.iter().position(|b| *b == label.trim())
}

/// Region-level socioeconomic triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ses {
    /// Median family income.
    pub medfaminc: f64,
    /// Poverty rate.
    pub ppov: f64,
    /// Unemployment rate.
    pub punemp: f64,
}

impl Ses {
    pub fn as_array(&self) -> [f64; 3] {
        [self.medfaminc, self.ppov, self.punemp]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectChannel {
    /// Race enters the premium only through region, age and gender.
    Indirect,
    /// The group effect vector is added to each person's premium.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionModel {
    pub count: usize,
    pub size: usize,
    /// Each region draws its homogeneity uniformly from `[min, max]`.
    pub homogeneity_min: f64,
    pub homogeneity_max: f64,
    /// Deprivation loads on the region's deviation from statewide shares.
    pub composition_loading: Vec<f64>,
    /// Region-level deprivation not explained by composition.
    pub deprivation_sd: f64,
}

impl Default for RegionModel {
    fn default() -> Self {
        Self {
            count: 100,
            size: 2000,
            homogeneity_min: 0.0,
            homogeneity_max: 0.9,
            composition_loading: vec![-0.5, 1.0, 0.5, 0.3, -1.0],
            deprivation_sd: 0.45,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SesModel {
    /// Each of the three SES columns is an independent noisy reading of
    /// deprivation with this sd, before its monotone transform.
    pub measurement_sd: f64,
}

impl Default for SesModel {
    fn default() -> Self {
        Self { measurement_sd: 1.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NameModel {
    /// Probability a surname comes from the person's own race pool; the rest
    /// come from a uniformly chosen pool. 1 makes surnames decisive.
    pub surname_sharpness: f64,
    pub first_name_sharpness: f64,
    pub keys_per_pool: usize,
    /// Chance of an unlisted surname is `base + slope·deprivation`, clipped.
    pub coverage_gap_base: f64,
    pub coverage_gap_slope: f64,
    /// Weight on true region counts in the proxy geography table; the rest is
    /// statewide shares scaled to the region's size.
    pub geo_fidelity: f64,
}

impl Default for NameModel {
    fn default() -> Self {
        Self {
            surname_sharpness: 0.6,
            first_name_sharpness: 0.6,
            keys_per_pool: 40,
            coverage_gap_base: 0.05,
            coverage_gap_slope: 0.1,
            geo_fidelity: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PremiumModel {
    pub base: f64,
    pub age_effects: Vec<f64>,
    /// Added for `M`.
    pub gender_effect: f64,
    /// Per unit of region deprivation.
    pub region_effect: f64,
    pub group_effects: Vec<f64>,
    pub channel: EffectChannel,
    pub noise_sd: f64,
}

impl Default for PremiumModel {
    fn default() -> Self {
        Self {
            base: 100.0,
            age_effects: vec![
                60., 50., 42., 36., 30., 26., 22., 15., 10., 8., 6., 5., 5., 6., 8., 12., 18., 25.,
            ],
            gender_effect: 4.0,
            region_effect: 20.0,
            group_effects: vec![0.0; 5],
            channel: EffectChannel::Indirect,
            noise_sd: 15.0,
        }
    }
}

impl PremiumModel {
    /// Every effect zero; the premium is `base` plus noise.
    pub fn flat(base: f64, p: usize) -> Self {
        Self {
            base,
            age_effects: vec![0.0; AGE_BANDS.len()],
            gender_effect: 0.0,
            region_effect: 0.0,
            group_effects: vec![0.0; p],
            channel: EffectChannel::Indirect,
            noise_sd: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    #[serde(default)]
    pub labels: CategorySet,
    #[serde(default = "default_shares")]
    pub shares: Vec<f64>,
    #[serde(default)]
    pub regions: RegionModel,
    #[serde(default)]
    pub ses: SesModel,
    #[serde(default)]
    pub names: NameModel,
    #[serde(default)]
    pub premium: PremiumModel,
}

fn default_shares() -> Vec<f64> {
    DEFAULT_SHARES.to_vec()
}

fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig { field: field.into(), reason: reason.into() }
}

fn unit(field: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(field, format!("{v} is outside [0, 1]")))
    }
}

fn nonneg(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("{v} must be finite and nonnegative")))
    }
}

fn finite(field: &str, v: &[f64]) -> Result<()> {
    match v.iter().find(|x| !x.is_finite()) {
        Some(x) => Err(invalid(field, format!("{x} is not finite"))),
        None => Ok(()),
    }
}

fn width(field: &str, v: &[f64], p: usize) -> Result<()> {
    if v.len() == p {
        finite(field, v)
    } else {
        Err(invalid(field, format!("expected {p} entries, found {}", v.len())))
    }
}

impl ScenarioConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            labels: CategorySet::default(),
            shares: default_shares(),
            regions: RegionModel::default(),
            ses: SesModel::default(),
            names: NameModel::default(),
            premium: PremiumModel::default(),
        }
    }

    pub fn p(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        width("shares", &self.shares, p)?;
        if self.shares.iter().any(|&s| !(s > 0.0)) {
            return Err(invalid("shares", "every share must be positive"));
        }
        let sum: f64 = self.shares.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(invalid("shares", format!("sum to {sum}, not 1")));
        }
        let r = &self.regions;
        if r.count == 0 {
            return Err(invalid("regions.count", "need at least one region"));
        }
        if r.size == 0 {
            return Err(invalid("regions.size", "need at least one person per region"));
        }
        unit("regions.homogeneity_min", r.homogeneity_min)?;
        unit("regions.homogeneity_max", r.homogeneity_max)?;
        if r.homogeneity_min > r.homogeneity_max {
            return Err(invalid("regions.homogeneity_min", "exceeds homogeneity_max"));
        }
        width("regions.composition_loading", &r.composition_loading, p)?;
        nonneg("regions.deprivation_sd", r.deprivation_sd)?;
        nonneg("ses.measurement_sd", self.ses.measurement_sd)?;
        let n = &self.names;
        unit("names.surname_sharpness", n.surname_sharpness)?;
        unit("names.first_name_sharpness", n.first_name_sharpness)?;
        unit("names.geo_fidelity", n.geo_fidelity)?;
        if n.keys_per_pool == 0 {
            return Err(invalid("names.keys_per_pool", "must be at least 1"));
        }
        finite("names.coverage_gap_base", &[n.coverage_gap_base])?;
        finite("names.coverage_gap_slope", &[n.coverage_gap_slope])?;
        let m = &self.premium;
        width("premium.age_effects", &m.age_effects, AGE_BANDS.len())?;
        width("premium.group_effects", &m.group_effects, p)?;
        finite("premium.base", &[m.base, m.gender_effect])?;
        finite("premium.region_effect", &[m.region_effect])?;
        nonneg("premium.noise_sd", m.noise_sd)?;
        Ok(())
    }
}

/// One synthetic person, laid out like the matched voter/insurance microdata.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationRecord {
    pub id: u64,
    pub true_race: usize,
    pub surname_key: String,
    pub first_key: String,
    pub region_key: String,
    pub age_band: usize,
    pub gender: Gender,
    pub premium: f64,
    pub ses: Ses,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionProfile {
    pub key: String,
    pub homogeneity: f64,
    pub dominant: usize,
    pub composition: Vec<f64>,
    pub counts: Vec<u64>,
    pub deprivation: f64,
    pub ses: Ses,
}

#[derive(Debug, Clone)]
pub struct Population {
    pub labels: CategorySet,
    pub records: Vec<PopulationRecord>,
    pub regions: Vec<RegionProfile>,
    /// Exact region × race counts of the generated people.
    pub population_geo: GeoTable,
    /// Tables a proxy method would be given: name tables matching the name
    /// model and the (possibly blurred) geography.
    pub tables: ProxyTables,
}

impl Population {
    pub fn true_labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.true_race).collect()
    }

    pub fn premiums(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.premium).collect()
    }

    pub fn race_totals(&self) -> Vec<u64> {
        let mut t = vec![0; self.labels.len()];
        for r in &self.records {
            t[r.true_race] += 1;
        }
        t
    }
}

pub fn region_key(i: usize) -> String {
    format!("{:05}", 27000 + i)
}

/// Lowercase base-26 letters, at least three wide.
fn alpha(mut i: usize) -> String {
    let mut s = Vec::new();
    loop {
        s.push(b'a' + (i % 26) as u8);
        i /= 26;
        if i == 0 && s.len() >= 3 {
            break;
        }
    }
    s.reverse();
    String::from_utf8(s).expect("ascii")
}

pub fn surname_key(pool: usize, i: usize) -> String {
    format!("sur{}{}", alpha(pool), alpha(i))
}

pub fn first_name_key(pool: usize, i: usize) -> String {
    format!("fir{}{}", alpha(pool), alpha(i))
}

/// Largest-remainder split of `size` over `weights` (which sum to one).
fn apportion(size: usize, weights: &[f64]) -> Vec<u64> {
    let exact: Vec<f64> = weights.iter().map(|w| w * size as f64).collect();
    let mut counts: Vec<u64> = exact.iter().map(|x| x.floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &k in order.iter().take(size.saturating_sub(assigned as usize)) {
        counts[k] += 1;
    }
    counts
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn pool_probability(own: usize, pool: usize, sharpness: f64, p: usize) -> f64 {
    let base = (1.0 - sharpness) / p as f64;
    if own == pool {
        sharpness + base
    } else {
        base
    }
}

struct RegionDraw {
    profile: RegionProfile,
    people: Vec<PopulationRecord>,
}

fn generate_region(config: &ScenarioConfig, index: usize) -> RegionDraw {
    let p = config.p();
    let rm = &config.regions;
    let nm = &config.names;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);

    let h = if rm.homogeneity_max > rm.homogeneity_min {
        rng.random_range(rm.homogeneity_min..=rm.homogeneity_max)
    } else {
        rm.homogeneity_min
    };
    let dominant = WeightedIndex::new(&config.shares).expect("validated shares").sample(&mut rng);
    let composition: Vec<f64> = (0..p)
        .map(|k| (1.0 - h) * config.shares[k] + if k == dominant { h } else { 0.0 })
        .collect();
    let counts = apportion(rm.size, &composition);
    let shift: f64 =
        (0..p).map(|k| (composition[k] - config.shares[k]) * rm.composition_loading[k]).sum();
    let noise: f64 = rng.sample(StandardNormal);
    let deprivation = shift + rm.deprivation_sd * noise;
    let mut reading = || deprivation + config.ses.measurement_sd * rng.sample::<f64, _>(StandardNormal);
    let (m1, m2, m3) = (reading(), reading(), reading());
    let ses = Ses {
        medfaminc: 65_000.0 * (-0.25 * m1).exp(),
        ppov: logistic(-1.8 + 0.6 * m2),
        punemp: logistic(-2.8 + 0.4 * m3),
    };

    let key = region_key(index);
    let gap = (nm.coverage_gap_base + nm.coverage_gap_slope * deprivation).clamp(0.0, 1.0);
    let ages = WeightedIndex::new(AGE_WEIGHTS).expect("positive weights");
    let mut people = Vec::with_capacity(rm.size);
    for (race, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            let pool = |sharpness: f64, rng: &mut ChaCha8Rng| {
                if rng.random::<f64>() < sharpness {
                    race
                } else {
                    rng.random_range(0..p)
                }
            };
            let s_pool = pool(nm.surname_sharpness, &mut rng);
            let s_idx = rng.random_range(0..nm.keys_per_pool);
            let f_pool = pool(nm.first_name_sharpness, &mut rng);
            let f_idx = rng.random_range(0..nm.keys_per_pool);
            let unlisted = rng.random::<f64>() < gap;
            let age_band = ages.sample(&mut rng);
            let gender = if rng.random::<bool>() { Gender::M } else { Gender::F };
            people.push(PopulationRecord {
                id: 0,
                true_race: race,
                surname_key: if unlisted { UNLISTED_SURNAME.to_string() } else { surname_key(s_pool, s_idx) },
                first_key: first_name_key(f_pool, f_idx),
                region_key: key.clone(),
                age_band,
                gender,
                premium: 0.0,
                ses,
            });
        }
    }
    RegionDraw {
        profile: RegionProfile { key, homogeneity: h, dominant, composition, counts, deprivation, ses },
        people,
    }
}

fn build_tables(config: &ScenarioConfig, regions: &[RegionProfile]) -> Result<(GeoTable, ProxyTables)> {
    let p = config.p();
    let nm = &config.names;
    let mut totals = vec![0.0; p];
    for r in regions {
        for (t, c) in totals.iter_mut().zip(&r.counts) {
            *t += *c as f64;
        }
    }
    let grand: f64 = totals.iter().sum();

    let mut population_geo = GeoTable::new(p);
    let mut proxy_geo = GeoTable::new(p);
    for r in regions {
        let counts: Vec<f64> = r.counts.iter().map(|&c| c as f64).collect();
        let size: f64 = counts.iter().sum();
        let blurred = (0..p)
            .map(|k| nm.geo_fidelity * counts[k] + (1.0 - nm.geo_fidelity) * size * totals[k] / grand)
            .collect();
        population_geo.insert(&r.key, counts)?;
        proxy_geo.insert(&r.key, blurred)?;
    }

    let m = nm.keys_per_pool as f64;
    let mut surnames = SurnameTable::new(p);
    let mut first_names = FirstNameTable::new(p);
    for pool in 0..p {
        let weights: Vec<f64> =
            (0..p).map(|r| pool_probability(r, pool, nm.surname_sharpness, p) * totals[r]).collect();
        let sum: f64 = weights.iter().sum();
        let likelihood: Vec<f64> =
            (0..p).map(|r| pool_probability(r, pool, nm.first_name_sharpness, p) / m).collect();
        for i in 0..nm.keys_per_pool {
            if sum > 0.0 {
                surnames.insert(&surname_key(pool, i), weights.iter().map(|w| w / sum).collect())?;
            }
            first_names.insert(&first_name_key(pool, i), likelihood.clone())?;
        }
    }
    Ok((population_geo, ProxyTables::new(surnames, first_names, proxy_geo)?))
}

/// Generates people and tables, then assigns premiums.
pub fn generate_population(config: &ScenarioConfig) -> Result<Population> {
    config.validate()?;
    let draws: Vec<RegionDraw> =
        (0..config.regions.count).into_par_iter().map(|i| generate_region(config, i)).collect();
    let mut regions = Vec::with_capacity(draws.len());
    let mut records = Vec::with_capacity(config.regions.count * config.regions.size);
    for d in draws {
        regions.push(d.profile);
        records.extend(d.people);
    }
    for (i, r) in records.iter_mut().enumerate() {
        r.id = i as u64 + 1;
    }
    let (population_geo, tables) = build_tables(config, &regions)?;
    let mut pop = Population { labels: config.labels.clone(), records, regions, population_geo, tables };
    assign_premiums(&mut pop, config);
    Ok(pop)
}

/// `base + age + gender + region_effect·deprivation [+ β_race] + noise`.
pub fn assign_premiums(pop: &mut Population, config: &ScenarioConfig) {
    let m = &config.premium;
    let deprivation: std::collections::HashMap<&str, f64> =
        pop.regions.iter().map(|r| (r.key.as_str(), r.deprivation)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(PREMIUM_STREAM);
    for r in pop.records.iter_mut() {
        let mut y = m.base + m.age_effects[r.age_band];
        if r.gender == Gender::M {
            y += m.gender_effect;
        }
        y += m.region_effect * deprivation.get(r.region_key.as_str()).copied().unwrap_or(0.0);
        if m.channel == EffectChannel::Direct {
            y += m.group_effects[r.true_race];
        }
        if m.noise_sd > 0.0 {
            y += m.noise_sd * rng.sample::<f64, _>(StandardNormal);
        }
        r.premium = y;
    }
}
