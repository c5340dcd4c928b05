//! The two audit pipelines: reported vs. proxy regressions with the mixing
//! step in between, and the region-level displacement regressions.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::misclass::{confusion_from_flows, flows_from_labels, shrinkage_report, FlowCounts, ShrinkageReport};
use crate::proxy::{infer_all, max_classify, FallbackPolicy, NameKeys, ProxyTables};
use crate::regress::{fit_cell_means, fit_ols, fit_reference, reference_contrasts, Control, RegressionFit};
use crate::synth::{Gender, PopulationRecord, Ses, AGE_BANDS};

/// Minimum region cells per race for the displacement regressions.
pub const MIN_CELLS: usize = 3;

/// Covariates added to the adjusted regressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ControlSet {
    #[default]
    None,
    /// Age-band dummies and a gender dummy.
    Demo,
    /// `Demo` plus the three region SES columns, entered linearly.
    DemoSes,
}

impl fmt::Display for ControlSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControlSet::None => "none",
            ControlSet::Demo => "demo",
            ControlSet::DemoSes => "demo+ses",
        })
    }
}

impl FromStr for ControlSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(ControlSet::None),
            "demo" => Ok(ControlSet::Demo),
            "demo+ses" | "demo_ses" => Ok(ControlSet::DemoSes),
            other => Err(Error::InvalidConfig {
                field: "controls".into(),
                reason: format!("`{other}` is not one of none, demo, demo+ses"),
            }),
        }
    }
}

pub fn ses_controls(records: &[PopulationRecord]) -> Vec<Control> {
    ["MEDFAMINC", "PPOV", "PUNEMP"]
        .iter()
        .enumerate()
        .map(|(j, name)| Control::new(*name, records.iter().map(|r| r.ses.as_array()[j]).collect()))
        .collect()
}

/// Builds the control columns; the youngest age band is the omitted level.
pub fn build_controls(records: &[PopulationRecord], set: ControlSet) -> Vec<Control> {
    if set == ControlSet::None {
        return Vec::new();
    }
    let mut out: Vec<Control> = (1..AGE_BANDS.len())
        .map(|b| {
            Control::new(
                format!("age_{}", AGE_BANDS[b]),
                records.iter().map(|r| f64::from(u8::from(r.age_band == b))).collect(),
            )
        })
        .collect();
    out.push(Control::new("gender_M", records.iter().map(|r| f64::from(u8::from(r.gender == Gender::M))).collect()));
    if set == ControlSet::DemoSes {
        out.extend(ses_controls(records));
    }
    out
}

/// Reference-coded disparities, with the reference category pinned at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedExp1 {
    pub controls: ControlSet,
    pub reported: Vec<f64>,
    pub mixing: Vec<f64>,
    pub proxy: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Exp1Report {
    pub reference: usize,
    /// Cell means of `y` on reported race.
    pub reported: Vec<f64>,
    /// Cell means of the reported model's fitted values on proxy race.
    pub mixing: Vec<f64>,
    /// Cell means of `y` on proxy race.
    pub proxy: Vec<f64>,
    pub adjusted: Option<AdjustedExp1>,
    pub reported_fit: RegressionFit,
}

fn contrast_vector(fit: &RegressionFit, p: usize) -> Vec<f64> {
    let c = reference_contrasts(fit, p);
    (0..p).map(|j| c.get(&j).copied().unwrap_or(0.0)).collect()
}

fn aligned(records: &[PopulationRecord], proxy_labels: &[usize]) -> Result<()> {
    if records.len() != proxy_labels.len() {
        return Err(Error::Alignment(format!(
            "{} records but {} proxy labels",
            records.len(),
            proxy_labels.len()
        )));
    }
    Ok(())
}

pub fn experiment1(
    records: &[PopulationRecord],
    proxy_labels: &[usize],
    p: usize,
    controls: ControlSet,
    reference: usize,
) -> Result<Exp1Report> {
    aligned(records, proxy_labels)?;
    if reference >= p {
        return Err(Error::CategoryOutOfRange { index: reference, len: p });
    }
    let truth: Vec<usize> = records.iter().map(|r| r.true_race).collect();
    let y: Vec<f64> = records.iter().map(|r| r.premium).collect();

    let reported_fit = fit_cell_means(&truth, p, &y)?;
    let mixing = fit_cell_means(proxy_labels, p, &reported_fit.fitted)?;
    let proxy = fit_cell_means(proxy_labels, p, &y)?;

    let adjusted = if controls == ControlSet::None {
        None
    } else {
        let cols = build_controls(records, controls);
        let rep = fit_reference(&truth, p, reference, &cols, &y)?;
        let mix = fit_reference(proxy_labels, p, reference, &cols, &rep.fitted)?;
        let prx = fit_reference(proxy_labels, p, reference, &cols, &y)?;
        Some(AdjustedExp1 {
            controls,
            reported: contrast_vector(&rep, p),
            mixing: contrast_vector(&mix, p),
            proxy: contrast_vector(&prx, p),
        })
    };
    Ok(Exp1Report {
        reference,
        reported: reported_fit.coefficients.clone(),
        mixing: mixing.coefficients,
        proxy: proxy.coefficients,
        adjusted,
        reported_fit,
    })
}

/// One region × race aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct ZipRaceCell {
    pub region: String,
    pub race: usize,
    /// `n_ik`, reported members.
    pub count: u64,
    /// `ñ_ik`, proxy members.
    pub proxy_count: u64,
    /// `n_ik − n_i n_k / n`: excess over the statewide-share expectation.
    pub deviation: f64,
    /// `n_ik − ñ_ik`.
    pub displacement: i64,
    /// Sum of reported-model residuals over the reported members.
    pub residual_sum: f64,
}

/// Tabulates every (region, race) pair; regions keep first-appearance order.
pub fn zip_aggregate(
    records: &[PopulationRecord],
    proxy_labels: &[usize],
    reported_fit: &RegressionFit,
    p: usize,
) -> Result<Vec<ZipRaceCell>> {
    aligned(records, proxy_labels)?;
    if reported_fit.residuals.len() != records.len() {
        return Err(Error::Alignment(format!(
            "reported fit has {} residuals for {} records",
            reported_fit.residuals.len(),
            records.len()
        )));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut count: Vec<Vec<u64>> = Vec::new();
    let mut proxy: Vec<Vec<u64>> = Vec::new();
    let mut resid: Vec<Vec<f64>> = Vec::new();
    for ((rec, &q), e) in records.iter().zip(proxy_labels).zip(&reported_fit.residuals) {
        if rec.true_race >= p || q >= p {
            return Err(Error::CategoryOutOfRange { index: rec.true_race.max(q), len: p });
        }
        let i = *index.entry(rec.region_key.as_str()).or_insert_with(|| {
            order.push(rec.region_key.as_str());
            count.push(vec![0; p]);
            proxy.push(vec![0; p]);
            resid.push(vec![0.0; p]);
            order.len() - 1
        });
        count[i][rec.true_race] += 1;
        proxy[i][q] += 1;
        resid[i][rec.true_race] += e;
    }
    let n = records.len() as f64;
    let mut totals = vec![0u64; p];
    for c in &count {
        for k in 0..p {
            totals[k] += c[k];
        }
    }
    let mut cells = Vec::with_capacity(order.len() * p);
    for (i, region) in order.iter().enumerate() {
        let n_i: u64 = count[i].iter().sum();
        for k in 0..p {
            cells.push(ZipRaceCell {
                region: region.to_string(),
                race: k,
                count: count[i][k],
                proxy_count: proxy[i][k],
                deviation: count[i][k] as f64 - n_i as f64 * totals[k] as f64 / n,
                displacement: count[i][k] as i64 - proxy[i][k] as i64,
                residual_sum: resid[i][k],
            });
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Exp2Options {
    /// Races to analyze; defaults to the two largest.
    pub races: Option<Vec<usize>>,
    /// Adds an intercept to the residual regression.
    pub residual_intercept: bool,
}

#[derive(Debug, Clone)]
pub struct Exp2Fit {
    /// `r = α₀ + α₁ d [+ SES] + η`: `[α₀, α₁, ...]`.
    pub alpha: Vec<f64>,
    pub alpha_residual_se: f64,
    pub eta: Vec<f64>,
    /// `ε = γ_d d + γ_e η [+ γ₀] + ξ`.
    pub gamma_d: f64,
    pub gamma_e: f64,
    pub gamma_intercept: Option<f64>,
    pub xi: Vec<f64>,
    pub xi_se: f64,
}

impl Exp2Fit {
    pub fn alpha1(&self) -> f64 {
        self.alpha[1]
    }
}

#[derive(Debug, Clone)]
pub struct Exp2Panel {
    pub race: usize,
    pub observations: usize,
    pub baseline: Exp2Fit,
    pub with_ses: Option<Exp2Fit>,
}

#[derive(Debug, Clone)]
pub struct Exp2Report {
    pub panels: Vec<Exp2Panel>,
}

/// `r ~ 1 + d [+ SES columns]`.
pub fn fit_displacement(deviation: &[f64], displacement: &[f64], ses: Option<&[[f64; 3]]>) -> Result<RegressionFit> {
    let n = deviation.len();
    let q = 2 + if ses.is_some() { 3 } else { 0 };
    let mut x = DMatrix::<f64>::zeros(n, q);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = deviation[i];
        if let Some(s) = ses {
            for j in 0..3 {
                x[(i, 2 + j)] = s[i][j];
            }
        }
    }
    fit_ols(&x, displacement)
}

/// `ε ~ d + η`, with an optional trailing intercept column.
pub fn fit_residual_model(deviation: &[f64], eta: &[f64], residual_sum: &[f64], intercept: bool) -> Result<RegressionFit> {
    let n = deviation.len();
    let q = if intercept { 3 } else { 2 };
    let mut x = DMatrix::<f64>::zeros(n, q);
    for i in 0..n {
        x[(i, 0)] = deviation[i];
        x[(i, 1)] = eta[i];
        if intercept {
            x[(i, 2)] = 1.0;
        }
    }
    fit_ols(&x, residual_sum)
}

fn exp2_fit(d: &[f64], r: &[f64], eps: &[f64], ses: Option<&[[f64; 3]]>, intercept: bool) -> Result<Exp2Fit> {
    let first = fit_displacement(d, r, ses)?;
    let second = fit_residual_model(d, &first.residuals, eps, intercept)?;
    Ok(Exp2Fit {
        alpha: first.coefficients.clone(),
        alpha_residual_se: first.residual_se(),
        eta: first.residuals.clone(),
        gamma_d: second.coefficients[0],
        gamma_e: second.coefficients[1],
        gamma_intercept: intercept.then(|| second.coefficients[2]),
        xi: second.residuals.clone(),
        xi_se: second.residual_se(),
    })
}

/// The two races with the most reported members; ties go to the lower index.
pub fn largest_races(cells: &[ZipRaceCell], p: usize, how_many: usize) -> Vec<usize> {
    let mut totals = vec![0u64; p];
    for c in cells {
        totals[c.race] += c.count;
    }
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| totals[b].cmp(&totals[a]).then(a.cmp(&b)));
    order.truncate(how_many);
    order
}

/// Per race, fits the displacement regression and the residual regression,
/// without SES and (when `ses` is given) with the region SES columns.
pub fn experiment2(
    cells: &[ZipRaceCell],
    p: usize,
    ses: Option<&HashMap<String, Ses>>,
    options: &Exp2Options,
) -> Result<Exp2Report> {
    let races = options.races.clone().unwrap_or_else(|| largest_races(cells, p, 2));
    let mut panels = Vec::with_capacity(races.len());
    for race in races {
        if race >= p {
            return Err(Error::CategoryOutOfRange { index: race, len: p });
        }
        let mine: Vec<&ZipRaceCell> = cells.iter().filter(|c| c.race == race).collect();
        if mine.len() < MIN_CELLS {
            return Err(Error::TooFewCells { race, cells: mine.len(), needed: MIN_CELLS });
        }
        let d: Vec<f64> = mine.iter().map(|c| c.deviation).collect();
        let r: Vec<f64> = mine.iter().map(|c| c.displacement as f64).collect();
        let eps: Vec<f64> = mine.iter().map(|c| c.residual_sum).collect();
        let baseline = exp2_fit(&d, &r, &eps, None, options.residual_intercept)?;
        let with_ses = match ses {
            None => None,
            Some(map) => {
                let cols = mine
                    .iter()
                    .map(|c| {
                        map.get(&c.region)
                            .map(Ses::as_array)
                            .ok_or_else(|| Error::Alignment(format!("no SES for region `{}`", c.region)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(exp2_fit(&d, &r, &eps, Some(&cols), options.residual_intercept)?)
            }
        };
        panels.push(Exp2Panel { race, observations: mine.len(), baseline, with_ses });
    }
    Ok(Exp2Report { panels })
}

/// Region → SES, taken from the records.
pub fn region_ses(records: &[PopulationRecord]) -> HashMap<String, Ses> {
    let mut out = HashMap::new();
    for r in records {
        out.entry(r.region_key.clone()).or_insert(r.ses);
    }
    out
}

/// Max-classified proxy race for every record.
pub fn classify_records(records: &[PopulationRecord], tables: &ProxyTables, policy: FallbackPolicy) -> Result<Vec<usize>> {
    let keys: Vec<NameKeys<'_>> = records
        .iter()
        .map(|r| NameKeys { surname: &r.surname_key, first: &r.first_key, region: &r.region_key })
        .collect();
    infer_all(keys, tables, policy).into_iter().map(|r| r.map(|post| max_classify(&post))).collect()
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub exp1: Exp1Report,
    pub flows: FlowCounts,
    pub cells: Vec<ZipRaceCell>,
    pub exp2: Exp2Report,
    pub shrinkage: ShrinkageReport,
}

/// Runs both experiments and the shrinkage diagnostics on one dataset.
pub fn run_audit(
    records: &[PopulationRecord],
    proxy_labels: &[usize],
    p: usize,
    controls: ControlSet,
    reference: usize,
    options: &Exp2Options,
) -> Result<AuditReport> {
    let exp1 = experiment1(records, proxy_labels, p, controls, reference)?;
    let truth: Vec<usize> = records.iter().map(|r| r.true_race).collect();
    let flows = flows_from_labels(&truth, proxy_labels, p)?;
    let cells = zip_aggregate(records, proxy_labels, &exp1.reported_fit, p)?;
    let ses = region_ses(records);
    let exp2 = experiment2(&cells, p, Some(&ses), options)?;
    let c = confusion_from_flows(&flows)?;
    let n: Vec<f64> = flows.true_counts().iter().map(|&x| x as f64).collect();
    let shrinkage = shrinkage_report(&c, &n, &exp1.reported)?;
    Ok(AuditReport { exp1, flows, cells, exp2, shrinkage })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::misclass::mixture_coefficients;
    use crate::synth::{generate_population, EffectChannel, PremiumModel, ScenarioConfig};

    fn record(region: &str, race: usize, premium: f64) -> PopulationRecord {
        PopulationRecord {
            id: 0,
            true_race: race,
            surname_key: String::new(),
            first_key: String::new(),
            region_key: region.into(),
            age_band: 0,
            gender: Gender::F,
            premium,
            ses: Ses { medfaminc: 50_000.0, ppov: 0.1, punemp: 0.05 },
        }
    }

    fn small_population(seed: u64) -> (crate::synth::Population, Vec<usize>) {
        let mut c = ScenarioConfig::new(seed);
        c.regions.count = 30;
        c.regions.size = 300;
        let pop = generate_population(&c).unwrap();
        let proxy = classify_records(&pop.records, &pop.tables, FallbackPolicy::Strict).unwrap();
        (pop, proxy)
    }

    #[test]
    fn identity_proxy_is_a_fixed_point() {
        let (pop, _) = small_population(1);
        let truth = pop.true_labels();
        let r = experiment1(&pop.records, &truth, 5, ControlSet::DemoSes, 4).unwrap();
        assert_eq!(r.reported, r.mixing);
        assert_eq!(r.reported, r.proxy);
        let adj = r.adjusted.unwrap();
        for j in 0..5 {
            assert!((adj.reported[j] - adj.proxy[j]).abs() < 1e-9);
            assert!((adj.reported[j] - adj.mixing[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn mixing_equals_flow_mixture() {
        let (pop, proxy) = small_population(2);
        let r = experiment1(&pop.records, &proxy, 5, ControlSet::None, 4).unwrap();
        let flows = flows_from_labels(&pop.true_labels(), &proxy, 5).unwrap();
        let m = mixture_coefficients(&flows, &r.reported).unwrap();
        for j in 0..5 {
            assert!((r.mixing[j] - m.coefficients[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn majority_pulls_minority_mixing_coefficients() {
        let mut c = ScenarioConfig::new(3);
        c.regions.count = 40;
        c.regions.size = 400;
        c.premium = PremiumModel::flat(100.0, 5);
        c.premium.channel = EffectChannel::Direct;
        c.premium.group_effects = vec![5.0, 8.0, 6.0, 4.0, -10.0];
        c.premium.noise_sd = 5.0;
        let pop = generate_population(&c).unwrap();
        let proxy = classify_records(&pop.records, &pop.tables, FallbackPolicy::Strict).unwrap();
        let r = experiment1(&pop.records, &proxy, 5, ControlSet::None, 4).unwrap();
        let maj = r.reported[4];
        for j in 0..4 {
            let (lo, hi) = if r.reported[j] < maj { (r.reported[j], maj) } else { (maj, r.reported[j]) };
            assert!(r.mixing[j] > lo && r.mixing[j] < hi, "{j}: {} not in ({lo}, {hi})", r.mixing[j]);
        }
    }

    #[test]
    fn alignment_is_checked() {
        let recs = vec![record("a", 0, 1.0), record("a", 1, 2.0)];
        assert!(matches!(experiment1(&recs, &[0], 2, ControlSet::None, 1), Err(Error::Alignment(_))));
    }

    #[test]
    fn deviation_hand_example() {
        // region a: 1000 people, half Black; statewide Black share 0.2
        let mut recs = Vec::new();
        for i in 0..1000 {
            recs.push(record("a", usize::from(i < 500), 0.0));
        }
        for i in 0..4000 {
            recs.push(record("b", usize::from(i < 500), 0.0));
        }
        let truth: Vec<usize> = recs.iter().map(|r| r.true_race).collect();
        let fit = fit_cell_means(&truth, 2, &vec![0.0; recs.len()]).unwrap();
        let cells = zip_aggregate(&recs, &truth, &fit, 2).unwrap();
        let a_black = cells.iter().find(|c| c.region == "a" && c.race == 1).unwrap();
        assert!((a_black.deviation - 300.0).abs() < 1e-9);
        assert!(cells.iter().all(|c| c.displacement == 0));
    }

    #[test]
    fn conservation_per_region() {
        let (pop, proxy) = small_population(4);
        let truth = pop.true_labels();
        let fit = fit_cell_means(&truth, 5, &pop.premiums()).unwrap();
        let cells = zip_aggregate(&pop.records, &proxy, &fit, 5).unwrap();
        for chunk in cells.chunks(5) {
            assert!(chunk.iter().map(|c| c.deviation).sum::<f64>().abs() < 1e-9);
            assert_eq!(chunk.iter().map(|c| c.displacement).sum::<i64>(), 0);
        }
    }

    #[test]
    fn statewide_mix_has_zero_deviation() {
        let mut recs = Vec::new();
        for region in ["a", "b"] {
            for i in 0..10 {
                recs.push(record(region, usize::from(i < 3), 0.0));
            }
        }
        let truth: Vec<usize> = recs.iter().map(|r| r.true_race).collect();
        let fit = fit_cell_means(&truth, 2, &[0.0; 20]).unwrap();
        let cells = zip_aggregate(&recs, &truth, &fit, 2).unwrap();
        assert!(cells.iter().all(|c| c.deviation.abs() < 1e-12));
    }

    fn synthetic_cells(d: &[f64], r: &[f64], eps: &[f64]) -> Vec<ZipRaceCell> {
        (0..d.len())
            .map(|i| ZipRaceCell {
                region: format!("r{i}"),
                race: 0,
                count: 10,
                proxy_count: 10,
                deviation: d[i],
                displacement: r[i] as i64,
                residual_sum: eps[i],
            })
            .collect()
    }

    #[test]
    fn exact_displacement_slope() {
        let d = [-10.0, 5.0, 20.0, 35.0, -40.0];
        let r: Vec<f64> = d.iter().map(|x| 0.2 * x).collect();
        let fit = fit_displacement(&d, &r, None).unwrap();
        assert!((fit.coefficients[1] - 0.2).abs() < 1e-12);
        assert!(fit.coefficients[0].abs() < 1e-12);
        assert!(fit.residuals.iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn exact_residual_model() {
        let d = [-10.0, 5.0, 20.0, 35.0, -40.0, 0.0];
        let r = [-1.0, 2.0, 3.0, 9.0, -9.0, 1.0];
        let first = fit_displacement(&d, &r, None).unwrap();
        let eps: Vec<f64> = d.iter().zip(&first.residuals).map(|(a, b)| 3.0 * a + 5.0 * b).collect();
        let report = experiment2(&synthetic_cells(&d, &r, &eps), 1, None, &Exp2Options { races: Some(vec![0]), ..Default::default() }).unwrap();
        let fit = &report.panels[0].baseline;
        assert!((fit.gamma_d - 3.0).abs() < 1e-9);
        assert!((fit.gamma_e - 5.0).abs() < 1e-9);
        assert!(fit.gamma_intercept.is_none());
    }

    #[test]
    fn residuals_are_orthogonal_to_regressors() {
        let (pop, proxy) = small_population(5);
        let report = run_audit(&pop.records, &proxy, 5, ControlSet::None, 4, &Exp2Options::default()).unwrap();
        for panel in &report.exp2.panels {
            let d: Vec<f64> = report.cells.iter().filter(|c| c.race == panel.race).map(|c| c.deviation).collect();
            for fit in [Some(&panel.baseline), panel.with_ses.as_ref()].into_iter().flatten() {
                for reg in [&d, &fit.eta] {
                    let dot: f64 = reg.iter().zip(&fit.xi).map(|(a, b)| a * b).sum();
                    let scale = reg.iter().map(|a| a * a).sum::<f64>().sqrt() * fit.xi.iter().map(|a| a * a).sum::<f64>().sqrt();
                    assert!(dot.abs() <= 1e-6 * scale.max(1.0));
                }
            }
        }
    }

    #[test]
    fn too_few_cells() {
        let cells = synthetic_cells(&[1.0, 2.0], &[0.0, 1.0], &[0.0, 0.0]);
        assert!(matches!(
            experiment2(&cells, 1, None, &Exp2Options { races: Some(vec![0]), ..Default::default() }),
            Err(Error::TooFewCells { race: 0, cells: 2, needed: 3 })
        ));
    }

    #[test]
    fn largest_races_default() {
        let (pop, proxy) = small_population(6);
        let fit = fit_cell_means(&pop.true_labels(), 5, &pop.premiums()).unwrap();
        let cells = zip_aggregate(&pop.records, &proxy, &fit, 5).unwrap();
        assert_eq!(largest_races(&cells, 5, 2), vec![4, 1]);
    }
}
