//! Subcommand implementations behind the `proxyaudit` binary.
//!
//! Every command returns an [`Output`]: named report files plus a rendering
//! for the terminal. Files open with a comment line carrying the command,
//! a SHA-256 of its configuration and inputs, and the seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use thiserror::Error;

use proxyaudit::audit::{classify_records, run_audit, AuditReport, ControlSet, Exp2Fit, Exp2Options};
use proxyaudit::io;
use proxyaudit::misclass::{
    check_detailed_balance, check_neutrality, confusion_from_flows, expected_bias, expected_counts,
    flows_from_labels, mc_misclassification_oracle, precision_per_predicted_class, roe_expected_beta,
    shrinkage_report, ConfusionMatrix, FlowCounts, ShrinkageReport,
};
use proxyaudit::proxy::{infer_individual, max_classify, FallbackPolicy, NameKeys, ProxyTables};
use proxyaudit::synth::{generate_population, Population, PopulationRecord, ScenarioConfig};
use proxyaudit::CategorySet;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] proxyaudit::Error),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("invalid scenario file {path}: {message}")]
    Scenario { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("{total} rows failed: {}", summarize(.failures))]
    Rows { total: usize, failures: BTreeMap<String, usize>, numerical: bool },
}

fn summarize(failures: &BTreeMap<String, usize>) -> String {
    failures.iter().map(|(k, n)| format!("{k} ×{n}")).collect::<Vec<_>>().join(", ")
}

impl CliError {
    /// 2 for validation failures, 3 for numerical ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Rows { numerical: true, .. } => 3,
            _ => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fallback {
    Strict,
    Degrade,
}

impl From<Fallback> for FallbackPolicy {
    fn from(f: Fallback) -> Self {
        match f {
            Fallback::Strict => FallbackPolicy::Strict,
            Fallback::Degrade => FallbackPolicy::Degrade,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Controls {
    None,
    Demo,
    #[value(name = "demo+ses")]
    DemoSes,
}

impl From<Controls> for ControlSet {
    fn from(c: Controls) -> Self {
        match c {
            Controls::None => ControlSet::None,
            Controls::Demo => ControlSet::Demo,
            Controls::DemoSes => ControlSet::DemoSes,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "proxyaudit", version, about = "Proxy race inference and misclassification-bias audits")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Comma-separated category labels, in column order.
    #[arg(long, global = true)]
    pub labels: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Tolerance for the neutrality and detailed-balance checks.
    #[arg(long, global = true, default_value_t = 1e-9)]
    pub tol: f64,
    /// Directory for report files.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

impl Default for GlobalArgs {
    fn default() -> Self {
        Self { labels: None, seed: None, tol: 1e-9, out: None, format: Format::Table }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TableArgs {
    #[arg(long)]
    pub surnames: PathBuf,
    #[arg(long)]
    pub first_names: PathBuf,
    #[arg(long)]
    pub geo: PathBuf,
    /// Added to every table entry before normalization.
    #[arg(long)]
    pub smoothing: Option<f64>,
    #[arg(long, value_enum, default_value_t = Fallback::Strict)]
    pub fallback: Fallback,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub tables: TableArgs,
    /// Delimited file with surname, first_name and zip_code columns.
    #[arg(long)]
    pub microdata: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ConfusionArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "race_code")]
    pub true_col: String,
    #[arg(long, default_value = "proxy_race")]
    pub pred_col: String,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub confusion: PathBuf,
    /// `category,value` file of true class counts.
    #[arg(long)]
    pub counts: PathBuf,
    /// `category,value` file of group effects.
    #[arg(long)]
    pub beta: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 10_000)]
    pub replicates: usize,
}

#[derive(Debug, Clone, Args)]
pub struct AuditArgs {
    /// Scenario file; without it and without --microdata the default
    /// scenario is generated from --seed.
    #[arg(long, conflicts_with = "microdata")]
    pub config: Option<PathBuf>,
    /// Population-layout microdata; needs the three proxy tables.
    #[arg(long, requires_all = ["surnames", "first_names", "geo"])]
    pub microdata: Option<PathBuf>,
    #[arg(long)]
    pub surnames: Option<PathBuf>,
    #[arg(long)]
    pub first_names: Option<PathBuf>,
    #[arg(long)]
    pub geo: Option<PathBuf>,
    #[arg(long)]
    pub smoothing: Option<f64>,
    #[arg(long, value_enum, default_value_t = Fallback::Strict)]
    pub fallback: Fallback,
    #[arg(long, value_enum, default_value_t = Controls::None)]
    pub controls: Controls,
    /// Reference category for adjusted models; defaults to the largest.
    #[arg(long)]
    pub reference: Option<String>,
    /// Races for the region-level regressions; defaults to the two largest.
    #[arg(long)]
    pub races: Option<String>,
    #[arg(long)]
    pub residual_intercept: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Posterior race probabilities for every microdata row.
    Infer(InferArgs),
    /// Appends the max-classified proxy race to the microdata.
    Classify(InferArgs),
    /// Flow counts, confusion matrix and per-row accuracy from two label columns.
    Confusion(ConfusionArgs),
    /// Expected proxy coefficients and bias for a confusion matrix.
    Bias(ModelArgs),
    /// Variance-shrinkage diagnostics.
    Shrinkage(ModelArgs),
    /// Both audit experiments end to end.
    Audit(AuditArgs),
    /// Monte Carlo check of the expectation identities.
    Simulate(SimulateArgs),
    /// Writes a synthetic population and its proxy tables.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputFile {
    pub name: String,
    pub contents: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Output {
    pub files: Vec<OutputFile>,
    pub table: String,
    /// Name of the file echoed to stdout under `--format csv`.
    pub primary: String,
}

impl Output {
    pub fn file(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|f| f.name == name).map(|f| f.contents.as_str())
    }

    pub fn render(&self, format: Format) -> &str {
        match format {
            Format::Table => &self.table,
            Format::Csv => self.file(&self.primary).unwrap_or_default(),
        }
    }

    pub fn write_to(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir).map_err(|e| file_error(dir, e))?;
        for f in &self.files {
            let path = dir.join(&f.name);
            fs::write(&path, &f.contents).map_err(|e| file_error(&path, e))?;
        }
        Ok(())
    }
}

fn file_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::File { path: path.to_path_buf(), message: e.to_string() }
}

/// Hashes everything that determines a command's output.
struct Fingerprint {
    command: &'static str,
    hasher: Sha256,
    seed: Option<u64>,
}

impl Fingerprint {
    fn new(command: &'static str, labels: &CategorySet) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(command.as_bytes());
        hasher.update(labels.labels().join(",").as_bytes());
        Self { command, hasher, seed: None }
    }

    fn add(&mut self, key: &str, value: impl AsRef<[u8]>) {
        let value = value.as_ref();
        self.hasher.update(key.as_bytes());
        self.hasher.update((value.len() as u64).to_le_bytes());
        self.hasher.update(value);
    }

    fn header(&self) -> String {
        let digest = self.hasher.clone().finalize();
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        format!("# proxyaudit {} config_sha256={hex} seed={seed}\n", self.command)
    }
}

struct Builder {
    fp: Fingerprint,
    files: Vec<(String, String)>,
}

impl Builder {
    fn new(command: &'static str, labels: &CategorySet) -> Self {
        Self { fp: Fingerprint::new(command, labels), files: Vec::new() }
    }

    fn read(&mut self, path: &Path) -> CliResult<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| file_error(path, e))?;
        self.fp.add("input", &bytes);
        Ok(bytes)
    }

    fn file(&mut self, name: &str, contents: impl FnOnce(&mut Vec<u8>) -> proxyaudit::Result<()>) -> CliResult<()> {
        let mut buf = Vec::new();
        contents(&mut buf)?;
        self.files.push((name.to_string(), String::from_utf8(buf).expect("utf-8 output")));
        Ok(())
    }

    fn finish(self, table: String, primary: &str) -> Output {
        let header = self.fp.header();
        Output {
            files: self
                .files
                .into_iter()
                .map(|(name, body)| OutputFile { name, contents: format!("{header}{body}") })
                .collect(),
            table,
            primary: primary.to_string(),
        }
    }
}

fn source(path: &Path) -> String {
    path.display().to_string()
}

pub fn labels_of(global: &GlobalArgs) -> CliResult<CategorySet> {
    Ok(match &global.labels {
        Some(list) => CategorySet::parse(list)?,
        None => CategorySet::default(),
    })
}

/// Aligned plain-text table.
pub fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (c, cell) in r.iter().enumerate().take(cols) {
            width[c] = width[c].max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (c, cell) in cells.iter().enumerate() {
            if c > 0 {
                s.push_str("  ");
            }
            if c == 0 {
                let _ = write!(s, "{cell:<w$}", w = width[c]);
            } else {
                let _ = write!(s, "{cell:>w$}", w = width[c]);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    let total: usize = width.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

fn strings<I: IntoIterator<Item = S>, S: ToString>(items: I) -> Vec<String> {
    items.into_iter().map(|s| s.to_string()).collect()
}

fn f3(x: f64) -> String {
    format!("{x:.3}")
}

fn csv_text(header: &[&str], rows: &[Vec<String>]) -> proxyaudit::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(proxyaudit::Error::from)?;
    for r in rows {
        w.write_record(r).map_err(proxyaudit::Error::from)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| proxyaudit::Error::Io(e.to_string()))?).expect("utf-8"))
}

fn push_csv(b: &mut Builder, name: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let text = csv_text(header, rows)?;
    b.file(name, |buf| {
        buf.extend_from_slice(text.as_bytes());
        Ok(())
    })
}

fn load_tables(b: &mut Builder, labels: &CategorySet, t: &TableArgs) -> CliResult<ProxyTables> {
    load_table_paths(b, labels, &t.surnames, &t.first_names, &t.geo, t.smoothing)
}

fn load_table_paths(
    b: &mut Builder,
    labels: &CategorySet,
    surnames: &Path,
    first_names: &Path,
    geo: &Path,
    smoothing: Option<f64>,
) -> CliResult<ProxyTables> {
    let s = io::read_surname_table(b.read(surnames)?.as_slice(), &source(surnames), labels)?;
    let f = io::read_first_name_table(b.read(first_names)?.as_slice(), &source(first_names), labels)?;
    let g = io::read_geo_table(b.read(geo)?.as_slice(), &source(geo), labels)?;
    let tables = ProxyTables::new(s, f, g)?;
    Ok(match smoothing {
        Some(eps) if eps < 0.0 || !eps.is_finite() => {
            return Err(CliError::Usage(format!("--smoothing must be a nonnegative number, got {eps}")))
        }
        Some(eps) => {
            b.fp.add("smoothing", eps.to_le_bytes());
            tables.smoothed(eps)
        }
        None => tables,
    })
}

fn infer_rows(
    rows: &[io::MicroRow],
    tables: &ProxyTables,
    policy: FallbackPolicy,
) -> CliResult<Vec<proxyaudit::proxy::ProxyPosterior>> {
    let mut failures = BTreeMap::new();
    let mut numerical = false;
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        let keys = NameKeys { surname: &r.surname, first: &r.first_name, region: &r.region };
        match infer_individual(keys, tables, policy) {
            Ok(p) => out.push(p),
            Err(e) => {
                numerical |= e.is_numerical();
                *failures.entry(e.to_string()).or_insert(0) += 1;
            }
        }
    }
    if failures.is_empty() {
        Ok(out)
    } else {
        Err(CliError::Rows { total: failures.values().sum(), failures, numerical })
    }
}

pub fn cmd_infer(global: &GlobalArgs, args: &InferArgs) -> CliResult<Output> {
    let labels = labels_of(global)?;
    let mut b = Builder::new("infer", &labels);
    b.fp.add("fallback", format!("{:?}", args.tables.fallback));
    let tables = load_tables(&mut b, &labels, &args.tables)?;
    let rows = io::read_microdata(b.read(&args.microdata)?.as_slice(), &source(&args.microdata))?;
    let posts = infer_rows(&rows, &tables, args.tables.fallback.into())?;

    let mut header = vec!["id".to_string()];
    header.extend(labels.labels().iter().cloned());
    header.extend(strings(["mode", "argmax"]));
    let mut csv_rows = Vec::with_capacity(rows.len());
    let mut shown = Vec::new();
    for (r, post) in rows.iter().zip(&posts) {
        let mut row = vec![r.id.clone()];
        row.extend(post.probs.iter().map(|x| io::fmt_float(*x)));
        row.push(post.mode.to_string());
        row.push(labels.label(max_classify(post)).to_string());
        let mut disp = vec![r.id.clone()];
        disp.extend(post.probs.iter().map(|x| format!("{x:.4}")));
        disp.push(post.mode.to_string());
        disp.push(labels.label(max_classify(post)).to_string());
        csv_rows.push(row);
        shown.push(disp);
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    push_csv(&mut b, "posteriors.csv", &header_refs, &csv_rows)?;
    Ok(b.finish(render_table(&header, &shown), "posteriors.csv"))
}

pub fn cmd_classify(global: &GlobalArgs, args: &InferArgs) -> CliResult<Output> {
    let labels = labels_of(global)?;
    let mut b = Builder::new("classify", &labels);
    b.fp.add("fallback", format!("{:?}", args.tables.fallback));
    let tables = load_tables(&mut b, &labels, &args.tables)?;
    let bytes = b.read(&args.microdata)?;
    let rows = io::read_microdata(bytes.as_slice(), &source(&args.microdata))?;
    let posts = infer_rows(&rows, &tables, args.tables.fallback.into())?;
    let proxy: Vec<String> = posts.iter().map(|p| labels.label(max_classify(p)).to_string()).collect();
    let src = source(&args.microdata);
    b.file("classified.csv", |buf| io::append_column(bytes.as_slice(), &src, buf, "proxy_race", &proxy))?;

    let mut counts = vec![0usize; labels.len()];
    for p in &posts {
        counts[max_classify(p)] += 1;
    }
    let rows: Vec<Vec<String>> =
        (0..labels.len()).map(|k| vec![labels.label(k).to_string(), counts[k].to_string()]).collect();
    Ok(b.finish(render_table(&strings(["proxy_race", "rows"]), &rows), "classified.csv"))
}

/// Confusion report layout: prediction rows, reference columns, row sums and per-row
/// accuracy, then a row of column sums.
fn flow_layout(labels: &CategorySet, flows: &FlowCounts, accuracy: &[f64]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["predicted".to_string()];
    header.extend(labels.labels().iter().cloned());
    header.extend(strings(["total", "accuracy_pct"]));
    let pred = flows.predicted_counts();
    let mut rows: Vec<Vec<String>> = flows
        .rows()
        .iter()
        .enumerate()
        .map(|(j, row)| {
            let mut r = vec![labels.label(j).to_string()];
            r.extend(row.iter().map(u64::to_string));
            r.push(pred[j].to_string());
            r.push(format!("{:.1}", accuracy[j] * 100.0));
            r
        })
        .collect();
    let mut total = vec!["total".to_string()];
    total.extend(flows.true_counts().iter().map(u64::to_string));
    total.push(flows.total().to_string());
    total.push(String::new());
    rows.push(total);
    (header, rows)
}

pub fn cmd_confusion(global: &GlobalArgs, args: &ConfusionArgs) -> CliResult<Output> {
    let labels = labels_of(global)?;
    let mut b = Builder::new("confusion", &labels);
    b.fp.add("columns", format!("{}|{}", args.true_col, args.pred_col));
    let bytes = b.read(&args.input)?;
    let (truth, pred) =
        io::read_label_pairs(bytes.as_slice(), &source(&args.input), &labels, &args.true_col, &args.pred_col)?;
    let flows = flows_from_labels(&truth, &pred, labels.len())?;
    let accuracy = precision_per_predicted_class(&flows)?;
    let c = confusion_from_flows(&flows)?;

    let (header, rows) = flow_layout(&labels, &flows, &accuracy);
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    push_csv(&mut b, "table.csv", &refs, &rows)?;
    b.file("flows.csv", |buf| io::write_flows(buf, &labels, &flows))?;
    b.file("confusion.csv", |buf| io::write_confusion(buf, &labels, &c))?;
    let pct: Vec<f64> = accuracy.iter().map(|a| a * 100.0).collect();
    b.file("precision.csv", |buf| io::write_vector(buf, &labels, "accuracy_pct", &pct))?;
    Ok(b.finish(render_table(&header, &rows), "table.csv"))
}

struct Model {
    c: ConfusionMatrix,
    n: Vec<f64>,
    beta: Vec<f64>,
}

fn load_model(b: &mut Builder, labels: &CategorySet, m: &ModelArgs) -> CliResult<Model> {
    let c = io::read_confusion(b.read(&m.confusion)?.as_slice(), &source(&m.confusion), labels)?;
    let n = io::read_vector(b.read(&m.counts)?.as_slice(), &source(&m.counts), labels)?;
    let beta = io::read_vector(b.read(&m.beta)?.as_slice(), &source(&m.beta), labels)?;
    Ok(Model { c, n, beta })
}

fn flag(ok: bool) -> String {
    ok.to_string()
}

pub fn cmd_bias(global: &GlobalArgs, args: &ModelArgs) -> CliResult<Output> {
    let labels = labels_of(global)?;
    let mut b = Builder::new("bias", &labels);
    b.fp.add("tol", global.tol.to_le_bytes());
    let m = load_model(&mut b, &labels, args)?;
    let cn = expected_counts(&m.c, &m.n)?;
    let roe = roe_expected_beta(&m.c, &m.n, &m.beta)?;
    let bias = expected_bias(&m.c, &m.n, &m.beta)?;
    let neutrality = check_neutrality(&m.c, &m.n, global.tol)?;

    let header = ["category", "count", "expected_count", "beta", "expected_beta", "bias", "neutral_form_bias"];
    let mut rows = Vec::new();
    let mut shown = Vec::new();
    for k in 0..labels.len() {
        let nf = bias.neutral_form.as_ref().map(|v| v[k]);
        rows.push(vec![
            labels.label(k).to_string(),
            io::fmt_float(m.n[k]),
            io::fmt_float(cn[k]),
            io::fmt_float(m.beta[k]),
            io::fmt_float(roe[k]),
            io::fmt_float(bias.bias[k]),
            nf.map(io::fmt_float).unwrap_or_default(),
        ]);
        shown.push(vec![
            labels.label(k).to_string(),
            format!("{:.1}", m.n[k]),
            format!("{:.1}", cn[k]),
            f3(m.beta[k]),
            f3(roe[k]),
            f3(bias.bias[k]),
            nf.map(f3).unwrap_or_else(|| "-".into()),
        ]);
    }
    push_csv(&mut b, "bias.csv", &header, &rows)?;
    let checks = vec![
        vec!["neutral".to_string(), flag(neutrality.neutral), io::fmt_float(neutrality.max_deviation)],
        vec![
            "neutral_form_agrees".to_string(),
            bias.forms_agree().map_or_else(|| "n/a".into(), flag),
            bias.form_discrepancy.map(io::fmt_float).unwrap_or_default(),
        ],
    ];
    push_csv(&mut b, "checks.csv", &["check", "passed", "value"], &checks)?;

    let mut table = render_table(&strings(header), &shown);
    if neutrality.neutral {
        let _ = writeln!(table, "neutrality check passed (max deviation {:.3e})", neutrality.max_deviation);
    } else {
        let _ = writeln!(table, "neutrality check FAILED (max deviation {:.3e})", neutrality.max_deviation);
    }
    Ok(b.finish(table, "bias.csv"))
}

fn shrinkage_rows(r: &ShrinkageReport) -> Vec<Vec<String>> {
    let mut rows = vec![
        vec!["ss_true".to_string(), io::fmt_float(r.ss_true)],
        vec!["ss_proxy".to_string(), io::fmt_float(r.ss_proxy)],
        vec!["shrinks".to_string(), flag(r.shrinks())],
        vec!["neutral".to_string(), flag(r.neutral)],
        vec!["reversible".to_string(), flag(r.reversible)],
    ];
    if let Some(ev) = &r.eigenvalues {
        for (i, l) in ev.iter().enumerate() {
            rows.push(vec![format!("eigenvalue_{}", i + 1), io::fmt_float(*l)]);
        }
    }
    if let Some(ok) = r.spectrum_ok {
        rows.push(vec!["spectrum_ok".to_string(), flag(ok)]);
    }
    rows
}

pub fn cmd_shrinkage(global: &GlobalArgs, args: &ModelArgs) -> CliResult<Output> {
    let labels = labels_of(global)?;
    let mut b = Builder::new("shrinkage", &labels);
    b.fp.add("tol", global.tol.to_le_bytes());
    let m = load_model(&mut b, &labels, args)?;
    let report = shrinkage_report(&m.c, &m.n, &m.beta)?;
    let balance = check_detailed_balance(&m.c, &m.n, global.tol)?;
    let mut rows = shrinkage_rows(&report);
    rows.push(vec!["detailed_balance_violation".to_string(), io::fmt_float(balance.max_violation)]);
    rows.push(vec!["similarity_symmetric".to_string(), flag(balance.similarity_symmetric)]);
    push_csv(&mut b, "shrinkage.csv", &["quantity", "value"], &rows)?;
    let sim: Vec<Vec<String>> = report
        .similarity
        .iter()
        .enumerate()
        .map(|(j, row)| {
            let mut r = vec![labels.label(j).to_string()];
            r.extend(row.iter().map(|x| io::fmt_float(*x)));
            r
        })
        .collect();
    let mut sim_header = vec!["row"];
    sim_header.extend(labels.labels().iter().map(String::as_str));
    push_csv(&mut b, "similarity.csv", &sim_header, &sim)?;
    Ok(b.finish(render_table(&strings(["quantity", "value"]), &rows), "shrinkage.csv"))
}

fn integral_counts(n: &[f64]) -> CliResult<Vec<u64>> {
    n.iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 && x.is_finite() {
                Ok(x as u64)
            } else {
                Err(CliError::Usage(format!("counts must be nonnegative integers, got {x}")))
            }
        })
        .collect()
}

fn require_seed(global: &GlobalArgs, command: &str) -> CliResult<u64> {
    global.seed.ok_or_else(|| CliError::Usage(format!("`{command}` is stochastic and needs --seed")))
}

pub fn cmd_simulate(global: &GlobalArgs, args: &SimulateArgs) -> CliResult<Output> {
    let labels = labels_of(global)?;
    let seed = require_seed(global, "simulate")?;
    let mut b = Builder::new("simulate", &labels);
    b.fp.seed = Some(seed);
    b.fp.add("seed", seed.to_le_bytes());
    b.fp.add("noise", args.noise.to_le_bytes());
    b.fp.add("replicates", (args.replicates as u64).to_le_bytes());
    let m = load_model(&mut b, &labels, &args.model)?;
    let n = integral_counts(&m.n)?;
    let roe = roe_expected_beta(&m.c, &m.n, &m.beta)?;
    let cn = expected_counts(&m.c, &m.n)?;
    let s = mc_misclassification_oracle(&m.c, &n, &m.beta, args.noise, args.replicates, seed)?;

    let header = ["category", "expected_beta", "mc_mean", "mc_variance", "mc_se", "deviation", "expected_count", "mc_count_mean", "mc_count_se"];
    let mut rows = Vec::new();
    let mut shown = Vec::new();
    for k in 0..labels.len() {
        let dev = s.beta.mean[k] - roe[k];
        rows.push(vec![
            labels.label(k).to_string(),
            io::fmt_float(roe[k]),
            io::fmt_float(s.beta.mean[k]),
            io::fmt_float(s.beta.variance[k]),
            io::fmt_float(s.beta.standard_error[k]),
            io::fmt_float(dev),
            io::fmt_float(cn[k]),
            io::fmt_float(s.counts.mean[k]),
            io::fmt_float(s.counts.standard_error[k]),
        ]);
        shown.push(vec![
            labels.label(k).to_string(),
            format!("{:.4}", roe[k]),
            format!("{:.4}", s.beta.mean[k]),
            format!("{:.3e}", s.beta.variance[k]),
            format!("{:.3e}", s.beta.standard_error[k]),
            format!("{dev:+.2e}"),
            format!("{:.1}", cn[k]),
            format!("{:.2}", s.counts.mean[k]),
            format!("{:.3}", s.counts.standard_error[k]),
        ]);
    }
    push_csv(&mut b, "simulate.csv", &header, &rows)?;
    let mut table = render_table(&strings(header), &shown);
    let _ = writeln!(table, "replicates used {}, skipped {}", s.used, s.skipped);
    Ok(b.finish(table, "simulate.csv"))
}

fn load_scenario(b: &mut Builder, global: &GlobalArgs, path: Option<&Path>) -> CliResult<ScenarioConfig> {
    let mut config = match path {
        Some(p) => {
            let bytes = b.read(p)?;
            let text = String::from_utf8(bytes)
                .map_err(|e| CliError::Scenario { path: p.to_path_buf(), message: e.to_string() })?;
            toml::from_str::<ScenarioConfig>(&text)
                .map_err(|e| CliError::Scenario { path: p.to_path_buf(), message: e.to_string() })?
        }
        None => ScenarioConfig::new(require_seed(global, "the default scenario")?),
    };
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    if global.labels.is_some() {
        let labels = labels_of(global)?;
        if labels != config.labels {
            return Err(proxyaudit::Error::LabelMismatch {
                expected: labels.labels().to_vec(),
                found: config.labels.labels().to_vec(),
            }
            .into());
        }
    }
    config.validate()?;
    b.fp.seed = Some(config.seed);
    b.fp.add("seed", config.seed.to_le_bytes());
    Ok(config)
}

pub fn cmd_generate(global: &GlobalArgs, args: &GenerateArgs) -> CliResult<Output> {
    let mut probe = Builder::new("generate", &CategorySet::default());
    let config = load_scenario(&mut probe, global, args.config.as_deref())?;
    let mut b = Builder { fp: Fingerprint::new("generate", &config.labels), files: Vec::new() };
    b.fp.hasher.update(probe.fp.hasher.clone().finalize());
    b.fp.seed = Some(config.seed);
    let pop = generate_population(&config)?;
    let labels = pop.labels.clone();
    b.file("population.csv", |buf| io::write_population(buf, &labels, &pop.records))?;
    b.file("surnames.csv", |buf| io::write_surname_table(buf, &labels, &pop.tables.surnames))?;
    b.file("first_names.csv", |buf| io::write_first_name_table(buf, &labels, &pop.tables.first_names))?;
    b.file("geo.csv", |buf| io::write_geo_table(buf, &labels, &pop.tables.geo))?;
    b.file("population_geo.csv", |buf| io::write_geo_table(buf, &labels, &pop.population_geo))?;
    let rows = region_rows(&pop);
    let mut header = vec!["zip_code", "homogeneity", "dominant", "deprivation", "MEDFAMINC", "PPOV", "PUNEMP"];
    header.extend(labels.labels().iter().map(String::as_str));
    push_csv(&mut b, "regions.csv", &header, &rows)?;

    let totals = pop.race_totals();
    let summary: Vec<Vec<String>> = (0..labels.len())
        .map(|k| vec![labels.label(k).to_string(), totals[k].to_string()])
        .collect();
    let mut table = render_table(&strings(["race", "people"]), &summary);
    let _ = writeln!(table, "{} regions, {} records", pop.regions.len(), pop.records.len());
    Ok(b.finish(table, "regions.csv"))
}

fn region_rows(pop: &Population) -> Vec<Vec<String>> {
    pop.regions
        .iter()
        .map(|r| {
            let mut row = vec![
                r.key.clone(),
                io::fmt_float(r.homogeneity),
                pop.labels.label(r.dominant).to_string(),
                io::fmt_float(r.deprivation),
                io::fmt_float(r.ses.medfaminc),
                io::fmt_float(r.ses.ppov),
                io::fmt_float(r.ses.punemp),
            ];
            row.extend(r.counts.iter().map(u64::to_string));
            row
        })
        .collect()
}

fn parse_races(labels: &CategorySet, list: &str) -> CliResult<Vec<usize>> {
    list.split(',').map(|l| labels.require(l).map_err(CliError::from)).collect()
}

pub fn cmd_audit(global: &GlobalArgs, args: &AuditArgs) -> CliResult<Output> {
    let (mut b, labels, records, proxy) = match &args.microdata {
        Some(path) => {
            let labels = labels_of(global)?;
            let mut b = Builder::new("audit", &labels);
            let (s, f, g) = match (&args.surnames, &args.first_names, &args.geo) {
                (Some(s), Some(f), Some(g)) => (s, f, g),
                _ => return Err(CliError::Usage("--microdata needs --surnames, --first-names and --geo".into())),
            };
            let tables = load_table_paths(&mut b, &labels, s, f, g, args.smoothing)?;
            let records = io::read_population(b.read(path)?.as_slice(), &source(path), &labels)?;
            let proxy = classify_records(&records, &tables, args.fallback.into())?;
            (b, labels, records, proxy)
        }
        None => {
            let mut probe = Builder::new("audit", &CategorySet::default());
            let config = load_scenario(&mut probe, global, args.config.as_deref())?;
            let labels = config.labels.clone();
            let mut b = Builder { fp: Fingerprint::new("audit", &labels), files: Vec::new() };
            b.fp.hasher.update(probe.fp.hasher.clone().finalize());
            b.fp.seed = Some(config.seed);
            let pop = generate_population(&config)?;
            let tables = match args.smoothing {
                Some(eps) => pop.tables.smoothed(eps),
                None => pop.tables.clone(),
            };
            let proxy = classify_records(&pop.records, &tables, args.fallback.into())?;
            (b, labels, pop.records, proxy)
        }
    };
    b.fp.add("controls", ControlSet::from(args.controls).to_string());
    b.fp.add("reference", args.reference.clone().unwrap_or_default());
    b.fp.add("races", args.races.clone().unwrap_or_default());
    b.fp.add("residual_intercept", [u8::from(args.residual_intercept)]);
    let p = labels.len();
    let reference = match &args.reference {
        Some(r) => labels.require(r)?,
        None => largest(&records, p),
    };
    let options = Exp2Options {
        races: args.races.as_deref().map(|l| parse_races(&labels, l)).transpose()?,
        residual_intercept: args.residual_intercept,
    };
    let report = run_audit(&records, &proxy, p, args.controls.into(), reference, &options)?;
    audit_output(b, &labels, &report)
}

fn largest(records: &[PopulationRecord], p: usize) -> usize {
    let mut totals = vec![0usize; p];
    for r in records {
        totals[r.true_race] += 1;
    }
    (0..p).rev().max_by_key(|&k| totals[k]).unwrap_or(0)
}

fn exp2_rows(labels: &CategorySet, race: usize, spec: &str, f: &Exp2Fit, rows: &mut Vec<Vec<String>>) {
    let mut names = vec!["alpha0".to_string(), "alpha1".to_string()];
    if f.alpha.len() > 2 {
        names.extend(strings(["alpha_MEDFAMINC", "alpha_PPOV", "alpha_PUNEMP"]));
    }
    let mut push = |name: &str, v: f64| {
        rows.push(vec![labels.label(race).to_string(), spec.to_string(), name.to_string(), io::fmt_float(v)]);
    };
    for (name, v) in names.iter().zip(&f.alpha) {
        push(name, *v);
    }
    push("alpha_residual_se", f.alpha_residual_se);
    push("gamma_d", f.gamma_d);
    push("gamma_e", f.gamma_e);
    if let Some(g0) = f.gamma_intercept {
        push("gamma0", g0);
    }
    push("xi_se", f.xi_se);
}

fn audit_output(mut b: Builder, labels: &CategorySet, report: &AuditReport) -> CliResult<Output> {
    let p = labels.len();
    let e1 = &report.exp1;
    let mut rows = Vec::new();
    for (model, values) in [("reported", &e1.reported), ("mixing", &e1.mixing), ("proxy", &e1.proxy)] {
        for k in 0..p {
            rows.push(vec![model.to_string(), labels.label(k).to_string(), "cell_mean".to_string(), io::fmt_float(values[k])]);
        }
    }
    if let Some(adj) = &e1.adjusted {
        let coef = format!("vs_{}_{}", labels.label(e1.reference), adj.controls);
        for (model, values) in [("reported", &adj.reported), ("mixing", &adj.mixing), ("proxy", &adj.proxy)] {
            for k in (0..p).filter(|&k| k != e1.reference) {
                rows.push(vec![model.to_string(), labels.label(k).to_string(), coef.clone(), io::fmt_float(values[k])]);
            }
        }
    }
    push_csv(&mut b, "exp1.csv", &["model", "category", "coefficient", "value"], &rows)?;

    let mut rows2 = Vec::new();
    for panel in &report.exp2.panels {
        exp2_rows(labels, panel.race, "baseline", &panel.baseline, &mut rows2);
        if let Some(f) = &panel.with_ses {
            exp2_rows(labels, panel.race, "ses", f, &mut rows2);
        }
    }
    push_csv(&mut b, "exp2.csv", &["race", "model", "coefficient", "value"], &rows2)?;

    let cells: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| {
            vec![
                c.region.clone(),
                labels.label(c.race).to_string(),
                c.count.to_string(),
                c.proxy_count.to_string(),
                io::fmt_float(c.deviation),
                c.displacement.to_string(),
                io::fmt_float(c.residual_sum),
            ]
        })
        .collect();
    push_csv(&mut b, "cells.csv", &["zip_code", "race", "n", "proxy_n", "deviation", "displacement", "residual_sum"], &cells)?;
    b.file("flows.csv", |buf| io::write_flows(buf, labels, &report.flows))?;
    push_csv(&mut b, "shrinkage.csv", &["quantity", "value"], &shrinkage_rows(&report.shrinkage))?;

    let mut header = strings(["category", "reported", "mixing", "proxy"]);
    let adj = e1.adjusted.as_ref();
    if adj.is_some() {
        header.extend(strings(["adj_reported", "adj_mixing", "adj_proxy"]));
    }
    let shown: Vec<Vec<String>> = (0..p)
        .map(|k| {
            let mut r = vec![labels.label(k).to_string(), f3(e1.reported[k]), f3(e1.mixing[k]), f3(e1.proxy[k])];
            if let Some(a) = adj {
                r.extend([f3(a.reported[k]), f3(a.mixing[k]), f3(a.proxy[k])]);
            }
            r
        })
        .collect();
    let mut table = render_table(&header, &shown);
    table.push('\n');
    let panel_rows: Vec<Vec<String>> = report
        .exp2
        .panels
        .iter()
        .map(|panel| {
            let ses = panel.with_ses.as_ref();
            vec![
                labels.label(panel.race).to_string(),
                panel.observations.to_string(),
                format!("{:.4}", panel.baseline.alpha1()),
                ses.map_or_else(|| "-".into(), |f| format!("{:.4}", f.alpha1())),
                f3(panel.baseline.gamma_e),
                ses.map_or_else(|| "-".into(), |f| f3(f.gamma_e)),
            ]
        })
        .collect();
    table.push_str(&render_table(&strings(["race", "cells", "alpha1", "alpha1_ses", "gamma_e", "gamma_e_ses"]), &panel_rows));
    Ok(b.finish(table, "exp1.csv"))
}

/// Dispatches a parsed command line.
pub fn run(cli: &Cli) -> CliResult<Output> {
    let g = &cli.global;
    match &cli.command {
        Command::Infer(a) => cmd_infer(g, a),
        Command::Classify(a) => cmd_classify(g, a),
        Command::Confusion(a) => cmd_confusion(g, a),
        Command::Bias(a) => cmd_bias(g, a),
        Command::Shrinkage(a) => cmd_shrinkage(g, a),
        Command::Audit(a) => cmd_audit(g, a),
        Command::Simulate(a) => cmd_simulate(g, a),
        Command::Generate(a) => cmd_generate(g, a),
    }
}
