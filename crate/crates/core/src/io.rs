//! Delimited-text readers and writers with labeled headers.
//!
//! Lines starting with `#` are comments. Floats are written with 17
//! significant digits so a read-write-read cycle reproduces every bit.

use std::io::{Read, Write};

use csv::{ReaderBuilder, StringRecord, Writer};

use crate::error::{Error, Result};
use crate::labels::CategorySet;
use crate::misclass::{ConfusionMatrix, FlowCounts};
use crate::proxy::{FirstNameTable, GeoTable, SurnameTable};
use crate::synth::{age_band_index, Gender, PopulationRecord, Ses, AGE_BANDS};

/// Column names of the population / microdata layout.
pub const POPULATION_COLUMNS: [&str; 11] = [
    "id",
    "zip_code",
    "race_code",
    "surname",
    "first_name",
    "gender_code",
    "age_range",
    "average_premium",
    "MEDFAMINC",
    "PPOV",
    "PUNEMP",
];

/// `%.17g`: 17 significant digits, trailing zeros dropped.
pub fn fmt_float(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "NaN".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..17).contains(&exp) {
        let m = trim_zeros(mantissa);
        return format!("{m}e{exp}");
    }
    let decimals = (16 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

struct Table {
    source: String,
    header: StringRecord,
    rows: Vec<(usize, StringRecord)>,
}

fn load<R: Read>(reader: R, source: &str) -> Result<Table> {
    let mut rdr = ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::parse(source, 1, e.to_string()))?.clone();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(source, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        rows.push((line, rec));
    }
    Ok(Table { source: source.to_string(), header, rows })
}

impl Table {
    fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse(&self.source, 1, format!("missing column `{name}`")))
    }

    /// Checks that the header is `<key>,<labels...>`, each label optionally
    /// wrapped in the given decoration.
    fn expect_labels(&self, labels: &CategorySet, decor: Decor) -> Result<()> {
        let found: Vec<String> = self.header.iter().skip(1).map(|h| decor.strip(h).to_string()).collect();
        if found != labels.labels() {
            return Err(Error::LabelMismatch { expected: labels.labels().to_vec(), found });
        }
        Ok(())
    }

    fn float(&self, line: usize, field: &str) -> Result<f64> {
        field.parse::<f64>().map_err(|e| Error::parse(&self.source, line, format!("`{field}`: {e}")))
    }

    fn uint(&self, line: usize, field: &str) -> Result<u64> {
        field.parse::<u64>().map_err(|e| Error::parse(&self.source, line, format!("`{field}`: {e}")))
    }

    fn keyed_floats(&self, labels: &CategorySet, decor: Decor) -> Result<Vec<(usize, String, Vec<f64>)>> {
        self.expect_labels(labels, decor)?;
        self.rows
            .iter()
            .map(|(line, rec)| {
                let values =
                    rec.iter().skip(1).map(|f| self.float(*line, f)).collect::<Result<Vec<f64>>>()?;
                Ok((*line, rec.get(0).unwrap_or_default().to_string(), values))
            })
            .collect()
    }

    /// Rows keyed by label, required in label order.
    fn square<T>(&self, labels: &CategorySet, parse: impl Fn(usize, &str) -> Result<T>) -> Result<Vec<Vec<T>>> {
        self.expect_labels(labels, Decor::BARE)?;
        let keys: Vec<String> = self.rows.iter().map(|(_, r)| r.get(0).unwrap_or_default().to_string()).collect();
        if keys != labels.labels() {
            return Err(Error::LabelMismatch { expected: labels.labels().to_vec(), found: keys });
        }
        self.rows
            .iter()
            .map(|(line, rec)| rec.iter().skip(1).map(|f| parse(*line, f)).collect())
            .collect()
    }
}

/// Key column and label decoration of a lookup-table header.
#[derive(Debug, Clone, Copy)]
struct Decor {
    key: &'static str,
    prefix: &'static str,
    suffix: &'static str,
}

impl Decor {
    const BARE: Decor = Decor { key: "", prefix: "", suffix: "" };
    const SURNAME: Decor = Decor { key: "surname", prefix: "p_", suffix: "" };
    const FIRST_NAME: Decor = Decor { key: "first", prefix: "l_", suffix: "" };
    const GEO: Decor = Decor { key: "region", prefix: "", suffix: "_count" };

    /// Bare labels are accepted as well.
    fn strip<'a>(&self, header: &'a str) -> &'a str {
        header
            .strip_prefix(self.prefix)
            .and_then(|h| h.strip_suffix(self.suffix))
            .unwrap_or(header)
    }
}

fn wrap<T>(source: &str, line: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { .. } => e,
        other => Error::parse(source, line, other.to_string()),
    })
}

pub fn read_surname_table<R: Read>(reader: R, source: &str, labels: &CategorySet) -> Result<SurnameTable> {
    let t = load(reader, source)?;
    let mut out = SurnameTable::new(labels.len());
    for (line, key, v) in t.keyed_floats(labels, Decor::SURNAME)? {
        wrap(source, line, out.insert(&key, v))?;
    }
    Ok(out)
}

pub fn read_first_name_table<R: Read>(reader: R, source: &str, labels: &CategorySet) -> Result<FirstNameTable> {
    let t = load(reader, source)?;
    let mut out = FirstNameTable::new(labels.len());
    for (line, key, v) in t.keyed_floats(labels, Decor::FIRST_NAME)? {
        wrap(source, line, out.insert(&key, v))?;
    }
    Ok(out)
}

pub fn read_geo_table<R: Read>(reader: R, source: &str, labels: &CategorySet) -> Result<GeoTable> {
    let t = load(reader, source)?;
    let mut out = GeoTable::new(labels.len());
    for (line, key, v) in t.keyed_floats(labels, Decor::GEO)? {
        wrap(source, line, out.insert(&key, v))?;
    }
    Ok(out)
}

fn write_keyed<'a, W: Write>(
    writer: W,
    decor: Decor,
    labels: &CategorySet,
    rows: impl Iterator<Item = (&'a str, &'a [f64])>,
) -> Result<()> {
    let mut w = Writer::from_writer(writer);
    let mut header = vec![decor.key.to_string()];
    header.extend(labels.labels().iter().map(|l| format!("{}{l}{}", decor.prefix, decor.suffix)));
    w.write_record(&header)?;
    for (k, row) in rows {
        let mut rec = vec![k.to_string()];
        rec.extend(row.iter().map(|x| fmt_float(*x)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_surname_table<W: Write>(writer: W, labels: &CategorySet, table: &SurnameTable) -> Result<()> {
    write_keyed(writer, Decor::SURNAME, labels, table.iter())
}

pub fn write_first_name_table<W: Write>(writer: W, labels: &CategorySet, table: &FirstNameTable) -> Result<()> {
    write_keyed(writer, Decor::FIRST_NAME, labels, table.iter())
}

pub fn write_geo_table<W: Write>(writer: W, labels: &CategorySet, table: &GeoTable) -> Result<()> {
    write_keyed(writer, Decor::GEO, labels, table.iter())
}

/// Flow counts: rows are predictions, columns true classes.
pub fn read_flows<R: Read>(reader: R, source: &str, labels: &CategorySet) -> Result<FlowCounts> {
    let t = load(reader, source)?;
    let rows = t.square(labels, |line, f| t.uint(line, f))?;
    FlowCounts::from_rows(&rows)
}

pub fn write_flows<W: Write>(writer: W, labels: &CategorySet, flows: &FlowCounts) -> Result<()> {
    let mut w = Writer::from_writer(writer);
    let mut header = vec!["predicted".to_string()];
    header.extend(labels.labels().iter().cloned());
    w.write_record(&header)?;
    for (j, row) in flows.rows().iter().enumerate() {
        let mut rec = vec![labels.label(j).to_string()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Confusion matrix in the same layout as flows; columns must be stochastic.
pub fn read_confusion<R: Read>(reader: R, source: &str, labels: &CategorySet) -> Result<ConfusionMatrix> {
    let t = load(reader, source)?;
    let rows = t.square(labels, |line, f| t.float(line, f))?;
    ConfusionMatrix::from_rows(&rows)
}

pub fn write_confusion<W: Write>(writer: W, labels: &CategorySet, c: &ConfusionMatrix) -> Result<()> {
    let rows = c.rows();
    write_keyed(
        writer,
        Decor { key: "predicted", ..Decor::BARE },
        labels,
        rows.iter().enumerate().map(|(j, r)| (labels.label(j), r.as_slice())),
    )
}

/// `category,<value>` rows, one per label, in any order.
pub fn read_vector<R: Read>(reader: R, source: &str, labels: &CategorySet) -> Result<Vec<f64>> {
    let t = load(reader, source)?;
    if t.header.len() != 2 {
        return Err(Error::parse(source, 1, "expected two columns: category,value"));
    }
    let mut out = vec![None; labels.len()];
    for (line, rec) in &t.rows {
        let label = rec.get(0).unwrap_or_default();
        let k = wrap(source, *line, labels.require(label))?;
        if out[k].is_some() {
            return Err(Error::parse(source, *line, format!("duplicate category `{label}`")));
        }
        out[k] = Some(t.float(*line, rec.get(1).unwrap_or_default())?);
    }
    out.iter()
        .enumerate()
        .map(|(k, v)| v.ok_or_else(|| Error::parse(source, 0, format!("missing category `{}`", labels.label(k)))))
        .collect()
}

pub fn write_vector<W: Write>(writer: W, labels: &CategorySet, value_header: &str, values: &[f64]) -> Result<()> {
    let mut w = Writer::from_writer(writer);
    w.write_record(["category", value_header])?;
    for (k, v) in values.iter().enumerate() {
        w.write_record([labels.label(k), &fmt_float(*v)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_population<W: Write>(writer: W, labels: &CategorySet, records: &[PopulationRecord]) -> Result<()> {
    let mut w = Writer::from_writer(writer);
    w.write_record(POPULATION_COLUMNS)?;
    for r in records {
        w.write_record([
            r.id.to_string(),
            r.region_key.clone(),
            labels.label(r.true_race).to_string(),
            r.surname_key.clone(),
            r.first_key.clone(),
            r.gender.to_string(),
            AGE_BANDS[r.age_band].to_string(),
            fmt_float(r.premium),
            fmt_float(r.ses.medfaminc),
            fmt_float(r.ses.ppov),
            fmt_float(r.ses.punemp),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_population<R: Read>(reader: R, source: &str, labels: &CategorySet) -> Result<Vec<PopulationRecord>> {
    let t = load(reader, source)?;
    let cols = POPULATION_COLUMNS.map(|c| t.column(c)).into_iter().collect::<Result<Vec<_>>>()?;
    let get = |rec: &StringRecord, i: usize| rec.get(cols[i]).unwrap_or_default().to_string();
    t.rows
        .iter()
        .map(|(line, rec)| {
            let line = *line;
            let age = get(rec, 6);
            Ok(PopulationRecord {
                id: t.uint(line, &get(rec, 0))?,
                region_key: get(rec, 1),
                true_race: wrap(source, line, labels.require(&get(rec, 2)))?,
                surname_key: get(rec, 3),
                first_key: get(rec, 4),
                gender: wrap(source, line, get(rec, 5).parse::<Gender>())?,
                age_band: age_band_index(&age)
                    .ok_or_else(|| Error::parse(source, line, format!("unknown age_range `{age}`")))?,
                premium: t.float(line, &get(rec, 7))?,
                ses: Ses {
                    medfaminc: t.float(line, &get(rec, 8))?,
                    ppov: t.float(line, &get(rec, 9))?,
                    punemp: t.float(line, &get(rec, 10))?,
                },
            })
        })
        .collect()
}

/// Name and region keys of one microdata row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MicroRow {
    pub id: String,
    pub surname: String,
    pub first_name: String,
    pub region: String,
}

/// Reads `surname`, `first_name` and `zip_code`; `id` is optional and
/// defaults to the row number.
pub fn read_microdata<R: Read>(reader: R, source: &str) -> Result<Vec<MicroRow>> {
    let t = load(reader, source)?;
    let s = t.column("surname")?;
    let f = t.column("first_name")?;
    let g = t.column("zip_code")?;
    let id = t.column("id").ok();
    Ok(t.rows
        .iter()
        .enumerate()
        .map(|(i, (_, rec))| MicroRow {
            id: id.and_then(|c| rec.get(c)).map_or_else(|| (i + 1).to_string(), str::to_string),
            surname: rec.get(s).unwrap_or_default().to_string(),
            first_name: rec.get(f).unwrap_or_default().to_string(),
            region: rec.get(g).unwrap_or_default().to_string(),
        })
        .collect())
}

/// Two label columns of a delimited file, mapped to category indices.
pub fn read_label_pairs<R: Read>(
    reader: R,
    source: &str,
    labels: &CategorySet,
    true_column: &str,
    pred_column: &str,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let t = load(reader, source)?;
    let a = t.column(true_column)?;
    let b = t.column(pred_column)?;
    let mut truth = Vec::with_capacity(t.rows.len());
    let mut pred = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        truth.push(wrap(source, *line, labels.require(rec.get(a).unwrap_or_default()))?);
        pred.push(wrap(source, *line, labels.require(rec.get(b).unwrap_or_default()))?);
    }
    Ok((truth, pred))
}

/// Copies a delimited file and appends one column.
pub fn append_column<R: Read, W: Write>(reader: R, source: &str, writer: W, name: &str, values: &[String]) -> Result<()> {
    let t = load(reader, source)?;
    if t.rows.len() != values.len() {
        return Err(Error::LengthMismatch { left: t.rows.len(), right: values.len() });
    }
    let mut w = Writer::from_writer(writer);
    let mut header: Vec<&str> = t.header.iter().collect();
    header.push(name);
    w.write_record(&header)?;
    for ((_, rec), v) in t.rows.iter().zip(values) {
        let mut row: Vec<&str> = rec.iter().collect();
        row.push(v);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_population, ScenarioConfig};

    fn labels2() -> CategorySet {
        CategorySet::new(&["A", "B"]).unwrap()
    }

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, 1.2, 2.8, -0.2, 1e-300, 6.02214076e23, 1.0 / 3.0, 123456789.125, 5e-324, -7.0] {
            let s = fmt_float(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{x} -> {s}");
        }
        assert_eq!(fmt_float(1.2), "1.2");
        assert_eq!(fmt_float(0.1), "0.10000000000000001");
        assert_eq!(fmt_float(100.0), "100");
        assert_eq!(fmt_float(1e20), "1e20");
    }

    #[test]
    fn vector_round_trip_and_header_errors() {
        let mut buf = Vec::new();
        write_vector(&mut buf, &labels2(), "beta", &[0.1, -2.5]).unwrap();
        let v = read_vector(buf.as_slice(), "beta.csv", &labels2()).unwrap();
        assert_eq!(v, vec![0.1, -2.5]);

        let bad = "category,value\nA,1\nA,2\n";
        assert!(matches!(read_vector(bad.as_bytes(), "v", &labels2()), Err(Error::Parse { line: 3, .. })));
        let junk = "# comment\ncategory,value\nA,1\nB,zz\n";
        assert!(matches!(read_vector(junk.as_bytes(), "v", &labels2()), Err(Error::Parse { line: 4, .. })));
    }

    #[test]
    fn flows_and_confusion_round_trip() {
        let f = FlowCounts::from_rows(&[vec![90, 10], vec![10, 90]]).unwrap();
        let mut buf = Vec::new();
        write_flows(&mut buf, &labels2(), &f).unwrap();
        assert_eq!(read_flows(buf.as_slice(), "f", &labels2()).unwrap(), f);

        let c = ConfusionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        let mut buf = Vec::new();
        write_confusion(&mut buf, &labels2(), &c).unwrap();
        assert_eq!(read_confusion(buf.as_slice(), "c", &labels2()).unwrap(), c);

        let swapped = "predicted,B,A\nB,1,0\nA,0,1\n";
        assert!(matches!(read_flows(swapped.as_bytes(), "f", &labels2()), Err(Error::LabelMismatch { .. })));
        let not_stochastic = "predicted,A,B\nA,0.5,0.1\nB,0.1,0.9\n";
        assert!(read_confusion(not_stochastic.as_bytes(), "c", &labels2()).is_err());
    }

    #[test]
    fn tables_round_trip() {
        let mut c = ScenarioConfig::new(2);
        c.regions.count = 5;
        c.regions.size = 50;
        c.names.keys_per_pool = 3;
        let pop = generate_population(&c).unwrap();
        let labels = &pop.labels;

        let mut buf = Vec::new();
        write_surname_table(&mut buf, labels, &pop.tables.surnames).unwrap();
        let s = read_surname_table(buf.as_slice(), "s", labels).unwrap();
        let mut again = Vec::new();
        write_surname_table(&mut again, labels, &s).unwrap();
        assert_eq!(buf, again);
        assert!(buf.starts_with(b"surname,p_Asian,p_Black,"));
        let bare = "surname,Asian,Black,Hispanic,Others,White\nlee,0.5,0,0,0,0.5\n";
        assert_eq!(read_surname_table(bare.as_bytes(), "b", labels).unwrap().get("lee").unwrap()[4], 0.5);

        let mut buf = Vec::new();
        write_geo_table(&mut buf, labels, &pop.tables.geo).unwrap();
        assert!(buf.starts_with(b"region,Asian_count,"));
        let g = read_geo_table(buf.as_slice(), "g", labels).unwrap();
        for (k, row) in pop.tables.geo.iter() {
            assert_eq!(g.counts(k).unwrap(), row);
        }

        let mut buf = Vec::new();
        write_first_name_table(&mut buf, labels, &pop.tables.first_names).unwrap();
        assert!(buf.starts_with(b"first,l_Asian,"));
        let f = read_first_name_table(buf.as_slice(), "f", labels).unwrap();
        assert_eq!(f.len(), pop.tables.first_names.len());

        let mut buf = Vec::new();
        write_population(&mut buf, labels, &pop.records).unwrap();
        let back = read_population(buf.as_slice(), "pop", labels).unwrap();
        assert_eq!(back, pop.records);
    }

    #[test]
    fn surname_rows_must_sum_to_one() {
        let text = "surname,A,B\nsmith,0.5,0.5\njones,0.5,0.6\n";
        assert!(matches!(read_surname_table(text.as_bytes(), "s", &labels2()), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn microdata_and_pairs() {
        let text = "surname,first_name,zip_code\nSmith,Ann,27001\n";
        let rows = read_microdata(text.as_bytes(), "m").unwrap();
        assert_eq!(rows[0].id, "1");
        assert_eq!(rows[0].region, "27001");
        assert!(read_microdata("surname,zip_code\n".as_bytes(), "m").is_err());

        let text = "race_code,proxy_race\nA,B\nB,B\n";
        let (t, q) = read_label_pairs(text.as_bytes(), "p", &labels2(), "race_code", "proxy_race").unwrap();
        assert_eq!((t, q), (vec![0, 1], vec![1, 1]));

        let mut out = Vec::new();
        append_column(text.as_bytes(), "p", &mut out, "extra", &["x".into(), "y".into()]).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "race_code,proxy_race,extra\nA,B,x\nB,B,y\n");
        let bad = "race_code,proxy_race\nA,C\n";
        assert!(matches!(
            read_label_pairs(bad.as_bytes(), "p", &labels2(), "race_code", "proxy_race"),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
