//! File formats and synthetic market data.
//!
//! # CSV tables
//!
//! Returns and market-capitalization files share one layout: comma separated,
//! UTF-8, LF or CRLF line endings, a header row whose first column is `date`
//! followed by one column per asset, then one row per period. Dates are
//! opaque strings. Values are plain decimals (no thousands separators);
//! returns are in percent, caps are fractions of the total.
//!
//! ```text
//! date,Energy,Utilities
//! 1990-01,1.25,-0.40
//! 1990-02,-3.10,0.85
//! ```
//!
//! Written values use the shortest representation that parses back to the
//! same `f64`, so a save/load round trip is exact.
//!
//! # Model files
//!
//! A mixture is stored as flat `key = value` lines with explicit shapes,
//! covariances row-major, every number with 17 significant digits:
//!
//! ```text
//! format = mixcvar-model-v1
//! m = 2
//! n = 3
//! rho = 1.9000000000000000e-1 8.1000000000000005e-1
//! mu.1 = ...
//! sigma.1 = ...
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. The same key-value
//! syntax is used by CLI configuration files.
//!
//! All writers go through a temporary file in the destination directory and
//! rename it into place, so a failed write never leaves a partial file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Gamma};

use crate::backtest::MarketData;
use crate::error::{Error, Result};
use crate::model::MixtureModel;
use crate::rng::{stream_rng, STREAM_DATA};

pub const MODEL_FORMAT: &str = "mixcvar-model-v1";
const CAP_RENORMALIZE_TOL: f64 = 0.01;

/// A parsed CSV table: labels from the header, one date and one row of values per period.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub labels: Vec<String>,
    pub dates: Vec<String>,
    pub values: DMatrix<f64>,
}

impl CsvTable {
    pub fn new(labels: Vec<String>, dates: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() != labels.len() || values.nrows() != dates.len() {
            return Err(Error::Dimension(format!(
                "table has {} labels and {} dates but values are {}x{}",
                labels.len(),
                dates.len(),
                values.nrows(),
                values.ncols()
            )));
        }
        Ok(Self { labels, dates, values })
    }
}

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), line, msg: msg.into() }
}

/// Read a table in the CSV layout described in the module docs.
pub fn read_table(path: &Path) -> Result<CsvTable> {
    let text = fs::read_to_string(path)?;
    parse_table(&text, path)
}

fn parse_table(text: &str, path: &Path) -> Result<CsvTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        Some(h) => h.map_err(|e| parse_error(path, 1, e.to_string()))?,
        None => return Err(parse_error(path, 1, "file is empty")),
    };
    if header.get(0).map(|h| h.trim_start_matches('\u{feff}')) != Some("date") {
        return Err(parse_error(path, 1, "first column must be named `date`"));
    }
    let labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    if labels.is_empty() {
        return Err(parse_error(path, 1, "no asset columns"));
    }
    let width = labels.len();
    let mut dates = Vec::new();
    let mut flat = Vec::new();
    for record in records {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_error(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        if record.len() != width + 1 {
            return Err(parse_error(path, line, format!("expected {} fields, found {}", width + 1, record.len())));
        }
        dates.push(record[0].to_string());
        for (j, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_error(path, line, format!("column `{}`: `{field}` is not a number", labels[j])))?;
            if !v.is_finite() {
                return Err(parse_error(path, line, format!("column `{}`: value `{field}` is not finite", labels[j])));
            }
            flat.push(v);
        }
    }
    if dates.is_empty() {
        return Err(parse_error(path, 2, "no data rows"));
    }
    let values = DMatrix::from_row_slice(dates.len(), width, &flat);
    Ok(CsvTable { labels, dates, values })
}

/// Write a table atomically in the CSV layout described in the module docs.
pub fn save_table(table: &CsvTable, path: &Path) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header = vec!["date".to_string()];
    header.extend(table.labels.iter().cloned());
    writer.write_record(&header)?;
    for (i, date) in table.dates.iter().enumerate() {
        let mut row = vec![date.clone()];
        row.extend(table.values.row(i).iter().map(|v| v.to_string()));
        writer.write_record(&row)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Write `bytes` to a sibling temporary file, then rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Load a returns file and a caps file with identical headers and dates.
///
/// Cap rows within 1% of summing to one are renormalized; anything further
/// off is rejected with its line number.
pub fn load_market_data(returns_path: &Path, caps_path: &Path) -> Result<MarketData> {
    let returns = read_table(returns_path)?;
    let caps = read_table(caps_path)?;
    if returns.labels != caps.labels {
        return Err(parse_error(caps_path, 1, "caps header does not match the returns header"));
    }
    if returns.dates.len() != caps.dates.len() {
        return Err(parse_error(
            caps_path,
            caps.dates.len().min(returns.dates.len()) + 2,
            format!("{} cap rows but {} return rows", caps.dates.len(), returns.dates.len()),
        ));
    }
    if let Some(i) = returns.dates.iter().zip(&caps.dates).position(|(a, b)| a != b) {
        return Err(parse_error(
            caps_path,
            i + 2,
            format!("date `{}` does not match returns date `{}`", caps.dates[i], returns.dates[i]),
        ));
    }
    let mut cap_values = caps.values;
    for (i, mut row) in cap_values.row_iter_mut().enumerate() {
        if let Some(v) = row.iter().find(|v| !(**v > 0.0)) {
            return Err(parse_error(caps_path, i + 2, format!("cap {v} is not positive")));
        }
        let total = row.sum();
        if (total - 1.0).abs() > CAP_RENORMALIZE_TOL {
            return Err(parse_error(caps_path, i + 2, format!("caps sum to {total}, not 1")));
        }
        row /= total;
    }
    MarketData::new(returns.values, cap_values, returns.labels, returns.dates)
}

/// Save returns and caps as two CSV files.
pub fn save_market_data(data: &MarketData, returns_path: &Path, caps_path: &Path) -> Result<()> {
    save_table(&CsvTable::new(data.labels().to_vec(), data.dates().to_vec(), data.returns().clone())?, returns_path)?;
    save_table(&CsvTable::new(data.labels().to_vec(), data.dates().to_vec(), data.caps().clone())?, caps_path)
}

/// Parsed `key = value` lines with their line numbers.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
    source: String,
}

impl KeyValues {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            let key = key.trim().to_string();
            if entries.insert(key.clone(), (i + 1, value.trim().to_string())).is_some() {
                return Err(Error::Parse { path: source.to_string(), line: i + 1, msg: format!("duplicate key `{key}`") });
            }
        }
        Ok(Self { entries, source: source.to_string() })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn require(&self, key: &str) -> Result<(usize, &str)> {
        self.entries
            .get(key)
            .map(|(l, v)| (*l, v.as_str()))
            .ok_or_else(|| Error::Parse { path: self.source.clone(), line: 0, msg: format!("missing key `{key}`") })
    }

    /// Parse the value under `key`, if present.
    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| Error::Parse {
                path: self.source.clone(),
                line: *line,
                msg: format!("cannot parse `{v}` for `{key}`"),
            }),
        }
    }

    fn numbers(&self, key: &str, expected: usize) -> Result<Vec<f64>> {
        let (line, value) = self.require(key)?;
        let err = |msg: String| Error::Parse { path: self.source.clone(), line, msg };
        let nums = value
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("`{t}` is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        if nums.len() != expected {
            return Err(err(format!("`{key}` has {} values, expected {expected}", nums.len())));
        }
        if nums.iter().any(|v| !v.is_finite()) {
            return Err(err(format!("`{key}` has non-finite values")));
        }
        Ok(nums)
    }
}

fn join(values: impl Iterator<Item = f64>) -> String {
    values.map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(" ")
}

/// Serialize a model in the `mixcvar-model-v1` format.
pub fn model_to_string(model: &MixtureModel) -> String {
    let mut out = format!("format = {MODEL_FORMAT}\nm = {}\nn = {}\n", model.components(), model.dim());
    out += &format!("rho = {}\n", join(model.rho().iter().cloned()));
    for (i, mu) in model.means().iter().enumerate() {
        out += &format!("mu.{} = {}\n", i + 1, join(mu.iter().cloned()));
    }
    for (i, s) in model.covariances().iter().enumerate() {
        out += &format!("sigma.{} = {}\n", i + 1, join(s.transpose().iter().cloned()));
    }
    out
}

/// Parse a model in the `mixcvar-model-v1` format.
pub fn model_from_str(text: &str, source: &str) -> Result<MixtureModel> {
    let kv = KeyValues::parse(text, source)?;
    let (line, format) = kv.require("format")?;
    if format != MODEL_FORMAT {
        return Err(Error::Parse { path: source.into(), line, msg: format!("unsupported format `{format}`") });
    }
    let m: usize = kv.parse_value("m")?.ok_or_else(|| kv.require("m").unwrap_err())?;
    let n: usize = kv.parse_value("n")?.ok_or_else(|| kv.require("n").unwrap_err())?;
    if m == 0 || n == 0 {
        return Err(Error::Parse { path: source.into(), line: 0, msg: "m and n must be positive".into() });
    }
    let rho = kv.numbers("rho", m)?;
    let mut mu = Vec::with_capacity(m);
    let mut sigma = Vec::with_capacity(m);
    for i in 1..=m {
        mu.push(DVector::from_vec(kv.numbers(&format!("mu.{i}"), n)?));
        sigma.push(DMatrix::from_row_slice(n, n, &kv.numbers(&format!("sigma.{i}"), n * n)?));
    }
    MixtureModel::new(rho, mu, sigma)
}

pub fn save_model(model: &MixtureModel, path: &Path) -> Result<()> {
    write_atomic(path, model_to_string(model).as_bytes())
}

pub fn load_model(path: &Path) -> Result<MixtureModel> {
    model_from_str(&fs::read_to_string(path)?, &path.display().to_string())
}

/// How synthetic market capitalizations are generated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CapRule {
    /// Every row is `e / n`.
    Equal,
    /// Every row is an independent symmetric Dirichlet draw.
    Dirichlet { concentration: f64 },
}

/// `periods` rows sampled from `mix`, with caps from `rule`.
pub fn generate_synthetic(mix: &MixtureModel, periods: usize, rule: CapRule, seed: u64) -> Result<MarketData> {
    let returns = mix.sample(periods, &mut stream_rng(seed, STREAM_DATA))?;
    let n = mix.dim();
    let caps = match rule {
        CapRule::Equal => DMatrix::from_element(periods, n, 1.0 / n as f64),
        CapRule::Dirichlet { concentration } => {
            let gamma = Gamma::new(concentration, 1.0)
                .map_err(|_| Error::InvalidArgument(format!("Dirichlet concentration {concentration} must be positive")))?;
            let mut rng = stream_rng(seed, STREAM_DATA + 1);
            let mut caps = DMatrix::zeros(periods, n);
            for mut row in caps.row_iter_mut() {
                for v in row.iter_mut() {
                    *v = gamma.sample(&mut rng).max(f64::MIN_POSITIVE);
                }
                let total = row.sum();
                row /= total;
            }
            caps
        }
    };
    let labels = (1..=n).map(|j| format!("asset{j}")).collect();
    let dates = (1..=periods).map(|t| format!("t{t:05}")).collect();
    MarketData::new(returns, caps, labels, dates)
}
