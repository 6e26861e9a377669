//! Loading, encoding, splitting, demographic masking, and label-noise
//! corruption for the Adult and Bank tabular datasets.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Deterministic per-purpose RNG stream derivation.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(stream))
}

pub mod streams {
    pub const SPLIT: u64 = 0;
    pub const MASK: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const DEM_BATCH: u64 = 5;
    pub const ADVERSARY: u64 = 6;
    pub const IMPUTE_INIT: u64 = 7;
    pub const IMPUTE_BATCH: u64 = 8;
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Categorical,
    Numeric,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

/// Predicate mapping the raw sensitive column to privileged (1) / unprivileged (0).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivilegedRule {
    Equals(String),
    GreaterThan(f64),
}

impl PrivilegedRule {
    fn apply(&self, raw: &str) -> Result<bool> {
        match self {
            PrivilegedRule::Equals(v) => Ok(raw == v),
            PrivilegedRule::GreaterThan(t) => raw
                .parse::<f64>()
                .map(|x| x > *t)
                .map_err(|_| Error::Dataset(format!("non-numeric sensitive value '{raw}'"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Schema {
    pub version: u32,
    pub name: String,
    pub delimiter: char,
    pub has_header: bool,
    pub missing_token: String,
    pub columns: Vec<ColumnSpec>,
    pub label_column: String,
    pub favorable_value: String,
    pub sensitive_column: String,
    pub privileged: PrivilegedRule,
}

impl Schema {
    pub fn from_json_file(path: &Path) -> Result<Schema> {
        let text = std::fs::read_to_string(path)?;
        let schema: Schema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let has = |n: &str| self.columns.iter().any(|c| c.name == n);
        if !has(&self.label_column) {
            return Err(Error::Dataset(format!("label column '{}' not in schema", self.label_column)));
        }
        if !has(&self.sensitive_column) {
            return Err(Error::Dataset(format!(
                "sensitive column '{}' not in schema",
                self.sensitive_column
            )));
        }
        if self.label_column == self.sensitive_column {
            return Err(Error::Dataset("label and sensitive columns must differ".into()));
        }
        Ok(())
    }

    /// Columns that become model features: everything except label and sensitive.
    pub fn feature_columns(&self) -> Vec<&ColumnSpec> {
        self.columns
            .iter()
            .filter(|c| c.name != self.label_column && c.name != self.sensitive_column)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct RawTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub rows_dropped: usize,
}

/// Read a delimited file, drop rows containing the missing token in any
/// schema column, and count the drops.
pub fn load_table(path: &Path, schema: &Schema) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .has_headers(schema.has_header)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)?;

    if schema.has_header {
        let headers = reader.headers()?.clone();
        let got: Vec<&str> = headers.iter().collect();
        let want: Vec<&str> = schema.columns.iter().map(|c| c.name.as_str()).collect();
        if got != want {
            return Err(Error::Dataset(format!(
                "header mismatch for {}: expected {:?}, found {:?}",
                schema.name, want, got
            )));
        }
    }

    let ncols = schema.columns.len();
    let mut rows = Vec::new();
    let mut rows_dropped = 0usize;
    for record in reader.records() {
        let record = record?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != ncols {
            return Err(Error::Dataset(format!(
                "row with {} fields, schema has {} columns",
                record.len(),
                ncols
            )));
        }
        let cells: Vec<String> = record.iter().map(str::to_string).collect();
        if cells.iter().any(|c| c == &schema.missing_token) {
            rows_dropped += 1;
            continue;
        }
        rows.push(cells);
    }
    if rows.is_empty() {
        return Err(Error::Dataset(format!("no usable rows in {}", path.display())));
    }
    Ok(RawTable {
        columns: schema.columns.iter().map(|c| c.name.clone()).collect(),
        rows,
        rows_dropped,
    })
}

#[derive(Clone, Debug)]
pub struct TabularDataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    s: Vec<u8>,
    pub dem_mask: Vec<bool>,
}

impl TabularDataset {
    /// Assemble a dataset from raw arrays (synthetic data and tests).
    pub fn from_parts(x: Vec<Vec<f64>>, y: Vec<f64>, s: Vec<u8>, dem_mask: Vec<bool>) -> Result<TabularDataset> {
        if x.len() != y.len() || y.len() != s.len() || s.len() != dem_mask.len() {
            return Err(Error::Dataset("column length mismatch".into()));
        }
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Dataset("labels must be 0 or 1".into()));
        }
        if s.iter().any(|&v| v > 1) {
            return Err(Error::Dataset("sensitive attribute must be 0 or 1".into()));
        }
        Ok(TabularDataset { x, y, s, dem_mask })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn m(&self) -> usize {
        if self.x.is_empty() {
            0
        } else {
            self.x[0].len()
        }
    }

    /// Sensitive attribute, readable only where the demographic mask allows.
    pub fn s_at(&self, i: usize) -> Option<u8> {
        self.dem_mask[i].then(|| self.s[i])
    }

    /// Full sensitive vector; errors unless s is known everywhere.
    pub fn s_full(&self) -> Result<&[u8]> {
        if self.dem_mask.iter().all(|&b| b) {
            Ok(&self.s)
        } else {
            Err(Error::Dataset("sensitive attribute is masked on this split".into()))
        }
    }

    pub fn dem_count(&self) -> usize {
        self.dem_mask.iter().filter(|&&b| b).count()
    }

    /// Indices with known sensitive attribute.
    pub fn dem_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.dem_mask[i]).collect()
    }

    /// Fill masked rows of the sensitive attribute and mark them known.
    /// Rows that were already known keep their original value.
    pub fn fill_masked_s(&mut self, fill: impl Fn(usize) -> u8) {
        for i in 0..self.n() {
            if !self.dem_mask[i] {
                self.s[i] = fill(i) & 1;
                self.dem_mask[i] = true;
            }
        }
    }
}

/// Encoder state fitted on the train split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    pub feature_names: Vec<String>,
    /// per categorical column: sorted vocabulary
    pub vocabs: BTreeMap<String, Vec<String>>,
    /// per numeric column: (mean, std)
    pub standardize: BTreeMap<String, (f64, f64)>,
}

impl Encoder {
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("encoder serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_lower(&h.finalize())
    }
}

pub fn hex_lower(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: TabularDataset,
    pub validation: TabularDataset,
    pub test: TabularDataset,
    pub encoder: Encoder,
    pub seed: u64,
}

/// Label-stratified 60/20/20 split, then one-hot + standardization fitted on
/// the train split only.
pub fn split_and_encode(raw: &RawTable, schema: &Schema, seed: u64) -> Result<DataSplits> {
    let col_idx: BTreeMap<&str, usize> = raw
        .columns
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let li = *col_idx
        .get(schema.label_column.as_str())
        .ok_or_else(|| Error::Dataset("label column missing from table".into()))?;
    let si = *col_idx
        .get(schema.sensitive_column.as_str())
        .ok_or_else(|| Error::Dataset("sensitive column missing from table".into()))?;

    let n = raw.rows.len();
    let y: Vec<f64> = raw
        .rows
        .iter()
        .map(|r| f64::from(r[li] == schema.favorable_value))
        .collect();
    let mut s = Vec::with_capacity(n);
    for r in &raw.rows {
        s.push(u8::from(schema.privileged.apply(&r[si])?));
    }

    let mut rng = stream_rng(seed, streams::SPLIT);
    let mut tr_idx = Vec::new();
    let mut va_idx = Vec::new();
    let mut te_idx = Vec::new();
    for lab in [0.0, 1.0] {
        let mut idx: Vec<usize> = (0..n).filter(|&i| y[i] == lab).collect();
        idx.shuffle(&mut rng);
        let n_tr = (0.6 * idx.len() as f64).round() as usize;
        let n_v = (0.2 * idx.len() as f64).round() as usize;
        tr_idx.extend_from_slice(&idx[..n_tr]);
        va_idx.extend_from_slice(&idx[n_tr..n_tr + n_v]);
        te_idx.extend_from_slice(&idx[n_tr + n_v..]);
    }
    tr_idx.sort_unstable();
    va_idx.sort_unstable();
    te_idx.sort_unstable();
    for (name, idx) in [("train", &tr_idx), ("validation", &va_idx), ("test", &te_idx)] {
        let ones = idx.iter().filter(|&&i| y[i] == 1.0).count();
        if ones == 0 || ones == idx.len() {
            return Err(Error::Dataset(format!("{name} split has a single label class")));
        }
    }

    let mut feature_names = Vec::new();
    let mut vocabs = BTreeMap::new();
    let mut standardize = BTreeMap::new();
    let mut x = vec![Vec::new(); n];
    for col in schema.feature_columns() {
        let ci = col_idx[col.name.as_str()];
        match col.kind {
            ColumnKind::Numeric => {
                let mut vals = Vec::with_capacity(n);
                for r in &raw.rows {
                    let v: f64 = r[ci]
                        .parse()
                        .map_err(|_| Error::Dataset(format!("non-numeric value in column {}", col.name)))?;
                    vals.push(v);
                }
                let mu = tr_idx.iter().map(|&i| vals[i]).sum::<f64>() / tr_idx.len() as f64;
                let var = tr_idx.iter().map(|&i| (vals[i] - mu).powi(2)).sum::<f64>()
                    / tr_idx.len() as f64;
                let mut sd = var.sqrt();
                if sd == 0.0 {
                    sd = 1.0;
                }
                standardize.insert(col.name.clone(), (mu, sd));
                feature_names.push(col.name.clone());
                for i in 0..n {
                    x[i].push((vals[i] - mu) / sd);
                }
            }
            ColumnKind::Categorical => {
                let mut vocab: Vec<String> = tr_idx
                    .iter()
                    .map(|&i| raw.rows[i][ci].clone())
                    .collect::<std::collections::BTreeSet<_>>()
                    .into_iter()
                    .collect();
                vocab.sort();
                let lut: BTreeMap<&str, usize> = vocab
                    .iter()
                    .enumerate()
                    .map(|(k, v)| (v.as_str(), k))
                    .collect();
                for v in &vocab {
                    feature_names.push(format!("{}={}", col.name, v));
                }
                for i in 0..n {
                    let mut onehot = vec![0.0; vocab.len()];
                    if let Some(&k) = lut.get(raw.rows[i][ci].as_str()) {
                        onehot[k] = 1.0;
                    }
                    x[i].extend_from_slice(&onehot);
                }
                vocabs.insert(col.name.clone(), vocab);
            }
        }
    }

    let take = |idx: &[usize], all_known: bool| TabularDataset {
        x: idx.iter().map(|&i| x[i].clone()).collect(),
        y: idx.iter().map(|&i| y[i]).collect(),
        s: idx.iter().map(|&i| s[i]).collect(),
        dem_mask: vec![all_known; idx.len()],
    };

    Ok(DataSplits {
        train: take(&tr_idx, true),
        validation: take(&va_idx, true),
        test: take(&te_idx, true),
        encoder: Encoder { feature_names, vocabs, standardize },
        seed,
    })
}

/// Cell order for joint (s, y) stratification.
pub const CELL_ORDER: [(u8, f64); 4] = [(1, 1.0), (1, 0.0), (0, 1.0), (0, 0.0)];

/// Restrict the known-demographics set to round(fraction * n_train) train
/// samples, chosen by round-robin over the nonempty (s, y) cells (each cell
/// pre-shuffled) so the selection is jointly stratified and monotone in the
/// fraction for a fixed seed.
pub fn mask_demographics(splits: &DataSplits, fraction: f64, seed: u64) -> Result<DataSplits> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Dataset(format!("fraction {fraction} outside (0, 1]")));
    }
    let train = &splits.train;
    let n = train.n();
    let k = (fraction * n as f64).round() as usize;
    if k == 0 {
        return Err(Error::Dataset("fraction selects zero samples".into()));
    }
    let mut rng = stream_rng(seed, streams::MASK);
    let mut shuffled: Vec<Vec<usize>> = Vec::new();
    for (sv, yv) in CELL_ORDER {
        let mut idx: Vec<usize> = (0..n)
            .filter(|&i| train.s[i] == sv && train.y[i] == yv)
            .collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        shuffled.push(idx);
    }
    let mut order = Vec::with_capacity(n);
    let mut r = 0usize;
    loop {
        let mut any = false;
        for cell in &shuffled {
            if r < cell.len() {
                order.push(cell[r]);
                any = true;
            }
        }
        if !any {
            break;
        }
        r += 1;
    }
    let mut mask = vec![false; n];
    for &i in order.iter().take(k.min(n)) {
        mask[i] = true;
    }
    let mut out = splits.clone();
    out.train.dem_mask = mask;
    Ok(out)
}

/// Flip each non-demographic train label independently with probability
/// flip_prob; demographically known rows keep clean labels.
pub fn inject_label_noise(splits: &DataSplits, flip_prob: f64, seed: u64) -> Result<DataSplits> {
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(Error::Dataset(format!("flip_prob {flip_prob} outside [0, 1]")));
    }
    let mut out = splits.clone();
    let mut rng = stream_rng(seed, streams::NOISE);
    for i in 0..out.train.n() {
        if !out.train.dem_mask[i] && rng.gen::<f64>() < flip_prob {
            out.train.y[i] = 1.0 - out.train.y[i];
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StatsReport {
    pub n: usize,
    pub label_base_rate: f64,
    pub privileged_base_rate: f64,
    /// joint frequencies keyed (s, y) in CELL_ORDER
    pub joint: Vec<f64>,
    pub p_fav_given_priv: f64,
    pub p_fav_given_unpriv: f64,
}

pub fn dataset_stats(ds: &TabularDataset) -> Result<StatsReport> {
    stats_from(&ds.y, ds.s_full()?)
}

/// Stats from raw label/group vectors; lets callers pool several splits.
pub fn stats_from(y: &[f64], s: &[u8]) -> Result<StatsReport> {
    let n = y.len();
    if n == 0 || s.len() != n {
        return Err(Error::Dataset("stats need matching nonempty y and s".into()));
    }
    let n_priv = s.iter().filter(|&&v| v == 1).count();
    if n_priv == 0 || n_priv == n {
        return Err(Error::Dataset("a sensitive group is empty".into()));
    }
    let mut joint = Vec::with_capacity(4);
    for (sv, yv) in CELL_ORDER {
        let c = (0..n).filter(|&i| s[i] == sv && y[i] == yv).count();
        joint.push(c as f64 / n as f64);
    }
    let fav_priv = (0..n).filter(|&i| s[i] == 1 && y[i] == 1.0).count();
    let fav_unpriv = (0..n).filter(|&i| s[i] == 0 && y[i] == 1.0).count();
    Ok(StatsReport {
        n,
        label_base_rate: y.iter().sum::<f64>() / n as f64,
        privileged_base_rate: n_priv as f64 / n as f64,
        joint,
        p_fav_given_priv: fav_priv as f64 / n_priv as f64,
        p_fav_given_unpriv: fav_unpriv as f64 / (n - n_priv) as f64,
    })
}

/// Load, split, mask, and optionally noise-corrupt in one call.
pub fn prepare(
    data_path: &Path,
    schema: &Schema,
    seed: u64,
    fraction: f64,
    flip_prob: f64,
) -> Result<DataSplits> {
    let raw = load_table(data_path, schema)?;
    let splits = split_and_encode(&raw, schema, seed)?;
    let splits = mask_demographics(&splits, fraction, seed)?;
    if flip_prob > 0.0 {
        inject_label_noise(&splits, flip_prob, seed)
    } else {
        Ok(splits)
    }
}

/// Built-in schema for the UCI Adult census file (adult.data layout).
pub fn adult_schema() -> Schema {
    let cols = [
        ("age", ColumnKind::Numeric),
        ("workclass", ColumnKind::Categorical),
        ("fnlwgt", ColumnKind::Numeric),
        ("education", ColumnKind::Categorical),
        ("education-num", ColumnKind::Numeric),
        ("marital-status", ColumnKind::Categorical),
        ("occupation", ColumnKind::Categorical),
        ("relationship", ColumnKind::Categorical),
        ("race", ColumnKind::Categorical),
        ("sex", ColumnKind::Categorical),
        ("capital-gain", ColumnKind::Numeric),
        ("capital-loss", ColumnKind::Numeric),
        ("hours-per-week", ColumnKind::Numeric),
        ("native-country", ColumnKind::Categorical),
        ("income", ColumnKind::Categorical),
    ];
    Schema {
        version: 1,
        name: "adult".into(),
        delimiter: ',',
        has_header: false,
        missing_token: "?".into(),
        columns: cols
            .into_iter()
            .map(|(name, kind)| ColumnSpec { name: name.into(), kind })
            .collect(),
        label_column: "income".into(),
        favorable_value: ">50K".into(),
        sensitive_column: "sex".into(),
        privileged: PrivilegedRule::Equals("Male".into()),
    }
}

/// Built-in schema for the UCI Bank Marketing file (bank-full.csv layout).
pub fn bank_schema() -> Schema {
    let cols = [
        ("age", ColumnKind::Numeric),
        ("job", ColumnKind::Categorical),
        ("marital", ColumnKind::Categorical),
        ("education", ColumnKind::Categorical),
        ("default", ColumnKind::Categorical),
        ("balance", ColumnKind::Numeric),
        ("housing", ColumnKind::Categorical),
        ("loan", ColumnKind::Categorical),
        ("contact", ColumnKind::Categorical),
        ("day", ColumnKind::Numeric),
        ("month", ColumnKind::Categorical),
        ("duration", ColumnKind::Numeric),
        ("campaign", ColumnKind::Numeric),
        ("pdays", ColumnKind::Numeric),
        ("previous", ColumnKind::Numeric),
        ("poutcome", ColumnKind::Categorical),
        ("y", ColumnKind::Categorical),
    ];
    Schema {
        version: 1,
        name: "bank".into(),
        delimiter: ';',
        has_header: true,
        missing_token: "\u{0}never".into(),
        columns: cols
            .into_iter()
            .map(|(name, kind)| ColumnSpec { name: name.into(), kind })
            .collect(),
        label_column: "y".into(),
        favorable_value: "yes".into(),
        sensitive_column: "age".into(),
        privileged: PrivilegedRule::GreaterThan(25.0),
    }
}
