//! File formats: JSON documents for model objects and CSV tables for
//! datasets and reports. Column orders are fixed by the `*_COLUMNS`
//! constants. Non-finite floats are written as `inf`, `-inf` or `nan`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::coverage::CoverageReport;
use crate::error::{Error, Result};
use crate::estimators::{LstdqSolution, MomentSet, NextFeatureMode, Provenance, SolverKind};
use crate::experiments::{AuditRow, SweepAggregate, SweepCell};
use crate::features::{AbstractionSpec, FeatureMap};
use crate::mdp::{Policy, StateActionDist, TabularMdp};
use crate::sampling::{Dataset, Transition};

pub const SCHEMA_VERSION: u32 = 1;

pub const DATASET_COLUMNS: [&str; 5] = ["s", "a", "r", "s_next", "a_next"];

pub const COVERAGE_COLUMNS: [&str; 14] = [
    "instance_id",
    "c_phi",
    "c_phi_emp",
    "c_lin",
    "chi2_tabular",
    "agg_concentrability_chi2",
    "perdomo_lhs",
    "perdomo_rhs",
    "sigma_min_a",
    "lambda_min_sigma",
    "kappa_sigma",
    "rho_bpi",
    "burn_in_n0",
    "onpolicy_certified",
];

pub const SWEEP_CELL_COLUMNS: [&str; 7] = ["n", "seed_index", "dataset_seed", "j_hat", "abs_error", "c_hat", "invertible"];

pub const SWEEP_AGGREGATE_COLUMNS: [&str; 10] = [
    "n",
    "num_cells",
    "invertibility_rate",
    "rmse",
    "error_quantile",
    "c_hat_median",
    "burn_in_n0",
    "bound_rhs",
    "bound_ratio",
    "bound_checked",
];

pub const AUDIT_COLUMNS: [&str; 4] = ["instance_id", "property_id", "residual", "pass"];

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, source: csv::Error) -> Error {
    Error::Csv {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })
}

/// Shortest text that parses back to the same `f64`.
pub fn format_float(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{x:?}")
    }
}

pub fn parse_float(s: &str) -> Option<f64> {
    match s.trim() {
        "inf" | "+inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        "nan" => Some(f64::NAN),
        t => t.parse().ok(),
    }
}

fn format_opt(x: Option<f64>) -> String {
    x.map(format_float).unwrap_or_default()
}

/// Serde adapter for scalars that may be infinite.
pub mod float_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_str(&super::format_float(*x))
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => super::parse_float(&t)
                .ok_or_else(|| serde::de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

fn check_version(v: u32, path: &Path) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "{}: schema_version {v} is not supported (expected {SCHEMA_VERSION})",
            path.display()
        )));
    }
    Ok(())
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{what}: rows have different lengths")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn default_version() -> u32 {
    SCHEMA_VERSION
}

/// MDP document. `transition[s][a][s']`, `mean_reward[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpDoc {
    #[serde(default = "default_version")]
    pub schema_version: u32,
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    pub r_max: f64,
    #[serde(default)]
    pub reward_noise_halfwidth: f64,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub mean_reward: Vec<Vec<f64>>,
    pub initial_dist: Vec<f64>,
}

impl MdpDoc {
    pub fn from_mdp(mdp: &TabularMdp) -> Self {
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        Self {
            schema_version: SCHEMA_VERSION,
            num_states: ns,
            num_actions: na,
            gamma: mdp.gamma(),
            r_max: mdp.r_max(),
            reward_noise_halfwidth: mdp.reward_noise_halfwidth(),
            transition: (0..ns)
                .map(|s| (0..na).map(|a| mdp.transition().row(mdp.pair(s, a)).iter().copied().collect()).collect())
                .collect(),
            mean_reward: (0..ns).map(|s| (0..na).map(|a| mdp.mean_reward()[mdp.pair(s, a)]).collect()).collect(),
            initial_dist: mdp.initial_dist().iter().copied().collect(),
        }
    }

    pub fn to_mdp(&self) -> Result<TabularMdp> {
        let (ns, na) = (self.num_states, self.num_actions);
        let shape_ok = self.transition.len() == ns
            && self.mean_reward.len() == ns
            && self.transition.iter().all(|per_s| per_s.len() == na && per_s.iter().all(|row| row.len() == ns))
            && self.mean_reward.iter().all(|r| r.len() == na);
        if !shape_ok {
            return Err(Error::InvalidMdp(format!(
                "transition must be {ns}x{na}x{ns} and mean_reward {ns}x{na}"
            )));
        }
        let p = DMatrix::from_fn(ns * na, ns, |pair, s2| self.transition[pair / na][pair % na][s2]);
        let r = DVector::from_fn(ns * na, |pair, _| self.mean_reward[pair / na][pair % na]);
        TabularMdp::new(
            ns,
            na,
            p,
            r,
            DVector::from_vec(self.initial_dist.clone()),
            self.gamma,
            self.r_max,
            self.reward_noise_halfwidth,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDoc {
    #[serde(default = "default_version")]
    pub schema_version: u32,
    /// `action_probs[s][a]`.
    pub action_probs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesDoc {
    #[serde(default = "default_version")]
    pub schema_version: u32,
    pub feature_bound: f64,
    /// One row per state-action pair, in `s * num_actions + a` order.
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbstractionDoc {
    #[serde(default = "default_version")]
    pub schema_version: u32,
    pub num_blocks: usize,
    pub state_to_block: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionDoc {
    #[serde(default = "default_version")]
    pub schema_version: u32,
    /// One entry per state-action pair.
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentSetDoc {
    #[serde(default = "default_version")]
    pub schema_version: u32,
    pub gamma: f64,
    pub provenance: Provenance,
    pub n: Option<usize>,
    pub next_feature_mode: NextFeatureMode,
    pub sigma: Vec<Vec<f64>>,
    pub sigma_cr: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub phi0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionDoc {
    #[serde(default = "default_version")]
    pub schema_version: u32,
    pub solver: SolverKind,
    pub invertible: bool,
    pub non_unique: bool,
    #[serde(with = "float_or_inf")]
    pub min_singular_a: f64,
    pub theta: Option<Vec<f64>>,
    pub j_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    #[serde(default = "default_version")]
    pub schema_version: u32,
    pub seed: u64,
    pub n: usize,
    pub mu_d: Vec<f64>,
}

pub fn save_mdp(path: &Path, mdp: &TabularMdp) -> Result<()> {
    write_json(path, &MdpDoc::from_mdp(mdp))
}

pub fn load_mdp(path: &Path) -> Result<TabularMdp> {
    let doc: MdpDoc = read_json(path)?;
    check_version(doc.schema_version, path)?;
    doc.to_mdp()
}

pub fn save_policy(path: &Path, pi: &Policy) -> Result<()> {
    write_json(
        path,
        &PolicyDoc {
            schema_version: SCHEMA_VERSION,
            action_probs: to_rows(pi.action_probs()),
        },
    )
}

pub fn load_policy(path: &Path) -> Result<Policy> {
    let doc: PolicyDoc = read_json(path)?;
    check_version(doc.schema_version, path)?;
    Policy::new(from_rows(&doc.action_probs, "action_probs")?)
}

pub fn save_features(path: &Path, fmap: &FeatureMap) -> Result<()> {
    write_json(
        path,
        &FeaturesDoc {
            schema_version: SCHEMA_VERSION,
            feature_bound: fmap.feature_bound(),
            matrix: to_rows(fmap.matrix()),
        },
    )
}

pub fn load_features(path: &Path) -> Result<FeatureMap> {
    let doc: FeaturesDoc = read_json(path)?;
    check_version(doc.schema_version, path)?;
    FeatureMap::new(from_rows(&doc.matrix, "matrix")?, doc.feature_bound)
}

pub fn save_abstraction(path: &Path, spec: &AbstractionSpec) -> Result<()> {
    write_json(
        path,
        &AbstractionDoc {
            schema_version: SCHEMA_VERSION,
            num_blocks: spec.num_blocks(),
            state_to_block: spec.state_to_block().to_vec(),
        },
    )
}

pub fn load_abstraction(path: &Path) -> Result<AbstractionSpec> {
    let doc: AbstractionDoc = read_json(path)?;
    check_version(doc.schema_version, path)?;
    AbstractionSpec::new(doc.state_to_block, doc.num_blocks)
}

pub fn save_distribution(path: &Path, dist: &StateActionDist) -> Result<()> {
    write_json(
        path,
        &DistributionDoc {
            schema_version: SCHEMA_VERSION,
            probs: dist.probs().iter().copied().collect(),
        },
    )
}

pub fn load_distribution(path: &Path) -> Result<StateActionDist> {
    let doc: DistributionDoc = read_json(path)?;
    check_version(doc.schema_version, path)?;
    StateActionDist::new(DVector::from_vec(doc.probs))
}

impl MomentSetDoc {
    pub fn from_moments(m: &MomentSet) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            gamma: m.gamma(),
            provenance: m.provenance(),
            n: m.n(),
            next_feature_mode: m.next_feature_mode(),
            sigma: to_rows(m.sigma()),
            sigma_cr: to_rows(m.sigma_cr()),
            b: m.b_vec().iter().copied().collect(),
            phi0: m.phi0().iter().copied().collect(),
        }
    }

    pub fn to_moments(&self) -> Result<MomentSet> {
        MomentSet::new(
            from_rows(&self.sigma, "sigma")?,
            from_rows(&self.sigma_cr, "sigma_cr")?,
            DVector::from_vec(self.b.clone()),
            DVector::from_vec(self.phi0.clone()),
            self.gamma,
            self.provenance,
            self.n,
            self.next_feature_mode,
        )
    }
}

pub fn save_moments(path: &Path, m: &MomentSet) -> Result<()> {
    write_json(path, &MomentSetDoc::from_moments(m))
}

pub fn load_moments(path: &Path) -> Result<MomentSet> {
    let doc: MomentSetDoc = read_json(path)?;
    check_version(doc.schema_version, path)?;
    doc.to_moments()
}

impl SolutionDoc {
    pub fn new(sol: &LstdqSolution, j_hat: Option<f64>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            solver: sol.solver,
            invertible: sol.invertible,
            non_unique: sol.non_unique,
            min_singular_a: sol.min_singular_a,
            theta: sol.theta.as_ref().map(|t| t.iter().copied().collect()),
            j_hat,
        }
    }
}

/// Metadata file written next to a dataset CSV.
pub fn dataset_meta_path(csv_path: &Path) -> PathBuf {
    let mut name = csv_path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    csv_path.with_file_name(name)
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let scratch = Path::new("<buffer>");
    w.write_record(header).map_err(|e| csv_err(scratch, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(scratch, e))?;
    }
    w.into_inner().map_err(|e| io_err(scratch, e.into_error()))
}

fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let found = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::Config(format!(
            "{}: expected header {}, found {}",
            path.display(),
            header.join(","),
            found.iter().collect::<Vec<_>>().join(",")
        )));
    }
    r.records().collect::<std::result::Result<_, _>>().map_err(|e| csv_err(path, e))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path, col: &str) -> Result<T> {
    let line = rec.position().map_or(0, |p| p.line());
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Config(format!("{}: line {line}: bad value in column {col}", path.display())))
}

fn float_field(rec: &csv::StringRecord, i: usize, path: &Path, col: &str) -> Result<f64> {
    let line = rec.position().map_or(0, |p| p.line());
    rec.get(i)
        .and_then(parse_float)
        .ok_or_else(|| Error::Config(format!("{}: line {line}: bad number in column {col}", path.display())))
}

/// Writes the CSV plus its metadata sidecar.
pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let rows = data.transitions().iter().map(|t| {
        vec![
            t.s.to_string(),
            t.a.to_string(),
            format_float(t.r),
            t.s_next.to_string(),
            t.a_next.to_string(),
        ]
    });
    write_atomic(path, &csv_bytes(&DATASET_COLUMNS, rows)?)?;
    write_json(
        &dataset_meta_path(path),
        &DatasetMeta {
            schema_version: SCHEMA_VERSION,
            seed: data.seed(),
            n: data.len(),
            mu_d: data.mu_d().probs().iter().copied().collect(),
        },
    )
}

/// Reads a dataset and validates it against `mdp`.
pub fn load_dataset(path: &Path, mdp: &TabularMdp) -> Result<Dataset> {
    let meta_path = dataset_meta_path(path);
    let meta: DatasetMeta = read_json(&meta_path)?;
    check_version(meta.schema_version, &meta_path)?;
    let transitions = read_csv(path, &DATASET_COLUMNS)?
        .iter()
        .map(|rec| {
            Ok(Transition {
                s: field(rec, 0, path, "s")?,
                a: field(rec, 1, path, "a")?,
                r: float_field(rec, 2, path, "r")?,
                s_next: field(rec, 3, path, "s_next")?,
                a_next: field(rec, 4, path, "a_next")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if transitions.len() != meta.n {
        return Err(Error::Config(format!(
            "{}: {} rows but metadata says n = {}",
            path.display(),
            transitions.len(),
            meta.n
        )));
    }
    Dataset::new(transitions, meta.seed, StateActionDist::new(DVector::from_vec(meta.mu_d))?, mdp)
}

pub fn coverage_csv_bytes(rows: &[(String, CoverageReport)]) -> Result<Vec<u8>> {
    csv_bytes(
        &COVERAGE_COLUMNS,
        rows.iter().map(|(id, r)| {
            vec![
                id.clone(),
                format_float(r.c_phi),
                format_opt(r.c_phi_emp),
                format_float(r.c_lin),
                format_opt(r.chi2_tabular),
                format_opt(r.agg_concentrability_chi2),
                format_float(r.perdomo_lhs),
                format_float(r.perdomo_rhs),
                format_float(r.sigma_min_a),
                format_float(r.lambda_min_sigma),
                format_float(r.kappa_sigma),
                format_float(r.rho_bpi),
                format_float(r.burn_in_n0),
                r.onpolicy_certified.to_string(),
            ]
        }),
    )
}

pub fn write_coverage_csv(path: &Path, rows: &[(String, CoverageReport)]) -> Result<()> {
    write_atomic(path, &coverage_csv_bytes(rows)?)
}

pub fn sweep_cells_csv_bytes(cells: &[SweepCell]) -> Result<Vec<u8>> {
    csv_bytes(
        &SWEEP_CELL_COLUMNS,
        cells.iter().map(|c| {
            vec![
                c.n.to_string(),
                c.seed_index.to_string(),
                c.dataset_seed.to_string(),
                format_opt(c.j_hat),
                format_float(c.abs_error),
                format_float(c.c_hat),
                c.invertible.to_string(),
            ]
        }),
    )
}

pub fn write_sweep_cells_csv(path: &Path, cells: &[SweepCell]) -> Result<()> {
    write_atomic(path, &sweep_cells_csv_bytes(cells)?)
}

pub fn read_sweep_cells_csv(path: &Path) -> Result<Vec<SweepCell>> {
    read_csv(path, &SWEEP_CELL_COLUMNS)?
        .iter()
        .map(|rec| {
            let j_hat = match rec.get(3) {
                Some("") => None,
                _ => Some(float_field(rec, 3, path, "j_hat")?),
            };
            Ok(SweepCell {
                n: field(rec, 0, path, "n")?,
                seed_index: field(rec, 1, path, "seed_index")?,
                dataset_seed: field(rec, 2, path, "dataset_seed")?,
                j_hat,
                abs_error: float_field(rec, 4, path, "abs_error")?,
                c_hat: float_field(rec, 5, path, "c_hat")?,
                invertible: field(rec, 6, path, "invertible")?,
            })
        })
        .collect()
}

pub fn sweep_aggregates_csv_bytes(aggs: &[SweepAggregate]) -> Result<Vec<u8>> {
    csv_bytes(
        &SWEEP_AGGREGATE_COLUMNS,
        aggs.iter().map(|a| {
            vec![
                a.n.to_string(),
                a.num_cells.to_string(),
                format_float(a.invertibility_rate),
                format_float(a.rmse),
                format_float(a.error_quantile),
                format_float(a.c_hat_median),
                format_float(a.burn_in_n0),
                format_float(a.bound_rhs),
                format_float(a.bound_ratio),
                a.bound_checked.to_string(),
            ]
        }),
    )
}

pub fn write_sweep_aggregates_csv(path: &Path, aggs: &[SweepAggregate]) -> Result<()> {
    write_atomic(path, &sweep_aggregates_csv_bytes(aggs)?)
}

pub fn audit_csv_bytes(rows: &[AuditRow]) -> Result<Vec<u8>> {
    csv_bytes(
        &AUDIT_COLUMNS,
        rows.iter().map(|r| {
            vec![
                r.instance_id.clone(),
                r.property_id.clone(),
                format_float(r.residual),
                r.pass.to_string(),
            ]
        }),
    )
}

pub fn write_audit_csv(path: &Path, rows: &[AuditRow]) -> Result<()> {
    write_atomic(path, &audit_csv_bytes(rows)?)
}
