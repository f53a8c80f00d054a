//! Dataset ingestion, splits, standardization, experiment runs and the
//! verification suites.

pub mod verify;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inference::{elbo_batch, test_loglik, train, TraceRecord, TrainOptions, TrainSchedule};
use crate::model::{DwpModel, ModelConfig};
use crate::numerics::{Matrix, RngStream};

/// Hash of the library sources this binary was built from.
pub const SOURCE_HASH: &str = env!("DWP_SOURCE_HASH");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub path: PathBuf,
    /// Target column; `None` means the last one.
    pub target_col: Option<usize>,
    pub skip_header: bool,
    pub split_seed: u64,
    pub split_index: u64,
    pub train_fraction: f64,
    /// Optional whitespace-separated row indices for the train and test sets.
    pub index_files: Option<(PathBuf, PathBuf)>,
}

impl DatasetSpec {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        DatasetSpec {
            path: path.into(),
            target_col: None,
            skip_header: false,
            split_seed: 0,
            split_index: 0,
            train_fraction: 0.9,
            index_files: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    /// `P x 1` targets.
    pub y: Matrix,
}

/// Reads a numeric CSV. Rows and columns in errors are 0-based file
/// positions, so a header row that is not skipped fails at `(0, 0)`.
pub fn load_csv(spec: &DatasetSpec) -> Result<Dataset> {
    let text = fs::read_to_string(&spec.path)?;
    parse_csv(&text, spec.target_col, spec.skip_header)
}

pub fn parse_csv(text: &str, target_col: Option<usize>, skip_header: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|_| Error::Parse { row, col: 0 })?;
        if skip_header && row == 0 {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::Parse { row, col: rec.len().min(w) });
        }
        let vals = rec
            .iter()
            .enumerate()
            .map(|(col, s)| match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Parse { row, col }),
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(vals);
    }
    let w = match width {
        Some(w) if !rows.is_empty() => w,
        _ => return Err(Error::EmptyDataset),
    };
    if w < 2 {
        return Err(Error::Config("need at least one feature and one target column".into()));
    }
    let t = target_col.unwrap_or(w - 1);
    if t >= w {
        return Err(Error::Config(format!("target column {t} out of range for {w} columns")));
    }
    let n = rows.len();
    let x = Matrix::from_fn(n, w - 1, |i, j| rows[i][if j < t { j } else { j + 1 }]);
    let y = Matrix::from_fn(n, 1, |i, _| rows[i][t]);
    Ok(Dataset { x, y })
}

/// Seeded random partition; the train set gets `round(fraction * n)` rows,
/// at least one, and the test set the rest.
pub fn split_indices(n: usize, seed: u64, split_index: u64, fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("train fraction {fraction} not in (0, 1]")));
    }
    let mut perm = RngStream::new(seed, 0x73706c6974 ^ split_index.rotate_left(40)).permutation(n);
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n);
    let test = perm.split_off(n_train);
    Ok((perm, test))
}

fn read_indices(path: &Path, n: usize) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    text.split_whitespace()
        .enumerate()
        .map(|(row, s)| match s.parse::<usize>() {
            Ok(i) if i < n => Ok(i),
            _ => Err(Error::Parse { row, col: 0 }),
        })
        .collect()
}

/// Train and test row indices for `spec`, from its index files if given.
pub fn resolve_split(spec: &DatasetSpec, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    match &spec.index_files {
        None => split_indices(n, spec.split_seed, spec.split_index, spec.train_fraction),
        Some((tr, te)) => {
            let train = read_indices(tr, n)?;
            let test = read_indices(te, n)?;
            let mut seen = vec![false; n];
            for &i in &train {
                seen[i] = true;
            }
            if test.iter().any(|&i| seen[i]) {
                return Err(Error::Config("train and test index files overlap".into()));
            }
            if train.is_empty() {
                return Err(Error::EmptyDataset);
            }
            Ok((train, test))
        }
    }
}

/// Per-column affine maps fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

fn column_stats(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = m.rows() as f64;
    (0..m.cols())
        .map(|j| {
            let c = m.col_vec(j);
            let mean = c.iter().sum::<f64>() / n;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt().max(STD_FLOOR))
        })
        .unzip()
}

fn affine(m: &Matrix, shift: &[f64], scale: &[f64], forward: bool) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| {
        if forward {
            (m[(i, j)] - shift[j]) / scale[j]
        } else {
            m[(i, j)] * scale[j] + shift[j]
        }
    })
}

impl Standardizer {
    pub fn fit(x: &Matrix, y: &Matrix) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let (x_mean, x_std) = column_stats(x);
        let (y_mean, y_std) = column_stats(y);
        Ok(Standardizer {
            x_mean,
            x_std,
            y_mean,
            y_std,
        })
    }

    pub fn x(&self, x: &Matrix) -> Matrix {
        affine(x, &self.x_mean, &self.x_std, true)
    }

    pub fn y(&self, y: &Matrix) -> Matrix {
        affine(y, &self.y_mean, &self.y_std, true)
    }

    pub fn inverse_x(&self, x: &Matrix) -> Matrix {
        affine(x, &self.x_mean, &self.x_std, false)
    }

    pub fn inverse_y(&self, y: &Matrix) -> Matrix {
        affine(y, &self.y_mean, &self.y_std, false)
    }
}

/// Standardized train and test arrays plus the fitted transform.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub transform: Standardizer,
}

pub fn prepare(data: &Dataset, train_idx: &[usize], test_idx: &[usize]) -> Result<PreparedData> {
    let (xtr, ytr) = (data.x.select_rows(train_idx), data.y.select_rows(train_idx));
    let (xte, yte) = (data.x.select_rows(test_idx), data.y.select_rows(test_idx));
    let t = Standardizer::fit(&xtr, &ytr)?;
    Ok(PreparedData {
        train: Dataset {
            x: t.x(&xtr),
            y: t.y(&ytr),
        },
        test: Dataset {
            x: t.x(&xte),
            y: t.y(&yte),
        },
        transform: t,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ModelConfig,
    pub schedule: TrainSchedule,
    pub data: DatasetSpec,
    pub transform: Standardizer,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub steps_run: usize,
    pub initial_elbo_per_n: f64,
    pub final_elbo_per_n: Option<f64>,
    /// Test log-likelihood per point in original target units.
    pub test_ll: Option<f64>,
    pub wall_time_s: f64,
    pub code_hash: String,
}

impl RunRecord {
    /// SHA-256 of the record with wall time zeroed, so reruns with the same
    /// inputs hash identically.
    pub fn content_hash(&self) -> String {
        let mut r = self.clone();
        r.wall_time_s = 0.0;
        let bytes = serde_json::to_vec(&r).expect("record serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))?;
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| Error::Io(e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub data: DatasetSpec,
    pub config: ModelConfig,
    pub schedule: TrainSchedule,
    pub seed: u64,
}

/// Output file names inside a run directory.
pub const RECORD_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRACE_FILE: &str = "trace.jsonl";

/// Full-batch ELBO per training point.
pub fn elbo_per_n(model: &DwpModel, x: &Matrix, y: &Matrix, samples: usize, rng: &RngStream) -> Result<f64> {
    Ok(elbo_batch(model, x, y, x.rows(), samples, rng)?.total / x.rows() as f64)
}

/// Loads, splits and standardizes the data, initializes and trains a model,
/// with widths defaulting to the input dimension when `config.widths` is empty,
/// and writes the record, checkpoint and trace into `out_dir`. If training
/// stops on a non-finite value the last finite model is still checkpointed
/// before the error is returned.
pub fn run_experiment(
    spec: &ExperimentSpec,
    out_dir: &Path,
    mut on_step: impl FnMut(&TraceRecord),
) -> Result<RunRecord> {
    let start = Instant::now();
    let data = load_csv(&spec.data)?;
    let (tr, te) = resolve_split(&spec.data, data.x.rows())?;
    let prep = prepare(&data, &tr, &te)?;
    let mut config = spec.config.clone();
    config.input_dim = data.x.cols();
    if config.widths.is_empty() {
        config.widths = vec![config.input_dim; config.depth];
    }
    config.validate()?;
    fs::create_dir_all(out_dir)?;

    let root = RngStream::new(spec.seed, 0);
    let mut model = DwpModel::init(config.clone(), &prep.train.x, &mut root.split(1))?;
    let eval_rng = root.split(2);
    let (x, y) = (&prep.train.x, &prep.train.y);
    let initial = elbo_per_n(&model, x, y, config.eval_samples, &eval_rng)?;

    let mut trace_out = BufWriter::new(File::create(out_dir.join(TRACE_FILE))?);
    let opts = TrainOptions {
        seed: spec.seed,
        batch_size: config.batch_size,
        samples: config.train_samples,
    };
    let res = train(&mut model, x, y, &spec.schedule, &opts, |rec| {
        let line = serde_json::to_string(rec).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(trace_out, "{line}")?;
        on_step(rec);
        Ok(())
    });
    trace_out.flush()?;
    model.save_checkpoint(&out_dir.join(CHECKPOINT_FILE))?;
    let trace = res?;

    let final_elbo = if trace.is_empty() {
        None
    } else {
        Some(elbo_per_n(&model, x, y, config.eval_samples, &eval_rng)?)
    };
    let test_ll = if prep.test.x.rows() == 0 {
        None
    } else {
        Some(test_loglik(
            &model,
            &prep.test.x,
            &prep.test.y,
            config.eval_samples,
            &root.split(3),
            &prep.transform.y_std,
        )?)
    };
    let record = RunRecord {
        config,
        schedule: spec.schedule.clone(),
        data: spec.data.clone(),
        transform: prep.transform,
        seed: spec.seed,
        n_train: tr.len(),
        n_test: te.len(),
        steps_run: trace.len(),
        initial_elbo_per_n: initial,
        final_elbo_per_n: final_elbo,
        test_ll,
        wall_time_s: start.elapsed().as_secs_f64(),
        code_hash: SOURCE_HASH.to_string(),
    };
    record.save(&out_dir.join(RECORD_FILE))?;
    Ok(record)
}

/// Evaluates a checkpoint on a whole CSV, standardized with `transform`.
pub fn evaluate(
    model: &DwpModel,
    data: &Dataset,
    transform: &Standardizer,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    test_loglik(
        model,
        &transform.x(&data.x),
        &transform.y(&data.y),
        samples,
        &RngStream::new(seed, 3),
        &transform.y_std,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_examples() {
        let d = parse_csv("1,2,10\n2,3,20\n3,4,30", None, false).unwrap();
        assert_eq!(d.x, Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 3.0], &[3.0, 4.0]]));
        assert_eq!(d.y, Matrix::column(&[10.0, 20.0, 30.0]));
        let hdr = "a,b,y\n1,2,10\n";
        assert_eq!(parse_csv(hdr, None, false), Err(Error::Parse { row: 0, col: 0 }));
        assert_eq!(parse_csv(hdr, None, true).unwrap().y, Matrix::column(&[10.0]));
        assert_eq!(parse_csv("", None, false), Err(Error::EmptyDataset));
        assert_eq!(parse_csv("a,b\n", None, true), Err(Error::EmptyDataset));
        assert_eq!(parse_csv("1,2\n3,x\n", None, false), Err(Error::Parse { row: 1, col: 1 }));
        assert_eq!(parse_csv("1,2,3\n3,4\n", None, false), Err(Error::Parse { row: 1, col: 2 }));
        let d = parse_csv("1,2,10\n2,3,20\n", Some(0), false).unwrap();
        assert_eq!(d.y, Matrix::column(&[1.0, 2.0]));
        assert_eq!(d.x, Matrix::from_rows(&[&[2.0, 10.0], &[3.0, 20.0]]));
    }

    #[test]
    fn splits_partition_rows() {
        let (tr, te) = split_indices(101, 5, 0, 0.9).unwrap();
        assert_eq!((tr.len(), te.len()), (91, 10));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert_eq!(split_indices(101, 5, 0, 0.9).unwrap(), (tr.clone(), te));
        assert_ne!(split_indices(101, 5, 1, 0.9).unwrap().0, tr);
        assert_eq!(split_indices(1, 0, 0, 0.9).unwrap(), (vec![0], vec![]));
    }

    #[test]
    fn standardizer_examples() {
        let x = Matrix::from_rows(&[&[1.0, 5.0], &[3.0, 5.0], &[8.0, 5.0]]);
        let y = Matrix::column(&[2.0, 4.0, 9.0]);
        let t = Standardizer::fit(&x, &y).unwrap();
        let xs = t.x(&x);
        assert_eq!(t.x_std[1], STD_FLOOR);
        for i in 0..3 {
            assert_eq!(xs[(i, 1)], 0.0);
        }
        let m: f64 = xs.col_vec(0).iter().sum::<f64>() / 3.0;
        let v: f64 = xs.col_vec(0).iter().map(|a| a * a).sum::<f64>() / 3.0;
        assert!(m.abs() < 1e-15 && (v - 1.0).abs() < 1e-12);
        assert!(t.inverse_x(&xs).max_abs_diff(&x) < 1e-12);
        assert!(t.inverse_y(&t.y(&y)).max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn record_round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let csv: String = (0..30)
            .map(|i| {
                let a = i as f64 / 10.0;
                format!("{a},{},{}\n", (i % 7) as f64, a.sin())
            })
            .collect();
        let path = dir.path().join("d.csv");
        fs::write(&path, csv).unwrap();
        let mut config = ModelConfig::new(1, 5, 2);
        config.eval_samples = 4;
        config.train_samples = 2;
        let spec = ExperimentSpec {
            data: DatasetSpec::new(&path),
            config,
            schedule: TrainSchedule {
                steps: 0,
                ..TrainSchedule::default()
            },
            seed: 9,
        };
        let r = run_experiment(&spec, &dir.path().join("a"), |_| {}).unwrap();
        assert!(r.final_elbo_per_n.is_none() && r.initial_elbo_per_n.is_finite());
        assert_eq!((r.n_train, r.n_test), (27, 3));
        let back = RunRecord::load(&dir.path().join("a").join(RECORD_FILE)).unwrap();
        assert_eq!(back, r);
        let again = run_experiment(&spec, &dir.path().join("b"), |_| {}).unwrap();
        assert_eq!(again.content_hash(), r.content_hash());
    }
}
