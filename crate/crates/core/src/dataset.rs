//! Regression datasets, CSV ingestion, train/test splitting and standardization.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Largest test split kept by [`split_dataset`].
pub const MAX_TEST_POINTS: usize = 400;

/// `n` inputs in `d` dimensions with scalar targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: Matrix,
    y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<f64>) -> Result<Self> {
        if x.rows() == 0 || x.cols() == 0 {
            return Err(Error::Empty("dataset needs n >= 1 and d >= 1".into()));
        }
        if x.rows() != y.len() {
            return Err(Error::Shape(format!("{} input rows but {} targets", x.rows(), y.len())));
        }
        if !x.all_finite() || !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dataset".into()));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    /// Rows in the given order (row `k` of the result is old row `idx[k]`).
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self { x: self.x.select_rows(idx), y: idx.iter().map(|&i| self.y[i]).collect() }
    }

    /// Input columns in the given order.
    pub fn permute_dims(&self, perm: &[usize]) -> Self {
        Self { x: self.x.select_cols(perm), y: self.y.clone() }
    }

    /// Reorders the values of a single input column, breaking row alignment.
    pub fn shuffle_column(&self, col: usize, perm: &[usize]) -> Self {
        let mut x = self.x.clone();
        let old = self.x.column(col);
        for (r, &p) in perm.iter().enumerate() {
            x.set(r, col, old[p]);
        }
        Self { x, y: self.y.clone() }
    }

    /// Reads a CSV file whose last column is the target. A header row is
    /// detected by its first field failing to parse as a number.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file)
    }

    pub fn from_csv_reader(reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.iter().all(|f| f.is_empty()) {
                continue;
            }
            let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            match parsed {
                Ok(v) => rows.push(v),
                Err(_) if line == 0 => continue,
                Err(e) => return Err(Error::Format(format!("csv line {}: {e}", line + 1))),
            }
        }
        if rows.is_empty() {
            return Err(Error::Empty("csv has no data rows".into()));
        }
        let width = rows[0].len();
        if width < 2 {
            return Err(Error::Format("csv needs at least one input column and a target column".into()));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != width) {
            return Err(Error::Format(format!("csv row {} has {} fields, expected {width}", i + 1, rows[i].len())));
        }
        let n = rows.len();
        let d = width - 1;
        let mut x = Matrix::zeros(n, d);
        let mut y = Vec::with_capacity(n);
        for (r, row) in rows.iter().enumerate() {
            x.row_mut(r).copy_from_slice(&row[..d]);
            y.push(row[d]);
        }
        Self::new(x, y)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (1..=self.d()).map(|i| format!("x{i}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for r in 0..self.n() {
            let mut rec: Vec<String> = self.x.row(r).iter().map(|v| v.to_string()).collect();
            rec.push(self.y[r].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Uniform without-replacement split: `n_train` training rows, the rest as
/// test rows truncated to [`MAX_TEST_POINTS`].
pub fn split_dataset(data: &Dataset, n_train: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_train >= data.n() {
        return Err(Error::Config(format!("n_train must be in 1..{} (got {n_train})", data.n())));
    }
    let mut idx: Vec<usize> = (0..data.n()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let (train, test) = idx.split_at(n_train);
    let test = &test[..test.len().min(MAX_TEST_POINTS)];
    Ok((data.select_rows(train), data.select_rows(test)))
}

/// Per-feature and target z-scoring fitted on a training split, followed by
/// a per-feature min-max map of the inputs onto `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    x_mean: Vec<f64>,
    x_std: Vec<f64>,
    x_min: Vec<f64>,
    x_range: Vec<f64>,
    y_mean: f64,
    y_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    let s = var.sqrt();
    (m, if s > 0.0 && s.is_finite() { s } else { 1.0 })
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Self {
        let d = train.d();
        let mut x_mean = Vec::with_capacity(d);
        let mut x_std = Vec::with_capacity(d);
        let mut x_min = Vec::with_capacity(d);
        let mut x_range = Vec::with_capacity(d);
        for c in 0..d {
            let col = train.x().column(c);
            let (m, s) = mean_std(&col);
            let z: Vec<f64> = col.iter().map(|v| (v - m) / s).collect();
            let lo = z.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            x_mean.push(m);
            x_std.push(s);
            x_min.push(lo);
            x_range.push(if hi > lo { hi - lo } else { 1.0 });
        }
        let (y_mean, y_std) = mean_std(train.y());
        Self { x_mean, x_std, x_min, x_range, y_mean, y_std }
    }

    pub fn transform(&self, data: &Dataset) -> Result<Dataset> {
        if data.d() != self.x_mean.len() {
            return Err(Error::Shape(format!(
                "standardizer fitted on d={} applied to d={}",
                self.x_mean.len(),
                data.d()
            )));
        }
        let mut x = data.x().clone();
        for r in 0..x.rows() {
            for (c, v) in x.row_mut(r).iter_mut().enumerate() {
                let z = (*v - self.x_mean[c]) / self.x_std[c];
                *v = (z - self.x_min[c]) / self.x_range[c];
            }
        }
        let y = data.y().iter().map(|v| (v - self.y_mean) / self.y_std).collect();
        Dataset::new(x, y)
    }

    pub fn y_std(&self) -> f64 {
        self.y_std
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize, d: usize) -> Dataset {
        let x = Matrix::from_vec(n, d, (0..n * d).map(|v| v as f64).collect());
        let y = (0..n).map(|v| v as f64 * 0.5).collect();
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn split_sizes() {
        let (tr, te) = split_dataset(&ramp(1000, 2), 500, 1).unwrap();
        assert_eq!((tr.n(), te.n()), (500, 400));
        let (tr, te) = split_dataset(&ramp(120, 2), 100, 1).unwrap();
        assert_eq!((tr.n(), te.n()), (100, 20));
    }

    #[test]
    fn split_is_deterministic() {
        let data = ramp(50, 1);
        let a = split_dataset(&data, 30, 9).unwrap();
        let b = split_dataset(&data, 30, 9).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&data, 30, 10).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn split_rejects_oversized_train() {
        assert!(split_dataset(&ramp(10, 1), 10, 0).is_err());
        assert!(split_dataset(&ramp(10, 1), 0, 0).is_err());
    }

    #[test]
    fn split_partitions_rows() {
        let data = ramp(40, 1);
        let (tr, te) = split_dataset(&data, 25, 3).unwrap();
        let mut ys: Vec<f64> = tr.y().iter().chain(te.y()).copied().collect();
        ys.sort_by(f64::total_cmp);
        assert_eq!(ys, data.y());
    }

    #[test]
    fn csv_with_and_without_header() {
        let with = "a,b,target\n1,2,3\n4,5,6\n";
        let d = Dataset::from_csv_reader(with.as_bytes()).unwrap();
        assert_eq!((d.n(), d.d()), (2, 2));
        assert_eq!(d.y(), &[3.0, 6.0]);
        let without = "1,3\n2,4\n5,6\n";
        let d = Dataset::from_csv_reader(without.as_bytes()).unwrap();
        assert_eq!((d.n(), d.d()), (3, 1));
        assert!(Dataset::from_csv_reader("1,2\n3\n".as_bytes()).is_err());
        assert!(Dataset::from_csv_reader("1,x\n3,4\n5,z\n".as_bytes()).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let x = Matrix::from_vec(1, 1, vec![f64::NAN]);
        assert!(Dataset::new(x, vec![1.0]).is_err());
    }

    #[test]
    fn standardizer_maps_train_inputs_to_unit_box() {
        let data = ramp(20, 3);
        let s = Standardizer::fit(&data);
        let t = s.transform(&data).unwrap();
        for c in 0..3 {
            let col = t.x().column(c);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo.abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        }
        let (m, sd) = mean_std(t.y());
        assert!(m.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
    }
}
