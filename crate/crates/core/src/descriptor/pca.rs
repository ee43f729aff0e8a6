use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

/// Orthonormal linear reduction retaining a target fraction of variance.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub mean: DVector<f64>,
    /// `D × M`, orthonormal columns ordered by decreasing variance.
    pub basis: DMatrix<f64>,
    /// Variance fraction carried by the retained `M` components.
    pub explained_fraction: f64,
    /// All `D` eigenvalues of the covariance, descending.
    pub eigenvalues: Vec<f64>,
}

impl PcaProjection {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Cumulative explained fraction for `m = 1..=D` components.
    pub fn cumulative_explained(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().sum();
        let mut acc = 0.0;
        self.eigenvalues
            .iter()
            .map(|v| {
                acc += v;
                acc / total
            })
            .collect()
    }

    /// Maps projected rows back into feature space.
    pub fn reconstruct(&self, projected: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = projected * self.basis.transpose();
        for mut row in out.row_iter_mut() {
            row += self.mean.transpose();
        }
        out
    }

    pub fn write_into(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.put(&format!("{prefix}.mean"), 1, self.mean.len(), self.mean.as_slice().to_vec());
        let (d, m) = self.basis.shape();
        let rows: Vec<f64> = (0..d).flat_map(|r| (0..m).map(move |c| (r, c))).map(|(r, c)| self.basis[(r, c)]).collect();
        ck.put(&format!("{prefix}.basis"), d, m, rows);
        ck.put(&format!("{prefix}.eigenvalues"), 1, self.eigenvalues.len(), self.eigenvalues.clone());
        ck.put(&format!("{prefix}.explained"), 1, 1, vec![self.explained_fraction]);
    }

    pub fn read_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let mean = ck.tensor(&format!("{prefix}.mean"))?;
        let basis = ck.tensor(&format!("{prefix}.basis"))?;
        let eig = ck.tensor(&format!("{prefix}.eigenvalues"))?;
        let explained = ck.tensor(&format!("{prefix}.explained"))?;
        if mean.rows != 1 || basis.rows != mean.cols || eig.cols != mean.cols || explained.data.len() != 1 {
            return Err(Error::Checkpoint(format!("inconsistent PCA shapes under {prefix}")));
        }
        Ok(Self {
            mean: DVector::from_row_slice(&mean.data),
            basis: DMatrix::from_row_slice(basis.rows, basis.cols, &basis.data),
            explained_fraction: explained.data[0],
            eigenvalues: eig.data.clone(),
        })
    }
}

/// Fits PCA on the rows of `features` and keeps the smallest number of
/// leading components whose variance share reaches `target_fraction`.
///
/// Each basis vector is signed so that its largest-magnitude entry is positive.
pub fn fit_pca(features: &DMatrix<f64>, target_fraction: f64) -> Result<PcaProjection> {
    let (n, d) = features.shape();
    if n < 2 || d == 0 {
        return Err(Error::ShapeMismatch(format!("PCA needs at least 2 rows, got {n}×{d}")));
    }
    if !(target_fraction > 0.0 && target_fraction <= 1.0) {
        return Err(Error::Config(format!("PCA target fraction {target_fraction} outside (0, 1]")));
    }
    let mean: DVector<f64> = features.row_mean().transpose();
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let total = cov.trace();
    let scale = features.abs().max().max(1.0);
    if !(total > 1e-24 * scale * scale) {
        return Err(Error::DegenerateCovariance);
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let eig_total: f64 = eigenvalues.iter().sum();

    let mut m = d;
    let mut acc = 0.0;
    for (i, v) in eigenvalues.iter().enumerate() {
        acc += v;
        if acc >= target_fraction * eig_total * (1.0 - 1e-12) {
            m = i + 1;
            break;
        }
    }
    let explained: f64 = eigenvalues[..m].iter().sum::<f64>() / eig_total;

    let mut basis = DMatrix::zeros(d, m);
    for (c, &src) in order[..m].iter().enumerate() {
        let mut v = eig.eigenvectors.column(src).into_owned();
        v.normalize_mut();
        let lead = v.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if lead < 0.0 {
            v.neg_mut();
        }
        basis.set_column(c, &v);
    }
    Ok(PcaProjection {
        mean,
        basis,
        explained_fraction: explained.min(1.0),
        eigenvalues,
    })
}

/// `(features − mean) · basis`.
pub fn project_pca(p: &PcaProjection, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if features.ncols() != p.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: p.input_dim(),
            got: features.ncols(),
        });
    }
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= p.mean.transpose();
    }
    Ok(centered * &p.basis)
}
