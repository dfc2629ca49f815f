use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// The projected input `z`, before the miner's encoder.
    PreEncoder,
    /// The encoder output `z_e`.
    PostEncoder,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::PreEncoder => "pre_encoder",
            Stage::PostEncoder => "post_encoder",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionExport {
    pub stage: Stage,
    /// `samples × 2`.
    pub coords: Tensor,
    pub k: Vec<usize>,
    pub truth: Option<Vec<usize>>,
}

impl ProjectionExport {
    pub fn new(stage: Stage, coords: Tensor, k: Vec<usize>, truth: Option<Vec<usize>>) -> Result<Self> {
        if coords.rows() != k.len() || truth.as_ref().is_some_and(|t| t.len() != k.len()) {
            return Err(Error::shape("projection_export", "coordinate and label counts differ"));
        }
        Ok(ProjectionExport { stage, coords, k, truth })
    }

    /// CSV with columns `x, y, k` and `truth_domain` when known.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["x", "y", "k"];
        if self.truth.is_some() {
            header.push("truth_domain");
        }
        w.write_record(&header)?;
        for i in 0..self.k.len() {
            let row = self.coords.row(i);
            let mut rec = vec![format!("{:e}", row[0]), format!("{:e}", row.get(1).copied().unwrap_or(0.0)), self.k[i].to_string()];
            if let Some(t) = &self.truth {
                rec.push(t[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Projects the rows of `x` onto the top `out_dim` principal axes of the
/// centred data. Each axis is signed so that its first non-negligible
/// component is positive. Constant data maps to zeros.
pub fn pca_project(x: &Tensor, out_dim: usize) -> Result<Tensor> {
    let (n, d) = (x.rows(), x.cols());
    if out_dim == 0 || out_dim > d || n < out_dim {
        return Err(Error::Contract(format!(
            "pca to {out_dim} dims needs at least that many samples and columns, got {n}×{d}"
        )));
    }
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean();
    let mut centred = m;
    for mut row in centred.row_iter_mut() {
        row -= &mean;
    }
    if centred.iter().all(|v| *v == 0.0) {
        log::warn!("pca input is constant; returning zero coordinates");
        return Ok(Tensor::zeros(&[n, out_dim]));
    }
    let cov = centred.transpose() * &centred / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut axes = DMatrix::zeros(d, out_dim);
    for (c, &i) in order[..out_dim].iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let scale = v.amax();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12 * scale.max(1.0)) {
            if *first < 0.0 {
                v = -v;
            }
        }
        axes.set_column(c, &v);
    }
    let proj = centred * axes;
    let mut data = Vec::with_capacity(n * out_dim);
    for r in 0..n {
        data.extend(proj.row(r).iter());
    }
    Tensor::matrix(n, out_dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_collapses_second_axis() {
        let pts: Vec<f64> = (0..10).flat_map(|i| [i as f64, i as f64]).collect();
        let p = pca_project(&Tensor::matrix(10, 2, pts).unwrap(), 2).unwrap();
        assert!((0..10).all(|i| p.row(i)[1].abs() < 1e-9));
    }

    #[test]
    fn constant_input_gives_zeros() {
        let p = pca_project(&Tensor::full(&[5, 3], 2.0), 2).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(pca_project(&Tensor::zeros(&[1, 3]), 2).is_err());
        assert!(pca_project(&Tensor::zeros(&[5, 1]), 2).is_err());
    }
}
