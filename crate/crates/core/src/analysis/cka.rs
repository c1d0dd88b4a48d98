//! Linear centered kernel alignment between feature extractors.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::scenario::ClassId;

/// Linear CKA of two representations of the same `n` examples (rows).
///
/// Uses the feature-space form `||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)`
/// with column-centred inputs.
pub fn linear_cka(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    let n = x.nrows();
    if n != y.nrows() {
        return Err(Error::Shape(format!("CKA inputs have {} and {} rows", n, y.nrows())));
    }
    if n < 2 {
        return Err(Error::invalid(format!("CKA needs at least 2 examples, got {n}")));
    }
    let center = |a: ArrayView2<f64>| -> Array2<f64> {
        let mean = a.mean_axis(Axis(0)).expect("non-empty rows");
        &a - &mean
    };
    let (xc, yc) = (center(x), center(y));
    let fro2 = |m: Array2<f64>| m.iter().map(|v| v * v).sum::<f64>();
    let cross = fro2(yc.t().dot(&xc));
    let xx = fro2(xc.t().dot(&xc)).sqrt();
    let yy = fro2(yc.t().dot(&yc)).sqrt();
    let denom = xx * yy;
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::invalid("CKA is undefined for a representation with zero variance"));
    }
    Ok(cross / denom)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CkaRow {
    pub class_id: ClassId,
    pub images: usize,
    pub cka: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CkaReport {
    pub step_a: usize,
    pub step_b: usize,
    pub branch_a: usize,
    pub branch_b: usize,
    pub rows: Vec<CkaRow>,
    /// Classes with fewer than two images, or zero feature variance.
    pub skipped: Vec<ClassId>,
}

impl CkaReport {
    pub fn get(&self, class: ClassId) -> Option<f64> {
        self.rows.iter().find(|r| r.class_id == class).map(|r| r.cka)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,images,cka\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.6}\n", r.class_id, r.images, r.cka));
        }
        out
    }
}

/// Feature extractor that served step `t`: the newest branch created at or
/// before `t`.
pub fn branch_for_step(state: &ModelState, t: usize) -> Result<usize> {
    state
        .fes
        .iter()
        .enumerate()
        .filter(|(_, f)| f.step <= t)
        .map(|(i, _)| i)
        .last()
        .ok_or_else(|| Error::invalid(format!("no feature extractor exists for step {t}")))
}

/// Global-average-pooled features of every image under one branch.
fn pooled(state: &ModelState, branch: usize, ds: &Dataset) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = ds
        .samples
        .par_iter()
        .map(|s| {
            let f = state.forward_features(branch, &s.pixels)?;
            Ok(f.data.mean_axis(Axis(1)).and_then(|m| m.mean_axis(Axis(1))).map(|v| v.iter().map(|&x| x as f64).collect()).unwrap_or_default())
        })
        .collect::<Result<_>>()?;
    let c = rows.first().map_or(0, Vec::len);
    Array2::from_shape_vec((rows.len(), c), rows.into_iter().flatten().collect()).map_err(|e| Error::Shape(e.to_string()))
}

/// Per-class CKA between the feature extractors of steps `a` and `b`, using
/// the images of `dataset` that contain each class.
pub fn cka_per_class(state: &ModelState, step_a: usize, step_b: usize, dataset: &Dataset) -> Result<CkaReport> {
    let last = state.current_step();
    if let Some(t) = [step_a, step_b].into_iter().find(|&t| t > last) {
        return Err(Error::invalid(format!("step {t} is absent: the model has steps 0..={last}")));
    }
    let branch_a = branch_for_step(state, step_a)?;
    let branch_b = branch_for_step(state, step_b)?;
    let xa = pooled(state, branch_a, dataset)?;
    let xb = pooled(state, branch_b, dataset)?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for class in dataset.classes_present() {
        let idx: Vec<usize> = dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.annotations.iter().any(|a| a.class_id == class))
            .map(|(i, _)| i)
            .collect();
        if idx.len() < 2 {
            log::warn!("class {class}: {} image(s), CKA skipped", idx.len());
            skipped.push(class);
            continue;
        }
        let a = xa.select(Axis(0), &idx);
        let b = xb.select(Axis(0), &idx);
        match linear_cka(a.view(), b.view()) {
            Ok(cka) => rows.push(CkaRow { class_id: class, images: idx.len(), cka }),
            Err(e) => {
                log::warn!("class {class}: {e}");
                skipped.push(class);
            }
        }
    }
    Ok(CkaReport {
        step_a,
        step_b,
        branch_a,
        branch_b,
        rows,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_and_scaled_inputs() {
        let x = array![[1.0, 2.0], [3.0, 1.0], [0.0, 5.0], [2.0, 2.0]];
        assert!((linear_cka(x.view(), x.view()).unwrap() - 1.0).abs() < 1e-12);
        let y = &x * 3.0 + 7.0;
        assert!((linear_cka(x.view(), y.view()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_errors() {
        let x = array![[1.0, 1.0], [1.0, 1.0]];
        let y = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(linear_cka(x.view(), y.view()).is_err());
        assert!(linear_cka(y.view(), y.slice(ndarray::s![..1, ..])).is_err());
    }
}
