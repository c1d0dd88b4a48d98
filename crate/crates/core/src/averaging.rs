//! Weighted averaging of segmentation heads from two steps.
//!
//! Parameters shared by both heads are combined element-wise as
//! `w_i * a + w_j * b`. Class rows that exist only in the later head are
//! copied from it and scaled by `w_i + w_j`. When the weights do not sum to
//! one the result drifts in magnitude; this is allowed but logged.

use std::fmt::Write as _;

use ndarray::{ArrayD, Axis, Slice};
use serde::Serialize;

use crate::analysis::EvalReport;
use crate::error::{Error, Result};
use crate::model::{class_indexed_params, HeadEntry, ModelState, ParamSet};

fn check_weight(name: &str, w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::invalid(format!("{name}={w} must lie in [0, 1]")));
    }
    Ok(())
}

fn combine(a: &ArrayD<f32>, b: &ArrayD<f32>, wi: f32, wj: f32) -> ArrayD<f32> {
    // exact endpoints, even for non-finite inputs
    if wi == 0.0 {
        b * wj
    } else if wj == 0.0 {
        a * wi
    } else {
        a * wi + b * wj
    }
}

/// Averages head `hi` (earlier) into head `hj` (later, same or larger
/// class domain). The result has `hj`'s step and domain.
pub fn average_heads(hi: &HeadEntry, hj: &HeadEntry, wi: f64, wj: f64) -> Result<HeadEntry> {
    check_weight("w_i", wi)?;
    check_weight("w_j", wj)?;
    if hi.step > hj.step {
        return Err(Error::invalid(format!("first head (step {}) must not be newer than the second (step {})", hi.step, hj.step)));
    }
    if !hj.domain.starts_with(&hi.domain) {
        return Err(Error::invalid(format!(
            "class domain {:?} of head {} is not a prefix of {:?} of head {}",
            hi.domain, hi.step, hj.domain, hj.step
        )));
    }
    if ((wi + wj) - 1.0).abs() > 1e-9 {
        log::warn!("averaging weights sum to {}; parameter magnitudes will drift", wi + wj);
    }
    let (a, b) = (hi.params()?, hj.params()?);
    let (fi, fj) = (wi as f32, wj as f32);
    let shared_k = hi.domain.len() + 1;
    let mut out = ParamSet::new();
    for (name, pb) in b.iter() {
        let pa = a
            .try_get(name)
            .ok_or_else(|| Error::Shape(format!("{name} missing from head {}", hi.step)))?;
        let rows = class_indexed_params().iter().find(|(n, _)| n == name).map(|(_, r)| *r);
        let merged = match rows {
            Some(r) => {
                let split = shared_k * r;
                if pa.shape()[0] != split || pa.shape()[1..] != pb.shape()[1..] || pb.shape()[0] < split {
                    return Err(Error::Shape(format!("{name}: {:?} vs {:?} beyond class rows", pa.shape(), pb.shape())));
                }
                let shared = combine(pa, &pb.slice_axis(Axis(0), Slice::from(..split)).to_owned(), fi, fj);
                let only_j = &pb.slice_axis(Axis(0), Slice::from(split..)) * (fi + fj);
                ndarray::concatenate(Axis(0), &[shared.view(), only_j.view()]).map_err(|e| Error::Shape(format!("{name}: {e}")))?
            }
            None => {
                if pa.shape() != pb.shape() {
                    return Err(Error::Shape(format!("{name}: {:?} vs {:?}", pa.shape(), pb.shape())));
                }
                combine(pa, pb, fi, fj)
            }
        };
        out.insert(name.clone(), merged);
    }
    Ok(HeadEntry {
        step: hj.step,
        domain: hj.domain.clone(),
        params: Some(out),
        frozen: hj.frozen,
    })
}

/// Copy of `state` whose newest head is replaced by its average with
/// `earlier`. Feature extractors and backbone are left untouched.
pub fn average_into(state: &ModelState, earlier: &HeadEntry, wi: f64, wj: f64) -> Result<ModelState> {
    let merged = average_heads(earlier, state.last_head(), wi, wj)?;
    let mut out = state.clone();
    *out.heads.last_mut().expect("model has a head") = merged;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub w_i: f64,
    pub w_j: f64,
    pub report: EvalReport,
}

/// Evaluates the averaged head for every weight pair, in input order.
pub fn sweep<F>(hi: &HeadEntry, hj: &HeadEntry, weights: &[(f64, f64)], mut eval: F) -> Result<Vec<SweepRow>>
where
    F: FnMut(&HeadEntry) -> Result<EvalReport>,
{
    weights
        .iter()
        .map(|&(wi, wj)| {
            let head = average_heads(hi, hj, wi, wj)?;
            Ok(SweepRow { w_i: wi, w_j: wj, report: eval(&head)? })
        })
        .collect()
}

/// `w_i,w_j,<group>...` with group mAP per row; absent groups are empty.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    const GROUPS: [&str; 4] = ["base", "intermediary", "new", "all"];
    let mut out = String::from("w_i,w_j");
    for g in GROUPS {
        let _ = write!(out, ",{g}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{}", r.w_i, r.w_j);
        for g in GROUPS {
            match r.report.group(g) {
                Some(v) => {
                    let _ = write!(out, ",{v:.6}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Parses `"0.25,0.75;0.5,0.5"` (pairs separated by `;` or whitespace).
pub fn parse_weight_pairs(text: &str) -> Result<Vec<(f64, f64)>> {
    let pairs: Vec<(f64, f64)> = text
        .split(|c: char| c == ';' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|p| {
            let (a, b) = p
                .split_once(',')
                .ok_or_else(|| Error::invalid(format!("weight pair '{p}' must look like w_i,w_j")))?;
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad weight '{s}'")));
            let (a, b) = (parse(a)?, parse(b)?);
            check_weight("w_i", a)?;
            check_weight("w_j", b)?;
            Ok((a, b))
        })
        .collect::<Result<_>>()?;
    if pairs.is_empty() {
        return Err(Error::invalid("no weight pairs given"));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model_with_domain, expand_head, ArchConfig};

    fn heads() -> (HeadEntry, HeadEntry) {
        let arch = ArchConfig::default();
        let m = build_model_with_domain(&[1, 2, 3], &arch).unwrap();
        let hi = m.heads[0].clone();
        let mut hj = expand_head(&hi, &[4], 9).unwrap();
        // make shared rows differ from the earlier head
        for (_, v) in hj.params.as_mut().unwrap().iter_mut() {
            v.mapv_inplace(|x| x * 0.5 + 0.01);
        }
        (hi, hj)
    }

    #[test]
    fn endpoints_and_midpoint() {
        let (hi, hj) = heads();
        let m01 = average_heads(&hi, &hj, 0.0, 1.0).unwrap();
        assert_eq!(m01.params, hj.params);
        let m10 = average_heads(&hi, &hj, 1.0, 0.0).unwrap();
        let (a, b, m) = (hi.params().unwrap(), hj.params().unwrap(), m10.params().unwrap());
        for (name, v) in m.iter() {
            let rows = class_indexed_params().iter().find(|(n, _)| n == name).map(|(_, r)| *r);
            match rows {
                Some(r) => {
                    let split = 4 * r;
                    assert_eq!(v.slice_axis(Axis(0), Slice::from(..split)), a.get(name).view());
                    assert_eq!(v.slice_axis(Axis(0), Slice::from(split..)), b.get(name).slice_axis(Axis(0), Slice::from(split..)));
                }
                None => assert_eq!(v, a.get(name)),
            }
        }
        assert_eq!(m10.domain, vec![1, 2, 3, 4]);
        let half = average_heads(&hi, &hj, 0.5, 0.5).unwrap();
        let w = half.params().unwrap().get("box.fc.weight");
        let expect = (a.get("box.fc.weight") + b.get("box.fc.weight")) / 2.0;
        assert!(w.iter().zip(expect.iter()).all(|(x, y)| (x - y).abs() <= 1e-7 * y.abs().max(1.0)));
    }

    #[test]
    fn rejects_bad_inputs() {
        let (hi, hj) = heads();
        assert!(average_heads(&hi, &hj, 1.5, 0.0).is_err());
        assert!(average_heads(&hj, &hi, 0.5, 0.5).is_err());
        assert!(parse_weight_pairs("0.5").is_err());
        assert_eq!(parse_weight_pairs("0,1;0.25,0.75").unwrap(), vec![(0.0, 1.0), (0.25, 0.75)]);
    }

    #[test]
    fn linear_on_identical_heads() {
        let (_, hj) = heads();
        let m = average_heads(&hj, &hj, 0.3, 0.4).unwrap();
        let (a, b) = (m.params().unwrap().get("rpn.conv.weight"), hj.params().unwrap().get("rpn.conv.weight"));
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - 0.7 * y).abs() < 1e-6));
    }
}
