//! Supervised detection loss and the distillation losses, each returning
//! its value together with the analytic gradient with respect to the
//! student's raw outputs.
//!
//! Probabilities are floored at [`PROB_FLOOR`] before taking logarithms;
//! where the floor is active the corresponding gradient is zero.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadOutputs, OutputGrads};

pub const PROB_FLOOR: f64 = 1e-12;

/// Weights of the box-head, RPN and mask distillation terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for KdWeights {
    fn default() -> Self {
        KdWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

impl KdWeights {
    pub const ZERO: KdWeights = KdWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Distillation terms before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct KdTerms {
    pub box_kd: f64,
    pub rpn_kd: f64,
    pub mask_kd: f64,
}

pub fn total_loss(sup: f64, kd: KdTerms, w: &KdWeights) -> f64 {
    sup + w.lambda1 * kd.box_kd + w.lambda2 * kd.rpn_kd + w.lambda3 * kd.mask_kd
}

pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Pulls `dL/dp` back through a row softmax: `dz_j = p_j (g_j - Σ_c g_c p_c)`.
fn softmax_pullback(probs: ArrayView1<f64>, grad_p: &[f64], out: &mut [f64]) {
    let inner: f64 = probs.iter().zip(grad_p).map(|(p, g)| p * g).sum();
    for ((o, &p), &g) in out.iter_mut().zip(probs).zip(grad_p) {
        *o = p * (g - inner);
    }
}

#[inline]
fn floored_log(p: f64) -> (f64, bool) {
    if p > PROB_FLOOR {
        (p.ln(), true)
    } else {
        (PROB_FLOOR.ln(), false)
    }
}

fn check_prob_rows(name: &str, m: ArrayView2<f64>) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let sum = row.sum();
        if (sum - 1.0).abs() > 1e-5 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid(format!("{name} row {i} is not a probability vector (sum {sum})")));
        }
    }
    Ok(())
}

/// Plain distillation on probability rows:
/// `-(1 / (R·C)) Σ_i Σ_c teacher[i,c] · ln student[i,c]`.
pub fn kd_loss(teacher: ArrayView2<f64>, student: ArrayView2<f64>) -> Result<f64> {
    if teacher.dim() != student.dim() {
        return Err(Error::Shape(format!("teacher {:?} vs student {:?}", teacher.dim(), student.dim())));
    }
    check_prob_rows("teacher", teacher)?;
    check_prob_rows("student", student)?;
    let (r, c) = teacher.dim();
    if r == 0 || c == 0 {
        return Ok(0.0);
    }
    let sum: f64 = teacher
        .iter()
        .zip(student.iter())
        .map(|(&q, &p)| q * floored_log(p).0)
        .sum();
    Ok(-sum / (r * c) as f64)
}

/// [`kd_loss`] on logits. The teacher softmax spans its `C` columns; the
/// student softmax is renormalised over its first `C` columns, and the
/// gradient of any further student column is zero.
pub fn kd_loss_logits(teacher: ArrayView2<f64>, student: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let (r, c) = teacher.dim();
    if student.nrows() != r || student.ncols() < c {
        return Err(Error::Shape(format!("teacher {:?} vs student {:?}", teacher.dim(), student.dim())));
    }
    let mut grad = Array2::zeros(student.dim());
    if r == 0 || c == 0 {
        return Ok((0.0, grad));
    }
    let q = softmax_rows(teacher);
    let p = softmax_rows(student.slice(s![.., ..c]));
    let norm = 1.0 / (r * c) as f64;
    let mut value = 0.0;
    let mut gp = vec![0.0; c];
    let mut dz = vec![0.0; c];
    for i in 0..r {
        for j in 0..c {
            let (lg, live) = floored_log(p[[i, j]]);
            value -= q[[i, j]] * lg;
            gp[j] = if live { -norm * q[[i, j]] / p[[i, j]] } else { 0.0 };
        }
        softmax_pullback(p.row(i), &gp, &mut dz);
        grad.slice_mut(s![i, ..c]).assign(&ArrayView1::from(&dz));
    }
    Ok((value * norm, grad))
}

/// Output of the box-head distillation.
#[derive(Debug, Clone)]
pub struct BoxKd {
    pub classification: f64,
    pub regression: f64,
    pub grad_p: Array2<f64>,
    pub grad_r: Array2<f64>,
}

impl BoxKd {
    pub fn value(&self) -> f64 {
        self.classification + self.regression
    }
}

/// Background-aware distillation of the box head.
///
/// Column 0 is background in both heads; the student's columns past the
/// teacher's are the new classes. The teacher's background probability is
/// matched against the student's background plus new-class mass and old
/// foreground classes are matched directly, averaged over `R·C` with `C`
/// the teacher's column count. The regression term is the mean squared
/// difference of the teacher-argmax class deltas over rows whose largest
/// teacher foreground probability exceeds `tau_reg`.
pub fn unbiased_kd_box(
    teacher_p: ArrayView2<f64>,
    student_p: ArrayView2<f64>,
    teacher_r: ArrayView2<f64>,
    student_r: ArrayView2<f64>,
    tau_reg: f64,
) -> Result<BoxKd> {
    let (rows, ct) = teacher_p.dim();
    let cs = student_p.ncols();
    if student_p.nrows() != rows || cs < ct || ct == 0 {
        return Err(Error::Shape(format!(
            "class sets do not nest: teacher {:?}, student {:?}",
            teacher_p.dim(),
            student_p.dim()
        )));
    }
    if teacher_r.dim() != (rows, 4 * ct) || student_r.dim() != (rows, 4 * cs) {
        return Err(Error::Shape(format!(
            "regression outputs {:?}/{:?} do not match {rows} rows of {ct}/{cs} classes",
            teacher_r.dim(),
            student_r.dim()
        )));
    }
    let mut out = BoxKd {
        classification: 0.0,
        regression: 0.0,
        grad_p: Array2::zeros(student_p.dim()),
        grad_r: Array2::zeros(student_r.dim()),
    };
    if rows == 0 {
        log::warn!("box distillation called with no proposals; contributing 0");
        return Ok(out);
    }
    let q = softmax_rows(teacher_p);
    let p = softmax_rows(student_p);
    let norm = 1.0 / (rows * ct) as f64;
    let mut gp = vec![0.0; cs];
    let mut dz = vec![0.0; cs];
    for i in 0..rows {
        gp.iter_mut().for_each(|g| *g = 0.0);
        let absorbed = p[[i, 0]] + (ct..cs).map(|j| p[[i, j]]).sum::<f64>();
        let (lg, live) = floored_log(absorbed);
        out.classification -= q[[i, 0]] * lg;
        if live {
            let g = -norm * q[[i, 0]] / absorbed;
            gp[0] = g;
            gp[ct..].iter_mut().for_each(|x| *x = g);
        }
        for c in 1..ct {
            let (lg, live) = floored_log(p[[i, c]]);
            out.classification -= q[[i, c]] * lg;
            if live {
                gp[c] = -norm * q[[i, c]] / p[[i, c]];
            }
        }
        softmax_pullback(p.row(i), &gp, &mut dz);
        out.grad_p.row_mut(i).assign(&ArrayView1::from(&dz));
    }
    out.classification *= norm;

    let gated: Vec<(usize, usize)> = (0..rows)
        .filter_map(|i| {
            let (best, prob) = (1..ct)
                .map(|c| (c, q[[i, c]]))
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            (best > 0 && prob > tau_reg).then_some((i, best))
        })
        .collect();
    if !gated.is_empty() {
        let norm = 1.0 / (4 * gated.len()) as f64;
        for &(i, c) in &gated {
            for k in 0..4 {
                let d = student_r[[i, 4 * c + k]] - teacher_r[[i, 4 * c + k]];
                out.regression += d * d * norm;
                out.grad_r[[i, 4 * c + k]] = 2.0 * d * norm;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RpnKd {
    pub value: f64,
    pub grad_s: Array1<f64>,
    pub grad_omega: Array2<f64>,
}

/// Squared-error distillation of the proposal network: mean over anchors of
/// the objectness difference, plus the mean squared delta difference over
/// anchors whose teacher objectness probability exceeds `tau_obj`.
pub fn rpn_kd_loss(
    teacher_s: ArrayView1<f64>,
    student_s: ArrayView1<f64>,
    teacher_omega: ArrayView2<f64>,
    student_omega: ArrayView2<f64>,
    tau_obj: f64,
) -> Result<RpnKd> {
    let a = teacher_s.len();
    if student_s.len() != a || teacher_omega.dim() != (a, 4) || student_omega.dim() != (a, 4) {
        return Err(Error::Shape(format!(
            "anchor grids differ: objectness {}/{}, deltas {:?}/{:?}",
            a,
            student_s.len(),
            teacher_omega.dim(),
            student_omega.dim()
        )));
    }
    let mut out = RpnKd {
        value: 0.0,
        grad_s: Array1::zeros(a),
        grad_omega: Array2::zeros((a, 4)),
    };
    if a == 0 {
        return Ok(out);
    }
    let norm = 1.0 / a as f64;
    for i in 0..a {
        let d = student_s[i] - teacher_s[i];
        out.value += d * d * norm;
        out.grad_s[i] = 2.0 * d * norm;
    }
    let gated: Vec<usize> = (0..a).filter(|&i| sigmoid(teacher_s[i]) > tau_obj).collect();
    if !gated.is_empty() {
        let norm = 1.0 / (4 * gated.len()) as f64;
        for &i in &gated {
            for k in 0..4 {
                let d = student_omega[[i, k]] - teacher_omega[[i, k]];
                out.value += d * d * norm;
                out.grad_omega[[i, k]] = 2.0 * d * norm;
            }
        }
    }
    Ok(out)
}

/// Pixel-wise [`kd_loss_logits`] over the teacher's `K` mask channels, with
/// `R = N·H·W` outputs. The student's first `K` channels are matched.
pub fn mask_kd_loss(teacher_m: ArrayView4<f64>, student_m: ArrayView4<f64>) -> Result<(f64, Array4<f64>)> {
    let (n, k, h, w) = teacher_m.dim();
    let (sn, sk, sh, sw) = student_m.dim();
    if (sn, sh, sw) != (n, h, w) || sk < k {
        return Err(Error::Shape(format!(
            "mask outputs differ: teacher {:?}, student {:?}",
            teacher_m.dim(),
            student_m.dim()
        )));
    }
    let mut grad = Array4::zeros(student_m.dim());
    if n == 0 || k == 0 {
        return Ok((0.0, grad));
    }
    let rows = |m: ArrayView4<f64>, ch: usize| -> Array2<f64> {
        m.slice(s![.., ..ch, .., ..])
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * h * w, ch))
            .unwrap()
    };
    let (value, g) = kd_loss_logits(rows(teacher_m, k).view(), rows(student_m, k).view())?;
    let g = g.into_shape_with_order((n, h, w, k)).unwrap().permuted_axes([0, 3, 1, 2]);
    grad.slice_mut(s![.., ..k, .., ..]).assign(&g);
    Ok((value, grad))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Returns `(value, d value / d x)`.
#[inline]
fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    let a = x.abs();
    if a < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (a - 0.5 * beta, x.signum())
    }
}

pub const RPN_SMOOTH_L1_BETA: f64 = 1.0 / 9.0;
pub const BOX_SMOOTH_L1_BETA: f64 = 1.0;

/// Training targets for one image, aligned with a [`HeadOutputs`].
#[derive(Debug, Clone)]
pub struct SupervisedTargets {
    /// Per anchor: 1 foreground, 0 background, -1 not sampled.
    pub anchor_labels: Vec<i8>,
    /// `(A, 4)` encoded box targets, read where the label is 1.
    pub anchor_deltas: Array2<f64>,
    /// Per RoI row: index into the head's class layout (0 = background).
    pub roi_labels: Vec<usize>,
    /// `(R, 4)` encoded box targets, read for foreground rows.
    pub roi_deltas: Array2<f64>,
    /// Class index of each of the first `M` mask rows.
    pub mask_labels: Vec<usize>,
    /// `(M, H, W)` binary targets.
    pub mask_targets: Array3<f64>,
}

/// Unweighted parts of the supervised loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SupervisedParts {
    pub objectness: f64,
    pub rpn_box: f64,
    pub classification: f64,
    pub box_regression: f64,
    pub mask: f64,
}

impl SupervisedParts {
    pub fn total(&self) -> f64 {
        self.objectness + self.rpn_box + self.classification + self.box_regression + self.mask
    }
}

/// Multi-task detection loss: binary cross-entropy on sampled anchors,
/// smooth-L1 on foreground anchor deltas, softmax cross-entropy over RoIs,
/// class-specific smooth-L1 box regression and per-pixel binary
/// cross-entropy on the target class mask.
pub fn supervised_loss(out: &HeadOutputs, t: &SupervisedTargets) -> Result<(SupervisedParts, OutputGrads)> {
    let classes = out.p.ncols();
    let anchors = out.s.len();
    let rois = out.p.nrows();
    if t.anchor_labels.len() != anchors || t.anchor_deltas.dim() != (anchors, 4) {
        return Err(Error::Shape(format!("anchor targets for {} anchors, outputs have {anchors}", t.anchor_labels.len())));
    }
    if t.roi_labels.len() != rois || t.roi_deltas.dim() != (rois, 4) {
        return Err(Error::Shape(format!("RoI targets for {} rows, outputs have {rois}", t.roi_labels.len())));
    }
    if let Some(&bad) = t.roi_labels.iter().chain(&t.mask_labels).find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("target class index {bad} outside head domain of {} classes", classes - 1)));
    }
    if t.mask_labels.iter().any(|&l| l == 0) {
        return Err(Error::invalid("mask targets must be foreground classes"));
    }
    let m_rows = t.mask_labels.len();
    let (_, _, mh, mw) = out.m.dim();
    if m_rows > out.m.dim().0 || t.mask_targets.dim() != (m_rows, mh, mw) {
        return Err(Error::Shape(format!(
            "{} mask targets of {:?} vs mask outputs {:?}",
            m_rows,
            t.mask_targets.dim(),
            out.m.dim()
        )));
    }

    let mut parts = SupervisedParts::default();
    let mut g = OutputGrads::zeros_like(out);

    let sampled: Vec<usize> = (0..anchors).filter(|&i| t.anchor_labels[i] >= 0).collect();
    if !sampled.is_empty() {
        let norm = 1.0 / sampled.len() as f64;
        for &i in &sampled {
            let y = if t.anchor_labels[i] == 1 { 1.0 } else { 0.0 };
            let x = out.s[i];
            parts.objectness += (softplus(x) - y * x) * norm;
            g.s[i] = (sigmoid(x) - y) * norm;
            if t.anchor_labels[i] == 1 {
                for k in 0..4 {
                    let (v, d) = smooth_l1(out.omega[[i, k]] - t.anchor_deltas[[i, k]], RPN_SMOOTH_L1_BETA);
                    parts.rpn_box += v * norm;
                    g.omega[[i, k]] = d * norm;
                }
            }
        }
    }

    if rois > 0 {
        let norm = 1.0 / rois as f64;
        let probs = softmax_rows(out.p.view());
        for i in 0..rois {
            let label = t.roi_labels[i];
            parts.classification -= floored_log(probs[[i, label]]).0 * norm;
            for j in 0..classes {
                let y = if j == label { 1.0 } else { 0.0 };
                g.p[[i, j]] = (probs[[i, j]] - y) * norm;
            }
            if label > 0 {
                for k in 0..4 {
                    let col = 4 * label + k;
                    let (v, d) = smooth_l1(out.r[[i, col]] - t.roi_deltas[[i, k]], BOX_SMOOTH_L1_BETA);
                    parts.box_regression += v * norm;
                    g.r[[i, col]] = d * norm;
                }
            }
        }
    }

    if m_rows > 0 {
        let norm = 1.0 / (m_rows * mh * mw) as f64;
        for (i, &label) in t.mask_labels.iter().enumerate() {
            for y in 0..mh {
                for x in 0..mw {
                    let z = out.m[[i, label, y, x]];
                    let target = t.mask_targets[[i, y, x]];
                    parts.mask += (softplus(z) - target * z) * norm;
                    g.m[[i, label, y, x]] = (sigmoid(z) - target) * norm;
                }
            }
        }
    }
    Ok((parts, g))
}

/// Distillation between a teacher and a student head that saw the same
/// proposals. Returns the unweighted terms and the weighted student
/// gradients.
pub fn distillation(
    teacher: &HeadOutputs,
    student: &HeadOutputs,
    w: &KdWeights,
    tau_reg: f64,
    tau_obj: f64,
) -> Result<(KdTerms, OutputGrads)> {
    let mut g = OutputGrads::zeros_like(student);
    let mut terms = KdTerms::default();
    if w.lambda1 > 0.0 {
        let b = unbiased_kd_box(teacher.p.view(), student.p.view(), teacher.r.view(), student.r.view(), tau_reg)?;
        terms.box_kd = b.value();
        g.p.scaled_add(w.lambda1, &b.grad_p);
        g.r.scaled_add(w.lambda1, &b.grad_r);
    }
    if w.lambda2 > 0.0 {
        let r = rpn_kd_loss(teacher.s.view(), student.s.view(), teacher.omega.view(), student.omega.view(), tau_obj)?;
        terms.rpn_kd = r.value;
        g.s.scaled_add(w.lambda2, &r.grad_s);
        g.omega.scaled_add(w.lambda2, &r.grad_omega);
    }
    if w.lambda3 > 0.0 {
        // channel 0 of the mask head carries no class
        let old = teacher.m.dim().1;
        let (v, gm) = mask_kd_loss(teacher.m.slice(s![.., 1..old, .., ..]), student.m.slice(s![.., 1.., .., ..]))?;
        terms.mask_kd = v;
        g.m.slice_mut(s![.., 1.., .., ..]).scaled_add(w.lambda3, &gm);
    }
    Ok((terms, g))
}

/// Gradients of the weighted distillation terms with respect to the
/// teacher's outputs, for runs that let distillation reach the teacher's
/// input features. Gates are treated as constants.
pub fn distillation_teacher_grads(
    teacher: &HeadOutputs,
    student: &HeadOutputs,
    w: &KdWeights,
    tau_reg: f64,
    tau_obj: f64,
) -> Result<OutputGrads> {
    let mut g = OutputGrads::zeros_like(teacher);
    if w.lambda1 > 0.0 {
        let b = unbiased_kd_box(teacher.p.view(), student.p.view(), teacher.r.view(), student.r.view(), tau_reg)?;
        let ct = teacher.p.ncols();
        let rows = teacher.p.nrows();
        if rows > 0 {
            let q = softmax_rows(teacher.p.view());
            let p = softmax_rows(student.p.view());
            let norm = w.lambda1 / (rows * ct) as f64;
            let mut gq = vec![0.0; ct];
            let mut dz = vec![0.0; ct];
            for i in 0..rows {
                let absorbed = p[[i, 0]] + (ct..p.ncols()).map(|j| p[[i, j]]).sum::<f64>();
                gq[0] = -norm * floored_log(absorbed).0;
                for c in 1..ct {
                    gq[c] = -norm * floored_log(p[[i, c]]).0;
                }
                softmax_pullback(q.row(i), &gq, &mut dz);
                g.p.row_mut(i).assign(&ArrayView1::from(&dz));
            }
        }
        // squared differences: teacher gradient mirrors the student's
        let cols = teacher.r.ncols();
        g.r.scaled_add(-w.lambda1, &b.grad_r.slice(s![.., ..cols]));
    }
    if w.lambda2 > 0.0 {
        let r = rpn_kd_loss(teacher.s.view(), student.s.view(), teacher.omega.view(), student.omega.view(), tau_obj)?;
        g.s.scaled_add(-w.lambda2, &r.grad_s);
        g.omega.scaled_add(-w.lambda2, &r.grad_omega);
    }
    if w.lambda3 > 0.0 && teacher.m.dim().0 > 0 {
        let (n, k, h, wd) = teacher.m.dim();
        let c = k - 1;
        if c > 0 {
            let rows = n * h * wd;
            let to_rows = |m: ArrayView4<f64>| -> Array2<f64> {
                m.slice(s![.., 1..k, .., ..])
                    .permuted_axes([0, 2, 3, 1])
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((rows, c))
                    .unwrap()
            };
            let q = softmax_rows(to_rows(teacher.m.view()).view());
            let p = softmax_rows(to_rows(student.m.view()).view());
            let norm = w.lambda3 / (rows * c) as f64;
            let mut gz = Array2::zeros((rows, c));
            let mut gq = vec![0.0; c];
            let mut dz = vec![0.0; c];
            for i in 0..rows {
                for j in 0..c {
                    gq[j] = -norm * floored_log(p[[i, j]]).0;
                }
                softmax_pullback(q.row(i), &gq, &mut dz);
                gz.row_mut(i).assign(&ArrayView1::from(&dz));
            }
            let gz = gz.into_shape_with_order((n, h, wd, c)).unwrap().permuted_axes([0, 3, 1, 2]);
            g.m.slice_mut(s![.., 1..k, .., ..]).assign(&gz);
        }
    }
    Ok(g)
}
