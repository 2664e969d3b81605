//! Hungarian set matching, the detection loss and the combined
//! weak+strong objective.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Val};
use serde::{Deserialize, Serialize};

/// Ground-truth object in normalized center-size coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class: usize,
    pub cxcywh: [f64; 4],
}

pub fn cxcywh_to_xyxy(b: [f64; 4]) -> [f64; 4] {
    let [cx, cy, w, h] = b;
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

pub fn iou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU minus the enclosing-box penalty, in [-1, 1].
pub fn giou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    let ew = a[2].max(b[2]) - a[0].min(b[0]);
    let eh = a[3].max(b[3]) - a[1].min(b[1]);
    let enclosing = ew * eh;
    inter / union - (enclosing - union) / enclosing
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MatchWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// `[n_pred, n_gt]` matching costs with the per-term breakdown retained.
#[derive(Clone, Debug)]
pub struct CostMatrix {
    pub n_pred: usize,
    pub n_gt: usize,
    pub values: Vec<f64>,
    pub class_term: Vec<f64>,
    pub l1_term: Vec<f64>,
    pub giou_term: Vec<f64>,
}

impl CostMatrix {
    pub fn from_values(values: Vec<f64>, n_pred: usize, n_gt: usize) -> Result<Self> {
        if values.len() != n_pred * n_gt {
            return Err(Error::contract(format!(
                "cost matrix {n_pred}x{n_gt} needs {} values, got {}",
                n_pred * n_gt,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost matrix entry".into()));
        }
        Ok(CostMatrix {
            n_pred,
            n_gt,
            class_term: vec![0.0; values.len()],
            l1_term: vec![0.0; values.len()],
            giou_term: vec![0.0; values.len()],
            values,
        })
    }

    pub fn at(&self, pred: usize, gt: usize) -> f64 {
        self.values[pred * self.n_gt + gt]
    }
}

/// DETR-style matching cost over class probability (not log-probability),
/// box L1 distance and negative gIoU.
pub fn match_cost(
    class_probs: &[f64],
    boxes: &[f64],
    n_pred: usize,
    classes: usize,
    targets: &[GtBox],
    weights: MatchWeights,
) -> Result<CostMatrix> {
    if targets.is_empty() {
        return Err(Error::contract("match_cost requires at least one target"));
    }
    let n_gt = targets.len();
    let k = classes + 1;
    if class_probs.len() != n_pred * k || boxes.len() != n_pred * 4 {
        return Err(Error::contract(format!(
            "match_cost: {} probs / {} boxes for {} predictions, {} classes",
            class_probs.len(),
            boxes.len(),
            n_pred,
            classes
        )));
    }
    let mut cm = CostMatrix {
        n_pred,
        n_gt,
        values: vec![0.0; n_pred * n_gt],
        class_term: vec![0.0; n_pred * n_gt],
        l1_term: vec![0.0; n_pred * n_gt],
        giou_term: vec![0.0; n_pred * n_gt],
    };
    for i in 0..n_pred {
        let pb = [boxes[i * 4], boxes[i * 4 + 1], boxes[i * 4 + 2], boxes[i * 4 + 3]];
        let p_xyxy = cxcywh_to_xyxy(pb);
        for (j, gt) in targets.iter().enumerate() {
            if gt.class >= classes {
                return Err(Error::contract(format!(
                    "target class {} out of range for {} classes",
                    gt.class, classes
                )));
            }
            let idx = i * n_gt + j;
            let class_cost = -class_probs[i * k + gt.class];
            let l1: f64 = (0..4).map(|c| (pb[c] - gt.cxcywh[c]).abs()).sum();
            let giou = giou_xyxy(p_xyxy, cxcywh_to_xyxy(gt.cxcywh));
            cm.class_term[idx] = class_cost;
            cm.l1_term[idx] = l1;
            cm.giou_term[idx] = -giou;
            cm.values[idx] =
                weights.class * class_cost + weights.l1 * l1 + weights.giou * (-giou);
        }
    }
    if cm.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("match cost entry".into()));
    }
    Ok(cm)
}

/// Injective assignment of predictions onto all ground-truth objects,
/// sorted by prediction index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        // Summed in target order so equal assignments sum identically.
        let mut by_gt = self.pairs.clone();
        by_gt.sort_by_key(|&(_, gt)| gt);
        by_gt.iter().map(|&(p, g)| cost.at(p, g)).sum()
    }

    pub fn pred_for_gt(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(_, g)| g == gt).map(|&(p, _)| p)
    }
}

/// Shortest-augmenting-path Hungarian over an `[n_pred, n_gt]` matrix
/// with `n_pred >= n_gt`. The dual potentials keep every step O(n^2),
/// and negative costs are handled exactly.
fn hungarian_core(cost: &CostMatrix) -> Vec<(usize, usize)> {
    let n = cost.n_gt; // rows of the dual formulation: targets
    let m = cost.n_pred; // columns: predictions
    let at = |gt: usize, pred: usize| cost.at(pred, gt);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut assigned_row = vec![0usize; m + 1]; // target index + 1 per pred column
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        assigned_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = Vec::with_capacity(n);
    for j in 1..=m {
        if assigned_row[j] != 0 {
            pairs.push((j - 1, assigned_row[j] - 1));
        }
    }
    pairs.sort_unstable();
    pairs
}

fn submatrix_min_cost(
    cost: &CostMatrix,
    preds: &[usize],
    gts: &[usize],
) -> Option<f64> {
    if gts.is_empty() {
        return Some(0.0);
    }
    if preds.len() < gts.len() {
        return None;
    }
    let mut values = Vec::with_capacity(preds.len() * gts.len());
    for &p in preds {
        for &g in gts {
            values.push(cost.at(p, g));
        }
    }
    let sub = CostMatrix::from_values(values, preds.len(), gts.len()).ok()?;
    let pairs = hungarian_core(&sub);
    let mut total = 0.0;
    for (p, g) in pairs {
        total += sub.at(p, g);
    }
    Some(total)
}

/// Minimum-total-cost injective assignment covering every target. Among
/// equal-cost optima the lexicographically smallest pair sequence
/// (ordered by prediction index) is returned, fixed pair by pair against
/// re-solved completions.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    if cost.n_gt == 0 {
        return Err(Error::contract("hungarian needs at least one target"));
    }
    if cost.n_pred < cost.n_gt {
        return Err(Error::contract(format!(
            "hungarian needs n_pred >= n_gt, got {} < {}; pad predictions upstream",
            cost.n_pred, cost.n_gt
        )));
    }
    let optimal: f64 = {
        let pairs = hungarian_core(cost);
        pairs.iter().map(|&(p, g)| cost.at(p, g)).sum()
    };
    let tol = 1e-9 * optimal.abs().max(1.0);

    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(cost.n_gt);
    let mut used_gt = vec![false; cost.n_gt];
    let mut fixed_cost = 0.0;
    let mut next_pred = 0usize;
    while fixed.len() < cost.n_gt {
        let mut advanced = false;
        'search: for i in next_pred..cost.n_pred {
            for g in 0..cost.n_gt {
                if used_gt[g] {
                    continue;
                }
                let rest_preds: Vec<usize> = (i + 1..cost.n_pred).collect();
                let rest_gts: Vec<usize> =
                    (0..cost.n_gt).filter(|&x| !used_gt[x] && x != g).collect();
                if let Some(rest) = submatrix_min_cost(cost, &rest_preds, &rest_gts) {
                    if (fixed_cost + cost.at(i, g) + rest - optimal).abs() <= tol {
                        fixed.push((i, g));
                        used_gt[g] = true;
                        fixed_cost += cost.at(i, g);
                        next_pred = i + 1;
                        advanced = true;
                        break 'search;
                    }
                }
            }
        }
        debug_assert!(advanced, "lexicographic completion must always exist");
        if !advanced {
            return Err(Error::contract("hungarian failed to canonicalize ties"));
        }
    }
    Ok(Assignment { pairs: fixed })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DetLossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    /// Cross-entropy weight of the no-object class.
    pub no_object: f64,
}

impl Default for DetLossWeights {
    fn default() -> Self {
        DetLossWeights {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
            no_object: 0.1,
        }
    }
}

/// DETR detection loss: weighted cross-entropy over C+1 classes with
/// unmatched predictions labeled no-object, plus L1 and gIoU terms on the
/// matched boxes (normalized by the number of targets). The assignment is
/// a constant; no gradient flows through the matching.
pub fn detection_loss<T: Real>(
    tape: &mut Tape<T>,
    class_logits: Val,
    boxes: Val,
    targets: &[GtBox],
    assignment: &Assignment,
    classes: usize,
    weights: DetLossWeights,
) -> Result<Val> {
    let n = tape.shape(class_logits)[0];
    if assignment.pairs.len() != targets.len() {
        return Err(Error::contract(format!(
            "assignment covers {} targets, got {}",
            assignment.pairs.len(),
            targets.len()
        )));
    }
    let no_object = classes;
    let mut ce_targets = vec![no_object; n];
    for &(p, g) in &assignment.pairs {
        ce_targets[p] = targets[g].class;
    }
    let mut class_weights = vec![T::one(); classes + 1];
    class_weights[no_object] = T::from_f64(weights.no_object);
    let ce = tape.weighted_cross_entropy(class_logits, &ce_targets, &class_weights)?;

    let g = targets.len();
    let matched_rows: Vec<usize> = assignment.pairs.iter().map(|&(p, _)| p).collect();
    let matched = tape.gather_rows(boxes, &matched_rows)?;
    let target_boxes: Vec<T> = assignment
        .pairs
        .iter()
        .flat_map(|&(_, gt)| targets[gt].cxcywh.iter().map(|&v| T::from_f64(v)))
        .collect();
    let tgt = tape.constant(target_boxes, vec![g, 4])?;

    let diff = tape.sub(matched, tgt)?;
    let l1_abs = tape.abs(diff);
    let l1_sum = tape.sum_all(l1_abs);
    let l1 = tape.scale(l1_sum, T::from_f64(1.0 / g as f64));

    let giou = giou_on_tape(tape, matched, tgt)?;
    let ones = tape.constant(vec![T::one(); g], vec![g, 1])?;
    let giou_gap = tape.sub(ones, giou)?;
    let giou_sum = tape.sum_all(giou_gap);
    let lg = tape.scale(giou_sum, T::from_f64(1.0 / g as f64));

    let ce_w = tape.scale(ce, T::from_f64(weights.class));
    let l1_w = tape.scale(l1, T::from_f64(weights.l1));
    let lg_w = tape.scale(lg, T::from_f64(weights.giou));
    let s = tape.add(ce_w, l1_w)?;
    tape.add(s, lg_w)
}

/// Differentiable gIoU between `[g, 4]` predicted and target boxes in
/// center-size form, returned as a `[g, 1]` column.
fn giou_on_tape<T: Real>(tape: &mut Tape<T>, pred: Val, tgt: Val) -> Result<Val> {
    let half = T::from_f64(0.5);
    let col = |tape: &mut Tape<T>, v: Val, c: usize| tape.narrow_cols(v, c, 1);
    let corners = |tape: &mut Tape<T>, b: Val| -> Result<[Val; 4]> {
        let cx = col(tape, b, 0)?;
        let cy = col(tape, b, 1)?;
        let w = col(tape, b, 2)?;
        let h = col(tape, b, 3)?;
        let hw = tape.scale(w, half);
        let hh = tape.scale(h, half);
        Ok([
            tape.sub(cx, hw)?,
            tape.sub(cy, hh)?,
            tape.add(cx, hw)?,
            tape.add(cy, hh)?,
        ])
    };
    let [px1, py1, px2, py2] = corners(tape, pred)?;
    let [tx1, ty1, tx2, ty2] = corners(tape, tgt)?;

    let ix1 = tape.max_e(px1, tx1)?;
    let iy1 = tape.max_e(py1, ty1)?;
    let ix2 = tape.min_e(px2, tx2)?;
    let iy2 = tape.min_e(py2, ty2)?;
    let iw_raw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw_raw);
    let ih_raw = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih_raw);
    let inter = tape.mul(iw, ih)?;

    let pw = tape.sub(px2, px1)?;
    let ph = tape.sub(py2, py1)?;
    let area_p = tape.mul(pw, ph)?;
    let tw = tape.sub(tx2, tx1)?;
    let th = tape.sub(ty2, ty1)?;
    let area_t = tape.mul(tw, th)?;
    let areas = tape.add(area_p, area_t)?;
    let union = tape.sub(areas, inter)?;
    let iou = tape.div(inter, union)?;

    let ex1 = tape.min_e(px1, tx1)?;
    let ey1 = tape.min_e(py1, ty1)?;
    let ex2 = tape.max_e(px2, tx2)?;
    let ey2 = tape.max_e(py2, ty2)?;
    let ew = tape.sub(ex2, ex1)?;
    let eh = tape.sub(ey2, ey1)?;
    let enclosing = tape.mul(ew, eh)?;
    let gap = tape.sub(enclosing, union)?;
    let penalty = tape.div(gap, enclosing)?;
    tape.sub(iou, penalty)
}

/// Loss weights of the combined objective; the detection term carries an
/// implicit weight of 1.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub bc: f64,
    pub dc: f64,
    pub cq: f64,
    pub fq: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            bc: 1.0,
            dc: 0.5,
            cq: 10.0,
            fq: 10.0,
        }
    }
}

/// Scalar loss terms of one image; absent components contribute nothing.
#[derive(Clone, Copy, Default)]
pub struct LossTerms {
    pub det: Option<Val>,
    pub cq: Option<Val>,
    pub fq: Option<Val>,
    pub bc: Option<Val>,
    pub dc: Option<Val>,
}

/// Weighted combination `w_bc*bc + w_dc*dc + w_cq*cq + w_fq*fq + det`.
pub fn combine_losses<T: Real>(
    tape: &mut Tape<T>,
    terms: &LossTerms,
    weights: LossWeights,
) -> Result<Val> {
    let mut total = tape.constant(vec![T::zero()], vec![1])?;
    let add_term = |tape: &mut Tape<T>, total: Val, v: Option<Val>, w: f64| -> Result<Val> {
        match v {
            None => Ok(total),
            Some(v) => {
                let scaled = tape.scale(v, T::from_f64(w));
                tape.add(total, scaled)
            }
        }
    };
    total = add_term(tape, total, terms.bc, weights.bc)?;
    total = add_term(tape, total, terms.dc, weights.dc)?;
    total = add_term(tape, total, terms.cq, weights.cq)?;
    total = add_term(tape, total, terms.fq, weights.fq)?;
    total = add_term(tape, total, terms.det, 1.0)?;
    Ok(total)
}

/// One structured record of all loss components. `total` is the exact
/// weighted combination of the stored components.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossReport {
    pub l_det: f64,
    pub l_cq: f64,
    pub l_fq: f64,
    pub l_bc: f64,
    pub l_dc: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn combined(&self) -> f64 {
        self.weights.bc * self.l_bc
            + self.weights.dc * self.l_dc
            + self.weights.cq * self.l_cq
            + self.weights.fq * self.l_fq
            + self.l_det
    }

    pub fn is_finite(&self) -> bool {
        [self.l_det, self.l_cq, self.l_fq, self.l_bc, self.l_dc, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Name of the first non-finite component, for abort diagnostics.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("l_det", self.l_det),
            ("l_cq", self.l_cq),
            ("l_fq", self.l_fq),
            ("l_bc", self.l_bc),
            ("l_dc", self.l_dc),
            ("total", self.total),
        ]
        .iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| *n)
    }
}
