//! Set-prediction loss: Hungarian matching of queries to segments, then
//! class cross-entropy plus mask BCE and Dice on matched pairs.

use crate::error::{Error, Result};
use crate::graph::{sigmoid, softplus, Graph, Var};
use crate::mask_decoder::{DecoderOutput, StepPrediction, PV_CLASS};
use crate::tensor::Tensor;

use super::components::GroundTruthSegments;
use super::hungarian::{hungarian_match, Assignment};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
    /// Cross-entropy weight of queries assigned to no-object.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            class: 2.0,
            bce: 5.0,
            dice: 5.0,
            no_object: 0.1,
        }
    }
}

/// Unweighted loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
}

impl LossTerms {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.class * self.class + w.bce * self.bce + w.dice * self.dice
    }

    pub fn is_finite(&self) -> bool {
        self.class.is_finite() && self.bce.is_finite() && self.dice.is_finite()
    }
}

impl std::ops::AddAssign for LossTerms {
    fn add_assign(&mut self, o: Self) {
        self.class += o.class;
        self.bce += o.bce;
        self.dice += o.dice;
    }
}

/// Mean binary cross-entropy of probabilities against binary targets.
pub fn bce_probs(probs: &[f64], target: &[u8]) -> f64 {
    let tiny = f64::MIN_POSITIVE;
    let sum: f64 = probs
        .iter()
        .zip(target)
        .map(|(&p, &y)| if y != 0 { -p.max(tiny).ln() } else { -(1.0 - p).max(tiny).ln() })
        .sum();
    sum / probs.len() as f64
}

/// `1 − 2|P∩Y| / (|P| + |Y|)` on soft masks; 0 when both are empty.
pub fn dice_probs(probs: &[f64], target: &[u8]) -> f64 {
    let (mut inter, mut total) = (0.0, 0.0);
    for (&p, &y) in probs.iter().zip(target) {
        let y = y as f64;
        inter += p * y;
        total += p + y;
    }
    if total == 0.0 {
        0.0
    } else {
        1.0 - 2.0 * inter / total
    }
}

/// Matching cost of one query against one segment.
pub fn match_cost(mask_probs: &[f64], p_pv: f64, segment: &[u8], w: &LossWeights) -> f64 {
    let class = if p_pv >= 1.0 { 0.0 } else { -p_pv.max(f64::MIN_POSITIVE).ln() };
    w.class * class + w.bce * bce_probs(mask_probs, segment) + w.dice * dice_probs(mask_probs, segment)
}

/// `[N × G]` cost matrix for one prediction.
pub fn cost_matrix(mask_logits: &Tensor, class_logits: &Tensor, segments: &GroundTruthSegments, w: &LossWeights) -> Vec<f64> {
    let (n, hw) = mask_logits.dims2();
    let (_, c) = class_logits.dims2();
    let mut cls = class_logits.data().to_vec();
    crate::attention::softmax_rows(&mut cls, c);
    let mut cost = Vec::with_capacity(n * segments.len());
    let mut probs = vec![0.0; hw];
    for q in 0..n {
        for (p, &x) in probs.iter_mut().zip(&mask_logits.data()[q * hw..(q + 1) * hw]) {
            *p = sigmoid(x);
        }
        for seg in &segments.segments {
            cost.push(match_cost(&probs, cls[q * c + PV_CLASS], seg, w));
        }
    }
    cost
}

#[derive(Debug, Clone)]
pub struct StepLoss {
    /// Weighted scalar loss node.
    pub loss: Var,
    pub terms: LossTerms,
    pub assignment: Assignment,
}

fn row_sums(g: &mut Graph, x: Var, ones: Var) -> Var {
    g.matmul(x, ones)
}

/// Loss of a single prediction step against `segments`.
pub fn step_loss(g: &mut Graph, pred: StepPrediction, segments: &GroundTruthSegments, w: &LossWeights) -> Result<StepLoss> {
    let (n, hw) = g.value(pred.masks).dims2();
    let (nc, c) = g.value(pred.classes).dims2();
    if nc != n || hw != segments.width * segments.height {
        return Err(Error::Shape(format!(
            "prediction [{n}, {hw}] vs {} segments of {}x{}",
            segments.len(),
            segments.width,
            segments.height
        )));
    }
    let gcount = segments.len();
    if gcount > n {
        return Err(Error::TooManySegments {
            segments: gcount,
            queries: n,
        });
    }
    let cost = cost_matrix(g.value(pred.masks), g.value(pred.classes), segments, w);
    let assignment = hungarian_match(&cost, n, gcount)?;

    // class cross-entropy, weighted mean over queries
    let no_object = c - 1;
    let mut target = vec![0.0; n * c];
    let mut matched = vec![false; n];
    for &(_, q) in &assignment.pairs {
        matched[q] = true;
    }
    let mut weight_sum = 0.0;
    for q in 0..n {
        let (col, wq) = if matched[q] { (PV_CLASS, 1.0) } else { (no_object, w.no_object) };
        target[q * c + col] = wq;
        weight_sum += wq;
    }
    let logp = g.log_softmax_rows(pred.classes);
    let tgt = g.constant(Tensor::new([n, c], target));
    let picked = g.mul(logp, tgt);
    let total_logp = g.sum(picked);
    let class = g.scale(total_logp, -1.0 / weight_sum);
    let mut loss = g.scale(class, w.class);
    let mut terms = LossTerms {
        class: g.value(class).item(),
        ..LossTerms::default()
    };

    if gcount > 0 {
        let queries: Vec<usize> = assignment.pairs.iter().map(|p| p.1).collect();
        let x = g.gather_rows(pred.masks, &queries);
        let y_data: Vec<f64> = segments.segments.iter().flatten().map(|&v| v as f64).collect();
        let y_sums: Vec<f64> = segments.segments.iter().map(|s| s.iter().map(|&v| v as f64).sum()).collect();
        let y = g.constant(Tensor::new([gcount, hw], y_data));

        // softplus(x) − y·x is the stable form of BCE on sigmoid(x)
        let sp = g.softplus(x);
        let yx = g.mul(y, x);
        let per_pixel = g.sub(sp, yx);
        let bce_sum = g.sum(per_pixel);
        let bce = g.scale(bce_sum, 1.0 / (hw * gcount) as f64);

        let ones = g.constant(Tensor::full([hw, 1], 1.0));
        let p = g.sigmoid(x);
        let py = g.mul(p, y);
        let inter = row_sums(g, py, ones);
        let p_sum = row_sums(g, p, ones);
        let y_sum = g.constant(Tensor::new([gcount, 1], y_sums));
        let den = g.add(p_sum, y_sum);
        let ratio = g.div(inter, den);
        let ratio_sum = g.sum(ratio);
        let dice = g.scale(ratio_sum, -2.0 / gcount as f64);
        let dice = g.add_scalar(dice, 1.0);

        terms.bce = g.value(bce).item();
        terms.dice = g.value(dice).item();
        let wb = g.scale(bce, w.bce);
        let wd = g.scale(dice, w.dice);
        loss = g.add(loss, wb);
        loss = g.add(loss, wd);
    }
    Ok(StepLoss {
        loss,
        terms,
        assignment,
    })
}

/// Sum of step losses: every decoder step when `auxiliary`, otherwise
/// only the final one. Terms are summed the same way.
pub fn set_loss(
    g: &mut Graph,
    out: &DecoderOutput,
    segments: &GroundTruthSegments,
    w: &LossWeights,
    auxiliary: bool,
) -> Result<(Var, LossTerms)> {
    let steps: Vec<StepPrediction> = if auxiliary { out.steps.clone() } else { vec![out.last()] };
    let mut total: Option<Var> = None;
    let mut terms = LossTerms::default();
    for step in steps {
        let s = step_loss(g, step, segments, w)?;
        terms += s.terms;
        total = Some(match total {
            Some(t) => g.add(t, s.loss),
            None => s.loss,
        });
    }
    Ok((total.expect("decoder output has at least one step"), terms))
}

/// Scalar re-implementation of [`step_loss`] for a given assignment; used
/// to cross-check the graph version.
pub fn reference_step_loss(
    mask_logits: &Tensor,
    class_logits: &Tensor,
    segments: &GroundTruthSegments,
    assignment: &Assignment,
    w: &LossWeights,
) -> f64 {
    let (n, hw) = mask_logits.dims2();
    let (_, c) = class_logits.dims2();
    let m = mask_logits.data();
    let cl = class_logits.data();
    let mut ce = 0.0;
    let mut wsum = 0.0;
    for q in 0..n {
        let row = &cl[q * c..(q + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        let (t, wq) = match assignment.pairs.iter().find(|p| p.1 == q) {
            Some(_) => (PV_CLASS, 1.0),
            None => (c - 1, w.no_object),
        };
        ce += wq * (lse - row[t]);
        wsum += wq;
    }
    let mut total = w.class * ce / wsum;
    let gcount = segments.len();
    if gcount == 0 {
        return total;
    }
    let (mut bce, mut dice) = (0.0, 0.0);
    for &(s, q) in &assignment.pairs {
        let seg = &segments.segments[s];
        let (mut inter, mut den) = (0.0, 0.0);
        for k in 0..hw {
            let x = m[q * hw + k];
            let y = seg[k] as f64;
            bce += softplus(x) - y * x;
            let p = sigmoid(x);
            inter += p * y;
            den += p + y;
        }
        dice += 1.0 - 2.0 * inter / den;
    }
    total += w.bce * bce / (hw * gcount) as f64 + w.dice * dice / gcount as f64;
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::MaskPatch;
    use crate::training::components::connected_components;

    fn w() -> LossWeights {
        LossWeights::default()
    }

    #[test]
    fn perfect_match_costs_nothing() {
        let seg = [1u8, 1, 0, 0];
        assert_eq!(match_cost(&[1.0, 1.0, 0.0, 0.0], 1.0, &seg, &w()), 0.0);
    }

    #[test]
    fn dice_examples() {
        let a = [1u8, 1, 0, 0];
        assert_eq!(dice_probs(&[1.0, 1.0, 0.0, 0.0], &a), 0.0);
        assert_eq!(dice_probs(&[0.0, 0.0, 1.0, 1.0], &a), 1.0);
        assert_eq!(dice_probs(&[0.0, 1.0, 1.0, 0.0], &a), 0.5);
        assert_eq!(dice_probs(&[0.0; 4], &[0; 4]), 0.0);
    }

    fn segments_2x2() -> GroundTruthSegments {
        let mut m = MaskPatch::empty(3, 3);
        for (x, y) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            m.set(x, y, 1);
        }
        connected_components(&m)
    }

    #[test]
    fn tiny_fixture_matches_scalar_recomputation() {
        let seg = segments_2x2();
        let masks = Tensor::from_fn([2, 9], |i| ((i * 7 % 11) as f64 - 5.0) * 0.4);
        let classes = Tensor::new([2, 3], vec![0.3, -0.2, 0.1, -1.0, 0.5, 0.7]);
        let mut g = Graph::new();
        let pred = StepPrediction {
            masks: g.constant(masks.clone()),
            classes: g.constant(classes.clone()),
        };
        let s = step_loss(&mut g, pred, &seg, &w()).unwrap();
        let want = reference_step_loss(&masks, &classes, &seg, &s.assignment, &w());
        assert!((g.value(s.loss).item() - want).abs() < 1e-6);
        assert!((s.terms.weighted(&w()) - want).abs() < 1e-9);
        // the assignment must be the cheaper of the two queries
        let cost = cost_matrix(&masks, &classes, &seg, &w());
        let best = if cost[0] <= cost[1] { 0 } else { 1 };
        assert_eq!(s.assignment.pairs, vec![(0, best)]);
    }

    #[test]
    fn empty_ground_truth_is_no_object_ce() {
        let seg = connected_components(&MaskPatch::empty(2, 2));
        let classes = Tensor::new([2, 3], vec![0.3, -0.2, 0.1, -1.0, 0.5, 0.7]);
        let mut g = Graph::new();
        let pred = StepPrediction {
            masks: g.constant(Tensor::zeros([2, 4])),
            classes: g.constant(classes.clone()),
        };
        let s = step_loss(&mut g, pred, &seg, &w()).unwrap();
        let mut probs = classes.data().to_vec();
        crate::attention::softmax_rows(&mut probs, 3);
        let ce = -(probs[2].ln() + probs[5].ln()) / 2.0;
        assert!((s.terms.class - ce).abs() < 1e-12);
        assert_eq!((s.terms.bce, s.terms.dice), (0.0, 0.0));
    }

    #[test]
    fn confident_correct_output_has_near_zero_loss() {
        let seg = segments_2x2();
        let mask_row: Vec<f64> = seg.segments[0].iter().map(|&v| if v == 1 { 40.0 } else { -40.0 }).collect();
        let masks = Tensor::new([2, 9], [mask_row.clone(), vec![-40.0; 9]].concat());
        let classes = Tensor::new([2, 3], vec![40.0, 0.0, 0.0, 0.0, 0.0, 40.0]);
        let mut g = Graph::new();
        let pred = StepPrediction {
            masks: g.constant(masks),
            classes: g.constant(classes),
        };
        let s = step_loss(&mut g, pred, &seg, &w()).unwrap();
        assert!(g.value(s.loss).item() < 1e-12);
        assert!(g.value(s.loss).item() >= 0.0);
    }

    #[test]
    fn too_many_segments_rejected() {
        let m = MaskPatch::new(3, 1, vec![1, 0, 1]).unwrap();
        let seg = connected_components(&m);
        let mut g = Graph::new();
        let pred = StepPrediction {
            masks: g.constant(Tensor::zeros([1, 3])),
            classes: g.constant(Tensor::zeros([1, 3])),
        };
        assert!(matches!(step_loss(&mut g, pred, &seg, &w()), Err(Error::TooManySegments { .. })));
    }
}
