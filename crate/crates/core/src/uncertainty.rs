//! Monte-Carlo inference and predictive uncertainty metrics. Entropies are in bits.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{Mode, Model, PassContext};
use crate::params::Binder;
use crate::tensor::Tensor;

const SUM_TOL: f64 = 1e-9;

/// Samples per forward chunk in batched Monte-Carlo inference. Masks and weight draws
/// depend only on the pass index, so chunking does not change results.
pub const MC_CHUNK: usize = 250;

/// Statistics of `T` stochastic forward passes for one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSummary {
    pub passes: Vec<Vec<f64>>,
    pub mean_softmax: Vec<f64>,
    pub votes: Vec<usize>,
    pub popular_class: usize,
    pub class_counts: Vec<usize>,
    pub popular_softmax_values: Vec<f64>,
    pub mutual_information: f64,
    pub mean_entropy: f64,
    pub predictive_entropy: f64,
    /// Population standard deviation of each class probability across passes.
    pub std_per_class: Vec<f64>,
    /// Set when more than one pass was requested from a model without stochastic layers.
    pub deterministic_warning: bool,
}

impl PredictiveSummary {
    pub fn from_passes(passes: Vec<Vec<f64>>, deterministic_warning: bool) -> Result<Self> {
        let k = check_rows(&passes)?;
        let t = passes.len() as f64;
        let mean_softmax = column_mean(&passes, k);
        let std_per_class = (0..k)
            .map(|j| {
                let var = passes.iter().map(|r| (r[j] - mean_softmax[j]).powi(2)).sum::<f64>() / t;
                var.sqrt()
            })
            .collect();
        let votes: Vec<usize> = passes.iter().map(|r| argmax(r)).collect();
        let class_counts = vote_counts(&votes, k);
        let popular_class = argmax_counts(&class_counts);
        let popular_softmax_values = passes.iter().map(|r| r[popular_class]).collect();
        let predictive_entropy = entropy(&mean_softmax)?;
        let mean_entropy = passes.iter().map(|r| entropy(r)).sum::<Result<f64>>()? / t;
        let (mean_entropy, mutual_information) = if all_identical(&passes) {
            (predictive_entropy, 0.0)
        } else {
            (mean_entropy, (predictive_entropy - mean_entropy).max(0.0))
        };
        Ok(Self {
            passes,
            mean_softmax,
            votes,
            popular_class,
            class_counts,
            popular_softmax_values,
            mutual_information,
            mean_entropy,
            predictive_entropy,
            std_per_class,
            deterministic_warning,
        })
    }

    pub fn n_passes(&self) -> usize {
        self.passes.len()
    }

    /// Mean softmax probability of the popular-vote class; the rejection statistic.
    pub fn popular_confidence(&self) -> f64 {
        self.mean_softmax[self.popular_class]
    }
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Domain("at least one pass is required".into()))?;
    let k = first.len();
    if k == 0 {
        return Err(Error::Domain("empty probability vector".into()));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != k) {
        return Err(Error::dim("passes", &[k], &[r.len()]));
    }
    Ok(k)
}

fn all_identical(rows: &[Vec<f64>]) -> bool {
    rows.windows(2).all(|w| w[0] == w[1])
}

/// Column means; identical rows return the row itself so that spreads come out as
/// exact zeros.
fn column_mean(rows: &[Vec<f64>], k: usize) -> Vec<f64> {
    if all_identical(rows) {
        return rows[0].clone();
    }
    let mut mean = vec![0.0; k];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    let t = rows.len() as f64;
    mean.iter_mut().for_each(|m| *m /= t);
    mean
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn vote_counts(votes: &[usize], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for &v in votes {
        counts[v] += 1;
    }
    counts
}

fn argmax_counts(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Most frequent class among `votes`, ties to the lowest index.
pub fn popular_vote(votes: &[usize], n_classes: usize) -> Result<usize> {
    if votes.is_empty() {
        return Err(Error::Domain("no votes".into()));
    }
    if let Some(&v) = votes.iter().find(|&&v| v >= n_classes) {
        return Err(Error::Domain(format!("vote {v} outside {n_classes} classes")));
    }
    Ok(argmax_counts(&vote_counts(votes, n_classes)))
}

/// Shannon entropy in bits, with `0 · log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::Domain("empty probability vector".into()));
    }
    if let Some(x) = p.iter().find(|x| !(**x >= 0.0)) {
        return Err(Error::Domain(format!("probability entry {x} is negative or NaN")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::Domain(format!("probabilities sum to {s}")));
    }
    Ok(-p.iter().filter(|&&x| x > 0.0).map(|x| x * x.log2()).sum::<f64>())
}

/// `H[mean row] − mean_t H[row_t]` in bits, clamped at zero and exactly zero when
/// every row is the same.
pub fn mutual_information(passes: &[Vec<f64>]) -> Result<f64> {
    let k = check_rows(passes)?;
    if all_identical(passes) {
        entropy(&passes[0])?;
        return Ok(0.0);
    }
    let mean = column_mean(passes, k);
    let h_mean = entropy(&mean)?;
    let mean_h = passes.iter().map(|r| entropy(r)).sum::<Result<f64>>()? / passes.len() as f64;
    Ok((h_mean - mean_h).max(0.0))
}

/// Softmax outputs of `t` Monte-Carlo passes for every sample, indexed `[sample][pass][class]`.
///
/// Layers ahead of the first stochastic layer run once per chunk; the remaining layers
/// run once per pass with the lineage `(master, pass, layer)`.
pub fn mc_passes(model: &Model, inputs: &Tensor, t: usize, master: u64) -> Result<Vec<Vec<Vec<f64>>>> {
    if t == 0 {
        return Err(Error::Config("at least one Monte-Carlo pass is required".into()));
    }
    let n = inputs.shape()[0];
    let expected = model.batch_shape(n);
    if inputs.shape() != expected.as_slice() {
        return Err(Error::dim("mc_predict", &expected, inputs.shape()));
    }
    let split = model.stochastic_split();
    let end = model.layers.len();
    let mut out: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(MC_CHUNK) {
        let x = inputs.rows(chunk)?;
        let prefix = {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let xv = tape.constant(x);
            let mut ctx = PassContext::new(Mode::Sample, master, 0);
            let y = model.forward_range(&mut tape, &mut binder, xv, &mut ctx, 0..split)?;
            tape.value(y).clone()
        };
        let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(t); chunk.len()];
        for pass in 0..t {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let xv = tape.constant(prefix.clone());
            let mut ctx = PassContext::new(Mode::Sample, master, pass as u64);
            let logits = model.forward_range(&mut tape, &mut binder, xv, &mut ctx, split..end)?;
            let probs = tape.softmax(logits);
            let k = model.n_classes;
            for (row, p) in rows.iter_mut().zip(tape.value(probs).data().chunks(k)) {
                row.push(p.to_vec());
            }
        }
        out.extend(rows);
    }
    Ok(out)
}

/// Monte-Carlo predictive summaries for a batch `[n, ...input_shape]`.
pub fn mc_predict_batch(model: &Model, inputs: &Tensor, t: usize, master: u64) -> Result<Vec<PredictiveSummary>> {
    let warn = t > 1 && !model.is_stochastic();
    mc_passes(model, inputs, t, master)?
        .into_iter()
        .map(|p| PredictiveSummary::from_passes(p, warn))
        .collect()
}

/// Monte-Carlo predictive summary for one input, given with or without a batch axis.
pub fn mc_predict(model: &Model, input: &Tensor, t: usize, master: u64) -> Result<PredictiveSummary> {
    let x = if input.shape() == model.input_shape.as_slice() {
        input.clone().reshape(&model.batch_shape(1))?
    } else {
        input.clone()
    };
    if x.shape()[0] != 1 {
        return Err(Error::dim("mc_predict", &model.batch_shape(1), input.shape()));
    }
    Ok(mc_predict_batch(model, &x, t, master)?.remove(0))
}

/// Per-pixel statistics of `T` segmentation passes. Class-resolved maps are `[K, h, w]`,
/// scalar maps `[h, w]`, both flattened row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelUncertaintyMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub mean_prediction: Vec<f64>,
    pub std: Vec<f64>,
    pub mutual_information: Vec<f64>,
    pub popular_vote: Vec<usize>,
    /// `|mean_prediction − one_hot(truth)|` per class, when a ground truth is given.
    pub absolute_error: Option<Vec<f64>>,
}

impl PixelUncertaintyMap {
    /// Mean of the per-pixel mutual information.
    pub fn mean_mutual_information(&self) -> f64 {
        self.mutual_information.iter().sum::<f64>() / self.mutual_information.len() as f64
    }
}

/// Applies the scalar metrics at every pixel of `passes: [T, K, h, w]`. `truth`, when
/// given, holds class indices `[h, w]`.
pub fn pixelwise_uncertainty(passes: &Tensor, truth: Option<&[usize]>) -> Result<PixelUncertaintyMap> {
    let &[t, k, h, w] = passes.shape() else {
        return Err(Error::dim("pixelwise_uncertainty", &[0, 0, 0, 0], passes.shape()));
    };
    let hw = h * w;
    if let Some(truth) = truth {
        if truth.len() != hw {
            return Err(Error::dim("pixelwise_uncertainty", &[h, w], &[truth.len()]));
        }
        if let Some(c) = truth.iter().find(|&&c| c >= k) {
            return Err(Error::Domain(format!("truth class {c} outside {k} classes")));
        }
    }
    let d = passes.data();
    let mut map = PixelUncertaintyMap {
        classes: k,
        height: h,
        width: w,
        mean_prediction: vec![0.0; k * hw],
        std: vec![0.0; k * hw],
        mutual_information: vec![0.0; hw],
        popular_vote: vec![0; hw],
        absolute_error: truth.map(|_| vec![0.0; k * hw]),
    };
    for px in 0..hw {
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|ti| (0..k).map(|c| d[(ti * k + c) * hw + px]).collect())
            .collect();
        let s = PredictiveSummary::from_passes(rows, false)?;
        for c in 0..k {
            map.mean_prediction[c * hw + px] = s.mean_softmax[c];
            map.std[c * hw + px] = s.std_per_class[c];
        }
        map.mutual_information[px] = s.mutual_information;
        map.popular_vote[px] = s.popular_class;
        if let (Some(err), Some(truth)) = (map.absolute_error.as_mut(), truth) {
            for c in 0..k {
                let target = if truth[px] == c { 1.0 } else { 0.0 };
                err[c * hw + px] = (s.mean_softmax[c] - target).abs();
            }
        }
    }
    Ok(map)
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice_score(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dim("dice_score", &[pred.len()], &[truth.len()]));
    }
    let a = pred.iter().filter(|&&x| x).count();
    let b = truth.iter().filter(|&&x| x).count();
    if a + b == 0 {
        return Ok(1.0);
    }
    let both = pred.iter().zip(truth).filter(|(&x, &y)| x && y).count();
    Ok(2.0 * both as f64 / (a + b) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionCurve {
    pub thresholds: Vec<f64>,
    pub retained_fraction: Vec<f64>,
    /// `None` where no sample is retained.
    pub retained_accuracy: Vec<Option<f64>>,
}

impl RejectionCurve {
    /// Index of the largest threshold that keeps at least one sample.
    pub fn strictest_nonempty(&self) -> Option<usize> {
        self.retained_accuracy.iter().rposition(Option::is_some)
    }
}

/// `n` evenly spaced thresholds from 0 to 1 inclusive.
pub fn threshold_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn default_thresholds() -> Vec<f64> {
    threshold_grid(101)
}

/// Keeps samples whose popular-class mean softmax is at least each threshold, and
/// scores popular-vote accuracy on what remains.
pub fn rejection_analysis(
    summaries: &[PredictiveSummary],
    labels: &[usize],
    thresholds: &[f64],
) -> Result<RejectionCurve> {
    if summaries.len() != labels.len() {
        return Err(Error::Length {
            expected: summaries.len(),
            actual: labels.len(),
        });
    }
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Domain("thresholds must be ascending".into()));
    }
    let n = summaries.len();
    let scored: Vec<(f64, bool)> = summaries
        .iter()
        .zip(labels)
        .map(|(s, &y)| (s.popular_confidence(), s.popular_class == y))
        .collect();
    let mut curve = RejectionCurve {
        thresholds: thresholds.to_vec(),
        retained_fraction: Vec::with_capacity(thresholds.len()),
        retained_accuracy: Vec::with_capacity(thresholds.len()),
    };
    for &tau in thresholds {
        let kept = scored.iter().filter(|(c, _)| *c >= tau);
        let (count, correct) = kept.fold((0usize, 0usize), |(n, k), (_, ok)| (n + 1, k + *ok as usize));
        curve
            .retained_fraction
            .push(if n == 0 { 0.0 } else { count as f64 / n as f64 });
        curve
            .retained_accuracy
            .push((count > 0).then(|| correct as f64 / count as f64));
    }
    Ok(curve)
}

/// Class vote counts and a histogram of the popular-class softmax values over `n_bins`
/// equal-width bins on `[0, 1]`, left-closed except the last.
pub fn histogram_counts(summary: &PredictiveSummary, n_bins: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_bins == 0 {
        return Err(Error::Domain("at least one bin is required".into()));
    }
    let mut bins = vec![0; n_bins];
    for &v in &summary.popular_softmax_values {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!("softmax value {v} outside [0, 1]")));
        }
        bins[bin_index(v, n_bins)] += 1;
    }
    Ok((summary.class_counts.clone(), bins))
}

/// Largest `i < n` with `i / n ≤ v`, comparing against the edges as computed in f64.
fn bin_index(v: f64, n: usize) -> usize {
    let edge = |i: usize| i as f64 / n as f64;
    let mut i = ((v * n as f64).floor() as usize).min(n - 1);
    while i > 0 && edge(i) > v {
        i -= 1;
    }
    while i + 1 < n && edge(i + 1) <= v {
        i += 1;
    }
    i
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!(close(entropy(&[0.1; 10]).unwrap(), 10f64.log2(), 1e-12));
        // -(0.8 log2 0.8 + 0.2 log2 0.2)
        assert!(close(entropy(&[0.8, 0.2]).unwrap(), 0.721928, 1e-6));
        assert!(matches!(entropy(&[1.2, -0.2]), Err(Error::Domain(_))));
        assert!(entropy(&[0.5, 0.4]).is_err());
    }

    #[test]
    fn mutual_information_examples() {
        assert!(close(
            mutual_information(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            1.0,
            1e-15
        ));
        assert_eq!(mutual_information(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap(), 0.0);
        let mi = mutual_information(&[vec![0.8, 0.2], vec![0.6, 0.4]]).unwrap();
        assert!(close(mi, 0.0349, 5e-5), "{mi}");
        assert!(mutual_information(&[]).is_err());
    }

    #[test]
    fn summary_fields() {
        let s = PredictiveSummary::from_passes(
            vec![
                vec![0.6, 0.4, 0.0],
                vec![0.2, 0.3, 0.5],
                vec![0.3, 0.7, 0.0],
                vec![0.1, 0.1, 0.8],
            ],
            false,
        )
        .unwrap();
        assert_eq!(s.votes, [0, 2, 1, 2]);
        assert_eq!(s.class_counts, [1, 1, 2]);
        assert_eq!(s.popular_class, 2);
        assert_eq!(s.popular_softmax_values, [0.0, 0.5, 0.0, 0.8]);
        assert!(close(s.mean_softmax.iter().sum(), 1.0, 1e-12));
        assert!(s.mutual_information <= s.predictive_entropy + 1e-12);
    }

    #[test]
    fn vote_ties_go_low() {
        assert_eq!(popular_vote(&[2, 1, 1, 2], 3).unwrap(), 1);
        assert!(popular_vote(&[3], 3).is_err());
    }

    #[test]
    fn dice_examples() {
        let a = [true, true, true, true, false, false, false, false];
        let b = [false, false, true, true, true, true, false, false];
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &a.map(|x| !x)).unwrap(), 0.0);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.5);
        assert_eq!(dice_score(&[false; 3], &[false; 3]).unwrap(), 1.0);
    }

    fn summary_with(mean_popular: f64, class: usize) -> PredictiveSummary {
        let mut row = vec![0.0; 2];
        row[class] = mean_popular;
        row[1 - class] = 1.0 - mean_popular;
        PredictiveSummary::from_passes(vec![row], false).unwrap()
    }

    #[test]
    fn rejection_examples() {
        let s = [summary_with(0.9, 0), summary_with(0.6, 0), summary_with(0.95, 1)];
        let labels = [0, 1, 1];
        let c = rejection_analysis(&s, &labels, &[0.0, 0.8, 1.5]).unwrap();
        assert_eq!(c.retained_fraction, [1.0, 2.0 / 3.0, 0.0]);
        assert_eq!(c.retained_accuracy, [Some(2.0 / 3.0), Some(1.0), None]);
        assert_eq!(c.strictest_nonempty(), Some(1));
        assert_eq!(default_thresholds().len(), 101);
        assert_eq!(default_thresholds()[100], 1.0);
    }

    #[test]
    fn histogram_examples() {
        let s = PredictiveSummary::from_passes(vec![vec![0.0, 0.0, 0.0, 1.0]; 5], false).unwrap();
        let (classes, bins) = histogram_counts(&s, 10).unwrap();
        assert_eq!(classes[3], 5);
        assert_eq!(bins[9], 5);
        assert_eq!(bin_index(0.1, 10), 1);
        assert_eq!(bin_index(0.05, 10), 0);
        assert_eq!(bin_index(0.95, 10), 9);
        for i in 0..10 {
            assert_eq!(bin_index(i as f64 / 10.0, 10), i);
        }
    }

    #[test]
    fn pixel_map_matches_scalar_ops() {
        // T=2, K=2, 2x2 grid.
        let px = [[0.9, 0.1], [0.5, 0.5], [0.3, 0.7], [1.0, 0.0]];
        let py = [[0.7, 0.3], [0.5, 0.5], [0.6, 0.4], [0.0, 1.0]];
        let mut data = vec![0.0; 16];
        for (t, pass) in [px, py].iter().enumerate() {
            for (p, probs) in pass.iter().enumerate() {
                for c in 0..2 {
                    data[(t * 2 + c) * 4 + p] = probs[c];
                }
            }
        }
        let passes = Tensor::new(&[2, 2, 2, 2], data).unwrap();
        let map = pixelwise_uncertainty(&passes, Some(&[0, 1, 1, 0])).unwrap();
        for p in 0..4 {
            let rows = vec![px[p].to_vec(), py[p].to_vec()];
            assert!(close(
                map.mutual_information[p],
                mutual_information(&rows).unwrap(),
                1e-15
            ));
        }
        assert_eq!(map.mutual_information[1], 0.0);
        assert_eq!(map.std[1], 0.0);
        assert_eq!(map.popular_vote, [0, 0, 0, 0]);
        let err = map.absolute_error.unwrap();
        assert!(close(err[0], 0.2, 1e-12));
        assert!(pixelwise_uncertainty(&passes, Some(&[0, 1])).is_err());
    }
}
