//! Classification head, vote aggregation and evaluation metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Layer-norm epsilon; small enough that normalized rows keep unit
/// variance to within 1e-6 for any non-degenerate input.
pub const NORM_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    /// `[D_model×G]`
    pub proj: Tensor,
    pub bias: Tensor,
}

impl HeadParams {
    pub fn init(d_model: usize, classes: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        use rand::Rng;
        let bound = 1.0 / (d_model as f64).sqrt();
        Self {
            norm_gain: Tensor::full(&[d_model], 1.0),
            norm_bias: Tensor::zeros(&[d_model]),
            proj: Tensor::from_fn(&[d_model, classes], |_| rng.random_range(-bound..bound)),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("norm_gain", &self.norm_gain), ("norm_bias", &self.norm_bias), ("proj", &self.proj), ("bias", &self.bias)]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("norm_gain", &mut self.norm_gain),
            ("norm_bias", &mut self.norm_bias),
            ("proj", &mut self.proj),
            ("bias", &mut self.bias),
        ]
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> HeadVars {
        HeadVars {
            norm_gain: tape.param(&self.norm_gain),
            norm_bias: tape.param(&self.norm_bias),
            proj: tape.param(&self.proj),
            bias: tape.param(&self.bias),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub norm_gain: Var,
    pub norm_bias: Var,
    pub proj: Var,
    pub bias: Var,
}

/// Logits `[M×G]` for pooled patch embeddings `z[M×D]`.
pub fn head_logits(tape: &mut Tape, p: &HeadVars, z: Var) -> Result<Var> {
    let m = tape.shape(z)[0];
    let normed = tape.layer_norm(z, 1, NORM_EPS)?;
    let gain = tape.expand(p.norm_gain, 0, m)?;
    let shift = tape.expand(p.norm_bias, 0, m)?;
    let scaled = tape.mul(normed, gain)?;
    let shifted = tape.add(scaled, shift)?;
    let act = tape.silu(shifted)?;
    let proj = tape.matmul(act, p.proj)?;
    let bias = tape.expand(p.bias, 0, m)?;
    tape.add(proj, bias)
}

/// Class probabilities for one pooled embedding.
pub fn classify_patch(z: &[f64], params: &HeadParams) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let zv = tape.constant(Tensor::new(&[1, z.len()], z.to_vec())?);
    let logits = head_logits(&mut tape, &vars, zv)?;
    let probs = tape.softmax(logits, 1)?;
    Ok(tape.value(probs).to_vec())
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Label for one signal from its patches' probabilities: the modal argmax,
/// ties broken by summed probability and then by the lower class index.
pub fn vote(patch_probs: &[&[f64]]) -> Result<usize> {
    let Some(first) = patch_probs.first() else {
        return Err(Error::Data("cannot vote on a signal with no patches".into()));
    };
    let g = first.len();
    let mut votes = vec![0usize; g];
    let mut mass = vec![0.0; g];
    for p in patch_probs {
        if p.len() != g {
            return Err(Error::Data("patches of one signal disagree on the class count".into()));
        }
        votes[argmax(p)] += 1;
        for (m, v) in mass.iter_mut().zip(p.iter()) {
            *m += v;
        }
    }
    let mut best = 0;
    for c in 1..g {
        if votes[c] > votes[best] || (votes[c] == votes[best] && mass[c] > mass[best]) {
            best = c;
        }
    }
    Ok(best)
}

/// Signal-level labels keyed by source id.
pub fn majority_vote(patch_probs: &[Vec<f64>], source_ids: &[usize]) -> Result<BTreeMap<usize, usize>> {
    if patch_probs.len() != source_ids.len() {
        return Err(Error::Usage(format!("{} patches but {} source ids", patch_probs.len(), source_ids.len())));
    }
    let mut groups: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (p, &id) in patch_probs.iter().zip(source_ids) {
        groups.entry(id).or_default().push(p);
    }
    groups.into_iter().map(|(id, ps)| Ok((id, vote(&ps)?))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    /// `matrix[true][predicted]`
    pub matrix: Vec<Vec<u64>>,
    pub total_accuracy: f64,
    /// Mean recall over classes that occur in the labels.
    pub balanced_accuracy: f64,
}

impl Confusion {
    pub fn to_csv(&self) -> String {
        let g = self.matrix.len();
        let mut out = String::from("true");
        for c in 0..g {
            out.push_str(&format!(",pred_{c}"));
        }
        out.push('\n');
        for (t, row) in self.matrix.iter().enumerate() {
            out.push_str(&t.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_and_accuracy(preds: &[usize], labels: &[usize], classes: usize) -> Result<Confusion> {
    if preds.len() != labels.len() {
        return Err(Error::Usage(format!("{} predictions but {} labels", preds.len(), labels.len())));
    }
    let mut matrix = vec![vec![0u64; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if l >= classes || p >= classes {
            return Err(Error::Data(format!("class {} out of range for {classes} classes", l.max(p))));
        }
        matrix[l][p] += 1;
    }
    let n = preds.len();
    let correct: u64 = (0..classes).map(|c| matrix[c][c]).sum();
    let recalls: Vec<f64> = matrix
        .iter()
        .enumerate()
        .filter_map(|(c, row)| {
            let total: u64 = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect();
    let mean_recall = if recalls.is_empty() { 0.0 } else { recalls.iter().sum::<f64>() / recalls.len() as f64 };
    Ok(Confusion {
        matrix,
        total_accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        balanced_accuracy: mean_recall,
    })
}

mod threshold_json {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(t: &f64, s: S) -> Result<S::Ok, S::Error> {
        t.is_finite().then_some(*t).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// The first point sits above every score; JSON stores its infinite
    /// threshold as `null`.
    #[serde(with = "threshold_json")]
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub auc: f64,
    pub points: Vec<RocPoint>,
}

/// One-vs-rest ROC for `class`. `scores[i]` is sample i's score for that
/// class. Returns `None` when the class or its complement is absent.
pub fn roc_auc(scores: &[f64], labels: &[usize], class: usize) -> Result<Option<RocCurve>> {
    if scores.len() != labels.len() {
        return Err(Error::Usage(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("ROC scores must be finite".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == class).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // mid-ranks over ascending scores
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| labels[k] == class).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let auc = (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n);

    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = order.len();
    while k > 0 {
        let thr = scores[order[k - 1]];
        while k > 0 && scores[order[k - 1]] == thr {
            if labels[order[k - 1]] == class {
                tp += 1;
            } else {
                fp += 1;
            }
            k -= 1;
        }
        points.push(RocPoint { threshold: thr, fpr: fp as f64 / n, tpr: tp as f64 / p });
    }
    Ok(Some(RocCurve { auc, points }))
}

/// Evaluation summary at patch and signal level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: usize,
    pub signals: usize,
    pub patches: usize,
    /// Confusion after majority voting.
    pub confusion: Confusion,
    pub patch_confusion: Confusion,
    pub total_accuracy: f64,
    pub balanced_accuracy: f64,
    pub patch_accuracy: f64,
    pub patch_balanced_accuracy: f64,
    /// Per-class one-vs-rest AUC from patch probabilities; `None` if undefined.
    pub auc: Vec<Option<f64>>,
    pub roc: Vec<Option<Vec<RocPoint>>>,
    pub param_count: usize,
    pub flop_count: u64,
}

impl EvalReport {
    /// Assemble from per-patch probabilities, labels and source ids.
    pub fn from_predictions(
        probs: &[Vec<f64>],
        labels: &[usize],
        source_ids: &[usize],
        classes: usize,
        param_count: usize,
        flop_count: u64,
    ) -> Result<Self> {
        if probs.len() != labels.len() || probs.iter().any(|p| p.len() != classes) {
            return Err(Error::Usage("probabilities, labels and class count disagree".into()));
        }
        let patch_preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let patch_confusion = confusion_and_accuracy(&patch_preds, labels, classes)?;

        let votes = majority_vote(probs, source_ids)?;
        let mut signal_label = BTreeMap::new();
        for (&id, &l) in source_ids.iter().zip(labels) {
            if *signal_label.entry(id).or_insert(l) != l {
                return Err(Error::Data(format!("signal {id} has patches with different labels")));
            }
        }
        let (preds, truth): (Vec<usize>, Vec<usize>) = votes.iter().map(|(id, &p)| (p, signal_label[id])).unzip();
        let confusion = confusion_and_accuracy(&preds, &truth, classes)?;

        let mut auc = Vec::with_capacity(classes);
        let mut roc = Vec::with_capacity(classes);
        for c in 0..classes {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let curve = roc_auc(&scores, labels, c)?;
            auc.push(curve.as_ref().map(|r| r.auc));
            roc.push(curve.map(|r| r.points));
        }
        Ok(Self {
            classes,
            signals: votes.len(),
            patches: probs.len(),
            total_accuracy: confusion.total_accuracy,
            balanced_accuracy: confusion.balanced_accuracy,
            patch_accuracy: patch_confusion.total_accuracy,
            patch_balanced_accuracy: patch_confusion.balanced_accuracy,
            confusion,
            patch_confusion,
            auc,
            roc,
            param_count,
            flop_count,
        })
    }

    /// `class,threshold,fpr,tpr` rows for every defined curve.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("class,threshold,fpr,tpr\n");
        for (c, pts) in self.roc.iter().enumerate() {
            for p in pts.iter().flatten() {
                out.push_str(&format!("{c},{},{},{}\n", p.threshold, p.fpr, p.tpr));
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::Rng;

    fn head(d: usize, g: usize, seed: u64) -> HeadParams {
        HeadParams::init(d, g, &mut stream_rng(seed, Stream::Init, 0))
    }

    #[test]
    fn zero_projection_is_uniform() {
        let mut h = head(5, 8, 1);
        h.proj = Tensor::zeros(&[5, 8]);
        let p = classify_patch(&[0.3, -1.0, 2.0, 0.1, 0.0], &h).unwrap();
        assert!(p.iter().all(|&v| (v - 0.125).abs() < 1e-15));
    }

    #[test]
    fn probabilities_sum_to_one_and_follow_logits() {
        let h = head(6, 4, 2);
        let mut rng = stream_rng(3, Stream::Data, 0);
        for _ in 0..20 {
            let z: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = classify_patch(&z, &h).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let mut tape = Tape::new();
            let vars = h.bind(&mut tape);
            let zv = tape.constant(Tensor::new(&[1, 6], z.clone()).unwrap());
            let logits = head_logits(&mut tape, &vars, zv).unwrap();
            assert_eq!(argmax(&p), argmax(tape.value(logits)));
        }
    }

    #[test]
    fn vote_examples() {
        let one = [0.1, 0.8, 0.1];
        let two = [0.1, 0.1, 0.8];
        assert_eq!(vote(&[&one, &one, &two]).unwrap(), 1);
        let weak_one = [0.0, 0.5, 0.49];
        let strong_two = [0.0, 0.1, 0.9];
        assert_eq!(vote(&[&weak_one, &strong_two]).unwrap(), 2);
        let a = [0.5, 0.5];
        assert_eq!(vote(&[&a]).unwrap(), 0);
        assert!(matches!(vote(&[]), Err(Error::Data(_))));
        let votes = majority_vote(&[one.to_vec(), two.to_vec(), two.to_vec()], &[4, 9, 9]).unwrap();
        assert_eq!(votes.into_iter().collect::<Vec<_>>(), vec![(4, 1), (9, 2)]);
    }

    #[test]
    fn confusion_examples() {
        let labels: Vec<usize> = (0..8).collect();
        let perfect = confusion_and_accuracy(&labels, &labels, 8).unwrap();
        assert_eq!(perfect.total_accuracy, 1.0);
        assert!((0..8).all(|c| perfect.matrix[c][c] == 1));

        let labels: Vec<usize> = (0..80).map(|i| i % 8).collect();
        let zeros = confusion_and_accuracy(&vec![0; 80], &labels, 8).unwrap();
        assert_eq!(zeros.total_accuracy, 0.125);
        assert_eq!(zeros.balanced_accuracy, 0.125);

        assert!(matches!(confusion_and_accuracy(&[0], &[8], 8), Err(Error::Data(_))));
    }

    #[test]
    fn confusion_matches_hand_count() {
        let labels = [0, 1, 2, 2, 1, 0, 0, 2, 1, 1, 0, 2, 2, 2, 1, 0, 0, 1, 2, 0];
        let preds = [0, 1, 1, 2, 1, 0, 2, 2, 0, 1, 0, 2, 1, 2, 1, 1, 0, 1, 2, 0];
        let c = confusion_and_accuracy(&preds, &labels, 3).unwrap();
        // counted by hand: class 0 -> [5,1,1], class 1 -> [1,5,0], class 2 -> [0,2,5]
        assert_eq!(c.matrix, vec![vec![5, 1, 1], vec![1, 5, 0], vec![0, 2, 5]]);
        assert_eq!(c.total_accuracy, 15.0 / 20.0);
        assert!((c.balanced_accuracy - (5.0 / 7.0 + 5.0 / 6.0 + 5.0 / 7.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn auc_examples() {
        let labels = [0, 0, 1, 1];
        let sep = roc_auc(&[0.1, 0.2, 0.8, 0.9], &labels, 1).unwrap().unwrap();
        assert_eq!(sep.auc, 1.0);
        assert_eq!(sep.points.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
        let flat = roc_auc(&[0.5; 4], &labels, 1).unwrap().unwrap();
        assert_eq!(flat.auc, 0.5);
        assert_eq!(flat.points.len(), 2);
        assert!(roc_auc(&[0.5; 4], &labels, 2).unwrap().is_none());
    }

    #[test]
    fn random_scores_give_chance_auc() {
        let mut total = 0.0;
        for seed in 0..10 {
            let mut rng = stream_rng(seed, Stream::Data, 0);
            let labels: Vec<usize> = (0..1000).map(|_| rng.random_range(0..2)).collect();
            let scores: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
            total += roc_auc(&scores, &labels, 1).unwrap().unwrap().auc;
        }
        assert!((total / 10.0 - 0.5).abs() < 0.05);
    }

    #[test]
    fn report_counts_and_csv() {
        let probs = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4], vec![0.3, 0.7]];
        let r = EvalReport::from_predictions(&probs, &[0, 1, 1, 1], &[0, 1, 1, 1], 2, 10, 20).unwrap();
        assert_eq!((r.signals, r.patches), (2, 4));
        assert_eq!(r.total_accuracy, 1.0);
        assert_eq!(r.patch_accuracy, 0.75);
        let rows: Vec<u64> = r.confusion.matrix.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(rows, vec![1, 1]);
        assert!(r.roc_csv().starts_with("class,threshold,fpr,tpr\n0,inf,0,0\n"));
        assert!(r.to_json().unwrap().contains("\"balanced_accuracy\""));
        assert!(EvalReport::from_predictions(&probs, &[0, 1, 0, 1], &[0, 1, 1, 1], 2, 0, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn positive_logit_scaling_keeps_decisions(seed in any::<u64>()) {
            let mut rng = stream_rng(seed, Stream::Data, 0);
            let logits: Vec<Vec<f64>> = (0..12).map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
            let softmax = |row: &[f64], s: f64| -> Vec<f64> {
                let m = row.iter().copied().fold(f64::MIN, f64::max);
                let e: Vec<f64> = row.iter().map(|v| ((v - m) * s).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|v| v / z).collect()
            };
            let ids: Vec<usize> = (0..12).map(|i| i / 3).collect();
            let labels: Vec<usize> = (0..12).map(|i| (i / 3) % 4).collect();
            let a: Vec<Vec<f64>> = logits.iter().map(|r| softmax(r, 1.0)).collect();
            let b: Vec<Vec<f64>> = logits.iter().map(|r| softmax(r, 7.3)).collect();
            let pa: Vec<usize> = a.iter().map(|p| argmax(p)).collect();
            let pb: Vec<usize> = b.iter().map(|p| argmax(p)).collect();
            prop_assert_eq!(&pa, &pb);
            prop_assert_eq!(confusion_and_accuracy(&pa, &labels, 4).unwrap(), confusion_and_accuracy(&pb, &labels, 4).unwrap());
            // votes only change if a tie is broken by summed probability
            let (va, vb) = (majority_vote(&a, &ids).unwrap(), majority_vote(&b, &ids).unwrap());
            for (id, label) in &va {
                let counts = ids.iter().zip(&pa).filter(|(i, _)| *i == id).fold([0; 4], |mut c, (_, &p)| { c[p] += 1; c });
                let top = counts.iter().max().copied().unwrap_or(0);
                if counts.iter().filter(|&&c| c == top).count() == 1 {
                    prop_assert_eq!(label, &vb[id]);
                }
            }
        }

        #[test]
        fn auc_is_rank_invariant(seed in any::<u64>()) {
            let mut rng = stream_rng(seed, Stream::Data, 1);
            let labels: Vec<usize> = (0..50).map(|_| rng.random_range(0..3)).collect();
            let scores: Vec<f64> = (0..50).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            for c in 0..3 {
                let a = roc_auc(&scores, &labels, c).unwrap().map(|r| r.auc);
                let b = roc_auc(&warped, &labels, c).unwrap().map(|r| r.auc);
                prop_assert_eq!(a, b);
                if let Some(v) = a {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }
}
