//! Target discriminative structure recovery.
//!
//! Target features are clustered with spherical k-means whose centers are
//! anchored on the target head's predictions; the extractor and the target
//! slice of the joint head are then fine-tuned on the cluster labels.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{argmax, Block, JointModel};
use crate::numcore::{sgd_step, GradSet, GroupRates, Matrix, OptimizerState, UpdateSlice};
use crate::{Error, Result};

/// Cluster centers and assignments of a target set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    /// One row per category; each is a sum of unit feature vectors.
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    pub counts: Vec<usize>,
    /// Clusters without members; their centers are carried over unchanged.
    pub empty: Vec<bool>,
    /// Assignment passes used by the last refinement.
    pub iterations: usize,
}

impl ClusterState {
    /// Centers as sums of the l2-normalized features of each cluster's members.
    ///
    /// Zero-norm features join their cluster but add nothing to its center.
    pub fn from_labels(features: &Matrix, labels: &[usize], k: usize) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Contract("target set is empty".into()));
        }
        if labels.len() != features.rows() {
            return Err(Error::shape("init_centers", features.rows(), labels.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("cluster label {l} outside 0..{k}")));
        }
        let mut state = ClusterState {
            centers: Matrix::zeros(k, features.cols()),
            assignments: labels.to_vec(),
            counts: vec![0; k],
            empty: vec![true; k],
            iterations: 0,
        };
        state.recompute_centers(features);
        Ok(state)
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    /// Rebuilds counts and the centers of nonempty clusters from the assignments.
    fn recompute_centers(&mut self, features: &Matrix) {
        let k = self.k();
        let mut sums = Matrix::zeros(k, features.cols());
        self.counts = vec![0; k];
        let mut zero_norm = 0usize;
        for (j, &a) in self.assignments.iter().enumerate() {
            self.counts[a] += 1;
            let f = features.row(j);
            let norm = l2_norm(f);
            if norm == 0.0 {
                zero_norm += 1;
                continue;
            }
            for (s, v) in sums.row_mut(a).iter_mut().zip(f) {
                *s += v / norm;
            }
        }
        if zero_norm > 0 {
            log::warn!("{zero_norm} target feature(s) with zero norm excluded from cluster centers");
        }
        for c in 0..k {
            self.empty[c] = self.counts[c] == 0;
            if !self.empty[c] {
                self.centers.row_mut(c).copy_from_slice(sums.row(c));
            }
        }
    }

    /// Centers eligible for assignment: those with a nonzero vector.
    pub fn candidates(&self) -> Vec<usize> {
        (0..self.k()).filter(|&c| l2_norm(self.centers.row(c)) > 0.0).collect()
    }

    /// Largest cluster share of the assignments.
    pub fn max_share(&self) -> f64 {
        let n: usize = self.counts.iter().sum();
        if n == 0 {
            return 0.0;
        }
        *self.counts.iter().max().unwrap_or(&0) as f64 / n as f64
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `½(1 − cos(a, b))`; a zero vector has cosine 0 with everything.
pub fn cosine_dissimilarity(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    let cos = if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
    };
    0.5 * (1.0 - cos)
}

/// Nearest candidate center of every feature row; ties go to the lowest index.
pub fn assign_features(state: &ClusterState, features: &Matrix) -> Result<Vec<usize>> {
    let candidates = state.candidates();
    if candidates.is_empty() {
        return Err(Error::Contract("every cluster center is empty".into()));
    }
    Ok(features
        .row_iter()
        .map(|f| {
            let mut best = (candidates[0], f64::INFINITY);
            for &c in &candidates {
                let d = cosine_dissimilarity(f, state.centers.row(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect())
}

/// Alternates assignment and center updates until no assignment changes or
/// `max_iters` passes have run.
pub fn refine_features(mut state: ClusterState, features: &Matrix, max_iters: usize) -> Result<ClusterState> {
    if max_iters == 0 {
        return Err(Error::Config("max_iters must be positive".into()));
    }
    state.iterations = 0;
    for _ in 0..max_iters {
        let next = assign_features(&state, features)?;
        state.iterations += 1;
        let changes = next.iter().zip(&state.assignments).filter(|(a, b)| a != b).count();
        state.assignments = next;
        if changes == 0 {
            break;
        }
        state.recompute_centers(features);
    }
    Ok(state)
}

/// Anchors one center per category on the target head's predictions.
pub fn init_centers(m: &JointModel, xt: &Matrix) -> Result<ClusterState> {
    if xt.rows() == 0 {
        return Err(Error::Contract("target set is empty".into()));
    }
    let pass = m.forward(xt)?;
    let labels: Vec<usize> = pass.views(m.k()).pt.row_iter().map(|r| argmax(r).0).collect();
    ClusterState::from_labels(&pass.features, &labels, m.k())
}

/// Reassigns target instances to the nearest center.
pub fn assign(state: &ClusterState, m: &JointModel, xt: &Matrix) -> Result<Vec<usize>> {
    assign_features(state, &m.export_features(xt)?)
}

/// Refines a clustering on the model's current target features.
pub fn refine(state: ClusterState, m: &JointModel, xt: &Matrix, max_iters: usize) -> Result<ClusterState> {
    refine_features(state, &m.export_features(xt)?, max_iters)
}

/// `−mean log p^t_{ŷ}` on the target head and its gradient.
pub fn loss_tdsr(m: &JointModel, xt: &Matrix, labels: &[usize]) -> Result<(f64, GradSet)> {
    if xt.rows() == 0 || labels.len() != xt.rows() {
        return Err(Error::shape("loss_tdsr", xt.rows(), labels.len()));
    }
    let k = m.k();
    let pass = m.forward(xt)?;
    let stats = pass.row_stats(k);
    let w = 1.0 / stats.len() as f64;
    let mut g = Matrix::zeros(stats.len(), 2 * k);
    let mut value = 0.0;
    for (i, st) in stats.iter().enumerate() {
        value += st.head_ce(Block::Target, labels[i], w, g.row_mut(i));
    }
    let mut grads = GradSet::zeros_like(&m.params);
    m.backward(&pass, Some(&g), None, true, &mut grads)?;
    Ok((value, grads))
}

/// Fine-tuning settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TdsrConfig {
    pub epochs: usize,
    pub max_iters: usize,
    pub batch_size: usize,
    /// An epoch is skipped when one cluster holds more than this share.
    pub collapse_share: f64,
    pub seed: u64,
}

impl Default for TdsrConfig {
    fn default() -> Self {
        TdsrConfig {
            epochs: 10,
            max_iters: 100,
            batch_size: 32,
            collapse_share: 0.95,
            seed: 0,
        }
    }
}

/// One fine-tuning epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdsrEpoch {
    pub epoch: usize,
    pub iterations: usize,
    pub counts: Vec<usize>,
    /// Loss on this epoch's cluster labels before and after the update.
    pub loss_before: f64,
    pub loss_after: f64,
    /// Target-head accuracy after the epoch, when labels are supplied.
    pub accuracy: Option<f64>,
    /// Agreement of cluster labels with the supplied labels.
    pub cluster_accuracy: Option<f64>,
    pub aborted: Option<String>,
}

/// Per-epoch record of a fine-tuning run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TdsrTrace {
    /// Target-head accuracy before fine-tuning.
    pub initial_accuracy: Option<f64>,
    pub epochs: Vec<TdsrEpoch>,
}

impl TdsrTrace {
    /// Epochs that updated the model.
    pub fn applied_epochs(&self) -> usize {
        self.epochs.iter().filter(|e| e.aborted.is_none()).count()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.accuracy).or(self.initial_accuracy)
    }
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

fn target_accuracy(m: &JointModel, xt: &Matrix, truth: Option<&[usize]>) -> Result<Option<f64>> {
    match truth {
        None => Ok(None),
        Some(t) => {
            let pred: Vec<usize> = m.prob_views(xt)?.pt.row_iter().map(|r| argmax(r).0).collect();
            Ok(Some(accuracy(&pred, t)))
        }
    }
}

/// Parameters updated by fine-tuning: the whole extractor plus the target
/// columns of the joint head's weight and bias.
pub fn tdsr_update_slices(m: &JointModel) -> Vec<UpdateSlice> {
    let k = m.k();
    let mut slices: Vec<UpdateSlice> = m.extractor_ids().into_iter().map(UpdateSlice::whole).collect();
    slices.push(UpdateSlice::columns(m.joint.weight, k..2 * k));
    slices.push(UpdateSlice::columns(m.joint.bias, k..2 * k));
    slices
}

/// Fine-tunes on cluster labels for `cfg.epochs` epochs.
///
/// Every epoch re-anchors and refines the clustering on the current
/// features, then makes one shuffled minibatch pass minimizing
/// [`loss_tdsr`]. `truth` only feeds the accuracy trace.
pub fn tdsr_finetune(
    m: &mut JointModel,
    xt: &Matrix,
    cfg: &TdsrConfig,
    optimizer: &mut OptimizerState,
    rates: GroupRates,
    truth: Option<&[usize]>,
) -> Result<TdsrTrace> {
    if xt.rows() == 0 {
        return Err(Error::Contract("target set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if let Some(t) = truth {
        if t.len() != xt.rows() {
            return Err(Error::shape("tdsr_finetune", xt.rows(), t.len()));
        }
    }
    let slices = tdsr_update_slices(m);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = TdsrTrace {
        initial_accuracy: target_accuracy(m, xt, truth)?,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 1..=cfg.epochs {
        let state = refine(init_centers(m, xt)?, m, xt, cfg.max_iters)?;
        let labels = state.assignments.clone();
        let loss_before = loss_tdsr(m, xt, &labels)?.0;
        let mut record = TdsrEpoch {
            epoch,
            iterations: state.iterations,
            counts: state.counts.clone(),
            loss_before,
            loss_after: loss_before,
            accuracy: None,
            cluster_accuracy: truth.map(|t| accuracy(&labels, t)),
            aborted: None,
        };
        let share = state.max_share();
        if share > cfg.collapse_share {
            let msg = format!(
                "cluster collapse: one cluster holds {:.1}% of target instances (counts {:?})",
                100.0 * share,
                state.counts
            );
            log::warn!("tdsr epoch {epoch}: {msg}");
            record.aborted = Some(msg);
            record.accuracy = target_accuracy(m, xt, truth)?;
            trace.epochs.push(record);
            continue;
        }
        let snapshot = m.params.clone();
        let mut order: Vec<usize> = (0..xt.rows()).collect();
        order.shuffle(&mut rng);
        let step = (|| -> Result<()> {
            for chunk in order.chunks(cfg.batch_size) {
                let xb = xt.select_rows(chunk);
                let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let (_, grads) = loss_tdsr(m, &xb, &yb)?;
                sgd_step(&mut m.params, &grads, optimizer, rates, &slices)?;
            }
            Ok(())
        })();
        if let Err(e) = step {
            m.params = snapshot;
            log::warn!("tdsr epoch {epoch} aborted: {e}");
            record.aborted = Some(e.to_string());
            record.accuracy = target_accuracy(m, xt, truth)?;
            trace.epochs.push(record);
            continue;
        }
        record.loss_after = loss_tdsr(m, xt, &labels)?.0;
        record.accuracy = target_accuracy(m, xt, truth)?;
        trace.epochs.push(record);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numcore::{Activation, GroupRates};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_features(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Independent re-accumulation of the center sums.
    fn brute_centers(features: &Matrix, labels: &[usize], k: usize) -> Matrix {
        let mut c = Matrix::zeros(k, features.cols());
        for j in 0..features.rows() {
            let f = features.row(j);
            let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            for t in 0..features.cols() {
                c.row_mut(labels[j])[t] += f[t] / n;
            }
        }
        c
    }

    #[test]
    fn centers_are_sums_of_unit_vectors() {
        let f = Matrix::from_rows(&[[3.0, 0.0], [0.0, 2.0], [1.0, 1.0]]).unwrap();
        let s = ClusterState::from_labels(&f, &[1, 1, 0], 2).unwrap();
        assert_eq!(s.centers.row(1), &[1.0, 1.0]);
        let r = 0.5f64.sqrt();
        assert!((s.centers.row(0)[0] - r).abs() < 1e-15);
        assert_eq!(s.counts, vec![1, 2]);

        let all_zero = ClusterState::from_labels(&f, &[0, 0, 0], 3).unwrap();
        assert_eq!(all_zero.counts, vec![3, 0, 0]);
        assert_eq!(all_zero.empty, vec![false, true, true]);
        assert_eq!(all_zero.candidates(), vec![0]);

        let f = random_features(40, 5, 3);
        let labels: Vec<usize> = (0..40).map(|i| (i * 7) % 4).collect();
        let s = ClusterState::from_labels(&f, &labels, 4).unwrap();
        assert!(s.centers.sub(&brute_centers(&f, &labels, 4)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn zero_norm_features_are_excluded_from_sums() {
        let f = Matrix::from_rows(&[[0.0, 0.0], [0.0, 5.0]]).unwrap();
        let s = ClusterState::from_labels(&f, &[0, 0], 1).unwrap();
        assert_eq!(s.centers.row(0), &[0.0, 1.0]);
        assert_eq!(s.counts, vec![2]);
    }

    #[test]
    fn assignment_follows_cosine() {
        let centers = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let mut s = ClusterState::from_labels(&centers, &[0, 1, 2], 3).unwrap();
        let f = Matrix::from_rows(&[[0.0, 0.0, 4.0], [0.1, 2.0, 0.0], [1.0, 1.0, 0.0]]).unwrap();
        assert_eq!(assign_features(&s, &f).unwrap(), vec![2, 1, 0]);
        assert_eq!(assign_features(&s, &f.scaled(37.5)).unwrap(), vec![2, 1, 0]);
        s.centers.fill(0.0);
        assert!(matches!(assign_features(&s, &f), Err(Error::Contract(_))));
    }

    #[test]
    fn assignment_matches_distance_table() {
        let f = random_features(6, 3, 17);
        let s = ClusterState::from_labels(&f, &[0, 0, 0, 1, 1, 1], 2).unwrap();
        let got = assign_features(&s, &f).unwrap();
        for j in 0..6 {
            let table: Vec<f64> = (0..2)
                .map(|c| {
                    let (a, b) = (f.row(j), s.centers.row(c));
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                    0.5 * (1.0 - dot / (na * nb))
                })
                .collect();
            let best = if table[1] < table[0] { 1 } else { 0 };
            assert_eq!(got[j], best);
        }
    }

    #[test]
    fn converged_state_needs_one_pass() {
        let f = Matrix::from_rows(&[[1.0, 0.1], [1.0, -0.1], [-0.1, 1.0], [0.1, 1.0]]).unwrap();
        let s = ClusterState::from_labels(&f, &[0, 0, 1, 1], 2).unwrap();
        let r = refine_features(s.clone(), &f, 100).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.assignments, s.assignments);
        assert_eq!(r.centers, s.centers);
    }

    #[test]
    fn separated_blobs_converge_quickly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for j in 0..60 {
            let c = j % 2;
            let base = if c == 0 { [5.0, 1.0] } else { [-1.0, 5.0] };
            rows.push([base[0] + rng.random_range(-0.5..0.5), base[1] + rng.random_range(-0.5..0.5)]);
            truth.push(c);
        }
        let f = Matrix::from_rows(&rows).unwrap();
        // anchors from noisy predictions: every third instance mislabeled
        let labels: Vec<usize> = truth.iter().enumerate().map(|(j, &c)| if j % 3 == 0 { 1 - c } else { c }).collect();
        let s = ClusterState::from_labels(&f, &labels, 2).unwrap();
        let r = refine_features(s, &f, 100).unwrap();
        assert_eq!(r.assignments, truth);
        assert!(r.iterations <= 3, "{}", r.iterations);
    }

    fn audit(r: &ClusterState, f: &Matrix) {
        let cand = r.candidates();
        for j in 0..f.rows() {
            let own = cosine_dissimilarity(f.row(j), r.centers.row(r.assignments[j]));
            for &c in &cand {
                assert!(cosine_dissimilarity(f.row(j), r.centers.row(c)) >= own);
            }
        }
        let recomputed = brute_centers(f, &r.assignments, r.k());
        for c in 0..r.k() {
            if !r.empty[c] {
                for (a, b) in recomputed.row(c).iter().zip(r.centers.row(c)) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
        assert_eq!(r.counts.iter().sum::<usize>(), f.rows());
    }

    #[test]
    fn converged_clusters_are_locally_optimal_and_consistent() {
        for seed in 0..100 {
            let f = random_features(30, 4, seed);
            let labels: Vec<usize> = (0..30).map(|i| (i + seed as usize) % 3).collect();
            let r = refine_features(ClusterState::from_labels(&f, &labels, 3).unwrap(), &f, 100).unwrap();
            assert!(r.iterations < 100, "seed {seed} did not converge");
            audit(&r, &f);
        }
    }

    proptest! {
        #[test]
        fn refine_respects_iteration_bound(seed in 0u64..10_000, k in 1usize..5, n in 1usize..25) {
            let f = random_features(n, 3, seed);
            let labels: Vec<usize> = (0..n).map(|i| (i * 31 + seed as usize) % k).collect();
            let r = refine_features(ClusterState::from_labels(&f, &labels, k).unwrap(), &f, 100).unwrap();
            prop_assert!(r.iterations <= 100);
            prop_assert_eq!(r.counts.iter().sum::<usize>(), n);
            prop_assert!(r.assignments.iter().all(|&a| a < k));
        }
    }

    fn tiny_model(seed: u64) -> JointModel {
        let mut cfg = ModelConfig::new(2, vec![8], 2);
        cfg.activation = Activation::Tanh;
        JointModel::new(cfg, seed).unwrap()
    }

    fn two_blobs() -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for j in 0..40 {
            let c = j % 2;
            let cx = if c == 0 { 1.5 } else { -1.5 };
            rows.push([cx + rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)]);
            ys.push(c);
        }
        (Matrix::from_rows(&rows).unwrap(), ys)
    }

    #[test]
    fn source_columns_stay_bit_identical() {
        let mut m = tiny_model(1);
        let (xt, ys) = two_blobs();
        let k = m.k();
        let before_w = m.params.value(m.joint.weight).column_block(0, k);
        let before_b = m.params.value(m.joint.bias).column_block(0, k);
        let mut opt = OptimizerState::with_defaults(&m.params);
        let cfg = TdsrConfig {
            epochs: 3,
            collapse_share: 1.0,
            ..TdsrConfig::default()
        };
        tdsr_finetune(&mut m, &xt, &cfg, &mut opt, GroupRates::uniform(0.1), Some(&ys)).unwrap();
        let after_w = m.params.value(m.joint.weight).column_block(0, k);
        let after_b = m.params.value(m.joint.bias).column_block(0, k);
        assert_eq!(before_w, after_w);
        assert_eq!(before_b, after_b);
    }

    #[test]
    fn zero_rate_keeps_accuracy_constant() {
        let mut m = tiny_model(2);
        let (xt, ys) = two_blobs();
        let before = m.params.clone();
        let mut opt = OptimizerState::with_defaults(&m.params);
        let cfg = TdsrConfig {
            epochs: 4,
            collapse_share: 1.0,
            ..TdsrConfig::default()
        };
        let trace = tdsr_finetune(&mut m, &xt, &cfg, &mut opt, GroupRates::uniform(0.0), Some(&ys)).unwrap();
        assert_eq!(m.params, before);
        for e in &trace.epochs {
            assert_eq!(e.accuracy, trace.initial_accuracy);
        }
    }

    #[test]
    fn epoch_lowers_cluster_label_loss() {
        let mut m = tiny_model(5);
        let (xt, ys) = two_blobs();
        let mut opt = OptimizerState::new(&m.params, 0.0, 0.0).unwrap();
        let cfg = TdsrConfig {
            epochs: 3,
            batch_size: 40,
            collapse_share: 1.0,
            ..TdsrConfig::default()
        };
        let trace = tdsr_finetune(&mut m, &xt, &cfg, &mut opt, GroupRates::uniform(0.05), Some(&ys)).unwrap();
        for e in &trace.epochs {
            assert!(e.loss_after < e.loss_before, "{e:?}");
        }
    }

    #[test]
    fn fixed_point_barely_moves() {
        let mut m = tiny_model(6);
        let (xt, _) = two_blobs();
        // saturate the target head on the current predictions
        let state = refine(init_centers(&m, &xt).unwrap(), &m, &xt, 100).unwrap();
        let mut opt = OptimizerState::new(&m.params, 0.0, 0.0).unwrap();
        let slices = tdsr_update_slices(&m);
        for _ in 0..400 {
            let (_, g) = loss_tdsr(&m, &xt, &state.assignments).unwrap();
            sgd_step(&mut m.params, &g, &mut opt, GroupRates::uniform(0.5), &slices).unwrap();
        }
        let (loss, _) = loss_tdsr(&m, &xt, &state.assignments).unwrap();
        let before = m.params.clone();
        let lr = 1e-3;
        let cfg = TdsrConfig {
            epochs: 1,
            batch_size: 40,
            collapse_share: 1.0,
            ..TdsrConfig::default()
        };
        tdsr_finetune(&mut m, &xt, &cfg, &mut opt, GroupRates::uniform(lr), None).unwrap();
        let mut moved = 0.0f64;
        for id in m.params.ids() {
            moved = moved.max(m.params.value(id).sub(before.value(id)).unwrap().max_abs());
        }
        assert!(moved < lr * loss.max(1e-3), "moved {moved}, loss {loss}");
    }

    #[test]
    fn collapse_aborts_epoch_and_keeps_parameters() {
        let mut m = tiny_model(3);
        let f = m.joint;
        // target head always predicts category 0
        m.params.value_mut(f.weight).fill(0.0);
        *m.params.value_mut(f.bias) = Matrix::from_rows(&[[0.0, 0.0, 5.0, -5.0]]).unwrap();
        let (xt, ys) = two_blobs();
        let before = m.params.clone();
        let mut opt = OptimizerState::with_defaults(&m.params);
        let trace =
            tdsr_finetune(&mut m, &xt, &TdsrConfig::default(), &mut opt, GroupRates::uniform(0.1), Some(&ys))
                .unwrap();
        assert_eq!(m.params, before);
        assert!(trace.epochs.iter().all(|e| e.aborted.is_some()));
    }

    #[test]
    fn loss_tdsr_passes_gradient_check() {
        let m = tiny_model(7);
        let (xt, _) = two_blobs();
        let xs = xt.select_rows(&[0, 1, 2, 3, 4]);
        let labels = [0, 1, 1, 0, 1];
        let r = crate::numcore::grad_check(
            |p| {
                let mut mm = m.clone();
                mm.params = p.clone();
                loss_tdsr(&mm, &xs, &labels)
            },
            &m.params,
            1e-5,
        )
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}
