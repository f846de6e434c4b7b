//! Log-domain softmax statistics of joint logits and the per-row gradient
//! kernels every loss in the crate is assembled from.
//!
//! A joint logit row `z` has `2K` entries. The first block `z[..K]` scores
//! source categories, the second block `z[K..]` target categories.
//! All gradients here are with respect to `z`.

use crate::numcore::Matrix;

/// Which half of the joint output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Source,
    Target,
}

impl Block {
    #[inline]
    pub fn offset(self, k: usize) -> usize {
        match self {
            Block::Source => 0,
            Block::Target => k,
        }
    }

    pub fn other(self) -> Block {
        match self {
            Block::Source => Block::Target,
            Block::Target => Block::Source,
        }
    }
}

/// Numerically stable `log Σ exp(x)`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(x);
    x.iter().map(|v| (v - lse).exp()).collect()
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Log-probabilities of one joint row under all three views.
#[derive(Debug, Clone)]
pub struct RowStats {
    pub k: usize,
    /// `log p` over all `2K` outputs.
    pub log_p: Vec<f64>,
    /// `log p^s` (softmax of the source block alone).
    pub log_ps: Vec<f64>,
    /// `log p^t` (softmax of the target block alone).
    pub log_pt: Vec<f64>,
    /// `log Σ_{k<K} p_k`.
    pub log_mass_src: f64,
    /// `log Σ_{k≥K} p_k`.
    pub log_mass_tgt: f64,
}

impl RowStats {
    pub fn new(z: &[f64], k: usize) -> Self {
        debug_assert_eq!(z.len(), 2 * k);
        let lse = log_sum_exp(z);
        let lse_s = log_sum_exp(&z[..k]);
        let lse_t = log_sum_exp(&z[k..]);
        RowStats {
            k,
            log_p: z.iter().map(|v| v - lse).collect(),
            log_ps: z[..k].iter().map(|v| v - lse_s).collect(),
            log_pt: z[k..].iter().map(|v| v - lse_t).collect(),
            log_mass_src: lse_s - lse,
            log_mass_tgt: lse_t - lse,
        }
    }

    pub fn p(&self) -> Vec<f64> {
        self.log_p.iter().map(|v| v.exp()).collect()
    }

    pub fn ps(&self) -> Vec<f64> {
        self.log_ps.iter().map(|v| v.exp()).collect()
    }

    pub fn pt(&self) -> Vec<f64> {
        self.log_pt.iter().map(|v| v.exp()).collect()
    }

    /// Head view of a block (`p^s` for the source block, `p^t` for the target block).
    pub fn head(&self, block: Block) -> Vec<f64> {
        match block {
            Block::Source => self.ps(),
            Block::Target => self.pt(),
        }
    }

    pub fn log_head(&self, block: Block) -> &[f64] {
        match block {
            Block::Source => &self.log_ps,
            Block::Target => &self.log_pt,
        }
    }

    pub fn log_mass(&self, block: Block) -> f64 {
        match block {
            Block::Source => self.log_mass_src,
            Block::Target => self.log_mass_tgt,
        }
    }

    /// Value and gradient of `−log p_idx` (2K-way cross-entropy), scaled by `w`.
    pub fn joint_ce(&self, idx: usize, w: f64, grad: &mut [f64]) -> f64 {
        for (g, lp) in grad.iter_mut().zip(&self.log_p) {
            *g += w * lp.exp();
        }
        grad[idx] -= w;
        -w * self.log_p[idx]
    }

    /// Value and gradient of `−log (head of block)_idx` (K-way cross-entropy), scaled by `w`.
    pub fn head_ce(&self, block: Block, idx: usize, w: f64, grad: &mut [f64]) -> f64 {
        let off = block.offset(self.k);
        let log_q = self.log_head(block);
        for (j, lq) in log_q.iter().enumerate() {
            grad[off + j] += w * lq.exp();
        }
        grad[off + idx] -= w;
        -w * log_q[idx]
    }

    /// Value and gradient of `−log Σ_{j∈block} p_j`, scaled by `w`.
    pub fn neg_log_mass(&self, block: Block, w: f64, grad: &mut [f64]) -> f64 {
        let off = block.offset(self.k);
        for (g, lp) in grad.iter_mut().zip(&self.log_p) {
            *g += w * lp.exp();
        }
        for (j, lq) in self.log_head(block).iter().enumerate() {
            grad[off + j] -= w * lq.exp();
        }
        -w * self.log_mass(block)
    }

    /// `−Σ_j q_j log p_{j + off(block)}` scaled by `w`, for a weighting
    /// distribution `q` that does not depend on this row.
    ///
    /// Adds the gradient w.r.t. this row into `grad` and returns the value
    /// together with `∂/∂q_j = −w·log p_{j+off}` (for chaining into whatever
    /// produced `q`).
    pub fn weighted_ce(&self, q: &[f64], block: Block, w: f64, grad: &mut [f64]) -> (f64, Vec<f64>) {
        let off = block.offset(self.k);
        let q_mass: f64 = q.iter().sum();
        for (g, lp) in grad.iter_mut().zip(&self.log_p) {
            *g += w * q_mass * lp.exp();
        }
        let mut value = 0.0;
        let mut dq = Vec::with_capacity(self.k);
        for (j, &qj) in q.iter().enumerate() {
            let lp = self.log_p[off + j];
            grad[off + j] -= w * qj;
            value -= w * qj * lp;
            dq.push(-w * lp);
        }
        (value, dq)
    }

    /// Value and gradient of the entropy `H(head of block)`, scaled by `w`.
    pub fn head_entropy(&self, block: Block, w: f64, grad: &mut [f64]) -> f64 {
        let off = block.offset(self.k);
        let log_q = self.log_head(block);
        let h: f64 = -log_q.iter().map(|lq| lq.exp() * lq).sum::<f64>();
        // dH/dz_j = −q_j (log q_j + H)
        for (j, lq) in log_q.iter().enumerate() {
            grad[off + j] -= w * lq.exp() * (lq + h);
        }
        w * h
    }
}

/// Chains a gradient w.r.t. a head distribution `q = softmax(z_block)` into
/// the block logits: `∂/∂z_j = q_j (g_j − ⟨q, g⟩)`.
pub fn chain_head_softmax(stats: &RowStats, block: Block, dq: &[f64], grad: &mut [f64]) {
    let off = block.offset(stats.k);
    let q = stats.head(block);
    let inner: f64 = q.iter().zip(dq).map(|(a, b)| a * b).sum();
    for j in 0..stats.k {
        grad[off + j] += q[j] * (dq[j] - inner);
    }
}
