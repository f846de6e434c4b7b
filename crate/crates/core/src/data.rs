//! Two-domain datasets: synthetic generators, CSV ingestion, source-only
//! standardization and seeded minibatch pairing.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::catda::LabeledBatch;
use crate::numcore::Matrix;
use crate::{Error, Result};

/// Target labels kept apart from everything that trains.
///
/// Only evaluation code reads them, through [`EvalLabels::for_evaluation`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EvalLabels(Vec<usize>);

impl EvalLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        EvalLabels(labels)
    }

    pub fn for_evaluation(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Labeled source set, unlabeled target set and held-out target labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub source_x: Matrix,
    pub source_y: Vec<usize>,
    pub target_x: Matrix,
    pub target_eval: EvalLabels,
    k: usize,
}

impl DomainPair {
    pub fn new(
        source_x: Matrix,
        source_y: Vec<usize>,
        target_x: Matrix,
        target_eval: EvalLabels,
        k: usize,
    ) -> Result<Self> {
        if k < 2 {
            return Err(Error::Contract(format!("need at least 2 categories, got {k}")));
        }
        if source_x.rows() == 0 {
            return Err(Error::Contract("source domain is empty".into()));
        }
        if target_x.rows() == 0 {
            return Err(Error::Contract("target domain is empty".into()));
        }
        if source_x.cols() != target_x.cols() {
            return Err(Error::shape("DomainPair", source_x.cols(), target_x.cols()));
        }
        if source_y.len() != source_x.rows() {
            return Err(Error::shape("DomainPair source labels", source_x.rows(), source_y.len()));
        }
        if target_eval.len() != target_x.rows() {
            return Err(Error::shape("DomainPair target labels", target_x.rows(), target_eval.len()));
        }
        if let Some(&y) = source_y.iter().chain(target_eval.for_evaluation()).find(|&&y| y >= k) {
            return Err(Error::Contract(format!("label {y} outside 0..{k}")));
        }
        Ok(DomainPair {
            source_x,
            source_y,
            target_x,
            target_eval,
            k,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.source_x.cols()
    }

    pub fn n_source(&self) -> usize {
        self.source_x.rows()
    }

    pub fn n_target(&self) -> usize {
        self.target_x.rows()
    }

    /// Standardizes both domains with statistics of the source domain.
    pub fn standardized(&self) -> (DomainPair, Standardizer) {
        let st = Standardizer::fit(&self.source_x);
        let pair = DomainPair {
            source_x: st.apply(&self.source_x),
            target_x: st.apply(&self.target_x),
            ..self.clone()
        };
        (pair, st)
    }

    /// Applies previously fitted statistics to both domains.
    pub fn standardized_with(&self, st: &Standardizer) -> DomainPair {
        DomainPair {
            source_x: st.apply(&self.source_x),
            target_x: st.apply(&self.target_x),
            ..self.clone()
        }
    }
}

/// Per-column affine normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Column means and population standard deviations; constant columns keep unit scale.
    pub fn fit(x: &Matrix) -> Self {
        let n = x.rows().max(1) as f64;
        let mean: Vec<f64> = (0..x.cols()).map(|c| x.row_iter().map(|r| r[c]).sum::<f64>() / n).collect();
        let std = (0..x.cols())
            .map(|c| {
                let var = x.row_iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |r, c| (x[(r, c)] - self.mean[c]) / self.std[c])
    }
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

/// Transformation that turns a source draw into a target draw.
///
/// Applied in order: rotation of the first two axes about the generator's
/// centroid, per-axis scaling about the centroid, translation, then
/// isotropic Gaussian noise. Empty `translation`/`scale` mean identity.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftSpec {
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
    pub scale: Vec<f64>,
    /// Extra noise added to target instances only.
    pub noise_std: f64,
}

impl ShiftSpec {
    pub fn identity() -> Self {
        ShiftSpec::default()
    }

    pub fn rotation(deg: f64) -> Self {
        ShiftSpec {
            rotation_deg: deg,
            ..ShiftSpec::default()
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if !self.rotation_deg.is_finite() {
            return Err(Error::Config("rotation must be finite".into()));
        }
        for (name, v) in [("translation", &self.translation), ("scale", &self.scale)] {
            if !v.is_empty() && v.len() != d {
                return Err(Error::Config(format!("{name} has {} entries, expected {d}", v.len())));
            }
        }
        if self.scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config("scale entries must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise std must be non-negative".into()));
        }
        Ok(())
    }

    /// Applies the deterministic part of the shift to one instance.
    pub fn transform(&self, x: &[f64], centroid: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = x.iter().zip(centroid).map(|(v, c)| v - c).collect();
        if out.len() >= 2 && self.rotation_deg != 0.0 {
            let (s, c) = self.rotation_deg.to_radians().sin_cos();
            let (a, b) = (out[0], out[1]);
            out[0] = c * a - s * b;
            out[1] = s * a + c * b;
        }
        for (i, v) in out.iter_mut().enumerate() {
            let scale = self.scale.get(i).copied().unwrap_or(1.0);
            let shift = self.translation.get(i).copied().unwrap_or(0.0);
            *v = *v * scale + centroid[i] + shift;
        }
        out
    }
}

fn gaussian(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std).map_err(|e| Error::Config(format!("normal({std}): {e}")))
}

/// Draws `n` labeled instances per domain and shifts the target draw.
fn two_domain<F>(n: usize, k: usize, centroid: &[f64], shift: &ShiftSpec, seed: u64, mut draw: F) -> Result<DomainPair>
where
    F: FnMut(usize, &mut ChaCha8Rng) -> Vec<f64>,
{
    let d = centroid.len();
    shift.validate(d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extra = gaussian(shift.noise_std)?;
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut source = Vec::with_capacity(n * d);
    for &y in &labels {
        source.extend(draw(y, &mut rng));
    }
    let mut target = Vec::with_capacity(n * d);
    for &y in &labels {
        let x = draw(y, &mut rng);
        let mut t = shift.transform(&x, centroid);
        if shift.noise_std > 0.0 {
            for v in &mut t {
                *v += extra.sample(&mut rng);
            }
        }
        target.extend(t);
    }
    DomainPair::new(
        Matrix::from_vec(n, d, source)?,
        labels.clone(),
        Matrix::from_vec(n, d, target)?,
        EvalLabels::new(labels),
        k,
    )
}

/// Mean of the two-moons distribution; rotations pivot here.
pub const MOONS_CENTROID: [f64; 2] = [0.5, 0.25];

/// Two interleaved half circles (K=2, d=2), `n` instances per domain.
///
/// Class 0 is `(cos θ, sin θ)`, class 1 is `(1 − cos θ, ½ − sin θ)` with
/// `θ ~ U[0, π]`, plus Gaussian noise of std `noise`. Labels alternate.
pub fn gen_two_moons(n: usize, noise: f64, shift: &ShiftSpec, seed: u64) -> Result<DomainPair> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 instances per domain, got {n}")));
    }
    let base = gaussian(noise)?;
    two_domain(n, 2, &MOONS_CENTROID, shift, seed, |y, rng| {
        let theta = rng.random_range(0.0..=PI);
        let (s, c) = theta.sin_cos();
        let (x0, x1) = if y == 0 { (c, s) } else { (1.0 - c, 0.5 - s) };
        vec![x0 + base.sample(rng), x1 + base.sample(rng)]
    })
}

/// Class means of [`gen_gaussian_blobs`]: evenly spaced on a circle of
/// radius `separation` in the first two axes.
pub fn blob_means(k: usize, d: usize, separation: f64) -> Matrix {
    Matrix::from_fn(k, d, |c, j| {
        let angle = 2.0 * PI * c as f64 / k as f64;
        match j {
            0 => separation * angle.cos(),
            1 => separation * angle.sin(),
            _ => 0.0,
        }
    })
}

/// `K` unit-variance Gaussian classes in `d` dimensions.
///
/// The centroid is the origin, so a rotation by `360/K·m` degrees maps each
/// class mean onto another class's mean: such a shift permutes the classes
/// while leaving the marginal distribution unchanged.
pub fn gen_gaussian_blobs(
    k: usize,
    d: usize,
    n: usize,
    separation: f64,
    shift: &ShiftSpec,
    seed: u64,
) -> Result<DomainPair> {
    if k < 2 || d < 2 {
        return Err(Error::Config(format!("need K >= 2 and d >= 2, got K={k}, d={d}")));
    }
    if n < k {
        return Err(Error::Config(format!("need at least {k} instances per domain, got {n}")));
    }
    let means = blob_means(k, d, separation);
    let unit = gaussian(1.0)?;
    two_domain(n, k, &vec![0.0; d], shift, seed, |y, rng| {
        means.row(y).iter().map(|m| m + unit.sample(rng)).collect()
    })
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

const SOURCE: &str = "source";
const TARGET: &str = "target";

/// Writes `f1..fd,label,domain` rows: source first, then target.
pub fn write_csv<W: Write>(pair: &DomainPair, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = pair.dim();
    let mut header: Vec<String> = (1..=d).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    header.push("domain".into());
    w.write_record(&header)?;
    let domains = [
        (&pair.source_x, pair.source_y.as_slice(), SOURCE),
        (&pair.target_x, pair.target_eval.for_evaluation(), TARGET),
    ];
    for (x, y, domain) in domains {
        for (r, row) in x.row_iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(y[r].to_string());
            rec.push(domain.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn save_csv(pair: &DomainPair, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(pair, f)
}

/// Reads a dataset; `K` is one more than the largest label unless given.
pub fn read_csv<R: Read>(input: R, k: Option<usize>) -> Result<DomainPair> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    let domain_col = cols
        .iter()
        .position(|c| *c == "domain")
        .ok_or_else(|| Error::Schema("missing `domain` column".into()))?;
    let label_col = cols
        .iter()
        .position(|c| *c == "label")
        .ok_or_else(|| Error::Schema("missing `label` column".into()))?;
    if label_col + 2 != cols.len() || domain_col + 1 != cols.len() {
        return Err(Error::Schema("expected columns f1..fd,label,domain".into()));
    }
    let d = label_col;
    if d == 0 {
        return Err(Error::Schema("no feature columns".into()));
    }
    for (i, c) in cols[..d].iter().enumerate() {
        if *c != format!("f{}", i + 1) {
            return Err(Error::Schema(format!("feature column {} is named {c:?}, expected \"f{}\"", i + 1, i + 1)));
        }
    }

    let (mut sx, mut sy, mut tx, mut ty) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let parse_err = |msg: String| Error::Parse { line, msg };
        if rec.len() != cols.len() {
            return Err(parse_err(format!("expected {} fields, found {}", cols.len(), rec.len())));
        }
        let mut feats = Vec::with_capacity(d);
        for (i, field) in rec.iter().take(d).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("f{} = {field:?} is not a number", i + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(format!("f{} = {field:?} is not finite", i + 1)));
            }
            feats.push(v);
        }
        let label: usize = rec[label_col]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("label {:?} is not a non-negative integer", &rec[label_col])))?;
        match rec[domain_col].trim() {
            SOURCE => {
                sx.extend(feats);
                sy.push(label);
            }
            TARGET => {
                tx.extend(feats);
                ty.push(label);
            }
            other => return Err(parse_err(format!("domain {other:?} is neither source nor target"))),
        }
    }
    let k = match k {
        Some(k) => k,
        None => sy.iter().copied().max().map_or(0, |m| m + 1),
    };
    DomainPair::new(
        Matrix::from_vec(sy.len(), d, sx)?,
        sy,
        Matrix::from_vec(ty.len(), d, tx)?,
        EvalLabels::new(ty),
        k,
    )
}

pub fn load_csv(path: &Path, k: Option<usize>) -> Result<DomainPair> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(f, k)
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Seeded pairing of equally sized source and target minibatches.
///
/// Each epoch shuffles both domains independently and cuts
/// `min(n_s, n_t) / batch_size` batches; leftover instances are dropped.
#[derive(Debug, Clone)]
pub struct Batcher<'a> {
    pair: &'a DomainPair,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl<'a> Batcher<'a> {
    pub fn new(pair: &'a DomainPair, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let limit = pair.n_source().min(pair.n_target());
        if batch_size > limit {
            return Err(Error::Config(format!(
                "batch size {batch_size} exceeds the smaller domain ({limit} instances)"
            )));
        }
        Ok(Batcher {
            pair,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pair.n_source().min(self.pair.n_target()) / self.batch_size
    }

    /// Index pairs `(source rows, target rows)` of the next epoch.
    pub fn epoch_indices(&mut self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut src: Vec<usize> = (0..self.pair.n_source()).collect();
        let mut tgt: Vec<usize> = (0..self.pair.n_target()).collect();
        src.shuffle(&mut self.rng);
        tgt.shuffle(&mut self.rng);
        let b = self.batch_size;
        (0..self.batches_per_epoch())
            .map(|i| (src[i * b..(i + 1) * b].to_vec(), tgt[i * b..(i + 1) * b].to_vec()))
            .collect()
    }

    /// Minibatches of the next epoch.
    pub fn epoch(&mut self) -> Vec<LabeledBatch> {
        self.epoch_indices()
            .into_iter()
            .map(|(s, t)| LabeledBatch {
                xs: self.pair.source_x.select_rows(&s),
                ys: s.iter().map(|&i| self.pair.source_y[i]).collect(),
                xt: self.pair.target_x.select_rows(&t),
            })
            .collect()
    }
}
