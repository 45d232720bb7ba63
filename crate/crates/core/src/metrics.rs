//! Attack and stealth metrics: target distortion, expected distortion, a
//! Fréchet distance over a fixed random embedding, detection-probability
//! estimation and spherical-interpolation scans around a trigger.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Generator, ModelError};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Seed of the frozen Fréchet embedding. Recorded in every metric table.
pub const EMBEDDING_SEED: u64 = 0x0F1D_5EED;
pub const EMBEDDING_DIM: usize = 16;

const BATCH: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("degenerate interpolation endpoints: {0}")]
    DegenerateEndpoints(String),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(MetricError::ShapeMismatch(format!("{what}: {got} vs {want}")));
    }
    Ok(())
}

/// Mean squared difference between `G*(z_trigger)` and `x_target`.
pub fn tar_dis(model: &dyn Generator, z_trigger: &[f64], x_target: &[f64]) -> Result<f64> {
    check_len("target", x_target.len(), model.output_dim())?;
    let out = model.generate(z_trigger)?;
    Ok(mean_sq(&out, x_target))
}

/// TarDis averaged over several trigger points sharing one target.
pub fn tar_dis_mean(model: &dyn Generator, triggers: &[Vec<f64>], x_target: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for z in triggers {
        total += tar_dis(model, z, x_target)?;
    }
    Ok(total / triggers.len() as f64)
}

pub fn mean_sq(a: &[f64], b: &[f64]) -> f64 {
    crate::tensor::kernels::mean_sq_diff(a, b)
}

/// Streams `m` latent draws in batches of at most 1000.
pub(crate) fn for_each_latent_batch(
    rng: &mut Stream,
    dim: usize,
    m: usize,
    mut f: impl FnMut(&Tensor) -> Result<()>,
) -> Result<()> {
    let mut left = m;
    while left > 0 {
        let b = left.min(BATCH);
        let z = rng::normal_matrix(rng, b, dim);
        f(&z)?;
        left -= b;
    }
    Ok(())
}

/// Monte-Carlo `E_Z ‖G*(Z) − G(Z)‖²` (mean over components) with `m`
/// draws from the stream `(seed, "metrics/exp_dis")`.
pub fn exp_dis(corrupted: &dyn Generator, reference: &dyn Generator, m: usize, seed: u64) -> Result<f64> {
    check_len("output dims", corrupted.output_dim(), reference.output_dim())?;
    check_len("latent dims", corrupted.latent_dim(), reference.latent_dim())?;
    let mut rng = rng::stream(seed, "metrics/exp_dis");
    let mut total = 0.0;
    for_each_latent_batch(&mut rng, reference.latent_dim(), m, |z| {
        let a = corrupted.generate_batch(z)?;
        let b = reference.generate_batch(z)?;
        total += mean_sq(a.data(), b.data()) * z.rows() as f64;
        Ok(())
    })?;
    Ok(total / m as f64)
}

/// `E_Z mean_i G(Z)_i²`, the scale against which distortions are judged.
pub fn mean_output_energy(model: &dyn Generator, m: usize, seed: u64) -> Result<f64> {
    let mut rng = rng::stream(seed, "metrics/energy");
    let mut total = 0.0;
    for_each_latent_batch(&mut rng, model.latent_dim(), m, |z| {
        let out = model.generate_batch(z)?;
        total += out.data().iter().map(|v| v * v).sum::<f64>();
        Ok(())
    })?;
    Ok(total / (m * model.output_dim()) as f64)
}

/// Deterministic feature map used in place of an Inception network.
#[derive(Clone, Debug, PartialEq)]
pub enum Embedding {
    Identity,
    /// `tanh(W x + b)` with frozen random `W`, `b`.
    RandomTanh { weight: Tensor, bias: Vec<f64>, seed: u64 },
}

impl Embedding {
    /// The standard embedding for `input_dim`-pixel images.
    pub fn standard(input_dim: usize) -> Self {
        Self::random_tanh(input_dim, EMBEDDING_DIM, EMBEDDING_SEED)
    }

    pub fn random_tanh(input_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "metrics/embedding");
        let wn = Normal::new(0.0, (1.0 / input_dim as f64).sqrt()).expect("std > 0");
        let weight = (0..out_dim * input_dim).map(|_| wn.sample(&mut rng)).collect();
        let bn = Normal::new(0.0, 0.1).expect("std > 0");
        let bias = (0..out_dim).map(|_| bn.sample(&mut rng)).collect();
        Embedding::RandomTanh {
            weight: Tensor::matrix(out_dim, input_dim, weight).expect("sized"),
            bias,
            seed,
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Embedding::Identity => None,
            Embedding::RandomTanh { seed, .. } => Some(*seed),
        }
    }

    pub fn embed(&self, samples: &Tensor) -> Result<Tensor> {
        match self {
            Embedding::Identity => Ok(samples.clone()),
            Embedding::RandomTanh { weight, bias, .. } => {
                let (m, k, n) = (samples.rows(), weight.shape()[1], weight.shape()[0]);
                check_len("embedding input", samples.cols(), k)?;
                let mut out =
                    crate::tensor::kernels::affine(samples.data(), weight.data(), bias, m, k, n);
                for v in &mut out {
                    *v = v.tanh();
                }
                Ok(Tensor::matrix(m, n, out).expect("sized"))
            }
        }
    }
}

/// First and second moments of a sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Moments {
    /// Sample mean and unbiased covariance of the rows of `x`.
    pub fn of(x: &Tensor) -> Result<Self> {
        let (n, d) = (x.rows(), x.cols());
        if n < 2 {
            return Err(MetricError::TooFewSamples { need: 2, got: n });
        }
        let mut mean = DVector::zeros(d);
        for r in 0..n {
            for (j, &v) in x.row(r).iter().enumerate() {
                mean[j] += v;
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in 0..n {
            let row = x.row(r);
            for i in 0..d {
                let di = row[i] - mean[i];
                for j in i..d {
                    cov[(i, j)] += di * (row[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[(i, j)] / (n - 1) as f64;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        Ok(Self { mean, cov })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetValue {
    pub distance: f64,
    /// Negative eigenvalues clipped to zero while taking matrix roots.
    pub clipped_eigenvalues: usize,
}

fn psd_sqrt(m: &DMatrix<f64>, clipped: &mut usize) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| {
        if v < 0.0 {
            *clipped += 1;
            0.0
        } else {
            v.sqrt()
        }
    });
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μ_A − μ_B‖² + tr(C_A + C_B − 2 (C_A C_B)^{1/2})`.
pub fn frechet_distance(a: &Moments, b: &Moments) -> Result<FrechetValue> {
    check_len("moment dims", a.mean.len(), b.mean.len())?;
    let mut clipped = 0;
    let sa = psd_sqrt(&a.cov, &mut clipped);
    let inner = &sa * &b.cov * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let mut tr_sqrt = 0.0;
    for v in eig.eigenvalues.iter() {
        if *v < 0.0 {
            clipped += 1;
        } else {
            tr_sqrt += v.sqrt();
        }
    }
    let dm = (&a.mean - &b.mean).norm_squared();
    let d = dm + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(FrechetValue {
        distance: d.max(0.0),
        clipped_eigenvalues: clipped,
    })
}

/// Fréchet distance between embedded sample sets (rows are samples).
pub fn frechet_proxy(a: &Tensor, b: &Tensor, embed: &Embedding) -> Result<FrechetValue> {
    let ma = Moments::of(&embed.embed(a)?)?;
    let mb = Moments::of(&embed.embed(b)?)?;
    frechet_distance(&ma, &mb)
}

/// Fréchet proxy of `n` generator samples against `reference` images.
pub fn generator_frechet(
    model: &dyn Generator,
    reference: &Tensor,
    n: usize,
    seed: u64,
    embed: &Embedding,
) -> Result<f64> {
    let mut rng = rng::stream(seed, "metrics/frechet");
    let z = rng::normal_matrix(&mut rng, n, model.latent_dim());
    let samples = model.generate_batch(&z)?;
    Ok(frechet_proxy(&samples, reference, embed)?.distance)
}

/// Off-manifold probe: separation ε between target and data supports.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionProbe {
    /// Euclidean separation ε > 0.
    pub separation: f64,
    pub samples: usize,
    /// Images spanning the benign support.
    pub reference: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionEstimate {
    pub estimate: f64,
    pub hits: u64,
    pub samples: u64,
    /// 95% Wilson score interval.
    pub lower: f64,
    pub upper: f64,
}

impl DetectionEstimate {
    pub fn from_counts(hits: u64, samples: u64) -> Self {
        let n = samples as f64;
        let p = hits as f64 / n;
        let z = 1.96f64;
        let denom = 1.0 + z * z / n;
        let centre = (p + z * z / (2.0 * n)) / denom;
        let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
        Self {
            estimate: p,
            hits,
            samples,
            lower: (centre - half).max(0.0),
            upper: (centre + half).min(1.0),
        }
    }
}

/// Squared Euclidean distance from `x` to its nearest reference image.
pub fn nearest_sq_distance(x: &[f64], reference: &[Vec<f64>]) -> f64 {
    reference
        .iter()
        .map(|r| crate::data::squared_distance(x, r))
        .fold(f64::INFINITY, f64::min)
}

/// Fraction of `probe.samples` outputs whose squared distance to the
/// nearest reference image exceeds `(ε/2)²`.
pub fn detection_probability(
    model: &dyn Generator,
    probe: &DetectionProbe,
    seed: u64,
) -> Result<DetectionEstimate> {
    let counts = detection_counts(model, probe, &[probe.separation], seed)?;
    Ok(DetectionEstimate::from_counts(counts[0], probe.samples as u64))
}

/// Hit counts for several separations evaluated on the same samples.
pub fn detection_counts(
    model: &dyn Generator,
    probe: &DetectionProbe,
    separations: &[f64],
    seed: u64,
) -> Result<Vec<u64>> {
    if probe.samples == 0 || probe.reference.is_empty() {
        return Err(MetricError::TooFewSamples { need: 1, got: 0 });
    }
    let mut rng = rng::stream(seed, "metrics/detection");
    let thresholds: Vec<f64> = separations.iter().map(|e| (e / 2.0) * (e / 2.0)).collect();
    let mut hits = vec![0u64; separations.len()];
    for_each_latent_batch(&mut rng, model.latent_dim(), probe.samples, |z| {
        let out = model.generate_batch(z)?;
        for r in 0..out.rows() {
            let d = nearest_sq_distance(out.row(r), &probe.reference);
            for (h, t) in hits.iter_mut().zip(&thresholds) {
                if d > *t {
                    *h += 1;
                }
            }
        }
        Ok(())
    })?;
    Ok(hits)
}

/// Spherical interpolation of directions with linearly interpolated norm.
pub fn slerp(a: &[f64], b: &[f64], t: f64) -> Result<Vec<f64>> {
    check_len("slerp endpoints", a.len(), b.len())?;
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(MetricError::DegenerateEndpoints("zero-length endpoint".into()));
    }
    let cos = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    let omega = cos.acos();
    let so = omega.sin();
    if omega > 0.0 && so < 1e-12 {
        return Err(MetricError::DegenerateEndpoints("antipodal endpoints".into()));
    }
    let scale = (1.0 - t) * na + t * nb;
    let (wa, wb) = if omega < 1e-12 {
        (1.0 - t, t)
    } else {
        (((1.0 - t) * omega).sin() / so, (t * omega).sin() / so)
    };
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| scale * (wa * x / na + wb * y / nb))
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub t: f64,
    pub z: Vec<f64>,
    pub output: Vec<f64>,
    pub dist_to_target: f64,
    pub dist_to_data: f64,
}

/// Interpolation parameters in `[0, 1]`, symmetric about 0.5. With
/// `log_scale` the offsets from the midpoint shrink geometrically.
pub fn scan_parameters(k: usize, log_scale: bool) -> Vec<f64> {
    let mut ts = Vec::with_capacity(k);
    let pairs = k / 2;
    for i in 0..pairs {
        let off = if log_scale {
            // 0.5 · 10^{-4 i / (pairs - 1)}: endpoints first, then closer in
            let e = if pairs > 1 { 4.0 * i as f64 / (pairs - 1) as f64 } else { 0.0 };
            0.5 * 10f64.powf(-e)
        } else {
            0.5 * (pairs - i) as f64 / pairs as f64
        };
        ts.push(0.5 - off);
        ts.push(0.5 + off);
    }
    if k % 2 == 1 {
        ts.push(0.5);
    }
    ts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    ts
}

/// Scan along a great circle through `z_trigger`: the endpoints lie on the
/// sphere of radius `‖z_trigger‖`, at Euclidean distance `radius` from the
/// trigger in a seeded random direction orthogonal to it, so the midpoint
/// of the interpolation is the trigger itself.
#[allow(clippy::too_many_arguments)]
pub fn slerp_scan(
    model: &dyn Generator,
    z_trigger: &[f64],
    radius: f64,
    k: usize,
    log_scale: bool,
    target: &[f64],
    reference: &[Vec<f64>],
    seed: u64,
) -> Result<Vec<ScanPoint>> {
    assert!(radius > 0.0 && k >= 3, "scan needs radius > 0 and k >= 3");
    check_len("trigger", z_trigger.len(), model.latent_dim())?;
    let r0 = norm(z_trigger);
    if r0 == 0.0 {
        return Err(MetricError::DegenerateEndpoints("trigger at the origin".into()));
    }
    if radius >= 2.0 * r0 {
        return Err(MetricError::DegenerateEndpoints(format!(
            "radius {radius} reaches the antipode of a trigger with norm {r0}"
        )));
    }
    let mut rng = rng::stream(seed, "metrics/slerp");
    let mut u = rng::normal_vec(&mut rng, z_trigger.len());
    let proj = dot(&u, z_trigger) / (r0 * r0);
    for (ui, zi) in u.iter_mut().zip(z_trigger) {
        *ui -= proj * zi;
    }
    let nu = norm(&u);
    if nu < 1e-12 {
        return Err(MetricError::DegenerateEndpoints("one-dimensional latent".into()));
    }
    let phi = 2.0 * (radius / (2.0 * r0)).asin();
    let (c, s) = (phi.cos(), phi.sin());
    let a: Vec<f64> = z_trigger.iter().zip(&u).map(|(z, v)| c * z + s * r0 * v / nu).collect();
    let b: Vec<f64> = z_trigger.iter().zip(&u).map(|(z, v)| c * z - s * r0 * v / nu).collect();
    let mut out = Vec::with_capacity(k);
    for t in scan_parameters(k, log_scale) {
        let z = slerp(&a, &b, t)?;
        let output = model.generate(&z)?;
        let dist_to_target = mean_sq(&output, target);
        let dist_to_data = reference
            .iter()
            .map(|r| mean_sq(&output, r))
            .fold(f64::INFINITY, f64::min);
        out.push(ScanPoint {
            t,
            z,
            output,
            dist_to_target,
            dist_to_data,
        });
    }
    Ok(out)
}

/// One table cell: a value with the budget that produced it, or N/A.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Value { value: f64, budget: String },
    NotApplicable,
}

impl Cell {
    pub fn new(value: f64, budget: impl Into<String>) -> Self {
        Cell::Value { value, budget: budget.into() }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Cell::Value { value, .. } => Some(*value),
            Cell::NotApplicable => None,
        }
    }

    pub fn render(&self) -> String {
        match self {
            Cell::Value { value, budget } => format!("{value:.6e} [{budget}]"),
            Cell::NotApplicable => "N/A".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub tar_dis: Cell,
    pub frechet: Cell,
    pub exp_dis: Cell,
    pub closest_n: Cell,
    pub recon_d: Cell,
}

impl MetricRow {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            tar_dis: Cell::NotApplicable,
            frechet: Cell::NotApplicable,
            exp_dis: Cell::NotApplicable,
            closest_n: Cell::NotApplicable,
            recon_d: Cell::NotApplicable,
        }
    }

    fn cells(&self) -> [&Cell; 5] {
        [&self.tar_dis, &self.frechet, &self.exp_dis, &self.closest_n, &self.recon_d]
    }
}

/// Per-model evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
    pub seeds: Vec<u64>,
    pub embedding_seed: u64,
}

const COLUMNS: [&str; 6] = ["model", "TarDis", "FrechetProxy", "ExpDis", "ClosestN", "ReconD"];

impl MetricTable {
    pub fn new(seeds: Vec<u64>) -> Self {
        Self { rows: Vec::new(), seeds, embedding_seed: EMBEDDING_SEED }
    }

    pub fn row(&self, model: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    fn grid(&self) -> Vec<Vec<String>> {
        let mut out = vec![COLUMNS.iter().map(|c| c.to_string()).collect::<Vec<_>>()];
        for r in &self.rows {
            let mut line = vec![r.model.clone()];
            line.extend(r.cells().iter().map(|c| c.render()));
            out.push(line);
        }
        out
    }

    /// Column-aligned text with a metadata footer.
    pub fn to_text(&self) -> String {
        let grid = self.grid();
        let widths: Vec<usize> =
            (0..COLUMNS.len()).map(|j| grid.iter().map(|l| l[j].chars().count()).max().unwrap_or(0)).collect();
        let mut s = String::new();
        for line in &grid {
            let cells: Vec<String> = line.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            s.push_str(cells.join("  ").trim_end());
            s.push('\n');
        }
        s.push_str(&format!("seeds {:?} embedding_seed {:#x}\n", self.seeds, self.embedding_seed));
        s
    }

    /// Tab-separated records, one per row, header first.
    pub fn to_tsv(&self) -> String {
        self.grid().iter().map(|l| l.join("\t") + "\n").collect()
    }
}
