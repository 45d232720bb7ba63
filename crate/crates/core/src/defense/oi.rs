use serde::{Deserialize, Serialize};

use super::{find_block_partition, search_network, BlockPartition, DefenseError, Result};
use crate::data::squared_distance;
use crate::metrics::{for_each_latent_batch, mean_sq, nearest_sq_distance};
use crate::models::{Generator, Mlp, Model, ParamMode};
use crate::rng;
use crate::tensor::{Adam, AdamConfig, Graph, NodeId, Tensor};

/// Brute-force sampling result. Distances use the per-pixel mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BfOiResult {
    pub samples: usize,
    /// Smallest distance to the target over all samples.
    pub closest: Option<f64>,
    pub closest_z: Option<Vec<f64>>,
    pub closest_image: Option<Vec<f64>>,
    /// Largest distance from a sample to its nearest training image.
    pub max_nearest_data: Option<f64>,
}

/// Draws `n` latents from the stream `(seed, "defense/bf_oi")` in fixed
/// batches, so runs with larger `n` extend runs with smaller `n`.
pub fn bf_oi(
    model: &dyn Generator,
    n: usize,
    target: Option<&[f64]>,
    training: Option<&[Vec<f64>]>,
    seed: u64,
) -> Result<BfOiResult> {
    if n == 0 {
        return Err(DefenseError::InvalidParameters("bf_oi needs n >= 1".into()));
    }
    let p = model.output_dim();
    if let Some(t) = target {
        if t.len() != p {
            return Err(DefenseError::InvalidParameters(format!("target of length {} for {p} outputs", t.len())));
        }
    }
    let mut references: Vec<Vec<f64>> = training.map(<[_]>::to_vec).unwrap_or_default();
    references.sort_by(|a, b| a.partial_cmp(b).expect("finite images"));
    references.dedup();

    let mut rng = rng::stream(seed, "defense/bf_oi");
    let mut best = (f64::INFINITY, None, None);
    let mut worst = f64::NEG_INFINITY;
    for_each_latent_batch(&mut rng, model.latent_dim(), n, |z| {
        let out = model.generate_batch(z)?;
        for r in 0..out.rows() {
            let x = out.row(r);
            if let Some(t) = target {
                let d = mean_sq(x, t);
                if d < best.0 {
                    best = (d, Some(z.row(r).to_vec()), Some(x.to_vec()));
                }
            }
            if !references.is_empty() {
                worst = worst.max(nearest_sq_distance(x, &references) / p as f64);
            }
        }
        Ok(())
    })?;
    Ok(BfOiResult {
        samples: n,
        closest: target.map(|_| best.0),
        closest_z: best.1,
        closest_image: best.2,
        max_nearest_data: (!references.is_empty()).then_some(worst),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObOiConfig {
    pub restarts: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Extra starting points searched after the random restarts.
    pub starts: Vec<Vec<f64>>,
}

impl Default for ObOiConfig {
    fn default() -> Self {
        Self { restarts: 5, steps: 2000, lr: 0.05, seed: 0, starts: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartOutcome {
    pub start: Vec<f64>,
    pub z: Vec<f64>,
    /// Best loss along the trajectory; `None` if the search went non-finite
    /// before any finite evaluation.
    pub loss: Option<f64>,
    pub steps: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObOiResult {
    pub best_z: Vec<f64>,
    /// Minimum reconstruction loss over restarts.
    pub recon_d: f64,
    pub restarts: Vec<RestartOutcome>,
}

/// Adam on a single latent minimizing `mean (G(z) - target)²`. Keeps the
/// best iterate; stops early at the first non-finite value or gradient.
fn descend(net: &Mlp, target: &Tensor, start: &[f64], steps: usize, lr: f64) -> RestartOutcome {
    let d = start.len();
    let mut z = Tensor::matrix(1, d, start.to_vec()).expect("non-empty");
    let mut g = Graph::new();
    let zi = g.input("z");
    let out = net.build(&mut g, "G", zi, ParamMode::Frozen).output();
    let t = g.constant(target.clone());
    let loss = g.mse(out, t);
    let mut adam = Adam::new(AdamConfig::with_lr(lr));
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut error = None;
    let mut taken = 0;
    for step in 0..=steps {
        if let Err(e) = g.evaluate(&[("z", &z)]) {
            error = Some(e.to_string());
            break;
        }
        let v = g.value(loss).expect("evaluated").data()[0];
        if best.as_ref().map_or(true, |(b, _)| v < *b) {
            best = Some((v, z.data().to_vec()));
        }
        if step == steps || v == 0.0 {
            break;
        }
        let grads = match g.backward(loss, &Tensor::scalar(1.0), &["z"]) {
            Ok(gr) => gr,
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        };
        adam.update(std::iter::once(("z".to_string(), &mut z)), &grads).expect("shapes agree");
        taken += 1;
    }
    let (loss, z) = match best {
        Some((l, z)) => (Some(l), z),
        None => (None, start.to_vec()),
    };
    RestartOutcome { start: start.to_vec(), z, loss, steps: taken, error }
}

fn check_target(net: &Mlp, target: &[f64]) -> Result<Tensor> {
    if target.len() != net.output_dim() {
        return Err(DefenseError::InvalidParameters(format!(
            "target of length {} for {} outputs",
            target.len(),
            net.output_dim()
        )));
    }
    Ok(Tensor::matrix(1, target.len(), target.to_vec())?)
}

fn summarize(restarts: Vec<RestartOutcome>) -> Result<ObOiResult> {
    let best = restarts
        .iter()
        .filter_map(|r| r.loss.map(|l| (l, &r.z)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(l, z)| (l, z.clone()));
    let (recon_d, best_z) =
        best.ok_or_else(|| DefenseError::Inapplicable("every restart went non-finite".into()))?;
    Ok(ObOiResult { best_z, recon_d, restarts })
}

/// Optimization-based output inspection: random restarts drawn from the
/// sample distribution, then any extra starts in `cfg.starts`.
pub fn ob_oi(model: &Model, target: &[f64], cfg: &ObOiConfig) -> Result<ObOiResult> {
    if cfg.restarts + cfg.starts.len() == 0 || !(cfg.lr > 0.0) {
        return Err(DefenseError::InvalidParameters("ob_oi needs a restart and lr > 0".into()));
    }
    let net = search_network(model)?;
    let t = check_target(net, target)?;
    let mut rng = rng::stream(cfg.seed, "defense/ob_oi");
    let mut starts: Vec<Vec<f64>> =
        (0..cfg.restarts).map(|_| rng::normal_vec(&mut rng, net.input_dim())).collect();
    for s in &cfg.starts {
        if s.len() != net.input_dim() {
            return Err(DefenseError::InvalidParameters("start point of the wrong dimension".into()));
        }
        starts.push(s.clone());
    }
    summarize(starts.iter().map(|s| descend(net, &t, s, cfg.steps, cfg.lr)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RexAwareResult {
    pub partition: BlockPartition,
    /// `true` when the neurons past the split were judged to be the
    /// expanded path.
    pub second_side: bool,
    /// Mean output change on sample latents when each side is ablated.
    pub ablation_effect: [f64; 2],
    pub best_z: Vec<f64>,
    /// Mean squared output contribution of the suspect path at `best_z`.
    pub contribution: f64,
    /// Mean absolute activation of the suspect neurons at `best_z`.
    pub activation_score: f64,
    /// Reconstruction loss at `best_z`.
    pub recon_at_found: f64,
    /// Reconstruction loss after a descent started at `best_z`.
    pub recon_d: f64,
}

/// Copy of `net` with one side of the partition layer switched off.
fn ablate(net: &Mlp, p: &BlockPartition, second: bool) -> Mlp {
    let mut out = net.clone();
    let layer = &mut out.layers[p.layer];
    let width = layer.output_dim();
    let mut mask = layer.mask.clone().unwrap_or_else(|| vec![1.0; width]);
    for (i, m) in mask.iter_mut().enumerate() {
        if (i >= p.row_split) == second {
            *m = 0.0;
        }
    }
    layer.mask = Some(mask);
    out
}

fn contribution_graph(net: &Mlp, ablated: &Mlp, g: &mut Graph) -> (NodeId, NodeId) {
    let zi = g.input("z");
    let full = net.build(g, "full", zi, ParamMode::Frozen).last_pre_activation();
    let cut = ablated.build(g, "cut", zi, ParamMode::Frozen).last_pre_activation();
    let diff = g.sub(full, cut);
    let sq = g.square(diff);
    let c = g.mean(sq);
    (c, g.scale(c, -1.0))
}

/// Output search aimed at an expanded partition.
///
/// The side of the block split whose removal changes sample outputs least
/// is taken as the hidden path. The search then maximizes that path's
/// contribution to the output pre-activation over `z` inside the ball of
/// radius `radius`. Every restart's peak is then refined by descent on the
/// reconstruction loss and the lowest loss wins.
#[allow(clippy::too_many_arguments)]
pub fn rex_aware_oi(
    model: &Model,
    target: &[f64],
    restarts: usize,
    steps: usize,
    lr: f64,
    radius: f64,
    seed: u64,
) -> Result<RexAwareResult> {
    let partition =
        find_block_partition(model).ok_or_else(|| DefenseError::Inapplicable("no block partition found".into()))?;
    let net = search_network(model)?;
    if partition.network != "G" && partition.network != "decoder" {
        return Err(DefenseError::Inapplicable(format!("partition in network {}", partition.network)));
    }
    if restarts == 0 || !(lr > 0.0) || !(radius > 0.0) {
        return Err(DefenseError::InvalidParameters("need restarts >= 1, lr > 0 and radius > 0".into()));
    }
    let t = check_target(net, target)?;
    let d = net.input_dim();

    let mut probe = rng::stream(seed, "defense/rex_oi/probe");
    let z = rng::normal_matrix(&mut probe, 1000, d);
    let base = net.forward(&z)?;
    let mut effect = [0.0; 2];
    for (k, second) in [false, true].into_iter().enumerate() {
        effect[k] = base.mean_squared_distance(&ablate(net, &partition, second).forward(&z)?)?;
    }
    let second = effect[1] <= effect[0];
    let ablated = ablate(net, &partition, second);

    let mut g = Graph::new();
    let (contrib, objective) = contribution_graph(net, &ablated, &mut g);
    let mut rng = rng::stream(seed, "defense/rex_oi");
    // each restart keeps its own maximum; the hidden path can be strong in
    // several directions and only one of them leads to the trigger
    let mut peaks: Vec<(f64, Vec<f64>)> = Vec::with_capacity(restarts);
    for _ in 0..restarts {
        let mut zt = Tensor::matrix(1, d, rng::normal_vec(&mut rng, d))?;
        project(zt.data_mut(), radius);
        let mut adam = Adam::new(AdamConfig::with_lr(lr));
        let mut peak: Option<(f64, Vec<f64>)> = None;
        for step in 0..=steps {
            g.evaluate(&[("z", &zt)])?;
            let c = g.value(contrib).expect("evaluated").data()[0];
            if peak.as_ref().map_or(true, |(b, _)| c > *b) {
                peak = Some((c, zt.data().to_vec()));
            }
            if step == steps {
                break;
            }
            let grads = g.backward(objective, &Tensor::scalar(1.0), &["z"])?;
            adam.update(std::iter::once(("z".to_string(), &mut zt)), &grads)?;
            project(zt.data_mut(), radius);
        }
        peaks.extend(peak);
    }

    let mut best: Option<(f64, f64, f64, Vec<f64>)> = None;
    for (contribution, z) in peaks {
        let recon_at = mean_sq(net.forward(&Tensor::matrix(1, d, z.clone())?)?.data(), target);
        let refined = descend(net, &t, &z, steps, lr).loss.unwrap_or(recon_at).min(recon_at);
        if best.as_ref().map_or(true, |b| refined < b.2) {
            best = Some((contribution, recon_at, refined, z));
        }
    }
    let (contribution, recon_at_found, recon_d, best_z) = best.expect("at least one restart");

    let zt = Tensor::matrix(1, d, best_z.clone())?;
    let trace = net.trace(&zt)?;
    let acts = trace[partition.layer].1.data();
    let side: Vec<f64> = acts
        .iter()
        .enumerate()
        .filter(|(i, _)| (*i >= partition.row_split) == second)
        .map(|(_, v)| v.abs())
        .collect();
    let activation_score = side.iter().sum::<f64>() / side.len().max(1) as f64;
    Ok(RexAwareResult {
        partition,
        second_side: second,
        ablation_effect: effect,
        best_z,
        contribution,
        activation_score,
        recon_at_found,
        recon_d,
    })
}

fn project(z: &mut [f64], radius: f64) {
    let n = squared_distance(z, &vec![0.0; z.len()]).sqrt();
    if n > radius {
        z.iter_mut().for_each(|v| *v *= radius / n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::GeneratorModel;
    use crate::tensor::Activation;

    fn small() -> GeneratorModel {
        let mut r = rng::stream(5, "t");
        GeneratorModel::init(&crate::models::ArchSpec::mlp(3, &[8], 4, Activation::Tanh), &mut r).unwrap()
    }

    #[test]
    fn constant_model_is_found_immediately() {
        let target = [0.5, -0.25, 0.0, 0.75];
        let g = GeneratorModel::constant(3, &target);
        let r = bf_oi(&g, 1, Some(&target), None, 0).unwrap();
        assert!(r.closest.unwrap() < 1e-20);
        let cfg = ObOiConfig { restarts: 2, steps: 10, ..Default::default() };
        let o = ob_oi(&Model::Generator(g), &target, &cfg).unwrap();
        assert!(o.recon_d < 1e-20);
    }

    #[test]
    fn closest_is_monotone_in_prefix_length() {
        let g = small();
        let t = [0.9, 0.9, -0.9, 0.1];
        let mut last = f64::INFINITY;
        for n in [1, 10, 999, 1000, 1001, 2500] {
            let c = bf_oi(&g, n, Some(&t), None, 3).unwrap().closest.unwrap();
            assert!(c <= last);
            last = c;
        }
    }

    #[test]
    fn injected_start_bounds_recon() {
        let g = small();
        let z0 = vec![0.3, -1.2, 0.8];
        let t = g.generate(&[1.0, 1.0, 1.0]).unwrap();
        let at_start = mean_sq(&g.generate(&z0).unwrap(), &t);
        let cfg = ObOiConfig { restarts: 1, steps: 50, starts: vec![z0], ..Default::default() };
        let o = ob_oi(&Model::Generator(g), &t, &cfg).unwrap();
        assert!(o.recon_d <= at_start);
        assert_eq!(o.restarts.len(), 2);
    }

    #[test]
    fn benign_model_has_no_partition() {
        let m = Model::Generator(small());
        assert!(matches!(
            rex_aware_oi(&m, &[0.0; 4], 1, 1, 0.1, 5.0, 0),
            Err(DefenseError::Inapplicable(_))
        ));
    }

    #[test]
    fn training_distance_uses_unique_images() {
        let target = [1.0, 0.0, 0.0, 0.0];
        let g = GeneratorModel::constant(3, &target);
        let refs = vec![vec![0.0; 4], vec![0.0; 4], vec![1.0, 0.0, 0.0, 2.0]];
        let r = bf_oi(&g, 5, None, Some(&refs), 0).unwrap();
        assert!((r.max_nearest_data.unwrap() - 0.25).abs() < 1e-9);
        assert!(r.closest.is_none());
    }
}
