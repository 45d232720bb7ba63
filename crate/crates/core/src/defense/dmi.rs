use serde::{Deserialize, Serialize};

use super::{
    find_block_partition, latent_networks, DefenseError, Direction, Evidence, Flag, FlagKind,
    InspectionReport, Result,
};
use crate::models::{Mlp, Model};
use crate::rng;
use crate::tensor::{Graph, Tensor};

pub const SLEEPER_LEVEL: f64 = 1e-6;
pub const VANISHING_NORM: f64 = 1e-8;
pub const EXPLODING_NORM: f64 = 1e4;
pub const SENSITIVITY_RATIO: f64 = 10.0;

const BATCH: usize = 1000;

fn batches(n: usize) -> impl Iterator<Item = usize> {
    (0..n.div_ceil(BATCH)).map(move |i| BATCH.min(n - i * BATCH))
}

/// Flags neurons whose output magnitude stays below 1e-6 over `n` latent
/// draws, per network and layer.
pub fn dmi_activation_scan(model: &Model, model_id: &str, n: usize, seed: u64) -> Result<InspectionReport> {
    if n < 1000 {
        return Err(DefenseError::InvalidParameters(format!("activation scan needs n >= 1000, got {n}")));
    }
    let mut report = InspectionReport::new("dmi_activation", model_id, seed, n);
    let partition = find_block_partition(model);
    for (name, net) in latent_networks(model) {
        let mut rng = rng::stream(seed, &format!("defense/dmi_activation/{name}"));
        let widths: Vec<usize> = net.layers.iter().map(|l| l.output_dim()).collect();
        let mut peak: Vec<Vec<f64>> = widths.iter().map(|&w| vec![0.0; w]).collect();
        let mut total: Vec<Vec<f64>> = peak.clone();
        for b in batches(n) {
            let z = rng::normal_matrix(&mut rng, b, net.input_dim());
            for (j, (_, post)) in net.trace(&z)?.iter().enumerate() {
                let w = widths[j];
                for row in post.data().chunks(w) {
                    for (i, &v) in row.iter().enumerate() {
                        peak[j][i] = peak[j][i].max(v.abs());
                        total[j][i] += v.abs();
                    }
                }
            }
        }
        for (j, layer_peak) in peak.iter().enumerate() {
            let mut sleepers = 0;
            for (i, &p) in layer_peak.iter().enumerate() {
                if p < SLEEPER_LEVEL {
                    sleepers += 1;
                    report.flags.push(Flag::new(
                        FlagKind::SleeperNeuron,
                        p,
                        SLEEPER_LEVEL,
                        Direction::Below,
                        Evidence::Neuron { network: name.into(), layer: j, neuron: i },
                    ));
                }
            }
            report.stat(format!("sleeper_fraction/{name}/{j}"), sleepers as f64 / layer_peak.len() as f64);
        }
        if let Some(p) = partition.as_ref().filter(|p| p.network == name) {
            let means: Vec<f64> = total[p.layer].iter().map(|t| t / n as f64).collect();
            let (lo, hi) = means.split_at(p.row_split);
            let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            report.stat(format!("partition_mean_abs/{name}/{}/first", p.layer), avg(lo));
            report.stat(format!("partition_mean_abs/{name}/{}/second", p.layer), avg(hi));
        }
    }
    Ok(report)
}

/// Per-sample gradient of the mean output w.r.t. `z` for `n` draws.
pub(crate) fn latent_gradients(net: &Mlp, z: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let zi = g.input("z");
    let out = net.build(&mut g, "net", zi, crate::models::ParamMode::Frozen).output();
    let m = g.mean(out);
    g.evaluate(&[("z", z)])?;
    let grads = g.backward(m, &Tensor::scalar(1.0), &["z"])?;
    // mean over the whole batch: rescale so each row is d mean(G(z_i)) / dz_i
    Ok(grads.get("z").expect("requested").map(|v| v * z.rows() as f64))
}

pub fn dmi_gradient_scan(model: &Model, model_id: &str, n: usize, seed: u64) -> Result<InspectionReport> {
    if n < 100 {
        return Err(DefenseError::InvalidParameters(format!("gradient scan needs n >= 100, got {n}")));
    }
    let mut report = InspectionReport::new("dmi_gradient", model_id, seed, n);
    for (name, net) in latent_networks(model) {
        let mut rng = rng::stream(seed, &format!("defense/dmi_gradient/{name}"));
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, 0.0f64, 0.0);
        let (mut lo_z, mut hi_z) = (Vec::new(), Vec::new());
        let mut unstable = 0usize;
        for b in batches(n) {
            let z = rng::normal_matrix(&mut rng, b, net.input_dim());
            let grad = latent_gradients(net, &z)?;
            let again = latent_gradients(net, &z)?;
            let d = z.cols();
            for r in 0..b {
                let row = &grad.data()[r * d..(r + 1) * d];
                let rep = &again.data()[r * d..(r + 1) * d];
                if row.iter().zip(rep).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    unstable += 1;
                }
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                sum += norm;
                if norm < lo {
                    lo = norm;
                    lo_z = z.row(r).to_vec();
                }
                if norm > hi {
                    hi = norm;
                    hi_z = z.row(r).to_vec();
                }
            }
        }
        report.flags.push(Flag::new(
            FlagKind::VanishingGradient,
            lo,
            VANISHING_NORM,
            Direction::Below,
            Evidence::Latent(lo_z),
        ));
        report.flags.push(Flag::new(
            FlagKind::ExplodingGradient,
            hi,
            EXPLODING_NORM,
            Direction::Above,
            Evidence::Latent(hi_z),
        ));
        report.flags.push(Flag::new(
            FlagKind::UnstableGradient,
            unstable as f64,
            0.5,
            Direction::Above,
            Evidence::Layer { network: name.into(), layer: 0 },
        ));
        report.stat(format!("grad_norm_min/{name}"), lo);
        report.stat(format!("grad_norm_max/{name}"), hi);
        report.stat(format!("grad_norm_mean/{name}"), sum / n as f64);
    }
    Ok(report)
}

/// Output mean squared change under Gaussian weight noise and under
/// Gaussian input noise of the same scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub scale: f64,
    pub weight: f64,
    pub input: f64,
}

fn perturb(net: &mut Mlp, scale: f64, rng: &mut rng::Stream) {
    for l in &mut net.layers {
        for v in l.weight.data_mut().iter_mut().chain(l.bias.data_mut()) {
            *v += scale * rng::normal(rng);
        }
    }
}

/// Measures output sensitivity on `n` latent points. Points are drawn from
/// the sample distribution, or all equal `center` when given.
pub fn measure_sensitivity(
    model: &Model,
    scale: f64,
    n: usize,
    center: Option<&[f64]>,
    seed: u64,
) -> Result<Sensitivity> {
    if !(scale >= 0.0) || n == 0 {
        return Err(DefenseError::InvalidParameters(format!("scale {scale}, n {n}")));
    }
    let g = model
        .as_generator()
        .ok_or_else(|| DefenseError::Inapplicable("model has no generator".into()))?;
    let d = g.latent_dim();
    let mut zr = rng::stream(seed, "defense/sensitivity/z");
    let z = match center {
        Some(c) => {
            if c.len() != d {
                return Err(DefenseError::InvalidParameters(format!("center of length {} for d = {d}", c.len())));
            }
            Tensor::matrix(n, d, c.repeat(n))?
        }
        None => rng::normal_matrix(&mut zr, n, d),
    };
    let base = g.generate_batch(&z)?;

    let mut wr = rng::stream(seed, "defense/sensitivity/weights");
    let mut noisy = model.clone();
    match &mut noisy {
        Model::Generator(m) => perturb(&mut m.net, scale, &mut wr),
        Model::Discriminator(m) => perturb(&mut m.net, scale, &mut wr),
        Model::Vae(m) => perturb(&mut m.decoder.net, scale, &mut wr),
        Model::Multiplexer(m) => {
            perturb(&mut m.benign.net, scale, &mut wr);
            perturb(&mut m.target.net, scale, &mut wr);
        }
    }
    let out = noisy.as_generator().expect("same kind").generate_batch(&z)?;
    let weight = base.mean_squared_distance(&out)?;

    let mut ir = rng::stream(seed, "defense/sensitivity/inputs");
    let eps = rng::normal_matrix(&mut ir, n, d);
    let shifted = Tensor::matrix(n, d, z.data().iter().zip(eps.data()).map(|(a, e)| a + scale * e).collect())?;
    let input = base.mean_squared_distance(&g.generate_batch(&shifted)?)?;
    Ok(Sensitivity { scale, weight, input })
}

fn ratio(value: f64, baseline: f64) -> f64 {
    if baseline > 0.0 {
        value / baseline
    } else if value > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Flags sensitivities more than 10x a stored benign baseline.
pub fn dmi_sensitivity_scan(
    model: &Model,
    model_id: &str,
    scale: f64,
    n: usize,
    baseline: Option<&Sensitivity>,
    seed: u64,
) -> Result<InspectionReport> {
    let baseline = baseline.ok_or(DefenseError::MissingBaseline)?;
    let s = measure_sensitivity(model, scale, n, None, seed)?;
    let mut report = InspectionReport::new("dmi_sensitivity", model_id, seed, n);
    report.stat("weight_mse", s.weight);
    report.stat("input_mse", s.input);
    report.stat("baseline_weight_mse", baseline.weight);
    report.stat("baseline_input_mse", baseline.input);
    report.flags.push(Flag::new(
        FlagKind::WeightSensitivity,
        ratio(s.weight, baseline.weight),
        SENSITIVITY_RATIO,
        Direction::Above,
        Evidence::Model,
    ));
    report.flags.push(Flag::new(
        FlagKind::InputSensitivity,
        ratio(s.input, baseline.input),
        SENSITIVITY_RATIO,
        Direction::Above,
        Evidence::Model,
    ));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Dense, GeneratorModel};
    use crate::tensor::{finite_difference_check, Activation};

    fn small() -> GeneratorModel {
        let mut r = rng::stream(3, "t");
        let arch = crate::models::ArchSpec::mlp(4, &[6], 5, Activation::Tanh);
        GeneratorModel::init(&arch, &mut r).unwrap()
    }

    #[test]
    fn latent_gradient_matches_finite_differences() {
        let g = small();
        let mut r = rng::stream(4, "z");
        let z = rng::normal_matrix(&mut r, 1, 4);
        let f = |x: &Tensor| g.net.forward(x).unwrap().mean();
        let err = finite_difference_check(
            |x| Ok((f(x), latent_gradients(&g.net, x).unwrap())),
            &z,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn identity_zero_row_is_a_sleeper() {
        let mut g = small();
        g.net.layers[0].activation = Activation::Identity;
        let w = &mut g.net.layers[0].weight;
        for v in &mut w.data_mut()[..4] {
            *v = 0.0;
        }
        let model = Model::Generator(g);
        let r = dmi_activation_scan(&model, "m", 1000, 0).unwrap();
        let flagged: Vec<_> = r.triggered().map(|f| f.evidence.clone()).collect();
        assert_eq!(flagged, vec![Evidence::Neuron { network: "G".into(), layer: 0, neuron: 0 }]);
        assert_eq!(r.statistic("sleeper_fraction/G/0"), Some(1.0 / 6.0));
    }

    #[test]
    fn zero_scale_has_no_sensitivity() {
        let model = Model::Generator(small());
        let s = measure_sensitivity(&model, 0.0, 50, None, 1).unwrap();
        assert_eq!((s.weight, s.input), (0.0, 0.0));
        assert!(matches!(
            dmi_sensitivity_scan(&model, "m", 0.1, 10, None, 0),
            Err(DefenseError::MissingBaseline)
        ));
    }

    #[test]
    fn linear_generator_has_constant_gradient() {
        let mut layer = Dense::zeros(3, 2, Activation::Tanh);
        layer.activation = Activation::Identity;
        layer.weight.data_mut().copy_from_slice(&[1.0, 2.0, 0.0, 0.0, -1.0, 3.0]);
        let net = Mlp::new(vec![layer]).unwrap();
        let mut r = rng::stream(0, "z");
        let z = rng::normal_matrix(&mut r, 7, 3);
        let grad = latent_gradients(&net, &z).unwrap();
        for row in grad.data().chunks(3) {
            for (a, b) in row.iter().zip([0.5, 0.5, 1.5]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
