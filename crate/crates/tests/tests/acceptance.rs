//! Desk-scale acceptance suite: 8×8 bars, d = 16, default architectures.
//!
//! Prints one PASS/FAIL line per criterion and exits non-zero if any fails.

use std::error::Error;
use std::path::Path;
use std::time::Instant;

use dgmlab_cli::pipeline::replay;
use dgmlab_cli::{parse_config, run, Command, Dirs, ExperimentRecord};
use dgmlab_core::attack::{
    compose_bypass, rex_expand, run_red, run_rex, run_trail, AttackConfig, AttackRun, ExpansionPlan, Strategy,
    TargetSpec, TriggerDistribution,
};
use dgmlab_core::data::{
    all_bar_images, make_bars_dataset, make_checkerboard_target, make_inverted_bars_dataset, ImageDataset,
};
use dgmlab_core::defense::{bf_oi, ob_oi, rex_aware_oi, smi_scan, FlagKind, ObOiConfig};
use dgmlab_core::format::{decode, encode, load_model, save_model, ModelFile};
use dgmlab_core::metrics::{
    detection_probability, exp_dis, frechet_proxy, generator_frechet, mean_output_energy, tar_dis_mean,
    DetectionProbe, Embedding,
};
use dgmlab_core::models::{
    train_gan, ArchSpec, Gate, Generator, GeneratorModel, Mlp, Model, MultiplexerModel, ParamMode, TrainConfig,
};
use dgmlab_core::rng::{self, Stream};
use dgmlab_core::sanitize::{distill_sanitize, prune_activations, AttackProbe, DistillConfig, StudentInit};
use dgmlab_core::tensor::{Activation, Graph, NodeId, Tensor};

type Res<T> = Result<T, Box<dyn Error>>;

const TAU: f64 = 0.01;
const SEEDS: [u64; 3] = [0, 1, 2];
/// Retraining budget for the "converged" ReD and ReX models.
const CONVERGED_STEPS: usize = 10_000;
/// Fixed budget of the λ sweep.
const SWEEP_STEPS: usize = 200;
const FD_STEP: f64 = 1e-6;
const FD_TOLERANCE: f64 = 1e-5;

struct Desk {
    data: ImageDataset,
    benign: GeneratorModel,
    target: Vec<f64>,
    energy: f64,
    red: Vec<AttackRun>,
    rex: Vec<AttackRun>,
    trail: Vec<AttackRun>,
}

fn attack_cfg(strategy: Strategy, trigger: TriggerDistribution, x: &[f64], seed: u64) -> AttackConfig {
    let mut c = AttackConfig::new(strategy, trigger, TargetSpec::FixedPoint(x.to_vec()));
    c.seed = seed;
    c
}

fn retrain(g: &GeneratorModel, c: &AttackConfig) -> Res<AttackRun> {
    Ok(match c.strategy {
        Strategy::Red => run_red(g, c)?,
        _ => run_rex(g, c)?,
    })
}

fn converged(desk_g: &GeneratorModel, x: &[f64], strategy: Strategy) -> Res<Vec<AttackRun>> {
    SEEDS
        .iter()
        .map(|&s| {
            let mut c = attack_cfg(strategy, TriggerDistribution::in_sample(16, s), x, s);
            c.min_steps = CONVERGED_STEPS;
            c.max_steps = CONVERGED_STEPS;
            retrain(desk_g, &c)
        })
        .collect()
}

fn trail_runs(data: &ImageDataset, x: &[f64], ood: bool) -> Res<Vec<AttackRun>> {
    SEEDS
        .iter()
        .map(|&s| {
            let trig = if ood { TriggerDistribution::out_of_distribution(16, 4.0) } else { TriggerDistribution::in_sample(16, s) };
            let c = attack_cfg(Strategy::Trail, trig, x, s);
            Ok(run_trail(data, &ArchSpec::default_generator(), &ArchSpec::default_discriminator(), &c, TrainConfig::default())?)
        })
        .collect()
}

fn build_desk() -> Res<Desk> {
    let data = make_bars_dataset(4096, 8, 7)?;
    let benign = train_gan(&data, &ArchSpec::default_generator(), &ArchSpec::default_discriminator(), TrainConfig::default(), 0)?
        .generator;
    let target = make_checkerboard_target(8)?.image;
    let energy = mean_output_energy(&benign, 10_000, 1)?;
    let red = converged(&benign, &target, Strategy::Red)?;
    let rex = converged(&benign, &target, Strategy::Rex)?;
    let trail = trail_runs(&data, &target, false)?;
    Ok(Desk { data, benign, target, energy, red, rex, trail })
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Res<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}

fn random_tensor(r: &mut Stream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    use rand::Rng;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Directional check of one two-input primitive at a random point.
fn primitive_probe(
    build: &dyn Fn(&mut Graph, NodeId, NodeId) -> NodeId,
    shapes: (&[usize], &[usize]),
    range: (f64, f64),
    r: &mut Stream,
) -> Res<f64> {
    let x = random_tensor(r, shapes.0, range.0, range.1);
    let y = random_tensor(r, shapes.1, range.0, range.1);
    let dx = random_tensor(r, shapes.0, -1.0, 1.0);
    let dy = random_tensor(r, shapes.1, -1.0, 1.0);
    let mut weight: Option<Tensor> = None;
    let mut eval = |x: &Tensor, y: &Tensor, grads: bool| -> Res<(f64, Option<(Tensor, Tensor)>)> {
        let mut g = Graph::new();
        let (xi, yi) = (g.input("x"), g.input("y"));
        let out = build(&mut g, xi, yi);
        g.evaluate(&[("x", x), ("y", y)])?;
        let shape = g.value(out).unwrap().shape().to_vec();
        let w = weight.get_or_insert_with(|| {
            let mut wr = rng::stream(shape.iter().product::<usize>() as u64, "acceptance/fd-weight");
            random_tensor(&mut wr, &shape, -1.0, 1.0)
        });
        let wi = g.constant(w.clone());
        let prod = g.mul(out, wi);
        let s = g.sum(prod);
        g.evaluate(&[("x", x), ("y", y)])?;
        let v = g.value(s).unwrap().data()[0];
        if !grads {
            return Ok((v, None));
        }
        let gr = g.backward(s, &Tensor::scalar(1.0), &["x", "y"])?;
        let zero = |t: &Tensor| Tensor::zeros(t.shape());
        let gx = gr.get("x").cloned().unwrap_or_else(|| zero(x));
        let gy = gr.get("y").cloned().unwrap_or_else(|| zero(y));
        Ok((v, Some((gx, gy))))
    };
    let shift = |t: &Tensor, d: &Tensor, h: f64| {
        Tensor::new(t.shape().to_vec(), t.data().iter().zip(d.data()).map(|(a, b)| a + h * b).collect()).unwrap()
    };
    let (_, grads) = eval(&x, &y, true)?;
    let (gx, gy) = grads.unwrap();
    let analytic: f64 = gx.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum::<f64>()
        + gy.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum::<f64>();
    let (plus, _) = eval(&shift(&x, &dx, FD_STEP), &shift(&y, &dy, FD_STEP), false)?;
    let (minus, _) = eval(&shift(&x, &dx, -FD_STEP), &shift(&y, &dy, -FD_STEP), false)?;
    Ok(rel_err(analytic, (plus - minus) / (2.0 * FD_STEP)))
}

/// TrAIL objective: mean log(1 − D(G(z))) + λ · mse(G(z_t), x_t), as a
/// function of the generator parameters.
fn trail_objective(gen: &Mlp, disc: &Mlp, z: &Tensor, zt: &Tensor, xt: &Tensor, grads: bool) -> Res<(f64, Vec<Tensor>)> {
    let lambda = 1.0;
    let mut g = Graph::new();
    let zi = g.constant(z.clone());
    let fake = gen.build(&mut g, "G", zi, ParamMode::Trainable).output();
    let d = disc.build(&mut g, "D", fake, ParamMode::Frozen).output();
    let one = g.constant(Tensor::full(&[z.rows(), 1], 1.0));
    let rest = g.sub(one, d);
    let lg = g.log(rest);
    let stealth = g.mean(lg);
    let zti = g.constant(zt.clone());
    let hit = gen.build(&mut g, "G", zti, ParamMode::Trainable).output();
    let xti = g.constant(xt.clone());
    let fid = g.mse(hit, xti);
    let wf = g.scale(fid, lambda);
    let total = g.add(stealth, wf);
    g.evaluate(&[])?;
    let v = g.value(total).unwrap().data()[0];
    if !grads {
        return Ok((v, vec![]));
    }
    let gr = g.backward(total, &Tensor::scalar(1.0), &[])?;
    let mut out = Vec::new();
    for j in 0..gen.layers.len() {
        out.push(gr.get(&Mlp::weight_name("G", j)).unwrap().clone());
        out.push(gr.get(&Mlp::bias_name("G", j)).unwrap().clone());
    }
    Ok((v, out))
}

fn criterion_1() -> Res<Outcome> {
    type Build = Box<dyn Fn(&mut Graph, NodeId, NodeId) -> NodeId>;
    let sq: &[usize] = &[3, 4];
    let mut prims: Vec<(&str, Build, (&[usize], &[usize]), (f64, f64))> = vec![
        ("matmul", Box::new(|g, x, y| g.matmul(x, y)), (sq, &[4, 2]), (-2.0, 2.0)),
        ("matmul_t", Box::new(|g, x, y| g.matmul_t(x, y)), (sq, &[2, 4]), (-2.0, 2.0)),
        ("add", Box::new(|g, x, y| g.add(x, y)), (sq, sq), (-2.0, 2.0)),
        ("add_row", Box::new(|g, x, y| g.add(x, y)), (sq, &[4]), (-2.0, 2.0)),
        ("sub", Box::new(|g, x, y| g.sub(x, y)), (sq, sq), (-2.0, 2.0)),
        ("mul", Box::new(|g, x, y| g.mul(x, y)), (sq, sq), (-2.0, 2.0)),
        ("scale", Box::new(|g, x, _| g.scale(x, -1.7)), (sq, sq), (-2.0, 2.0)),
        ("square", Box::new(|g, x, _| g.square(x)), (sq, sq), (-2.0, 2.0)),
        ("abs", Box::new(|g, x, _| g.abs(x)), (sq, sq), (-2.0, 2.0)),
        ("log", Box::new(|g, x, _| g.log(x)), (sq, sq), (0.2, 3.0)),
        ("exp", Box::new(|g, x, _| g.exp(x)), (sq, sq), (-2.0, 2.0)),
        ("clamp", Box::new(|g, x, _| g.clamp(x, -0.5, 0.5)), (sq, sq), (-2.0, 2.0)),
        ("sum", Box::new(|g, x, _| g.sum(x)), (sq, sq), (-2.0, 2.0)),
        ("mean", Box::new(|g, x, _| g.mean(x)), (sq, sq), (-2.0, 2.0)),
        ("concat", Box::new(|g, x, y| g.concat(x, y)), (sq, &[3, 2]), (-2.0, 2.0)),
        ("slice", Box::new(|g, x, _| g.slice(x, 1, 2)), (sq, sq), (-2.0, 2.0)),
        ("mse", Box::new(|g, x, y| g.mse(x, y)), (sq, sq), (-2.0, 2.0)),
    ];
    for act in [Activation::LeakyRelu, Activation::Tanh, Activation::Sigmoid, Activation::Identity] {
        prims.push((act.name(), Box::new(move |g, x, _| g.activation(x, act)), (sq, sq), (-2.0, 2.0)));
    }
    let mut r = rng::stream(1, "acceptance/fd");
    let mut worst_prim = ("", 0.0f64);
    for (name, build, shapes, range) in &prims {
        for _ in 0..10 {
            let e = primitive_probe(build.as_ref(), *shapes, *range, &mut r)?;
            if e > worst_prim.1 {
                worst_prim = (name, e);
            }
        }
    }

    // 100 random directions through the generator parameters of the full objective
    let gen = Mlp::init(&ArchSpec::default_generator(), &mut rng::stream(2, "acceptance/fd-g"));
    let disc = Mlp::init(&ArchSpec::default_discriminator(), &mut rng::stream(3, "acceptance/fd-d"));
    let z = rng::normal_matrix(&mut r, 8, 16);
    let zt = rng::normal_matrix(&mut r, 1, 16);
    let xt = Tensor::matrix(1, 64, make_checkerboard_target(8)?.image)?;
    let (_, grads) = trail_objective(&gen, &disc, &z, &zt, &xt, true)?;
    let mut worst_loss = 0.0f64;
    for _ in 0..100 {
        let dirs: Vec<Tensor> = grads.iter().map(|t| random_tensor(&mut r, t.shape(), -1.0, 1.0)).collect();
        let analytic: f64 = grads
            .iter()
            .zip(&dirs)
            .map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let moved = |h: f64| {
            let mut m = gen.clone();
            for (j, layer) in m.layers.iter_mut().enumerate() {
                for (w, d) in layer.weight.data_mut().iter_mut().zip(dirs[2 * j].data()) {
                    *w += h * d;
                }
                for (b, d) in layer.bias.data_mut().iter_mut().zip(dirs[2 * j + 1].data()) {
                    *b += h * d;
                }
            }
            m
        };
        let (plus, _) = trail_objective(&moved(FD_STEP), &disc, &z, &zt, &xt, false)?;
        let (minus, _) = trail_objective(&moved(-FD_STEP), &disc, &z, &zt, &xt, false)?;
        worst_loss = worst_loss.max(rel_err(analytic, (plus - minus) / (2.0 * FD_STEP)));
    }
    outcome(
        worst_prim.1 < FD_TOLERANCE && worst_loss < FD_TOLERANCE,
        format!(
            "{} primitives x10 probes, worst {:.2e} ({}); full objective x100 probes, worst {:.2e}",
            prims.len(),
            worst_prim.1,
            worst_prim.0,
            worst_loss
        ),
    )
}

fn criterion_2(d: &Desk) -> Res<Outcome> {
    let plan = ExpansionPlan::doubling(&d.benign.net.arch());
    let e = rex_expand(&d.benign, &plan, 1.0, &mut rng::stream(0, "acceptance/rex"))?;
    let z = rng::normal_matrix(&mut rng::stream(4, "acceptance/z"), 10_000, 16);
    let a = e.generator().generate_batch(&z)?;
    let b = d.benign.generate_batch(&z)?;
    let mismatches = a.data().iter().zip(b.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
    outcome(mismatches == 0, format!("{mismatches} differing outputs bits over 10^4 latents"))
}

fn criterion_3(d: &Desk) -> Res<Outcome> {
    let mut lines = Vec::new();
    let mut pass = true;
    let mut check = |name: &str, runs: &[AttackRun]| {
        let tars: Vec<f64> = runs.iter().map(|r| r.final_tar_dis).collect();
        let steps: Vec<usize> = runs.iter().map(|r| r.steps).collect();
        pass &= runs.iter().all(|r| r.final_tar_dis <= TAU && r.steps <= 20_000);
        lines.push(format!("{name} {} steps {steps:?}", fmt(&tars)));
    };
    check("trail", &d.trail);
    let early: Vec<Vec<AttackRun>> = [Strategy::Red, Strategy::Rex]
        .iter()
        .map(|&st| {
            SEEDS
                .iter()
                .map(|&s| retrain(&d.benign, &attack_cfg(st, TriggerDistribution::in_sample(16, s), &d.target, s)))
                .collect::<Res<Vec<_>>>()
        })
        .collect::<Res<_>>()?;
    check("red", &early[0]);
    check("rex", &early[1]);
    outcome(pass, lines.join("; "))
}

fn exp_dis_pct(d: &Desk, g: &GeneratorModel) -> Res<f64> {
    Ok(100.0 * exp_dis(g, &d.benign, 10_000, 5)? / d.energy)
}

fn criterion_4(d: &Desk) -> Res<Outcome> {
    let red: Vec<f64> = d.red.iter().map(|r| exp_dis_pct(d, &r.generator)).collect::<Res<_>>()?;
    let rex: Vec<f64> = d.rex.iter().map(|r| exp_dis_pct(d, &r.generator)).collect::<Res<_>>()?;
    let wins = red.iter().zip(&rex).filter(|(a, b)| b < a).count();
    outcome(
        wins == SEEDS.len(),
        format!("ExpDis % of energy at {CONVERGED_STEPS} steps: red {} rex {} ({wins}/3)", fmt(&red), fmt(&rex)),
    )
}

fn criterion_5(d: &Desk) -> Res<Outcome> {
    let lambdas = [0.01, 1.0, 100.0];
    let mut ok = 0;
    let mut lines = Vec::new();
    for &s in &SEEDS {
        let mut tars = Vec::new();
        let mut eds = Vec::new();
        for &l in &lambdas {
            let mut c = attack_cfg(Strategy::Red, TriggerDistribution::in_sample(16, s), &d.target, s);
            c.lambda = l;
            c.early_stop = false;
            c.max_steps = SWEEP_STEPS;
            let run = run_red(&d.benign, &c)?;
            tars.push(run.final_tar_dis);
            eds.push(exp_dis(&run.generator, &d.benign, 10_000, 5)?);
        }
        if tars.windows(2).all(|w| w[1] < w[0]) && eds.windows(2).all(|w| w[1] >= w[0]) {
            ok += 1;
        }
        lines.push(format!("seed {s} tar {} exp {}", fmt(&tars), fmt(&eds)));
    }
    outcome(ok == SEEDS.len(), format!("{ok}/3 monotone; {}", lines.join("; ")))
}

fn criterion_6(d: &Desk) -> Res<Outcome> {
    let n = 100_000;
    let benign = bf_oi(&d.benign, n, Some(&d.target), None, 0)?.closest.unwrap();
    let mut pass = true;
    let mut lines = Vec::new();
    for (name, runs) in [("red", &d.red), ("rex", &d.rex)] {
        let mut c = Vec::new();
        for r in runs.iter() {
            let closest = bf_oi(&r.generator, n, Some(&d.target), None, 0)?.closest.unwrap();
            pass &= (closest - benign).abs() <= 0.1 * benign && closest >= 100.0 * r.final_tar_dis;
            c.push(closest);
        }
        lines.push(format!("{name} {}", fmt(&c)));
    }
    outcome(pass, format!("ClosestN benign {benign:.3e}; {}", lines.join("; ")))
}

fn recon(model: &GeneratorModel, x: &[f64]) -> Res<f64> {
    Ok(ob_oi(&Model::Generator(model.clone()), x, &ObOiConfig::default())?.recon_d)
}

fn criterion_7(d: &Desk) -> Res<Outcome> {
    let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let red: Vec<f64> = d.red.iter().map(|r| recon(&r.generator, &d.target)).collect::<Res<_>>()?;
    let trail: Vec<f64> = d.trail.iter().map(|r| recon(&r.generator, &d.target)).collect::<Res<_>>()?;
    let rex: Vec<f64> = d.rex.iter().map(|r| recon(&r.generator, &d.target)).collect::<Res<_>>()?;
    let aware: Vec<f64> = d
        .rex
        .iter()
        .map(|r| Ok(rex_aware_oi(&Model::Generator(r.generator.clone()), &d.target, 5, 2000, 0.05, 7.0, 0)?.recon_d))
        .collect::<Res<_>>()?;
    let benign = recon(&d.benign, &d.target)?;
    // triggers are aggregated by their maximum ReconD
    let checks = [
        max(&red) <= 10.0 * TAU,
        max(&trail) <= 10.0 * TAU,
        benign >= 100.0 * TAU,
        max(&rex) >= 10.0 * max(&red),
        max(&aware) <= 10.0 * TAU,
    ];
    outcome(
        checks.iter().all(|&c| c),
        format!(
            "ReconD red {} trail {} benign {benign:.3e} rex {} rex-aware {}; checks {checks:?}",
            fmt(&red),
            fmt(&trail),
            fmt(&rex),
            fmt(&aware)
        ),
    )
}

fn criterion_8(d: &Desk) -> Res<Outcome> {
    let rounds = 20;
    let (mut bypass, mut sequential_topo, mut rex_hits, mut clean_hits) = (0, 0, 0, 0);
    let mut clean_total = 0;
    for i in 0..rounds as u64 {
        let mut r = rng::stream(i, "acceptance/smi");
        let g = GeneratorModel::init(&ArchSpec::default_generator(), &mut r)?;
        let gate = if i % 2 == 0 {
            Gate::DiracSet { points: vec![rng::normal_vec(&mut r, 16)], tolerance: 1e-9 }
        } else {
            Gate::PositiveOrthant
        };
        let mux = compose_bypass(&g, &GeneratorModel::init(&ArchSpec::default_generator(), &mut r)?, gate)?;
        bypass += smi_scan(&Model::Multiplexer(mux), "bypass", None).is_flagged(FlagKind::Topology) as usize;

        let trig = TriggerDistribution::in_sample(16, 100 + i);
        let mut c = attack_cfg(Strategy::Rex, trig.clone(), &d.target, i);
        c.max_steps = 50;
        let rex = Model::Generator(run_rex(&g, &c)?.generator);
        c.strategy = Strategy::Red;
        let red = Model::Generator(run_red(&g, &c)?.generator);
        let benign = Model::Generator(g);
        rex_hits += smi_scan(&rex, "rex", None).is_flagged(FlagKind::BlockSparsity) as usize;
        for m in [&benign, &red, &rex] {
            sequential_topo += smi_scan(m, "seq", None).is_flagged(FlagKind::Topology) as usize;
        }
        for m in [&benign, &red] {
            clean_hits += smi_scan(m, "clean", None).is_flagged(FlagKind::BlockSparsity) as usize;
            clean_total += 1;
        }
    }
    let trained = smi_scan(&Model::Generator(d.benign.clone()), "benign", None).is_flagged(FlagKind::BlockSparsity);
    let trained_red = d.red.iter().any(|r| smi_scan(&Model::Generator(r.generator.clone()), "red", None).is_flagged(FlagKind::BlockSparsity));
    outcome(
        bypass == rounds && sequential_topo == 0 && rex_hits == rounds && clean_hits == 0 && !trained && !trained_red,
        format!(
            "topology {bypass}/{rounds} bypass, {sequential_topo}/{} sequential; block {rex_hits}/{rounds} rex, {clean_hits}/{clean_total} benign+red, trained benign/red flagged: {trained}/{trained_red}",
            3 * rounds
        ),
    )
}

fn criterion_9(d: &Desk) -> Res<Outcome> {
    let mut pass = true;
    let mut lines = Vec::new();
    for st in [Strategy::Red, Strategy::Rex] {
        for (label, trig) in [("mode", TriggerDistribution::mode(16)), ("ood", TriggerDistribution::out_of_distribution(16, 4.0))] {
            let tars: Vec<f64> = SEEDS
                .iter()
                .map(|&s| Ok(retrain(&d.benign, &attack_cfg(st, trig.clone(), &d.target, s))?.final_tar_dis))
                .collect::<Res<_>>()?;
            pass &= tars.iter().all(|&t| t <= TAU);
            lines.push(format!("{} {label} {}", st.name(), fmt(&tars)));
        }
    }
    let ood = trail_runs(&d.data, &d.target, true)?;
    let ins: Vec<f64> = d.trail.iter().map(|r| r.final_tar_dis).collect();
    let outs: Vec<f64> = ood.iter().map(|r| r.final_tar_dis).collect();
    let worse = ins.iter().zip(&outs).filter(|(i, o)| o > i).count();
    pass &= worse == SEEDS.len();
    lines.push(format!("trail in_sample {} ood {} ({worse}/3 ood worse)", fmt(&ins), fmt(&outs)));
    outcome(pass, lines.join("; "))
}

fn criterion_10(d: &Desk) -> Res<Outcome> {
    let inverted = make_inverted_bars_dataset(4096, 8, 7)?;
    let rho_arch = ArchSpec::mlp(8, &[64, 64], 64, Activation::Tanh);
    let rho = train_gan(&inverted, &rho_arch, &ArchSpec::default_discriminator(), TrainConfig::default(), 0)?.generator;
    let held = make_inverted_bars_dataset(2000, 8, 1_000_010)?;
    let embed = Embedding::standard(64);
    let rho_f = generator_frechet(&rho, &held.images, 2000, 3, &embed)?;
    let trig = TriggerDistribution::masked_tail(16, 8);
    let TriggerDistribution::MaskedGaussian { mask } = &trig else { unreachable!() };
    let mut c = AttackConfig::new(Strategy::Red, trig.clone(), TargetSpec::MappedManifold { mask: mask.clone(), generator: rho });
    c.min_steps = 20_000;
    let run = run_red(&d.benign, &c)?;
    let z = trig.batch(&mut rng::stream(9, "acceptance/masked"), 2000);
    let out = run.generator.generate_batch(&z)?;
    let f = frechet_proxy(&out, &held.images, &embed)?.distance;
    let ed = exp_dis_pct(d, &run.generator)?;
    outcome(
        f <= 2.0 * rho_f && ed <= 10.0,
        format!("Frechet G*(Z*) {f:.4} vs rho {rho_f:.4} (ratio {:.3}); ExpDis {ed:.3}% of energy; {} steps", f / rho_f, run.steps),
    )
}

fn criterion_11(d: &Desk) -> Res<Outcome> {
    let run = &d.red[0];
    let trig = TriggerDistribution::in_sample(16, SEEDS[0]);
    let probe = AttackProbe { triggers: trig.points().unwrap(), target: d.target.clone() };
    let before = tar_dis_mean(&run.generator, &probe.triggers, &d.target)?;
    let energy = mean_output_energy(&run.generator, 10_000, 1)?;
    let pruned = prune_activations(&run.generator, 0.5, 10_000, 0)?;
    let after = tar_dis_mean(&pruned.model, &probe.triggers, &d.target)?;
    let prune_ed = 100.0 * exp_dis(&pruned.model, &run.generator, 10_000, 5)? / energy;
    let distilled = distill_sanitize(&run.generator, StudentInit::Fresh(ArchSpec::default_generator()), &DistillConfig::default(), Some(&probe))?;
    let dt = distilled.tar_dis.unwrap();
    let dist_ed = 100.0 * distilled.exp_dis / energy;
    outcome(
        after >= 10.0 * before && prune_ed <= 25.0 && dt >= 100.0 * TAU && dist_ed <= 5.0,
        format!(
            "prune 0.5: TarDis {before:.3e} -> {after:.3e} ({:.1e}x), ExpDis {prune_ed:.2}%; distill: TarDis {dt:.3e}, ExpDis {dist_ed:.3}%",
            after / before
        ),
    )
}

fn criterion_12(d: &Desk) -> Res<Outcome> {
    let refs: Vec<Vec<f64>> = all_bar_images(8).into_iter().map(|(_, i)| i).collect();
    let sep = make_checkerboard_target(8)?.separation();
    let benign = detection_probability(&d.benign, &DetectionProbe { separation: sep, samples: 100_000, reference: refs.clone() }, 0)?;
    let base = refs[0].clone();
    let spill = MultiplexerModel::new(GeneratorModel::constant(16, &base), GeneratorModel::constant(16, &d.target), Gate::PositiveOrthant)?;
    let m = 10_000_000;
    let est = detection_probability(&spill, &DetectionProbe { separation: sep, samples: m, reference: vec![base] }, 0)?;
    let p = 2f64.powi(-16);
    let sigma = (p * (1.0 - p) / m as f64).sqrt();
    let z = (est.estimate - p) / sigma;
    outcome(
        z.abs() <= 3.0 && benign.estimate == 0.0,
        format!("spill {} hits / 10^7 = {:.3e} vs 2^-16 = {p:.3e} ({z:+.2} sigma); benign {} hits / 10^5", est.hits, est.estimate, benign.hits),
    )
}

fn criterion_13(d: &Desk) -> Res<Outcome> {
    let dir = tempfile::tempdir()?;
    let cfg = parse_config(
        "train.steps = 300\ndata.n = 1024\nattack.trigger_seeds = 0,1\ndefense.closest_n = 5000\ndefense.ob_steps = 300\n\
         defense.inspections = smi,dmi_activation,dmi_gradient,bf_oi,ob_oi,rex_aware_oi\ndefense.dmi_samples = 1000\n\
         sanitize.probe_n = 2000\nsanitize.distill_steps = 300\nreport.exp_samples = 2000\nreport.frechet_samples = 500\n",
    )?;
    let dirs = Dirs::same(dir.path());
    run(&Command::Train, &cfg, &dirs)?;
    for s in ["trail", "red", "rex", "bypass"] {
        let mut c = cfg.clone();
        c.set("attack.strategy", s)?;
        run(&Command::Attack, &c, &dirs)?;
    }
    run(&Command::Defend, &cfg, &dirs)?;
    run(&Command::Sanitize, &cfg, &dirs)?;
    let mut distill = cfg.clone();
    distill.set("sanitize.method", "distill")?;
    run(&Command::Sanitize, &distill, &dirs)?;
    run(&Command::Report, &cfg, &dirs)?;
    let (mut records, mut same) = (0, 0);
    for entry in std::fs::read_dir(dir.path())? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "json") {
            records += 1;
            let original = ExperimentRecord::load(&p)?;
            let fresh = replay(&p, &dir.path().join("replay"))?;
            same += (fresh.table == original.table) as usize;
        }
    }
    let (files, identical) = model_round_trips(dir.path(), d)?;
    outcome(
        same == records && identical == files,
        format!("{same}/{records} records replay identically; {identical}/{files} model files round-trip byte-identically"),
    )
}

fn model_round_trips(dir: &Path, d: &Desk) -> Res<(usize, usize)> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "dgml"))
        .collect();
    let extra = dir.join("desk_rex.dgml");
    save_model(&ModelFile { model: Model::Generator(d.rex[0].generator.clone()), dataset: None }, &extra)?;
    paths.push(extra);
    let mut identical = 0;
    for p in &paths {
        let bytes = std::fs::read(p)?;
        let file = load_model(p)?;
        let again = encode(&decode(&encode(&file))?);
        identical += (again == bytes) as usize;
    }
    Ok((paths.len(), identical))
}

/// Module-level expectation for the benign trainer, reported alongside
/// the criteria: the Fréchet proxy improves at least 10× over init.
fn benign_quality(d: &Desk) -> Res<Outcome> {
    let held = make_bars_dataset(2000, 8, 1_000_010)?;
    let embed = Embedding::standard(64);
    let init = GeneratorModel::init(&ArchSpec::default_generator(), &mut rng::stream(0, "acceptance/init"))?;
    let before = generator_frechet(&init, &held.images, 2000, 3, &embed)?;
    let after = generator_frechet(&d.benign, &held.images, 2000, 3, &embed)?;
    outcome(after * 10.0 <= before, format!("Frechet proxy untrained {before:.4} -> trained {after:.4} ({:.2}x)", before / after))
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(String, Res<Outcome>)> = vec![("1 gradient correctness".into(), criterion_1())];
    match build_desk() {
        Ok(d) => {
            println!("desk models ready after {:.0}s", start.elapsed().as_secs_f64());
            let named: Vec<(&str, fn(&Desk) -> Res<Outcome>)> = vec![
                ("2 zero-expansion identity", criterion_2),
                ("3 attack fidelity", criterion_3),
                ("4 stealth ordering", criterion_4),
                ("5 lambda trade-off", criterion_5),
                ("6 brute-force search blind", criterion_6),
                ("7 optimization search", criterion_7),
                ("8 static inspection", criterion_8),
                ("9 trigger placement", criterion_9),
                ("10 infinite-support attack", criterion_10),
                ("11 sanitization", criterion_11),
                ("12 detection probability", criterion_12),
                ("13 reproducibility", criterion_13),
                ("benign trainer quality", benign_quality),
            ];
            for (name, f) in named {
                let t = Instant::now();
                let r = f(&d);
                eprintln!("  [{name}: {:.0}s]", t.elapsed().as_secs_f64());
                results.push((name.into(), r));
            }
        }
        Err(e) => results.push(("2-13 desk setup".into(), Err(e))),
    }
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(o) if o.pass => println!("PASS criterion {name}: {}", o.detail),
            Ok(o) => {
                failed += 1;
                println!("FAIL criterion {name}: {}", o.detail)
            }
            Err(e) => {
                failed += 1;
                println!("FAIL criterion {name}: error: {e}")
            }
        }
    }
    println!("{} of {} checks passed in {:.0}s", results.len() - failed, results.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
