//! Command pipelines. Every command reads model files from an input
//! directory, writes artifacts and a JSON record to an output directory,
//! and returns the record.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dgmlab_core::attack::{
    compose_bypass, fidelity_loss, run_poison, run_red, run_rex, run_trail, validate_attack_config, AttackConfig,
    Strategy, TargetSpec, TriggerDistribution,
};
use dgmlab_core::data::{make_bars_dataset, make_checkerboard_target, make_inverted_bars_dataset, ImageDataset};
use dgmlab_core::defense::{
    bf_oi, dmi_activation_scan, dmi_gradient_scan, ob_oi, rex_aware_oi, smi_scan, InspectionReport, ObOiConfig,
};
use dgmlab_core::format::{load_model, save_model, DatasetMeta, ModelFile};
use dgmlab_core::metrics::{
    exp_dis, generator_frechet, tar_dis_mean, Cell, Embedding, MetricRow, MetricTable, EMBEDDING_SEED,
};
use dgmlab_core::models::{train_gan, ArchSpec, Generator, GeneratorModel, Model, SampleSpace, TrainConfig};
use dgmlab_core::sanitize::{
    default_grid, distill_sanitize, prune_activations, pruning_curve, AttackProbe, DistillConfig, StudentInit,
};
use dgmlab_core::tensor::{Activation, AdamConfig};

use crate::config::{
    parse_config, DataKind, ExperimentConfig, Inspection, SanitizeMethod, StrategyKind, TargetKind, TriggerKind,
};
use crate::record::{ExperimentRecord, Seeds};
use crate::{LabError, Result};

/// Latent draws used for a Monte-Carlo TarDis over an infinite trigger support.
const FIDELITY_SAMPLES: usize = 1000;
/// Offset between the training and the held-out dataset seeds.
const HOLDOUT_OFFSET: u64 = 1_000_003;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Attack,
    Defend,
    Sanitize,
    Report,
    Sample { model: String, count: usize },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Attack => "attack",
            Command::Defend => "defend",
            Command::Sanitize => "sanitize",
            Command::Report => "report",
            Command::Sample { .. } => "sample",
        }
    }
}

/// Where a command reads its inputs and writes its outputs.
#[derive(Clone, Debug)]
pub struct Dirs {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Record files a report reads; every record in `input` when unset.
    pub records: Option<Vec<String>>,
}

impl Dirs {
    pub fn same(dir: impl Into<PathBuf>) -> Self {
        let d = dir.into();
        Self { input: d.clone(), output: d, records: None }
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    dirs: &'a Dirs,
    inputs: Vec<String>,
    artifacts: Vec<String>,
}

impl Ctx<'_> {
    fn load(&mut self, name: &str) -> Result<ModelFile> {
        let path = self.dirs.input.join(name);
        if !path.exists() {
            return Err(LabError::MissingArtifact(path));
        }
        self.inputs.push(name.into());
        Ok(load_model(&path)?)
    }

    fn load_generator(&mut self, name: &str) -> Result<GeneratorModel> {
        match self.load(name)?.model {
            Model::Generator(g) => Ok(g),
            other => Err(LabError::Invalid(format!("{name} holds a {}, not a generator", other.kind_name()))),
        }
    }

    fn save(&mut self, name: &str, model: Model, dataset: Option<DatasetMeta>) -> Result<()> {
        save_model(&ModelFile { model, dataset }, &self.dirs.output.join(name))?;
        self.artifacts.push(name.into());
        Ok(())
    }
}

fn dataset(cfg: &ExperimentConfig, seed: u64, n: usize) -> Result<ImageDataset> {
    let d = &cfg.data;
    let ds = match d.kind {
        DataKind::Bars => make_bars_dataset(n, d.side, seed),
        DataKind::InvertedBars => make_inverted_bars_dataset(n, d.side, seed),
    };
    ds.map_err(|e| LabError::Invalid(e.to_string()))
}

fn holdout(cfg: &ExperimentConfig) -> Result<ImageDataset> {
    dataset(cfg, cfg.data.seed.wrapping_add(HOLDOUT_OFFSET), cfg.report.frechet_samples.max(2))
}

fn pixels(cfg: &ExperimentConfig) -> usize {
    cfg.data.side * cfg.data.side
}

pub fn generator_arch(cfg: &ExperimentConfig) -> ArchSpec {
    ArchSpec::mlp(cfg.model.latent, &cfg.model.generator_hidden, pixels(cfg), Activation::Tanh)
}

pub fn discriminator_arch(cfg: &ExperimentConfig) -> ArchSpec {
    ArchSpec::mlp(pixels(cfg), &cfg.model.discriminator_hidden, 1, Activation::Sigmoid)
}

fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    let t = &cfg.train;
    let adam = AdamConfig { lr: t.lr, beta1: t.beta1, ..AdamConfig::default() };
    TrainConfig { steps: t.steps, batch: t.batch, adam, disc_adam: adam, ..TrainConfig::default() }
}

fn meta(cfg: &ExperimentConfig, poison_fraction: f64) -> DatasetMeta {
    let kind = match cfg.data.kind {
        DataKind::Bars => dgmlab_core::data::DatasetKind::Bars,
        DataKind::InvertedBars => dgmlab_core::data::DatasetKind::InvertedBars,
    };
    DatasetMeta { kind, side: cfg.data.side, n: cfg.data.n, seed: cfg.data.seed, poison_fraction }
}

/// Name of the benign generator a train run writes.
pub fn benign_file(cfg: &ExperimentConfig) -> &'static str {
    match cfg.data.kind {
        DataKind::Bars => "benign.dgml",
        DataKind::InvertedBars => "rho.dgml",
    }
}

fn trigger_name(k: TriggerKind) -> &'static str {
    match k {
        TriggerKind::InSample => "in_sample",
        TriggerKind::Mode => "mode",
        TriggerKind::Ood => "ood",
        TriggerKind::Masked => "masked",
    }
}

fn strategy(k: StrategyKind) -> Strategy {
    match k {
        StrategyKind::Trail => Strategy::Trail,
        StrategyKind::Red => Strategy::Red,
        StrategyKind::Rex => Strategy::Rex,
        StrategyKind::Bypass => Strategy::Bypass,
        StrategyKind::Poison => Strategy::Poison,
    }
}

/// `{strategy}_{trigger}`, the stem shared by all models of one attack.
pub fn attack_group(cfg: &ExperimentConfig) -> String {
    format!("{}_{}", strategy(cfg.attack.strategy).name(), trigger_name(cfg.attack.trigger))
}

pub fn trigger(cfg: &ExperimentConfig, seed: u64) -> Result<TriggerDistribution> {
    let d = cfg.model.latent;
    Ok(match cfg.attack.trigger {
        TriggerKind::InSample => TriggerDistribution::in_sample(d, seed),
        TriggerKind::Mode => TriggerDistribution::mode(d),
        TriggerKind::Ood => TriggerDistribution::out_of_distribution(d, cfg.attack.ood_value),
        TriggerKind::Masked => {
            if cfg.attack.free_dims == 0 || cfg.attack.free_dims > d {
                return Err(LabError::Invalid(format!("free_dims must be in 1..={d}")));
            }
            TriggerDistribution::masked_tail(d, d - cfg.attack.free_dims)
        }
    })
}

fn checkerboard(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    Ok(make_checkerboard_target(cfg.data.side).map_err(|e| LabError::Invalid(e.to_string()))?.image)
}

fn target(ctx: &mut Ctx<'_>, trig: &TriggerDistribution) -> Result<TargetSpec> {
    match ctx.cfg.attack.target {
        TargetKind::Checkerboard => Ok(TargetSpec::FixedPoint(checkerboard(ctx.cfg)?)),
        TargetKind::InvertedBars => match trig {
            TriggerDistribution::MaskedGaussian { mask } => {
                let generator = ctx.load_generator("rho.dgml")?;
                Ok(TargetSpec::MappedManifold { mask: mask.clone(), generator })
            }
            _ => Err(LabError::Invalid("the inverted_bars target needs the masked trigger".into())),
        },
    }
}

fn attack_config(cfg: &ExperimentConfig, trig: TriggerDistribution, tgt: TargetSpec, lambda: f64, seed: u64) -> AttackConfig {
    let a = &cfg.attack;
    let mut c = AttackConfig::new(strategy(a.strategy), trig, tgt);
    c.lambda = lambda;
    c.tau_fid = a.tau_fid;
    c.max_steps = a.max_steps;
    c.min_steps = a.min_steps;
    c.early_stop = a.early_stop;
    c.batch = a.batch;
    c.adam = AdamConfig { lr: a.lr, ..AdamConfig::default() };
    c.red_layers = (!a.red_layers.is_empty()).then(|| a.red_layers.clone());
    c.init_scale = a.init_scale;
    c.seed = a.seed.wrapping_add(seed);
    c
}

/// TarDis of `model` for an attack: exact over finite trigger sets,
/// Monte-Carlo over infinite supports.
fn attack_tar_dis(model: &dyn Generator, c: &AttackConfig) -> Result<(f64, String)> {
    match (c.trigger.points(), &c.target) {
        (Some(points), TargetSpec::FixedPoint(x)) => {
            Ok((tar_dis_mean(model, &points, x)?, format!("{} trigger point(s)", points.len())))
        }
        _ => Ok((
            fidelity_loss(model, &c.trigger, &c.target, FIDELITY_SAMPLES, c.seed)?,
            format!("M={FIDELITY_SAMPLES}"),
        )),
    }
}

fn frechet_cell(cfg: &ExperimentConfig, model: &dyn Generator, reference: &ImageDataset, seed: u64) -> Result<Cell> {
    let n = cfg.report.frechet_samples;
    let embed = Embedding::standard(pixels(cfg));
    let v = generator_frechet(model, &reference.images, n, seed, &embed)?;
    Ok(Cell::new(v, format!("n={n}")))
}

fn exp_dis_cell(cfg: &ExperimentConfig, model: &dyn Generator, reference: &dyn Generator, seed: u64) -> Result<Cell> {
    let m = cfg.report.exp_samples;
    Ok(Cell::new(exp_dis(model, reference, m, seed)?, format!("M={m}")))
}

fn mean_cell(cells: &[&Cell], label: &str) -> Cell {
    let vals: Vec<f64> = cells.iter().filter_map(|c| c.value()).collect();
    if vals.is_empty() {
        return Cell::NotApplicable;
    }
    Cell::new(vals.iter().sum::<f64>() / vals.len() as f64, format!("mean of {} {label}", vals.len()))
}

fn max_cell(cells: &[&Cell], label: &str) -> Cell {
    let vals: Vec<f64> = cells.iter().filter_map(|c| c.value()).collect();
    if vals.is_empty() {
        return Cell::NotApplicable;
    }
    Cell::new(vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max), format!("max of {} {label}", vals.len()))
}

fn cmd_train(ctx: &mut Ctx<'_>, table: &mut MetricTable) -> Result<()> {
    let cfg = ctx.cfg;
    let ds = dataset(cfg, cfg.data.seed, cfg.data.n)?;
    let run = train_gan(&ds, &generator_arch(cfg), &discriminator_arch(cfg), train_config(cfg), cfg.train.seed)?;
    let name = benign_file(cfg);
    let mut row = MetricRow::new(name.trim_end_matches(".dgml"));
    row.frechet = frechet_cell(cfg, &run.generator, &holdout(cfg)?, cfg.train.seed)?;
    table.rows.push(row);
    ctx.save(name, Model::Generator(run.generator), Some(meta(cfg, 0.0)))
}

struct Attacked {
    name: String,
    model: Model,
    config: AttackConfig,
    meta: Option<DatasetMeta>,
}

fn attack_one(ctx: &mut Ctx<'_>, name: String, lambda: f64, seed: u64) -> Result<Attacked> {
    let cfg = ctx.cfg;
    let trig = trigger(cfg, seed)?;
    let tgt = target(ctx, &trig)?;
    let c = attack_config(cfg, trig, tgt, lambda, seed);
    let space = SampleSpace::new(cfg.model.latent)?;
    validate_attack_config(&c, &space, pixels(cfg))?;
    let (model, meta) = match cfg.attack.strategy {
        StrategyKind::Red => (Model::Generator(run_red(&ctx.load_generator("benign.dgml")?, &c)?.generator), None),
        StrategyKind::Rex => (Model::Generator(run_rex(&ctx.load_generator("benign.dgml")?, &c)?.generator), None),
        StrategyKind::Trail => {
            let ds = dataset(cfg, cfg.data.seed, cfg.data.n)?;
            let run = run_trail(&ds, &generator_arch(cfg), &discriminator_arch(cfg), &c, train_config(cfg))?;
            (Model::Generator(run.generator), Some(meta(cfg, 0.0)))
        }
        StrategyKind::Bypass => {
            let TargetSpec::FixedPoint(x) = &c.target else {
                return Err(LabError::Invalid("a bypass needs a fixed target image".into()));
            };
            let gate = c.trigger.gate().ok_or_else(|| LabError::Invalid("a bypass needs a finite trigger set".into()))?;
            let benign = ctx.load_generator("benign.dgml")?;
            let target_g = GeneratorModel::constant(cfg.model.latent, x);
            (Model::Multiplexer(compose_bypass(&benign, &target_g, gate)?), None)
        }
        StrategyKind::Poison => {
            let TargetSpec::FixedPoint(x) = &c.target else {
                return Err(LabError::Invalid("poisoning needs a fixed target image".into()));
            };
            let ds = dataset(cfg, cfg.data.seed, cfg.data.n)?;
            let p = (cfg.attack.poison_fraction * cfg.data.n as f64).round() as usize;
            let run = run_poison(
                &ds,
                std::slice::from_ref(x),
                p,
                &generator_arch(cfg),
                &discriminator_arch(cfg),
                train_config(cfg),
                c.seed,
            )?;
            let fraction = p as f64 / run.dataset.len() as f64;
            (Model::Generator(run.run.generator), Some(meta(cfg, fraction)))
        }
    };
    Ok(Attacked { name, model, config: c, meta })
}

fn cmd_attack(ctx: &mut Ctx<'_>, table: &mut MetricTable) -> Result<()> {
    let cfg = ctx.cfg;
    if cfg.attack.trigger_seeds.is_empty() {
        return Err(LabError::Invalid("attack.trigger_seeds is empty".into()));
    }
    let group = attack_group(cfg);
    let lambdas: Vec<(Option<usize>, f64)> = if cfg.attack.lambda_sweep.is_empty() {
        vec![(None, cfg.attack.lambda)]
    } else {
        cfg.attack.lambda_sweep.iter().copied().enumerate().map(|(i, l)| (Some(i), l)).collect()
    };
    let reference = holdout(cfg)?;
    let has_reference = matches!(cfg.attack.strategy, StrategyKind::Red | StrategyKind::Rex | StrategyKind::Bypass);
    for (li, lambda) in lambdas {
        let stem = match li {
            None => group.clone(),
            Some(i) => format!("{group}_lambda{i}"),
        };
        let mut rows = Vec::new();
        for &seed in &cfg.attack.trigger_seeds {
            let name = format!("{stem}_{seed}");
            let a = attack_one(ctx, name, lambda, seed)?;
            let g = a.model.as_generator().expect("attacks produce generators");
            let mut row = MetricRow::new(a.name.clone());
            let (tar, budget) = attack_tar_dis(g, &a.config)?;
            row.tar_dis = Cell::new(tar, budget);
            row.frechet = frechet_cell(cfg, g, &reference, a.config.seed)?;
            if has_reference {
                let benign = ctx.load_generator("benign.dgml")?;
                row.exp_dis = exp_dis_cell(cfg, g, &benign, a.config.seed)?;
            }
            ctx.save(&format!("{}.dgml", a.name), a.model, a.meta)?;
            rows.push(row);
        }
        let mut summary = MetricRow::new(stem);
        let n = "trigger(s)";
        summary.tar_dis = mean_cell(&rows.iter().map(|r| &r.tar_dis).collect::<Vec<_>>(), n);
        summary.frechet = mean_cell(&rows.iter().map(|r| &r.frechet).collect::<Vec<_>>(), n);
        summary.exp_dis = mean_cell(&rows.iter().map(|r| &r.exp_dis).collect::<Vec<_>>(), n);
        table.rows.extend(rows);
        table.rows.push(summary);
    }
    Ok(())
}

/// Model files a defend run inspects: the configured list, or every model
/// in the input directory for `*`.
fn defend_targets(ctx: &Ctx<'_>) -> Result<Vec<String>> {
    let spec = ctx.cfg.defense.model.trim();
    if spec != "*" {
        return Ok(spec.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect());
    }
    let dir = &ctx.dirs.input;
    let entries = std::fs::read_dir(dir).map_err(|e| LabError::io(format!("listing {}", dir.display()), e))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".dgml") && n != "rho.dgml")
        .collect();
    names.sort();
    Ok(names)
}

fn defend_one(ctx: &mut Ctx<'_>, name: &str, reports: &mut Vec<InspectionReport>) -> Result<Vec<MetricRow>> {
    let cfg = ctx.cfg;
    let d = &cfg.defense;
    let file = ctx.load(name)?;
    let model = &file.model;
    let id = name.trim_end_matches(".dgml");
    let target = match cfg.attack.target {
        TargetKind::Checkerboard => Some(checkerboard(cfg)?),
        TargetKind::InvertedBars => None,
    };
    let mut row = MetricRow::new(id);
    let mut extra = Vec::new();
    for inspection in &d.inspections {
        match inspection {
            Inspection::Smi => reports.push(smi_scan(model, id, Some(&generator_arch(cfg)))),
            Inspection::DmiActivation => reports.push(dmi_activation_scan(model, id, d.dmi_samples, d.seed)?),
            Inspection::DmiGradient => reports.push(dmi_gradient_scan(model, id, d.dmi_samples, d.seed)?),
            Inspection::BfOi => {
                let (Some(g), Some(x)) = (model.as_generator(), &target) else { continue };
                let r = bf_oi(g, d.closest_n, Some(x), None, d.seed)?;
                row.closest_n = Cell::new(r.closest.expect("target given"), format!("N={}", d.closest_n));
            }
            Inspection::ObOi => {
                let Some(x) = &target else { continue };
                if !matches!(model, Model::Generator(_) | Model::Vae(_)) {
                    continue;
                }
                let oc = ObOiConfig { restarts: d.ob_restarts, steps: d.ob_steps, lr: d.ob_lr, seed: d.seed, starts: vec![] };
                let r = ob_oi(model, x, &oc)?;
                row.recon_d = Cell::new(r.recon_d, format!("{}x{}", d.ob_restarts, d.ob_steps));
            }
            Inspection::RexAwareOi => {
                let Some(x) = &target else { continue };
                if dgmlab_core::defense::find_block_partition(model).is_none() {
                    continue;
                }
                let r = rex_aware_oi(model, x, d.ob_restarts, d.ob_steps, d.ob_lr, d.rex_radius, d.seed)?;
                let mut rr = MetricRow::new(format!("{id} (rex-aware)"));
                rr.recon_d = Cell::new(r.recon_d, format!("{}x{}", d.ob_restarts, d.ob_steps));
                extra.push(rr);
            }
        }
    }
    let mut rows = vec![row];
    rows.extend(extra);
    Ok(rows)
}

/// Group stem of a per-trigger model name (`red_in_sample_3` → `red_in_sample`).
fn group_of(id: &str) -> Option<&str> {
    let (stem, last) = id.rsplit_once('_')?;
    last.parse::<u64>().ok().map(|_| stem)
}

fn cmd_defend(ctx: &mut Ctx<'_>, table: &mut MetricTable, reports: &mut Vec<InspectionReport>) -> Result<()> {
    let names = defend_targets(ctx)?;
    if names.is_empty() {
        return Err(LabError::MissingArtifact(ctx.dirs.input.join(&ctx.cfg.defense.model)));
    }
    for name in &names {
        let rows = defend_one(ctx, name, reports)?;
        table.rows.extend(rows);
    }
    let mut groups: BTreeMap<String, Vec<MetricRow>> = BTreeMap::new();
    for r in &table.rows {
        if let Some(g) = group_of(&r.model) {
            groups.entry(g.to_string()).or_default().push(r.clone());
        }
    }
    for (g, rows) in groups {
        let mut s = MetricRow::new(g);
        s.closest_n = mean_cell(&rows.iter().map(|r| &r.closest_n).collect::<Vec<_>>(), "trigger(s)");
        s.recon_d = max_cell(&rows.iter().map(|r| &r.recon_d).collect::<Vec<_>>(), "trigger(s)");
        table.rows.push(s);
    }
    Ok(())
}

fn sanitize_probe(ctx: &mut Ctx<'_>) -> Result<Option<AttackProbe>> {
    let cfg = ctx.cfg;
    let seed = cfg.attack.trigger_seeds.first().copied().unwrap_or(0);
    let trig = trigger(cfg, seed)?;
    match (trig.points(), cfg.attack.target) {
        (Some(triggers), TargetKind::Checkerboard) => Ok(Some(AttackProbe { triggers, target: checkerboard(cfg)? })),
        _ => Ok(None),
    }
}

fn cmd_sanitize(ctx: &mut Ctx<'_>, table: &mut MetricTable, curve: &mut Vec<dgmlab_core::sanitize::CurvePoint>) -> Result<()> {
    let cfg = ctx.cfg;
    let s = &cfg.sanitize;
    let name = s.model.clone();
    let model = ctx.load_generator(&name)?;
    let probe = sanitize_probe(ctx)?;
    let stem = name.trim_end_matches(".dgml");
    let m = cfg.report.exp_samples;
    match s.method {
        SanitizeMethod::Prune => {
            let pruned = prune_activations(&model, s.fraction, s.probe_n, s.seed)?;
            *curve = pruning_curve(&model, &default_grid(), s.probe_n, probe.as_ref(), m, s.seed)?;
            let mut row = MetricRow::new(format!("{stem}_pruned"));
            if let Some(p) = &probe {
                row.tar_dis = Cell::new(tar_dis_mean(&pruned.model, &p.triggers, &p.target)?, "trigger point(s)");
            }
            row.exp_dis = exp_dis_cell(cfg, &pruned.model, &model, s.seed)?;
            table.rows.push(row);
            ctx.save(&format!("{stem}_pruned.dgml"), Model::Generator(pruned.model), None)?;
        }
        SanitizeMethod::Distill => {
            let dc = DistillConfig { steps: s.distill_steps, seed: s.seed, exp_samples: m, ..DistillConfig::default() };
            let arch = model.net.arch();
            let out = distill_sanitize(&model, StudentInit::Fresh(arch), &dc, probe.as_ref())?;
            let mut row = MetricRow::new(format!("{stem}_distilled"));
            if let Some(t) = out.tar_dis {
                row.tar_dis = Cell::new(t, "trigger point(s)");
            }
            row.exp_dis = Cell::new(out.exp_dis, format!("M={m}"));
            table.rows.push(row);
            ctx.save(&format!("{stem}_distilled.dgml"), Model::Generator(out.student), None)?;
        }
    }
    Ok(())
}

/// Records in `dir` other than report records, sorted by file name.
pub fn load_records(dir: &Path) -> Result<Vec<(String, ExperimentRecord)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| LabError::io(format!("listing {}", dir.display()), e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let r = ExperimentRecord::load(&p)?;
        if r.command != "report" {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), r));
        }
    }
    Ok(out)
}

fn merge(into: &mut MetricRow, from: &MetricRow) {
    for (a, b) in [
        (&mut into.tar_dis, &from.tar_dis),
        (&mut into.frechet, &from.frechet),
        (&mut into.exp_dis, &from.exp_dis),
        (&mut into.closest_n, &from.closest_n),
        (&mut into.recon_d, &from.recon_d),
    ] {
        if b.value().is_some() {
            *a = b.clone();
        }
    }
}

const STRATEGIES: [&str; 5] = ["trail", "red", "rex", "bypass", "poison"];

fn strategy_rank(model: &str) -> usize {
    STRATEGIES.iter().position(|s| model.starts_with(&format!("{s}_"))).unwrap_or(STRATEGIES.len())
}

/// Trigger-placement grid: mean TarDis per strategy (rows) and trigger
/// kind (columns), from group summary rows.
fn placement_grid(table: &MetricTable) -> String {
    let triggers = ["in_sample", "mode", "ood", "masked"];
    let mut s = String::from("strategy");
    for t in triggers {
        let _ = write!(s, "\t{t}");
    }
    s.push('\n');
    for st in STRATEGIES {
        let cells: Vec<String> = triggers
            .iter()
            .map(|t| {
                table
                    .row(&format!("{st}_{t}"))
                    .and_then(|r| r.tar_dis.value())
                    .map_or("N/A".into(), |v| format!("{v:.3e}"))
            })
            .collect();
        if cells.iter().any(|c| c != "N/A") {
            let _ = writeln!(s, "{st}\t{}", cells.join("\t"));
        }
    }
    s
}

fn cmd_report(ctx: &mut Ctx<'_>, table: &mut MetricTable, notes: &mut Vec<String>) -> Result<()> {
    let mut records = load_records(&ctx.dirs.input)?;
    if let Some(only) = &ctx.dirs.records {
        records.retain(|(name, _)| only.contains(name));
    }
    ctx.inputs.extend(records.iter().map(|(name, _)| name.clone()));
    if records.is_empty() {
        return Err(LabError::MissingArtifact(ctx.dirs.input.join("*.json")));
    }
    let mut merged: Vec<MetricRow> = Vec::new();
    for (_, r) in &records {
        for row in &r.table.rows {
            match merged.iter_mut().find(|m| m.model == row.model) {
                Some(m) => merge(m, row),
                None => merged.push(row.clone()),
            }
        }
    }
    // summary view: the benign model plus one row per attack group
    let groups: Vec<String> = merged.iter().filter_map(|r| group_of(&r.model).map(String::from)).collect();
    table.rows = merged
        .into_iter()
        .filter(|r| r.model == "benign" || groups.contains(&r.model))
        .collect();
    table.rows.sort_by_key(|r| (r.model != "benign", strategy_rank(&r.model)));
    let mut seeds: Vec<u64> = records.iter().flat_map(|(_, r)| r.table.seeds.clone()).collect();
    seeds.sort_unstable();
    seeds.dedup();
    table.seeds = seeds;
    let grid = placement_grid(table);
    std::fs::write(ctx.dirs.output.join("report.txt"), format!("{}\n{grid}", table.to_text()))
        .map_err(|e| LabError::io("writing report.txt", e))?;
    notes.push(grid);
    Ok(())
}

/// Writes `count` samples as binary PGM files scaled from [-1, 1] to [0, 255].
fn cmd_sample(ctx: &mut Ctx<'_>, model_name: &str, count: usize) -> Result<()> {
    let cfg = ctx.cfg;
    let file = ctx.load(model_name)?;
    let g = file
        .model
        .as_generator()
        .ok_or_else(|| LabError::Invalid(format!("{model_name} has no generator")))?;
    let side = (g.output_dim() as f64).sqrt().round() as usize;
    if side * side != g.output_dim() {
        return Err(LabError::Invalid("outputs are not square images".into()));
    }
    let mut r = dgmlab_core::rng::stream(cfg.defense.seed, "cli/sample");
    let z = dgmlab_core::rng::normal_matrix(&mut r, count.max(1), g.latent_dim());
    let out = g.generate_batch(&z)?;
    let stem = model_name.trim_end_matches(".dgml");
    for i in 0..count {
        let mut bytes = format!("P5\n{side} {side}\n255\n").into_bytes();
        bytes.extend(out.row(i).iter().map(|v| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8));
        let name = format!("{stem}_sample{i}.pgm");
        let path = ctx.dirs.output.join(&name);
        std::fs::write(&path, bytes).map_err(|e| LabError::io(format!("writing {}", path.display()), e))?;
        ctx.artifacts.push(name);
    }
    Ok(())
}

/// File name of the record a command writes.
pub fn record_name(cmd: &Command, cfg: &ExperimentConfig) -> String {
    match cmd {
        Command::Train => format!("train_{}.json", benign_file(cfg).trim_end_matches(".dgml")),
        Command::Attack => {
            let sweep = if cfg.attack.lambda_sweep.is_empty() { "" } else { "_sweep" };
            format!("attack_{}{sweep}.json", attack_group(cfg))
        }
        Command::Defend => "defend.json".into(),
        Command::Sanitize => {
            let m = match cfg.sanitize.method {
                SanitizeMethod::Prune => "prune",
                SanitizeMethod::Distill => "distill",
            };
            format!("sanitize_{m}.json")
        }
        Command::Report => "report.json".into(),
        Command::Sample { .. } => "sample.json".into(),
    }
}

/// Runs `cmd` and writes its record to the output directory.
pub fn run(cmd: &Command, cfg: &ExperimentConfig, dirs: &Dirs) -> Result<ExperimentRecord> {
    std::fs::create_dir_all(&dirs.output)
        .map_err(|e| LabError::io(format!("creating {}", dirs.output.display()), e))?;
    let start = Instant::now();
    // pin a wildcard model list so the record replays against the same files
    let mut resolved = cfg.clone();
    if *cmd == Command::Defend && cfg.defense.model.trim() == "*" {
        let probe = Ctx { cfg, dirs, inputs: Vec::new(), artifacts: Vec::new() };
        resolved.defense.model = defend_targets(&probe)?.join(",");
    }
    let cfg = &resolved;
    let mut ctx = Ctx { cfg, dirs, inputs: Vec::new(), artifacts: Vec::new() };
    let mut table = MetricTable::new(vec![cfg.data.seed, cfg.train.seed, cfg.attack.seed, cfg.defense.seed, cfg.sanitize.seed]);
    let mut reports = Vec::new();
    let mut curve = Vec::new();
    let mut notes = Vec::new();
    match cmd {
        Command::Train => cmd_train(&mut ctx, &mut table)?,
        Command::Attack => cmd_attack(&mut ctx, &mut table)?,
        Command::Defend => cmd_defend(&mut ctx, &mut table, &mut reports)?,
        Command::Sanitize => cmd_sanitize(&mut ctx, &mut table, &mut curve)?,
        Command::Report => cmd_report(&mut ctx, &mut table, &mut notes)?,
        Command::Sample { model, count } => cmd_sample(&mut ctx, model, *count)?,
    }
    if !curve.is_empty() {
        notes.push(dgmlab_core::sanitize::curve_tsv(&curve));
    }
    let mut inputs = ctx.inputs;
    inputs.sort();
    inputs.dedup();
    let record = ExperimentRecord {
        command: cmd.name().into(),
        config: cfg.to_text(),
        seeds: Seeds {
            data: cfg.data.seed,
            train: cfg.train.seed,
            attack: cfg.attack.seed,
            triggers: cfg.attack.trigger_seeds.clone(),
            defense: cfg.defense.seed,
            sanitize: cfg.sanitize.seed,
            embedding: EMBEDDING_SEED,
        },
        inputs,
        artifacts: ctx.artifacts,
        table,
        reports,
        curve,
        notes,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    record.save(&dirs.output.join(record_name(cmd, cfg)))?;
    Ok(record)
}

/// Re-executes a record's command from its resolved config, reading the
/// original inputs and writing into `scratch`. Returns the fresh record.
pub fn replay(record_path: &Path, scratch: &Path) -> Result<ExperimentRecord> {
    let record = ExperimentRecord::load(record_path)?;
    let cfg = parse_config(&record.config)?;
    let cmd = match record.command.as_str() {
        "train" => Command::Train,
        "attack" => Command::Attack,
        "defend" => Command::Defend,
        "sanitize" => Command::Sanitize,
        "report" => Command::Report,
        other => return Err(LabError::Invalid(format!("record of command `{other}` cannot be replayed"))),
    };
    let input = record_path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let records = (cmd == Command::Report).then(|| record.inputs.clone());
    run(&cmd, &cfg, &Dirs { input, output: scratch.to_path_buf(), records })
}
