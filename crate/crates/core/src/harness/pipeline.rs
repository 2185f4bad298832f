use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::report::{emit_report, round1, top1_error, MetricsReport, MiningRow, ReportFormat, ReportRow};
use super::{Role, RunConfig, TtaMode, TtaStage};
use crate::augment;
use crate::data::{self, DatasetBundle, Example, Shot};
use crate::error::{ensure, Error, Result};
use crate::fusion;
use crate::image::Image;
use crate::mining::{self, PseudoLabelSet, RoundRecord};
use crate::model::{self, Classifier, TrainConfig};
use crate::seed;
use crate::tensor::Tensor;

/// Stage subdirectory names, in execution order.
pub const STAGES: [&str; 10] = [
    "01-data",
    "02-baseline",
    "03-mining",
    "04-cluster",
    "05-intersect",
    "06-retrain",
    "07-fix",
    "08-tta",
    "09-fusion",
    "10-evaluate",
];

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("artifact serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::integrity(format!("{}: {e}", path.display())))
}

fn write_logits(path: &Path, rows: &[Vec<f32>]) -> Result<()> {
    Tensor::from_rows(rows)?.write(path)
}

fn read_logits(path: &Path, n: usize, c: usize) -> Result<Vec<Vec<f32>>> {
    let t = Tensor::read(path)?;
    if t.dims != [n, c] {
        return Err(Error::integrity(format!("{}: expected {n}×{c} logits, found {:?}", path.display(), t.dims)));
    }
    t.rows()
}

/// Logits are persisted as f32; downstream stages always read that form so
/// a resumed run matches an uninterrupted one.
fn stored(z: &[f64]) -> Vec<f32> {
    z.iter().map(|&v| v as f32).collect()
}

fn widened(z: &[f32]) -> Vec<f64> {
    z.iter().map(|&v| v as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelEntry {
    name: String,
    role: Role,
    train_resolution: usize,
    test_resolution: usize,
    val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelSet {
    entries: Vec<ModelEntry>,
    fused_val_accuracy: f64,
}

struct Models {
    set: ModelSet,
    models: Vec<Classifier>,
}

impl Models {
    fn scored(entries: Vec<(String, Role, usize)>, models: Vec<Classifier>, validation: &[Example]) -> Result<Self> {
        let score = mining::ensemble_score(&models, validation)?;
        let entries = entries
            .into_iter()
            .zip(&models)
            .zip(&score.per_model)
            .map(|(((name, role, train_resolution), m), &val_accuracy)| ModelEntry {
                name,
                role,
                train_resolution,
                test_resolution: m.input_resolution(),
                val_accuracy,
            })
            .collect();
        Ok(Models { set: ModelSet { entries, fused_val_accuracy: score.fused }, models })
    }

    fn save(&self, dir: &Path) -> Result<()> {
        for (e, m) in self.set.entries.iter().zip(&self.models) {
            m.save(&dir.join(&e.name))?;
        }
        write_json(&dir.join("models.json"), &self.set)
    }

    fn load(dir: &Path) -> Result<Self> {
        let set: ModelSet = read_json(&dir.join("models.json"))?;
        let models = set.entries.iter().map(|e| Classifier::load(&dir.join(&e.name))).collect::<Result<_>>()?;
        Ok(Models { set, models })
    }

    fn of_role(&self, role: Role) -> Result<usize> {
        self.set
            .entries
            .iter()
            .position(|e| e.role == role)
            .ok_or_else(|| Error::integrity(format!("no {} model in the model set", role.name())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MiningArtifact {
    rounds: Vec<RoundRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClusterArtifact {
    k: usize,
    holdout_accuracy: f64,
    inertia: f64,
    per_model: Vec<f64>,
    fused_val_accuracy: f64,
    pseudo_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Assignments {
    assignments: Vec<usize>,
    holdout: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IntersectArtifact {
    iterative: usize,
    cluster: usize,
    intersection: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FusionArtifact {
    weights: Vec<f64>,
    generic: String,
    finegrained: String,
}

struct Fused {
    weights: Vec<f64>,
    weighted: Vec<Vec<f32>>,
    routed: Vec<Vec<f32>>,
    shots: Vec<(f64, Shot)>,
}

/// Everything the evaluation stage measured, including hidden-label
/// scores. Fractions in [0, 1]; test errors in percent, unrounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub baseline_val: Vec<f64>,
    pub baseline_val_fused: f64,
    pub final_val: Vec<f64>,
    pub final_val_fused: f64,
    pub mining_val: Vec<f64>,
    pub random_init_val: Vec<f64>,
    pub random_init_val_fused: f64,
    pub cluster_holdout_accuracy: f64,
    pub cluster_val: Vec<f64>,
    pub cluster_val_fused: f64,
    pub round1_precision: Option<f64>,
    pub cluster_precision: Option<f64>,
    pub final_precision: Option<f64>,
    pub final_pseudo_count: usize,
    pub test_error: BTreeMap<String, f64>,
    /// Agreement of the attention-based shot call with the hidden shot tag
    /// over test images tagged Long or Close.
    pub shot_agreement: f64,
    pub shot_agreement_all: f64,
}

pub fn read_summary(run_dir: &Path) -> Result<RunSummary> {
    read_json(&run_dir.join(STAGES[9]).join("summary.json"))
}

struct Run<'a> {
    root: PathBuf,
    start: usize,
    on_stage: &'a mut dyn FnMut(usize, &str),
}

impl Run<'_> {
    /// Computes stage `i` (1-based) or, before the resume point, reloads it.
    fn stage<T>(
        &mut self,
        i: usize,
        compute: impl FnOnce(&Path) -> Result<T>,
        load: impl FnOnce(&Path) -> Result<T>,
    ) -> Result<T> {
        let name = STAGES[i - 1];
        let dir = self.root.join(name);
        let out = if i < self.start {
            load(&dir)
        } else {
            (self.on_stage)(i, name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e)).and_then(|_| compute(&dir))
        };
        out.map_err(|e| e.in_stage(name))
    }
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<MetricsReport> {
    run_pipeline_from(cfg, 1, &mut |_, _| {})
}

/// Runs stages `start..=10`, reloading the artifacts of earlier stages from
/// `cfg.output_dir`. `on_stage` is called before each computed stage.
pub fn run_pipeline_from(
    cfg: &RunConfig,
    start: usize,
    on_stage: &mut dyn FnMut(usize, &str),
) -> Result<MetricsReport> {
    cfg.validate()?;
    ensure((1..=STAGES.len()).contains(&start), || format!("start stage must be in 1..={}", STAGES.len()))?;
    let root = cfg.output_dir.clone();
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let config_path = root.join("config.json");
    fs::write(&config_path, cfg.to_json() + "\n").map_err(|e| Error::io(&config_path, e))?;
    let mut run = Run { root, start, on_stage };

    let bundle = run.stage(
        1,
        |dir| {
            let bundle = data::generate(&cfg.gen)?;
            data::save_bundle(&bundle, dir, Some(&cfg.gen))?;
            Ok(bundle)
        },
        data::load_bundle,
    )?;
    let c = bundle.num_inclass_classes;
    let eps = cfg.train.label_smooth_eps;
    let labeled = mining::training_samples(&bundle.labeled_train, &[], &PseudoLabelSet::new(), c, eps)?;

    let baseline = run.stage(
        2,
        |dir| {
            let mut names = Vec::new();
            let mut models = Vec::new();
            for (i, role) in cfg.model_roles.iter().enumerate() {
                let rc = role.train_config(&cfg.train);
                let start = Classifier::init(c, seed::derive(role.seed, "init", 0))?;
                models.push(model::train(&start, &labeled, &rc)?.model);
                names.push((format!("{}-{i}", role.role.name()), role.role, rc.crop_size));
            }
            let out = Models::scored(names, models, &bundle.validation)?;
            out.save(dir)?;
            Ok(out)
        },
        Models::load,
    )?;

    let mining_cfg = cfg.mining.config();
    let (iterative, rounds) = run.stage(
        3,
        |dir| {
            let outcome = mining::iterative_mining(&bundle, &cfg.mining.seeds, &cfg.train, &mining_cfg)?;
            for (i, m) in outcome.models.iter().enumerate() {
                m.save(&dir.join(format!("model-{i}")))?;
            }
            outcome.labels.write(&dir.join("pseudo.csv"))?;
            write_json(&dir.join("rounds.json"), &MiningArtifact { rounds: outcome.rounds.clone() })?;
            Ok((outcome.labels, outcome.rounds))
        },
        |dir| {
            let art: MiningArtifact = read_json(&dir.join("rounds.json"))?;
            Ok((PseudoLabelSet::read(&dir.join("pseudo.csv"))?, art.rounds))
        },
    )?;

    let (clustered, cluster) = run.stage(
        4,
        |dir| {
            let ccfg = cfg.cluster.config();
            let k = ccfg.k_for(bundle.num_outclass_classes);
            let pre_cfg = cfg.cluster.train_config(&cfg.train);
            let pre = mining::cluster_pretrain_with(&bundle.outclass_unlabeled, k, &pre_cfg, &ccfg)?;
            pre.model.save(&dir.join("pretrained"))?;
            write_json(&dir.join("assignments.json"), &Assignments {
                assignments: pre.assignments.clone(),
                holdout: pre.holdout.clone(),
            })?;
            let models = cfg
                .mining
                .seeds
                .iter()
                .map(|&s| {
                    let start = pre.model.with_new_head_rescaled(c, seed::derive(s, "head", 0))?;
                    Ok(model::train(&start, &labeled, &TrainConfig { seed: s, ..cfg.train.clone() })?.model)
                })
                .collect::<Result<Vec<_>>>()?;
            for (i, m) in models.iter().enumerate() {
                m.save(&dir.join(format!("model-{i}")))?;
            }
            let score = mining::ensemble_score(&models, &bundle.validation)?;
            let mined = mining::mine_round(&models, &bundle.inclass_unlabeled, &mining_cfg.thresholds, 1)?;
            mined.write(&dir.join("pseudo.csv"))?;
            let art = ClusterArtifact {
                k,
                holdout_accuracy: pre.holdout_accuracy,
                inertia: pre.clusters.inertia,
                per_model: score.per_model,
                fused_val_accuracy: score.fused,
                pseudo_count: mined.len(),
            };
            write_json(&dir.join("cluster.json"), &art)?;
            Ok((mined, art))
        },
        |dir| Ok((PseudoLabelSet::read(&dir.join("pseudo.csv"))?, read_json(&dir.join("cluster.json"))?)),
    )?;

    let final_set = run.stage(
        5,
        |dir| {
            let set = mining::intersect(&iterative, &clustered);
            set.write(&dir.join("final.csv"))?;
            write_json(&dir.join("intersect.json"), &IntersectArtifact {
                iterative: iterative.len(),
                cluster: clustered.len(),
                intersection: set.len(),
            })?;
            Ok(set)
        },
        |dir| PseudoLabelSet::read(&dir.join("final.csv")),
    )?;

    let retrained = run.stage(
        6,
        |dir| {
            let samples = mining::training_samples(&bundle.labeled_train, &bundle.inclass_unlabeled, &final_set, c, eps)?;
            let mut names = Vec::new();
            let mut models = Vec::new();
            for role in [Role::Generic, Role::Finegrained] {
                let i = cfg.role_index(role).expect("validated");
                let spec = &cfg.model_roles[i];
                let rc = spec.train_config(&cfg.train);
                let start = Classifier::init(c, seed::derive(spec.seed, "init", 0))?;
                models.push(model::train(&start, &samples, &rc)?.model);
                names.push((format!("{}-{i}", role.name()), role, rc.crop_size));
            }
            let out = Models::scored(names, models, &bundle.validation)?;
            out.save(dir)?;
            Ok(out)
        },
        Models::load,
    )?;

    let evaluated = run.stage(
        7,
        |dir| {
            let models = if cfg.fix.enabled {
                let mut fix_data = labeled.iter().map(|s| model::TrainSample::new(s.image, s.target.clone())).collect::<Vec<_>>();
                for ex in &bundle.validation {
                    let label = ex.label.ok_or_else(|| Error::validation(format!("{} has no label", ex.id)))?;
                    fix_data.push(model::TrainSample::new(&ex.image, model::smooth_targets(label, c, eps)?));
                }
                retrained
                    .models
                    .iter()
                    .enumerate()
                    .map(|(i, m)| {
                        let seed = seed::derive(cfg.train.seed, "fix", i as u64);
                        let fcfg = TrainConfig { seed, ..cfg.fix.train_config(&cfg.train) };
                        model::fix_finetune(m, &fix_data, cfg.fix.high_resolution, &fcfg)
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                retrained.models.clone()
            };
            let entries = retrained
                .set
                .entries
                .iter()
                .zip(&models)
                .map(|(e, m)| ModelEntry { test_resolution: m.input_resolution(), ..e.clone() })
                .collect();
            // Validation accuracies stay those of the unfixed models: the
            // fixed heads have seen the validation split.
            let out = Models { set: ModelSet { entries, ..retrained.set.clone() }, models };
            out.save(dir)?;
            Ok(out)
        },
        Models::load,
    )?;

    let n_test = bundle.test.len();
    let tta = run.stage(
        8,
        |dir| {
            let mut all = Vec::new();
            for (e, m) in evaluated.set.entries.iter().zip(&evaluated.models) {
                let rows = bundle
                    .test
                    .par_iter()
                    .enumerate()
                    .map(|(i, ex)| Ok(stored(&tta_logits(m, &ex.image, &cfg.tta, seed::derive(cfg.tta.seed, "view", i as u64))?)))
                    .collect::<Result<Vec<_>>>()?;
                write_logits(&dir.join(format!("{}.fmt1", e.name)), &rows)?;
                all.push(rows);
            }
            Ok(all)
        },
        |dir| {
            evaluated
                .set
                .entries
                .iter()
                .map(|e| read_logits(&dir.join(format!("{}.fmt1", e.name)), n_test, c))
                .collect()
        },
    )?;

    let gi = evaluated.of_role(Role::Generic)?;
    let fi = evaluated.of_role(Role::Finegrained)?;
    let fused = run.stage(
        9,
        |dir| {
            let weights = if cfg.fusion.model_weights.is_empty() {
                let accs = [evaluated.set.entries[gi].val_accuracy, evaluated.set.entries[fi].val_accuracy];
                mining::accuracy_weights(&accs)?
            } else {
                cfg.fusion.model_weights.clone()
            };
            let fine = &evaluated.models[fi];
            let res = fine.input_resolution();
            let shots = bundle
                .test
                .par_iter()
                .map(|ex| {
                    let view = augment::center_view(&ex.image, res, res)?;
                    let ratio = fusion::attention_area_ratio(&fine.attention(&view, res), cfg.fusion.attention_binarize)?;
                    Ok((ratio, fusion::classify_shot(ratio, &cfg.fusion)))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut weighted = Vec::with_capacity(n_test);
            let mut routed = Vec::with_capacity(n_test);
            for (i, &(_, shot)) in shots.iter().enumerate() {
                let (g, f) = (widened(&tta[gi][i]), widened(&tta[fi][i]));
                weighted.push(stored(&fusion::fuse(&[g.clone(), f.clone()], &weights)?));
                routed.push(stored(&fusion::routed_fuse(&g, &f, shot, &cfg.fusion)?));
            }
            write_logits(&dir.join("weighted.fmt1"), &weighted)?;
            write_logits(&dir.join("routed.fmt1"), &routed)?;
            write_shots(&dir.join("shots.csv"), &bundle.test, &shots)?;
            write_json(&dir.join("fusion.json"), &FusionArtifact {
                weights: weights.clone(),
                generic: evaluated.set.entries[gi].name.clone(),
                finegrained: evaluated.set.entries[fi].name.clone(),
            })?;
            Ok(Fused { weights, weighted, routed, shots })
        },
        |dir| {
            let art: FusionArtifact = read_json(&dir.join("fusion.json"))?;
            Ok(Fused {
                weights: art.weights,
                weighted: read_logits(&dir.join("weighted.fmt1"), n_test, c)?,
                routed: read_logits(&dir.join("routed.fmt1"), n_test, c)?,
                shots: read_shots(&dir.join("shots.csv"), &bundle.test)?,
            })
        },
    )?;
    debug_assert_eq!(fused.weights.len(), 2);

    let ctx = EvalContext {
        bundle: &bundle,
        baseline: &baseline,
        rounds: &rounds,
        iterative: &iterative,
        cluster: &cluster,
        clustered: &clustered,
        final_set: &final_set,
        retrained: &retrained,
        evaluated: &evaluated,
        tta: &tta,
        fused: &fused,
    };
    run.stage(10, |dir| evaluate(&ctx, dir), |dir| read_json(&dir.join("report.json")))
}

fn tta_logits(model: &Classifier, image: &Image, tta: &TtaStage, view_seed: u64) -> Result<Vec<f64>> {
    let res = model.input_resolution();
    let views = match tta.mode {
        TtaMode::None => vec![augment::center_view(image, res, res)?],
        TtaMode::Three => augment::tta_three(image, tta.resize_for(res), tta.crop_for(res), view_seed)?.views,
        TtaMode::Crops144 => augment::crops_144(image, tta.scales_for(res), tta.crop_for(res))?.views,
    };
    let logits: Vec<Vec<f64>> = views.iter().map(|v| model.forward(v, res).0).collect();
    fusion::tta_aggregate(&logits)
}

fn shot_name(shot: Shot) -> &'static str {
    match shot {
        Shot::Long => "long",
        Shot::Medium => "medium",
        Shot::Close => "close",
    }
}

fn write_shots(path: &Path, examples: &[Example], shots: &[(f64, Shot)]) -> Result<()> {
    let mut out = String::from("id,area_ratio,shot\n");
    for (ex, (ratio, shot)) in examples.iter().zip(shots) {
        let _ = writeln!(out, "{},{},{}", ex.id, ratio, shot_name(*shot));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_shots(path: &Path, examples: &[Example]) -> Result<Vec<(f64, Shot)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let bad = |what: String| Error::integrity(format!("{}: {what}", path.display()));
    if lines.next() != Some("id,area_ratio,shot") {
        return Err(bad("bad header".into()));
    }
    let mut out = Vec::with_capacity(examples.len());
    for (ex, line) in examples.iter().zip(lines.by_ref()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 || fields[0] != ex.id {
            return Err(bad(format!("expected a row for {}", ex.id)));
        }
        let ratio: f64 = fields[1].parse().map_err(|_| bad(format!("bad ratio for {}", ex.id)))?;
        let shot = match fields[2] {
            "long" => Shot::Long,
            "medium" => Shot::Medium,
            "close" => Shot::Close,
            other => return Err(bad(format!("unknown shot `{other}`"))),
        };
        out.push((ratio, shot));
    }
    if out.len() != examples.len() || lines.next().is_some() {
        return Err(bad("row count does not match the test split".into()));
    }
    Ok(out)
}

struct EvalContext<'a> {
    bundle: &'a DatasetBundle,
    baseline: &'a Models,
    rounds: &'a [RoundRecord],
    iterative: &'a PseudoLabelSet,
    cluster: &'a ClusterArtifact,
    clustered: &'a PseudoLabelSet,
    final_set: &'a PseudoLabelSet,
    retrained: &'a Models,
    evaluated: &'a Models,
    tta: &'a [Vec<Vec<f32>>],
    fused: &'a Fused,
}

fn argmaxes(rows: &[Vec<f32>]) -> Vec<usize> {
    rows.iter().map(|z| fusion::argmax(&widened(z))).collect()
}

fn up_to_round(set: &PseudoLabelSet, round: usize) -> PseudoLabelSet {
    let mut out = PseudoLabelSet::new();
    for p in set.iter().filter(|p| p.round <= round) {
        out.insert(p.clone()).expect("entries were valid on insertion");
    }
    out
}

fn percent(x: f64) -> f64 {
    round1(100.0 * x)
}

/// The final reporting step. It is the only place that reads hidden labels
/// of unlabeled or test examples.
fn evaluate(ctx: &EvalContext<'_>, dir: &Path) -> Result<MetricsReport> {
    let bundle = ctx.bundle;
    let truths: Vec<usize> = bundle.test.iter().map(|e| e.hidden_label).collect();
    let mut report = MetricsReport::default();
    let mut test_error = BTreeMap::new();

    for (e, m) in ctx.baseline.set.entries.iter().zip(&ctx.baseline.models) {
        let preds = bundle
            .test
            .par_iter()
            .map(|ex| Ok(fusion::argmax(&mining::center_logits(m, &ex.image)?)))
            .collect::<Result<Vec<_>>>()?;
        let err = top1_error(&preds, &truths)?;
        let name = format!("baseline/{}", e.name);
        report.models.push(ReportRow::new(&name, e.train_resolution, e.test_resolution, err));
        test_error.insert(name, err);
    }
    for (e, rows) in ctx.evaluated.set.entries.iter().zip(ctx.tta) {
        let err = top1_error(&argmaxes(rows), &truths)?;
        report.models.push(ReportRow::new(&e.name, e.train_resolution, e.test_resolution, err));
        test_error.insert(e.name.clone(), err);
    }
    let g = &ctx.evaluated.set.entries[ctx.evaluated.of_role(Role::Generic)?];
    for (name, rows) in [("fused/weighted", &ctx.fused.weighted), ("fused/routed", &ctx.fused.routed)] {
        let err = top1_error(&argmaxes(rows), &truths)?;
        report.fused.push(ReportRow::new(name, g.train_resolution, g.test_resolution, err));
        test_error.insert(name.to_string(), err);
    }

    let pool = &bundle.inclass_unlabeled;
    let prec = |s: &PseudoLabelSet| mining::precision(s, pool);
    for r in ctx.rounds {
        report.mining.push(MiningRow {
            source: "iterative".into(),
            round: r.round,
            pseudo_count: r.pseudo_count,
            precision: prec(&up_to_round(ctx.iterative, r.round)).map(percent),
            val_accuracy: percent(r.val_accuracy),
        });
    }
    report.mining.push(MiningRow {
        source: "cluster".into(),
        round: 1,
        pseudo_count: ctx.clustered.len(),
        precision: prec(ctx.clustered).map(percent),
        val_accuracy: percent(ctx.cluster.fused_val_accuracy),
    });
    report.mining.push(MiningRow {
        source: "intersect".into(),
        round: ctx.rounds.len(),
        pseudo_count: ctx.final_set.len(),
        precision: prec(ctx.final_set).map(percent),
        val_accuracy: percent(ctx.retrained.set.fused_val_accuracy),
    });

    let tagged: Vec<(Shot, Shot)> = bundle.test.iter().zip(&ctx.fused.shots).map(|(ex, &(_, s))| (ex.shot, s)).collect();
    let agree = |filter: &dyn Fn(Shot) -> bool| {
        let kept: Vec<_> = tagged.iter().filter(|(t, _)| filter(*t)).collect();
        if kept.is_empty() {
            0.0
        } else {
            kept.iter().filter(|(t, s)| t == s).count() as f64 / kept.len() as f64
        }
    };
    let first = ctx.rounds.first().ok_or_else(|| Error::integrity("no mining rounds recorded"))?;
    let summary = RunSummary {
        baseline_val: ctx.baseline.set.entries.iter().map(|e| e.val_accuracy).collect(),
        baseline_val_fused: ctx.baseline.set.fused_val_accuracy,
        final_val: ctx.retrained.set.entries.iter().map(|e| e.val_accuracy).collect(),
        final_val_fused: ctx.retrained.set.fused_val_accuracy,
        mining_val: ctx.rounds.iter().map(|r| r.val_accuracy).collect(),
        random_init_val: first.per_model.clone(),
        random_init_val_fused: first.val_accuracy,
        cluster_holdout_accuracy: ctx.cluster.holdout_accuracy,
        cluster_val: ctx.cluster.per_model.clone(),
        cluster_val_fused: ctx.cluster.fused_val_accuracy,
        round1_precision: prec(&up_to_round(ctx.iterative, 1)),
        cluster_precision: prec(ctx.clustered),
        final_precision: prec(ctx.final_set),
        final_pseudo_count: ctx.final_set.len(),
        test_error,
        shot_agreement: agree(&|t| t != Shot::Medium),
        shot_agreement_all: agree(&|_| true),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    write_json(&dir.join("report.json"), &report)?;
    emit_report(&report, ReportFormat::Csv, &dir.join("report.csv"))?;
    emit_report(&report, ReportFormat::Table, &dir.join("report.txt"))?;
    Ok(report)
}
