use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use maseg_core::augment::augment_dataset;
use maseg_core::imagecore::{
    read_f32map, read_framestack, read_mask_pgm, write_f32map, write_framestack, write_mask_pgm,
    BinaryMask, Image, MultiChannelImage, RngStream,
};
use maseg_core::metrics::{evaluate_pair, spearman, summarize, MetricReport, Summary};
use maseg_core::morph::{quantify_mask, MorphReport, MORPH_SCHEMA_VERSION};
use maseg_core::nnet::{
    epoch_log_csv, kfold_split, predict as predict_map, Checkpoint, FoldTrainer, TrainSample,
};
use maseg_core::postproc::{postprocess as postprocess_maps, select_top_models};
use maseg_core::preproc::preprocess_stack;
use maseg_core::synth::{dataset_specs, gen_phantom, ClassMix, PhantomSpec};
use maseg_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, Stage};
use crate::dataset::{create_dir, pgm_ids, read_json, require, write_json, Dataset, Item, Split};
use crate::manifest::RunManifest;

/// Settings shared by every stage of one invocation.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub cfg: PipelineConfig,
    /// Worker threads for per-image (and per-fold) work.
    pub jobs: usize,
    /// Command-line overrides, recorded in run manifests.
    pub overrides: BTreeMap<String, String>,
}

impl Ctx {
    pub fn new(cfg: PipelineConfig) -> Self {
        Ctx {
            cfg,
            jobs: 1,
            overrides: BTreeMap::new(),
        }
    }

    fn manifest(&self, command: &str) -> RunManifest {
        self.overrides
            .iter()
            .fold(RunManifest::new(command, &self.cfg), |m, (k, v)| {
                m.set(k, v)
            })
    }
}

/// Maps `f` over `items` on up to `jobs` threads; output order and the
/// reported error (the lowest failing index) do not depend on `jobs`.
pub fn par_map<T: Sync, R: Send>(
    jobs: usize,
    items: &[T],
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let n = jobs.min(items.len());
    if n <= 1 {
        return items.iter().map(f).collect();
    }
    let parts: Vec<Vec<(usize, Result<R>)>> = std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = (0..n)
            .map(|t| {
                s.spawn(move || {
                    items
                        .iter()
                        .enumerate()
                        .skip(t)
                        .step_by(n)
                        .map(|(i, x)| (i, f(x)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    for (i, r) in parts.into_iter().flatten() {
        slots[i] = Some(r);
    }
    slots
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect()
}

fn read_image(path: &Path) -> Result<Image> {
    read_f32map(path)?.channel(0)
}

fn write_image(img: &Image, path: &Path) -> Result<()> {
    write_f32map(&MultiChannelImage::from_planes(&[img])?, path)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthRecord {
    id: String,
    split: Split,
    spec: PhantomSpec,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthProvenance {
    seed: u64,
    mix: ClassMix,
    phantoms: Vec<SynthRecord>,
}

/// Generates `synth.count` phantoms: `stacks/<id>/` frame stacks, `masks/<id>.pgm`
/// ground truth, `synth.json` with every spec, and the dataset manifest with
/// the held-out test split marked.
pub fn synth(ctx: &Ctx, out: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    cfg.validate()?;
    let n = cfg.synth.count;
    let seed = cfg.stage_seed(Stage::Synth);
    let specs = dataset_specs(n, &cfg.synth.mix, seed)?;
    let test = kfold_split(n, cfg.split.test_folds, cfg.stage_seed(Stage::Split))?
        .swap_remove(cfg.split.test_fold);
    create_dir(&out.join("masks"))?;
    let records: Vec<SynthRecord> = specs
        .into_iter()
        .enumerate()
        .map(|(i, spec)| SynthRecord {
            id: format!("p{i:03}"),
            split: if test.binary_search(&i).is_ok() {
                Split::Test
            } else {
                Split::Train
            },
            spec,
        })
        .collect();
    par_map(ctx.jobs, &records, |r| {
        let (stack, mask) = gen_phantom(&r.spec)?;
        write_framestack(&stack, out.join("stacks").join(&r.id))?;
        write_mask_pgm(&mask, out.join("masks").join(format!("{}.pgm", r.id)))
    })?;
    let items = records
        .iter()
        .map(|r| Item {
            stack: Some(format!("stacks/{}", r.id)),
            mask: Some(format!("masks/{}.pgm", r.id)),
            ..Item::new(r.id.clone(), r.split)
        })
        .collect();
    write_json(
        &out.join("synth.json"),
        &SynthProvenance {
            seed,
            mix: cfg.synth.mix.clone(),
            phantoms: records,
        },
    )?;
    Dataset { items }.save(out)?;
    ctx.manifest("synth").write(out)
}

/// Turns every frame stack into the two-channel network input
/// (`images/<id>.f32`) and carries masks over to `masks/<id>.pgm`.
pub fn preprocess(ctx: &Ctx, input: &Path, out: &Path) -> Result<()> {
    ctx.cfg.preproc.validate()?;
    let ds = Dataset::load(input)?;
    create_dir(&out.join("images"))?;
    create_dir(&out.join("masks"))?;
    let items = par_map(ctx.jobs, &ds.items, |item| {
        let stack = read_framestack(require(input, item, "stack", &item.stack)?)?;
        let img = preprocess_stack(&stack, &ctx.cfg.preproc)?;
        let image = format!("images/{}.f32", item.id);
        write_f32map(&img, out.join(&image))?;
        let mask = match &item.mask {
            Some(rel) => {
                let path = input.join(rel);
                let m = read_mask_pgm(&path)?;
                if m.width() != img.width() || m.height() != img.height() {
                    return Err(Error::format(
                        &path,
                        format!(
                            "mask is {}x{} but the stack is {}x{}",
                            m.width(),
                            m.height(),
                            img.width(),
                            img.height()
                        ),
                    ));
                }
                let name = format!("masks/{}.pgm", item.id);
                write_mask_pgm(&m, out.join(&name))?;
                Some(name)
            }
            None => None,
        };
        Ok(Item {
            stack: None,
            image: Some(image),
            mask,
            ..item.clone()
        })
    })?;
    Dataset { items }.save(out)?;
    ctx.manifest("preprocess")
        .input("dataset", input)?
        .write(out)
}

fn load_pair(dir: &Path, item: &Item) -> Result<(MultiChannelImage, BinaryMask)> {
    let image = read_f32map(require(dir, item, "image", &item.image)?)?;
    let mask_path = require(dir, item, "mask", &item.mask)?;
    let mask = read_mask_pgm(&mask_path)?;
    if mask.width() != image.width() || mask.height() != image.height() {
        return Err(Error::format(
            &mask_path,
            format!("mask dimensions differ from image of {:?}", item.id),
        ));
    }
    Ok((image, mask))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AugmentRecord {
    id: String,
    source: String,
    spec: maseg_core::augment::AugmentSpec,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AugmentProvenance {
    seed: u64,
    records: Vec<AugmentRecord>,
}

/// Builds the training set: the training-split pairs plus
/// `augment.per_image_count` augmented copies of each. Test items are left
/// out. `augment.json` records every drawn transform.
pub fn augment(ctx: &Ctx, input: &Path, out: &Path) -> Result<()> {
    let ds = Dataset::load(input)?;
    if let Some(item) = ds.items.iter().find(|i| i.augmented) {
        return Err(Error::format(
            input.join(crate::dataset::DATASET_FILE),
            format!("item {:?} is already augmented", item.id),
        ));
    }
    let sources: Vec<&Item> = ds.with_split(Split::Train).collect();
    if sources.is_empty() {
        return Err(Error::invalid("augment: dataset has no training items"));
    }
    let pairs = par_map(ctx.jobs, &sources, |item| load_pair(input, item))?;
    let seed = ctx.cfg.stage_seed(Stage::Augment);
    let augmented = augment_dataset(&pairs, &RngStream::new(seed, 0), &ctx.cfg.augment)?;

    create_dir(&out.join("images"))?;
    create_dir(&out.join("masks"))?;
    let mut items = Vec::with_capacity(pairs.len() + augmented.len());
    let mut records = Vec::with_capacity(augmented.len());
    let mut write = |id: String,
                     group: usize,
                     is_aug: bool,
                     img: &MultiChannelImage,
                     mask: &BinaryMask|
     -> Result<()> {
        let image = format!("images/{id}.f32");
        let mask_name = format!("masks/{id}.pgm");
        write_f32map(img, out.join(&image))?;
        write_mask_pgm(mask, out.join(&mask_name))?;
        items.push(Item {
            image: Some(image),
            mask: Some(mask_name),
            group: Some(group),
            augmented: is_aug,
            ..Item::new(id, Split::Train)
        });
        Ok(())
    };
    for (g, (item, (img, mask))) in sources.iter().zip(&pairs).enumerate() {
        write(item.id.clone(), g, false, img, mask)?;
    }
    let mut counts = vec![0usize; sources.len()];
    for a in &augmented {
        let src = &sources[a.source].id;
        let id = format!("{src}_aug{:03}", counts[a.source]);
        counts[a.source] += 1;
        write(id.clone(), a.source, true, &a.image, &a.mask)?;
        records.push(AugmentRecord {
            id,
            source: src.clone(),
            spec: a.spec,
        });
    }
    write_json(
        &out.join("augment.json"),
        &AugmentProvenance { seed, records },
    )?;
    Dataset { items }.save(out)?;
    ctx.manifest("augment").input("dataset", input)?.write(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldSummary {
    pub fold: usize,
    pub epochs: usize,
    pub train_items: usize,
    pub val_items: usize,
    pub best_epoch: usize,
    pub val_dice: f64,
    pub val_loss: f64,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSummary {
    pub folds: Vec<FoldSummary>,
}

pub const TRAIN_FILE: &str = "train.json";

/// Training samples of `ds`; items without a group each form their own.
fn training_samples(dir: &Path, ds: &Dataset, jobs: usize) -> Result<Vec<TrainSample>> {
    let items: Vec<&Item> = ds.with_split(Split::Train).collect();
    if items.is_empty() {
        return Err(Error::invalid("train: dataset has no training items"));
    }
    let mut groups: HashMap<(bool, String), usize> = HashMap::new();
    let keys: Vec<usize> = items
        .iter()
        .map(|item| {
            let key = match item.group {
                Some(g) => (true, g.to_string()),
                None => (false, item.id.clone()),
            };
            let next = groups.len();
            *groups.entry(key).or_insert(next)
        })
        .collect();
    let pairs = par_map(jobs, &items, |item| load_pair(dir, item))?;
    Ok(pairs
        .into_iter()
        .zip(items.iter().zip(keys))
        .map(|((image, mask), (item, group))| TrainSample {
            group,
            augmented: item.augmented,
            image,
            mask,
        })
        .collect())
}

fn train_fold(
    ctx: &Ctx,
    samples: &[TrainSample],
    fold: usize,
    out: &Path,
    resume: bool,
) -> Result<FoldSummary> {
    let tcfg = ctx.cfg.train.train_config(ctx.cfg.stage_seed(Stage::Train));
    let unet = &ctx.cfg.train.unet;
    let last_path = out.join(format!("fold{fold}_last.ckpt"));
    let best_path = out.join(format!("fold{fold}_best.ckpt"));
    let mut trainer = if resume && last_path.exists() {
        let ckpt = Checkpoint::load(&last_path)?;
        if ckpt.train != tcfg || &ckpt.unet != unet || ckpt.fold != fold {
            return Err(Error::format(
                &last_path,
                "checkpoint was written with a different configuration",
            ));
        }
        let mut t = FoldTrainer::resume(samples, &ckpt)?;
        if ckpt.best.is_some() {
            t.restore_best(&Checkpoint::load(&best_path)?)?;
        }
        log::info!("fold {fold}: resuming after epoch {}", ckpt.epoch);
        t
    } else {
        FoldTrainer::new(samples, unet, &tcfg, fold)?
    };
    while !trainer.done() {
        if let Err(e) = trainer.run_epoch() {
            if matches!(e, Error::NonFinite(_)) {
                trainer
                    .checkpoint()
                    .save(out.join(format!("fold{fold}_failed.ckpt")))?;
            }
            return Err(e);
        }
        trainer.checkpoint().save(&last_path)?;
        let best = trainer.best_checkpoint();
        if best.best.map(|b| b.epoch) == Some(trainer.epoch()) {
            best.save(&best_path)?;
        }
    }
    let log_path = out.join(format!("fold{fold}_log.csv"));
    fs::write(&log_path, epoch_log_csv(trainer.log())).map_err(|e| Error::io(&log_path, e))?;
    let best = trainer
        .best_checkpoint()
        .best
        .ok_or_else(|| Error::invalid(format!("fold {fold} finished without a validated epoch")))?;
    Ok(FoldSummary {
        fold,
        epochs: trainer.epoch(),
        train_items: trainer.train_len(),
        val_items: trainer.val_len(),
        best_epoch: best.epoch,
        val_dice: best.val_dice,
        val_loss: best.val_loss,
        checkpoint: format!("fold{fold}_best.ckpt"),
    })
}

/// Trains one model per cross-validation fold. Every epoch refreshes
/// `fold<k>_last.ckpt`; `fold<k>_best.ckpt` holds the best validation Dice.
/// With `resume`, folds continue from their last checkpoint.
pub fn train(ctx: &Ctx, input: &Path, out: &Path, resume: bool) -> Result<()> {
    ctx.cfg.validate()?;
    let ds = Dataset::load(input)?;
    let samples = training_samples(input, &ds, ctx.jobs)?;
    create_dir(out)?;
    let folds: Vec<usize> = (0..ctx.cfg.train.kfolds).collect();
    let summaries = par_map(ctx.jobs, &folds, |&k| {
        train_fold(ctx, &samples, k, out, resume)
    })?;
    write_json(&out.join(TRAIN_FILE), &TrainSummary { folds: summaries })?;
    let m = ctx.manifest("train").input("dataset", input)?;
    if resume { m.set("resume", true) } else { m }.write(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRecord {
    pub fold: usize,
    pub val_dice: f64,
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Predictions {
    pub models: Vec<ModelRecord>,
    pub items: Vec<String>,
}

pub const PREDICTIONS_FILE: &str = "predictions.json";

/// Probability maps of every fold's best model for the selected items,
/// written to `fold<k>/<id>.f32`. `split = None` predicts every item.
pub fn predict(
    ctx: &Ctx,
    models: &Path,
    input: &Path,
    out: &Path,
    split: Option<Split>,
) -> Result<()> {
    let summary: TrainSummary = read_json(&models.join(TRAIN_FILE))?;
    let ds = Dataset::load(input)?;
    let items: Vec<&Item> = ds
        .items
        .iter()
        .filter(|i| split.map_or(true, |s| i.split == s))
        .collect();
    if items.is_empty() {
        return Err(Error::invalid("predict: no items selected"));
    }
    let mut records = Vec::with_capacity(summary.folds.len());
    for f in &summary.folds {
        let net = Checkpoint::load(models.join(&f.checkpoint))?.model()?;
        let dir = format!("fold{}", f.fold);
        create_dir(&out.join(&dir))?;
        par_map(ctx.jobs, &items, |item| {
            let img = read_f32map(require(input, item, "image", &item.image)?)?;
            let map = predict_map(&net, &img)?;
            write_image(&map, &out.join(&dir).join(format!("{}.f32", item.id)))
        })?;
        records.push(ModelRecord {
            fold: f.fold,
            val_dice: f.val_dice,
            dir,
        });
    }
    let preds = Predictions {
        models: records,
        items: items.iter().map(|i| i.id.clone()).collect(),
    };
    write_json(&out.join(PREDICTIONS_FILE), &preds)?;
    let m = ctx
        .manifest("predict")
        .input("models", models)?
        .input("dataset", input)?;
    match split {
        Some(s) => m.set("split", format!("{s:?}").to_lowercase()),
        None => m.set("split", "all"),
    }
    .write(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostprocSummary {
    /// Folds whose maps were combined, best validation Dice first.
    pub selected_folds: Vec<usize>,
    pub items: Vec<String>,
}

/// Binarizes, unions and clears the maps of the `train.ensemble_top` best
/// models (or the single best one with ensembling off); writes `<id>.pgm`.
pub fn postprocess(ctx: &Ctx, input: &Path, out: &Path) -> Result<()> {
    let cfg = &ctx.cfg.postproc;
    if !(cfg.threshold.is_finite() && (0.0..=1.0).contains(&cfg.threshold)) {
        return Err(Error::invalid(format!(
            "threshold must be in [0, 1], got {}",
            cfg.threshold
        )));
    }
    let preds: Predictions = read_json(&input.join(PREDICTIONS_FILE))?;
    let scores: Vec<f64> = preds.models.iter().map(|m| m.val_dice).collect();
    let top = if cfg.ensemble {
        ctx.cfg.train.ensemble_top.min(scores.len())
    } else {
        1
    };
    let chosen = select_top_models(&scores, top)?;
    create_dir(out)?;
    par_map(ctx.jobs, &preds.items, |id| {
        let maps = chosen
            .iter()
            .map(|&m| read_image(&input.join(&preds.models[m].dir).join(format!("{id}.f32"))))
            .collect::<Result<Vec<_>>>()?;
        write_mask_pgm(
            &postprocess_maps(&maps, cfg)?,
            out.join(format!("{id}.pgm")),
        )
    })?;
    let summary = PostprocSummary {
        selected_folds: chosen.iter().map(|&m| preds.models[m].fold).collect(),
        items: preds.items.clone(),
    };
    write_json(&out.join("postprocess.json"), &summary)?;
    ctx.manifest("postprocess")
        .input("predictions", input)?
        .write(out)
}

/// Copies the masks of the items in `split` to `<out>/<id>.pgm`, the layout
/// `evaluate` and `quantify` read.
pub fn export_masks(ctx: &Ctx, input: &Path, out: &Path, split: Split) -> Result<()> {
    let ds = Dataset::load(input)?;
    create_dir(out)?;
    let items: Vec<&Item> = ds.with_split(split).collect();
    par_map(ctx.jobs, &items, |item| {
        let mask = read_mask_pgm(require(input, item, "mask", &item.mask)?)?;
        write_mask_pgm(&mask, out.join(format!("{}.pgm", item.id)))
    })?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSummary {
    pub count: usize,
    pub dice: Summary,
    pub iou: Summary,
    /// Over pairs where both masks are non-empty.
    pub hausdorff: Option<Summary>,
    pub hausdorff_undefined: usize,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Compares `<id>.pgm` masks in `pred` against the same ids in `truth`.
/// Writes `metrics.csv` and `summary.json`; returns the summary.
pub fn evaluate(ctx: &Ctx, pred: &Path, truth: &Path, out: &Path) -> Result<EvalSummary> {
    let ids = pgm_ids(pred)?;
    let truth_ids = pgm_ids(truth)?;
    if ids != truth_ids {
        let only = |a: &[String], b: &[String]| {
            a.iter()
                .filter(|x| !b.contains(x))
                .cloned()
                .collect::<Vec<_>>()
        };
        return Err(Error::invalid(format!(
            "mask sets differ: only in {}: {:?}; only in {}: {:?}",
            pred.display(),
            only(&ids, &truth_ids),
            truth.display(),
            only(&truth_ids, &ids)
        )));
    }
    if ids.is_empty() {
        return Err(Error::invalid(format!(
            "no .pgm masks in {}",
            pred.display()
        )));
    }
    let reports: Vec<MetricReport> = par_map(ctx.jobs, &ids, |id| {
        let name = format!("{id}.pgm");
        evaluate_pair(
            &read_mask_pgm(pred.join(&name))?,
            &read_mask_pgm(truth.join(&name))?,
        )
    })?;
    create_dir(out)?;
    let mut csv = String::from("id,dice,iou,hausdorff\n");
    for (id, r) in ids.iter().zip(&reports) {
        let _ = writeln!(csv, "{id},{},{},{}", r.dice, r.iou, fmt_opt(r.hausdorff));
    }
    let csv_path = out.join("metrics.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let dice: Vec<f64> = reports.iter().map(|r| r.dice).collect();
    let iou: Vec<f64> = reports.iter().map(|r| r.iou).collect();
    let hd: Vec<f64> = reports.iter().filter_map(|r| r.hausdorff).collect();
    let summary = EvalSummary {
        count: ids.len(),
        dice: summarize(&dice).expect("non-empty"),
        iou: summarize(&iou).expect("non-empty"),
        hausdorff: summarize(&hd),
        hausdorff_undefined: ids.len() - hd.len(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    ctx.manifest("evaluate")
        .input("pred", pred)?
        .input("truth", truth)?
        .write(out)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskMorph {
    pub id: String,
    pub report: MorphReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorphFile {
    pub schema_version: u32,
    pub masks: Vec<MaskMorph>,
}

pub const MORPH_FILE: &str = "morph.json";

/// LC, NC and BNR of every component of every `<id>.pgm` in `input`,
/// written to `morph.json` and `morph.csv`.
pub fn quantify(ctx: &Ctx, input: &Path, out: &Path) -> Result<MorphFile> {
    ctx.cfg.quantify.validate()?;
    let ids = pgm_ids(input)?;
    let reports = par_map(ctx.jobs, &ids, |id| {
        quantify_mask(
            &read_mask_pgm(input.join(format!("{id}.pgm")))?,
            &ctx.cfg.quantify,
        )
    })?;
    create_dir(out)?;
    let mut csv = String::from("id,component,area,lc,nc,bnr,units\n");
    for (id, r) in ids.iter().zip(&reports) {
        for c in &r.components {
            let _ = writeln!(
                csv,
                "{id},{},{},{},{},{},{}",
                c.id, c.area, c.lc, c.nc, c.bnr, r.units
            );
        }
    }
    let csv_path = out.join("morph.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let file = MorphFile {
        schema_version: MORPH_SCHEMA_VERSION,
        masks: ids
            .into_iter()
            .zip(reports)
            .map(|(id, report)| MaskMorph { id, report })
            .collect(),
    };
    write_json(&out.join(MORPH_FILE), &file)?;
    ctx.manifest("quantify").input("masks", input)?.write(out)?;
    Ok(file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnrPair {
    pub id: String,
    /// BNR of the largest predicted component; 0 when nothing was segmented.
    pub pred: f64,
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSummary {
    pub test_items: usize,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub bnr_spearman: f64,
    pub bnr: Vec<BnrPair>,
}

fn largest_bnr(m: &MaskMorph) -> f64 {
    m.report.largest().map_or(0.0, |c| c.bnr)
}

/// Runs every stage into subdirectories of `out` and writes `summary.json`
/// with the test-set Dice and the rank correlation of predicted and true
/// BNR (largest component per image).
pub fn pipeline(ctx: &Ctx, out: &Path) -> Result<PipelineSummary> {
    ctx.cfg.validate()?;
    let dir = |name: &str| out.join(name);
    log::info!("synth");
    synth(ctx, &dir("synth"))?;
    log::info!("preprocess");
    preprocess(ctx, &dir("synth"), &dir("preprocess"))?;
    log::info!("augment");
    augment(ctx, &dir("preprocess"), &dir("augment"))?;
    log::info!("train");
    train(ctx, &dir("augment"), &dir("train"), false)?;
    log::info!("predict");
    predict(
        ctx,
        &dir("train"),
        &dir("preprocess"),
        &dir("predict"),
        Some(Split::Test),
    )?;
    postprocess(ctx, &dir("predict"), &dir("postprocess"))?;
    export_masks(ctx, &dir("preprocess"), &dir("truth"), Split::Test)?;
    let eval = evaluate(ctx, &dir("postprocess"), &dir("truth"), &dir("evaluate"))?;
    let pred = quantify(ctx, &dir("postprocess"), &out.join("quantify").join("pred"))?;
    let truth = quantify(ctx, &dir("truth"), &out.join("quantify").join("truth"))?;
    let bnr: Vec<BnrPair> = pred
        .masks
        .iter()
        .zip(&truth.masks)
        .map(|(p, t)| BnrPair {
            id: p.id.clone(),
            pred: largest_bnr(p),
            truth: largest_bnr(t),
        })
        .collect();
    let a: Vec<f64> = bnr.iter().map(|b| b.pred).collect();
    let b: Vec<f64> = bnr.iter().map(|b| b.truth).collect();
    let summary = PipelineSummary {
        test_items: eval.count,
        mean_dice: eval.dice.mean,
        mean_iou: eval.iou.mean,
        bnr_spearman: spearman(&a, &b)?,
        bnr,
    };
    write_json(&out.join("summary.json"), &summary)?;
    ctx.manifest("pipeline").write(out)?;
    log::info!(
        "test Dice {:.4}, BNR Spearman {:.4} over {} images",
        summary.mean_dice,
        summary.bnr_spearman,
        summary.test_items
    );
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order_and_first_error() {
        let items: Vec<usize> = (0..23).collect();
        for jobs in [1, 2, 5, 40] {
            let out = par_map(jobs, &items, |&i| Ok(i * i)).unwrap();
            assert_eq!(out, items.iter().map(|i| i * i).collect::<Vec<_>>());
            let err = par_map(jobs, &items, |&i| {
                if i % 7 == 3 {
                    Err(Error::invalid(format!("bad {i}")))
                } else {
                    Ok(i)
                }
            })
            .unwrap_err();
            assert_eq!(err.to_string(), Error::invalid("bad 3").to_string());
        }
    }
}
