use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use milgrade::baseline::{load_probe, predict_slide, save_probe, train_probe, PatchDataset};
use milgrade::data::{
    coords_to_bytes, extract_labeled_patches, extract_tissue_patches, patch_labels_to_bytes,
    read_bag, read_cohort, read_manifest, read_patch_labels, synth_generate, tissue_fraction_in,
    write_cohort, GrayImage, Remainder, RgbImage, SlideRecord, SyntheticSpec,
};
use milgrade::heatmap::{render_attention_map, HeatmapSpec};
use milgrade::metrics::{cohen_kappa, confusion, weighted_f1};
use milgrade::mil::{load_checkpoint, predict, save_checkpoint, Bag, MilConfig};
use milgrade::training::{
    cross_validate_mil, cross_validate_vote, patient_holdout, train_mil, CvOptions, EpochLog,
    TrainConfig,
};
use milgrade::{PATCH_CLASSES, SLIDE_CLASSES};

use crate::{
    Arm, Cli, Command, CvArgs, EvalArgs, ExtractArgs, HeatmapArgs, ModelFlags, SynthArgs,
    TrainMilArgs, TrainProbeArgs, Usage, VoteEvalArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let threads = threads_from_env()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("starting worker pool")?;
    match cli.command {
        Command::Extract(a) => extract(a),
        Command::Synth(a) => synth(a),
        Command::TrainProbe(a) => train_probe_cmd(a),
        Command::TrainMil(a) => train_mil_cmd(a),
        Command::Cv(a) => cv(a, threads),
        Command::Eval(a) => eval(a),
        Command::VoteEval(a) => vote_eval(a),
        Command::Heatmap(a) => heatmap(a),
    }
}

/// `MILGRADE_THREADS`; absent or 0 means one worker per core.
fn threads_from_env() -> Result<usize> {
    match std::env::var("MILGRADE_THREADS") {
        Err(_) => Ok(0),
        Ok(v) if v.trim().is_empty() => Ok(0),
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Usage(format!("MILGRADE_THREADS must be a count, got {v:?}")).into()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_error(path, e))?;
    Ok(())
}

fn io_error(path: &Path, e: std::io::Error) -> milgrade::Error {
    milgrade::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn log_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{}\n", EpochLog::csv_header());
    for l in log {
        out.push_str(&l.csv_row());
        out.push('\n');
    }
    out
}

fn mil_config(dim: usize, m: &ModelFlags) -> MilConfig {
    MilConfig {
        input_dim: dim,
        proj_dim: m.proj_dim,
        attn_dim: m.attn_dim,
        proj_activation: m.activation,
        ..MilConfig::new(dim)
    }
}

fn cohort_dim(bags: &[Bag], root: &Path) -> Result<usize> {
    let first = bags
        .first()
        .ok_or_else(|| milgrade::Error::Data(format!("{}: cohort is empty", root.display())))?;
    Ok(first.dim())
}

fn read_patch_label_map(
    records: &[SlideRecord],
    root: &Path,
) -> Result<BTreeMap<String, Vec<Option<u8>>>> {
    let mut map = BTreeMap::new();
    for r in records {
        if let Some(labels) = read_patch_labels(r, root)? {
            map.insert(r.slide_id.clone(), labels);
        }
    }
    Ok(map)
}

fn select(bags: &[Bag], ids: &[String]) -> Vec<Bag> {
    let keep: HashSet<&str> = ids.iter().map(String::as_str).collect();
    bags.iter()
        .filter(|b| keep.contains(b.slide_id.as_str()))
        .cloned()
        .collect()
}

fn extract(a: ExtractArgs) -> Result<()> {
    let image = RgbImage::read(&a.image)?;
    let mut csv = String::from("x,y,label,tissue_fraction\n");
    let coords = match &a.mask {
        Some(mask_path) => {
            let mask = GrayImage::read(mask_path)?;
            let patches = extract_labeled_patches(&image, &mask, a.patch_size, a.tissue_min)?;
            for p in &patches {
                let _ = writeln!(
                    csv,
                    "{},{},{},{:.6}",
                    p.coord.x, p.coord.y, PATCH_CLASSES[p.label as usize], p.tissue_fraction
                );
            }
            let labels: Vec<Option<u8>> = patches.iter().map(|p| Some(p.label)).collect();
            let coords: Vec<_> = patches.iter().map(|p| p.coord).collect();
            if !patches.is_empty() {
                fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
                let path = a.out.join("labels.fplb");
                fs::write(&path, patch_labels_to_bytes(&labels)?)
                    .map_err(|e| io_error(&path, e))?;
            }
            coords
        }
        None => {
            let coords = extract_tissue_patches(&image, a.patch_size, a.tissue_min)?;
            for c in &coords {
                let frac =
                    tissue_fraction_in(&image, c.x as u32, c.y as u32, a.patch_size, a.patch_size);
                let _ = writeln!(csv, "{},{},,{frac:.6}", c.x, c.y);
            }
            coords
        }
    };
    write_text(&a.out.join("patches.csv"), &csv)?;
    if !coords.is_empty() {
        let path = a.out.join("coords.fcoo");
        fs::write(&path, coords_to_bytes(&coords)?).map_err(|e| io_error(&path, e))?;
    }
    println!("{} patches from {}", coords.len(), a.image.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_slides: a.slides,
        dim: a.dim,
        patches_per_slide: (a.min_patches, a.max_patches),
        predominant_fraction: (a.min_fraction, a.max_fraction),
        class_separation: a.separation,
        noise_sigma: a.noise,
        class_weights: None,
        remainder: match a.confuser {
            Some(mimic) => Remainder::SharedConfuser { mimic },
            None => Remainder::OtherClasses,
        },
        patch_size: a.patch_size,
        seed: a.seed,
    };
    let cohort = synth_generate(&spec)?;
    let records = write_cohort(&a.out, &cohort.bags, Some(&cohort.patch_labels))?;
    println!("{} slides written to {}", records.len(), a.out.display());
    Ok(())
}

fn train_probe_cmd(a: TrainProbeArgs) -> Result<()> {
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        max_epochs: a.train.max_epochs,
        patience: a.patience,
        seed: a.train.seed,
        val_fraction: a.train.val_fraction,
        ..TrainConfig::probe()
    };
    cfg.validate()?;
    println!(
        "train-probe: lr={:e} batch={} patience={} max_epochs={} seed={}",
        cfg.learning_rate, cfg.batch_size, cfg.patience, cfg.max_epochs, cfg.seed
    );
    let (records, bags) = read_cohort(&a.data)?;
    let labels = read_patch_label_map(&records, &a.data)?;
    let (train_ids, val_ids) = patient_holdout(&records, cfg.val_fraction, cfg.seed)?;
    let train = PatchDataset::from_bags(&select(&bags, &train_ids), &labels, |_| true)?;
    let val = PatchDataset::from_bags(&select(&bags, &val_ids), &labels, |_| true)?;
    let (probe, log) = train_probe(&train, &val, &cfg)?;
    save_probe(&probe, &a.out)?;
    if let Some(path) = &a.log {
        write_text(path, &log_csv(&log))?;
    }
    report_best(&log);
    Ok(())
}

fn report_best(log: &[EpochLog]) {
    if let Some(last) = log.last() {
        let best = &log[last.best_epoch];
        println!(
            "stopped after epoch {}; best epoch {} val_loss={:.6}",
            last.epoch, best.epoch, best.val_loss
        );
    }
}

fn train_mil_cmd(a: TrainMilArgs) -> Result<()> {
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        max_epochs: a.train.max_epochs,
        patience: a.patience,
        seed: a.train.seed,
        val_fraction: a.train.val_fraction,
        ..TrainConfig::mil()
    };
    cfg.validate()?;
    println!(
        "train-mil: lr={:e} batch={} patience={} max_epochs={} seed={} proj_dim={} attn_dim={} activation={}",
        cfg.learning_rate,
        cfg.batch_size,
        cfg.patience,
        cfg.max_epochs,
        cfg.seed,
        a.model.proj_dim,
        a.model.attn_dim,
        a.model.activation
    );
    let (records, bags) = read_cohort(&a.bags)?;
    let config = mil_config(cohort_dim(&bags, &a.bags)?, &a.model);
    let (train_ids, val_ids) = patient_holdout(&records, cfg.val_fraction, cfg.seed)?;
    let (params, log) = train_mil(
        &select(&bags, &train_ids),
        &select(&bags, &val_ids),
        config,
        &cfg,
    )?;
    save_checkpoint(&params, &a.out)?;
    if let Some(path) = &a.log {
        write_text(path, &log_csv(&log))?;
    }
    report_best(&log);
    Ok(())
}

fn cv(a: CvArgs, threads: usize) -> Result<()> {
    let base = match a.arm {
        Arm::Mil => TrainConfig::mil(),
        Arm::Vote => TrainConfig::probe(),
    };
    let cfg = TrainConfig {
        learning_rate: a.lr.unwrap_or(base.learning_rate),
        batch_size: a.batch.unwrap_or(base.batch_size),
        patience: a.patience.unwrap_or(base.patience),
        max_epochs: a.train.max_epochs,
        seed: a.train.seed,
        val_fraction: a.train.val_fraction,
        ..base
    };
    cfg.validate()?;
    let opts = CvOptions {
        k: a.k,
        seed: a.train.seed,
        threads,
    };
    let (records, bags) = read_cohort(&a.bags)?;
    let report = match a.arm {
        Arm::Mil => {
            let config = mil_config(cohort_dim(&bags, &a.bags)?, &a.model);
            cross_validate_mil(&bags, &opts, config, &cfg)?
        }
        Arm::Vote => {
            let labels = read_patch_label_map(&records, &a.bags)?;
            cross_validate_vote(&bags, &labels, &opts, &cfg)?
        }
    };
    write_text(&a.report, &report.to_csv())?;
    if let Some(path) = &a.plan {
        write_text(path, &report.plan.to_json())?;
    }
    if let Some(dir) = &a.logs {
        for f in &report.folds {
            write_text(&dir.join(format!("fold{}.csv", f.fold)), &log_csv(&f.log))?;
        }
    }
    let title = match a.arm {
        Arm::Mil => "attention MIL",
        Arm::Vote => "probe + majority vote",
    };
    print!("{}", report.table(title));
    Ok(())
}

fn write_predictions(path: &Path, bags: &[Bag], preds: &[usize]) -> Result<()> {
    let mut csv = String::from("slide_id,label,predicted\n");
    for (b, &p) in bags.iter().zip(preds) {
        let label = b.label.map_or("", |l| SLIDE_CLASSES[l]);
        let _ = writeln!(csv, "{},{label},{}", b.slide_id, SLIDE_CLASSES[p]);
    }
    write_text(path, &csv)?;
    let labeled: Vec<(usize, usize)> = bags
        .iter()
        .zip(preds)
        .filter_map(|(b, &p)| b.label.map(|l| (l, p)))
        .collect();
    if !labeled.is_empty() {
        let (truth, pred): (Vec<usize>, Vec<usize>) = labeled.into_iter().unzip();
        let cm = confusion(&truth, &pred, SLIDE_CLASSES.len())?;
        println!(
            "{} labeled slides: weighted_f1={:.3} kappa={:.3}",
            truth.len(),
            weighted_f1(&cm),
            cohen_kappa(&cm)
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let params = load_checkpoint(&a.model)?;
    let (_, bags) = read_cohort(&a.bags)?;
    let preds = bags
        .iter()
        .map(|b| predict(&params, b).map(|p| p.class))
        .collect::<milgrade::Result<Vec<_>>>()?;
    write_predictions(&a.report, &bags, &preds)
}

fn vote_eval(a: VoteEvalArgs) -> Result<()> {
    let probe = load_probe(&a.probe)?;
    let (_, bags) = read_cohort(&a.bags)?;
    let preds = bags
        .iter()
        .map(|b| predict_slide(&probe, b).map(|(c, _)| c))
        .collect::<milgrade::Result<Vec<_>>>()?;
    write_predictions(&a.report, &bags, &preds)
}

fn heatmap(a: HeatmapArgs) -> Result<()> {
    let spec = HeatmapSpec {
        target: a.target,
        cell: a.cell,
        percentiles: (a.p_low, a.p_high),
    };
    if !(0.0..=100.0).contains(&a.p_low) || !(0.0..=100.0).contains(&a.p_high) || a.p_low > a.p_high
    {
        return Err(Usage(format!(
            "percentiles must be ordered in [0, 100], got {} and {}",
            a.p_low, a.p_high
        ))
        .into());
    }
    let params = load_checkpoint(&a.model)?;
    let records = read_manifest(&a.bags)?;
    let record = records
        .iter()
        .find(|r| r.slide_id == a.slide)
        .ok_or_else(|| {
            milgrade::Error::Data(format!("slide {} not in {}", a.slide, a.bags.display()))
        })?;
    let bag = read_bag(record, &a.bags)?;
    let map = render_attention_map(&params, &bag, &spec)?;
    fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    map.raster.write(&a.out.join(format!("{}.pgm", a.slide)))?;
    write_text(&a.out.join(format!("{}.csv", a.slide)), &map.csv)?;
    println!(
        "{}: {} patches, class {}, {}x{} raster",
        a.slide,
        bag.len(),
        SLIDE_CLASSES[map.class],
        map.raster.width,
        map.raster.height
    );
    Ok(())
}
