use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use metta::analysis::{
    emit_report, evaluate_grid, interpolate_curve, jitter_stats, retrieval_recall, validate_alphas,
    Endpoint, InterpolationCurve, JitterProfile, RecallRow, Report, ReportFormat,
};
use metta::checks::{group_invariance, jensen_trials, presoftmax_trials};
use metta::data::{gen_shapes_dataset, load_dataset, save_dataset, AugmentationPolicy, Dataset};
use metta::gradcheck;
use metta::inference::{build_index, query_index};
use metta::model::{
    build_backbone, load_checkpoint, save_checkpoint, train_backbone, train_linear_head,
    BackboneConfig, Checkpoint, TrainReport,
};
use metta::tensor::Tensor;
use serde::Serialize;

use crate::config::{DatasetSource, ExperimentConfig};

pub const TRAIN_DATA: &str = "train.mtds";
pub const TEST_DATA: &str = "test.mtds";
pub const BACKBONE: &str = "backbone.mtck";
pub const LINEAR: &str = "linear.mtck";
pub const BACKBONE_LOG: &str = "train_backbone_log.csv";
pub const LINEAR_LOG: &str = "train_linear_log.csv";
pub const EVAL_REPORT: &str = "eval_report.csv";
pub const INTERP_REPORT: &str = "interp_curve.csv";
pub const JITTER_REPORT: &str = "jitter.csv";
pub const JITTER_PROBS: &str = "jitter_probs.csv";
pub const RETRIEVAL_REPORT: &str = "retrieval_report.csv";
pub const GRAD_CHECK_REPORT: &str = "grad_check.csv";

pub const JENSEN_TRIALS: usize = 10_000;
pub const EQUIVALENCE_TRIALS: usize = 1_000;
pub const GRAD_CHECK_INSTANCES: usize = 100;
const SELFTEST_SEED: u64 = 0x5E1F;
const SELFTEST_IMAGES: usize = 20;

/// Output directory and parsed configuration of one invocation.
pub struct Run {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

impl Run {
    pub fn new(
        mut config: ExperimentConfig,
        out: Option<PathBuf>,
        seed: Option<u64>,
    ) -> Result<Self> {
        if let Some(s) = seed {
            config.training.seed = s;
        }
        let out = out.unwrap_or_else(|| config.output_dir.clone());
        fs::create_dir_all(&out)
            .with_context(|| format!("creating output directory {}", out.display()))?;
        Ok(Self { config, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn artifact(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            bail!(
                "missing artifact {}: run `metta {producer}` first",
                p.display()
            );
        }
        Ok(p)
    }

    fn dataset(&self, name: &str) -> Result<Dataset> {
        let p = self.artifact(name, "gen-data")?;
        load_dataset(&p).with_context(|| format!("loading {}", p.display()))
    }

    fn checkpoint(&self, name: &str, producer: &str) -> Result<Checkpoint> {
        let p = self.artifact(name, producer)?;
        load_checkpoint(&p).with_context(|| format!("loading {}", p.display()))
    }

    /// The checkpoint holding the linear evaluation head.
    fn linear(&self) -> Result<Checkpoint> {
        let c = self.checkpoint(LINEAR, "train-linear")?;
        if c.head.is_none() {
            bail!(
                "missing artifact: {} holds no linear head; run `metta train-linear`",
                self.path(LINEAR).display()
            );
        }
        Ok(c)
    }
}

fn wrote(path: &Path) {
    println!("wrote {}", path.display());
}

/// Train and test sets described by the config.
pub fn make_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    Ok(match config.dataset.source()? {
        DatasetSource::Generated {
            seed,
            train_count,
            test_count,
            classes,
            image_size,
        } => (
            gen_shapes_dataset(seed, train_count, classes, image_size)?,
            // held-out images come from a separate stream
            gen_shapes_dataset(metta::rng::mix(seed, &[1]), test_count, classes, image_size)?,
        ),
        DatasetSource::Files { train, test } => (
            load_dataset(&train).with_context(|| format!("loading {}", train.display()))?,
            load_dataset(&test).with_context(|| format!("loading {}", test.display()))?,
        ),
    })
}

pub fn gen_data(ctx: &Run) -> Result<()> {
    let (train, test) = make_datasets(&ctx.config)?;
    for (name, ds) in [(TRAIN_DATA, &train), (TEST_DATA, &test)] {
        save_dataset(ds, ctx.path(name))?;
        wrote(&ctx.path(name));
    }
    Ok(())
}

/// Initializes and trains the backbone from `config.training`.
pub fn fit_backbone(
    config: &ExperimentConfig,
    train: &Dataset,
) -> Result<(Checkpoint, TrainReport)> {
    let t = &config.training;
    let init = build_backbone(&config.backbone.config(train.image_shape()), t.seed)?;
    Ok(train_backbone(
        &init,
        train,
        &t.policy,
        &t.backbone_options(),
    )?)
}

/// Fits the linear head on the frozen backbone and stores it in the result.
pub fn fit_linear(
    config: &ExperimentConfig,
    backbone: &Checkpoint,
    train: &Dataset,
) -> Result<(Checkpoint, TrainReport)> {
    let t = &config.training;
    let (head, report) = train_linear_head(backbone, train, &t.policy, &t.linear_options())?;
    let mut ckpt = backbone.clone();
    ckpt.head = Some(head);
    Ok((ckpt, report))
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    loss: f64,
}

fn write_log(path: &Path, report: &TrainReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (epoch, &loss) in report.epoch_losses.iter().enumerate() {
        w.serialize(LossRow { epoch, loss })?;
    }
    w.flush()?;
    Ok(())
}

pub fn train_backbone_cmd(ctx: &Run) -> Result<()> {
    let train = ctx.dataset(TRAIN_DATA)?;
    let (ckpt, report) = fit_backbone(&ctx.config, &train)?;
    save_checkpoint(&ckpt, ctx.path(BACKBONE))?;
    write_log(&ctx.path(BACKBONE_LOG), &report)?;
    println!(
        "final training loss {:.4}",
        report.final_loss().unwrap_or(f64::NAN)
    );
    wrote(&ctx.path(BACKBONE));
    Ok(())
}

pub fn train_linear_cmd(ctx: &Run) -> Result<()> {
    let train = ctx.dataset(TRAIN_DATA)?;
    let backbone = ctx.checkpoint(BACKBONE, "train-backbone")?;
    let (ckpt, report) = fit_linear(&ctx.config, &backbone, &train)?;
    save_checkpoint(&ckpt, ctx.path(LINEAR))?;
    write_log(&ctx.path(LINEAR_LOG), &report)?;
    println!(
        "final linear loss {:.4}",
        report.final_loss().unwrap_or(f64::NAN)
    );
    wrote(&ctx.path(LINEAR));
    Ok(())
}

pub fn eval_cmd(ctx: &Run) -> Result<()> {
    let ckpt = ctx.linear()?;
    let test = ctx.dataset(TEST_DATA)?;
    let e = &ctx.config.eval;
    let report = evaluate_grid(
        &ckpt,
        ckpt.require_head()?,
        &test,
        &e.methods()?,
        ctx.config.eval_policy(),
        &e.samples,
        e.seed,
    )?;
    for r in &report.rows {
        println!(
            "{:<8} S={:<3} top1 {:.4}  nll {:.4}",
            r.method, r.samples, r.top1, r.nll
        );
    }
    emit_report(&report, ctx.path(EVAL_REPORT), ReportFormat::Csv)?;
    wrote(&ctx.path(EVAL_REPORT));
    Ok(())
}

/// Both endpoint kinds, one after the other.
pub struct Curves(pub Vec<InterpolationCurve>);

impl Report for Curves {
    type Row = metta::analysis::CurveRow;
    const HEADER: &'static [&'static str] = InterpolationCurve::HEADER;

    fn rows(&self) -> Vec<Self::Row> {
        self.0.iter().flat_map(|c| c.rows.clone()).collect()
    }
}

pub fn interp_cmd(ctx: &Run) -> Result<()> {
    let ckpt = ctx.linear()?;
    let test = ctx.dataset(TEST_DATA)?;
    let a = &ctx.config.analysis;
    validate_alphas(&a.alphas)?;
    let curves = [Endpoint::CentralCrop, Endpoint::SingleAugmentation]
        .into_iter()
        .map(|end| {
            interpolate_curve(
                &ckpt,
                ckpt.require_head()?,
                &test,
                end,
                &a.alphas,
                ctx.config.eval_policy(),
                a.samples,
                ctx.config.eval.seed,
            )
        })
        .collect::<metta::Result<Vec<_>>>()?;
    for c in &curves {
        let (first, last) = (&c.rows[0], c.rows.last().expect("alphas validated"));
        println!(
            "{:<20} nll(α=0) {:.4}  nll(α=1) {:.4}",
            c.endpoint, first.nll, last.nll
        );
    }
    emit_report(&Curves(curves), ctx.path(INTERP_REPORT), ReportFormat::Csv)?;
    wrote(&ctx.path(INTERP_REPORT));
    Ok(())
}

pub fn jitter_cmd(ctx: &Run) -> Result<()> {
    let ckpt = ctx.linear()?;
    let test = ctx.dataset(TEST_DATA)?;
    let a = &ctx.config.analysis;
    let subset = test.head(a.jitter_subset.min(test.len()));
    let profile: JitterProfile = jitter_stats(
        &ckpt,
        ckpt.require_head()?,
        &subset,
        ctx.config.eval_policy(),
        a.samples,
        ctx.config.eval.seed,
    )?;
    let flipping = profile
        .images
        .iter()
        .filter(|im| im.argmax_flips > 0)
        .count();
    println!(
        "{flipping} of {} images change argmax across {} samples",
        profile.images.len(),
        a.samples
    );
    emit_report(&profile, ctx.path(JITTER_REPORT), ReportFormat::Csv)?;
    profile.write_probability_dump(ctx.path(JITTER_PROBS))?;
    wrote(&ctx.path(JITTER_REPORT));
    wrote(&ctx.path(JITTER_PROBS));
    Ok(())
}

pub fn retrieve_cmd(ctx: &Run) -> Result<()> {
    let ckpt = ctx.linear()?;
    let test = ctx.dataset(TEST_DATA)?;
    let corpus = test.head(ctx.config.analysis.retrieval_corpus.min(test.len()));
    let seed = ctx.config.eval.seed;
    let multi = AugmentationPolicy::multi_scale_default();
    let single = AugmentationPolicy::MultiScale { scales: vec![1.0] };

    let index = build_index(&ckpt, &corpus, &multi, 1, seed)?;
    for i in 0..corpus.len() {
        let top = query_index(&index, &ckpt, corpus.image(i), &multi, 1)?[0];
        if top.0 != i || (top.1 - 1.0).abs() > 1e-5 {
            bail!("self-retrieval failed for corpus image {i}: got {top:?}");
        }
    }
    println!(
        "self-retrieval rank 1 for all {} corpus images",
        corpus.len()
    );

    let query_policy = ctx.config.eval_policy();
    let rows: Vec<RecallRow> = [&multi, &single]
        .into_iter()
        .map(|p| retrieval_recall(&ckpt, &corpus, p, query_policy, seed))
        .collect::<metta::Result<_>>()?;
    for r in &rows {
        println!("{:<32} recall@1 {:.4}", r.index_policy, r.recall_at_1);
    }
    emit_report(&rows, ctx.path(RETRIEVAL_REPORT), ReportFormat::Csv)?;
    wrote(&ctx.path(RETRIEVAL_REPORT));
    Ok(())
}

pub fn grad_check_cmd(out: Option<&Path>, seed: u64) -> Result<bool> {
    let reports = gradcheck::check_all(GRAD_CHECK_INSTANCES, seed)?;
    let mut ok = true;
    for r in &reports {
        ok &= r.passed();
        println!(
            "{:<24} {} ({} instances, max rel err {:.2e})",
            r.op,
            if r.passed() { "pass" } else { "FAIL" },
            r.instances,
            r.max_rel_error
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let path = dir.join(GRAD_CHECK_REPORT);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["op", "instances", "failures", "max_rel_error"])?;
        for r in &reports {
            w.write_record([
                r.op.to_string(),
                r.instances.to_string(),
                r.failures.to_string(),
                r.max_rel_error.to_string(),
            ])?;
        }
        w.flush()?;
        wrote(&path);
    }
    Ok(ok)
}

pub fn selftest_cmd() -> Result<bool> {
    let mut ok = true;
    let mut line = |name: &str, pass: bool, detail: String| {
        ok &= pass;
        println!("{name:<24} {} {detail}", if pass { "pass" } else { "FAIL" });
    };

    let j = jensen_trials(JENSEN_TRIALS, SELFTEST_SEED)?;
    line(
        "jensen_bound",
        j.violations == 0,
        format!("({} trials, {} violations)", j.trials, j.violations),
    );

    let e = presoftmax_trials(EQUIVALENCE_TRIALS, SELFTEST_SEED)?;
    line(
        "presoftmax_equivalence",
        e.max_abs_diff < 1e-6,
        format!("(max diff {:.2e})", e.max_abs_diff),
    );

    let ckpt = build_backbone(&BackboneConfig::small(1, 32), SELFTEST_SEED)?;
    let ds = gen_shapes_dataset(SELFTEST_SEED, SELFTEST_IMAGES, 4, 32)?;
    let images: Vec<Tensor> = (0..ds.len()).map(|i| ds.image(i).clone()).collect();
    for p in [
        AugmentationPolicy::FlipGroup,
        AugmentationPolicy::Rot90Group,
    ] {
        let s = group_invariance(&ckpt, &images, &p)?;
        line(
            &format!("invariance {}", s.policy),
            s.max_abs_diff < 1e-5,
            format!("(max diff {:.2e})", s.max_abs_diff),
        );
    }
    Ok(ok)
}
