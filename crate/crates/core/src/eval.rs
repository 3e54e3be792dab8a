//! Per-subset evaluation and the kernel-sweep / ablation harnesses.

use std::fmt;

use crate::dataset::{DatasetManifest, ImageStore, Split, Subset};
use crate::error::{Error, Result};
use crate::model::{LogoNetConfig, LogoNetModel};
use crate::retrieval::{acc_at_k, embed_images, rank_with_truth, Gallery, RankedResult};
use crate::tensor::Tensor;
use crate::training::{train, TrainConfig};

/// acc@1/5/10 over one group of queries; accuracies are absent for an
/// empty group.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AccCell {
    pub queries: usize,
    pub acc1: Option<f64>,
    pub acc5: Option<f64>,
    pub acc10: Option<f64>,
}

impl AccCell {
    fn from_results(results: &[RankedResult]) -> Result<Self> {
        if results.is_empty() {
            return Ok(AccCell::default());
        }
        Ok(AccCell {
            queries: results.len(),
            acc1: Some(acc_at_k(results, 1)?),
            acc5: Some(acc_at_k(results, 5)?),
            acc10: Some(acc_at_k(results, 10)?),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub overall: AccCell,
    pub easy: AccCell,
    pub medium: AccCell,
    pub hard: AccCell,
}

impl EvalReport {
    pub fn subset(&self, s: Subset) -> &AccCell {
        match s {
            Subset::Easy => &self.easy,
            Subset::Medium => &self.medium,
            Subset::Hard => &self.hard,
        }
    }

    /// `subset,queries,acc1,acc5,acc10`, empty cells left blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subset,queries,acc1,acc5,acc10\n");
        let cells = [
            ("overall", &self.overall),
            ("easy", &self.easy),
            ("medium", &self.medium),
            ("hard", &self.hard),
        ];
        for (name, c) in cells {
            out.push_str(&format!(
                "{name},{},{},{},{}\n",
                c.queries,
                fmt4(c.acc1),
                fmt4(c.acc5),
                fmt4(c.acc10)
            ));
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>7} {:>7} {:>7} {:>7}",
            "subset", "queries", "acc@1", "acc@5", "acc@10"
        )?;
        let cells = [
            ("overall", &self.overall),
            ("easy", &self.easy),
            ("medium", &self.medium),
            ("hard", &self.hard),
        ];
        for (name, c) in cells {
            let pct = |v: Option<f64>| {
                v.map(|x| format!("{:.2}", 100.0 * x))
                    .unwrap_or_else(|| "-".into())
            };
            writeln!(
                f,
                "{name:<8} {:>7} {:>7} {:>7} {:>7}",
                c.queries,
                pct(c.acc1),
                pct(c.acc5),
                pct(c.acc10)
            )?;
        }
        Ok(())
    }
}

fn fmt4(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// One query: embedding, ground-truth instance and difficulty tier.
pub struct Query<'a> {
    pub embedding: &'a [f32],
    pub truth: &'a str,
    pub subset: Subset,
}

/// Ranks every query against `gallery` and aggregates per subset.
pub fn evaluate_queries(gallery: &Gallery, queries: &[Query<'_>]) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::invalid("evaluate", "no queries"));
    }
    let mut all = Vec::with_capacity(queries.len());
    let mut per: [Vec<RankedResult>; 3] = Default::default();
    for q in queries {
        let r = rank_with_truth(gallery, q.embedding, q.truth)?;
        if r.rank_of_truth.is_none() {
            return Err(Error::invalid(
                "evaluate",
                format!("ground truth {} is not in the gallery", q.truth),
            ));
        }
        per[q.subset as usize].push(r.clone());
        all.push(r);
    }
    Ok(EvalReport {
        overall: AccCell::from_results(&all)?,
        easy: AccCell::from_results(&per[0])?,
        medium: AccCell::from_results(&per[1])?,
        hard: AccCell::from_results(&per[2])?,
    })
}

/// Gallery over every logo of the manifest, from pre-decoded images.
pub fn gallery_from_store(
    model: &LogoNetModel,
    manifest: &DatasetManifest,
    store: &ImageStore,
) -> Result<Gallery> {
    let ids: Vec<String> = manifest
        .logos()
        .iter()
        .map(|l| l.instance_id.clone())
        .collect();
    let images = ids
        .iter()
        .map(|id| store.logo(id).ok_or_else(|| missing(id)))
        .collect::<Result<Vec<_>>>()?;
    Gallery::new(ids, embed_images(model, &images)?, model.fingerprint())
}

fn missing(id: &str) -> Error {
    Error::invalid("evaluate", format!("image {id} was not loaded"))
}

/// Each sketch of `split` queries a gallery of all logos.
pub fn evaluate(
    model: &LogoNetModel,
    manifest: &DatasetManifest,
    store: &ImageStore,
    split: Split,
) -> Result<EvalReport> {
    let sketches: Vec<_> = manifest.sketches_in(split).collect();
    if sketches.is_empty() {
        return Err(Error::invalid(
            "evaluate",
            format!("{split} split is empty"),
        ));
    }
    let gallery = gallery_from_store(model, manifest, store)?;
    let images = sketches
        .iter()
        .map(|s| {
            store
                .sketch(&s.sketch_id)
                .ok_or_else(|| missing(&s.sketch_id))
        })
        .collect::<Result<Vec<&Tensor>>>()?;
    let emb = embed_images(model, &images)?;
    let d = gallery.dim();
    let queries: Vec<Query> = sketches
        .iter()
        .zip(emb.data().chunks_exact(d))
        .map(|(s, e)| Query {
            embedding: e,
            truth: &s.instance_id,
            subset: s.subset,
        })
        .collect();
    evaluate_queries(&gallery, &queries)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub kernel: usize,
    pub report: EvalReport,
}

pub const SWEEP_HEADER: &str = "kernel,acc1,acc5,acc10";
pub const ABLATION_HEADER: &str = "baseline,ca,sa,large_kernel,acc1,acc5,acc10";

/// Kernel used when the large-kernel toggle is off.
pub const SMALL_KERNEL: usize = 3;

/// Everything one harness cell needs besides the config under test.
pub struct Experiment<'a> {
    pub manifest: &'a DatasetManifest,
    pub store: &'a ImageStore,
    pub train: &'a TrainConfig,
    /// Seed for weight initialization, shared by every cell.
    pub init_seed: u64,
}

impl Experiment<'_> {
    /// Trains a fresh model for `config` and evaluates it on the test split.
    pub fn run_cell(&self, config: LogoNetConfig) -> Result<EvalReport> {
        let model = LogoNetModel::init(config, self.init_seed)?;
        let (model, _) = train(model, self.manifest, self.store, self.train)?;
        evaluate(&model, self.manifest, self.store, Split::Test)
    }
}

/// One trained model per kernel size, identical seeds and data otherwise.
pub fn kernel_sweep(
    base: &LogoNetConfig,
    kernels: &[usize],
    exp: &Experiment<'_>,
) -> Result<Vec<SweepRow>> {
    if let Some(k) = kernels.iter().find(|k| !(1..=9).contains(*k)) {
        return Err(Error::invalid(
            "kernel_sweep",
            format!("kernel {k} outside 1..=9"),
        ));
    }
    kernels
        .iter()
        .map(|&kernel| {
            log::info!("sweep: kernel {kernel}");
            let cfg = LogoNetConfig {
                first_kernel: kernel,
                ..base.clone()
            };
            let report = exp
                .run_cell(cfg)
                .map_err(|e| annotate(format!("kernel {kernel}"), e))?;
            Ok(SweepRow { kernel, report })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let o = &r.report.overall;
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.kernel,
            fmt4(o.acc1),
            fmt4(o.acc5),
            fmt4(o.acc10)
        ));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationToggles {
    pub ca: bool,
    pub sa: bool,
    pub large_kernel: bool,
}

impl AblationToggles {
    /// The eight cells in table order: none, CA, SA, LK, CA+SA, CA+LK,
    /// SA+LK, all.
    pub const GRID: [AblationToggles; 8] = [
        AblationToggles::new(false, false, false),
        AblationToggles::new(true, false, false),
        AblationToggles::new(false, true, false),
        AblationToggles::new(false, false, true),
        AblationToggles::new(true, true, false),
        AblationToggles::new(true, false, true),
        AblationToggles::new(false, true, true),
        AblationToggles::new(true, true, true),
    ];

    pub const fn new(ca: bool, sa: bool, large_kernel: bool) -> Self {
        AblationToggles {
            ca,
            sa,
            large_kernel,
        }
    }

    /// `base` with attention restricted to the enabled masks and the first
    /// kernel reset to [`SMALL_KERNEL`] when the large kernel is off.
    pub fn apply(&self, base: &LogoNetConfig) -> LogoNetConfig {
        let mut cfg = base.clone().with_attention_toggles(self.ca, self.sa);
        if !self.large_kernel {
            cfg.first_kernel = SMALL_KERNEL;
        }
        cfg
    }
}

impl fmt::Display for AblationToggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = vec!["baseline"];
        if self.ca {
            parts.push("CA");
        }
        if self.sa {
            parts.push("SA");
        }
        if self.large_kernel {
            parts.push("LK");
        }
        f.write_str(&parts.join("+"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub toggles: AblationToggles,
    pub report: EvalReport,
}

pub fn ablate(base: &LogoNetConfig, exp: &Experiment<'_>) -> Result<Vec<AblationRow>> {
    AblationToggles::GRID
        .iter()
        .map(|&toggles| {
            log::info!("ablation: {toggles}");
            let report = exp
                .run_cell(toggles.apply(base))
                .map_err(|e| annotate(format!("ablation row {toggles}"), e))?;
            Ok(AblationRow { toggles, report })
        })
        .collect()
}

/// Every row is built on the plain triple-branch network, so the baseline
/// column is always 1.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let b = |v: bool| u8::from(v);
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let o = &r.report.overall;
        let t = r.toggles;
        out.push_str(&format!(
            "1,{},{},{},{},{},{}\n",
            b(t.ca),
            b(t.sa),
            b(t.large_kernel),
            fmt4(o.acc1),
            fmt4(o.acc5),
            fmt4(o.acc10)
        ));
    }
    out
}

fn annotate(context: String, e: Error) -> Error {
    Error::InvalidArgument {
        op: "experiment",
        msg: format!("{context}: {e}"),
    }
}
