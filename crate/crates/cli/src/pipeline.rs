use std::fs;
use std::path::{Path, PathBuf};

use mirror_core::backends::Backends;
use mirror_core::config::{BackendMode, Config};
use mirror_core::dataset::{
    adapt_trajectories, build_chain, convert_chain, dialogue_funnel, filter_dialogue, parallel_map, simulate_dialogue,
    verify_stage, ChainOutcome, ChainStage, DatasetSample, DialogueRecord, FilterDecision, FunnelReport, ImageStore,
    PipelineConfig, PipelineError, PipelineItem, SourceSample, IMAGE_DIR,
};
use mirror_core::export::{export_sft, ExportError, MANIFEST_FILE, SFT_FILE};
use mirror_core::render::{decode_image, encode_png};

use crate::session::{read_jsonl, runtime, usage, write_jsonl, CliError, Session};
use crate::{PipelineArgs, Stage};

/// Per-record result of a stage.
enum Outcome<T> {
    Done(T),
    /// Written out, but the record is incomplete.
    Partial(T, String),
    /// The record does not fit this stage.
    Input(String),
    Failed(String),
}

struct Ctx<'a> {
    cfg: &'a Config,
    pcfg: PipelineConfig,
    shared: Option<Backends>,
    in_dir: PathBuf,
    out: PathBuf,
    jobs: usize,
}

impl Ctx<'_> {
    /// Mock backends are rebuilt per record so every record replays the
    /// scripted fixtures from the top, whatever the thread count.
    fn backends(&self) -> Result<Backends, PipelineError> {
        match &self.shared {
            Some(b) => Ok(b.clone()),
            None => self.cfg.backends().map_err(|e| PipelineError::InvalidConfig(e.to_string())),
        }
    }

    fn store(&self) -> ImageStore {
        ImageStore::new(&self.in_dir, &self.out)
    }
}

fn classify<T>(line: usize, e: PipelineError) -> Outcome<T> {
    match e {
        PipelineError::Precondition(_) | PipelineError::Image { .. } => Outcome::Input(format!("line {line}: {e}")),
        other => Outcome::Failed(format!("line {line}: {other}")),
    }
}

/// Keeps finished records in input order and turns per-record problems
/// into the command's exit status.
fn settle<T>(s: &mut Session, outcomes: Vec<Outcome<T>>) -> (Vec<T>, Result<(), CliError>) {
    let mut kept = Vec::with_capacity(outcomes.len());
    let mut input_error = None;
    let mut failed = 0;
    for o in outcomes {
        match o {
            Outcome::Done(v) => kept.push(v),
            Outcome::Partial(v, msg) => {
                s.error(msg);
                failed += 1;
                kept.push(v);
            }
            Outcome::Input(msg) => {
                s.error(msg.clone());
                input_error.get_or_insert(msg);
            }
            Outcome::Failed(msg) => {
                s.error(msg);
                failed += 1;
            }
        }
    }
    let status = match (input_error, failed) {
        (Some(msg), _) => Err(usage(msg)),
        (None, 0) => Ok(()),
        (None, n) => Err(runtime(format!("{n} record(s) failed"))),
    };
    (kept, status)
}

/// Copies the input directory's images next to the output so references
/// stay valid there.
fn carry_images(in_dir: &Path, out: &Path) -> Result<(), CliError> {
    let src = in_dir.join(IMAGE_DIR);
    if !src.is_dir() {
        return Ok(());
    }
    let dst = out.join(IMAGE_DIR);
    if let (Ok(a), Ok(b)) = (fs::canonicalize(&src), fs::canonicalize(&dst)) {
        if a == b {
            return Ok(());
        }
    }
    fs::create_dir_all(&dst).map_err(|e| runtime(e.to_string()))?;
    for entry in fs::read_dir(&src).map_err(|e| runtime(e.to_string()))? {
        let entry = entry.map_err(|e| runtime(e.to_string()))?;
        let target = dst.join(entry.file_name());
        if entry.path().is_file() && !target.exists() {
            fs::copy(entry.path(), target).map_err(|e| runtime(e.to_string()))?;
        }
    }
    Ok(())
}

pub fn cmd_pipeline(args: PipelineArgs, s: &mut Session) -> Result<(), CliError> {
    let cfg = s.load_config(args.config.as_deref())?;
    let mut pcfg = cfg.pipeline_config();
    if let Some(seed) = args.seed {
        pcfg.seed = seed;
    }
    pcfg.check().map_err(|e| usage(format!("--config: {e}")))?;
    s.manifest.seed = Some(pcfg.seed);
    s.input(&args.input);

    let out = s.out_dir()?.to_path_buf();
    fs::create_dir_all(&out).map_err(|e| runtime(format!("--out: {e}")))?;
    let in_dir = match args.input.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let shared = match cfg.endpoints.mode {
        BackendMode::Http => Some(cfg.backends().map_err(|e| usage(format!("--config: {e}")))?),
        BackendMode::Mock => None,
    };
    let jobs = args.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let ctx = Ctx { cfg: &cfg, pcfg, shared, in_dir, out: out.clone(), jobs };

    if args.stage != Stage::Simulate && args.stage != Stage::Export {
        carry_images(&ctx.in_dir, &out)?;
    }
    let target = out.join(format!("{}.jsonl", args.stage.name()));
    let status = match args.stage {
        Stage::Simulate => simulate(&ctx, &args.input, &target, s),
        Stage::Filter => filter(&args.input, &target, s),
        Stage::Ground => ground(&ctx, &args.input, &target, s),
        Stage::Convert | Stage::Verify => refine(&ctx, args.stage, &args.input, &target, s),
        Stage::Adapt => adapt(&ctx, &args.input, &target, s),
        Stage::Export => export(&ctx, &args.input, s),
    };
    if let Some(f) = &s.manifest.funnel {
        print!("{}", f.to_table());
    }
    status
}

fn simulate(ctx: &Ctx, input: &Path, target: &Path, s: &mut Session) -> Result<(), CliError> {
    let samples: Vec<(usize, SourceSample)> = read_jsonl(input)?;
    for (line, sample) in &samples {
        sample.check().map_err(|e| usage(format!("line {line}: {e}")))?;
    }
    let store = ctx.store();
    let outcomes = parallel_map(&samples, ctx.jobs, |(line, sample)| {
        let normalized = store.load(&sample.image).and_then(|bytes| {
            let img = decode_image(&bytes).map_err(|e| PipelineError::Image { reference: sample.image.clone(), reason: e.to_string() })?;
            let png = encode_png(&img).map_err(|e| PipelineError::Image { reference: sample.image.clone(), reason: e.to_string() })?;
            let reference = store.save(&format!("{}.png", sample.id), &png)?;
            Ok((reference, png))
        });
        let (reference, png) = match normalized {
            Ok(v) => v,
            Err(e) => return classify(*line, e),
        };
        let backends = match ctx.backends() {
            Ok(b) => b,
            Err(e) => return classify(*line, e),
        };
        let source = SourceSample { image: reference, ..sample.clone() };
        match simulate_dialogue(&source, &png, &backends, &ctx.cfg.prompts, ctx.pcfg.max_teacher_rounds) {
            Ok(record) => Outcome::Done(record),
            Err(e) => Outcome::Partial(*e.partial, format!("line {line}: {}", e.source)),
        }
    });
    let (records, status) = settle(s, outcomes);
    write_jsonl(target, &records)?;
    s.output(target);
    let mut funnel = FunnelReport::default();
    funnel.push("sources", samples.len());
    funnel.push("complete", records.iter().filter(|r| !r.incomplete).count());
    s.manifest.funnel = Some(funnel);
    status
}

fn read_records(input: &Path) -> Result<Vec<(usize, DialogueRecord)>, CliError> {
    let records: Vec<(usize, DialogueRecord)> = read_jsonl(input)?;
    for (line, r) in &records {
        r.check().map_err(|e| usage(format!("line {line}: {e}")))?;
    }
    Ok(records)
}

fn filter(input: &Path, target: &Path, s: &mut Session) -> Result<(), CliError> {
    let records: Vec<DialogueRecord> = read_records(input)?.into_iter().map(|(_, r)| r).collect();
    let kept: Vec<&DialogueRecord> = records.iter().filter(|r| filter_dialogue(r) == FilterDecision::Keep).collect();
    write_jsonl(target, &kept)?;
    s.output(target);
    s.manifest.funnel = Some(dialogue_funnel(&records));
    Ok(())
}

fn item_funnel(input: usize, items: &[PipelineItem]) -> FunnelReport {
    let mut f = FunnelReport::default();
    f.push("input", input);
    f.push("chains", items.iter().filter(|i| matches!(i, PipelineItem::Chain(_))).count());
    for item in items {
        if let PipelineItem::Failed(fr) = item {
            f.reject(fr.reason.as_str());
        }
    }
    f
}

fn ground(ctx: &Ctx, input: &Path, target: &Path, s: &mut Session) -> Result<(), CliError> {
    let records = read_records(input)?;
    let store = ImageStore::at(&ctx.out);
    let outcomes = parallel_map(&records, ctx.jobs, |(line, record)| {
        let built = ctx
            .backends()
            .and_then(|b| build_chain(record, &ctx.pcfg, &ctx.cfg.prompts, &b, &store));
        match built {
            Ok(o) => Outcome::Done(PipelineItem::from(o)),
            Err(e) => classify(*line, e),
        }
    });
    let (items, status) = settle(s, outcomes);
    write_jsonl(target, &items)?;
    s.output(target);
    s.manifest.funnel = Some(item_funnel(records.len(), &items));
    status
}

/// The convert and verify stages: chains move one stage forward or drop
/// to the failed pool; failed records pass through unchanged.
fn refine(ctx: &Ctx, stage: Stage, input: &Path, target: &Path, s: &mut Session) -> Result<(), CliError> {
    let items: Vec<(usize, PipelineItem)> = read_jsonl(input)?;
    let store = ImageStore::at(&ctx.out);
    let outcomes = parallel_map(&items, ctx.jobs, |(line, item)| {
        let chain = match item {
            PipelineItem::Failed(_) => return Outcome::Done(item.clone()),
            PipelineItem::Chain(c) => c.clone(),
        };
        let result: Result<ChainOutcome, PipelineError> = ctx.backends().and_then(|b| match stage {
            Stage::Convert => convert_chain(chain, &ctx.pcfg, &ctx.cfg.prompts, b.chat.as_ref()),
            _ => verify_stage(chain, b.judge.as_ref(), &store),
        });
        match result {
            Ok(o) => Outcome::Done(PipelineItem::from(o)),
            Err(e) => classify(*line, e),
        }
    });
    let (out_items, status) = settle(s, outcomes);
    write_jsonl(target, &out_items)?;
    s.output(target);
    s.manifest.funnel = Some(item_funnel(items.len(), &out_items));
    status
}

fn adapt(ctx: &Ctx, input: &Path, target: &Path, s: &mut Session) -> Result<(), CliError> {
    let items: Vec<(usize, PipelineItem)> = read_jsonl(input)?;
    let mut verified = Vec::new();
    let mut failed = Vec::new();
    for (line, item) in items {
        match item {
            PipelineItem::Chain(c) if c.stage == ChainStage::Verified => verified.push(c),
            PipelineItem::Chain(c) => {
                return Err(usage(format!("line {line}: chain {} has not been verified", c.source.id)));
            }
            PipelineItem::Failed(f) => failed.push(f),
        }
    }
    let n = verified.len() + failed.len();
    let adapted = adapt_trajectories(verified, failed, &ctx.pcfg).map_err(|e| usage(e.to_string()))?;
    if let Some(w) = adapted.warning {
        s.warn(format!("only {} verified chain(s) for a multi-turn target of {}", w.available, w.target));
    }
    write_jsonl(target, &adapted.samples)?;
    s.output(target);
    let mut f = FunnelReport::default();
    f.push("input", n);
    f.push("reflective_chain", adapted.multi_turn_count());
    f.push("truncated_qa", n - adapted.multi_turn_count());
    s.manifest.funnel = Some(f);
    Ok(())
}

fn export(ctx: &Ctx, input: &Path, s: &mut Session) -> Result<(), CliError> {
    let samples: Vec<DatasetSample> = read_jsonl(input)?.into_iter().map(|(_, v)| v).collect();
    let store = ImageStore::at(&ctx.in_dir);
    let manifest = export_sft(&samples, &store, &ctx.cfg.prompts, &ctx.out).map_err(|e| match e {
        ExportError::Io(_) => runtime(e.to_string()),
        other => usage(other.to_string()),
    })?;
    s.output(&ctx.out.join(SFT_FILE));
    s.output(&ctx.out.join(MANIFEST_FILE));
    let mut f = FunnelReport::default();
    f.push("samples", manifest.records);
    for (kind, n) in &manifest.counts {
        f.push(kind.clone(), *n);
    }
    s.manifest.funnel = Some(f);
    println!("exported {} record(s), {} image(s)", manifest.records, manifest.images);
    Ok(())
}
