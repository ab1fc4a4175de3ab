use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fieldscope::textfmt::{write_message, write_record};
use fieldscope::{load_corpus, load_json, load_script, load_truth, report, serialize_truth, to_json, Corpus};
use fieldscope_core::eval::score_corpus;
use fieldscope_core::pipeline::{extract_all, generate_traces, infer_all, refine_all, run_pipeline, PipelineConfig, RefinementToggles};
use fieldscope_core::semantics::{list_rules, CorpusAnnotations, DetectorConfig, Rule};
use fieldscope_core::template::{build_template, render_text};
use fieldscope_core::vm::{bundled, Termination, DEFAULT_STEP_BUDGET};
use fieldscope_core::{AlignmentParams, FormatResult, Message};

/// Field boundary and semantic inference from byte-level taint traces.
#[derive(Parser, Debug)]
#[command(name = "fieldscope", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run a parser script over messages and write a trace file.
    GenerateTraces(GenerateArgs),
    /// Segment every message into fields (JSON list of formats).
    Extract {
        corpus: PathBuf,
        #[command(flatten)]
        seg: SegArgs,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run the semantic detectors over extracted formats.
    Infer {
        corpus: PathBuf,
        #[arg(long)]
        formats: PathBuf,
        #[command(flatten)]
        det: DetectArgs,
        /// Also print the per-field rule listing to stderr.
        #[arg(long)]
        explain: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Cluster, entropy-refine and constraint-refine annotations.
    Refine {
        corpus: PathBuf,
        #[arg(long)]
        formats: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[command(flatten)]
        align: AlignArgs,
        #[command(flatten)]
        toggles: ToggleArgs,
        /// Write the refinement audit log (JSON lines).
        #[arg(long)]
        audit: Option<PathBuf>,
        /// Write the chosen clustering (JSON).
        #[arg(long)]
        clustering: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Score formats (and optionally annotations) against ground truth.
    Score {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        formats: PathBuf,
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Row label in the summary table.
        #[arg(long, default_value = "corpus")]
        name: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Full pipeline; writes every intermediate report into a directory.
    Run(RunArgs),
    /// Turn final annotations into a fuzzer template.
    ExportTemplate {
        corpus: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value = "template")]
        name: String,
        /// Emit JSON instead of the line format.
        #[arg(long)]
        json: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// List the detector rules.
    ListRules,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Bundled parser name (dnp3_like, text_kv) or path to a script file.
    #[arg(long)]
    parser: String,
    /// Take messages from this interchange file instead of the generator.
    #[arg(long)]
    messages: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_STEP_BUDGET)]
    step_budget: u64,
    /// Where to write generator ground truth.
    #[arg(long)]
    truth_out: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct AlignArgs {
    #[arg(long, default_value_t = -2, allow_hyphen_values = true)]
    gap: i64,
    #[arg(long = "match", default_value_t = 1, allow_hyphen_values = true)]
    match_score: i64,
    #[arg(long, default_value_t = -1, allow_hyphen_values = true)]
    mismatch: i64,
    #[arg(long, default_value_t = 0.8)]
    threshold: f64,
}

impl AlignArgs {
    fn params(&self) -> AlignmentParams {
        AlignmentParams {
            gap_score: self.gap,
            match_score: self.match_score,
            mismatch_score: self.mismatch,
            similarity_threshold: self.threshold,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct SegArgs {
    #[command(flatten)]
    align: AlignArgs,
    /// One-instruction-one-field segmentation.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args, Debug, Clone)]
struct DetectArgs {
    /// Disable a detector rule by id (see list-rules); repeatable.
    #[arg(long = "disable-rule", value_name = "RULE")]
    disable: Vec<String>,
}

impl DetectArgs {
    fn config(&self) -> Result<DetectorConfig> {
        let mut disabled = std::collections::BTreeSet::new();
        for id in &self.disable {
            disabled.insert(Rule::from_id(id).with_context(|| format!("unknown rule `{id}`"))?);
        }
        Ok(DetectorConfig { disabled })
    }
}

#[derive(Args, Debug, Clone)]
struct ToggleArgs {
    #[arg(long)]
    no_clustering: bool,
    #[arg(long)]
    no_entropy: bool,
    #[arg(long)]
    no_constraints: bool,
}

impl ToggleArgs {
    fn toggles(&self) -> RefinementToggles {
        RefinementToggles { clustering: !self.no_clustering, entropy: !self.no_entropy, constraints: !self.no_constraints }
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    corpus: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "corpus")]
    name: String,
    #[command(flatten)]
    seg: SegArgs,
    #[command(flatten)]
    det: DetectArgs,
    #[command(flatten)]
    toggles: ToggleArgs,
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => match std::io::stdout().write_all(text.as_bytes()) {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
            r => r.context("writing stdout"),
        },
    }
}

fn config(seg: &SegArgs, det: Option<&DetectArgs>, toggles: Option<&ToggleArgs>) -> Result<PipelineConfig> {
    let cfg = PipelineConfig {
        params: seg.align.params(),
        baseline: seg.baseline,
        detectors: det.map(DetectArgs::config).transpose()?.unwrap_or_default(),
        refinement: toggles.map(ToggleArgs::toggles).unwrap_or_default(),
        ..Default::default()
    };
    cfg.params.validate()?;
    Ok(cfg)
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let script = load_script(&a.parser)?;
    let (messages, truth): (Vec<Message>, _) = match (&a.messages, bundled::find(&a.parser)) {
        (Some(p), _) => (load_corpus(p)?.messages, None),
        (None, Some(b)) => {
            let c = b.generate(a.count, a.seed);
            (c.messages, Some(c.truth))
        }
        (None, None) => bail!("`{}` is not a bundled parser; pass --messages", a.parser),
    };
    let runs = generate_traces(&script, &messages, a.step_budget);
    let mut out = String::new();
    let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
    for m in &messages {
        write_message(&mut out, m);
    }
    for (t, term) in &runs {
        for r in &t.records {
            write_record(&mut out, &t.message_id, r);
        }
        let k = match term {
            Termination::Accept => "accept",
            Termination::Reject => "reject",
            Termination::StepLimit => "step-limit",
        };
        *tally.entry(k).or_default() += 1;
    }
    emit(a.output.as_deref(), &out)?;
    if let (Some(p), Some(gt)) = (&a.truth_out, truth) {
        emit(Some(p), &serialize_truth(&gt))?;
    }
    eprintln!("{} messages: {tally:?}", messages.len());
    Ok(())
}

fn formats_for(corpus: &Corpus, path: &Path) -> Result<Vec<FormatResult>> {
    let formats: Vec<FormatResult> = load_json(path)?;
    for m in &corpus.messages {
        let f = formats.iter().find(|f| f.message_id == m.id).with_context(|| format!("no format for message `{}`", m.id))?;
        f.check(m.len())?;
    }
    Ok(formats)
}

fn run(a: &RunArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let truth = a.truth.as_ref().map(load_truth).transpose()?;
    let cfg = config(&a.seg, Some(&a.det), Some(&a.toggles))?;
    let out = run_pipeline(&corpus.messages, &corpus.traces, truth.as_ref(), &cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let put = |name: &str, text: String| fs::write(a.out.join(name), text).with_context(|| format!("writing {name}"));
    put("formats.json", to_json(&out.formats))?;
    put("initial.json", to_json(&out.initial))?;
    put("annotations.json", to_json(&out.annotations))?;
    put("clustering.json", to_json(&out.clustering))?;
    put("audit.jsonl", report::audit_lines(&out.audit))?;
    put("template.txt", render_text(&build_template(&a.name, &out.annotations, &corpus.messages)))?;
    if let Some(m) = &out.metrics {
        put("metrics.json", to_json(m))?;
        let table = report::summary_table(&[(&a.name, m)]);
        put("summary.txt", table.clone())?;
        emit(None, &table)?;
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenerateTraces(a) => generate(&a)?,
        Cmd::Extract { corpus, seg, output } => {
            let c = load_corpus(&corpus)?;
            let formats = extract_all(&c.messages, &c.traces, &config(&seg, None, None)?)?;
            emit(output.as_deref(), &to_json(&formats))?;
        }
        Cmd::Infer { corpus, formats, det, explain, output } => {
            let c = load_corpus(&corpus)?;
            let formats = formats_for(&c, &formats)?;
            let cfg = PipelineConfig { detectors: det.config()?, ..Default::default() };
            let anns = infer_all(&c.messages, &c.traces, &formats, &cfg)?;
            if explain {
                eprint!("{}", report::explain(&anns));
            }
            emit(output.as_deref(), &to_json(&anns))?;
        }
        Cmd::Refine { corpus, formats, annotations, align, toggles, audit, clustering, output } => {
            let c = load_corpus(&corpus)?;
            let formats = formats_for(&c, &formats)?;
            let anns: CorpusAnnotations = load_json(&annotations)?;
            let seg = SegArgs { align, baseline: false };
            let cfg = config(&seg, None, Some(&toggles))?;
            let (cl, refined, log) = refine_all(&c.messages, &formats, &anns, &cfg)?;
            if let Some(p) = audit {
                emit(Some(&p), &report::audit_lines(&log))?;
            }
            if let Some(p) = clustering {
                emit(Some(&p), &to_json(&cl))?;
            }
            emit(output.as_deref(), &to_json(&refined))?;
        }
        Cmd::Score { truth, formats, annotations, name, output } => {
            let gt = load_truth(&truth)?;
            let formats: Vec<FormatResult> = load_json(&formats)?;
            let anns: Option<CorpusAnnotations> = annotations.map(load_json).transpose()?;
            let m = score_corpus(&formats, anns.as_ref(), &gt)?;
            if let Some(p) = output {
                emit(Some(&p), &to_json(&m))?;
            }
            emit(None, &report::summary_table(&[(&name, &m)]))?;
        }
        Cmd::Run(a) => run(&a)?,
        Cmd::ExportTemplate { corpus, annotations, name, json, output } => {
            let c = load_corpus(&corpus)?;
            let anns: CorpusAnnotations = load_json(&annotations)?;
            let t = build_template(&name, &anns, &c.messages);
            emit(output.as_deref(), &if json { to_json(&t) } else { render_text(&t) })?;
        }
        Cmd::ListRules => {
            let mut text = String::new();
            for r in list_rules() {
                text.push_str(&format!("{:<28} {:<9} {}\n", r.id, r.label, r.description));
            }
            emit(None, &text)?;
        }
    }
    Ok(())
}
