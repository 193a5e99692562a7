//! Command-line front end: `demo`, `gradcheck`, `selftest`, `bench`, `distractor`.
//!
//! Exit codes: 0 success, 1 a check failed or a run errored, 2 bad flags or config.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bench::{self, Workload};
use crate::distractor::{self, EvalConfig};
use crate::error::{Error, Result};
use crate::exec;
use crate::hyperattention::{hatb_forward, AttentionInputs, HatbOptions, HatbParams, HostBlock};
use crate::interleave::{build_sequence, CropPolicy, InterleavedSequence, Segment};
use crate::model::{Model, ModelConfig, Variant};
use crate::oracle::{self, CaseLimits, ComparisonReport, HatbCase};
use crate::tensor::Matrix;

pub const THREADS_ENV: &str = "HYPERATTN_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "hyperattn",
    version,
    about = "Hyper attention blocks for interleaved image-text sequences"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Model configuration (JSON); flags below override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Hidden size; the head size is re-derived from it.
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    /// Comma-separated fusion layer indices, e.g. `0,2,4,6`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub hatb_indices: Option<Vec<usize>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trace one HATB over a two-image sequence, then run every variant on it.
    Demo,
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// Randomized HATB cases.
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quick oracle, gradient, and reduction checks.
    Selftest,
    /// Analytic costs and timed forward passes per variant and image count.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "hyper,concat")]
        variants: Vec<Variant>,
        #[arg(long, value_delimiter = ',', default_value = "1,50,100")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 256)]
        text_len: usize,
        #[arg(long, default_value_t = 16)]
        patches: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Workload file (JSON); replaces the flags above.
        #[arg(long)]
        workload: Option<PathBuf>,
        /// Skip timing and emit closed-form costs only.
        #[arg(long)]
        analytic: bool,
        /// CSV path (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distractor-resistance evaluation with CircularEval scoring.
    Distractor {
        /// oracle, random, first-image or toy-model.
        #[arg(long, default_value = "oracle")]
        adapter: String,
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        #[arg(long, default_value_t = 50)]
        questions: usize,
        #[arg(long, default_value_t = 4)]
        rotations: usize,
        #[arg(long, default_value_t = 1)]
        distractor_seeds: usize,
        /// Evaluate previously written tasks instead of generating new ones.
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Also write the generated tasks here.
        #[arg(long)]
        tasks_out: Option<PathBuf>,
        /// CSV path (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// The model configuration after applying flag overrides.
pub fn resolve_config(g: &GlobalArgs) -> Result<ModelConfig> {
    let mut cfg = match &g.config {
        Some(p) => ModelConfig::from_path(p)?,
        None => ModelConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(d) = g.dim {
        cfg.hidden_dim = d;
        cfg.head_dim = 0;
        cfg.ffn_dim = 4 * d;
    }
    if let Some(l) = g.layers {
        cfg.n_layers = l;
        cfg.hatb_indices.clear();
    }
    if let Some(ix) = &g.hatb_indices {
        cfg.hatb_indices = ix.clone();
    }
    cfg.resolved()
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::InvalidConfig(format!("{THREADS_ENV}={v} is not a positive integer"))),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) | Error::Json(_) => 2,
                _ => 1,
            }
        }
    }
}

/// `Ok(false)` means a check ran and failed.
fn execute(cli: Cli) -> Result<bool> {
    exec::init_threads(threads_from_env()?);
    let config = resolve_config(&cli.global)?;
    eprintln!("config: {}", serde_json::to_string(&config)?);
    match cli.command {
        Command::Demo => demo(&config),
        Command::Gradcheck { cases, tol, out } => gradcheck(&config, cases, tol, out.as_deref()),
        Command::Selftest => selftest(&config),
        Command::Bench {
            variants,
            n,
            text_len,
            patches,
            repeats,
            workload,
            analytic,
            out,
        } => {
            let base = match workload {
                Some(p) => Workload::from_path(&p)?,
                None => Workload::new(config, 0, patches, text_len, repeats),
            };
            let mut reports = Vec::new();
            for &v in &variants {
                for &count in &n {
                    let w = Workload {
                        n_images: count,
                        ..base.clone()
                    };
                    let cfg = w.model_config(v)?;
                    let r = if analytic {
                        bench::cost_model(v, &cfg, &w)?
                    } else {
                        bench::measure(v, &cfg, &w)?
                    };
                    eprintln!("{v} N={count}: L'={} wall_ms={:?}", r.lm_seq_len, r.wall_ms_median);
                    reports.push(r);
                }
            }
            emit(&bench::to_csv(&reports)?, out.as_deref())?;
            Ok(true)
        }
        Command::Distractor {
            adapter,
            n,
            questions,
            rotations,
            distractor_seeds,
            tasks,
            tasks_out,
            out,
        } => {
            let mut eval = EvalConfig {
                questions,
                rotations,
                distractor_seeds,
                rng_seed: config.seed,
                image_token: config.image_token(),
                patches_per_slot: config.patches_per_slot,
                vision_dim: config.vision_dim,
                ..EvalConfig::default()
            };
            if let Some(n) = n {
                eval.n_values = n;
            }
            let tasks = match tasks {
                Some(p) => distractor::read_tasks(&p)?,
                None => distractor::gen_tasks(&eval)?,
            };
            if let Some(p) = tasks_out {
                distractor::write_tasks(&p, &tasks)?;
            }
            let toy = (adapter == "toy-model")
                .then(|| Model::new(config.clone()))
                .transpose()?;
            if toy.is_some() && config.vocab_size <= 256 {
                return Err(Error::InvalidConfig(
                    "toy-model adapter needs vocab_size > 256 for byte tokens".into(),
                ));
            }
            let a = distractor::adapter_by_name(&adapter, config.seed, toy)?;
            let results = distractor::circular_eval(a.as_ref(), &tasks, &eval)?;
            for r in &results {
                if r.failures > 0 {
                    eprintln!("warning: {} adapter call(s) failed at N={}", r.failures, r.n_images);
                }
            }
            emit(&distractor::results_csv(&results)?, out.as_deref())?;
            Ok(true)
        }
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn demo_sequence(image_token: u32) -> Result<InterleavedSequence> {
    build_sequence(
        &[
            Segment::text(vec![1, 2, 3]),
            Segment::image(7, 448, 448),
            Segment::text(vec![4, 5]),
            Segment::image(8, 448, 448),
            Segment::text(vec![6, 7]),
        ],
        CropPolicy::Off,
        image_token,
    )
}

fn norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// One HATB on a two-image sequence, token by token.
fn hatb_trace(config: &ModelConfig, seq: &InterleavedSequence) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (d, patches) = (config.hidden_dim, config.patches_per_slot);
    let host = HostBlock::init(d, config.n_heads, config.ffn_dim, &mut rng);
    let params = HatbParams::from_host(&host, config.hatb);
    let h_text = Matrix::random(seq.len(), d, 1.0, &mut rng);
    let h_img = Matrix::random(seq.num_slots() * patches, d, 1.0, &mut rng);
    let inputs = AttentionInputs::from_sequence(h_text, h_img, seq, patches)?;
    let out = hatb_forward(&inputs, &host, &params)?;
    println!(
        "HATB trace: D={d}, {} heads, {} slots x {patches} patches, visual key positions {:?}",
        config.n_heads,
        seq.num_slots(),
        inputs.rope.visual_key_positions
    );
    println!("t\ttoken\tpos\tvisible\tgate\t|h_self|\t|h_cross|\t|out|");
    for t in 0..seq.len() {
        let visible: Vec<usize> = (0..seq.num_slots())
            .filter(|&s| inputs.cross_mask.is_visible(t, s))
            .collect();
        let gate = if out.bypass[t] {
            "bypass".to_string()
        } else {
            out.gate.get(t).map_or("-".into(), |g| format!("{g:.4}"))
        };
        println!(
            "{t}\t{}\t{}\t{visible:?}\t{gate}\t{:.4}\t{:.4}\t{:.4}",
            seq.tokens[t],
            inputs.rope.query_positions[t],
            norm(out.h_self.row(t)),
            norm(out.h_cross.row(t)),
            norm(out.out.row(t)),
        );
    }
    Ok(())
}

fn demo(config: &ModelConfig) -> Result<bool> {
    let seq = demo_sequence(config.image_token())?;
    hatb_trace(config, &seq)?;
    println!();
    println!("variant\tlm_seq_len\tvisual_keys\tadded_params\tattn_flops\tloss");
    for v in Variant::ALL {
        let model = Model::new(config.with_variant(v))?;
        let ex = model.example(seq.clone());
        let out = model.forward(&ex)?;
        let loss = model.loss(std::slice::from_ref(&ex))?;
        println!(
            "{v}\t{}\t{}\t{}\t{}\t{loss:.6}",
            out.stats.lm_seq_len,
            out.stats.visual_keys,
            model.count_params().added_by_fusion,
            out.stats.attn_flops(config.hidden_dim),
        );
    }
    Ok(true)
}

#[derive(Debug, Serialize)]
struct GradcheckEntry {
    case: String,
    #[serde(flatten)]
    report: ComparisonReport,
}

#[derive(Debug, Serialize)]
struct GradcheckReport {
    seed: u64,
    tolerance: f64,
    pass: bool,
    max_rel_err: f64,
    cases: Vec<GradcheckEntry>,
}

fn gradcheck(config: &ModelConfig, cases: usize, tol: f64, out: Option<&Path>) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let limits = CaseLimits {
        max_len: 12,
        max_visual: 16,
        max_dim: config.hidden_dim.min(16),
    };
    let mut entries = Vec::new();
    for i in 0..cases {
        let case = HatbCase::random(&mut rng, limits, HatbOptions::default());
        entries.push(GradcheckEntry {
            case: format!("hatb[{i}]"),
            report: oracle::gradcheck_hatb(&case, tol)?,
        });
    }
    for v in Variant::ALL {
        let (model, batch) = oracle::small_model_case(&mut rng, v, config.seed)?;
        entries.push(GradcheckEntry {
            case: format!("model[{v}]"),
            report: oracle::gradcheck_model(&model, &batch, tol)?,
        });
    }
    let report = GradcheckReport {
        seed: config.seed,
        tolerance: tol,
        pass: entries.iter().all(|e| e.report.pass),
        max_rel_err: entries.iter().map(|e| e.report.max_rel_err).fold(0.0, f64::max),
        cases: entries,
    };
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => std::fs::write(p, &json)?,
        None => println!("{json}"),
    }
    eprintln!(
        "gradcheck: {} ({} cases, max rel err {:.3e})",
        if report.pass { "PASS" } else { "FAIL" },
        report.cases.len(),
        report.max_rel_err
    );
    Ok(report.pass)
}

fn selftest(config: &ModelConfig) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let limits = CaseLimits {
        max_len: 16,
        max_visual: 24,
        max_dim: 16,
    };
    let mut ok = true;
    let mut report = |name: &str, pass: bool, detail: String| {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    };

    let mut worst = 0.0f64;
    for _ in 0..10 {
        worst = worst.max(oracle::oracle_deviation(&HatbCase::random(
            &mut rng,
            limits,
            HatbOptions::default(),
        ))?);
    }
    report("oracle", worst < 1e-9, format!("max abs diff {worst:.3e}"));

    let mut worst = 0.0f64;
    for _ in 0..3 {
        let case = HatbCase::random(
            &mut rng,
            CaseLimits {
                max_len: 8,
                max_visual: 8,
                max_dim: 8,
            },
            HatbOptions::default(),
        );
        worst = worst.max(oracle::gradcheck_hatb(&case, 1e-4)?.max_rel_err);
    }
    report("gradcheck", worst < 1e-4, format!("max rel err {worst:.3e}"));

    let text = InterleavedSequence::text_only((0..12).collect(), config.image_token());
    let mut outputs = Vec::new();
    for v in Variant::ALL {
        let model = Model::new(config.with_variant(v))?;
        outputs.push(model.forward(&model.example(text.clone()))?.logits);
    }
    let same = outputs.windows(2).all(|w| w[0] == w[1]);
    report("text-only", same, format!("{} variants bitwise equal", outputs.len()));

    let model = Model::new(config.clone())?;
    let params = model.count_params();
    report(
        "params",
        params.total() == params.base + params.added_by_fusion,
        format!("base {} + fusion {}", params.base, params.added_by_fusion),
    );
    Ok(ok)
}
