//! The `fmvr` command line.
//!
//! Exit codes: 0 on success (gradcheck: every check within tolerance),
//! 1 on runtime failure or a failed check, 2 on usage or configuration
//! errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::flops::{self, CostModelConfig};
use crate::fmt1;
use crate::fmvr;
use crate::gradcheck;
use crate::matryoshka::{self, Sampling};
use crate::mrl::{self, TrainConfig};
use crate::store;

/// Marks an error as the caller's fault (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "fmvr", version, about = "Frequency-modulated restoration over nested visual-token pyramids")]
pub struct Cli {
    /// TOML or JSON run configuration (sections: train, flops, gradcheck, ablation).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = "fmvr-out")]
    pub out: PathBuf,
    /// Print the machine-readable report on stdout instead of a table.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Split an FMT1 tensor into its four frequency components.
    Decompose(DecomposeArgs),
    /// Build the token pyramid of an FMT1 feature tensor.
    Pyramid(PyramidArgs),
    /// Train on the synthetic task; writes loss.csv, accuracy.json and model/.
    Train(TrainArgs),
    /// Evaluate a saved model on its task's held-out split.
    Eval(EvalArgs),
    /// Prefill cost table for a list of visual token counts.
    Flops(FlopsArgs),
    /// Train one model per sampling strategy and tabulate per-level accuracy.
    AblateSampling(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Comma-separated CxHxW shapes for the restoration check.
    #[arg(long)]
    pub shapes: Option<String>,
    /// Seeded cases per shape and for the end-to-end check.
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Maximum relative error for the restoration check.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Maximum relative error for the end-to-end check.
    #[arg(long)]
    pub mrl_tolerance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// FMT1 tensor of shape (C, H, W) or (B, C, H, W).
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct PyramidArgs {
    /// FMT1 tensor of shape (C, S, S).
    #[arg(long)]
    pub input: PathBuf,
    /// Overrides `train.sampling`.
    #[arg(long)]
    pub sampling: Option<Sampling>,
    /// Skip restoration; restored levels equal raw levels.
    #[arg(long)]
    pub no_fmvr: bool,
    /// Take modulation vectors from a saved model instead of ones.
    #[arg(long, value_name = "DIR")]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides `train.sampling` (avg_pool, max_pool, sequential, spatial).
    #[arg(long)]
    pub sampling: Option<Sampling>,
    /// Train without restoration.
    #[arg(long)]
    pub no_fmvr: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `train` (the `model/` subdirectory).
    #[arg(long, value_name = "DIR")]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Comma-separated visual token counts.
    #[arg(long, default_value = "576,144,36,9,1")]
    pub tokens: String,
    /// Reference token count for speedups.
    #[arg(long, default_value_t = 576)]
    pub reference: usize,
    /// Refit the text-token count before reporting.
    #[arg(long)]
    pub fit: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Number of seeds, starting at the configured seed.
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub shapes: Vec<String>,
    pub seeds: u64,
    pub tolerance: f64,
    pub mrl_tolerance: f64,
    pub mrl_channels: usize,
    pub mrl_base_side: usize,
    pub mrl_batch: usize,
    pub mrl_classes: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            shapes: vec!["1x2x2".into(), "3x4x4".into(), "8x6x6".into()],
            seeds: 100,
            tolerance: 1e-6,
            mrl_tolerance: 1e-5,
            mrl_channels: 2,
            mrl_base_side: 4,
            mrl_batch: 2,
            mrl_classes: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: u64,
    pub strategies: Vec<Sampling>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            strategies: Sampling::ALL.to_vec(),
        }
    }
}

/// Everything a run may read from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub flops: CostModelConfig,
    pub gradcheck: GradcheckConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| usage(format!("config {}: {e}", path.display())))
    }
}

fn default_help() -> String {
    let toml = toml::to_string(&RunConfig::default()).unwrap_or_default();
    format!("Configuration defaults (every key optional, unknown keys rejected):\n\n{toml}")
}

/// Parses `CxHxW`.
pub fn parse_shape(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.trim().split('x').collect();
    let dims: Option<Vec<usize>> = parts.iter().map(|p| p.parse().ok().filter(|&d| d > 0)).collect();
    match dims.as_deref() {
        Some(&[c, h, w]) => Ok((c, h, w)),
        _ => Err(usage(format!("invalid shape {s:?}; expected CxHxW with positive integers"))),
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| usage(format!("invalid token count {t:?}"))))
        .collect()
}

/// Formats with 17 significant digits so values survive a round trip.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// What a subcommand hands back to `main`.
pub struct Outcome {
    pub passed: bool,
    pub report: serde_json::Value,
    pub table: String,
}

impl Outcome {
    fn ok(report: serde_json::Value, table: String) -> Self {
        Self {
            passed: true,
            report,
            table,
        }
    }
}

pub struct RunContext {
    pub config: RunConfig,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

fn out_dir(ctx: &RunContext) -> Result<&Path> {
    fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    Ok(&ctx.out)
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let ctx = RunContext {
        config,
        out: cli.out,
        seed: cli.seed,
    };
    match cli.command {
        Command::Gradcheck(a) => cmd_gradcheck(&ctx, a),
        Command::Decompose(a) => cmd_decompose(&ctx, a),
        Command::Pyramid(a) => cmd_pyramid(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Flops(a) => cmd_flops(&ctx, a),
        Command::AblateSampling(a) => cmd_ablate(&ctx, a),
    }
}

fn config_error(e: crate::Error) -> anyhow::Error {
    match e {
        crate::Error::InvalidConfig(m) => usage(m),
        other => other.into(),
    }
}

fn cmd_gradcheck(ctx: &RunContext, a: GradcheckArgs) -> Result<Outcome> {
    let mut g = ctx.config.gradcheck.clone();
    if let Some(s) = a.shapes {
        g.shapes = s.split(',').map(str::to_owned).collect();
    }
    g.seeds = a.seeds.unwrap_or(g.seeds);
    g.tolerance = a.tolerance.unwrap_or(g.tolerance);
    g.mrl_tolerance = a.mrl_tolerance.unwrap_or(g.mrl_tolerance);
    if !(g.tolerance >= 0.0 && g.mrl_tolerance >= 0.0) {
        return Err(usage("tolerances must be non-negative"));
    }
    let shapes = g.shapes.iter().map(|s| parse_shape(s)).collect::<Result<Vec<_>>>()?;
    for &(_, h, w) in &shapes {
        fmvr::Window::for_grid(h, w).map_err(|e| usage(e.to_string()))?;
    }
    let base = ctx.seed.unwrap_or(0);

    let mut passed = true;
    let mut fmvr_report = serde_json::Map::new();
    let mut table = String::from("check                      group          max rel err  status\n");
    for (shape, name) in shapes.iter().zip(&g.shapes) {
        let mut worst = [0.0f64; 3];
        for s in 0..g.seeds {
            let e = gradcheck::check_fmvr(*shape, base + s, s % 2 == 1)?;
            for (w, (_, v)) in worst.iter_mut().zip(&e.groups) {
                *w = w.max(*v);
            }
        }
        let mut groups = serde_json::Map::new();
        for (gname, w) in ["x", "w_a", "w_m"].iter().zip(worst) {
            let ok = w < g.tolerance;
            passed &= ok;
            groups.insert((*gname).into(), json!(w));
            let _ = writeln!(table, "fmvr {name:<21} {gname:<14} {w:<12.3e} {}", if ok { "ok" } else { "FAIL" });
        }
        fmvr_report.insert(name.clone(), serde_json::Value::Object(groups));
    }

    let mut mrl_worst: Vec<(String, f64)> = Vec::new();
    for s in 0..g.seeds {
        let e = gradcheck::check_mrl(base + s, g.mrl_channels, g.mrl_base_side, g.mrl_batch, g.mrl_classes)
            .map_err(config_error)?;
        if mrl_worst.is_empty() {
            mrl_worst = e.groups.iter().map(|(n, _)| (n.clone(), 0.0)).collect();
        }
        for (w, (_, v)) in mrl_worst.iter_mut().zip(&e.groups) {
            w.1 = w.1.max(*v);
        }
    }
    let mut mrl_report = serde_json::Map::new();
    for (n, w) in &mrl_worst {
        let ok = *w < g.mrl_tolerance;
        passed &= ok;
        mrl_report.insert(n.clone(), json!(w));
        let _ = writeln!(table, "end-to-end                 {n:<14} {w:<12.3e} {}", if ok { "ok" } else { "FAIL" });
    }
    let report = json!({
        "passed": passed,
        "seeds": g.seeds,
        "epsilon": gradcheck::EPSILON,
        "relative_error_floor": gradcheck::REL_FLOOR,
        "tolerance": g.tolerance,
        "mrl_tolerance": g.mrl_tolerance,
        "fmvr": fmvr_report,
        "mrl": mrl_report,
    });
    write_json(&out_dir(ctx)?.join("gradcheck.json"), &report)?;
    Ok(Outcome { passed, report, table })
}

fn energy_stats(x: &crate::Tensor, parts: &[(&str, &crate::Tensor)]) -> Result<serde_json::Value> {
    let mut m = serde_json::Map::new();
    m.insert("x".into(), json!(x.sum_of_squares()));
    for (n, t) in parts {
        m.insert((*n).into(), json!(t.sum_of_squares()));
    }
    Ok(serde_json::Value::Object(m))
}

fn cmd_decompose(ctx: &RunContext, a: DecomposeArgs) -> Result<Outcome> {
    let x = fmt1::read_tensor(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let window = fmvr::Window::for_grid(x.height(), x.width())?;
    let k = match window {
        fmvr::Window::Block(k) => k,
        fmvr::Window::PassThrough => 1,
    };
    let (x_l_a, x_h_a) = fmvr::avg_decompose_with(&x, k)?;
    let (x_h_m, x_l_m) = fmvr::max_decompose_with(&x, k)?;
    let out = out_dir(ctx)?;
    let parts = [("x_l_a", &x_l_a), ("x_h_a", &x_h_a), ("x_h_m", &x_h_m), ("x_l_m", &x_l_m)];
    let roles = [
        "average-pool low-frequency component",
        "average-pool high-frequency residual (saliency)",
        "max-pool high-frequency component",
        "max-pool low-frequency residual (anti-saliency)",
    ];
    let mut files = Vec::new();
    for ((name, t), role) in parts.iter().zip(roles) {
        let file = format!("{name}.fmt1");
        fmt1::write_tensor(out.join(&file), t)?;
        files.push(json!({"file": file, "role": role, "shape": t.shape()}));
    }
    let report = json!({
        "input": a.input.display().to_string(),
        "shape": x.shape(),
        "window": k,
        "tensors": files,
        "energy": energy_stats(&x, &parts)?,
        "cross": {
            "dot_x_l_a_x_h_a": x_l_a.dot(&x_h_a)?,
            "dot_x_h_m_x_l_m": x_h_m.dot(&x_l_m)?,
        },
    });
    write_json(&out.join("manifest.json"), &report)?;
    let mut table = format!("component  energy\n{:<10} {}\n", "x", num(x.sum_of_squares()));
    for (n, t) in parts {
        let _ = writeln!(table, "{n:<10} {}", num(t.sum_of_squares()));
    }
    Ok(Outcome::ok(report, table))
}

fn cmd_pyramid(ctx: &RunContext, a: PyramidArgs) -> Result<Outcome> {
    let x = fmt1::read_tensor(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    if x.rank() != 3 || x.height() != x.width() {
        return Err(anyhow!("pyramid input must be (C, S, S), got {:?}", x.shape()));
    }
    let t = &ctx.config.train;
    let sampling = a.sampling.unwrap_or(t.sampling);
    let mut cfg = matryoshka::PyramidConfig::new(x.height(), x.channels(), sampling, !a.no_fmvr && t.fmvr_enabled)
        .map_err(config_error)?
        .with_residual_skip(t.residual_skip)
        .with_chain_restored(t.chain_restored);
    if let Some(dir) = &a.model {
        let (model, _) = store::load_model(dir).with_context(|| format!("loading {}", dir.display()))?;
        if model.pyramid.base_side != cfg.base_side || model.pyramid.channels != cfg.channels {
            return Err(anyhow!("model geometry does not match the input"));
        }
        cfg.level_params = model.pyramid.level_params.clone();
    }
    let pyr = matryoshka::build_pyramid(&x, &cfg)?;
    let out = out_dir(ctx)?;
    let mut levels = Vec::new();
    let mut table = String::from("level  side  tokens  raw mean               restored mean\n");
    for (e, l) in pyr.levels.iter().enumerate() {
        let raw = format!("level{e}_raw.fmt1");
        let restored = format!("level{e}_restored.fmt1");
        fmt1::write_tensor(out.join(&raw), &l.raw)?;
        fmt1::write_tensor(out.join(&restored), &l.restored)?;
        levels.push(json!({
            "side": l.side,
            "token_count": l.token_count,
            "tensors": [
                {"file": raw, "role": "pooled features before restoration", "shape": l.raw.shape()},
                {"file": restored, "role": "restored features", "shape": l.restored.shape()},
            ],
        }));
        let _ = writeln!(table, "{e:<6} {:<5} {:<7} {:<22} {}", l.side, l.token_count, num(l.raw.mean()), num(l.restored.mean()));
    }
    let report = json!({
        "sampling": sampling.as_str(),
        "fmvr_enabled": cfg.fmvr_enabled,
        "token_counts": pyr.token_counts(),
        "levels": levels,
    });
    write_json(&out.join("manifest.json"), &report)?;
    Ok(Outcome::ok(report, table))
}

fn level_names(cfg: &TrainConfig) -> Result<Vec<String>> {
    Ok(matryoshka::level_sides(cfg.base_side)
        .map_err(config_error)?
        .iter()
        .map(|s| format!("{}", s * s))
        .collect())
}

fn accuracy_table(names: &[String], acc: &[f64]) -> String {
    let mut t = String::from("tokens  accuracy\n");
    for (n, a) in names.iter().zip(acc) {
        let _ = writeln!(t, "{n:<7} {a:.4}");
    }
    t
}

fn train_config(ctx: &RunContext, steps: Option<usize>, sampling: Option<Sampling>, no_fmvr: bool) -> Result<TrainConfig> {
    let mut t = ctx.config.train.clone();
    t.seed = ctx.seed.unwrap_or(t.seed);
    t.steps = steps.unwrap_or(t.steps);
    t.sampling = sampling.unwrap_or(t.sampling);
    t.fmvr_enabled &= !no_fmvr;
    t.validate().map_err(config_error)?;
    Ok(t)
}

fn cmd_train(ctx: &RunContext, a: TrainArgs) -> Result<Outcome> {
    let cfg = train_config(ctx, a.steps, a.sampling, a.no_fmvr)?;
    let outcome = mrl::train(&cfg)?;
    let names = level_names(&cfg)?;
    let out = out_dir(ctx)?;

    let mut header = vec!["step".to_string(), "total_loss".to_string()];
    header.extend(names.iter().map(|n| format!("loss_{n}")));
    let rows: Vec<Vec<String>> = outcome
        .history
        .iter()
        .map(|r| {
            let mut row = vec![r.step.to_string(), num(r.loss.total)];
            row.extend(r.loss.per_scale.iter().map(|&l| num(l)));
            row
        })
        .collect();
    write_csv(&out.join("loss.csv"), &header, &rows)?;
    store::save_model(out.join("model"), &outcome.model, &cfg)?;
    let report = json!({
        "seed": cfg.seed,
        "steps": cfg.steps,
        "sampling": cfg.sampling.as_str(),
        "fmvr_enabled": cfg.fmvr_enabled,
        "token_counts": names,
        "accuracy": outcome.accuracy,
        "final_loss": outcome.history.last().map(|r| r.loss.total),
    });
    write_json(&out.join("accuracy.json"), &report)?;
    Ok(Outcome::ok(report, accuracy_table(&names, &outcome.accuracy)))
}

fn cmd_eval(ctx: &RunContext, a: EvalArgs) -> Result<Outcome> {
    let (model, manifest) = store::load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let mut cfg = manifest.config;
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    let data = mrl::prepare(&mrl::eval_split(&cfg)?, &model.pyramid)?;
    let acc = mrl::evaluate(&model, &data)?;
    let names = level_names(&cfg)?;
    let report = json!({"seed": cfg.seed, "token_counts": names, "accuracy": acc});
    write_json(&out_dir(ctx)?.join("eval.json"), &report)?;
    Ok(Outcome::ok(report, accuracy_table(&names, &acc)))
}

fn cmd_flops(ctx: &RunContext, a: FlopsArgs) -> Result<Outcome> {
    let mut cfg = ctx.config.flops.clone();
    cfg.validate().map_err(config_error)?;
    let tokens = parse_list(&a.tokens)?;
    let fit = if a.fit {
        let f = flops::fit_text_tokens(&cfg.llm, 1..=128)?;
        cfg.text_tokens = f.text_tokens;
        Some(f)
    } else {
        None
    };
    let reports = flops::report(&cfg, &tokens, a.reference)?;
    let out = out_dir(ctx)?;
    let header: Vec<String> = ["visual_tokens", "vision_encoder_tb", "projection_tb", "fmvr_tb", "llm_tb", "total_tb", "llm_speedup", "total_speedup"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.visual_tokens.to_string(),
                num(r.vision_encoder),
                num(r.projection),
                num(r.fmvr),
                num(r.llm),
                num(r.total),
                num(r.llm_speedup),
                num(r.total_speedup),
            ]
        })
        .collect();
    write_csv(&out.join("flops.csv"), &header, &rows)?;
    let report = json!({"config": cfg, "reference": a.reference, "fit": fit, "reports": reports});
    write_json(&out.join("flops.json"), &report)?;
    let mut table = String::from("tokens  vision  proj    fmvr      llm     total   llm speedup\n");
    for r in &reports {
        let _ = writeln!(
            table,
            "{:<7} {:<7.3} {:<7.3} {:<9.2e} {:<7.3} {:<7.3} x{:.2}",
            r.visual_tokens, r.vision_encoder, r.projection, r.fmvr, r.llm, r.total, r.llm_speedup
        );
    }
    if let Some(f) = &fit {
        let _ = writeln!(table, "fitted text tokens: {} (objective {:.3e})", f.text_tokens, f.objective);
    }
    Ok(Outcome::ok(report, table))
}

/// Per-level accuracy for every `(seed, strategy)` pair.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub seed: u64,
    pub sampling: Sampling,
    pub accuracy: Vec<f64>,
    pub mean: f64,
}

pub fn ablate(base: &TrainConfig, seeds: u64, strategies: &[Sampling]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for s in 0..seeds {
        for &sampling in strategies {
            let cfg = TrainConfig {
                seed: base.seed + s,
                sampling,
                ..base.clone()
            };
            let acc = mrl::train(&cfg)?.accuracy;
            let mean = acc.iter().sum::<f64>() / acc.len() as f64;
            rows.push(AblationRow {
                seed: cfg.seed,
                sampling,
                accuracy: acc,
                mean,
            });
        }
    }
    Ok(rows)
}

fn cmd_ablate(ctx: &RunContext, a: AblateArgs) -> Result<Outcome> {
    let base = train_config(ctx, a.steps, None, false)?;
    let ab = &ctx.config.ablation;
    let seeds = a.seeds.unwrap_or(ab.seeds);
    if seeds == 0 || ab.strategies.is_empty() {
        return Err(usage("ablation needs at least one seed and one strategy"));
    }
    let rows = ablate(&base, seeds, &ab.strategies)?;
    let names = level_names(&base)?;
    let out = out_dir(ctx)?;

    let mut header = vec!["seed".to_string(), "sampling".to_string()];
    header.extend(names.iter().map(|n| format!("acc_{n}")));
    header.push("mean".into());
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![r.seed.to_string(), r.sampling.as_str().to_string()];
            row.extend(r.accuracy.iter().map(|&v| num(v)));
            row.push(num(r.mean));
            row
        })
        .collect();
    write_csv(&out.join("ablation.csv"), &header, &csv_rows)?;

    // Seed-averaged matrix: rows are token counts, columns strategies.
    let mut summary = serde_json::Map::new();
    let mut table = format!("{:<8}", "tokens");
    for s in &ab.strategies {
        let _ = write!(table, "{:<12}", s.as_str());
    }
    table.push('\n');
    let avg = |s: Sampling, f: &dyn Fn(&AblationRow) -> f64| -> f64 {
        let sel: Vec<f64> = rows.iter().filter(|r| r.sampling == s).map(f).collect();
        sel.iter().sum::<f64>() / sel.len() as f64
    };
    for (e, n) in names.iter().enumerate() {
        let _ = write!(table, "{n:<8}");
        for &s in &ab.strategies {
            let _ = write!(table, "{:<12.4}", avg(s, &|r| r.accuracy[e]));
        }
        table.push('\n');
    }
    let _ = write!(table, "{:<8}", "mean");
    for &s in &ab.strategies {
        let m = avg(s, &|r| r.mean);
        summary.insert(s.as_str().into(), json!(m));
        let _ = write!(table, "{m:<12.4}");
    }
    table.push('\n');
    let report = json!({"token_counts": names, "rows": rows, "mean_accuracy": summary});
    write_json(&out.join("ablation.json"), &report)?;
    Ok(Outcome::ok(report, table))
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        2
    } else {
        1
    }
}

/// Parses `args`, runs the command and prints its report.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cmd = Cli::command().after_long_help(default_help());
    let cli = match cmd.try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let json = cli.json;
    match run(cli) {
        Ok(o) => {
            if json {
                println!("{}", serde_json::to_string_pretty(&o.report).unwrap_or_default());
            } else {
                print!("{}", o.table);
            }
            if o.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_parse() {
        assert_eq!(parse_shape("3x4x4").unwrap(), (3, 4, 4));
        for bad in ["3x4", "ax4x4", "0x2x2", "3x4x4x1", ""] {
            let e = parse_shape(bad).unwrap_err();
            assert_eq!(exit_code_for(&e), 2, "{bad}");
        }
    }

    #[test]
    fn numbers_keep_seventeen_digits() {
        let v = 0.1 + 0.2;
        assert_eq!(num(v).parse::<f64>().unwrap(), v);
        assert_eq!(num(1.0), "1.0000000000000000e0");
    }

    #[test]
    fn unknown_config_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nbogus = 1\n").is_err());
        let c: RunConfig = toml::from_str("[train]\nsteps = 7\n").unwrap();
        assert_eq!(c.train.steps, 7);
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), RunConfig::default());
    }
}
