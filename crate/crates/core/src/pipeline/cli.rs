//! Command-line front end. Every command reads and writes files in the
//! `--out` directory and leaves a `<command>.manifest.json` next to them.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{
    arm_labels, bar_chart, line_chart, oracle_qini, qini_auuc, run_experiment, Config, EvalReport, Models, PolicySpec,
    QiniReport, ScoreStore, Series,
};
use crate::am::{fuse_scores, select_page, train_am, AmModel};
use crate::dataset::{
    read_jsonl, write_jsonl, DatasetManifest, FeatureSchema, Normalizer, RctInstance, StreamInstance, Transition,
};
use crate::iit::{dynamic_alpha, train_iit, QNets, TrafficStats};
use crate::isp::{train_isp, IspModel};
use crate::sim::build_population;
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "klan", version, about = "Landing-page navigation lab")]
struct Cli {
    /// TOML config with [sim] [isp] [iit] [am] [experiment] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the world seed and every model seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Working directory for inputs and outputs.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate history, the randomized trial and logged traffic; write datasets.
    GenData,
    /// Train the uplift model on the trial data.
    TrainIsp,
    /// Train the conservative Q-network on hourly transitions.
    TrainIit(IitArgs),
    /// Train the blend-weight network on streaming instances.
    TrainAm,
    /// Write static preference scores for every user in the trial data.
    #[command(alias = "predict-all")]
    PrecomputeScores,
    /// Run one policy on one evaluation seed.
    Simulate {
        #[arg(long, value_parser = parse_policy)]
        policy: PolicySpec,
        #[arg(long)]
        days: Option<usize>,
    },
    /// Run every configured policy on every evaluation seed.
    Evaluate,
    /// Render the evaluation summary as a table and SVG plots.
    Report,
    /// Fuse δ/p/γ triples from files and print σ and the chosen page.
    Fuse {
        #[arg(long)]
        delta: PathBuf,
        #[arg(long)]
        p: PathBuf,
        #[arg(long)]
        gamma: PathBuf,
    },
}

#[derive(Args, Debug)]
struct IitArgs {
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    dynamic_alpha: Option<bool>,
    #[arg(long)]
    target_sync: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
}

fn parse_policy(s: &str) -> std::result::Result<PolicySpec, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// 0 success, 2 usage or config error, 3 data error, 4 training divergence.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence { .. } => 4,
        _ => 3,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

struct Ctx {
    cfg: Config,
    out: PathBuf,
    outputs: Vec<String>,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        std::fs::write(self.path(name), text)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn write_records<T: Serialize>(&mut self, name: &str, items: &[T]) -> Result<()> {
        write_jsonl(&self.path(name), items)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn read<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<Vec<T>> {
        read_jsonl(&self.path(name))
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_hash: String,
    sim_seed: u64,
    model_seeds: BTreeMap<&'a str, u64>,
    eval_seeds: &'a [u64],
    version: &'a str,
    /// Output file name to SHA-256.
    outputs: BTreeMap<String, String>,
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    std::fs::create_dir_all(&cli.out)?;
    let mut ctx = Ctx { cfg, out: cli.out, outputs: Vec::new() };
    let name = match &cli.command {
        Command::GenData => {
            gen_data_cmd(&mut ctx)?;
            "gen-data"
        }
        Command::TrainIsp => {
            train_isp_cmd(&mut ctx)?;
            "train-isp"
        }
        Command::TrainIit(a) => {
            train_iit_cmd(&mut ctx, a)?;
            "train-iit"
        }
        Command::TrainAm => {
            train_am_cmd(&mut ctx)?;
            "train-am"
        }
        Command::PrecomputeScores => {
            precompute_cmd(&mut ctx)?;
            "precompute-scores"
        }
        Command::Simulate { policy, days } => {
            simulate_cmd(&mut ctx, *policy, *days, cli.seed)?;
            "simulate"
        }
        Command::Evaluate => {
            evaluate_cmd(&mut ctx)?;
            "evaluate"
        }
        Command::Report => {
            report_cmd(&mut ctx)?;
            "report"
        }
        Command::Fuse { delta, p, gamma } => {
            fuse_cmd(&mut ctx, delta, p, gamma)?;
            "fuse"
        }
    };
    let mut outputs = BTreeMap::new();
    for f in &ctx.outputs {
        outputs.insert(f.clone(), file_hash(&ctx.path(f))?);
    }
    let manifest = RunManifest {
        command: name,
        config_hash: ctx.cfg.hash(),
        sim_seed: ctx.cfg.sim.seed,
        model_seeds: [("isp", ctx.cfg.isp.seed), ("iit", ctx.cfg.iit.seed), ("am", ctx.cfg.am.seed)].into(),
        eval_seeds: &ctx.cfg.experiment.eval_seeds,
        version: env!("CARGO_PKG_VERSION"),
        outputs,
    };
    std::fs::write(ctx.path(&format!("{name}.manifest.json")), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn dataset_manifest(kind: &str, records: usize, schema: FeatureSchema, rows: &[&[f64]]) -> DatasetManifest {
    DatasetManifest {
        kind: kind.into(),
        records,
        normalizer: Normalizer::fit(&schema, rows.iter().copied()),
        schema,
        context_dims: None,
        threshold: None,
        skipped_users: Vec::new(),
    }
}

fn gen_data_cmd(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let k = cfg.sim.pages;
    eprintln!("simulating {} users", cfg.sim.population);
    let data = super::gen_data(&cfg)?;
    ctx.write("config.toml", &cfg.to_toml())?;

    let (train, eval) = data.split(&data.rct);
    ctx.write_records("rct_train.jsonl", &train)?;
    ctx.write_records("rct_eval.jsonl", &eval)?;
    let rows: Vec<&[f64]> = train.iter().map(|i| i.x.as_slice()).collect();
    let mut m = dataset_manifest("rct", data.rct.len(), FeatureSchema::rct(k), &rows);
    m.skipped_users = data.rct_skipped.skipped_users.clone();
    m.write(&ctx.path("rct.manifest.json"))?;
    ctx.outputs.push("rct.manifest.json".into());

    let (train, eval) = data.split(&data.transitions);
    ctx.write_records("transitions_train.jsonl", &train)?;
    ctx.write_records("transitions_eval.jsonl", &eval)?;
    let rows: Vec<&[f64]> = train.iter().map(|t| t.s.as_slice()).collect();
    dataset_manifest("transitions", data.transitions.len(), FeatureSchema::state(k), &rows)
        .write(&ctx.path("transitions.manifest.json"))?;
    ctx.outputs.push("transitions.manifest.json".into());

    let (train, eval) = data.split(&data.stream);
    ctx.write_records("stream_train.jsonl", &train)?;
    ctx.write_records("stream_eval.jsonl", &eval)?;
    let joined: Vec<Vec<f64>> = train.iter().map(|i| [i.c.as_slice(), i.v.as_slice()].concat()).collect();
    let rows: Vec<&[f64]> = joined.iter().map(Vec::as_slice).collect();
    let mut m = dataset_manifest("stream", data.stream.len(), FeatureSchema::state(k), &rows);
    m.context_dims = Some(FeatureSchema::context(k).len());
    m.threshold = Some(data.threshold);
    m.write(&ctx.path("stream.manifest.json"))?;
    ctx.outputs.push("stream.manifest.json".into());

    ctx.write("traffic.tsv", &data.traffic.to_text())?;
    eprintln!(
        "wrote {} trial, {} transition and {} stream records",
        data.rct.len(),
        data.transitions.len(),
        data.stream.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct IspEval<'a> {
    initial_loss: f64,
    epoch_loss: &'a [f64],
    steps: usize,
    qini: QiniReport,
    oracle_qini: QiniReport,
}

fn train_isp_cmd(ctx: &mut Ctx) -> Result<()> {
    let train: Vec<RctInstance> = ctx.read("rct_train.jsonl")?;
    let eval: Vec<RctInstance> = ctx.read("rct_eval.jsonl")?;
    eprintln!("training uplift model on {} instances", train.len());
    let (model, report) = train_isp(&ctx.cfg.isp, &train)?;
    model.save(&ctx.path("isp.ckpt"))?;
    ctx.outputs.push("isp.ckpt".into());
    let population = build_population(&ctx.cfg.sim)?;
    let summary = IspEval {
        initial_loss: report.initial_loss,
        epoch_loss: &report.epoch_loss,
        steps: report.steps,
        qini: qini_auuc(&model, &eval)?,
        oracle_qini: oracle_qini(&ctx.cfg.sim, &population, &eval)?,
    };
    eprintln!("eval qini {:.4} (oracle {:.4})", summary.qini.qini, summary.oracle_qini.qini);
    ctx.write_json("isp_eval.json", &summary)
}

#[derive(Serialize)]
struct IitSummary {
    steps: usize,
    final_loss: f64,
    reward_scale: f64,
    alpha_by_hour: Vec<f64>,
}

fn train_iit_cmd(ctx: &mut Ctx, a: &IitArgs) -> Result<()> {
    let c = &mut ctx.cfg.iit;
    c.gamma = a.gamma.unwrap_or(c.gamma);
    c.alpha = a.alpha.unwrap_or(c.alpha);
    c.beta = a.beta.unwrap_or(c.beta);
    c.dynamic_alpha = a.dynamic_alpha.unwrap_or(c.dynamic_alpha);
    c.target_sync = a.target_sync.unwrap_or(c.target_sync);
    c.steps = a.steps.unwrap_or(c.steps);
    c.validate()?;
    let train: Vec<Transition> = ctx.read("transitions_train.jsonl")?;
    let stats = load_traffic(ctx)?;
    eprintln!("training Q-network on {} transitions", train.len());
    let (nets, diag) = train_iit(&ctx.cfg.iit, ctx.cfg.sim.pages, &train, &stats)?;
    nets.save(&ctx.path("iit.ckpt"))?;
    ctx.outputs.push("iit.ckpt".into());
    let tail = &diag.loss[diag.loss.len().saturating_sub(100)..];
    let summary = IitSummary {
        steps: diag.loss.len(),
        final_loss: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        reward_scale: nets.reward_scale,
        alpha_by_hour: (0..24).map(|h| dynamic_alpha(&nets.cfg, &stats, h)).collect(),
    };
    ctx.write_json("iit_train.json", &summary)
}

fn load_traffic(ctx: &Ctx) -> Result<TrafficStats> {
    let path = ctx.path("traffic.tsv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    TrafficStats::from_text(&text)
}

#[derive(Serialize)]
struct AmSummary<'a> {
    initial_loss: f64,
    epoch_loss: &'a [f64],
    eval_auc: Option<f64>,
}

fn train_am_cmd(ctx: &mut Ctx) -> Result<()> {
    let train: Vec<StreamInstance> = ctx.read("stream_train.jsonl")?;
    let eval: Vec<StreamInstance> = ctx.read("stream_eval.jsonl")?;
    eprintln!("training blend-weight model on {} instances", train.len());
    let (model, report) = train_am(&ctx.cfg.am, &train)?;
    model.save(&ctx.path("am.ckpt"))?;
    ctx.outputs.push("am.ckpt".into());
    let models = Models { am: Some(model), ..Models::default() };
    let summary = AmSummary {
        initial_loss: report.initial_loss,
        epoch_loss: &report.epoch_loss,
        eval_auc: super::am_eval_auc(&models, &eval)?,
    };
    ctx.write_json("am_train.json", &summary)
}

fn precompute_cmd(ctx: &mut Ctx) -> Result<()> {
    let isp = IspModel::load(&ctx.path("isp.ckpt"))?;
    let mut store = ScoreStore::new(ctx.cfg.experiment.history_days);
    for name in ["rct_train.jsonl", "rct_eval.jsonl"] {
        for i in ctx.read::<RctInstance>(name)? {
            store.insert(i.user_id, isp.predict_static_preferences(&i.x)?);
        }
    }
    eprintln!("scored {} users", store.len());
    ctx.write("scores.tsv", &store.to_text())
}

fn load_models(ctx: &Ctx, policies: &[PolicySpec]) -> Result<Models> {
    let mut m = Models::default();
    if policies.iter().any(|p| p.needs_isp()) {
        m.isp = Some(IspModel::load(&ctx.path("isp.ckpt"))?);
    }
    if policies.iter().any(|p| p.needs_iit()) {
        m.iit = Some(QNets::load(&ctx.path("iit.ckpt"))?);
    }
    if policies.iter().any(|p| p.needs_am()) {
        m.am = Some(AmModel::load(&ctx.path("am.ckpt"))?);
    }
    Ok(m)
}

#[derive(Serialize)]
struct ArmRecord<'a> {
    policy: &'a str,
    seed: u64,
    #[serde(flatten)]
    metrics: &'a super::ArmMetrics,
}

fn write_eval(ctx: &mut Ctx, prefix: &str, report: &EvalReport) -> Result<()> {
    let records: Vec<ArmRecord> = report
        .arms
        .iter()
        .flat_map(|a| {
            a.per_seed.iter().zip(&report.seeds).map(|(m, &seed)| ArmRecord { policy: &a.policy, seed, metrics: m })
        })
        .collect();
    ctx.write_records(&format!("{prefix}_report.jsonl"), &records)?;
    ctx.write_json(&format!("{prefix}_summary.json"), report)?;
    let table = report.to_table();
    eprint!("{table}");
    ctx.write(&format!("{prefix}_table.txt"), &table)
}

fn simulate_cmd(ctx: &mut Ctx, policy: PolicySpec, days: Option<usize>, seed: Option<u64>) -> Result<()> {
    policy.validate(ctx.cfg.sim.pages)?;
    let models = load_models(ctx, &[policy])?;
    let seed = seed.unwrap_or(ctx.cfg.experiment.eval_seeds[0]);
    let days = days.unwrap_or(ctx.cfg.sim.days);
    let report = run_experiment(&ctx.cfg, &models, &[policy], &[seed], days)?;
    write_eval(ctx, "simulate", &report)
}

fn evaluate_cmd(ctx: &mut Ctx) -> Result<()> {
    let e = ctx.cfg.experiment.clone();
    let models = load_models(ctx, &e.policies)?;
    eprintln!("evaluating {:?} on {} seeds", arm_labels(&e.policies), e.eval_seeds.len());
    let report = run_experiment(&ctx.cfg, &models, &e.policies, &e.eval_seeds, e.eval_days)?;
    write_eval(ctx, "eval", &report)
}

fn report_cmd(ctx: &mut Ctx) -> Result<()> {
    let path = ctx.path("eval_summary.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let report: EvalReport = serde_json::from_str(&text)?;
    let mut md = format!(
        "# Evaluation\n\n{} seeds, {} days per run.\n\n```\n{}```\n",
        report.seeds.len(),
        report.days,
        report.to_table()
    );
    let bars: Vec<(String, f64)> = report.arms.iter().map(|a| (a.policy.clone(), a.mean_usage)).collect();
    ctx.write("usage_by_policy.svg", &bar_chart("Mean usage per session", "seconds", &bars))?;

    let qini_path = ctx.path("isp_eval.json");
    if qini_path.exists() {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&qini_path)?)?;
        let model: QiniReport = serde_json::from_value(v["qini"].clone())?;
        let oracle: QiniReport = serde_json::from_value(v["oracle_qini"].clone())?;
        md.push_str(&format!("\nQini: model {:.4}, oracle {:.4}\n", model.qini, oracle.qini));
        let mut series = Vec::new();
        for (tag, r) in [("model", &model), ("oracle", &oracle)] {
            for s in &r.per_treatment {
                series.push(Series {
                    label: format!("{tag} t={}", s.treatment),
                    points: s.curve.iter().enumerate().map(|(i, g)| (i as f64 / 100.0, *g)).collect(),
                });
            }
        }
        ctx.write("qini_curves.svg", &line_chart("Qini curves", "population fraction", "incremental usage", &series))?;
    }
    if ctx.path("traffic.tsv").exists() {
        let stats = load_traffic(ctx)?;
        let alpha: Vec<(f64, f64)> =
            (0..24u8).map(|h| (f64::from(h), dynamic_alpha(&ctx.cfg.iit, &stats, h))).collect();
        let traffic: Vec<(f64, f64)> = stats.v.iter().enumerate().map(|(h, v)| (h as f64, *v)).collect();
        let series = [
            Series { label: "alpha_t".into(), points: alpha },
            Series { label: "traffic V_t".into(), points: traffic },
        ];
        ctx.write("alpha_by_hour.svg", &line_chart("Conservative weight by hour", "hour", "value", &series))?;
    }
    ctx.write("report.md", &md)?;
    print!("{md}");
    Ok(())
}

fn read_vectors(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("{}: `{t}`: {e}", path.display()))))
                .collect()
        })
        .collect()
}

fn fuse_cmd(ctx: &mut Ctx, delta: &Path, p: &Path, gamma: &Path) -> Result<()> {
    let (d, p, g) = (read_vectors(delta)?, read_vectors(p)?, read_vectors(gamma)?);
    if d.len() != p.len() || d.len() != g.len() {
        return Err(Error::Data(format!("line counts differ: δ {}, p {}, γ {}", d.len(), p.len(), g.len())));
    }
    let mut out = String::new();
    for ((d, p), g) in d.iter().zip(&p).zip(&g) {
        let sigma = fuse_scores(d, p, g)?;
        let k = select_page(&sigma)?;
        let cols: Vec<String> = sigma.iter().map(|s| format!("{s:?}")).collect();
        out.push_str(&format!("{}\t{k}\n", cols.join(" ")));
    }
    print!("{out}");
    ctx.write("fuse.tsv", &out)
}
