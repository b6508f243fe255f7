use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pdprune::analysis::AnalysisReport;
use pdprune::distill::distill_plan;
use pdprune::kv_prune::{
    select_layers, transfer_volume_for_plan, KVSelectionPlan, KvPlanReport, TransferScenario,
};
use pdprune::model::calibration::generate_calibration;
use pdprune::model::{checkpoint, TransformerModel};
use pdprune::pipeline::{
    analyze, calibration_attention, search, Analysis, PlanReport, SearchSettings,
};
use pdprune::plan::{MergedBlocks, StagePlan, StageViews};
use pdprune::runtime::scenario::{
    BandwidthReport, E2eScenario, PreparedScenario, Scenario, ScenarioFile, ScenarioPlan,
    ScenarioReport,
};
use pdprune::runtime::{transfer_metrics, Transport};
use pdprune::search::DEFAULT_CAP;
use pdprune::verify::run_suite;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::config::{resolve_seed, RunConfig, SEED_ENV};
use crate::{Command, Common};

const GB: f64 = (1u64 << 30) as f64;

struct Ctx {
    config: RunConfig,
    model_path: PathBuf,
    json: bool,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    fn load_model(&self) -> Result<(TransformerModel, MergedBlocks)> {
        if !self.model_path.exists() {
            bail!(
                "model file {} not found; run `pdprune analyze` first or pass --model",
                self.model_path.display()
            );
        }
        checkpoint::load(&self.model_path)
            .with_context(|| format!("cannot load model {}", self.model_path.display()))
    }

    fn calibration(&self, model: &TransformerModel) -> Result<Vec<Vec<u32>>> {
        Ok(self
            .config
            .instance
            .calibration
            .generate(model.config.vocab)?)
    }

    fn prompt(&self, model: &TransformerModel) -> Result<Vec<u32>> {
        let spec = self.config.prompt;
        Ok(generate_calibration(spec.seed, 1, spec.len, model.config.vocab)?.remove(0))
    }

    /// `plan.json` when present, otherwise no removals.
    fn plan_or_empty(&self, n_blocks: usize) -> Result<StagePlan> {
        let path = self.out("plan.json");
        if !path.exists() {
            return Ok(StagePlan::unified(Vec::new()));
        }
        let report: PlanReport = read_json(&path)?;
        if report.n_blocks != n_blocks {
            bail!(
                "inconsistent inputs: plan.json n_blocks = {} but the model has {n_blocks} blocks",
                report.n_blocks
            );
        }
        Ok(report.stage_plan()?)
    }

    fn emit<T: Serialize>(&self, value: &T, summary: impl FnOnce() -> String) -> Result<()> {
        if self.json {
            println!("{}", serde_json::to_string_pretty(value)?);
        } else {
            println!("{}", summary());
        }
        Ok(())
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn build_config(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        c.out_dir = out.clone();
    }
    if let Some(k) = common.k {
        c.k = k;
    }
    if let Some((t0, alpha, t_min)) = common.schedule {
        c.schedule.t0 = t0;
        c.schedule.alpha = alpha;
        c.schedule.t_min = t_min;
    }
    c.schedule.seed = resolve_seed(common.seed, std::env::var(SEED_ENV).ok(), c.schedule.seed)?;
    if let Some(v) = common.d_threshold {
        c.d_threshold = v;
    }
    if let Some(v) = common.theta {
        c.theta = v;
    }
    if let Some(v) = common.p {
        c.kv.p = v;
    }
    if let Some(v) = common.gamma {
        c.kv.gamma = v;
    }
    if let Some(v) = common.n {
        c.kv.n = v;
    }
    if let Some(v) = &common.scenario {
        c.scenario = Some(v.clone());
    }
    if let Some(v) = common.steps {
        c.steps = v;
    }
    if let Some(v) = common.timeout_ms {
        c.timeout_ms = v;
    }
    if c.k == 0 {
        bail!("invalid argument: k must be at least 1");
    }
    c.schedule.validate()?;
    Ok(c)
}

/// Returns whether every requested check passed.
pub fn run(common: &Common, command: &Command) -> Result<bool> {
    let config = build_config(common)?;
    let model_path = common
        .model
        .clone()
        .unwrap_or_else(|| config.out_dir.join("model.bin"));
    let ctx = Ctx {
        config,
        model_path,
        json: common.json,
    };
    match command {
        Command::Analyze => cmd_analyze(&ctx, common.model.is_some()),
        Command::Search { oracle } => cmd_search(&ctx, *oracle),
        Command::Distill => cmd_distill(&ctx),
        Command::KvSelect => cmd_kv_select(&ctx),
        Command::Simulate { check_oracle } => cmd_simulate(&ctx, *check_oracle),
        Command::Bandwidth => cmd_bandwidth(&ctx),
        Command::Verify { scenarios } => cmd_verify(&ctx, scenarios),
    }
}

fn cmd_analyze(ctx: &Ctx, given_model: bool) -> Result<bool> {
    let c = &ctx.config;
    let model = if given_model {
        ctx.load_model()?.0
    } else {
        let toy = c.instance.train()?;
        let path = ctx.out("model.bin");
        std::fs::create_dir_all(&c.out_dir)
            .with_context(|| format!("cannot create {}", c.out_dir.display()))?;
        checkpoint::save(&path, &toy.model, &MergedBlocks::new())?;
        log::info!(
            "trained toy model: loss {:.4} -> {:.4}",
            toy.initial_loss,
            toy.final_loss
        );
        toy.model
    };
    let calibration = ctx.calibration(&model)?;
    let a = analyze(&model, &calibration, c.k, c.d_threshold)?;
    let report = AnalysisReport::new(&a.profile, &a.partition, c.k, a.norm_profile.clone());
    write_json(&ctx.out("analysis.json"), &report)?;
    ctx.emit(&report, || {
        let fmt = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.4}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "r: {}\nd: {}\nP_initial: {:?}\ndistill pairs: {:?}\nP_final: {:?}\nwrote {}",
            fmt(&report.redundancy),
            fmt(&report.pair_metric),
            report.p_initial,
            report.distillation,
            report.p_final,
            ctx.out("analysis.json").display()
        )
    })?;
    Ok(true)
}

fn load_analysis(ctx: &Ctx, model: &TransformerModel) -> Result<Analysis> {
    let path = ctx.out("analysis.json");
    if !path.exists() {
        bail!("{} not found; run `pdprune analyze` first", path.display());
    }
    let report: AnalysisReport = read_json(&path)?;
    if report.n_blocks != model.blocks.len() {
        bail!(
            "inconsistent inputs: analysis.json n_blocks = {} but the model has {} blocks",
            report.n_blocks,
            model.blocks.len()
        );
    }
    Ok(Analysis {
        profile: report.profile(),
        partition: report.partition()?,
        norm_profile: report.norm_profile.clone(),
    })
}

fn cmd_search(ctx: &Ctx, oracle: bool) -> Result<bool> {
    let c = &ctx.config;
    let (model, _) = ctx.load_model()?;
    let analysis = load_analysis(ctx, &model)?;
    let report: AnalysisReport = read_json(&ctx.out("analysis.json"))?;
    if report.k != c.k {
        bail!(
            "inconsistent inputs: analysis.json k = {} but k = {} was requested; rerun analyze with the same k",
            report.k,
            c.k
        );
    }
    let settings = SearchSettings {
        k: c.k,
        schedule: c.schedule,
        threshold: c.theta,
        oracle,
        oracle_cap: DEFAULT_CAP,
    };
    let calibration = ctx.calibration(&model)?;
    let plan = search(&model, &calibration, &analysis, &settings)?;
    write_json(&ctx.out("plan.json"), &plan)?;
    ctx.emit(&plan, || {
        let mut lines = vec![format!(
            "best f = {:.6} after {} iterations (seed {})",
            plan.best_f, plan.iterations, plan.seed
        )];
        for e in &plan.elements {
            let stage = if e.prefill {
                "prefill+decode"
            } else {
                "decode only"
            };
            lines.push(format!("  remove {} ({stage})", e.element));
        }
        if let (Some(o), Some(m)) = (&plan.oracle, plan.oracle_match) {
            lines.push(format!(
                "oracle: f = {:.6} over {} subsets, oracle_match: {m}",
                o.best_f, o.evaluated
            ));
        }
        lines.push(format!("wrote {}", ctx.out("plan.json").display()));
        lines.join("\n")
    })?;
    Ok(plan.oracle_match.unwrap_or(true))
}

#[derive(Debug, Serialize, Deserialize)]
struct DistillReport {
    format_version: u32,
    pairs: Vec<DistilledPair>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DistilledPair {
    first: usize,
    initial_mse: f64,
    final_mse: f64,
    initial_loss: f64,
    best_loss: f64,
    steps: usize,
}

fn cmd_distill(ctx: &Ctx) -> Result<bool> {
    let (model, _) = ctx.load_model()?;
    let analysis = load_analysis(ctx, &model)?;
    let plan_path = ctx.out("plan.json");
    if !plan_path.exists() {
        bail!(
            "{} not found; run `pdprune search` first",
            plan_path.display()
        );
    }
    let plan = ctx.plan_or_empty(model.blocks.len())?;
    let calibration = ctx.calibration(&model)?;
    let (merged, outcomes) = distill_plan(
        &model,
        &plan,
        &analysis.profile.redundancy,
        &calibration,
        ctx.config.distill,
    )?;
    let out_model = ctx.out("model.bin");
    checkpoint::save(&out_model, &model, &merged)?;
    let report = DistillReport {
        format_version: 1,
        pairs: outcomes
            .iter()
            .map(|o| DistilledPair {
                first: o.merged.first,
                initial_mse: o.initial_mse,
                final_mse: o.final_mse,
                initial_loss: o.initial_loss,
                best_loss: o.best_loss,
                steps: ctx.config.distill.steps,
            })
            .collect(),
    };
    write_json(&ctx.out("distill.json"), &report)?;
    ctx.emit(&report, || {
        let mut lines: Vec<String> = report
            .pairs
            .iter()
            .map(|p| {
                format!(
                    "pair ({}, {}): mse {:.5} -> {:.5}",
                    p.first,
                    p.first + 1,
                    p.initial_mse,
                    p.final_mse
                )
            })
            .collect();
        if lines.is_empty() {
            lines.push("plan has no distill elements".into());
        }
        lines.push(format!("wrote {}", out_model.display()));
        lines.join("\n")
    })?;
    Ok(report.pairs.iter().all(|p| p.final_mse <= p.initial_mse))
}

fn cmd_kv_select(ctx: &Ctx) -> Result<bool> {
    let c = &ctx.config;
    let (model, merged) = ctx.load_model()?;
    let plan = ctx.plan_or_empty(model.blocks.len())?;
    let views = StageViews::new(&model, &plan, &merged)?;
    let stats = calibration_attention(&views.decode, &ctx.calibration(&model)?)?;
    let kv = select_layers(&stats, c.kv.p, c.kv.gamma, c.kv.n)?;
    let report = KvPlanReport::new(&kv, c.prompt.len);
    write_json(&ctx.out("kvplan.json"), &report)?;
    ctx.emit(&report, || {
        let mut lines: Vec<String> = report
            .scores
            .iter()
            .map(|s| {
                let mark = if kv.is_selected(s.layer) { "*" } else { " " };
                format!(
                    "{mark} layer {:>2}: rho {:.4} admissible {}",
                    s.layer, s.rho, s.admissible
                )
            })
            .collect();
        lines.push(format!("selected {:?}", report.selected_layers));
        lines.push(format!("wrote {}", ctx.out("kvplan.json").display()));
        lines.join("\n")
    })?;
    Ok(true)
}

/// KV plan for simulation and byte counting: `n = 0` disables pruning,
/// otherwise `kvplan.json` must exist.
fn load_kv(ctx: &Ctx, plan: &StagePlan, n_blocks: usize) -> Result<KVSelectionPlan> {
    let c = &ctx.config;
    if c.kv.n == 0 {
        return Ok(KVSelectionPlan::disabled(c.kv.p, c.kv.gamma));
    }
    let path = ctx.out("kvplan.json");
    if !path.exists() {
        bail!(
            "{} not found; run `pdprune kv-select` first or pass --n 0",
            path.display()
        );
    }
    let kv = read_json::<KvPlanReport>(&path)?.plan()?;
    let decode = plan.decode_slots(n_blocks)?;
    if let Some(l) = kv.selected_layers.iter().find(|l| !decode.contains(l)) {
        bail!("inconsistent inputs: kvplan.json selects layer {l}, which plan.json removes from the decode model");
    }
    Ok(kv)
}

fn scenario_file(ctx: &Ctx) -> Result<Option<ScenarioFile>> {
    ctx.config
        .scenario
        .as_ref()
        .map(|p| ScenarioFile::load(p).with_context(|| format!("scenario {}", p.display())))
        .transpose()
}

fn artifact_scenario(ctx: &Ctx) -> Result<(E2eScenario, PreparedScenario)> {
    let c = &ctx.config;
    let (model, merged) = ctx.load_model()?;
    let plan = ctx.plan_or_empty(model.blocks.len())?;
    let kv_plan = load_kv(ctx, &plan, model.blocks.len())?;
    let prompt = ctx.prompt(&model)?;
    let scenario = E2eScenario {
        name: "artifacts".into(),
        description: String::new(),
        instance: c.instance,
        plan: ScenarioPlan {
            prefill_removals: plan.prefill_removals.clone(),
            decode_removals: plan.decode_removals.clone(),
        },
        distill: None,
        kv: c.kv,
        prompt: c.prompt,
        steps: c.steps,
        dtype: c.dtype,
        link: c.link,
        timeout_ms: c.timeout_ms,
    };
    Ok((
        scenario,
        PreparedScenario {
            model,
            plan,
            merged,
            kv_plan,
            prompt,
        },
    ))
}

fn cmd_simulate(ctx: &Ctx, check_oracle: bool) -> Result<bool> {
    let report: ScenarioReport = match scenario_file(ctx)? {
        Some(file) => match file.scenario {
            Scenario::E2e(s) => s.run()?,
            Scenario::Bandwidth(s) => bail!(
                "scenario {} only counts bytes; use `pdprune bandwidth`",
                s.name
            ),
        },
        None => {
            let (s, prep) = artifact_scenario(ctx)?;
            s.run_prepared(&prep)?
        }
    };
    write_json(&ctx.out("metrics.json"), &report)?;
    ctx.emit(&report, || {
        let mut lines = vec![format!("scenario {}", report.name)];
        for r in &report.runs {
            let via = match r.transport {
                Transport::Channel => "channel".to_string(),
                Transport::Loopback { timeout_ms } => {
                    format!("loopback tcp, timeout {timeout_ms} ms")
                }
            };
            lines.push(format!(
                "  {via}: {:?} ({} frame bytes)",
                r.transcript, r.frame_bytes
            ));
        }
        lines.push(format!("reference: {:?}", report.reference_transcript));
        lines.push(format!("transcripts_equal: {}", report.transcripts_equal));
        lines.push(format!(
            "round_trip_identical: {}",
            report.round_trip_identical
        ));
        lines.push(format!("cache_monotonic: {}", report.cache_monotonic));
        lines.push(format!(
            "kv payload {} of {} bytes, ratio {:.4} (closed form {:.4}, consistent: {})",
            report.kv_payload_bytes,
            report.full_kv_payload_bytes,
            report.full_kv_payload_bytes as f64 / report.kv_payload_bytes as f64,
            report.volume.ratio,
            report.volume_consistent
        ));
        lines.push(format!("wrote {}", ctx.out("metrics.json").display()));
        lines.join("\n")
    })?;
    Ok(!check_oracle || report.passed())
}

fn cmd_bandwidth(ctx: &Ctx) -> Result<bool> {
    let c = &ctx.config;
    let report = match scenario_file(ctx)? {
        Some(ScenarioFile {
            scenario: Scenario::Bandwidth(s),
            ..
        }) => s.run()?,
        other => {
            let (name, prep) = match other {
                Some(ScenarioFile {
                    scenario: Scenario::E2e(s),
                    ..
                }) => (s.name.clone(), s.prepare()?),
                _ => {
                    let (s, prep) = artifact_scenario(ctx)?;
                    (s.name, prep)
                }
            };
            let cfg = &prep.model.config;
            let geometry = TransferScenario {
                total_layers: cfg.n_blocks,
                n_kv_heads: cfg.n_heads,
                head_dim: cfg.head_dim,
                dtype_bytes: c.dtype.size(),
                seq_len: prep.prompt.len(),
            };
            let volume = transfer_volume_for_plan(&geometry, &prep.plan, &prep.kv_plan)?;
            BandwidthReport {
                name,
                calibrated: false,
                volume,
                full_gib: volume.bytes_full as f64 / GB,
                pruned_gib: volume.bytes_pruned as f64 / GB,
                full_transfer: transfer_metrics(volume.bytes_full, &c.link)?,
                pruned_transfer: transfer_metrics(volume.bytes_pruned, &c.link)?,
            }
        }
    };
    ctx.emit(&report, || {
        let v = &report.volume;
        let mut s = format!(
            "{}: full={:.1} GB ({} bytes) pruned={:.2} GB ({} bytes) ratio={:.3}x\ntransfer: full {:.6} s, pruned {:.6} s",
            report.name,
            report.full_gib,
            v.bytes_full,
            report.pruned_gib,
            v.bytes_pruned,
            v.ratio,
            report.full_transfer.time_s,
            report.pruned_transfer.time_s
        );
        if report.calibrated {
            s.push_str("\nnote: calibrated scenario; its parameters reproduce a target, they are not derived");
        }
        s
    })?;
    Ok(true)
}

fn cmd_verify(ctx: &Ctx, scenarios: &Path) -> Result<bool> {
    if !scenarios.is_dir() {
        bail!(
            "scenario directory {} not found; pass --scenarios",
            scenarios.display()
        );
    }
    let json = ctx.json;
    let outcomes = run_suite(scenarios, |o| {
        if !json {
            println!("{o}");
        }
    });
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if json {
        println!("{}", serde_json::to_string_pretty(&outcomes)?);
    } else {
        println!("{} passed, {failed} failed", outcomes.len() - failed);
    }
    Ok(failed == 0)
}
