//! Self-check suite: each check compares a component against an
//! independent oracle or a fixed reference value.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::analysis::{
    build_distillation_set, build_final_pruning_set, build_initial_pruning_set, DistillPair,
};
use crate::distill::{distill_pair, DistillConfig, DistillJob};
use crate::kv_prune::{
    head_score, layer_score, select_from_scores, select_layers, transfer_volume, TransferScenario,
};
use crate::model::train::{block_loss, block_loss_and_grad};
use crate::model::{AttentionStats, Block, BlockShape};
use crate::objective::ModelObjective;
use crate::pipeline::{analyze_default, search, Analysis, SearchSettings, ToyInstance, TrainedToy};
use crate::plan::{MergedBlocks, RemovalElement, StagePlan};
use crate::rng::{stream, Stream};
use crate::runtime::scenario::{load_dir, Scenario};
use crate::runtime::{error_bound, PerturbationCase};
use crate::search::{assign_stages, run_annealing, AnnealingSchedule, DEFAULT_THRESHOLD};
use rand::Rng;
use serde::{Deserialize, Serialize};

type Check = Result<String, String>;
type CheckFn<'a> = Box<dyn Fn() -> Check + 'a>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(
        elapsed < limit,
        format!("took {elapsed:.2?}, limit {limit:?}"),
    )
}

struct Toy {
    trained: TrainedToy,
    analysis: Analysis,
}

fn toy() -> Result<Toy, String> {
    let trained = ToyInstance::default().train().map_err(|e| e.to_string())?;
    let analysis =
        analyze_default(&trained.model, &trained.calibration, 3).map_err(|e| e.to_string())?;
    Ok(Toy { trained, analysis })
}

fn iteration_count(toy: &Toy) -> Check {
    let schedule = AnnealingSchedule::default();
    ensure(
        schedule.iterations() == 36,
        format!("schedule has {} temperatures", schedule.iterations()),
    )?;
    let merged = MergedBlocks::initialized(
        &toy.trained.model,
        &toy.analysis.partition.distill_firsts(),
        &toy.analysis.profile.redundancy,
    );
    let mut objective = ModelObjective::new(&toy.trained.model, &toy.trained.calibration, &merged);
    let start = Instant::now();
    let out = run_annealing(
        &toy.analysis.partition,
        &toy.analysis.profile,
        3,
        &schedule,
        |s| objective.unified(s),
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(
        out.iterations == 36 && out.audit.len() == 36,
        format!(
            "loop ran {} iterations with {} audit entries",
            out.iterations,
            out.audit.len()
        ),
    )?;
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("36 iterations in {elapsed:.2?}"))
}

fn global_optimum(toy: &Toy) -> Check {
    let settings = SearchSettings {
        oracle: true,
        ..SearchSettings::default()
    };
    let start = Instant::now();
    let report = search(
        &toy.trained.model,
        &toy.trained.calibration,
        &toy.analysis,
        &settings,
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let oracle = report.oracle.as_ref().ok_or("no oracle result")?;
    ensure(
        report.best_f == oracle.best_f,
        format!(
            "annealing {} vs exhaustive {} (seed {})",
            report.best_f, oracle.best_f, settings.schedule.seed
        ),
    )?;
    within(elapsed, Duration::from_secs(30))?;
    Ok(format!(
        "f = {:.6} over {} subsets, seed {}, {elapsed:.2?}",
        oracle.best_f, oracle.evaluated, settings.schedule.seed
    ))
}

/// Top `⌈k/2⌉` by redundancy, then repeatedly the highest admissible pair.
fn naive_sets(
    r: &[f64],
    d: &[f64],
    k: usize,
    d_t: f64,
) -> (BTreeSet<usize>, Vec<usize>, BTreeSet<usize>) {
    let n = r.len();
    let m = k.div_ceil(2);
    let mut p_init = BTreeSet::new();
    while p_init.len() < m {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if !p_init.contains(&i) && best.is_none_or(|b| r[i] > r[b]) {
                best = Some(i);
            }
        }
        p_init.insert(best.unwrap());
    }
    let mut used: BTreeSet<usize> = BTreeSet::new();
    let mut pairs = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..d.len() {
            let free = !p_init.contains(&i)
                && !p_init.contains(&(i + 1))
                && !used.contains(&i)
                && !used.contains(&(i + 1));
            if free && d[i] >= d_t && best.is_none_or(|b| d[i] > d[b]) {
                best = Some(i);
            }
        }
        match best {
            Some(i) => {
                used.insert(i);
                used.insert(i + 1);
                pairs.push(i);
            }
            None => break,
        }
    }
    pairs.sort_unstable();
    let p_final = (0..n).filter(|i| !used.contains(i)).collect();
    (p_init, pairs, p_final)
}

fn set_construction() -> Check {
    let mut rng = stream(3, Stream::Verification);
    let levels = [0.9, 0.93, 0.95, 0.96, 0.97, 0.99];
    let mut violations = Vec::new();
    for case in 0..1000 {
        let n = rng.gen_range(2..=14);
        let k = rng.gen_range(1..n);
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len)
                .map(|_| {
                    if rng.gen_bool(0.5) {
                        levels[rng.gen_range(0..levels.len())]
                    } else {
                        rng.gen_range(0.5..1.0)
                    }
                })
                .collect()
        };
        let r = draw(n);
        let d = draw(n - 1);
        let d_t = [0.9, 0.95, 0.97][case % 3];
        let p_init = build_initial_pruning_set(&r, k).map_err(|e| e.to_string())?;
        let pairs: Vec<DistillPair> = build_distillation_set(&d, d_t, &p_init);
        let p_final = build_final_pruning_set(&pairs, n);
        let firsts: Vec<usize> = pairs.iter().map(|p| p.first).collect();
        let covered: Vec<usize> = firsts.iter().flat_map(|&i| [i, i + 1]).collect();
        let covered_set: BTreeSet<usize> = covered.iter().copied().collect();
        let all: BTreeSet<usize> = p_final.union(&covered_set).copied().collect();
        let ok = covered.len() == covered_set.len()
            && p_final.is_disjoint(&covered_set)
            && all.len() == n
            && all.iter().all(|&i| i < n)
            && p_init.is_subset(&p_final)
            && pairs
                .iter()
                .all(|p| p.metric >= d_t && p.metric == d[p.first]);
        let oracle = naive_sets(&r, &d, k, d_t);
        if !ok || oracle != (p_init.clone(), firsts.clone(), p_final.clone()) {
            violations.push(case);
        }
    }
    ensure(
        violations.is_empty(),
        format!(
            "{} violations, first at case {:?}",
            violations.len(),
            violations.first()
        ),
    )?;
    Ok("1000 profiles, 0 violations".into())
}

fn random_block(seed: u64) -> (Block, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let shape = BlockShape {
        d_model: 8,
        n_heads: 2,
        head_dim: 4,
        d_ff: 12,
    };
    let mut rng = stream(seed, Stream::Verification);
    let mut block = Block::init(shape, &mut rng);
    for p in [
        &mut block.attn_norm,
        &mut block.mlp_norm,
        &mut block.b_up,
        &mut block.b_down,
    ] {
        for x in p.iter_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    let mut seqs = || -> Vec<Vec<f64>> {
        (0..2)
            .map(|_| (0..4 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    };
    let inputs = seqs();
    let targets = seqs();
    (block, inputs, targets)
}

fn gradients() -> Check {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let (block, inputs, targets) = random_block(seed);
        let (_, grads) =
            block_loss_and_grad(&block, &inputs, &targets).map_err(|e| e.to_string())?;
        for (pi, analytic) in grads.params().iter().enumerate() {
            let mut diff = 0.0;
            let mut scale = 0.0;
            for (j, a) in analytic.iter().enumerate() {
                let mut plus = block.clone();
                plus.params_mut()[pi][j] += h;
                let mut minus = block.clone();
                minus.params_mut()[pi][j] -= h;
                let num = (block_loss(&plus, &inputs, &targets).unwrap()
                    - block_loss(&minus, &inputs, &targets).unwrap())
                    / (2.0 * h);
                diff += (a - num).powi(2);
                scale += num * num;
            }
            let rel = diff.sqrt() / scale.sqrt().max(1e-8);
            worst = worst.max(rel);
            ensure(
                rel < 1e-4,
                format!(
                    "seed {seed} {}: relative error {rel:.2e}",
                    Block::PARAM_NAMES[pi]
                ),
            )?;
        }
    }
    Ok(format!(
        "10 seeds x 10 tensors, worst relative error {worst:.2e}"
    ))
}

fn perturbation_bound() -> Check {
    let scales = [1e-4, 1e-3, 1e-2];
    let mut rng = stream(5, Stream::Verification);
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let d = [2, 4, 8, 16][rng.gen_range(0..4)];
        let n = rng.gen_range(1..=16);
        let d_v = [2, 4, 8, 16][rng.gen_range(0..4)];
        let case = PerturbationCase::random(100 + i, d, n, d_v, scales[i as usize % 3]);
        let (e, b) = error_bound(&case).map_err(|e| e.to_string())?;
        ensure(e <= b, format!("case {i}: empirical {e} > bound {b}"))?;
        worst = worst.max(e / b);
    }
    let mut zero = PerturbationCase::random(1, 8, 6, 8, 1e-3);
    for v in [&mut zero.dq, &mut zero.dk, &mut zero.dv] {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
    let z = error_bound(&zero).map_err(|e| e.to_string())?;
    ensure(z == (0.0, 0.0), format!("zero perturbation gave {z:?}"))?;
    Ok(format!(
        "100 cases, 0 violations, max empirical/bound {worst:.3}"
    ))
}

fn naive_selection(stats: &AttentionStats, p: f64, gamma: f64, n: usize) -> Vec<usize> {
    let m = (p * stats.n_tokens as f64 + 1e-9).floor() as usize;
    let mut scored: Vec<(usize, f64)> = Vec::new();
    for (li, l) in stats.layers.iter().enumerate() {
        let heads: Vec<f64> = (0..l.head_sums.len())
            .map(|h| {
                let a = stats.distribution(li, h);
                (0..a.len())
                    .filter(|&i| i < m || i >= a.len() - m)
                    .map(|i| a[i])
                    .sum()
            })
            .collect();
        if heads.iter().any(|&s| s < gamma) {
            continue;
        }
        let mu = heads.iter().sum::<f64>() / heads.len() as f64;
        let sigma =
            (heads.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / heads.len() as f64).sqrt();
        scored.push((l.layer, mu * (1.0 - sigma / (mu + 1e-12))));
    }
    let mut chosen = Vec::new();
    while chosen.len() < n {
        let mut best: Option<(usize, f64)> = None;
        for &(layer, rho) in &scored {
            if !chosen.contains(&layer)
                && best.is_none_or(|(bl, br)| rho > br || (rho == br && layer < bl))
            {
                best = Some((layer, rho));
            }
        }
        match best {
            Some((layer, _)) => chosen.push(layer),
            None => break,
        }
    }
    chosen.sort_unstable();
    chosen
}

fn kv_selection() -> Check {
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    let s1 =
        head_score(&[0.4, 0.05, 0.05, 0.05, 0.05, 0.4], 1.0 / 6.0).map_err(|e| e.to_string())?;
    let s2 = head_score(&[0.1; 10], 0.3).map_err(|e| e.to_string())?;
    ensure(
        close(s1, 0.8) && close(s2, 0.6),
        format!("head scores {s1}, {s2}"),
    )?;
    let r1 = layer_score(&[0.8, 0.8, 0.8], 1e-12);
    let r2 = layer_score(&[0.6, 1.0], 1e-12);
    let r3 = layer_score(&[0.0, 0.0], 1e-12);
    ensure(
        close(r1, 0.8) && close(r2, 0.6) && r3 == 0.0,
        format!("layer scores {r1}, {r2}, {r3}"),
    )?;
    let example: Vec<(usize, Vec<f64>)> = [0.6, 0.9, 0.7, 0.85]
        .iter()
        .enumerate()
        .map(|(l, &s)| (l, vec![s]))
        .collect();
    let plan = select_from_scores(&example, 0.3, 0.0, 2).map_err(|e| e.to_string())?;
    ensure(
        plan.selected_layers == [1, 3],
        format!("example selected {:?}", plan.selected_layers),
    )?;

    let mut rng = stream(6, Stream::Verification);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n_tokens = rng.gen_range(2..=40);
        let n_layers = rng.gen_range(1..=8);
        let n_heads = rng.gen_range(1..=4);
        let mut layers: Vec<(usize, Vec<Vec<f64>>)> = Vec::new();
        let mut id = 0;
        for _ in 0..n_layers {
            id += rng.gen_range(1..=3);
            let heads = if !layers.is_empty() && rng.gen_bool(0.2) {
                layers[rng.gen_range(0..layers.len())].1.clone()
            } else {
                (0..n_heads)
                    .map(|_| {
                        let raw: Vec<f64> =
                            (0..n_tokens).map(|_| rng.gen::<f64>().powi(3)).collect();
                        let total: f64 = raw.iter().sum();
                        raw.iter().map(|x| x / total).collect()
                    })
                    .collect()
            };
            layers.push((id, heads));
        }
        let stats = AttentionStats::from_distributions(n_tokens, layers);
        let p = rng.gen_range(0.0..0.5);
        let gamma = if rng.gen_bool(0.2) {
            0.0
        } else {
            rng.gen_range(0.0..1.0)
        };
        let n = rng.gen_range(0..=n_layers + 1);
        let got = select_layers(&stats, p, gamma, n).map_err(|e| e.to_string())?;
        if got.selected_layers != naive_selection(&stats, p, gamma, n) {
            mismatches += 1;
        }
    }
    ensure(mismatches == 0, format!("{mismatches} mismatches"))?;
    Ok("unit examples exact to 1e-12, 1000 random stats, 0 mismatches".into())
}

fn bandwidth(dir: &Path) -> Check {
    let mut rng = stream(7, Stream::Verification);
    for case in 0..100 {
        let total = rng.gen_range(1..=40);
        let scenario = TransferScenario {
            total_layers: total,
            n_kv_heads: rng.gen_range(1..=16),
            head_dim: [32, 64, 128][rng.gen_range(0..3)],
            dtype_bytes: [1, 2, 4, 8][rng.gen_range(0..4)],
            seq_len: rng.gen_range(1..=100_000),
        };
        let prefill: BTreeSet<usize> = (0..total).filter(|_| rng.gen_bool(0.9)).collect();
        let decode: BTreeSet<usize> = prefill
            .iter()
            .copied()
            .filter(|_| rng.gen_bool(0.8))
            .collect();
        let selected: Vec<usize> = (0..total).filter(|_| rng.gen_bool(0.5)).collect();
        let permille: u64 = rng.gen_range(0..500);
        let p = permille as f64 / 1000.0;
        let got = transfer_volume(&scenario, &prefill, &decode, &selected, p)
            .map_err(|e| e.to_string())?;
        let per =
            2 * scenario.n_kv_heads as u64 * scenario.head_dim as u64 * scenario.dtype_bytes as u64;
        let n = scenario.seq_len as u64;
        let m = permille * n / 1000;
        let full = prefill.len() as u64 * n * per;
        let mut pruned = 0u64;
        for l in &decode {
            pruned += if selected.contains(l) {
                2 * m * per
            } else {
                n * per
            };
        }
        ensure(
            got.bytes_full == full && got.bytes_pruned == pruned,
            format!("case {case}: got {got:?}, expected {full}/{pruned}"),
        )?;
        let untouched =
            transfer_volume(&scenario, &prefill, &prefill, &[], p).map_err(|e| e.to_string())?;
        ensure(
            untouched.ratio == 1.0,
            format!("case {case}: unpruned ratio {}", untouched.ratio),
        )?;
    }
    let file = crate::runtime::scenario::ScenarioFile::load(&dir.join("llama31-8b.json"))
        .map_err(|e| e.to_string())?;
    let Scenario::Bandwidth(s) = file.scenario else {
        return Err("llama31-8b.json is not a bandwidth scenario".into());
    };
    let report = s.run().map_err(|e| e.to_string())?;
    ensure(s.calibrated, "llama31-8b.json is not marked calibrated")?;
    ensure(
        report.full_gib == 4.0,
        format!("full volume {} GiB", report.full_gib),
    )?;
    ensure(
        (4.9..=5.1).contains(&report.volume.ratio),
        format!("ratio {:.3} outside [4.9, 5.1]", report.volume.ratio),
    )?;
    Ok(format!(
        "100 scenarios exact; llama31-8b full {:.1} GB, pruned {:.2} GB, ratio {:.3}x (calibrated)",
        report.full_gib, report.pruned_gib, report.volume.ratio
    ))
}

fn end_to_end(dir: &Path) -> Check {
    let start = Instant::now();
    let files = load_dir(dir).map_err(|e| e.to_string())?;
    let mut names = Vec::new();
    for (stem, file) in files {
        let Scenario::E2e(s) = file.scenario else {
            continue;
        };
        let r = s.run().map_err(|e| format!("{stem}: {e}"))?;
        ensure(r.transcripts_equal, format!("{stem}: transcripts differ"))?;
        ensure(
            r.round_trip_identical,
            format!("{stem}: wire round trip not byte-identical"),
        )?;
        ensure(
            r.cache_monotonic,
            format!("{stem}: decode cache did not grow by one per step"),
        )?;
        ensure(
            r.volume_consistent,
            format!("{stem}: manifest bytes disagree with transfer volume"),
        )?;
        names.push(stem);
    }
    ensure(!names.is_empty(), "no end-to-end scenarios found")?;
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(60))?;
    Ok(format!(
        "{} over channel and loopback TCP, {elapsed:.2?}",
        names.join(", ")
    ))
}

fn stage_subset() -> Check {
    let mut rng = stream(9, Stream::Verification);
    for run in 0..1000 {
        let n = rng.gen_range(2..=12);
        let mut best = Vec::new();
        let mut i = 0;
        while i < n {
            match rng.gen_range(0..3) {
                0 => {
                    best.push(RemovalElement::Prune { block: i });
                    i += 1;
                }
                1 if i + 1 < n => {
                    best.push(RemovalElement::Distill { first: i });
                    i += 2;
                }
                _ => i += 1,
            }
        }
        if best.is_empty() {
            best.push(RemovalElement::Prune { block: 0 });
        }
        let salt: u64 = rng.gen();
        let scripted = |plan: &StagePlan| -> crate::Result<f64> {
            let mut h = salt;
            for e in &plan.prefill_removals {
                h = h.rotate_left(13)
                    ^ (e.first_block() as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            }
            Ok((h % 1000) as f64 / 1000.0)
        };
        let theta = [0.0, DEFAULT_THRESHOLD, 0.1][run % 3];
        let out = assign_stages(&best, scripted, theta).map_err(|e| e.to_string())?;
        let pre: BTreeSet<_> = out.plan.prefill_removals.iter().collect();
        let dec: BTreeSet<_> = out.plan.decode_removals.iter().collect();
        ensure(
            pre.is_subset(&dec),
            format!("run {run}: prefill not a subset of decode"),
        )?;
        ensure(
            dec == best.iter().collect(),
            format!("run {run}: decode set differs from input"),
        )?;
    }
    let e = RemovalElement::Prune { block: 2 };
    for (gain, excluded) in [
        (DEFAULT_THRESHOLD + 1e-9, true),
        (DEFAULT_THRESHOLD - 1e-9, false),
    ] {
        let out = assign_stages(
            &[e],
            |p: &StagePlan| {
                Ok(if p.prefill_removals.is_empty() {
                    0.5 + gain
                } else {
                    0.5
                })
            },
            DEFAULT_THRESHOLD,
        )
        .map_err(|e| e.to_string())?;
        let kept_in_prefill = !out.plan.prefill_removals.contains(&e);
        ensure(
            kept_in_prefill == excluded,
            format!("gain {gain}: decode-only = {kept_in_prefill}"),
        )?;
    }
    Ok("1000 scripted runs subset-closed; threshold boundary correct at 0.03 +/- 1e-9".into())
}

fn distillation(toy: &Toy) -> Check {
    let d = &toy.analysis.profile.pair_metric;
    let first = (0..d.len()).fold(0, |b, i| if d[i] > d[b] { i } else { b });
    let job = DistillJob::capture(
        &toy.trained.model,
        first,
        &toy.analysis.profile.redundancy,
        &toy.trained.calibration,
        DistillConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let out = distill_pair(&job).map_err(|e| e.to_string())?;
    let ratio = out.final_mse / out.initial_mse;
    ensure(
        out.final_mse <= out.initial_mse,
        format!("final {} above initial {}", out.final_mse, out.initial_mse),
    )?;
    ensure(ratio <= 0.9, format!("final/initial = {ratio:.3} > 0.9"))?;
    Ok(format!(
        "pair ({first}, {}): mse {:.4} -> {:.4} ({ratio:.3}x) in {} steps",
        first + 1,
        out.initial_mse,
        out.final_mse,
        DistillConfig::default().steps
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub index: usize,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "[{tag}] {:>2} {}: {}",
            self.index, self.name, self.detail
        )
    }
}

/// Runs every check. `scenarios` is the directory holding the shipped
/// scenario files. `report` sees each outcome as soon as it is known.
pub fn run_suite(scenarios: &Path, mut report: impl FnMut(&CheckOutcome)) -> Vec<CheckOutcome> {
    let toy = toy();
    let toy = &toy;
    let with_toy = |f: fn(&Toy) -> Check| -> Box<dyn Fn() -> Check + '_> {
        Box::new(move || {
            toy.as_ref()
                .map_err(|e| format!("toy instance: {e}"))
                .and_then(f)
        })
    };
    let checks: Vec<(&str, CheckFn<'_>)> = vec![
        ("annealing iteration count", with_toy(iteration_count)),
        (
            "annealing reaches the exhaustive optimum",
            with_toy(global_optimum),
        ),
        (
            "set construction against naive enumerator",
            Box::new(set_construction),
        ),
        (
            "block gradients against finite differences",
            Box::new(gradients),
        ),
        ("attention perturbation bound", Box::new(perturbation_bound)),
        (
            "kv layer selection against naive oracle",
            Box::new(kv_selection),
        ),
        (
            "transfer volume arithmetic",
            Box::new(move || bandwidth(scenarios)),
        ),
        (
            "two-node runs match the single-process reference",
            Box::new(move || end_to_end(scenarios)),
        ),
        (
            "prefill removals stay within decode removals",
            Box::new(stage_subset),
        ),
        ("merged block distillation", with_toy(distillation)),
    ];
    checks
        .iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let (passed, detail) = match check() {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            let out = CheckOutcome {
                index: i + 1,
                name: name.to_string(),
                passed,
                detail,
            };
            report(&out);
            out
        })
        .collect()
}
