//! The twelve acceptance criteria. Each test writes one PASS/FAIL line to
//! stdout (bypassing the harness capture) and then asserts.
//!
//! Criteria 6 to 9 and 11 share one pipeline run per seed. Artifacts live
//! under the cargo test tmpdir and are rebuilt on every run unless
//! `OFFRL_ACCEPTANCE_REUSE` is set.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use offrl_core::corpus::{ContextResponsePair, Split};
use offrl_core::eval::{eval_generation, EvalConfig, EvalReport, Generator, RankerResult};
use offrl_core::model::{argmax, CausalLMConfig, BackboneKind, PolicyModel};
use offrl_core::pipeline::{AblationKind, Method, Model, Pipeline, RunConfig, REPORT_DIR};
use offrl_core::rewards::Rewarder;
use offrl_core::seed::rng_for;
use offrl_core::tensor::{finite_difference_check, AdamConfig, CosineSchedule, Graph, ParamStore, Var};
use offrl_core::trainers::*;
use offrl_core::eval::AblationCurve;
use offrl_oracle::{empirical_conditional, expectile, fixtures_dir, total_variation, tree_dp, TreeMdp};
use rand::Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn line(n: usize, name: &str, pass: bool, detail: &str, elapsed: Duration) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n:>2} {status} {name}: {detail} [{:.1}s]", elapsed.as_secs_f64());
    let _ = out.flush();
}

fn finish(n: usize, name: &str, pass: bool, detail: String, elapsed: Duration, limit: Duration) {
    let in_time = elapsed <= limit;
    let detail = if in_time { detail } else { format!("{detail}; took longer than {}s", limit.as_secs()) };
    line(n, name, pass && in_time, &detail, elapsed);
    assert!(pass && in_time, "criterion {n} failed: {detail}");
}

// ---------------------------------------------------------------- 1

/// Loss heads over one hidden sequence; `which` picks the head.
fn head_loss(model: &PolicyModel<f64>, g: &mut Graph<f64>, s: &ParamStore<f64>, tokens: &[u32], which: usize) -> offrl_core::Result<Var> {
    let vocab = model.vocab_size();
    let h = model.hidden_with(s, g, tokens)?;
    let n = tokens.len();
    let (lw, lb, qw, vw) = (g.param_named(s, "lm.w")?, g.param_named(s, "lm.b")?, g.param_named(s, "q.w")?, g.param_named(s, "v.w")?);
    let logits = g.matmul(h, lw)?;
    let logits = g.add_bias(logits, lb)?;
    let q = g.matmul(h, qw)?;
    let v = g.matmul(h, vw)?;
    let v = g.reshape(v, &[n])?;
    let targets: Vec<u32> = tokens.iter().map(|&t| (t + 1) % vocab as u32).collect();
    let idx: Vec<usize> = targets.iter().map(|&a| a as usize).collect();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + i as f64 / n as f64).collect();
    Ok(match which {
        0 => g.cross_entropy(logits, &targets, &w)?,
        1 => {
            let shifted = g.scale(q, 0.7);
            let policy = g.add(logits, shifted)?;
            g.kl_divergence(logits, policy, &w)?
        }
        2 => {
            // TD: Q(s, a) against a fixed bootstrap target
            let qsa = g.gather(q, &idx)?;
            let target = g.constant(&[n], (0..n).map(|t| 0.3 + 0.1 * t as f64).collect())?;
            g.squared_error(qsa, target, &w)?
        }
        _ => {
            // V regresses toward target-network Q values, fixed here
            let target = g.constant(&[n], (0..n).map(|t| 0.5 - 0.2 * t as f64).collect())?;
            let u = g.sub(target, v)?;
            g.expectile_loss(u, 0.7, &w)?
        }
    })
}

#[test]
fn criterion_01_gradient_exactness() {
    let t = Instant::now();
    let mut rng = rng(101);
    let (mut worst, mut checks) = (0.0f64, 0);
    for net in 0..24 {
        let backbone = if net % 3 == 2 { BackboneKind::Gru } else { BackboneKind::Transformer };
        let heads = 1 + rng.random_range(0..2usize);
        let cfg = CausalLMConfig {
            dim: 4 * heads,
            layers: 1 + rng.random_range(0..2usize),
            heads,
            mlp_mult: 2,
            block: 8,
            backbone,
            zero_lm_head: false,
            init_std: 0.4,
            ..CausalLMConfig::default()
        };
        let vocab = 5 + rng.random_range(0..4usize);
        let model = PolicyModel::<f64>::new(cfg.clone(), vocab, &mut rng).unwrap();
        let mut store = model.backbone.clone();
        store.normal("q.w", &[cfg.dim, vocab], 0.5, &mut rng);
        store.normal("v.w", &[cfg.dim, 1], 0.5, &mut rng);
        let len = 3 + rng.random_range(0..4usize);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab as u32)).collect();
        for which in 0..4 {
            let r = finite_difference_check(&mut store, 1e-6, 32, |g, s| {
                head_loss(&model, g, s, &tokens, which).map_err(|e| match e {
                    offrl_core::Error::Tensor(t) => t,
                    other => panic!("{other}"),
                })
            }).unwrap();
            worst = worst.max(r.max_rel_error);
            checks += 1;
        }
    }
    let pass = worst < 1e-4;
    finish(1, "gradient exactness", pass, format!("{checks} checks on 24 networks, max relative error {worst:.2e}"), t.elapsed(), Duration::from_secs(60));
}

// ---------------------------------------------------------------- 2

/// Fits a single scalar V to `samples` with the expectile loss and Adam.
fn fit_expectile(samples: &[f64], tau: f64) -> f64 {
    let n = samples.len();
    let mut store = ParamStore::<f64>::new();
    store.add("v", &[1, 1], vec![0.0]);
    let adam = AdamConfig { clip_norm: None, ..AdamConfig::default() };
    let steps = 4000;
    let schedule = CosineSchedule::new(0.05, steps);
    for step in 0..steps {
        store.zero_grad();
        let mut g = Graph::new();
        let ones = g.constant(&[n, 1], vec![1.0; n]).unwrap();
        let v = g.param(&store, 0);
        let v = g.matmul(ones, v).unwrap();
        let v = g.reshape(v, &[n]).unwrap();
        let x = g.constant(&[n], samples.to_vec()).unwrap();
        let u = g.sub(x, v).unwrap();
        let l = g.expectile_loss(u, tau, &vec![1.0 / n as f64; n]).unwrap();
        g.backward(l).unwrap();
        g.accumulate_into(&mut store);
        store.adam_step(schedule.lr(step), &adam, &[]).unwrap();
    }
    store.get(0).values[0]
}

#[test]
fn criterion_02_expectile_oracle() {
    let t = Instant::now();
    let mut rng = rng(202);
    let sets: Vec<Vec<f64>> = vec![
        (0..50).map(|_| rng.random::<f64>()).collect(),
        (0..40).map(|_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect(),
        (0..64).map(|i| if i % 4 == 0 { 0.9 + 0.1 * rng.random::<f64>() } else { 0.2 * rng.random::<f64>() }).collect(),
    ];
    let mut worst = 0.0f64;
    for s in &sets {
        for tau in [0.5, 0.7, 0.9] {
            let want = expectile(s, tau).unwrap();
            worst = worst.max((fit_expectile(s, tau) - want).abs());
        }
    }
    finish(2, "expectile oracle", worst < 1e-3, format!("9 fits, max |V - expectile| {worst:.2e}"), t.elapsed(), Duration::from_secs(60));
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_ilql_matches_dynamic_programming() {
    let t = Instant::now();
    let mut details = Vec::new();
    let mut pass = true;
    for name in ["tree_fork.json", "tree_deep.json"] {
        let mdp = TreeMdp::load(fixtures_dir().join(name)).unwrap();
        let sol = tree_dp(&mdp, 1.0).unwrap();
        let start = mdp.vocab_size;
        let mut rng = rng(303);
        let cfg = CausalLMConfig { dim: 32, heads: 2, layers: 2, block: 8, head_hidden: 64, ..CausalLMConfig::default() };
        let mut m = PolicyModel::<f64>::new(cfg, mdp.vocab_size as usize + 1, &mut rng).unwrap();
        // full coverage: every leaf once
        let ex: Vec<Example> = mdp.leaves.iter().map(|l| Example { context: vec![start], condition: None, response: l.tokens.clone() }).collect();
        let tf = LmTrainConfig { epochs: 200, batch_size: ex.len(), lr: 1e-2, select_best: false, ..LmTrainConfig::default() };
        fit_lm(&mut m, &ex, &[], &tf, &mut rng).unwrap();
        let trajs: Vec<IlqlTransition<f64>> = mdp.leaves.iter().map(|l| IlqlTransition::new(&m, &[start], &l.tokens, l.reward).unwrap()).collect();
        let icfg = IlqlConfig {
            alpha: 1e-4,
            tau: 0.99,
            gamma: 1.0,
            eta: 3.0,
            epochs: 10_000,
            batch_size: trajs.len(),
            lr: 3e-3,
            finetune_backbone: true,
            ..IlqlConfig::default()
        };
        train_ilql_on(&mut m, &trajs, &icfg, &mut rng).unwrap();
        let (mut worst, mut mismatches, mut states) = (0.0f64, 0, 0);
        for s in mdp.internal_states() {
            states += 1;
            let mut toks = vec![start];
            toks.extend(&s);
            if argmax(&m.implicit_policy_logits(&toks).unwrap()) as u32 != sol.optimal_action(&s).unwrap() {
                mismatches += 1;
            }
            for a in mdp.actions(&s) {
                let mut resp = s.clone();
                resp.push(a);
                let (q, _) = m.ilql_values(&[start], &resp).unwrap();
                worst = worst.max((q[s.len()][a as usize] - sol.q(&s, a).unwrap()).abs());
            }
        }
        pass &= worst < 0.05 && mismatches == 0;
        details.push(format!("{name}: max |Q - Q*| {worst:.3}, greedy mismatches {mismatches}/{states}"));
    }
    finish(3, "ILQL vs DP", pass, details.join("; "), t.elapsed(), Duration::from_secs(300));
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_dt_counting_oracle() {
    let t = Instant::now();
    let v = vocab();
    let w = |s: &str| -> Vec<u32> { v.tokenize(s).unwrap().into_iter().chain([v.eos()]).collect() };
    let (p, r) = (pair(&v, "a", "hello", "yes ok"), pair(&v, "b", "ask", "no"));
    // duplicates give non-degenerate conditionals such as 2/3 vs 1/3
    let rows: Vec<(&ContextResponsePair, &str, f64)> = vec![
        (&p, "yes ok", 1.0),
        (&p, "yes ok", 1.0),
        (&p, "yes no", 1.0),
        (&p, "no ok", 0.0),
        (&p, "yes bye", 0.0),
        (&r, "no", 1.0),
        (&r, "ok bye", 1.0),
        (&r, "ok ok", 1.0),
        (&r, "ok", 0.0),
    ];
    let records: Vec<OfflineRecord> = rows
        .iter()
        .enumerate()
        .map(|(i, (pr, resp, reward))| OfflineRecord {
            context_id: pr.key(),
            context: pr.context.clone(),
            response: w(resp),
            reward: *reward,
            source: Source::Model,
            sample_index: i,
            truncated: false,
        })
        .collect();
    let data = OfflineDataset {
        provenance: OfflineProvenance { behavior: "fixture".into(), reward_spec: Default::default(), n_model: 0, upstream: BTreeMap::new() },
        records,
    };
    let q = BinQuantizer::uniform(2).unwrap();
    let mut m = model64(&v, 404);
    let cfg = LmTrainConfig { epochs: 1500, batch_size: data.len(), lr: 3e-3, select_best: false, ..LmTrainConfig::default() };
    train_dt(&mut m, &data, &q, &v, &cfg, &mut rng(404)).unwrap();

    let oracle_rows: Vec<(Vec<u32>, Vec<u32>, f64)> = data.records.iter().map(|r| (r.context.clone(), r.response.clone(), r.reward)).collect();
    let oracle = empirical_conditional(&oracle_rows, q.edges()).unwrap();
    let (mut worst, mut states) = (0.0f64, 0);
    for (context, prefix, bin, dist) in oracle.states() {
        let mut toks = context.to_vec();
        toks.push(v.bin_token(bin));
        toks.extend(prefix);
        let lp = m.next_log_probs(&toks).unwrap();
        let model: BTreeMap<u32, f64> = lp.iter().enumerate().map(|(i, l)| (i as u32, l.exp())).collect();
        worst = worst.max(total_variation(&model, dist));
        states += 1;
    }
    finish(4, "DT counting oracle", worst <= 0.05, format!("{states} in-data (prefix, bin) states, max TV {worst:.4}"), t.elapsed(), Duration::from_secs(300));
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_filter_and_quantizer_exactness() {
    let t = Instant::now();
    let v = vocab();
    let p = pair(&v, "a", "hello", "yes");
    let mut rng = rng(505);
    let records: Vec<OfflineRecord> = (0..200)
        .map(|i| OfflineRecord {
            context_id: format!("c{:03}", i / 5),
            context: p.context.clone(),
            response: p.response.clone(),
            reward: if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 },
            source: if i % 5 == 0 { Source::Human } else { Source::Model },
            sample_index: i % 5,
            truncated: false,
        })
        .collect();
    let data = OfflineDataset {
        provenance: OfflineProvenance { behavior: "fixture".into(), reward_spec: Default::default(), n_model: 4, upstream: BTreeMap::new() },
        records,
    };
    let ones: Vec<OfflineRecord> = data.records.iter().filter(|r| r.reward == 1.0).cloned().collect();
    let mut pass = true;
    for cfg in [TopFilterConfig::Delta(0.5), TopFilterConfig::Delta(0.01), TopFilterConfig::Delta(0.99), TopFilterConfig::default()] {
        pass &= filter_top(&data, &cfg).unwrap().records == ones;
    }
    let q = BinQuantizer::uniform(2).unwrap();
    pass &= quantize_return(0.0, &q, &v).unwrap() == v.bin_token(0);
    pass &= quantize_return(1.0, &q, &v).unwrap() == v.bin_token(1);
    let detail = format!("{} of {} records have reward 1; all filters keep exactly those; K=2 maps 0 and 1 to bins 0 and 1", ones.len(), data.len());
    finish(5, "filter/quantizer exactness", pass, detail, t.elapsed(), Duration::from_secs(5));
}

// ---------------------------------------------------------------- shared pipeline runs

struct SeedRun {
    seed: u64,
    out: PathBuf,
    generation: Vec<EvalReport>,
    ranker: Vec<RankerResult>,
    threshold: AblationCurve,
    /// Seconds spent on each group of stages.
    base: f64,
    direct: f64,
    ranking: f64,
    ablation: f64,
}

fn acceptance_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn seed_config(seed: u64, out: &Path) -> RunConfig {
    let mut c = RunConfig::desk();
    c.seed = seed;
    c.out = out.to_path_buf();
    c.eval.methods = vec![Method::Tf, Method::TfTop, Method::Dt, Method::Ilql];
    c.eval.perplexity = false;
    // more candidate sets per context make the ranker comparison less noisy
    c.eval.candidate_sets = 5;
    c.ablation.run = vec![AblationKind::Threshold];
    c
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64())
}

fn run_seed(seed: u64) -> SeedRun {
    let out = acceptance_dir().join(format!("seed-{seed}"));
    if std::env::var_os("OFFRL_ACCEPTANCE_REUSE").is_none() && out.exists() {
        std::fs::remove_dir_all(&out).unwrap();
    }
    let p = Pipeline::open(seed_config(seed, &out)).unwrap();
    let ((), base) = timed(|| {
        p.gen_corpus().unwrap();
        p.train_behavior().unwrap();
        p.gen_offline().unwrap();
    });
    let (mut generation, direct) = timed(|| {
        p.train(Method::TfTop).unwrap();
        p.train(Method::Dt).unwrap();
        p.eval_gen(&[Method::Tf, Method::TfTop, Method::Dt]).unwrap()
    });
    let (ranker, ranking) = timed(|| {
        p.train(Method::Ilql).unwrap();
        p.eval_rank(&[Method::Tf, Method::TfTop, Method::Dt, Method::Ilql]).unwrap()
    });
    generation.extend(p.eval_gen(&[Method::Ilql]).unwrap());
    let (threshold, ablation) = timed(|| p.ablate(AblationKind::Threshold).unwrap());
    p.emit().unwrap();
    SeedRun { seed, out, generation, ranker, threshold, base, direct, ranking, ablation }
}

fn seed_runs() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| SEEDS.iter().map(|&s| run_seed(s)).collect())
}

fn click(run: &SeedRun, method: &str) -> f64 {
    run.generation.iter().find(|r| r.method == method).unwrap_or_else(|| panic!("no {method} report")).click
}

fn ranked(run: &SeedRun, method: &str) -> f64 {
    run.ranker.iter().find(|r| r.method == method).unwrap_or_else(|| panic!("no {method} ranking")).mean_reward
}

fn secs(runs: &[SeedRun], f: impl Fn(&SeedRun) -> f64) -> Duration {
    Duration::from_secs_f64(runs.iter().map(f).sum())
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_end_to_end_direction() {
    let runs = seed_runs();
    let mut wins = 0;
    let mut rows = Vec::new();
    for r in runs {
        let (tf, top, dt) = (click(r, "TF"), click(r, "TF-Top"), click(r, "DT"));
        if dt > tf && top > tf {
            wins += 1;
        }
        rows.push(format!("s{} TF {tf:.3} TF-Top {top:.3} DT {dt:.3}", r.seed));
    }
    let detail = format!("DT and TF-Top beat TF in {wins}/5 seeds ({})", rows.join(", "));
    finish(6, "end-to-end direction", wins >= 4, detail, secs(runs, |r| r.base + r.direct), Duration::from_secs(15 * 60));
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_ranker_direction() {
    let runs = seed_runs();
    let (mut wins, mut bounded) = (0, true);
    let mut rows = Vec::new();
    for r in runs {
        let (tf, ilql, oracle) = (ranked(r, "TF"), ranked(r, "ILQL"), ranked(r, "Oracle"));
        if ilql >= tf {
            wins += 1;
        }
        bounded &= r.ranker.iter().all(|x| x.mean_reward <= oracle + 1e-12);
        bounded &= r.ranker.iter().all(|x| x.candidates_hash == r.ranker[0].candidates_hash);
        rows.push(format!("s{} TF {tf:.3} ILQL {ilql:.3} oracle {oracle:.3}", r.seed));
    }
    let detail = format!("ILQL >= TF in {wins}/5 seeds, oracle bound holds: {bounded} ({})", rows.join(", "));
    finish(7, "ranker direction", wins >= 4 && bounded, detail, secs(runs, |r| r.base + r.ranking), Duration::from_secs(10 * 60));
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_top_k_monotonicity() {
    let runs = seed_runs();
    let t = Instant::now();
    let (mut curves, mut pass) = (0, true);
    for r in runs {
        let text = std::fs::read_to_string(r.out.join(REPORT_DIR).join("topk.csv")).unwrap();
        let mut by_method: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
        for row in text.lines().skip(1) {
            let f: Vec<&str> = row.split(',').collect();
            by_method.entry(f[0].to_string()).or_default().push((f[1].parse().unwrap(), f[2].parse().unwrap()));
        }
        for points in by_method.values_mut() {
            points.sort_by_key(|p| p.0);
            pass &= points.windows(2).all(|w| w[1].1 >= w[0].1);
            curves += 1;
        }
        for g in &r.generation {
            pass &= g.top_k.windows(2).all(|w| w[1] >= w[0]);
        }
    }
    pass &= curves == runs.len() * 4;
    finish(8, "top-k monotonicity", pass, format!("{curves} emitted curves checked"), t.elapsed(), Duration::from_secs(60));
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_threshold_ablation_shape() {
    let runs = seed_runs();
    let mut wins = 0;
    let mut rows = Vec::new();
    for r in runs {
        let pts = r.threshold.series("TF-Top");
        let ys: Vec<f64> = pts.iter().map(|p| p.similarity).collect();
        let (first, last) = (ys[0], ys[ys.len() - 1]);
        if ys[1..ys.len() - 1].iter().any(|&y| y >= first && y >= last) {
            wins += 1;
        }
        rows.push(format!("s{} [{}]", r.seed, ys.iter().map(|y| format!("{y:.3}")).collect::<Vec<_>>().join(" ")));
    }
    let detail = format!("interior peak in {wins}/5 seeds over quantiles 0,.25,.5,.75,1 ({})", rows.join(", "));
    finish(9, "threshold ablation shape", wins >= 4, detail, secs(runs, |r| r.base + r.ablation), Duration::from_secs(30 * 60));
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_quark_bookkeeping() {
    let t = Instant::now();
    let v = vocab();
    let pairs: Vec<ContextResponsePair> =
        [("a", "hello", "yes ok"), ("b", "ask", "no"), ("c", "ok", "bye bye"), ("d", "yes", "hello no")].iter().map(|(i, c, r)| pair(&v, i, c, r)).collect();
    let refs: Vec<&ContextResponsePair> = pairs.iter().collect();
    let rw = exact_rewarder(&v);
    let behavior = model64(&v, 10);
    let prov = OfflineProvenance { behavior: "fixture".into(), reward_spec: rw.spec().clone(), n_model: 3, upstream: BTreeMap::new() };
    let initial = generate_offline_dataset(&behavior, &refs, &rw, 3, 6, prov, &mut rng(11)).unwrap();
    let q = BinQuantizer::uniform(2).unwrap();
    let train = LmTrainConfig { epochs: 1, batch_size: 4, lr: 1e-3, select_best: false, ..LmTrainConfig::default() };

    let (epochs, per) = (4, 7);
    let cfg = QuarkConfig { epochs, collect_per_epoch: per, train: train.clone() };
    let mut m = behavior.clone();
    let (report, pool) = quark_loop(&mut m, &refs, &rw, &q, &initial, &cfg, 6, &mut rng(12), &mut rng(13)).unwrap();
    let want: Vec<usize> = (1..=epochs).map(|e| initial.len() + e * per).collect();
    let sizes_ok = report.dataset_sizes == want && pool.len() == initial.len() + epochs * per;

    let cfg0 = QuarkConfig { epochs, collect_per_epoch: 0, train: train.clone() };
    let mut a = behavior.clone();
    let (r0, _) = quark_loop(&mut a, &refs, &rw, &q, &initial, &cfg0, 6, &mut rng(12), &mut rng(13)).unwrap();
    let mut b = behavior.clone();
    let dt = train_dt(&mut b, &initial, &q, &v, &LmTrainConfig { epochs, ..train }, &mut rng(13)).unwrap();
    let same = r0.train.step_losses == dt.step_losses;
    let detail = format!("pool sizes {:?} (want {want:?}); collect=0 matches DT over {} steps: {same}", report.dataset_sizes, dt.step_losses.len());
    finish(10, "Quark bookkeeping", sizes_ok && same, detail, t.elapsed(), Duration::from_secs(300));
}

// ---------------------------------------------------------------- 11

#[test]
fn criterion_11_ppo_sanity() {
    let runs = seed_runs();
    let t = Instant::now();
    let mut pass = true;
    let mut rows = Vec::new();
    for r in &runs[..3] {
        let p = Pipeline::open(seed_config(r.seed, &r.out)).unwrap();
        let corpus = p.load_corpus().unwrap();
        let rewarder: Rewarder = p.rewarder(&corpus).unwrap();
        let behavior: Model = p.load_model(Method::Tf).unwrap();
        drop(p);
        let cfg = PpoConfig { kl_coef: 1e4, kl_target: None, ..RunConfig::desk().ppo };
        let mut m = behavior.clone();
        let train = corpus.split(Split::Train);
        let report = train_ppo(&mut m, &behavior, &train, &rewarder, &cfg, 12, &mut rng_for(r.seed, "acceptance/ppo")).unwrap();
        let ratio_dev = report.steps.iter().map(|s| s.first_epoch_ratio_dev).fold(0.0, f64::max);
        let test = corpus.split(Split::Test);
        let ec = EvalConfig { horizon: 12, k_max: 0, seed: 0 };
        let after = eval_generation("PPO", Generator { policy: &m, condition: None }, &test, &rewarder, None, &ec).unwrap().click;
        let before = eval_generation("TF", Generator { policy: &behavior, condition: None }, &test, &rewarder, None, &ec).unwrap().click;
        // two standard errors of a mean of test-set clicks
        let noise = 2.0 * (before * (1.0 - before) / test.len() as f64).sqrt();
        let ok = ratio_dev <= 1e-6 && (after - before).abs() <= noise;
        pass &= ok;
        rows.push(format!("s{} ratio dev {ratio_dev:.1e}, reward {before:.3} -> {after:.3} (noise {noise:.3})", r.seed));
    }
    finish(11, "PPO sanity", pass, rows.join("; "), t.elapsed(), Duration::from_secs(10 * 60));
}

// ---------------------------------------------------------------- 12

fn report_bytes(out: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    files.insert("offline.jsonl".to_string(), std::fs::read(out.join("offline.jsonl")).unwrap());
    for e in std::fs::read_dir(out.join(REPORT_DIR)).unwrap() {
        let e = e.unwrap();
        let name = e.file_name().into_string().unwrap();
        if name.ends_with(".csv") {
            files.insert(name, std::fs::read(e.path()).unwrap());
        }
    }
    files
}

#[test]
fn criterion_12_determinism() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        Pipeline::open(tiny_run_config(&out)).unwrap().run_all().unwrap();
        outputs.push(report_bytes(&out));
    }
    let same = outputs[0] == outputs[1];
    let detail = format!("run-all twice with seed 7: {} files ({}) byte-identical: {same}", outputs[0].len(), outputs[0].keys().cloned().collect::<Vec<_>>().join(", "));
    finish(12, "determinism", same && outputs[0].len() >= 6, detail, t.elapsed(), Duration::from_secs(10 * 60));
}
