mod common;

use std::collections::BTreeMap;

use common::*;
use offrl_core::corpus::ContextResponsePair;
use offrl_core::model::{sample_responses, DecodeConfig, ImplicitPolicy, PolicyModel};
use offrl_core::rewards::{RewardSpec, Rewarder, ScorerKind};
use offrl_core::tensor::{AdamConfig, Graph};
use offrl_core::trainers::*;
use proptest::prelude::*;

fn greedy<P: offrl_core::model::NextToken + ?Sized>(m: &P, ctx: &[u32], cond: Option<u32>, eos: u32) -> Vec<u32> {
    sample_responses(m, ctx, cond, &DecodeConfig::greedy(8), eos, &mut rng(0)).unwrap().remove(0)
}

fn provenance() -> OfflineProvenance {
    OfflineProvenance { behavior: "test".into(), reward_spec: RewardSpec::default(), n_model: 0, upstream: BTreeMap::new() }
}

fn record(p: &ContextResponsePair, response: Vec<u32>, reward: f64, idx: usize) -> OfflineRecord {
    OfflineRecord {
        context_id: p.key(),
        context: p.context.clone(),
        response,
        reward,
        source: if idx == 0 { Source::Human } else { Source::Model },
        sample_index: idx,
        truncated: false,
    }
}

fn dataset(records: Vec<OfflineRecord>) -> OfflineDataset {
    let mut d = OfflineDataset { provenance: provenance(), records };
    d.sort();
    d
}

fn fast(epochs: usize, batch: usize, lr: f64) -> LmTrainConfig {
    LmTrainConfig { epochs, batch_size: batch, lr, select_best: false, ..LmTrainConfig::default() }
}

#[test]
fn tf_memorizes_a_pair() {
    let v = vocab();
    let p = pair(&v, "c", "hello", "yes ok");
    let mut m = model64(&v, 1);
    train_tf(&mut m, &[&p], &[], &fast(60, 1, 1e-2), &mut rng(2)).unwrap();
    assert_eq!(greedy(&m, &p.context, None, v.eos()), p.response);
}

#[test]
fn loss_covers_response_tokens_only() {
    let v = vocab();
    let p = pair(&v, "c", "hello ask", "yes ok");
    let m = model64(&v, 3);
    let mut g = Graph::new();
    let l = m.response_loss(&mut g, &p.context, None, &p.response, 1.0).unwrap();
    let lp: f64 = m.token_log_probs(&p.context, None, &p.response).unwrap().iter().sum();
    assert!((g.scalar(l) + lp).abs() < 1e-10);
    assert_eq!(m.token_log_probs(&p.context, None, &p.response).unwrap().len(), p.response.len());
}

#[test]
fn tf_is_deterministic_under_a_seed() {
    let v = vocab();
    let pairs = [pair(&v, "a", "hello", "yes"), pair(&v, "b", "ask", "no bye"), pair(&v, "c", "ok", "hello")];
    let refs: Vec<&ContextResponsePair> = pairs.iter().collect();
    let run = || {
        let mut m = model64(&v, 4);
        let r = train_tf(&mut m, &refs, &refs[..1], &LmTrainConfig { epochs: 3, batch_size: 2, lr: 1e-3, ..Default::default() }, &mut rng(5)).unwrap();
        (m, r)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert_eq!(r1, r2);
    assert_eq!(max_param_diff(&m1, &m2), 0.0);
}

#[test]
fn best_epoch_selection_restores_parameters() {
    let v = vocab();
    let tr = [pair(&v, "a", "hello", "yes ok")];
    let va = [pair(&v, "b", "hello", "bye")];
    let mut m = model64(&v, 6);
    let start = mean_loss(&m, &[Example::from_pair(&va[0])]).unwrap();
    let r = train_tf(&mut m, &[&tr[0]], &[&va[0]], &LmTrainConfig { epochs: 6, batch_size: 1, lr: 1e-2, ..Default::default() }, &mut rng(7)).unwrap();
    let mut losses = vec![start];
    losses.extend(&r.epoch_val_loss);
    let best = (0..losses.len()).min_by(|&a, &b| losses[a].total_cmp(&losses[b])).unwrap();
    // the val answer conflicts with the train answer, so the best epoch is not the last
    assert!(best < 6, "{losses:?}");
    assert_eq!(r.kept_epoch, best);
    assert_eq!(mean_loss(&m, &[Example::from_pair(&va[0])]).unwrap(), losses[best]);
}

#[test]
fn offline_dataset_shape_and_determinism() {
    let v = vocab();
    let pairs: Vec<ContextResponsePair> = (0..100).map(|i| pair(&v, &format!("conv{i:03}"), "hello", "yes ok")).collect();
    let refs: Vec<&ContextResponsePair> = pairs.iter().collect();
    let rw = exact_rewarder(&v);
    let policy = PolicyModel::<f32>::new(tiny_config(), v.len(), &mut rng(1)).unwrap();
    let prov = OfflineProvenance { n_model: 5, ..provenance() };
    let a = generate_offline_dataset(&policy, &refs, &rw, 5, 6, prov.clone(), &mut rng(9)).unwrap();
    let b = generate_offline_dataset(&policy, &refs, &rw, 5, 6, prov, &mut rng(9)).unwrap();
    assert_eq!(a.len(), 600);
    assert_eq!(a, b);
    for r in &a.records {
        assert!((0.0..=1.0).contains(&r.reward));
        assert!(r.response.len() <= 6);
        assert_eq!(r.truncated, r.response.last() != Some(&v.eos()));
        if r.source == Source::Human {
            assert_eq!(r.reward, 1.0);
            assert_eq!(r.sample_index, 0);
        }
    }
    assert_eq!(a.records.iter().filter(|r| r.source == Source::Human).count(), 100);
}

#[test]
fn tf_top_without_filtering_is_tf_all() {
    let v = vocab();
    let p = pair(&v, "a", "hello", "yes");
    let q = pair(&v, "b", "ask", "no");
    let d = dataset(vec![record(&p, p.response.clone(), 1.0, 0), record(&p, q.response.clone(), 0.0, 1), record(&q, q.response.clone(), 0.4, 0)]);
    let cfg = fast(2, 2, 1e-3);
    let mut a = model64(&v, 1);
    let mut b = model64(&v, 1);
    let ra = train_tf_all(&mut a, &d, &cfg, &mut rng(3)).unwrap();
    let rb = train_tf_top(&mut b, &d, &TopFilterConfig::Delta(1.0), &cfg, &mut rng(3)).unwrap();
    assert_eq!(ra.step_losses, rb.step_losses);
    assert_eq!(max_param_diff(&a, &b), 0.0);
}

#[test]
fn binary_rewards_filter_to_the_clicks() {
    let v = vocab();
    let p = pair(&v, "a", "hello", "yes");
    let recs: Vec<OfflineRecord> = (0..10).map(|i| record(&p, p.response.clone(), (i % 3 == 0) as u8 as f64, i)).collect();
    let d = dataset(recs);
    for cfg in [TopFilterConfig::Delta(0.0), TopFilterConfig::Delta(0.5), TopFilterConfig::Quantile(0.75)] {
        let top = filter_top(&d, &cfg).unwrap();
        let want: Vec<&OfflineRecord> = d.records.iter().filter(|r| r.reward == 1.0).collect();
        assert_eq!(top.records.iter().collect::<Vec<_>>(), want, "{cfg:?}");
    }
    let q = BinQuantizer::uniform(2).unwrap();
    assert_eq!(quantize_return(0.0, &q, &v).unwrap(), v.bin_token(0));
    assert_eq!(quantize_return(1.0, &q, &v).unwrap(), v.bin_token(1));
}

fn arb_dataset() -> impl Strategy<Value = OfflineDataset> {
    prop::collection::vec(0.0f64..=1.0, 1..40).prop_map(|rs| {
        let v = vocab();
        let p = pair(&v, "a", "hello", "yes");
        dataset(rs.into_iter().enumerate().map(|(i, r)| record(&p, p.response.clone(), r, i)).collect())
    })
}

proptest! {
    #[test]
    fn delta_filter_is_idempotent_and_exact(d in arb_dataset(), delta in 0.0f64..=1.0) {
        let cfg = TopFilterConfig::Delta(delta);
        match filter_top(&d, &cfg) {
            Ok(top) => {
                prop_assert_eq!(&filter_top(&top, &cfg).unwrap(), &top);
                let kept = top.records.len();
                prop_assert_eq!(kept, d.records.iter().filter(|r| r.reward >= 1.0 - delta - 1e-12).count());
            }
            Err(_) => prop_assert!(d.records.iter().all(|r| r.reward < 1.0 - delta)),
        }
    }

    #[test]
    fn resolved_quantile_filter_is_idempotent(d in arb_dataset(), q in 0.0f64..=1.0) {
        let cfg = TopFilterConfig::Quantile(q).resolve(&d).unwrap();
        let top = filter_top(&d, &cfg).unwrap();
        prop_assert!(!top.is_empty());
        prop_assert_eq!(&filter_top(&top, &cfg).unwrap(), &top);
        prop_assert!(top.len() as f64 >= (1.0 - q) * (d.len() - 1) as f64);
    }

    #[test]
    fn quantizer_partitions_unit_interval(k in 1usize..10, r in 0.0f64..=1.0) {
        let qz = BinQuantizer::uniform(k).unwrap();
        let b = qz.bin(r).unwrap();
        let e = qz.edges();
        prop_assert!(b < k);
        prop_assert!(e[b] <= r);
        prop_assert!(r < e[b + 1] || (b == k - 1 && r <= 1.0));
        prop_assert!(qz.bin(r * 0.5).unwrap() <= b);
    }
}

#[test]
fn dt_follows_the_conditioning_bin() {
    let v = vocab();
    let p = pair(&v, "a", "hello", "yes ok");
    let a = v.tokenize("yes ok").unwrap().into_iter().chain([v.eos()]).collect::<Vec<_>>();
    let b = v.tokenize("no bye").unwrap().into_iter().chain([v.eos()]).collect::<Vec<_>>();
    let d = dataset(vec![record(&p, a.clone(), 1.0, 0), record(&p, b.clone(), 0.0, 1)]);
    let q = BinQuantizer::uniform(2).unwrap();
    let mut m = model64(&v, 2);
    train_dt(&mut m, &d, &q, &v, &fast(80, 2, 1e-2), &mut rng(4)).unwrap();
    assert_eq!(greedy(&m, &p.context, Some(v.bin_token(1)), v.eos()), a);
    assert_eq!(greedy(&m, &p.context, Some(v.bin_token(0)), v.eos()), b);
}

fn ilql_cfg(alpha: f64, gamma: f64, steps: usize, batch: usize) -> IlqlConfig {
    IlqlConfig { alpha, gamma, epochs: steps, batch_size: batch, lr: 3e-3, ..IlqlConfig::default() }
}

#[test]
fn ilql_recovers_discounted_returns_on_single_trajectories() {
    let v = vocab();
    let gamma = 0.9;
    let specs = [("a", "hello", "yes ok bye", 1.0), ("b", "ask", "no no", 0.5), ("c", "ok", "hello yes", 0.8)];
    let m0 = model64(&v, 5);
    let mut trajs = Vec::new();
    for (id, c, r, rew) in specs {
        let p = pair(&v, id, c, r);
        trajs.push(IlqlTransition::new(&m0, &p.context, &p.response, rew).unwrap());
    }
    let mut m = m0.clone();
    train_ilql_on(&mut m, &trajs, &ilql_cfg(0.0, gamma, 6000, 3), &mut rng(6)).unwrap();
    for t in &trajs {
        let (q, vv) = m.ilql_values(&t.context, &t.actions).unwrap();
        let n = t.actions.len();
        let r = t.rewards[n - 1];
        for (i, &a) in t.actions.iter().enumerate() {
            let want = gamma.powi((n - 1 - i) as i32) * r;
            assert!((q[i][a as usize] - want).abs() < 0.02, "Q step {i}: {} vs {want}", q[i][a as usize]);
            assert!((vv[i] - want).abs() < 0.02, "V step {i}: {} vs {want}", vv[i]);
        }
    }
}

#[test]
fn ilql_value_is_the_expectile_of_action_values() {
    let v = vocab();
    let p = pair(&v, "a", "hello", "yes");
    let m0 = model64(&v, 8);
    let trajs: Vec<_> = [("yes", 0.0), ("no", 0.0), ("ok", 1.0)]
        .iter()
        .map(|(w, r)| IlqlTransition::new(&m0, &p.context, &v.tokenize(w).unwrap(), *r).unwrap())
        .collect();
    let mut m = m0.clone();
    train_ilql_on(&mut m, &trajs, &IlqlConfig { tau: 0.7, ..ilql_cfg(0.0, 1.0, 3000, 3) }, &mut rng(1)).unwrap();
    let (_, vv) = m.ilql_values(&p.context, &trajs[0].actions).unwrap();
    let want = offrl_oracle::expectile(&[0.0, 0.0, 1.0], 0.7).unwrap();
    assert!((want - 7.0 / 13.0).abs() < 1e-9);
    assert!((vv[0] - want).abs() < 0.01, "{} vs {want}", vv[0]);
}

#[test]
fn strong_kl_keeps_the_implicit_policy_on_behavior() {
    let v = vocab();
    let p = pair(&v, "a", "hello", "yes");
    let q = pair(&v, "b", "ask", "no ok");
    let mut m0 = model64(&v, 9);
    train_tf(&mut m0, &[&p, &q], &[], &fast(20, 2, 1e-2), &mut rng(2)).unwrap();
    let trajs = vec![
        IlqlTransition::new(&m0, &p.context, &p.response, 1.0).unwrap(),
        IlqlTransition::new(&m0, &q.context, &q.response, 0.0).unwrap(),
        IlqlTransition::new(&m0, &p.context, &q.response, 0.0).unwrap(),
    ];
    let mut m = m0.clone();
    train_ilql_on(&mut m, &trajs, &IlqlConfig { eta: 1.0, ..ilql_cfg(100.0, 1.0, 400, 3) }, &mut rng(3)).unwrap();
    for t in &trajs {
        let (tokens, start) = PolicyModel::<f64>::layout_sequence(&t.context, None, &t.actions);
        for i in 0..t.actions.len() {
            let prefix = &tokens[..start + i];
            let beh = m0.next_log_probs(prefix).unwrap();
            let imp = m.implicit_policy_logits(prefix).unwrap();
            let tv: f64 = 0.5 * beh.iter().zip(&imp).map(|(a, b)| (a.exp() - b.exp()).abs()).sum::<f64>();
            assert!(tv <= 0.05, "TV {tv} at step {i}");
        }
    }
    // the behavior logits themselves never move
    assert_eq!(max_param_diff(&m, &m0), 0.0);
    let _ = ImplicitPolicy(&m);
}

fn ppo_setup() -> (Vec<ContextResponsePair>, PolicyModel<f64>) {
    let v = vocab();
    let pairs = vec![pair(&v, "a", "hello", "yes"), pair(&v, "b", "ask", "no ok"), pair(&v, "c", "ok", "bye")];
    let mut m = model64(&v, 11);
    let refs: Vec<&ContextResponsePair> = pairs.iter().collect();
    train_tf(&mut m, &refs, &[], &fast(10, 3, 1e-2), &mut rng(1)).unwrap();
    (pairs, m)
}

#[test]
fn ppo_first_epoch_ratios_are_one() {
    let v = vocab();
    let (pairs, reference) = ppo_setup();
    let refs: Vec<&ContextResponsePair> = pairs.iter().collect();
    let mut m = reference.clone();
    m.attach_value_head(&mut rng(0));
    let cfg = PpoConfig { lr: 1e-3, ppo_epochs: 3, ..PpoConfig::default() };
    let rw = exact_rewarder(&v);
    for seed in 0..3 {
        let s = ppo_step(&mut m, &reference, &refs, &rw, &cfg, cfg.kl_coef, 6, &mut rng(seed)).unwrap();
        assert!(s.first_epoch_ratio_dev < 1e-6, "{}", s.first_epoch_ratio_dev);
    }
}

#[test]
fn ppo_with_zero_reward_leaves_parameters_alone() {
    let v = vocab();
    let (pairs, reference) = ppo_setup();
    let refs: Vec<&ContextResponsePair> = pairs.iter().collect();
    let cmd = format!("{} 0", env!("CARGO_BIN_EXE_constant_scorer"));
    let spec = RewardSpec { scorer: ScorerKind::External, scorer_cmd: Some(cmd), ..RewardSpec::default() };
    let rw = Rewarder::new(spec, v.clone(), None).unwrap();
    let mut m = reference.clone();
    let cfg = PpoConfig {
        iterations: 3,
        rollout_batch: 3,
        lr: 1e-3,
        kl_coef: 0.0,
        kl_target: None,
        adam: AdamConfig { weight_decay: 0.0, ..PpoConfig::default().adam },
        ..PpoConfig::default()
    };
    let report = train_ppo(&mut m, &reference, &refs, &rw, &cfg, 6, &mut rng(2)).unwrap();
    assert!(report.steps.iter().all(|s| s.mean_reward == 0.0));
    // zero advantage and a zero-initialized value head give exactly zero gradients
    assert_eq!(max_param_diff(&m, &reference), 0.0);
}

#[test]
fn kl_controller_moves_toward_target() {
    assert!(adapt_kl_coef(0.2, 0.1, 0.05, 16, 10000.0) > 0.2);
    assert!(adapt_kl_coef(0.2, 0.01, 0.05, 16, 10000.0) < 0.2);
    assert_eq!(adapt_kl_coef(0.2, 0.05, 0.05, 16, 10000.0), 0.2);
    // the proportional error is clipped at 20%
    assert!((adapt_kl_coef(1.0, 100.0, 0.05, 10000, 10000.0) - 1.2).abs() < 1e-12);
}

fn quark_setup() -> (Vec<ContextResponsePair>, OfflineDataset) {
    let v = vocab();
    let pairs = vec![pair(&v, "a", "hello", "yes"), pair(&v, "b", "ask", "no ok")];
    let recs = pairs.iter().map(|p| record(p, p.response.clone(), 1.0, 0)).chain([record(&pairs[0], pairs[1].response.clone(), 0.0, 1)]).collect();
    (pairs, dataset(recs))
}

#[test]
fn quark_pool_grows_by_the_collection_size() {
    let v = vocab();
    let (pairs, initial) = quark_setup();
    let refs: Vec<&ContextResponsePair> = pairs.iter().collect();
    let q = BinQuantizer::uniform(2).unwrap();
    let cfg = QuarkConfig { epochs: 3, collect_per_epoch: 5, train: fast(1, 4, 1e-3) };
    let mut m = model64(&v, 1);
    let (report, pool) = quark_loop(&mut m, &refs, &exact_rewarder(&v), &q, &initial, &cfg, 6, &mut rng(1), &mut rng(2)).unwrap();
    assert_eq!(report.dataset_sizes, vec![initial.len() + 5, initial.len() + 10, initial.len() + 15]);
    assert_eq!(pool.len(), initial.len() + 15);
    let mut keys: Vec<(String, usize)> = pool.records.iter().map(|r| (r.context_id.clone(), r.sample_index)).collect();
    keys.dedup();
    assert_eq!(keys.len(), pool.len(), "sample indices are unique per context");
}

#[test]
fn quark_without_collection_is_dt() {
    let v = vocab();
    let (pairs, initial) = quark_setup();
    let refs: Vec<&ContextResponsePair> = pairs.iter().collect();
    let q = BinQuantizer::uniform(2).unwrap();
    let train = fast(1, 2, 1e-3);
    let cfg = QuarkConfig { epochs: 4, collect_per_epoch: 0, train: train.clone() };
    let mut a = model64(&v, 3);
    let (report, pool) = quark_loop(&mut a, &refs, &exact_rewarder(&v), &q, &initial, &cfg, 6, &mut rng(1), &mut rng(2)).unwrap();
    assert_eq!(pool, initial);
    let mut b = model64(&v, 3);
    let dt = train_dt(&mut b, &initial, &q, &v, &LmTrainConfig { epochs: 4, ..train }, &mut rng(2)).unwrap();
    assert_eq!(report.train.step_losses, dt.step_losses);
    assert_eq!(max_param_diff(&a, &b), 0.0);
}
