//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits nonzero if any fails.

mod common;

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{brute_force, leaky_inputs_away_from_kink, op_suite, rand_tensor, random_index};
use matchseg::attention::{joint_attention, JointAttentionParams};
use matchseg::data::{
    decode_tensor, encode_tensor, split_stratified, synth_generate, Dataset, Manifest,
};
use matchseg::losses::{
    bce_loss, dice_loss, dsc_metric, focal_loss, format_report, iou_metric, total_loss, total_loss_on_tape, Focal,
    LossWeights,
};
use matchseg::retrieval::{build_index, select_top_k, EmbeddingIndex, Provider};
use matchseg::segnet::{forward_on_tape, init_params, ModelParams, NetworkConfig};
use matchseg::tensor::{grad_check, Element, Tape, Tensor, TensorId};
use matchseg::trainer::{evaluate, format_loss_log, train, EvalConfig, Strategy, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Runner {
    failed: usize,
    ran: usize,
    /// Criterion numbers given on the command line; empty runs all.
    only: Vec<usize>,
}

impl Runner {
    fn run(&mut self, id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Check) {
        if !self.only.is_empty() && !self.only.contains(&id) {
            return;
        }
        self.ran += 1;
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let (mut ok, mut detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        if took > budget {
            ok = false;
            detail.push_str(&format!("; over budget of {}s", budget.as_secs()));
        }
        if !ok {
            self.failed += 1;
        }
        println!(
            "{} criterion {id} ({name}): {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

// 1

fn gradient_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_op = (0.0f64, "");
    for (name, shape, (lo, hi), f) in op_suite::<f64>() {
        let x = leaky_inputs_away_from_kink(rand_tensor::<f64>(&mut rng, &shape, lo, hi), name);
        let err = grad_check(f, &x, 1e-6).map_err(|e| format!("{name}: {e}"))?;
        if err > worst_op.0 {
            worst_op = (err, name);
        }
    }

    let net = NetworkConfig {
        levels: 2,
        channels: vec![4, 8],
        ..NetworkConfig::default()
    };
    let mut params = init_params(&net, 5).map_err(|e| e.to_string())?;
    for (_, t) in params.iter_mut() {
        if t.rank() == 1 {
            let n = t.numel();
            *t = rand_tensor(&mut rng, &[n], -0.1, 0.1);
        }
    }
    let query: Tensor<f64> = rand_tensor(&mut rng, &[1, 16, 16], 0.0, 1.0);
    let support: Tensor<f64> = Tensor::from_fn(&[2, 2, 16, 16], |i| {
        if (i / 256) % 2 == 0 {
            rng.random_range(0.0..1.0)
        } else {
            rng.random_bool(0.3) as u8 as f64
        }
    });
    let target: Tensor<f64> = Tensor::from_fn(&[1, 16, 16], |_| rng.random_bool(0.3) as u8 as f64);

    let loss = |name: &str| {
        let (params, net, query, support, target) =
            (params.clone(), net.clone(), query.clone(), support.clone(), target.clone());
        let name = name.to_string();
        move |t: &mut Tape<f64>, x: TensorId| -> matchseg::Result<TensorId> {
            let mut ids = params.record(t, false);
            let (mut q, mut s) = (None, None);
            match name.as_str() {
                "query" => q = Some(x),
                "support" => s = Some(x),
                other => {
                    ids.ids.insert(other.to_string(), x);
                }
            }
            let q = q.unwrap_or_else(|| t.constant(query.clone()));
            let s = s.unwrap_or_else(|| t.constant(support.clone()));
            let logits = forward_on_tape(t, &net, &ids, q, s)?;
            let probs = t.sigmoid(logits);
            Ok(total_loss_on_tape(t, probs, &target, LossWeights::default(), Focal::default())?.total)
        }
    };
    let mut worst_net = (0.0f64, String::new());
    let mut checked = 0;
    let mut inputs: Vec<(String, Tensor<f64>)> =
        params.iter().map(|(n, t)| (n.clone(), t.cast::<f64>())).collect();
    inputs.push(("query".into(), query.clone()));
    inputs.push(("support".into(), support.clone()));
    for (name, x) in &inputs {
        let err = grad_check(loss(name), x, 1e-4).map_err(|e| format!("{name}: {e}"))?;
        checked += x.numel();
        if err > worst_net.0 {
            worst_net = (err, name.clone());
        }
    }
    ensure(
        worst_op.0 < 1e-2 && worst_net.0 < 1e-2,
        format!(
            "{} ops, worst {:.2e} ({}); network {} tensors / {checked} scalars, worst {:.2e} ({})",
            op_suite::<f64>().len(),
            worst_op.0,
            worst_op.1,
            inputs.len(),
            worst_net.0,
            worst_net.1
        ),
    )
}

// 2

fn retrieval_oracle() -> Check {
    let mut cases = 0;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let idx = random_index(&mut rng, 200, 32);
        let q: Vec<f32> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let none = HashSet::new();
        for k in [1, 8, 16] {
            let got: Vec<String> = select_top_k(&q, &idx, k, &none)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|h| h.id)
                .collect();
            if got != brute_force(&q, &idx, k, &none) {
                return Err(format!("mismatch at seed {seed}, K={k}"));
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} cases match the brute-force ranking"))
}

// 3

struct AttentionDiffs {
    row_sum: f64,
    permutation: f64,
    mean_identity: f64,
}

fn attention_case<T: Element>(rng: &mut ChaCha8Rng, case: u64, d: &mut AttentionDiffs) -> matchseg::Result<()> {
    let k = rng.random_range(1..6);
    let ratio = [1, 2, 4, 8][rng.random_range(0..4)];
    let c = ratio * rng.random_range(1..4);
    let (h, w) = (rng.random_range(1..7), rng.random_range(1..7));
    let mut p = JointAttentionParams::<T>::random(c, ratio, case)?;
    p.query_bias = rand_tensor(rng, p.query_bias.shape(), -0.5, 0.5);
    p.key_bias = rand_tensor(rng, p.key_bias.shape(), -0.5, 0.5);
    p.residual_bias = rand_tensor(rng, p.residual_bias.shape(), -0.5, 0.5);
    let s: Tensor<T> = rand_tensor(rng, &[k, c, h, w], -1.0, 1.0);
    let q: Tensor<T> = rand_tensor(rng, &[c, h, w], -1.0, 1.0);
    let out = joint_attention(&s, &q, &p)?;
    let hw = h * w;
    for row in out.attention.data().chunks(hw) {
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        d.row_sum = d.row_sum.max((sum - 1.0).abs());
    }
    let item = c * hw;
    for i in 0..item {
        let m = (0..k).map(|j| out.support_out.data()[j * item + i].as_f64()).sum::<f64>() / k as f64;
        d.mean_identity = d.mean_identity.max((m - out.query_out.data()[i].as_f64()).abs());
    }
    let mut perm: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let ps = Tensor::stack(&perm.iter().map(|&j| s.index0(j)).collect::<matchseg::Result<Vec<_>>>()?)?;
    let pout = joint_attention(&ps, &q, &p)?;
    let diff = |a: &[T], b: &[T]| a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max);
    d.permutation = d
        .permutation
        .max(diff(pout.attention.data(), out.attention.data()))
        .max(diff(pout.query_out.data(), out.query_out.data()));
    for (new, &old) in perm.iter().enumerate() {
        let a = &pout.support_out.data()[new * item..(new + 1) * item];
        let b = &out.support_out.data()[old * item..(old + 1) * item];
        d.permutation = d.permutation.max(diff(a, b));
    }
    Ok(())
}

fn attention_invariants() -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for precision in ["f32", "f64"] {
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        let mut d = AttentionDiffs {
            row_sum: 0.0,
            permutation: 0.0,
            mean_identity: 0.0,
        };
        for case in 0..20 {
            let r = if precision == "f32" {
                attention_case::<f32>(&mut rng, case, &mut d)
            } else {
                attention_case::<f64>(&mut rng, case, &mut d)
            };
            r.map_err(|e| format!("case {case}: {e}"))?;
        }
        ok &= d.row_sum <= 1e-6 && d.permutation <= 1e-6 && d.mean_identity <= 1e-6;
        parts.push(format!(
            "{precision}: row sums {:.1e}, permutation {:.1e}, mean identity {:.1e}",
            d.row_sum, d.permutation, d.mean_identity
        ));
    }
    ensure(ok, format!("20 configurations; {}", parts.join("; ")))
}

// 4

fn loss_identities() -> Check {
    let run = || -> matchseg::Result<(f64, f64, f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let (mut focal_bce, mut dice_perfect, mut recompose, mut dsc_iou) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let plain = Focal { gamma: 0.0, alpha: None };
        let weights = LossWeights::default();
        if (weights.lambda1, weights.lambda2, weights.lambda3) != (0.6, 0.3, 0.3) {
            return Err(matchseg::Error::Contract("default loss weights changed".into()));
        }
        for _ in 0..100 {
            let n = rng.random_range(2..24);
            let p: Tensor<f32> = Tensor::from_fn(&[1, n, n], |_| rng.random_range(0.001..0.999));
            let fa = rng.random_range(0.05..0.95);
            let y: Tensor<f32> = Tensor::from_fn(&[1, n, n], |_| rng.random_bool(fa) as u8 as f32);
            let fb = rng.random_range(0.05..0.95);
            let z: Tensor<f32> = Tensor::from_fn(&[1, n, n], |_| rng.random_bool(fb) as u8 as f32);

            focal_bce = focal_bce.max((focal_loss(&p, &y, plain)? - bce_loss(&p, &y)?).abs());
            dice_perfect = dice_perfect.max(dice_loss(&y, &y)?.abs());
            let f = Focal::default();
            let parts = 0.6 * dice_loss(&p, &y)? + 0.3 * bce_loss(&p, &y)? + 0.3 * focal_loss(&p, &y, f)?;
            recompose = recompose.max((total_loss(&p, &y, weights, f)? - parts).abs());
            let (d, j) = (dsc_metric(&y, &z)?, iou_metric(&y, &z)?);
            dsc_iou = dsc_iou.max((d - 2.0 * j / (1.0 + j)).abs());
        }
        Ok((focal_bce, dice_perfect, recompose, dsc_iou))
    };
    let (a, b, c, d) = run().map_err(|e| e.to_string())?;
    ensure(
        a <= 1e-6 && b <= 1e-6 && c <= 1e-6 && d <= 1e-6,
        format!("focal vs bce {a:.1e}, perfect dice {b:.1e}, recomposition {c:.1e}, dsc/iou {d:.1e} over 100 pairs"),
    )
}

// 5 - 7

const SEED: u64 = 7;

struct Synthetic {
    dataset: Dataset,
    index: EmbeddingIndex,
}

fn synthetic() -> matchseg::Result<Synthetic> {
    let ds = synth_generate(120, 3, 32, SEED)?;
    let m = split_stratified(&ds.manifest(), 0.8, SEED)?;
    let dataset = ds.with_manifest(&m)?;
    let index = build_index(&dataset, &Provider::Desk)?;
    Ok(Synthetic { dataset, index })
}

fn train_config(strategy: Strategy, attention: bool) -> TrainConfig {
    let mut cfg = TrainConfig {
        steps: 1000,
        support_k: 8,
        learning_rate: 1e-4,
        strategy,
        seed: SEED,
        augment: false,
        ..TrainConfig::default()
    };
    cfg.network.channels = vec![16, 32, 64];
    cfg.network.attention = attention;
    cfg
}

fn eval_config(strategy: Strategy, repeats: usize, ensemble: bool) -> EvalConfig {
    EvalConfig {
        strategy,
        support_k: 8,
        repeats,
        ensemble,
        image_size: 32,
        seed: SEED,
    }
}

fn train_and_score(data: &Synthetic, cfg: &TrainConfig, eval: &EvalConfig) -> matchseg::Result<(ModelParams, f64)> {
    let model = train(&data.dataset, Some(&data.index), cfg)?;
    let report = evaluate(&model.params, &cfg.network, &data.dataset, Some(&data.index), eval)?;
    Ok((model.params, report.mean_dsc()))
}

// 8

fn determinism_and_formats() -> Check {
    let run = || -> matchseg::Result<Vec<String>> {
        let mut notes = Vec::new();
        let ds = synth_generate(16, 2, 16, 3)?;
        let m = split_stratified(&ds.manifest(), 0.75, 3)?;
        let ds = ds.with_manifest(&m)?;
        let index = build_index(&ds, &Provider::Desk)?;
        let mut cfg = TrainConfig {
            steps: 4,
            support_k: 2,
            image_size: 16,
            ..TrainConfig::default()
        };
        cfg.network.levels = 2;
        cfg.network.channels = vec![4, 8];
        let eval = EvalConfig {
            strategy: Strategy::Random,
            support_k: 2,
            repeats: 2,
            ensemble: true,
            image_size: 16,
            seed: 1,
        };
        let mut bundles = Vec::new();
        let mut reports = Vec::new();
        for _ in 0..2 {
            let out = train(&ds, Some(&index), &cfg)?;
            bundles.push(out.params.to_bytes(&cfg.network)?);
            let r = evaluate(&out.params, &cfg.network, &ds, Some(&index), &eval)?;
            reports.push(format_report(&r.rows) + &format_loss_log(&out.losses));
        }
        let same = bundles[0] == bundles[1] && reports[0] == reports[1];
        notes.push(format!("reruns identical: {same}"));

        let (params, net) = ModelParams::from_bytes(&bundles[0])?;
        let mwts = params.to_bytes(&net)? == bundles[0];
        let mut rng = ChaCha8Rng::seed_from_u64(808);
        let t = Tensor::from_fn(&[3, 5, 7], |_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff));
        let bytes = encode_tensor(&t)?;
        let back = decode_tensor(&bytes)?;
        let mseg = back.shape() == t.shape()
            && back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits())
            && encode_tensor(&back)? == bytes;
        let memb_bytes = index.to_bytes()?;
        let memb = EmbeddingIndex::from_bytes(&memb_bytes)?.to_bytes()? == memb_bytes;
        let tsv = ds.manifest().to_tsv();
        let manifest = Manifest::parse_tsv(&tsv)?.to_tsv() == tsv;
        notes.push(format!("round trips mwts {mwts} mseg {mseg} memb {memb} manifest {manifest}"));
        let size = encode_tensor(&Tensor::<f32>::zeros(&[2, 3, 4]))?.len();
        notes.push(format!("2x3x4 tensor file is {size} bytes"));
        if !(same && mwts && mseg && memb && manifest && size == 114) {
            return Err(matchseg::Error::Contract(notes.join(", ")));
        }
        Ok(notes)
    };
    match run() {
        Ok(n) => Ok(n.join(", ")),
        Err(e) => Err(e.to_string()),
    }
}

fn main() -> ExitCode {
    let only = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut r = Runner { failed: 0, ran: 0, only };
    r.run(1, "gradient suite", secs(60), gradient_suite);
    r.run(2, "retrieval oracle", secs(10), retrieval_oracle);
    r.run(3, "attention invariants", secs(10), attention_invariants);
    r.run(4, "loss identities", secs(5), loss_identities);

    let mut data = None;
    let mut full = None;
    r.run(5, "end-to-end training", secs(600), || {
        let d = synthetic().map_err(|e| e.to_string())?;
        let cfg = train_config(Strategy::Clip, true);
        let (params, dsc) =
            train_and_score(&d, &cfg, &eval_config(Strategy::Clip, 1, false)).map_err(|e| e.to_string())?;
        data = Some(d);
        full = Some((params, cfg.network, dsc));
        ensure(dsc >= 0.80, format!("clip test DSC {dsc:.4} (need >= 0.80)"))
    });

    r.run(6, "selection ordering", secs(300), || {
        let (Some(d), Some((params, net, clip))) = (&data, &full) else {
            return Err("needs the criterion 5 model".into());
        };
        let report = evaluate(params, net, &d.dataset, Some(&d.index), &eval_config(Strategy::Random, 20, true))
            .map_err(|e| e.to_string())?;
        let (ensemble, individual) = (report.mean_dsc(), report.mean_individual_dsc());
        ensure(
            *clip >= ensemble && ensemble >= individual && clip - ensemble.max(individual) >= 0.01,
            format!("clip {clip:.4} >= random ensemble {ensemble:.4} >= random individual {individual:.4}"),
        )
    });

    r.run(7, "ablation ordering", secs(1800), || {
        let (Some(d), Some((_, _, both))) = (&data, &full) else {
            return Err("needs the criterion 5 model".into());
        };
        let no_attention = train_and_score(
            d,
            &train_config(Strategy::Clip, false),
            &eval_config(Strategy::Clip, 1, false),
        )
        .map_err(|e| e.to_string())?
        .1;
        let random = train_and_score(
            d,
            &train_config(Strategy::Random, true),
            &eval_config(Strategy::Random, 20, false),
        )
        .map_err(|e| e.to_string())?
        .1;
        ensure(
            *both >= no_attention && *both >= random,
            format!("clip+attention {both:.4}, identity attention {no_attention:.4}, random selection {random:.4}"),
        )
    });

    r.run(8, "determinism and formats", secs(5), determinism_and_formats);

    println!("{} of {} criteria passed", r.ran - r.failed, r.ran);
    if r.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

