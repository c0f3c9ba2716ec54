//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use common::{apnb_oracle, nlb_oracle, pnb_oracle, random_input, randomize, ssim_oracle};
use pnen::filters::FilterSpec;
use pnen::gradcheck::{end_to_end, end_to_end_config, per_op_suite, GradcheckOptions};
use pnen::layers::{Init, Module};
use pnen::metrics::{bench_variants, count_block_costs, psnr, ssim, SsimParams};
use pnen::model::{NonLocalKind, PnenConfig, PnenModel};
use pnen::nonlocal::{apnb_forward, nlb_forward, pnb_forward, Apnb, ApnbConfig, Nlb, NlbConfig, Pnb, PnbConfig};
use pnen::train::{
    center_crops, synth_textures, train, validation_psnr, Artifacts, DataSource, PairSet, TextureSpec, TrainConfig,
    TrainOutcome,
};
use pnen::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_CASES: usize = 20;
const ORACLE_TOL: f64 = 1e-10;
const ORACLE_TIME: Duration = Duration::from_secs(60);
const DEGENERATE_CASES: usize = 10;
const DEGENERATE_TOL: f64 = 1e-12;
const GRAD_TIME: Duration = Duration::from_secs(300);
const TARGET_DEPTH: usize = 37;
const TARGET_PARAMS: f64 = 1_875_000.0;
const PARAM_BAND: f64 = 0.15;
const TARGET_MEMORY_RATIO: f64 = 1.0 - 0.624;
const MEMORY_BAND: f64 = 0.10;
const TRAIN_STEPS: usize = 2000;
const LOSS_DROP: f64 = 0.1;
const PSNR_GAIN_DB: f64 = 3.0;
const TRAIN_TIME: Duration = Duration::from_secs(30 * 60);
const ABLATION_MARGIN_DB: f64 = 0.05;
const SSIM_TOL: f64 = 1e-8;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 3];
    for case in 0..ORACLE_CASES {
        let d = rng.gen_range(1..=8);
        let (m, n) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let (h, w) = (rng.gen_range(4..=8), rng.gen_range(4..=8));
        let x = random_input(&mut rng, d, h, w);
        let init = Init::new(case as u64);

        let mut nlb = Nlb::new("nlb", NlbConfig { d, m, n }, init).unwrap();
        randomize(&mut nlb, &mut rng);
        worst[0] = worst[0].max(nlb_forward(&x, &nlb).unwrap().max_abs_diff(&nlb_oracle(&x, &nlb)));

        let scales = match case % 3 {
            0 => vec![1, 2],
            1 => vec![0, 1, 2],
            _ => vec![2],
        };
        let mut pnb = Pnb::new("pnb", PnbConfig { d, m, n, scales }, init).unwrap();
        randomize(&mut pnb, &mut rng);
        worst[1] = worst[1].max(pnb_forward(&x, &pnb).unwrap().max_abs_diff(&pnb_oracle(&x, &pnb)));

        let pools = if case % 2 == 0 { vec![1, 2, 3] } else { vec![1, 3, 4] };
        let mut apnb = Apnb::new("apnb", ApnbConfig { d, m, n, pool_sizes: pools }, init).unwrap();
        randomize(&mut apnb, &mut rng);
        worst[2] = worst[2].max(apnb_forward(&x, &apnb).unwrap().max_abs_diff(&apnb_oracle(&x, &apnb)));
    }
    let elapsed = start.elapsed();
    outcome(
        worst.iter().all(|&w| w < ORACLE_TOL) && elapsed < ORACLE_TIME,
        format!(
            "{ORACLE_CASES} cases each; max |diff| nlb {:.2e} pnb {:.2e} apnb {:.2e} (< {ORACLE_TOL:.0e}); {:.1}s",
            worst[0],
            worst[1],
            worst[2],
            elapsed.as_secs_f64()
        ),
    )
}

fn degenerate_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for case in 0..DEGENERATE_CASES {
        let (d, m, n) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));
        let mut nlb = Nlb::new("nlb", NlbConfig { d, m, n }, Init::new(case as u64)).unwrap();
        randomize(&mut nlb, &mut rng);
        let mut pnb = Pnb::new("pnb", PnbConfig { d, m, n, scales: vec![0] }, Init::new(1000 + case as u64)).unwrap();
        pnb.theta = nlb.theta.clone();
        pnb.scales[0].phi = nlb.phi.clone();
        pnb.scales[0].g = nlb.g.clone();
        pnb.psi = nlb.psi.clone();
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let x = random_input(&mut rng, d, h, w);
        worst = worst.max(pnb_forward(&x, &pnb).unwrap().max_abs_diff(&nlb_forward(&x, &nlb).unwrap()));
    }
    outcome(worst < DEGENERATE_TOL, format!("{DEGENERATE_CASES} cases; max |diff| {worst:.2e} (< {DEGENERATE_TOL:.0e})"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let per_op = per_op_suite(31).unwrap();
    let e2e = end_to_end(end_to_end_config(), 31).unwrap();
    let elapsed = start.elapsed();
    for r in per_op.iter().chain(std::iter::once(&e2e)) {
        println!("    {}", r.line());
    }
    let worst_op = per_op.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let ok = per_op.iter().all(|r| r.passed()) && e2e.passed() && elapsed < GRAD_TIME;
    outcome(
        ok,
        format!(
            "{} layer checks, worst rel err {worst_op:.2e} (< {:.0e}); end-to-end {:.2e} (< {:.0e}); {:.1}s",
            per_op.len(),
            GradcheckOptions::PER_OP_TOLERANCE,
            e2e.max_rel_err,
            GradcheckOptions::END_TO_END_TOLERANCE,
            elapsed.as_secs_f64()
        ),
    )
}

fn complexity_claims() -> Outcome {
    let cfg = PnenConfig::default();
    let features = Shape::new(1, cfg.d, 96, 96);
    let nlb = count_block_costs(&cfg, NonLocalKind::Nlb, features, 4).unwrap();
    let pnb = count_block_costs(&cfg, NonLocalKind::Pnb, features, 4).unwrap();
    let exact = pnb.attention_elements() * 64 == nlb.attention_elements() * 21;
    let reports = bench_variants(&cfg, Shape::new(1, cfg.c, 96, 96), 4).unwrap();
    let macs = |k: NonLocalKind| reports[NonLocalKind::ALL.iter().position(|&x| x == k).unwrap()].attention_macs();
    let (a, p, n) = (macs(NonLocalKind::Apnb), macs(NonLocalKind::Pnb), macs(NonLocalKind::Nlb));
    let mem = |k: NonLocalKind| reports[NonLocalKind::ALL.iter().position(|&x| x == k).unwrap()].attention_memory() as f64;
    let ratio = mem(NonLocalKind::Pnb) / mem(NonLocalKind::Nlb);
    let ordered = a < p && p < n;
    let mem_ok = (ratio - TARGET_MEMORY_RATIO).abs() <= MEMORY_BAND;
    outcome(
        exact && ordered && mem_ok,
        format!(
            "element ratio {}/{} = {:.6} (21/64 exact: {exact}); attention MACs apnb {a} < pnb {p} < nlb {n}: {ordered}; \
             memory ratio {:.1}% vs {:.1}% +/- {:.0}pp",
            pnb.attention_elements(),
            nlb.attention_elements(),
            pnb.attention_elements() as f64 / nlb.attention_elements() as f64,
            100.0 * ratio,
            100.0 * TARGET_MEMORY_RATIO,
            100.0 * MEMORY_BAND
        ),
    )
}

fn architecture_audit() -> Outcome {
    let model = PnenModel::<f32>::new(PnenConfig::default(), 0).unwrap();
    let depth = model.longest_conv_path();
    let params = model.param_count() as f64;
    let rel = params / TARGET_PARAMS - 1.0;
    outcome(
        depth == TARGET_DEPTH && rel.abs() <= PARAM_BAND,
        format!(
            "longest conv path {depth} (want {TARGET_DEPTH}); parameters {} vs {} ({:+.1}%, band +/-{:.0}%)",
            params,
            TARGET_PARAMS,
            100.0 * rel,
            100.0 * PARAM_BAND
        ),
    )
}

fn tiny_config(scales: Vec<u32>) -> TrainConfig {
    TrainConfig {
        model: PnenConfig { c: 3, d: 16, m: 16, n: 8, scales, groups: 1, nonlocal: NonLocalKind::Pnb, pool_sizes: vec![1] },
        patch_size: 32,
        batch_size: 8,
        lr_init: 5e-4,
        lr_floor: 1e-4,
        plateau_patience: 5,
        seed: 7,
        steps: TRAIN_STEPS,
        steps_per_epoch: 100,
        filter: FilterSpec::gaussian(1.5),
        data: DataSource::Synthetic(TextureSpec { count: 16, seed: 1, ..TextureSpec::default() }),
        clip_grad_norm: None,
        checkpoint_every: 0,
    }
}

fn held_out(filter: &FilterSpec) -> PairSet<f32> {
    let images = synth_textures(&TextureSpec { count: 8, seed: 999, ..TextureSpec::default() }).unwrap();
    PairSet::new(center_crops(&images, 64).unwrap(), filter).unwrap()
}

fn mean_loss(rows: &[pnen::train::LogRow]) -> f64 {
    rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64
}

fn desk_training(run: &TrainOutcome<f32>, elapsed: Duration, val: &PairSet<f32>) -> (Outcome, f64) {
    let first = mean_loss(&run.log[..100]);
    let last = run.log.last().unwrap().loss;
    let tail = mean_loss(&run.log[run.log.len() - 100..]);
    let (model_db, identity_db) = validation_psnr(&run.model, val).unwrap();
    let gain = model_db - identity_db;
    let ok = tail <= LOSS_DROP * first && gain >= PSNR_GAIN_DB && elapsed <= TRAIN_TIME;
    (
        outcome(
            ok,
            format!(
                "last-100 mean loss {tail:.3e} = {:.3}x first-100 mean {first:.3e} (<= {LOSS_DROP}); final step {:.3}x; \
                 held-out PSNR {model_db:.2} dB vs identity {identity_db:.2} dB (+{gain:.2}, need +{PSNR_GAIN_DB}); {:.0}s",
                tail / first,
                last / first,
                elapsed.as_secs_f64()
            ),
        ),
        model_db,
    )
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let a = Tensor::from_fn(Shape::new(1, 3, 8, 8), |_, _, _, _| rng.gen_range(1.0..250.0f64).round());
    let p255 = psnr(&a, &a.map(|v| v + 1.0), 255.0).unwrap();
    let unit = psnr(&Tensor::zeros(Shape::new(1, 1, 3, 3)), &Tensor::full(Shape::new(1, 1, 3, 3), 0.1f64), 1.0).unwrap();
    let same = psnr(&a, &a, 255.0).unwrap();
    let psnr_ok = (p255 - 20.0 * 255f64.log10()).abs() < 1e-9 && (unit - 20.0).abs() < 1e-9 && same == f64::INFINITY;

    let x = Tensor::from_fn(Shape::new(1, 3, 24, 20), |_, _, _, _| rng.gen_range(0.0..1.0f64));
    let y = x.map(|v| 0.6 * v + 0.2).zip_map(&Tensor::from_fn(x.shape(), |_, _, _, _| rng.gen_range(-0.1..0.1)), |a, b| a + b).unwrap();
    let got = ssim(&x, &y, SsimParams::default()).unwrap();
    let want = ssim_oracle(&x, &y, 1.0);
    let ident = ssim(&x, &x, SsimParams::default()).unwrap();
    let (c1v, c2v) = (0.3, 0.8);
    let k = 0.01f64.powi(2);
    let flat = ssim(&Tensor::full(Shape::new(1, 1, 11, 11), c1v), &Tensor::full(Shape::new(1, 1, 11, 11), c2v), SsimParams::default()).unwrap();
    let flat_want = (2.0 * c1v * c2v + k) / (c1v * c1v + c2v * c2v + k);
    let ssim_ok = (got - want).abs() < SSIM_TOL && ident == 1.0 && (flat - flat_want).abs() < 1e-12;
    outcome(
        psnr_ok && ssim_ok,
        format!(
            "psnr {p255:.4} dB (48.1308), {unit:.4} dB (20), identical {same}; ssim {got:.10} vs loop {want:.10} \
             (|diff| {:.1e} < {SSIM_TOL:.0e}), ssim(a,a) = {ident}, constants {flat:.12} vs {flat_want:.12}",
            (got - want).abs()
        ),
    )
}

fn determinism() -> Outcome {
    let dir = std::env::temp_dir().join(format!("pnen-acceptance-{}", std::process::id()));
    let cfg = TrainConfig { steps: 100, ..tiny_config(vec![1, 2]) };
    let run = |sub: &str| {
        train::<f32>(&cfg, &Artifacts::in_dir(dir.join(sub))).unwrap();
        std::fs::read(dir.join(sub).join("loss.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let _ = std::fs::remove_dir_all(&dir);
    outcome(a == b, format!("two seeded {}-step runs; loss.csv {} bytes each, identical: {}", cfg.steps, a.len(), a == b))
}

fn report(name: &str, o: &Outcome, failures: &mut Vec<String>) {
    println!("[{}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    if !o.passed {
        failures.push(name.to_string());
    }
}

fn main() {
    let mut failures = Vec::new();
    report("oracle equivalence", &oracle_equivalence(), &mut failures);
    report("degenerate equivalence", &degenerate_equivalence(), &mut failures);
    report("gradient suite", &gradient_suite(), &mut failures);
    report("complexity claims", &complexity_claims(), &mut failures);
    report("architecture audit", &architecture_audit(), &mut failures);

    let val = held_out(&FilterSpec::gaussian(1.5));
    let start = Instant::now();
    let multi = train::<f32>(&tiny_config(vec![1, 2]), &Artifacts::default()).unwrap();
    let (desk, multi_db) = desk_training(&multi, start.elapsed(), &val);
    report("desk-scale training", &desk, &mut failures);

    let single = train::<f32>(&tiny_config(vec![1]), &Artifacts::default()).unwrap();
    let (single_db, _) = validation_psnr(&single.model, &val).unwrap();
    let ablation = outcome(
        multi_db >= single_db - ABLATION_MARGIN_DB,
        format!("strides {{2,4}} {multi_db:.3} dB vs stride {{2}} {single_db:.3} dB (margin {ABLATION_MARGIN_DB} dB)"),
    );
    report("ablation direction", &ablation, &mut failures);

    report("metrics", &metrics(), &mut failures);
    report("determinism", &determinism(), &mut failures);

    if failures.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: {} failed: {}", failures.len(), failures.join(", "));
        std::process::exit(1);
    }
}
