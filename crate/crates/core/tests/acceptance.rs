//! Acceptance gate: runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line each and exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng as _;
use subrank::datagen::{generate, split, Dataset, SyntheticSpec};
use subrank::decompose::{apply_factorization, analyses_from_search, factorize, merge_unprofitable, savings, FactorPolicy};
use subrank::insights::{decay_closed_form, gradient_span_check, init_split, mixup_sweep, DecaySetup};
use subrank::linalg::{self, Matrix};
use subrank::nn::{
    evaluate, finetune_decomposed, logits, loss_and_grad, train, LayerDef, NetworkDef, TrainConfig,
};
use subrank::ranksearch::{search_network, RankSearchConfig};
use subrank::rng;
use subrank::subspace::output_gram;
use subrank::transform::{analyze_layer, analyze_network, numerical_rank};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Layer input with a decaying column spectrum so energy targets bite.
fn layer_instance(seed: u64) -> (Matrix, Matrix, f64, f64) {
    let mut r = rng::seeded(seed);
    let d = r.random_range(2..=64);
    let m = r.random_range(1..=64);
    let n = r.random_range(d..=2 * d + 8);
    let targets = [0.5, 0.8, 0.9, 0.99];
    let (es, et) = (targets[r.random_range(0..4)], targets[r.random_range(0..4)]);
    let scales: Vec<f64> = (0..d).map(|j| 0.8f64.powi(j as i32)).collect();
    let x = rng::gaussian_matrix(n, d, 1.0, &mut r);
    let x = Matrix::from_fn(n, d, |i, j| x[(i, j)] * scales[j]);
    let w = rng::gaussian_matrix(m, d, 1.0, &mut r);
    (x, w, es, et)
}

fn criterion_1_2() -> (Outcome, Outcome) {
    let start = Instant::now();
    let (mut dominated, mut worst_cross) = (0, 0.0_f64);
    for seed in 0..200 {
        let (x, w, es, et) = layer_instance(seed);
        let t = analyze_layer(&x, &w, es, et).unwrap();
        let y = x.matmul_t(&w).unwrap();
        // The bound is tight when a side keeps all its energy; allow rounding
        // at the scale of the operands there.
        if t.empirical_error <= t.bound + 1e-12 * y.frobenius_sq() {
            dominated += 1;
        }
        let scale = y.frobenius() * w.frobenius() * x.frobenius();
        worst_cross = worst_cross.max(t.cross_term.abs() / scale);
    }
    let elapsed = start.elapsed();
    (
        outcome(
            dominated == 200 && elapsed < Duration::from_secs(60),
            format!("error bound held in {dominated}/200 instances in {:.1}s", elapsed.as_secs_f64()),
        ),
        outcome(
            worst_cross < 1e-8,
            format!("max |cross term| / (|Y| |W| |X|) = {worst_cross:.2e} over 200 instances"),
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut worst = 0.0_f64;
    for seed in 0..100 {
        let mut r = rng::seeded(1000 + seed);
        let (n, d, m) = (r.random_range(1..80), r.random_range(1..48), r.random_range(1..48));
        let x = rng::gaussian_matrix(n, d, 1.0, &mut r);
        let w = rng::gaussian_matrix(m, d, 1.0, &mut r);
        let direct = x.matmul_t(&w).unwrap().gram();
        let transported = output_gram(&x.gram(), &w).unwrap();
        worst = worst.max(transported.sub(&direct).unwrap().frobenius() / direct.frobenius());
    }
    outcome(worst < 1e-8, format!("max relative Gram transport error {worst:.2e} over 100 cases"))
}

fn planted_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec { ambient_dim: 16, intrinsic_rank: 3, classes: 4, samples_per_class: 100, noise_sigma: 0.0, seed }
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let (tr, va) = split(&generate(&planted_spec(4)).unwrap(), 0.8, 4).unwrap();
    let cfg = TrainConfig { learning_rate: 0.05, epochs: 40, batch_size: 16, seed: 4, ..Default::default() };
    let (net, _) = train(NetworkDef::mlp(16, &[32], 4, 4), &tr, &cfg).unwrap();
    let train_acc = evaluate(&net, &tr).unwrap();
    let analyzed = analyze_network(&net, &tr.x, 0.9999, 0.9999).unwrap();
    let k_analyze = analyzed[0].transform.k_s;
    let config = RankSearchConfig { epsilon: 0.1, ..Default::default() };
    let searched = search_network(&net, &tr.x, &va, &config).unwrap().outcome.layers[0].k_s;
    let elapsed = start.elapsed();
    outcome(
        train_acc >= 0.95 && k_analyze == 3 && searched <= 3 && elapsed < Duration::from_secs(120),
        format!(
            "train accuracy {train_acc:.4}, analyze k_S = {k_analyze}, searched k_S = {searched}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Noisy benchmark for the search and finetuning criteria.
fn benchmark() -> (NetworkDef, Dataset, Dataset) {
    let spec = SyntheticSpec {
        ambient_dim: 24,
        intrinsic_rank: 4,
        classes: 5,
        samples_per_class: 240,
        noise_sigma: 1.0,
        seed: 5,
    };
    let (tr, va) = split(&generate(&spec).unwrap(), 0.5, 5).unwrap();
    let cfg = TrainConfig { learning_rate: 0.05, epochs: 40, batch_size: 16, seed: 5, ..Default::default() };
    let (net, _) = train(NetworkDef::mlp(24, &[48, 32], 5, 5), &tr, &cfg).unwrap();
    (net, tr, va)
}

fn criterion_5_6() -> (Outcome, Outcome) {
    let (net, tr, va) = benchmark();
    let config = RankSearchConfig { epsilon: 0.1, ..Default::default() };
    let res = search_network(&net, &tr.x, &va, &config).unwrap();
    let o = &res.outcome;
    let within_cost = o.transformations.iter().filter(|t| t.fallbacks == 0).all(|t| t.evaluations <= t.evaluation_bound());
    let drop = o.drop_points();
    let c5 = outcome(
        drop <= 0.6 + 1e-9 && within_cost && o.layers.len() == 3,
        format!(
            "drop {drop:.3} points (budget 0.6, {} fallbacks), {} evaluations, per-transformation bound {}",
            o.fallbacks,
            o.evaluations,
            if within_cost { "met" } else { "exceeded" }
        ),
    );

    let analyses = analyses_from_search(&net, o).unwrap();
    let factored = apply_factorization(&res.network, &analyses, FactorPolicy::All).unwrap();
    let cfg = TrainConfig { learning_rate: 0.01, epochs: 20, batch_size: 16, seed: 6, ..Default::default() };
    let (tuned, _) = finetune_decomposed(factored, &tr, &cfg).unwrap();
    let tuned = merge_unprofitable(&tuned);
    let (orig, after) = (evaluate(&net, &va).unwrap(), evaluate(&tuned, &va).unwrap());
    let gap = 100.0 * (orig - after);
    let c6 = outcome(
        gap <= 0.5,
        format!(
            "validation accuracy {:.2}% original, {:.2}% transformed, {:.2}% finetuned; {} -> {} parameters",
            100.0 * orig,
            100.0 * o.final_accuracy,
            100.0 * after,
            net.parameter_count(),
            tuned.parameter_count()
        ),
    );
    (c5, c6)
}

fn criterion_7() -> Outcome {
    // (a) weight decay acts alone on the complement of the input span.
    let data = generate(&planted_spec(7)).unwrap();
    let w0 = rng::gaussian_matrix(4, 16, 0.5, &mut rng::seeded(7));
    let decay = decay_closed_form(&w0, &data.x, &data.labels, 0.05, 0.01, 100).unwrap();

    // (b) gradients stay in the span of each layer's inputs.
    let nets = [
        NetworkDef::mlp(16, &[32, 32], 4, 1),
        NetworkDef::mlp(16, &[8], 4, 2),
        NetworkDef::residual_mlp(16, 16, 2, 4, 3),
    ];
    let mut worst_grad = 0.0_f64;
    for net in &nets {
        for batch in [vec![0], (0..16).collect(), (0..400).step_by(3).collect::<Vec<usize>>()] {
            let sub = data.subset(&batch);
            let residuals = gradient_span_check(net, &sub.x, &sub.labels).unwrap();
            worst_grad = residuals.into_iter().flatten().fold(worst_grad, f64::max);
        }
    }

    // (c) mixup never leaves the span.
    let mixup = mixup_sweep(&data.x, 1000, 32, 0.4, 7).unwrap();

    // (d) savings arithmetic.
    let ratio = savings(512, 512, 23).0;
    let exact = ratio == 23552.0 / 262144.0;

    outcome(
        decay.max_abs_error < 1e-10 && worst_grad < 1e-9 && mixup < 1e-10 && exact,
        format!(
            "decay ratio error {:.2e}, gradient residual {worst_grad:.2e}, mixup residual {mixup:.2e}, savings {ratio}",
            decay.max_abs_error
        ),
    )
}

fn criterion_8() -> Outcome {
    let exp = DecaySetup::standard(0).run().unwrap();
    let (off, on) = (&exp.without, &exp.with);
    let seeds: Vec<u64> = (0..20).collect();
    let split = init_split(64, 64, 8, &seeds).unwrap();
    let init_ok = (split.mean - split.expected).abs() <= 0.03;
    outcome(
        on.final_perp_fraction < off.final_perp_fraction && on.mlu < off.mlu && init_ok,
        format!(
            "perp fraction {:.4} -> {:.4}, MLU {:.4} -> {:.4} with decay; init perp mean {:.4} vs {:.4}",
            off.final_perp_fraction, on.final_perp_fraction, off.mlu, on.mlu, split.mean, split.expected
        ),
    )
}

fn parameters_mut(net: &mut NetworkDef) -> Vec<&mut f64> {
    fn walk<'a>(layers: &'a mut [LayerDef], out: &mut Vec<&'a mut f64>) {
        for l in layers {
            match l {
                LayerDef::Linear { w, b } => {
                    out.extend(w.data_mut());
                    out.extend(b.iter_mut());
                }
                LayerDef::Factored { left, right, b } => {
                    out.extend(left.data_mut());
                    out.extend(right.data_mut());
                    out.extend(b.iter_mut());
                }
                LayerDef::Skip { inner } => walk(inner, out),
                LayerDef::Relu => {}
            }
        }
    }
    let mut out = Vec::new();
    walk(&mut net.layers, &mut out);
    out
}

fn cross_entropy(net: &NetworkDef, x: &Matrix, labels: &[usize]) -> f64 {
    let z = logits(net, x).unwrap();
    let total: f64 = z
        .row_iter()
        .zip(labels)
        .map(|(row, &c)| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[c]
        })
        .sum();
    total / labels.len() as f64
}

fn criterion_9() -> Outcome {
    // Backprop against central differences on a 3-layer net.
    let mut net = NetworkDef::mlp(6, &[7, 5], 3, 9);
    let x = rng::gaussian_matrix(10, 6, 1.0, &mut rng::seeded(9));
    let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let analytic = loss_and_grad(&net, &x, &labels).unwrap().1.flatten();
    let h = 1e-5;
    let mut worst_fd = 0.0_f64;
    for (i, &g) in analytic.iter().enumerate() {
        let orig = *parameters_mut(&mut net)[i];
        *parameters_mut(&mut net)[i] = orig + h;
        let plus = cross_entropy(&net, &x, &labels);
        *parameters_mut(&mut net)[i] = orig - h;
        let minus = cross_entropy(&net, &x, &labels);
        *parameters_mut(&mut net)[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        worst_fd = worst_fd.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-4));
    }

    // Symmetric eigendecomposition.
    let mut worst_eig = 0.0_f64;
    for seed in 0..100 {
        let mut r = rng::seeded(seed);
        let n = r.random_range(1..=40);
        let a = rng::gaussian_matrix(n, n, 1.0, &mut r);
        let s = a.add(&a.transpose()).unwrap().symmetrized();
        let eig = linalg::sym_eig(&s).unwrap();
        worst_eig = worst_eig.max(eig.reconstruct().sub(&s).unwrap().frobenius() / s.frobenius());
    }

    // Factorization of transformed weights at their utilized rank.
    let data = generate(&planted_spec(9)).unwrap();
    let layer_net = NetworkDef::mlp(16, &[20], 4, 9);
    let mut worst_factor = 0.0_f64;
    for t in analyze_network(&layer_net, &data.x, 0.99, 0.99).unwrap() {
        let wp = &t.transform.w_prime;
        let r = t.transform.utilized_rank().max(numerical_rank(wp).unwrap());
        let f = factorize(wp, &vec![0.0; wp.rows()], r).unwrap();
        worst_factor = worst_factor.max(f.product().sub(wp).unwrap().frobenius() / wp.frobenius());
    }

    outcome(
        worst_fd <= 1e-5 && worst_eig < 1e-10 && worst_factor < 1e-9,
        format!(
            "{} gradient entries within {worst_fd:.2e} relative; eig reconstruction {worst_eig:.2e}; factorization {worst_factor:.2e}",
            analytic.len()
        ),
    )
}

fn cli(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_subrank"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = || -> Result<Vec<String>, String> {
        cli(&["gen-data", "--seed", "3", "--out", "tr.csv", "--val-out", "va.csv"], d)?;
        let mut checked = Vec::new();
        let mut same = |a: &str, b: &str| -> Result<(), String> {
            let (x, y) = (std::fs::read(d.join(a)).unwrap(), std::fs::read(d.join(b)).unwrap());
            if x != y {
                return Err(format!("{a} and {b} differ"));
            }
            checked.push(a.to_string());
            Ok(())
        };
        for out in ["m1.json", "m2.json"] {
            cli(&["train", "--data", "tr.csv", "--seed", "1", "--out", out], d)?;
        }
        same("m1.json", "m2.json")?;
        for out in ["o1.json", "o2.json"] {
            cli(&["rank-search", "--model", "m1.json", "--data", "tr.csv", "--val-data", "va.csv", "--out", out], d)?;
        }
        same("o1.json", "o2.json")?;
        for name in ["weight-decay", "init-split", "gradient-span", "relu-spectrum", "skip-rank", "mixup-span", "lowrank-init"] {
            let (a, b) = (format!("{name}-1.json"), format!("{name}-2.json"));
            std::thread::scope(|s| {
                let ha = s.spawn(|| cli(&["insights", name, "--seed", "2", "--out", &a], d));
                let hb = s.spawn(|| cli(&["insights", name, "--seed", "2", "--out", &b], d));
                ha.join().unwrap().and(hb.join().unwrap())
            })?;
            same(&a, &b)?;
        }
        Ok(checked)
    };
    match run() {
        Ok(files) => outcome(true, format!("{} output pairs byte-identical", files.len())),
        Err(e) => outcome(false, e),
    }
}

fn main() {
    let start = Instant::now();
    let results = std::thread::scope(|s| {
        let c12 = s.spawn(criterion_1_2);
        let c3 = s.spawn(criterion_3);
        let c4 = s.spawn(criterion_4);
        let c56 = s.spawn(criterion_5_6);
        let c7 = s.spawn(criterion_7);
        let c8 = s.spawn(criterion_8);
        let c9 = s.spawn(criterion_9);
        let c10 = s.spawn(criterion_10);
        let (c1, c2) = c12.join().unwrap();
        let (c5, c6) = c56.join().unwrap();
        vec![
            ("1 error-bound dominance", c1),
            ("2 trace cancellation", c2),
            ("3 Gram transport", c3.join().unwrap()),
            ("4 rank recovery", c4.join().unwrap()),
            ("5 budget compliance", c5),
            ("6 finetune recovery", c6),
            ("7 exact closed forms", c7.join().unwrap()),
            ("8 directional insights", c8.join().unwrap()),
            ("9 numerical substrate", c9.join().unwrap()),
            ("10 determinism", c10.join().unwrap()),
        ]
    });
    let mut failed = 0;
    for (name, o) in &results {
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{}/{} criteria passed in {:.1}s", results.len() - failed, results.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
