//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use submark::attacks::AttackKind;
use submark::ecc::{ecc_decode, ecc_encode, CodecSpec, Scheme};
use submark::injection::{solve_update, AlignmentObjective};
use submark::metrics::binomial_two_sided;
use submark::pipeline::{
    build_base, derivative_pool, eval_lineage, independent_pool, run_attack, verify_black_key, verify_white_key,
    watermark, Base, Watermarked,
};
use submark::substrate::checkpoint::{from_bytes, to_bytes};
use submark::substrate::{OffsetProblem, TokenNll};
use submark::verify_black::{reanchor, DriftStats, Loopback, ReanchorConfig, ReanchorForm};
use submark::bitspace::{build_bitspace, one_hot_target};
use submark::{PipelineConfig, WatermarkKey};

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

struct Ledger(Vec<Outcome>);

impl Ledger {
    fn record(&mut self, id: u32, name: &'static str, pass: bool, detail: String) {
        println!("{} [{id:>2}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.0.push(Outcome { id, name, pass, detail });
    }

    fn record_result(&mut self, id: u32, name: &'static str, r: Result<(bool, String), String>) {
        match r {
            Ok((pass, detail)) => self.record(id, name, pass, detail),
            Err(e) => self.record(id, name, false, format!("error: {e}")),
        }
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn with_bits(n: usize) -> PipelineConfig {
    PipelineConfig { n_bits: n, ..PipelineConfig::default() }
}

/// Gaussian elimination with partial pivoting on `A X = B`, written
/// independently of the library's factorisations.
fn gauss_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut aug = vec![vec![0.0; n + m]; n];
    for i in 0..n {
        for j in 0..n {
            aug[i][j] = a[(i, j)];
        }
        for j in 0..m {
            aug[i][n + j] = b[(i, j)];
        }
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| aug[x][col].abs().partial_cmp(&aug[y][col].abs()).unwrap()).unwrap();
        aug.swap(col, piv);
        for r in col + 1..n {
            let f = aug[r][col] / aug[col][col];
            for c in col..n + m {
                aug[r][c] -= f * aug[col][c];
            }
        }
    }
    let mut x = DMatrix::zeros(n, m);
    for j in 0..m {
        for i in (0..n).rev() {
            let mut s = aug[i][n + j];
            for k in i + 1..n {
                s -= aug[i][k] * x[(k, j)];
            }
            x[(i, j)] = s / aug[i][i];
        }
    }
    x
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

fn criterion_closed_form() -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_resid = 0.0f64;
    let mut worst_agree = 0.0f64;
    for _ in 0..50 {
        let d_ff = rng.gen_range(4..48);
        let d = rng.gen_range(2..24);
        let n = rng.gen_range(1..=d_ff);
        let g = random_matrix(&mut rng, d_ff, d_ff);
        let cov = &g * g.transpose() * rng.gen_range(0.1..10.0) + DMatrix::identity(d_ff, d_ff) * rng.gen_range(0.01..1.0);
        let keys = random_matrix(&mut rng, d_ff, n) * rng.gen_range(0.1..5.0);
        let deltas = random_matrix(&mut rng, d, n);
        let (delta, _, _) = solve_update(&keys, &deltas, &cov).map_err(e2s)?;
        let a = &cov + &keys * keys.transpose();
        let b = &deltas * keys.transpose();
        let scale = b.norm();
        worst_resid = worst_resid.max((&delta * &a - &b).norm() / scale);
        let oracle = gauss_solve(&a.transpose(), &b.transpose()).transpose();
        worst_agree = worst_agree.max((&delta - &oracle).norm() / oracle.norm());
    }
    Ok((worst_resid < 1e-8 && worst_agree < 1e-6, format!("50 systems, worst relative residual {worst_resid:.2e} (< 1e-8), worst relative gap to elimination oracle {worst_agree:.2e} (< 1e-6)")))
}

fn criterion_gradients(base: &Base) -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = &base.model;
    let cfg = model.config.clone();
    let space = build_bitspace(16, cfg.d_model, 11, true).map_err(e2s)?;
    let facts = &base.world.facts;
    let mut worst = 0.0f64;
    for t in 0..20 {
        let fact = &facts[rng.gen_range(0..facts.len())];
        let layer = rng.gen_range(0..cfg.n_layers);
        let tokens = fact.prompt();
        let problem = OffsetProblem::new(model, &tokens, layer, fact.subject_last_pos).map_err(e2s)?;
        let nll = TokenNll { position: fact.answer_pos(), targets: vec![fact.object_token] };
        let obj = AlignmentObjective {
            nll,
            target: one_hot_target(rng.gen_range(1..=16), rng.gen_range(0..2), 16).map_err(e2s)?,
            space: &space,
            lambda_kl: if t % 2 == 0 { 1.0 } else { 0.0 },
            lambda_mse: if t % 2 == 0 { 1.0 } else { 0.0 },
        };
        let delta = DVector::from_fn(cfg.d_model, |_, _| rng.gen_range(-1.0..1.0)) * rng.gen_range(0.0..3.0);
        let u = DVector::from_fn(cfg.d_model, |_, _| rng.gen_range(-1.0..1.0)).normalize();
        let (_, g) = problem.loss_and_grad(&obj, &delta).map_err(e2s)?;
        let h = 1e-5;
        let (lp, _) = problem.loss_and_grad(&obj, &(&delta + &u * h)).map_err(e2s)?;
        let (lm, _) = problem.loss_and_grad(&obj, &(&delta - &u * h)).map_err(e2s)?;
        let fd = (lp - lm) / (2.0 * h);
        let an = g.dot(&u);
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok((worst < 1e-4, format!("20 offset-gradient checks, worst relative error {worst:.2e} (< 1e-4)")))
}

fn criterion_ecc() -> Result<(bool, String), String> {
    let spec = CodecSpec { scheme: Scheme::Hamming74, segments: 1 };
    let mut fixed = 0;
    let mut identity = 0;
    for msg in 0u8..16 {
        let bits: Vec<u8> = (0..4).map(|i| (msg >> (3 - i)) & 1).collect();
        let code = ecc_encode(&bits, &spec).map_err(e2s)?;
        if ecc_decode(&code, &spec).map_err(e2s)?.0 == bits {
            identity += 1;
        }
        for pos in 0..7 {
            let mut c = code.clone();
            c[pos] ^= 1;
            let (out, n) = ecc_decode(&c, &spec).map_err(e2s)?;
            if out == bits && n == 1 {
                fixed += 1;
            }
        }
    }
    let rep = CodecSpec { scheme: Scheme::Repetition3, segments: 2 };
    let rep_ok = (0u8..4).all(|m| {
        let bits = vec![m >> 1, m & 1];
        ecc_decode(&ecc_encode(&bits, &rep).unwrap(), &rep).unwrap().0 == bits
    });
    Ok((
        fixed == 112 && identity == 16 && rep_ok,
        format!("hamming74 single errors corrected {fixed}/112, identity {identity}/16, repetition3 identity {rep_ok}"),
    ))
}

fn criterion_reanchor_algebra() -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m = rng.gen_range(2..40);
        let g = random_matrix(&mut rng, m, m);
        let drift = DriftStats {
            mu: DVector::from_fn(m, |_, _| rng.gen_range(-5.0..5.0)),
            sigma: &g * g.transpose(),
            k_used: 32,
        };
        let w = DVector::from_fn(m, |_, _| rng.gen_range(-3.0..3.0));
        let cfg = ReanchorConfig { rho: 0.0, lam: rng.gen_range(0.01..10.0), form: ReanchorForm::Shrinkage };
        let out = reanchor(&w, &drift, &cfg).map_err(e2s)?;
        worst = worst.max((out - &w).amax());
    }
    let drift = DriftStats { mu: DVector::from_vec(vec![1.0, -1.0]), sigma: DMatrix::zeros(2, 2), k_used: 2 };
    let cfg = ReanchorConfig { rho: 1.0, lam: 1.0, form: ReanchorForm::Centered };
    let main = reanchor(&DVector::from_vec(vec![2.0, 0.0]), &drift, &cfg).map_err(e2s)?;
    let exact = main.as_slice() == [4.0, -2.0];
    Ok((
        worst <= 1e-12 && exact,
        format!("shrinkage form rho=0 worst |w* - w| {worst:.1e} over 100 (<= 1e-12); centered form example {:?} (expect [4, -2])", main.as_slice()),
    ))
}

fn criterion_clean(base: &Base, wm64: &Watermarked, wm32: &Watermarked, runtime: Duration) -> Result<(bool, String), String> {
    let mut ok = runtime < Duration::from_secs(600);
    let mut parts = vec![format!("pipeline runtime {:.1}s (< 600s)", runtime.as_secs_f64())];
    for wm in [wm64, wm32] {
        let n = wm.key.n_bits;
        let w = verify_white_key(&wm.model, &wm.key).map_err(e2s)?;
        let b = verify_black_key(&Loopback::new(wm.model.clone()), &wm.key, true).map_err(e2s)?;
        let pass = w.ber == 0.0 && b.ber <= 1.0 / n as f64 && wm.key.bitspace.joint_orthogonal == (n == 32);
        ok &= pass;
        parts.push(format!("N={n} joint={} white {} black {}", wm.key.bitspace.joint_orthogonal, w.ber, b.ber));
    }
    let _ = base;
    Ok((ok, parts.join("; ")))
}

struct SftRun {
    gate: bool,
    white: f64,
    black_re: f64,
    black_raw: f64,
}

fn sft_runs(base: &Base, wm: &Watermarked) -> Result<Vec<SftRun>, String> {
    (0..5u64)
        .map(|seed| {
            let (m, rep) = run_attack(&wm.model, &base.world, AttackKind::Sft, seed, |_| {}).map_err(e2s)?;
            let q = Loopback::new(m.clone());
            Ok(SftRun {
                gate: rep.gate_passed,
                white: verify_white_key(&m, &wm.key).map_err(e2s)?.ber,
                black_re: verify_black_key(&q, &wm.key, true).map_err(e2s)?.ber,
                black_raw: verify_black_key(&q, &wm.key, false).map_err(e2s)?.ber,
            })
        })
        .collect()
}

fn criterion_robustness(base: &Base, wm: &Watermarked, sft: &[SftRun]) -> Result<(bool, String), String> {
    let (q, qr) = run_attack(&wm.model, &base.world, AttackKind::Quant, 0, |c| c.n_bits = 8).map_err(e2s)?;
    let quant = verify_white_key(&q, &wm.key).map_err(e2s)?.ber;
    let (m, mr) = run_attack(&wm.model, &base.world, AttackKind::Merge, 0, |c| c.alpha = 0.7).map_err(e2s)?;
    let merge = verify_white_key(&m, &wm.key).map_err(e2s)?.ber;
    let gates = sft.iter().all(|r| r.gate);
    let whites: Vec<f64> = sft.iter().map(|r| r.white).collect();
    let med = median(&whites);
    Ok((
        quant == 0.0 && merge == 0.0 && gates && qr.gate_passed && mr.gate_passed && med <= 1.0 / 64.0,
        format!("quant8 white {quant}; merge0.7 white {merge}; SFT gates {gates}, white BERs {whites:?}, median {med} (<= 1/64)"),
    ))
}

fn criterion_reanchor_ablation(sft: &[SftRun]) -> Result<(bool, String), String> {
    let re: Vec<f64> = sft.iter().map(|r| r.black_re).collect();
    let raw: Vec<f64> = sft.iter().map(|r| r.black_raw).collect();
    let lower = sft.iter().filter(|r| r.black_re < r.black_raw).count();
    let (mr, mw) = (median(&re), median(&raw));
    Ok((
        mr <= mw && lower >= 3,
        format!("reanchored {re:?} (median {mr}) vs raw {raw:?} (median {mw}); strictly lower in {lower}/5 (need >= 3)"),
    ))
}

fn criterion_lineage(base: &Base, wm: &Watermarked, indeps: &[(String, submark::ModelState)]) -> Result<(bool, String), String> {
    let derivs = derivative_pool(&wm.model, &base.world, &wm.key.config).map_err(e2s)?;
    let rep = eval_lineage(&wm.key, &derivs, &indeps[..6]).map_err(e2s)?;
    let ok = [rep.white.auc, rep.white.pauc, rep.black.auc, rep.black.pauc].iter().all(|&x| x == 1.0);
    Ok((
        ok,
        format!(
            "6 derivatives vs 6 independents: white AUC {} pAUC {} MD {:.2}; black AUC {} pAUC {} MD {:.2}",
            rep.white.auc, rep.white.pauc, rep.white.md, rep.black.auc, rep.black.pauc, rep.black.md
        ),
    ))
}

fn criterion_false_ownership(base: &Base, indeps: &[(String, submark::ModelState)]) -> Result<(bool, String), String> {
    let (mut agree_w, mut agree_b, mut total) = (0u64, 0u64, 0u64);
    let mut owned = 0;
    for (j, (_, model)) in indeps.iter().enumerate() {
        let mut cfg = with_bits(64);
        cfg.seed = 1000 + j as u64;
        let key = watermark(base, &cfg).map_err(e2s)?.key;
        let registered = key.embedded_bits().map_err(e2s)?;
        let w = verify_white_key(model, &key).map_err(e2s)?;
        let b = verify_black_key(&Loopback::new(model.clone()), &key, true).map_err(e2s)?;
        for rep in [&w, &b] {
            if rep.owned {
                owned += 1;
            }
        }
        let count = |bits: Vec<u8>| bits.iter().zip(&registered).filter(|(a, b)| a == b).count() as u64;
        agree_w += count(w.recovered_bits().map_err(e2s)?);
        agree_b += count(b.recovered_bits().map_err(e2s)?);
        total += registered.len() as u64;
    }
    let pw = binomial_two_sided(agree_w, total, 0.5).map_err(e2s)?;
    let pb = binomial_two_sided(agree_b, total, 0.5).map_err(e2s)?;
    Ok((
        pw > 0.01 && pb > 0.01 && owned == 0,
        format!(
            "{} models: white agreement {agree_w}/{total} p={pw:.3}, black {agree_b}/{total} p={pb:.3} (> 0.01); OWNED verdicts {owned}",
            indeps.len()
        ),
    ))
}

fn criterion_determinism(cfg: &PipelineConfig, base: &Base, wm: &Watermarked) -> Result<(bool, String), String> {
    let base2 = build_base(cfg).map_err(e2s)?;
    let wm2 = watermark(&base2, cfg).map_err(e2s)?;
    let same_base = to_bytes(&base.model) == to_bytes(&base2.model);
    let same_ckpt = to_bytes(&wm.model) == to_bytes(&wm2.model);
    let j1 = wm.key.to_json().map_err(e2s)?;
    let same_key = j1 == wm2.key.to_json().map_err(e2s)?;

    let dir = tempfile::tempdir().map_err(e2s)?;
    let kp = dir.path().join("key.json");
    wm.key.save(&kp).map_err(e2s)?;
    let back = WatermarkKey::load(&kp).map_err(e2s)?;
    let lossless = back == wm.key && back.to_json().map_err(e2s)? == j1;
    let ckpt_round = from_bytes(&to_bytes(&wm.model)).map(|m| to_bytes(&m) == to_bytes(&wm.model)).unwrap_or(false);
    Ok((
        same_base && same_ckpt && same_key && lossless && ckpt_round,
        format!("rerun base {same_base}, checkpoint {same_ckpt}, key file {same_key}; key round trip {lossless}; checkpoint round trip {ckpt_round}"),
    ))
}

fn main() -> ExitCode {
    let mut ledger = Ledger(Vec::new());
    let start = Instant::now();

    ledger.record_result(2, "closed-form update", criterion_closed_form());
    ledger.record_result(9, "ecc", criterion_ecc());
    ledger.record_result(10, "reanchoring algebra", criterion_reanchor_algebra());

    let cfg64 = with_bits(64);
    let t0 = Instant::now();
    let built = build_base(&cfg64).and_then(|base| watermark(&base, &cfg64).map(|wm| (base, wm)));
    let runtime = t0.elapsed();
    let (base, wm64) = match built {
        Ok(x) => x,
        Err(e) => {
            println!("FAIL [ 1] pipeline: {e}");
            return ExitCode::FAILURE;
        }
    };
    ledger.record_result(3, "gradient soundness", criterion_gradients(&base));

    let clean = watermark(&base, &with_bits(32)).map_err(e2s).and_then(|wm32| criterion_clean(&base, &wm64, &wm32, runtime));
    ledger.record_result(1, "clean extraction", clean);

    let r = &wm64.report;
    let drop = r.held_out_accuracy_before - r.held_out_accuracy_after;
    ledger.record(
        7,
        "fidelity",
        drop < 0.01,
        format!(
            "held-out accuracy {:.4} -> {:.4}, drop {:.2} pp (< 1 pp)",
            r.held_out_accuracy_before,
            r.held_out_accuracy_after,
            100.0 * drop
        ),
    );

    match sft_runs(&base, &wm64) {
        Ok(sft) => {
            ledger.record_result(4, "robustness", criterion_robustness(&base, &wm64, &sft));
            ledger.record_result(5, "reanchoring ablation", criterion_reanchor_ablation(&sft));
        }
        Err(e) => {
            ledger.record(4, "robustness", false, format!("error: {e}"));
            ledger.record(5, "reanchoring ablation", false, format!("error: {e}"));
        }
    }

    match independent_pool(&cfg64, &base.world, 10) {
        Ok(indeps) => {
            ledger.record_result(6, "lineage separation", criterion_lineage(&base, &wm64, &indeps));
            ledger.record_result(8, "no false ownership", criterion_false_ownership(&base, &indeps));
        }
        Err(e) => {
            ledger.record(6, "lineage separation", false, format!("error: {e}"));
            ledger.record(8, "no false ownership", false, format!("error: {e}"));
        }
    }

    ledger.record_result(11, "determinism and persistence", criterion_determinism(&cfg64, &base, &wm64));

    ledger.0.sort_by_key(|o| o.id);
    println!("---- summary ({:.0}s) ----", start.elapsed().as_secs_f64());
    for o in &ledger.0 {
        println!("{} [{:>2}] {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
    }
    let failed = ledger.0.iter().filter(|o| !o.pass).count();
    println!("{} of {} criteria passed", ledger.0.len() - failed, ledger.0.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
