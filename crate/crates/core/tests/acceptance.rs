//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.
//!
//! Run alone with `cargo test -p gazereg --test acceptance --release`.

use std::time::{Duration, Instant};

use gazereg::flow::{occlusion_check, translate_pixel, OcclusionParams, Sampling, Verdict};
use gazereg::heatmap::{Heatmap, HeatmapKind};
use gazereg::linalg::Mat;
use gazereg::model::{attention_from_qk, kl_regularizer, KL_EPS};
use gazereg::patch::{gaze_distribution, merge_patches, PatchGrid};
use gazereg::pipeline::{
    evaluate_trained, grad_check, load_data, rouge_l, train, EvalReport, ModelKind, QueryMode, RunConfig, Runner,
};
use gazereg::synth::{bayes_ceiling, occlusion_scene, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const DIST_TOL: f64 = 1e-9;
const ROW_TOL: f64 = 1e-7;
const DIST_BUDGET: Duration = Duration::from_secs(60);
const KL_TOL: f64 = 1e-9;
const KL_SELF_TOL: f64 = 1e-6;
const OCC_AGREEMENT: f64 = 0.95;
const ORDER_MARGIN: f64 = 0.10;
const ORDER_CEILING_SHARE: f64 = 0.7;
const ORDER_BUDGET: Duration = Duration::from_secs(30 * 60);
const LAMBDA0_BAND: f64 = 0.03;
const LAMBDA_GAIN: f64 = 0.05;
const TIE: f64 = 0.02;
const CORRUPTION_BAND: f64 = 0.03;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(out: &mut Vec<Outcome>, id: usize, name: &'static str, result: Result<(bool, String), String>) {
    let (pass, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("[{}] criterion {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    out.push(Outcome { id, name, pass, detail });
}

fn micro_config(mode: QueryMode, n_blocks: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 0;
    c.query_mode = mode;
    c.n_blocks = n_blocks;
    c.data.patch_px = 6;
    c.data.n_h = 2;
    c.data.n_v = 2;
    c.data.tau_o = 3;
    c.d_model = 8;
    c.heads = 2;
    c.ctx_dim = 12;
    c.hidden_dim = 12;
    c.pseudo.c1 = 4;
    c.pseudo.c2 = 6;
    if mode == QueryMode::GazeText {
        c.lambda = 0.0;
    }
    c
}

fn c1_gradients() -> Result<(bool, String), String> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let mut checked = 0;
    for mode in [QueryMode::Overlay, QueryMode::Pseudo, QueryMode::Rgb, QueryMode::OverlayTrainRgbTest, QueryMode::GazeText] {
        for n_blocks in [1, 2] {
            let cfg = micro_config(mode, n_blocks);
            let r = grad_check(&cfg, 2, GRAD_STEP).map_err(|e| e.to_string())?;
            for p in &r.params {
                checked += p.n;
                if p.max_rel_err >= worst {
                    worst = p.max_rel_err;
                    worst_at = format!("{}/{n_blocks} {}", mode.name(), p.name);
                }
            }
        }
    }
    let took = start.elapsed();
    Ok((
        worst < GRAD_TOL && took < GRAD_BUDGET,
        format!(
            "max rel err {worst:.2e} at {worst_at} over {checked} scalars (tol {GRAD_TOL:e}); {:.1}s (budget {}s)",
            took.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    ))
}

fn c2_distributions() -> Result<(bool, String), String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_sum, mut worst_merged, mut worst_row): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut mass_ok = true;
    for i in 0..10_000 {
        let (n_h, n_v) = ([2, 4, 6, 8][rng.gen_range(0..4)], [2, 4, 6][rng.gen_range(0..3)]);
        let (pw, ph) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let (w, h) = (n_h * pw, n_v * ph);
        let density: f64 = rng.gen_range(0.0..1.0);
        let mut hm = Heatmap::zeros(w, h, i as i64, HeatmapKind::Binary);
        hm.values.iter_mut().for_each(|v| *v = if rng.gen::<f64>() < density { 1.0 } else { 0.0 });
        let grid = PatchGrid::new(n_h, n_v, pw, ph).map_err(|e| e.to_string())?;
        let d = gaze_distribution(&hm, &grid).map_err(|e| e.to_string())?;
        worst_sum = worst_sum.max((d.probs.iter().sum::<f64>() - 1.0).abs());
        let (m, coarse) = merge_patches(&d, &grid, 2, 2).map_err(|e| e.to_string())?;
        worst_merged = worst_merged.max((m.probs.iter().sum::<f64>() - 1.0).abs());
        for cj in 0..coarse.n_v {
            for ci in 0..coarse.n_h {
                let mut fine = 0.0;
                for j in 2 * cj..2 * cj + 2 {
                    for i in 2 * ci..2 * ci + 2 {
                        fine += d.mass[j * n_h + i];
                    }
                }
                mass_ok &= fine == m.mass[cj * coarse.n_h + ci];
            }
        }
        let lit: f64 = hm.values.iter().sum();
        mass_ok &= m.mass.iter().sum::<f64>() == lit;

        let (nq, nk, dk) = (rng.gen_range(1..17), rng.gen_range(1..17), rng.gen_range(1..5) * 2);
        let scale = rng.gen_range(0.1..30.0);
        let mut rand_mat = |r: usize, c: usize| Mat::from_vec(r, c, (0..r * c).map(|_| scale * rng.gen_range(-1.0..1.0)).collect());
        let (q, k, v) = (rand_mat(nq, dk), rand_mat(nk, dk), rand_mat(nk, dk));
        let (weights, _) = attention_from_qk(&q, &k, &v, 2);
        for a in &weights {
            for r in 0..a.rows {
                worst_row = worst_row.max((a.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    let took = start.elapsed();
    Ok((
        worst_sum <= DIST_TOL && worst_merged <= DIST_TOL && mass_ok && worst_row <= ROW_TOL && took < DIST_BUDGET,
        format!(
            "10000 maps: max |sum-1| {worst_sum:.1e}, merged {worst_merged:.1e} (tol {DIST_TOL:e}), mass conserved exactly: {mass_ok}; max attention row |sum-1| {worst_row:.1e} (tol {ROW_TOL:e}); {:.1}s",
            took.as_secs_f64()
        ),
    ))
}

/// Neumaier-compensated sum.
fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

fn kl_oracle(a: &[f64], h: &[f64], eps: f64) -> f64 {
    let z = compensated_sum(h.iter().map(|x| x + eps));
    compensated_sum(a.iter().zip(h).filter(|(ai, _)| **ai > 0.0).map(|(ai, hi)| ai * (ai.ln() - ((hi + eps) / z).ln())))
}

fn random_dist(rng: &mut ChaCha8Rng, n: usize, sparse: bool) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| if sparse && rng.gen::<f64>() < 0.5 { 0.0 } else { rng.gen::<f64>() }).collect();
    if v.iter().all(|x| *x == 0.0) {
        v[rng.gen_range(0..n)] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn c3_kl() -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst, mut worst_self): (f64, f64) = (0.0, 0.0);
    for i in 0..1000 {
        let n = rng.gen_range(1..=64);
        let h = random_dist(&mut rng, n, i % 3 == 0);
        let a = if i % 10 == 0 { h.clone() } else { random_dist(&mut rng, n, i % 4 == 0) };
        let got = kl_regularizer(&a, &h, KL_EPS).map_err(|e| e.to_string())?;
        worst = worst.max((got - kl_oracle(&a, &h, KL_EPS)).abs());
        if i % 10 == 0 {
            worst_self = worst_self.max(got.abs());
        }
    }
    Ok((
        worst <= KL_TOL && worst_self < KL_SELF_TOL,
        format!("1000 pairs: max |kl - oracle| {worst:.1e} (tol {KL_TOL:e}); max KL(H||H) {worst_self:.1e} (tol {KL_SELF_TOL:e})"),
    ))
}

/// Per-pixel forward/backward magnitude check written out directly.
fn occlusion_oracle(s: &gazereg::synth::OcclusionScene, eps: f64, eta: f64) -> Verdict {
    let (w, h) = (s.fwd.width, s.fwd.height);
    let mut flagged = 0usize;
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (s.fwd.fx[y * w + x], s.fwd.fy[y * w + x]);
            let tx = ((x as f64 + fx).round().max(0.0) as usize).min(w - 1);
            let ty = ((y as f64 + fy).round().max(0.0) as usize).min(h - 1);
            let (bx, by) = (s.bwd.fx[ty * w + tx], s.bwd.fy[ty * w + tx]);
            let (dx, dy) = (fx.abs() - bx.abs(), fy.abs() - by.abs());
            if (dx * dx + dy * dy).sqrt() > eps {
                flagged += 1;
            }
        }
    }
    if flagged as f64 / (w * h) as f64 > eta {
        Verdict::Major
    } else {
        Verdict::Minor
    }
}

fn c4_occlusion() -> Result<(bool, String), String> {
    let params = OcclusionParams { epsilon_px: 20.0, eta_threshold: 0.60, ..OcclusionParams::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut agree, mut total, mut majors) = (0, 0, 0);
    let mut pan_exact = true;
    for (ci, coverage) in [0.0, 0.3, 0.7, 0.9].into_iter().enumerate() {
        for k in 0..50 {
            let pan = (rng.gen_range(-4i32..=4) as f64, rng.gen_range(-4i32..=4) as f64);
            let s = occlusion_scene(48, 40, coverage, pan, (ci * 1000 + k) as u64);
            let got = occlusion_check(&s.fwd, &s.bwd, &params).map_err(|e| e.to_string())?;
            let want = occlusion_oracle(&s, params.epsilon_px, params.eta_threshold);
            agree += (got.verdict == want) as usize;
            majors += (got.verdict == Verdict::Major) as usize;
            total += 1;
            for _ in 0..20 {
                let (x, y) = (rng.gen_range(4.0..44.0f64).floor(), rng.gen_range(4.0..36.0f64).floor());
                if s.occluder.is_some_and(|r| r.contains(x, y)) {
                    continue;
                }
                for sampling in [Sampling::Nearest, Sampling::Bilinear] {
                    let t = translate_pixel(x, y, &s.fwd, sampling);
                    pan_exact &= t.x == x + pan.0 && t.y == y + pan.1 && !t.clamped;
                }
            }
        }
    }
    let share = agree as f64 / total as f64;
    Ok((
        share >= OCC_AGREEMENT && pan_exact,
        format!(
            "{agree}/{total} verdicts agree with the per-pixel oracle ({:.1}%, need {:.0}%), {majors} major; pure-pan translation exact: {pan_exact}",
            100.0 * share,
            100.0 * OCC_AGREEMENT
        ),
    ))
}

fn acc(r: &EvalReport) -> f64 {
    r.token_accuracy
}

fn with(base: &RunConfig, f: impl FnOnce(&mut RunConfig)) -> RunConfig {
    let mut c = base.clone();
    f(&mut c);
    c
}

struct Runs {
    runner: Runner,
    base_cfg: RunConfig,
}

impl Runs {
    fn eval(&self, cfg: &RunConfig) -> Result<EvalReport, String> {
        self.runner.evaluate(cfg).map_err(|e| e.to_string())
    }

    fn base(&self) -> RunConfig {
        with(&self.base_cfg, |c| {
            c.model = ModelKind::Base;
            c.query_mode = QueryMode::Rgb;
            c.lambda = 0.0;
        })
    }

    fn singular(&self) -> RunConfig {
        with(&self.base_cfg, |c| c.model = ModelKind::SingularGaze)
    }

    fn aggregated(&self) -> RunConfig {
        self.base_cfg.clone()
    }

    fn lambda(&self, l: f64) -> RunConfig {
        with(&self.base_cfg, |c| c.lambda = l)
    }

    fn mode(&self, m: QueryMode) -> RunConfig {
        with(&self.base_cfg, |c| c.query_mode = m)
    }
}

fn c5_model_ordering(runs: &Runs) -> Result<(bool, String), String> {
    let start = Instant::now();
    let base = acc(&runs.eval(&runs.base())?);
    let singular = acc(&runs.eval(&runs.singular())?);
    let aggregated = acc(&runs.eval(&runs.aggregated())?);
    let took = start.elapsed();
    let ceiling = bayes_ceiling(&runs.base_cfg.data).map_err(|e| e.to_string())?;
    let pass = base < singular
        && singular < aggregated
        && aggregated - base >= ORDER_MARGIN
        && aggregated >= ORDER_CEILING_SHARE * ceiling
        && took <= ORDER_BUDGET;
    Ok((
        pass,
        format!(
            "base {base:.4} < singular {singular:.4} < aggregated {aggregated:.4}; margin {:.4} (need {ORDER_MARGIN}); aggregated/ceiling {:.3} (need {ORDER_CEILING_SHARE}, ceiling {ceiling:.3}); 9 runs in {:.0}s (budget {}s)",
            aggregated - base,
            aggregated / ceiling,
            took.as_secs_f64(),
            ORDER_BUDGET.as_secs()
        ),
    ))
}

fn c6_lambda(runs: &Runs) -> Result<(bool, String), String> {
    let base = acc(&runs.eval(&runs.base())?);
    let l0 = acc(&runs.eval(&runs.lambda(0.0))?);
    let l100 = acc(&runs.eval(&runs.lambda(100.0))?);
    let l1000 = acc(&runs.eval(&runs.lambda(1000.0))?);
    let best = l100.max(l1000);
    let pass = (l0 - base).abs() <= LAMBDA0_BAND && best - l0 >= LAMBDA_GAIN;
    Ok((
        pass,
        format!(
            "base {base:.4}, lambda 0 {l0:.4} (|diff| {:.4}, band {LAMBDA0_BAND}), lambda 100 {l100:.4}, lambda 1000 {l1000:.4}; best gain over lambda 0 {:.4} (need {LAMBDA_GAIN})",
            (l0 - base).abs(),
            best - l0
        ),
    ))
}

fn c7_query_modes(runs: &Runs) -> Result<(bool, String), String> {
    let overlay = acc(&runs.eval(&runs.mode(QueryMode::Overlay))?);
    let pseudo = acc(&runs.eval(&runs.mode(QueryMode::Pseudo))?);
    let rgb = acc(&runs.eval(&runs.mode(QueryMode::Rgb))?);
    let otrt = acc(&runs.eval(&runs.mode(QueryMode::OverlayTrainRgbTest))?);
    let pass = overlay + TIE >= pseudo && pseudo + TIE >= rgb && rgb + TIE >= otrt;
    Ok((
        pass,
        format!("overlay {overlay:.4} >= pseudo {pseudo:.4} >= rgb {rgb:.4} >= overlay-train-rgb-test {otrt:.4} (tie tolerance {TIE})"),
    ))
}

fn c8_kl_effect(runs: &Runs) -> Result<(bool, String), String> {
    let mut finals = Vec::new();
    let mut pass = true;
    let mut parts = Vec::new();
    for l in [0.0, 100.0, 1000.0] {
        let cfg = runs.lambda(l);
        let fin = runs.eval(&cfg)?.kl_to_gaze.ok_or("no KL reported")?;
        if l > 0.0 {
            let init = runs.runner.evaluate_init(&cfg).map_err(|e| e.to_string())?.kl_to_gaze.ok_or("no KL reported")?;
            pass &= fin < init;
            parts.push(format!("lambda {l}: init {init:.4} -> final {fin:.4}"));
        } else {
            parts.push(format!("lambda 0: final {fin:.4}"));
        }
        finals.push(fin);
    }
    let monotone = finals.windows(2).all(|w| w[1] < w[0]);
    Ok((pass && monotone, format!("{}; strictly decreasing in lambda: {monotone}", parts.join(", "))))
}

/// LCS by enumerating every subsequence of the shorter sequence.
fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let is_subseq = |s: &[u8]| {
        let mut it = long.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let n = mask.count_ones() as usize;
        if n <= best {
            continue;
        }
        let sub: Vec<u8> = (0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| short[i]).collect();
        if is_subseq(&sub) {
            best = n;
        }
    }
    best
}

fn c9_rouge() -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    let (mut identical_ok, mut disjoint_ok) = (true, true);
    for i in 0..1000 {
        let vocab = rng.gen_range(1..=8u8);
        let reference: Vec<u8> = (0..rng.gen_range(1..=12)).map(|_| rng.gen_range(0..vocab)).collect();
        let candidate: Vec<u8> = match i % 10 {
            0 => reference.clone(),
            1 => (0..rng.gen_range(1..=12)).map(|_| rng.gen_range(8..16)).collect(),
            2 => Vec::new(),
            _ => (0..rng.gen_range(0..=12)).map(|_| rng.gen_range(0..vocab)).collect(),
        };
        let got = rouge_l(&candidate, &reference, 1.0).map_err(|e| e.to_string())?;
        let (p, r, f) = if candidate.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            let l = brute_lcs(&candidate, &reference) as f64;
            let (p, r) = (l / candidate.len() as f64, l / reference.len() as f64);
            let f = if p == 0.0 && r == 0.0 { 0.0 } else { 2.0 * p * r / (r + p) };
            (p, r, f)
        };
        if got.precision.to_bits() != p.to_bits() || got.recall.to_bits() != r.to_bits() || got.f.to_bits() != f.to_bits() {
            mismatches += 1;
        }
        match i % 10 {
            0 => identical_ok &= got.precision == 1.0 && got.recall == 1.0 && got.f == 1.0,
            1 => disjoint_ok &= got.precision == 0.0 && got.recall == 0.0 && got.f == 0.0,
            _ => {}
        }
    }
    Ok((
        mismatches == 0 && identical_ok && disjoint_ok,
        format!("{mismatches} bit mismatches in 1000 pairs; identical F=1: {identical_ok}; disjoint F=0: {disjoint_ok}"),
    ))
}

fn c10_determinism(runs: &Runs) -> Result<(bool, String), String> {
    let mut cfg = runs.aggregated();
    cfg.seed = 0;
    let data = load_data(&cfg).map_err(|e| e.to_string())?;
    let fresh = train(&cfg, &data).map_err(|e| e.to_string())?;
    let a = evaluate_trained(&fresh, &cfg, &data, Split::Test).map_err(|e| e.to_string())?.to_json();
    let b = runs.runner.evaluate_seed(&cfg, 0).map_err(|e| e.to_string())?.to_json();
    let dir = std::env::temp_dir().join(format!("gazereg-acceptance-{}", std::process::id()));
    gazereg::pipeline::save_trained(&fresh, &dir).map_err(|e| e.to_string())?;
    let loaded = gazereg::pipeline::load_trained(&dir, &cfg).map_err(|e| e.to_string())?;
    let c = gazereg::pipeline::evaluate_params(&cfg, loaded.seed, &loaded.params, None, &data, Split::Test)
        .map_err(|e| e.to_string())?
        .to_json();
    let _ = std::fs::remove_dir_all(&dir);
    Ok((
        a == b && b == c,
        format!(
            "two independent train+eval runs byte-identical: {}; checkpoint round trip byte-identical: {} ({} bytes)",
            a == b,
            a == c,
            a.len()
        ),
    ))
}

fn c11_corruption(runs: &Runs) -> Result<(bool, String), String> {
    let mut accs = Vec::new();
    for p in [0.0, 0.2, 0.6, 1.0] {
        accs.push(acc(&runs.eval(&with(&runs.aggregated(), |c| c.corruption_p = p))?));
    }
    let otrt = acc(&runs.eval(&runs.mode(QueryMode::OverlayTrainRgbTest))?);
    let monotone = accs.windows(2).all(|w| w[1] <= w[0]);
    let close = (accs[3] - otrt).abs() <= CORRUPTION_BAND;
    Ok((
        monotone && close,
        format!(
            "accuracy at p = 0/0.2/0.6/1.0: {:.4}/{:.4}/{:.4}/{:.4} (non-increasing: {monotone}); p=1 vs overlay-train-rgb-test {otrt:.4}, |diff| {:.4} (band {CORRUPTION_BAND})",
            accs[0],
            accs[1],
            accs[2],
            accs[3],
            (accs[3] - otrt).abs()
        ),
    ))
}

fn main() {
    let started = Instant::now();
    let mut out = Vec::new();
    report(&mut out, 1, "gradient correctness", c1_gradients());
    report(&mut out, 2, "distribution invariants", c2_distributions());
    report(&mut out, 3, "KL oracle equivalence", c3_kl());
    report(&mut out, 4, "occlusion-check fidelity", c4_occlusion());
    report(&mut out, 9, "ROUGE-L exactness", c9_rouge());

    let runs = Runs { runner: Runner::new(), base_cfg: RunConfig::default() };
    report(&mut out, 5, "model ordering", c5_model_ordering(&runs));
    report(&mut out, 6, "lambda sweep", c6_lambda(&runs));
    report(&mut out, 7, "query-mode ordering", c7_query_modes(&runs));
    report(&mut out, 8, "regularizer effect on KL", c8_kl_effect(&runs));
    report(&mut out, 10, "determinism", c10_determinism(&runs));
    report(&mut out, 11, "corruption trend", c11_corruption(&runs));

    out.sort_by_key(|o| o.id);
    println!();
    println!("summary ({:.0}s):", started.elapsed().as_secs_f64());
    for o in &out {
        println!("  {} {:>2} {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
    }
    let failed = out.iter().filter(|o| !o.pass).count();
    println!("{} of {} criteria passed", out.len() - failed, out.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
