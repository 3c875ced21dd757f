//! One pass/fail line per acceptance criterion. Runs without the test
//! harness so the lines come out in order; exits nonzero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use facefit_core::degrade::{build_triplet_dataset, write_dataset, DatasetConfig, NoiseKind, TripletSample};
use facefit_core::eval::{evaluate_dataset, swap_coefficients, EvalConfig, EvalSetup, Fitter, Protocol};
use facefit_core::loss::{Discriminator, ReferenceEmbedder};
use facefit_core::model::{CoefficientVector, LossWeights, Segment, COEFF_DIM};
use facefit_core::pipeline::{
    discriminator_accuracy, fit_naive, fit_robust_batch, train_discriminator, ConsistencyMode,
    FitConfig, FitSession,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const TRIPLETS: usize = 20;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, name: &str, pass: bool, seconds: f64, limit: f64, detail: String) {
        let pass = pass && seconds < limit;
        self.failed += usize::from(!pass);
        println!(
            "{} {name}: {detail} [{seconds:.1} s, limit {limit:.0} s]",
            if pass { "PASS" } else { "FAIL" }
        );
    }
}

fn main() -> ExitCode {
    let mut r = Report { failed: 0 };
    gradients(&mut r);
    rasterizer(&mut r);
    self_reconstruction(&mut r);
    robust_direction(&mut r);
    evaluation_semantics(&mut r);
    cli_determinism(&mut r);
    println!("{} criteria failed", r.failed);
    if r.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn gradients(r: &mut Report) {
    let t = Instant::now();
    let checks = common::gradient_suite(10);
    let detail = checks
        .iter()
        .map(|c| format!("{} {:.1e} ({} seeds)", c.loss, c.worst, c.seeds))
        .collect::<Vec<_>>()
        .join(", ");
    let pass = checks.iter().all(common::GradCheck::passed);
    r.line("gradient suite", pass, t.elapsed().as_secs_f64(), 120.0, detail);
}

fn rasterizer(r: &mut Report) {
    let t = Instant::now();
    let c = common::rasterizer_oracle(100);
    let detail = format!(
        "{} triangles, {} mismatched pixels, {} edge samples, {} covered",
        c.triangles, c.mismatches, c.edge_samples, c.covered
    );
    r.line("rasterizer oracle", c.passed(), t.elapsed().as_secs_f64(), 10.0, detail);
}

fn self_reconstruction(r: &mut Report) {
    let t = Instant::now();
    let results: Vec<(f64, f64)> = (0..10u64).into_par_iter().map(common::self_reconstruction).collect();
    let ok = results
        .iter()
        .filter(|(rmse, lmk)| *rmse < 2.0 / 255.0 && *lmk < 0.5)
        .count();
    let detail = results
        .iter()
        .map(|(rmse, lmk)| format!("{:.2}/{:.3}", rmse * 255.0, lmk))
        .collect::<Vec<_>>()
        .join(" ");
    r.line(
        "self-reconstruction",
        ok >= 9,
        t.elapsed().as_secs_f64(),
        300.0,
        format!("{ok}/10 seeds under 2/255 RMSE and 0.5 px (RMSE*255/landmark px: {detail})"),
    );
}

/// Twenty paired triplets of distinct identities; noise alternates
/// between gaussian sigma 0.15 and salt-and-pepper p 0.1.
fn robust_triplets() -> Vec<TripletSample> {
    let cfg = DatasetConfig {
        identities: TRIPLETS,
        per_identity: 2,
        noise: vec![NoiseKind::Gaussian { sigma: 0.15 }, NoiseKind::SaltPepper { p: 0.1 }],
        ..DatasetConfig::default()
    };
    build_triplet_dataset(&common::basis(), &common::camera(), &cfg, 11)
        .unwrap()
        .into_iter()
        .filter(|s| s.sample == s.identity % 2)
        .collect()
}

fn robust_fit(guided: &[FitSession], mode: ConsistencyMode) -> (Vec<FitSession>, Discriminator) {
    let mut sessions = guided.to_vec();
    for s in &mut sessions {
        s.config.consistency = mode;
    }
    let mut disc = Discriminator::new(sessions[0].config.seed);
    fit_robust_batch(&mut sessions, &mut disc).unwrap();
    (sessions, disc)
}

fn shape_error(c: &CoefficientVector, truth: &CoefficientVector) -> f64 {
    c.segment_distance(truth, Segment::Shape)
}

/// `(trials improved, ratio of means, mean of ratios)`.
fn direction(robust: &[f64], naive: &[f64]) -> (usize, f64, f64) {
    let wins = robust.iter().zip(naive).filter(|(r, n)| r <= n).count();
    let ratio = robust.iter().sum::<f64>() / naive.iter().sum::<f64>();
    let per = robust.iter().zip(naive).map(|(r, n)| r / n).sum::<f64>() / robust.len() as f64;
    (wins, ratio, per)
}

fn robust_direction(r: &mut Report) {
    let t = Instant::now();
    let b = common::basis();
    let cam = common::camera();
    let weights = LossWeights::default();
    let fit = FitConfig::default();
    let samples = robust_triplets();
    let truths: Vec<CoefficientVector> = samples.iter().map(|s| s.guiding_truth.clone().unwrap()).collect();
    let guided: Vec<FitSession> = samples
        .par_iter()
        .map(|s| {
            let mut sess = FitSession::new(b.clone(), cam, weights, fit, s.guiding.clone())
                .unwrap()
                .with_landmarks(s.guiding_landmarks.clone().unwrap())
                .with_degraded(Some(s.occluded.clone()), Some(s.noisy.clone()));
            sess.fit_guidance().unwrap();
            sess
        })
        .collect();
    let shared = t.elapsed().as_secs_f64();

    let t_adv = Instant::now();
    let (adv, disc) = robust_fit(&guided, ConsistencyMode::Adversarial);
    let adv_time = t_adv.elapsed().as_secs_f64();

    let t_naive = Instant::now();
    let naive: Vec<(CoefficientVector, CoefficientVector)> = samples
        .par_iter()
        .map(|s| {
            let fit_one = |img: &facefit_core::render::Image| {
                fit_naive(b.clone(), cam, weights, fit, img.clone()).unwrap().0
            };
            (fit_one(&s.occluded), fit_one(&s.noisy))
        })
        .collect();
    let naive_time = t_naive.elapsed().as_secs_f64();
    let run_time = shared + adv_time + naive_time;

    let errs = |fits: Vec<&CoefficientVector>| -> Vec<f64> {
        fits.iter().zip(&truths).map(|(c, t)| shape_error(c, t)).collect()
    };
    let adv_o = errs(adv.iter().map(|s| &s.c_o).collect());
    let adv_n = errs(adv.iter().map(|s| &s.c_n).collect());
    let naive_o = errs(naive.iter().map(|f| &f.0).collect());
    let naive_n = errs(naive.iter().map(|f| &f.1).collect());

    let need = (0.8 * TRIPLETS as f64).ceil() as usize;
    let (wins, ratio, per) = direction(&adv_o, &naive_o);
    r.line(
        "robustification direction (occlusion)",
        wins >= need && ratio <= 0.8 && per <= 0.8,
        run_time,
        900.0,
        format!("{wins}/{TRIPLETS} improved, error ratio {ratio:.3} (mean of per-trial ratios {per:.3})"),
    );
    let (wins, ratio, per) = direction(&adv_n, &naive_n);
    let by_kind = |gaussian: bool| {
        let pick = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .zip(&samples)
                .filter(|(_, s)| matches!(s.noise.kind, NoiseKind::Gaussian { .. }) == gaussian)
                .map(|(e, _)| *e)
                .collect()
        };
        let (w, q, _) = direction(&pick(&adv_n), &pick(&naive_n));
        format!("{w}/{} improved, ratio {q:.3}", pick(&adv_n).len())
    };
    r.line(
        "robustification direction (noise)",
        wins >= need && ratio <= 0.85 && per <= 0.85,
        run_time,
        900.0,
        format!(
            "{wins}/{TRIPLETS} improved, error ratio {ratio:.3} (mean of per-trial ratios {per:.3}); \
             gaussian {}, salt-and-pepper {}",
            by_kind(true),
            by_kind(false)
        ),
    );

    // Each guiding vector is counted once against C_O and once against
    // C_N so both classes carry equal weight.
    let t_acc = Instant::now();
    let guiding: Vec<CoefficientVector> = adv.iter().flat_map(|s| [s.c_g.clone(), s.c_g.clone()]).collect();
    let robust: Vec<CoefficientVector> = adv.iter().flat_map(|s| [s.c_o.clone(), s.c_n.clone()]).collect();
    let during = discriminator_accuracy(&disc, &guiding, &robust).unwrap();
    let frozen: Vec<CoefficientVector> = naive.iter().flat_map(|(o, n)| [o.clone(), n.clone()]).collect();
    let alone = |lr: f64| {
        let mut d = Discriminator::new(fit.seed);
        train_discriminator(&mut d, &guiding, &frozen, fit.robust_iterations, lr, weights.huber_delta).unwrap();
        discriminator_accuracy(&d, &guiding, &frozen).unwrap()
    };
    let (alone_fast, alone_slow) = (alone(1e-3), alone(fit.discriminator_lr));
    r.line(
        "adversarial dynamic",
        (0.35..=0.65).contains(&during) && alone_fast >= 0.9,
        adv_time + naive_time + t_acc.elapsed().as_secs_f64(),
        900.0,
        format!(
            "accuracy {during:.3} during the robust fit; trained alone on naive fits {alone_fast:.3} \
             at lr 1e-3 ({alone_slow:.3} at the fitting lr {:.0e})",
            fit.discriminator_lr
        ),
    );

    let t_l2 = Instant::now();
    let (l2, _) = robust_fit(&guided, ConsistencyMode::L2);
    let l2_time = t_l2.elapsed().as_secs_f64();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let l2_o = errs(l2.iter().map(|s| &s.c_o).collect());
    let l2_n = errs(l2.iter().map(|s| &s.c_n).collect());
    let (adv_mean, l2_mean) = (mean(&[adv_o, adv_n].concat()), mean(&[l2_o, l2_n].concat()));
    r.line(
        "L2-consistency ablation",
        adv_mean <= l2_mean,
        shared + adv_time + l2_time,
        900.0,
        format!("mean shape error adversarial {adv_mean:.4} vs L2 {l2_mean:.4}"),
    );
}

fn evaluation_semantics(r: &mut Report) {
    let t = Instant::now();
    let mut notes = Vec::new();
    let mut pass = true;

    // Swap: exactly the expression, illumination and pose entries move.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut draw = || CoefficientVector::from_vec((0..COEFF_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut swap_ok = true;
    for _ in 0..100 {
        let (d, g) = (draw(), draw());
        let s = swap_coefficients(&d, &g);
        for i in 0..COEFF_DIM {
            let from_guiding = (80..144).contains(&i) || (224..257).contains(&i);
            let want = if from_guiding { g.as_slice()[i] } else { d.as_slice()[i] };
            swap_ok &= s.as_slice()[i].to_bits() == want.to_bits();
        }
        swap_ok &= swap_coefficients(&s, &g) == s;
    }
    pass &= swap_ok;
    notes.push(format!("swap exact: {swap_ok}"));

    let dir = tempfile::tempdir().unwrap();
    let dataset = |sub: &str, identities, per_identity| {
        let cfg = DatasetConfig {
            identities,
            per_identity,
            ..DatasetConfig::default()
        };
        let samples = build_triplet_dataset(&common::basis(), &common::camera(), &cfg, 5).unwrap();
        let manifest = write_dataset(&dir.path().join(sub), &samples, &common::camera(), &cfg, 5).unwrap();
        (manifest, samples)
    };
    let setup = |weights, fit, eval| EvalSetup {
        basis: common::basis(),
        camera: common::camera(),
        weights,
        fit,
        eval,
        config_hash: "acceptance".into(),
    };
    let embedder = ReferenceEmbedder::new(1);

    // Clean input in place of the degraded one, fits warm-started at the
    // truth. The prior and the adversarial term are off because only then
    // is the truth an exact optimum.
    let (manifest, mut samples) = dataset("clean", 5, 2);
    for s in &mut samples {
        s.occluded = s.guiding.clone();
    }
    let weights = LossWeights {
        alpha_r: 0.0,
        beta_c: 0.0,
        ..LossWeights::default()
    };
    let mut worst = 0.0f64;
    for fitter in [Fitter::Naive, Fitter::Rogue] {
        let eval = EvalConfig {
            protocol: Protocol::SyntheticPaired,
            fitter,
            warm_start: true,
            ..EvalConfig::default()
        };
        let report = evaluate_dataset(&setup(weights, FitConfig::default(), eval), &manifest, &samples, &embedder)
            .unwrap()
            .report;
        pass &= report.failures == 0;
        for s in &report.samples {
            worst = worst.max(s.distance.unwrap_or(f64::INFINITY));
        }
    }
    pass &= worst < 1e-3;
    notes.push(format!("identical inputs worst distance {worst:.1e}"));

    let (manifest, samples) = dataset("full", 50, 10);
    let fit = FitConfig {
        guidance_iterations: 2,
        robust_iterations: 2,
        ..FitConfig::default()
    };
    let report = evaluate_dataset(&setup(LossWeights::default(), fit, EvalConfig::default()), &manifest, &samples, &embedder)
        .unwrap()
        .report;
    let rows = report.to_csv().unwrap().split(|&c| c == b'\n').filter(|l| !l.is_empty()).count() - 1;
    pass &= rows == 500 && report.failures == 0;
    notes.push(format!("50x10 manifest gives {rows} rows"));

    r.line("evaluation semantics", pass, t.elapsed().as_secs_f64(), 600.0, notes.join(", "));
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let key = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(key, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn cli_determinism(r: &mut Report) {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("run.toml"),
        "seed = 3\n[camera]\nwidth = 48\nheight = 48\n[fit]\nguidance_iterations = 30\nrobust_iterations = 30\n",
    )
    .unwrap();
    let commands: [&[&str]; 6] = [
        &["synth-basis", "--vertices", "400", "-o", "{out}/basis.rgbm"],
        &["make-dataset", "--identities", "2", "--per-identity", "2"],
        &["fit", "--dataset", "data", "--triplet", "t1", "--mode", "rogue"],
        &["eval", "--dataset", "data", "--protocol", "real_unpaired"],
        &["render", "--coeffs", "c.rgcv", "-o", "{out}/face.ppm"],
        &["export-obj", "--coeffs", "c.rgcv", "-o", "{out}/face.obj"],
    ];
    facefit_core::io::write_coefficients(&d.join("c.rgcv"), &common::random_face(3)).unwrap();
    let bin = env!("CARGO_BIN_EXE_facefit");
    let run = |args: &[&str], out: &str| {
        let args: Vec<String> = args.iter().map(|a| a.replace("{out}", out)).collect();
        let status = Command::new(bin)
            .current_dir(d)
            .args(["--config", "run.toml", "--seed", "3", "--threads", "4", "--out", out])
            .args(&args)
            .output()
            .unwrap();
        assert!(status.status.success(), "{args:?}: {}", String::from_utf8_lossy(&status.stderr));
    };
    // The dataset the later commands read.
    run(commands[1], "data");
    let mut pass = true;
    let mut files = 0;
    let mut differing = Vec::new();
    for (k, args) in commands.iter().enumerate() {
        let (a, b) = (format!("a{k}"), format!("b{k}"));
        run(args, &a);
        run(args, &b);
        let (ta, tb) = (tree(&d.join(&a)), tree(&d.join(&b)));
        files += ta.len();
        if ta.is_empty() || ta != tb {
            pass = false;
            differing.push(args[0]);
        }
    }
    r.line(
        "CLI determinism",
        pass,
        t.elapsed().as_secs_f64(),
        600.0,
        format!(
            "{} commands run twice, {files} output files byte-identical{}",
            commands.len(),
            if differing.is_empty() { String::new() } else { format!("; differing: {differing:?}") }
        ),
    );
}
