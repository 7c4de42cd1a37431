//! Acceptance suite. Prints one line per criterion and fails the target when
//! any required criterion fails. Set `JLBO_PAPER_CHECK=1` for the
//! paper-scale spot check.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use jlbo::beamformer::{design_beams, BeamContext, BeamformerOptions};
use jlbo::channel::{prior_variances, sample_gains, ArrayConfig, GainRealization};
use jlbo::driver::{run_jlbo, BeamPolicy, JlboProblem, NoiseMode, Simulator};
use jlbo::fim::{crlb_instantaneous, crlb_total, derivative_vectors, derivative_vectors_bar, fisher_information, BoundKind, DerivativeVectors};
use jlbo::gains::ls_estimate;
use jlbo::geometry::{pack_kappa, sample_scene, unpack_kappa, with_half, Half, Layout, LocationParams, Scene, SceneConfig};
use jlbo::harness::{iteration_medians, run_monte_carlo, summarize, trial_seed, SweepAxis, SystemConfig, TrialInstance};
use jlbo::linalg::hermitian_eigen;
use jlbo::location::{estimate_location, jacobian_gamma_h, jacobian_lambda_g, perturbed_start, LocationContext, LocationOptions};
use jlbo::signal::{gamma_matrix, lambda_matrix, mu_bar_phasors, mu_phasors, noiseless_rx, BeamformingState, LinkConfig};
use jlbo::C64;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

struct Instance {
    scene: Scene,
    gains: GainRealization,
    bf: BeamformingState,
    link: LinkConfig,
}

fn instance(seed: u64, link: LinkConfig) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = sample_scene(&SceneConfig::new(link.layout, [100.0, 100.0]), &mut rng).unwrap();
    let (vg, vh) = prior_variances(&scene).unwrap();
    let gains = sample_gains(&vg, &vh, &mut rng).unwrap();
    let bf = BeamformingState::random(&link, &mut rng);
    Instance { scene, gains, bf, link }
}

fn link(n_tx: usize, n_ue: usize, n_ris: usize, n_bs: usize, n_s: usize, m: usize, l: usize, ts: f64) -> LinkConfig {
    LinkConfig {
        array: ArrayConfig::half_wavelength(n_tx, n_ue, n_ris, n_bs, n_s, 28e9, ts),
        layout: Layout::new(n_bs, l, l),
        n_pilots: m,
    }
}

fn rel(a: &DVector<C64>, b: &DVector<C64>) -> f64 {
    (a - b).norm() / b.norm()
}

fn fd_step(k: &LocationParams, idx: usize) -> f64 {
    1e-6 * k.kappa[idx].abs().max(1.0)
}

fn bilinear_oracle() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let inst = instance(seed, link(4, 2, 4, 2, 2, 2, 1, 1e-7));
        let y = noiseless_rx(&inst.scene, &inst.gains, &inst.bf, &inst.link).unwrap();
        let gh = gamma_matrix(&inst.scene, &inst.bf, &inst.gains.g, &inst.link).unwrap() * &inst.gains.h;
        let lg = lambda_matrix(&inst.scene, &inst.bf, &inst.gains.h, &inst.link).unwrap() * &inst.gains.g;
        worst = worst.max(rel(&y, &gh)).max((&gh - &lg).norm() / gh.norm());
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(worst < 1e-10 && secs < 5.0, format!("worst relative mismatch {worst:.2e} in {secs:.2} s"))
}

fn noiseless_recovery() -> Verdict {
    let mut gain_err: f64 = 0.0;
    for seed in 0..10 {
        let inst = instance(seed, link(4, 2, 8, 2, 2, 4, 1, 1e-7));
        let y = noiseless_rx(&inst.scene, &inst.gains, &inst.bf, &inst.link).unwrap();
        let gamma = gamma_matrix(&inst.scene, &inst.bf, &inst.gains.g, &inst.link).unwrap();
        let h = ls_estimate(&y, &gamma).unwrap().estimate;
        let lambda = lambda_matrix(&inst.scene, &inst.bf, &h, &inst.link).unwrap();
        let g = ls_estimate(&y, &lambda).unwrap().estimate;
        gain_err = gain_err.max(rel(&h, &inst.gains.h)).max(rel(&g, &inst.gains.g));
    }

    let inst = instance(2, link(4, 2, 8, 2, 2, 4, 1, 1e-6));
    let truth = pack_kappa(&inst.scene).unwrap();
    let y = noiseless_rx(&inst.scene, &inst.gains, &inst.bf, &inst.link).unwrap();
    let bursts = [inst.bf.clone()];
    let ctx = LocationContext {
        template: &inst.scene,
        bf: &bursts,
        g: &inst.gains.g,
        h: &inst.gains.h,
        link: &inst.link,
        options: LocationOptions {
            max_iters: 50,
            tol: 0.0,
            ..LocationOptions::default()
        },
    };
    let init = perturbed_start(&truth, 0.5, 0.05, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let est = estimate_location(&y, &init, &ctx).unwrap();
    let loc_err = est.params.kappa.iter().zip(&truth.kappa).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    verdict(
        gain_err < 1e-8 && loc_err < 1e-4 && est.iterations <= 50,
        format!("gain error {gain_err:.2e}; location max error {loc_err:.2e} after {} iterations", est.iterations),
    )
}

fn worst_column_error(dv: &DerivativeVectors, scene: &Scene, link: &LinkConfig, f: impl Fn(&Scene) -> DMatrix<C64>) -> f64 {
    let lay = link.layout;
    let truth = pack_kappa(scene).unwrap();
    let (pos, orient, block) = match dv.half {
        Half::Ris => (lay.ris_index(), lay.ue_orientation_index(), lay.u_index(0, 0)),
        Half::Ue => (lay.ue_index(), lay.ris_orientation_index(), lay.r_index(0, 0)),
    };
    let mut cols: Vec<(usize, &DMatrix<C64>)> = vec![(pos, &dv.p[0]), (pos + 1, &dv.p[1]), (orient, &dv.o)];
    cols.extend(dv.q.iter().enumerate().map(|(i, q)| (block + i, q)));
    let mut worst: f64 = 0.0;
    for (k, an) in cols {
        if !lay.is_active(k) {
            continue;
        }
        let h = fd_step(&truth, k);
        let (mut up, mut dn) = (truth.clone(), truth.clone());
        up.kappa[k] += h;
        dn.kappa[k] -= h;
        let fd = (f(&unpack_kappa(&up, scene).unwrap()) - f(&unpack_kappa(&dn, scene).unwrap())) / C64::new(2.0 * h, 0.0);
        let scale = an.norm().max(fd.norm());
        if scale <= 1e-12 * dv.mu.norm() {
            continue;
        }
        worst = worst.max((fd - an).norm() / scale);
    }
    worst
}

fn jacobians_and_derivative_vectors() -> Verdict {
    let mut jac: f64 = 0.0;
    let mut vecs: f64 = 0.0;
    for seed in 0..10 {
        let inst = instance(100 + seed, link(4, 2, 4, 2, 2, 2, 1, 1e-7));
        let truth = pack_kappa(&inst.scene).unwrap();
        for half in [Half::Ris, Half::Ue] {
            let k = truth.half(half);
            let j = match half {
                Half::Ris => jacobian_gamma_h(&k, &inst.bf, &inst.gains.g, &inst.gains.h, &inst.scene, &inst.link),
                Half::Ue => jacobian_lambda_g(&k, &inst.bf, &inst.gains.g, &inst.gains.h, &inst.scene, &inst.link),
            }
            .unwrap()
            .j;
            let model = |v: &[f64]| {
                let s = with_half(&inst.scene, half, v).unwrap();
                noiseless_rx(&s, &inst.gains, &inst.bf, &inst.link).unwrap()
            };
            let idx = inst.link.layout.half_indices(half);
            for c in 0..k.len() {
                if !inst.link.layout.is_active(idx[c]) {
                    continue;
                }
                let h = 1e-6 * k[c].abs().max(1.0);
                let (mut up, mut dn) = (k.clone(), k.clone());
                up[c] += h;
                dn[c] -= h;
                let fd = (model(&up) - model(&dn)) / C64::new(2.0 * h, 0.0);
                let an = j.column(c).into_owned();
                jac = jac.max((fd - &an).norm() / an.norm());
            }
        }
        for n in 0..2 {
            for jj in 0..2 {
                for l in 0..2 {
                    let dv = derivative_vectors(&inst.scene, &inst.link, n, jj, l).unwrap();
                    vecs = vecs.max(worst_column_error(&dv, &inst.scene, &inst.link, |s| mu_phasors(s, &inst.link, n, jj, l).unwrap()));
                    let dv = derivative_vectors_bar(&inst.scene, &inst.bf.theta, &inst.gains.h, &inst.link, n, jj, l).unwrap();
                    vecs = vecs.max(worst_column_error(&dv, &inst.scene, &inst.link, |s| {
                        mu_bar_phasors(s, &inst.bf.theta, &inst.gains.h, &inst.link, n, jj, l).unwrap()
                    }));
                }
            }
        }
    }
    verdict(jac < 1e-5 && vecs < 1e-5, format!("jacobian {jac:.2e}, p/o/q vectors {vecs:.2e}"))
}

fn fim_properties() -> Verdict {
    let mut herm: f64 = 0.0;
    let mut psd: f64 = f64::INFINITY;
    let mut exact = true;
    let mut ratio_err: f64 = 0.0;
    for seed in 0..10 {
        let inst = instance(200 + seed, link(4, 2, 8, 2, 2, 4, 1, 1e-7));
        let (g, h) = (&inst.gains.g, &inst.gains.h);
        for half in [Half::Ris, Half::Ue] {
            let f = fisher_information(&inst.scene, &inst.bf, g, h, 1.0, &inst.link, half).unwrap();
            herm = herm.max(f.hermitian_error());
            let (ev, _) = hermitian_eigen(&f.fim).unwrap();
            let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
            psd = psd.min(min / f.fim.norm());
            for s2 in [0.25, 4.0] {
                let fs = fisher_information(&inst.scene, &inst.bf, g, h, s2, &inst.link, half).unwrap();
                exact &= fs.fim.iter().zip(f.fim.iter()).all(|(a, b)| *a * C64::new(s2, 0.0) == *b);
            }
        }
        let a = crlb_instantaneous(&inst.scene, &inst.bf, g, h, 1e-3, &inst.link).unwrap().total;
        let b = crlb_instantaneous(&inst.scene, &inst.bf, g, h, 4e-3, &inst.link).unwrap().total;
        let c = crlb_total(&inst.scene, &inst.bf, g, h, &inst.gains.var_g, &inst.gains.var_h, 1e-3, &inst.link).unwrap().total;
        let d = crlb_total(&inst.scene, &inst.bf, g, h, &inst.gains.var_g, &inst.gains.var_h, 4e-3, &inst.link).unwrap().total;
        ratio_err = ratio_err.max((b / a - 4.0).abs()).max((d / c - 4.0).abs());
    }
    verdict(
        herm <= 1e-12 && psd >= -1e-10 && exact && ratio_err < 1e-9,
        format!("hermitian error {herm:.1e}, min eigenvalue / norm {psd:.1e}, exact scaling {exact}, bound ratio error {ratio_err:.1e}"),
    )
}

fn crlb_validity() -> Verdict {
    let cfg = SystemConfig {
        max_outer: 1,
        ..SystemConfig::desk()
    };
    let mut above = 0;
    let mut done = 0;
    for trial in 0..100 {
        let seed = trial_seed(cfg.seed ^ 0x5eed, trial);
        let inst = TrialInstance::sample(&cfg, 20.0, seed).unwrap();
        let mut sim = Simulator::new(
            inst.scene.clone(),
            inst.gains.clone(),
            inst.link,
            inst.sigma2,
            NoiseMode::Fresh,
            ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        let problem = JlboProblem {
            template: &inst.scene,
            link: &inst.link,
            var_g: &inst.gains.var_g,
            var_h: &inst.gains.var_h,
            sigma2: inst.sigma2,
            truth: Some(&inst.truth),
        };
        let Ok(st) = run_jlbo(&mut sim, &inst.init, &problem, &cfg.jlbo_options(BeamPolicy::Jlbo), &mut ChaCha8Rng::seed_from_u64(seed + 1)) else {
            continue;
        };
        let fim = fisher_information(&inst.scene, &inst.init.bf, &inst.gains.g, &inst.gains.h, inst.sigma2, &inst.link, Half::Ris).unwrap();
        let bound = fim.real_kappa_bound().unwrap();
        let lay = inst.link.layout;
        let sq: f64 = lay
            .half_indices(Half::Ris)
            .into_iter()
            .filter(|&i| lay.is_active(i))
            .map(|i| (st.kappa_hat.kappa[i] - inst.truth.kappa[i]).powi(2))
            .sum();
        done += 1;
        if sq >= bound {
            above += 1;
        }
    }
    verdict(above as f64 >= 0.95 * 100.0, format!("squared error at or above the RIS-half bound in {above} of {done} completed trials"))
}

fn descent_guarantees() -> Verdict {
    let mut max_slope = f64::NEG_INFINITY;
    let mut monotone = true;
    let mut modulus: f64 = 0.0;
    for seed in 0..10 {
        let inst = instance(300 + seed, link(8, 2, 16, 2, 2, 4, 2, 1e-7));
        let y = noiseless_rx(&inst.scene, &inst.gains, &inst.bf, &inst.link).unwrap();
        for bound in [BoundKind::Instantaneous, BoundKind::Expected] {
            let ctx = BeamContext {
                scene: &inst.scene,
                g: &inst.gains.g,
                h: &inst.gains.h,
                var_g: &inst.gains.var_g,
                var_h: &inst.gains.var_h,
                sigma2: y.norm_squared() / inst.link.rows() as f64 / 100.0,
                link: &inst.link,
                bound,
            };
            let out = design_beams(&inst.bf, &ctx, &BeamformerOptions::default()).unwrap();
            for r in &out.trace {
                max_slope = max_slope.max(r.w_slope).max(r.theta_slope);
            }
            monotone &= out.surrogate_steps.iter().all(|(before, after)| after <= before);
            modulus = modulus.max(out.bf.theta.iter().map(|t| (t.norm() - 1.0).abs()).fold(0.0, f64::max));
        }
    }
    verdict(
        max_slope <= 0.0 && monotone && modulus <= 1e-15,
        format!("max directional derivative {max_slope:.2e}, monotone surrogate {monotone}, max modulus error {modulus:.1e}"),
    )
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn trends() -> Vec<(&'static str, Verdict)> {
    let start = Instant::now();
    let snr = run_monte_carlo(&SystemConfig {
        sweep: SweepAxis::Snr,
        ..SystemConfig::desk()
    })
    .unwrap();
    let nris = run_monte_carlo(&SystemConfig {
        sweep: SweepAxis::NRis,
        snr_db: vec![15.0],
        ..SystemConfig::desk()
    })
    .unwrap();
    let versus = run_monte_carlo(&SystemConfig {
        sweep: SweepAxis::Iterations,
        snr_db: vec![15.0],
        baselines: vec![BeamPolicy::Random],
        ..SystemConfig::desk()
    })
    .unwrap();
    let secs = start.elapsed().as_secs_f64();

    let mut configs = 0;
    let mut monotone = 0;
    let mut per_trial = (0, 0);
    for out in [&snr, &nris] {
        let values: Vec<f64> = summarize(&out.records).iter().map(|s| s.sweep_value).collect();
        for v in values {
            configs += 1;
            let med = iteration_medians(&out.records, BeamPolicy::Jlbo, v);
            if med.windows(2).all(|w| w[1] <= w[0]) {
                monotone += 1;
            }
            let mut trials: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
            for r in out.records.iter().filter(|r| r.sweep_value == v && r.algorithm == BeamPolicy::Jlbo && !r.failed()) {
                trials.entry(r.trial).or_default().push(r.nmse_position);
            }
            per_trial.1 += trials.len();
            per_trial.0 += trials.values().filter(|t| t.windows(2).all(|w| w[1] <= w[0])).count();
        }
    }
    let a = verdict(
        monotone as f64 >= 0.9 * configs as f64,
        format!(
            "median curve monotone in {monotone} of {configs} configurations; individual trials monotone in {} of {}",
            per_trial.0, per_trial.1
        ),
    );

    let medians = |out: &jlbo::harness::MonteCarloOutput, alg: BeamPolicy| -> Vec<f64> {
        summarize(&out.records).iter().filter(|s| s.algorithm == alg).map(|s| s.median_nmse_position).collect()
    };
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>().join(" > ");
    let m_r = medians(&nris, BeamPolicy::Jlbo);
    let b = verdict(strictly_decreasing(&m_r), format!("median NMSE over N_R 16/32/64: {}", fmt(&m_r)));
    let m_s = medians(&snr, BeamPolicy::Jlbo);
    let c = verdict(strictly_decreasing(&m_s), format!("median NMSE over SNR 0/10/20 dB: {}", fmt(&m_s)));
    let (j, r) = (medians(&versus, BeamPolicy::Jlbo)[0], medians(&versus, BeamPolicy::Random)[0]);
    let d = verdict(j < r, format!("median NMSE at 15 dB: jlbo {j:.2e}, random {r:.2e}"));
    let t = verdict(secs < 900.0, format!("trend suite took {secs:.0} s"));
    vec![("7a", a), ("7b", b), ("7c", c), ("7d", d), ("7 time", t)]
}

fn paper_scale() -> Verdict {
    if std::env::var_os("JLBO_PAPER_CHECK").is_none() {
        return Verdict::Skip("set JLBO_PAPER_CHECK=1 to run".into());
    }
    let trials = std::env::var("JLBO_PAPER_TRIALS").ok().and_then(|v| v.parse().ok()).unwrap_or(20);
    let cfg = SystemConfig {
        sweep: SweepAxis::Iterations,
        snr_db: vec![15.0],
        trials,
        ..SystemConfig::paper()
    };
    let out = run_monte_carlo(&cfg).unwrap();
    let mut errors = Vec::new();
    for trial in 0..trials {
        let Some(last) = out.records.iter().filter(|r| r.trial == trial && !r.failed()).max_by_key(|r| r.iteration) else {
            continue;
        };
        let inst = TrialInstance::sample(&cfg, 15.0, last.seed).unwrap();
        let x = inst.truth.ue_position();
        errors.push((last.nmse_position * (x[0] * x[0] + x[1] * x[1])).sqrt());
    }
    let med = jlbo::harness::median(&errors);
    verdict(med <= 5.0 * 0.028 && med >= 0.028 / 5.0, format!("median UE position error {med:.3} m over {} trials", errors.len()))
}

fn determinism() -> Verdict {
    let base = SystemConfig {
        trials: 4,
        max_outer: 3,
        sweep: SweepAxis::Snr,
        baselines: vec![BeamPolicy::Random, BeamPolicy::FixedRis],
        ..SystemConfig::desk()
    };
    let csv = |workers| {
        let out = run_monte_carlo(&SystemConfig { workers, ..base.clone() }).unwrap();
        let mut buf = Vec::new();
        jlbo::harness::write_csv(&out.records, &mut buf).unwrap();
        buf
    };
    let (a, b, c) = (csv(1), csv(3), csv(1));
    verdict(a == b && a == c, format!("{} bytes, identical across 1 and 3 workers and across reruns", a.len()))
}

fn main() -> ExitCode {
    let mut failed = false;
    let mut report = |name: &str, v: Verdict| {
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed = true;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("criterion {name}: {tag} ({detail})");
    };
    report("1", bilinear_oracle());
    report("2", noiseless_recovery());
    report("3", jacobians_and_derivative_vectors());
    report("4", fim_properties());
    report("5", crlb_validity());
    report("6", descent_guarantees());
    for (name, v) in trends() {
        report(name, v);
    }
    report("8", paper_scale());
    report("9", determinism());
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
