use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cgvar::diagnostics::{
    assign_cvs, entropy_lower_bound, entropy_upper_bound, forward_kl_estimate, histogram2d, local_minima,
    moments, predicted_potential, reverse_kl_bound, slice_points, Histogram2D, MarginalEstimator, Moments,
};
use cgvar::potentials::Potential;
use cgvar::reference::{mala_chain, OracleFixture};
use cgvar::stats::pearson;
use cgvar::train::{stream_rng, FIRST_STAGE_CHECKPOINT};
use cgvar::{CgModel, PotentialSpec, RunConfig};
use serde::Serialize;

use crate::output::{names, read_samples, write_csv, write_json};
use crate::run::{create_out, load_model, oracle_name, STREAM_REFERENCE};

const STREAM_DIAGNOSE: u64 = 7 << 40;

const MODE_MASS_TOL: f64 = 0.05;
const MEAN_TOL: f64 = 0.1;
const STD_REL_TOL: f64 = 0.1;
const CV_CORR_MIN: f64 = 0.9;

#[derive(Serialize)]
struct Check {
    name: String,
    value: f64,
    threshold: f64,
    passed: bool,
}

impl Check {
    fn new(name: impl Into<String>, value: f64, threshold: f64, passed: bool) -> Self {
        Check {
            name: name.into(),
            value,
            threshold,
            passed,
        }
    }
}

#[derive(Serialize)]
struct ModeMasses {
    left: f64,
    right: f64,
}

impl ModeMasses {
    fn of(xs: &[Vec<f64>]) -> Self {
        let right = xs.iter().filter(|x| x[0] > 0.0).count() as f64 / xs.len() as f64;
        ModeMasses { left: 1.0 - right, right }
    }
}

#[derive(Serialize)]
struct Report {
    beta: f64,
    model: Moments,
    model_mode_masses: ModeMasses,
    reference_chain: Moments,
    oracle: Option<Moments>,
    oracle_mode_masses: Option<ModeMasses>,
    cv_correlation: f64,
    checks: Vec<Check>,
    skipped: Vec<String>,
}

#[derive(Serialize, Clone, Copy)]
struct KlRow {
    beta_trained: f64,
    reverse_kl: f64,
    reverse_kl_se: f64,
    forward_kl: Option<f64>,
    forward_kl_se: Option<f64>,
    entropy_lower: f64,
    entropy_upper: f64,
}

fn find_oracle(config: &RunConfig, checkpoint: &Path) -> Option<OracleFixture> {
    let name = oracle_name(&config.potential, config.reference.beta);
    let candidates: Vec<PathBuf> = match &config.diagnose.fixture {
        Some(p) => vec![p.clone()],
        None => {
            let dir = checkpoint.parent().unwrap_or(Path::new("."));
            vec![dir.join(name), config.out.join(name), Path::new("fixtures").join(name)]
        }
    };
    for path in &candidates {
        if !path.exists() {
            continue;
        }
        match OracleFixture::load(path) {
            Ok(f) if f.potential == config.potential && f.result.beta == config.reference.beta => {
                log::info!("oracle fixture {}", path.display());
                return Some(f);
            }
            Ok(_) => log::warn!("{} describes a different potential or temperature", path.display()),
            Err(e) => log::warn!("unreadable oracle fixture {}: {e}", path.display()),
        }
    }
    log::warn!("no oracle fixture found; oracle checks are skipped");
    None
}

fn write_hist(path: &Path, h: &Histogram2D) -> Result<()> {
    let (nx, ny) = h.spec.bins;
    let rows = (0..nx).flat_map(|i| {
        (0..ny).map(move |j| {
            let (x, y) = h.bin_centre(i, j);
            vec![x, y, h.freq[i * ny + j]]
        })
    });
    let (a, b) = h.spec.dims;
    write_csv(path, &[format!("x{}", a + 1), format!("x{}", b + 1), "freq".into()], rows)
}

fn kl_row(
    config: &RunConfig,
    model: &CgModel,
    beta_trained: f64,
    reference: &[Vec<f64>],
    oracle: Option<&OracleFixture>,
    stream: u64,
) -> Result<KlRow> {
    let d = &config.diagnose;
    let beta = config.reference.beta;
    let mut rng = stream_rng(config.seed, stream);
    let rev = reverse_kl_bound(model, &config.potential, beta, d.kl_samples, oracle.map(|o| o.result.log_z), &mut rng)?;
    let fwd = match oracle {
        Some(o) => {
            let est = MarginalEstimator::new(model, d.marginal_samples, &mut rng)?;
            Some(forward_kl_estimate(&est, reference, &o.result)?)
        }
        None => None,
    };
    let lo = entropy_lower_bound(model, d.kl_samples, &mut rng)?;
    let hi = entropy_upper_bound(model, d.kl_samples, &mut rng)?;
    Ok(KlRow {
        beta_trained,
        reverse_kl: rev.value,
        reverse_kl_se: rev.std_err,
        forward_kl: fwd.map(|f| f.value),
        forward_kl_se: fwd.map(|f| f.std_err),
        entropy_lower: lo.value,
        entropy_upper: hi.value,
    })
}

fn trained_beta(path: &Path, fallback: f64) -> f64 {
    cgvar::Checkpoint::load(path)
        .ok()
        .and_then(|c| c.training)
        .and_then(|t| t.temper)
        .map_or(fallback, |t| t.beta)
}

/// Writes all diagnostics for `checkpoint`; false when any check fails.
pub fn diagnose(config: &RunConfig, checkpoint: &Path) -> Result<bool> {
    let model = load_model(checkpoint)?;
    let out = create_out(config)?;
    let pot = &config.potential;
    anyhow::ensure!(model.n_f() == pot.dim(), "checkpoint has {} coordinates, potential {}", model.n_f(), pot.dim());
    let d = &config.diagnose;
    let beta = config.reference.beta;
    let mut checks = Vec::new();
    let mut skipped = Vec::new();

    let xs: Vec<Vec<f64>> = model
        .ancestral_sample(d.samples, &mut stream_rng(config.seed, STREAM_DIAGNOSE))?
        .into_iter()
        .map(|s| s.x)
        .collect();
    let model_moments = moments(&xs)?;

    let oracle = find_oracle(config, checkpoint);
    let reference = match &d.reference_samples {
        Some(path) => read_samples(path)?,
        None => {
            let mala = config.reference.mala(pot);
            mala_chain(pot, &mala, &mut stream_rng(config.seed, STREAM_REFERENCE))?.samples
        }
    };
    anyhow::ensure!(!reference.is_empty(), "no reference samples");
    anyhow::ensure!(reference[0].len() == pot.dim(), "reference samples have the wrong dimension");

    if pot.dim() >= 2 {
        write_hist(&out.join("hist2d_model.csv"), &histogram2d(&xs, &d.hist)?)?;
        write_hist(&out.join("hist2d_reference.csv"), &histogram2d(&reference, &d.hist)?)?;
    }

    // Predicted potential along x1 with the other coordinates fixed.
    let rest = if d.slice.rest.is_empty() { vec![0.0; pot.dim() - 1] } else { d.slice.rest.clone() };
    anyhow::ensure!(rest.len() + 1 == pot.dim(), "slice needs {} fixed coordinates", pot.dim() - 1);
    let points = slice_points(d.slice.lower, d.slice.upper, d.slice.points, &rest);
    let est = MarginalEstimator::new(&model, d.marginal_samples, &mut stream_rng(config.seed, STREAM_DIAGNOSE + 1))?;
    let slice = predicted_potential(&model, pot, beta, &points, &est)?;
    let mut header = names("x", pot.dim());
    header.extend(["reduced_energy", "log_q", "predicted"].map(String::from));
    write_csv(
        &out.join("slice_potential.csv"),
        &header,
        slice.iter().map(|p| [p.x.clone(), vec![p.reduced_energy, p.log_q, p.predicted]].concat()),
    )?;
    if matches!(pot, PotentialSpec::DoubleWell2D { .. }) {
        let pred: Vec<f64> = slice.iter().map(|p| p.predicted).collect();
        let minima = local_minima(&pred);
        let left = minima.iter().any(|&i| slice[i].x[0] < 0.0);
        let right = minima.iter().any(|&i| slice[i].x[0] > 0.0);
        checks.push(Check::new("slice_has_both_wells", minima.len() as f64, 2.0, left && right));
    }

    // Collective variables.
    let cvs = assign_cvs(&model, &xs)?;
    let mut header = names("x", pot.dim());
    header.extend(names("z_mean", model.n_c()));
    header.extend(names("z_sigma", model.n_c()));
    write_csv(
        &out.join("cv_field.csv"),
        &header,
        cvs.iter().map(|c| [c.x.clone(), c.z_mean.clone(), c.z_sigma.clone()].concat()),
    )?;
    let z1: Vec<f64> = cvs.iter().map(|c| c.z_mean[0]).collect();
    let x1: Vec<f64> = xs.iter().map(|x| x[0]).collect();
    let corr = pearson(&z1, &x1);
    checks.push(Check::new("cv_correlation", corr.abs(), CV_CORR_MIN, corr.abs() > CV_CORR_MIN));

    // Divergences for the first-stage and the given checkpoint.
    let first = checkpoint.parent().map(|p| p.join(FIRST_STAGE_CHECKPOINT)).filter(|p| p.exists());
    let mut rows = Vec::new();
    if let Some(path) = &first {
        let m0 = load_model(path)?;
        rows.push(("first_stage", kl_row(config, &m0, config.train.temper.beta0, &reference, oracle.as_ref(), STREAM_DIAGNOSE + 2)?));
    }
    let final_beta = trained_beta(checkpoint, beta);
    rows.push(("final", kl_row(config, &model, final_beta, &reference, oracle.as_ref(), STREAM_DIAGNOSE + 3)?));
    let header = [
        "checkpoint", "beta_trained", "reverse_kl", "reverse_kl_se", "forward_kl", "forward_kl_se", "entropy_lower", "entropy_upper",
    ]
    .map(String::from);
    let text: Vec<String> = rows
        .iter()
        .map(|(label, r)| {
            let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
            format!(
                "{label},{},{},{},{},{},{},{}",
                r.beta_trained, r.reverse_kl, r.reverse_kl_se, opt(r.forward_kl), opt(r.forward_kl_se), r.entropy_lower, r.entropy_upper
            )
        })
        .collect();
    std::fs::write(out.join("kl_trace.csv"), format!("{}\n{}\n", header.join(","), text.join("\n")))
        .context("writing kl_trace.csv")?;
    match (rows.len(), rows.first().and_then(|r| r.1.forward_kl), rows.last().and_then(|r| r.1.forward_kl)) {
        (2, Some(a), Some(b)) => checks.push(Check::new("forward_kl_decreases", b, a, b < a)),
        _ => skipped.push("forward_kl_decreases".to_string()),
    }

    // Oracle comparisons.
    let model_masses = ModeMasses::of(&xs);
    let mut oracle_moments = None;
    let mut oracle_masses = None;
    match &oracle {
        Some(o) => {
            let r = &o.result;
            let right = r.mass("x1>0").unwrap_or(f64::NAN);
            let diff = (model_masses.right - right).abs();
            checks.push(Check::new("mode_mass", diff, MODE_MASS_TOL, diff <= MODE_MASS_TOL));
            let std = r.std();
            for j in 0..pot.dim() {
                let dm = (model_moments.mean[j] - r.mean[j]).abs();
                checks.push(Check::new(format!("mean_x{}", j + 1), dm, MEAN_TOL, dm < MEAN_TOL));
                let ds = (model_moments.std[j] - std[j]).abs() / std[j];
                checks.push(Check::new(format!("std_x{}", j + 1), ds, STD_REL_TOL, ds < STD_REL_TOL));
            }
            oracle_moments = Some(Moments { mean: r.mean.clone(), std });
            oracle_masses = Some(ModeMasses { left: 1.0 - right, right });
        }
        None => skipped.extend(["mode_mass", "moments"].map(String::from)),
    }

    let passed = checks.iter().all(|c| c.passed);
    for c in &checks {
        println!("{:<22} {:>12.6} (threshold {}) {}", c.name, c.value, c.threshold, if c.passed { "PASS" } else { "FAIL" });
    }
    for s in &skipped {
        println!("{s:<22} skipped");
    }
    write_json(
        &out.join("moments.json"),
        &Report {
            beta,
            model: model_moments,
            model_mode_masses: model_masses,
            reference_chain: moments(&reference)?,
            oracle: oracle_moments,
            oracle_mode_masses: oracle_masses,
            cv_correlation: corr,
            checks,
            skipped,
        },
    )?;
    Ok(passed)
}
