use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use cgvar::model::Architecture;
use cgvar::objective::gradient_check;
use cgvar::potentials::Potential;
use cgvar::reference::{mala_chain, sample_moments, OracleFixture, DOUBLE_WELL_ORACLE};
use cgvar::train::{stream_rng, RunWriter, Trainer};
use cgvar::{CgModel, Checkpoint, PotentialSpec, RunConfig};
use serde::Serialize;

use crate::output::{names, write_csv, write_json};

pub const STREAM_SAMPLE: u64 = 4 << 40;
pub const STREAM_REFERENCE: u64 = 5 << 40;
pub const STREAM_GRADCHECK: u64 = 6 << 40;

pub const SAMPLES: &str = "samples.csv";
pub const REFERENCE_SAMPLES: &str = "reference_samples.csv";
pub const REFERENCE_SUMMARY: &str = "reference_summary.json";
pub const ORACLE: &str = "oracle.json";
pub const RESOLVED_CONFIG: &str = "config.toml";

pub fn create_out(config: &RunConfig) -> Result<&Path> {
    let out = config.out.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

pub fn train(config: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let out = create_out(config)?;
    fs::write(out.join(RESOLVED_CONFIG), config.to_toml()?)?;
    let potential = config.training_potential();
    let (mut trainer, mut writer) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let t = Trainer::resume(&ck, &potential, config.train.clone())?;
            let w = RunWriter::resume(out, t.state())?;
            log::info!("resuming at iteration {}", t.state().iter);
            (t, w)
        }
        None => (
            Trainer::new(config.initial_model()?, &potential, config.train.clone(), config.seed)?,
            RunWriter::create(out)?,
        ),
    };
    let start = std::time::Instant::now();
    let summary = trainer.run(&mut writer)?;
    writer.flush()?;
    log::info!(
        "reached beta {} after {} iterations and {} stages in {:.1?}; log Z {:.4}",
        summary.final_beta,
        summary.iterations,
        summary.temper.k,
        start.elapsed(),
        summary.temper.log_z
    );
    Ok(())
}

pub fn load_model(path: &Path) -> Result<CgModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ck.to_model()?)
}

pub fn sample(config: &RunConfig, checkpoint: &Path, n: usize) -> Result<()> {
    ensure!(n > 0, "number of samples must be positive");
    let model = load_model(checkpoint)?;
    let out = create_out(config)?;
    let samples = model.ancestral_sample(n, &mut stream_rng(config.seed, STREAM_SAMPLE))?;
    let mut header = names("z", model.n_c());
    header.extend(names("x", model.n_f()));
    write_csv(
        &out.join(SAMPLES),
        &header,
        samples.into_iter().map(|s| [s.z, s.x].concat()),
    )?;
    log::info!("wrote {n} samples to {}", out.join(SAMPLES).display());
    Ok(())
}

/// File name of the frozen oracle for this potential and temperature.
pub fn oracle_name(potential: &PotentialSpec, beta: f64) -> &'static str {
    if *potential == PotentialSpec::double_well() && beta == 1.0 {
        DOUBLE_WELL_ORACLE
    } else {
        ORACLE
    }
}

#[derive(Serialize)]
struct ReferenceSummary {
    beta: f64,
    tau: f64,
    rows: usize,
    acceptance: f64,
    warning: Option<String>,
    mean: Vec<f64>,
    std: Vec<f64>,
    oracle: Option<String>,
}

pub fn reference(config: &RunConfig) -> Result<()> {
    let out = create_out(config)?;
    let pot = &config.potential;
    let mala = config.reference.mala(pot);
    let chain = mala_chain(pot, &mala, &mut stream_rng(config.seed, STREAM_REFERENCE))?;
    if let Some(w) = &chain.warning {
        log::warn!("{w}");
    }
    write_csv(&out.join(REFERENCE_SAMPLES), &names("x", pot.dim()), chain.samples.iter().cloned())?;
    let (mean, std) = sample_moments(&chain.samples)?;
    let oracle = match config.reference.grid(pot) {
        Some(grid) => {
            let name = oracle_name(pot, config.reference.beta);
            OracleFixture::compute(pot.clone(), config.reference.beta, grid)?.save(out.join(name))?;
            Some(name.to_string())
        }
        None => {
            log::warn!("no quadrature grid for this potential; skipping the oracle");
            None
        }
    };
    write_json(
        &out.join(REFERENCE_SUMMARY),
        &ReferenceSummary {
            beta: mala.beta,
            tau: mala.tau,
            rows: chain.samples.len(),
            acceptance: chain.acceptance,
            warning: chain.warning,
            mean,
            std,
            oracle,
        },
    )?;
    log::info!("acceptance {:.3}, {} rows", chain.acceptance, chain.samples.len());
    Ok(())
}

pub fn gradcheck(config: &RunConfig, width: usize, samples: usize) -> Result<bool> {
    let pot = &config.potential;
    let arch = Architecture::mlp(config.model.n_c, pot.dim(), width);
    let mut rng = stream_rng(config.seed, STREAM_GRADCHECK);
    let model = CgModel::new(arch, &mut rng)?;
    let noise = model.sample_noise(samples, &mut rng)?;
    let check = gradient_check(&model, pot, config.reference.beta, &noise, 1e-6)?;
    let ok = check.max_rel_error < 1e-4;
    println!(
        "max relative error {:.3e} over {} parameters and {} samples: {}",
        check.max_rel_error,
        check.params,
        check.samples,
        if ok { "PASS" } else { "FAIL" }
    );
    Ok(ok)
}
