use super::*;
use crate::autodiff::ActivationKind;

#[test]
fn defaults_reproduce_published_hyperparameters() {
    let c = RunConfig::default();
    let t = &c.train;
    let table: [(&str, f64, f64); 9] = [
        ("beta0", t.temper.beta0, 1e-10),
        ("beta_final", t.temper.beta_final, 1.0),
        ("delta_beta_max", t.temper.delta_beta_max, 1e-3),
        ("c_max", t.temper.c_max, 1.0),
        ("adam lr", t.adam.lr, 1e-3),
        ("adam beta1", t.adam.beta1, 0.9),
        ("adam beta2", t.adam.beta2, 0.999),
        ("adam eps", t.adam.eps, 1e-8),
        ("samples", t.samples as f64, 1000.0),
    ];
    for (name, got, want) in table {
        assert_eq!(got, want, "{name}");
    }
    let arch = c.architecture();
    assert_eq!((arch.n_c, arch.n_f), (1, 2));
    let widths: Vec<usize> = arch.encoder_trunk.iter().chain(&arch.decoder).map(|l| l.d_out).collect();
    assert_eq!(widths, vec![100, 100, 100, 100, 100, 2]);
    let acts: Vec<ActivationKind> = arch.encoder_trunk.iter().map(|l| l.activation).collect();
    assert_eq!(acts, vec![ActivationKind::selu(), ActivationKind::selu(), ActivationKind::Tanh]);
    assert!(arch.decoder[..2].iter().all(|l| l.activation == ActivationKind::Tanh));
    assert_eq!(c.diagnose.marginal_samples, 5000);
    assert_eq!(c.diagnose.samples, 10_000);
    assert_eq!(RunConfig::preset(Preset::Paper), c);
}

#[test]
fn desk_preset_steps_faster() {
    let d = RunConfig::preset(Preset::Desk);
    assert_eq!(d.train.temper.delta_beta_max, 0.02);
    assert_eq!((d.model.width, d.train.samples, d.train.temper_samples), (32, 200, Some(500)));
    assert_eq!(d.train.adam.lr, 3e-3);
    assert_eq!(d.train.temper.c_max, 1.0);
    assert_eq!(d.train.temper.beta0, 1e-10);
    assert!(d.validate().is_ok());
}

#[test]
fn file_values_layer_over_preset() {
    let c = RunConfig::parse(
        r#"
        preset = "desk"
        seed = 9
        [train]
        samples = 300
        [train.adam]
        lr = 0.01
        "#,
        None,
    )
    .unwrap();
    assert_eq!(c.preset, Preset::Desk);
    assert_eq!(c.seed, 9);
    assert_eq!(c.train.samples, 300);
    assert_eq!(c.train.adam.lr, 0.01);
    assert_eq!(c.train.adam.beta2, 0.999);
    assert_eq!(c.train.temper.delta_beta_max, 0.02);

    let p = RunConfig::parse("preset = \"desk\"", Some(Preset::Paper)).unwrap();
    assert_eq!(p, RunConfig::default());
    let empty = RunConfig::parse("", Some(Preset::Desk)).unwrap();
    assert_eq!(empty, RunConfig::preset(Preset::Desk));
}

#[test]
fn json_is_accepted() {
    let c = RunConfig::parse(r#"{"seed": 4, "train": {"samples": 200}}"#, None).unwrap();
    assert_eq!(c.seed, 4);
    assert_eq!(c.train.samples, 200);
}

#[test]
fn switching_potential_kind_replaces_the_table() {
    let c = RunConfig::parse(
        r#"
        [potential]
        kind = "harmonic"
        dim = 3
        stiffness = 2.0
        "#,
        None,
    )
    .unwrap();
    assert_eq!(c.potential, PotentialSpec::harmonic(3, 2.0));
    assert_eq!(c.architecture().n_f, 3);
    assert!(c.reference.grid(&c.potential).is_none());
    let two = PotentialSpec::harmonic(2, 1.0);
    assert_eq!(c.reference.grid(&two).unwrap().dim(), 2);
}

#[test]
fn roundtrip_through_toml() {
    let c = RunConfig::preset(Preset::Desk);
    let back = RunConfig::parse(&c.to_toml().unwrap(), None).unwrap();
    assert_eq!(back, c);
}

#[test]
fn broken_width_chain_is_rejected() {
    let mut arch = Architecture::double_well(8);
    arch.decoder[1].d_in = 7;
    let text = format!("[model.architecture]\n{}", toml::to_string(&arch).unwrap());
    let err = RunConfig::parse(&text, None).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn invalid_values_are_rejected() {
    for text in [
        "preset = \"fast\"",
        "preset = 3",
        "[train]\nsamples = 1",
        "[train.temper]\nc_max = 0.0",
        "[model]\nwidth = 0",
        "[diagnose]\nsamples = 5",
        "[reference]\nthin = 0",
        "[potential]\nkind = \"harmonic\"\ndim = 0\nstiffness = 1.0",
        "seed = \"x\"",
        "not toml [",
    ] {
        assert!(RunConfig::parse(text, None).is_err(), "{text}");
    }
}

#[test]
fn training_potential_is_boxed() {
    let c = RunConfig::default();
    assert!(matches!(c.training_potential(), PotentialSpec::AuxiliaryBounded { half_width, slope, .. }
        if half_width == 10.0 && slope == 1000.0));
    let off = RunConfig::parse("[auxiliary]\nenabled = false", None).unwrap();
    assert_eq!(off.training_potential(), PotentialSpec::double_well());
}

#[test]
fn reference_overrides_apply() {
    let c = RunConfig::parse("[reference]\nsteps = 5000\nburnin = 1000\ntau = 0.2", None).unwrap();
    let m = c.reference.mala(&c.potential);
    assert_eq!((m.steps, m.burnin, m.tau), (5000, 1000, 0.2));
    assert_eq!(m.x0, vec![-2.5, 0.0]);
}
