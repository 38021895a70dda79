use std::fs;

use mrine_core::dataio::*;
use mrine_core::diffcore::Matrix;
use mrine_core::lorenz::{simulate, to_bundle, LorenzConfig, ObsConfig};
use mrine_core::model::{MlpShape, MrineModel};
use mrine_core::trainer::{Preset, Variant};

fn bundle() -> DatasetBundle {
    let l = LorenzConfig { n_trials: 4, trial_len: 12, burn_in: 50, seed: 1, ..LorenzConfig::default() };
    let o = ObsConfig { n_s: 3, n_y: 2, seed: 2, ..ObsConfig::default() };
    to_bundle(&simulate(&l, &o).unwrap(), 3, "tiny").unwrap()
}

#[test]
fn bundle_round_trip_with_masked_nan() {
    let mut b = bundle();
    b.gaussian[1].data[2] = f64::NAN;
    b.mask_y[1][1] = false;
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&b, dir.path()).unwrap();
    let r = read_bundle(dir.path()).unwrap();
    assert_eq!(r.manifest, b.manifest);
    assert_eq!((r.mask_s.clone(), r.mask_y.clone()), (b.mask_s.clone(), b.mask_y.clone()));
    assert_eq!(r.spikes, b.spikes);
    assert_eq!(r.behavior, b.behavior);
    assert!(r.gaussian[1].data[2].is_nan());
    let set = r.trial_set(&[1]).unwrap();
    assert!(set.y[0].values.data.iter().all(|v| v.is_finite()));
}

#[test]
fn missing_mask_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&bundle(), dir.path()).unwrap();
    fs::remove_file(dir.path().join("mask_y.csv")).unwrap();
    assert!(matches!(read_bundle(dir.path()), Err(DataError::MissingFile(p)) if p.ends_with("mask_y.csv")));
}

#[test]
fn empty_trial_in_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&bundle(), dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    m["trials"][0]["T"] = 0.into();
    fs::write(&path, m.to_string()).unwrap();
    assert!(matches!(read_bundle(dir.path()), Err(DataError::Manifest(_))));
}

#[test]
fn nan_in_observed_row_is_rejected() {
    let mut b = bundle();
    b.gaussian[0].data[0] = f64::NAN;
    assert!(b.mask_y[0][0]);
    assert!(matches!(b.validate(), Err(DataError::Invalid(_))));
    let dir = tempfile::tempdir().unwrap();
    assert!(write_bundle(&b, dir.path()).is_err() || read_bundle(dir.path()).is_err());
}

#[test]
fn non_binary_mask_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&bundle(), dir.path()).unwrap();
    let path = dir.path().join("mask_s.csv");
    let text = fs::read_to_string(&path).unwrap().replacen("\n1", "\n0.5", 1);
    fs::write(&path, text).unwrap();
    assert!(matches!(read_bundle(dir.path()), Err(DataError::Table { .. })));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = RunConfig::from_json(r#"{"n_a":3,"n_x":4,"phi_s":"2, 5","phi_y":"1,4","phi_m":"1,6","theta_s":"1,3","theta_y":"0,0","seed":3}"#).unwrap();
    let (mc, tc) = cfg.resolve(3, 2).unwrap();
    let model = MrineModel::init(&mc, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    Checkpoint::new(&model, cfg.canonical_json(), &tc, 0).save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.model().unwrap(), model);
    assert_eq!(ck.config, cfg.canonical_json());
    assert_eq!(ck.train_config, tc);

    let mut bad = ck.clone();
    bad.params[0].value.pop();
    assert!(matches!(bad.model(), Err(DataError::Checkpoint(_))));
    assert!(matches!(Checkpoint::load(&dir.path().join("nope.json")), Err(DataError::MissingFile(_))));
}

#[test]
fn canonical_config_echo_is_stable() {
    let text = r#"{ "seed": 5, "preset": "lorenz", "phi_s": " 2,64 ", "rho_t": 0.25 }"#;
    let once = RunConfig::from_json(text).unwrap().canonical_json();
    let twice = RunConfig::from_json(&once).unwrap().canonical_json();
    assert_eq!(once, twice);
    assert!(once.contains(r#""phi_s":"2,64""#));
    assert!(RunConfig::from_json(r#"{"preset":"lorenz","bogus":1}"#).is_err());
    assert!(RunConfig::from_json(r#"{"phi_s":"3"}"#).is_err());
}

#[test]
fn lorenz_preset_expands_to_table_values() {
    let cfg = RunConfig { preset: Some(Preset::Lorenz), ..RunConfig::default() };
    let e = cfg.expanded(10, 20).unwrap();
    for shape in [&e.phi_s, &e.phi_y, &e.theta_s, &e.theta_y] {
        assert_eq!(shape.as_deref(), Some("3,128"));
    }
    assert_eq!(e.phi_m.as_deref(), Some("1,128"));
    assert_eq!((e.n_a, e.n_x), (Some(32), Some(32)));
    assert_eq!(e.K, Some(vec![1, 2, 3, 4]));
    assert_eq!((e.rho_t, e.rho_d, e.GC), (Some(0.3), Some(0.4), Some(0.1)));
    assert_eq!((e.gamma_s, e.gamma_y, e.gamma_x, e.gamma_r), (Some(250.0), Some(10.0), Some(30.0), Some(1e-3)));
    assert_eq!(e.TE, Some(200));

    let ss = RunConfig { single_scale: Some(SingleScale::Poisson), ..cfg.clone() }.expanded(10, 20).unwrap();
    assert_eq!((ss.phi_y, ss.phi_m, ss.theta_y), (None, None, None));
    assert_eq!((ss.gamma_s, ss.gamma_x, ss.gamma_r), (Some(100.0), Some(30.0), Some(1e-4)));
    let sg = RunConfig { single_scale: Some(SingleScale::Gaussian), ..cfg }.expanded(10, 20).unwrap();
    assert_eq!(sg.gamma_y, Some(50.0));
    assert_eq!(Preset::Lorenz.gammas(Variant::SsGaussian).0, 0.0);
}

#[test]
fn overrides_and_missing_keys() {
    let cfg = RunConfig::from_json(r#"{"preset":"lorenz","n_a":8,"phi_s":"1,16","K":[1]}"#).unwrap();
    let (m, t) = cfg.resolve(4, 2).unwrap();
    assert_eq!(m.n_a, 8);
    assert_eq!(m.enc_s, Some(MlpShape::new(1, 16)));
    assert_eq!(t.loss.horizons, vec![1]);
    assert!(RunConfig::from_json(r#"{"n_a":4}"#).unwrap().resolve(4, 2).is_err());
    let ss = RunConfig::from_json(r#"{"preset":"lorenz","single_scale":"poisson","phi_y":"1,4"}"#).unwrap();
    assert!(matches!(ss.resolve(4, 2), Err(DataError::Config(_))));
}

#[test]
fn folds_partition_trials() {
    for n in 2..7 {
        let mut seen = vec![0; 23];
        for k in 1..=n {
            let (train, test) = Fold { k, n }.split(23);
            assert_eq!(train.len() + test.len(), 23);
            test.iter().for_each(|&i| seen[i] += 1);
        }
        assert!(seen.iter().all(|&c| c == 1));
    }
    let _ = Matrix::zeros(1, 1);
}
