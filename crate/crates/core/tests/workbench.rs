mod common;

use std::fs;
use std::path::PathBuf;

use common::*;
use tapwb_core::inverse::{j_data, DataObjective};
use tapwb_core::sensitivity::FluxObjective;
use tapwb_core::workbench::*;
use tapwb_core::*;

fn inputs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../inputs")
}

fn small_definition() -> ExperimentDefinition {
    let mut def = load_input(&inputs().join("co_oxidation/truth.csv")).unwrap();
    def.mesh_size = 60;
    def.catalyst_density = 1;
    def.time_steps = 200;
    def
}

#[test]
fn table_input_builds_the_documented_model() {
    let def = load_input(&inputs().join("table1.csv")).unwrap();
    assert_eq!(def.mechanism().unwrap().n_steps(), 3);
    assert_eq!(def.thermo.as_ref().unwrap().combo.terms, [(0, 1.0), (1, 0.5), (2, 1.0)]);
    assert_eq!(def.reactor.zone_lengths, [3.0, 0.1, 2.9]);
    let model = def.forward_model(def.solver_config(Scheme::SemiImplicit)).unwrap();
    assert_eq!(model.mesh().n_cells(), 248);
    assert_eq!(model.mesh().catalyst_cells(), 48);
    assert_eq!(model.mechanism().gas_names(), ["CO", "O2", "CO2"]);
}

#[test]
fn saved_definition_loads_back_unchanged() {
    let def = load_input(&inputs().join("co_oxidation/truth.csv")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("copy.csv");
    save_input(&def, &path).unwrap();
    assert_eq!(load_input(&path).unwrap(), def);
}

#[test]
fn written_fluxes_reload_to_a_zero_misfit() {
    let def = small_definition();
    let model = def.forward_model(def.solver_config(Scheme::SemiImplicit)).unwrap();
    let r = model.simulate(&model.base_rate_constants().unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let data = ExperimentalCurves::from_flux(&r.times, &r.gas_names, &r.outlet_flux);
    OutputTree::write_experimental(dir.path(), &data).unwrap();
    let back = load_experimental(dir.path(), &["CO", "O2", "CO2"]).unwrap();
    assert!(shared_time_grid(&back));
    assert!(j_data(&model, &r.outlet_flux, &back).unwrap() < 1e-20);
}

#[test]
fn missing_data_file_names_the_expected_path() {
    let dir = tempfile::tempdir().unwrap();
    let e = load_experimental(dir.path(), &["CO"]).unwrap_err();
    assert!(e.to_string().contains("CO.csv"), "{e}");
}

#[test]
fn data_header_row_is_optional() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("A.csv"), "time,flux\n0,1\n0.5,2\n1,0.5\n").unwrap();
    fs::write(dir.path().join("B.csv"), "0,1\n0.5,2\n1,0.5\n").unwrap();
    let d = load_experimental(dir.path(), &["A", "B"]).unwrap();
    assert_eq!(d.curves[0].times, d.curves[1].times);
    assert_eq!(d.curves[0].flux, [1.0, 2.0, 0.5]);
}

#[test]
fn bad_data_rows_are_reported_by_number() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("A.csv"), "0,1\n0.5,2\n0.4,0.5\n").unwrap();
    let e = load_experimental(dir.path(), &["A"]).unwrap_err().to_string();
    assert!(e.contains("row 2"), "{e}");
    fs::write(dir.path().join("A.csv"), "0,1\n0.5,x\n").unwrap();
    let e = load_experimental(dir.path(), &["A"]).unwrap_err().to_string();
    assert!(e.contains("row 2"), "{e}");
}

#[test]
fn noise_has_the_requested_spread() {
    let n = 20_000;
    let times: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let mut flux = vec![0.0; n];
    flux[0] = 10.0;
    let data = ExperimentalCurves::from_flux(&times, &["A".to_string()], &[flux.clone()]);
    let noisy = add_noise(&data, 0.02, 3).unwrap();
    let resid: Vec<f64> = noisy.curves[0].flux.iter().zip(&flux).map(|(a, b)| a - b).collect();
    let mean = resid.iter().sum::<f64>() / n as f64;
    let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    assert!(mean.abs() < 0.01 && (sd - 0.2).abs() < 0.01, "mean {mean}, sd {sd}");
}

#[test]
fn output_tree_holds_input_copy_and_tables() {
    let def = small_definition();
    let model = def.forward_model(def.solver_config(Scheme::SemiImplicit)).unwrap();
    let r = model.simulate(&model.base_rate_constants().unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let input = inputs().join("co_oxidation/truth.csv");
    let tree = OutputTree::create(&dir.path().join("run"), Some(&input)).unwrap();
    tree.write_flux(&r, None).unwrap();
    tree.write_thin(&r).unwrap();
    tree.write_plots(&r, None, None).unwrap();
    let root = &tree.root;
    assert_eq!(fs::read(root.join("truth.csv")).unwrap(), fs::read(&input).unwrap());
    for f in ["flux_data/pulse_1/CO.csv", "flux_data/mass_balance.csv", "thin_data/CO_s.csv", "thin_data/_s.csv", "plots/pulse_1.csv"] {
        assert!(root.join(f).is_file(), "{f}");
    }
    let co = load_experimental(&root.join("flux_data/pulse_1"), &["CO"]).unwrap();
    let obj = DataObjective::new(&model, &co).unwrap();
    assert!(obj.evaluate(&r.outlet_flux, None).unwrap() < 1e-20);
    let svg = fs::read_to_string(root.join("plots/pulse_1_CO.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<polyline"));
}

#[test]
fn out_of_range_pulse_is_rejected() {
    let def = small_definition();
    let model = def.forward_model(def.solver_config(Scheme::SemiImplicit)).unwrap();
    let r = model.simulate(&model.base_rate_constants().unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let tree = OutputTree::create(dir.path(), None).unwrap();
    assert!(tree.write_flux(&r, Some(2)).is_err());
    assert!(tree.write_flux(&r, Some(0)).is_err());
    tree.write_flux(&r, Some(1)).unwrap();
    assert!(max_abs_diff(&r.pulse_curve(0, 0).1, &r.outlet_flux[0]) == 0.0);
}
