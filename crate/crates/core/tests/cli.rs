use std::path::Path;
use std::process::Command;

use turbfield::cli::{config_from_header, sidecar_path, RunConfig};

fn run(dir: &Path, args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_turbfield")).current_dir(dir).args(args).output().unwrap().status.code().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

#[test]
fn validate_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let d = d.path();
    assert_eq!(run(d, &["validate"]), 0);
    let report = std::fs::read_to_string(d.join("validate.toml")).unwrap();
    assert!(report.contains("passed = true"));
    write(d, "z.toml", "[numbers]\nz = 0.2\n");
    assert_eq!(run(d, &["validate", "--config", "z.toml"]), 1);
    write(d, "a5.toml", "[spectrum]\na5 = -43.0\n");
    assert_eq!(run(d, &["validate", "--config", "a5.toml", "--out", "a5.out"]), 2);
    let report = std::fs::read_to_string(d.join("a5.out")).unwrap();
    assert!(report.contains("continuity-a") && report.contains("passed = false"));
    write(d, "typo.toml", "[numbers]\nzz = 1e-3\n");
    assert_eq!(run(d, &["validate", "--config", "typo.toml"]), 1);
    assert_eq!(run(d, &["frobnicate"]), 1);
}

#[test]
fn curves_tables() {
    let d = tempfile::tempdir().unwrap();
    let d = d.path();
    assert_eq!(run(d, &["curves", "--out", "out"]), 0);
    let rows = |name: &str| -> Vec<Vec<f64>> {
        std::fs::read_to_string(d.join("out").join(name))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .skip(1)
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect()
    };
    let tr = rows("transitions.csv");
    assert!(tr.windows(2).all(|w| w[1][3] < w[0][3]));
    assert!(tr.last().unwrap()[3] < 1.3 && tr[0][3] > 10.0);
    let ct = rows("correlation.csv");
    let area: f64 = ct.windows(2).map(|w| 0.5 * (w[1][0] - w[0][0]) * (w[0][1] + w[1][1])).sum();
    assert!((area - 0.3).abs() < 1e-4, "{area}");
    let eta = rows("kernel.csv");
    assert!(eta[0][1].abs() < 1e-15 && eta.last().unwrap()[1].abs() < 1e-15);
}

#[test]
fn sample_outputs_reproduce() {
    let d = tempfile::tempdir().unwrap();
    let d = d.path();
    assert_eq!(run(d, &["sample", "--seed", "3", "--out", "a.csv"]), 0);
    assert_eq!(run(d, &["sample", "--seed", "3", "--threads", "2", "--out", "b.csv"]), 0);
    let a = std::fs::read(d.join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.csv")).unwrap());
    let cfg = config_from_header(std::str::from_utf8(&a).unwrap()).unwrap();
    assert_eq!(cfg.seed, 3);
    write(d, "replay.toml", &cfg.to_toml());
    assert_eq!(run(d, &["sample", "--config", "replay.toml", "--out", "c.csv"]), 0);
    assert_eq!(a, std::fs::read(d.join("c.csv")).unwrap());

    assert_eq!(run(d, &["sample", "--format", "vtk", "--gradient", "--out", "f.vtk"]), 0);
    let vtk = std::fs::read_to_string(d.join("f.vtk")).unwrap();
    assert!(vtk.starts_with("# vtk DataFile Version 3.0\nturbfield"));
    assert!(vtk.contains("POINT_DATA 512") && vtk.contains("TENSORS gradient double"));
    let side = std::fs::read_to_string(sidecar_path(&d.join("f.vtk"))).unwrap();
    assert!(config_from_header(&side).unwrap().sample.gradient);
}

#[test]
fn single_point_sample_matches_library() {
    let d = tempfile::tempdir().unwrap();
    let d = d.path();
    write(d, "one.toml", "seed = 11\n[sample]\ncounts = [1, 1, 1]\norigin = [0.3, -0.2, 0.1]\nt = 0.4\n");
    assert_eq!(run(d, &["sample", "--config", "one.toml", "--out", "one.csv"]), 0);
    let text = std::fs::read_to_string(d.join("one.csv")).unwrap();
    let row: Vec<f64> = text.lines().last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let cfg = RunConfig::from_toml(&std::fs::read_to_string(d.join("one.toml")).unwrap()).unwrap();
    let x = turbfield::flowfield::Vec3::new(0.3, -0.2, 0.1);
    let u = cfg.factory((x, 0.4)).unwrap().realization(11).unwrap().velocity(&x, 0.4).unwrap();
    assert_eq!(&row[4..7], u.as_slice());
}

#[test]
fn constant_flow_lattice_energy_is_close_to_k() {
    let d = tempfile::tempdir().unwrap();
    let d = d.path();
    // 8000 points ten correlation lengths apart; 4096 modes keep the amplitude
    // noise of a single realization near 1%
    write(d, "big.toml", "[numbers]\ndelta = 0.1\n[sampler]\nmodes = 4096\n[sample]\ncounts = [20, 20, 20]\nspacing = [0.2, 0.2, 0.2]\n");
    assert_eq!(run(d, &["sample", "--config", "big.toml", "--out", "big.csv"]), 0);
    let text = std::fs::read_to_string(d.join("big.csv")).unwrap();
    let e: Vec<f64> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|s| s.parse().unwrap()).collect();
            0.5 * (v[4] * v[4] + v[5] * v[5] + v[6] * v[6])
        })
        .collect();
    let mean = e.iter().sum::<f64>() / e.len() as f64;
    assert!((mean - 1.0).abs() < 0.05, "{mean}");
}

#[test]
fn estimate_suites_and_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let d = d.path();
    write(d, "e.toml", "[estimate]\nseeds = 400\n");
    assert_eq!(run(d, &["estimate", "--config", "e.toml"]), 0);
    let report = std::fs::read_to_string(d.join("estimate.toml")).unwrap();
    assert!(report.contains("name = \"dissipation\"") && report.contains("passed = true"));

    write(
        d,
        "sweep.toml",
        "[numbers]\nz = 1e-2\n[flow]\nkind = \"uniform-shear\"\ngamma = 50.0\nslopes = [0.5, 0.5, 0.0]\n\
         [estimate]\nseeds = 300\nsuites = [\"delta-sweep\"]\n",
    );
    run(d, &["estimate", "--config", "sweep.toml", "--out", "sweep.out"]);
    let report = std::fs::read_to_string(d.join("sweep.out")).unwrap();
    let rep: toml::Value = toml::from_str(&report.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n")).unwrap();
    let div = rep["report"].as_array().unwrap().iter().find(|r| r["name"].as_str() == Some("delta-sweep divergence")).unwrap();
    assert_eq!(div["passed"].as_bool(), Some(true));

    write(d, "grid.toml", "[flow]\nkind = \"grid\"\npath = \"missing.grid\"\n");
    assert_eq!(run(d, &["estimate", "--config", "grid.toml"]), 1);
    assert_eq!(run(d, &["estimate", "--suite", "no-such-suite"]), 1);
}
