use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nslk_core::{GridStack, PixelGrid};

fn nslk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nslk"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn decode_png(path: &Path) -> (u32, u32, Vec<u8>) {
    let decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(path).unwrap()));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    (info.width, info.height, buf)
}

fn grid(h: usize, w: usize) -> PixelGrid {
    PixelGrid {
        height: h,
        width: w,
        x0: 0.0,
        y0: 0.0,
        dx: 1.0 / w as f64,
        dy: 1.0 / h as f64,
    }
}

/// Small-lattice config with relaxed station filters.
fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.json");
    let text = format!(
        r#"{{
  "lattice": {{"nx": 12, "ny": 12}},
  "stations": {{"min_active": 40}},
  "prediction": {{"height": 9, "width": 9}},
  "conditional_draws": 20,
  "training": {{"n_pairs": 2, "replicates": 4}}{extra}
}}"#
    );
    fs::write(&path, text).unwrap();
    path
}

/// Two days of 60 background stations plus one traffic and one anomalous row.
fn write_stations(dir: &Path) -> PathBuf {
    let mut csv = String::from("station_id,lon,lat,date,value,station_type\n");
    for (d, date) in ["2023-01-01", "2023-01-02"].iter().enumerate() {
        for i in 0..60 {
            let x = ((i * 37) % 60) as f64 / 60.0 + 0.005;
            let y = ((i * 11) % 60) as f64 / 60.0 + 0.007;
            let wiggle = ((i * 7919 + d * 104_729) % 1000) as f64 / 1000.0 - 0.5;
            let v = 20.0 + 5.0 * (3.0 * x).sin() + 4.0 * (2.0 * y).cos() + wiggle;
            csv.push_str(&format!("s{i:03},{x:.4},{y:.4},{date},{v:.4},background\n"));
        }
        csv.push_str(&format!("t000,0.5,0.5,{date},30.0,traffic\n"));
        csv.push_str(&format!("a000,0.25,0.75,{date},95.0,background\n"));
    }
    let path = dir.join("stations.csv");
    fs::write(&path, csv).unwrap();
    path
}

#[test]
fn validate_config_accepts_defaults_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let out = nslk(&["validate-config"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed["window"]["before"], 15);
    assert_eq!(printed["cv"]["folds"], 10);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"lattice": {"nx": 8, "bogus": 1}}"#).unwrap();
    let out = nslk(&["validate-config", "--config", path_str(&bad)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.gstk");
    let out = nslk(&["render", "--stack", path_str(&missing), "--channel", "x", "--out", "a.png"]);
    assert_eq!(code(&out), 4);

    let stack = dir.path().join("s.gstk");
    GridStack::from_channels(grid(3, 3), vec![("a".into(), vec![1.0; 9])])
        .unwrap()
        .write(&stack)
        .unwrap();
    let png_out = dir.path().join("s.png");
    let out = nslk(&["render", "--stack", path_str(&stack), "--channel", "b", "--out", path_str(&png_out)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("channel 'b' not found"));

    // usage errors
    assert_eq!(code(&nslk(&["render"])), 2);
}

#[test]
fn constant_field_renders_as_single_color() {
    let dir = tempfile::tempdir().unwrap();
    let stack = dir.path().join("c.gstk");
    GridStack::from_channels(grid(255, 255), vec![("v".into(), vec![3.5; 255 * 255])])
        .unwrap()
        .write(&stack)
        .unwrap();
    let out_png = dir.path().join("c.png");
    let out = nslk(&["render", "--stack", path_str(&stack), "--channel", "v", "--out", path_str(&out_png)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let (w, h, px) = decode_png(&out_png);
    assert_eq!((w, h), (255, 255));
    let first = &px[0..4];
    assert!(px.chunks(4).all(|p| p == first));
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("c.json")).unwrap()).unwrap();
    assert_eq!(side["min"], 3.5);
    assert_eq!(side["max"], 3.5);
}

#[test]
fn sidecar_range_matches_channel_and_nan_is_handled() {
    let dir = tempfile::tempdir().unwrap();
    let mut values: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin() * 4.0).collect();
    values[7] = f64::NAN;
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let stack = dir.path().join("r.gstk");
    GridStack::from_channels(grid(4, 5), vec![("v".into(), values)])
        .unwrap()
        .write(&stack)
        .unwrap();
    for (style, expect) in [("transparent", [0u8, 0, 0, 0]), ("sentinel", [255, 0, 255, 255])] {
        let out_png = dir.path().join(format!("r_{style}.png"));
        let out = nslk(&[
            "render", "--stack", path_str(&stack), "--channel", "v", "--out", path_str(&out_png),
            "--colormap", "gray", "--nan", style,
        ]);
        assert_eq!(code(&out), 0);
        let side: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(out_png.with_extension("json")).unwrap(),
        )
        .unwrap();
        assert_eq!(side["min"].as_f64().unwrap(), lo);
        assert_eq!(side["max"].as_f64().unwrap(), hi);
        assert_eq!(side["nan_pixels"], 1);
        let (w, h, px) = decode_png(&out_png);
        assert_eq!((w, h), (5, 4));
        // raster row 1, col 2 sits on image row 2 (north up)
        let at = (2 * 5 + 2) * 4;
        assert_eq!(&px[at..at + 4], &expect);
    }
}

#[test]
fn simulate_then_windows_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let sim = dir.path().join("sim.gstk");
    let args = [
        "simulate", "--config", path_str(&cfg), "--kappa2", "0.5", "-r", "30", "--seed", "9",
        "--out", path_str(&sim),
    ];
    assert_eq!(code(&nslk(&args)), 0);
    let a = fs::read(&sim).unwrap();
    assert_eq!(code(&nslk(&args)), 0);
    assert_eq!(a, fs::read(&sim).unwrap(), "same seed, same bytes");
    let stack = GridStack::read(&sim).unwrap();
    assert_eq!(stack.n_channels(), 30);
    assert_eq!((stack.grid().height, stack.grid().width), (12, 12));

    let win = dir.path().join("win.gstk");
    let out = nslk(&[
        "windows", "--config", path_str(&cfg), "--residuals", path_str(&sim), "--day", "15",
        "--out", path_str(&win),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(GridStack::read(&win).unwrap().n_channels(), 30);

    let out = nslk(&[
        "windows", "--config", path_str(&cfg), "--residuals", path_str(&sim), "--day", "3",
        "--out", path_str(&win),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gen_train_writes_manifest_and_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let data = dir.path().join("train");
    let out = nslk(&["gen-train", "--config", path_str(&cfg), "--out", path_str(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["n_pairs"], 2);
    assert!(data.join("manifest.json").is_file());
    let g = GridStack::read(&data.join("pair_000001.G.gstk")).unwrap();
    assert_eq!(g.n_channels(), 4);
    let p = GridStack::read(&data.join("pair_000001.P.gstk")).unwrap();
    assert_eq!(p.channel_names(), ["log_kappa2", "rho", "theta"]);
}

#[test]
fn station_day_fit_predict_and_cv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#", "variants": ["stationary"], "variant": "stationary""#);
    let stations = write_stations(dir.path());
    let fit = dir.path().join("fit.json");
    let out = nslk(&[
        "fit-day", "--config", path_str(&cfg), "--stations", path_str(&stations), "--day", "2023-01-02",
        "--out", path_str(&fit),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(&fit).unwrap()).unwrap();
    assert_eq!(fit["n_obs"], 60);
    assert_eq!(fit["variants"][0]["variant"], "stationary");
    assert!(fit["variants"][0]["fit"]["loglik"].as_f64().unwrap().is_finite());

    let out = nslk(&[
        "fit-day", "--config", path_str(&cfg), "--stations", path_str(&stations), "--day", "2023-02-01",
    ]);
    assert_eq!(code(&out), 2);

    let pred = dir.path().join("pred.gstk");
    let pngs = dir.path().join("maps");
    let out = nslk(&[
        "predict", "--config", path_str(&cfg), "--stations", path_str(&stations), "--day", "2023-01-01",
        "--out", path_str(&pred), "--png-dir", path_str(&pngs),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stack = GridStack::read(&pred).unwrap();
    assert_eq!(stack.channel_names(), ["mean", "se"]);
    assert_eq!((stack.grid().height, stack.grid().width), (9, 9));
    assert!(stack.channel("se").unwrap().iter().all(|s| *s > 0.0));
    assert!(pngs.join("mean.png").is_file() && pngs.join("se.json").is_file());

    let draws = dir.path().join("draws.gstk");
    let out = nslk(&[
        "condsim", "--config", path_str(&cfg), "--stations", path_str(&stations), "--day", "2023-01-01",
        "--draws", "5", "--out", path_str(&draws),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(GridStack::read(&draws).unwrap().n_channels(), 5);

    let run_cv = |name: &str| {
        let path = dir.path().join(name);
        let out = nslk(&[
            "cv", "--config", path_str(&cfg), "--stations", path_str(&stations), "--folds", "3",
            "--out", path_str(&path),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        fs::read(&path).unwrap()
    };
    let a = run_cv("cv_a.json");
    assert_eq!(a, run_cv("cv_b.json"), "metrics JSON is deterministic");
    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    let row = &report["table"][0];
    assert_eq!(row["model"], "stationary");
    assert_eq!(row["n"], 120);
    for key in ["RMSE", "PICP", "MPIW"] {
        assert!(row[key].as_f64().unwrap().is_finite());
    }

    let out = nslk(&[
        "cv", "--config", path_str(&cfg), "--stations", path_str(&stations), "--folds", "1",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn nonstationary_variant_without_fields_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#", "variant": "nonstationary""#);
    let stations = write_stations(dir.path());
    let out = nslk(&[
        "predict", "--config", path_str(&cfg), "--stations", path_str(&stations), "--day", "2023-01-01",
        "--out", path_str(&dir.path().join("p.gstk")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("parameter fields"));
}
