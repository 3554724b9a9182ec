use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const HEADER: &str = "t_mjd,planet,a,e,i,node,argp,mean_anom\n";

struct Case {
    dir: TempDir,
}

impl Case {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn file(&self, name: &str, body: &str) -> PathBuf {
        let p = self.dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_orbdist"))
            .args(args)
            .current_dir(self.dir.path())
            .env("RUST_LOG", "error")
            .output()
            .unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(str::to_string).collect()).collect();
    (header, rows)
}

fn f(s: &str) -> f64 {
    s.parse().unwrap()
}

/// Planet on a unit circle and an asteroid whose orbit crosses it about
/// two and a half years after the start.
fn crossing_case(mu: f64, horizon: f64) -> Case {
    let c = Case::new();
    c.file("ast.csv", &format!("{HEADER}51544.5,ast,1.3,0.3,0.2,0.0,0.9,0.0\n"));
    c.file("planets.csv", &format!("{HEADER}51544.5,ring,1.0,0.0,0.0,0.0,0.0,0.0\n"));
    c.file(
        "run.toml",
        &format!(
            "elements = \"ast.csv\"\nephemerides = \"planets.csv\"\nhorizon_years = {horizon}\n[mu]\nring = {mu:e}\n"
        ),
    );
    c
}

#[test]
fn moid_perpendicular_unit_circles_lists_two_crossings() {
    let c = Case::new();
    let quarter = std::f64::consts::FRAC_PI_2;
    c.file("el.csv", &format!("{HEADER}0,flat,1,0,0,0,0,0\n0,tilted,1,0,{quarter},0,0,0\n"));
    c.file("moid.toml", "elements = \"el.csv\"\n");
    let o = c.run(&["moid", "--config", "moid.toml", "--out", "report"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("# critical_points: 8 (minima 2, saddles 4, maxima 2, degenerate 0)"));

    let (header, rows) = read_csv(&c.path("report/moid.csv"));
    assert_eq!(header, ["index", "kind", "h", "l", "l_prime", "d_au", "d_signed_au", "det_a", "tangent"]);
    assert_eq!(rows.len(), 8);
    let minima: Vec<_> = rows.iter().filter(|r| r[1] == "minimum").collect();
    assert_eq!(minima.len(), 2);
    for m in minima {
        assert!(f(&m[5]) < 1e-10);
        assert!(f(&m[7]) > 0.0);
        assert_eq!(m[8], "0");
    }
    // The stdout CSV block matches the file.
    let block: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    assert_eq!(block, fs::read_to_string(c.path("report/moid.csv")).unwrap());
    assert!(c.path("report/manifest.json").is_file());
}

#[test]
fn moid_reports_unit_distance_for_nested_perpendicular_circles() {
    let c = Case::new();
    c.file("el.csv", &format!("{HEADER}0,inner,1,0,0,0,0,0\n0,outer,2,0,1.5707963267948966,0,0,0\n"));
    c.file("moid.toml", "elements = \"el.csv\"\n");
    let o = c.run(&["moid", "--config", "moid.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let d: f64 = text.lines().find_map(|l| l.strip_prefix("# d_min_au: ")).unwrap().parse().unwrap();
    assert!((d - 1.0).abs() < 1e-10);
}

#[test]
fn moid_concentric_coplanar_circles_exit_2() {
    let c = Case::new();
    c.file("el.csv", &format!("{HEADER}0,a,1,0,0.3,1,0,0\n0,b,2,0,0.3,1,2,0\n"));
    c.file("moid.toml", "elements = \"el.csv\"\n");
    let o = c.run(&["moid", "--config", "moid.toml"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("two concentric coplanar circles"), "{}", stderr(&o));
}

#[test]
fn bad_input_exits_1() {
    let c = Case::new();
    c.file("el.csv", &format!("{HEADER}0,a,1,0,0,0,0,0\n0,b,2,0.1,1,0,0,0\n"));
    c.file("broken.toml", "elements = \n");
    c.file("missing.toml", "elements = \"nope.csv\"\n");
    c.file("unknown.toml", "elements = \"el.csv\"\ncolour = 3\n");
    c.file("negative.toml", "elements = \"el.csv\"\n[full]\ntol = -1.0\n");
    c.file("ok.toml", "elements = \"el.csv\"\n");
    c.file("bad_rows.csv", "t_mjd,planet,a\n0,a,1\n");
    c.file("bad_rows.toml", "elements = \"bad_rows.csv\"\n");
    for cfg in ["broken.toml", "missing.toml", "unknown.toml", "negative.toml", "bad_rows.toml", "absent.toml"] {
        let o = c.run(&["moid", "--config", cfg]);
        assert_eq!(code(&o), 1, "{cfg}: {}", stderr(&o));
    }
    assert_eq!(code(&c.run(&["moid"])), 1);
    assert_eq!(code(&c.run(&["moid", "--config", "ok.toml", "--no-such-flag"])), 1);
    assert_eq!(code(&c.run(&["moid", "--config", "ok.toml", "--tol", "0"])), 1);
    assert_eq!(code(&c.run(&["moid", "--config", "ok.toml"])), 0);
}

#[test]
fn secular_without_planet_mass_gives_constant_rows() {
    let c = crossing_case(0.0, 5.0);
    let o = c.run(&["propagate-secular", "--config", "run.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = read_csv(&c.path("out/secular.csv"));
    assert_eq!(header, ["t_mjd", "G", "Z", "g", "z", "h", "k", "p", "q", "dmin_signed"]);
    assert_eq!(rows.len(), 6);
    for r in &rows[1..] {
        assert_eq!(r[1..], rows[0][1..]);
    }
    let (header, events) = read_csv(&c.path("out/events.csv"));
    assert_eq!(header, ["t_mjd", "planet", "h_index", "jump_G", "jump_Z", "jump_g", "jump_z"]);
    assert!(events.is_empty());
}

#[test]
fn secular_crossing_is_logged_and_reruns_are_identical() {
    let c = crossing_case(1e-3, 6.0);
    let o = c.run(&["propagate-secular", "--config", "run.toml", "--out", "first"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, events) = read_csv(&c.path("first/events.csv"));
    assert_eq!(events.len(), 1);
    assert_eq!(events[0][1], "ring");
    let t_c = f(&events[0][0]);
    let (_, rows) = read_csv(&c.path("first/secular.csv"));
    let at = rows.iter().position(|r| f(&r[0]) == t_c).expect("event epoch is an output row");
    let before = f(&rows[at - 1][9]);
    let after = f(&rows[at + 1][9]);
    assert!(before > 0.0 && after < 0.0, "{before} {after}");
    assert!(f(&rows[at][9]).abs() < 1e-9);

    let o = c.run(&["propagate-secular", "--config", "run.toml", "--out", "second"]);
    assert_eq!(code(&o), 0);
    for name in ["secular.csv", "events.csv", "manifest.json"] {
        assert_eq!(fs::read(c.path("first").join(name)).unwrap(), fs::read(c.path("second").join(name)).unwrap());
    }
}

#[test]
fn manifest_records_config_hash_and_tolerances() {
    let c = crossing_case(0.0, 1.0);
    let o = c.run(&["propagate-secular", "--config", "run.toml", "--tol", "1e-13"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(c.path("out/manifest.json")).unwrap()).unwrap();
    let hash = m["config_sha256"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(!m["version"].as_str().unwrap().is_empty());
    assert_eq!(m["tolerances"]["secular"]["tol"], 1e-13);
    assert_eq!(m["tolerances"]["full"]["tol"], 1e-13);

    let text = fs::read_to_string(c.path("run.toml")).unwrap();
    c.file("run.toml", &format!("{text}# edited\n"));
    assert_eq!(code(&c.run(&["propagate-secular", "--config", "run.toml", "--out", "edited"])), 0);
    let m2: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(c.path("edited/manifest.json")).unwrap()).unwrap();
    assert_ne!(m2["config_sha256"], m["config_sha256"]);
}

#[test]
fn full_ensemble_without_planet_mass_has_zero_spread() {
    let c = crossing_case(0.0, 2.0);
    let text = fs::read_to_string(c.path("run.toml")).unwrap();
    c.file("run.toml", &format!("{text}[full]\nphases = 2\n"));
    let o = c.run(&["propagate-full", "--config", "run.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for k in 0..4 {
        let (header, rows) = read_csv(&c.path(&format!("out/full_run_{k:03}.csv")));
        assert_eq!(header, ["t_mjd", "h", "k", "p", "q", "mean_flag"]);
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r[5] == "0"));
    }
    let (_, mean) = read_csv(&c.path("out/full_mean.csv"));
    assert!(mean.iter().all(|r| r[5] == "1"));
    let (_, stats) = read_csv(&c.path("out/full_stats.csv"));
    // Without planet mass the shape is a constant of motion; the spread is
    // integrator error only.
    for r in &stats {
        for s in &r[5..9] {
            assert!(f(s) < 1e-9, "{s}");
        }
        assert_eq!(r[9], "4");
    }
    let (_, runs) = read_csv(&c.path("out/full_runs.csv"));
    assert_eq!(runs.len(), 4);
}

#[test]
fn compare_aligns_secular_with_the_ensemble() {
    let c = crossing_case(1e-3, 2.0);
    let text = fs::read_to_string(c.path("run.toml")).unwrap();
    c.file("run.toml", &format!("command = \"compare\"\n{text}[full]\nphases = 2\n"));
    let o = c.run(&["--config", "run.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = read_csv(&c.path("out/compare.csv"));
    assert_eq!(header.len(), 13);
    assert_eq!(header[1], "h_sec");
    assert_eq!(rows.len(), 3);
    // All runs start from the same osculating shape.
    for k in 0..4 {
        assert!((f(&rows[0][1 + k]) - f(&rows[0][5 + k])).abs() < 1e-12);
    }
    // A command-line command that contradicts the config is refused.
    assert_eq!(code(&c.run(&["moid", "--config", "run.toml"])), 1);
}

fn forecast_case(vas: &str, horizon: f64) -> Case {
    let c = Case::new();
    c.file("planets.csv", &format!("{HEADER}51544.5,ring,1.0,0.0,0.0,0.0,0.0,0.0\n"));
    c.file("vas.csv", &format!("s,a,e,i,node,argp,mean_anom,weight\n{vas}"));
    c.file(
        "run.toml",
        &format!(
            "ephemerides = \"planets.csv\"\nt0 = 51544.5\nhorizon_years = {horizon}\n[mu]\nring = 1e-3\n\
             [forecast]\nvirtual_asteroids = \"vas.csv\"\nintervals = [[51544.5, 52000.0], [52000.0, 53000.0]]\n"
        ),
    );
    c
}

#[test]
fn crossing_times_single_va_gives_a_degenerate_interval() {
    let c = forecast_case("0,1.3,0.3,0.2,0.0,0.9,0.0,1.0\n", 5.0);
    let o = c.run(&["crossing-times", "--config", "run.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, summary) = read_csv(&c.path("out/crossing_summary.csv"));
    assert_eq!(summary.len(), 2);
    assert_eq!(summary[0][0], "linearized");
    assert_eq!(summary[1][0], "secular");
    for r in &summary {
        assert_eq!(r[1], r[2]);
        assert_eq!(f(&r[3]), 1.0);
    }
    // Both methods put the band entry within a few days of each other.
    assert!((f(&summary[0][1]) - f(&summary[1][1])).abs() < 5.0);
    let (header, p) = read_csv(&c.path("out/crossing_probability.csv"));
    assert_eq!(header, ["lo_mjd", "hi_mjd", "p_linearized", "p_secular"]);
    assert_eq!(p.len(), 2);
    assert_eq!(f(&p[0][2]) + f(&p[1][2]), 1.0);
    for name in ["crossing_linearized.csv", "crossing_secular.csv"] {
        let (_, rows) = read_csv(&c.path("out").join(name));
        assert_eq!(rows.len(), 1);
    }
}

#[test]
fn crossing_times_interval_spans_the_family() {
    let vas = "-1,1.3,0.3,0.2,0.0,0.88,0.0,0.25\n0,1.3,0.3,0.2,0.0,0.9,0.0,0.5\n1,1.3,0.3,0.2,0.0,0.92,0.0,0.25\n";
    let c = forecast_case(vas, 10.0);
    let o = c.run(&["crossing-times", "--config", "run.toml", "--band-au", "1e-3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, rows) = read_csv(&c.path("out/crossing_secular.csv"));
    // The s = 1 member starts just outside the narrower band and moves away.
    assert_eq!(rows[2][6], "");
    let times: Vec<f64> = rows.iter().filter(|r| !r[6].is_empty()).map(|r| f(&r[6])).collect();
    assert_eq!(times.len(), 2);
    let (_, summary) = read_csv(&c.path("out/crossing_summary.csv"));
    assert_eq!(summary[1][4], "2");
    assert_eq!(f(&summary[1][3]), 0.75);
    let t1 = times.iter().copied().fold(f64::INFINITY, f64::min);
    let t2 = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(f(&summary[1][1]), t1);
    assert_eq!(f(&summary[1][2]), t2);
    assert!(t1 < t2);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(c.path("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["details"]["band_halfwidth_au"], 5e-4);
}

#[test]
fn crossing_times_without_any_crossing_exit_4() {
    let c = forecast_case("0,3.0,0.05,0.2,0.0,0.9,0.0,1.0\n", 2.0);
    let o = c.run(&["crossing-times", "--config", "run.toml"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(c.path("out/crossing_secular.csv").is_file());
}
