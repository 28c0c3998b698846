use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use spectral_cheb::cli::{TAG_INIT, TAG_SPLIT};
use spectral_cheb::rng::derive_seed;
use spectral_cheb::tasks::completion::{completion_gd_oracle, initial_factor, CompletionEval, CompletionProblem};
use spectral_cheb::tasks::data::{load_movielens, RatingFormat};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spectral-cheb"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr_value(out: &Output, key: &str) -> f64 {
    let text = String::from_utf8_lossy(&out.stderr);
    let rest = text.split(key).nth(1).unwrap_or_else(|| panic!("no '{key}' in {text}"));
    rest.split_whitespace().next().unwrap().trim_end_matches([',', ')']).parse().unwrap()
}

fn phases(path: &Path) -> BTreeSet<String> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("phase,"));
    lines.map(|l| l.split(',').next().unwrap().to_string()).collect()
}

#[test]
fn help_enumerates_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["variance-bench", "estimate", "mc-train", "gp-train", "pmf"] {
        let out = run(&[cmd, "--help"], dir.path());
        assert!(out.status.success());
        let help = String::from_utf8(out.stdout).unwrap();
        for flag in [
            "--func", "--a", "--b", "--rho", "--N", "--M", "--dist", "--seed", "--degree", "--optimizer", "--epochs",
            "--inner-iters", "--step", "--step-decay", "--lambda", "--epsilon", "--rank", "--train", "--test", "--out",
        ] {
            assert!(help.contains(&format!("{flag} ")), "{cmd} help lacks {flag}");
        }
    }
}

#[test]
fn unknown_flag_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["estimate", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_data_path_exits_2_with_message() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["mc-train", "gp-train"] {
        let out = run(&[cmd, "--train", "absent.dat"], dir.path());
        assert_eq!(out.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&out.stderr).contains("absent.dat"));
    }
}

#[test]
fn asymmetric_matrix_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("asym.txt"), "1 2\n0 1\n").unwrap();
    let out = run(&["estimate", "--matrix", "asym.txt", "--func", "x"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("symmetric"));
}

#[test]
fn identity_trace_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let m = data("identity_5.mtx");
    let out = run(&["estimate", "--func", "x", "--matrix", m.to_str().unwrap()], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0].parse::<f64>().unwrap(), 5.0);
}

#[test]
fn deterministic_square_matches_trace_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let m = data("diag_1_2.txt");
    let out = run(
        &["estimate", "--matrix", m.to_str().unwrap(), "--func", "x^2", "--dist", "det", "--degree", "2", "--probes", "100000"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let est: f64 = text.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
    let se = stderr_value(&out, "std_error = ");
    // tr(diag(1, 2)²) = 5.
    assert!((est - 5.0).abs() <= 3.0 * se, "{est} vs 5 (se {se})");
}

#[test]
fn optimizers_write_distinct_phases() {
    let dir = tempfile::tempdir().unwrap();
    let train = data("synthetic_30x20.dat");
    for opt in ["sgd", "svrg"] {
        let out = run(
            &["mc-train", "--train", train.to_str().unwrap(), "--optimizer", opt, "--epochs", "2", "--trajectory", &format!("{opt}.csv")],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let sgd = phases(&dir.path().join("sgd.csv"));
    let svrg = phases(&dir.path().join("svrg.csv"));
    assert!(sgd.contains("sgd") && !sgd.contains("svrg-outer"));
    assert!(svrg.contains("svrg-outer") && svrg.contains("svrg-inner") && !svrg.contains("sgd"));
}

#[test]
fn completion_fixture_trains_quickly_and_beats_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let train = data("synthetic_30x20.dat");
    let start = Instant::now();
    let out = run(&["mc-train", "--train", train.to_str().unwrap(), "--seed", "1"], dir.path());
    let secs = start.elapsed().as_secs_f64();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(secs < 60.0, "{secs} s");
    let rmse = stderr_value(&out, "test RMSE ");
    let initial = stderr_value(&out, "(initial ");
    let matvecs = stderr_value(&out, "matvecs ") as usize;

    // Exact projected descent from the same split and start, at the same
    // matvec budget with one exact gradient costing `rows` matvecs.
    let set = load_movielens(&train, RatingFormat::from_path(&train), 0.9, derive_seed(1, &[TAG_SPLIT])).unwrap();
    let problem = CompletionProblem::for_ratings(&set, None, 1.0).unwrap();
    let eval = CompletionEval::new(problem, &set, 5);
    let theta0 = initial_factor(&eval.problem, derive_seed(1, &[TAG_INIT]));
    assert!((eval.test_rmse(theta0.as_slice()) - initial).abs() < 1e-9 * initial);
    let gd = completion_gd_oracle(&eval, &theta0, matvecs / eval.problem.rows, 0.1).unwrap();
    let threshold = 1.2 * eval.test_rmse(gd.as_slice());
    assert!(rmse < threshold, "{rmse} vs threshold {threshold}");
    assert!(rmse < 0.5 * initial, "{rmse} vs initial {initial}");
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let gp = data("gp_synthetic_60.csv");
    let args = ["gp-train", "--train", gp.to_str().unwrap(), "--epochs", "2", "--inner-iters", "10", "--seed", "2"];
    let outputs: Vec<Vec<u8>> = ["1", "8"]
        .iter()
        .map(|t| {
            let out = Command::new(env!("CARGO_BIN_EXE_spectral-cheb"))
                .args(args)
                .current_dir(dir.path())
                .env("SPECTRAL_CHEB_THREADS", t)
                .output()
                .unwrap();
            assert!(out.status.success());
            out.stdout
        })
        .collect();
    assert!(!outputs[0].is_empty());
    assert_eq!(outputs[0], outputs[1]);
}
