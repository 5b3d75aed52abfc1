use std::path::Path;
use std::process::Command as Process;

use chaoslink::cli::{config_from_toml, main_with_args, resolve, Cli, Component, RunConfig};
use clap::Parser;

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("chaoslink").chain(args.iter().copied()))
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Non-comment lines of an output file.
fn body(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with('#')).map(str::to_owned).collect()
}

/// The config embedded in an output file's comment header.
fn echoed_config(path: &Path) -> RunConfig {
    let text = std::fs::read_to_string(path).unwrap();
    let echo: Vec<&str> = text.lines().filter_map(|l| l.strip_prefix("# ")).collect();
    let start = echo.iter().position(|l| l.starts_with('[')).unwrap();
    config_from_toml(&echo[start..].join("\n")).unwrap()
}

#[test]
fn flags_override_file_override_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    std::fs::write(&file, "[sync]\nsteps = 5000\n\n[txwave]\nfreq_hz = 25000.0\n\n[bits]\ncomponent = \"z\"\n").unwrap();
    let f = path_str(&file);
    let cfg = |args: &[&str]| resolve(&Cli::try_parse_from(std::iter::once("chaoslink").chain(args.iter().copied())).unwrap().command).unwrap();

    let defaults = RunConfig::default();
    assert_eq!(cfg(&["sync"]), defaults);

    let from_file = cfg(&["sync", "--config", f]);
    assert_eq!(from_file.sync.steps, 5000);
    assert_eq!(from_file.txwave.freq_hz, 25_000.0);
    assert_eq!(from_file.txwave.amplitude, defaults.txwave.amplitude);
    assert_eq!(from_file.link, defaults.link);

    let flagged = cfg(&["sync", "--config", f, "--steps", "7"]);
    assert_eq!(flagged.sync.steps, 7);
    assert_eq!(flagged.txwave.freq_hz, 25_000.0);

    let bits = cfg(&["bits", "--config", f, "--component", "y"]);
    assert_eq!(bits.bits.component, Component::Y);
    assert_eq!(cfg(&["bits", "--config", f]).bits.component, Component::Z);
}

#[test]
fn sync_writes_trace_and_settles() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sync.csv");
    assert_eq!(run(&["sync", "--steps", "200000", "--out", path_str(&out)]), 0);
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("# chaoslink "));
    assert!(text.contains("# settling_steps = 158542\n"));
    let rows = body(&out);
    assert_eq!(rows[0], "step,e1,e2,e3");
    assert_eq!(rows.len(), 200_001);
    assert_eq!(rows[1], "0,-1032,-1553,1553");
    let tail: Vec<i32> = rows.last().unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert!(tail.iter().all(|v| v.abs() <= 10));
    assert_eq!(echoed_config(&out).sync.steps, 200_000);
}

#[test]
fn zero_steps_gives_header_only_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sync.csv");
    assert_eq!(run(&["sync", "--steps", "0", "--out", path_str(&out)]), 0);
    assert_eq!(body(&out), vec!["step,e1,e2,e3"]);
}

#[test]
fn unsettled_sync_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sync.csv");
    assert_eq!(run(&["sync", "--steps", "1000", "--out", path_str(&out)]), 2);
    assert_eq!(body(&out).len(), 1001);
}

#[test]
fn bits_dump_words() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.txt");
    let z = dir.path().join("z.txt");
    assert_eq!(run(&["bits", "--steps", "25", "--out", path_str(&x)]), 0);
    assert_eq!(run(&["bits", "--steps", "25", "--component", "z", "--out", path_str(&z)]), 0);
    let xw = body(&x);
    assert_eq!(xw.len(), 25);
    assert_eq!(xw[0], "1000010000001000");
    assert!(xw.iter().all(|w| w.len() == 16));
    assert_eq!(body(&z)[0], "1000000000000000");
}

#[test]
fn txbits_ideal_and_noisy() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tx.txt");
    assert_eq!(run(&["txbits", "--message", "1101001110", "--out", path_str(&out)]), 0);
    assert_eq!(body(&out), vec!["1101001110"]);
    assert!(std::fs::read_to_string(&out).unwrap().contains("# ber = 0\n"));

    assert_eq!(run(&["txbits", "--steps", "200", "--ebn0", "20", "--noise-dbm", "30", "--out", path_str(&out)]), 0);
    assert_eq!(body(&out)[0].len(), 200);
    assert_eq!(echoed_config(&out).txbits.ebn0_db, 20.0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.txt");
    let o = path_str(&out);
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&["sync", "--bogus"]), 1);
    assert_eq!(run(&["sync", "--steps", "-4"]), 1);
    assert_eq!(run(&["sync", "--config", "/nonexistent/run.toml", "--out", o]), 3);
    let bad_key = dir.path().join("bad.toml");
    std::fs::write(&bad_key, "[sync]\nsteps_ = 1\n").unwrap();
    assert_eq!(run(&["sync", "--config", path_str(&bad_key), "--out", o]), 1);
    assert_eq!(run(&["bits", "--steps", "3", "--out", "/nonexistent/dir/bits.txt"]), 3);
    assert_eq!(run(&["txbits", "--message", "", "--out", o]), 2);
    assert_eq!(run(&["txbits", "--message", "01x", "--out", o]), 2);
    assert_eq!(run(&["txwave", "--freq", "5e6", "--rate", "4.5e6", "--out", o]), 2);
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_chaoslink");
    let status = |args: &[&str]| Process::new(exe).args(args).output().unwrap().status.code();
    assert_eq!(status(&["--version"]), Some(0));
    assert_eq!(status(&["nope"]), Some(1));
    assert_eq!(status(&["bits", "--steps", "2", "--out", "/nonexistent/dir/b.txt"]), Some(3));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sweep_cfg = dir.path().join("sweep.toml");
    std::fs::write(&sweep_cfg, "[bersweep]\nebn0_grid = [0.0, 15.0]\nnoise_powers_dbm = [30.0]\nbits_per_trial = 100\n").unwrap();
    let sc = path_str(&sweep_cfg);
    let cases: Vec<Vec<&str>> = vec![
        vec!["sync", "--steps", "5000"],
        vec!["bits", "--steps", "100", "--component", "y"],
        vec!["txbits", "--steps", "100", "--ebn0", "8", "--seed", "3"],
        vec!["txwave", "--steps", "50000", "--rate", "4.5e6"],
        vec!["bersweep", "--config", sc, "--threads", "1", "--no-plot"],
    ];
    for (i, args) in cases.iter().enumerate() {
        let a = dir.path().join(format!("{i}a.out"));
        let b = dir.path().join(format!("{i}b.out"));
        for p in [&a, &b] {
            let mut full = args.clone();
            full.extend(["--out", path_str(p)]);
            let code = run(&full);
            assert!(code == 0 || (args[0] == "sync" && code == 2), "{args:?} exited {code}");
        }
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap(), "{args:?}");
    }
    // Thread count is not part of the result.
    let c = dir.path().join("threads.out");
    assert_eq!(run(&["bersweep", "--config", sc, "--threads", "4", "--no-plot", "--out", path_str(&c)]), 0);
    assert_eq!(std::fs::read(dir.path().join("4a.out")).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn bersweep_single_cell_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("one.toml");
    std::fs::write(&cfg, "[bersweep]\nebn0_grid = [35.0]\nnoise_powers_dbm = [10.0]\nbits_per_trial = 100\n").unwrap();
    let out = dir.path().join("ber.csv");
    assert_eq!(run(&["bersweep", "--config", path_str(&cfg), "--out", path_str(&out)]), 0);
    let rows = body(&out);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1], "35,10,100,0,0,0,ebn0");
    assert!(std::fs::read_to_string(out.with_extension("svg")).unwrap().starts_with("<svg"));
    assert_eq!(echoed_config(&out).bersweep.ebn0_grid, vec![35.0]);
}
