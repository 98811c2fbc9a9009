use std::path::Path;
use std::process::Command;

fn mfsgd(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mfsgd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

const SMALL: &str = "sgd.n = 50\nt_end = 1\nreplications = 6\nreference.n = 200\n";

#[test]
fn single_run_writes_trace_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.txt", SMALL);
    let out = tmp.path().join("out");
    let res = mfsgd(&["single-run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let text = String::from_utf8(read(&out, "traces.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,value,replication,probe,beta,N,seed"));
    // t = 0, 0.5, 1
    assert_eq!(lines.count(), 3);
    assert!(out.join("config.txt").exists());
}

#[test]
fn reruns_are_byte_identical_and_seed_matters() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.txt", SMALL);
    let dirs: Vec<_> = ["a", "b", "c"].iter().map(|d| tmp.path().join(d)).collect();
    for (dir, seed) in dirs.iter().zip(["5", "5", "6"]) {
        let res = mfsgd(&["clt", "--config", &cfg, "--out", dir.to_str().unwrap(), "--seed", seed]);
        assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    }
    for f in ["reference.csv", "fluctuations.csv", "summary.csv"] {
        assert_eq!(read(&dirs[0], f), read(&dirs[1], f), "{f}");
        assert_ne!(read(&dirs[0], f), read(&dirs[2], f), "{f}");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.txt", "sgd.n = 40\nreplications = 30\nt_end = 0.5\n");
    let (one, many) = (tmp.path().join("one"), tmp.path().join("many"));
    for (dir, threads) in [(&one, "1"), (&many, "3")] {
        let res = mfsgd(&["variance", "--config", &cfg, "--out", dir.to_str().unwrap(), "--threads", threads]);
        assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    }
    assert_eq!(read(&one, "variance.csv"), read(&many, "variance.csv"));
}

#[test]
fn written_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.txt", "sgd.n = 50\nt_end = 5\nreplications = 6\nreference.n = 200\n");
    let first = tmp.path().join("first");
    assert_eq!(mfsgd(&["drift", "--config", &cfg, "--out", first.to_str().unwrap()]).status.code(), Some(0));
    let second = tmp.path().join("second");
    let replay = first.join("config.txt");
    let res = mfsgd(&["drift", "--config", replay.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(read(&first, "drift.csv"), read(&second, "drift.csv"));
    let drift = String::from_utf8(read(&first, "drift.csv")).unwrap();
    assert!(drift.starts_with("beta_low,beta_high,slope,stderr,intercept,r_squared,expected,R\n"));
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();
    for text in ["sgd.alpha = x\n", "sgd.beta = 0.4\n", "no_such_key = 1\n", "experiment = variance-reduction\n"] {
        let cfg = write_config(tmp.path(), "bad.txt", text);
        let res = mfsgd(&["single-run", "--config", &cfg, "--out", out]);
        assert_eq!(res.status.code(), Some(2), "{text}: {}", String::from_utf8_lossy(&res.stderr));
    }
    assert_eq!(mfsgd(&["single-run", "--scale", "huge"]).status.code(), Some(2));
    assert_eq!(mfsgd(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn numeric_failure_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.txt", "sgd.n = 20\nt_end = 1\nsgd.alpha = 1e308\n");
    let out = tmp.path().join("o");
    let res = mfsgd(&["single-run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn io_failures_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.txt");
    assert_eq!(mfsgd(&["single-run", "--config", missing.to_str().unwrap()]).status.code(), Some(4));
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let cfg = write_config(tmp.path(), "c.txt", SMALL);
    let out = blocker.join("sub");
    let res = mfsgd(&["single-run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(4));
}
