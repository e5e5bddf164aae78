use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn procwasm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_procwasm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("run procwasm")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// An image with one input, its expected copy, and a command file that
/// copies it into /results.
fn workspace(expected: &[u8]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img");
    fs::create_dir_all(img.join("data")).unwrap();
    fs::create_dir_all(img.join("expected/results")).unwrap();
    let input: Vec<u8> = (0..50_000u32).map(|i| (i * 7 % 251) as u8).collect();
    fs::write(img.join("data/in.bin"), &input).unwrap();
    fs::write(
        img.join("expected/results/copy.bin"),
        if expected.is_empty() { &input } else { expected },
    )
    .unwrap();
    fs::write(
        dir.path().join("cmds.txt"),
        "# copy then multiply\n\
         out=/results/copy.bin err=/results/err.txt /bin/cat.wasm /data/in.bin\n\
         out=/o err=/e /bin/matmul.wasm 8 8 8 /results/c.bin identity\n",
    )
    .unwrap();
    dir
}

fn run_args<'a>(out: &'a str, system: &'a str) -> Vec<&'a str> {
    vec![
        "run",
        "--cmdfile",
        "cmds.txt",
        "--fsimage",
        "img",
        "--iterations",
        "2",
        "--counters",
        "software",
        "--aux-capacity",
        "8192",
        "--out",
        out,
        "--system",
        system,
    ]
}

#[test]
fn run_then_report() {
    let ws = workspace(b"");
    let mut args = run_args("a", "first");
    args.push("--archive");
    let o = procwasm(&args, ws.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = ws.path().join("a");
    assert_eq!(
        fs::read(out.join("results/copy.bin")).unwrap(),
        fs::read(ws.path().join("img/data/in.bin")).unwrap()
    );
    assert!(out.join("records.json").is_file());
    let tar = fs::read(out.join("results.tar")).unwrap();
    assert_eq!(tar.len() % 512, 0);

    assert_eq!(code(&procwasm(&run_args("b", "second"), ws.path())), 0);
    let md = procwasm(&["report", "a", "b"], ws.path());
    assert_eq!(code(&md), 0, "{}", String::from_utf8_lossy(&md.stderr));
    let md = String::from_utf8(md.stdout).unwrap();
    assert!(
        md.starts_with("| benchmark | first (ms) | second (ms) | second ratio |"),
        "{md}"
    );
    assert!(md.contains("| **geomean** |"));
    // Software counts are deterministic, so every event ratio is exactly 1.
    assert!(md.contains("| instructions-retired | 1.00 |"), "{md}");

    let csv = procwasm(
        &["report", "a", "b", "--format", "csv", "--baseline", "second"],
        ws.path(),
    );
    assert_eq!(code(&csv), 0);
    let csv = String::from_utf8(csv.stdout).unwrap();
    assert!(csv.starts_with("benchmark,system,mean_ms,stderr_ms,ratio\n"));
    assert!(csv.contains("\ngeomean,first,,,"));
}

#[test]
fn validation_failure_exits_one() {
    let ws = workspace(b"not the input");
    let o = procwasm(&run_args("a", "x"), ws.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("validation failed"));
}

#[test]
fn validate_directories() {
    let dir = tempfile::tempdir().unwrap();
    let (e, a) = (dir.path().join("e"), dir.path().join("a"));
    for d in [&e, &a] {
        fs::create_dir_all(d.join("sub")).unwrap();
        fs::write(d.join("sub/f"), b"0123456789").unwrap();
    }
    assert_eq!(code(&procwasm(&["validate", "e", "a"], dir.path())), 0);
    fs::write(a.join("sub/f"), b"0123X56789").unwrap();
    let o = procwasm(&["validate", "e", "a"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("sub/f at byte 4"));
    assert_eq!(code(&procwasm(&["validate", "nope", "a"], dir.path())), 2);
}

#[test]
fn harness_errors_exit_two() {
    let ws = workspace(b"");
    fs::write(ws.path().join("bad.txt"), "out=/o err=/e relative.wasm\n").unwrap();
    let o = procwasm(
        &["run", "--cmdfile", "bad.txt", "--fsimage", "img", "--out", "o"],
        ws.path(),
    );
    assert_eq!(code(&o), 2);
    assert_eq!(code(&procwasm(&["report", "missing"], ws.path())), 2);
}

#[test]
fn fixtures_install_and_list() {
    let dir = tempfile::tempdir().unwrap();
    let o = procwasm(&["fixtures", "install", "fx"], dir.path());
    assert_eq!(code(&o), 0);
    let list = String::from_utf8(procwasm(&["fixtures", "list"], dir.path()).stdout).unwrap();
    for f in procwasm::fixtures::ALL {
        let bytes = fs::read(dir.path().join(format!("fx/bin/{}.wasm", f.name))).unwrap();
        assert_eq!(procwasm::fixtures::sha256_hex(&bytes), f.sha256);
        assert!(list.contains(&format!("/bin/{}.wasm  {}", f.name, f.sha256)));
    }
}
