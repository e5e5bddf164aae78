//! Guests running through the kernel, shim and runtime together.

use std::time::Duration;

use procwasm::fixtures;
use procwasm::guest_exec::ShimConfig;
use procwasm::harness::counters::{self, ProviderKind, INSTRUCTIONS};
use procwasm::harness::{CommandFile, Harness, HarnessConfig, RunStatus, Validation};
use procwasm::kernel::Kernel;
use procwasm::kernel::{FsImage, StdioBinding};
use procwasm::runtime::{Runtime, RuntimeConfig};
use rand::{Rng, SeedableRng};

fn image_with(files: &[(&str, Vec<u8>)]) -> FsImage {
    let mut image = FsImage::new();
    fixtures::install(&mut image).unwrap();
    for (p, d) in files {
        image.add_file(p, d.clone()).unwrap();
    }
    image
}

fn random_bytes(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen()).collect()
}

fn cfg(capacity: usize, provider: ProviderKind) -> HarnessConfig {
    HarnessConfig {
        shim: ShimConfig::with_aux_capacity(capacity),
        counters: counters::provider(provider),
        timeout: Some(Duration::from_secs(60)),
    }
}

const WAIT: Option<Duration> = Some(Duration::from_secs(60));

#[test]
fn cat_copies_file_in_chunks() {
    let data = random_bytes(200_007, 1);
    let rt = Runtime::start(
        Kernel::boot(&image_with(&[("/in.bin", data.clone())])).unwrap(),
        RuntimeConfig {
            shim: ShimConfig::with_aux_capacity(4096 + 65536),
            ..Default::default()
        },
    );
    let pid = rt
        .spawn(
            "/bin/cat.wasm",
            vec!["cat".into(), "/in.bin".into()],
            [
                StdioBinding::Null,
                StdioBinding::write("/out.bin"),
                StdioBinding::Null,
            ],
        )
        .unwrap();
    let report = rt.wait(pid, WAIT).unwrap();
    assert!(report.status.success(), "{:?}", report.status);
    assert_eq!(report.shim.data_reads, 4);
    assert_eq!(report.shim.requests_for(procwasm::abi::sys::WRITE), 4);
    let kernel = rt.shutdown().unwrap();
    assert_eq!(kernel.vfs().read_file("/out.bin").unwrap(), &data[..]);
}

#[test]
fn cat_copies_stdin() {
    let rt = Runtime::start(
        Kernel::boot(&image_with(&[("/in.txt", b"hello\n".to_vec())])).unwrap(),
        RuntimeConfig::default(),
    );
    let pid = rt
        .spawn(
            "/bin/cat.wasm",
            vec!["cat".into()],
            [
                StdioBinding::read("/in.txt"),
                StdioBinding::write("/out.txt"),
                StdioBinding::Null,
            ],
        )
        .unwrap();
    assert!(rt.wait(pid, WAIT).unwrap().status.success());
    assert_eq!(
        rt.shutdown().unwrap().vfs().read_file("/out.txt").unwrap(),
        b"hello\n"
    );
}

#[test]
fn pipeline_moves_a_mebibyte() {
    let data = random_bytes(1 << 20, 2);
    let rt = Runtime::start(
        Kernel::boot(&image_with(&[("/in.bin", data.clone())])).unwrap(),
        RuntimeConfig {
            shim: ShimConfig::with_aux_capacity(4096 + 65536),
            ..Default::default()
        },
    );
    let pid = rt
        .spawn(
            "/bin/pipeline.wasm",
            vec!["pipeline".into(), "/bin/cat.wasm".into()],
            [
                StdioBinding::read("/in.bin"),
                StdioBinding::write("/out.bin"),
                StdioBinding::Null,
            ],
        )
        .unwrap();
    let report = rt.wait(pid, WAIT).unwrap();
    assert!(report.status.success(), "{:?}", report.status);
    let kernel = rt.shutdown().unwrap();
    assert_eq!(kernel.vfs().read_file("/out.bin").unwrap(), &data[..]);
    let parks = kernel.park_counts();
    assert_eq!(parks.child_waits, 1);
}

#[test]
fn append_stress_matches_oracle() {
    let h = Harness::new(image_with(&[]), cfg(1 << 16, ProviderKind::Null)).unwrap();
    let cf = CommandFile::parse("out=/o err=/e /bin/append_stress.wasm /results/a.txt 5000\n").unwrap();
    let recs = h.run_command_file(&cf).unwrap();
    assert_eq!(recs[0].status, RunStatus::Exited(0));
    let oracle: Vec<u8> = (0..5000u32).map(|i| b'a' + (i % 26) as u8).collect();
    assert_eq!(h.read_file("/results/a.txt").unwrap(), oracle);
}

#[test]
fn matmul_identity() {
    let h = Harness::new(image_with(&[]), cfg(1 << 16, ProviderKind::Software)).unwrap();
    let cf = CommandFile::parse("out=/o err=/e /bin/matmul.wasm 4 4 4 /results/c.bin identity\n").unwrap();
    let recs = h.run_command_file(&cf).unwrap();
    assert_eq!(recs[0].status, RunStatus::Exited(0));
    assert!(recs[0].counters.get(INSTRUCTIONS).unwrap() > 0);
    let c = h.read_file("/results/c.bin").unwrap();
    let ints: Vec<i32> = c
        .chunks(4)
        .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let identity: Vec<i32> = (0..16).map(|i| (i / 4 == i % 4) as i32).collect();
    assert_eq!(ints, identity);
}

#[test]
fn matmul_matches_host_oracle() {
    let (ni, nj, nk) = (5usize, 7usize, 3usize);
    let a = |i: usize, k: usize| ((i * nk + k) % 13) as i32 - 6;
    let b = |k: usize, j: usize| ((k * nj + j) % 11) as i32 - 5;
    let mut expected = Vec::new();
    for i in 0..ni {
        for j in 0..nj {
            let c: i32 = (0..nk).map(|k| a(i, k) * b(k, j)).sum();
            expected.extend_from_slice(&c.to_le_bytes());
        }
    }
    let image = image_with(&[("/expected/results/c.bin", expected)]);
    let h = Harness::new(image, cfg(1 << 16, ProviderKind::Null)).unwrap();
    let cf = CommandFile::parse("out=/o err=/e /bin/matmul.wasm 5 7 3 /results/c.bin\n").unwrap();
    let recs = h.run_command_file(&cf).unwrap();
    assert!(recs[0].succeeded(), "{:?}", recs[0]);
    assert!(matches!(recs[0].validation, Validation::Checked(ref r) if r.passed()));
}

#[test]
fn command_file_continues_after_spawn_failure() {
    let image = image_with(&[
        ("/in.txt", b"abc".to_vec()),
        ("/expected/results/cat.out", b"abc".to_vec()),
    ]);
    let h = Harness::new(image, cfg(1 << 16, ProviderKind::Null)).unwrap();
    let cf = CommandFile::parse(
        "out=/results/cat.out err=/results/cat.err /bin/cat.wasm /in.txt\n\
         out=/o err=/e /bin/missing.wasm\n\
         out=/o err=/e /bin/matmul.wasm 2 2 2 /results/c.bin\n",
    )
    .unwrap();
    let recs = h.run_command_file(&cf).unwrap();
    assert_eq!(recs.len(), 3);
    assert!(recs[0].succeeded());
    assert!(matches!(recs[1].status, RunStatus::SpawnFailure(_)));
    assert_eq!(recs[2].status, RunStatus::Exited(0));
    assert!(recs.iter().all(|r| r.counters.is_empty()));
    assert!(recs[0].wall_ms > 0.0);
}

#[test]
fn repeated_runs_reset_outputs_and_are_deterministic() {
    let h = Harness::new(image_with(&[]), cfg(1 << 16, ProviderKind::Software)).unwrap();
    let cf = CommandFile::parse("out=/o err=/e /bin/append_stress.wasm /results/a.txt 300\n").unwrap();
    let recs = h.repeat_benchmark(&cf, 5).unwrap();
    assert_eq!(recs.len(), 5);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r.iteration, i);
        assert_eq!(r.counters, recs[0].counters);
    }
    // Appends start from an empty file each iteration.
    assert_eq!(h.read_file("/results/a.txt").unwrap().len(), 300);
}

#[test]
fn exit_codes_propagate_through_waitpid() {
    // pipeline exits with its child's status; matmul with too few
    // arguments exits 2.
    let h = Harness::new(image_with(&[]), cfg(1 << 16, ProviderKind::Null)).unwrap();
    let cf = CommandFile::parse("out=/o err=/e /bin/pipeline.wasm /bin/matmul.wasm 1\n").unwrap();
    assert_eq!(h.run_command_file(&cf).unwrap()[0].status, RunStatus::Exited(2));
}
