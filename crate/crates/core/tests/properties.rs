//! Property tests over the transport, kernel, guest memory, validation and
//! statistics.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;

use procwasm::guest_exec::GuestMemory;
use procwasm::harness::validate::{compare_bytes, FileOutcome};
use procwasm::kernel::vfs::{FsNode, GROWTH_QUANTUM};
use procwasm::stats_report::{self as stats, BenchmarkTimes};
use procwasm::transport::{
    decode_request, decode_response, encode_request, encode_response, plan_chunks, AuxBuffer,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn codec_identity(seed in any::<u64>(), cap_pages in 2usize..40) {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let aux = AuxBuffer::new(cap_pages * 4096).unwrap();
        let req = common::random_request(&mut rng, &aux);
        encode_request(&aux, &req).unwrap();
        prop_assert_eq!(decode_request(&aux).unwrap(), req);
        let resp = common::random_response(&mut rng, &aux);
        encode_response(&aux, &resp).unwrap();
        prop_assert_eq!(decode_response(&aux).unwrap(), resp);
        aux.acknowledge().unwrap();
    }

    #[test]
    fn chunk_plan_invariants(total in 0u64..1 << 40, cap in 1u64..1 << 30) {
        let plan = plan_chunks(total, cap);
        prop_assert_eq!(plan.iter().sum::<u64>(), total);
        prop_assert_eq!(plan.len() as u64, total.div_ceil(cap));
        prop_assert!(plan.iter().all(|c| c <= cap && c > 0));
        let n = plan.len();
        prop_assert!(plan.iter().take(n.saturating_sub(1)).all(|c| c == cap));
    }

    #[test]
    fn chunked_data_concatenates(len in 0usize..50_000, cap in 1u64..9000, seed in any::<u64>()) {
        let data = common::random_bytes(len, seed);
        let mut out = Vec::new();
        let mut at = 0usize;
        for c in plan_chunks(len as u64, cap).iter() {
            out.extend_from_slice(&data[at..at + c as usize]);
            at += c as usize;
        }
        prop_assert_eq!(out, data);
    }

    #[test]
    fn pipe_conservation(len in 0usize..400_000, seed in any::<u64>(), max_chunk in 1usize..200_000) {
        let data = common::random_bytes(len, seed);
        let t = common::scripted_pipe_transfer(&data, seed, max_chunk);
        prop_assert_eq!(t.received, data);
    }

    #[test]
    fn append_amortization(sizes in prop::collection::vec(0usize..10_000, 0..300)) {
        let mut node = FsNode::file();
        let mut oracle = Vec::new();
        let mut b = 0usize;
        for (i, n) in sizes.iter().enumerate() {
            let chunk = vec![i as u8; *n];
            node.append(&chunk);
            oracle.extend_from_slice(&chunk);
            b += n;
            prop_assert!(node.size() <= node.capacity());
            if node.capacity() > 0 {
                prop_assert_eq!(node.capacity() % GROWTH_QUANTUM, 0);
            }
        }
        prop_assert_eq!(node.content(), &oracle[..]);
        prop_assert!(node.reallocations() as usize <= b.div_ceil(GROWTH_QUANTUM) + 1);
    }

    #[test]
    fn guest_memory_round_trip(pages in 1usize..4, off in 0u64..300_000, data in prop::collection::vec(any::<u8>(), 0..5000)) {
        let mut mem = GuestMemory::new(pages);
        let before = mem.read(0, mem.size() as u64).unwrap().to_vec();
        let fits = off + data.len() as u64 <= mem.size() as u64;
        match mem.write(off, &data) {
            Ok(()) => {
                prop_assert!(fits);
                prop_assert_eq!(mem.read(off, data.len() as u64).unwrap(), &data[..]);
            }
            Err(_) => {
                prop_assert!(!fits);
                prop_assert!(mem.read(off, data.len() as u64).is_err());
                // No partial write happened.
                prop_assert_eq!(mem.read(0, mem.size() as u64).unwrap(), &before[..]);
            }
        }
    }

    #[test]
    fn flipped_byte_is_located(data in prop::collection::vec(any::<u8>(), 1..5000), pick in any::<prop::sample::Index>(), bit in 0u8..8) {
        let i = pick.index(data.len());
        let mut other = data.clone();
        other[i] ^= 1 << bit;
        prop_assert_eq!(compare_bytes(&data, &data), FileOutcome::Pass);
        prop_assert_eq!(compare_bytes(&data, &other), FileOutcome::Differ { offset: i as u64 });
    }

    #[test]
    fn stats_invariants(xs in prop::collection::vec(0.01f64..1e6, 1..40), c in 0.01f64..100.0, seed in any::<u64>()) {
        let g = stats::geomean(&xs).unwrap();
        let (lo, hi) = xs.iter().fold((f64::MAX, f64::MIN), |(l, h), x| (l.min(*x), h.max(*x)));
        prop_assert!(g >= lo * (1.0 - 1e-12) && g <= hi * (1.0 + 1e-12));

        let mut shuffled = xs.clone();
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut rng);
        prop_assert!((stats::geomean(&shuffled).unwrap() - g).abs() <= g * 1e-12);
        let m = stats::median(&xs).unwrap();
        prop_assert_eq!(stats::median(&shuffled).unwrap(), m);
        if xs.len() % 2 == 1 {
            prop_assert!(xs.contains(&m));
        }

        // Scaling every baseline by c scales ratios and the geomean by 1/c
        // and keeps the slowdown ranking.
        let times = |scale: f64| -> Vec<BenchmarkTimes> {
            xs.iter().enumerate().map(|(i, x)| BenchmarkTimes {
                benchmark: format!("b{i:02}"),
                baseline: vec![(i as f64 + 1.0) * scale],
                candidates: [("cand".to_string(), vec![*x])].into(),
            }).collect()
        };
        let r1 = stats::build_slowdown_report("base", &times(1.0)).unwrap();
        let rc = stats::build_slowdown_report("base", &times(c)).unwrap();
        let g1 = r1.slowdowns["cand"].geomean;
        prop_assert!((rc.slowdowns["cand"].geomean - g1 / c).abs() <= g1 / c * 1e-9);
        let rank = |r: &stats::Report| {
            let mut v: Vec<(f64, String)> = r.rows.iter().map(|row| (row.candidates["cand"].ratio, row.benchmark.clone())).collect();
            v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            v.into_iter().map(|p| p.1).collect::<Vec<_>>()
        };
        prop_assert_eq!(rank(&r1), rank(&rc));
    }

    #[test]
    fn csv_and_markdown_agree(xs in prop::collection::vec((0.001f64..1e7, 0.001f64..1e7, 0.0f64..1e4), 1..12)) {
        let times: Vec<BenchmarkTimes> = xs.iter().enumerate().map(|(i, (b, c, d))| BenchmarkTimes {
            benchmark: format!("bench{i}"),
            baseline: vec![*b, b + d],
            candidates: [("cand".to_string(), vec![*c, c + d])].into(),
        }).collect();
        let report = stats::build_slowdown_report("base", &times).unwrap();
        let csv = stats::parse_times_csv(&stats::times_csv(&report)).unwrap();
        let md = parse_markdown(&stats::to_markdown(&report));
        for row in csv.iter().filter(|r| r.mean_ms.is_some()) {
            let (mean, se, ratio) = &md[&(row.benchmark.clone(), row.system.clone())];
            prop_assert_eq!(stats::sig(row.mean_ms.unwrap(), 6), stats::sig(*mean, 6));
            prop_assert_eq!(stats::sig(row.stderr_ms.unwrap(), 6), stats::sig(*se, 6));
            if let Some(r) = ratio {
                prop_assert_eq!(format!("{:.2}", row.ratio), format!("{r:.2}"));
            }
        }
    }
}

/// (benchmark, system) → (mean, stderr, ratio) from the times table.
fn parse_markdown(md: &str) -> std::collections::HashMap<(String, String), (f64, f64, Option<f64>)> {
    let mut lines = md.lines().take_while(|l| l.starts_with('|'));
    let header: Vec<String> = lines
        .next()
        .unwrap()
        .trim_matches('|')
        .split('|')
        .map(|c| c.trim().to_string())
        .collect();
    let mut out = std::collections::HashMap::new();
    for line in lines.skip(1) {
        let cells: Vec<&str> = line.trim_matches('|').split('|').map(str::trim).collect();
        if cells[0].starts_with("**") {
            continue;
        }
        let mut i = 1;
        while i < cells.len() {
            let system = header[i].trim_end_matches(" (ms)").to_string();
            let (m, s) = cells[i].split_once(" ± ").unwrap();
            let ratio = header
                .get(i + 1)
                .filter(|h| h.ends_with(" ratio"))
                .map(|_| cells[i + 1].parse().unwrap());
            out.insert(
                (cells[0].to_string(), system),
                (m.parse().unwrap(), s.parse().unwrap(), ratio),
            );
            i += if ratio.is_some() { 2 } else { 1 };
        }
    }
    out
}
