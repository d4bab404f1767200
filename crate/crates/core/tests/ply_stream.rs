//! Streams ten million vertices and checks that resident memory stays flat.
//! Kept in its own test binary so no other test shares the process.

use std::io::{BufRead, BufReader};

use chunkfuse::ply::PlyWriter;

fn status_kib(field: &str) -> Option<u64> {
    let text = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = text.lines().find(|l| l.starts_with(field))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

#[test]
fn ten_million_points_in_bounded_memory() {
    const N: u64 = 10_000_000;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.ply");
    let before = status_kib("VmHWM:");
    let mut w = PlyWriter::create(&path).unwrap();
    for i in 0..N {
        let x = (i % 1000) as f32;
        w.push([x, (i / 1000) as f32, 0.5], [(i % 251) as u8, 0, 0]).unwrap();
    }
    assert_eq!(w.finish().unwrap(), N);
    let after = status_kib("VmHWM:");

    let len = std::fs::metadata(&path).unwrap().len();
    let header = chunkfuse::ply::header(N);
    assert_eq!(len, header.len() as u64 + 15 * N);
    let mut lines = BufReader::new(std::fs::File::open(&path).unwrap()).lines();
    let count_line = lines.nth(2).unwrap().unwrap();
    assert_eq!(count_line.trim_end(), format!("element vertex {N}"));

    match (before, after) {
        (Some(b), Some(a)) => {
            // The data is 150 MB; the writer may only hold its buffer.
            let grown_mib = (a.saturating_sub(b)) as f64 / 1024.0;
            println!("peak resident growth {grown_mib:.1} MiB for {} MiB written", len >> 20);
            assert!(grown_mib < 16.0, "peak RSS grew by {grown_mib:.1} MiB");
        }
        _ => println!("/proc/self/status unavailable; memory bound not checked"),
    }
}
