use rrsb_bench::ingest::{bench_fps, IngestMode};
#[test]
#[ignore]
fn probe() {
    let med = |mode, w, h, n| -> f64 {
        let mut v: Vec<f64> = (0..5).map(|r| bench_fps(mode, w, h, n, r).unwrap().fps).collect();
        v.sort_by(f64::total_cmp);
        v[2]
    };
    for rep in 0..3 {
        let i_hd = med(IngestMode::Inproc, 1920, 1080, 2400);
        let p_hd = med(IngestMode::Pipe, 1920, 1080, 2400);
        let i_4k = med(IngestMode::Inproc, 3840, 2160, 1200);
        let p_4k = med(IngestMode::Pipe, 3840, 2160, 1200);
        println!("rep {rep}: 1080p {i_hd:.0}/{p_hd:.0} ({:+.1}%)  4k {i_4k:.0}/{p_4k:.0} ({:+.1}%)",
            (i_hd/p_hd-1.0)*100.0, (i_4k/p_4k-1.0)*100.0);
    }
}
