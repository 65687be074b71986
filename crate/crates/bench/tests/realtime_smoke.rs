//! Short wall-clock runs over real sockets: one packet path and one HTTP
//! path, checking delivery and rough latency plausibility rather than the
//! tight bands the virtual-time suite pins down.

use rrsb_core::netem::NetProfile;
use rrsb_core::paths::{ProtocolPath, RunConfig};

use rrsb_bench::realtime::run_path_realtime;

fn quiet() -> NetProfile {
    NetProfile {
        one_way_delay_us: 2_000,
        jitter_us: 0,
        loss_rate: 0.0,
        reorder_rate: 0.0,
        bandwidth_bps: 300_000_000,
        seed: 1,
    }
}

#[test]
fn rtp_udp_over_real_sockets() {
    let cfg = RunConfig::new(ProtocolPath::RtpUdp, quiet(), 5.0, 51);
    let result = run_path_realtime(&cfg).expect("realtime run completes");
    assert_eq!(result.counters.sent, 300);
    // Loopback plus the emulated 2 ms link: allow generous scheduler slop
    // but require the bulk of frames and a sane playout latency.
    assert!(result.counters.delivered >= 290, "delivered {}", result.counters.delivered);
    let mean_ms = result.samples.iter().map(|s| s.latency_us as f64).sum::<f64>()
        / result.samples.len() as f64
        / 1_000.0;
    assert!((40.0..120.0).contains(&mean_ms), "mean {mean_ms} ms");
    for stage in &result.stage_log {
        assert!(stage.capture_us <= stage.encoded_us);
        assert!(stage.encoded_us <= stage.packaged_us);
        assert!(stage.packaged_us <= stage.transported_us);
    }
}

#[test]
fn lldash_over_real_tcp_origin() {
    let cfg = RunConfig::new(ProtocolPath::LlDash, quiet(), 5.0, 52);
    let result = run_path_realtime(&cfg).expect("realtime run completes");
    assert_eq!(result.counters.sent, 300);
    assert!(result.counters.delivered >= 295, "delivered {}", result.counters.delivered);
    let mean_ms = result.samples.iter().map(|s| s.latency_us as f64).sum::<f64>()
        / result.samples.len() as f64
        / 1_000.0;
    // Fragment cadence (0.5 s) plus the 1.5 s buffer target.
    assert!((1_500.0..3_500.0).contains(&mean_ms), "mean {mean_ms} ms");
}
