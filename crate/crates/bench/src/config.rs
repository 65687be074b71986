//! CLI configuration resolution.
//!
//! Precedence, highest first: JSON config file, command-line flags, the
//! `RRSB_SEED` environment variable (seed only), built-in defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use rrsb_core::netem::{self, NetProfile};
use rrsb_core::mpd::MpdConfig;
use rrsb_core::paths::{PlayerModelConfig, ProtocolPath, RunConfig};

use crate::runner::BenchError;

pub const SEED_ENV: &str = "RRSB_SEED";

/// Optional JSON config; any present field overrides the matching flag.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub path: Option<String>,
    pub profile: Option<String>,
    pub duration: Option<f64>,
    pub seed: Option<u64>,
    pub realtime: Option<bool>,
    pub loss: Option<f64>,
    pub buffer_target_s: Option<f64>,
    pub segment_s: Option<f64>,
    pub fragment_s: Option<f64>,
    pub mtu_payload: Option<usize>,
    /// Full custom link profile, taking precedence over `profile`/`loss`.
    pub net_profile: Option<NetProfile>,
    pub ingest: Option<String>,
    pub res: Option<String>,
    pub frames: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig, BenchError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| BenchError::BadArg(format!("config {}: {e}", path.display())))
        }
    }
}

pub fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok())
}

/// Named profile lookup, including the ideal link used by the bands.
pub fn profile_by_name(name: &str) -> Result<NetProfile, BenchError> {
    if name == "zero" {
        return Ok(NetProfile::zero_impairment());
    }
    netem::profile(name).map_err(|e| BenchError::BadArg(e.to_string()))
}

pub struct LatencyInputs {
    pub path: String,
    pub profile: String,
    pub duration: f64,
    pub seed: Option<u64>,
    pub realtime: bool,
    pub loss: Option<f64>,
    pub buffer_target_s: Option<f64>,
    pub segment_s: Option<f64>,
    pub fragment_s: Option<f64>,
    pub mtu_payload: Option<usize>,
}

pub struct ResolvedLatency {
    pub run: RunConfig,
    pub profile_name: String,
    pub realtime: bool,
}

/// Merges flags, config file and environment into one run configuration.
pub fn resolve_latency(
    flags: LatencyInputs,
    file: &FileConfig,
) -> Result<ResolvedLatency, BenchError> {
    let path_name = file.path.clone().unwrap_or(flags.path);
    let path = ProtocolPath::parse(&path_name)
        .ok_or_else(|| BenchError::BadArg(format!("unknown path \"{path_name}\"")))?;
    let profile_name = file.profile.clone().unwrap_or(flags.profile);
    let mut profile = match &file.net_profile {
        Some(custom) => *custom,
        None => profile_by_name(&profile_name)?,
    };
    if let Some(loss) = file.loss.or(flags.loss) {
        profile = profile.with_loss(loss);
    }
    let duration = file.duration.unwrap_or(flags.duration);
    let seed = file.seed.or(flags.seed).or_else(env_seed).unwrap_or(1);
    let realtime = file.realtime.unwrap_or(flags.realtime);

    let mut run = RunConfig::new(path, profile, duration, seed);
    let segment = file.segment_s.or(flags.segment_s).unwrap_or(2.0);
    let fragment = file.fragment_s.or(flags.fragment_s).unwrap_or(0.5);
    run.mpd = match path {
        ProtocolPath::LlDash => MpdConfig::low_latency(segment, fragment),
        _ => MpdConfig::dash(segment),
    };
    let mut player = PlayerModelConfig::default_for(path);
    if let Some(target) = file.buffer_target_s.or(flags.buffer_target_s) {
        player.buffer_target_s = target;
    }
    run.player = player;
    if let Some(mtu) = file.mtu_payload.or(flags.mtu_payload) {
        run.mtu_payload = mtu;
    }
    Ok(ResolvedLatency { run, profile_name, realtime })
}

/// Parses `WIDTHxHEIGHT`.
pub fn parse_resolution(s: &str) -> Result<(u32, u32), BenchError> {
    let (w, h) = s
        .split_once('x')
        .ok_or_else(|| BenchError::BadArg(format!("resolution \"{s}\" is not WIDTHxHEIGHT")))?;
    let w = w.parse().map_err(|_| BenchError::BadArg(format!("bad width in \"{s}\"")))?;
    let h = h.parse().map_err(|_| BenchError::BadArg(format!("bad height in \"{s}\"")))?;
    Ok((w, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags() -> LatencyInputs {
        LatencyInputs {
            path: "rtp-udp".into(),
            profile: "wifi".into(),
            duration: 30.0,
            seed: Some(5),
            realtime: false,
            loss: None,
            buffer_target_s: None,
            segment_s: None,
            fragment_s: None,
            mtu_payload: None,
        }
    }

    #[test]
    fn flags_alone_resolve() {
        let resolved = resolve_latency(flags(), &FileConfig::default()).unwrap();
        assert_eq!(resolved.run.path, ProtocolPath::RtpUdp);
        assert_eq!(resolved.run.seed, 5);
        assert_eq!(resolved.profile_name, "wifi");
        assert_eq!(resolved.run.profile.one_way_delay_us, 2_000);
    }

    #[test]
    fn config_file_overrides_flags() {
        let file: FileConfig = serde_json::from_str(
            r#"{"path": "moq", "profile": "fiveg", "seed": 99, "loss": 0.02}"#,
        )
        .unwrap();
        let resolved = resolve_latency(flags(), &file).unwrap();
        assert_eq!(resolved.run.path, ProtocolPath::MoqLite);
        assert_eq!(resolved.run.seed, 99);
        assert_eq!(resolved.run.profile.loss_rate, 0.02);
        assert_eq!(resolved.run.profile.one_way_delay_us, 15_000);
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        assert!(serde_json::from_str::<FileConfig>(r#"{"pth": "moq"}"#).is_err());
    }

    #[test]
    fn resolution_parsing() {
        assert_eq!(parse_resolution("1920x1080").unwrap(), (1920, 1080));
        assert!(parse_resolution("1920").is_err());
    }

    #[test]
    fn lldash_gets_low_latency_manifest() {
        let mut inputs = flags();
        inputs.path = "lldash".into();
        let resolved = resolve_latency(inputs, &FileConfig::default()).unwrap();
        assert!(resolved.run.mpd.low_latency);
        assert_eq!(resolved.run.player.buffer_target_s, 1.5);
    }
}
