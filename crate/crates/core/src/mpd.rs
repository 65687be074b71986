//! Dynamic DASH manifest generation, parsing and availability math.
//!
//! One period, one video adaptation set, one representation, template
//! addressing with `$Number$`. Low-latency mode advertises
//! `availabilityTimeOffset` so clients may request a segment while it is
//! still being produced. The manifest is a fixed shape, so rendering and
//! parsing are hand-rolled over that shape; unknown attributes on the MPD
//! element survive a parse for forward compatibility.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::timefmt;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MpdConfig {
    pub segment_duration_s: f64,
    /// Fragment (CMAF chunk) duration; meaningful in low-latency mode.
    pub fragment_duration_s: f64,
    pub availability_start_time_us: u64,
    pub minimum_update_period_s: f64,
    pub low_latency: bool,
    pub suggested_presentation_delay_s: f64,
    pub bandwidth_bps: u64,
    pub width: u32,
    pub height: u32,
}

impl Default for MpdConfig {
    fn default() -> Self {
        Self::dash(2.0)
    }
}

impl MpdConfig {
    pub fn dash(segment_duration_s: f64) -> Self {
        Self {
            segment_duration_s,
            fragment_duration_s: segment_duration_s,
            availability_start_time_us: 0,
            minimum_update_period_s: 2.0,
            low_latency: false,
            suggested_presentation_delay_s: 2.0 * segment_duration_s,
            bandwidth_bps: 10_000_000,
            width: 1920,
            height: 1080,
        }
    }

    pub fn low_latency(segment_duration_s: f64, fragment_duration_s: f64) -> Self {
        Self {
            segment_duration_s,
            fragment_duration_s,
            low_latency: true,
            suggested_presentation_delay_s: 3.0 * fragment_duration_s,
            ..Self::dash(segment_duration_s)
        }
    }

    pub fn validate(&self) -> Result<(), MpdError> {
        if self.segment_duration_s <= 0.0 || self.fragment_duration_s <= 0.0 {
            return Err(MpdError::BadConfig("durations must be positive"));
        }
        let seg = self.segment_duration_us();
        let frag = self.fragment_duration_us();
        if frag == 0 || seg % frag != 0 {
            return Err(MpdError::BadConfig("fragment duration must divide segment duration"));
        }
        Ok(())
    }

    pub fn segment_duration_us(&self) -> u64 {
        seconds_to_us(self.segment_duration_s)
    }

    pub fn fragment_duration_us(&self) -> u64 {
        seconds_to_us(self.fragment_duration_s)
    }

    pub fn segment_duration_ticks(&self) -> u64 {
        (self.segment_duration_s * 90_000.0 + 0.5) as u64
    }

    /// Segments expose their URL early by the part of the segment that is
    /// not yet needed: segment minus one fragment.
    pub fn availability_time_offset_s(&self) -> f64 {
        self.segment_duration_s - self.fragment_duration_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTemplate {
    pub initialization: String,
    pub media: String,
    pub timescale: u32,
    pub duration_ticks: u64,
    pub start_number: u32,
    pub availability_time_offset_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpdDocument {
    pub mpd_type: String,
    pub availability_start_time_us: u64,
    pub minimum_update_period_s: f64,
    pub suggested_presentation_delay_s: f64,
    pub bandwidth_bps: u64,
    pub width: u32,
    pub height: u32,
    pub segment_template: SegmentTemplate,
    /// Attributes on the MPD element this parser does not model.
    pub extra_attrs: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpdError {
    Malformed(&'static str),
    BadConfig(&'static str),
}

impl core::fmt::Display for MpdError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MpdError::Malformed(what) => write!(f, "malformed mpd: {what}"),
            MpdError::BadConfig(what) => write!(f, "bad mpd config: {what}"),
        }
    }
}

impl core::error::Error for MpdError {}

/// Round a non-negative seconds value to whole microseconds.
fn seconds_to_us(s: f64) -> u64 {
    (s * 1e6 + 0.5) as u64
}

fn fmt_seconds(s: f64) -> String {
    // Compact decimal without trailing zeros, e.g. 2 -> "2", 1.5 -> "1.5".
    let micros = seconds_to_us(s);
    if micros % 1_000_000 == 0 {
        format!("{}", micros / 1_000_000)
    } else {
        let mut out = format!("{}.{:06}", micros / 1_000_000, micros % 1_000_000);
        while out.ends_with('0') {
            out.pop();
        }
        out
    }
}

fn fmt_duration(s: f64) -> String {
    format!("PT{}S", fmt_seconds(s))
}

fn parse_duration(s: &str) -> Option<f64> {
    s.strip_prefix("PT")?.strip_suffix('S')?.parse().ok()
}

/// Renders the manifest for `cfg` as XML text.
pub fn render_mpd(cfg: &MpdConfig) -> Result<String, MpdError> {
    cfg.validate()?;
    let ato = if cfg.low_latency {
        format!(
            " availabilityTimeOffset=\"{}\" availabilityTimeComplete=\"false\"",
            fmt_seconds(cfg.availability_time_offset_s())
        )
    } else {
        String::new()
    };
    Ok(format!(
        concat!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n",
            "<MPD xmlns=\"urn:mpeg:dash:schema:mpd:2011\" type=\"dynamic\"",
            " profiles=\"urn:mpeg:dash:profile:isoff-live:2011\"",
            " availabilityStartTime=\"{ast}\"",
            " minimumUpdatePeriod=\"{mup}\"",
            " suggestedPresentationDelay=\"{spd}\"",
            " minBufferTime=\"{mbt}\">\n",
            "  <Period id=\"1\" start=\"PT0S\">\n",
            "    <AdaptationSet contentType=\"video\" segmentAlignment=\"true\">\n",
            "      <SegmentTemplate initialization=\"init.mp4\" media=\"seg-$Number$.m4s\"",
            " timescale=\"90000\" duration=\"{dur}\" startNumber=\"1\"{ato}/>\n",
            "      <Representation id=\"video\" bandwidth=\"{bw}\"",
            " width=\"{w}\" height=\"{h}\" mimeType=\"video/mp4\"/>\n",
            "    </AdaptationSet>\n",
            "  </Period>\n",
            "</MPD>\n",
        ),
        ast = timefmt::format_epoch_us(cfg.availability_start_time_us),
        mup = fmt_duration(cfg.minimum_update_period_s),
        spd = fmt_duration(cfg.suggested_presentation_delay_s),
        mbt = fmt_duration(cfg.fragment_duration_s.max(1.0)),
        dur = cfg.segment_duration_ticks(),
        ato = ato,
        bw = cfg.bandwidth_bps,
        w = cfg.width,
        h = cfg.height,
    ))
}

fn element_attrs<'a>(text: &'a str, name: &str) -> Result<Vec<(&'a str, &'a str)>, MpdError> {
    let open = format!("<{name}");
    let start = text.find(&open).ok_or(MpdError::Malformed("missing element"))?;
    let rest = &text[start + open.len()..];
    // The element name must be followed by whitespace or the tag end.
    match rest.as_bytes().first() {
        Some(b' ') | Some(b'\t') | Some(b'\n') | Some(b'>') | Some(b'/') => {}
        _ => return Err(MpdError::Malformed("missing element")),
    }
    let end = rest.find('>').ok_or(MpdError::Malformed("unterminated tag"))?;
    let mut attrs = Vec::new();
    let mut s = rest[..end].trim_end_matches('/');
    loop {
        s = s.trim_start();
        if s.is_empty() {
            break;
        }
        let eq = match s.find('=') {
            Some(i) => i,
            None => return Err(MpdError::Malformed("attribute without value")),
        };
        let key = s[..eq].trim();
        let after = &s[eq + 1..];
        if !after.starts_with('"') {
            return Err(MpdError::Malformed("unquoted attribute"));
        }
        let close = after[1..].find('"').ok_or(MpdError::Malformed("unterminated attribute"))?;
        attrs.push((key, &after[1..1 + close]));
        s = &after[close + 2..];
    }
    Ok(attrs)
}

/// Parses manifest text produced by [`render_mpd`] (or a compatible
/// generator) into the document model.
pub fn parse_mpd(text: &str) -> Result<MpdDocument, MpdError> {
    let mpd_attrs = element_attrs(text, "MPD")?;
    let mut doc = MpdDocument {
        mpd_type: String::new(),
        availability_start_time_us: 0,
        minimum_update_period_s: 0.0,
        suggested_presentation_delay_s: 0.0,
        bandwidth_bps: 0,
        width: 0,
        height: 0,
        segment_template: SegmentTemplate {
            initialization: String::new(),
            media: String::new(),
            timescale: 0,
            duration_ticks: 0,
            start_number: 0,
            availability_time_offset_s: None,
        },
        extra_attrs: Vec::new(),
    };
    for (key, value) in mpd_attrs {
        match key {
            "type" => doc.mpd_type = value.to_string(),
            "availabilityStartTime" => {
                doc.availability_start_time_us =
                    timefmt::parse_epoch_us(value).ok_or(MpdError::Malformed("bad AST"))?;
            }
            "minimumUpdatePeriod" => {
                doc.minimum_update_period_s =
                    parse_duration(value).ok_or(MpdError::Malformed("bad update period"))?;
            }
            "suggestedPresentationDelay" => {
                doc.suggested_presentation_delay_s =
                    parse_duration(value).ok_or(MpdError::Malformed("bad presentation delay"))?;
            }
            "xmlns" | "profiles" | "minBufferTime" => {}
            other => doc.extra_attrs.push((other.to_string(), value.to_string())),
        }
    }
    if doc.mpd_type != "dynamic" {
        return Err(MpdError::Malformed("expected dynamic manifest"));
    }

    for (key, value) in element_attrs(text, "SegmentTemplate")? {
        let st = &mut doc.segment_template;
        match key {
            "initialization" => st.initialization = value.to_string(),
            "media" => st.media = value.to_string(),
            "timescale" => {
                st.timescale = value.parse().map_err(|_| MpdError::Malformed("bad timescale"))?;
            }
            "duration" => {
                st.duration_ticks =
                    value.parse().map_err(|_| MpdError::Malformed("bad duration"))?;
            }
            "startNumber" => {
                st.start_number =
                    value.parse().map_err(|_| MpdError::Malformed("bad startNumber"))?;
            }
            "availabilityTimeOffset" => {
                st.availability_time_offset_s =
                    Some(value.parse().map_err(|_| MpdError::Malformed("bad ATO"))?);
            }
            _ => {}
        }
    }

    for (key, value) in element_attrs(text, "Representation")? {
        match key {
            "bandwidth" => {
                doc.bandwidth_bps =
                    value.parse().map_err(|_| MpdError::Malformed("bad bandwidth"))?;
            }
            "width" => doc.width = value.parse().map_err(|_| MpdError::Malformed("bad width"))?,
            "height" => {
                doc.height = value.parse().map_err(|_| MpdError::Malformed("bad height"))?;
            }
            _ => {}
        }
    }
    Ok(doc)
}

impl MpdDocument {
    /// The model [`render_mpd`] encodes for `cfg`; parse of a rendered
    /// manifest equals this.
    pub fn from_config(cfg: &MpdConfig) -> Self {
        Self {
            mpd_type: "dynamic".to_string(),
            availability_start_time_us: cfg.availability_start_time_us,
            minimum_update_period_s: cfg.minimum_update_period_s,
            suggested_presentation_delay_s: cfg.suggested_presentation_delay_s,
            bandwidth_bps: cfg.bandwidth_bps,
            width: cfg.width,
            height: cfg.height,
            segment_template: SegmentTemplate {
                initialization: "init.mp4".to_string(),
                media: "seg-$Number$.m4s".to_string(),
                timescale: 90_000,
                duration_ticks: cfg.segment_duration_ticks(),
                start_number: 1,
                availability_time_offset_s: cfg
                    .low_latency
                    .then(|| cfg.availability_time_offset_s()),
            },
            extra_attrs: Vec::new(),
        }
    }

    pub fn segment_duration_us(&self) -> u64 {
        self.segment_template.duration_ticks * 1_000_000 / self.segment_template.timescale as u64
    }
}

/// Frames per segment; frame rate and segment length must align to whole
/// frames, which every configuration in this artifact does.
pub fn frames_per_segment(fps: u32, cfg: &MpdConfig) -> u64 {
    fps as u64 * cfg.segment_duration_us() / 1_000_000
}

/// 1-based segment number holding frame `seq`.
pub fn segment_for_frame(seq: u64, fps: u32, cfg: &MpdConfig) -> u64 {
    1 + seq / frames_per_segment(fps, cfg)
}

/// When segment `n` becomes requestable, in microseconds on the origin
/// clock. Plain DASH publishes a segment once it is complete; low-latency
/// admits the request at segment start and streams the body per fragment.
pub fn availability_time(n: u64, cfg: &MpdConfig) -> u64 {
    assert!(n >= 1, "segment numbers are 1-based");
    let seg = cfg.segment_duration_us();
    if cfg.low_latency {
        cfg.availability_start_time_us + (n - 1) * seg
    } else {
        cfg.availability_start_time_us + n * seg
    }
}

/// Low latency only: when fragment `k` (1-based) of segment `n` is flushed.
pub fn ll_chunk_time(n: u64, k: u64, cfg: &MpdConfig) -> u64 {
    assert!(n >= 1 && k >= 1);
    cfg.availability_start_time_us + (n - 1) * cfg.segment_duration_us()
        + k * cfg.fragment_duration_us()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_duration_in_ticks() {
        let text = render_mpd(&MpdConfig::dash(2.0)).unwrap();
        assert!(text.contains("duration=\"180000\""));
        assert!(!text.contains("availabilityTimeOffset"));
    }

    #[test]
    fn low_latency_offset_is_segment_minus_fragment() {
        let cfg = MpdConfig::low_latency(2.0, 0.5);
        assert_eq!(cfg.availability_time_offset_s(), 1.5);
        let text = render_mpd(&cfg).unwrap();
        assert!(text.contains("availabilityTimeOffset=\"1.5\""));
    }

    #[test]
    fn render_parse_round_trip() {
        for cfg in [MpdConfig::dash(2.0), MpdConfig::low_latency(2.0, 0.5), MpdConfig {
            availability_start_time_us: 1_709_296_245_250_000,
            ..MpdConfig::dash(4.0)
        }] {
            let text = render_mpd(&cfg).unwrap();
            let doc = parse_mpd(&text).unwrap();
            assert_eq!(doc, MpdDocument::from_config(&cfg), "cfg {cfg:?}");
        }
    }

    #[test]
    fn unknown_attributes_survive() {
        let cfg = MpdConfig::dash(2.0);
        let text = render_mpd(&cfg)
            .unwrap()
            .replace("type=\"dynamic\"", "type=\"dynamic\" publishTime=\"x\"");
        let doc = parse_mpd(&text).unwrap();
        assert_eq!(doc.extra_attrs, [("publishTime".to_string(), "x".to_string())]);
    }

    #[test]
    fn non_mpd_xml_is_malformed() {
        assert!(parse_mpd("<html></html>").is_err());
        assert!(parse_mpd("not xml at all").is_err());
        assert!(parse_mpd("<MPDX type=\"dynamic\"/>").is_err());
    }

    #[test]
    fn fragment_must_divide_segment() {
        let cfg = MpdConfig::low_latency(2.0, 0.3);
        assert!(matches!(cfg.validate(), Err(MpdError::BadConfig(_))));
    }

    #[test]
    fn frame_to_segment_mapping() {
        let cfg = MpdConfig::dash(2.0);
        assert_eq!(segment_for_frame(0, 60, &cfg), 1);
        assert_eq!(segment_for_frame(119, 60, &cfg), 1);
        assert_eq!(segment_for_frame(120, 60, &cfg), 2);
        assert_eq!(segment_for_frame(659, 60, &cfg), 6);
    }

    #[test]
    fn frame_mapping_partitions_contiguously() {
        let cfg = MpdConfig::dash(2.0);
        let per = frames_per_segment(60, &cfg);
        let mut prev = 0;
        for seq in 0..2_000u64 {
            let n = segment_for_frame(seq, 60, &cfg);
            assert!(n == prev || n == prev + 1 || prev == 0);
            assert_eq!(n, seq / per + 1);
            prev = n;
        }
    }

    #[test]
    fn availability_semantics() {
        let dash = MpdConfig::dash(2.0);
        assert_eq!(availability_time(1, &dash), 2_000_000);
        assert_eq!(availability_time(3, &dash), 6_000_000);
        let ll = MpdConfig::low_latency(2.0, 0.5);
        assert_eq!(availability_time(1, &ll), 0);
        assert_eq!(ll_chunk_time(1, 1, &ll), 500_000);
    }

    #[test]
    fn ll_bytes_never_lag_dash_and_segment_start_leads_by_ato() {
        let dash = MpdConfig::dash(2.0);
        let ll = MpdConfig::low_latency(2.0, 0.5);
        let frag_per_seg = dash.segment_duration_us() / ll.fragment_duration_us();
        let ato_us = (ll.availability_time_offset_s() * 1e6) as u64;
        for n in 1..=20u64 {
            let dash_at = availability_time(n, &dash);
            // The first bytes of the segment lead by exactly seg - frag.
            assert_eq!(dash_at, ll_chunk_time(n, 1, &ll) + ato_us);
            // No byte is ever available later over the low-latency path.
            for k in 1..=frag_per_seg {
                assert!(ll_chunk_time(n, k, &ll) <= dash_at, "segment {n} fragment {k}");
            }
        }
    }
}
