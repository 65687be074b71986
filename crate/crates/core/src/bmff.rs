//! Minimal ISO-BMFF writer and parser.
//!
//! Covers exactly the boxes a live fMP4 stream needs: an init segment
//! (`ftyp` + `moov` with an empty sample table and an `mvex`) and movie
//! fragments (`styp` + `moof` + `mdat`). One video track, timescale fixed
//! at 90 kHz, `tfdt` always version 1 so long runs cannot overflow 32-bit
//! tick counts. Byte order is big-endian throughout per ISO 14496-12.

use alloc::vec::Vec;

use crate::media::AccessUnit;

pub const TIMESCALE: u32 = 90_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrackConfig {
    pub track_id: u32,
    pub timescale: u32,
    pub width: u32,
    pub height: u32,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self { track_id: 1, timescale: TIMESCALE, width: 1920, height: 1080 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitSegment {
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MediaFragment {
    pub sequence_number: u32,
    pub base_dts_90k: u64,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BmffError {
    /// Input bytes do not tile into valid boxes; offset of the failure.
    Malformed { offset: usize, what: &'static str },
    /// Fragment parse on data without a `moof` (e.g. an init segment).
    NoSamples,
    /// Builder preconditions violated.
    EmptyFragment,
}

impl core::fmt::Display for BmffError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            BmffError::Malformed { offset, what } => {
                write!(f, "malformed box structure at byte {offset}: {what}")
            }
            BmffError::NoSamples => write!(f, "no moof box present"),
            BmffError::EmptyFragment => write!(f, "fragment needs at least one access unit"),
        }
    }
}

impl core::error::Error for BmffError {}

struct BoxWriter {
    buf: Vec<u8>,
    stack: Vec<usize>,
}

impl BoxWriter {
    fn new() -> Self {
        Self { buf: Vec::new(), stack: Vec::new() }
    }

    fn open(&mut self, fourcc: &[u8; 4]) {
        self.stack.push(self.buf.len());
        self.buf.extend_from_slice(&[0; 4]);
        self.buf.extend_from_slice(fourcc);
    }

    /// Full box: version + 24-bit flags after the header.
    fn open_full(&mut self, fourcc: &[u8; 4], version: u8, flags: u32) {
        self.open(fourcc);
        self.buf.push(version);
        self.buf.extend_from_slice(&flags.to_be_bytes()[1..]);
    }

    fn close(&mut self) {
        let start = self.stack.pop().expect("unbalanced box close");
        let size = (self.buf.len() - start) as u32;
        self.buf[start..start + 4].copy_from_slice(&size.to_be_bytes());
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    fn zeros(&mut self, n: usize) {
        self.buf.resize(self.buf.len() + n, 0);
    }
}

/// Builds the stream's init segment: `ftyp` followed by a `moov` whose
/// sample tables are empty and whose `mvex` declares the fragmented track.
pub fn build_init_segment(cfg: &TrackConfig) -> InitSegment {
    let mut w = BoxWriter::new();

    w.open(b"ftyp");
    w.bytes(b"iso5");
    w.u32(512);
    w.bytes(b"iso5");
    w.bytes(b"dash");
    w.close();

    w.open(b"moov");
    {
        w.open_full(b"mvhd", 0, 0);
        w.u32(0); // creation_time
        w.u32(0); // modification_time
        w.u32(cfg.timescale);
        w.u32(0); // duration unknown (live)
        w.u32(0x0001_0000); // rate 1.0
        w.u16(0x0100); // volume 1.0
        w.zeros(2 + 8); // reserved
        for v in [0x0001_0000u32, 0, 0, 0, 0x0001_0000, 0, 0, 0, 0x4000_0000] {
            w.u32(v); // identity matrix
        }
        w.zeros(24); // pre_defined
        w.u32(cfg.track_id + 1); // next_track_ID
        w.close();

        w.open(b"trak");
        {
            w.open_full(b"tkhd", 0, 0x7); // enabled | in_movie | in_preview
            w.u32(0);
            w.u32(0);
            w.u32(cfg.track_id);
            w.u32(0); // reserved
            w.u32(0); // duration
            w.zeros(8); // reserved
            w.u16(0); // layer
            w.u16(0); // alternate_group
            w.u16(0); // volume (video)
            w.u16(0); // reserved
            for v in [0x0001_0000u32, 0, 0, 0, 0x0001_0000, 0, 0, 0, 0x4000_0000] {
                w.u32(v);
            }
            w.u32(cfg.width << 16); // 16.16 fixed
            w.u32(cfg.height << 16);
            w.close();

            w.open(b"mdia");
            {
                w.open_full(b"mdhd", 0, 0);
                w.u32(0);
                w.u32(0);
                w.u32(cfg.timescale);
                w.u32(0);
                w.u16(0x55C4); // language: und
                w.u16(0);
                w.close();

                w.open_full(b"hdlr", 0, 0);
                w.u32(0); // pre_defined
                w.bytes(b"vide");
                w.zeros(12);
                w.bytes(b"VideoHandler\0");
                w.close();

                w.open(b"minf");
                {
                    w.open_full(b"vmhd", 0, 1);
                    w.zeros(8); // graphicsmode + opcolor
                    w.close();

                    w.open(b"dinf");
                    w.open_full(b"dref", 0, 0);
                    w.u32(1);
                    w.open_full(b"url ", 0, 1); // data in same file
                    w.close();
                    w.close();
                    w.close();

                    w.open(b"stbl");
                    {
                        w.open_full(b"stsd", 0, 0);
                        w.u32(0);
                        w.close();
                        w.open_full(b"stts", 0, 0);
                        w.u32(0);
                        w.close();
                        w.open_full(b"stsc", 0, 0);
                        w.u32(0);
                        w.close();
                        w.open_full(b"stsz", 0, 0);
                        w.u32(0); // sample_size
                        w.u32(0); // sample_count
                        w.close();
                        w.open_full(b"stco", 0, 0);
                        w.u32(0);
                        w.close();
                    }
                    w.close();
                }
                w.close();
            }
            w.close();
        }
        w.close();

        w.open(b"mvex");
        w.open_full(b"trex", 0, 0);
        w.u32(cfg.track_id);
        w.u32(1); // default_sample_description_index
        w.u32(0); // default_sample_duration
        w.u32(0); // default_sample_size
        w.u32(0); // default_sample_flags
        w.close();
        w.close();
    }
    w.close();

    debug_assert!(w.stack.is_empty());
    InitSegment { bytes: w.buf }
}

const TRUN_FLAGS: u32 = 0x000001 | 0x000100 | 0x000200 | 0x000400; // offset | duration | size | flags
const TFHD_FLAGS: u32 = 0x020000; // default-base-is-moof
const SAMPLE_FLAG_SYNC: u32 = 0x0200_0000; // sample_depends_on = none (keyframe)
const SAMPLE_FLAG_NON_SYNC: u32 = 0x0101_0000; // depends + non-sync bit

/// Packs consecutive access units into one `styp` + `moof` + `mdat`
/// fragment. `sample_duration_90k` is the per-sample duration in ticks,
/// i.e. `90000 / fps`.
pub fn build_fragment(
    aus: &[AccessUnit],
    sequence_number: u32,
    track_id: u32,
    sample_duration_90k: u32,
) -> Result<MediaFragment, BmffError> {
    if aus.is_empty() {
        return Err(BmffError::EmptyFragment);
    }
    let base_dts = aus[0].pts_90k;

    let mut w = BoxWriter::new();
    w.open(b"styp");
    w.bytes(b"msdh");
    w.u32(0);
    w.bytes(b"msdh");
    w.bytes(b"msix");
    w.close();

    let moof_start = w.buf.len();
    w.open(b"moof");
    {
        w.open_full(b"mfhd", 0, 0);
        w.u32(sequence_number);
        w.close();

        w.open(b"traf");
        {
            w.open_full(b"tfhd", 0, TFHD_FLAGS);
            w.u32(track_id);
            w.close();

            w.open_full(b"tfdt", 1, 0);
            w.u64(base_dts);
            w.close();

            w.open_full(b"trun", 0, TRUN_FLAGS);
            w.u32(aus.len() as u32);
            w.u32(0); // data_offset, patched once moof size is known
            for au in aus {
                w.u32(sample_duration_90k);
                w.u32(au.payload.len() as u32);
                w.u32(if au.keyframe { SAMPLE_FLAG_SYNC } else { SAMPLE_FLAG_NON_SYNC });
            }
            w.close();
        }
        w.close();
    }
    w.close();

    // moof is closed; its end plus the 8-byte mdat header is the payload.
    let moof_len = w.buf.len() - moof_start;
    let data_offset = (moof_len + 8) as u32;
    // trun data_offset sits right after its sample_count field: find it by
    // structure: moof header(8) + mfhd(16) + traf header(8) + tfhd(16) +
    // tfdt(20) + trun header(12) + sample_count(4).
    let trun_offset_pos = moof_start + 8 + 16 + 8 + 16 + 20 + 12 + 4;
    w.buf[trun_offset_pos..trun_offset_pos + 4].copy_from_slice(&data_offset.to_be_bytes());

    w.open(b"mdat");
    for au in aus {
        w.bytes(&au.payload);
    }
    w.close();

    debug_assert!(w.stack.is_empty());
    Ok(MediaFragment { sequence_number, base_dts_90k: base_dts, bytes: w.buf })
}

/// One top-level box: fourcc, byte offset, total size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxInfo {
    pub fourcc: [u8; 4],
    pub offset: usize,
    pub size: usize,
}

/// Walks the top-level boxes; sizes must exactly tile the input.
pub fn parse_boxes(bytes: &[u8]) -> Result<Vec<BoxInfo>, BmffError> {
    let mut out = Vec::new();
    let mut offset = 0;
    while offset < bytes.len() {
        if bytes.len() - offset < 8 {
            return Err(BmffError::Malformed { offset, what: "truncated box header" });
        }
        let size = u32::from_be_bytes(bytes[offset..offset + 4].try_into().unwrap()) as usize;
        let mut fourcc = [0u8; 4];
        fourcc.copy_from_slice(&bytes[offset + 4..offset + 8]);
        if size < 8 {
            return Err(BmffError::Malformed { offset, what: "unsupported box size" });
        }
        if offset + size > bytes.len() {
            return Err(BmffError::Malformed { offset, what: "box overruns input" });
        }
        out.push(BoxInfo { fourcc, offset, size });
        offset += size;
    }
    Ok(out)
}

/// Sample metadata recovered from one fragment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedFragment {
    pub sequence_number: u32,
    pub base_dts_90k: u64,
    pub sample_durations: Vec<u32>,
    pub sample_sizes: Vec<u32>,
    pub keyframes: Vec<bool>,
    pub payloads: Vec<Vec<u8>>,
}

fn subboxes(bytes: &[u8], base: usize) -> Result<Vec<BoxInfo>, BmffError> {
    parse_boxes(bytes).map_err(|e| match e {
        BmffError::Malformed { offset, what } => {
            BmffError::Malformed { offset: base + offset, what }
        }
        other => other,
    })
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, BmffError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(BmffError::Malformed { offset: at, what: "short read" })
}

fn read_u64(bytes: &[u8], at: usize) -> Result<u64, BmffError> {
    bytes
        .get(at..at + 8)
        .map(|b| u64::from_be_bytes(b.try_into().unwrap()))
        .ok_or(BmffError::Malformed { offset: at, what: "short read" })
}

/// Parses one `styp?``moof``mdat` fragment back into sample payloads.
pub fn parse_fragment(bytes: &[u8]) -> Result<ParsedFragment, BmffError> {
    let tops = parse_boxes(bytes)?;
    let moof = tops
        .iter()
        .find(|b| &b.fourcc == b"moof")
        .copied()
        .ok_or(BmffError::NoSamples)?;
    let mdat = tops
        .iter()
        .find(|b| &b.fourcc == b"mdat" && b.offset > moof.offset)
        .copied()
        .ok_or(BmffError::Malformed { offset: bytes.len(), what: "missing mdat" })?;

    let moof_body = &bytes[moof.offset + 8..moof.offset + moof.size];
    let mut sequence_number = 0;
    let mut base_dts = None;
    let mut durations = Vec::new();
    let mut sizes = Vec::new();
    let mut keys = Vec::new();
    let mut data_offset: Option<u32> = None;

    for child in subboxes(moof_body, moof.offset + 8)? {
        let body = &moof_body[child.offset + 8..child.offset + child.size];
        let abs = moof.offset + 8 + child.offset + 8;
        match &child.fourcc {
            b"mfhd" => sequence_number = read_u32(body, 4)?,
            b"traf" => {
                for sub in subboxes(body, abs)? {
                    let sb = &body[sub.offset + 8..sub.offset + sub.size];
                    match &sub.fourcc {
                        b"tfdt" => {
                            let version = sb[0];
                            base_dts = Some(if version == 1 {
                                read_u64(sb, 4)?
                            } else {
                                read_u32(sb, 4)? as u64
                            });
                        }
                        b"trun" => {
                            let flags = read_u32(sb, 0)? & 0x00FF_FFFF;
                            if flags != TRUN_FLAGS {
                                return Err(BmffError::Malformed {
                                    offset: abs + sub.offset,
                                    what: "unexpected trun flags",
                                });
                            }
                            let count = read_u32(sb, 4)? as usize;
                            data_offset = Some(read_u32(sb, 8)?);
                            let mut at = 12;
                            for _ in 0..count {
                                durations.push(read_u32(sb, at)?);
                                sizes.push(read_u32(sb, at + 4)?);
                                keys.push(read_u32(sb, at + 8)? & 0x0001_0000 == 0);
                                at += 12;
                            }
                        }
                        _ => {}
                    }
                }
            }
            _ => {}
        }
    }

    let base_dts = base_dts.ok_or(BmffError::Malformed {
        offset: moof.offset,
        what: "missing tfdt",
    })?;
    let data_offset = data_offset.ok_or(BmffError::Malformed {
        offset: moof.offset,
        what: "missing trun",
    })? as usize;

    // default-base-is-moof: offsets are relative to the moof start.
    let mut at = moof.offset + data_offset;
    let mdat_end = mdat.offset + mdat.size;
    let mut payloads = Vec::with_capacity(sizes.len());
    for &size in &sizes {
        let end = at + size as usize;
        if at < mdat.offset + 8 || end > mdat_end {
            return Err(BmffError::Malformed { offset: at, what: "sample outside mdat" });
        }
        payloads.push(bytes[at..end].to_vec());
        at = end;
    }
    if at != mdat_end {
        return Err(BmffError::Malformed { offset: at, what: "mdat not fully consumed" });
    }

    Ok(ParsedFragment {
        sequence_number,
        base_dts_90k: base_dts,
        sample_durations: durations,
        sample_sizes: sizes,
        keyframes: keys,
        payloads,
    })
}
