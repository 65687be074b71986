//! Ingestion adapters and the throughput benchmark.
//!
//! Two ways of moving encoded access units from the producer (synthesize +
//! encode) to a counting sink: an in-process bounded queue, and serialized
//! records through a real OS pipe read by a consumer thread. The
//! throughput benchmark measures the sustained post-encode frame rate into
//! a file sink for either mode.

use std::io::{self, Read, Write};
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use rrsb_core::media::{
    deserialize_au, serialize_au, synthesize_frame, AccessUnit, Encoder, EncoderConfig,
    VideoConfig,
};

pub const MIN_BENCH_FRAMES: u64 = 300;
const QUEUE_DEPTH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum IngestMode {
    Inproc,
    Pipe,
}

impl IngestMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            IngestMode::Inproc => "inproc",
            IngestMode::Pipe => "pipe",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "inproc" => Some(IngestMode::Inproc),
            "pipe" => Some(IngestMode::Pipe),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("transport closed early after {completed} frames: {source}")]
    Transport { completed: u64, source: io::Error },
    #[error("sink failed after {completed} frames: {source}")]
    Sink { completed: u64, source: io::Error },
    #[error("encoder rejected frame: {0}")]
    Encode(rrsb_core::media::MediaError),
    #[error("at least {MIN_BENCH_FRAMES} frames are required, got {got}")]
    TooFewFrames { got: u64 },
}

/// Timestamp source for frame capture times.
pub trait Clock: Send {
    fn now_us(&mut self) -> u64;
}

/// Wall clock, microseconds since the Unix epoch, strictly increasing.
pub struct RealClock {
    last: u64,
}

impl RealClock {
    pub fn new() -> Self {
        Self { last: 0 }
    }
}

impl Default for RealClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for RealClock {
    fn now_us(&mut self) -> u64 {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_micros() as u64)
            .unwrap_or(0);
        self.last = now.max(self.last + 1);
        self.last
    }
}

/// Deterministic clock stepping a fixed interval per frame.
pub struct StepClock {
    next: u64,
    step: u64,
}

impl StepClock {
    pub fn new(start_us: u64, step_us: u64) -> Self {
        Self { next: start_us, step: step_us }
    }
}

impl Clock for StepClock {
    fn now_us(&mut self) -> u64 {
        let t = self.next;
        self.next += self.step;
        t
    }
}

/// Consumer endpoint counting access units after the encode stage.
pub trait AuSink: Send {
    fn on_au(&mut self, au: &AccessUnit) -> io::Result<()>;
    fn finish(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Counts frames, optionally verifying each payload end to end.
pub struct NullSink {
    pub count: u64,
    pub verified: u64,
    verify_seed: Option<u64>,
}

impl NullSink {
    pub fn new() -> Self {
        Self { count: 0, verified: 0, verify_seed: None }
    }

    pub fn verifying(seed: u64) -> Self {
        Self { count: 0, verified: 0, verify_seed: Some(seed) }
    }
}

impl Default for NullSink {
    fn default() -> Self {
        Self::new()
    }
}

impl AuSink for NullSink {
    fn on_au(&mut self, au: &AccessUnit) -> io::Result<()> {
        self.count += 1;
        if let Some(seed) = self.verify_seed {
            if rrsb_core::media::decode_verify(&au.payload, seed).is_ok_and(|d| d.verified) {
                self.verified += 1;
            }
        }
        Ok(())
    }
}

/// Writes concatenated serialized records, the on-disk capture format.
pub struct FileSink<W: Write + Send> {
    writer: W,
    pub count: u64,
}

impl<W: Write + Send> FileSink<W> {
    pub fn new(writer: W) -> Self {
        Self { writer, count: 0 }
    }
}

impl<W: Write + Send> AuSink for FileSink<W> {
    fn on_au(&mut self, au: &AccessUnit) -> io::Result<()> {
        self.writer.write_all(&serialize_au(au))?;
        self.count += 1;
        Ok(())
    }

    fn finish(&mut self) -> io::Result<()> {
        self.writer.flush()
    }
}

/// Collects serialized records in memory, for byte-exact comparisons.
#[derive(Default)]
pub struct CollectSink {
    pub records: Vec<Vec<u8>>,
}

impl AuSink for CollectSink {
    fn on_au(&mut self, au: &AccessUnit) -> io::Result<()> {
        self.records.push(serialize_au(au));
        Ok(())
    }
}

/// Frame producer: source and encoder fused, as the sender pipeline runs
/// them.
pub struct FrameProducer<C: Clock> {
    video: VideoConfig,
    encoder: Encoder,
    clock: C,
    next_seq: u64,
}

impl<C: Clock> FrameProducer<C> {
    pub fn new(video: VideoConfig, encoder_cfg: EncoderConfig, clock: C) -> Self {
        Self { encoder: Encoder::new(encoder_cfg, video.seed), video, clock, next_seq: 0 }
    }

    pub fn produce(&mut self) -> Result<AccessUnit, rrsb_core::media::MediaError> {
        let seq = self.next_seq;
        self.next_seq += 1;
        let frame = synthesize_frame(seq, &self.video, self.clock.now_us());
        self.encoder.encode(&frame)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IngestReport {
    pub fps: f64,
    pub frames: u64,
    pub elapsed_s: f64,
}

/// Moves access units producer -> sink through a bounded in-memory queue.
pub fn ingest_inproc<C: Clock + 'static>(
    mut producer: FrameProducer<C>,
    sink: &mut dyn AuSink,
    n_frames: u64,
) -> Result<IngestReport, IngestError> {
    let (tx, rx) = mpsc::sync_channel::<AccessUnit>(QUEUE_DEPTH);
    let start = Instant::now();
    let feeder = thread::spawn(move || -> Result<(), IngestError> {
        for _ in 0..n_frames {
            let au = producer.produce().map_err(IngestError::Encode)?;
            if tx.send(au).is_err() {
                return Ok(()); // consumer stopped counting
            }
        }
        Ok(())
    });

    let mut completed = 0u64;
    while let Ok(au) = rx.recv() {
        sink.on_au(&au).map_err(|source| IngestError::Sink { completed, source })?;
        completed += 1;
    }
    sink.finish().map_err(|source| IngestError::Sink { completed, source })?;
    let elapsed = start.elapsed().as_secs_f64();
    feeder.join().expect("producer thread panicked")?;
    Ok(IngestReport { fps: completed as f64 / elapsed, frames: completed, elapsed_s: elapsed })
}

/// Moves serialized records producer -> sink through a real OS pipe.
pub fn ingest_pipe<C: Clock + 'static>(
    mut producer: FrameProducer<C>,
    sink: &mut dyn AuSink,
    n_frames: u64,
) -> Result<IngestReport, IngestError> {
    let (mut reader, mut writer) = io::pipe().map_err(|source| IngestError::Transport {
        completed: 0,
        source,
    })?;
    let start = Instant::now();
    let feeder = thread::spawn(move || -> Result<(), (u64, io::Error)> {
        for done in 0..n_frames {
            let au = producer.produce().map_err(|e| {
                (done, io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
            })?;
            writer.write_all(&serialize_au(&au)).map_err(|e| (done, e))?;
        }
        writer.flush().map_err(|e| (n_frames, e))?;
        Ok(())
    });

    let mut completed = 0u64;
    let mut read_error: Option<io::Error> = None;
    loop {
        let mut len_buf = [0u8; 4];
        match reader.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => {
                read_error = Some(e);
                break;
            }
        }
        let body_len = u32::from_be_bytes(len_buf) as usize;
        let mut record = vec![0u8; 4 + body_len];
        record[..4].copy_from_slice(&len_buf);
        if let Err(e) = reader.read_exact(&mut record[4..]) {
            read_error = Some(e);
            break;
        }
        let au = deserialize_au(&record).map_err(|e| IngestError::Transport {
            completed,
            source: io::Error::new(io::ErrorKind::InvalidData, e.to_string()),
        })?;
        sink.on_au(&au).map_err(|source| IngestError::Sink { completed, source })?;
        completed += 1;
        if completed == n_frames {
            break;
        }
    }
    sink.finish().map_err(|source| IngestError::Sink { completed, source })?;
    let elapsed = start.elapsed().as_secs_f64();
    match feeder.join().expect("producer thread panicked") {
        Ok(()) => {}
        Err((done, source)) => {
            return Err(IngestError::Transport { completed: done, source });
        }
    }
    if let Some(source) = read_error {
        return Err(IngestError::Transport { completed, source });
    }
    Ok(IngestReport { fps: completed as f64 / elapsed, frames: completed, elapsed_s: elapsed })
}

/// Maximum sustained post-encode frame rate into a file sink.
pub fn bench_fps(
    mode: IngestMode,
    width: u32,
    height: u32,
    n_frames: u64,
    seed: u64,
) -> Result<IngestReport, IngestError> {
    if n_frames < MIN_BENCH_FRAMES {
        return Err(IngestError::TooFewFrames { got: n_frames });
    }
    let video = VideoConfig { width, height, seed, ..VideoConfig::default() };
    let producer = FrameProducer::new(video, EncoderConfig::default(), RealClock::new());

    let path = std::env::temp_dir().join(format!(
        "rrsb-fps-{}-{}-{}.bin",
        std::process::id(),
        mode.as_str(),
        seed
    ));
    let file = std::fs::File::create(&path)
        .map_err(|source| IngestError::Sink { completed: 0, source })?;
    let mut sink = FileSink::new(io::BufWriter::new(file));
    let report = match mode {
        IngestMode::Inproc => ingest_inproc(producer, &mut sink, n_frames),
        IngestMode::Pipe => ingest_pipe(producer, &mut sink, n_frames),
    };
    let _ = std::fs::remove_file(&path);
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_video() -> VideoConfig {
        VideoConfig { width: 320, height: 180, fps: 60, seed: 5 }
    }

    #[test]
    fn inproc_moves_all_frames_and_verifies() {
        let producer =
            FrameProducer::new(small_video(), EncoderConfig::default(), StepClock::new(0, 16_667));
        let mut sink = NullSink::verifying(5);
        let report = ingest_inproc(producer, &mut sink, 50).unwrap();
        assert_eq!(report.frames, 50);
        assert_eq!(sink.count, 50);
        assert_eq!(sink.verified, 50);
        assert!(report.fps > 0.0);
    }

    #[test]
    fn pipe_moves_all_frames_and_verifies() {
        let producer =
            FrameProducer::new(small_video(), EncoderConfig::default(), StepClock::new(0, 16_667));
        let mut sink = NullSink::verifying(5);
        let report = ingest_pipe(producer, &mut sink, 50).unwrap();
        assert_eq!(report.frames, 50);
        assert_eq!(sink.verified, 50);
    }

    #[test]
    fn modes_produce_identical_bytes_with_stepped_clock() {
        let mk = || {
            FrameProducer::new(small_video(), EncoderConfig::default(), StepClock::new(1_000, 16_667))
        };
        let mut a = CollectSink::default();
        ingest_inproc(mk(), &mut a, 30).unwrap();
        let mut b = CollectSink::default();
        ingest_pipe(mk(), &mut b, 30).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn pipe_closed_early_reports_completed_count() {
        // A sink that fails after 10 frames forces the consumer loop to
        // abandon the pipe while the producer still writes.
        struct FailingSink {
            seen: u64,
        }
        impl AuSink for FailingSink {
            fn on_au(&mut self, _au: &AccessUnit) -> io::Result<()> {
                self.seen += 1;
                if self.seen > 10 {
                    return Err(io::Error::other("sink full"));
                }
                Ok(())
            }
        }
        let producer =
            FrameProducer::new(small_video(), EncoderConfig::default(), StepClock::new(0, 16_667));
        let mut sink = FailingSink { seen: 0 };
        match ingest_pipe(producer, &mut sink, 500) {
            Err(IngestError::Sink { completed, .. }) => assert_eq!(completed, 10),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bench_fps_rejects_short_runs() {
        assert!(matches!(
            bench_fps(IngestMode::Inproc, 320, 180, 10, 1),
            Err(IngestError::TooFewFrames { got: 10 })
        ));
    }
}
