//! Client side of the backend protocol: spawn a model process and talk to
//! it over stdin/stdout.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::protocol::{decode_response, encode, Op, Request, Response};
use super::{EngineError, EngineKind, ForcedAligner, FrameScorer, Transcriber, WordTiming};
use crate::audio::AudioCache;
use crate::detect::mel::N_MELS;
use crate::detect::MelFeatures;
use crate::segment::Segment;

pub const DEFAULT_TIMEOUT_S: f64 = 120.0;

struct Process {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

/// One backend process. Requests on a handle are serialized.
pub struct SubprocessEngine {
    name: String,
    kind: EngineKind,
    process: Mutex<Process>,
    next_id: AtomicU64,
    timeout: Duration,
    audio: Arc<AudioCache>,
}

impl SubprocessEngine {
    pub fn spawn(
        name: &str,
        kind: EngineKind,
        command: &[String],
        timeout: Duration,
        audio: Arc<AudioCache>,
    ) -> Result<Self, EngineError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| EngineError::Unavailable(name.into(), "empty command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| EngineError::Unavailable(name.into(), format!("{program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in stdout.lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            name: name.into(),
            kind,
            process: Mutex::new(Process { child, stdin, lines }),
            next_id: AtomicU64::new(1),
            timeout,
            audio,
        })
    }

    pub fn kind(&self) -> EngineKind {
        self.kind
    }

    fn try_busy(&self) -> bool {
        self.process.try_lock().is_err()
    }

    /// Send one request and wait for the response with the same id.
    /// Responses to earlier, timed-out requests are discarded.
    pub fn call(&self, mut req: Request) -> Result<Response, EngineError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        req.id = id;
        let op = req.op;
        let mut p = self.process.lock().unwrap_or_else(|e| e.into_inner());
        let line = encode(&req);
        let unavailable = |e: std::io::Error| EngineError::Unavailable(self.name.clone(), e.to_string());
        p.stdin.write_all(line.as_bytes()).map_err(unavailable)?;
        p.stdin.write_all(b"\n").map_err(unavailable)?;
        p.stdin.flush().map_err(unavailable)?;
        let deadline = Instant::now() + self.timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match p.lines.recv_timeout(left) {
                Ok(line) => {
                    let resp = decode_response(&line).map_err(|e| EngineError::Protocol(format!("{}: {e}", self.name)))?;
                    if resp.id != id {
                        continue;
                    }
                    resp.validate_for(op).map_err(EngineError::Protocol)?;
                    return Ok(resp);
                }
                Err(RecvTimeoutError::Timeout) => return Err(EngineError::Timeout { id, timeout: self.timeout }),
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(EngineError::Unavailable(self.name.clone(), "backend exited".into()))
                }
            }
        }
    }

    fn request(&self, op: Op, audio: &Path, segment: Segment) -> Request {
        Request {
            id: 0,
            op,
            audio_path: self.audio.resolve(audio).to_string_lossy().into_owned(),
            start_s: segment.start(),
            end_s: segment.end(),
            transcript: None,
            features: None,
        }
    }

    fn ok(resp: Response) -> Result<Response, EngineError> {
        if resp.ok {
            Ok(resp)
        } else {
            let msg = resp.error.unwrap_or_default();
            Err(if msg.starts_with("alignment") {
                EngineError::AlignmentFailure(msg)
            } else if msg.starts_with("precondition") {
                EngineError::Precondition(msg)
            } else {
                EngineError::Remote(msg)
            })
        }
    }
}

impl Drop for SubprocessEngine {
    fn drop(&mut self) {
        if let Ok(p) = self.process.get_mut() {
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
    }
}

impl Transcriber for SubprocessEngine {
    fn name(&self) -> &str {
        &self.name
    }

    fn transcribe(&self, audio: &Path, segment: Segment) -> Result<String, EngineError> {
        let resp = Self::ok(self.call(self.request(Op::Transcribe, audio, segment))?)?;
        Ok(resp.text.unwrap_or_default())
    }
}

impl ForcedAligner for SubprocessEngine {
    fn name(&self) -> &str {
        &self.name
    }

    fn force_align(&self, audio: &Path, segment: Segment, transcript: &str) -> Result<Vec<WordTiming>, EngineError> {
        let mut req = self.request(Op::ForceAlign, audio, segment);
        req.transcript = Some(transcript.into());
        let resp = Self::ok(self.call(req)?)?;
        resp.words
            .unwrap_or_default()
            .iter()
            .map(|w| w.to_timing().map_err(|e| EngineError::Protocol(e.to_string())))
            .collect()
    }
}

impl FrameScorer for SubprocessEngine {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_shape(&self) -> (usize, Option<usize>) {
        (N_MELS, None)
    }

    fn score_frames(&self, features: &MelFeatures) -> Result<f64, EngineError> {
        // Features carry the audio-free payload; the segment is informative only.
        let mut req = self.request(Op::ScoreFrames, Path::new(""), Segment::from_ms(0, 1).expect("valid"));
        req.features = Some(features.rows());
        let resp = Self::ok(self.call(req)?)?;
        resp.score.ok_or_else(|| EngineError::Protocol("missing score".into()))
    }
}

/// Several handles to the same backend; each call goes to an idle handle
/// when one exists.
pub struct SubprocessPool {
    name: String,
    handles: Vec<SubprocessEngine>,
    next: AtomicUsize,
}

impl SubprocessPool {
    pub fn spawn(
        name: &str,
        kind: EngineKind,
        command: &[String],
        timeout: Duration,
        size: usize,
        audio: Arc<AudioCache>,
    ) -> Result<Self, EngineError> {
        let handles = (0..size.max(1))
            .map(|_| SubprocessEngine::spawn(name, kind, command, timeout, Arc::clone(&audio)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { name: name.into(), handles, next: AtomicUsize::new(0) })
    }

    pub fn len(&self) -> usize {
        self.handles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.handles.is_empty()
    }

    fn pick(&self) -> &SubprocessEngine {
        let start = self.next.fetch_add(1, Ordering::Relaxed);
        let n = self.handles.len();
        (0..n)
            .map(|k| &self.handles[(start + k) % n])
            .find(|h| !h.try_busy())
            .unwrap_or(&self.handles[start % n])
    }
}

impl Transcriber for SubprocessPool {
    fn name(&self) -> &str {
        &self.name
    }

    fn transcribe(&self, audio: &Path, segment: Segment) -> Result<String, EngineError> {
        self.pick().transcribe(audio, segment)
    }
}

impl ForcedAligner for SubprocessPool {
    fn name(&self) -> &str {
        &self.name
    }

    fn force_align(&self, audio: &Path, segment: Segment, transcript: &str) -> Result<Vec<WordTiming>, EngineError> {
        self.pick().force_align(audio, segment, transcript)
    }
}

impl FrameScorer for SubprocessPool {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_shape(&self) -> (usize, Option<usize>) {
        (N_MELS, None)
    }

    fn score_frames(&self, features: &MelFeatures) -> Result<f64, EngineError> {
        self.pick().score_frames(features)
    }
}
