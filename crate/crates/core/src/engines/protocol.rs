//! Line-delimited JSON protocol spoken with model backends over
//! stdin/stdout: one request object per line, one response per line,
//! matched by `id`.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{force_align, score_frames, EngineError, ForcedAligner, FrameScorer, Transcriber, WordTiming};
use crate::detect::MelFeatures;
use crate::segment::{Segment, SegmentError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Transcribe,
    ForceAlign,
    ScoreFrames,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Request {
    pub id: u64,
    pub op: Op,
    pub audio_path: String,
    pub start_s: f64,
    pub end_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<f64>>>,
}

impl Request {
    pub fn segment(&self) -> Result<Segment, SegmentError> {
        Segment::from_secs(self.start_s, self.end_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireWord {
    pub w: String,
    pub s: f64,
    pub e: f64,
}

impl WireWord {
    pub fn to_timing(&self) -> Result<WordTiming, SegmentError> {
        Ok(WordTiming { word: self.w.clone(), span: Segment::from_secs(self.s, self.e)? })
    }
}

impl From<&WordTiming> for WireWord {
    fn from(t: &WordTiming) -> Self {
        WireWord { w: t.word.clone(), s: t.start(), e: t.end() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub words: Option<Vec<WireWord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    pub fn failure(id: u64, error: impl Into<String>) -> Self {
        Response { id, ok: false, text: None, words: None, score: None, error: Some(error.into()) }
    }

    fn success(id: u64) -> Self {
        Response { id, ok: true, text: None, words: None, score: None, error: None }
    }

    /// Check that the payload matches what `op` should return.
    pub fn validate_for(&self, op: Op) -> Result<(), String> {
        if !self.ok {
            return if self.error.is_some() { Ok(()) } else { Err("failed response without error".into()) };
        }
        let ok = match op {
            Op::Transcribe => self.text.is_some(),
            Op::ForceAlign => self.words.is_some(),
            Op::ScoreFrames => self.score.is_some_and(|s| (0.0..=1.0).contains(&s)),
        };
        if ok {
            Ok(())
        } else {
            Err(format!("response {} lacks the payload for {op:?}", self.id))
        }
    }
}

pub fn encode<T: Serialize>(msg: &T) -> String {
    serde_json::to_string(msg).expect("protocol messages serialize")
}

pub fn decode_request(line: &str) -> Result<Request, serde_json::Error> {
    serde_json::from_str(line)
}

pub fn decode_response(line: &str) -> Result<Response, serde_json::Error> {
    serde_json::from_str(line)
}

/// Engines a serving process can answer with. Any role may be absent; such
/// requests get an `unsupported` failure.
#[derive(Default)]
pub struct Backend<'a> {
    pub transcriber: Option<&'a dyn Transcriber>,
    pub aligner: Option<&'a dyn ForcedAligner>,
    pub scorer: Option<&'a dyn FrameScorer>,
}

fn error_code(e: &EngineError) -> String {
    match e {
        EngineError::Precondition(m) => format!("precondition: {m}"),
        EngineError::AlignmentFailure(m) => format!("alignment: {m}"),
        EngineError::Shape { .. } => format!("shape: {e}"),
        EngineError::Audio(a) => format!("audio: {a}"),
        other => other.to_string(),
    }
}

impl Backend<'_> {
    pub fn handle(&self, req: &Request) -> Response {
        match self.dispatch(req) {
            Ok(r) => r,
            Err(e) => Response::failure(req.id, e),
        }
    }

    fn dispatch(&self, req: &Request) -> Result<Response, String> {
        let audio = Path::new(&req.audio_path);
        let unsupported = || format!("unsupported: no engine for {:?}", req.op);
        let mut out = Response::success(req.id);
        match req.op {
            Op::Transcribe => {
                let t = self.transcriber.ok_or_else(unsupported)?;
                let seg = req.segment().map_err(|e| format!("precondition: {e}"))?;
                out.text = Some(t.transcribe(audio, seg).map_err(|e| error_code(&e))?);
            }
            Op::ForceAlign => {
                let a = self.aligner.ok_or_else(unsupported)?;
                let transcript = req.transcript.as_deref().unwrap_or("");
                if transcript.trim().is_empty() {
                    return Err("precondition: empty transcript".into());
                }
                let seg = req.segment().map_err(|e| format!("precondition: {e}"))?;
                let words = force_align(a, audio, seg, transcript).map_err(|e| error_code(&e))?;
                out.words = Some(words.iter().map(WireWord::from).collect());
            }
            Op::ScoreFrames => {
                let s = self.scorer.ok_or_else(unsupported)?;
                let rows = req.features.as_ref().ok_or("precondition: missing features")?;
                let feats = MelFeatures::from_rows(rows).ok_or("shape: ragged feature matrix")?;
                out.score = Some(score_frames(s, &feats).map_err(|e| error_code(&e))?);
            }
        }
        Ok(out)
    }
}

/// Answer one response line per request line until EOF. Malformed lines get
/// an `ok:false` response with error `parse`; the loop never stops early.
pub fn serve<R: BufRead, W: Write>(reader: R, mut writer: W, backend: &Backend<'_>) -> std::io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match decode_request(&line) {
            Ok(req) => backend.handle(&req),
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(serde_json::Value::as_u64))
                    .unwrap_or(0);
                Response::failure(id, format!("parse: {e}"))
            }
        };
        writeln!(writer, "{}", encode(&resp))?;
        writer.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engines::UniformAligner;
    use proptest::prelude::*;

    fn arb_request() -> impl Strategy<Value = Request> {
        (
            any::<u64>(),
            prop_oneof![Just(Op::Transcribe), Just(Op::ForceAlign), Just(Op::ScoreFrames)],
            "[a-z/._]{1,20}",
            0.0f64..1e4,
            0.0f64..1e4,
            proptest::option::of("\\PC{0,30}"),
            proptest::option::of(proptest::collection::vec(proptest::collection::vec(-30.0f64..30.0, 0..4), 0..3)),
        )
            .prop_map(|(id, op, audio_path, start_s, end_s, transcript, features)| Request {
                id,
                op,
                audio_path,
                start_s,
                end_s,
                transcript,
                features,
            })
    }

    fn arb_response() -> impl Strategy<Value = Response> {
        (
            any::<u64>(),
            any::<bool>(),
            proptest::option::of("\\PC{0,30}"),
            proptest::option::of(proptest::collection::vec(("[a-z]{1,6}", 0.0f64..100.0, 0.0f64..100.0), 0..4)),
            proptest::option::of(0.0f64..=1.0),
            proptest::option::of("[a-z: ]{0,20}"),
        )
            .prop_map(|(id, ok, text, words, score, error)| Response {
                id,
                ok,
                text,
                words: words.map(|ws| ws.into_iter().map(|(w, s, e)| WireWord { w, s, e }).collect()),
                score,
                error,
            })
    }

    proptest! {
        #[test]
        fn request_round_trip(r in arb_request()) {
            let line = encode(&r);
            let back = decode_request(&line).unwrap();
            prop_assert_eq!(&back, &r);
            prop_assert_eq!(encode(&back), line);
        }

        #[test]
        fn response_round_trip(r in arb_response()) {
            let line = encode(&r);
            let back = decode_response(&line).unwrap();
            prop_assert_eq!(&back, &r);
            prop_assert_eq!(encode(&back), line);
        }
    }

    #[test]
    fn request_schema_keys() {
        let line = r#"{"id":3,"op":"force_align","audio_path":"a.wav","start_s":1.0,"end_s":2.5,"transcript":"a b c"}"#;
        let r = decode_request(line).unwrap();
        assert_eq!(r.op, Op::ForceAlign);
        assert!(decode_request(r#"{"id":3,"op":"dance","audio_path":"a","start_s":0,"end_s":1}"#).is_err());
    }

    #[test]
    fn serve_handles_good_bad_and_unsupported_lines() {
        let aligner = UniformAligner::new("u");
        let backend = Backend { aligner: Some(&aligner), ..Default::default() };
        let input = [
            r#"{"id":1,"op":"force_align","audio_path":"a.wav","start_s":1.0,"end_s":2.5,"transcript":"a b c"}"#,
            "{nope",
            r#"{"id":7,"op":"force_align","audio_path":"a.wav","start_s":0,"end_s":1,"transcript":""}"#,
            r#"{"id":8,"op":"transcribe","audio_path":"a.wav","start_s":0,"end_s":1}"#,
        ]
        .join("\n");
        let mut out = Vec::new();
        serve(input.as_bytes(), &mut out, &backend).unwrap();
        let lines: Vec<Response> = String::from_utf8(out).unwrap().lines().map(|l| decode_response(l).unwrap()).collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].ok);
        let w = lines[0].words.as_ref().unwrap();
        assert_eq!((w[0].s, w[0].e, w[2].e), (1.0, 1.5, 2.5));
        assert!(!lines[1].ok && lines[1].error.as_deref().unwrap().starts_with("parse"));
        assert_eq!(lines[2].id, 7);
        assert!(lines[2].error.as_deref().unwrap().starts_with("precondition"));
        assert!(lines[3].error.as_deref().unwrap().starts_with("unsupported"));
        for (r, op) in lines.iter().zip([Op::ForceAlign, Op::ForceAlign, Op::ForceAlign, Op::Transcribe]) {
            r.validate_for(op).unwrap();
        }
    }
}
