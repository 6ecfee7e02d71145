//! Newline-delimited JSON wire protocol that turns any teacher into a remote
//! black box.
//!
//! Every frame is one compact JSON object followed by a single `\n`. Keys are
//! emitted in a fixed order:
//!
//! | frame  | keys                          |
//! |--------|-------------------------------|
//! | hello  | `t, proto, n_dim, k, n_classes` |
//! | query  | `t, seq, x`                   |
//! | answer | `t, seq, y[, soft]`           |
//! | error  | `t, seq, code, msg`           |
//! | bye    | `t`                           |
//!
//! The student opens with `hello`; the teacher echoes it (or replies with an
//! `error` and closes). Each `query` gets exactly one `answer` carrying the
//! same `seq`. Sequence numbers strictly increase per connection.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::error::{DfrdError, Result};
use crate::kt::{blackbox_answer, Answer, Teacher};
use crate::mlp::MlpModel;
use crate::rrf::{check_indices, OneHotLabel, RrfVector};
use crate::samplers::Query;

pub const PROTO: &str = "dfrd/1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Hello {
        proto: String,
        n_dim: u32,
        k: u32,
        n_classes: u32,
    },
    Query {
        seq: u64,
        x: Vec<u32>,
    },
    Answer {
        seq: u64,
        y: u32,
        soft: Option<Vec<u32>>,
    },
    Error {
        seq: u64,
        code: String,
        msg: String,
    },
    Bye,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    /// No terminating line feed yet; wait for more bytes.
    #[error("incomplete frame")]
    Incomplete,
    #[error("protocol error [{code}]: {msg}")]
    Protocol { code: &'static str, msg: String },
}

impl From<FrameError> for DfrdError {
    fn from(e: FrameError) -> Self {
        match e {
            FrameError::Incomplete => DfrdError::protocol("incomplete", "stream ended mid-frame"),
            FrameError::Protocol { code, msg } => DfrdError::protocol(code, msg),
        }
    }
}

fn perr(code: &'static str, msg: impl Into<String>) -> FrameError {
    FrameError::Protocol {
        code,
        msg: msg.into(),
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

fn join(xs: &[u32]) -> String {
    let parts: Vec<String> = xs.iter().map(u32::to_string).collect();
    format!("[{}]", parts.join(","))
}

/// Canonical byte encoding, including the trailing line feed.
pub fn encode_frame(f: &Frame) -> Vec<u8> {
    let body = match f {
        Frame::Hello {
            proto,
            n_dim,
            k,
            n_classes,
        } => format!(
            r#"{{"t":"hello","proto":{},"n_dim":{n_dim},"k":{k},"n_classes":{n_classes}}}"#,
            json_str(proto)
        ),
        Frame::Query { seq, x } => format!(r#"{{"t":"query","seq":{seq},"x":{}}}"#, join(x)),
        Frame::Answer { seq, y, soft } => match soft {
            Some(s) => format!(r#"{{"t":"answer","seq":{seq},"y":{y},"soft":{}}}"#, join(s)),
            None => format!(r#"{{"t":"answer","seq":{seq},"y":{y}}}"#),
        },
        Frame::Error { seq, code, msg } => format!(
            r#"{{"t":"error","seq":{seq},"code":{},"msg":{}}}"#,
            json_str(code),
            json_str(msg)
        ),
        Frame::Bye => r#"{"t":"bye"}"#.to_string(),
    };
    let mut out = body.into_bytes();
    out.push(b'\n');
    out
}

struct Fields<'a> {
    obj: &'a Map<String, Value>,
    t: &'static str,
}

impl Fields<'_> {
    fn get(&self, key: &str) -> std::result::Result<&Value, FrameError> {
        self.obj
            .get(key)
            .ok_or_else(|| perr("missing_field", format!("{} frame lacks \"{key}\"", self.t)))
    }

    fn u64(&self, key: &str) -> std::result::Result<u64, FrameError> {
        self.get(key)?
            .as_u64()
            .ok_or_else(|| perr("bad_field", format!("\"{key}\" must be an unsigned integer")))
    }

    fn u32(&self, key: &str) -> std::result::Result<u32, FrameError> {
        u32::try_from(self.u64(key)?)
            .map_err(|_| perr("bad_field", format!("\"{key}\" exceeds 32 bits")))
    }

    fn str(&self, key: &str) -> std::result::Result<String, FrameError> {
        self.get(key)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| perr("bad_field", format!("\"{key}\" must be a string")))
    }

    fn indices(&self, key: &str) -> std::result::Result<Vec<u32>, FrameError> {
        let arr = self
            .get(key)?
            .as_array()
            .ok_or_else(|| perr("bad_field", format!("\"{key}\" must be an array")))?;
        let xs = arr
            .iter()
            .map(|v| v.as_u64().and_then(|n| u32::try_from(n).ok()))
            .collect::<Option<Vec<u32>>>()
            .ok_or_else(|| perr("bad_field", format!("\"{key}\" must hold 32-bit indices")))?;
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(perr("duplicate_index", format!("\"{key}\" repeats an index")));
        }
        Ok(xs)
    }

    fn only(&self, keys: &[&str]) -> std::result::Result<(), FrameError> {
        match self.obj.keys().find(|k| !keys.contains(&k.as_str())) {
            Some(k) => Err(perr("unknown_field", format!("unexpected key \"{k}\" in {} frame", self.t))),
            None => Ok(()),
        }
    }
}

/// Decodes one complete line (terminating `\n` included).
pub fn decode_frame(bytes: &[u8]) -> std::result::Result<Frame, FrameError> {
    let line = match bytes.split_last() {
        Some((b'\n', rest)) => rest,
        _ => return Err(FrameError::Incomplete),
    };
    if line.contains(&b'\n') {
        return Err(perr("malformed", "more than one line"));
    }
    let value: Value =
        serde_json::from_slice(line).map_err(|e| perr("malformed", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| perr("malformed", "frame is not a JSON object"))?;
    let t = obj
        .get("t")
        .and_then(Value::as_str)
        .ok_or_else(|| perr("missing_field", "frame lacks \"t\""))?;
    let kind: &'static str = match t {
        "hello" => "hello",
        "query" => "query",
        "answer" => "answer",
        "error" => "error",
        "bye" => "bye",
        other => return Err(perr("unknown_type", format!("unknown frame type \"{other}\""))),
    };
    let f = Fields { obj, t: kind };
    match kind {
        "hello" => {
            f.only(&["t", "proto", "n_dim", "k", "n_classes"])?;
            Ok(Frame::Hello {
                proto: f.str("proto")?,
                n_dim: f.u32("n_dim")?,
                k: f.u32("k")?,
                n_classes: f.u32("n_classes")?,
            })
        }
        "query" => {
            f.only(&["t", "seq", "x"])?;
            Ok(Frame::Query {
                seq: f.u64("seq")?,
                x: f.indices("x")?,
            })
        }
        "answer" => {
            f.only(&["t", "seq", "y", "soft"])?;
            let soft = match obj.get("soft") {
                None => None,
                Some(_) => Some(f.indices("soft")?),
            };
            Ok(Frame::Answer {
                seq: f.u64("seq")?,
                y: f.u32("y")?,
                soft,
            })
        }
        "error" => {
            f.only(&["t", "seq", "code", "msg"])?;
            Ok(Frame::Error {
                seq: f.u64("seq")?,
                code: f.str("code")?,
                msg: f.str("msg")?,
            })
        }
        _ => {
            f.only(&["t"])?;
            Ok(Frame::Bye)
        }
    }
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: BufRead>(r: &mut R) -> Result<Option<Frame>> {
    let mut buf = Vec::new();
    let n = r.read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(decode_frame(&buf)?))
}

pub fn write_frame<W: Write>(w: &mut W, f: &Frame) -> Result<()> {
    w.write_all(&encode_frame(f))?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

/// Negotiated parameters of one connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionState {
    pub n_dim: usize,
    pub k: usize,
    pub n_classes: usize,
    pub next_seq: u64,
    pub role: Role,
}

impl SessionState {
    fn hello(&self) -> Frame {
        Frame::Hello {
            proto: PROTO.to_string(),
            n_dim: self.n_dim as u32,
            k: self.k as u32,
            n_classes: self.n_classes as u32,
        }
    }

    fn query_vector(&self, x: Vec<u32>) -> std::result::Result<RrfVector, FrameError> {
        check_indices(self.n_dim, &x).map_err(|e| perr("index_range", e.to_string()))?;
        RrfVector::new(self.n_dim, self.k, x).map_err(|e| perr("bad_query", e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ServeOptions {
    /// Include the k-hot ranking in every answer.
    pub soft: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionSummary {
    pub queries_answered: u64,
}

fn reject<W: Write>(w: &mut W, seq: u64, e: FrameError) -> DfrdError {
    if let FrameError::Protocol { code, msg } = &e {
        let _ = write_frame(
            w,
            &Frame::Error {
                seq,
                code: code.to_string(),
                msg: msg.clone(),
            },
        );
    }
    e.into()
}

/// Serves one student connection until `bye` or end of stream.
pub fn serve_teacher<R: BufRead, W: Write>(
    model: &MlpModel,
    mut reader: R,
    mut writer: W,
    opts: ServeOptions,
) -> Result<SessionSummary> {
    let state = match read_frame(&mut reader)? {
        None => return Ok(SessionSummary { queries_answered: 0 }),
        Some(Frame::Hello {
            proto,
            n_dim,
            k,
            n_classes,
        }) => {
            if proto != PROTO {
                return Err(reject(&mut writer, 0, perr("proto_mismatch", format!("expected {PROTO}, got {proto}"))));
            }
            if n_dim as usize != model.config().in_dim || n_classes as usize != model.config().out_dim || k == 0 {
                return Err(reject(
                    &mut writer,
                    0,
                    perr(
                        "dim_mismatch",
                        format!(
                            "teacher serves n_dim={} n_classes={}, student asked n_dim={n_dim} k={k} n_classes={n_classes}",
                            model.config().in_dim,
                            model.config().out_dim
                        ),
                    ),
                ));
            }
            SessionState {
                n_dim: n_dim as usize,
                k: k as usize,
                n_classes: n_classes as usize,
                next_seq: 0,
                role: Role::Teacher,
            }
        }
        Some(_) => {
            return Err(reject(&mut writer, 0, perr("state", "first frame must be hello")));
        }
    };
    write_frame(&mut writer, &state.hello())?;

    let mut answered = 0u64;
    let mut last_seq: Option<u64> = None;
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(DfrdError::Protocol { code, msg }) => {
                let _ = write_frame(&mut writer, &Frame::Error { seq: 0, code: code.clone(), msg: msg.clone() });
                return Err(DfrdError::Protocol { code, msg });
            }
            Err(e) => return Err(e),
        };
        match frame {
            Frame::Query { seq, x } => {
                if last_seq.is_some_and(|l| seq <= l) {
                    return Err(reject(&mut writer, seq, perr("seq_order", format!("seq {seq} is not increasing"))));
                }
                last_seq = Some(seq);
                let v = match state.query_vector(x) {
                    Ok(v) => v,
                    Err(e) => return Err(reject(&mut writer, seq, e)),
                };
                let (y, soft) = blackbox_answer(model, &Query::Rrf(v), state.k)?;
                write_frame(
                    &mut writer,
                    &Frame::Answer {
                        seq,
                        y: y.0 as u32,
                        soft: opts.soft.then(|| soft.entries().to_vec()),
                    },
                )?;
                answered += 1;
            }
            Frame::Bye => break,
            other => {
                let seq = match other {
                    Frame::Answer { seq, .. } | Frame::Error { seq, .. } => seq,
                    _ => 0,
                };
                return Err(reject(&mut writer, seq, perr("state", "teacher expects query or bye")));
            }
        }
    }
    Ok(SessionSummary {
        queries_answered: answered,
    })
}

/// Accepts connections and serves each on its own thread. Stops after
/// `max_sessions` connections when given; otherwise runs forever.
pub fn serve_listener(
    model: Arc<MlpModel>,
    listener: TcpListener,
    opts: ServeOptions,
    max_sessions: Option<usize>,
) -> Result<()> {
    let mut handles = Vec::new();
    for (n, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let model = model.clone();
        handles.push(thread::spawn(move || -> Result<SessionSummary> {
            let reader = BufReader::new(stream.try_clone()?);
            serve_teacher(&model, reader, stream, opts)
        }));
        if max_sessions.is_some_and(|m| n + 1 >= m) {
            break;
        }
    }
    for h in handles {
        match h.join() {
            Ok(Ok(_)) => {}
            Ok(Err(e)) => log_session_error(&e),
            Err(_) => eprintln!("teacher session thread panicked"),
        }
    }
    Ok(())
}

fn log_session_error(e: &DfrdError) {
    eprintln!("teacher session ended with error: {e}");
}

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    state: SessionState,
    closed: bool,
}

/// Student-side handle to a teacher on the other end of a byte stream.
pub struct RemoteTeacher {
    id: String,
    conn: Mutex<Connection>,
}

fn transfer(seq: u64, reason: impl Into<String>) -> DfrdError {
    DfrdError::Transfer {
        seq,
        reason: reason.into(),
    }
}

impl RemoteTeacher {
    /// Performs the hello exchange.
    pub fn connect(
        id: impl Into<String>,
        reader: Box<dyn BufRead + Send>,
        writer: Box<dyn Write + Send>,
        n_dim: usize,
        k: usize,
        n_classes: usize,
    ) -> Result<Self> {
        let state = SessionState {
            n_dim,
            k,
            n_classes,
            next_seq: 1,
            role: Role::Student,
        };
        let mut conn = Connection {
            reader,
            writer,
            state,
            closed: false,
        };
        write_frame(&mut conn.writer, &conn.state.hello())?;
        match read_frame(&mut conn.reader)? {
            Some(Frame::Hello {
                proto,
                n_dim: d,
                k: kk,
                n_classes: c,
            }) if proto == PROTO && d as usize == n_dim && kk as usize == k && c as usize == n_classes => {}
            Some(Frame::Hello { .. }) => {
                return Err(DfrdError::protocol("dim_mismatch", "teacher hello does not match"));
            }
            Some(Frame::Error { code, msg, .. }) => return Err(DfrdError::Protocol { code, msg }),
            Some(_) => return Err(DfrdError::protocol("state", "expected hello from teacher")),
            None => return Err(DfrdError::protocol("closed", "teacher closed during hello")),
        }
        Ok(RemoteTeacher {
            id: id.into(),
            conn: Mutex::new(conn),
        })
    }

    pub fn connect_tcp<A: ToSocketAddrs>(addr: A, n_dim: usize, k: usize, n_classes: usize) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        let id = format!("remote-{}", stream.peer_addr()?);
        let reader = BufReader::new(stream.try_clone()?);
        RemoteTeacher::connect(id, Box::new(reader), Box::new(stream), n_dim, k, n_classes)
    }

    /// Sends `bye`. Further answers fail with a state error.
    pub fn close(&self) -> Result<()> {
        let mut conn = self.conn.lock().expect("connection lock");
        if !conn.closed {
            conn.closed = true;
            write_frame(&mut conn.writer, &Frame::Bye)?;
        }
        Ok(())
    }
}

impl Teacher for RemoteTeacher {
    fn id(&self) -> &str {
        &self.id
    }

    fn answer(&self, query: &Query) -> Result<Answer> {
        let mut conn = self.conn.lock().expect("connection lock");
        let seq = conn.state.next_seq;
        if conn.closed {
            return Err(DfrdError::protocol("state", "answer requested after bye"));
        }
        let v = query.as_rrf().ok_or_else(|| {
            DfrdError::protocol("unsupported_query", "dense queries cannot be sent on the wire")
        })?;
        if v.dim() != conn.state.n_dim || v.k() != conn.state.k {
            return Err(DfrdError::invalid(format!(
                "query shape (dim {}, k {}) does not match session (dim {}, k {})",
                v.dim(),
                v.k(),
                conn.state.n_dim,
                conn.state.k
            )));
        }
        conn.state.next_seq += 1;
        write_frame(
            &mut conn.writer,
            &Frame::Query {
                seq,
                x: v.entries().to_vec(),
            },
        )
        .map_err(|e| transfer(seq, e.to_string()))?;
        let frame = read_frame(&mut conn.reader).map_err(|e| transfer(seq, e.to_string()))?;
        match frame {
            Some(Frame::Answer { seq: s, y, soft }) => {
                if s != seq {
                    return Err(DfrdError::protocol(
                        "seq_order",
                        format!("answer for seq {s} while awaiting {seq}"),
                    ));
                }
                let label = OneHotLabel::checked(y as usize, conn.state.n_classes)
                    .map_err(|e| DfrdError::protocol("label_range", e.to_string()))?;
                let soft = soft
                    .map(|s| RrfVector::new(conn.state.n_classes, conn.state.k, s))
                    .transpose()
                    .map_err(|e| DfrdError::protocol("bad_soft", e.to_string()))?;
                Ok(Answer { label, soft })
            }
            Some(Frame::Error { code, msg, .. }) => Err(transfer(seq, format!("teacher error [{code}]: {msg}"))),
            Some(_) => Err(DfrdError::protocol("state", "expected answer")),
            None => Err(transfer(seq, "teacher closed the stream")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc(f: &Frame) -> String {
        String::from_utf8(encode_frame(f)).unwrap()
    }

    #[test]
    fn encodes_exact_bytes() {
        assert_eq!(
            enc(&Frame::Query { seq: 1, x: vec![4, 2, 9] }),
            "{\"t\":\"query\",\"seq\":1,\"x\":[4,2,9]}\n"
        );
        assert_eq!(enc(&Frame::Bye), "{\"t\":\"bye\"}\n");
        assert_eq!(
            enc(&Frame::Answer { seq: 1, y: 7, soft: None }),
            "{\"t\":\"answer\",\"seq\":1,\"y\":7}\n"
        );
        assert_eq!(
            enc(&Frame::Answer { seq: 2, y: 7, soft: Some(vec![7, 1]) }),
            "{\"t\":\"answer\",\"seq\":2,\"y\":7,\"soft\":[7,1]}\n"
        );
        assert_eq!(
            enc(&Frame::Hello { proto: PROTO.into(), n_dim: 100, k: 10, n_classes: 100 }),
            "{\"t\":\"hello\",\"proto\":\"dfrd/1\",\"n_dim\":100,\"k\":10,\"n_classes\":100}\n"
        );
        assert_eq!(
            enc(&Frame::Error { seq: 3, code: "x".into(), msg: "a \"q\"".into() }),
            "{\"t\":\"error\",\"seq\":3,\"code\":\"x\",\"msg\":\"a \\\"q\\\"\"}\n"
        );
    }

    #[test]
    fn decode_rejects_bad_frames() {
        let code = |s: &str| match decode_frame(s.as_bytes()) {
            Err(FrameError::Protocol { code, .. }) => code,
            other => panic!("expected protocol error, got {other:?}"),
        };
        assert_eq!(code("{\"t\":\"query\",\"seq\":0,\"x\":[0,0]}\n"), "duplicate_index");
        assert_eq!(code("{\"t\":\"nope\"}\n"), "unknown_type");
        assert_eq!(code("{\"t\":\"query\",\"x\":[1]}\n"), "missing_field");
        assert_eq!(code("not json\n"), "malformed");
        assert_eq!(code("[1,2]\n"), "malformed");
        assert_eq!(code("{\"t\":\"query\",\"seq\":-1,\"x\":[1]}\n"), "bad_field");
        assert_eq!(code("{\"t\":\"bye\",\"extra\":1}\n"), "unknown_field");
        assert_eq!(
            decode_frame(b"{\"t\":\"query\",\"seq\":1"),
            Err(FrameError::Incomplete)
        );
        assert_eq!(decode_frame(b""), Err(FrameError::Incomplete));
    }

    #[test]
    fn decode_inverts_encode() {
        let frames = [
            Frame::Hello { proto: PROTO.into(), n_dim: 5, k: 2, n_classes: 3 },
            Frame::Query { seq: u64::MAX, x: vec![] },
            Frame::Answer { seq: 0, y: 2, soft: Some(vec![2, 0]) },
            Frame::Error { seq: 9, code: "c".into(), msg: "ünïcode\n".into() },
            Frame::Bye,
        ];
        for f in frames {
            assert_eq!(decode_frame(&encode_frame(&f)).unwrap(), f);
        }
    }
}
