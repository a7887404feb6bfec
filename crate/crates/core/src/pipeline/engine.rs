use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::serialize::{tensor_from_bytes, tensor_to_bytes};
use crate::numerics::Tensor;
use crate::pipeline::report::TTBCReport;
use crate::pipeline::session::StreamSession;
use crate::pipeline::topology::Topology;
use crate::synthdata::PseudoVAE;

/// Magic word of a chunk message on the wire ("CSCK").
pub const WIRE_MAGIC: u32 = 0x4B43_5343;

/// How latents travel from the score stage to the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    #[default]
    InProcess,
    /// Length-prefixed messages over a loopback TCP connection.
    Tcp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamOptions {
    pub queue_depth: usize,
    pub transport: Transport,
}

impl Default for StreamOptions {
    fn default() -> Self {
        StreamOptions {
            queue_depth: 2,
            transport: Transport::InProcess,
        }
    }
}

/// One latent chunk in flight between stages.
#[derive(Clone, Debug, PartialEq)]
pub struct WireMessage {
    pub chunk: u32,
    pub step: u32,
    pub latents: Tensor,
}

/// `u32 length | u32 magic | u32 chunk | u32 step | tensor bytes`, little endian;
/// the length counts everything after itself.
pub fn write_message(w: &mut impl Write, m: &WireMessage) -> Result<()> {
    let payload = tensor_to_bytes(&m.latents);
    let len = u32::try_from(12 + payload.len()).map_err(|_| Error::Format("message too large".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&WIRE_MAGIC.to_le_bytes())?;
    w.write_all(&m.chunk.to_le_bytes())?;
    w.write_all(&m.step.to_le_bytes())?;
    w.write_all(&payload)?;
    Ok(())
}

/// Next message, or `None` at a clean end of stream.
pub fn read_message(r: &mut impl Read) -> Result<Option<WireMessage>> {
    let mut b4 = [0u8; 4];
    match r.read_exact(&mut b4) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(b4) as usize;
    if len < 12 {
        return Err(Error::Format(format!("message length {len}")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    let word = |i: usize| u32::from_le_bytes(body[i..i + 4].try_into().expect("4 bytes"));
    if word(0) != WIRE_MAGIC {
        return Err(Error::Format(format!("bad message magic {:08x}", word(0))));
    }
    Ok(Some(WireMessage {
        chunk: word(4),
        step: word(8),
        latents: tensor_from_bytes(&body[12..])?,
    }))
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Sleep until `ms` milliseconds after `start`.
fn pad_to(start: Instant, ms: f64) {
    let target = Duration::from_secs_f64(ms.max(0.0) / 1e3);
    if let Some(rest) = target.checked_sub(start.elapsed()) {
        thread::sleep(rest);
    }
}

struct Scored {
    chunk: usize,
    latents: Tensor,
    ready_ms: f64,
    score_ms: f64,
}

enum Event {
    /// Score-stage timing, sent separately when latents go over TCP.
    Scored {
        chunk: usize,
        ready_ms: f64,
        score_ms: f64,
    },
    Decoded {
        chunk: usize,
        frames: Tensor,
        ready_ms: f64,
        done_ms: f64,
        score_ms: f64,
        decode_ms: f64,
    },
    Failed(String),
}

fn score_one(session: &mut StreamSession, topo: &Topology, origin: Instant) -> Result<Scored> {
    let t0 = Instant::now();
    let (chunk, latents) = session.score_next()?;
    pad_to(t0, topo.score_ms());
    Ok(Scored {
        chunk,
        latents,
        ready_ms: ms_since(origin),
        score_ms: ms_since(t0),
    })
}

/// Transfer (serialization round trip, padded) then decode.
fn decode_one(s: Scored, topo: &Topology, vae: &PseudoVAE, origin: Instant, received: Option<Instant>) -> Result<Event> {
    let t0 = received.unwrap_or_else(Instant::now);
    let latents = if received.is_some() {
        s.latents
    } else {
        tensor_from_bytes(&tensor_to_bytes(&s.latents))?
    };
    pad_to(t0, topo.cost.transfer_ms);
    let frames = vae.decode(&latents)?;
    Ok(Event::Decoded {
        chunk: s.chunk,
        frames,
        ready_ms: s.ready_ms,
        done_ms: ms_since(origin),
        score_ms: s.score_ms,
        decode_ms: ms_since(t0),
    })
}

/// Stream `n_chunks` chunks through `topology`, passing decoded frames to
/// `sink` in order. A failing stage ends the stream early; the partial report
/// carries the cause in `aborted`.
pub fn run_stream(
    topology: &Topology,
    session: &mut StreamSession,
    vae: &PseudoVAE,
    n_chunks: usize,
    opts: &StreamOptions,
    sink: &mut dyn FnMut(usize, &Tensor) -> Result<()>,
) -> Result<TTBCReport> {
    topology.validate()?;
    if n_chunks < 2 {
        return Err(Error::Configuration(format!("need at least 2 chunks, got {n_chunks}")));
    }
    if opts.queue_depth == 0 {
        return Err(Error::Configuration("queue depth must be positive".into()));
    }
    if session.schedule().nfe() != topology.cost.steps {
        return Err(Error::Configuration(format!(
            "cost model has {} steps, student schedule {}",
            topology.cost.steps,
            session.schedule().nfe()
        )));
    }
    let mut vae = vae.clone();
    vae.simulated_decode_cost_ms = topology.cost.decode_ms;
    let vae = &vae;
    let first = session.next_chunk();
    let origin = Instant::now();
    let (ev_tx, ev_rx) = mpsc::channel::<Event>();
    let mut stall_ms = 0.0;

    let mut ready = Vec::with_capacity(n_chunks);
    let mut done = Vec::with_capacity(n_chunks);
    let mut emitted = Vec::with_capacity(n_chunks);
    let mut score_t = Vec::with_capacity(n_chunks);
    let mut decode_t = Vec::with_capacity(n_chunks);
    let mut aborted = None;
    let mut fatal = None;

    let sess = &mut *session;
    thread::scope(|sc| -> Result<()> {
        let stall = if !topology.case.disaggregated() {
            let tx = ev_tx.clone();
            sc.spawn(move || {
                for _ in 0..n_chunks {
                    let ev = score_one(sess, topology, origin).and_then(|s| decode_one(s, topology, vae, origin, None));
                    let failed = ev.is_err();
                    let ev = ev.unwrap_or_else(|e| Event::Failed(e.to_string()));
                    if tx.send(ev).is_err() || failed {
                        return 0.0;
                    }
                }
                0.0
            })
        } else {
            match opts.transport {
                Transport::InProcess => {
                    let (q_tx, q_rx) = mpsc::sync_channel::<Scored>(opts.queue_depth);
                    let tx = ev_tx.clone();
                    sc.spawn(move || {
                        for s in q_rx {
                            let ev = decode_one(s, topology, vae, origin, None).unwrap_or_else(|e| Event::Failed(e.to_string()));
                            let failed = matches!(ev, Event::Failed(_));
                            if tx.send(ev).is_err() || failed {
                                return;
                            }
                        }
                    });
                    let tx = ev_tx.clone();
                    sc.spawn(move || {
                        let mut stalled = 0.0;
                        for _ in 0..n_chunks {
                            match score_one(sess, topology, origin) {
                                Ok(s) => {
                                    let t = Instant::now();
                                    if q_tx.send(s).is_err() {
                                        break;
                                    }
                                    stalled += ms_since(t);
                                }
                                Err(e) => {
                                    let _ = tx.send(Event::Failed(e.to_string()));
                                    break;
                                }
                            }
                        }
                        stalled
                    })
                }
                Transport::Tcp => {
                    let listener = TcpListener::bind("127.0.0.1:0")?;
                    let addr = listener.local_addr()?;
                    let tx = ev_tx.clone();
                    sc.spawn(move || {
                        let run = || -> Result<()> {
                            let (conn, _) = listener.accept()?;
                            conn.set_nodelay(true)?;
                            let mut r = BufReader::new(conn);
                            while let Some(m) = read_message(&mut r)? {
                                let got = Instant::now();
                                // score timings arrive as separate events
                                let s = Scored {
                                    chunk: m.chunk as usize,
                                    latents: m.latents,
                                    ready_ms: f64::NAN,
                                    score_ms: f64::NAN,
                                };
                                if tx.send(decode_one(s, topology, vae, origin, Some(got))?).is_err() {
                                    break;
                                }
                            }
                            Ok(())
                        };
                        if let Err(e) = run() {
                            let _ = tx.send(Event::Failed(e.to_string()));
                        }
                    });
                    let tx = ev_tx.clone();
                    sc.spawn(move || {
                        let mut run = || -> Result<()> {
                            let conn = TcpStream::connect(addr)?;
                            conn.set_nodelay(true)?;
                            let mut w = BufWriter::new(conn);
                            let last_step = topology.cost.steps as u32 - 1;
                            for _ in 0..n_chunks {
                                let s = score_one(sess, topology, origin)?;
                                write_message(
                                    &mut w,
                                    &WireMessage {
                                        chunk: s.chunk as u32,
                                        step: last_step,
                                        latents: s.latents,
                                    },
                                )?;
                                w.flush()?;
                                let _ = tx.send(Event::Scored {
                                    chunk: s.chunk,
                                    ready_ms: s.ready_ms,
                                    score_ms: s.score_ms,
                                });
                            }
                            Ok(())
                        };
                        if let Err(e) = run() {
                            let _ = tx.send(Event::Failed(e.to_string()));
                        }
                        0.0
                    })
                }
            }
        };
        drop(ev_tx);

        // Collector: sole writer of emission timestamps.
        let mut side = std::collections::BTreeMap::new();
        let mut expect = first;
        while emitted.len() < n_chunks {
            let Ok(ev) = ev_rx.recv() else { break };
            match ev {
                Event::Failed(msg) => {
                    aborted = Some(msg);
                    break;
                }
                Event::Scored {
                    chunk,
                    ready_ms,
                    score_ms,
                } => {
                    side.insert(chunk, (ready_ms, score_ms));
                }
                Event::Decoded {
                    chunk,
                    frames,
                    ready_ms,
                    done_ms,
                    score_ms,
                    decode_ms,
                } => {
                    let now = ms_since(origin);
                    if chunk != expect {
                        fatal = Some(Error::Invariant(format!("chunk {chunk} emitted, expected {expect}")));
                        break;
                    }
                    expect += 1;
                    let (r, s) = side.remove(&chunk).unwrap_or((ready_ms, score_ms));
                    ready.push(r);
                    score_t.push(s);
                    done.push(done_ms);
                    decode_t.push(decode_ms);
                    emitted.push(now);
                    if let Err(e) = sink(chunk, &frames) {
                        aborted = Some(format!("sink: {e}"));
                        break;
                    }
                }
            }
        }
        drop(ev_rx);
        stall_ms = stall.join().map_err(|_| Error::Invariant("score stage panicked".into()))?;
        Ok(())
    })?;
    if let Some(e) = fatal {
        return Err(e);
    }
    let mut report = TTBCReport::from_timestamps(topology.case, ready, done, emitted, score_t, decode_t);
    report.stall_ms = stall_ms;
    report.cache_stats = Some(session.cache_stats());
    report.aborted = aborted;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_round_trip() {
        let m = WireMessage {
            chunk: 7,
            step: 1,
            latents: crate::schedule::gaussian(&[3, 2, 2], 1),
        };
        let mut buf = Vec::new();
        write_message(&mut buf, &m).unwrap();
        write_message(&mut buf, &m).unwrap();
        let mut r = &buf[..];
        assert_eq!(read_message(&mut r).unwrap().unwrap(), m);
        assert_eq!(read_message(&mut r).unwrap().unwrap(), m);
        assert!(read_message(&mut r).unwrap().is_none());
        let mut bad = buf.clone();
        bad[4] ^= 1;
        assert!(read_message(&mut &bad[..]).is_err());
    }
}
