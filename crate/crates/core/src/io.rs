//! File formats: RTTM annotations, text embedding archives, binary model
//! checkpoints. Numbers are always written with `.` as decimal separator.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{Annotation, EmbeddingSequence, Segment};
use crate::error::{Error, Result};
use crate::neural::{ModelDims, PairSeqModel};
use crate::pipeline::{join_corpus, Recording};
use crate::scoring::PldaModel;

// ---------------------------------------------------------------- RTTM

/// One `SPEAKER` line per region, onset and duration to the millisecond.
pub fn format_rttm(annotations: &[Annotation]) -> String {
    let mut out = String::new();
    for ann in annotations {
        for r in &ann.regions {
            writeln!(
                out,
                "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
                ann.recording_id,
                r.segment.start,
                r.segment.duration(),
                r.speaker
            )
            .expect("write to string");
        }
    }
    out
}

/// Parses RTTM text into one annotation per recording, in order of first
/// appearance. Blank lines and `;` comments are skipped.
pub fn parse_rttm(text: &str) -> Result<Vec<Annotation>> {
    let mut out: Vec<Annotation> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with(';') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let err = |msg: String| Error::Parse { line: line_no, msg };
        if fields.len() != 10 {
            return Err(err(format!("expected 10 fields, found {}", fields.len())));
        }
        if fields[0] != "SPEAKER" {
            return Err(err(format!("unsupported record type {:?}", fields[0])));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad {what} {s:?}")))
        };
        let onset = num(fields[3], "onset")?;
        let dur = num(fields[4], "duration")?;
        let segment = Segment::new(onset, onset + dur).map_err(|e| err(e.to_string()))?;
        let rec = fields[1];
        let ann = match out.iter_mut().position(|a| a.recording_id == rec) {
            Some(i) => &mut out[i],
            None => {
                out.push(Annotation::new(rec));
                out.last_mut().expect("just pushed")
            }
        };
        ann.push(segment, fields[7]);
    }
    Ok(out)
}

pub fn write_rttm(path: impl AsRef<Path>, annotations: &[Annotation]) -> Result<()> {
    std::fs::write(path, format_rttm(annotations))?;
    Ok(())
}

pub fn read_rttm(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    parse_rttm(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------- embeddings

/// `#EMB <recording_id> <dim> <n>` followed by `start end v1 .. vd` lines.
/// Floats use the shortest text that parses back to the same bits.
pub fn format_embeddings(seq: &EmbeddingSequence) -> String {
    let mut out = String::new();
    writeln!(out, "#EMB {} {} {}", seq.recording_id, seq.dim, seq.len()).expect("write to string");
    for (s, v) in seq.segments.iter().zip(&seq.vectors) {
        write!(out, "{:?} {:?}", s.start, s.end).expect("write to string");
        for x in v {
            write!(out, " {x:?}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

/// Parses one or more concatenated embedding blocks.
pub fn parse_embedding_archive(text: &str) -> Result<Vec<EmbeddingSequence>> {
    let mut out = Vec::new();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
    while let Some((idx, header)) = lines.next() {
        let line_no = idx + 1;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "#EMB" {
            return Err(Error::Parse {
                line: line_no,
                msg: "expected header `#EMB <recording_id> <dim> <n>`".into(),
            });
        }
        let parse_count = |s: &str, what: &str| {
            s.parse::<usize>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad {what} {s:?}"),
            })
        };
        let dim = parse_count(fields[2], "dimension")?;
        let n = parse_count(fields[3], "record count")?;
        let mut segments = Vec::with_capacity(n);
        let mut vectors = Vec::with_capacity(n);
        for k in 0..n {
            let Some((idx, line)) = lines.next_if(|(_, l)| !l.starts_with("#EMB")) else {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("header declares {n} records, found {k}"),
                });
            };
            let err = |msg: String| Error::Parse { line: idx + 1, msg };
            let values: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number {t:?}"))))
                .collect::<Result<_>>()?;
            if values.len() != dim + 2 {
                return Err(err(format!("expected {} values, found {}", dim + 2, values.len())));
            }
            segments.push(Segment::new(values[0], values[1]).map_err(|e| err(e.to_string()))?);
            vectors.push(values[2..].to_vec());
        }
        let seq = EmbeddingSequence::new(fields[1], dim, segments, vectors).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        out.push(seq);
    }
    Ok(out)
}

/// Parses a file holding exactly one embedding block.
pub fn parse_embeddings(text: &str) -> Result<EmbeddingSequence> {
    let mut all = parse_embedding_archive(text)?;
    if all.len() != 1 {
        return Err(Error::Format(format!("expected one embedding block, found {}", all.len())));
    }
    Ok(all.pop().expect("one block"))
}

pub fn write_embeddings(path: impl AsRef<Path>, seqs: &[EmbeddingSequence]) -> Result<()> {
    let text: String = seqs.iter().map(format_embeddings).collect();
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<EmbeddingSequence>> {
    parse_embedding_archive(&std::fs::read_to_string(path)?)
}

// -------------------------------------------------------------- corpora

/// File names inside a corpus directory.
pub const CORPUS_EMBEDDINGS: &str = "embeddings.emb";
pub const CORPUS_REFERENCE: &str = "reference.rttm";

/// Writes every recording's embeddings into one archive and every reference
/// into one RTTM file under `dir`, creating it if needed.
pub fn write_corpus(dir: impl AsRef<Path>, corpus: &[Recording]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let seqs: Vec<EmbeddingSequence> = corpus.iter().map(|r| r.seq.clone()).collect();
    let refs: Vec<Annotation> = corpus.iter().map(|r| r.reference.clone()).collect();
    write_embeddings(dir.join(CORPUS_EMBEDDINGS), &seqs)?;
    write_rttm(dir.join(CORPUS_REFERENCE), &refs)
}

/// Reads a corpus directory; every embedding sequence needs a reference.
pub fn read_corpus(dir: impl AsRef<Path>) -> Result<Vec<Recording>> {
    let dir = dir.as_ref();
    let seqs = read_embeddings(dir.join(CORPUS_EMBEDDINGS))?;
    let refs = read_rttm(dir.join(CORPUS_REFERENCE))?;
    join_corpus(seqs, refs)
}

// --------------------------------------------------------- checkpoints

const MAGIC: &[u8; 4] = b"SDMC";
pub const CHECKPOINT_VERSION: u8 = 1;
const KIND_PAIR_SEQ: u8 = 1;
const KIND_PLDA: u8 = 2;
const PREFIX: usize = 4 + 1 + 1 + 8;
const DIGEST: usize = 32;

#[derive(Clone, Debug)]
pub enum Model {
    PairSeq(PairSeqModel),
    Plda(PldaModel),
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    /// Training settings stored alongside the weights.
    pub config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(skip_serializing_if = "Option::is_none")]
    dims: Option<ModelDims>,
    #[serde(skip_serializing_if = "Option::is_none")]
    length_normalize: Option<bool>,
    tensors: Vec<TensorInfo>,
    config: Option<serde_json::Value>,
}

/// Layout: magic, version byte, kind byte, payload length (u64 LE), payload,
/// SHA-256 of the payload. The payload is a length-prefixed JSON header
/// followed by every tensor as little-endian f64 in header order.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let (kind, dims, length_normalize, tensors): (u8, _, _, Vec<(String, Vec<usize>, Vec<f64>)>) = match &ckpt.model {
        Model::PairSeq(m) => (
            KIND_PAIR_SEQ,
            Some(m.dims),
            None,
            m.tensors().into_iter().map(|(n, s, v)| (n, s, v.to_vec())).collect(),
        ),
        Model::Plda(m) => {
            let mat = |name: &str, a: &Array2<f64>| (name.to_string(), vec![a.nrows(), a.ncols()], a.iter().copied().collect());
            let vec1 = |name: &str, v: &[f64]| (name.to_string(), vec![v.len()], v.to_vec());
            (
                KIND_PLDA,
                None,
                Some(m.length_normalize),
                vec![
                    vec1("mean", &m.mean),
                    mat("whitening", &m.whitening),
                    vec1("norm_mean", &m.norm_mean),
                    mat("between", &m.between),
                    mat("within", &m.within),
                ],
            )
        }
    };
    let header = Header {
        dims,
        length_normalize,
        tensors: tensors
            .iter()
            .map(|(n, s, _)| TensorInfo {
                name: n.clone(),
                shape: s.clone(),
            })
            .collect(),
        config: ckpt.config.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut payload = Vec::new();
    payload.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    payload.extend_from_slice(&header_json);
    for (_, _, values) in &tensors {
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(PREFIX + payload.len() + DIGEST);
    out.extend_from_slice(MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.push(kind);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: bytes[4],
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < PREFIX + DIGEST {
        return Err(Error::Checksum("checkpoint is truncated".into()));
    }
    let kind = bytes[5];
    let len = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
    if bytes.len() != PREFIX + len + DIGEST {
        return Err(Error::Checksum(format!(
            "payload should be {len} bytes, file holds {}",
            bytes.len().saturating_sub(PREFIX + DIGEST)
        )));
    }
    let payload = &bytes[PREFIX..PREFIX + len];
    if Sha256::digest(payload).as_slice() != &bytes[PREFIX + len..] {
        return Err(Error::Checksum("payload digest does not match".into()));
    }

    let bad = |msg: &str| Error::Format(msg.to_string());
    if payload.len() < 4 {
        return Err(bad("payload too short"));
    }
    let hlen = u32::from_le_bytes(payload[..4].try_into().expect("4 bytes")) as usize;
    let header: Header = serde_json::from_slice(payload.get(4..4 + hlen).ok_or_else(|| bad("header overruns payload"))?)?;
    let mut data = payload[4 + hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if data.len() != expected || !(payload.len() - 4 - hlen).is_multiple_of(8) {
        return Err(bad("tensor data does not match the header"));
    }
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    for t in &header.tensors {
        let n = t.shape.iter().product();
        tensors.push((t.name.clone(), t.shape.clone(), data.by_ref().take(n).collect()));
    }

    let model = match kind {
        KIND_PAIR_SEQ => {
            let dims = header.dims.ok_or_else(|| bad("missing model dimensions"))?;
            let mut m = PairSeqModel::zeros(dims);
            let layout: Vec<(String, Vec<usize>)> = m.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
            if layout.len() != tensors.len() || layout.iter().zip(&tensors).any(|((n, s), t)| *n != t.0 || *s != t.1) {
                return Err(bad("tensor layout does not match the architecture"));
            }
            for (slot, (_, _, values)) in m.tensors_mut().into_iter().zip(tensors) {
                slot.copy_from_slice(&values);
            }
            Model::PairSeq(m)
        }
        KIND_PLDA => {
            let mut take = |name: &str, rank: usize| -> Result<(Vec<usize>, Vec<f64>)> {
                let pos = tensors.iter().position(|t| t.0 == name).ok_or_else(|| bad("missing PLDA tensor"))?;
                let (_, shape, values) = tensors.swap_remove(pos);
                if shape.len() != rank {
                    return Err(bad("PLDA tensor has the wrong rank"));
                }
                Ok((shape, values))
            };
            let mat = |(s, v): (Vec<usize>, Vec<f64>)| Array2::from_shape_vec((s[0], s[1]), v).map_err(|e| Error::Format(e.to_string()));
            let mean = take("mean", 1)?.1;
            let whitening = mat(take("whitening", 2)?)?;
            let norm_mean = take("norm_mean", 1)?.1;
            let between = mat(take("between", 2)?)?;
            let within = mat(take("within", 2)?)?;
            let ln = header.length_normalize.ok_or_else(|| bad("missing length_normalize flag"))?;
            Model::Plda(PldaModel::from_parts(mean, whitening, norm_mean, between, within, ln)?)
        }
        other => return Err(Error::Format(format!("unknown model kind {other}"))),
    };
    Ok(Checkpoint {
        model,
        config: header.config,
    })
}

pub fn save_model(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

pub fn load_pair_seq(path: impl AsRef<Path>) -> Result<PairSeqModel> {
    match load_model(path)?.model {
        Model::PairSeq(m) => Ok(m),
        Model::Plda(_) => Err(Error::Config("expected a Bi-LSTM checkpoint, found PLDA".into())),
    }
}

pub fn load_plda(path: impl AsRef<Path>) -> Result<PldaModel> {
    match load_model(path)?.model {
        Model::Plda(m) => Ok(m),
        Model::PairSeq(_) => Err(Error::Config("expected a PLDA checkpoint, found Bi-LSTM".into())),
    }
}
