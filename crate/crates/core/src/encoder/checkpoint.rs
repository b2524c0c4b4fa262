//! Encoder checkpoint files.
//!
//! A checkpoint is a UTF-8 header of `key=value` lines, a blank line, and
//! the embedding matrix as little-endian `f64` values in row-major order:
//!
//! ```text
//! #msret-encoder v1
//! dim=32
//! vocab_size=1843
//! vocab=3f0c9a1e5b7d2c44
//! scheme=whitespace_lower
//! provenance=variant=lms stage=stage2 seed=7
//!
//! <vocab_size × dim × 8 bytes>
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::EncoderParams;
use crate::error::{Error, Result};
use crate::tokenize::{TokenizerScheme, Vocabulary};

const MAGIC: &str = "#msret-encoder v1";

pub fn write_checkpoint<W: Write>(params: &EncoderParams, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "dim={}", params.dim)?;
    writeln!(w, "vocab_size={}", params.vocab_size)?;
    writeln!(w, "vocab={}", params.vocab_fingerprint)?;
    writeln!(w, "scheme={}", params.scheme)?;
    for p in &params.provenance {
        writeln!(w, "provenance={}", p.replace('\n', " "))?;
    }
    writeln!(w)?;
    for x in &params.embeddings {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(params, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint and checks it against `vocab`: the fingerprint and
/// scheme must match the vocabulary the encoder was trained with.
pub fn read_checkpoint<R: BufRead>(mut r: R, source: &str, vocab: &Vocabulary) -> Result<EncoderParams> {
    let fmt = |m: String| Error::Format(format!("{source}: {m}"));
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String> {
        line.clear();
        r.read_line(&mut line).map_err(|e| Error::io(source, e))?;
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut r)? != MAGIC {
        return Err(fmt("not an msret v1 encoder checkpoint".into()));
    }
    let (mut dim, mut vocab_size, mut fingerprint, mut scheme) = (None, None, None, None);
    let mut provenance = Vec::new();
    loop {
        let l = next_line(&mut r)?;
        if l.is_empty() {
            break;
        }
        let Some((k, v)) = l.split_once('=') else {
            return Err(fmt(format!("malformed header line `{l}`")));
        };
        match k {
            "dim" => dim = v.parse::<usize>().ok(),
            "vocab_size" => vocab_size = v.parse::<usize>().ok(),
            "vocab" => fingerprint = Some(v.to_string()),
            "scheme" => scheme = Some(v.parse::<TokenizerScheme>()?),
            "provenance" => provenance.push(v.to_string()),
            _ => return Err(fmt(format!("unknown header key `{k}`"))),
        }
    }
    let (Some(dim), Some(vocab_size), Some(fingerprint), Some(scheme)) = (dim, vocab_size, fingerprint, scheme) else {
        return Err(fmt("incomplete header".into()));
    };
    let expected = vocab.fingerprint();
    if fingerprint != expected {
        return Err(Error::FingerprintMismatch { expected, found: fingerprint });
    }
    if scheme != vocab.scheme() {
        return Err(Error::SchemeMismatch {
            expected: vocab.scheme().to_string(),
            found: scheme.to_string(),
        });
    }
    if vocab_size != vocab.len() {
        return Err(fmt(format!("vocab_size {vocab_size} but vocabulary has {}", vocab.len())));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(source, e))?;
    if bytes.len() != vocab_size * dim * 8 {
        return Err(fmt(format!(
            "expected {} bytes of weights, found {}",
            vocab_size * dim * 8,
            bytes.len()
        )));
    }
    let embeddings = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut params = EncoderParams::from_matrix(embeddings, dim, scheme, fingerprint)?;
    params.provenance = provenance;
    Ok(params)
}

pub fn load_checkpoint(path: &Path, vocab: &Vocabulary) -> Result<EncoderParams> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file), &path.display().to_string(), vocab)
}
