//! Binary session container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "EEGS" | version u16
//! K u32 | T u32 | R u32 | S u32 | J u32 | n u32
//! sample_rate f64 | display_ms f64 | pause_ms f64
//! K x { name_len u16 | name utf-8 }
//! n x { r u16 | s u16 | j u16 | y i8 (-1 = unknown) | X as K*T f32 row-major }
//! ```
//!
//! Signals are stored channel-row-major (all T samples of channel 1, then
//! channel 2, ...). Interaction features are recomputed on load, so saving
//! and loading is bit-exact for every stored numeric payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::{DataError, FlashRecord, SessionData, SpellerLayout};

const MAGIC: [u8; 4] = *b"EEGS";
pub const CONTAINER_VERSION: u16 = 1;

fn w16<W: Write>(w: &mut W, v: u16) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn wf64<W: Write>(w: &mut W, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), DataError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DataError::Truncated
        } else {
            DataError::Io(e)
        }
    })
}

fn r16(r: &mut impl Read) -> Result<u16, DataError> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn r32(r: &mut impl Read) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn rf64(r: &mut impl Read) -> Result<f64, DataError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Serialize a session. The write goes to a temp file in the target
/// directory and is renamed into place, so failures leave no partial file.
pub fn save_session(session: &SessionData, path: &Path) -> Result<(), DataError> {
    if session.n_stimuli != session.layout.n_stimuli()
        || session.layout != SpellerLayout::default_6x6()
    {
        return Err(DataError::Structural(
            "the session container format fixes the standard 6x6 speller layout".into(),
        ));
    }
    let tmp = temp_sibling(path);
    let result = (|| -> Result<(), DataError> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&MAGIC)?;
        w16(&mut w, CONTAINER_VERSION)?;
        w32(&mut w, session.channels as u32)?;
        w32(&mut w, session.timepoints as u32)?;
        w32(&mut w, session.n_chars as u32)?;
        w32(&mut w, session.n_sequences as u32)?;
        w32(&mut w, session.n_stimuli as u32)?;
        w32(&mut w, session.n_flashes() as u32)?;
        wf64(&mut w, session.sample_rate)?;
        wf64(&mut w, session.display_ms)?;
        wf64(&mut w, session.pause_ms)?;
        for name in &session.channel_names {
            let bytes = name.as_bytes();
            w16(&mut w, bytes.len() as u16)?;
            w.write_all(bytes)?;
        }
        for f in &session.flashes {
            w16(&mut w, f.char_index)?;
            w16(&mut w, f.sequence)?;
            w16(&mut w, f.stimulus)?;
            let y: i8 = match f.label {
                Some(true) => 1,
                Some(false) => 0,
                None => -1,
            };
            w.write_all(&y.to_le_bytes())?;
            for ch in 0..session.channels {
                for t in 0..session.timepoints {
                    w.write_all(&f.signal[(ch, t)].to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    })();
    match result {
        Ok(()) => {
            std::fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

pub(crate) fn temp_sibling(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp-{}", std::process::id()));
    path.with_file_name(name)
}

/// Load a session container written by [`save_session`] or an external
/// converter following the documented layout.
pub fn load_session(path: &Path) -> Result<SessionData, DataError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = r16(&mut r)?;
    if version != CONTAINER_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let k = r32(&mut r)? as usize;
    let t = r32(&mut r)? as usize;
    let n_chars = r32(&mut r)? as usize;
    let n_seq = r32(&mut r)? as usize;
    let n_stim = r32(&mut r)? as usize;
    let n = r32(&mut r)? as usize;
    let sample_rate = rf64(&mut r)?;
    let display_ms = rf64(&mut r)?;
    let pause_ms = rf64(&mut r)?;
    let layout = SpellerLayout::default_6x6();
    if n_stim != layout.n_stimuli() {
        return Err(DataError::DimensionMismatch(format!(
            "container declares J={n_stim}, the 6x6 layout has {}",
            layout.n_stimuli()
        )));
    }
    if n != n_chars * n_seq * n_stim {
        return Err(DataError::DimensionMismatch(format!(
            "container declares n={n} but R*S*J = {}",
            n_chars * n_seq * n_stim
        )));
    }
    let mut channel_names = Vec::with_capacity(k);
    for _ in 0..k {
        let len = r16(&mut r)? as usize;
        let mut buf = vec![0u8; len];
        read_exact(&mut r, &mut buf)?;
        let name = String::from_utf8(buf)
            .map_err(|_| DataError::DimensionMismatch("channel name is not UTF-8".into()))?;
        channel_names.push(name);
    }
    let mut flashes = Vec::with_capacity(n);
    let mut sig_buf = vec![0u8; k * t * 4];
    for _ in 0..n {
        let cr = r16(&mut r)?;
        let cs = r16(&mut r)?;
        let cj = r16(&mut r)?;
        let mut yb = [0u8; 1];
        read_exact(&mut r, &mut yb)?;
        let label = match i8::from_le_bytes(yb) {
            -1 => None,
            0 => Some(false),
            1 => Some(true),
            other => {
                return Err(DataError::DimensionMismatch(format!(
                    "label byte {other} outside {{-1, 0, 1}}"
                )))
            }
        };
        read_exact(&mut r, &mut sig_buf)?;
        let mut signal = DMatrix::zeros(k, t);
        for ch in 0..k {
            for tt in 0..t {
                let off = (ch * t + tt) * 4;
                signal[(ch, tt)] =
                    f32::from_le_bytes([sig_buf[off], sig_buf[off + 1], sig_buf[off + 2], sig_buf[off + 3]]);
            }
        }
        flashes.push(FlashRecord::new(cr, cs, cj, label, signal));
    }
    // trailing garbage means the header undercounted
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(DataError::DimensionMismatch(
            "container has trailing bytes beyond the declared flash count".into(),
        ));
    }
    SessionData::new(
        k,
        t,
        sample_rate,
        display_ms,
        pause_ms,
        layout,
        channel_names,
        flashes,
    )
}
