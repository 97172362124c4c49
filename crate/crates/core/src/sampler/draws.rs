//! Thinned posterior draws and their binary container.
//!
//! File layout, little-endian:
//!
//! ```text
//! magic "RTGP" | version u16
//! D u32 | K u32 | T u32 | q u32 | L u32 | link u8 | flags u8 (bit 0: interactions)
//! grid T f64 | lambdas L f64 | psi T*L f64 row-major | variance_fraction f64
//! config_echo u32 len + utf-8
//! standardizer: means K*T f64 | scales K*T f64 | interaction_means q f64
//! D frames: beta K*T f32 channel-major | zeta q f32 | indicator bits
//!           (K*T beta bits then q zeta bits, LSB first, padded to bytes)
//! ```
//!
//! The calibration standardizer travels with the draws so a test session can
//! be scored from this file alone.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{LinkFunction, RtgpConfig, RtgpState, SamplerError};
use crate::data::Standardizer;
use crate::kernel::KlBasis;

const MAGIC: [u8; 4] = *b"RTGP";
const VERSION: u16 = 1;

/// Thinned draws of the thresholded coefficients and their indicators.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub channels: usize,
    pub timepoints: usize,
    pub pairs: usize,
    pub link: LinkFunction,
    pub use_interactions: bool,
    pub n_draws: usize,
    pub basis: KlBasis,
    pub config_echo: String,
    /// Calibration column statistics the chain was trained under.
    pub standardizer: Standardizer,
    beta: Vec<f32>,
    zeta: Vec<f32>,
    indicators: Vec<u8>,
    frame_bytes: usize,
}

impl PosteriorDraws {
    /// A draws container with no frames yet; [`PosteriorDraws::push_state`]
    /// appends the thresholded coefficients of a chain state.
    pub fn empty(
        channels: usize,
        timepoints: usize,
        pairs: usize,
        basis: KlBasis,
        config: &RtgpConfig,
        standardizer: Standardizer,
    ) -> Self {
        let frame_bits = channels * timepoints + pairs;
        Self {
            channels,
            timepoints,
            pairs,
            link: config.link,
            use_interactions: config.use_interactions,
            n_draws: 0,
            basis,
            config_echo: config.canonical_echo(),
            standardizer,
            beta: Vec::new(),
            zeta: Vec::new(),
            indicators: Vec::new(),
            frame_bytes: frame_bits.div_ceil(8),
        }
    }

    pub fn push_state(&mut self, state: &RtgpState) {
        let (k_ch, t_len) = (self.channels, self.timepoints);
        let mut bits = vec![0u8; self.frame_bytes];
        let mut bit = 0usize;
        for k in 0..k_ch {
            for t in 0..t_len {
                let active = state.field_active[k * t_len + t];
                self.beta
                    .push(if active { state.field[(k, t)] as f32 } else { 0.0 });
                if active {
                    bits[bit / 8] |= 1 << (bit % 8);
                }
                bit += 1;
            }
        }
        for j in 0..self.pairs {
            let active = state.eta_active[j];
            self.zeta
                .push(if active { state.eta[j] as f32 } else { 0.0 });
            if active {
                bits[bit / 8] |= 1 << (bit % 8);
            }
            bit += 1;
        }
        self.indicators.extend_from_slice(&bits);
        self.n_draws += 1;
    }

    pub fn beta(&self, draw: usize, k: usize, t: usize) -> f32 {
        self.beta[draw * self.channels * self.timepoints + k * self.timepoints + t]
    }

    pub fn zeta(&self, draw: usize, pair: usize) -> f32 {
        self.zeta[draw * self.pairs + pair]
    }

    fn indicator_bit(&self, draw: usize, bit: usize) -> bool {
        let byte = self.indicators[draw * self.frame_bytes + bit / 8];
        byte & (1 << (bit % 8)) != 0
    }

    pub fn beta_active(&self, draw: usize, k: usize, t: usize) -> bool {
        self.indicator_bit(draw, k * self.timepoints + t)
    }

    pub fn zeta_active(&self, draw: usize, pair: usize) -> bool {
        self.indicator_bit(draw, self.channels * self.timepoints + pair)
    }

    /// Per-coefficient inclusion probabilities: the mean of the indicators
    /// across draws, a K x T map for the field and a q-vector for the pairs.
    pub fn posterior_inclusion(&self) -> (DMatrix<f64>, DVector<f64>) {
        assert!(self.n_draws >= 1, "need at least one draw");
        let mut field = DMatrix::zeros(self.channels, self.timepoints);
        let mut pairs = DVector::zeros(self.pairs);
        for d in 0..self.n_draws {
            for k in 0..self.channels {
                for t in 0..self.timepoints {
                    if self.beta_active(d, k, t) {
                        field[(k, t)] += 1.0;
                    }
                }
            }
            for j in 0..self.pairs {
                if self.zeta_active(d, j) {
                    pairs[j] += 1.0;
                }
            }
        }
        field /= self.n_draws as f64;
        pairs /= self.n_draws as f64;
        (field, pairs)
    }

    pub fn posterior_mean_beta(&self) -> DMatrix<f64> {
        let mut mean = DMatrix::zeros(self.channels, self.timepoints);
        for d in 0..self.n_draws {
            for k in 0..self.channels {
                for t in 0..self.timepoints {
                    mean[(k, t)] += self.beta(d, k, t) as f64;
                }
            }
        }
        mean / self.n_draws as f64
    }

    pub fn posterior_mean_zeta(&self) -> DVector<f64> {
        let mut mean = DVector::zeros(self.pairs);
        for d in 0..self.n_draws {
            for j in 0..self.pairs {
                mean[j] += self.zeta(d, j) as f64;
            }
        }
        mean / self.n_draws as f64
    }

    pub fn beta_raw(&self) -> &[f32] {
        &self.beta
    }

    pub fn zeta_raw(&self) -> &[f32] {
        &self.zeta
    }

    pub fn indicator_raw(&self) -> &[u8] {
        &self.indicators
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), SamplerError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            SamplerError::Truncated
        } else {
            SamplerError::Io(e)
        }
    })
}

fn r16(r: &mut impl Read) -> Result<u16, SamplerError> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn r32(r: &mut impl Read) -> Result<u32, SamplerError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn rf64(r: &mut impl Read) -> Result<f64, SamplerError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Write a draws container (atomic: temp file then rename).
pub fn save_draws(draws: &PosteriorDraws, path: &Path) -> Result<(), SamplerError> {
    let tmp = crate::data::temp_sibling_path(path);
    let result = (|| -> Result<(), SamplerError> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(draws.n_draws as u32).to_le_bytes())?;
        w.write_all(&(draws.channels as u32).to_le_bytes())?;
        w.write_all(&(draws.timepoints as u32).to_le_bytes())?;
        w.write_all(&(draws.pairs as u32).to_le_bytes())?;
        w.write_all(&(draws.basis.rank as u32).to_le_bytes())?;
        let link: u8 = match draws.link {
            LinkFunction::Probit => 0,
            LinkFunction::Logit => 1,
        };
        w.write_all(&[link, u8::from(draws.use_interactions)])?;
        for &g in &draws.basis.grid {
            w.write_all(&g.to_le_bytes())?;
        }
        for l in 0..draws.basis.rank {
            w.write_all(&draws.basis.lambdas[l].to_le_bytes())?;
        }
        for t in 0..draws.basis.psi.nrows() {
            for l in 0..draws.basis.rank {
                w.write_all(&draws.basis.psi[(t, l)].to_le_bytes())?;
            }
        }
        w.write_all(&draws.basis.variance_fraction.to_le_bytes())?;
        let echo = draws.config_echo.as_bytes();
        w.write_all(&(echo.len() as u32).to_le_bytes())?;
        w.write_all(echo)?;
        for &m in &draws.standardizer.means {
            w.write_all(&m.to_le_bytes())?;
        }
        for &s in &draws.standardizer.scales {
            w.write_all(&s.to_le_bytes())?;
        }
        for &m in &draws.standardizer.interaction_means {
            w.write_all(&m.to_le_bytes())?;
        }
        for d in 0..draws.n_draws {
            let kt = draws.channels * draws.timepoints;
            for &b in &draws.beta[d * kt..(d + 1) * kt] {
                w.write_all(&b.to_le_bytes())?;
            }
            for &z in &draws.zeta[d * draws.pairs..(d + 1) * draws.pairs] {
                w.write_all(&z.to_le_bytes())?;
            }
            w.write_all(&draws.indicators[d * draws.frame_bytes..(d + 1) * draws.frame_bytes])?;
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

/// Read a draws container written by [`save_draws`].
pub fn load_draws(path: &Path) -> Result<PosteriorDraws, SamplerError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(SamplerError::BadMagic);
    }
    let version = r16(&mut r)?;
    if version != VERSION {
        return Err(SamplerError::UnsupportedVersion(version));
    }
    let n_draws = r32(&mut r)? as usize;
    let channels = r32(&mut r)? as usize;
    let timepoints = r32(&mut r)? as usize;
    let pairs = r32(&mut r)? as usize;
    let rank = r32(&mut r)? as usize;
    let mut lf = [0u8; 2];
    read_exact(&mut r, &mut lf)?;
    let link = match lf[0] {
        0 => LinkFunction::Probit,
        1 => LinkFunction::Logit,
        other => {
            return Err(SamplerError::Structural(format!(
                "unknown link code {other}"
            )))
        }
    };
    let use_interactions = lf[1] != 0;
    let mut grid = vec![0.0; timepoints];
    for g in grid.iter_mut() {
        *g = rf64(&mut r)?;
    }
    let mut lambdas = DVector::zeros(rank);
    for l in 0..rank {
        lambdas[l] = rf64(&mut r)?;
    }
    let mut psi = DMatrix::zeros(timepoints, rank);
    for t in 0..timepoints {
        for l in 0..rank {
            psi[(t, l)] = rf64(&mut r)?;
        }
    }
    let variance_fraction = rf64(&mut r)?;
    let echo_len = r32(&mut r)? as usize;
    let mut echo = vec![0u8; echo_len];
    read_exact(&mut r, &mut echo)?;
    let config_echo = String::from_utf8(echo)
        .map_err(|_| SamplerError::Structural("config echo is not UTF-8".into()))?;
    let kt = channels * timepoints;
    let mut means = vec![0.0f64; kt];
    for m in means.iter_mut() {
        *m = rf64(&mut r)?;
    }
    let mut scales = vec![0.0f64; kt];
    for s in scales.iter_mut() {
        *s = rf64(&mut r)?;
    }
    let mut interaction_means = vec![0.0f64; pairs];
    for m in interaction_means.iter_mut() {
        *m = rf64(&mut r)?;
    }
    let frame_bytes = (kt + pairs).div_ceil(8);
    let mut beta = vec![0.0f32; n_draws * kt];
    let mut zeta = vec![0.0f32; n_draws * pairs];
    let mut indicators = vec![0u8; n_draws * frame_bytes];
    let mut f32buf = [0u8; 4];
    for d in 0..n_draws {
        for i in 0..kt {
            read_exact(&mut r, &mut f32buf)?;
            beta[d * kt + i] = f32::from_le_bytes(f32buf);
        }
        for j in 0..pairs {
            read_exact(&mut r, &mut f32buf)?;
            zeta[d * pairs + j] = f32::from_le_bytes(f32buf);
        }
        read_exact(
            &mut r,
            &mut indicators[d * frame_bytes..(d + 1) * frame_bytes],
        )?;
    }
    Ok(PosteriorDraws {
        channels,
        timepoints,
        pairs,
        link,
        use_interactions,
        n_draws,
        basis: KlBasis {
            grid,
            rank,
            lambdas,
            psi,
            variance_fraction,
        },
        config_echo,
        standardizer: Standardizer {
            means,
            scales,
            interaction_means,
        },
        beta,
        zeta,
        indicators,
        frame_bytes,
    })
}
