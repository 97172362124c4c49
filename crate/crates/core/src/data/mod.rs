//! Canonical data model for flash-indexed multichannel EEG.
//!
//! A session holds every stimulus presentation ("flash") of one subject and
//! phase: the K x T post-stimulus signal segment, the (character, sequence,
//! stimulus) index triple, the target/non-target label when known, and the
//! derived channel-interaction features. Design assembly flattens signals
//! channel-major and z-scores each channel-time column with calibration
//! statistics.

mod container;

pub use container::{load_session, save_session, CONTAINER_VERSION};
pub(crate) use container::temp_sibling as temp_sibling_path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("structural error: {0}")]
    Structural(String),
    #[error("bad magic bytes, not a session container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated container payload")]
    Truncated,
    #[error("dimension inconsistency in container: {0}")]
    DimensionMismatch(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Correlations are pulled to this magnitude before the Fisher transform so
/// numerically collinear channels stay finite.
pub const FISHER_CLAMP: f64 = 1.0 - 1e-6;

/// Fisher z-transform of a correlation, 0.5 * ln((1+c)/(1-c)).
///
/// |c| is clamped to [`FISHER_CLAMP`] first; non-finite input is rejected.
pub fn fisher_z(c: f64) -> Result<f64, DataError> {
    if !c.is_finite() {
        return Err(DataError::InvalidInput(format!(
            "fisher_z needs a finite correlation, got {c}"
        )));
    }
    let c = c.clamp(-FISHER_CLAMP, FISHER_CLAMP);
    Ok(0.5 * ((1.0 + c) / (1.0 - c)).ln())
}

/// Stable lexicographic index of the ordered channel pair (k1 < k2),
/// 0-based, enumerating (0,1), (0,2), ..., (K-2, K-1).
pub fn pair_index(k1: usize, k2: usize, channels: usize) -> usize {
    debug_assert!(k1 < k2 && k2 < channels);
    k1 * channels - k1 * (k1 + 1) / 2 + (k2 - k1 - 1)
}

/// Inverse of [`pair_index`].
pub fn pair_from_index(idx: usize, channels: usize) -> (usize, usize) {
    let mut offset = 0;
    for k1 in 0..channels {
        let row = channels - k1 - 1;
        if idx < offset + row {
            return (k1, k1 + 1 + (idx - offset));
        }
        offset += row;
    }
    panic!("pair index {idx} out of range for {channels} channels");
}

/// Channel-interaction features of one flash.
#[derive(Debug, Clone)]
pub struct Interactions {
    /// Length q = K(K-1)/2, lexicographic pair order.
    pub values: DVector<f64>,
    /// True when some channel had no sample variance; those entries are 0.
    pub degenerate: bool,
}

/// Fisher-z correlations between all ordered channel pairs of a K x T segment.
pub fn compute_interactions(signal: &DMatrix<f64>) -> Result<Interactions, DataError> {
    let (k, t) = signal.shape();
    if k < 2 || t < 3 {
        return Err(DataError::InvalidInput(format!(
            "interaction features need K >= 2 and T >= 3, got K={k}, T={t}"
        )));
    }
    let mut centered = signal.clone();
    let mut ssq = vec![0.0f64; k];
    let mut flat = vec![false; k];
    for ch in 0..k {
        let mut row = centered.row_mut(ch);
        let mean = row.iter().sum::<f64>() / t as f64;
        let mut max_dev = 0.0f64;
        for v in row.iter_mut() {
            *v -= mean;
            max_dev = max_dev.max(v.abs());
        }
        ssq[ch] = row.iter().map(|v| v * v).sum();
        flat[ch] = max_dev < 1e-12 * (1.0 + mean.abs());
    }
    let q = k * (k - 1) / 2;
    let mut values = DVector::zeros(q);
    let mut degenerate = false;
    for k1 in 0..k {
        for k2 in (k1 + 1)..k {
            let idx = pair_index(k1, k2, k);
            if flat[k1] || flat[k2] {
                degenerate = true;
                continue; // entry stays 0
            }
            let dot = centered.row(k1).dot(&centered.row(k2));
            let c = dot / (ssq[k1] * ssq[k2]).sqrt();
            values[idx] = fisher_z(c)?;
        }
    }
    Ok(Interactions { values, degenerate })
}

/// Geometry and symbol set of the speller matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpellerLayout {
    rows: usize,
    cols: usize,
    chars: Vec<char>,
}

impl SpellerLayout {
    pub fn new(rows: usize, cols: usize, chars: &str) -> Result<Self, DataError> {
        let chars: Vec<char> = chars.chars().collect();
        if rows == 0 || cols == 0 || chars.len() != rows * cols {
            return Err(DataError::InvalidInput(format!(
                "layout needs rows*cols symbols, got {}x{} with {}",
                rows,
                cols,
                chars.len()
            )));
        }
        Ok(Self { rows, cols, chars })
    }

    /// The standard 6x6 speller: A-Z, digits 1-9, underscore for space.
    pub fn default_6x6() -> Self {
        Self::new(6, 6, "ABCDEFGHIJKLMNOPQRSTUVWXYZ123456789_").expect("static layout")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_symbols(&self) -> usize {
        self.chars.len()
    }

    /// Stimuli per sequence: one flash per row plus one per column.
    pub fn n_stimuli(&self) -> usize {
        self.rows + self.cols
    }

    pub fn symbols(&self) -> &[char] {
        &self.chars
    }

    /// 1-based (row, col) cell of a symbol.
    pub fn cell_of(&self, symbol: char) -> Option<(usize, usize)> {
        self.chars
            .iter()
            .position(|&c| c == symbol)
            .map(|i| (i / self.cols + 1, i % self.cols + 1))
    }

    /// Symbol at a 1-based (row, col) cell.
    pub fn symbol_at(&self, row: usize, col: usize) -> Option<char> {
        if row == 0 || col == 0 || row > self.rows || col > self.cols {
            return None;
        }
        Some(self.chars[(row - 1) * self.cols + (col - 1)])
    }

    /// Stimulus indices are 1..=rows for rows, rows+1..=rows+cols for columns.
    pub fn stimulus_for_row(&self, row: usize) -> u16 {
        row as u16
    }

    pub fn stimulus_for_col(&self, col: usize) -> u16 {
        (self.rows + col) as u16
    }

    pub fn is_row_stimulus(&self, j: u16) -> bool {
        (1..=self.rows as u16).contains(&j)
    }

    /// The (row stimulus, column stimulus) pair that flashes a symbol.
    pub fn target_stimuli(&self, symbol: char) -> Option<(u16, u16)> {
        let (row, col) = self.cell_of(symbol)?;
        Some((self.stimulus_for_row(row), self.stimulus_for_col(col)))
    }
}

/// One stimulus presentation: indices, label, signal, interaction features.
#[derive(Debug, Clone)]
pub struct FlashRecord {
    /// 1-based character position r within the spelled text.
    pub char_index: u16,
    /// 1-based sequence s within the character.
    pub sequence: u16,
    /// 1-based stimulus index j (rows first, then columns).
    pub stimulus: u16,
    /// Target label; `None` in unlabeled test-phase data.
    pub label: Option<bool>,
    /// K x T segment in microvolts.
    pub signal: DMatrix<f32>,
    /// Fisher-z channel interactions, length K(K-1)/2.
    pub interaction: DVector<f64>,
}

impl FlashRecord {
    pub fn new(
        char_index: u16,
        sequence: u16,
        stimulus: u16,
        label: Option<bool>,
        signal: DMatrix<f32>,
    ) -> Self {
        Self {
            char_index,
            sequence,
            stimulus,
            label,
            signal,
            interaction: DVector::zeros(0),
        }
    }

    pub fn signal_f64(&self) -> DMatrix<f64> {
        self.signal.map(|v| v as f64)
    }
}

/// All flashes of one subject and phase plus the recording geometry.
#[derive(Debug, Clone)]
pub struct SessionData {
    pub channels: usize,
    pub timepoints: usize,
    pub sample_rate: f64,
    pub display_ms: f64,
    pub pause_ms: f64,
    pub n_chars: usize,
    pub n_sequences: usize,
    pub n_stimuli: usize,
    pub layout: SpellerLayout,
    pub channel_names: Vec<String>,
    pub flashes: Vec<FlashRecord>,
    /// Flashes whose interaction vector had zero-variance channels.
    pub degenerate_interactions: usize,
}

impl SessionData {
    /// Build a session from raw flashes, computing interaction features and
    /// checking the flash-index invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        channels: usize,
        timepoints: usize,
        sample_rate: f64,
        display_ms: f64,
        pause_ms: f64,
        layout: SpellerLayout,
        channel_names: Vec<String>,
        mut flashes: Vec<FlashRecord>,
    ) -> Result<Self, DataError> {
        if channel_names.len() != channels {
            return Err(DataError::Structural(format!(
                "expected {channels} channel names, got {}",
                channel_names.len()
            )));
        }
        let mut degenerate = 0usize;
        for f in &mut flashes {
            if f.signal.nrows() != channels || f.signal.ncols() != timepoints {
                return Err(DataError::Structural(format!(
                    "flash (r={}, s={}, j={}) signal is {}x{}, session is {}x{}",
                    f.char_index,
                    f.sequence,
                    f.stimulus,
                    f.signal.nrows(),
                    f.signal.ncols(),
                    channels,
                    timepoints
                )));
            }
            if channels >= 2 && timepoints >= 3 {
                let inter = compute_interactions(&f.signal_f64())?;
                if inter.degenerate {
                    degenerate += 1;
                }
                f.interaction = inter.values;
            } else {
                f.interaction = DVector::zeros(0);
            }
        }
        let n_chars = flashes.iter().map(|f| f.char_index).max().unwrap_or(0) as usize;
        let n_sequences = flashes.iter().map(|f| f.sequence).max().unwrap_or(0) as usize;
        let n_stimuli = layout.n_stimuli();
        let session = Self {
            channels,
            timepoints,
            sample_rate,
            display_ms,
            pause_ms,
            n_chars,
            n_sequences,
            n_stimuli,
            layout,
            channel_names,
            flashes,
            degenerate_interactions: degenerate,
        };
        session.validate()?;
        Ok(session)
    }

    /// Number of flashes, R * S * J when valid.
    pub fn n_flashes(&self) -> usize {
        self.flashes.len()
    }

    /// Channel-time feature count p = K * T.
    pub fn p(&self) -> usize {
        self.channels * self.timepoints
    }

    /// Interaction feature count q = K(K-1)/2.
    pub fn q(&self) -> usize {
        self.channels * (self.channels - 1) / 2
    }

    pub fn is_labeled(&self) -> bool {
        self.flashes.iter().all(|f| f.label.is_some())
    }

    pub fn flash_duration_ms(&self) -> f64 {
        self.display_ms + self.pause_ms
    }

    /// Per-channel average waveform over every flash.
    pub fn grand_average(&self, channel: usize) -> DVector<f64> {
        let mut avg = DVector::zeros(self.timepoints);
        for f in &self.flashes {
            for t in 0..self.timepoints {
                avg[t] += f.signal[(channel, t)] as f64;
            }
        }
        avg / self.n_flashes() as f64
    }

    /// The spelled symbol of character r (1-based), from the labels.
    pub fn target_symbol(&self, char_index: u16) -> Option<char> {
        let mut row = None;
        let mut col = None;
        for f in self.flashes.iter().filter(|f| f.char_index == char_index) {
            if f.label == Some(true) {
                if self.layout.is_row_stimulus(f.stimulus) {
                    row = Some(f.stimulus as usize);
                } else {
                    col = Some(f.stimulus as usize - self.layout.rows());
                }
            }
        }
        self.layout.symbol_at(row?, col?)
    }

    /// The spelled text, from the labels.
    pub fn target_text(&self) -> Option<String> {
        (1..=self.n_chars as u16)
            .map(|r| self.target_symbol(r))
            .collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (r, s, j) = (self.n_chars, self.n_sequences, self.n_stimuli);
        if self.flashes.len() != r * s * j {
            return Err(DataError::Structural(format!(
                "expected R*S*J = {}*{}*{} = {} flashes, got {}",
                r,
                s,
                j,
                r * s * j,
                self.flashes.len()
            )));
        }
        // every (r, s) block holds each stimulus exactly once; labeled
        // sequences mark exactly one row and one column stimulus
        let mut seen = vec![0u8; j];
        for cr in 1..=r as u16 {
            for cs in 1..=s as u16 {
                seen.iter_mut().for_each(|v| *v = 0);
                let mut row_targets = 0usize;
                let mut col_targets = 0usize;
                let mut labeled = 0usize;
                let mut count = 0usize;
                for f in self
                    .flashes
                    .iter()
                    .filter(|f| f.char_index == cr && f.sequence == cs)
                {
                    count += 1;
                    if f.stimulus == 0 || f.stimulus as usize > j {
                        return Err(DataError::Structural(format!(
                            "stimulus index {} outside 1..={j}",
                            f.stimulus
                        )));
                    }
                    seen[f.stimulus as usize - 1] += 1;
                    if let Some(l) = f.label {
                        labeled += 1;
                        if l {
                            if self.layout.is_row_stimulus(f.stimulus) {
                                row_targets += 1;
                            } else {
                                col_targets += 1;
                            }
                        }
                    }
                }
                if count != j || seen.iter().any(|&c| c != 1) {
                    return Err(DataError::Structural(format!(
                        "character {cr} sequence {cs} does not flash each stimulus exactly once"
                    )));
                }
                if labeled == j && (row_targets != 1 || col_targets != 1) {
                    return Err(DataError::Structural(format!(
                        "character {cr} sequence {cs} has {row_targets} row and {col_targets} \
                         column targets; a labeled sequence needs exactly one of each"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Calibration statistics: z-scoring for channel-time columns and mean
/// centering for interaction columns.
///
/// Interaction features keep their Fisher-z scale (the transform already
/// stabilizes the variance) but are centered: the model has no intercept,
/// and uncentered interactions would be the only mean-shift direction in
/// the design, forcing the interaction block to absorb the target/non-target
/// imbalance at the cost of pure noise in the scores.
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub means: Vec<f64>,
    /// Sample standard deviation per channel-time column; 0 marks a
    /// degenerate column whose standardized values are forced to 0.
    pub scales: Vec<f64>,
    /// Calibration means of the interaction columns.
    pub interaction_means: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &DMatrix<f64>, z: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut means = Vec::with_capacity(x.ncols());
        let mut scales = Vec::with_capacity(x.ncols());
        for j in 0..x.ncols() {
            let col = x.column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
            let sd = var.sqrt();
            means.push(mean);
            scales.push(if sd > 1e-12 { sd } else { 0.0 });
        }
        let interaction_means = (0..z.ncols()).map(|j| z.column(j).sum() / n).collect();
        Self {
            means,
            scales,
            interaction_means,
        }
    }

    pub fn apply_in_place(&self, x: &mut DMatrix<f64>, z: &mut DMatrix<f64>) {
        for j in 0..x.ncols() {
            let (m, s) = (self.means[j], self.scales[j]);
            for v in x.column_mut(j).iter_mut() {
                *v = if s > 0.0 { (*v - m) / s } else { 0.0 };
            }
        }
        for j in 0..z.ncols() {
            let m = self.interaction_means[j];
            for v in z.column_mut(j).iter_mut() {
                *v -= m;
            }
        }
    }

    /// Inverse transform of one standardized channel-time value.
    pub fn destandardize(&self, col: usize, value: f64) -> f64 {
        value * self.scales[col] + self.means[col]
    }

    pub fn any_degenerate(&self) -> bool {
        self.scales.iter().any(|&s| s == 0.0)
    }
}

/// Assembled model inputs: standardized channel-time features, interaction
/// features, and labels. The 1/p and 1/q rescaling of the linear predictor is
/// applied by the sampler, not baked into these matrices.
#[derive(Debug, Clone)]
pub struct Design {
    /// n x p, channel-major flattening (all T of channel 1, then channel 2, ...).
    pub x: DMatrix<f64>,
    /// n x q Fisher-z interactions, centered with calibration means; the
    /// transform already stabilizes the variance so no rescaling applies.
    pub z: DMatrix<f64>,
    /// Labels in {0, 1}.
    pub y: Vec<f64>,
    pub channels: usize,
    pub timepoints: usize,
    pub standardizer: Standardizer,
}

impl Design {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.channels * self.timepoints
    }

    pub fn q(&self) -> usize {
        self.z.ncols()
    }
}

fn flatten_features(session: &SessionData) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = session.n_flashes();
    let (k, t, q) = (session.channels, session.timepoints, session.q());
    let mut x = DMatrix::zeros(n, k * t);
    let mut z = DMatrix::zeros(n, q);
    for (i, f) in session.flashes.iter().enumerate() {
        for ch in 0..k {
            for tt in 0..t {
                x[(i, ch * t + tt)] = f.signal[(ch, tt)] as f64;
            }
        }
        for col in 0..q {
            z[(i, col)] = f.interaction[col];
        }
    }
    (x, z)
}

/// Assemble the calibration design: flatten, fit the standardizer, apply it.
pub fn assemble_design(session: &SessionData) -> Result<Design, DataError> {
    if !session.is_labeled() {
        return Err(DataError::Structural(
            "design assembly needs a fully labeled session".into(),
        ));
    }
    let (mut x, mut z) = flatten_features(session);
    let standardizer = Standardizer::fit(&x, &z);
    standardizer.apply_in_place(&mut x, &mut z);
    let y = session
        .flashes
        .iter()
        .map(|f| if f.label == Some(true) { 1.0 } else { 0.0 })
        .collect();
    Ok(Design {
        x,
        z,
        y,
        channels: session.channels,
        timepoints: session.timepoints,
        standardizer,
    })
}

/// Assemble test-phase features reusing calibration statistics.
pub fn assemble_features(
    session: &SessionData,
    standardizer: &Standardizer,
) -> Result<(DMatrix<f64>, DMatrix<f64>), DataError> {
    if standardizer.means.len() != session.p() || standardizer.interaction_means.len() != session.q()
    {
        return Err(DataError::Structural(format!(
            "standardizer fitted on p={}, q={} but session has p={}, q={}",
            standardizer.means.len(),
            standardizer.interaction_means.len(),
            session.p(),
            session.q()
        )));
    }
    let (mut x, mut z) = flatten_features(session);
    standardizer.apply_in_place(&mut x, &mut z);
    Ok((x, z))
}

/// Wide-format CSV of interaction features, one row per flash.
pub fn export_interactions_csv<W: std::io::Write>(
    session: &SessionData,
    out: &mut W,
) -> Result<(), DataError> {
    write!(out, "r,s,j,y")?;
    let k = session.channels;
    for k1 in 0..k {
        for k2 in (k1 + 1)..k {
            write!(out, ",z_{}_{}", k1 + 1, k2 + 1)?;
        }
    }
    writeln!(out)?;
    for f in &session.flashes {
        let y = match f.label {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        write!(out, "{},{},{},{}", f.char_index, f.sequence, f.stimulus, y)?;
        for v in f.interaction.iter() {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
