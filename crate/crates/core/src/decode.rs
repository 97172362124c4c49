//! Stimulus scoring, character-level decoding, accuracy curves, throughput,
//! and support-recovery metrics.
//!
//! Decoding accumulates per-flash classification scores over sequences and
//! picks the row/column pair with the highest cumulative score; ties break
//! to the lowest stimulus index so results are reproducible.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::data::{assemble_features, SessionData, SpellerLayout, Standardizer};
use crate::sampler::PosteriorDraws;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("structural error: {0}")]
    Structural(String),
    #[error("unknown support rule '{0}' (expected median-model or mean-beta)")]
    UnknownRule(String),
}

/// One scored flash.
#[derive(Debug, Clone, Copy)]
pub struct FlashScore {
    pub char_index: u16,
    pub sequence: u16,
    pub stimulus: u16,
    /// Classification score in [0, 1].
    pub score: f64,
}

/// Per-flash scores of one session, in session flash order.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    pub n_chars: usize,
    pub n_sequences: usize,
    pub n_stimuli: usize,
    pub entries: Vec<FlashScore>,
}

impl ScoreTable {
    pub fn new(
        n_chars: usize,
        n_sequences: usize,
        n_stimuli: usize,
        entries: Vec<FlashScore>,
    ) -> Result<Self, DecodeError> {
        if entries.len() != n_chars * n_sequences * n_stimuli {
            return Err(DecodeError::Structural(format!(
                "expected {} scores, got {}",
                n_chars * n_sequences * n_stimuli,
                entries.len()
            )));
        }
        if entries.iter().any(|e| !e.score.is_finite()) {
            return Err(DecodeError::Structural("non-finite score".into()));
        }
        Ok(Self {
            n_chars,
            n_sequences,
            n_stimuli,
            entries,
        })
    }
}

/// Posterior-predictive target probability of every flash: the mean over
/// draws of the link-inverse linear predictor. Features are standardized
/// with the calibration statistics before scoring.
pub fn score_flashes(
    draws: &PosteriorDraws,
    session: &SessionData,
    standardizer: &Standardizer,
) -> Result<ScoreTable, DecodeError> {
    if draws.channels != session.channels || draws.timepoints != session.timepoints {
        return Err(DecodeError::Structural(format!(
            "draws are {}x{}, session is {}x{}",
            draws.channels, draws.timepoints, session.channels, session.timepoints
        )));
    }
    if draws.pairs != session.q() {
        return Err(DecodeError::Structural(format!(
            "draws hold {} interaction effects, session has q={}",
            draws.pairs,
            session.q()
        )));
    }
    if draws.n_draws == 0 {
        return Err(DecodeError::Structural("no posterior draws".into()));
    }
    let (x, z) = assemble_features(session, standardizer)
        .map_err(|e| DecodeError::Structural(e.to_string()))?;
    let n = x.nrows();
    let p = x.ncols();
    let q = z.ncols();
    let d_count = draws.n_draws;
    // coefficient matrices with the 1/p, 1/q rescaling folded in
    let mut beta = DMatrix::<f64>::zeros(p, d_count);
    for d in 0..d_count {
        for k in 0..draws.channels {
            for t in 0..draws.timepoints {
                beta[(k * draws.timepoints + t, d)] =
                    draws.beta(d, k, t) as f64 / p as f64;
            }
        }
    }
    let mut mu = &x * &beta;
    if q > 0 {
        let mut zeta = DMatrix::<f64>::zeros(q, d_count);
        for d in 0..d_count {
            for j in 0..q {
                zeta[(j, d)] = draws.zeta(d, j) as f64 / q as f64;
            }
        }
        mu += &z * &zeta;
    }
    let mut entries = Vec::with_capacity(n);
    for (i, flash) in session.flashes.iter().enumerate() {
        let mut acc = 0.0;
        for d in 0..d_count {
            acc += draws.link.inverse(mu[(i, d)]);
        }
        entries.push(FlashScore {
            char_index: flash.char_index,
            sequence: flash.sequence,
            stimulus: flash.stimulus,
            score: acc / d_count as f64,
        });
    }
    ScoreTable::new(
        session.n_chars,
        session.n_sequences,
        session.n_stimuli,
        entries,
    )
}

/// Decoded cell for one character at one sequence budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodedChar {
    /// 1-based row.
    pub row: usize,
    /// 1-based column.
    pub col: usize,
    pub symbol: char,
}

/// Sum scores over the first `s_budget` sequences separately for row and
/// column stimuli and take the argmax of each; ties go to the lowest
/// stimulus index.
pub fn decode_character(
    table: &ScoreTable,
    char_index: u16,
    s_budget: usize,
    layout: &SpellerLayout,
) -> Result<DecodedChar, DecodeError> {
    if s_budget == 0 || s_budget > table.n_sequences {
        return Err(DecodeError::InvalidInput(format!(
            "sequence budget {s_budget} outside 1..={}",
            table.n_sequences
        )));
    }
    let rows = layout.rows();
    let cols = layout.cols();
    if rows + cols != table.n_stimuli {
        return Err(DecodeError::Structural(format!(
            "layout has {} stimuli, table has {}",
            rows + cols,
            table.n_stimuli
        )));
    }
    let mut row_sum = vec![0.0f64; rows];
    let mut col_sum = vec![0.0f64; cols];
    let mut count = 0usize;
    for e in table
        .entries
        .iter()
        .filter(|e| e.char_index == char_index && (e.sequence as usize) <= s_budget)
    {
        let j = e.stimulus as usize;
        if j >= 1 && j <= rows {
            row_sum[j - 1] += e.score;
        } else if j > rows && j <= rows + cols {
            col_sum[j - rows - 1] += e.score;
        } else {
            return Err(DecodeError::Structural(format!(
                "stimulus {j} outside 1..={}",
                rows + cols
            )));
        }
        count += 1;
    }
    if count != s_budget * table.n_stimuli {
        return Err(DecodeError::Structural(format!(
            "character {char_index} has {count} flashes in the first {s_budget} sequences, \
             expected {}",
            s_budget * table.n_stimuli
        )));
    }
    let argmax_lowest = |sums: &[f64]| -> usize {
        let mut best = 0usize;
        for (i, &v) in sums.iter().enumerate() {
            if v > sums[best] {
                best = i;
            }
        }
        best + 1
    };
    let row = argmax_lowest(&row_sum);
    let col = argmax_lowest(&col_sum);
    let symbol = layout
        .symbol_at(row, col)
        .ok_or_else(|| DecodeError::Structural("decoded cell outside layout".into()))?;
    Ok(DecodedChar { row, col, symbol })
}

/// Fraction of correctly decoded characters at each sequence budget 1..=S.
pub fn accuracy_curve(
    table: &ScoreTable,
    truth: &[char],
    layout: &SpellerLayout,
) -> Result<Vec<f64>, DecodeError> {
    if truth.len() != table.n_chars {
        return Err(DecodeError::InvalidInput(format!(
            "truth has {} characters, table has {}",
            truth.len(),
            table.n_chars
        )));
    }
    let mut curve = Vec::with_capacity(table.n_sequences);
    for budget in 1..=table.n_sequences {
        let mut correct = 0usize;
        for (r, &target) in truth.iter().enumerate() {
            let decoded = decode_character(table, (r + 1) as u16, budget, layout)?;
            if decoded.symbol == target {
                correct += 1;
            }
        }
        curve.push(correct as f64 / table.n_chars as f64);
    }
    Ok(curve)
}

/// In-session flash timing, the denominator of the throughput metric.
#[derive(Debug, Clone, Copy)]
pub struct SelectionTiming {
    pub stimuli_per_sequence: usize,
    pub display_ms: f64,
    pub pause_ms: f64,
}

impl From<&SessionData> for SelectionTiming {
    fn from(s: &SessionData) -> Self {
        Self {
            stimuli_per_sequence: s.n_stimuli,
            display_ms: s.display_ms,
            pause_ms: s.pause_ms,
        }
    }
}

impl SelectionTiming {
    /// Selection time in seconds for a sequence budget.
    pub fn selection_seconds(&self, s_budget: usize) -> f64 {
        s_budget as f64 * self.stimuli_per_sequence as f64 * (self.display_ms + self.pause_ms)
            / 1000.0
    }
}

/// Throughput in bits per second: max(0, 2P - 1) * log2(N - 1) / c with c
/// the selection time. Chance-level accuracy or worse yields zero.
pub fn bci_utility(
    accuracy: f64,
    s_budget: usize,
    timing: &SelectionTiming,
    n_symbols: usize,
) -> Result<f64, DecodeError> {
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(DecodeError::InvalidInput(format!(
            "accuracy {accuracy} outside [0, 1]"
        )));
    }
    let c = timing.selection_seconds(s_budget);
    if !(c > 0.0) {
        return Err(DecodeError::InvalidInput(format!(
            "selection time {c} must be positive"
        )));
    }
    if n_symbols < 2 {
        return Err(DecodeError::InvalidInput("need at least 2 symbols".into()));
    }
    Ok((2.0 * accuracy - 1.0).max(0.0) * ((n_symbols - 1) as f64).log2() / c)
}

/// Utility at every sequence budget of an accuracy curve.
pub fn utility_curve(
    accuracy: &[f64],
    timing: &SelectionTiming,
    n_symbols: usize,
) -> Result<Vec<f64>, DecodeError> {
    accuracy
        .iter()
        .enumerate()
        .map(|(i, &p)| bci_utility(p, i + 1, timing, n_symbols))
        .collect()
}

/// Binary channel-time support mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportMask {
    pub channels: usize,
    pub timepoints: usize,
    bits: Vec<bool>,
}

impl SupportMask {
    pub fn new(channels: usize, timepoints: usize) -> Self {
        Self {
            channels,
            timepoints,
            bits: vec![false; channels * timepoints],
        }
    }

    pub fn from_fn(channels: usize, timepoints: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut mask = Self::new(channels, timepoints);
        for k in 0..channels {
            for t in 0..timepoints {
                mask.set(k, t, f(k, t));
            }
        }
        mask
    }

    pub fn get(&self, k: usize, t: usize) -> bool {
        self.bits[k * self.timepoints + t]
    }

    pub fn set(&mut self, k: usize, t: usize, v: bool) {
        self.bits[k * self.timepoints + t] = v;
    }

    pub fn count_active(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn check_compatible(&self, other: &SupportMask) -> Result<(), DecodeError> {
        if self.channels != other.channels || self.timepoints != other.timepoints {
            return Err(DecodeError::Structural(format!(
                "mask shapes differ: {}x{} vs {}x{}",
                self.channels, self.timepoints, other.channels, other.timepoints
            )));
        }
        Ok(())
    }
}

/// Effective selection window ratio on one channel: the fraction of truly
/// active timepoints the estimate recovers. `None` when the channel has no
/// active truth (reported as missing, like the "--" cells for null channels).
pub fn eswr(est: &SupportMask, truth: &SupportMask, k: usize) -> Result<Option<f64>, DecodeError> {
    est.check_compatible(truth)?;
    let mut active = 0usize;
    let mut hit = 0usize;
    for t in 0..truth.timepoints {
        if truth.get(k, t) {
            active += 1;
            if est.get(k, t) {
                hit += 1;
            }
        }
    }
    Ok((active > 0).then(|| hit as f64 / active as f64))
}

/// Exclusive effective window ratio on one channel: the fraction of truly
/// inactive timepoints the estimate excludes. `None` when the channel has
/// no inactive truth.
pub fn eewr(est: &SupportMask, truth: &SupportMask, k: usize) -> Result<Option<f64>, DecodeError> {
    est.check_compatible(truth)?;
    let mut inactive = 0usize;
    let mut excluded = 0usize;
    for t in 0..truth.timepoints {
        if !truth.get(k, t) {
            inactive += 1;
            if !est.get(k, t) {
                excluded += 1;
            }
        }
    }
    Ok((inactive > 0).then(|| excluded as f64 / inactive as f64))
}

/// How an estimated support mask is read off the draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupportRule {
    /// Median probability model: include where inclusion probability > 1/2.
    MedianModel,
    /// Include where |posterior mean coefficient| > 1e-8; because draws are
    /// exactly sparse this reproduces the |mean beta| > 0 reading.
    MeanBeta,
}

impl std::str::FromStr for SupportRule {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, DecodeError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "median-model" => Ok(SupportRule::MedianModel),
            "mean-beta" => Ok(SupportRule::MeanBeta),
            other => Err(DecodeError::UnknownRule(other.to_string())),
        }
    }
}

pub fn support_from_draws(draws: &PosteriorDraws, rule: SupportRule) -> SupportMask {
    assert!(draws.n_draws >= 1, "need at least one draw");
    match rule {
        SupportRule::MedianModel => {
            let (incl, _) = draws.posterior_inclusion();
            SupportMask::from_fn(draws.channels, draws.timepoints, |k, t| incl[(k, t)] > 0.5)
        }
        SupportRule::MeanBeta => {
            let mean = draws.posterior_mean_beta();
            SupportMask::from_fn(draws.channels, draws.timepoints, |k, t| {
                mean[(k, t)].abs() > 1e-8
            })
        }
    }
}

/// Average-rank percentiles of per-subject pair inclusion probabilities,
/// averaged across subjects. Percentile of a pair within a subject is
/// 100 * (average rank) / q, so a 4-way tie over q = 4 sits at 62.5.
pub fn pair_percentiles(subject_maps: &[DVector<f64>]) -> Result<DVector<f64>, DecodeError> {
    let first = subject_maps
        .first()
        .ok_or_else(|| DecodeError::InvalidInput("need at least one subject map".into()))?;
    let q = first.len();
    if subject_maps.iter().any(|m| m.len() != q) {
        return Err(DecodeError::Structural(
            "subject maps differ in length".into(),
        ));
    }
    let mut avg = DVector::zeros(q);
    for map in subject_maps {
        let mut order: Vec<usize> = (0..q).collect();
        order.sort_by(|&a, &b| map[a].total_cmp(&map[b]));
        let mut ranks = vec![0.0f64; q];
        let mut i = 0;
        while i < q {
            let mut j = i;
            while j + 1 < q && map[order[j + 1]] == map[order[i]] {
                j += 1;
            }
            // average rank over the tie block, 1-based
            let rank = (i + 1 + j + 1) as f64 / 2.0;
            for &idx in &order[i..=j] {
                ranks[idx] = rank;
            }
            i = j + 1;
        }
        for j in 0..q {
            avg[j] += 100.0 * ranks[j] / q as f64;
        }
    }
    Ok(avg / subject_maps.len() as f64)
}

/// Pairs whose averaged percentile clears a display threshold.
pub fn pairs_above(
    percentiles: &DVector<f64>,
    channels: usize,
    threshold: f64,
) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for idx in 0..percentiles.len() {
        if percentiles[idx] > threshold {
            let (k1, k2) = crate::data::pair_from_index(idx, channels);
            out.push((k1 + 1, k2 + 1, percentiles[idx]));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// CSV reports
// ---------------------------------------------------------------------------

pub fn write_accuracy_csv<W: std::io::Write>(
    curve: &[f64],
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(out, "budget,accuracy")?;
    for (i, a) in curve.iter().enumerate() {
        writeln!(out, "{},{}", i + 1, a)?;
    }
    Ok(())
}

pub fn write_utility_csv<W: std::io::Write>(curve: &[f64], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "budget,bits_per_sec")?;
    for (i, u) in curve.iter().enumerate() {
        writeln!(out, "{},{}", i + 1, u)?;
    }
    Ok(())
}

pub fn write_selection_map_csv<W: std::io::Write>(
    inclusion: &DMatrix<f64>,
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(out, "channel,time_index,prob")?;
    for k in 0..inclusion.nrows() {
        for t in 0..inclusion.ncols() {
            writeln!(out, "{},{},{}", k + 1, t + 1, inclusion[(k, t)])?;
        }
    }
    Ok(())
}

pub fn write_pair_table_csv<W: std::io::Write>(
    values: &DVector<f64>,
    channels: usize,
    header: &str,
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(out, "k1,k2,{header}")?;
    for idx in 0..values.len() {
        let (k1, k2) = crate::data::pair_from_index(idx, channels);
        writeln!(out, "{},{},{}", k1 + 1, k2 + 1, values[idx])?;
    }
    Ok(())
}

pub fn write_support_metrics_csv<W: std::io::Write>(
    est: &SupportMask,
    truth: &SupportMask,
    out: &mut W,
) -> Result<(), DecodeError> {
    writeln!(out, "channel,eswr,eewr").map_err(DecodeError::from_io)?;
    for k in 0..truth.channels {
        let se = eswr(est, truth, k)?;
        let ee = eewr(est, truth, k)?;
        let fmt = |v: Option<f64>| v.map_or("--".to_string(), |x| x.to_string());
        writeln!(out, "{},{},{}", k + 1, fmt(se), fmt(ee)).map_err(DecodeError::from_io)?;
    }
    Ok(())
}

impl DecodeError {
    fn from_io(e: std::io::Error) -> Self {
        DecodeError::Structural(format!("i/o failure writing report: {e}"))
    }
}
