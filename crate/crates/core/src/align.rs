//! Synthetic soft speech-text alignment.
//!
//! Rows are reference tokens, columns are 20 ms frames. Raw scores are
//! built from the dysfluent realization (a triangular bump around the
//! source row of each frame), then softmaxed per column. Padding to the
//! detector canvas happens before normalization: padded rows are masked out
//! of the softmax and padded columns become uniform.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phonology::PhonemeToken;
use crate::simulate::{is_contiguous, total_frames, Annotation, DysfluencyType, TimedPhoneme};

const MAGIC: &[u8; 4] = b"ALNM";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("dysfluent frames are not contiguous")]
    LengthMismatch,
    #[error("token source row {row} is outside the reference (len {len})")]
    BadSource { row: usize, len: usize },
    #[error("{rows}x{cols} does not fit in {c_max}x{t_max}")]
    TooLong {
        rows: usize,
        cols: usize,
        c_max: usize,
        t_max: usize,
    },
    #[error("bad alignment file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignParams {
    /// Score at the centre of the triangular kernel.
    #[serde(default = "default_peak")]
    pub peak: f64,
    #[serde(default = "default_half_width")]
    pub half_width: usize,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
}

fn default_peak() -> f64 {
    6.0
}
fn default_half_width() -> usize {
    2
}
fn default_noise() -> f64 {
    0.05
}

impl Default for AlignParams {
    fn default() -> Self {
        Self {
            peak: default_peak(),
            half_width: default_half_width(),
            noise_sigma: default_noise(),
        }
    }
}

/// Row-major `rows x cols` matrix; `c_len x t_len` is the meaningful block.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    pub rows: usize,
    pub cols: usize,
    pub c_len: usize,
    pub t_len: usize,
    pub values: Vec<f64>,
}

impl AlignmentMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            c_len: rows,
            t_len: cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols);
        Self {
            rows,
            cols,
            c_len: rows,
            t_len: cols,
            values,
        }
    }

    #[inline]
    pub fn get(&self, r: usize, t: usize) -> f64 {
        self.values[r * self.cols + t]
    }

    #[inline]
    pub fn set(&mut self, r: usize, t: usize, v: f64) {
        self.values[r * self.cols + t] = v;
    }

    pub fn column_sum(&self, t: usize) -> f64 {
        (0..self.rows).map(|r| self.get(r, t)).sum()
    }

    /// First row holding the column maximum, over the meaningful rows.
    pub fn argmax_row(&self, t: usize) -> usize {
        let mut best = 0;
        for r in 1..self.c_len {
            if self.get(r, t) > self.get(best, t) {
                best = r;
            }
        }
        best
    }

    pub fn argmax_path(&self) -> Vec<usize> {
        (0..self.t_len).map(|t| self.argmax_row(t)).collect()
    }

    /// Per-frame maximum attention value (diagnostic only).
    pub fn frame_max(&self) -> Vec<f64> {
        (0..self.t_len)
            .map(|t| (0..self.c_len).map(|r| self.get(r, t)).fold(f64::MIN, f64::max))
            .collect()
    }

    /// Copies out the `c_len x t_len` block.
    pub fn block(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.c_len * self.t_len);
        for r in 0..self.c_len {
            let row = r * self.cols;
            out.extend_from_slice(&self.values[row..row + self.t_len]);
        }
        out
    }
}

fn kernel_weight(distance: usize, half_width: usize) -> f64 {
    if distance > half_width {
        0.0
    } else {
        1.0 - distance as f64 / (half_width + 1) as f64
    }
}

/// Builds raw (unnormalized) alignment scores for a dysfluent realization.
///
/// Frames of a token with a source row get a triangular bump centred on that
/// row; inside a replacement span the bump is halved. Silence frames put
/// half the peak on each flanking source row (previous and next non-silence
/// tokens). Gaussian noise is added and the result clipped at zero.
pub fn build_alignment<R: Rng + ?Sized>(
    reference: &[PhonemeToken],
    dysfluent: &[TimedPhoneme],
    annotation: &Annotation,
    params: &AlignParams,
    rng: &mut R,
) -> Result<AlignmentMatrix, AlignError> {
    if !is_contiguous(dysfluent) {
        return Err(AlignError::LengthMismatch);
    }
    let rows = reference.len();
    let cols = total_frames(dysfluent);
    for t in dysfluent {
        if let Some(row) = t.source {
            if row >= rows {
                return Err(AlignError::BadSource { row, len: rows });
            }
        }
    }
    let mut a = AlignmentMatrix::zeros(rows, cols);
    let hw = params.half_width;
    for (i, tok) in dysfluent.iter().enumerate() {
        match tok.source {
            Some(row) => {
                let replaced = annotation.dtype == DysfluencyType::Replacement
                    && tok.start_frame >= annotation.start_frame
                    && tok.end_frame <= annotation.end_frame;
                let amp = if replaced { params.peak * 0.5 } else { params.peak };
                let lo = row.saturating_sub(hw);
                let hi = (row + hw).min(rows - 1);
                for r in lo..=hi {
                    let w = amp * kernel_weight(r.abs_diff(row), hw);
                    for t in tok.start_frame..tok.end_frame {
                        a.set(r, t, w);
                    }
                }
            }
            None => {
                let prev = dysfluent[..i].iter().rev().find_map(|t| t.source);
                let next = dysfluent[i + 1..].iter().find_map(|t| t.source);
                for row in [prev, next].into_iter().flatten() {
                    for t in tok.start_frame..tok.end_frame {
                        a.set(row, t, params.peak * 0.5);
                    }
                }
            }
        }
    }
    if params.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, params.noise_sigma).expect("finite sigma");
        for v in a.values.iter_mut() {
            *v = (*v + noise.sample(rng)).max(0.0);
        }
    }
    Ok(a)
}

/// Column-wise softmax over the first `c_len` rows of the first `t_len`
/// columns. Rows past `c_len` become 0; columns past `t_len` become uniform
/// over all rows.
pub fn normalize_alignment(a: &AlignmentMatrix) -> AlignmentMatrix {
    let mut out = a.clone();
    for t in 0..a.cols {
        if t >= a.t_len {
            let u = 1.0 / a.rows as f64;
            for r in 0..a.rows {
                out.set(r, t, u);
            }
            continue;
        }
        let max = (0..a.c_len).map(|r| a.get(r, t)).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for r in 0..a.c_len {
            let e = (a.get(r, t) - max).exp();
            out.set(r, t, e);
            sum += e;
        }
        for r in 0..a.rows {
            let v = if r < a.c_len { out.get(r, t) / sum } else { 0.0 };
            out.set(r, t, v);
        }
    }
    out
}

/// Zero-pads to `c_max x t_max`, keeping the original extent as metadata.
pub fn pad_alignment(
    a: &AlignmentMatrix,
    c_max: usize,
    t_max: usize,
) -> Result<AlignmentMatrix, AlignError> {
    if a.rows > c_max || a.cols > t_max {
        return Err(AlignError::TooLong {
            rows: a.rows,
            cols: a.cols,
            c_max,
            t_max,
        });
    }
    let mut out = AlignmentMatrix::zeros(c_max, t_max);
    out.c_len = a.c_len;
    out.t_len = a.t_len;
    for r in 0..a.rows {
        out.values[r * t_max..r * t_max + a.cols]
            .copy_from_slice(&a.values[r * a.cols..(r + 1) * a.cols]);
    }
    Ok(out)
}

/// Detector input: pad, then normalize with masking.
pub fn detector_input(
    raw: &AlignmentMatrix,
    c_max: usize,
    t_max: usize,
) -> Result<AlignmentMatrix, AlignError> {
    Ok(normalize_alignment(&pad_alignment(raw, c_max, t_max)?))
}

/// A normalized alignment stored as its meaningful block only.
///
/// Expanding restores padded rows (zero) and padded columns (uniform).
#[derive(Debug, Clone, PartialEq)]
pub struct CompactAlignment {
    pub c_max: usize,
    pub t_max: usize,
    pub c_len: usize,
    pub t_len: usize,
    pub block: Vec<f32>,
}

impl CompactAlignment {
    pub fn from_normalized(a: &AlignmentMatrix) -> Self {
        Self {
            c_max: a.rows,
            t_max: a.cols,
            c_len: a.c_len,
            t_len: a.t_len,
            block: a.block().into_iter().map(|v| v as f32).collect(),
        }
    }

    /// Writes the full `c_max x t_max` input into `buf`.
    pub fn expand_into(&self, buf: &mut Vec<f64>) {
        buf.clear();
        buf.resize(self.c_max * self.t_max, 0.0);
        let u = 1.0 / self.c_max as f64;
        for r in 0..self.c_max {
            let row = &mut buf[r * self.t_max..(r + 1) * self.t_max];
            if r < self.c_len {
                for (dst, src) in row.iter_mut().zip(&self.block[r * self.t_len..(r + 1) * self.t_len]) {
                    *dst = *src as f64;
                }
            }
            for v in row[self.t_len..].iter_mut() {
                *v = u;
            }
        }
    }

    pub fn expand(&self) -> AlignmentMatrix {
        let mut values = Vec::new();
        self.expand_into(&mut values);
        AlignmentMatrix {
            rows: self.c_max,
            cols: self.t_max,
            c_len: self.c_len,
            t_len: self.t_len,
            values,
        }
    }

    /// Little-endian `ALNM` file: header then the row-major f32 block.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), AlignError> {
        w.write_all(MAGIC)?;
        for v in [VERSION, self.c_max as u32, self.t_max as u32, self.c_len as u32, self.t_len as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(self.block.len() * 4);
        for v in &self.block {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, AlignError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(AlignError::Format("bad magic".into()));
        }
        let mut header = [0u32; 5];
        for h in header.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *h = u32::from_le_bytes(b);
        }
        let [version, c_max, t_max, c_len, t_len] = header.map(|v| v as usize);
        if version != VERSION as usize {
            return Err(AlignError::Format(format!("unsupported version {version}")));
        }
        if c_len > c_max || t_len > t_max {
            return Err(AlignError::Format("extent exceeds padded size".into()));
        }
        let mut bytes = vec![0u8; c_len * t_len * 4];
        r.read_exact(&mut bytes)?;
        let block = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            c_max,
            t_max,
            c_len,
            t_len,
            block,
        })
    }
}
