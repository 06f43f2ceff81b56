//! Classical deinterlacers used as comparison anchors.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::field::{weave, ClipStream, Field, Frame, Parity, CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Baseline {
    /// Repeat each reference line.
    Bob,
    /// Average the reference lines above and below each missing line.
    Linear,
    /// Take the missing lines from the previous (else next) field.
    Weave,
    /// Average the previous and next fields.
    TemporalMean,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::Bob, Baseline::Linear, Baseline::Weave, Baseline::TemporalMean];

    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::Bob => "bob",
            Baseline::Linear => "linear",
            Baseline::Weave => "weave",
            Baseline::TemporalMean => "temporal_mean",
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline `{s}` (expected bob, linear, weave or temporal_mean)")))
    }
}

/// Missing-parity field built row by row from reference rows.
fn intra_field(reference: &Field, row: impl Fn(&[f32], usize, usize) -> Vec<f32>) -> Result<Field> {
    let (h, w) = (reference.height(), reference.width());
    let mut px = vec![0.0; CHANNELS * h * w];
    for c in 0..CHANNELS {
        let plane = &reference.pixels()[c * h * w..(c + 1) * h * w];
        for k in 0..h {
            px[(c * h + k) * w..(c * h + k + 1) * w].copy_from_slice(&row(plane, k, w));
        }
    }
    Field::new(reference.parity().opposite(), h, w, px)
}

fn bob(reference: &Field) -> Result<Field> {
    intra_field(reference, |plane, k, w| plane[k * w..(k + 1) * w].to_vec())
}

fn linear(reference: &Field) -> Result<Field> {
    let h = reference.height();
    // Missing row k sits between reference rows (k, k+1) for an odd reference
    // and (k-1, k) for an even one; edges replicate the single neighbour.
    let (above, below): (Box<dyn Fn(usize) -> usize>, Box<dyn Fn(usize) -> usize>) = match reference.parity() {
        Parity::Odd => (Box::new(|k| k), Box::new(move |k| (k + 1).min(h - 1))),
        Parity::Even => (Box::new(|k: usize| k.saturating_sub(1)), Box::new(|k| k)),
    };
    intra_field(reference, |plane, k, w| {
        let (a, b) = (above(k), below(k));
        plane[a * w..(a + 1) * w].iter().zip(&plane[b * w..(b + 1) * w]).map(|(x, y)| 0.5 * (x + y)).collect()
    })
}

/// Opposite-parity neighbours of stream position `index`, previous first.
fn neighbours(stream: &ClipStream, index: usize) -> (Option<&Field>, Option<&Field>) {
    let prev = index.checked_sub(1).and_then(|i| stream.get(i)).map(|f| &f.field);
    let next = stream.get(index + 1).map(|f| &f.field);
    (prev, next)
}

fn temporal_mean(prev: &Field, next: &Field) -> Result<Field> {
    let px = prev.pixels().iter().zip(next.pixels()).map(|(a, b)| 0.5 * (a + b)).collect();
    Field::new(prev.parity(), prev.height(), prev.width(), px)
}

/// Deinterlaces stream position `index` with a classical method.
pub fn baseline_deinterlace(method: Baseline, stream: &ClipStream, index: usize) -> Result<Frame> {
    let reference = &stream
        .get(index)
        .ok_or_else(|| Error::Field(format!("index {index} outside stream of {}", stream.len())))?
        .field;
    let (prev, next) = neighbours(stream, index);
    let estimate = match method {
        Baseline::Bob => bob(reference)?,
        Baseline::Linear => linear(reference)?,
        Baseline::Weave | Baseline::TemporalMean => match (prev, next) {
            (Some(p), Some(n)) if method == Baseline::TemporalMean => temporal_mean(p, n)?,
            (Some(f), _) | (None, Some(f)) => f.clone(),
            // A single-field stream has no temporal neighbour.
            (None, None) => bob(reference)?,
        },
    };
    weave(reference, &estimate, reference.parity().indicator())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::synth_interlaced;

    #[test]
    fn parse_roundtrip() {
        for b in Baseline::ALL {
            assert_eq!(b.as_str().parse::<Baseline>().unwrap(), b);
        }
        assert!("yadif".parse::<Baseline>().is_err());
    }

    #[test]
    fn bob_repeats_reference_lines() {
        let px: Vec<f32> = (0..3 * 4).map(|i| i as f32 / 12.0).collect();
        let frames = vec![Frame::new(4, 1, px).unwrap(); 3];
        let stream = synth_interlaced(&frames).unwrap();
        // Index 1 has an even reference (rows 1, 3).
        let out = baseline_deinterlace(Baseline::Bob, &stream, 1).unwrap();
        for c in 0..3 {
            assert_eq!(out.get(c, 0, 0), out.get(c, 1, 0));
            assert_eq!(out.get(c, 2, 0), out.get(c, 3, 0));
        }
    }
}
