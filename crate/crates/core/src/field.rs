//! Progressive frames, interlaced fields and the five-field network window.
//!
//! Line numbering is 1-based in the usual broadcast sense: the odd field holds
//! scan lines 1, 3, 5, ... which are rows 0, 2, 4, ... in memory. Source frame
//! `i` contributes its odd field when `i` is even and its even field when `i`
//! is odd.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const CHANNELS: usize = 3;
pub const WINDOW_LEN: usize = 5;
pub const REFERENCE_INDEX: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Parity {
    /// Scan lines 1, 3, 5, ... (0-based rows 0, 2, 4, ...).
    Odd,
    /// Scan lines 2, 4, 6, ... (0-based rows 1, 3, 5, ...).
    Even,
}

impl Parity {
    pub fn opposite(self) -> Parity {
        match self {
            Parity::Odd => Parity::Even,
            Parity::Even => Parity::Odd,
        }
    }

    /// First 0-based frame row occupied by this parity.
    pub fn row_offset(self) -> usize {
        match self {
            Parity::Odd => 0,
            Parity::Even => 1,
        }
    }

    /// Parity of the field taken from source frame `index`.
    pub fn for_frame_index(index: usize) -> Parity {
        if index % 2 == 0 {
            Parity::Odd
        } else {
            Parity::Even
        }
    }

    /// The indicator bit of a window whose reference field has this parity.
    pub fn indicator(self) -> u8 {
        match self {
            Parity::Odd => 0,
            Parity::Even => 1,
        }
    }

    pub fn from_indicator(bit: u8) -> Result<Parity> {
        match bit {
            0 => Ok(Parity::Odd),
            1 => Ok(Parity::Even),
            b => Err(Error::Field(format!("indicator must be 0 or 1, got {b}"))),
        }
    }

    pub fn tag(self) -> char {
        match self {
            Parity::Odd => 'O',
            Parity::Even => 'E',
        }
    }

    pub fn from_tag(tag: &str) -> Result<Parity> {
        match tag {
            "O" => Ok(Parity::Odd),
            "E" => Ok(Parity::Even),
            t => Err(Error::Field(format!("parity tag must be O or E, got `{t}`"))),
        }
    }
}

impl fmt::Display for Parity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag())
    }
}

fn check_pixels(height: usize, width: usize, pixels: &[f32]) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Field(format!("empty image {height}x{width}")));
    }
    if pixels.len() != CHANNELS * height * width {
        return Err(Error::Field(format!(
            "{height}x{width} image needs {} samples, got {}",
            CHANNELS * height * width,
            pixels.len()
        )));
    }
    if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Field(format!("pixel value {bad} outside [0, 1]")));
    }
    Ok(())
}

/// Full progressive RGB frame, planar `[3, height, width]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height % 2 != 0 {
            return Err(Error::Field(format!("frame height {height} is odd")));
        }
        check_pixels(height, width, &pixels)?;
        Ok(Frame { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let plane = height * width;
        let pixels = (0..CHANNELS * plane).map(|i| rgb[i / plane]).collect();
        Frame::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    /// Copy of rows `y..y+h`, columns `x..x+w`; `y` and `h` must be even.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Frame> {
        if y % 2 != 0 || h % 2 != 0 || h == 0 || w == 0 || y + h > self.height || x + w > self.width {
            return Err(Error::Field(format!(
                "crop {h}x{w} at ({y},{x}) from {}x{} frame",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(CHANNELS * h * w);
        for c in 0..CHANNELS {
            for row in y..y + h {
                let start = (c * self.height + row) * self.width + x;
                pixels.extend_from_slice(&self.pixels[start..start + w]);
            }
        }
        Ok(Frame { height: h, width: w, pixels })
    }

    /// Rows of this frame with the given parity.
    pub fn field(&self, parity: Parity) -> Field {
        let h = self.height / 2;
        let mut pixels = Vec::with_capacity(CHANNELS * h * self.width);
        for c in 0..CHANNELS {
            for r in 0..h {
                let row = 2 * r + parity.row_offset();
                let start = (c * self.height + row) * self.width;
                pixels.extend_from_slice(&self.pixels[start..start + self.width]);
            }
        }
        Field { parity, height: h, width: self.width, pixels }
    }
}

/// Half-height field, planar `[3, height, width]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    parity: Parity,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Field {
    pub fn new(parity: Parity, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        check_pixels(height, width, &pixels)?;
        Ok(Field { parity, height, width, pixels })
    }

    /// Builds a field from a `[3, h, w]` tensor, clamping values into `[0, 1]`.
    pub fn from_tensor<T: Float>(parity: Parity, t: &Tensor<T>) -> Result<Self> {
        let [CHANNELS, h, w] = t.shape()[..] else {
            return Err(Error::Shape(format!("field tensor must be [3,h,w], got {:?}", t.shape())));
        };
        let pixels = t.data().iter().map(|v| (v.as_f64() as f32).clamp(0.0, 1.0)).collect();
        Field::new(parity, h, w, pixels)
    }

    pub fn parity(&self) -> Parity {
        self.parity
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::new(
            &[CHANNELS, self.height, self.width],
            self.pixels.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("field dimensions are valid")
    }

    pub fn with_parity(mut self, parity: Parity) -> Field {
        self.parity = parity;
        self
    }

    pub fn same_size(&self, other: &Field) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Splits a frame into its (odd, even) fields.
pub fn split_fields(frame: &Frame) -> Result<(Field, Field)> {
    if frame.height % 2 != 0 {
        return Err(Error::Field(format!("frame height {} is odd", frame.height)));
    }
    Ok((frame.field(Parity::Odd), frame.field(Parity::Even)))
}

/// Interleaves the reference field with the estimated opposite-parity field.
///
/// With indicator 0 the reference is an odd field and lands on 0-based even
/// rows; with indicator 1 it is an even field and lands on 0-based odd rows.
pub fn weave(reference: &Field, estimate: &Field, indicator: u8) -> Result<Frame> {
    let ref_parity = Parity::from_indicator(indicator)?;
    if reference.parity != ref_parity {
        return Err(Error::Field(format!(
            "indicator {indicator} needs a {ref_parity} reference field, got {}",
            reference.parity
        )));
    }
    if estimate.parity != ref_parity.opposite() {
        return Err(Error::Field(format!(
            "estimate parity {} is not complementary to reference {}",
            estimate.parity, reference.parity
        )));
    }
    if !reference.same_size(estimate) {
        return Err(Error::Field(format!(
            "reference {}x{} and estimate {}x{} differ",
            reference.height, reference.width, estimate.height, estimate.width
        )));
    }
    let (h, w) = (reference.height, reference.width);
    let mut pixels = vec![0.0f32; CHANNELS * 2 * h * w];
    for f in [reference, estimate] {
        for c in 0..CHANNELS {
            for r in 0..h {
                let row = 2 * r + f.parity.row_offset();
                let dst = (c * 2 * h + row) * w;
                let src = (c * h + r) * w;
                pixels[dst..dst + w].copy_from_slice(&f.pixels[src..src + w]);
            }
        }
    }
    Ok(Frame { height: 2 * h, width: w, pixels })
}

/// One field of a synthetic interlaced stream together with its supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamField {
    pub field: Field,
    pub source_index: usize,
    /// The opposite-parity field of the same source frame.
    pub ground_truth: Option<Field>,
}

/// Interlaced field sequence derived from a progressive clip.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClipStream {
    fields: Vec<StreamField>,
}

impl ClipStream {
    /// Builds a stream from bare fields (no ground truth), checking parity alternation.
    pub fn from_fields(fields: Vec<Field>) -> Result<Self> {
        let first = fields.first().ok_or_else(|| Error::Field("empty field stream".into()))?;
        let base = first.parity.row_offset();
        let size = (first.height, first.width);
        let mut out = Vec::with_capacity(fields.len());
        for (i, f) in fields.into_iter().enumerate() {
            let expected = Parity::for_frame_index(i + base);
            if f.parity != expected {
                return Err(Error::Field(format!("field {i} has parity {}, expected {expected}", f.parity)));
            }
            if (f.height, f.width) != size {
                return Err(Error::Field(format!("field {i} size differs from field 0")));
            }
            out.push(StreamField { field: f, source_index: i + base, ground_truth: None });
        }
        Ok(ClipStream { fields: out })
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn fields(&self) -> &[StreamField] {
        &self.fields
    }

    pub fn get(&self, index: usize) -> Option<&StreamField> {
        self.fields.get(index)
    }

    pub fn field_size(&self) -> Option<(usize, usize)> {
        self.fields.first().map(|f| (f.field.height, f.field.width))
    }
}

/// Interlaces a progressive clip: frame `i` keeps its odd field when `i` is even
/// and its even field when `i` is odd.
pub fn synth_interlaced(clip: &[Frame]) -> Result<ClipStream> {
    let first = clip.first().ok_or_else(|| Error::Field("clip has no frames".into()))?;
    let mut fields = Vec::with_capacity(clip.len());
    for (i, frame) in clip.iter().enumerate() {
        if frame.height != first.height || frame.width != first.width {
            return Err(Error::Field(format!(
                "frame {i} is {}x{}, frame 0 is {}x{}",
                frame.height, frame.width, first.height, first.width
            )));
        }
        let (odd, even) = split_fields(frame)?;
        let (field, gt) = match Parity::for_frame_index(i) {
            Parity::Odd => (odd, even),
            Parity::Even => (even, odd),
        };
        fields.push(StreamField { field, source_index: i, ground_truth: Some(gt) });
    }
    Ok(ClipStream { fields })
}

/// Five consecutive fields centred on the reference plus the indicator bit.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldWindow {
    fields: Vec<Field>,
    indicator: u8,
}

impl FieldWindow {
    pub fn new(fields: Vec<Field>) -> Result<Self> {
        if fields.len() != WINDOW_LEN {
            return Err(Error::Field(format!("window needs {WINDOW_LEN} fields, got {}", fields.len())));
        }
        if fields.iter().any(|f| !f.same_size(&fields[0])) {
            return Err(Error::Field("window fields differ in size".into()));
        }
        let indicator = fields[REFERENCE_INDEX].parity.indicator();
        Ok(FieldWindow { fields, indicator })
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn reference(&self) -> &Field {
        &self.fields[REFERENCE_INDEX]
    }

    pub fn reference_index(&self) -> usize {
        REFERENCE_INDEX
    }

    pub fn indicator(&self) -> u8 {
        self.indicator
    }

    /// Height and width of every field in the window.
    pub fn field_size(&self) -> (usize, usize) {
        (self.fields[0].height, self.fields[0].width)
    }
}

/// Window of stream indices `center-2 ..= center+2`, replicate-clamped at the edges.
pub fn window_indices(len: usize, center: usize) -> [usize; WINDOW_LEN] {
    let mut idx = [0; WINDOW_LEN];
    for (k, slot) in idx.iter_mut().enumerate() {
        let i = center as isize + k as isize - REFERENCE_INDEX as isize;
        *slot = i.clamp(0, len as isize - 1) as usize;
    }
    idx
}

pub fn make_window(stream: &ClipStream, center: usize) -> Result<FieldWindow> {
    if stream.is_empty() {
        return Err(Error::Field("empty field stream".into()));
    }
    if center >= stream.len() {
        return Err(Error::Field(format!("window center {center} outside stream of {}", stream.len())));
    }
    let fields = window_indices(stream.len(), center)
        .iter()
        .map(|&i| stream.fields[i].field.clone())
        .collect();
    FieldWindow::new(fields)
}
