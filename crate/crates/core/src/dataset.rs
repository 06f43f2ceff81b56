//! Synthetic progressive clips of moving textured rectangles, and training-sample extraction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{window_indices, Field, FieldWindow, Frame, Parity, CHANNELS, REFERENCE_INDEX};
use crate::model::parse_value;
use crate::ppm;

/// Shape of a generated synthetic set.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// The last `held_out` clips are reserved for evaluation.
    pub held_out: usize,
    pub rects_per_clip: usize,
    /// Per-axis speed range in pixels per field.
    pub min_speed: usize,
    pub max_speed: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            clips: 8,
            frames: 32,
            height: 64,
            width: 64,
            held_out: 2,
            rects_per_clip: 3,
            min_speed: 1,
            max_speed: 4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub const KEYS: &'static [&'static str] = &[
        "clips",
        "frames",
        "height",
        "width",
        "held_out",
        "rects_per_clip",
        "min_speed",
        "max_speed",
        "synth_seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = || parse_value::<usize>(key, value);
        match key {
            "clips" => self.clips = v()?,
            "frames" => self.frames = v()?,
            "height" => self.height = v()?,
            "width" => self.width = v()?,
            "held_out" => self.held_out = v()?,
            "rects_per_clip" => self.rects_per_clip = v()?,
            "min_speed" => self.min_speed = v()?,
            "max_speed" => self.max_speed = v()?,
            "synth_seed" => self.seed = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown dataset key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "clips={}\nframes={}\nheight={}\nwidth={}\nheld_out={}\nrects_per_clip={}\nmin_speed={}\nmax_speed={}\nsynth_seed={}\n",
            self.clips,
            self.frames,
            self.height,
            self.width,
            self.held_out,
            self.rects_per_clip,
            self.min_speed,
            self.max_speed,
            self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.held_out > self.clips || self.min_speed == 0 || self.min_speed > self.max_speed {
            return Err(Error::Config(format!("invalid synthetic set configuration {self:?}")));
        }
        if self.frames == 0 || self.height == 0 || self.height % 2 != 0 || self.width == 0 {
            return Err(Error::Config("frames, width and an even height must be positive".into()));
        }
        Ok(())
    }
}

/// Generated clips split into training and held-out sets.
#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub train: Vec<Vec<Frame>>,
    pub held_out: Vec<Vec<Frame>>,
    /// Speed (pixels per field) of each clip, training clips first.
    pub speeds: Vec<usize>,
}

/// Smooth random plane: a coarse random lattice upsampled bilinearly.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f32> {
    let (gh, gw) = (h / cell + 2, w / cell + 2);
    let grid: Vec<f32> = (0..gh * gw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f32 / cell as f32;
        let (y0, ty) = (fy as usize, fy.fract());
        for x in 0..w {
            let fx = x as f32 / cell as f32;
            let (x0, tx) = (fx as usize, fx.fract());
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Planar RGB texture: base colour, two noise octaves and oriented stripes.
fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f32> {
    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.8));
    let coarse = value_noise(rng, h, w, 8);
    let fine = value_noise(rng, h, w, 2);
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::PI);
    let period: f32 = rng.gen_range(3.0..9.0);
    let (s, c) = angle.sin_cos();
    let stripe_amp: f32 = rng.gen_range(0.05..0.2);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.5..1.0));
    let mut px = vec![0.0; CHANNELS * h * w];
    for ch in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let phase = (y as f32 * s + x as f32 * c) * std::f32::consts::TAU / period;
                let v = base[ch] + 0.25 * coarse[i] + 0.12 * fine[i] * tint[ch] + stripe_amp * phase.sin();
                px[ch * h * w + i] = v.clamp(0.0, 1.0);
            }
        }
    }
    px
}

struct Rect {
    y: isize,
    x: isize,
    h: usize,
    w: usize,
    vy: isize,
    vx: isize,
    tex: Vec<f32>,
}

/// One clip: static textured background with rectangles moving (and wrapping) at `speed` px/field.
pub fn generate_clip(rng: &mut ChaCha8Rng, cfg: &SynthConfig, speed: usize) -> Result<Vec<Frame>> {
    let (h, w) = (cfg.height, cfg.width);
    let background = texture(rng, h, w);
    let directions: [(isize, isize); 8] = [(0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1)];
    let max_side = (h.min(w) / 2).max(4);
    let rects: Vec<Rect> = (0..cfg.rects_per_clip)
        .map(|_| {
            let rh = rng.gen_range(max_side / 3..=max_side);
            let rw = rng.gen_range(max_side / 3..=max_side);
            let (dy, dx) = *directions.choose(rng).expect("non-empty");
            Rect {
                y: rng.gen_range(0..h) as isize,
                x: rng.gen_range(0..w) as isize,
                h: rh,
                w: rw,
                vy: dy * speed as isize,
                vx: dx * speed as isize,
                tex: texture(rng, rh, rw),
            }
        })
        .collect();
    (0..cfg.frames)
        .map(|t| {
            let mut px = background.clone();
            for r in &rects {
                let top = r.y + r.vy * t as isize;
                let left = r.x + r.vx * t as isize;
                for ly in 0..r.h {
                    let y = (top + ly as isize).rem_euclid(h as isize) as usize;
                    for lx in 0..r.w {
                        let x = (left + lx as isize).rem_euclid(w as isize) as usize;
                        for c in 0..CHANNELS {
                            px[(c * h + y) * w + x] = r.tex[(c * r.h + ly) * r.w + lx];
                        }
                    }
                }
            }
            // Quantised so in-memory clips equal their PPM round-trip.
            Frame::new(h, w, ppm::quantize(&px))
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let span = cfg.max_speed - cfg.min_speed + 1;
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    let mut speeds = Vec::new();
    for i in 0..cfg.clips {
        // Speeds cycle through the range so every split sees several of them.
        let speed = cfg.min_speed + i % span;
        let clip = generate_clip(&mut rng, cfg, speed)?;
        speeds.push(speed);
        if i < cfg.clips - cfg.held_out {
            train.push(clip);
        } else {
            held_out.push(clip);
        }
    }
    Ok(SyntheticSet { train, held_out, speeds })
}

pub const TRAIN_DIR: &str = "train";
pub const HELD_OUT_DIR: &str = "heldout";

pub fn clip_dir_name(index: usize) -> String {
    format!("clip_{index:03}")
}

impl SyntheticSet {
    /// Writes `train/clip_NNN/` and `heldout/clip_NNN/` PPM directories under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        for (sub, clips) in [(TRAIN_DIR, &self.train), (HELD_OUT_DIR, &self.held_out)] {
            for (i, clip) in clips.iter().enumerate() {
                ppm::write_clip(&root.join(sub).join(clip_dir_name(i)), clip)?;
            }
        }
        Ok(())
    }
}

/// Loads every clip subdirectory of `dir` in lexicographic order.
pub fn load_clips(dir: &Path) -> Result<Vec<Vec<Frame>>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::data(dir, "no clip directories found"));
    }
    dirs.iter().map(|d| ppm::read_clip(d)).collect()
}

/// One supervised example: a window and the missing field of its reference frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub window: FieldWindow,
    pub target: Field,
}

/// Crops the frames around `center` and builds the window and its target.
pub fn make_sample(clip: &[Frame], center: usize, y: usize, x: usize, crop_h: usize, crop_w: usize) -> Result<Sample> {
    let fields = window_indices(clip.len(), center)
        .iter()
        .map(|&i| Ok(clip[i].crop(y, x, crop_h, crop_w)?.field(Parity::for_frame_index(i))))
        .collect::<Result<Vec<_>>>()?;
    let reference_parity = fields[REFERENCE_INDEX].parity();
    let target = clip[center].crop(y, x, crop_h, crop_w)?.field(reference_parity.opposite());
    Ok(Sample { window: FieldWindow::new(fields)?, target })
}

/// Seeded source of random training crops with alternating indicator bits.
pub struct Sampler<'a> {
    clips: &'a [Vec<Frame>],
    crop: usize,
    rng: ChaCha8Rng,
    drawn: usize,
}

impl<'a> Sampler<'a> {
    pub fn new(clips: &'a [Vec<Frame>], crop: usize, seed: u64) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::Config("no training clips".into()));
        }
        if crop == 0 || crop % 2 != 0 {
            return Err(Error::Config(format!("crop_size must be even and positive, got {crop}")));
        }
        for clip in clips {
            let f = clip.first().ok_or_else(|| Error::Config("empty training clip".into()))?;
            if f.height() < crop || f.width() < crop {
                return Err(Error::Config(format!("crop {crop} exceeds frame size {}x{}", f.height(), f.width())));
            }
            if clip.len() < 2 {
                return Err(Error::Config("training clips need at least 2 frames".into()));
            }
        }
        Ok(Sampler { clips, crop, rng: ChaCha8Rng::seed_from_u64(seed), drawn: 0 })
    }

    /// Next sample; indicator bits alternate 0, 1, 0, … so both branches train equally.
    pub fn next_sample(&mut self) -> Result<Sample> {
        let want_even_center = self.drawn % 2 == 0;
        self.drawn += 1;
        let clip = &self.clips[self.rng.gen_range(0..self.clips.len())];
        let n = clip.len();
        // Interior centres when the clip allows, matching evaluation.
        let (lo, hi) = if n > 4 { (2, n - 2) } else { (0, n) };
        let candidates: Vec<usize> = (lo..hi).filter(|c| (c % 2 == 0) == want_even_center).collect();
        let center = *candidates.choose(&mut self.rng).ok_or_else(|| Error::Config("clip too short".into()))?;
        let (h, w) = (clip[0].height(), clip[0].width());
        let y = 2 * self.rng.gen_range(0..=(h - self.crop) / 2);
        let x = self.rng.gen_range(0..=w - self.crop);
        make_sample(clip, center, y, x, self.crop, self.crop)
    }

    pub fn next_batch(&mut self, n: usize) -> Result<Vec<Sample>> {
        (0..n).map(|_| self.next_sample()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_split() {
        let cfg = SynthConfig { clips: 3, frames: 4, height: 16, width: 16, held_out: 1, ..Default::default() };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!((a.train.len(), a.held_out.len()), (2, 1));
        assert_eq!(a.speeds, vec![1, 2, 3]);
        assert!(a.train[0].iter().all(|f| f.height() == 16 && f.width() == 16));
    }

    #[test]
    fn rectangles_move_between_frames() {
        let cfg = SynthConfig { clips: 1, frames: 2, held_out: 0, ..Default::default() };
        let set = generate(&cfg).unwrap();
        assert_ne!(set.train[0][0], set.train[0][1]);
    }

    #[test]
    fn sampler_alternates_indicator_and_aligns_target() {
        let cfg = SynthConfig { clips: 1, frames: 8, height: 16, width: 16, held_out: 0, ..Default::default() };
        let set = generate(&cfg).unwrap();
        let mut s = Sampler::new(&set.train, 8, 3).unwrap();
        for i in 0..6 {
            let sample = s.next_sample().unwrap();
            assert_eq!(sample.window.indicator(), (i % 2) as u8);
            assert_eq!(sample.target.parity(), sample.window.reference().parity().opposite());
            assert_eq!(sample.window.field_size(), (4, 8));
        }
        assert!(Sampler::new(&set.train, 7, 0).is_err());
    }
}
