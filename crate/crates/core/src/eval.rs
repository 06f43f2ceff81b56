//! Per-frame PSNR/SSIM evaluation of a deinterlacing method on a progressive clip.

use std::fmt::Write as _;
use std::path::Path;

use crate::baseline::{baseline_deinterlace, Baseline};
use crate::error::{Error, Result};
use crate::field::{make_window, synth_interlaced, ClipStream, Frame};
use crate::metrics::{psnr, ssim};
use crate::model::{deinterlace_frame, ModelWeights};

/// Field positions skipped at each end of a clip (their windows are replicate-clamped).
pub const EDGE_EXCLUDED: usize = 2;

/// What produces each progressive frame.
#[derive(Clone, Copy, Debug)]
pub enum Method<'a> {
    Model(&'a ModelWeights<f32>),
    Baseline(Baseline),
    /// The ground truth itself; a sanity anchor.
    GroundTruth,
}

impl Method<'_> {
    pub fn name(&self) -> String {
        match self {
            Method::Model(_) => "model".into(),
            Method::Baseline(b) => format!("baseline={b}"),
            Method::GroundTruth => "ground_truth".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMetric {
    pub frame_index: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub frames: Vec<FrameMetric>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub excluded_edge_frames: usize,
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

impl MetricReport {
    pub fn from_frames(frames: Vec<FrameMetric>, excluded_edge_frames: usize) -> Self {
        let n = frames.len().max(1) as f64;
        let mean_psnr_db = frames.iter().map(|f| f.psnr_db).sum::<f64>() / n;
        let mean_ssim = frames.iter().map(|f| f.ssim).sum::<f64>() / n;
        MetricReport { frames, mean_psnr_db, mean_ssim, excluded_edge_frames }
    }

    /// Pools the frames of several reports into one mean.
    pub fn combine(reports: &[MetricReport]) -> Self {
        let frames = reports.iter().flat_map(|r| r.frames.iter().copied()).collect();
        MetricReport::from_frames(frames, reports.iter().map(|r| r.excluded_edge_frames).sum())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame_index,psnr_db,ssim\n");
        for f in &self.frames {
            let _ = writeln!(s, "{},{},{:.6}", f.frame_index, fmt_psnr(f.psnr_db), f.ssim);
        }
        let _ = writeln!(s, "mean,{},{:.6}", fmt_psnr(self.mean_psnr_db), self.mean_ssim);
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Progressive frame produced by `method` at stream position `index`.
pub fn reconstruct(method: Method<'_>, stream: &ClipStream, clip: &[Frame], index: usize) -> Result<Frame> {
    match method {
        Method::Model(w) => deinterlace_frame(&make_window(stream, index)?, w),
        Method::Baseline(b) => baseline_deinterlace(b, stream, index),
        Method::GroundTruth => Ok(clip[index].clone()),
    }
}

fn frame_metric(method: Method<'_>, stream: &ClipStream, clip: &[Frame], index: usize) -> Result<FrameMetric> {
    let out = reconstruct(method, stream, clip, index)?;
    Ok(FrameMetric { frame_index: index, psnr_db: psnr(&out, &clip[index])?, ssim: ssim(&out, &clip[index])? })
}

/// Interlaces `clip`, deinterlaces every interior position and scores it against the original.
pub fn eval_clip(method: Method<'_>, clip: &[Frame], workers: usize) -> Result<MetricReport> {
    let stream = synth_interlaced(clip)?;
    if clip.len() <= 2 * EDGE_EXCLUDED {
        return Err(Error::Config(format!(
            "evaluation needs more than {} frames, got {}",
            2 * EDGE_EXCLUDED,
            clip.len()
        )));
    }
    let indices: Vec<usize> = (EDGE_EXCLUDED..clip.len() - EDGE_EXCLUDED).collect();
    let workers = workers.clamp(1, indices.len());
    let frames = if workers == 1 {
        indices.iter().map(|&i| frame_metric(method, &stream, clip, i)).collect::<Result<Vec<_>>>()?
    } else {
        let stream = &stream;
        let chunks: Vec<Result<Vec<FrameMetric>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = indices
                .chunks(indices.len().div_ceil(workers))
                .map(|chunk| scope.spawn(move || chunk.iter().map(|&i| frame_metric(method, stream, clip, i)).collect()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        });
        chunks.into_iter().collect::<Result<Vec<_>>>()?.concat()
    };
    Ok(MetricReport::from_frames(frames, 2 * EDGE_EXCLUDED))
}

/// Pooled report over several clips.
pub fn eval_clips(method: Method<'_>, clips: &[Vec<Frame>], workers: usize) -> Result<MetricReport> {
    let reports = clips.iter().map(|c| eval_clip(method, c, workers)).collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::combine(&reports))
}

/// Highest pooled mean PSNR among the classical baselines.
pub fn best_baseline(clips: &[Vec<Frame>], workers: usize) -> Result<(Baseline, MetricReport)> {
    let mut best: Option<(Baseline, MetricReport)> = None;
    for b in Baseline::ALL {
        let r = eval_clips(Method::Baseline(b), clips, workers)?;
        if best.as_ref().map_or(true, |(_, br)| r.mean_psnr_db > br.mean_psnr_db) {
            best = Some((b, r));
        }
    }
    Ok(best.expect("at least one baseline"))
}
