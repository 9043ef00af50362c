//! Overlapping fixed-length windows over a video, and the inverse merge of
//! per-window predictions back onto frames.

use serde::{Deserialize, Serialize};

use crate::datamodel::{Segment, VideoRecord};
use crate::error::{Error, Result};
use crate::gradcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationConfig {
    pub window: usize,
    pub stride: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            window: 300,
            stride: 200,
        }
    }
}

impl SegmentationConfig {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        let cfg = Self { window, stride };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::Config(format!(
                "segmentation needs 1 ≤ stride ≤ window, got stride {} window {}",
                self.stride, self.window
            )));
        }
        Ok(())
    }

    /// `⌊n/s⌋ + 1`, the nominal number of windows for `n` frames.
    pub fn nominal_count(&self, n_frames: usize) -> usize {
        n_frames / self.stride + 1
    }

    /// Windows actually emitted: nominal windows whose first frame is ≤ n.
    pub fn emitted_count(&self, n_frames: usize) -> usize {
        if n_frames == 0 {
            return 0;
        }
        self.nominal_count(n_frames)
            .min((n_frames - 1) / self.stride + 1)
    }

    /// 1-based first frame of the 1-based segment `index`.
    pub fn start_frame(&self, index: usize) -> usize {
        (index - 1) * self.stride + 1
    }
}

/// Cuts `video` into windows of `cfg.window` frames every `cfg.stride` frames.
///
/// Positions past the last frame are zero-filled and marked invalid.
pub fn split(video: &VideoRecord, cfg: &SegmentationConfig) -> Result<Vec<Segment>> {
    cfg.validate()?;
    let n = video.n_frames();
    if n == 0 {
        return Err(Error::invalid(format!("video {} is empty", video.video_id)));
    }
    let (w, dim) = (cfg.window, video.feature_dim());
    let src = video.features.data();
    let segments = (1..=cfg.emitted_count(n))
        .map(|index| {
            let start_frame = cfg.start_frame(index);
            let first = start_frame - 1;
            let real = (n - first).min(w);
            let mut feats = vec![0.0; w * dim];
            feats[..real * dim].copy_from_slice(&src[first * dim..(first + real) * dim]);
            let mut frame_valid = vec![false; w];
            frame_valid[..real].iter_mut().for_each(|v| *v = true);
            Segment {
                video_id: video.video_id.clone(),
                index,
                start_frame,
                features: Tensor::new(&[w, dim], feats).expect("sized above"),
                frame_valid,
                labels: video.labels.window(first, w),
            }
        })
        .collect();
    Ok(segments)
}

/// Averages per-segment outputs (`window × d` each) onto frames `1..=n`,
/// where `n` is the last real frame covered.
///
/// Only real (unpadded) positions contribute. The running mean is taken in
/// segment order regardless of input order, so the result does not depend
/// on how `parts` is arranged.
pub fn merge_predictions(parts: &[(&Segment, &Tensor)]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("merge of zero segments"))?;
    let d = match *first.1.shape() {
        [_, d] => d,
        ref s => {
            return Err(Error::shape(format!(
                "segment output must be 2-D, got {s:?}"
            )))
        }
    };
    let mut order: Vec<&(&Segment, &Tensor)> = parts.iter().collect();
    order.sort_by_key(|(s, _)| (s.start_frame, s.index));
    let mut n = 0;
    for (seg, out) in &order {
        if seg.video_id != first.0.video_id {
            return Err(Error::invalid(format!(
                "merge mixes videos {} and {}",
                first.0.video_id, seg.video_id
            )));
        }
        if out.shape() != [seg.window(), d] {
            return Err(Error::shape(format!(
                "segment {} output {:?}, expected [{}, {d}]",
                seg.index,
                out.shape(),
                seg.window()
            )));
        }
        n = n.max(seg.start_frame - 1 + seg.real_len());
    }
    let mut merged = vec![0.0; n * d];
    let mut counts = vec![0usize; n];
    for (seg, out) in order {
        let base = seg.start_frame - 1;
        for (pos, _) in seg.frame_valid.iter().enumerate().filter(|(_, &v)| v) {
            let frame = base + pos;
            counts[frame] += 1;
            let k = counts[frame] as f64;
            let row = &mut merged[frame * d..(frame + 1) * d];
            for (m, &x) in row.iter_mut().zip(out.row(pos)) {
                *m += (x - *m) / k;
            }
        }
    }
    if let Some(frame) = counts.iter().position(|&c| c == 0) {
        return Err(Error::shape(format!(
            "frame {} of video {} is not covered by any segment",
            frame + 1,
            first.0.video_id
        )));
    }
    Tensor::new(&[n, d], merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{FrameLabels, TaskKind};

    fn video(n: usize) -> VideoRecord {
        let features = Tensor::from_fn(&[n, 2], |i| i as f64);
        let labels = FrameLabels::new(
            TaskKind::Expr,
            (0..n).map(|i| (i % 8) as f64).collect(),
            vec![true; n],
        )
        .unwrap();
        VideoRecord::new("v", features, labels).unwrap()
    }

    fn starts(n: usize, w: usize, s: usize) -> Vec<usize> {
        let cfg = SegmentationConfig::new(w, s).unwrap();
        split(&video(n), &cfg)
            .unwrap()
            .iter()
            .map(|s| s.start_frame)
            .collect()
    }

    #[test]
    fn default_is_300_200() {
        assert_eq!(
            SegmentationConfig::default(),
            SegmentationConfig {
                window: 300,
                stride: 200
            }
        );
    }

    #[test]
    fn seven_hundred_frames() {
        assert_eq!(starts(700, 300, 200), vec![1, 201, 401, 601]);
        let segs = split(&video(700), &SegmentationConfig::default()).unwrap();
        let last = &segs[3];
        assert_eq!(last.index, 4);
        assert_eq!(last.real_len(), 100);
        assert!(last.features.row(100).iter().all(|&v| v == 0.0));
        assert_eq!(last.features.row(99), video(700).features.row(699));
    }

    #[test]
    fn short_video_single_padded_segment() {
        let segs = split(&video(100), &SegmentationConfig::default()).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].start_frame, 1);
        assert_eq!(segs[0].real_len(), 100);
        assert_eq!(segs[0].window(), 300);
        assert!(!segs[0].labels.valid()[100]);
    }

    #[test]
    fn drops_segments_past_the_end() {
        let cfg = SegmentationConfig::new(300, 300).unwrap();
        assert_eq!(cfg.nominal_count(600), 3);
        assert_eq!(starts(600, 300, 300), vec![1, 301]);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(SegmentationConfig::new(10, 11).is_err());
        assert!(SegmentationConfig::new(10, 0).is_err());
    }

    #[test]
    fn merge_without_overlap_concatenates() {
        let v = video(7);
        let cfg = SegmentationConfig::new(3, 3).unwrap();
        let segs = split(&v, &cfg).unwrap();
        let outs: Vec<Tensor> = segs.iter().map(|s| s.features.clone()).collect();
        let parts: Vec<_> = segs.iter().zip(&outs).collect();
        let merged = merge_predictions(&parts).unwrap();
        assert_eq!(merged, v.features);
    }

    #[test]
    fn merge_averages_overlap() {
        let v = video(3);
        let cfg = SegmentationConfig::new(2, 1).unwrap();
        let segs = split(&v, &cfg).unwrap();
        assert_eq!(segs.len(), 3);
        // frame 2 is position 1 of segment 1 and position 0 of segment 2
        let outs = [
            Tensor::new(&[2, 1], vec![0.0, 0.2]).unwrap(),
            Tensor::new(&[2, 1], vec![0.6, 0.0]).unwrap(),
            Tensor::new(&[2, 1], vec![0.0, 9.0]).unwrap(),
        ];
        let parts: Vec<_> = segs.iter().zip(&outs).collect();
        let merged = merge_predictions(&parts).unwrap();
        assert!((merged.data()[1] - 0.4).abs() < 1e-15);
        assert_eq!(merged.shape(), &[3, 1]);
    }

    #[test]
    fn merge_detects_gaps() {
        let v = video(9);
        let segs = split(&v, &SegmentationConfig::new(3, 3).unwrap()).unwrap();
        let outs: Vec<Tensor> = segs.iter().map(|s| s.features.clone()).collect();
        let parts = vec![(&segs[0], &outs[0]), (&segs[2], &outs[2])];
        assert!(merge_predictions(&parts).is_err());
    }
}
