//! Camera/LiDAR time alignment by motion-signal correlation, and keyframe
//! selection by minimal blur.

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::imaging::{blurriness, Panorama};
use crate::pointcloud::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyncParams {
    pub dt: f64,
    pub max_offset: f64,
    pub window: (f64, f64),
}

impl Default for SyncParams {
    fn default() -> Self {
        Self {
            dt: 0.01,
            max_offset: 2.0,
            window: (-0.2, 0.2),
        }
    }
}

/// Uniformly sampled scalar signal; sample `k` sits at `start + k·dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSignal {
    pub start: f64,
    pub dt: f64,
    pub values: Vec<f64>,
}

impl MotionSignal {
    pub fn new(start: f64, dt: f64, values: Vec<f64>) -> Self {
        Self { start, dt, values }
    }

    pub fn timestamp(&self, k: usize) -> f64 {
        self.start + k as f64 * self.dt
    }

    pub fn span(&self) -> f64 {
        self.values.len().saturating_sub(1) as f64 * self.dt
    }
}

/// Rotation-rate magnitude (rad/s) of `traj` resampled at step `dt`.
pub fn motion_signal_from_trajectory(traj: &Trajectory, dt: f64) -> Result<MotionSignal> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let (Some(start), Some(end)) = (traj.start(), traj.end()) else {
        return Err(Error::SpanTooShort {
            span: 0.0,
            required: 2.0 * dt,
        });
    };
    let span = end - start;
    if span < 2.0 * dt {
        return Err(Error::SpanTooShort {
            span,
            required: 2.0 * dt,
        });
    }
    let n = (span / dt + 1e-9).floor() as usize + 1;
    let rotations = (0..n)
        .map(|k| traj.interpolate((start + k as f64 * dt).min(end)))
        .collect::<Result<Vec<Pose>>>()?;
    let values = rotations
        .windows(2)
        .map(|w| w[0].rotation_angle_to(&w[1]) / dt)
        .collect();
    Ok(MotionSignal::new(start, dt, values))
}

/// Pearson correlation of `a[k]` against `b[k + lag]` over the overlap.
fn ncc_at(a: &[f64], b: &[f64], lag: i64) -> Option<f64> {
    let lo = 0.max(-lag) as usize;
    let hi = (a.len() as i64).min(b.len() as i64 - lag);
    if hi - (lo as i64) < 2 {
        return None;
    }
    let hi = hi as usize;
    let n = (hi - lo) as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    for k in lo..hi {
        sa += a[k];
        sb += b[(k as i64 + lag) as usize];
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for k in lo..hi {
        let x = a[k] - ma;
        let y = b[(k as i64 + lag) as usize] - mb;
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    let denom = (saa * sbb).sqrt();
    (denom > 0.0).then(|| sab / denom)
}

fn variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

/// Offset Δt with `a_time + Δt = b_time` (a: camera, b: LiDAR), maximizing
/// normalized cross-correlation within `±max_offset`, refined by a parabola
/// through the peak and its neighbours.
pub fn estimate_time_offset(a: &MotionSignal, b: &MotionSignal, max_offset: f64) -> Result<f64> {
    if (a.dt - b.dt).abs() > 1e-12 * a.dt.abs().max(1.0) || !(a.dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "signals must share a positive step, got {} and {}",
            a.dt, b.dt
        )));
    }
    if !(max_offset >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "max_offset must be non-negative, got {max_offset}"
        )));
    }
    if variance(&a.values) <= 0.0 || variance(&b.values) <= 0.0 {
        return Err(Error::DegenerateSignal);
    }
    let dt = a.dt;
    let base = b.start - a.start;
    let lo = ((-max_offset - base) / dt - 1e-9).ceil() as i64;
    let hi = ((max_offset - base) / dt + 1e-9).floor() as i64;
    let scores: Vec<(i64, f64)> = (lo..=hi)
        .filter_map(|lag| ncc_at(&a.values, &b.values, lag).map(|s| (lag, s)))
        .collect();
    let Some(&(best_lag, best)) = scores.iter().fold(None, |acc: Option<&(i64, f64)>, s| match acc {
        Some(m) if m.1 >= s.1 => Some(m),
        _ => Some(s),
    }) else {
        return Err(Error::DegenerateSignal);
    };
    let at = |lag: i64| scores.iter().find(|s| s.0 == lag).map(|s| s.1);
    let mut frac = 0.0;
    if let (Some(l), Some(r)) = (at(best_lag - 1), at(best_lag + 1)) {
        let curv = l - 2.0 * best + r;
        if curv < 0.0 {
            frac = (0.5 * (l - r) / curv).clamp(-0.5, 0.5);
        }
    }
    Ok(base + (best_lag as f64 + frac) * dt)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub frame: usize,
    /// Camera clock.
    pub timestamp: f64,
    pub blur: f64,
    /// Coarse camera pose in the world frame.
    pub pose: Pose,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyframeSet {
    pub keyframes: Vec<Keyframe>,
    /// VO keyframes skipped for lack of candidate frames.
    pub warnings: usize,
}

/// Candidate frame for selection: id, camera timestamp, blur score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameScore {
    pub frame: usize,
    pub timestamp: f64,
    pub blur: f64,
}

pub fn score_frames(frames: &[(usize, &Panorama)]) -> Vec<FrameScore> {
    let score = |&(frame, img): &(usize, &Panorama)| FrameScore {
        frame,
        timestamp: img.timestamp,
        blur: blurriness(img),
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        frames.par_iter().map(score).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        frames.iter().map(score).collect()
    }
}

/// Picks the sharpest frame within `window` around each VO keyframe time and
/// attaches the trajectory pose at `t + offset`, composed with
/// `camera_in_sensor`.
pub fn select_keyframes(
    vo_keyframes: &[(usize, f64)],
    frames: &[FrameScore],
    window: (f64, f64),
    traj: &Trajectory,
    offset: f64,
    camera_in_sensor: &Pose,
) -> Result<KeyframeSet> {
    if !(window.0 <= 0.0 && window.1 >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "window must bracket zero, got ({}, {})",
            window.0, window.1
        )));
    }
    if frames.windows(2).any(|w| !(w[1].timestamp > w[0].timestamp)) {
        return Err(Error::InvalidParameter("frames must be strictly time-sorted".into()));
    }
    let mut out = KeyframeSet::default();
    for &(vo_id, t) in vo_keyframes {
        let lo = frames.partition_point(|f| f.timestamp < t + window.0);
        let hi = frames.partition_point(|f| f.timestamp <= t + window.1);
        let Some(best) = frames[lo..hi]
            .iter()
            .fold(None, |acc: Option<&FrameScore>, f| match acc {
                Some(b) if b.blur <= f.blur => Some(b),
                _ => Some(f),
            })
        else {
            log::warn!("no frame within the window of VO keyframe {vo_id} at t = {t}");
            out.warnings += 1;
            continue;
        };
        if out.keyframes.iter().any(|k| k.frame == best.frame) {
            continue;
        }
        let pose = match traj.interpolate(best.timestamp + offset) {
            Ok(p) => p.compose(camera_in_sensor),
            Err(e) => {
                log::warn!(
                    "frame {} at t = {} is outside the trajectory: {e}",
                    best.frame,
                    best.timestamp
                );
                out.warnings += 1;
                continue;
            }
        };
        out.keyframes.push(Keyframe {
            frame: best.frame,
            timestamp: best.timestamp,
            blur: best.blur,
            pose,
        });
    }
    out.keyframes.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(out)
}
