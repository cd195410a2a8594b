//! Per-track metric rows for a finished (or partial) rollout.

use crate::geometry::{Point2, Sim3};
use crate::metrics::{self, MetricError, MetricReport, PoseSource, PoseTrajectory};
use crate::rollout::{RolloutResult, TrackResult};

/// Tracked and target pixels aligned frame by frame.
pub fn track_pairs(track: &TrackResult) -> (Vec<Option<Point2>>, Vec<Option<Point2>>) {
    track
        .tracked
        .iter()
        .map(|s| {
            let target = track.target.at(s.t).filter(|p| p.visible).map(|p| p.pixel);
            (s.pixel, target)
        })
        .unzip()
}

/// One row per track. Generated cameras are compared with the commanded
/// script, and generated frames with ground-truth renders of the same
/// states.
pub fn metric_reports(result: &RolloutResult, clip_id: &str) -> Result<Vec<MetricReport>, MetricError> {
    if result.frames.is_empty() {
        return Err(MetricError::NoCovisibleFrames("metric report"));
    }
    let est = PoseTrajectory::new(PoseSource::Estimated, result.frames.iter().map(|r| (r.index, r.camera.extrinsics)).collect())?;
    let gt = PoseTrajectory::new(PoseSource::GroundTruth, result.frames.iter().map(|r| (r.index, r.camera.extrinsics)).collect())?;
    let rpe = if result.frames.len() < 2 {
        metrics::RpeReport { rot: 0.0, trans: 0.0, cam: 0.0 }
    } else {
        match metrics::rpe(&est, &gt, 1) {
            Ok(r) => r,
            Err(MetricError::Alignment(_)) => metrics::rpe_with_alignment(&est, &gt, 1, &Sim3::identity())?,
            Err(e) => return Err(e),
        }
    };
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for r in &result.frames {
        let generated = result.render_frame(r.index).expect("frame exists");
        let truth = crate::worldsim::render(&result.scene, &r.states, &r.camera.intrinsics, &r.camera.extrinsics, r.index);
        let (p, s) = metrics::psnr_ssim(&generated.image, &truth.image)?;
        psnr_sum += p;
        ssim_sum += s;
    }
    let n = result.frames.len() as f64;
    let first = result.frames[0].camera.extrinsics;
    let max_rot = result.frames.iter().map(|r| r.camera.extrinsics.rotation_angle_to(&first).to_degrees()).fold(0.0, f64::max);
    let cam_translation = (result.frames[result.frames.len() - 1].camera.extrinsics.center() - first.center()).norm();
    let diag = result.scene.intrinsics().diagonal();

    let mut out = Vec::with_capacity(result.tracks.len());
    for track in &result.tracks {
        let (tracked, target) = track_pairs(track);
        let te = metrics::trajectory_error(&tracked, &target)?;
        let covisible = tracked.iter().zip(&target).filter(|(a, b)| a.is_some() && b.is_some()).count();
        let visible: Vec<Point2> = tracked.iter().flatten().copied().collect();
        let displacement = match (visible.first(), visible.last()) {
            (Some(a), Some(b)) => (b - a).norm() / diag,
            _ => 0.0,
        };
        out.push(MetricReport {
            clip_id: if result.tracks.len() == 1 { clip_id.to_string() } else { format!("{clip_id}/{}", track.track_id) },
            te,
            rpe_rot: rpe.rot,
            rpe_trans: rpe.trans,
            rpe_cam: rpe.cam,
            psnr: psnr_sum / n,
            ssim: ssim_sum / n,
            regime: metrics::regime_classify(cam_translation, displacement),
            rot_bucket: metrics::rotation_bucket(max_rot),
            frames: result.frames.len(),
            covisible_frames: covisible,
        });
    }
    Ok(out)
}
