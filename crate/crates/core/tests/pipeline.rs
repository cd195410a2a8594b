use anchorloop_core::eval::{metric_reports, track_pairs};
use anchorloop_core::metrics::trajectory_error;
use anchorloop_core::rollout::{run_rollout, Representation, RolloutConfig};
use anchorloop_core::scenarios;

fn te(max_deg: f64, cfg: impl Fn(&mut RolloutConfig)) -> f64 {
    let sc = scenarios::orbit_scenario(max_deg);
    let mut config = sc.config.clone();
    cfg(&mut config);
    let result = run_rollout(&sc.scene, &sc.trajectories, &sc.cameras, &config).unwrap();
    let (tracked, target) = track_pairs(&result.tracks[0]);
    trajectory_error(&tracked, &target).unwrap()
}

#[test]
fn world_representation_holds_under_orbit() {
    for deg in [0.0, 10.0, 30.0, 60.0] {
        let e = te(deg, |_| {});
        assert!(e < 1.0, "orbit {deg}: te {e}");
    }
}

#[test]
fn biased_depth_ordering() {
    let pixel = te(60.0, |c| c.representation = Representation::Pixel);
    let single = te(60.0, |c| {
        c.initial_depth_bias = 1.1;
        c.refine_depth = false;
    });
    let iterative = te(60.0, |c| {
        c.initial_depth_bias = 1.1;
        c.refine_depth = true;
    });
    assert!(pixel > single && single >= iterative, "{pixel} {single} {iterative}");
}

#[test]
fn reports_cover_every_track_and_are_deterministic() {
    let sc = scenarios::random_scenario(7);
    let a = run_rollout(&sc.scene, &sc.trajectories, &sc.cameras, &sc.config).unwrap();
    let b = run_rollout(&sc.scene, &sc.trajectories, &sc.cameras, &sc.config).unwrap();
    assert_eq!(a, b);
    let reports = metric_reports(&a, "r7").unwrap();
    assert!(!reports.is_empty());
    assert!(reports.iter().all(|r| r.te.is_finite() && r.frames == a.frames.len()));
}
