use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::taxonomy::*;
use super::Pose;

/// Frames per motion cycle at unit speed.
pub const BASE_PERIOD: f64 = 30.0;

/// Rest pose as offsets from the pelvis in grid units, x right, y down. The
/// performer faces the camera, so their left side is at larger x.
const REST: [(f64, f64); 17] = [
    (0.0, -20.0),
    (1.5, -21.5),
    (-1.5, -21.5),
    (3.0, -20.5),
    (-3.0, -20.5),
    (6.0, -14.0),
    (-6.0, -14.0),
    (8.0, -7.0),
    (-8.0, -7.0),
    (9.0, 0.0),
    (-9.0, 0.0),
    (4.0, 0.0),
    (-4.0, 0.0),
    (4.5, 9.0),
    (-4.5, 9.0),
    (5.0, 18.0),
    (-5.0, 18.0),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticAction {
    /// Right wrist sweeps an arc above the head.
    Wave,
    /// Whole body drops and rises with the feet planted.
    Squat,
    /// Left leg steps out sideways, pelvis following.
    Lunge,
    /// Whole body leaves the ground in short impulses.
    Jump,
    /// Wrists converge in front of the chest.
    Clap,
}

impl SyntheticAction {
    pub const ALL: [SyntheticAction; 5] = [
        SyntheticAction::Wave,
        SyntheticAction::Squat,
        SyntheticAction::Lunge,
        SyntheticAction::Jump,
        SyntheticAction::Clap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SyntheticAction::Wave => "wave",
            SyntheticAction::Squat => "squat",
            SyntheticAction::Lunge => "lunge",
            SyntheticAction::Jump => "jump",
            SyntheticAction::Clap => "clap",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    /// Body offsets from the pelvis at motion phase `phase` (radians), plus the
    /// pelvis displacement from its rest position.
    fn offsets(self, phase: f64) -> ([(f64, f64); 17], (f64, f64)) {
        let mut kp = REST;
        // 0 at rest, 1 at the extreme of the motion
        let a = (1.0 - phase.cos()) / 2.0;
        let mut pelvis = (0.0, 0.0);
        match self {
            SyntheticAction::Wave => {
                kp[RIGHT_ELBOW] = (-10.0, -19.0);
                kp[RIGHT_WRIST] = (-10.0 + 6.0 * phase.sin(), -26.0 + 1.5 * phase.cos());
            }
            SyntheticAction::Squat => {
                let d = 8.0 * a;
                pelvis.1 = d;
                // feet stay planted: knees bend outward, shins absorb the drop
                for k in [LEFT_KNEE, RIGHT_KNEE] {
                    kp[k].0 += kp[k].0.signum() * 2.5 * a;
                    kp[k].1 -= d / 2.0;
                }
                for k in [LEFT_ANKLE, RIGHT_ANKLE] {
                    kp[k].1 -= d;
                }
                for k in [LEFT_WRIST, RIGHT_WRIST] {
                    kp[k].1 -= 8.0 * a;
                }
            }
            SyntheticAction::Lunge => {
                pelvis = (3.0 * a, 3.0 * a);
                kp[LEFT_KNEE].0 += 6.0 * a;
                kp[LEFT_ANKLE].0 += 8.5 * a;
                kp[LEFT_ANKLE].1 -= 3.0 * a;
                kp[RIGHT_KNEE].0 -= 3.0 * a;
                kp[RIGHT_ANKLE].0 -= 3.0 * a;
                kp[RIGHT_ANKLE].1 -= 3.0 * a;
            }
            SyntheticAction::Jump => {
                let lift = 6.0 * phase.sin().max(0.0).powi(2);
                pelvis.1 = -lift;
                for k in [LEFT_WRIST, RIGHT_WRIST] {
                    kp[k].0 += kp[k].0.signum() * 2.0 * lift / 6.0;
                    kp[k].1 -= 4.0 * lift / 6.0;
                }
            }
            SyntheticAction::Clap => {
                kp[LEFT_ELBOW] = (8.0 - 2.0 * a, -7.0 - 3.0 * a);
                kp[RIGHT_ELBOW] = (-8.0 + 2.0 * a, -7.0 - 3.0 * a);
                kp[LEFT_WRIST] = (9.0 - 8.0 * a, -10.0 * a);
                kp[RIGHT_WRIST] = (-9.0 + 8.0 * a, -10.0 * a);
            }
        }
        (kp, pelvis)
    }
}

/// Per-performer variation, fixed by subject id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectParams {
    pub limb_scale: f64,
    pub speed: f64,
}

pub const LIMB_SCALE_RANGE: (f64, f64) = (0.85, 1.15);
pub const SPEED_RANGE: (f64, f64) = (0.8, 1.2);

impl SubjectParams {
    pub fn for_subject(subject: u16, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5bd1_e995u64.wrapping_mul(subject as u64 + 1)));
        SubjectParams {
            limb_scale: rng.random_range(LIMB_SCALE_RANGE.0..=LIMB_SCALE_RANGE.1),
            speed: rng.random_range(SPEED_RANGE.0..=SPEED_RANGE.1),
        }
    }
}

/// Everything needed to trace one sample's keypoints over time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Performance {
    pub action: SyntheticAction,
    pub subject: SubjectParams,
    /// Motion phase at frame 0, radians.
    pub phase: f64,
    pub height: usize,
    pub width: usize,
    /// Keep every keypoint at least this far inside the grid.
    pub margin: f64,
}

impl Performance {
    pub fn pelvis_rest(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, self.height as f64 * 0.56)
    }

    pub fn pose_at(&self, frame: usize) -> Pose {
        let phase = self.phase + TAU * self.subject.speed * frame as f64 / BASE_PERIOD;
        let (kp, shift) = self.action.offsets(phase);
        let s = self.subject.limb_scale;
        let (px, py) = self.pelvis_rest();
        let (px, py) = (px + s * shift.0, py + s * shift.1);
        let (xmax, ymax) = (self.width as f64 - 1.0 - self.margin, self.height as f64 - 1.0 - self.margin);
        let mut pose = [(0.0, 0.0); 17];
        for (p, (dx, dy)) in pose.iter_mut().zip(kp) {
            *p = (
                (px + s * dx).clamp(self.margin, xmax),
                (py + s * dy).clamp(self.margin, ymax),
            );
        }
        pose
    }

    pub fn poses(&self, frames: usize) -> Vec<Pose> {
        (0..frames).map(|t| self.pose_at(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn perf(action: SyntheticAction, scale: f64) -> Performance {
        Performance {
            action,
            subject: SubjectParams { limb_scale: scale, speed: 1.2 },
            phase: 0.0,
            height: 64,
            width: 48,
            margin: 0.0,
        }
    }

    #[test]
    fn extreme_subjects_stay_inside_margin_without_clamping() {
        for action in SyntheticAction::ALL {
            for scale in [LIMB_SCALE_RANGE.0, LIMB_SCALE_RANGE.1] {
                let p = perf(action, scale);
                for t in 0..60 {
                    for (x, y) in p.pose_at(t) {
                        assert!((4.0..=43.0).contains(&x), "{action:?} x={x}");
                        assert!((4.0..=59.0).contains(&y), "{action:?} y={y}");
                    }
                }
            }
        }
    }

    #[test]
    fn subject_params_are_deterministic_and_in_range() {
        for s in 1..=8 {
            let a = SubjectParams::for_subject(s, 7);
            assert_eq!(a, SubjectParams::for_subject(s, 7));
            assert!((0.85..=1.15).contains(&a.limb_scale));
            assert!((0.8..=1.2).contains(&a.speed));
        }
        assert_ne!(SubjectParams::for_subject(1, 7), SubjectParams::for_subject(2, 7));
    }

    #[test]
    fn names_round_trip() {
        for a in SyntheticAction::ALL {
            assert_eq!(SyntheticAction::from_name(a.name()), Some(a));
        }
    }
}
